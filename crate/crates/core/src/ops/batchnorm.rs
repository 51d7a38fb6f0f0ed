use super::{backward_sign, OpKind};
use crate::error::{Error, Result};
use crate::parallel::for_each_chunk;
use crate::tensor::{Real, Shape4, Tensor4};
use crate::Mode;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Running mean/variance tracked across training batches, one entry per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

/// Values saved by the forward pass for [`batchnorm2d_backward`].
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub normalized: Tensor4<T>,
    pub inv_std: Vec<T>,
    pub mode: Mode,
}

fn check_params<T>(x: Shape4, gamma: &[T], beta: &[T]) -> Result<()> {
    if gamma.len() != x.c {
        return Err(Error::shape("batchnorm2d", "gamma length", x.c, gamma.len()));
    }
    if beta.len() != x.c {
        return Err(Error::shape("batchnorm2d", "beta length", x.c, beta.len()));
    }
    Ok(())
}

/// Per-channel `(mean, biased variance)` over `(n, h, w)`, summed batch-first.
fn channel_stats<T: Real>(x: &Tensor4<T>) -> Vec<(T, T)> {
    let s = x.shape();
    let count = T::from_f64((s.n * s.plane()) as f64);
    let xd = x.data();
    let mut stats = vec![(T::zero(), T::zero()); s.c];
    for_each_chunk(&mut stats, 1, |c, slot| {
        let mut sum = T::zero();
        for b in 0..s.n {
            for &v in &xd[(b * s.c + c) * s.plane()..][..s.plane()] {
                sum += v;
            }
        }
        let mean = sum / count;
        let mut sq = T::zero();
        for b in 0..s.n {
            for &v in &xd[(b * s.c + c) * s.plane()..][..s.plane()] {
                let d = v - mean;
                sq += d * d;
            }
        }
        slot[0] = (mean, sq / count);
    });
    stats
}

fn normalize<T: Real>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    inv_std: &[T],
    mode: Mode,
) -> (Tensor4<T>, BatchNormCache<T>) {
    let s = x.shape();
    let mut normalized = x.clone();
    for_each_chunk(normalized.data_mut(), s.plane(), |idx, plane| {
        let c = idx % s.c;
        for v in plane.iter_mut() {
            *v = (*v - mean[c]) * inv_std[c];
        }
    });
    let mut out = normalized.clone();
    for_each_chunk(out.data_mut(), s.plane(), |idx, plane| {
        let c = idx % s.c;
        for v in plane.iter_mut() {
            *v = gamma[c] * *v + beta[c];
        }
    });
    out.debug_assert_finite("batchnorm2d");
    (
        out,
        BatchNormCache {
            normalized,
            inv_std: inv_std.to_vec(),
            mode,
        },
    )
}

/// Training-mode normalization with batch statistics. Returns the output, the
/// backward cache and the batch `(mean, biased variance)` per channel.
pub fn batchnorm2d_train<T: Real>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> Result<(Tensor4<T>, BatchNormCache<T>, Vec<(T, T)>)> {
    check_params(x.shape(), gamma, beta)?;
    let stats = channel_stats(x);
    let eps = T::from_f64(eps);
    let mean: Vec<T> = stats.iter().map(|s| s.0).collect();
    let inv_std: Vec<T> = stats.iter().map(|s| T::one() / (s.1 + eps).sqrt()).collect();
    let (out, cache) = normalize(x, gamma, beta, &mean, &inv_std, Mode::Train);
    Ok((out, cache, stats))
}

/// Inference-mode normalization with running statistics; touches nothing.
pub fn batchnorm2d_infer<T: Real>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    stats: &RunningStats<T>,
    eps: f64,
) -> Result<(Tensor4<T>, BatchNormCache<T>)> {
    check_params(x.shape(), gamma, beta)?;
    if stats.mean.len() != x.shape().c || stats.var.len() != x.shape().c {
        return Err(Error::shape("batchnorm2d", "running stats length", x.shape().c, stats.mean.len()));
    }
    let eps = T::from_f64(eps);
    let inv_std: Vec<T> = stats.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    Ok(normalize(x, gamma, beta, &stats.mean, &inv_std, Mode::Infer))
}

/// Mode-dispatching batch norm. In train mode the running statistics move by an
/// exponential moving average: `r ← (1 − momentum)·r + momentum·batch`.
pub fn batchnorm2d<T: Real>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    stats: &mut RunningStats<T>,
    mode: Mode,
    cfg: BatchNormConfig,
) -> Result<(Tensor4<T>, BatchNormCache<T>)> {
    match mode {
        Mode::Infer => batchnorm2d_infer(x, gamma, beta, stats, cfg.eps),
        Mode::Train => {
            let (out, cache, batch) = batchnorm2d_train(x, gamma, beta, cfg.eps)?;
            let m = T::from_f64(cfg.momentum);
            let keep = T::one() - m;
            for (c, (mean, var)) in batch.into_iter().enumerate() {
                stats.mean[c] = keep * stats.mean[c] + m * mean;
                stats.var[c] = keep * stats.var[c] + m * var;
            }
            Ok((out, cache))
        }
    }
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn batchnorm2d_backward<T: Real>(
    cache: &BatchNormCache<T>,
    gamma: &[T],
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Vec<T>, Vec<T>)> {
    let sign = backward_sign::<T>(OpKind::BatchNorm2d);
    let s = cache.normalized.shape();
    grad_out.shape().expect("batchnorm2d_backward", s)?;
    if gamma.len() != s.c {
        return Err(Error::shape("batchnorm2d_backward", "gamma length", s.c, gamma.len()));
    }
    let xh = cache.normalized.data();
    let gd = grad_out.data();

    let mut sums = vec![(T::zero(), T::zero()); s.c];
    for_each_chunk(&mut sums, 1, |c, slot| {
        let (mut sg, mut sgx) = (T::zero(), T::zero());
        for b in 0..s.n {
            let off = (b * s.c + c) * s.plane();
            for (&g, &xv) in gd[off..off + s.plane()].iter().zip(&xh[off..off + s.plane()]) {
                sg += g;
                sgx += g * xv;
            }
        }
        slot[0] = (sg, sgx);
    });

    let count = T::from_f64((s.n * s.plane()) as f64);
    let mut gx = Tensor4::zeros(s);
    let train = cache.mode == Mode::Train;
    for_each_chunk(gx.data_mut(), s.plane(), |idx, plane| {
        let c = idx % s.c;
        let off = idx * s.plane();
        let scale = gamma[c] * cache.inv_std[c];
        let (sg, sgx) = sums[c];
        for (k, v) in plane.iter_mut().enumerate() {
            let g = gd[off + k];
            *v = if train {
                scale * (g - sg / count - xh[off + k] * sgx / count)
            } else {
                scale * g
            } * sign;
        }
    });
    let grad_gamma = sums.iter().map(|s| s.1 * sign).collect();
    let grad_beta = sums.iter().map(|s| s.0 * sign).collect();
    Ok((gx, grad_gamma, grad_beta))
}
