//! The full 64-bit gradient-check suite: every op, every layer, and the
//! end-to-end toy network, each over several seeds.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_coords_skipping, Coord, GradCheckReport, DEFAULT_STEP};
use crate::error::{Error, Result};
use crate::layers::{
    ConvBlock, DipcBlock, DipcConfig, Init, InvolutionConfig, InvolutionLayer, Mixer, Module, Slot, SlotMut,
    Switches,
};
use crate::loss::{tversky_loss, TverskyParams};
use crate::model::{SpeedNet, SpeedNetConfig};
use crate::ops::{self, ConvGeometry, ConvSpec, InvolutionGeometry, OpKind};
use crate::tensor::{Shape4, Tensor4};
use crate::Mode;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const LOSS_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SuiteOptions {
    pub seeds: u64,
    /// Parameters sampled for the end-to-end network check.
    pub model_samples: usize,
    /// Backward kernel to negate while the suite runs.
    pub flip: Option<OpKind>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seeds: 5,
            model_samples: 200,
            flip: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub tolerance: f64,
    /// Worst relative error across all seeds.
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub worst: Option<Coord>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
    pub skipped: usize,
    pub error: Option<String>,
    pub elapsed: Duration,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_rel_error < self.tolerance
    }

    pub fn summary(&self) -> String {
        let status = if self.passed() { "ok  " } else { "FAIL" };
        match (&self.error, self.worst) {
            (Some(e), _) => format!("{status} {:<22} error: {e}", self.name),
            (None, Some(c)) => format!(
                "{status} {:<22} max rel err {:.3e} (tol {:.0e}) over {} coords ({} at kinks skipped); worst seed {} tensor {} index {} analytic {:.6e} numeric {:.6e}",
                self.name,
                self.max_rel_error,
                self.tolerance,
                self.checked,
                self.skipped,
                self.worst_seed,
                c.tensor,
                c.index,
                self.worst_analytic,
                self.worst_numeric
            ),
            (None, None) => format!("{status} {:<22} no coordinates checked", self.name),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub results: Vec<CheckResult>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.results.iter().filter(|r| !r.passed()).map(|r| r.name).collect()
    }
}

type Check = fn(u64, &SuiteOptions) -> Result<GradCheckReport>;

/// Every check in the suite with its tolerance, in run order.
pub const CHECKS: [(&str, f64, Check); 16] = [
    ("conv2d", OP_TOLERANCE, check_conv2d),
    ("involution2d", OP_TOLERANCE, check_involution2d),
    ("maxpool2d", OP_TOLERANCE, check_maxpool2d),
    ("avgpool2d", OP_TOLERANCE, check_avgpool2d),
    ("upsample2x", OP_TOLERANCE, check_upsample2x),
    ("batchnorm2d", OP_TOLERANCE, check_batchnorm2d),
    ("relu", OP_TOLERANCE, check_relu),
    ("sigmoid", OP_TOLERANCE, check_sigmoid),
    ("add", OP_TOLERANCE, check_add),
    ("mul", OP_TOLERANCE, check_mul),
    ("tversky", LOSS_TOLERANCE, check_tversky),
    ("involution_layer", OP_TOLERANCE, check_involution_layer),
    ("conv_block", OP_TOLERANCE, check_conv_block),
    ("dipc_block", OP_TOLERANCE, check_dipc_block),
    ("dipc_block_conv_mixer", OP_TOLERANCE, check_dipc_conv_mixer),
    ("speednet_end_to_end", MODEL_TOLERANCE, check_model),
];

/// Runs one named check over all seeds.
pub fn run_check(name: &'static str, tolerance: f64, check: Check, opts: &SuiteOptions) -> CheckResult {
    let mut res = CheckResult {
        name,
        tolerance,
        max_rel_error: 0.0,
        worst_seed: 0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
        skipped: 0,
        error: None,
        elapsed: Duration::ZERO,
    };
    let start = Instant::now();
    ops::with_flipped_backward(opts.flip, || {
        for seed in 0..opts.seeds {
            match check(seed, opts) {
                Ok(r) => {
                    res.checked += r.checked;
                    res.skipped += r.skipped;
                    if res.worst.is_none() || r.max_rel_error > res.max_rel_error {
                        res.max_rel_error = r.max_rel_error;
                        res.worst_seed = seed;
                        res.worst = r.worst;
                        res.worst_analytic = r.worst_analytic;
                        res.worst_numeric = r.worst_numeric;
                    }
                }
                Err(e) => {
                    res.error = Some(format!("seed {seed}: {e}"));
                    break;
                }
            }
        }
    });
    res.elapsed = start.elapsed();
    res
}

pub fn run_suite(opts: &SuiteOptions) -> SuiteReport {
    let start = Instant::now();
    let results = CHECKS
        .iter()
        .map(|&(name, tol, check)| run_check(name, tol, check, opts))
        .collect();
    SuiteReport {
        results,
        elapsed: start.elapsed(),
    }
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt)
}

fn uniform(rng: &mut ChaCha8Rng, shape: Shape4, lo: f64, hi: f64) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn dot(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Checks `backward` against `L = Σ r ⊙ forward(inputs)` for a random `r`.
fn check_op(
    rng: &mut ChaCha8Rng,
    inputs: Vec<Tensor4<f64>>,
    forward: impl Fn(&[Tensor4<f64>]) -> Result<Tensor4<f64>>,
    backward: impl Fn(&[Tensor4<f64>], &Tensor4<f64>) -> Result<Vec<Tensor4<f64>>>,
) -> Result<GradCheckReport> {
    let out = forward(&inputs)?;
    let r = uniform(rng, out.shape(), -1.0, 1.0);
    let analytic = backward(&inputs, &r)?;
    super::grad_check(&inputs, &analytic, DEFAULT_STEP, |xs| Ok(dot(&forward(xs)?, &r)))
}

const CONV_GEOMETRIES: [(usize, usize, usize); 5] = [(1, 1, 1), (1, 2, 2), (2, 1, 1), (1, 3, 3), (2, 2, 0)];

fn check_conv2d(seed: u64, _: &SuiteOptions) -> Result<GradCheckReport> {
    let mut r = rng(seed, 1);
    let (stride, dilation, padding) = CONV_GEOMETRIES[seed as usize % CONV_GEOMETRIES.len()];
    let geometry = ConvGeometry { stride, dilation, padding };
    let inputs = vec![
        uniform(&mut r, Shape4::new(2, 4, 6, 6), -1.0, 1.0),
        uniform(&mut r, Shape4::new(3, 4, 3, 3), -1.0, 1.0),
        uniform(&mut r, Shape4::new(3, 1, 1, 1), -1.0, 1.0),
    ];
    fn spec(xs: &[Tensor4<f64>], geometry: ConvGeometry) -> ConvSpec<'_, f64> {
        ConvSpec {
            kernel: &xs[1],
            bias: xs[2].data(),
            geometry,
        }
    }
    check_op(
        &mut r,
        inputs,
        |xs| ops::conv2d(&xs[0], &spec(xs, geometry)),
        |xs, g| {
            let grads = ops::conv2d_backward(&xs[0], &spec(xs, geometry), g)?;
            let bias = Tensor4::from_vec(Shape4::new(grads.bias.len(), 1, 1, 1), grads.bias)?;
            Ok(vec![grads.input, grads.kernel, bias])
        },
    )
}

fn check_involution2d(seed: u64, _: &SuiteOptions) -> Result<GradCheckReport> {
    let mut r = rng(seed, 2);
    let groups = [1, 2, 4][seed as usize % 3];
    let geom = InvolutionGeometry {
        kernel_size: 3,
        groups,
        stride: 1 + (seed as usize % 2),
        dilation: 1 + (seed as usize % 3),
    };
    let out = ops::involution_output_size(6, geom.stride);
    let inputs = vec![
        uniform(&mut r, Shape4::new(2, 4, 6, 6), -1.0, 1.0),
        uniform(&mut r, Shape4::new(2, groups * 9, out, out), -1.0, 1.0),
    ];
    check_op(
        &mut r,
        inputs,
        |xs| ops::involution2d(&xs[0], &xs[1], geom),
        |xs, g| {
            let (gx, gk) = ops::involution2d_backward(&xs[0], &xs[1], geom, g)?;
            Ok(vec![gx, gk])
        },
    )
}

fn check_maxpool2d(seed: u64, _: &SuiteOptions) -> Result<GradCheckReport> {
    let mut r = rng(seed, 3);
    let (k, s) = [(2, 2), (3, 1), (3, 2)][seed as usize % 3];
    let inputs = vec![uniform(&mut r, Shape4::new(2, 4, 6, 6), -1.0, 1.0)];
    check_op(
        &mut r,
        inputs,
        |xs| Ok(ops::maxpool2d(&xs[0], k, s)?.0),
        |xs, g| {
            let (_, idx) = ops::maxpool2d(&xs[0], k, s)?;
            Ok(vec![ops::maxpool2d_backward(&idx, g)?])
        },
    )
}

fn check_avgpool2d(seed: u64, _: &SuiteOptions) -> Result<GradCheckReport> {
    let mut r = rng(seed, 4);
    let k = [2, 3][seed as usize % 2];
    let inputs = vec![uniform(&mut r, Shape4::new(2, 4, 6, 6), -1.0, 1.0)];
    check_op(
        &mut r,
        inputs,
        |xs| ops::avgpool2d(&xs[0], k),
        |xs, g| Ok(vec![ops::avgpool2d_backward(xs[0].shape(), k, g)?]),
    )
}

fn check_upsample2x(seed: u64, _: &SuiteOptions) -> Result<GradCheckReport> {
    let mut r = rng(seed, 5);
    let inputs = vec![uniform(&mut r, Shape4::new(2, 4, 3, 3), -1.0, 1.0)];
    check_op(
        &mut r,
        inputs,
        |xs| Ok(ops::upsample2x(&xs[0])),
        |_, g| Ok(vec![ops::upsample2x_backward(g)?]),
    )
}

fn check_batchnorm2d(seed: u64, _: &SuiteOptions) -> Result<GradCheckReport> {
    let mut r = rng(seed, 6);
    let inputs = vec![
        uniform(&mut r, Shape4::new(2, 4, 6, 6), -2.0, 2.0),
        uniform(&mut r, Shape4::new(4, 1, 1, 1), 0.5, 1.5),
        uniform(&mut r, Shape4::new(4, 1, 1, 1), -1.0, 1.0),
    ];
    let eps = ops::BatchNormConfig::default().eps;
    check_op(
        &mut r,
        inputs,
        |xs| Ok(ops::batchnorm2d_train(&xs[0], xs[1].data(), xs[2].data(), eps)?.0),
        |xs, g| {
            let (_, cache, _) = ops::batchnorm2d_train(&xs[0], xs[1].data(), xs[2].data(), eps)?;
            let (gx, gg, gb) = ops::batchnorm2d_backward(&cache, xs[1].data(), g)?;
            let s = xs[1].shape();
            Ok(vec![gx, Tensor4::from_vec(s, gg)?, Tensor4::from_vec(s, gb)?])
        },
    )
}

fn check_relu(seed: u64, _: &SuiteOptions) -> Result<GradCheckReport> {
    let mut r = rng(seed, 7);
    // Keep every input away from the kink at 0.
    let x = Tensor4::from_fn(Shape4::new(2, 4, 6, 6), |_| {
        let m = r.random_range(0.05..1.0);
        if r.random_bool(0.5) {
            m
        } else {
            -m
        }
    });
    check_op(
        &mut r,
        vec![x],
        |xs| Ok(ops::relu(&xs[0])),
        |xs, g| Ok(vec![ops::relu_backward(&xs[0], g)?]),
    )
}

fn check_sigmoid(seed: u64, _: &SuiteOptions) -> Result<GradCheckReport> {
    let mut r = rng(seed, 8);
    let inputs = vec![uniform(&mut r, Shape4::new(2, 4, 6, 6), -4.0, 4.0)];
    check_op(
        &mut r,
        inputs,
        |xs| Ok(ops::sigmoid(&xs[0])),
        |xs, g| Ok(vec![ops::sigmoid_backward(&ops::sigmoid(&xs[0]), g)?]),
    )
}

fn check_add(seed: u64, _: &SuiteOptions) -> Result<GradCheckReport> {
    let mut r = rng(seed, 9);
    let s = Shape4::new(2, 4, 6, 6);
    let inputs = vec![uniform(&mut r, s, -1.0, 1.0), uniform(&mut r, s, -1.0, 1.0)];
    check_op(
        &mut r,
        inputs,
        |xs| ops::add(&xs[0], &xs[1]),
        |_, g| {
            let (a, b) = ops::add_backward(g);
            Ok(vec![a, b])
        },
    )
}

fn check_mul(seed: u64, _: &SuiteOptions) -> Result<GradCheckReport> {
    let mut r = rng(seed, 10);
    let s = Shape4::new(2, 4, 6, 6);
    let inputs = vec![uniform(&mut r, s, -1.0, 1.0), uniform(&mut r, s, -1.0, 1.0)];
    check_op(
        &mut r,
        inputs,
        |xs| ops::mul(&xs[0], &xs[1]),
        |xs, g| {
            let (a, b) = ops::mul_backward(&xs[0], &xs[1], g)?;
            Ok(vec![a, b])
        },
    )
}

fn check_tversky(seed: u64, _: &SuiteOptions) -> Result<GradCheckReport> {
    let mut r = rng(seed, 11);
    let s = Shape4::new(2, 1, 6, 6);
    let pred = uniform(&mut r, s, 0.05, 0.95);
    let target = Tensor4::from_fn(s, |_| if r.random_bool(0.4) { 1.0 } else { 0.0 });
    let params = [
        TverskyParams::default(),
        TverskyParams { alpha: 0.5, beta: 0.5, smooth: 0.0 },
        TverskyParams { alpha: 0.7, beta: 0.3, smooth: 1.0 },
    ][seed as usize % 3];
    let (_, grad) = tversky_loss(&pred, &target, &params)?;
    super::grad_check(&[pred], &[grad], DEFAULT_STEP, |xs| Ok(tversky_loss(&xs[0], &target, &params)?.0))
}

/// Number of trainable tensors and their lengths, in visit order.
fn param_lens<M: Module<f64>>(m: &M) -> Vec<usize> {
    let mut lens = Vec::new();
    m.visit("", &mut |_, s| {
        if let Slot::Param(p) = s {
            lens.push(p.value.len());
        }
    });
    lens
}

fn param_grads<M: Module<f64>>(m: &M) -> Vec<Tensor4<f64>> {
    let mut out = Vec::new();
    m.visit("", &mut |_, s| {
        if let Slot::Param(p) = s {
            out.push(p.grad.clone());
        }
    });
    out
}

/// Applies `f` to one scalar of the `which`-th trainable tensor.
fn with_param<M: Module<f64>>(m: &mut M, which: usize, index: usize, f: impl FnOnce(&mut f64)) {
    let mut k = 0;
    let mut f = Some(f);
    m.visit_mut("", &mut |_, s| {
        if let SlotMut::Param(p) = s {
            if k == which {
                if let Some(f) = f.take() {
                    f(&mut p.value.data_mut()[index]);
                }
            }
            k += 1;
        }
    });
}

/// Checks a layer's input and parameter gradients under `L = mean(r ⊙ forward(x))`.
///
/// `forward` also returns the pass's switch pattern; a shifted evaluation whose
/// pattern differs from the unshifted one crossed a kink and is skipped.
/// Tensor 0 is the input (skipped when `backward` returns no input gradient);
/// tensor `k ≥ 1` is the `k−1`-th trainable tensor. With `limit`, coordinates
/// are visited in seeded random order until that many have been compared.
fn check_module<M: Module<f64> + Clone>(
    rng: &mut ChaCha8Rng,
    module: &M,
    input: &Tensor4<f64>,
    forward: impl Fn(&M, &Tensor4<f64>) -> Result<(Tensor4<f64>, Vec<u32>)>,
    backward: impl Fn(&mut M, &Tensor4<f64>, &Tensor4<f64>) -> Result<Option<Tensor4<f64>>>,
    limit: Option<usize>,
) -> Result<GradCheckReport> {
    let (out, base) = forward(module, input)?;
    let n = out.len() as f64;
    let r = uniform(rng, out.shape(), -1.0, 1.0).map(|v| v / n);
    let mut m = module.clone();
    m.zero_grad();
    let grad_in = backward(&mut m, input, &r)?;
    let mut analytic = vec![grad_in.clone().unwrap_or_else(|| Tensor4::zeros(input.shape()))];
    analytic.extend(param_grads(&m));

    let mut lens = vec![if grad_in.is_some() { input.len() } else { 0 }];
    lens.extend(param_lens(module));
    let mut coords = super::all_coords(&lens);
    if limit.is_some() {
        coords.shuffle(rng);
    }
    let mut work = module.clone();
    let mut x = input.clone();
    let probe = |work: &M, x: &Tensor4<f64>| -> Result<Option<f64>> {
        let (o, pattern) = forward(work, x)?;
        Ok((pattern == base).then(|| dot(&o, &r)))
    };
    let report = check_coords_skipping(
        &coords,
        |c| analytic[c.tensor].data()[c.index],
        DEFAULT_STEP,
        limit.unwrap_or(usize::MAX),
        |c, delta| {
            if c.tensor == 0 {
                let orig = x.data()[c.index];
                x.data_mut()[c.index] = orig + delta;
                let v = probe(&work, &x);
                x.data_mut()[c.index] = orig;
                v
            } else {
                let mut orig = 0.0;
                with_param(&mut work, c.tensor - 1, c.index, |v| {
                    orig = *v;
                    *v += delta;
                });
                let v = probe(&work, &x);
                with_param(&mut work, c.tensor - 1, c.index, |v| *v = orig);
                v
            }
        },
    )?;
    if let Some(want) = limit {
        if report.checked < want {
            return Err(Error::arg(
                "gradcheck",
                format!("only {} of {want} coordinates lie on a smooth piece", report.checked),
            ));
        }
    }
    Ok(report)
}

fn pattern(cache: &impl Switches) -> Vec<u32> {
    let mut out = Vec::new();
    cache.switches(&mut out);
    out
}

fn check_involution_layer(seed: u64, _: &SuiteOptions) -> Result<GradCheckReport> {
    let mut r = rng(seed, 12);
    let stride = 1 + seed as usize % 2;
    let cfg = InvolutionConfig {
        channels: 4,
        kernel_size: 3,
        groups: [1, 2][seed as usize % 2],
        reduction: 2,
        dilation: 1 + seed as usize % 3,
        stride,
    };
    let layer = InvolutionLayer::<f64>::new(&mut Init::new(seed), cfg)?;
    let x = uniform(&mut r, Shape4::new(2, 4, 6, 6), -1.0, 1.0);
    check_module(
        &mut r,
        &layer,
        &x,
        |l, x| {
            let (y, c) = l.forward(x, Mode::Train)?;
            Ok((y, pattern(&c)))
        },
        |l, x, g| {
            let (_, cache) = l.forward(x, Mode::Train)?;
            Ok(Some(l.backward(&cache, g)?))
        },
        None,
    )
}

fn check_conv_block(seed: u64, _: &SuiteOptions) -> Result<GradCheckReport> {
    let mut r = rng(seed, 13);
    let block = ConvBlock::<f64>::new(&mut Init::new(seed), 4, 3, 3, 1 + seed as usize % 2);
    let x = uniform(&mut r, Shape4::new(2, 4, 6, 6), -1.0, 1.0);
    check_module(
        &mut r,
        &block,
        &x,
        |b, x| {
            let (y, c) = b.forward(x, Mode::Train)?;
            Ok((y, pattern(&c)))
        },
        |b, x, g| {
            let (_, cache) = b.forward(x, Mode::Train)?;
            Ok(Some(b.backward(&cache, g)?))
        },
        None,
    )
}

fn dipc_case(seed: u64, salt: u64, mixer: Mixer) -> Result<GradCheckReport> {
    let mut r = rng(seed, salt);
    let block = DipcBlock::<f64>::new(
        &mut Init::new(seed),
        DipcConfig {
            level: 1,
            channels: 4,
            dilations: vec![1, 2, 4],
            mixer,
            residual: seed.is_multiple_of(2),
        },
    )?;
    // Both inputs are max-pooled inside the block; shifting them down centres the
    // pooled values on zero, so no downstream ReLU channel is active everywhere and
    // no bias gradient is cancelled to exactly zero by the batch norm after it.
    let f = uniform(&mut r, Shape4::new(2, 4, 8, 8), -1.6, 0.4);
    let image = uniform(&mut r, Shape4::new(2, 3, 8, 8), -1.6, 0.4);
    check_module(
        &mut r,
        &block,
        &f,
        |b, f| {
            let (y, c) = b.forward(f, &image, Mode::Train)?;
            Ok((y, pattern(&c)))
        },
        |b, f, g| {
            let (_, cache) = b.forward(f, &image, Mode::Train)?;
            Ok(Some(b.backward(&cache, g)?))
        },
        None,
    )
}

fn check_dipc_block(seed: u64, _: &SuiteOptions) -> Result<GradCheckReport> {
    dipc_case(seed, 14, Mixer::Involution { kernel_size: 3, reduction: 2 })
}

fn check_dipc_conv_mixer(seed: u64, _: &SuiteOptions) -> Result<GradCheckReport> {
    dipc_case(seed, 15, Mixer::Convolution { kernel_size: 3 })
}

fn check_model(seed: u64, opts: &SuiteOptions) -> Result<GradCheckReport> {
    let mut r = rng(seed, 16);
    let cfg = SpeedNetConfig {
        seed,
        ..SpeedNetConfig::toy(32)
    };
    let model = SpeedNet::<f64>::new(cfg)?;
    let x = uniform(&mut r, Shape4::new(2, 3, 32, 32), 0.0, 1.0);
    check_module(
        &mut r,
        &model,
        &x,
        |m, x| {
            let (y, c) = m.forward(x, Mode::Train)?;
            Ok((y, pattern(&c)))
        },
        |m, x, g| {
            let (_, cache) = m.forward(x, Mode::Train)?;
            m.backward(&cache, g)?;
            Ok(None)
        },
        Some(opts.model_samples),
    )
}
