use super::{backward_sign, scale_in_place, valid_range, OpKind};
use crate::error::{Error, Result};
use crate::parallel::for_each_chunk;
use crate::tensor::{Real, Shape4, Tensor4};

/// Involution window parameters. Padding is implied: `dilation · (K − 1) / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InvolutionGeometry {
    pub kernel_size: usize,
    pub groups: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl InvolutionGeometry {
    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel_size - 1) / 2
    }

    fn taps(&self) -> usize {
        self.kernel_size * self.kernel_size
    }

    fn validate(&self, x: Shape4) -> Result<()> {
        if self.kernel_size.is_multiple_of(2) || self.kernel_size == 0 {
            return Err(Error::arg("involution2d", format!("kernel size {} must be odd", self.kernel_size)));
        }
        if self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return Err(Error::arg("involution2d", "stride, dilation and groups must be >= 1"));
        }
        if !x.c.is_multiple_of(self.groups) {
            return Err(Error::arg(
                "involution2d",
                format!("{} channels not divisible into {} groups", x.c, self.groups),
            ));
        }
        Ok(())
    }
}

/// Spatial output size: the convolution size law with same-padding, i.e.
/// `floor((len − 1)/stride) + 1`.
pub fn involution_output_size(len: usize, stride: usize) -> usize {
    (len - 1) / stride + 1
}

fn expected_kernel_shape(x: Shape4, g: &InvolutionGeometry) -> Shape4 {
    Shape4::new(
        x.n,
        g.groups * g.taps(),
        involution_output_size(x.h, g.stride),
        involution_output_size(x.w, g.stride),
    )
}

/// Per-pixel, per-group kernels applied to every channel of the group.
///
/// `kernels` is `(n, G·K², H_out, W_out)` with channel `g·K² + u·K + v` holding tap
/// `(u, v)` of group `g`. Each output element accumulates its taps in `(u, v)`
/// order starting from zero; taps that fall outside the input contribute nothing.
pub fn involution2d<T: Real>(
    x: &Tensor4<T>,
    kernels: &Tensor4<T>,
    geom: InvolutionGeometry,
) -> Result<Tensor4<T>> {
    let xs = x.shape();
    geom.validate(xs)?;
    let ks = expected_kernel_shape(xs, &geom);
    kernels.shape().expect("involution2d", ks)?;
    let os = Shape4::new(xs.n, xs.c, ks.h, ks.w);
    let k = geom.kernel_size;
    let per_group = xs.c / geom.groups;
    let (stride, dil, pad) = (geom.stride, geom.dilation as isize, geom.padding() as isize);
    let xd = x.data();
    let kd = kernels.data();

    let mut out = Tensor4::zeros(os);
    for_each_chunk(out.data_mut(), os.plane(), |idx, plane| {
        let (b, c) = (idx / xs.c, idx % xs.c);
        let grp = c / per_group;
        let xp = &xd[(b * xs.c + c) * xs.plane()..][..xs.plane()];
        for u in 0..k {
            let off_r = u as isize * dil - pad;
            let (i0, i1) = valid_range(os.h, xs.h, stride, off_r);
            for v in 0..k {
                let off_c = v as isize * dil - pad;
                let (j0, j1) = valid_range(os.w, xs.w, stride, off_c);
                if j0 == j1 {
                    continue;
                }
                let kc = grp * k * k + u * k + v;
                let kp = &kd[(b * ks.c + kc) * ks.plane()..][..ks.plane()];
                for i in i0..i1 {
                    let y = ((i * stride) as isize + off_r) as usize;
                    for j in j0..j1 {
                        let xx = ((j * stride) as isize + off_c) as usize;
                        plane[i * os.w + j] += kp[i * os.w + j] * xp[y * xs.w + xx];
                    }
                }
            }
        }
    });
    out.debug_assert_finite("involution2d");
    Ok(out)
}

/// Exact adjoint of [`involution2d`]: gradients for both the input and the kernel field.
pub fn involution2d_backward<T: Real>(
    x: &Tensor4<T>,
    kernels: &Tensor4<T>,
    geom: InvolutionGeometry,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let sign = backward_sign::<T>(OpKind::Involution2d);
    let xs = x.shape();
    geom.validate(xs)?;
    let ks = expected_kernel_shape(xs, &geom);
    kernels.shape().expect("involution2d_backward", ks)?;
    let os = Shape4::new(xs.n, xs.c, ks.h, ks.w);
    grad_out.shape().expect("involution2d_backward", os)?;
    let k = geom.kernel_size;
    let taps = k * k;
    let per_group = xs.c / geom.groups;
    let (stride, dil, pad) = (geom.stride, geom.dilation as isize, geom.padding() as isize);
    let xd = x.data();
    let kd = kernels.data();
    let gd = grad_out.data();

    let mut grad_x = Tensor4::zeros(xs);
    for_each_chunk(grad_x.data_mut(), xs.plane(), |idx, gx| {
        let (b, c) = (idx / xs.c, idx % xs.c);
        let grp = c / per_group;
        let gp = &gd[(b * os.c + c) * os.plane()..][..os.plane()];
        for u in 0..k {
            let off_r = u as isize * dil - pad;
            let (i0, i1) = valid_range(os.h, xs.h, stride, off_r);
            for v in 0..k {
                let off_c = v as isize * dil - pad;
                let (j0, j1) = valid_range(os.w, xs.w, stride, off_c);
                if j0 == j1 {
                    continue;
                }
                let kc = grp * taps + u * k + v;
                let kp = &kd[(b * ks.c + kc) * ks.plane()..][..ks.plane()];
                for i in i0..i1 {
                    let y = ((i * stride) as isize + off_r) as usize;
                    for j in j0..j1 {
                        let xx = ((j * stride) as isize + off_c) as usize;
                        gx[y * xs.w + xx] += kp[i * os.w + j] * gp[i * os.w + j];
                    }
                }
            }
        }
    });

    let mut grad_k = Tensor4::zeros(ks);
    for_each_chunk(grad_k.data_mut(), ks.plane(), |idx, gk| {
        let (b, kc) = (idx / ks.c, idx % ks.c);
        let (grp, tap) = (kc / taps, kc % taps);
        let (u, v) = (tap / k, tap % k);
        let off_r = u as isize * dil - pad;
        let off_c = v as isize * dil - pad;
        let (i0, i1) = valid_range(os.h, xs.h, stride, off_r);
        let (j0, j1) = valid_range(os.w, xs.w, stride, off_c);
        for c in grp * per_group..(grp + 1) * per_group {
            let xp = &xd[(b * xs.c + c) * xs.plane()..][..xs.plane()];
            let gp = &gd[(b * os.c + c) * os.plane()..][..os.plane()];
            for i in i0..i1 {
                let y = ((i * stride) as isize + off_r) as usize;
                for j in j0..j1 {
                    let xx = ((j * stride) as isize + off_c) as usize;
                    gk[i * os.w + j] += gp[i * os.w + j] * xp[y * xs.w + xx];
                }
            }
        }
    });

    scale_in_place(grad_x.data_mut(), sign);
    scale_in_place(grad_k.data_mut(), sign);
    Ok((grad_x, grad_k))
}
