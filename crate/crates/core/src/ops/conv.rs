use super::{backward_sign, scale_in_place, valid_range, OpKind};
use crate::error::{Error, Result};
use crate::parallel::for_each_chunk;
use crate::tensor::{Real, Shape4, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry {
            stride: 1,
            dilation: 1,
            padding: 0,
        }
    }
}

impl ConvGeometry {
    /// Stride 1 with the padding that keeps spatial size for a `k × k` kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        ConvGeometry {
            stride: 1,
            dilation,
            padding: dilation * (kernel - 1) / 2,
        }
    }

    /// `floor((len + 2·pad − d·(k−1) − 1)/stride) + 1`, or `None` when that is below 1.
    pub fn output_len(&self, len: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = len + 2 * self.padding;
        if self.stride == 0 || padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// A convolution's kernel `(out, in, kh, kw)`, per-output-channel bias and geometry.
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec<'a, T> {
    pub kernel: &'a Tensor4<T>,
    pub bias: &'a [T],
    pub geometry: ConvGeometry,
}

impl<T: Real> ConvSpec<'_, T> {
    fn output_shape(&self, x: Shape4) -> Result<Shape4> {
        let k = self.kernel.shape();
        if x.c != k.c {
            return Err(Error::shape("conv2d", "in_channels", k.c, x.c));
        }
        if self.bias.len() != k.n {
            return Err(Error::shape("conv2d", "bias length", k.n, self.bias.len()));
        }
        if self.geometry.stride == 0 || self.geometry.dilation == 0 {
            return Err(Error::arg("conv2d", "stride and dilation must be >= 1"));
        }
        let ho = self
            .geometry
            .output_len(x.h, k.h)
            .ok_or_else(|| Error::arg("conv2d", format!("output height < 1 for input height {}", x.h)))?;
        let wo = self
            .geometry
            .output_len(x.w, k.w)
            .ok_or_else(|| Error::arg("conv2d", format!("output width < 1 for input width {}", x.w)))?;
        Ok(Shape4::new(x.n, k.n, ho, wo))
    }
}

/// Unrolls batch entry `b` of `x` into `(in_channel, kernel_row, kernel_col)`
/// rows, one column per output pixel; padded taps are zero.
fn im2col<T: Real>(x: &Tensor4<T>, b: usize, ks: Shape4, os: Shape4, g: ConvGeometry, col: &mut [T]) {
    let xs = x.shape();
    let (stride, dil, pad) = (g.stride, g.dilation as isize, g.padding as isize);
    let xd = x.data();
    let taps = ks.h * ks.w;
    for_each_chunk(col, taps * os.plane(), |c, rows| {
        let xp = &xd[(b * xs.c + c) * xs.plane()..][..xs.plane()];
        rows.fill(T::zero());
        for u in 0..ks.h {
            let off_r = u as isize * dil - pad;
            let (i0, i1) = valid_range(os.h, xs.h, stride, off_r);
            for v in 0..ks.w {
                let off_c = v as isize * dil - pad;
                let (j0, j1) = valid_range(os.w, xs.w, stride, off_c);
                if j0 == j1 {
                    continue;
                }
                let row = &mut rows[(u * ks.w + v) * os.plane()..][..os.plane()];
                for i in i0..i1 {
                    let y = ((i * stride) as isize + off_r) as usize;
                    let xrow = &xp[y * xs.w..][..xs.w];
                    let dst = &mut row[i * os.w..][j0..j1];
                    if stride == 1 {
                        let x0 = (j0 as isize + off_c) as usize;
                        dst.copy_from_slice(&xrow[x0..x0 + (j1 - j0)]);
                    } else {
                        for (j, d) in (j0..j1).zip(dst) {
                            *d = xrow[((j * stride) as isize + off_c) as usize];
                        }
                    }
                }
            }
        }
    });
}

/// Adds the columns of `col` back onto the pixels they were read from (the adjoint of [`im2col`]).
fn col2im<T: Real>(col: &[T], ks: Shape4, os: Shape4, g: ConvGeometry, xs: Shape4, gx: &mut [T]) {
    let (stride, dil, pad) = (g.stride, g.dilation as isize, g.padding as isize);
    let taps = ks.h * ks.w;
    for_each_chunk(gx, xs.plane(), |c, plane| {
        let rows = &col[c * taps * os.plane()..][..taps * os.plane()];
        for u in 0..ks.h {
            let off_r = u as isize * dil - pad;
            let (i0, i1) = valid_range(os.h, xs.h, stride, off_r);
            for v in 0..ks.w {
                let off_c = v as isize * dil - pad;
                let (j0, j1) = valid_range(os.w, xs.w, stride, off_c);
                if j0 == j1 {
                    continue;
                }
                let row = &rows[(u * ks.w + v) * os.plane()..][..os.plane()];
                for i in i0..i1 {
                    let y = ((i * stride) as isize + off_r) as usize;
                    let xrow = &mut plane[y * xs.w..][..xs.w];
                    let src = &row[i * os.w..][j0..j1];
                    if stride == 1 {
                        let x0 = (j0 as isize + off_c) as usize;
                        for (d, &v) in xrow[x0..x0 + (j1 - j0)].iter_mut().zip(src) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in (j0..j1).zip(src) {
                            xrow[((j * stride) as isize + off_c) as usize] += v;
                        }
                    }
                }
            }
        }
    });
}

/// Dilated cross-correlation.
///
/// Each output element starts at zero, accumulates `w · x` over
/// `(in_channel, kernel_row, kernel_col)` in that order (padded taps add an
/// exact zero), and adds the bias last.
pub fn conv2d<T: Real>(x: &Tensor4<T>, spec: &ConvSpec<'_, T>) -> Result<Tensor4<T>> {
    let xs = x.shape();
    let os = spec.output_shape(xs)?;
    let ks = spec.kernel.shape();
    let rows = ks.c * ks.h * ks.w;
    let kernel = spec.kernel.data();
    let bias = spec.bias;

    let mut out = Tensor4::zeros(os);
    let mut col = vec![T::zero(); rows * os.plane()];
    for (b, out_b) in out.data_mut().chunks_mut(os.c * os.plane()).enumerate() {
        im2col(x, b, ks, os, spec.geometry, &mut col);
        for_each_chunk(out_b, os.plane(), |o, plane| {
            for (k, &w) in kernel[o * rows..][..rows].iter().enumerate() {
                for (d, &v) in plane.iter_mut().zip(&col[k * os.plane()..][..os.plane()]) {
                    *d += w * v;
                }
            }
            let bo = bias[o];
            plane.iter_mut().for_each(|v| *v += bo);
        });
    }
    out.debug_assert_finite("conv2d");
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor4<T>,
    pub kernel: Tensor4<T>,
    pub bias: Vec<T>,
}

/// Dot product with eight interleaved partial sums combined in a fixed order,
/// so the result depends only on the inputs.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    let mut acc = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    for (&x, &y) in ar.iter().zip(br) {
        acc += x * y;
    }
    acc
}

/// Exact adjoint of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward<T: Real>(
    x: &Tensor4<T>,
    spec: &ConvSpec<'_, T>,
    grad_out: &Tensor4<T>,
) -> Result<ConvGrads<T>> {
    let sign = backward_sign::<T>(OpKind::Conv2d);
    let xs = x.shape();
    let os = spec.output_shape(xs)?;
    grad_out.shape().expect("conv2d_backward", os)?;
    let ks = spec.kernel.shape();
    let rows = ks.c * ks.h * ks.w;
    let kernel = spec.kernel.data();
    let gd = grad_out.data();

    let mut grad_bias = vec![T::zero(); os.c];
    for_each_chunk(&mut grad_bias, 1, |o, slot| {
        let mut acc = T::zero();
        for b in 0..os.n {
            let gp = &gd[(b * os.c + o) * os.plane()..][..os.plane()];
            for &v in gp {
                acc += v;
            }
        }
        slot[0] = acc;
    });

    let mut grad_kernel = Tensor4::zeros(ks);
    let mut grad_input = Tensor4::zeros(xs);
    let mut col = vec![T::zero(); rows * os.plane()];
    let mut dcol = vec![T::zero(); rows * os.plane()];
    for b in 0..xs.n {
        let gb = &gd[b * os.c * os.plane()..][..os.c * os.plane()];
        im2col(x, b, ks, os, spec.geometry, &mut col);
        for_each_chunk(grad_kernel.data_mut(), rows, |o, gk| {
            let gp = &gb[o * os.plane()..][..os.plane()];
            for (k, acc) in gk.iter_mut().enumerate() {
                *acc += dot(gp, &col[k * os.plane()..][..os.plane()]);
            }
        });
        for_each_chunk(&mut dcol, os.plane(), |k, row| {
            row.fill(T::zero());
            for o in 0..os.c {
                let w = kernel[o * rows + k];
                for (d, &g) in row.iter_mut().zip(&gb[o * os.plane()..][..os.plane()]) {
                    *d += w * g;
                }
            }
        });
        let gx = &mut grad_input.data_mut()[b * xs.c * xs.plane()..][..xs.c * xs.plane()];
        col2im(&dcol, ks, os, spec.geometry, xs, gx);
    }

    scale_in_place(grad_input.data_mut(), sign);
    scale_in_place(grad_kernel.data_mut(), sign);
    scale_in_place(&mut grad_bias, sign);
    Ok(ConvGrads {
        input: grad_input,
        kernel: grad_kernel,
        bias: grad_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape4, v: Vec<f64>) -> Tensor4<f64> {
        Tensor4::from_vec(shape, v).unwrap()
    }

    /// Direct gather-form summation: acc over (c, u, v), then + bias.
    fn oracle(x: &Tensor4<f64>, k: &Tensor4<f64>, bias: &[f64], g: ConvGeometry) -> Tensor4<f64> {
        let xs = x.shape();
        let ks = k.shape();
        let ho = g.output_len(xs.h, ks.h).unwrap();
        let wo = g.output_len(xs.w, ks.w).unwrap();
        let mut out = Tensor4::zeros(Shape4::new(xs.n, ks.n, ho, wo));
        for b in 0..xs.n {
            for o in 0..ks.n {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..xs.c {
                            for u in 0..ks.h {
                                for v in 0..ks.w {
                                    let y = (i * g.stride + u * g.dilation) as isize - g.padding as isize;
                                    let xx = (j * g.stride + v * g.dilation) as isize - g.padding as isize;
                                    if y >= 0 && xx >= 0 && (y as usize) < xs.h && (xx as usize) < xs.w {
                                        acc += k.at(o, c, u, v) * x.at(b, c, y as usize, xx as usize);
                                    }
                                }
                            }
                        }
                        out.set(b, o, i, j, acc + bias[o]);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn scalar_identity() {
        let x = t(Shape4::new(1, 1, 1, 1), vec![5.0]);
        let k = t(Shape4::new(1, 1, 1, 1), vec![1.0]);
        let spec = ConvSpec { kernel: &k, bias: &[0.0], geometry: ConvGeometry::default() };
        assert_eq!(conv2d(&x, &spec).unwrap().data(), &[5.0]);
    }

    #[test]
    fn delta_kernel_reproduces_input() {
        let x = Tensor4::from_fn(Shape4::new(1, 1, 5, 7), |i| (i as f64).sin());
        let mut k = Tensor4::zeros(Shape4::new(1, 1, 3, 3));
        k.set(0, 0, 1, 1, 1.0);
        let spec = ConvSpec { kernel: &k, bias: &[0.0], geometry: ConvGeometry::same(3, 1) };
        assert!(conv2d(&x, &spec).unwrap().bit_eq(&x));
    }

    #[test]
    fn ones_kernel_on_1_to_9() {
        let x = t(Shape4::new(1, 1, 3, 3), (1..=9).map(f64::from).collect());
        let k = Tensor4::full(Shape4::new(1, 1, 3, 3), 1.0);
        let g = ConvGeometry::same(3, 1);
        let spec = ConvSpec { kernel: &k, bias: &[0.0], geometry: g };
        let out = conv2d(&x, &spec).unwrap();
        assert_eq!(out.at(0, 0, 1, 1), 45.0);
        // corners sum their 2x2 neighbourhoods: 1+2+4+5 = 12, 5+6+8+9 = 28
        assert_eq!(out.at(0, 0, 0, 0), 12.0);
        assert_eq!(out.at(0, 0, 2, 2), 28.0);
        assert!(out.bit_eq(&oracle(&x, &k, &[0.0], g)));
    }

    #[test]
    fn dilated_ramp_matches_oracle() {
        let x = t(Shape4::new(1, 1, 5, 5), (0..25).map(f64::from).collect());
        let k = Tensor4::full(Shape4::new(1, 1, 3, 3), 1.0);
        let g = ConvGeometry { stride: 1, dilation: 2, padding: 2 };
        let spec = ConvSpec { kernel: &k, bias: &[0.0], geometry: g };
        let out = conv2d(&x, &spec).unwrap();
        assert_eq!(out.shape(), Shape4::new(1, 1, 5, 5));
        // centre taps rows/cols {0,2,4}: sum of x[r][c] = 5r + c over r,c in {0,2,4} = 3*5*6 + 3*6 = 108
        assert_eq!(out.at(0, 0, 2, 2), 108.0);
        assert!(out.bit_eq(&oracle(&x, &k, &[0.0], g)));
    }

    #[test]
    fn strided_matches_oracle() {
        let x = Tensor4::from_fn(Shape4::new(2, 3, 7, 6), |i| ((i * 37) % 11) as f64 - 5.0);
        let k = Tensor4::from_fn(Shape4::new(2, 3, 3, 2), |i| ((i * 13) % 7) as f64 * 0.25 - 0.5);
        let g = ConvGeometry { stride: 2, dilation: 1, padding: 1 };
        let bias = [0.5, -1.0];
        let spec = ConvSpec { kernel: &k, bias: &bias, geometry: g };
        assert!(conv2d(&x, &spec).unwrap().bit_eq(&oracle(&x, &k, &bias, g)));
    }

    #[test]
    fn channel_mismatch_names_dimension() {
        let x = Tensor4::<f64>::zeros(Shape4::new(1, 2, 4, 4));
        let k = Tensor4::<f64>::zeros(Shape4::new(1, 3, 3, 3));
        let spec = ConvSpec { kernel: &k, bias: &[0.0], geometry: ConvGeometry::default() };
        let err = conv2d(&x, &spec).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { dim: "in_channels", expected: 3, actual: 2, .. }));
    }

    #[test]
    fn too_small_input_is_an_error() {
        let x = Tensor4::<f64>::zeros(Shape4::new(1, 1, 2, 2));
        let k = Tensor4::<f64>::zeros(Shape4::new(1, 1, 3, 3));
        let spec = ConvSpec { kernel: &k, bias: &[0.0], geometry: ConvGeometry::default() };
        assert!(conv2d(&x, &spec).is_err());
    }

    #[test]
    fn backward_zero_grad_gives_zero() {
        let x = Tensor4::from_fn(Shape4::new(1, 2, 4, 4), |i| i as f64);
        let k = Tensor4::from_fn(Shape4::new(3, 2, 3, 3), |i| i as f64 * 0.1);
        let spec = ConvSpec { kernel: &k, bias: &[0.0; 3], geometry: ConvGeometry::same(3, 1) };
        let g = Tensor4::zeros(Shape4::new(1, 3, 4, 4));
        let grads = conv2d_backward(&x, &spec, &g).unwrap();
        assert_eq!(grads.input.max_abs(), 0.0);
        assert_eq!(grads.kernel.max_abs(), 0.0);
        assert!(grads.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn backward_scalar_chain_rule() {
        let x = t(Shape4::new(1, 1, 1, 1), vec![5.0]);
        let k = t(Shape4::new(1, 1, 1, 1), vec![1.0]);
        let spec = ConvSpec { kernel: &k, bias: &[0.0], geometry: ConvGeometry::default() };
        let g = t(Shape4::new(1, 1, 1, 1), vec![1.0]);
        let grads = conv2d_backward(&x, &spec, &g).unwrap();
        assert_eq!(grads.kernel.data(), &[5.0]);
        assert_eq!(grads.input.data(), &[1.0]);
        assert_eq!(grads.bias, vec![1.0]);
    }

    #[test]
    fn backward_rejects_wrong_grad_shape() {
        let x = Tensor4::<f64>::zeros(Shape4::new(1, 1, 4, 4));
        let k = Tensor4::<f64>::zeros(Shape4::new(2, 1, 3, 3));
        let spec = ConvSpec { kernel: &k, bias: &[0.0; 2], geometry: ConvGeometry::default() };
        let g = Tensor4::zeros(Shape4::new(1, 2, 4, 4));
        assert!(conv2d_backward(&x, &spec, &g).is_err());
    }
}
