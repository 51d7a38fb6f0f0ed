use super::{backward_sign, scale_in_place, OpKind};
use crate::error::{Error, Result};
use crate::parallel::for_each_chunk;
use crate::tensor::{Real, Shape4, Tensor4};

/// Window argmax positions recorded by [`maxpool2d`], one per output element,
/// stored as offsets within the input's `h × w` plane.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaxPoolIndices {
    pub input_shape: Shape4,
    pub offsets: Vec<usize>,
}

/// Window maxima. Ties resolve to the first element in row-major scan order.
pub fn maxpool2d<T: Real>(
    x: &Tensor4<T>,
    k: usize,
    stride: usize,
) -> Result<(Tensor4<T>, MaxPoolIndices)> {
    let xs = x.shape();
    if k == 0 || stride == 0 {
        return Err(Error::arg("maxpool2d", "window and stride must be >= 1"));
    }
    if xs.h < k || xs.w < k {
        return Err(Error::arg(
            "maxpool2d",
            format!("window {k} larger than input {}x{}", xs.h, xs.w),
        ));
    }
    let os = Shape4::new(xs.n, xs.c, (xs.h - k) / stride + 1, (xs.w - k) / stride + 1);
    let xd = x.data();
    let mut offsets = vec![0usize; os.len()];
    for_each_chunk(&mut offsets, os.plane(), |idx, plane| {
        let xp = &xd[idx * xs.plane()..][..xs.plane()];
        for i in 0..os.h {
            for j in 0..os.w {
                let (r0, c0) = (i * stride, j * stride);
                let mut best_at = r0 * xs.w + c0;
                for r in r0..r0 + k {
                    for c in c0..c0 + k {
                        if xp[r * xs.w + c] > xp[best_at] {
                            best_at = r * xs.w + c;
                        }
                    }
                }
                plane[i * os.w + j] = best_at;
            }
        }
    });
    let out = Tensor4::from_fn(os, |i| xd[(i / os.plane()) * xs.plane() + offsets[i]]);
    Ok((
        out,
        MaxPoolIndices {
            input_shape: xs,
            offsets,
        },
    ))
}

/// Routes each output gradient to its recorded argmax; overlapping windows accumulate.
pub fn maxpool2d_backward<T: Real>(
    indices: &MaxPoolIndices,
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let sign = backward_sign::<T>(OpKind::MaxPool2d);
    let xs = indices.input_shape;
    let gs = grad_out.shape();
    if gs.n != xs.n || gs.c != xs.c || gs.len() != indices.offsets.len() {
        return Err(Error::shape(
            "maxpool2d_backward",
            "grad length",
            indices.offsets.len(),
            gs.len(),
        ));
    }
    let gd = grad_out.data();
    let mut gx = Tensor4::zeros(xs);
    for_each_chunk(gx.data_mut(), xs.plane(), |idx, plane| {
        let gp = &gd[idx * gs.plane()..][..gs.plane()];
        let op = &indices.offsets[idx * gs.plane()..][..gs.plane()];
        for (&g, &o) in gp.iter().zip(op) {
            plane[o] += g;
        }
    });
    scale_in_place(gx.data_mut(), sign);
    Ok(gx)
}

/// Non-overlapping `k × k` mean pooling (window == stride). Input sides must be multiples of `k`.
pub fn avgpool2d<T: Real>(x: &Tensor4<T>, k: usize) -> Result<Tensor4<T>> {
    let xs = x.shape();
    if k == 0 || !xs.h.is_multiple_of(k) || !xs.w.is_multiple_of(k) {
        return Err(Error::arg(
            "avgpool2d",
            format!("input {}x{} not divisible by window {k}", xs.h, xs.w),
        ));
    }
    let os = Shape4::new(xs.n, xs.c, xs.h / k, xs.w / k);
    let scale = T::one() / T::from_f64((k * k) as f64);
    let xd = x.data();
    let mut out = Tensor4::zeros(os);
    for_each_chunk(out.data_mut(), os.plane(), |idx, plane| {
        let xp = &xd[idx * xs.plane()..][..xs.plane()];
        for i in 0..os.h {
            for j in 0..os.w {
                let mut acc = T::zero();
                for r in i * k..(i + 1) * k {
                    for c in j * k..(j + 1) * k {
                        acc += xp[r * xs.w + c];
                    }
                }
                plane[i * os.w + j] = acc * scale;
            }
        }
    });
    Ok(out)
}

pub fn avgpool2d_backward<T: Real>(
    input_shape: Shape4,
    k: usize,
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let sign = backward_sign::<T>(OpKind::AvgPool2d);
    let gs = grad_out.shape();
    gs.expect(
        "avgpool2d_backward",
        Shape4::new(input_shape.n, input_shape.c, input_shape.h / k, input_shape.w / k),
    )?;
    let scale = sign / T::from_f64((k * k) as f64);
    let gd = grad_out.data();
    let mut gx = Tensor4::zeros(input_shape);
    for_each_chunk(gx.data_mut(), input_shape.plane(), |idx, plane| {
        let gp = &gd[idx * gs.plane()..][..gs.plane()];
        for r in 0..input_shape.h {
            for c in 0..input_shape.w {
                plane[r * input_shape.w + c] = gp[(r / k) * gs.w + c / k] * scale;
            }
        }
    });
    Ok(gx)
}

/// Nearest-neighbour 2× upsampling in both spatial dimensions.
pub fn upsample2x<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let xs = x.shape();
    let os = Shape4::new(xs.n, xs.c, xs.h * 2, xs.w * 2);
    let xd = x.data();
    let mut out = Tensor4::zeros(os);
    for_each_chunk(out.data_mut(), os.plane(), |idx, plane| {
        let xp = &xd[idx * xs.plane()..][..xs.plane()];
        for r in 0..os.h {
            for c in 0..os.w {
                plane[r * os.w + c] = xp[(r / 2) * xs.w + c / 2];
            }
        }
    });
    out
}

/// Sums each 2×2 block of `grad_out` in row-major order.
pub fn upsample2x_backward<T: Real>(grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    let sign = backward_sign::<T>(OpKind::Upsample2x);
    let gs = grad_out.shape();
    if !gs.h.is_multiple_of(2) || !gs.w.is_multiple_of(2) {
        return Err(Error::arg("upsample2x_backward", "gradient sides must be even"));
    }
    let xs = Shape4::new(gs.n, gs.c, gs.h / 2, gs.w / 2);
    let gd = grad_out.data();
    let mut gx = Tensor4::zeros(xs);
    for_each_chunk(gx.data_mut(), xs.plane(), |idx, plane| {
        let gp = &gd[idx * gs.plane()..][..gs.plane()];
        for i in 0..xs.h {
            for j in 0..xs.w {
                let r = 2 * i * gs.w + 2 * j;
                let s = gp[r] + gp[r + 1] + gp[r + gs.w] + gp[r + gs.w + 1];
                plane[i * xs.w + j] = s * sign;
            }
        }
    });
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_ties_to_first_element() {
        let x = Tensor4::<f64>::full(Shape4::new(1, 1, 4, 4), 3.0);
        let (out, idx) = maxpool2d(&x, 2, 2).unwrap();
        assert!(out.data().iter().all(|&v| v == 3.0));
        assert_eq!(idx.offsets, vec![0, 2, 8, 10]);
    }

    #[test]
    fn two_by_two_max() {
        let x = Tensor4::from_vec(Shape4::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (out, idx) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(idx.offsets, vec![3]);
    }

    #[test]
    fn ramp_4x4() {
        let x = Tensor4::from_vec(Shape4::new(1, 1, 4, 4), (0..16).map(f64::from).collect()).unwrap();
        let (out, _) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(out.data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn window_larger_than_input_errors() {
        let x = Tensor4::<f64>::zeros(Shape4::new(1, 1, 1, 4));
        assert!(maxpool2d(&x, 2, 2).is_err());
    }

    #[test]
    fn maxpool_backward_routes_to_argmax() {
        let x = Tensor4::from_vec(Shape4::new(1, 1, 2, 2), vec![1.0, 9.0, 3.0, 4.0]).unwrap();
        let (_, idx) = maxpool2d(&x, 2, 2).unwrap();
        let g = Tensor4::from_vec(Shape4::new(1, 1, 1, 1), vec![2.5]).unwrap();
        let gx = maxpool2d_backward(&idx, &g).unwrap();
        assert_eq!(gx.data(), &[0.0, 2.5, 0.0, 0.0]);
    }

    #[test]
    fn upsample_replicates() {
        let x = Tensor4::from_vec(Shape4::new(1, 1, 1, 1), vec![7.0]).unwrap();
        assert_eq!(upsample2x(&x).data(), &[7.0; 4]);
        let x = Tensor4::from_vec(Shape4::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let expect = [
            1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(upsample2x(&x).data(), &expect);
    }

    #[test]
    fn upsample_of_pooled_constant_round_trips() {
        let x = Tensor4::<f32>::full(Shape4::new(2, 3, 6, 8), -1.25);
        let (p, _) = maxpool2d(&x, 2, 2).unwrap();
        assert!(upsample2x(&p).bit_eq(&x));
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let g = Tensor4::from_vec(Shape4::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(upsample2x_backward(&g).unwrap().data(), &[10.0]);
    }

    #[test]
    fn avgpool_means_blocks() {
        let x = Tensor4::from_vec(Shape4::new(1, 1, 2, 4), vec![1.0, 3.0, 0.0, 0.0, 5.0, 7.0, 4.0, 8.0]).unwrap();
        assert_eq!(avgpool2d(&x, 2).unwrap().data(), &[4.0, 3.0]);
        assert!(avgpool2d(&x, 3).is_err());
    }
}
