//! Central finite-difference gradient checking.
//!
//! The harness never looks at how a gradient was produced: callers hand in the
//! analytic values and a way to evaluate the scalar loss with one coordinate
//! nudged, and get back the worst relative disagreement.

pub mod suite;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub const DEFAULT_STEP: f64 = 1e-5;

/// A scalar inside the `tensor`-th checked tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Coord {
    pub tensor: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Coord>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
    /// Coordinates passed over because the step crossed a non-differentiable point.
    pub skipped: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients against `(f(x+h) − f(x−h)) / 2h` at every coordinate in `coords`.
///
/// `eval(coord, delta)` must return the loss with that single coordinate shifted by `delta`
/// and leave everything else untouched.
pub fn check_coords(
    coords: &[Coord],
    analytic: impl Fn(Coord) -> f64,
    h: f64,
    mut eval: impl FnMut(Coord, f64) -> Result<f64>,
) -> Result<GradCheckReport> {
    check_coords_skipping(coords, analytic, h, usize::MAX, |c, d| eval(c, d).map(Some))
}

/// [`check_coords`] for piecewise-smooth losses: `eval` returns `None` when the
/// shifted evaluation left the smooth piece the unshifted one sits on, and that
/// coordinate is skipped. Stops once `limit` coordinates have been compared.
pub fn check_coords_skipping(
    coords: &[Coord],
    analytic: impl Fn(Coord) -> f64,
    h: f64,
    limit: usize,
    mut eval: impl FnMut(Coord, f64) -> Result<Option<f64>>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
        skipped: 0,
    };
    for &coord in coords {
        if report.checked >= limit {
            break;
        }
        let (Some(plus), Some(minus)) = (eval(coord, h)?, eval(coord, -h)?) else {
            report.skipped += 1;
            continue;
        };
        let a = analytic(coord);
        if !plus.is_finite() || !minus.is_finite() || !a.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient check at tensor {} index {}: f(x+h)={plus}, f(x-h)={minus}, analytic={a}",
                coord.tensor, coord.index
            )));
        }
        let n = (plus - minus) / (2.0 * h);
        let err = relative_error(a, n);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some(coord);
            report.worst_analytic = a;
            report.worst_numeric = n;
        }
    }
    Ok(report)
}

/// Every coordinate of tensors with the given lengths.
pub fn all_coords(lens: &[usize]) -> Vec<Coord> {
    lens.iter()
        .enumerate()
        .flat_map(|(t, &n)| (0..n).map(move |index| Coord { tensor: t, index }))
        .collect()
}

/// `count` distinct coordinates drawn uniformly (seeded) from tensors with the given lengths.
pub fn sample_coords(lens: &[usize], count: usize, seed: u64) -> Vec<Coord> {
    let total: usize = lens.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, total, count.min(total)).into_vec();
    picks.sort_unstable();
    picks
        .into_iter()
        .map(|mut flat| {
            let mut tensor = 0;
            while flat >= lens[tensor] {
                flat -= lens[tensor];
                tensor += 1;
            }
            Coord {
                tensor,
                index: flat,
            }
        })
        .collect()
}

/// Checks `f` over all coordinates of `inputs` against `analytic` (same shapes, same order).
pub fn grad_check(
    inputs: &[Tensor4<f64>],
    analytic: &[Tensor4<f64>],
    h: f64,
    mut f: impl FnMut(&[Tensor4<f64>]) -> Result<f64>,
) -> Result<GradCheckReport> {
    if inputs.len() != analytic.len() {
        return Err(Error::shape("grad_check", "tensor count", inputs.len(), analytic.len()));
    }
    for (x, g) in inputs.iter().zip(analytic) {
        g.shape().expect("grad_check", x.shape())?;
    }
    let lens: Vec<usize> = inputs.iter().map(|t| t.len()).collect();
    let coords = all_coords(&lens);
    let mut work = inputs.to_vec();
    check_coords(
        &coords,
        |c| analytic[c.tensor].data()[c.index],
        h,
        |c, delta| {
            let orig = work[c.tensor].data()[c.index];
            work[c.tensor].data_mut()[c.index] = orig + delta;
            let v = f(&work);
            work[c.tensor].data_mut()[c.index] = orig;
            v
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use crate::tensor::Shape4;

    #[test]
    fn linear_op_is_exact() {
        let a = Tensor4::from_fn(Shape4::new(1, 2, 3, 3), |i| i as f64 * 0.3 - 1.0);
        let b = Tensor4::from_fn(Shape4::new(1, 2, 3, 3), |i| (i as f64).cos());
        let r = Tensor4::from_fn(Shape4::new(1, 2, 3, 3), |i| (i as f64 * 1.7).sin());
        let (ga, gb) = ops::add_backward(&r);
        let report = grad_check(&[a, b], &[ga, gb], DEFAULT_STEP, |xs| {
            let s = ops::add(&xs[0], &xs[1])?;
            Ok(s.data().iter().zip(r.data()).map(|(x, w)| x * w).sum())
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-10, "{report:?}");
        assert_eq!(report.checked, 36);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = Tensor4::from_fn(Shape4::new(1, 1, 1, 3), |i| i as f64 + 1.0);
        let wrong = Tensor4::from_fn(x.shape(), |i| i as f64 + 1.0);
        let report = grad_check(&[x], &[wrong], DEFAULT_STEP, |xs| {
            Ok(xs[0].data().iter().map(|v| 3.0 * v).sum())
        })
        .unwrap();
        assert!(report.max_rel_error > 0.5);
        assert_eq!(report.worst, Some(Coord { tensor: 0, index: 0 }));
    }

    #[test]
    fn non_finite_loss_reports_coordinate() {
        let x = Tensor4::from_fn(Shape4::new(1, 1, 1, 2), |i| i as f64);
        let g = Tensor4::zeros(x.shape());
        let err = grad_check(&[x], &[g], DEFAULT_STEP, |xs| Ok(xs[0].data()[0].ln() + xs[0].data()[1]))
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite(msg) if msg.contains("index 0")));
    }

    #[test]
    fn sampled_coords_are_distinct_and_in_range() {
        let lens = [5, 0, 7, 3];
        let coords = sample_coords(&lens, 10, 9);
        assert_eq!(coords.len(), 10);
        for c in &coords {
            assert!(c.index < lens[c.tensor]);
        }
        let mut flat: Vec<_> = coords.iter().map(|c| (c.tensor, c.index)).collect();
        flat.dedup();
        assert_eq!(flat.len(), 10);
        assert_eq!(sample_coords(&lens, 99, 1).len(), 15);
    }
}
