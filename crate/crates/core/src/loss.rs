//! Tversky loss over probability maps.

use crate::error::{Error, Result};
use crate::ops::{backward_sign, OpKind};
use crate::tensor::{Real, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TverskyParams {
    /// Weight on false positives.
    pub alpha: f64,
    /// Weight on false negatives.
    pub beta: f64,
    pub smooth: f64,
}

impl Default for TverskyParams {
    fn default() -> Self {
        TverskyParams {
            alpha: 0.3,
            beta: 0.7,
            smooth: 1.0,
        }
    }
}

impl TverskyParams {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.alpha) || !unit.contains(&self.beta) {
            return Err(Error::Config(format!(
                "tversky alpha/beta must lie in [0, 1], got {}/{}",
                self.alpha, self.beta
            )));
        }
        if !(self.smooth >= 0.0) {
            return Err(Error::Config(format!("tversky smooth must be >= 0, got {}", self.smooth)));
        }
        Ok(())
    }
}

/// Soft confusion sums for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftCounts {
    pub tp: f64,
    pub fp: f64,
    pub fn_: f64,
}

fn soft_counts<T: Real>(p: &[T], t: &[T]) -> (T, T, T) {
    let (mut tp, mut fp, mut fn_) = (T::zero(), T::zero(), T::zero());
    for (&p, &t) in p.iter().zip(t) {
        tp += p * t;
        fp += p * (T::one() - t);
        fn_ += (T::one() - p) * t;
    }
    (tp, fp, fn_)
}

/// Per-sample soft counts, mostly for reporting and tests.
pub fn soft_confusion<T: Real>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<Vec<SoftCounts>> {
    target.shape().expect("soft_confusion", pred.shape())?;
    let per = pred.len() / pred.shape().n;
    Ok(pred
        .data()
        .chunks(per)
        .zip(target.data().chunks(per))
        .map(|(p, t)| {
            let (tp, fp, fn_) = soft_counts(p, t);
            SoftCounts {
                tp: tp.as_f64(),
                fp: fp.as_f64(),
                fn_: fn_.as_f64(),
            }
        })
        .collect())
}

/// `1 − TI` averaged over the batch, with `TI = (TP + s) / (TP + α·FP + β·FN + s)`
/// computed per sample. Returns the loss and its gradient with respect to `pred`.
///
/// A sample whose denominator is exactly zero (empty prediction and target with
/// `s = 0`) counts as a perfect match with zero gradient.
pub fn tversky_loss<T: Real>(
    pred: &Tensor4<T>,
    target: &Tensor4<T>,
    params: &TverskyParams,
) -> Result<(T, Tensor4<T>)> {
    target.shape().expect("tversky_loss", pred.shape())?;
    debug_assert!(
        pred.data().iter().all(|&p| p >= T::zero() && p <= T::one()),
        "tversky_loss: prediction outside [0, 1]"
    );
    let n = pred.shape().n;
    let per = pred.len() / n;
    let (alpha, beta, smooth) = (
        T::from_f64(params.alpha),
        T::from_f64(params.beta),
        T::from_f64(params.smooth),
    );
    let scale = -backward_sign::<T>(OpKind::Tversky) / T::from_f64(n as f64);
    let mut grad = Tensor4::zeros(pred.shape());
    let mut total_index = T::zero();
    for ((p, t), g) in pred
        .data()
        .chunks(per)
        .zip(target.data().chunks(per))
        .zip(grad.data_mut().chunks_mut(per))
    {
        let (tp, fp, fn_) = soft_counts(p, t);
        let num = tp + smooth;
        let den = tp + alpha * fp + beta * fn_ + smooth;
        if den == T::zero() {
            total_index += T::one();
            continue;
        }
        total_index += num / den;
        // d TI / d p = (t·den − num·(t + α(1 − t) − β t)) / den²
        let inv_den2 = T::one() / (den * den);
        for (g, &t) in g.iter_mut().zip(t) {
            let d_den = t + alpha * (T::one() - t) - beta * t;
            *g = scale * (t * den - num * d_den) * inv_den2;
        }
    }
    let loss = T::one() - total_index / T::from_f64(n as f64);
    Ok((loss, grad))
}

/// Soft Dice loss `1 − 2TP / (2TP + FP + FN)` averaged over the batch.
pub fn soft_dice_loss<T: Real>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<T> {
    let counts = soft_confusion(pred, target)?;
    let n = counts.len() as f64;
    let mean = counts
        .iter()
        .map(|c| {
            let den = 2.0 * c.tp + c.fp + c.fn_;
            if den == 0.0 {
                1.0
            } else {
                2.0 * c.tp / den
            }
        })
        .sum::<f64>()
        / n;
    Ok(T::from_f64(1.0 - mean))
}
