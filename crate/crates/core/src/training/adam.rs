use crate::error::{Error, Result};
use crate::layers::{Module, SlotMut};
use crate::tensor::{Real, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam. Moments are kept per trainable tensor in visit order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub t: u64,
    /// `(m, v)` per trainable tensor; empty until the first step.
    pub moments: Vec<(Tensor4<T>, Tensor4<T>)>,
}

impl<T: Real> Default for Adam<T> {
    fn default() -> Self {
        Self::new(AdamConfig::default())
    }
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            t: 0,
            moments: Vec::new(),
        }
    }

    /// One update of every trainable tensor of `model` from its accumulated gradient.
    ///
    /// Any non-finite gradient aborts before anything is modified.
    pub fn step<M: Module<T>>(&mut self, model: &mut M, lr: f64) -> Result<()> {
        let mut bad = None;
        let mut shapes = Vec::new();
        model.visit("", &mut |name, slot| {
            if let crate::layers::Slot::Param(p) = slot {
                if bad.is_none() && !p.grad.all_finite() {
                    bad = Some(name.to_string());
                }
                shapes.push(p.value.shape());
            }
        });
        if let Some(name) = bad {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        if self.moments.is_empty() {
            self.moments = shapes.iter().map(|&s| (Tensor4::zeros(s), Tensor4::zeros(s))).collect();
        } else if self.moments.len() != shapes.len() {
            return Err(Error::shape("Adam", "parameter count", self.moments.len(), shapes.len()));
        }

        self.t += 1;
        let c = self.config;
        let t = self.t as i32;
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let corr1 = T::from_f64(1.0 - c.beta1.powi(t));
        let corr2 = T::from_f64(1.0 - c.beta2.powi(t));
        let (lr, eps) = (T::from_f64(lr), T::from_f64(c.eps));

        let mut i = 0;
        let moments = &mut self.moments;
        model.visit_mut("", &mut |_, slot| {
            let SlotMut::Param(p) = slot else { return };
            let (m, v) = &mut moments[i];
            i += 1;
            let g = p.grad.data();
            for (((w, m), v), &g) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g)
            {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m / corr1;
                let v_hat = *v / corr2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Param, Slot};
    use crate::tensor::Shape4;

    struct Scalar(Param<f64>);

    impl Module<f64> for Scalar {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, f64>)) {
            f(prefix, Slot::Param(&self.0));
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_, f64>)) {
            f(prefix, SlotMut::Param(&mut self.0));
        }
    }

    fn scalar(v: f64, g: f64) -> Scalar {
        let mut p = Param::new(Tensor4::full(Shape4::new(1, 1, 1, 1), v));
        p.grad.fill(g);
        Scalar(p)
    }

    #[test]
    fn one_step_by_hand() {
        let mut s = scalar(0.0, 1.0);
        let mut adam = Adam::default();
        adam.step(&mut s, 1e-3).unwrap();
        assert_eq!(adam.t, 1);
        let (m, v) = &adam.moments[0];
        assert!((m.data()[0] - 0.1).abs() < 1e-15);
        assert!((v.data()[0] - 0.001).abs() < 1e-15);
        // m̂ = v̂ = 1, so the step is lr / (1 + eps).
        let expect = -0.001 / (1.0 + 1e-8);
        assert!((s.0.value.data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut s = scalar(0.25, 0.0);
        let mut adam = Adam::default();
        adam.step(&mut s, 1e-3).unwrap();
        assert_eq!(s.0.value.data()[0], 0.25);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut s = scalar(0.25, f64::NAN);
        let mut adam = Adam::default();
        let err = adam.step(&mut s, 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!((adam.t, s.0.value.data()[0]), (0, 0.25));
    }
}
