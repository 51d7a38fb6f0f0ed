/// Multiplies the learning rate by `factor` once the monitored loss has failed to
/// improve by more than `min_delta` for `patience` consecutive epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub best: f64,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub const MIN_DELTA: f64 = 1e-6;

    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        PlateauScheduler {
            lr,
            factor,
            patience,
            min_delta: Self::MIN_DELTA,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records one epoch's loss and returns the learning rate for the next epoch.
    pub fn step(&mut self, loss: f64) -> f64 {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn improving_losses_keep_lr() {
        let mut s = PlateauScheduler::new(1e-3, 0.1, 12);
        for e in 0..50 {
            assert_eq!(s.step(1.0 - e as f64 * 0.01), 1e-3);
        }
    }

    #[test]
    fn twelve_flat_epochs_decay_once() {
        let mut s = PlateauScheduler::new(1e-3, 0.1, 12);
        s.step(0.5);
        for _ in 0..11 {
            assert_eq!(s.step(0.5), 1e-3);
        }
        assert_eq!(s.step(0.5), 1e-4);
    }

    #[test]
    fn improvement_at_the_boundary_resets() {
        let mut s = PlateauScheduler::new(1e-3, 0.1, 12);
        s.step(0.5);
        for _ in 0..11 {
            s.step(0.5);
        }
        assert_eq!(s.step(0.4), 1e-3);
        assert_eq!(s.bad_epochs, 0);
    }

    #[test]
    fn tiny_improvements_do_not_count() {
        let mut s = PlateauScheduler::new(1e-3, 0.1, 2);
        s.step(0.5);
        s.step(0.5 - 1e-7);
        assert_eq!(s.step(0.5 - 2e-7), 1e-4);
    }
}
