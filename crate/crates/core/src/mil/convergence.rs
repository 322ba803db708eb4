/// Early stopping on validation loss: stop once `patience` consecutive epochs
/// fail to improve on the best loss by at least `min_delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceMonitor {
    best_val_loss: f64,
    epochs_since_improvement: usize,
    min_delta: f64,
    patience: usize,
}

impl ConvergenceMonitor {
    pub fn new(min_delta: f64, patience: usize) -> Self {
        Self {
            best_val_loss: f64::INFINITY,
            epochs_since_improvement: 0,
            min_delta,
            patience,
        }
    }

    pub fn best_val_loss(&self) -> f64 {
        self.best_val_loss
    }

    pub fn epochs_since_improvement(&self) -> usize {
        self.epochs_since_improvement
    }

    pub fn patience(&self) -> usize {
        self.patience
    }

    /// Records one epoch's validation loss and returns whether it is a new best.
    ///
    /// A drop equal to `min_delta` up to a few ulps of rounding counts as an improvement.
    pub fn update(&mut self, val_loss: f64) -> bool {
        let slack = 8.0 * f64::EPSILON * self.best_val_loss.abs().max(val_loss.abs()).max(1.0);
        let improved = if self.best_val_loss.is_infinite() {
            val_loss.is_finite()
        } else {
            self.best_val_loss - val_loss >= self.min_delta - slack
        };
        if improved {
            self.best_val_loss = val_loss;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        improved
    }

    pub fn should_stop(&self) -> bool {
        self.epochs_since_improvement >= self.patience
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_loss_stops_after_patience() {
        let mut m = ConvergenceMonitor::new(1e-4, 50);
        assert!(m.update(0.7));
        for epoch in 1..=50 {
            assert!(!m.should_stop());
            assert!(!m.update(0.7));
            assert_eq!(m.epochs_since_improvement(), epoch);
        }
        assert!(m.should_stop());
    }

    #[test]
    fn steady_improvement_never_stops() {
        let mut m = ConvergenceMonitor::new(1e-4, 3);
        for t in 0..5000 {
            let loss = 1.0 - t as f64 * 1e-4;
            assert!(m.update(loss), "epoch {t}");
            assert!(!m.should_stop());
        }
    }

    #[test]
    fn sub_threshold_gains_do_not_count() {
        let mut m = ConvergenceMonitor::new(1e-4, 2);
        m.update(1.0);
        assert!(!m.update(1.0 - 5e-5));
        assert!(!m.update(1.0 - 9e-5));
        assert!(m.should_stop());
        assert_eq!(m.best_val_loss(), 1.0);
    }
}
