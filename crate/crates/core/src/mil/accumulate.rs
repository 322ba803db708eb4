use crate::adam::AdamState;
use crate::error::{MilError, Result};
use crate::model::{Gradients, ModelParams};

/// Running mean of per-bag gradients, applied once per batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GradAccumulator {
    mean: Gradients,
    bags_seen: usize,
    batch_size: usize,
}

impl GradAccumulator {
    pub fn new(params: &ModelParams, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(MilError::Config("batch size must be positive".into()));
        }
        Ok(Self {
            mean: Gradients::zeros_like(params),
            bags_seen: 0,
            batch_size,
        })
    }

    pub fn bags_seen(&self) -> usize {
        self.bags_seen
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn mean(&self) -> &Gradients {
        &self.mean
    }

    pub fn is_full(&self) -> bool {
        self.bags_seen == self.batch_size
    }

    /// `mean += (grads - mean) / (bags_seen + 1)`.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        if self.is_full() {
            return Err(MilError::AccumulatorFull(self.batch_size));
        }
        if grads.tensors().len() != self.mean.tensors().len()
            || grads
                .tensors()
                .iter()
                .zip(self.mean.tensors())
                .any(|(g, m)| g.shape() != m.shape())
        {
            return Err(MilError::Shape("gradient does not match accumulator".into()));
        }
        let k = (self.bags_seen + 1) as f64;
        for (m, g) in self.mean.tensors_mut().iter_mut().zip(grads.tensors()) {
            for (m, g) in m.data_mut().iter_mut().zip(g.data()) {
                *m += (g - *m) / k;
            }
        }
        self.bags_seen += 1;
        Ok(())
    }

    pub fn reset(&mut self) {
        for t in self.mean.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        self.bags_seen = 0;
    }

    /// Applies the mean over the bags seen so far with one optimizer step, then resets.
    ///
    /// Applying an empty accumulator is a no-op.
    pub fn apply(&mut self, opt: &mut AdamState, params: &mut ModelParams) -> Result<()> {
        if self.bags_seen == 0 {
            return Ok(());
        }
        let result = opt.step(params, &self.mean);
        self.reset();
        result
    }
}
