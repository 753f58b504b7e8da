/// Added to the variance before taking the square root.
pub const BATCH_NORM_EPS: f64 = 1e-5;
/// Weight given to the newest batch in the running-statistics update.
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with the batch's own statistics and update the running ones.
    Train,
    /// Normalize with the running statistics.
    Eval,
}

/// Per-feature running mean and variance.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            var: vec![1.0; features],
            momentum: BATCH_NORM_MOMENTUM,
        }
    }

    /// Exponential moving average update. `batch_var` is the unbiased
    /// estimate.
    pub(crate) fn update(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        let m = self.momentum;
        for (r, b) in self.mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.var.iter_mut().zip(batch_var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}
