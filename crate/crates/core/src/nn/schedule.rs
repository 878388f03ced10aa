use serde::{Deserialize, Serialize};

/// Logistic warm-up of the gradient-reversal coefficient:
/// `λ(t) = λ_max · (2 / (1 + exp(-10·min(t / warmup, 1))) - 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrlSchedule {
    pub lambda_max: f64,
    pub warmup_iters: u64,
}

impl Default for GrlSchedule {
    fn default() -> Self {
        Self { lambda_max: 0.78, warmup_iters: 570 }
    }
}

impl GrlSchedule {
    pub fn lambda(&self, iter: u64) -> f64 {
        let progress = if self.warmup_iters == 0 {
            1.0
        } else {
            (iter as f64 / self.warmup_iters as f64).min(1.0)
        };
        self.lambda_max * (2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0)
    }
}
