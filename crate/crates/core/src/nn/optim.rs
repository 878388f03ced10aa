use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::NnError;

/// SGD hyperparameters. Defaults follow the adaptation recipe:
/// Nesterov momentum 0.9, base rate 0.01 with polynomial decay 0.70.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub poly_power: f64,
    /// Global L2 gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: 0.01, momentum: 0.9, nesterov: true, poly_power: 0.70, clip_norm: Some(5.0) }
    }
}

impl OptimizerConfig {
    /// `lr₀ · (1 - epoch/total)^power`
    pub fn lr_at(&self, epoch: usize, total_epochs: usize) -> f64 {
        if total_epochs == 0 {
            return self.lr;
        }
        let frac = (epoch.min(total_epochs) as f64) / total_epochs as f64;
        self.lr * (1.0 - frac).powf(self.poly_power)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub total_epochs: usize,
    pub velocities: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, total_epochs: usize, params: &[Tensor<f32>]) -> Self {
        Self { config, total_epochs, velocities: params.iter().map(|p| vec![0.0; p.len()]).collect() }
    }
}

/// One Nesterov-SGD update in place. `names` label parameters in the error.
pub fn sgd_step(
    params: &mut [Tensor<f32>],
    grads: &[Vec<f32>],
    names: &[String],
    state: &mut OptimizerState,
    epoch: usize,
) -> Result<(), NnError> {
    if params.len() != grads.len() || params.len() != state.velocities.len() {
        return Err(NnError::Shape {
            op: "sgd_step",
            detail: format!("{} params, {} grads, {} velocities", params.len(), grads.len(), state.velocities.len()),
        });
    }
    let mut sq = 0.0f64;
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if g.len() != p.len() || state.velocities[i].len() != p.len() {
            return Err(NnError::Shape { op: "sgd_step", detail: format!("parameter {i}: {} vs {}", p.len(), g.len()) });
        }
        if g.iter().any(|v| !v.is_finite()) {
            let param = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
            return Err(NnError::Diverged { param });
        }
        sq += g.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>();
    }
    let cfg = state.config;
    let clip = match cfg.clip_norm {
        Some(max) if sq.sqrt() > max => (max / sq.sqrt()) as f32,
        _ => 1.0,
    };
    let lr = cfg.lr_at(epoch, state.total_epochs) as f32;
    let mu = cfg.momentum as f32;
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocities.iter_mut()) {
        for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
            let gi = gi * clip;
            *vi = mu * *vi + gi;
            let step = if cfg.nesterov { gi + mu * *vi } else { *vi };
            *w -= lr * step;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state(lr: f64, momentum: f64) -> (Vec<Tensor<f32>>, OptimizerState) {
        let params = vec![Tensor::new(vec![1], vec![1.0]).unwrap()];
        let cfg = OptimizerConfig { lr, momentum, nesterov: true, poly_power: 0.7, clip_norm: None };
        let state = OptimizerState::new(cfg, 0, &params);
        (params, state)
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_velocity() {
        let (mut params, mut state) = scalar_state(0.01, 0.9);
        sgd_step(&mut params, &[vec![0.0]], &[], &mut state, 0).unwrap();
        assert_eq!(params[0].data(), &[1.0]);
        state.velocities[0][0] = 1.0;
        let cfg = OptimizerConfig { lr: 0.0, ..state.config };
        state.config = cfg;
        sgd_step(&mut params, &[vec![0.0]], &[], &mut state, 0).unwrap();
        assert!((state.velocities[0][0] - 0.9).abs() < 1e-7);
        assert_eq!(params[0].data(), &[1.0]);
    }

    #[test]
    fn plain_step_without_momentum() {
        let (mut params, mut state) = scalar_state(0.1, 0.0);
        sgd_step(&mut params, &[vec![1.0]], &[], &mut state, 0).unwrap();
        assert!((params[0].data()[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let (mut params, mut state) = scalar_state(0.1, 0.9);
        for _ in 0..100 {
            let w = params[0].data()[0];
            sgd_step(&mut params, &[vec![w]], &[], &mut state, 0).unwrap();
        }
        assert!(params[0].data()[0].abs() < 1e-3, "w = {}", params[0].data()[0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut params, mut state) = scalar_state(0.1, 0.9);
        let err = sgd_step(&mut params, &[vec![f32::NAN]], &["enc.0.w".into()], &mut state, 0).unwrap_err();
        assert!(err.to_string().contains("diverged"));
        assert!(err.to_string().contains("enc.0.w"));
    }

    #[test]
    fn poly_decay() {
        let cfg = OptimizerConfig::default();
        assert_eq!(cfg.lr_at(0, 35), 0.01);
        let expected = 0.01 * (0.5f64).powf(0.7);
        assert!((cfg.lr_at(10, 20) - expected).abs() < 1e-15);
    }

    #[test]
    fn clipping_bounds_update() {
        let params0 = vec![Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()];
        let cfg = OptimizerConfig { lr: 1.0, momentum: 0.0, nesterov: false, poly_power: 0.7, clip_norm: Some(5.0) };
        let mut state = OptimizerState::new(cfg, 0, &params0);
        let mut params = params0.clone();
        sgd_step(&mut params, &[vec![30.0, 40.0]], &[], &mut state, 0).unwrap();
        assert!((params[0].data()[0] + 3.0).abs() < 1e-5);
        assert!((params[0].data()[1] + 4.0).abs() < 1e-5);
    }
}
