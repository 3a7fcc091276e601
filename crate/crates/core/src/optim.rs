//! SGD and Adam parameter updates with stepped learning-rate decay.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::Gradients;
use crate::nn::NetworkModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer hyperparameters. `decay_epochs` lists the epoch indices at
/// which the learning rate is multiplied by `decay_factor`; the rate for
/// epoch `e` applies the factor once per entry `<= e`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default)]
    pub decay_epochs: Vec<usize>,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_epsilon")]
    pub adam_epsilon: f64,
}

fn default_decay_factor() -> f64 {
    0.1
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            decay_epochs: Vec::new(),
            decay_factor: default_decay_factor(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_epsilon: default_epsilon(),
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            ..Self::sgd(learning_rate)
        }
    }

    pub fn with_decay(mut self, epochs: Vec<usize>, factor: f64) -> Self {
        self.decay_epochs = epochs;
        self.decay_factor = factor;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidSpec("learning rate must be positive".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::InvalidSpec("decay factor must lie in (0, 1]".into()));
        }
        Ok(())
    }

    fn effective_learning_rate(&self, epoch: usize) -> f64 {
        let crossings = self.decay_epochs.iter().filter(|&&d| d <= epoch).count();
        self.learning_rate * self.decay_factor.powi(crossings as i32)
    }
}

/// Mutable optimizer state: config plus Adam moment accumulators.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    cfg: OptimizerConfig,
    step: u64,
    m_weights: Vec<Array2<f64>>,
    v_weights: Vec<Array2<f64>>,
    m_biases: Vec<Array1<f64>>,
    v_biases: Vec<Array1<f64>>,
}

impl OptimizerState {
    pub fn new(cfg: OptimizerConfig, model: &NetworkModel) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            step: 0,
            m_weights: model.weights().iter().map(|w| Array2::zeros(w.dim())).collect(),
            v_weights: model.weights().iter().map(|w| Array2::zeros(w.dim())).collect(),
            m_biases: model.biases().iter().map(|b| Array1::zeros(b.len())).collect(),
            v_biases: model.biases().iter().map(|b| Array1::zeros(b.len())).collect(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }
}

/// Apply one optimizer step in place. `epoch` drives the decay schedule.
pub fn optimizer_step(
    model: &mut NetworkModel,
    grads: &Gradients,
    state: &mut OptimizerState,
    epoch: usize,
) -> Result<()> {
    if grads.weights.len() != model.num_layers() {
        return Err(Error::ShapeMismatch(format!(
            "{} gradient blocks for {} layers",
            grads.weights.len(),
            model.num_layers()
        )));
    }
    for (layer, g) in grads.weights.iter().enumerate() {
        if g.dim() != model.weights()[layer].dim() {
            return Err(Error::ShapeMismatch(format!(
                "gradient {:?} vs weight {:?} at layer {}",
                g.dim(),
                model.weights()[layer].dim(),
                layer + 1
            )));
        }
    }
    let lr = state.cfg.effective_learning_rate(epoch);
    match state.cfg.kind {
        OptimizerKind::Sgd => {
            for (w, g) in model.weights_mut().iter_mut().zip(&grads.weights) {
                w.zip_mut_with(g, |p, &gr| *p -= lr * gr);
            }
            for (b, g) in model.biases_mut().iter_mut().zip(&grads.biases) {
                b.zip_mut_with(g, |p, &gr| *p -= lr * gr);
            }
        }
        OptimizerKind::Adam => {
            state.step += 1;
            let t = state.step as i32;
            let (b1, b2, eps) = (state.cfg.adam_beta1, state.cfg.adam_beta2, state.cfg.adam_epsilon);
            let corr1 = 1.0 - b1.powi(t);
            let corr2 = 1.0 - b2.powi(t);
            for layer in 0..model.num_layers() {
                adam_update_2d(
                    &mut model.weights_mut()[layer],
                    &grads.weights[layer],
                    &mut state.m_weights[layer],
                    &mut state.v_weights[layer],
                    lr,
                    b1,
                    b2,
                    eps,
                    corr1,
                    corr2,
                );
                adam_update_1d(
                    &mut model.biases_mut()[layer],
                    &grads.biases[layer],
                    &mut state.m_biases[layer],
                    &mut state.v_biases[layer],
                    lr,
                    b1,
                    b2,
                    eps,
                    corr1,
                    corr2,
                );
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn adam_update_2d(
    param: &mut Array2<f64>,
    grad: &Array2<f64>,
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    corr1: f64,
    corr2: f64,
) {
    ndarray::Zip::from(param)
        .and(grad)
        .and(m)
        .and(v)
        .for_each(|p, &g, m, v| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / corr1;
            let v_hat = *v / corr2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        });
}

#[allow(clippy::too_many_arguments)]
fn adam_update_1d(
    param: &mut Array1<f64>,
    grad: &Array1<f64>,
    m: &mut Array1<f64>,
    v: &mut Array1<f64>,
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    corr1: f64,
    corr2: f64,
) {
    ndarray::Zip::from(param)
        .and(grad)
        .and(m)
        .and(v)
        .for_each(|p, &g, m, v| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / corr1;
            let v_hat = *v / corr2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, LayerSpec, NetworkModel};
    use ndarray::{array, Array1, Array2};

    fn one_param_model(theta: f64) -> NetworkModel {
        NetworkModel::from_parts(
            vec![LayerSpec::new(1, 1, Activation::Linear)],
            vec![array![[theta]]],
            vec![Array1::zeros(1)],
            0,
        )
        .unwrap()
    }

    fn grad_of(value: f64) -> Gradients {
        Gradients {
            weights: vec![array![[value]]],
            biases: vec![Array1::zeros(1)],
        }
    }

    #[test]
    fn sgd_step_is_definitional() {
        let mut model = one_param_model(1.0);
        let mut state = OptimizerState::new(OptimizerConfig::sgd(0.1), &model).unwrap();
        optimizer_step(&mut model, &grad_of(2.0), &mut state, 0).unwrap();
        assert!((model.weights()[0][[0, 0]] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // g = 1 everywhere: bias-corrected m_hat = v_hat = 1, so the step is
        // lr / (1 + eps) which is about lr.
        let specs = vec![
            LayerSpec::new(2, 3, Activation::Tanh),
            LayerSpec::new(3, 2, Activation::Softmax),
        ];
        let mut model = crate::nn::build_model(&specs, 4).unwrap();
        let before = model.weights().to_vec();
        let grads = Gradients {
            weights: model.weights().iter().map(|w| Array2::ones(w.dim())).collect(),
            biases: model.biases().iter().map(|b| Array1::ones(b.len())).collect(),
        };
        let mut state = OptimizerState::new(OptimizerConfig::adam(0.001), &model).unwrap();
        optimizer_step(&mut model, &grads, &mut state, 0).unwrap();
        for (w_after, w_before) in model.weights().iter().zip(&before) {
            for (a, b) in w_after.iter().zip(w_before.iter()) {
                assert!(((b - a) - 0.001).abs() < 1e-6, "step was {}", b - a);
            }
        }
    }

    #[test]
    fn zero_gradient_leaves_model_bitwise_unchanged() {
        for cfg in [OptimizerConfig::sgd(0.5), OptimizerConfig::adam(0.5)] {
            let mut model = one_param_model(0.3125);
            let mut state = OptimizerState::new(cfg, &model).unwrap();
            optimizer_step(&mut model, &grad_of(0.0), &mut state, 0).unwrap();
            assert_eq!(model.weights()[0][[0, 0]].to_bits(), 0.3125f64.to_bits());
        }
    }

    #[test]
    fn decay_schedule_multiplies_per_crossed_entry() {
        let cfg = OptimizerConfig::sgd(1.0).with_decay(vec![20, 40], 0.1);
        assert!((cfg.effective_learning_rate(0) - 1.0).abs() < 1e-15);
        assert!((cfg.effective_learning_rate(19) - 1.0).abs() < 1e-15);
        assert!((cfg.effective_learning_rate(20) - 0.1).abs() < 1e-15);
        assert!((cfg.effective_learning_rate(39) - 0.1).abs() < 1e-15);
        assert!((cfg.effective_learning_rate(40) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut model = one_param_model(1.0);
        let mut state = OptimizerState::new(OptimizerConfig::sgd(0.1), &model).unwrap();
        let bad = Gradients {
            weights: vec![Array2::zeros((2, 2))],
            biases: vec![Array1::zeros(1)],
        };
        assert!(optimizer_step(&mut model, &bad, &mut state, 0).is_err());
    }
}
