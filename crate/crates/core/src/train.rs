//! The training loop: epoch shuffling, batched forward/backward, optimizer
//! steps, and per-epoch accuracy logging.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TEST, TRAIN};
use crate::error::{Error, Result};
use crate::grad::{self, LossTerms};
use crate::nn::{argmax, NetworkModel};
use crate::optim::{optimizer_step, OptimizerConfig, OptimizerState};
use crate::reg::{Amplifier, RegularizerConfig, VarianceState};
use crate::seeding;

/// Full training configuration for one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Regularized training when present; plain cross-entropy otherwise.
    #[serde(default)]
    pub defense: Option<RegularizerConfig>,
    /// Seed for the per-epoch batch shuffle.
    pub shuffle_seed: u64,
}

/// One row of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

/// Log plus wall-clock per-batch timings for the whole run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochStats>,
    pub batch_seconds: Vec<f64>,
}

/// Train `model` in place on the dataset's train split.
///
/// Batch order is reshuffled every epoch from a seed derived as
/// `derive_seed(shuffle_seed, epoch)`, so identical configurations reproduce
/// identical logs and final weights bit for bit. `epochs = 0` leaves the
/// model untouched and returns an empty log.
pub fn train(model: &mut NetworkModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 {
        return Err(Error::InvalidSpec("batch size must be positive".into()));
    }
    if let Some(defense) = &cfg.defense {
        defense.validate()?;
    }
    let train_indices: Vec<usize> = dataset.split(TRAIN)?.to_vec();
    let k = model.output_width();

    let mut optimizer = OptimizerState::new(cfg.optimizer.clone(), model)?;
    let (alpha, beta) = cfg
        .defense
        .as_ref()
        .map(|d| (d.alpha, d.beta))
        .unwrap_or((0.0, 0.0));
    let amp_train = cfg.defense.as_ref().and_then(|d| d.train_amplifier());
    let amp_infer = cfg.defense.as_ref().and_then(|d| d.infer_amplifier());
    let mut variance_state = cfg
        .defense
        .as_ref()
        .filter(|d| d.beta != 0.0)
        .map(|d| VarianceState::new(d.variance_mode, k));

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut batch_seconds = Vec::new();
    let mut order = train_indices.clone();

    for epoch in 0..cfg.epochs {
        if let (Some(state), Some(defense)) = (&mut variance_state, &cfg.defense) {
            if defense.reset_tracker_each_epoch {
                *state = VarianceState::new(defense.variance_mode, k);
            }
        }
        let mut rng = seeding::rng_from(seeding::derive_seed(cfg.shuffle_seed, epoch as u64));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let started = Instant::now();
            let batch = dataset.features_of(chunk);
            let labels = dataset.labels_of(chunk);
            let trace = model.forward_with_trace_amp(&batch, amp_train.as_ref())?;
            if let Some(state) = &mut variance_state {
                // Means fold the current batch in before the loss reads them.
                state.update(trace.scores(), &labels)?;
            }
            let terms = LossTerms {
                alpha,
                beta,
                variance: variance_state.as_ref(),
            };
            let (grads, breakdown) = grad::backward_from_trace(model, &batch, &labels, &trace, &terms)?;
            optimizer_step(model, &grads, &mut optimizer, epoch)?;
            loss_sum += breakdown.total;
            batches += 1;
            batch_seconds.push(started.elapsed().as_secs_f64());
        }

        let train_accuracy = split_accuracy(model, dataset, TRAIN, amp_infer.as_ref())?;
        let test_accuracy = if dataset.has_split(TEST) {
            Some(split_accuracy(model, dataset, TEST, amp_infer.as_ref())?)
        } else {
            None
        };
        log.push(EpochStats {
            epoch,
            train_loss: loss_sum / batches as f64,
            train_accuracy,
            test_accuracy,
        });
    }

    Ok(TrainOutcome { log, batch_seconds })
}

/// Fraction of a split classified correctly (argmax of scores, lowest index
/// on ties). Inference-time amplification applies when configured.
pub fn split_accuracy(
    model: &NetworkModel,
    dataset: &Dataset,
    split: &str,
    amp: Option<&Amplifier>,
) -> Result<f64> {
    let indices = dataset.split(split)?;
    let features = dataset.features_of(indices);
    let labels = dataset.labels_of(indices);
    accuracy_on(model, &features, &labels, amp)
}

pub(crate) fn accuracy_on(
    model: &NetworkModel,
    features: &Array2<f64>,
    labels: &[usize],
    amp: Option<&Amplifier>,
) -> Result<f64> {
    let scores = model.batch_scores(features, amp)?;
    let correct = scores
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &label)| argmax(row.view()) == label)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::nn::{build_model, Activation, LayerSpec};

    fn toy_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 32,
            optimizer: OptimizerConfig::adam(0.01),
            defense: None,
            shuffle_seed: 42,
        }
    }

    #[test]
    fn zero_epochs_leaves_the_model_untouched() {
        let dataset = gen_synthetic(3, 6, 10, 5, 0.5, 1).unwrap();
        let specs = vec![
            LayerSpec::new(6, 8, Activation::Tanh),
            LayerSpec::new(8, 3, Activation::Softmax),
        ];
        let mut model = build_model(&specs, 2).unwrap();
        let before = model.clone();
        let outcome = train(&mut model, &dataset, &toy_config(0)).unwrap();
        assert!(outcome.log.is_empty());
        for (a, b) in model.weights().iter().zip(before.weights()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn linearly_separable_toy_task_reaches_full_train_accuracy() {
        // Two well-separated 2-D blobs, 100 points each.
        let dataset = gen_synthetic(2, 2, 100, 20, 0.05, 7).unwrap();
        let specs = vec![
            LayerSpec::new(2, 8, Activation::Tanh),
            LayerSpec::new(8, 2, Activation::Softmax),
        ];
        let mut model = build_model(&specs, 3).unwrap();
        let mut cfg = toy_config(200);
        cfg.optimizer = OptimizerConfig::sgd(0.01);
        let outcome = train(&mut model, &dataset, &cfg).unwrap();
        assert_eq!(outcome.log.len(), 200);
        let last = outcome.log.last().unwrap();
        assert_eq!(last.train_accuracy, 1.0, "log tail: {last:?}");
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let dataset = gen_synthetic(3, 6, 20, 10, 0.6, 4).unwrap();
        let specs = vec![
            LayerSpec::new(6, 10, Activation::Tanh),
            LayerSpec::new(10, 3, Activation::Softmax),
        ];
        let mut cfg = toy_config(5);
        cfg.defense = Some(RegularizerConfig::new(1.0, 10.0));

        let mut run = || {
            let mut model = build_model(&specs, 9).unwrap();
            let outcome = train(&mut model, &dataset, &cfg).unwrap();
            (model, outcome)
        };
        let (m1, o1) = run();
        let (m2, o2) = run();
        for (a, b) in m1.weights().iter().zip(m2.weights()) {
            assert_eq!(a, b);
        }
        for (a, b) in o1.log.iter().zip(&o2.log) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.train_accuracy, b.train_accuracy);
        }
    }

    #[test]
    fn missing_train_split_is_an_error() {
        let mut dataset = gen_synthetic(2, 4, 5, 5, 0.5, 1).unwrap();
        dataset.set_split(TRAIN, vec![]).unwrap();
        let specs = vec![LayerSpec::new(4, 2, Activation::Softmax)];
        let mut model = build_model(&specs, 0).unwrap();
        let err = train(&mut model, &dataset, &toy_config(1)).unwrap_err();
        assert!(matches!(err, Error::EmptySplit(_)));
    }
}
