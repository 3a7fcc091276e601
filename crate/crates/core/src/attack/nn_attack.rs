//! Learned attack classifiers.
//!
//! The sorted attack trains one network on descending-sorted score vectors;
//! the unsorted attack (three sub-networks) consumes raw scores plus the
//! one-hot true label. Both regress membership targets (member 1, non-member
//! 0) under mean squared error and predict member when the sigmoid output
//! reaches 0.5.

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::grad::{self, Cotangent};
use crate::nn::{build_model, Activation, LayerSpec, NetworkModel};
use crate::optim::{optimizer_step, OptimizerConfig, OptimizerKind, OptimizerState};
use crate::seeding;

use super::ScoreRecord;

/// Attack-classifier training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackTrainConfig {
    pub seed: u64,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    pub decay_epochs: Vec<usize>,
    #[serde(default = "default_decay")]
    pub decay_factor: f64,
}

fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    0.001
}
fn default_decay() -> f64 {
    0.1
}

impl AttackTrainConfig {
    /// Sorted attack defaults: 100 epochs, rate decay at 40 and 90.
    pub fn sorted_nn(seed: u64) -> Self {
        Self {
            seed,
            epochs: 100,
            batch_size: default_batch(),
            learning_rate: default_lr(),
            decay_epochs: vec![40, 90],
            decay_factor: default_decay(),
        }
    }

    /// Unsorted attack defaults: 200 epochs, rate decay at 30.
    pub fn unsorted_nsh(seed: u64) -> Self {
        Self {
            seed,
            epochs: 200,
            batch_size: default_batch(),
            learning_rate: default_lr(),
            decay_epochs: vec![30],
            decay_factor: default_decay(),
        }
    }

    fn optimizer(&self) -> OptimizerConfig {
        let mut cfg = OptimizerConfig::adam(self.learning_rate);
        cfg.kind = OptimizerKind::Adam;
        cfg.decay_epochs = self.decay_epochs.clone();
        cfg.decay_factor = self.decay_factor;
        cfg
    }
}

/// A trained attack classifier.
#[derive(Debug, Clone)]
pub enum AttackModel {
    SortedNN {
        net: NetworkModel,
    },
    UnsortedNsh {
        score_encoder: NetworkModel,
        label_encoder: NetworkModel,
        combiner: NetworkModel,
    },
}

impl AttackModel {
    /// Expected width of the score vectors this attack consumes.
    pub fn num_classes(&self) -> usize {
        match self {
            AttackModel::SortedNN { net } => net.input_width(),
            AttackModel::UnsortedNsh { score_encoder, .. } => score_encoder.input_width(),
        }
    }
}

fn check_training_records(known: &[ScoreRecord]) -> Result<usize> {
    if known.is_empty() {
        return Err(Error::Attack("no attack training records".into()));
    }
    let members = known.iter().filter(|r| r.is_member).count();
    if members == 0 || members == known.len() {
        return Err(Error::Attack(
            "attack training data must contain both members and non-members".into(),
        ));
    }
    let k = known[0].scores.len();
    if known.iter().any(|r| r.scores.len() != k) {
        return Err(Error::Attack("inconsistent score widths".into()));
    }
    Ok(k)
}

fn sorted_desc(scores: &[f64]) -> Vec<f64> {
    let mut v = scores.to_vec();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    v
}

fn one_hot(label: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    if label < k {
        v[label] = 1.0;
    }
    v
}

fn stack_rows(rows: Vec<Vec<f64>>) -> Array2<f64> {
    let n = rows.len();
    let d = rows[0].len();
    let mut out = Array2::zeros((n, d));
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    out
}

fn membership_targets(records: &[ScoreRecord], order: &[usize]) -> Array2<f64> {
    let mut t = Array2::zeros((order.len(), 1));
    for (i, &idx) in order.iter().enumerate() {
        t[[i, 0]] = if records[idx].is_member { 1.0 } else { 0.0 };
    }
    t
}

/// Train the sorted attack: descending-sorted scores through
/// `k -> 512 -> 256 -> 128 -> 1` (ReLU hiddens, sigmoid head).
pub fn train_sorted_nn_attack(
    known: &[ScoreRecord],
    cfg: &AttackTrainConfig,
) -> Result<AttackModel> {
    let k = check_training_records(known)?;
    let specs = vec![
        LayerSpec::new(k, 512, Activation::ReLU),
        LayerSpec::new(512, 256, Activation::ReLU),
        LayerSpec::new(256, 128, Activation::ReLU),
        LayerSpec::new(128, 1, Activation::Sigmoid),
    ];
    let mut net = build_model(&specs, seeding::derive_seed(cfg.seed, 0))?;
    let inputs = stack_rows(known.iter().map(|r| sorted_desc(&r.scores)).collect());

    let mut optimizer = OptimizerState::new(cfg.optimizer(), &net)?;
    let shuffle_base = seeding::derive_seed(cfg.seed, 1);
    let mut order: Vec<usize> = (0..known.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = seeding::rng_from(seeding::derive_seed(shuffle_base, epoch as u64));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = gather_rows(&inputs, chunk);
            let targets = membership_targets(known, chunk);
            let (grads, _loss, _input) = grad::backward_mse(&net, &batch, &targets)?;
            optimizer_step(&mut net, &grads, &mut optimizer, epoch)?;
        }
    }
    Ok(AttackModel::SortedNN { net })
}

/// Train the unsorted attack: a score encoder (`k -> 512 -> 64`), a one-hot
/// label encoder of the same shape, and a combiner
/// (`128 -> 256 -> 64 -> 1`) over the concatenated encodings.
pub fn train_unsorted_nsh_attack(
    known: &[ScoreRecord],
    cfg: &AttackTrainConfig,
) -> Result<AttackModel> {
    let k = check_training_records(known)?;
    let encoder_specs = |input: usize| {
        vec![
            LayerSpec::new(input, 512, Activation::ReLU),
            LayerSpec::new(512, 64, Activation::ReLU),
        ]
    };
    let combiner_specs = vec![
        LayerSpec::new(128, 256, Activation::ReLU),
        LayerSpec::new(256, 64, Activation::ReLU),
        LayerSpec::new(64, 1, Activation::Sigmoid),
    ];
    let mut score_encoder = build_model(&encoder_specs(k), seeding::derive_seed(cfg.seed, 0))?;
    let mut label_encoder = build_model(&encoder_specs(k), seeding::derive_seed(cfg.seed, 1))?;
    let mut combiner = build_model(&combiner_specs, seeding::derive_seed(cfg.seed, 2))?;

    let score_inputs = stack_rows(known.iter().map(|r| r.scores.clone()).collect());
    let label_inputs = stack_rows(known.iter().map(|r| one_hot(r.true_label, k)).collect());

    let opt_cfg = cfg.optimizer();
    let mut opt_s = OptimizerState::new(opt_cfg.clone(), &score_encoder)?;
    let mut opt_l = OptimizerState::new(opt_cfg.clone(), &label_encoder)?;
    let mut opt_c = OptimizerState::new(opt_cfg, &combiner)?;

    let shuffle_base = seeding::derive_seed(cfg.seed, 3);
    let mut order: Vec<usize> = (0..known.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = seeding::rng_from(seeding::derive_seed(shuffle_base, epoch as u64));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let scores = gather_rows(&score_inputs, chunk);
            let labels = gather_rows(&label_inputs, chunk);
            let targets = membership_targets(known, chunk);
            let n = chunk.len() as f64;

            let trace_s = score_encoder.forward_with_trace(&scores)?;
            let trace_l = label_encoder.forward_with_trace(&labels)?;
            let concat = concat_columns(trace_s.output(), trace_l.output());
            let trace_c = combiner.forward_with_trace(&concat)?;

            let diff = trace_c.output() - &targets;
            let grad_out = diff.mapv(|d| 2.0 * d / n);
            let (grads_c, d_concat) = grad::backprop(
                &combiner,
                &concat,
                &trace_c,
                Cotangent::Output(grad_out),
                None,
            )?;
            let d_score = d_concat.slice(s![.., ..64]).to_owned();
            let d_label = d_concat.slice(s![.., 64..]).to_owned();
            let (grads_s, _) = grad::backprop(
                &score_encoder,
                &scores,
                &trace_s,
                Cotangent::Output(d_score),
                None,
            )?;
            let (grads_l, _) = grad::backprop(
                &label_encoder,
                &labels,
                &trace_l,
                Cotangent::Output(d_label),
                None,
            )?;

            optimizer_step(&mut combiner, &grads_c, &mut opt_c, epoch)?;
            optimizer_step(&mut score_encoder, &grads_s, &mut opt_s, epoch)?;
            optimizer_step(&mut label_encoder, &grads_l, &mut opt_l, epoch)?;
        }
    }
    Ok(AttackModel::UnsortedNsh {
        score_encoder,
        label_encoder,
        combiner,
    })
}

fn gather_rows(matrix: &Array2<f64>, indices: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((indices.len(), matrix.ncols()));
    for (row, &idx) in indices.iter().enumerate() {
        out.row_mut(row).assign(&matrix.row(idx));
    }
    out
}

fn concat_columns(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), a.ncols() + b.ncols()));
    out.slice_mut(s![.., ..a.ncols()]).assign(a);
    out.slice_mut(s![.., a.ncols()..]).assign(b);
    out
}

/// Membership prediction: final probability at or above 0.5 means member.
pub fn attack_predict(attack: &AttackModel, record: &ScoreRecord) -> Result<bool> {
    if record.scores.len() != attack.num_classes() {
        return Err(Error::Attack(format!(
            "record has {} scores, attack expects {}",
            record.scores.len(),
            attack.num_classes()
        )));
    }
    let p = attack_probability(attack, record)?;
    Ok(p >= 0.5)
}

/// Raw membership probability from the attack's sigmoid head.
pub fn attack_probability(attack: &AttackModel, record: &ScoreRecord) -> Result<f64> {
    match attack {
        AttackModel::SortedNN { net } => {
            let input = stack_rows(vec![sorted_desc(&record.scores)]);
            let trace = net.forward_with_trace(&input)?;
            Ok(trace.output()[[0, 0]])
        }
        AttackModel::UnsortedNsh {
            score_encoder,
            label_encoder,
            combiner,
        } => {
            let k = score_encoder.input_width();
            let scores = stack_rows(vec![record.scores.clone()]);
            let labels = stack_rows(vec![one_hot(record.true_label, k)]);
            let es = score_encoder.forward_with_trace(&scores)?;
            let el = label_encoder.forward_with_trace(&labels)?;
            let concat = concat_columns(es.output(), el.output());
            let trace = combiner.forward_with_trace(&concat)?;
            Ok(trace.output()[[0, 0]])
        }
    }
}

/// Balanced membership-inference accuracy of a trained attack.
pub fn nn_attack_accuracy(attack: &AttackModel, eval: &[ScoreRecord]) -> Result<f64> {
    let predictions: Vec<Result<(bool, bool)>> = exec::map(eval, |record| {
        Ok((record.is_member, attack_predict(attack, record)?))
    });
    let mut pairs = Vec::with_capacity(eval.len());
    for p in predictions {
        pairs.push(p?);
    }
    super::balanced_accuracy(&pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::argmax;

    fn record(scores: Vec<f64>, y: usize, member: bool, id: usize) -> ScoreRecord {
        let predicted = argmax(ndarray::ArrayView1::from(&scores));
        ScoreRecord {
            sample_id: id,
            is_member: member,
            true_label: y,
            predicted_label: predicted,
            scores,
            boundary_distance: None,
        }
    }

    /// Members one-hot, non-members uniform: trivially separable.
    fn separable_records(n_per_side: usize, k: usize) -> Vec<ScoreRecord> {
        let mut records = Vec::new();
        for i in 0..n_per_side {
            let class = i % k;
            let mut scores = vec![0.0; k];
            scores[class] = 1.0;
            records.push(record(scores, class, true, i));
            records.push(record(vec![1.0 / k as f64; k], class, false, n_per_side + i));
        }
        records
    }

    #[test]
    fn sorted_attack_separates_a_separable_toy() {
        let records = separable_records(40, 4);
        let mut cfg = AttackTrainConfig::sorted_nn(5);
        cfg.epochs = 40;
        let attack = train_sorted_nn_attack(&records, &cfg).unwrap();
        let acc = nn_attack_accuracy(&attack, &records).unwrap();
        assert_eq!(acc, 1.0, "separable toy should be learned exactly");
    }

    #[test]
    fn sorted_attack_is_permutation_invariant() {
        let records = separable_records(20, 4);
        let mut cfg = AttackTrainConfig::sorted_nn(5);
        cfg.epochs = 10;
        let attack = train_sorted_nn_attack(&records, &cfg).unwrap();
        let base = record(vec![0.6, 0.1, 0.2, 0.1], 0, true, 0);
        let permuted = record(vec![0.1, 0.2, 0.6, 0.1], 2, true, 0);
        assert_eq!(
            attack_predict(&attack, &base).unwrap(),
            attack_predict(&attack, &permuted).unwrap()
        );
    }

    #[test]
    fn single_class_membership_is_rejected() {
        let records: Vec<ScoreRecord> = (0..10)
            .map(|i| record(vec![0.5, 0.5], 0, true, i))
            .collect();
        let cfg = AttackTrainConfig::sorted_nn(1);
        assert!(train_sorted_nn_attack(&records, &cfg).is_err());
        assert!(train_unsorted_nsh_attack(&records, &cfg).is_err());
    }

    #[test]
    fn nsh_exploits_correctness() {
        // Members always predicted correctly, non-members always wrong.
        let k = 4;
        let mut records = Vec::new();
        for i in 0..60 {
            let class = i % k;
            let mut scores = vec![0.04; k];
            scores[class] = 0.88;
            records.push(record(scores.clone(), class, true, i));
            records.push(record(scores, (class + 1) % k, false, 100 + i));
        }
        let mut cfg = AttackTrainConfig::unsorted_nsh(7);
        cfg.epochs = 60;
        let attack = train_unsorted_nsh_attack(&records, &cfg).unwrap();
        let acc = nn_attack_accuracy(&attack, &records).unwrap();
        assert!(acc >= 0.95, "accuracy {acc}");
    }

    #[test]
    fn one_hot_encoding_shape() {
        assert_eq!(one_hot(2, 4), vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn score_width_mismatch_is_an_error() {
        let records = separable_records(10, 4);
        let mut cfg = AttackTrainConfig::sorted_nn(3);
        cfg.epochs = 1;
        let attack = train_sorted_nn_attack(&records, &cfg).unwrap();
        let narrow = record(vec![0.5, 0.5], 0, true, 0);
        assert!(attack_predict(&attack, &narrow).is_err());
    }

    #[test]
    fn prediction_threshold_is_inclusive_at_half() {
        // A zero-weight sigmoid head outputs exactly 0.5, which is member.
        let net = NetworkModel::from_parts(
            vec![LayerSpec::new(2, 1, Activation::Sigmoid)],
            vec![Array2::zeros((1, 2))],
            vec![ndarray::Array1::zeros(1)],
            0,
        )
        .unwrap();
        let attack = AttackModel::SortedNN { net };
        let r = record(vec![0.5, 0.5], 0, true, 0);
        assert!((attack_probability(&attack, &r).unwrap() - 0.5).abs() < 1e-15);
        assert!(attack_predict(&attack, &r).unwrap());
    }
}
