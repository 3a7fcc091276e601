//! The adversary suite: per-sample score records, metric-based attacks with
//! class-wise threshold calibration, learned attack classifiers, and the
//! label-only boundary-distance attack.
//!
//! Probabilities are floored at `1e-30` before logarithms; the complementary
//! `1 - p` arguments additionally cap `p` at `1 - 1e-7` so every metric stays
//! finite. Only threshold orderings matter downstream.

mod boundary;
mod nn_attack;

pub use boundary::{
    boundary_distance, boundary_distances, label_only_attack, BoundaryConfig, BoundaryOutcome,
    LabelOnlyOutcome,
};
pub use nn_attack::{
    attack_predict, nn_attack_accuracy, train_sorted_nn_attack, train_unsorted_nsh_attack,
    AttackModel, AttackTrainConfig,
};

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::grad::PROB_FLOOR;
use crate::nn::{argmax, NetworkModel};
use crate::reg::Amplifier;

/// Cap applied to a probability before forming `1 - p` log arguments.
pub const PROB_ONE_MARGIN: f64 = 1e-7;

fn ln_floored(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// One sample's model response and membership ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: usize,
    pub is_member: bool,
    pub true_label: usize,
    pub predicted_label: usize,
    pub scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary_distance: Option<f64>,
}

impl ScoreRecord {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.scores.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Attack(format!(
                "record {} scores sum to {sum}",
                self.sample_id
            )));
        }
        let arg = argmax(ndarray::ArrayView1::from(&self.scores));
        if arg != self.predicted_label {
            return Err(Error::Attack(format!(
                "record {} predicted_label {} is not the argmax {arg}",
                self.sample_id, self.predicted_label
            )));
        }
        Ok(())
    }
}

/// Run the target model over a split and record one entry per sample.
///
/// `amp` is the inference-time amplifier of the deployed defense, if any.
pub fn collect_scores(
    model: &NetworkModel,
    dataset: &Dataset,
    split_name: &str,
    is_member: bool,
    amp: Option<&Amplifier>,
) -> Result<Vec<ScoreRecord>> {
    let indices = dataset.split(split_name)?;
    let features = dataset.features_of(indices);
    let scores = model.batch_scores(&features, amp)?;
    Ok(indices
        .iter()
        .zip(scores.rows())
        .map(|(&idx, row)| ScoreRecord {
            sample_id: idx,
            is_member,
            true_label: dataset.labels[idx],
            predicted_label: argmax(row),
            scores: row.to_vec(),
            boundary_distance: None,
        })
        .collect())
}

/// Write records as JSON lines.
pub fn write_jsonl(records: &[ScoreRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read a JSONL score dump.
pub fn read_jsonl(path: &Path) -> Result<Vec<ScoreRecord>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ScoreRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Attack(format!("line {}: {e}", i + 1)))?;
        records.push(record);
    }
    Ok(records)
}

/// Member iff the target model classifies the sample correctly.
pub fn metric_correctness(record: &ScoreRecord) -> bool {
    record.predicted_label == record.true_label
}

/// True-class confidence score.
pub fn metric_confidence(record: &ScoreRecord) -> f64 {
    record.scores[record.true_label]
}

/// Prediction entropy `-sum_i p_i ln p_i` (floored logs, so one-hot is 0).
pub fn metric_entropy(record: &ScoreRecord) -> f64 {
    record
        .scores
        .iter()
        .map(|&p| if p == 0.0 { 0.0 } else { -p * ln_floored(p) })
        .sum()
}

/// Label-aware modified entropy: zero only for confident correct predictions.
pub fn metric_modified_entropy(record: &ScoreRecord) -> f64 {
    let y = record.true_label;
    let p_y = record.scores[y];
    let mut me = -(1.0 - p_y) * ln_floored(p_y);
    for (i, &p) in record.scores.iter().enumerate() {
        if i != y && p != 0.0 {
            me -= p * ln_floored(1.0 - p.min(1.0 - PROB_ONE_MARGIN));
        }
    }
    me
}

/// Which per-record value a threshold attack consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Confidence,
    Entropy,
    ModifiedEntropy,
    BoundaryDistance,
}

impl MetricKind {
    /// Member side of the comparison for this metric.
    pub fn natural_direction(self) -> Direction {
        match self {
            MetricKind::Confidence | MetricKind::BoundaryDistance => Direction::MemberIfGE,
            MetricKind::Entropy | MetricKind::ModifiedEntropy => Direction::MemberIfLE,
        }
    }

    pub fn value(self, record: &ScoreRecord) -> Result<f64> {
        Ok(match self {
            MetricKind::Confidence => metric_confidence(record),
            MetricKind::Entropy => metric_entropy(record),
            MetricKind::ModifiedEntropy => metric_modified_entropy(record),
            MetricKind::BoundaryDistance => record.boundary_distance.ok_or_else(|| {
                Error::Attack(format!(
                    "record {} has no boundary distance",
                    record.sample_id
                ))
            })?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    MemberIfGE,
    MemberIfLE,
}

impl Direction {
    fn predicts_member(self, value: f64, threshold: f64) -> bool {
        match self {
            Direction::MemberIfGE => value >= threshold,
            Direction::MemberIfLE => value <= threshold,
        }
    }
}

/// Calibrated thresholds: one per class seen during calibration plus a
/// global fallback for classes missing from the calibration records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdSet {
    pub metric: MetricKind,
    pub direction: Direction,
    pub per_class: BTreeMap<usize, f64>,
    pub global: f64,
}

impl ThresholdSet {
    pub fn threshold_for(&self, class: usize) -> f64 {
        self.per_class.get(&class).copied().unwrap_or(self.global)
    }

    pub fn predicts_member(&self, record: &ScoreRecord) -> Result<bool> {
        let value = self.metric.value(record)?;
        Ok(self
            .direction
            .predicts_member(value, self.threshold_for(record.true_label)))
    }
}

/// Sweep candidate thresholds over calibration values and keep the best.
///
/// Candidates are the midpoints between consecutive distinct values plus
/// `-inf`/`+inf` sentinels; the winner maximizes balanced accuracy, ties
/// going to the smallest threshold. A side with no calibration samples
/// counts as perfectly recalled (vacuous), which drives one-sided classes
/// to an always-member or never-member rule.
pub fn sweep_threshold(values: &[(f64, bool)], direction: Direction) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Attack("no calibration values".into()));
    }
    let mut sorted: Vec<f64> = values.iter().map(|&(v, _)| v).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted.dedup();

    let mut candidates = Vec::with_capacity(sorted.len() + 1);
    candidates.push(f64::NEG_INFINITY);
    for pair in sorted.windows(2) {
        candidates.push(0.5 * (pair[0] + pair[1]));
    }
    candidates.push(f64::INFINITY);

    let members = values.iter().filter(|&&(_, m)| m).count();
    let nonmembers = values.len() - members;

    let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &tau in &candidates {
        let mut hit_members = 0usize;
        let mut hit_nonmembers = 0usize;
        for &(v, is_member) in values {
            let predicted = direction.predicts_member(v, tau);
            if is_member && predicted {
                hit_members += 1;
            }
            if !is_member && !predicted {
                hit_nonmembers += 1;
            }
        }
        let member_recall = if members == 0 {
            1.0
        } else {
            hit_members as f64 / members as f64
        };
        let nonmember_recall = if nonmembers == 0 {
            1.0
        } else {
            hit_nonmembers as f64 / nonmembers as f64
        };
        let balanced = 0.5 * (member_recall + nonmember_recall);
        if balanced > best.1 {
            best = (tau, balanced);
        }
    }
    Ok(best)
}

/// Calibrate per-class thresholds for a metric on attacker-known records.
pub fn select_class_thresholds(
    known: &[ScoreRecord],
    metric: MetricKind,
    direction: Direction,
) -> Result<ThresholdSet> {
    if known.is_empty() {
        return Err(Error::Attack("no calibration records".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<(f64, bool)>> = BTreeMap::new();
    let mut all: Vec<(f64, bool)> = Vec::with_capacity(known.len());
    for record in known {
        let v = metric.value(record)?;
        by_class
            .entry(record.true_label)
            .or_default()
            .push((v, record.is_member));
        all.push((v, record.is_member));
    }
    let (global, _) = sweep_threshold(&all, direction)?;
    let mut per_class = BTreeMap::new();
    for (class, values) in by_class {
        let (tau, _) = sweep_threshold(&values, direction)?;
        per_class.insert(class, tau);
    }
    Ok(ThresholdSet {
        metric,
        direction,
        per_class,
        global,
    })
}

/// Decision rule of a metric attack.
pub enum AttackRule<'a> {
    Correctness,
    Thresholds(&'a ThresholdSet),
}

/// Balanced membership-inference accuracy of a rule over evaluation records:
/// half member recall plus half non-member recall.
pub fn metric_attack_accuracy(eval: &[ScoreRecord], rule: &AttackRule) -> Result<f64> {
    let predictions: Vec<Result<(bool, bool)>> = exec::map(eval, |record| {
        let predicted = match rule {
            AttackRule::Correctness => metric_correctness(record),
            AttackRule::Thresholds(set) => set.predicts_member(record)?,
        };
        Ok((record.is_member, predicted))
    });
    let mut pairs = Vec::with_capacity(eval.len());
    for p in predictions {
        pairs.push(p?);
    }
    balanced_accuracy(&pairs)
}

/// Balanced accuracy over `(is_member, predicted_member)` pairs.
pub fn balanced_accuracy(pairs: &[(bool, bool)]) -> Result<f64> {
    let members = pairs.iter().filter(|&&(m, _)| m).count();
    let nonmembers = pairs.len() - members;
    if members == 0 || nonmembers == 0 {
        return Err(Error::Attack(
            "balanced accuracy needs both members and non-members".into(),
        ));
    }
    let hit_members = pairs.iter().filter(|&&(m, p)| m && p).count();
    let hit_nonmembers = pairs.iter().filter(|&&(m, p)| !m && !p).count();
    Ok(0.5 * (hit_members as f64 / members as f64)
        + 0.5 * (hit_nonmembers as f64 / nonmembers as f64))
}
