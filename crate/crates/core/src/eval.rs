//! Quantitative evaluation: accuracy gaps and the correctness identity,
//! output-score variance, per-sample loss summaries, and histogram-based
//! distribution distances.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::ScoreRecord;
use crate::data::{Dataset, TEST, TRAIN};
use crate::error::{Error, Result};
use crate::exec;
use crate::grad;
use crate::nn::NetworkModel;
use crate::reg::Amplifier;
use crate::train::split_accuracy;

/// Train/test accuracy and their gap (exact fractions).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AccuracyGap {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub gap: f64,
}

/// Accuracy over the full train and test splits.
pub fn accuracy_gap(
    model: &NetworkModel,
    dataset: &Dataset,
    amp: Option<&Amplifier>,
) -> Result<AccuracyGap> {
    let train_accuracy = split_accuracy(model, dataset, TRAIN, amp)?;
    let test_accuracy = split_accuracy(model, dataset, TEST, amp)?;
    Ok(AccuracyGap {
        train_accuracy,
        test_accuracy,
        gap: train_accuracy - test_accuracy,
    })
}

/// Accuracy gap computed on the exact record sets an attack evaluates:
/// member accuracy minus non-member accuracy.
pub fn eval_records_gap(members: &[ScoreRecord], nonmembers: &[ScoreRecord]) -> Result<(f64, f64, f64)> {
    let acc = |records: &[ScoreRecord]| -> Result<f64> {
        if records.is_empty() {
            return Err(Error::Eval("empty record set".into()));
        }
        let correct = records
            .iter()
            .filter(|r| r.predicted_label == r.true_label)
            .count();
        Ok(correct as f64 / records.len() as f64)
    };
    let member_acc = acc(members)?;
    let nonmember_acc = acc(nonmembers)?;
    Ok((member_acc, nonmember_acc, member_acc - nonmember_acc))
}

/// Residual of the correctness identity: on balanced evaluation sets the
/// correctness attack accuracy equals half the accuracy gap plus one half.
pub fn correctness_identity_check(correctness_attack_acc: f64, gap: f64) -> f64 {
    (correctness_attack_acc - (0.5 * gap + 0.5)).abs()
}

/// Mean per-record population variance of the score components, split by
/// membership. Sides without records are `None`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScoreVariance {
    pub member: Option<f64>,
    pub nonmember: Option<f64>,
}

/// Population variance of one score vector's components.
pub fn record_score_variance(scores: &[f64]) -> f64 {
    let k = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / k;
    scores.iter().map(|&p| (p - mean) * (p - mean)).sum::<f64>() / k
}

/// Mean over records of the per-record score variance, per membership side.
pub fn score_variance(records: &[ScoreRecord]) -> ScoreVariance {
    let variances: Vec<(bool, f64)> =
        exec::map(records, |r| (r.is_member, record_score_variance(&r.scores)));
    let side = |member: bool| {
        let mut sum = 0.0;
        let mut n = 0usize;
        for &(m, v) in &variances {
            if m == member {
                sum += v;
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    };
    ScoreVariance {
        member: side(true),
        nonmember: side(false),
    }
}

/// Per-sample losses plus an exact summary over the sample set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossSummary {
    pub min: f64,
    pub max: f64,
    /// Interior deciles d10..d90, linearly interpolated.
    pub deciles: Vec<f64>,
    pub losses: Vec<f64>,
}

/// Cross-entropy loss of each record under the clamped-log rule.
pub fn loss_distribution(records: &[ScoreRecord]) -> Result<LossSummary> {
    if records.is_empty() {
        return Err(Error::Eval("no records".into()));
    }
    let losses: Vec<f64> = exec::map(records, |r| {
        grad::cross_entropy_one(&r.scores, r.true_label)
    });
    let mut sorted = losses.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let deciles = (1..10)
        .map(|d| quantile_sorted(&sorted, d as f64 / 10.0))
        .collect();
    Ok(LossSummary {
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        deciles,
        losses,
    })
}

/// Linear-interpolation quantile of an ascending-sorted slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Median of an unsorted slice (0 when empty).
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    quantile_sorted(&v, 0.5)
}

/// A fixed-width histogram: `B + 1` ascending edges and `B` counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
}

/// Default bin count for distribution comparisons.
pub const DEFAULT_BINS: usize = 100;

/// Shared `[min, max]` range over two samples, for comparable histograms.
pub fn shared_range(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in a.iter().chain(b) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Eval("cannot form a range over empty or non-finite samples".into()));
    }
    Ok((lo, hi))
}

/// Histogram over `[lo, hi]` with equal-width bins.
///
/// A value on an interior edge lands in the right bin; the rightmost bin is
/// closed. A degenerate range (`hi <= lo`) widens to `[lo, lo + 1]` so that
/// identical values fill a single bin.
pub fn build_histogram(values: &[f64], num_bins: usize, range: (f64, f64)) -> Result<Histogram> {
    if num_bins == 0 {
        return Err(Error::Eval("histogram needs at least one bin".into()));
    }
    if values.is_empty() {
        return Err(Error::Eval("histogram needs at least one value".into()));
    }
    let (lo, mut hi) = range;
    if hi <= lo {
        hi = lo + 1.0;
    }
    let edges: Vec<f64> = (0..=num_bins)
        .map(|i| lo + (hi - lo) * i as f64 / num_bins as f64)
        .collect();
    let mut counts = vec![0u64; num_bins];
    for &v in values {
        // Last edge at or below the value picks the bin (right-closed end).
        let pos = edges.partition_point(|&e| e <= v);
        let bin = pos.saturating_sub(1).min(num_bins - 1);
        counts[bin] += 1;
    }
    Ok(Histogram {
        bin_edges: edges,
        counts,
        total: values.len() as u64,
    })
}

/// Distances between two binned distributions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DistanceReport {
    pub euclidean: f64,
    pub kl: f64,
    pub tv: f64,
}

/// Smoothing mass added to every normalized bin before KL/TV.
pub const SMOOTHING_EPS: f64 = 1e-10;

/// Euclidean distance on raw counts; KL divergence and total variation on
/// normalized counts smoothed by `SMOOTHING_EPS` per bin and renormalized
/// (keeps KL finite on empty bins).
pub fn distance_report(p: &Histogram, q: &Histogram) -> Result<DistanceReport> {
    if p.bin_edges != q.bin_edges {
        return Err(Error::Eval("histograms have different bin edges".into()));
    }
    let euclidean = p
        .counts
        .iter()
        .zip(&q.counts)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt();

    let smooth = |h: &Histogram| -> Vec<f64> {
        let total = h.total as f64;
        let b = h.counts.len() as f64;
        h.counts
            .iter()
            .map(|&c| (c as f64 / total + SMOOTHING_EPS) / (1.0 + b * SMOOTHING_EPS))
            .collect()
    };
    let ps = smooth(p);
    let qs = smooth(q);
    let kl = ps
        .iter()
        .zip(&qs)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum::<f64>();
    let tv = 0.5
        * ps.iter()
            .zip(&qs)
            .map(|(&a, &b)| (a - b).abs())
            .sum::<f64>();
    Ok(DistanceReport { euclidean, kl, tv })
}

/// Modified-entropy histograms of two record dumps over a shared range.
pub fn modified_entropy_distances(
    members: &[ScoreRecord],
    nonmembers: &[ScoreRecord],
    bins: usize,
) -> Result<DistanceReport> {
    let me = |records: &[ScoreRecord]| -> Vec<f64> {
        exec::map(records, crate::attack::metric_modified_entropy)
    };
    let a = me(members);
    let b = me(nonmembers);
    let range = shared_range(&a, &b)?;
    let hist_a = build_histogram(&a, bins, range)?;
    let hist_b = build_histogram(&b, bins, range)?;
    distance_report(&hist_a, &hist_b)
}

/// Per-attack outcome in the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub mi_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold_global: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds_per_class: Option<BTreeMap<usize, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unconverged_distances: Option<usize>,
}

impl AttackOutcome {
    pub fn plain(mi_accuracy: f64) -> Self {
        Self {
            mi_accuracy,
            threshold_global: None,
            thresholds_per_class: None,
            unconverged_distances: None,
        }
    }
}

/// Full evaluation report for one trained model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Gap on the balanced evaluation sets (member minus non-member accuracy).
    pub accuracy_gap: f64,
    pub eval_member_accuracy: f64,
    pub eval_nonmember_accuracy: f64,
    /// `|correctness - (gap/2 + 1/2)|`; exact up to rounding.
    pub correctness_identity_residual: f64,
    pub attacks: BTreeMap<String, AttackOutcome>,
    pub score_variance: ScoreVariance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distances: Option<DistanceReport>,
    pub inference_batch_seconds_median: f64,
}

impl AttackReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(file)?)
    }

    /// Flat key/value CSV for tabulation.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut rows: Vec<(String, f64)> = vec![
            ("train_accuracy".into(), self.train_accuracy),
            ("test_accuracy".into(), self.test_accuracy),
            ("accuracy_gap".into(), self.accuracy_gap),
            ("eval_member_accuracy".into(), self.eval_member_accuracy),
            ("eval_nonmember_accuracy".into(), self.eval_nonmember_accuracy),
            (
                "correctness_identity_residual".into(),
                self.correctness_identity_residual,
            ),
        ];
        for (name, outcome) in &self.attacks {
            rows.push((format!("attack.{name}.mi_accuracy"), outcome.mi_accuracy));
        }
        if let Some(v) = self.score_variance.member {
            rows.push(("score_variance.member".into(), v));
        }
        if let Some(v) = self.score_variance.nonmember {
            rows.push(("score_variance.nonmember".into(), v));
        }
        if let Some(d) = &self.distances {
            rows.push(("distance.euclidean".into(), d.euclidean));
            rows.push(("distance.kl".into(), d.kl));
            rows.push(("distance.tv".into(), d.tv));
        }
        rows.push((
            "inference_batch_seconds_median".into(),
            self.inference_batch_seconds_median,
        ));
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| Error::Eval(format!("cannot write csv: {e}")))?;
        w.write_record(["key", "value"])
            .map_err(|e| Error::Eval(e.to_string()))?;
        for (k, v) in rows {
            w.write_record([k, format!("{v}")])
                .map_err(|e| Error::Eval(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}
