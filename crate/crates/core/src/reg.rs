//! Training-time regularizers that squeeze the output-score distribution.
//!
//! Three mechanisms cooperate:
//! - class-wise variance minimization against running per-class mean scores,
//! - a balanced-output penalty on each hidden layer (the two halves of a
//!   layer's activations are pushed toward equal sums),
//! - top-fraction amplification of hidden activations.
//!
//! Running means are treated as constants inside the backward pass: they are
//! updated from the current batch first, then read as fixed targets.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad;
use crate::nn::ForwardTrace;

/// How the variance target mean is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// Running mean per class (the default mechanism).
    ClassWise,
    /// Mean of the current batch only.
    BatchWise,
    /// Single running mean over descending-sorted score vectors.
    SingleSort,
}

/// Weights and amplification settings for the combined training loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerConfig {
    /// Weight of the balanced-output penalty.
    pub alpha: f64,
    /// Weight of the variance penalty.
    pub beta: f64,
    #[serde(default = "default_variance_mode")]
    pub variance_mode: VarianceMode,
    /// Fraction of hidden activations amplified during training.
    #[serde(default)]
    pub amp_train_fraction: f64,
    /// Fraction amplified at inference.
    #[serde(default)]
    pub amp_infer_fraction: f64,
    #[serde(default = "default_amp_factor")]
    pub amp_factor: f64,
    /// Reset the running means at the start of every epoch (ablation knob;
    /// the default accumulates across the whole run).
    #[serde(default)]
    pub reset_tracker_each_epoch: bool,
}

fn default_variance_mode() -> VarianceMode {
    VarianceMode::ClassWise
}

fn default_amp_factor() -> f64 {
    1.0
}

impl RegularizerConfig {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            variance_mode: VarianceMode::ClassWise,
            amp_train_fraction: 0.0,
            amp_infer_fraction: 0.0,
            amp_factor: 1.0,
            reset_tracker_each_epoch: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::InvalidSpec("alpha and beta must be nonnegative".into()));
        }
        for (name, f) in [
            ("amp_train_fraction", self.amp_train_fraction),
            ("amp_infer_fraction", self.amp_infer_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidSpec(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.amp_factor < 1.0 {
            return Err(Error::InvalidSpec("amp_factor must be >= 1".into()));
        }
        Ok(())
    }

    /// Amplifier used during training, if any.
    pub fn train_amplifier(&self) -> Option<Amplifier> {
        Amplifier::new(self.amp_train_fraction, self.amp_factor).active()
    }

    /// Amplifier used at inference, if any.
    pub fn infer_amplifier(&self) -> Option<Amplifier> {
        Amplifier::new(self.amp_infer_fraction, self.amp_factor).active()
    }
}

/// Initial variance weight: ten times the class count.
pub fn suggest_beta(num_classes: usize) -> f64 {
    assert!(num_classes >= 2, "need at least two classes");
    10.0 * num_classes as f64
}

/// Multiplies the top fraction of a layer's activations by a fixed factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Amplifier {
    pub fraction: f64,
    pub factor: f64,
}

impl Amplifier {
    pub fn new(fraction: f64, factor: f64) -> Self {
        Self { fraction, factor }
    }

    /// Whether this amplifier changes anything at all.
    pub fn is_active(&self) -> bool {
        self.fraction > 0.0 && self.factor != 1.0
    }

    fn active(self) -> Option<Self> {
        if self.is_active() {
            Some(self)
        } else {
            None
        }
    }

    /// Amplify one activation vector, returning the result and the per-entry
    /// scale applied (factor for selected entries, 1 elsewhere).
    ///
    /// The `ceil(fraction * len)` largest entries by value are selected; ties
    /// break toward the lower index. `fraction = 0` or `factor = 1` is the
    /// identity.
    pub fn apply(&self, activations: ArrayView1<f64>) -> (Array1<f64>, Array1<f64>) {
        let s = activations.len();
        let mut out = activations.to_owned();
        let mut scale = Array1::ones(s);
        if !self.is_active() || s == 0 {
            return (out, scale);
        }
        let count = ((self.fraction * s as f64).ceil() as usize).min(s);
        let mut order: Vec<usize> = (0..s).collect();
        // Stable sort on descending value keeps lower indices first on ties.
        order.sort_by(|&a, &b| activations[b].partial_cmp(&activations[a]).unwrap());
        for &idx in order.iter().take(count) {
            out[idx] *= self.factor;
            scale[idx] = self.factor;
        }
        (out, scale)
    }

    /// Row-wise amplification of a batch.
    pub fn apply_batch(&self, activations: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let mut out = Array2::zeros(activations.dim());
        let mut scale = Array2::ones(activations.dim());
        for (i, row) in activations.rows().into_iter().enumerate() {
            let (o, m) = self.apply(row);
            out.row_mut(i).assign(&o);
            scale.row_mut(i).assign(&m);
        }
        (out, scale)
    }
}

/// Convenience wrapper matching the vector-in, vector-out amplification shape.
pub fn amplify_top_fraction(activations: &Array1<f64>, fraction: f64, factor: f64) -> Array1<f64> {
    Amplifier::new(fraction, factor).apply(activations.view()).0
}

/// Running per-class mean of softmax score vectors.
///
/// The update is the streaming mean of Algorithm-style accumulation:
/// `mu_y <- mu_y * (c-1)/c + score/c` with `c` the post-increment count.
#[derive(Debug, Clone)]
pub struct ClassMeanTracker {
    means: Array2<f64>,
    counts: Vec<u64>,
}

impl ClassMeanTracker {
    pub fn new(num_classes: usize) -> Self {
        Self {
            means: Array2::zeros((num_classes, num_classes)),
            counts: vec![0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, class: usize) -> u64 {
        self.counts[class]
    }

    /// Mean score vector for `class`; all-zero until the first update.
    pub fn mean(&self, class: usize) -> ArrayView1<'_, f64> {
        self.means.row(class)
    }

    /// Fold a batch of score vectors into the running means.
    pub fn update(&mut self, scores: &Array2<f64>, labels: &[usize]) -> Result<()> {
        let k = self.num_classes();
        check_scores(scores, labels, k)?;
        for (row, &label) in scores.rows().into_iter().zip(labels) {
            let c = self.counts[label] + 1;
            let keep = (c - 1) as f64 / c as f64;
            let add = 1.0 / c as f64;
            let mut mean = self.means.row_mut(label);
            mean.zip_mut_with(&row, |m, &s| *m = *m * keep + s * add);
            self.counts[label] = c;
        }
        Ok(())
    }
}

/// Label-free running mean over descending-sorted score vectors.
#[derive(Debug, Clone)]
pub struct SortedMeanTracker {
    mean: Array1<f64>,
    count: u64,
}

impl SortedMeanTracker {
    pub fn new(num_classes: usize) -> Self {
        Self {
            mean: Array1::zeros(num_classes),
            count: 0,
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> ArrayView1<'_, f64> {
        self.mean.view()
    }

    pub fn update(&mut self, scores: &Array2<f64>) -> Result<()> {
        if scores.ncols() != self.mean.len() {
            return Err(Error::ShapeMismatch(format!(
                "score width {} does not match tracker width {}",
                scores.ncols(),
                self.mean.len()
            )));
        }
        for row in scores.rows() {
            let sorted = sort_descending(row);
            let c = self.count + 1;
            let keep = (c - 1) as f64 / c as f64;
            let add = 1.0 / c as f64;
            self.mean
                .zip_mut_with(&sorted, |m, &s| *m = *m * keep + s * add);
            self.count = c;
        }
        Ok(())
    }
}

/// Mutable state backing the variance penalty for one training run.
#[derive(Debug, Clone)]
pub enum VarianceState {
    ClassWise(ClassMeanTracker),
    SingleSort(SortedMeanTracker),
    BatchWise,
}

impl VarianceState {
    pub fn new(mode: VarianceMode, num_classes: usize) -> Self {
        match mode {
            VarianceMode::ClassWise => Self::ClassWise(ClassMeanTracker::new(num_classes)),
            VarianceMode::SingleSort => Self::SingleSort(SortedMeanTracker::new(num_classes)),
            VarianceMode::BatchWise => Self::BatchWise,
        }
    }

    pub fn mode(&self) -> VarianceMode {
        match self {
            Self::ClassWise(_) => VarianceMode::ClassWise,
            Self::SingleSort(_) => VarianceMode::SingleSort,
            Self::BatchWise => VarianceMode::BatchWise,
        }
    }

    /// Fold the batch in before the loss reads the means.
    pub fn update(&mut self, scores: &Array2<f64>, labels: &[usize]) -> Result<()> {
        match self {
            Self::ClassWise(t) => t.update(scores, labels),
            Self::SingleSort(t) => t.update(scores),
            Self::BatchWise => Ok(()),
        }
    }
}

/// Variance penalty: mean over the batch of the squared deviation of each
/// score vector from its target mean.
pub fn variance_loss(scores: &Array2<f64>, labels: &[usize], state: &VarianceState) -> Result<f64> {
    let deviations = variance_deviations(scores, labels, state)?;
    let n = scores.nrows() as f64;
    Ok(deviations.iter().map(|d| d * d).sum::<f64>() / n)
}

/// Gradient of [`variance_loss`] with respect to the scores, with the target
/// means held constant: `(2/N) (score - mean)` mapped back through the sort
/// permutation for the sorted mode.
pub fn variance_grad(
    scores: &Array2<f64>,
    labels: &[usize],
    state: &VarianceState,
) -> Result<Array2<f64>> {
    let n = scores.nrows() as f64;
    let mut grad = variance_deviations(scores, labels, state)?;
    grad.mapv_inplace(|d| 2.0 * d / n);
    if let VarianceState::SingleSort(_) = state {
        // Deviations are in sorted order; scatter them back per row.
        let mut scattered = Array2::zeros(grad.dim());
        for (i, row) in scores.rows().into_iter().enumerate() {
            let order = descending_order(row);
            for (rank, &orig) in order.iter().enumerate() {
                scattered[[i, orig]] = grad[[i, rank]];
            }
        }
        grad = scattered;
    }
    Ok(grad)
}

/// Per-sample deviation vectors from the mode's target mean. For the sorted
/// mode the rows are in sorted order.
fn variance_deviations(
    scores: &Array2<f64>,
    labels: &[usize],
    state: &VarianceState,
) -> Result<Array2<f64>> {
    if scores.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    match state {
        VarianceState::ClassWise(tracker) => {
            let k = tracker.num_classes();
            check_scores(scores, labels, k)?;
            let mut out = scores.clone();
            for (mut row, &label) in out.rows_mut().into_iter().zip(labels) {
                if tracker.count(label) == 0 {
                    return Err(Error::Attack(format!(
                        "class {label} has no tracked mean yet"
                    )));
                }
                row -= &tracker.mean(label);
            }
            Ok(out)
        }
        VarianceState::BatchWise => {
            let mean = scores.mean_axis(Axis(0)).ok_or(Error::EmptyBatch)?;
            let mut out = scores.clone();
            for mut row in out.rows_mut() {
                row -= &mean;
            }
            Ok(out)
        }
        VarianceState::SingleSort(tracker) => {
            if tracker.count() == 0 {
                return Err(Error::Attack("sorted mean tracker is empty".into()));
            }
            let mut out = Array2::zeros(scores.dim());
            for (i, row) in scores.rows().into_iter().enumerate() {
                let sorted = sort_descending(row);
                let mut dev = out.row_mut(i);
                dev.assign(&sorted);
                dev -= &tracker.mean();
            }
            Ok(out)
        }
    }
}

/// Balanced-output penalty over hidden layers.
///
/// For every hidden layer the activations split into first `floor(S/2)`
/// neurons versus the rest; the squared per-sample difference of the two
/// group sums is accumulated over the batch and scaled by `1/S`.
pub fn boc_loss(trace: &ForwardTrace) -> f64 {
    let mut total = 0.0;
    for h in trace.hidden() {
        let s = h.ncols();
        if s < 2 {
            log::debug!("balanced-output penalty skips degenerate layer of width {s}");
            continue;
        }
        let diffs = group_differences(h);
        total += diffs.iter().map(|d| d * d).sum::<f64>() / s as f64;
    }
    total
}

/// Gradient of [`boc_loss`] with respect to each hidden layer's activations.
pub fn boc_grad(trace: &ForwardTrace) -> Vec<Array2<f64>> {
    trace
        .hidden()
        .iter()
        .map(|h| {
            let s = h.ncols();
            let mut g = Array2::zeros(h.dim());
            if s < 2 {
                return g;
            }
            let half = s / 2;
            let diffs = group_differences(h);
            for (i, mut row) in g.rows_mut().into_iter().enumerate() {
                let coeff = 2.0 * diffs[i] / s as f64;
                for (j, v) in row.iter_mut().enumerate() {
                    *v = if j < half { coeff } else { -coeff };
                }
            }
            g
        })
        .collect()
}

fn group_differences(h: &Array2<f64>) -> Vec<f64> {
    let half = h.ncols() / 2;
    h.rows()
        .into_iter()
        .map(|row| {
            let first: f64 = row.iter().take(half).sum();
            let second: f64 = row.iter().skip(half).sum();
            first - second
        })
        .collect()
}

/// Per-term values of the combined training loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cross_entropy: f64,
    pub boc: f64,
    pub variance: f64,
}

/// Combined loss: cross-entropy plus `alpha` times the balanced-output
/// penalty plus `beta` times the variance penalty.
///
/// The variance state must already contain this batch (means are updated
/// before the loss reads them).
pub fn composite_loss(
    trace: &ForwardTrace,
    labels: &[usize],
    state: Option<&VarianceState>,
    cfg: &RegularizerConfig,
) -> Result<LossBreakdown> {
    let cross_entropy = grad::cross_entropy_mean(trace.scores(), labels)?;
    let boc = if cfg.alpha != 0.0 { boc_loss(trace) } else { 0.0 };
    let variance = if cfg.beta != 0.0 {
        let state = state.ok_or_else(|| {
            Error::InvalidSpec("variance penalty requires tracker state".into())
        })?;
        variance_loss(trace.scores(), labels, state)?
    } else {
        0.0
    };
    let total = cross_entropy + cfg.alpha * boc + cfg.beta * variance;
    if !total.is_finite() {
        return Err(Error::NonFinite {
            context: "training loss".into(),
        });
    }
    Ok(LossBreakdown {
        total,
        cross_entropy,
        boc,
        variance,
    })
}

fn check_scores(scores: &Array2<f64>, labels: &[usize], num_classes: usize) -> Result<()> {
    if scores.nrows() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} score rows vs {} labels",
            scores.nrows(),
            labels.len()
        )));
    }
    if scores.ncols() != num_classes {
        return Err(Error::ShapeMismatch(format!(
            "score width {} does not match {} classes",
            scores.ncols(),
            num_classes
        )));
    }
    for &label in labels {
        if label >= num_classes {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes,
            });
        }
    }
    for row in scores.rows() {
        let sum: f64 = row.sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidSpec(format!(
                "score vector sums to {sum}, expected 1"
            )));
        }
    }
    Ok(())
}

fn descending_order(row: ArrayView1<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
    order
}

fn sort_descending(row: ArrayView1<f64>) -> Array1<f64> {
    let order = descending_order(row);
    Array1::from_iter(order.into_iter().map(|i| row[i]))
}
