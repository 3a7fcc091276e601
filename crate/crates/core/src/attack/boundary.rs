//! Label-only attack: estimated L2 distance to the decision boundary.
//!
//! The search ascends the untargeted margin (largest rival logit minus the
//! true logit) with L2-normalized steps until the prediction flips, then
//! binary-searches along the accumulated direction for the smallest flipping
//! magnitude. Members tend to sit farther from the boundary, so a single
//! global threshold on the distance separates them.

use ndarray::{Array1, Array2, ArrayView1};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::grad::{self, Cotangent};
use crate::nn::{argmax, NetworkModel};
use crate::seeding;

use super::{sweep_threshold, Direction, ScoreRecord};

/// Search budget for the boundary-distance estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryConfig {
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default = "default_initial_step")]
    pub initial_step: f64,
    #[serde(default = "default_step_growth")]
    pub step_growth: f64,
    #[serde(default = "default_max_radius")]
    pub max_radius: f64,
    #[serde(default = "default_bisections")]
    pub bisections: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_max_steps() -> usize {
    200
}
fn default_initial_step() -> f64 {
    0.01
}
fn default_step_growth() -> f64 {
    1.05
}
fn default_max_radius() -> f64 {
    100.0
}
fn default_bisections() -> usize {
    20
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        Self {
            max_steps: default_max_steps(),
            initial_step: default_initial_step(),
            step_growth: default_step_growth(),
            max_radius: default_max_radius(),
            bisections: default_bisections(),
            seed: 0,
        }
    }
}

/// Distance estimate plus whether the search actually found a flip.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BoundaryOutcome {
    pub distance: f64,
    pub converged: bool,
}

/// Estimate the minimal `|delta|_2` that flips the model's prediction on
/// `x` away from `y`. Already-misclassified inputs report distance 0.
///
/// Unconverged searches report `max_radius` flagged accordingly.
pub fn boundary_distance(
    model: &NetworkModel,
    x: ArrayView1<f64>,
    y: usize,
    cfg: &BoundaryConfig,
) -> Result<BoundaryOutcome> {
    if y >= model.output_width() {
        return Err(Error::LabelOutOfRange {
            label: y,
            num_classes: model.output_width(),
        });
    }
    if predicted_label(model, x)? != y {
        return Ok(BoundaryOutcome {
            distance: 0.0,
            converged: true,
        });
    }

    let dim = x.len();
    let mut delta: Array1<f64> = Array1::zeros(dim);
    let mut step = cfg.initial_step;
    let mut flipped = false;
    for iter in 0..cfg.max_steps {
        let point = &x + &delta;
        let g = margin_gradient(model, point.view(), y)?;
        let norm = g.dot(&g).sqrt();
        let direction = if norm < 1e-12 {
            // Flat margin; take a deterministic pseudo-random direction.
            let mut rng = seeding::rng_from(seeding::derive_seed(cfg.seed, iter as u64));
            let normal = StandardNormal;
            let mut d: Array1<f64> = Array1::zeros(dim);
            for v in d.iter_mut() {
                *v = normal.sample(&mut rng);
            }
            let n = d.dot(&d).sqrt().max(1e-12);
            d.mapv_inplace(|v| v / n);
            d
        } else {
            g.mapv(|v| v / norm)
        };
        delta.zip_mut_with(&direction, |d, &dir| *d += step * dir);
        step *= cfg.step_growth;

        let moved = &x + &delta;
        if predicted_label(model, moved.view())? != y {
            flipped = true;
            break;
        }
        if delta.dot(&delta).sqrt() >= cfg.max_radius {
            break;
        }
    }
    if !flipped {
        return Ok(BoundaryOutcome {
            distance: cfg.max_radius,
            converged: false,
        });
    }

    // Bisect the flipping magnitude along the found direction.
    let radius = delta.dot(&delta).sqrt();
    let unit = delta.mapv(|v| v / radius);
    let mut lo = 0.0;
    let mut hi = radius;
    for _ in 0..cfg.bisections {
        let mid = 0.5 * (lo + hi);
        let probe = &x + &unit.mapv(|v| v * mid);
        if predicted_label(model, probe.view())? != y {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(BoundaryOutcome {
        distance: hi,
        converged: true,
    })
}

fn predicted_label(model: &NetworkModel, x: ArrayView1<f64>, ) -> Result<usize> {
    let input = x.insert_axis(ndarray::Axis(0)).to_owned();
    let trace = model.forward_with_trace(&input)?;
    Ok(argmax(trace.scores().row(0)))
}

/// Gradient of `max_{j != y} z_j - z_y` with respect to the input.
fn margin_gradient(model: &NetworkModel, x: ArrayView1<f64>, y: usize) -> Result<Array1<f64>> {
    let input = x.insert_axis(ndarray::Axis(0)).to_owned();
    let trace = model.forward_with_trace(&input)?;
    let logits = trace.logits().row(0);
    let mut rival = usize::MAX;
    let mut rival_v = f64::NEG_INFINITY;
    for (j, &v) in logits.iter().enumerate() {
        if j != y && v > rival_v {
            rival_v = v;
            rival = j;
        }
    }
    let mut cot = Array2::zeros(trace.logits().dim());
    cot[[0, rival]] = 1.0;
    cot[[0, y]] = -1.0;
    let (_, input_grad) = grad::backprop(model, &input, &trace, Cotangent::Logits(cot), None)?;
    Ok(input_grad.row(0).to_owned())
}

/// Boundary distances for many samples, parallel over records.
pub fn boundary_distances(
    model: &NetworkModel,
    features: &Array2<f64>,
    labels: &[usize],
    cfg: &BoundaryConfig,
) -> Result<Vec<BoundaryOutcome>> {
    if features.nrows() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature rows vs {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    let indices: Vec<usize> = (0..labels.len()).collect();
    let outcomes = exec::map(&indices, |&i| {
        boundary_distance(model, features.row(i), labels[i], cfg)
    });
    outcomes.into_iter().collect()
}

/// Result of the label-only attack.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LabelOnlyOutcome {
    pub mi_accuracy: f64,
    pub threshold: f64,
    pub calibration_accuracy: f64,
}

/// Label-only attack: one global distance threshold swept on attacker-known
/// records (member if the distance is at least the threshold), evaluated as
/// balanced accuracy on the evaluation records.
pub fn label_only_attack(
    eval: &[ScoreRecord],
    known: &[ScoreRecord],
) -> Result<LabelOnlyOutcome> {
    let calibration: Vec<(f64, bool)> = known
        .iter()
        .map(|r| {
            r.boundary_distance
                .map(|d| (d, r.is_member))
                .ok_or_else(|| {
                    Error::Attack(format!("record {} has no boundary distance", r.sample_id))
                })
        })
        .collect::<Result<_>>()?;
    let (threshold, calibration_accuracy) =
        sweep_threshold(&calibration, Direction::MemberIfGE)?;

    let pairs: Vec<(bool, bool)> = eval
        .iter()
        .map(|r| {
            r.boundary_distance
                .map(|d| (r.is_member, d >= threshold))
                .ok_or_else(|| {
                    Error::Attack(format!("record {} has no boundary distance", r.sample_id))
                })
        })
        .collect::<Result<_>>()?;
    let mi_accuracy = super::balanced_accuracy(&pairs)?;
    Ok(LabelOnlyOutcome {
        mi_accuracy,
        threshold,
        calibration_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, LayerSpec, NetworkModel};
    use ndarray::array;

    /// Two-class linear model whose decision boundary is the hyperplane
    /// `w . x + b = 0`, expressed as logits `[0, w . x + b]`.
    fn linear_margin_model(w: [f64; 2], b: f64) -> NetworkModel {
        NetworkModel::from_parts(
            vec![LayerSpec::new(2, 2, Activation::Softmax)],
            vec![array![[0.0, 0.0], [w[0], w[1]]]],
            vec![array![0.0, b]],
            0,
        )
        .unwrap()
    }

    #[test]
    fn linear_case_matches_the_analytic_margin() {
        // w = [1, 0], b = 0, x = [2, 0]: true class 1 (logit 2 > 0), and the
        // distance to the boundary is |w.x + b| / |w| = 2.
        let model = linear_margin_model([1.0, 0.0], 0.0);
        let cfg = BoundaryConfig::default();
        let out = boundary_distance(&model, array![2.0, 0.0].view(), 1, &cfg).unwrap();
        assert!(out.converged);
        assert!((out.distance - 2.0).abs() / 2.0 < 0.05, "{}", out.distance);

        let out = boundary_distance(&model, array![4.0, 0.0].view(), 1, &cfg).unwrap();
        assert!((out.distance - 4.0).abs() / 4.0 < 0.05, "{}", out.distance);
    }

    #[test]
    fn misclassified_inputs_have_distance_zero() {
        let model = linear_margin_model([1.0, 0.0], 0.0);
        let cfg = BoundaryConfig::default();
        // x = [2, 0] is predicted class 1; claiming y = 0 means misclassified.
        let out = boundary_distance(&model, array![2.0, 0.0].view(), 0, &cfg).unwrap();
        assert_eq!(out.distance, 0.0);
        assert!(out.converged);
    }

    #[test]
    fn more_budget_never_increases_the_distance() {
        let model = linear_margin_model([0.7, -0.3], 0.2);
        let x = array![3.0, 1.0];
        let mut last = f64::INFINITY;
        for steps in [25, 50, 100, 200, 400] {
            let cfg = BoundaryConfig {
                max_steps: steps,
                ..BoundaryConfig::default()
            };
            let out = boundary_distance(&model, x.view(), 1, &cfg).unwrap();
            assert!(
                out.distance <= last + 1e-12,
                "distance grew from {last} to {} at {steps} steps",
                out.distance
            );
            last = out.distance;
        }
    }

    #[test]
    fn unconverged_search_reports_max_radius() {
        // Constant logits: no input can flip the prediction.
        let model = NetworkModel::from_parts(
            vec![LayerSpec::new(2, 2, Activation::Softmax)],
            vec![Array2::zeros((2, 2))],
            vec![array![1.0, 0.0]],
            0,
        )
        .unwrap();
        let cfg = BoundaryConfig {
            max_steps: 30,
            max_radius: 5.0,
            ..BoundaryConfig::default()
        };
        let out = boundary_distance(&model, array![0.3, 0.4].view(), 0, &cfg).unwrap();
        assert!(!out.converged);
        assert_eq!(out.distance, 5.0);
    }

    fn distance_record(id: usize, member: bool, distance: f64) -> ScoreRecord {
        ScoreRecord {
            sample_id: id,
            is_member: member,
            true_label: 0,
            predicted_label: 0,
            scores: vec![1.0, 0.0],
            boundary_distance: Some(distance),
        }
    }

    #[test]
    fn label_only_attack_hand_example() {
        let known: Vec<ScoreRecord> = (0..10)
            .map(|i| distance_record(i, i % 2 == 0, if i % 2 == 0 { 2.0 } else { 1.0 }))
            .collect();
        let eval = known.clone();
        let out = label_only_attack(&eval, &known).unwrap();
        assert_eq!(out.mi_accuracy, 1.0);
        assert!((out.threshold - 1.5).abs() < 1e-12);
    }

    #[test]
    fn identical_distance_distributions_score_half() {
        let mut records = Vec::new();
        for i in 0..10 {
            records.push(distance_record(i, true, (i % 5) as f64));
            records.push(distance_record(100 + i, false, (i % 5) as f64));
        }
        let out = label_only_attack(&records, &records).unwrap();
        assert_eq!(out.mi_accuracy, 0.5);
    }
}
