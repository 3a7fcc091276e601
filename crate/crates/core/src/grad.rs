//! Backpropagation through traced forward passes.
//!
//! The core routine walks a [`ForwardTrace`] backwards from a cotangent at
//! the output, producing parameter gradients and the gradient with respect
//! to the input batch. Loss-specific entry points build the output cotangent
//! (cross-entropy with optional regularizers, or squared error) and delegate.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::nn::{self, Activation, ForwardTrace, NetworkModel};
use crate::reg::{self, Amplifier, LossBreakdown, RegularizerConfig, VarianceState};

/// Probabilities are floored here before any logarithm.
pub const PROB_FLOOR: f64 = 1e-30;

/// Per-parameter gradient arrays, shaped like the model's weights and biases.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &NetworkModel) -> Self {
        Self {
            weights: model.weights().iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: model.biases().iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }
}

/// Where the backward walk starts.
pub enum Cotangent {
    /// `dL/d logits` (final pre-activation).
    Logits(Array2<f64>),
    /// `dL/d output` (final post-activation).
    Output(Array2<f64>),
}

/// Walk the trace backwards.
///
/// `hidden_extra[l]`, when present, is an additive `dL/dh^l` contribution for
/// hidden layer `l` (used by the balanced-output penalty). Returns parameter
/// gradients and `dL/dx`.
pub fn backprop(
    model: &NetworkModel,
    batch: &Array2<f64>,
    trace: &ForwardTrace,
    cotangent: Cotangent,
    hidden_extra: Option<&[Array2<f64>]>,
) -> Result<(Gradients, Array2<f64>)> {
    let num_layers = model.num_layers();
    let final_act = model.layers()[num_layers - 1].activation;

    let mut delta = match cotangent {
        Cotangent::Logits(d) => d,
        Cotangent::Output(g) => output_cotangent_to_logits(final_act, trace, g),
    };
    if delta.dim() != trace.logits().dim() {
        return Err(Error::ShapeMismatch(format!(
            "cotangent shape {:?} vs logits {:?}",
            delta.dim(),
            trace.logits().dim()
        )));
    }

    let mut grads = Gradients::zeros_like(model);
    for layer in (0..num_layers).rev() {
        let below: &Array2<f64> = if layer == 0 {
            batch
        } else {
            &trace.hidden[layer - 1]
        };
        grads.weights[layer] = delta.t().dot(below);
        grads.biases[layer] = delta.sum_axis(Axis(0));

        let mut upstream = delta.dot(&model.weights()[layer]);
        if layer == 0 {
            return Ok((grads, upstream));
        }
        let hidden_idx = layer - 1;
        if let Some(extra) = hidden_extra {
            if let Some(e) = extra.get(hidden_idx) {
                if e.dim() == upstream.dim() {
                    upstream += e;
                } else if e.len() != 0 {
                    return Err(Error::ShapeMismatch(format!(
                        "extra hidden gradient {:?} vs layer activation {:?}",
                        e.dim(),
                        upstream.dim()
                    )));
                }
            }
        }
        if let Some(scale) = &trace.amp_scale[hidden_idx] {
            upstream *= scale;
        }
        upstream *= &trace.act_deriv[hidden_idx];
        delta = upstream;
    }
    unreachable!("loop returns at layer 0")
}

fn output_cotangent_to_logits(
    final_act: Activation,
    trace: &ForwardTrace,
    grad_output: Array2<f64>,
) -> Array2<f64> {
    match final_act {
        Activation::Softmax => nn::softmax_vjp(trace.scores(), &grad_output),
        act => {
            let deriv = nn::activation_derivative(act, trace.output());
            grad_output * &deriv
        }
    }
}

/// Terms of the combined classification loss.
///
/// `variance` must already contain the current batch when `beta != 0`.
pub struct LossTerms<'a> {
    pub alpha: f64,
    pub beta: f64,
    pub variance: Option<&'a VarianceState>,
}

impl<'a> LossTerms<'a> {
    pub fn cross_entropy_only() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            variance: None,
        }
    }

    fn as_reg_config(&self) -> RegularizerConfig {
        RegularizerConfig::new(self.alpha, self.beta)
    }
}

/// Gradients and loss of the combined classification loss for one batch,
/// starting from an existing trace.
pub fn backward_from_trace(
    model: &NetworkModel,
    batch: &Array2<f64>,
    labels: &[usize],
    trace: &ForwardTrace,
    terms: &LossTerms,
) -> Result<(Gradients, LossBreakdown)> {
    let breakdown = reg::composite_loss(trace, labels, terms.variance, &terms.as_reg_config())?;
    let n = trace.batch_size() as f64;
    let scores = trace.scores();

    // d(cross-entropy)/d(logits) = (P - Y) / N.
    let mut delta = scores.clone();
    for (mut row, &label) in delta.rows_mut().into_iter().zip(labels) {
        row[label] -= 1.0;
    }
    delta.mapv_inplace(|v| v / n);

    if terms.beta != 0.0 {
        let state = terms
            .variance
            .ok_or_else(|| Error::InvalidSpec("variance penalty requires tracker state".into()))?;
        let g_scores = reg::variance_grad(scores, labels, state)?;
        let mut g_logits = nn::softmax_vjp(scores, &g_scores);
        g_logits.mapv_inplace(|v| v * terms.beta);
        delta += &g_logits;
    }

    let hidden_extra = if terms.alpha != 0.0 {
        let mut extra = reg::boc_grad(trace);
        for layer in &mut extra {
            layer.mapv_inplace(|v| v * terms.alpha);
        }
        Some(extra)
    } else {
        None
    };

    let (grads, _) = backprop(
        model,
        batch,
        trace,
        Cotangent::Logits(delta),
        hidden_extra.as_deref(),
    )?;
    Ok((grads, breakdown))
}

/// Forward + backward for the combined classification loss.
pub fn backward(
    model: &NetworkModel,
    batch: &Array2<f64>,
    labels: &[usize],
    terms: &LossTerms,
    amp: Option<&Amplifier>,
) -> Result<(Gradients, LossBreakdown)> {
    let trace = model.forward_with_trace_amp(batch, amp)?;
    backward_from_trace(model, batch, labels, &trace, terms)
}

/// Loss value only (used by finite-difference oracles, which hold the
/// variance state fixed while perturbing parameters).
pub fn composite_loss_value(
    model: &NetworkModel,
    batch: &Array2<f64>,
    labels: &[usize],
    terms: &LossTerms,
    amp: Option<&Amplifier>,
) -> Result<f64> {
    let trace = model.forward_with_trace_amp(batch, amp)?;
    let breakdown = reg::composite_loss(&trace, labels, terms.variance, &terms.as_reg_config())?;
    Ok(breakdown.total)
}

/// Forward + backward for mean squared error on the final post-activation
/// output: `L = (1/N) sum_i |out_i - target_i|^2`. Also returns `dL/dx`.
pub fn backward_mse(
    model: &NetworkModel,
    batch: &Array2<f64>,
    targets: &Array2<f64>,
) -> Result<(Gradients, f64, Array2<f64>)> {
    let trace = model.forward_with_trace(batch)?;
    if trace.output().dim() != targets.dim() {
        return Err(Error::ShapeMismatch(format!(
            "targets {:?} vs output {:?}",
            targets.dim(),
            trace.output().dim()
        )));
    }
    let n = trace.batch_size() as f64;
    let diff = trace.output() - targets;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "mse loss".into(),
        });
    }
    let grad_out = diff.mapv(|d| 2.0 * d / n);
    let (grads, input_grad) = backprop(model, batch, &trace, Cotangent::Output(grad_out), None)?;
    Ok((grads, loss, input_grad))
}

/// Mean cross-entropy of a batch of score vectors against integer labels.
pub fn cross_entropy_mean(scores: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if scores.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if scores.nrows() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} score rows vs {} labels",
            scores.nrows(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (row, &label) in scores.rows().into_iter().zip(labels) {
        if label >= row.len() {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: row.len(),
            });
        }
        total += -row[label].max(PROB_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Cross-entropy of a single score vector.
pub fn cross_entropy_one(scores: &[f64], label: usize) -> f64 {
    -scores[label].max(PROB_FLOOR).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, LayerSpec};
    use ndarray::array;

    #[test]
    fn softmax_ce_gradient_at_uniform_output() {
        // Zero-weight single softmax layer: scores are uniform, so the bias
        // gradient is (1/k - 1) for the true class and 1/k elsewhere.
        let k = 4;
        let specs = vec![LayerSpec::new(k, k, Activation::Softmax)];
        let model = NetworkModel::from_parts(
            specs,
            vec![Array2::zeros((k, k))],
            vec![Array1::zeros(k)],
            0,
        )
        .unwrap();
        let batch = array![[0.3, -0.5, 1.0, 0.0]];
        let (grads, _) = backward(
            &model,
            &batch,
            &[1],
            &LossTerms::cross_entropy_only(),
            None,
        )
        .unwrap();
        for (i, &g) in grads.biases[0].iter().enumerate() {
            let expected = if i == 1 { 0.25 - 1.0 } else { 0.25 };
            assert!((g - expected).abs() < 1e-12, "bias {i}: {g}");
        }
    }

    #[test]
    fn zero_weights_reduce_to_plain_cross_entropy() {
        let specs = vec![
            LayerSpec::new(3, 5, Activation::Tanh),
            LayerSpec::new(5, 2, Activation::Softmax),
        ];
        let model = build_model(&specs, 9).unwrap();
        let batch = array![[0.2, -0.1, 0.4], [1.0, 0.3, -0.2]];
        let labels = [1usize, 0];

        let (g_plain, l_plain) = backward(
            &model,
            &batch,
            &labels,
            &LossTerms::cross_entropy_only(),
            None,
        )
        .unwrap();
        let terms = LossTerms {
            alpha: 0.0,
            beta: 0.0,
            variance: None,
        };
        let (g_reg, l_reg) = backward(&model, &batch, &labels, &terms, None).unwrap();
        assert_eq!(l_plain.total, l_reg.total);
        for (a, b) in g_plain.weights.iter().zip(&g_reg.weights) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn mse_loss_on_sigmoid_head() {
        let specs = vec![LayerSpec::new(2, 1, Activation::Sigmoid)];
        let model = NetworkModel::from_parts(
            specs,
            vec![Array2::zeros((1, 2))],
            vec![Array1::zeros(1)],
            0,
        )
        .unwrap();
        // Output is sigmoid(0) = 0.5 for every sample.
        let batch = array![[1.0, 2.0], [3.0, -1.0]];
        let targets = array![[1.0], [0.0]];
        let (grads, loss, _) = backward_mse(&model, &batch, &targets).unwrap();
        assert!((loss - 0.25).abs() < 1e-12);
        // dL/dz_i = 2(0.5 - t_i)/N * 0.25; bias grad sums both samples to 0.
        assert!(grads.biases[0][0].abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_hand_values() {
        let scores = array![[0.5, 0.25, 0.25]];
        let ce = cross_entropy_mean(&scores, &[0]).unwrap();
        assert!((ce - 2.0f64.ln()).abs() < 1e-12);
        assert_eq!(cross_entropy_one(&[1.0, 0.0], 0), 0.0);
        let clamped = cross_entropy_one(&[0.0, 1.0], 0);
        assert!((clamped + PROB_FLOOR.ln()).abs() < 1e-9);
    }
}
