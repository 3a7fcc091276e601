//! Dense feed-forward network engine.
//!
//! Networks are sequences of dense layers, `z = W a + b` followed by an
//! element-wise activation (softmax allowed on the last layer only). The
//! forward pass captures every hidden post-activation output so training
//! regularizers and attacks can consume intermediate results.
//!
//! All arrays are `f64`; batches are row-major with one sample per row.

use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::reg::Amplifier;

/// Element-wise activation kinds. Softmax is only valid on the final layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Tanh,
    ReLU,
    Sigmoid,
    Softmax,
}

/// One dense layer: input/output widths plus activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub in_width: usize,
    pub out_width: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_width: usize, out_width: usize, activation: Activation) -> Self {
        Self {
            in_width,
            out_width,
            activation,
        }
    }
}

/// Validate that layer widths chain and softmax appears only at the end.
pub fn validate_layers(layers: &[LayerSpec]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::InvalidSpec("network needs at least one layer".into()));
    }
    for (i, spec) in layers.iter().enumerate() {
        if spec.in_width == 0 || spec.out_width == 0 {
            return Err(Error::InvalidSpec(format!(
                "layer {} has zero width",
                i + 1
            )));
        }
        if spec.activation == Activation::Softmax && i + 1 != layers.len() {
            return Err(Error::InvalidSpec(format!(
                "softmax activation on non-final layer {}",
                i + 1
            )));
        }
    }
    for (i, pair) in layers.windows(2).enumerate() {
        if pair[0].out_width != pair[1].in_width {
            return Err(Error::WidthMismatch {
                first: i + 1,
                second: i + 2,
                out: pair[0].out_width,
                inp: pair[1].in_width,
            });
        }
    }
    Ok(())
}

/// A dense feed-forward network with per-layer weight matrices and biases.
///
/// Weight matrices are `(out_width, in_width)`, row-major.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    layers: Vec<LayerSpec>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    seed: u64,
}

/// Deterministically initialize a model from layer specs and a seed.
///
/// Weights use symmetric uniform init with bound `sqrt(6 / (in + out))`
/// (`sqrt(2 / in)` for ReLU layers); biases start at zero. Identical
/// `(layers, seed)` pairs produce bit-identical models.
pub fn build_model(layers: &[LayerSpec], seed: u64) -> Result<NetworkModel> {
    validate_layers(layers)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(layers.len());
    let mut biases = Vec::with_capacity(layers.len());
    for spec in layers {
        let bound = match spec.activation {
            Activation::ReLU => (2.0 / spec.in_width as f64).sqrt(),
            _ => (6.0 / (spec.in_width + spec.out_width) as f64).sqrt(),
        };
        let dist = Uniform::new_inclusive(-bound, bound);
        let mut w = Array2::zeros((spec.out_width, spec.in_width));
        for v in w.iter_mut() {
            *v = dist.sample(&mut rng);
        }
        weights.push(w);
        biases.push(Array1::zeros(spec.out_width));
    }
    Ok(NetworkModel {
        layers: layers.to_vec(),
        weights,
        biases,
        seed,
    })
}

impl NetworkModel {
    /// Assemble a model from explicit parameter arrays (checkpoint load,
    /// hand-constructed test fixtures).
    pub fn from_parts(
        layers: Vec<LayerSpec>,
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
        seed: u64,
    ) -> Result<Self> {
        validate_layers(&layers)?;
        if weights.len() != layers.len() || biases.len() != layers.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} weight/bias blocks, got {}/{}",
                layers.len(),
                weights.len(),
                biases.len()
            )));
        }
        for (i, spec) in layers.iter().enumerate() {
            if weights[i].dim() != (spec.out_width, spec.in_width) {
                return Err(Error::ShapeMismatch(format!(
                    "weight matrix {} has shape {:?}, expected ({}, {})",
                    i + 1,
                    weights[i].dim(),
                    spec.out_width,
                    spec.in_width
                )));
            }
            if biases[i].len() != spec.out_width {
                return Err(Error::ShapeMismatch(format!(
                    "bias vector {} has length {}, expected {}",
                    i + 1,
                    biases[i].len(),
                    spec.out_width
                )));
            }
            if weights[i].iter().any(|v| !v.is_finite()) || biases[i].iter().any(|v| !v.is_finite())
            {
                return Err(Error::NonFinite {
                    context: format!("parameters of layer {}", i + 1),
                });
            }
        }
        Ok(Self {
            layers,
            weights,
            biases,
            seed,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].in_width
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].out_width
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Array1<f64>] {
        &mut self.biases
    }

    /// Forward a batch and capture the full trace. Pure; no amplification.
    pub fn forward_with_trace(&self, batch: &Array2<f64>) -> Result<ForwardTrace> {
        self.forward_with_trace_amp(batch, None)
    }

    /// Forward a batch, optionally amplifying hidden post-activation outputs.
    ///
    /// The amplified values feed both the trace (hence the balanced-output
    /// penalty) and the next layer. The selection mask is recorded so the
    /// backward pass treats amplification as a fixed diagonal scaling.
    pub fn forward_with_trace_amp(
        &self,
        batch: &Array2<f64>,
        amp: Option<&Amplifier>,
    ) -> Result<ForwardTrace> {
        if batch.ncols() != self.input_width() {
            return Err(Error::ShapeMismatch(format!(
                "input width {} does not match first layer in_width {}",
                batch.ncols(),
                self.input_width()
            )));
        }
        if batch.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "input batch".into(),
            });
        }
        let n = batch.nrows();
        let num_layers = self.layers.len();
        let mut hidden = Vec::with_capacity(num_layers.saturating_sub(1));
        let mut act_deriv = Vec::with_capacity(num_layers.saturating_sub(1));
        let mut amp_scale = Vec::with_capacity(num_layers.saturating_sub(1));
        let mut current = batch.clone();

        for (idx, spec) in self.layers.iter().enumerate() {
            let mut z = current.dot(&self.weights[idx].t());
            z += &self.biases[idx];
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLayer { layer: idx + 1 });
            }
            if idx + 1 == num_layers {
                let output = apply_final_activation(spec.activation, &z);
                let scores = softmax_rows(&z);
                return Ok(ForwardTrace {
                    hidden,
                    act_deriv,
                    amp_scale,
                    logits: z,
                    output,
                    scores,
                    batch_size: n,
                });
            }
            let a = apply_activation(spec.activation, &z)?;
            act_deriv.push(activation_derivative(spec.activation, &a));
            let (h, scale) = match amp {
                Some(amplifier) if amplifier.is_active() => {
                    let (h, scale) = amplifier.apply_batch(&a);
                    (h, Some(scale))
                }
                _ => (a, None),
            };
            amp_scale.push(scale);
            hidden.push(h);
            current = hidden.last().unwrap().clone();
        }
        unreachable!("loop returns on the final layer")
    }

    /// Softmax scores for a batch, chunk-parallel over rows.
    pub fn batch_scores(&self, features: &Array2<f64>, amp: Option<&Amplifier>) -> Result<Array2<f64>> {
        let n = features.nrows();
        let k = self.output_width();
        let chunks = exec::map_chunks(n, INFER_CHUNK, |start, len| {
            let slice = features.slice(ndarray::s![start..start + len, ..]).to_owned();
            self.forward_with_trace_amp(&slice, amp).map(|t| t.scores)
        });
        let mut out = Array2::zeros((n, k));
        let mut row = 0;
        for chunk in chunks {
            let scores = chunk?;
            for r in scores.rows() {
                out.row_mut(row).assign(&r);
                row += 1;
            }
        }
        Ok(out)
    }
}

const INFER_CHUNK: usize = 256;

/// Captured intermediate state of one forward pass.
///
/// `hidden` holds post-activation (and post-amplification) outputs for
/// layers `1..M-1`; `logits` is the final pre-activation; `scores` is the
/// softmax of the logits and `output` is the final activation's result
/// (identical to `scores` for softmax-terminated networks).
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub(crate) hidden: Vec<Array2<f64>>,
    pub(crate) act_deriv: Vec<Array2<f64>>,
    pub(crate) amp_scale: Vec<Option<Array2<f64>>>,
    pub(crate) logits: Array2<f64>,
    pub(crate) output: Array2<f64>,
    pub(crate) scores: Array2<f64>,
    pub(crate) batch_size: usize,
}

impl ForwardTrace {
    pub fn hidden(&self) -> &[Array2<f64>] {
        &self.hidden
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    /// Final post-activation output.
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    /// Softmax of the logits.
    pub fn scores(&self) -> &Array2<f64> {
        &self.scores
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }
}

fn apply_activation(kind: Activation, z: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(match kind {
        Activation::Linear => z.clone(),
        Activation::Tanh => z.mapv(f64::tanh),
        Activation::ReLU => z.mapv(|v| v.max(0.0)),
        Activation::Sigmoid => z.mapv(sigmoid),
        Activation::Softmax => {
            return Err(Error::InvalidSpec(
                "softmax activation on a hidden layer".into(),
            ))
        }
    })
}

fn apply_final_activation(kind: Activation, z: &Array2<f64>) -> Array2<f64> {
    match kind {
        Activation::Linear => z.clone(),
        Activation::Tanh => z.mapv(f64::tanh),
        Activation::ReLU => z.mapv(|v| v.max(0.0)),
        Activation::Sigmoid => z.mapv(sigmoid),
        Activation::Softmax => softmax_rows(z),
    }
}

/// Derivative of the activation expressed through the post-activation value.
pub(crate) fn activation_derivative(kind: Activation, post: &Array2<f64>) -> Array2<f64> {
    match kind {
        Activation::Linear => Array2::ones(post.dim()),
        Activation::Tanh => post.mapv(|a| 1.0 - a * a),
        Activation::ReLU => post.mapv(|a| if a > 0.0 { 1.0 } else { 0.0 }),
        Activation::Sigmoid => post.mapv(|a| a * (1.0 - a)),
        Activation::Softmax => unreachable!("softmax handled via its vector-Jacobian product"),
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max-logit subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        softmax_in_place(&mut row);
    }
    out
}

fn softmax_in_place(row: &mut ndarray::ArrayViewMut1<f64>) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax of a single vector.
pub fn softmax_vec(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|v| (v - max).exp());
    let sum = out.sum();
    out.mapv_inplace(|v| v / sum);
    out
}

/// Vector-Jacobian product of row-wise softmax: given scores `p` and a
/// cotangent `g = dL/dp`, returns `dL/dz` with `dL/dz_b = p_b (g_b - g·p)`.
pub(crate) fn softmax_vjp(scores: &Array2<f64>, grad: &Array2<f64>) -> Array2<f64> {
    let inner = (scores * grad).sum_axis(Axis(1));
    let mut out = grad.clone();
    Zip::from(out.rows_mut())
        .and(scores.rows())
        .and(&inner)
        .for_each(|mut g_row, p_row, &dot| {
            Zip::from(&mut g_row).and(&p_row).for_each(|g, &p| {
                *g = p * (*g - dot);
            });
        });
    out
}

/// Argmax with lowest-index tie-breaking.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn single_layer(activation: Activation, k: usize) -> Vec<LayerSpec> {
        vec![LayerSpec::new(k, k, activation)]
    }

    #[test]
    fn build_is_deterministic() {
        let specs = single_layer(Activation::Softmax, 2);
        let a = build_model(&specs, 7).unwrap();
        let b = build_model(&specs, 7).unwrap();
        for (wa, wb) in a.weights().iter().zip(b.weights()) {
            assert_eq!(wa, wb);
        }
        let c = build_model(&specs, 8).unwrap();
        assert_ne!(a.weights()[0], c.weights()[0]);
    }

    #[test]
    fn width_mismatch_names_the_pair() {
        let specs = vec![
            LayerSpec::new(4, 8, Activation::Tanh),
            LayerSpec::new(9, 2, Activation::Softmax),
        ];
        let err = build_model(&specs, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("width mismatch at layer 1\u{2192}2"), "{msg}");
    }

    #[test]
    fn texas_shaped_spec_builds_matching_shapes() {
        let widths = [6170usize, 1024, 512, 256, 128, 100];
        let mut specs = Vec::new();
        for i in 0..widths.len() - 1 {
            let act = if i == widths.len() - 2 {
                Activation::Softmax
            } else {
                Activation::Tanh
            };
            specs.push(LayerSpec::new(widths[i], widths[i + 1], act));
        }
        let model = build_model(&specs, 1).unwrap();
        assert_eq!(model.weights().len(), 5);
        for (i, w) in model.weights().iter().enumerate() {
            assert_eq!(w.dim(), (widths[i + 1], widths[i]));
        }
    }

    #[test]
    fn identity_linear_layer_passes_logits_through() {
        let specs = single_layer(Activation::Linear, 2);
        let model = NetworkModel::from_parts(
            specs,
            vec![array![[1.0, 0.0], [0.0, 1.0]]],
            vec![array![0.0, 0.0]],
            0,
        )
        .unwrap();
        let trace = model
            .forward_with_trace(&array![[3.0, -1.0]])
            .unwrap();
        assert_eq!(trace.logits(), &array![[3.0, -1.0]]);
    }

    #[test]
    fn zero_final_layer_gives_uniform_scores() {
        let specs = vec![
            LayerSpec::new(3, 5, Activation::Tanh),
            LayerSpec::new(5, 4, Activation::Softmax),
        ];
        let mut model = build_model(&specs, 3).unwrap();
        model.weights_mut()[1].fill(0.0);
        model.biases_mut()[1].fill(0.0);
        let trace = model
            .forward_with_trace(&array![[0.3, -0.2, 0.9]])
            .unwrap();
        for &v in trace.scores().iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form() {
        let specs = single_layer(Activation::Softmax, 2);
        let model = NetworkModel::from_parts(
            specs,
            vec![array![[1.0, 0.0], [0.0, 1.0]]],
            vec![array![0.0, 0.0]],
            0,
        )
        .unwrap();
        let trace = model
            .forward_with_trace(&array![[2.0f64.ln(), 0.0]])
            .unwrap();
        assert!((trace.scores()[[0, 0]] - 2.0 / 3.0).abs() < 1e-12);
        assert!((trace.scores()[[0, 1]] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let specs = single_layer(Activation::Softmax, 2);
        let model = build_model(&specs, 0).unwrap();
        let err = model
            .forward_with_trace(&array![[f64::NAN, 0.0]])
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn overflowing_intermediate_names_the_layer() {
        let specs = vec![
            LayerSpec::new(1, 1, Activation::Linear),
            LayerSpec::new(1, 1, Activation::Softmax),
        ];
        let model = NetworkModel::from_parts(
            specs,
            vec![array![[1e154]], array![[1e154]]],
            vec![array![0.0], array![0.0]],
            0,
        )
        .unwrap();
        let err = model.forward_with_trace(&array![[1e20]]).unwrap_err();
        match err {
            Error::NonFiniteLayer { layer } => assert_eq!(layer, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let logits = array![[0.3, -1.2, 4.0, 0.0]];
        let shifted = logits.mapv(|v| v + 123.456);
        let a = softmax_rows(&logits);
        let b = softmax_rows(&shifted);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!((a.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn batch_scores_matches_single_forward() {
        let specs = vec![
            LayerSpec::new(4, 6, Activation::Tanh),
            LayerSpec::new(6, 3, Activation::Softmax),
        ];
        let model = build_model(&specs, 11).unwrap();
        let mut batch = Array2::zeros((600, 4));
        for (i, mut row) in batch.rows_mut().into_iter().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = ((i * 7 + j) as f64).sin();
            }
        }
        let all = model.batch_scores(&batch, None).unwrap();
        let direct = model.forward_with_trace(&batch).unwrap();
        assert_eq!(all, direct.scores);
    }
}
