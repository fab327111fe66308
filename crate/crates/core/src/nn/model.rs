use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::matrix::{dot, Matrix};
use super::NnError;

/// Format tag written into every serialized model.
pub const MODEL_FORMAT: &str = "pipelearn-model/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
    Softmax,
}

impl Activation {
    fn apply(self, z: &mut Matrix) {
        match self {
            Activation::Identity => {}
            Activation::Relu => z.data_mut().iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Softmax => {
                for r in 0..z.rows() {
                    let row = z.row_mut(r);
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    row.iter_mut().for_each(|v| *v /= sum);
                }
            }
        }
    }

    /// Converts `d loss / d output` into `d loss / d pre-activation`, given the
    /// activation output of the layer.
    fn backprop(self, output: &Matrix, grad_out: &Matrix) -> Matrix {
        match self {
            Activation::Identity => grad_out.clone(),
            Activation::Relu => {
                let mut g = grad_out.clone();
                for (gv, ov) in g.data_mut().iter_mut().zip(output.data()) {
                    if *ov <= 0.0 {
                        *gv = 0.0;
                    }
                }
                g
            }
            Activation::Softmax => {
                let mut g = Matrix::zeros(output.rows(), output.cols());
                for r in 0..output.rows() {
                    let a = output.row(r);
                    let da = grad_out.row(r);
                    let inner = dot(a, da);
                    for (gv, (ai, dai)) in g.row_mut(r).iter_mut().zip(a.iter().zip(da)) {
                        *gv = ai * (dai - inner);
                    }
                }
                g
            }
        }
    }
}

/// Width and activation of one layer, used to initialise models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    weights: Matrix,
    bias: Vec<f64>,
    activation: Activation,
}

impl DenseLayer {
    /// `weights` is (out x in), `bias` has length out.
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self, NnError> {
        if bias.len() != weights.rows() {
            return Err(NnError::Shape(format!(
                "bias length {} does not match {} output units",
                bias.len(),
                weights.rows()
            )));
        }
        if weights.cols() == 0 || weights.rows() == 0 {
            return Err(NnError::Shape("layer with zero width".into()));
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(NnError::NonFinite("bias"));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.data().len() + self.bias.len()
    }

    /// All parameters, weights first (row-major) then bias.
    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights.data().iter().chain(self.bias.iter()).copied()
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.data_mut().iter_mut().chain(self.bias.iter_mut())
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let mut z = x.matmul_transposed(&self.weights);
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        self.activation.apply(&mut z);
        z
    }
}

/// Ordered stack of dense layers. May be empty: the server half of a model
/// split at its last layer has no layers and acts as the identity.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SequentialModel {
    layers: Vec<DenseLayer>,
}

impl SequentialModel {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self, NnError> {
        for (q, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(NnError::LayerMismatch {
                    layer: q + 2,
                    expected: pair[0].outputs(),
                    found: pair[1].inputs(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Seeded uniform initialisation in [-0.5, 0.5] for weights and biases.
    pub fn init(input_width: usize, specs: &[LayerSpec], seed: u64) -> Result<Self, NnError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(specs.len());
        let mut fan_in = input_width;
        for spec in specs {
            let w: Vec<f64> = (0..spec.width * fan_in)
                .map(|_| rng.gen_range(-0.5..=0.5))
                .collect();
            let b: Vec<f64> = (0..spec.width).map(|_| rng.gen_range(-0.5..=0.5)).collect();
            layers.push(DenseLayer::new(
                Matrix::new(spec.width, fan_in, w)?,
                b,
                spec.activation,
            )?);
            fan_in = spec.width;
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<DenseLayer> {
        self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn input_width(&self) -> Option<usize> {
        self.layers.first().map(DenseLayer::inputs)
    }

    pub fn output_width(&self) -> Option<usize> {
        self.layers.last().map(DenseLayer::outputs)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(DenseLayer::params)
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(DenseLayer::params_mut)
    }

    /// True when both models have identical layer shapes and activations.
    pub fn same_architecture(&self, other: &SequentialModel) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights.shape() == b.weights.shape() && a.activation == b.activation
            })
    }

    /// Largest absolute parameter difference between two same-shaped models.
    pub fn max_param_diff(&self, other: &SequentialModel) -> f64 {
        assert!(self.same_architecture(other), "architecture mismatch");
        self.params()
            .zip(other.params())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> String {
        let wire = WireModel {
            format: MODEL_FORMAT.to_string(),
            layers: self
                .layers
                .iter()
                .map(|l| WireLayer {
                    inputs: l.inputs(),
                    outputs: l.outputs(),
                    activation: l.activation,
                    weights: l.weights.data().to_vec(),
                    bias: l.bias.clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&wire).expect("model serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self, NnError> {
        let wire: WireModel =
            serde_json::from_str(text).map_err(|e| NnError::Encoding(e.to_string()))?;
        if wire.format != MODEL_FORMAT {
            return Err(NnError::Encoding(format!(
                "unsupported format tag {:?}",
                wire.format
            )));
        }
        let mut layers = Vec::with_capacity(wire.layers.len());
        for (q, l) in wire.layers.into_iter().enumerate() {
            let expected = l.inputs.checked_mul(l.outputs).ok_or_else(|| {
                NnError::Encoding(format!("layer {}: dimensions overflow", q + 1))
            })?;
            if l.weights.len() != expected {
                return Err(NnError::Encoding(format!(
                    "layer {}: {} weights for a {}x{} layer",
                    q + 1,
                    l.weights.len(),
                    l.outputs,
                    l.inputs
                )));
            }
            let w = Matrix::new(l.outputs, l.inputs, l.weights)?;
            layers.push(DenseLayer::new(w, l.bias, l.activation)?);
        }
        Self::new(layers)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireModel {
    format: String,
    layers: Vec<WireLayer>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireLayer {
    inputs: usize,
    outputs: usize,
    activation: Activation,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// Layer inputs recorded during [`forward`], plus the final output.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    inputs: Vec<Matrix>,
    output: Matrix,
}

impl ForwardCache {
    pub fn inputs(&self) -> &[Matrix] {
        &self.inputs
    }

    pub fn output(&self) -> &Matrix {
        &self.output
    }

    /// Post-activation output of layer `q` (0-based).
    fn layer_output(&self, q: usize) -> &Matrix {
        self.inputs.get(q + 1).unwrap_or(&self.output)
    }
}

pub fn forward(model: &SequentialModel, batch: &Matrix) -> Result<(Matrix, ForwardCache), NnError> {
    let mut inputs = Vec::with_capacity(model.len());
    let mut x = batch.clone();
    for (q, layer) in model.layers.iter().enumerate() {
        if x.cols() != layer.inputs() {
            return Err(NnError::LayerMismatch {
                layer: q + 1,
                expected: layer.inputs(),
                found: x.cols(),
            });
        }
        let y = layer.forward(&x);
        inputs.push(x);
        x = y;
    }
    if !x.is_finite() {
        return Err(NnError::NonFinite("forward pass"));
    }
    let cache = ForwardCache {
        inputs,
        output: x.clone(),
    };
    Ok((x, cache))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Mean over rows of `-sum(y * ln(y_hat))`.
    CrossEntropy,
    /// Mean over rows of `sum((y_hat - y)^2)`.
    MeanSquared,
}

impl LossKind {
    /// Cross-entropy for softmax outputs, squared error otherwise.
    pub fn for_output(activation: Activation) -> Self {
        match activation {
            Activation::Softmax => LossKind::CrossEntropy,
            _ => LossKind::MeanSquared,
        }
    }

    pub fn for_model(model: &SequentialModel) -> Option<Self> {
        model.layers.last().map(|l| Self::for_output(l.activation))
    }
}

pub fn loss_value(kind: LossKind, output: &Matrix, label: &Matrix) -> Result<f64, NnError> {
    if output.shape() != label.shape() {
        return Err(NnError::Shape(format!(
            "label shape {:?} does not match output {:?}",
            label.shape(),
            output.shape()
        )));
    }
    let rows = output.rows().max(1) as f64;
    let total: f64 = match kind {
        LossKind::CrossEntropy => output
            .data()
            .iter()
            .zip(label.data())
            .filter(|(_, y)| **y != 0.0)
            .map(|(p, y)| -y * p.max(f64::MIN_POSITIVE).ln())
            .sum(),
        LossKind::MeanSquared => output
            .data()
            .iter()
            .zip(label.data())
            .map(|(p, y)| (p - y) * (p - y))
            .sum(),
    };
    let loss = total / rows;
    if !loss.is_finite() {
        return Err(NnError::NonFinite("loss"));
    }
    Ok(loss)
}

fn loss_output_grad(kind: LossKind, output: &Matrix, label: &Matrix) -> Matrix {
    let rows = output.rows().max(1) as f64;
    let data = output
        .data()
        .iter()
        .zip(label.data())
        .map(|(p, y)| match kind {
            LossKind::CrossEntropy => -y / (p.max(f64::MIN_POSITIVE) * rows),
            LossKind::MeanSquared => 2.0 * (p - y) / rows,
        })
        .collect();
    Matrix::new(output.rows(), output.cols(), data).unwrap_or_else(|_| {
        // Only reachable with non-finite values; surfaced by the caller's check.
        Matrix::zeros(output.rows(), output.cols())
    })
}

/// Gradient of one layer's weights and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// One [`LayerGrad`] per layer, in layer order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(model: &SequentialModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: Matrix::zeros(l.outputs(), l.inputs()),
                    bias: vec![0.0; l.outputs()],
                })
                .collect(),
        }
    }

    /// Element-wise `self += other`.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<(), NnError> {
        if self.layers.len() != other.layers.len() {
            return Err(NnError::Shape("gradient layer count mismatch".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.weights.shape() != b.weights.shape() || a.bias.len() != b.bias.len() {
                return Err(NnError::Shape("gradient shape mismatch".into()));
            }
            for (x, y) in a.weights.data_mut().iter_mut().zip(b.weights.data()) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.data().iter().chain(l.bias.iter()).copied())
    }

    pub fn max_abs_diff(&self, other: &Gradients) -> f64 {
        assert_eq!(self.layers.len(), other.layers.len());
        self.values()
            .zip(other.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Concatenates two gradient sets (device half then server half).
    pub fn concat(mut self, tail: Gradients) -> Gradients {
        self.layers.extend(tail.layers);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardResult {
    pub grads: Gradients,
    /// Gradient of the loss with respect to the model input.
    pub input_grad: Matrix,
    pub loss: f64,
}

/// Backward pass with the loss implied by the final layer's activation.
pub fn backward(
    model: &SequentialModel,
    cache: &ForwardCache,
    label: &Matrix,
) -> Result<BackwardResult, NnError> {
    let kind = LossKind::for_model(model)
        .ok_or_else(|| NnError::Shape("loss undefined for a model without layers".into()))?;
    backward_with_loss(model, cache, label, kind)
}

/// Backward pass with an explicit loss. Works for an empty model, in which
/// case the input gradient is the loss gradient with respect to the input.
pub fn backward_with_loss(
    model: &SequentialModel,
    cache: &ForwardCache,
    label: &Matrix,
    kind: LossKind,
) -> Result<BackwardResult, NnError> {
    check_cache(model, cache)?;
    let output = cache.output();
    let loss = loss_value(kind, output, label)?;
    let last = model.layers.last();
    let fused = matches!(
        (kind, last.map(|l| l.activation)),
        (LossKind::CrossEntropy, Some(Activation::Softmax))
    );
    let (grads, input_grad) = if fused {
        // softmax + cross-entropy: d loss / d z = (y_hat - y) / rows
        let rows = output.rows().max(1) as f64;
        let data = output
            .data()
            .iter()
            .zip(label.data())
            .map(|(p, y)| (p - y) / rows)
            .collect();
        let dz = Matrix::new(output.rows(), output.cols(), data)?;
        backprop_layers(model, cache, model.len() - 1, dz)?
    } else {
        let grad_out = loss_output_grad(kind, output, label);
        backward_from_output_grad(model, cache, &grad_out)?
    };
    Ok(BackwardResult {
        grads,
        input_grad,
        loss,
    })
}

/// Backward pass driven by an upstream gradient `d loss / d output`.
/// Returns parameter gradients and `d loss / d input`.
pub fn backward_from_output_grad(
    model: &SequentialModel,
    cache: &ForwardCache,
    grad_out: &Matrix,
) -> Result<(Gradients, Matrix), NnError> {
    check_cache(model, cache)?;
    if grad_out.shape() != cache.output().shape() {
        return Err(NnError::StaleCache(format!(
            "upstream gradient {:?} vs output {:?}",
            grad_out.shape(),
            cache.output().shape()
        )));
    }
    let Some(last) = model.layers.last() else {
        return Ok((Gradients::default(), grad_out.clone()));
    };
    let dz = last
        .activation
        .backprop(cache.layer_output(model.len() - 1), grad_out);
    backprop_layers(model, cache, model.len() - 1, dz)
}

/// Walks layers `top..=0` given the pre-activation gradient of layer `top`.
fn backprop_layers(
    model: &SequentialModel,
    cache: &ForwardCache,
    top: usize,
    mut dz: Matrix,
) -> Result<(Gradients, Matrix), NnError> {
    let mut layers = Vec::with_capacity(top + 1);
    let mut q = top;
    loop {
        let layer = &model.layers[q];
        let x = &cache.inputs[q];
        let dw = dz.transpose_matmul(x);
        let db = dz.column_sums();
        let dx = dz.matmul(&layer.weights);
        layers.push(LayerGrad {
            weights: dw,
            bias: db,
        });
        if q == 0 {
            if !dx.is_finite() || layers.iter().any(|g| !g.weights.is_finite()) {
                return Err(NnError::NonFinite("backward pass"));
            }
            layers.reverse();
            return Ok((Gradients { layers }, dx));
        }
        q -= 1;
        dz = model.layers[q]
            .activation
            .backprop(cache.layer_output(q), &dx);
    }
}

fn check_cache(model: &SequentialModel, cache: &ForwardCache) -> Result<(), NnError> {
    if cache.inputs.len() != model.len() {
        return Err(NnError::StaleCache(format!(
            "{} cached inputs for {} layers",
            cache.inputs.len(),
            model.len()
        )));
    }
    for (q, (layer, x)) in model.layers.iter().zip(&cache.inputs).enumerate() {
        if x.cols() != layer.inputs() {
            return Err(NnError::StaleCache(format!(
                "layer {} input width {} vs {}",
                q + 1,
                x.cols(),
                layer.inputs()
            )));
        }
    }
    if let Some(w) = model.output_width() {
        if cache.output.cols() != w {
            return Err(NnError::StaleCache("output width".into()));
        }
    }
    Ok(())
}

/// `params -= eta / n_microbatches * accumulated_grads`.
pub fn sgd_step(
    model: &SequentialModel,
    accumulated: &Gradients,
    eta: f64,
    n_microbatches: usize,
) -> Result<SequentialModel, NnError> {
    if n_microbatches == 0 {
        return Err(NnError::Shape("n_microbatches must be at least 1".into()));
    }
    if accumulated.layers.len() != model.len() {
        return Err(NnError::Shape(format!(
            "{} gradient layers for {} model layers",
            accumulated.layers.len(),
            model.len()
        )));
    }
    for (l, g) in model.layers.iter().zip(&accumulated.layers) {
        if l.weights.shape() != g.weights.shape() || l.bias.len() != g.bias.len() {
            return Err(NnError::Shape("gradient does not match layer".into()));
        }
    }
    let scale = eta / n_microbatches as f64;
    let mut out = model.clone();
    for (p, g) in out.params_mut().zip(accumulated.values()) {
        *p -= scale * g;
    }
    if out.params().any(|p| !p.is_finite()) {
        return Err(NnError::NonFinite("parameter update"));
    }
    Ok(out)
}
