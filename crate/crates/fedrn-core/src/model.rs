//! Small feed-forward classifiers with manual gradients.
//!
//! Models are split into feature layers and a classification head so the
//! head can be fine-tuned on its own. All training is plain mini-batch SGD
//! with classical momentum; shuffling is the only source of randomness and
//! is driven entirely by the configured [`RngStream`].

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;

use crate::data::LabeledExample;
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Predicted probabilities are clamped away from zero before taking logs so
/// losses stay finite for downstream mixture fitting.
pub const LOSS_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::contract(format!("unknown activation tag {other:?}"))),
        }
    }
}

/// One dense layer: `out = act(W x + b)` with `W` stored as `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>, activation: Activation) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::contract(format!(
                "layer weight rows {} do not match bias length {}",
                weights.nrows(),
                bias.len()
            )));
        }
        Ok(DenseLayer { weights, bias, activation })
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    fn affine(&self, input: &Array1<f64>) -> Array1<f64> {
        self.weights.dot(input) + &self.bias
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite()) && self.bias.iter().all(|b| b.is_finite())
    }

    fn same_shape(&self, other: &DenseLayer) -> bool {
        self.weights.dim() == other.weights.dim() && self.activation == other.activation
    }
}

/// Parameters of a classifier: feature layers followed by a linear head
/// whose output is passed through softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub feature_layers: Vec<DenseLayer>,
    pub head: DenseLayer,
    pub num_classes: usize,
}

impl ModelParams {
    pub fn new(feature_layers: Vec<DenseLayer>, head: DenseLayer, num_classes: usize) -> Result<Self> {
        let model = ModelParams { feature_layers, head, num_classes };
        model.validate()?;
        Ok(model)
    }

    /// Input dimension expected by [`forward`].
    pub fn input_dim(&self) -> usize {
        self.feature_layers
            .first()
            .map(|l| l.input_dim())
            .unwrap_or_else(|| self.head.input_dim())
    }

    pub fn validate(&self) -> Result<()> {
        let mut dim = self.input_dim();
        for (i, layer) in self.feature_layers.iter().enumerate() {
            if layer.input_dim() != dim {
                return Err(Error::contract(format!(
                    "feature layer {i} expects input dim {}, got {dim}",
                    layer.input_dim()
                )));
            }
            if !layer.is_finite() {
                return Err(Error::contract(format!("feature layer {i} has non-finite parameters")));
            }
            dim = layer.output_dim();
        }
        if self.head.input_dim() != dim {
            return Err(Error::contract(format!(
                "head expects input dim {}, got {dim}",
                self.head.input_dim()
            )));
        }
        if self.head.output_dim() != self.num_classes {
            return Err(Error::contract(format!(
                "head output dim {} does not match num_classes {}",
                self.head.output_dim(),
                self.num_classes
            )));
        }
        if !self.head.is_finite() {
            return Err(Error::contract("head has non-finite parameters"));
        }
        Ok(())
    }

    pub fn same_architecture(&self, other: &ModelParams) -> bool {
        self.num_classes == other.num_classes
            && self.feature_layers.len() == other.feature_layers.len()
            && self
                .feature_layers
                .iter()
                .zip(&other.feature_layers)
                .all(|(a, b)| a.same_shape(b))
            && self.head.same_shape(&other.head)
    }

    /// All scalars in a fixed order (feature layers first, weights row-major
    /// then bias, head last).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in self.feature_layers.iter().chain(std::iter::once(&self.head)) {
            out.extend(layer.weights.iter().copied());
            out.extend(layer.bias.iter().copied());
        }
        out
    }

    /// Overwrite all scalars from the order produced by [`flatten`].
    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        let mut it = values.iter();
        for layer in self
            .feature_layers
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
        {
            for w in layer.weights.iter_mut() {
                *w = *it.next().ok_or_else(|| Error::contract("too few scalars"))?;
            }
            for b in layer.bias.iter_mut() {
                *b = *it.next().ok_or_else(|| Error::contract("too few scalars"))?;
            }
        }
        if it.next().is_some() {
            return Err(Error::contract("too many scalars"));
        }
        Ok(())
    }

    /// Serialize as text: a shape header per layer, then one scalar per line.
    /// Floats use the shortest representation that round-trips exactly.
    pub fn to_text(&self) -> String {
        let mut out = format!("mlp {} {}\n", self.num_classes, self.feature_layers.len());
        for layer in &self.feature_layers {
            out.push_str(&format!(
                "layer {} {} {}\n",
                layer.output_dim(),
                layer.input_dim(),
                layer.activation.tag()
            ));
            push_scalars(&mut out, layer);
        }
        out.push_str(&format!("head {} {}\n", self.head.output_dim(), self.head.input_dim()));
        push_scalars(&mut out, &self.head);
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::contract("empty model text"))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("mlp") {
            return Err(Error::contract("model text must start with an 'mlp' header"));
        }
        let num_classes: usize = parse_token(parts.next(), "num_classes")?;
        let n_layers: usize = parse_token(parts.next(), "layer count")?;

        let mut feature_layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let (out_dim, in_dim, act) = parse_layer_header(lines.next(), "layer")?;
            let activation = Activation::from_tag(act.ok_or_else(|| Error::contract("layer header missing activation"))?)?;
            feature_layers.push(read_layer(&mut lines, out_dim, in_dim, activation)?);
        }
        let (out_dim, in_dim, _) = parse_layer_header(lines.next(), "head")?;
        let head = read_layer(&mut lines, out_dim, in_dim, Activation::Identity)?;
        if lines.next().is_some() {
            return Err(Error::contract("trailing content after model scalars"));
        }
        ModelParams::new(feature_layers, head, num_classes)
    }
}

fn push_scalars(out: &mut String, layer: &DenseLayer) {
    use std::fmt::Write;
    for w in layer.weights.iter() {
        writeln!(out, "{w}").unwrap();
    }
    for b in layer.bias.iter() {
        writeln!(out, "{b}").unwrap();
    }
}

fn parse_token<T: std::str::FromStr>(tok: Option<&str>, what: &str) -> Result<T> {
    tok.ok_or_else(|| Error::contract(format!("missing {what}")))?
        .parse()
        .map_err(|_| Error::contract(format!("invalid {what}")))
}

fn parse_layer_header<'a>(
    line: Option<&'a str>,
    expect: &str,
) -> Result<(usize, usize, Option<&'a str>)> {
    let line = line.ok_or_else(|| Error::contract(format!("missing {expect} header")))?;
    let mut parts = line.split_whitespace();
    let kind = parts.next().unwrap_or("");
    if kind != expect {
        return Err(Error::contract(format!("expected {expect} header, got {kind:?}")));
    }
    let out_dim = parse_token(parts.next(), "output dim")?;
    let in_dim = parse_token(parts.next(), "input dim")?;
    Ok((out_dim, in_dim, parts.next()))
}

fn read_layer<'a>(
    lines: &mut impl Iterator<Item = &'a str>,
    out_dim: usize,
    in_dim: usize,
    activation: Activation,
) -> Result<DenseLayer> {
    let mut scalars = Vec::with_capacity(out_dim * in_dim + out_dim);
    for _ in 0..out_dim * in_dim + out_dim {
        let line = lines.next().ok_or_else(|| Error::contract("too few scalar lines"))?;
        scalars.push(
            line.trim()
                .parse::<f64>()
                .map_err(|_| Error::contract(format!("invalid scalar {line:?}")))?,
        );
    }
    let weights = Array2::from_shape_vec((out_dim, in_dim), scalars[..out_dim * in_dim].to_vec())
        .map_err(|e| Error::contract(e.to_string()))?;
    let bias = Array1::from_vec(scalars[out_dim * in_dim..].to_vec());
    DenseLayer::new(weights, bias, activation)
}

/// Initialize an MLP with the given hidden widths; weights and biases drawn
/// uniformly from ±1/sqrt(fan_in).
pub fn init_mlp(input_dim: usize, hidden: &[usize], num_classes: usize, stream: RngStream) -> ModelParams {
    use rand::Rng;
    let mut rng = stream.rng();
    let mut dims = vec![input_dim];
    dims.extend_from_slice(hidden);

    let mut draw_layer = |in_dim: usize, out_dim: usize, act: Activation| {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weights = Array2::from_shape_fn((out_dim, in_dim), |_| rng.random_range(-bound..bound));
        let bias = Array1::from_shape_fn(out_dim, |_| rng.random_range(-bound..bound));
        DenseLayer { weights, bias, activation: act }
    };

    let feature_layers: Vec<DenseLayer> = dims
        .windows(2)
        .map(|w| draw_layer(w[0], w[1], Activation::Relu))
        .collect();
    let head = draw_layer(*dims.last().unwrap(), num_classes, Activation::Identity);
    ModelParams { feature_layers, head, num_classes }
}

/// All-zero MLP with the same shape rules as [`init_mlp`].
pub fn zeroed_mlp(input_dim: usize, hidden: &[usize], num_classes: usize) -> ModelParams {
    let mut dims = vec![input_dim];
    dims.extend_from_slice(hidden);
    let zero_layer = |in_dim: usize, out_dim: usize, act: Activation| DenseLayer {
        weights: Array2::zeros((out_dim, in_dim)),
        bias: Array1::zeros(out_dim),
        activation: act,
    };
    let feature_layers = dims
        .windows(2)
        .map(|w| zero_layer(w[0], w[1], Activation::Relu))
        .collect();
    let head = zero_layer(*dims.last().unwrap(), num_classes, Activation::Identity);
    ModelParams { feature_layers, head, num_classes }
}

/// Hyperparameters for local SGD.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub rng_stream: RngStream,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        Ok(())
    }

    /// Same hyperparameters on a different random stream.
    pub fn with_stream(mut self, stream: RngStream) -> Self {
        self.rng_stream = stream;
        self
    }
}

/// Softmax output of a model for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Array1<f64>,
}

impl Prediction {
    /// Index of the largest probability; ties resolve to the smaller class.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|z| (z - max).exp());
    let sum = out.sum();
    out.mapv_inplace(|v| v / sum);
    out
}

struct ForwardTrace {
    /// activations[0] is the input; activations[i + 1] the output of feature
    /// layer i.
    activations: Vec<Array1<f64>>,
    pre_activations: Vec<Array1<f64>>,
    probs: Array1<f64>,
}

fn forward_trace(model: &ModelParams, features: &Array1<f64>) -> Result<ForwardTrace> {
    if features.len() != model.input_dim() {
        return Err(Error::contract(format!(
            "input has dim {}, model expects {}",
            features.len(),
            model.input_dim()
        )));
    }
    let mut activations = Vec::with_capacity(model.feature_layers.len() + 1);
    let mut pre_activations = Vec::with_capacity(model.feature_layers.len());
    activations.push(features.clone());
    for layer in &model.feature_layers {
        let z = layer.affine(activations.last().unwrap());
        let a = z.mapv(|v| layer.activation.apply(v));
        pre_activations.push(z);
        activations.push(a);
    }
    let logits = model.head.affine(activations.last().unwrap());
    Ok(ForwardTrace { activations, pre_activations, probs: softmax(&logits) })
}

/// Softmax prediction for one input.
pub fn forward(model: &ModelParams, features: &Array1<f64>) -> Result<Prediction> {
    Ok(Prediction { probs: forward_trace(model, features)?.probs })
}

/// Run only the feature layers, producing the head's input.
pub fn feature_forward(model: &ModelParams, features: &Array1<f64>) -> Result<Array1<f64>> {
    if features.len() != model.input_dim() {
        return Err(Error::contract(format!(
            "input has dim {}, model expects {}",
            features.len(),
            model.input_dim()
        )));
    }
    let mut a = features.clone();
    for layer in &model.feature_layers {
        a = layer.affine(&a).mapv(|v| layer.activation.apply(v));
    }
    Ok(a)
}

fn check_labels(model: &ModelParams, examples: &[LabeledExample]) -> Result<()> {
    for (i, ex) in examples.iter().enumerate() {
        if ex.observed_label() >= model.num_classes {
            return Err(Error::contract(format!(
                "example {i} has observed label {} outside [0, {})",
                ex.observed_label(),
                model.num_classes
            )));
        }
    }
    Ok(())
}

/// Cross-entropy of each example against its observed label.
pub fn per_example_losses(model: &ModelParams, examples: &[LabeledExample]) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::contract("per_example_losses requires at least one example"));
    }
    check_labels(model, examples)?;
    examples
        .iter()
        .map(|ex| {
            let pred = forward(model, ex.features())?;
            Ok(-pred.probs[ex.observed_label()].max(LOSS_FLOOR).ln())
        })
        .collect()
}

/// Mean cross-entropy over a set of examples.
pub fn mean_cross_entropy(model: &ModelParams, examples: &[LabeledExample]) -> Result<f64> {
    let losses = per_example_losses(model, examples)?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Fraction of examples whose argmax prediction equals the observed label.
pub fn training_accuracy(model: &ModelParams, examples: &[LabeledExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::contract("training_accuracy requires at least one example"));
    }
    check_labels(model, examples)?;
    let mut hits = 0usize;
    for ex in examples {
        if forward(model, ex.features())?.argmax() == ex.observed_label() {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Gradients shaped like a model's parameters.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub feature_layers: Vec<(Array2<f64>, Array1<f64>)>,
    pub head: (Array2<f64>, Array1<f64>),
}

impl Gradients {
    pub fn zeros_like(model: &ModelParams) -> Self {
        Gradients {
            feature_layers: model
                .feature_layers
                .iter()
                .map(|l| (Array2::zeros(l.weights.dim()), Array1::zeros(l.bias.len())))
                .collect(),
            head: (
                Array2::zeros(model.head.weights.dim()),
                Array1::zeros(model.head.bias.len()),
            ),
        }
    }

    fn scale(&mut self, factor: f64) {
        for (w, b) in self.feature_layers.iter_mut().chain(std::iter::once(&mut self.head)) {
            w.mapv_inplace(|v| v * factor);
            b.mapv_inplace(|v| v * factor);
        }
    }

    fn axpy(&mut self, alpha: f64, other: &Gradients) {
        for ((w, b), (ow, ob)) in self
            .feature_layers
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
            .zip(other.feature_layers.iter().chain(std::iter::once(&other.head)))
        {
            w.scaled_add(alpha, ow);
            b.scaled_add(alpha, ob);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.feature_layers.iter().chain(std::iter::once(&self.head)) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }
}

fn apply_update(params: &mut ModelParams, update: &Gradients) {
    for (layer, (dw, db)) in params
        .feature_layers
        .iter_mut()
        .chain(std::iter::once(&mut params.head))
        .zip(update.feature_layers.iter().chain(std::iter::once(&update.head)))
    {
        layer.weights += dw;
        layer.bias += db;
    }
}

/// Gradient of the per-example cross-entropy, accumulated into `grads`.
fn accumulate_example_gradient(
    model: &ModelParams,
    example: &LabeledExample,
    grads: &mut Gradients,
) -> Result<()> {
    let trace = forward_trace(model, example.features())?;
    let label = example.observed_label();

    // With the loss floored, the loss is constant once the predicted
    // probability drops below the floor.
    if trace.probs[label] <= LOSS_FLOOR {
        return Ok(());
    }
    let mut delta = trace.probs.clone();
    delta[label] -= 1.0;

    // Head.
    let last_act = trace.activations.last().unwrap();
    for (r, &d) in delta.iter().enumerate() {
        grads.head.0.row_mut(r).scaled_add(d, last_act);
    }
    grads.head.1 += &delta;
    let mut upstream = model.head.weights.t().dot(&delta);

    // Feature layers, last to first.
    for i in (0..model.feature_layers.len()).rev() {
        let layer = &model.feature_layers[i];
        let dz = Array1::from_shape_fn(upstream.len(), |j| {
            upstream[j] * layer.activation.derivative(trace.pre_activations[i][j])
        });
        let prev_act = &trace.activations[i];
        let (gw, gb) = &mut grads.feature_layers[i];
        for (r, &d) in dz.iter().enumerate() {
            gw.row_mut(r).scaled_add(d, prev_act);
        }
        *gb += &dz;
        if i > 0 {
            upstream = layer.weights.t().dot(&dz);
        }
    }
    Ok(())
}

fn batch_gradients(model: &ModelParams, examples: &[LabeledExample], batch: &[usize]) -> Result<Gradients> {
    let mut grads = Gradients::zeros_like(model);
    for &i in batch {
        accumulate_example_gradient(model, &examples[i], &mut grads)?;
    }
    grads.scale(1.0 / batch.len() as f64);
    Ok(grads)
}

/// Gradients of the mean cross-entropy over all examples.
pub fn mean_loss_gradients(model: &ModelParams, examples: &[LabeledExample]) -> Result<Gradients> {
    if examples.is_empty() {
        return Err(Error::contract("gradient of an empty example set is undefined"));
    }
    check_labels(model, examples)?;
    let all: Vec<usize> = (0..examples.len()).collect();
    batch_gradients(model, examples, &all)
}

/// Mini-batch SGD with classical momentum
/// (`v = momentum * v - lr * g; p += v`). The input model is untouched.
pub fn sgd_train(model: &ModelParams, examples: &[LabeledExample], cfg: &TrainConfig) -> Result<ModelParams> {
    if examples.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    cfg.validate()?;
    model.validate()?;
    check_labels(model, examples)?;

    let mut params = model.clone();
    let mut velocity = Gradients::zeros_like(model);
    let mut rng = cfg.rng_stream.rng();
    let mut order: Vec<usize> = (0..examples.len()).collect();

    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        // The trailing short batch is trained on as-is.
        for batch in order.chunks(cfg.batch_size) {
            let grads = batch_gradients(&params, examples, batch)?;
            velocity.scale(cfg.momentum);
            velocity.axpy(-cfg.learning_rate, &grads);
            apply_update(&mut params, &velocity);
        }
    }
    Ok(params)
}

/// Result of [`fine_tune_head`]; `applied` is false when the example set was
/// empty and the model was returned unchanged.
#[derive(Clone, Debug)]
pub struct FineTuneOutcome {
    pub model: ModelParams,
    pub applied: bool,
}

/// Train only the classification head, leaving feature layers untouched.
/// The procedure mirrors [`sgd_train`] restricted to head parameters.
pub fn fine_tune_head(model: &ModelParams, examples: &[LabeledExample], cfg: &TrainConfig) -> Result<FineTuneOutcome> {
    if examples.is_empty() {
        return Ok(FineTuneOutcome { model: model.clone(), applied: false });
    }
    cfg.validate()?;
    model.validate()?;
    check_labels(model, examples)?;

    // Feature layers are frozen, so head inputs can be computed once.
    let head_inputs: Vec<Array1<f64>> = examples
        .iter()
        .map(|ex| feature_forward(model, ex.features()))
        .collect::<Result<_>>()?;

    let mut head = model.head.clone();
    let mut vel_w: Array2<f64> = Array2::zeros(head.weights.dim());
    let mut vel_b: Array1<f64> = Array1::zeros(head.bias.len());
    let mut rng = cfg.rng_stream.rng();
    let mut order: Vec<usize> = (0..examples.len()).collect();

    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut gw: Array2<f64> = Array2::zeros(head.weights.dim());
            let mut gb: Array1<f64> = Array1::zeros(head.bias.len());
            for &i in batch {
                let probs = softmax(&head.affine(&head_inputs[i]));
                let label = examples[i].observed_label();
                if probs[label] <= LOSS_FLOOR {
                    continue;
                }
                let mut delta = probs;
                delta[label] -= 1.0;
                for (r, &d) in delta.iter().enumerate() {
                    gw.row_mut(r).scaled_add(d, &head_inputs[i]);
                }
                gb += &delta;
            }
            let inv = 1.0 / batch.len() as f64;
            vel_w.mapv_inplace(|v| v * cfg.momentum);
            vel_b.mapv_inplace(|v| v * cfg.momentum);
            vel_w.scaled_add(-cfg.learning_rate * inv, &gw);
            vel_b.scaled_add(-cfg.learning_rate * inv, &gb);
            head.weights += &vel_w;
            head.bias += &vel_b;
        }
    }

    let mut out = model.clone();
    out.head = head;
    Ok(FineTuneOutcome { model: out, applied: true })
}

/// Elementwise weighted average of parameter sets. Weights must be
/// nonnegative and sum to 1 within 1e-9.
pub fn average_params(models: &[ModelParams], weights: &[f64]) -> Result<ModelParams> {
    if models.is_empty() {
        return Err(Error::contract("average_params requires at least one model"));
    }
    if models.len() != weights.len() {
        return Err(Error::contract(format!(
            "{} models but {} weights",
            models.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::contract("aggregation weights must be finite and nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("aggregation weights sum to {total}, expected 1")));
    }
    for m in &models[1..] {
        if !m.same_architecture(&models[0]) {
            return Err(Error::contract("cannot average models with different architectures"));
        }
    }

    let mut acc = models[0].clone();
    for layer in acc.feature_layers.iter_mut().chain(std::iter::once(&mut acc.head)) {
        layer.weights.fill(0.0);
        layer.bias.fill(0.0);
    }
    for (model, &w) in models.iter().zip(weights) {
        for (dst, src) in acc
            .feature_layers
            .iter_mut()
            .chain(std::iter::once(&mut acc.head))
            .zip(model.feature_layers.iter().chain(std::iter::once(&model.head)))
        {
            dst.weights.scaled_add(w, &src.weights);
            dst.bias.scaled_add(w, &src.bias);
        }
    }
    Ok(acc)
}
