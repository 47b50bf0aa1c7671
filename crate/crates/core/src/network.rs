//! Convolutional network over cochleagrams.
//!
//! The canonical stack is five conv blocks (conv, Gaussian noise, local
//! response normalization, optional pooling) followed by a 4096-unit dense
//! layer, dropout and a softmax head of 178 (word) or 10 (domain) units.
//! Convolutions and pools use "same" padding, so every spatial size is
//! `ceil(in / stride)`.
//!
//! Feature maps are stored channel-major, `(channels, height, width)`.
//! Gradients are computed by hand; see `tests::finite_difference_gradients`.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_for;

pub const DORSAL_HEAD: usize = 178;
pub const VENTRAL_HEAD: usize = 10;
pub const PENULTIMATE_UNITS: usize = 4096;
pub const NOISE_STD: f64 = 0.1;
pub const DROPOUT_RATE: f64 = 0.1;
pub const LRN_RADIUS: usize = 2;
pub const LRN_K: f64 = 2.0;
pub const LRN_ALPHA: f64 = 1e-4;
pub const LRN_BETA: f64 = 0.75;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("input has shape {got:?}, model expects {expected:?}")]
    InputShape {
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("label {label} outside head of size {head}")]
    Label { label: usize, head: usize },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, NetworkError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    /// height, width, channels
    Map(usize, usize, usize),
    Vector(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Map(h, w, c) => h * w * c,
            Shape::Vector(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Map(h, w, c) => write!(f, "{h}x{w}x{c}"),
            Shape::Vector(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    /// Convolution followed by ReLU.
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
    },
    GaussianNoise {
        std: f64,
    },
    Lrn {
        radius: usize,
        k: f64,
        alpha: f64,
        beta: f64,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    MeanPool {
        window: usize,
        stride: usize,
    },
    Dense {
        units: usize,
        relu: bool,
    },
    Dropout {
        rate: f64,
    },
    Softmax,
}

impl LayerKind {
    fn is_structural(&self) -> bool {
        !matches!(self, LayerKind::Dropout { .. } | LayerKind::Softmax)
    }

    fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Dense { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub expected_output_shape: Option<Shape>,
}

impl LayerSpec {
    pub fn new(name: &str, kind: LayerKind, expected: Option<Shape>) -> LayerSpec {
        LayerSpec {
            name: name.to_string(),
            kind,
            expected_output_shape: expected,
        }
    }
}

/// Affine normalization applied to every input value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: f64,
    pub std: f64,
}

impl Default for InputNorm {
    fn default() -> Self {
        InputNorm { mean: 0.0, std: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// (frequency, time)
    pub input: (usize, usize),
    pub layers: Vec<LayerSpec>,
    pub head_size: usize,
    #[serde(default)]
    pub input_norm: InputNorm,
}

/// Channel widths of the five conv blocks plus the penultimate dense width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Widths {
    pub conv: [usize; 5],
    pub dense: usize,
}

impl Widths {
    pub const CANONICAL: Widths = Widths {
        conv: [96, 256, 512, 1024, 512],
        dense: PENULTIMATE_UNITS,
    };
}

impl ModelConfig {
    /// The full-size architecture with the reference output shapes attached.
    pub fn canonical(head_size: usize) -> Result<ModelConfig> {
        if head_size != DORSAL_HEAD && head_size != VENTRAL_HEAD {
            return Err(NetworkError::Config(format!(
                "head size must be {DORSAL_HEAD} or {VENTRAL_HEAD}, got {head_size}"
            )));
        }
        let expected = [
            Shape::Map(68, 134, 96),
            Shape::Map(34, 67, 96),
            Shape::Map(17, 34, 256),
            Shape::Map(9, 17, 256),
            Shape::Map(9, 17, 512),
            Shape::Map(5, 9, 512),
            Shape::Map(5, 9, 1024),
            Shape::Map(5, 9, 512),
            Shape::Map(3, 5, 512),
        ];
        let mut cfg = ModelConfig::stack(
            (crate::cochlea::N_FILTERS, crate::cochlea::N_FRAMES),
            Widths::CANONICAL,
            head_size,
        );
        // conv outputs carry through noise and norm unchanged
        let per_layer: Vec<Option<Shape>> = vec![
            Some(expected[0]),
            Some(expected[0]),
            Some(expected[0]),
            Some(expected[1]),
            Some(expected[2]),
            Some(expected[2]),
            Some(expected[2]),
            Some(expected[3]),
            Some(expected[4]),
            Some(expected[4]),
            Some(expected[4]),
            Some(expected[5]),
            Some(expected[6]),
            Some(expected[6]),
            Some(expected[6]),
            Some(expected[7]),
            Some(expected[7]),
            Some(expected[7]),
            Some(expected[8]),
            Some(Shape::Vector(PENULTIMATE_UNITS)),
            Some(Shape::Vector(PENULTIMATE_UNITS)),
            Some(Shape::Vector(head_size)),
            Some(Shape::Vector(head_size)),
        ];
        for (layer, e) in cfg.layers.iter_mut().zip(per_layer) {
            layer.expected_output_shape = e;
        }
        Ok(cfg)
    }

    /// Same layer sequence with arbitrary widths, head and input size.
    pub fn scaled(input: (usize, usize), widths: Widths, head_size: usize) -> Result<ModelConfig> {
        if head_size < 2 {
            return Err(NetworkError::Config(format!("head size must be >= 2, got {head_size}")));
        }
        if widths.conv.contains(&0) || widths.dense == 0 {
            return Err(NetworkError::Config("layer widths must be positive".into()));
        }
        if input.0 == 0 || input.1 == 0 {
            return Err(NetworkError::Config("input must be non-empty".into()));
        }
        Ok(ModelConfig::stack(input, widths, head_size))
    }

    fn stack(input: (usize, usize), w: Widths, head_size: usize) -> ModelConfig {
        use LayerKind::*;
        let noise = || GaussianNoise { std: NOISE_STD };
        let lrn = || Lrn {
            radius: LRN_RADIUS,
            k: LRN_K,
            alpha: LRN_ALPHA,
            beta: LRN_BETA,
        };
        let maxpool = || MaxPool { window: 3, stride: 2 };
        let layers = vec![
            LayerSpec::new("conv1", Conv { filters: w.conv[0], kernel: 9, stride: 3 }, None),
            LayerSpec::new("gaus1", noise(), None),
            LayerSpec::new("norm1", lrn(), None),
            LayerSpec::new("pool1", maxpool(), None),
            LayerSpec::new("conv2", Conv { filters: w.conv[1], kernel: 5, stride: 2 }, None),
            LayerSpec::new("gaus2", noise(), None),
            LayerSpec::new("norm2", lrn(), None),
            LayerSpec::new("pool2", maxpool(), None),
            LayerSpec::new("conv3", Conv { filters: w.conv[2], kernel: 3, stride: 1 }, None),
            LayerSpec::new("gaus3", noise(), None),
            LayerSpec::new("norm3", lrn(), None),
            LayerSpec::new("pool3", maxpool(), None),
            LayerSpec::new("conv4", Conv { filters: w.conv[3], kernel: 3, stride: 1 }, None),
            LayerSpec::new("gaus4", noise(), None),
            LayerSpec::new("norm4", lrn(), None),
            LayerSpec::new("conv5", Conv { filters: w.conv[4], kernel: 3, stride: 1 }, None),
            LayerSpec::new("gaus5", noise(), None),
            LayerSpec::new("norm5", lrn(), None),
            LayerSpec::new("pool4", MeanPool { window: 3, stride: 2 }, None),
            LayerSpec::new("dense1", Dense { units: w.dense, relu: true }, None),
            LayerSpec::new("dropout", Dropout { rate: DROPOUT_RATE }, None),
            LayerSpec::new("dense2", Dense { units: head_size, relu: false }, None),
            LayerSpec::new("softmax", Softmax, None),
        ];
        ModelConfig {
            input,
            layers,
            head_size,
            input_norm: InputNorm::default(),
        }
    }

    /// Layers excluding dropout and the softmax activation.
    pub fn structural_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.kind.is_structural()).count()
    }

    /// Output shape of every layer, inferred without running the model.
    pub fn output_shapes(&self) -> Result<Vec<(String, Shape)>> {
        let mut shape = Shape::Map(self.input.0, self.input.1, 1);
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            shape = infer_shape(&l.kind, shape).map_err(|m| NetworkError::Config(format!("{}: {m}", l.name)))?;
            out.push((l.name.clone(), shape));
        }
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        let shapes = self.output_shapes()?;
        match self.layers.last().map(|l| &l.kind) {
            Some(LayerKind::Softmax) => {}
            _ => return Err(NetworkError::Config("last layer must be softmax".into())),
        }
        let head = shapes[shapes.len() - 1].1;
        if head != Shape::Vector(self.head_size) {
            return Err(NetworkError::Config(format!(
                "head produces {head}, expected {}",
                self.head_size
            )));
        }
        for ((name, got), l) in shapes.iter().zip(&self.layers) {
            if let Some(e) = l.expected_output_shape {
                if e != *got {
                    return Err(NetworkError::Config(format!("{name} produces {got}, expected {e}")));
                }
            }
        }
        if !(self.input_norm.std > 0.0) {
            return Err(NetworkError::Config("input std must be positive".into()));
        }
        Ok(())
    }

    /// Index of the layer whose output is the penultimate representation:
    /// the dense layer that feeds the head.
    pub fn penultimate_index(&self) -> Option<usize> {
        let dense: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.kind, LayerKind::Dense { .. }))
            .map(|(i, _)| i)
            .collect();
        (dense.len() >= 2).then(|| dense[dense.len() - 2])
    }
}

fn out_size(input: usize, stride: usize) -> usize {
    input.div_ceil(stride)
}

/// Leading padding for "same" output size.
fn pad_before(input: usize, output: usize, window: usize, stride: usize) -> usize {
    let needed = ((output - 1) * stride + window).saturating_sub(input);
    needed / 2
}

fn infer_shape(kind: &LayerKind, input: Shape) -> std::result::Result<Shape, String> {
    use LayerKind::*;
    match (kind, input) {
        (Conv { filters, kernel, stride }, Shape::Map(h, w, _)) => {
            if *kernel == 0 || *stride == 0 {
                return Err("kernel and stride must be positive".into());
            }
            Ok(Shape::Map(out_size(h, *stride), out_size(w, *stride), *filters))
        }
        (MaxPool { window, stride } | MeanPool { window, stride }, Shape::Map(h, w, c)) => {
            if *window == 0 || *stride == 0 {
                return Err("window and stride must be positive".into());
            }
            Ok(Shape::Map(out_size(h, *stride), out_size(w, *stride), c))
        }
        (Conv { .. } | MaxPool { .. } | MeanPool { .. }, Shape::Vector(_)) => {
            Err("spatial layer after flatten".into())
        }
        (Dense { units, .. }, _) => Ok(Shape::Vector(*units)),
        (Lrn { .. }, Shape::Vector(_)) => Err("normalization needs a feature map".into()),
        (Dropout { rate }, s) => {
            if !(0.0..1.0).contains(rate) {
                return Err(format!("dropout rate {rate} outside [0, 1)"));
            }
            Ok(s)
        }
        (GaussianNoise { .. } | Lrn { .. } | Softmax, s) => Ok(s),
    }
}

/// Weight matrix and bias of a conv or dense layer. Conv weights are laid
/// out as `(filters, in_channels * kernel * kernel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Params {
    fn zeros_like(other: &Params) -> Params {
        Params {
            weight: Array2::zeros(other.weight.raw_dim()),
            bias: Array1::zeros(other.bias.raw_dim()),
        }
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Gradients with the same layout as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Params>);

impl Gradients {
    pub fn zeros_for(model: &Model) -> Gradients {
        Gradients(model.params.iter().map(Params::zeros_like).collect())
    }

    pub fn scale(&mut self, factor: f64) {
        for p in &mut self.0 {
            p.weight *= factor;
            p.bias *= factor;
        }
    }

    pub fn fill_zero(&mut self) {
        for p in &mut self.0 {
            p.weight.fill(0.0);
            p.bias.fill(0.0);
        }
    }
}

/// Whether stochastic layers (noise, dropout) are active.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

enum Act {
    Map(Array3<f64>),
    Vector(Array1<f64>),
}

impl Act {
    fn shape(&self) -> Shape {
        match self {
            Act::Map(a) => {
                let (c, h, w) = a.dim();
                Shape::Map(h, w, c)
            }
            Act::Vector(v) => Shape::Vector(v.len()),
        }
    }

    fn into_vector(self) -> Array1<f64> {
        match self {
            Act::Map(a) => {
                let n = a.len();
                a.into_shape_with_order(n).expect("contiguous")
            }
            Act::Vector(v) => v,
        }
    }

    fn into_map(self) -> Array3<f64> {
        match self {
            Act::Map(a) => a,
            Act::Vector(_) => unreachable!("shape inference rejects this"),
        }
    }
}

enum Cache {
    Conv {
        cols: Array2<f64>,
        out: Array2<f64>,
        in_dim: (usize, usize, usize),
    },
    Passthrough,
    Lrn {
        input: Array3<f64>,
        scale: Array3<f64>,
    },
    MaxPool {
        argmax: Vec<usize>,
        in_dim: (usize, usize, usize),
    },
    MeanPool {
        in_dim: (usize, usize, usize),
    },
    Dense {
        input: Array1<f64>,
        in_shape: Shape,
        out: Array1<f64>,
    },
    Dropout {
        mask: Option<Array1<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Params>,
    /// Layer index -> parameter slot.
    slots: Vec<Option<usize>>,
}

/// Build the canonical model with the given head.
pub fn build_model(head_size: usize, seed: u64) -> Result<Model> {
    Model::new(ModelConfig::canonical(head_size)?, seed)
}

impl Model {
    /// Fan-in scaled uniform initialization, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let shapes = config.output_shapes()?;
        let mut prev = Shape::Map(config.input.0, config.input.1, 1);
        let mut params = Vec::new();
        let mut slots = Vec::with_capacity(config.layers.len());
        for (l, (_, shape)) in config.layers.iter().zip(&shapes) {
            let fan = match (&l.kind, prev) {
                (LayerKind::Conv { filters, kernel, .. }, Shape::Map(_, _, c)) => Some((*filters, c * kernel * kernel)),
                (LayerKind::Dense { units, .. }, s) => Some((*units, s.len())),
                _ => None,
            };
            if let Some((out, fan_in)) = fan {
                let limit = (6.0 / fan_in as f64).sqrt();
                let mut rng = rng_for(seed, &["init", &l.name]);
                let weight = Array2::from_shape_simple_fn((out, fan_in), || rng.random_range(-limit..limit));
                slots.push(Some(params.len()));
                params.push(Params {
                    weight,
                    bias: Array1::zeros(out),
                });
            } else {
                slots.push(None);
            }
            prev = *shape;
        }
        Ok(Model { config, params, slots })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head_size(&self) -> usize {
        self.config.head_size
    }

    pub fn params(&self) -> &[Params] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Params] {
        &mut self.params
    }

    pub fn set_input_norm(&mut self, norm: InputNorm) {
        self.config.input_norm = norm;
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Params::len).sum()
    }

    /// Names of parameter tensors, in slot order.
    pub fn param_names(&self) -> Vec<String> {
        self.config
            .layers
            .iter()
            .filter(|l| l.kind.has_params())
            .map(|l| l.name.clone())
            .collect()
    }

    fn prepare_input(&self, x: ArrayView2<f32>) -> Result<Array3<f64>> {
        if x.dim() != self.config.input {
            return Err(NetworkError::InputShape {
                got: x.dim(),
                expected: self.config.input,
            });
        }
        let InputNorm { mean, std } = self.config.input_norm;
        let (h, w) = x.dim();
        let v = x.mapv(|v| (v as f64 - mean) / std);
        Ok(v.into_shape_with_order((1, h, w)).expect("contiguous"))
    }

    /// Class probabilities in eval mode.
    pub fn forward(&self, x: ArrayView2<f32>) -> Result<Array1<f64>> {
        self.forward_mode(x, Mode::Eval)
    }

    pub fn forward_mode(&self, x: ArrayView2<f32>, mut mode: Mode<'_>) -> Result<Array1<f64>> {
        let input = self.prepare_input(x)?;
        let (act, _) = self.run(Act::Map(input), &mut mode, self.config.layers.len(), false);
        Ok(act.into_vector())
    }

    /// Output shape of every layer from an actual eval-mode pass.
    pub fn layer_output_shapes(&self, x: ArrayView2<f32>) -> Result<Vec<(String, Shape)>> {
        let mut act = Act::Map(self.prepare_input(x)?);
        let mut shapes = Vec::new();
        let mut mode = Mode::Eval;
        for (i, l) in self.config.layers.iter().enumerate() {
            act = self.apply(i, act, &mut mode, false).0;
            shapes.push((l.name.clone(), act.shape()));
        }
        Ok(shapes)
    }

    /// Activation of the dense layer feeding the head (after ReLU, before
    /// dropout), always in eval mode.
    pub fn penultimate_features(&self, x: ArrayView2<f32>) -> Result<Array1<f64>> {
        let idx = self
            .config
            .penultimate_index()
            .ok_or_else(|| NetworkError::Config("model has no penultimate dense layer".into()))?;
        let input = self.prepare_input(x)?;
        let (act, _) = self.run(Act::Map(input), &mut Mode::Eval, idx + 1, false);
        Ok(act.into_vector())
    }

    fn run(&self, mut act: Act, mode: &mut Mode<'_>, upto: usize, keep: bool) -> (Act, Vec<Cache>) {
        let mut caches = Vec::with_capacity(if keep { upto } else { 0 });
        for i in 0..upto {
            let (next, cache) = self.apply(i, act, mode, keep);
            act = next;
            if keep {
                caches.push(cache);
            }
        }
        (act, caches)
    }

    fn apply(&self, i: usize, act: Act, mode: &mut Mode<'_>, keep: bool) -> (Act, Cache) {
        let layer = &self.config.layers[i];
        match &layer.kind {
            LayerKind::Conv { filters, kernel, stride } => {
                let p = &self.params[self.slots[i].unwrap()];
                let x = act.into_map();
                let in_dim = x.dim();
                let (cols, oh, ow) = im2col(&x, *kernel, *stride);
                let mut out = p.weight.dot(&cols);
                out += &p.bias.view().insert_axis(Axis(1));
                out.mapv_inplace(|v| v.max(0.0));
                let map = out
                    .clone()
                    .into_shape_with_order((*filters, oh, ow))
                    .expect("contiguous");
                let cache = if keep {
                    Cache::Conv { cols, out, in_dim }
                } else {
                    Cache::Passthrough
                };
                (Act::Map(map), cache)
            }
            LayerKind::GaussianNoise { std } => {
                let mut x = act.into_map();
                if let Mode::Train(rng) = mode {
                    if *std > 0.0 {
                        let normal = Normal::new(0.0, *std).expect("finite std");
                        x.mapv_inplace(|v| v + normal.sample(rng));
                    }
                }
                (Act::Map(x), Cache::Passthrough)
            }
            LayerKind::Lrn { radius, k, alpha, beta } => {
                let x = act.into_map();
                let scale = lrn_scale(&x, *radius, *k, *alpha);
                let y = &x * &scale.mapv(|s| s.powf(-beta));
                let cache = if keep {
                    Cache::Lrn { input: x, scale }
                } else {
                    Cache::Passthrough
                };
                (Act::Map(y), cache)
            }
            LayerKind::MaxPool { window, stride } => {
                let x = act.into_map();
                let in_dim = x.dim();
                let (y, argmax) = max_pool(&x, *window, *stride);
                let cache = if keep {
                    Cache::MaxPool { argmax, in_dim }
                } else {
                    Cache::Passthrough
                };
                (Act::Map(y), cache)
            }
            LayerKind::MeanPool { window, stride } => {
                let x = act.into_map();
                let in_dim = x.dim();
                (Act::Map(mean_pool(&x, *window, *stride)), Cache::MeanPool { in_dim })
            }
            LayerKind::Dense { relu, .. } => {
                let p = &self.params[self.slots[i].unwrap()];
                let in_shape = act.shape();
                let x = act.into_vector();
                let mut y = p.weight.dot(&x) + &p.bias;
                if *relu {
                    y.mapv_inplace(|v| v.max(0.0));
                }
                let cache = if keep {
                    Cache::Dense {
                        input: x,
                        in_shape,
                        out: y.clone(),
                    }
                } else {
                    Cache::Passthrough
                };
                (Act::Vector(y), cache)
            }
            LayerKind::Dropout { rate } => {
                let x = act.into_vector();
                match mode {
                    Mode::Train(rng) if *rate > 0.0 => {
                        let keep_p = 1.0 - rate;
                        let mask = Array1::from_shape_fn(x.len(), |_| {
                            if rng.random::<f64>() < keep_p {
                                1.0 / keep_p
                            } else {
                                0.0
                            }
                        });
                        let y = &x * &mask;
                        (Act::Vector(y), Cache::Dropout { mask: Some(mask) })
                    }
                    _ => (Act::Vector(x), Cache::Dropout { mask: None }),
                }
            }
            LayerKind::Softmax => (Act::Vector(softmax(&act.into_vector())), Cache::Passthrough),
        }
    }

    /// Cross-entropy loss for one example; adds its gradient into `grads`.
    /// Returns the loss and the predicted probabilities.
    pub fn accumulate_gradient(
        &self,
        x: ArrayView2<f32>,
        label: usize,
        mut mode: Mode<'_>,
        grads: &mut Gradients,
    ) -> Result<(f64, Array1<f64>)> {
        if label >= self.config.head_size {
            return Err(NetworkError::Label {
                label,
                head: self.config.head_size,
            });
        }
        let n = self.config.layers.len();
        let input = self.prepare_input(x)?;
        // run up to the logits; softmax and the loss are fused below
        let (logits, caches) = self.run(Act::Map(input), &mut mode, n - 1, true);
        let logits = logits.into_vector();
        let probs = softmax(&logits);
        let loss = -(probs[label].max(f64::MIN_POSITIVE)).ln();
        let mut g = probs.clone();
        g[label] -= 1.0;
        let mut grad = Act::Vector(g);
        for i in (0..n - 1).rev() {
            grad = self.backward_layer(i, &caches[i], grad, grads, i > 0);
        }
        Ok((loss, probs))
    }

    fn backward_layer(&self, i: usize, cache: &Cache, grad: Act, grads: &mut Gradients, need_input: bool) -> Act {
        let layer = &self.config.layers[i];
        match (&layer.kind, cache) {
            (LayerKind::Conv { kernel, stride, .. }, Cache::Conv { cols, out, in_dim }) => {
                let slot = self.slots[i].unwrap();
                let g = grad.into_map();
                let (f, oh, ow) = g.dim();
                let mut g = g.into_shape_with_order((f, oh * ow)).expect("contiguous");
                g.zip_mut_with(out, |gv, &o| {
                    if o <= 0.0 {
                        *gv = 0.0
                    }
                });
                let gp = &mut grads.0[slot];
                ndarray::linalg::general_mat_mul(1.0, &g, &cols.t(), 1.0, &mut gp.weight);
                gp.bias += &g.sum_axis(Axis(1));
                if need_input {
                    let dcols = self.params[slot].weight.t().dot(&g);
                    Act::Map(col2im(&dcols, *in_dim, *kernel, *stride, oh, ow))
                } else {
                    Act::Map(Array3::zeros(*in_dim))
                }
            }
            (LayerKind::GaussianNoise { .. }, _) => grad,
            (LayerKind::Lrn { radius, alpha, beta, .. }, Cache::Lrn { input, scale }) => {
                Act::Map(lrn_backward(input, scale, &grad.into_map(), *radius, *alpha, *beta))
            }
            (LayerKind::MaxPool { .. }, Cache::MaxPool { argmax, in_dim }) => {
                let g = grad.into_map();
                let mut dx = Array3::<f64>::zeros(*in_dim);
                let dxs = dx.as_slice_mut().expect("contiguous");
                for (gv, &idx) in g.iter().zip(argmax) {
                    dxs[idx] += gv;
                }
                Act::Map(dx)
            }
            (LayerKind::MeanPool { window, stride }, Cache::MeanPool { in_dim }) => {
                Act::Map(mean_pool_backward(&grad.into_map(), *in_dim, *window, *stride))
            }
            (LayerKind::Dense { relu, .. }, Cache::Dense { input, in_shape, out }) => {
                let slot = self.slots[i].unwrap();
                let mut g = grad.into_vector();
                if *relu {
                    g.zip_mut_with(out, |gv, &o| {
                        if o <= 0.0 {
                            *gv = 0.0
                        }
                    });
                }
                let gp = &mut grads.0[slot];
                ndarray::linalg::general_mat_mul(
                    1.0,
                    &g.view().insert_axis(Axis(1)),
                    &input.view().insert_axis(Axis(0)),
                    1.0,
                    &mut gp.weight,
                );
                gp.bias += &g;
                let dx = self.params[slot].weight.t().dot(&g);
                match *in_shape {
                    Shape::Map(h, w, c) => Act::Map(dx.into_shape_with_order((c, h, w)).expect("contiguous")),
                    Shape::Vector(_) => Act::Vector(dx),
                }
            }
            (LayerKind::Dropout { .. }, Cache::Dropout { mask }) => {
                let g = grad.into_vector();
                match mask {
                    Some(m) => Act::Vector(&g * m),
                    None => Act::Vector(g),
                }
            }
            _ => unreachable!("cache does not match layer {}", layer.name),
        }
    }
}

pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = logits.mapv(|v| (v - max).exp());
    let s = e.sum();
    e / s
}

/// Patch matrix of shape `(c * k * k, oh * ow)` with zero "same" padding.
fn im2col(x: &Array3<f64>, k: usize, stride: usize) -> (Array2<f64>, usize, usize) {
    let (c, h, w) = x.dim();
    let oh = out_size(h, stride);
    let ow = out_size(w, stride);
    let pt = pad_before(h, oh, k, stride) as isize;
    let pl = pad_before(w, ow, k, stride) as isize;
    let mut cols = Array2::<f64>::zeros((c * k * k, oh * ow));
    let xs = x.as_slice().expect("contiguous");
    let cs = cols.as_slice_mut().expect("contiguous");
    let p = oh * ow;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cs[row * p..(row + 1) * p];
                for o_h in 0..oh {
                    let ih = (o_h * stride) as isize + ki as isize - pt;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src = &xs[(ci * h + ih as usize) * w..(ci * h + ih as usize + 1) * w];
                    let drow = &mut dst[o_h * ow..(o_h + 1) * ow];
                    for (o_w, d) in drow.iter_mut().enumerate() {
                        let iw = (o_w * stride) as isize + kj as isize - pl;
                        if iw >= 0 && iw < w as isize {
                            *d = src[iw as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

fn col2im(
    cols: &Array2<f64>,
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Array3<f64> {
    let pt = pad_before(h, oh, k, stride) as isize;
    let pl = pad_before(w, ow, k, stride) as isize;
    let mut dx = Array3::<f64>::zeros((c, h, w));
    let ds = dx.as_slice_mut().expect("contiguous");
    let cs = cols.as_slice().expect("contiguous");
    let p = oh * ow;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cs[row * p..(row + 1) * p];
                for o_h in 0..oh {
                    let ih = (o_h * stride) as isize + ki as isize - pt;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let base = (ci * h + ih as usize) * w;
                    for o_w in 0..ow {
                        let iw = (o_w * stride) as isize + kj as isize - pl;
                        if iw >= 0 && iw < w as isize {
                            ds[base + iw as usize] += src[o_h * ow + o_w];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `k + alpha * sum_{j in [c-r, c+r]} x_j^2`, window clipped at the edges.
fn lrn_scale(x: &Array3<f64>, radius: usize, k: f64, alpha: f64) -> Array3<f64> {
    let (c, _, _) = x.dim();
    let sq = x.mapv(|v| v * v);
    let mut scale = Array3::<f64>::from_elem(x.raw_dim(), k);
    for ci in 0..c {
        let lo = ci.saturating_sub(radius);
        let hi = (ci + radius).min(c - 1);
        let mut dst = scale.index_axis_mut(Axis(0), ci);
        for j in lo..=hi {
            dst.scaled_add(alpha, &sq.index_axis(Axis(0), j));
        }
    }
    scale
}

fn lrn_backward(x: &Array3<f64>, scale: &Array3<f64>, g: &Array3<f64>, radius: usize, alpha: f64, beta: f64) -> Array3<f64> {
    let (c, _, _) = x.dim();
    let mut dx = g * &scale.mapv(|s| s.powf(-beta));
    // t_c = g_c * x_c * S_c^(-beta-1)
    let t = g * x * &scale.mapv(|s| s.powf(-beta - 1.0));
    for i in 0..c {
        let lo = i.saturating_sub(radius);
        let hi = (i + radius).min(c - 1);
        let mut acc = Array2::<f64>::zeros((x.dim().1, x.dim().2));
        for j in lo..=hi {
            acc += &t.index_axis(Axis(0), j);
        }
        let xi = x.index_axis(Axis(0), i);
        let mut dst = dx.index_axis_mut(Axis(0), i);
        dst.zip_mut_with(&(&xi * &acc), |d, &v| *d -= 2.0 * alpha * beta * v);
    }
    dx
}

/// Cross-channel local response normalization on a `(channels, h, w)` map:
/// `x_c / (k + alpha * sum_{|j-c| <= radius} x_j^2)^beta`.
pub fn local_response_norm(x: &Array3<f64>, radius: usize, k: f64, alpha: f64, beta: f64) -> Array3<f64> {
    let scale = lrn_scale(x, radius, k, alpha);
    x * &scale.mapv(|s| s.powf(-beta))
}

fn pool_bounds(o: usize, stride: usize, window: usize, pad: usize, len: usize) -> (usize, usize) {
    let start = (o * stride) as isize - pad as isize;
    let lo = start.max(0) as usize;
    let hi = ((start + window as isize) as usize).min(len);
    (lo, hi)
}

fn max_pool(x: &Array3<f64>, window: usize, stride: usize) -> (Array3<f64>, Vec<usize>) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (out_size(h, stride), out_size(w, stride));
    let (pt, pl) = (pad_before(h, oh, window, stride), pad_before(w, ow, window, stride));
    let xs = x.as_slice().expect("contiguous");
    let mut y = Array3::<f64>::zeros((c, oh, ow));
    let mut argmax = Vec::with_capacity(c * oh * ow);
    let ys = y.as_slice_mut().expect("contiguous");
    let mut n = 0;
    for ci in 0..c {
        for i in 0..oh {
            let (h0, h1) = pool_bounds(i, stride, window, pt, h);
            for j in 0..ow {
                let (w0, w1) = pool_bounds(j, stride, window, pl, w);
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for a in h0..h1 {
                    for b in w0..w1 {
                        let idx = (ci * h + a) * w + b;
                        if xs[idx] > best {
                            best = xs[idx];
                            best_idx = idx;
                        }
                    }
                }
                ys[n] = best;
                argmax.push(best_idx);
                n += 1;
            }
        }
    }
    (y, argmax)
}

/// Average over the in-bounds part of each window.
fn mean_pool(x: &Array3<f64>, window: usize, stride: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (oh, ow) = (out_size(h, stride), out_size(w, stride));
    let (pt, pl) = (pad_before(h, oh, window, stride), pad_before(w, ow, window, stride));
    Array3::from_shape_fn((c, oh, ow), |(ci, i, j)| {
        let (h0, h1) = pool_bounds(i, stride, window, pt, h);
        let (w0, w1) = pool_bounds(j, stride, window, pl, w);
        let patch = x.slice(s![ci, h0..h1, w0..w1]);
        patch.sum() / patch.len() as f64
    })
}

fn mean_pool_backward(g: &Array3<f64>, (c, h, w): (usize, usize, usize), window: usize, stride: usize) -> Array3<f64> {
    let (_, oh, ow) = g.dim();
    let (pt, pl) = (pad_before(h, oh, window, stride), pad_before(w, ow, window, stride));
    let mut dx = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..oh {
            let (h0, h1) = pool_bounds(i, stride, window, pt, h);
            for j in 0..ow {
                let (w0, w1) = pool_bounds(j, stride, window, pl, w);
                let share = g[[ci, i, j]] / ((h1 - h0) * (w1 - w0)) as f64;
                dx.slice_mut(s![ci, h0..h1, w0..w1]).mapv_inplace(|v| v + share);
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout: 8-byte magic "DLXCKPT1", u64 LE header length, UTF-8 JSON header,
// then raw little-endian f64 tensor data in header order.

const CHECKPOINT_MAGIC: &[u8; 8] = b"DLXCKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

/// Write the model atomically (temp file, then rename).
pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, metadata: serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    let io = |source| NetworkError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, p) in model.param_names().iter().zip(&model.params) {
        tensors.push(TensorEntry {
            name: format!("{name}.weight"),
            shape: p.weight.shape().to_vec(),
            offset,
        });
        offset += p.weight.len();
        tensors.push(TensorEntry {
            name: format!("{name}.bias"),
            shape: p.bias.shape().to_vec(),
            offset,
        });
        offset += p.bias.len();
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        config: model.config.clone(),
        tensors,
        metadata,
    })
    .expect("header serializes");
    let tmp = path.with_extension("tmp");
    {
        let file = std::fs::File::create(&tmp).map_err(io)?;
        let mut w = std::io::BufWriter::new(file);
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&header).map_err(io)?;
        for p in &model.params {
            for v in p.weight.iter().chain(p.bias.iter()) {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)
}

/// Load a checkpoint; returns the model and the stored metadata.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, serde_json::Value)> {
    let path = path.as_ref();
    let p = path.display().to_string();
    let bad = |message: String| NetworkError::Checkpoint {
        path: p.clone(),
        message,
    };
    let mut file = std::fs::File::open(path).map_err(|source| NetworkError::Io {
        path: p.clone(),
        source,
    })?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|source| NetworkError::Io {
        path: p.clone(),
        source,
    })?;
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = 16 + hlen;
    if bytes.len() < body {
        return Err(bad("truncated header".into()));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..body]).map_err(|e| bad(format!("bad header: {e}")))?;
    let mut model = Model::new(header.config, 0)?;
    let data = &bytes[body..];
    let read = |entry: &TensorEntry, expected: &[usize]| -> Result<Vec<f64>> {
        if entry.shape != expected {
            return Err(bad(format!("{} has shape {:?}, expected {:?}", entry.name, entry.shape, expected)));
        }
        let n: usize = expected.iter().product();
        let start = entry.offset * 8;
        let end = start + n * 8;
        if end > data.len() {
            return Err(bad(format!("{} truncated", entry.name)));
        }
        Ok(data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let names = model.param_names();
    let find = |name: &str| {
        header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| bad(format!("missing tensor {name}")))
    };
    for (name, params) in names.iter().zip(model.params.iter_mut()) {
        let w = find(&format!("{name}.weight"))?;
        let b = find(&format!("{name}.bias"))?;
        let wv = read(w, params.weight.shape())?;
        let bv = read(b, params.bias.shape())?;
        params.weight = Array2::from_shape_vec(params.weight.raw_dim(), wv).expect("checked shape");
        params.bias = Array1::from_vec(bv);
    }
    Ok((model, header.metadata))
}
