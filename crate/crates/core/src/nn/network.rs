use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, ImageShape, LayerCache, LayerSpec};
use super::{NnError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Three fully connected layers.
    Mlp3,
    /// Two convolutions followed by two fully connected layers.
    Cnn2,
    /// Three convolutions, one max pool, three fully connected layers.
    Lenet,
    Custom,
}

impl Architecture {
    pub fn is_convolutional(self) -> bool {
        matches!(self, Architecture::Cnn2 | Architecture::Lenet)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Mlp3 => "mlp3",
            Architecture::Cnn2 => "cnn2",
            Architecture::Lenet => "lenet",
            Architecture::Custom => "custom",
        })
    }
}

impl FromStr for Architecture {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mlp3" | "mlp" => Ok(Architecture::Mlp3),
            "cnn2" | "cnn" => Ok(Architecture::Cnn2),
            "lenet" => Ok(Architecture::Lenet),
            "custom" => Ok(Architecture::Custom),
            other => Err(NnError::InvalidSpec(format!("unknown architecture `{other}`"))),
        }
    }
}

/// Shape of one party's input rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputShape {
    Flat(usize),
    Image(ImageShape),
}

impl InputShape {
    pub fn width(&self) -> usize {
        match self {
            InputShape::Flat(w) => *w,
            InputShape::Image(s) => s.len(),
        }
    }

    /// Best image reading of a flat feature slice. Slices made of whole
    /// image rows keep the row width; anything else is folded into the most
    /// square `h x w` factorization with `h <= w`.
    pub fn image_for(width: usize, row_width: Option<usize>) -> ImageShape {
        if let Some(rw) = row_width {
            if rw > 0 && width % rw == 0 && width >= rw {
                return ImageShape::new(1, width / rw, rw);
            }
        }
        let mut h = (width as f64).sqrt() as usize;
        while h > 1 && width % h != 0 {
            h -= 1;
        }
        let h = h.max(1);
        ImageShape::new(1, h, width / h)
    }
}

/// Architecture-independent description of one layer, resolved against the
/// running activation shape by [`NetworkSpec::from_descriptors`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerDescriptor {
    Dense { outputs: usize },
    Conv { out_channels: usize, kernel: (usize, usize), stride: usize },
    MaxPool { window: (usize, usize) },
    Relu,
}

impl FromStr for LayerDescriptor {
    type Err = NnError;

    /// `dense:OUT`, `conv:CH:KH:KW[:STRIDE]`, `pool[:H:W]`, `relu`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || NnError::InvalidSpec(format!("bad layer descriptor `{s}`"));
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |i: usize| -> Result<usize, NnError> {
            parts
                .get(i)
                .and_then(|p| p.parse::<usize>().ok())
                .filter(|v| *v > 0)
                .ok_or_else(bad)
        };
        match parts[0].to_ascii_lowercase().as_str() {
            "dense" if parts.len() == 2 => Ok(LayerDescriptor::Dense { outputs: num(1)? }),
            "conv" if parts.len() == 4 || parts.len() == 5 => Ok(LayerDescriptor::Conv {
                out_channels: num(1)?,
                kernel: (num(2)?, num(3)?),
                stride: if parts.len() == 5 { num(4)? } else { 1 },
            }),
            "pool" if parts.len() == 1 => Ok(LayerDescriptor::MaxPool { window: (2, 2) }),
            "pool" if parts.len() == 3 => Ok(LayerDescriptor::MaxPool {
                window: (num(1)?, num(2)?),
            }),
            "relu" if parts.len() == 1 => Ok(LayerDescriptor::Relu),
            _ => Err(bad()),
        }
    }
}

/// Layer list of one party's model together with the point that separates
/// the embedding network (`layers[..split_index]`) from the decision network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub architecture: Architecture,
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
    pub split_index: usize,
    pub embedding_dim: usize,
    pub classes: usize,
}

const MLP_HIDDEN: usize = 128;
const LENET_HIDDEN: usize = 120;

impl NetworkSpec {
    /// Builds one of the stock architectures for the given input. Convolution
    /// kernels shrink where the input is too small for the preferred 3x3.
    pub fn build(
        architecture: Architecture,
        input: InputShape,
        embedding_dim: usize,
        classes: usize,
    ) -> Result<Self, NnError> {
        use LayerDescriptor::*;
        let (descriptors, split) = match architecture {
            Architecture::Mlp3 => {
                let d = vec![
                    Dense { outputs: MLP_HIDDEN },
                    Relu,
                    Dense {
                        outputs: embedding_dim,
                    },
                    Relu,
                    Dense { outputs: classes },
                ];
                (d, 4)
            }
            Architecture::Cnn2 => {
                let image = image_of(input);
                let k = fit_kernels(image, &[Stage::Conv(3), Stage::Conv(3)]);
                let d = vec![
                    conv(8, k[0]),
                    Relu,
                    conv(16, k[1]),
                    Relu,
                    Dense {
                        outputs: embedding_dim,
                    },
                    Relu,
                    Dense { outputs: classes },
                ];
                (d, 6)
            }
            Architecture::Lenet => {
                let image = image_of(input);
                let k = fit_kernels(
                    image,
                    &[Stage::Conv(3), Stage::Conv(3), Stage::Pool, Stage::Conv(3)],
                );
                let d = vec![
                    conv(6, k[0]),
                    Relu,
                    conv(12, k[1]),
                    Relu,
                    MaxPool { window: k[2] },
                    conv(16, k[3]),
                    Relu,
                    Dense {
                        outputs: LENET_HIDDEN,
                    },
                    Relu,
                    Dense {
                        outputs: embedding_dim,
                    },
                    Relu,
                    Dense { outputs: classes },
                ];
                (d, 11)
            }
            Architecture::Custom => {
                return Err(NnError::InvalidSpec(
                    "custom networks are built with from_descriptors".into(),
                ))
            }
        };
        let input = if architecture.is_convolutional() {
            InputShape::Image(image_of(input))
        } else {
            InputShape::Flat(input.width())
        };
        let mut spec = Self::from_descriptors(input, &descriptors, split, embedding_dim, classes)?;
        spec.architecture = architecture;
        Ok(spec)
    }

    pub fn from_descriptors(
        input: InputShape,
        descriptors: &[LayerDescriptor],
        split_index: usize,
        embedding_dim: usize,
        classes: usize,
    ) -> Result<Self, NnError> {
        let mut current = input;
        let mut layers = Vec::with_capacity(descriptors.len());
        for (i, d) in descriptors.iter().enumerate() {
            let layer = match d {
                LayerDescriptor::Dense { outputs } => LayerSpec::Dense {
                    inputs: current.width(),
                    outputs: *outputs,
                },
                LayerDescriptor::Relu => LayerSpec::Relu {
                    width: current.width(),
                },
                LayerDescriptor::Conv {
                    out_channels,
                    kernel,
                    stride,
                } => {
                    let InputShape::Image(img) = current else {
                        return Err(NnError::InvalidSpec(format!(
                            "layer {i}: convolution needs an image-shaped input"
                        )));
                    };
                    if kernel.0 > img.height || kernel.1 > img.width || *stride == 0 {
                        return Err(NnError::InvalidSpec(format!(
                            "layer {i}: kernel {kernel:?} does not fit {}x{}",
                            img.height, img.width
                        )));
                    }
                    LayerSpec::Conv2d {
                        input: img,
                        out_channels: *out_channels,
                        kernel: *kernel,
                        stride: *stride,
                    }
                }
                LayerDescriptor::MaxPool { window } => {
                    let InputShape::Image(img) = current else {
                        return Err(NnError::InvalidSpec(format!(
                            "layer {i}: pooling needs an image-shaped input"
                        )));
                    };
                    if window.0 > img.height || window.1 > img.width || window.0 * window.1 == 0 {
                        return Err(NnError::InvalidSpec(format!(
                            "layer {i}: pool window {window:?} does not fit {}x{}",
                            img.height, img.width
                        )));
                    }
                    LayerSpec::MaxPool2d {
                        input: img,
                        window: *window,
                    }
                }
            };
            current = match (&layer, current) {
                (LayerSpec::Relu { .. }, keep) => keep,
                (l, _) => match l.output_image() {
                    Some(img) => InputShape::Image(img),
                    None => InputShape::Flat(l.output_width()),
                },
            };
            layers.push(layer);
        }
        let spec = Self {
            architecture: Architecture::Custom,
            input,
            layers,
            split_index,
            embedding_dim,
            classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.layers.is_empty() {
            return Err(NnError::InvalidSpec("network has no layers".into()));
        }
        if self.split_index == 0 || self.split_index >= self.layers.len() {
            return Err(NnError::InvalidSpec(format!(
                "split index {} outside 1..{}",
                self.split_index,
                self.layers.len()
            )));
        }
        if self.layers[0].input_width() != self.input.width() {
            return Err(NnError::InvalidSpec("first layer does not match input width".into()));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].output_width() != pair[1].input_width() {
                return Err(NnError::InvalidSpec(format!(
                    "layer {} emits {} values but layer {} expects {}",
                    i,
                    pair[0].output_width(),
                    i + 1,
                    pair[1].input_width()
                )));
            }
        }
        let emb_out = self.layers[self.split_index - 1].output_width();
        if emb_out != self.embedding_dim {
            return Err(NnError::InvalidSpec(format!(
                "embedding network emits {emb_out} values, embedding_dim is {}",
                self.embedding_dim
            )));
        }
        let out = self.layers.last().map_or(0, LayerSpec::output_width);
        if out != self.classes {
            return Err(NnError::InvalidSpec(format!(
                "network emits {out} logits for {} classes",
                self.classes
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.input.width()
    }

    pub fn embedding_layers(&self) -> Range<usize> {
        0..self.split_index
    }

    pub fn decision_layers(&self) -> Range<usize> {
        self.split_index..self.layers.len()
    }

    /// Index of the first parameter tensor owned by each layer, plus the
    /// total as a final entry.
    fn param_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.layers.len() + 1);
        let mut at = 0;
        for l in &self.layers {
            offsets.push(at);
            at += l.param_shapes().len();
        }
        offsets.push(at);
        offsets
    }

    /// Parameter tensor indices belonging to a layer range.
    pub fn param_range(&self, layers: Range<usize>) -> Range<usize> {
        let offsets = self.param_offsets();
        offsets[layers.start]..offsets[layers.end]
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// True when the decision network is a single dense layer, i.e. the loss
    /// is convex in decision parameters for fixed embeddings.
    pub fn has_linear_decision(&self) -> bool {
        let d = &self.layers[self.split_index..];
        d.len() == 1 && matches!(d[0], LayerSpec::Dense { .. })
    }
}

fn conv(out_channels: usize, kernel: (usize, usize)) -> LayerDescriptor {
    LayerDescriptor::Conv {
        out_channels,
        kernel,
        stride: 1,
    }
}

fn image_of(input: InputShape) -> ImageShape {
    match input {
        InputShape::Image(s) => s,
        InputShape::Flat(w) => InputShape::image_for(w, None),
    }
}

#[derive(Clone, Copy)]
enum Stage {
    Conv(usize),
    Pool,
}

/// Picks per-stage (height, width) sizes so that every stage fits the
/// shrinking image, preferring the largest kernels for early stages.
fn fit_kernels(image: ImageShape, stages: &[Stage]) -> Vec<(usize, usize)> {
    let hs = fit_axis(image.height, stages).expect("size-1 kernels always fit");
    let ws = fit_axis(image.width, stages).expect("size-1 kernels always fit");
    hs.into_iter().zip(ws).collect()
}

fn fit_axis(n: usize, stages: &[Stage]) -> Option<Vec<usize>> {
    let Some((first, rest)) = stages.split_first() else {
        return (n >= 1).then(Vec::new);
    };
    let candidates: Vec<(usize, usize)> = match *first {
        Stage::Conv(pref) => (1..=pref.min(n)).rev().map(|k| (k, n - k + 1)).collect(),
        Stage::Pool => [2, 1]
            .into_iter()
            .filter(|w| n >= *w)
            .map(|w| (w, n / w))
            .collect(),
    };
    candidates.into_iter().find_map(|(size, next)| {
        fit_axis(next, rest).map(|mut tail| {
            tail.insert(0, size);
            tail
        })
    })
}

/// Ordered parameter tensors of one network (weight then bias per layer).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    pub params: Vec<Tensor>,
    /// Bumped on every update so stale forward traces can be detected.
    #[serde(default)]
    pub version: u64,
}

impl NetworkState {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Self {
        let mut params = Vec::new();
        for layer in &spec.layers {
            let shapes = layer.param_shapes();
            if shapes.is_empty() {
                continue;
            }
            let (fan_in, fan_out) = layer.fans().expect("parametrised layer has fans");
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut w = Tensor::zeros(shapes[0].clone());
            w.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-bound..=bound));
            params.push(w);
            params.push(Tensor::zeros(shapes[1].clone()));
        }
        Self { params, version: 0 }
    }

    pub fn zeros(spec: &NetworkSpec) -> Self {
        let params = spec
            .layers
            .iter()
            .flat_map(LayerSpec::param_shapes)
            .map(Tensor::zeros)
            .collect();
        Self { params, version: 0 }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.params.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn mark_updated(&mut self) {
        self.version += 1;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Embedding,
    Decision,
    Full,
}

/// Per-layer caches from a forward pass over `layers`.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    part: Part,
    layers: Range<usize>,
    version: u64,
    batch: usize,
    caches: Vec<LayerCache>,
}

impl ForwardTrace {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn part(&self) -> Part {
        self.part
    }

    pub fn len(&self) -> usize {
        self.caches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.caches.is_empty()
    }
}

fn check_input(spec: &NetworkSpec, layers: &Range<usize>, input: &Tensor, context: &'static str) -> Result<(), NnError> {
    let expected = spec.layers[layers.start].input_width();
    if input.shape().len() < 2 || input.row_width() != expected {
        return Err(NnError::ShapeMismatch {
            context,
            expected,
            actual: input.row_width(),
        });
    }
    Ok(())
}

fn forward_range(
    state: &NetworkState,
    spec: &NetworkSpec,
    layers: Range<usize>,
    part: Part,
    input: &Tensor,
    context: &'static str,
) -> Result<(Tensor, ForwardTrace), NnError> {
    check_input(spec, &layers, input, context)?;
    let offsets = spec.param_offsets();
    let mut x = input.clone().into_matrix();
    let mut caches = Vec::with_capacity(layers.len());
    for i in layers.clone() {
        let params = &state.params[offsets[i]..offsets[i + 1]];
        let (y, cache) = layers::forward(&spec.layers[i], params, &x);
        caches.push(cache);
        x = y;
    }
    if !x.is_finite() {
        return Err(NnError::NonFinite(context));
    }
    Ok((
        x,
        ForwardTrace {
            part,
            layers,
            version: state.version,
            batch: input.rows(),
            caches,
        },
    ))
}

fn backward_range(
    state: &NetworkState,
    spec: &NetworkSpec,
    trace: &ForwardTrace,
    expected: Part,
    grad_out: &Tensor,
) -> Result<(Vec<Tensor>, Tensor), NnError> {
    if trace.part != expected || trace.version != state.version {
        return Err(NnError::StaleTrace);
    }
    let out_width = spec.layers[trace.layers.end - 1].output_width();
    if grad_out.rows() != trace.batch || grad_out.row_width() != out_width {
        return Err(NnError::ShapeMismatch {
            context: "upstream gradient",
            expected: trace.batch * out_width,
            actual: grad_out.len(),
        });
    }
    let offsets = spec.param_offsets();
    let mut grads: Vec<Tensor> = Vec::new();
    let mut g = grad_out.clone().into_matrix();
    for (i, cache) in trace.layers.clone().zip(&trace.caches).rev() {
        let params = &state.params[offsets[i]..offsets[i + 1]];
        let (mut pg, gx) = layers::backward(&spec.layers[i], params, cache, &g);
        pg.extend(grads);
        grads = pg;
        g = gx;
    }
    Ok((grads, g))
}

/// Runs the embedding network `h` on a batch of this party's features.
pub fn forward_embedding(
    state: &NetworkState,
    spec: &NetworkSpec,
    batch: &Tensor,
) -> Result<(Tensor, ForwardTrace), NnError> {
    forward_range(
        state,
        spec,
        spec.embedding_layers(),
        Part::Embedding,
        batch,
        "embedding input",
    )
}

/// Runs the decision network `p` on a (global) embedding batch.
pub fn forward_decision(
    state: &NetworkState,
    spec: &NetworkSpec,
    embedding: &Tensor,
) -> Result<(Tensor, ForwardTrace), NnError> {
    forward_range(
        state,
        spec,
        spec.decision_layers(),
        Part::Decision,
        embedding,
        "decision input",
    )
}

/// Unsplit forward pass through both networks.
pub fn forward_full(
    state: &NetworkState,
    spec: &NetworkSpec,
    batch: &Tensor,
) -> Result<(Tensor, ForwardTrace), NnError> {
    forward_range(state, spec, 0..spec.layers.len(), Part::Full, batch, "network input")
}

/// Gradients of the decision parameters and of the embedding it consumed.
pub fn backward_decision(
    state: &NetworkState,
    spec: &NetworkSpec,
    trace: &ForwardTrace,
    grad_logits: &Tensor,
) -> Result<(Vec<Tensor>, Tensor), NnError> {
    backward_range(state, spec, trace, Part::Decision, grad_logits)
}

/// Gradients of the embedding parameters for the given upstream gradient.
pub fn backward_embedding(
    state: &NetworkState,
    spec: &NetworkSpec,
    trace: &ForwardTrace,
    grad_embedding: &Tensor,
) -> Result<Vec<Tensor>, NnError> {
    backward_range(state, spec, trace, Part::Embedding, grad_embedding).map(|(g, _)| g)
}

/// Gradients of all parameters of an unsplit pass.
pub fn backward_full(
    state: &NetworkState,
    spec: &NetworkSpec,
    trace: &ForwardTrace,
    grad_logits: &Tensor,
) -> Result<Vec<Tensor>, NnError> {
    backward_range(state, spec, trace, Part::Full, grad_logits).map(|(g, _)| g)
}

/// Row-wise argmax, lowest index on ties.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
