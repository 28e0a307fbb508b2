//! The Epoch and NVIDIA steering networks, in 3-way classification and
//! scalar regression variants, at any supported input resolution.

mod weights;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Direction;
use crate::error::{Error, Result};
use crate::tensor::{conv_output_dim, Graph, Mode, NodeId, Padding, Real, Tensor};

pub use weights::{load_weights, save_weights, weight_checksum};

/// Batch-norm running-statistics momentum.
pub const BATCH_NORM_MOMENTUM: f64 = 0.99;
pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Number of direction classes.
pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Epoch,
    Nvidia,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Epoch => "epoch",
            Architecture::Nvidia => "nvidia",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "epoch" => Some(Architecture::Epoch),
            "nvidia" => Some(Architecture::Nvidia),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Three logits followed by softmax.
    Classification,
    /// A single linear output unit.
    Regression,
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::Classification => "classification",
            Head::Regression => "regression",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "classification" | "classify" => Some(Head::Classification),
            "regression" | "regress" => Some(Head::Regression),
            _ => None,
        }
    }

    pub fn outputs(self) -> usize {
        match self {
            Head::Classification => NUM_CLASSES,
            Head::Regression => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    BatchNorm,
    /// Convolution with a per-filter bias; activation is a separate layer.
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    Relu,
    MaxPool,
    Dropout {
        fraction: f64,
    },
    Flatten,
    Dense {
        units: usize,
    },
    Softmax,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::BatchNorm => "batchnorm",
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool => "maxpool",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Softmax => "softmax",
        }
    }

    fn param_names(&self) -> &'static [&'static str] {
        match self {
            LayerSpec::BatchNorm => &["gamma", "beta"],
            LayerSpec::Conv { .. } => &["filters", "bias"],
            LayerSpec::Dense { .. } => &["weights", "bias"],
            _ => &[],
        }
    }

    fn state_names(&self) -> &'static [&'static str] {
        match self {
            LayerSpec::BatchNorm => &["running_mean", "running_var"],
            _ => &[],
        }
    }
}

/// A layer instantiated at a concrete input shape (per example, no batch axis).
#[derive(Debug, Clone)]
pub struct Layer<T: Real> {
    pub spec: LayerSpec,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    /// Trainable tensors, see [`LayerSpec`] for their order.
    pub params: Vec<Tensor<T>>,
    /// Non-trainable state (batch-norm running statistics).
    pub state: Vec<Tensor<T>>,
}

/// Graph nodes produced by [`Model::record`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `N×3` logits or `N×1` regression outputs.
    pub logits: NodeId,
    /// Probabilities for classification, identical to `logits` for regression.
    pub output: NodeId,
    /// Parameter leaves per layer, in [`Layer::params`] order.
    pub params: Vec<Vec<NodeId>>,
    /// `(layer index, node)` of every batch-norm layer.
    pub batch_norms: Vec<(usize, NodeId)>,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub dropout_seed: u64,
    /// Register parameters as differentiable leaves.
    pub param_grads: bool,
}

impl ForwardOptions {
    pub fn infer() -> Self {
        Self {
            mode: Mode::Infer,
            dropout_seed: 0,
            param_grads: false,
        }
    }

    pub fn train(dropout_seed: u64) -> Self {
        Self {
            mode: Mode::Train,
            dropout_seed,
            param_grads: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Real = f32> {
    architecture: Architecture,
    head: Head,
    resolution: (usize, usize),
    layers: Vec<Layer<T>>,
}

fn epoch_specs(head: Head) -> Vec<LayerSpec> {
    use LayerSpec::*;
    let conv = |filters| Conv {
        filters,
        kernel: 3,
        stride: 1,
        padding: Padding::Same,
    };
    let mut specs = vec![
        conv(32),
        Relu,
        MaxPool,
        Dropout { fraction: 0.25 },
        conv(64),
        Relu,
        MaxPool,
        Dropout { fraction: 0.25 },
        conv(128),
        Relu,
        MaxPool,
        Dropout { fraction: 0.5 },
        Flatten,
        Dense { units: 1024 },
        Relu,
        Dropout { fraction: 0.5 },
        Dense {
            units: head.outputs(),
        },
    ];
    if head == Head::Classification {
        specs.push(Softmax);
    }
    specs
}

fn nvidia_specs(head: Head) -> Vec<LayerSpec> {
    use LayerSpec::*;
    let conv = |filters, kernel, stride| Conv {
        filters,
        kernel,
        stride,
        padding: Padding::Valid,
    };
    let mut specs = vec![BatchNorm];
    for (filters, kernel, stride) in [(24, 5, 2), (36, 5, 2), (48, 5, 2), (64, 3, 1), (64, 3, 1)] {
        specs.push(conv(filters, kernel, stride));
        specs.push(Relu);
    }
    specs.push(Flatten);
    for units in [582, 100, 50, 10] {
        specs.push(Dense { units });
        specs.push(Relu);
    }
    specs.push(Dense {
        units: head.outputs(),
    });
    if head == Head::Classification {
        specs.push(Softmax);
    }
    specs
}

/// Mixes a layer index into a dropout seed.
fn layer_seed(seed: u64, layer: usize) -> u64 {
    let mut z = seed ^ (layer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl<T: Real> Model<T> {
    /// Epoch network: three 3×3 same-padded conv/pool/dropout blocks, a
    /// 1024-unit dense layer and the head. Resolution must be divisible by 8.
    pub fn epoch(head: Head, height: usize, width: usize, seed: u64) -> Result<Self> {
        if height == 0 || width == 0 || !height.is_multiple_of(8) || !width.is_multiple_of(8) {
            return Err(Error::invalid(
                "build_epoch",
                format!("resolution {height}x{width} must be a positive multiple of 8"),
            ));
        }
        Self::from_specs(Architecture::Epoch, head, (height, width), epoch_specs(head), seed)
    }

    /// NVIDIA network: input batch-norm, five valid convolutions (strides
    /// 2,2,2,1,1), dense 582/100/50/10 and the head.
    pub fn nvidia(head: Head, height: usize, width: usize, seed: u64) -> Result<Self> {
        Self::from_specs(Architecture::Nvidia, head, (height, width), nvidia_specs(head), seed)
            .map_err(|e| match e {
                Error::InvalidArgument { message, .. } => Error::invalid(
                    "build_nvidia",
                    format!("resolution {height}x{width} too small: {message}"),
                ),
                other => other,
            })
    }

    pub fn build(architecture: Architecture, head: Head, height: usize, width: usize, seed: u64) -> Result<Self> {
        match architecture {
            Architecture::Epoch => Self::epoch(head, height, width, seed),
            Architecture::Nvidia => Self::nvidia(head, height, width, seed),
        }
    }

    fn from_specs(
        architecture: Architecture,
        head: Head,
        resolution: (usize, usize),
        specs: Vec<LayerSpec>,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = vec![resolution.0, resolution.1, 3];
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let input_shape = shape.clone();
            let (output_shape, params, state) = match spec {
                LayerSpec::BatchNorm => {
                    let c = shape[shape.len() - 1];
                    (
                        shape.clone(),
                        vec![Tensor::full(&[c], T::one()), Tensor::zeros(&[c])],
                        vec![Tensor::zeros(&[c]), Tensor::full(&[c], T::one())],
                    )
                }
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    let [h, w, c] = shape[..] else {
                        return Err(Error::invalid("model", format!("conv after flatten in {:?}", architecture)));
                    };
                    let (oh, ow) = match (
                        conv_output_dim(h, kernel, stride, padding),
                        conv_output_dim(w, kernel, stride, padding),
                    ) {
                        (Some(oh), Some(ow)) => (oh, ow),
                        _ => {
                            return Err(Error::invalid(
                                "model",
                                format!("{kernel}x{kernel} conv does not fit a {h}x{w} map"),
                            ))
                        }
                    };
                    let fan_in = kernel * kernel * c;
                    (
                        vec![oh, ow, filters],
                        vec![
                            glorot_uniform(&mut rng, &[kernel, kernel, c, filters], fan_in, kernel * kernel * filters),
                            Tensor::zeros(&[filters]),
                        ],
                        vec![],
                    )
                }
                LayerSpec::MaxPool => {
                    let [h, w, c] = shape[..] else {
                        return Err(Error::invalid("model", "maxpool after flatten"));
                    };
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::invalid("model", format!("odd {h}x{w} map before 2x2 pooling")));
                    }
                    (vec![h / 2, w / 2, c], vec![], vec![])
                }
                LayerSpec::Flatten => (vec![shape.iter().product()], vec![], vec![]),
                LayerSpec::Dense { units } => {
                    let n = shape.iter().product();
                    (
                        vec![units],
                        vec![glorot_uniform(&mut rng, &[n, units], n, units), Tensor::zeros(&[units])],
                        vec![],
                    )
                }
                LayerSpec::Relu | LayerSpec::Dropout { .. } | LayerSpec::Softmax => (shape.clone(), vec![], vec![]),
            };
            shape = output_shape.clone();
            layers.push(Layer {
                spec,
                input_shape,
                output_shape,
                params,
                state,
            });
        }
        Ok(Self {
            architecture,
            head,
            resolution,
            layers,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    /// Per-example input shape `H×W×3`.
    pub fn input_shape(&self) -> [usize; 3] {
        [self.resolution.0, self.resolution.1, 3]
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    /// Trainable parameter count.
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params.iter())
            .map(Tensor::len)
            .sum()
    }

    /// Width of the first dense layer's input.
    pub fn flatten_width(&self) -> usize {
        self.layers
            .iter()
            .find(|l| l.spec == LayerSpec::Flatten)
            .map(|l| l.output_shape[0])
            .unwrap_or(0)
    }

    /// Converts every tensor to another element type.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            architecture: self.architecture,
            head: self.head,
            resolution: self.resolution,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec,
                    input_shape: l.input_shape.clone(),
                    output_shape: l.output_shape.clone(),
                    params: l.params.iter().map(Tensor::cast).collect(),
                    state: l.state.iter().map(Tensor::cast).collect(),
                })
                .collect(),
        }
    }

    /// `(name, tensor)` pairs of every parameter and state tensor, in file order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.spec.param_names().iter().zip(&layer.params) {
                out.push((format!("{i:02}.{}.{name}", layer.spec.kind()), t));
            }
            for (name, t) in layer.spec.state_names().iter().zip(&layer.state) {
                out.push((format!("{i:02}.{}.{name}", layer.spec.kind()), t));
            }
        }
        out
    }

    fn named_tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let (idx, rest) = name.split_once('.')?;
        let idx: usize = idx.parse().ok()?;
        let (kind, pname) = rest.split_once('.')?;
        let layer = self.layers.get_mut(idx)?;
        if layer.spec.kind() != kind {
            return None;
        }
        if let Some(p) = layer.spec.param_names().iter().position(|n| *n == pname) {
            return layer.params.get_mut(p);
        }
        let s = layer.spec.state_names().iter().position(|n| *n == pname)?;
        layer.state.get_mut(s)
    }

    /// Records the network on `graph`. `input` is `N×H×W×3` (or a single `H×W×3` image).
    pub fn record(&self, graph: &mut Graph<T>, input: NodeId, options: ForwardOptions) -> Result<ForwardPass> {
        let shape = graph.try_value(input)?.shape().to_vec();
        let expected = self.input_shape();
        let mut x = match shape.as_slice() {
            [h, w, c] if [*h, *w, *c] == expected => graph.reshape(input, &[1, *h, *w, *c])?,
            [_, h, w, c] if [*h, *w, *c] == expected => input,
            _ => return Err(Error::shape("model input", &shape, &expected)),
        };
        let mut params = Vec::with_capacity(self.layers.len());
        let mut batch_norms = Vec::new();
        let mut logits = None;
        let eps = T::from_f64_lossy(BATCH_NORM_EPS);
        for (i, layer) in self.layers.iter().enumerate() {
            let ids: Vec<NodeId> = layer
                .params
                .iter()
                .map(|p| {
                    if options.param_grads {
                        graph.variable(p.clone())
                    } else {
                        graph.constant(p.clone())
                    }
                })
                .collect();
            x = match layer.spec {
                LayerSpec::BatchNorm => {
                    let y = graph.batch_norm(x, ids[0], ids[1], &layer.state[0], &layer.state[1], options.mode, eps)?;
                    batch_norms.push((i, y));
                    y
                }
                LayerSpec::Conv { stride, padding, .. } => {
                    let y = graph.conv2d(x, ids[0], stride, padding)?;
                    graph.bias_add(y, ids[1])?
                }
                LayerSpec::Relu => graph.relu(x)?,
                LayerSpec::MaxPool => graph.maxpool2x2(x)?,
                LayerSpec::Dropout { fraction } => {
                    graph.dropout(x, fraction, options.mode, layer_seed(options.dropout_seed, i))?
                }
                LayerSpec::Flatten => graph.flatten(x)?,
                LayerSpec::Dense { .. } => graph.dense(x, ids[0], ids[1])?,
                LayerSpec::Softmax => {
                    logits = Some(x);
                    graph.softmax(x)?
                }
            };
            params.push(ids);
        }
        Ok(ForwardPass {
            logits: logits.unwrap_or(x),
            output: x,
            params,
            batch_norms,
        })
    }

    fn check_pixels(&self, images: &Tensor<T>) -> Result<()> {
        if let Some(bad) = images
            .data()
            .iter()
            .find(|v| !(**v >= T::zero() && **v <= T::one()))
        {
            return Err(Error::invalid("model input", format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(())
    }

    /// Infer-mode pre-softmax outputs for a batch `N×H×W×3`; returns `N×K`.
    pub fn logits_batch(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_pixels(images)?;
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let pass = self.record(&mut g, x, ForwardOptions::infer())?;
        Ok(g.value(pass.logits).clone())
    }

    /// Infer-mode logits (classification) or the scalar prediction
    /// (regression) of one `H×W×3` image.
    pub fn logits(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        if image.shape() != self.input_shape() {
            return Err(Error::shape("logits", image.shape(), &self.input_shape()));
        }
        let z = self.logits_batch(image)?;
        z.reshape(&[self.head.outputs()])
    }

    /// Softmax of [`Model::logits`].
    pub fn probabilities(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.require_head(Head::Classification, "probabilities")?;
        let mut z = self.logits(image)?;
        crate::tensor::softmax_in_place(z.data_mut());
        Ok(z)
    }

    /// Most probable direction; ties go to the lowest class index.
    pub fn predict_direction(&self, image: &Tensor<T>) -> Result<(Direction, [T; NUM_CLASSES])> {
        let p = self.probabilities(image)?;
        let probs = [p.data()[0], p.data()[1], p.data()[2]];
        Ok((Direction::from_index(argmax(&probs)), probs))
    }

    /// Regression output for one image.
    pub fn predict_value(&self, image: &Tensor<T>) -> Result<T> {
        self.require_head(Head::Regression, "predict_value")?;
        Ok(self.logits(image)?.item())
    }

    pub(crate) fn require_head(&self, head: Head, op: &'static str) -> Result<()> {
        if self.head != head {
            return Err(Error::invalid(
                op,
                format!("requires a {} model, got {}", head.name(), self.head.name()),
            ));
        }
        Ok(())
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn glorot_uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-limit..limit)))
}
