//! Parameterized neural layers and the declarative network builder.
//!
//! A network is a list of [`LayerSpec`]s validated into a [`Network`] whose
//! output shape is derivable from the spec alone. Parameters live in a
//! [`ParameterStore`] keyed by `"{network}/{layer}/{tensor}"` names; a forward
//! pass binds them into a graph as leaves, so the same store can be bound as
//! trainable in one subgraph and as frozen constants in another.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::rng::SeedRng;
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LayerError {
    #[error("{network}: layer {index} ({kind}) cannot follow shape {shape:?}")]
    Incompatible {
        network: String,
        index: usize,
        kind: &'static str,
        shape: Vec<usize>,
    },
    #[error("{network}: layer {index} invalid: {msg}")]
    InvalidSpec {
        network: String,
        index: usize,
        msg: String,
    },
    #[error("batch normalization in train mode needs batch size >= 2, got {0}")]
    BatchTooSmall(usize),
    #[error("missing parameter {0}")]
    MissingParameter(String),
    #[error("missing injection input for concat layer")]
    MissingInjection,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LayerError>;

/// Forward-pass phase: training uses batch statistics and updates running
/// statistics; evaluation is a pure function of the inputs and running stats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Dense { units: usize },
    ConvDown { channels: usize, kernel: usize, stride: usize },
    ConvUp { channels: usize, kernel: usize, stride: usize },
    BatchNorm,
    Relu,
    Tanh,
    Sigmoid,
    /// [N,C,H,W] -> [N, C*H*W]
    Flatten,
    /// [N, C*H*W] -> [N,C,H,W]
    Unflatten { channels: usize, height: usize, width: usize },
    /// Widen a rank-2 feature by concatenating an externally supplied
    /// rank-2 tensor of the given column count (conditional inputs).
    ConcatExtra { width: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub has_bnorm: bool,
}

impl LayerSpec {
    pub fn dense(units: usize) -> Self {
        LayerSpec { kind: LayerKind::Dense { units }, has_bnorm: false }
    }
    pub fn conv_down(channels: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec { kind: LayerKind::ConvDown { channels, kernel, stride }, has_bnorm: false }
    }
    pub fn conv_up(channels: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec { kind: LayerKind::ConvUp { channels, kernel, stride }, has_bnorm: false }
    }
    pub fn batch_norm() -> Self {
        LayerSpec { kind: LayerKind::BatchNorm, has_bnorm: false }
    }
    pub fn relu() -> Self {
        LayerSpec { kind: LayerKind::Relu, has_bnorm: false }
    }
    pub fn tanh() -> Self {
        LayerSpec { kind: LayerKind::Tanh, has_bnorm: false }
    }
    pub fn sigmoid() -> Self {
        LayerSpec { kind: LayerKind::Sigmoid, has_bnorm: false }
    }
    pub fn flatten() -> Self {
        LayerSpec { kind: LayerKind::Flatten, has_bnorm: false }
    }
    pub fn unflatten(channels: usize, height: usize, width: usize) -> Self {
        LayerSpec { kind: LayerKind::Unflatten { channels, height, width }, has_bnorm: false }
    }
    pub fn concat_extra(width: usize) -> Self {
        LayerSpec { kind: LayerKind::ConcatExtra { width }, has_bnorm: false }
    }

    /// Follow this layer with batch normalization.
    pub fn with_bnorm(mut self) -> Self {
        self.has_bnorm = true;
        self
    }

    fn kind_name(&self) -> &'static str {
        match self.kind {
            LayerKind::Dense { .. } => "dense",
            LayerKind::ConvDown { .. } => "conv_down",
            LayerKind::ConvUp { .. } => "conv_up",
            LayerKind::BatchNorm => "batch_norm",
            LayerKind::Relu => "relu",
            LayerKind::Tanh => "tanh",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::Flatten => "flatten",
            LayerKind::Unflatten { .. } => "unflatten",
            LayerKind::ConcatExtra { .. } => "concat",
        }
    }
}

/// Declarative network description: per-sample input shape plus layers.
#[derive(Debug, Clone)]
pub struct NetworkSpec {
    pub name: String,
    /// Shape without the batch axis: `[d]` or `[C,H,W]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

/// Weight initialization: zero-mean Gaussian for dense/conv weights, zeros
/// for biases, ones/zeros for batch-norm gain/bias.
pub const INIT_WEIGHT_STD: f64 = 0.02;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Parameter storage
// ---------------------------------------------------------------------------

/// Named map of trainable tensors. Keys are `"{network}/{layer}/{tensor}"`,
/// so one store holds every network and iteration order is stable.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| LayerError::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| LayerError::MissingParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> + 'a {
        self.tensors.keys().filter(move |k| k.starts_with(prefix))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

/// Running statistics for one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }
}

/// All batch-norm running statistics of a model, keyed like parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BnStats {
    pub entries: BTreeMap<String, BatchNormState>,
}

// ---------------------------------------------------------------------------
// Built network
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum BuiltLayer {
    Dense { w: String, b: String },
    ConvDown { w: String, b: String, stride: usize, pad: usize },
    ConvUp { w: String, b: String, stride: usize, pad: usize, out_pad: usize },
    BatchNorm { gain: String, bias: String, key: String },
    Relu,
    Tanh,
    Sigmoid,
    Flatten,
    Unflatten { channels: usize, height: usize, width: usize },
    ConcatExtra { width: usize },
}

impl BuiltLayer {
    fn kind_name(&self) -> &'static str {
        match self {
            BuiltLayer::Dense { .. } => "dense",
            BuiltLayer::ConvDown { .. } => "conv_down",
            BuiltLayer::ConvUp { .. } => "conv_up",
            BuiltLayer::BatchNorm { .. } => "batch_norm",
            BuiltLayer::Relu => "relu",
            BuiltLayer::Tanh => "tanh",
            BuiltLayer::Sigmoid => "sigmoid",
            BuiltLayer::Flatten => "flatten",
            BuiltLayer::Unflatten { .. } => "unflatten",
            BuiltLayer::ConcatExtra { .. } => "concat",
        }
    }
}

/// A validated network: layer list plus the per-sample shape after every
/// layer (`shapes[0]` is the input shape, `shapes[i+1]` follows layer `i`).
#[derive(Debug, Clone)]
pub struct Network {
    pub name: String,
    layers: Vec<BuiltLayer>,
    shapes: Vec<Vec<usize>>,
    param_names: Vec<String>,
}

/// Per-graph binding of parameter names to leaf nodes.
pub struct Binding {
    ids: BTreeMap<String, NodeId>,
    trainable: bool,
}

impl Binding {
    pub fn node(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| LayerError::MissingParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }
}

enum BnCtx<'a> {
    Train(&'a mut BnStats),
    Eval(&'a BnStats),
}

impl NetworkSpec {
    /// Validate shapes, create parameters, and return the built network.
    /// Parameters are drawn from `rng` in layer order, weights before biases.
    pub fn build(&self, store: &mut ParameterStore, bn: &mut BnStats, rng: &mut SeedRng) -> Result<Network> {
        let mut layers = Vec::new();
        let mut shapes = vec![self.input_shape.clone()];
        let mut param_names = Vec::new();
        let mut shape = self.input_shape.clone();

        let push_bn = |index: usize,
                           shape: &[usize],
                           store: &mut ParameterStore,
                           bn: &mut BnStats,
                           layers: &mut Vec<BuiltLayer>,
                           shapes: &mut Vec<Vec<usize>>,
                           param_names: &mut Vec<String>| {
            let channels = shape[0];
            let base = format!("{}/{:02}_bn", self.name, index);
            let gain = format!("{base}/gain");
            let bias = format!("{base}/bias");
            store.insert(&gain, Tensor::ones(&[channels]));
            store.insert(&bias, Tensor::zeros(&[channels]));
            bn.entries.insert(base.clone(), BatchNormState::new(channels));
            param_names.push(gain.clone());
            param_names.push(bias.clone());
            layers.push(BuiltLayer::BatchNorm { gain, bias, key: base });
            shapes.push(shape.to_vec());
        };

        let mut index = 0usize;
        for (spec_idx, spec) in self.layers.iter().enumerate() {
            let incompatible = |shape: &[usize]| LayerError::Incompatible {
                network: self.name.clone(),
                index: spec_idx,
                kind: spec.kind_name(),
                shape: shape.to_vec(),
            };
            match &spec.kind {
                LayerKind::Dense { units } => {
                    if shape.len() != 1 {
                        return Err(incompatible(&shape));
                    }
                    let (d_in, d_out) = (shape[0], *units);
                    let base = format!("{}/{:02}_dense", self.name, index);
                    let w = format!("{base}/w");
                    let b = format!("{base}/b");
                    store.insert(&w, rng.normal_tensor_scaled(&[d_in, d_out], INIT_WEIGHT_STD));
                    store.insert(&b, Tensor::zeros(&[d_out]));
                    param_names.push(w.clone());
                    param_names.push(b.clone());
                    layers.push(BuiltLayer::Dense { w, b });
                    shape = vec![d_out];
                    shapes.push(shape.clone());
                }
                LayerKind::ConvDown { channels, kernel, stride } => {
                    if shape.len() != 3 || *stride < 1 {
                        return Err(incompatible(&shape));
                    }
                    let (c_in, h, wd) = (shape[0], shape[1], shape[2]);
                    let pad = kernel / 2;
                    let oh = crate::tensor::conv_out_extent(h, *kernel, *stride, pad);
                    let ow = crate::tensor::conv_out_extent(wd, *kernel, *stride, pad);
                    let (Some(oh), Some(ow)) = (oh, ow) else {
                        return Err(LayerError::InvalidSpec {
                            network: self.name.clone(),
                            index: spec_idx,
                            msg: format!("non-positive output extent from {shape:?}"),
                        });
                    };
                    let base = format!("{}/{:02}_conv", self.name, index);
                    let w = format!("{base}/w");
                    let b = format!("{base}/b");
                    store.insert(&w, rng.normal_tensor_scaled(&[*channels, c_in, *kernel, *kernel], INIT_WEIGHT_STD));
                    store.insert(&b, Tensor::zeros(&[*channels]));
                    param_names.push(w.clone());
                    param_names.push(b.clone());
                    layers.push(BuiltLayer::ConvDown { w, b, stride: *stride, pad });
                    shape = vec![*channels, oh, ow];
                    shapes.push(shape.clone());
                }
                LayerKind::ConvUp { channels, kernel, stride } => {
                    if shape.len() != 3 || *stride < 1 {
                        return Err(incompatible(&shape));
                    }
                    let (c_in, h, wd) = (shape[0], shape[1], shape[2]);
                    let pad = kernel / 2;
                    // out_pad = stride-1 makes a stride-s layer scale the
                    // extent by exactly s for odd kernels.
                    let out_pad = stride - 1;
                    let oh = (h - 1) * stride + kernel + out_pad - 2 * pad;
                    let ow = (wd - 1) * stride + kernel + out_pad - 2 * pad;
                    let base = format!("{}/{:02}_convt", self.name, index);
                    let w = format!("{base}/w");
                    let b = format!("{base}/b");
                    store.insert(&w, rng.normal_tensor_scaled(&[c_in, *channels, *kernel, *kernel], INIT_WEIGHT_STD));
                    store.insert(&b, Tensor::zeros(&[*channels]));
                    param_names.push(w.clone());
                    param_names.push(b.clone());
                    layers.push(BuiltLayer::ConvUp { w, b, stride: *stride, pad, out_pad });
                    shape = vec![*channels, oh, ow];
                    shapes.push(shape.clone());
                }
                LayerKind::BatchNorm => {
                    if shape.is_empty() || shape.len() == 2 {
                        return Err(incompatible(&shape));
                    }
                    push_bn(index, &shape, store, bn, &mut layers, &mut shapes, &mut param_names);
                }
                LayerKind::Relu => {
                    layers.push(BuiltLayer::Relu);
                    shapes.push(shape.clone());
                }
                LayerKind::Tanh => {
                    layers.push(BuiltLayer::Tanh);
                    shapes.push(shape.clone());
                }
                LayerKind::Sigmoid => {
                    layers.push(BuiltLayer::Sigmoid);
                    shapes.push(shape.clone());
                }
                LayerKind::Flatten => {
                    if shape.len() != 3 {
                        return Err(incompatible(&shape));
                    }
                    layers.push(BuiltLayer::Flatten);
                    shape = vec![shape.iter().product()];
                    shapes.push(shape.clone());
                }
                LayerKind::Unflatten { channels, height, width } => {
                    if shape.len() != 1 || shape[0] != channels * height * width {
                        return Err(incompatible(&shape));
                    }
                    layers.push(BuiltLayer::Unflatten {
                        channels: *channels,
                        height: *height,
                        width: *width,
                    });
                    shape = vec![*channels, *height, *width];
                    shapes.push(shape.clone());
                }
                LayerKind::ConcatExtra { width } => {
                    if shape.len() != 1 {
                        return Err(incompatible(&shape));
                    }
                    layers.push(BuiltLayer::ConcatExtra { width: *width });
                    shape = vec![shape[0] + width];
                    shapes.push(shape.clone());
                }
            }
            // Expand the `has_bnorm` shorthand into a standalone layer.
            if spec.has_bnorm {
                if shape.len() == 2 {
                    return Err(incompatible(&shape));
                }
                index += 1;
                push_bn(index, &shape, store, bn, &mut layers, &mut shapes, &mut param_names);
            }
            index += 1;
        }

        Ok(Network {
            name: self.name.clone(),
            layers,
            shapes,
            param_names,
        })
    }
}

impl Network {
    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    /// Per-sample output shape, derivable from the spec alone.
    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Index of the activation following the `n`-th stride>=2 downsampling
    /// convolution (counting from 1), used for feature taps.
    pub fn post_downsampling_activation(&self, n: usize) -> Option<usize> {
        let mut seen = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            if let BuiltLayer::ConvDown { stride, .. } = layer {
                if *stride >= 2 {
                    seen += 1;
                    if seen == n {
                        // Advance over normalization to the activation.
                        let mut j = i + 1;
                        while j < self.layers.len() {
                            match self.layers[j] {
                                BuiltLayer::BatchNorm { .. } => j += 1,
                                BuiltLayer::Relu | BuiltLayer::Tanh | BuiltLayer::Sigmoid => return Some(j),
                                _ => return Some(i),
                            }
                        }
                        return Some(i);
                    }
                }
            }
        }
        None
    }

    /// Insert leaves for every parameter of this network. When `trainable`
    /// is false the leaves are constants and receive no gradients, which is
    /// how a frozen copy of a network participates in a loss without being
    /// updated by it.
    pub fn bind(&self, g: &mut Graph, store: &ParameterStore, trainable: bool) -> Result<Binding> {
        let mut ids = BTreeMap::new();
        for name in &self.param_names {
            let tensor = store.get(name)?.clone();
            let id = if trainable {
                g.leaf(tensor.with_grad())
            } else {
                g.constant(tensor)
            };
            ids.insert(name.clone(), id);
        }
        Ok(Binding { ids, trainable })
    }

    pub fn forward_train(
        &self,
        g: &mut Graph,
        x: NodeId,
        binding: &Binding,
        bn: &mut BnStats,
        extra: Option<NodeId>,
    ) -> Result<NodeId> {
        self.forward_impl(g, x, binding, BnCtx::Train(bn), extra, None).map(|(out, _)| out)
    }

    pub fn forward_eval(
        &self,
        g: &mut Graph,
        x: NodeId,
        binding: &Binding,
        bn: &BnStats,
        extra: Option<NodeId>,
    ) -> Result<NodeId> {
        self.forward_impl(g, x, binding, BnCtx::Eval(bn), extra, None).map(|(out, _)| out)
    }

    /// Forward pass that also returns the activation after layer `tap`.
    pub fn forward_with_tap(
        &self,
        g: &mut Graph,
        x: NodeId,
        binding: &Binding,
        bn: BnForward<'_>,
        extra: Option<NodeId>,
        tap: usize,
    ) -> Result<(NodeId, NodeId)> {
        let ctx = match bn {
            BnForward::Train(s) => BnCtx::Train(s),
            BnForward::Eval(s) => BnCtx::Eval(s),
        };
        let (out, tapped) = self.forward_impl(g, x, binding, ctx, extra, Some(tap))?;
        Ok((out, tapped.expect("tap index in range")))
    }

    fn forward_impl(
        &self,
        g: &mut Graph,
        x: NodeId,
        binding: &Binding,
        mut bn: BnCtx<'_>,
        extra: Option<NodeId>,
        tap: Option<usize>,
    ) -> Result<(NodeId, Option<NodeId>)> {
        let batch = g.value(x).shape()[0];
        let expected: Vec<usize> = std::iter::once(batch).chain(self.shapes[0].iter().copied()).collect();
        if g.value(x).shape() != expected.as_slice() {
            return Err(LayerError::Incompatible {
                network: self.name.clone(),
                index: 0,
                kind: "input",
                shape: g.value(x).shape().to_vec(),
            });
        }
        let mut h = x;
        let mut tapped = None;
        for (i, layer) in self.layers.iter().enumerate() {
            h = match layer {
                BuiltLayer::Dense { w, b } => {
                    let wid = binding.node(w)?;
                    let bid = binding.node(b)?;
                    let p = g.matmul(h, wid)?;
                    g.add(p, bid)?
                }
                BuiltLayer::ConvDown { w, b, stride, pad } => {
                    let wid = binding.node(w)?;
                    let bid = binding.node(b)?;
                    let c = g.conv2d(h, wid, *stride, *pad)?;
                    g.add(c, bid)?
                }
                BuiltLayer::ConvUp { w, b, stride, pad, out_pad } => {
                    let wid = binding.node(w)?;
                    let bid = binding.node(b)?;
                    let c = g.conv2d_transpose(h, wid, *stride, *pad, *out_pad)?;
                    g.add(c, bid)?
                }
                BuiltLayer::BatchNorm { gain, bias, key } => {
                    let gid = binding.node(gain)?;
                    let bid = binding.node(bias)?;
                    batch_norm_forward(g, h, gid, bid, key, &mut bn)?
                }
                BuiltLayer::Relu => g.relu(h),
                BuiltLayer::Tanh => g.tanh(h),
                BuiltLayer::Sigmoid => g.sigmoid(h),
                BuiltLayer::Flatten => {
                    let numel: usize = self.shapes[i].iter().product();
                    g.reshape(h, &[batch, numel])?
                }
                BuiltLayer::Unflatten { channels, height, width } => {
                    g.reshape(h, &[batch, *channels, *height, *width])?
                }
                BuiltLayer::ConcatExtra { width } => {
                    let e = extra.ok_or(LayerError::MissingInjection)?;
                    let eshape = g.value(e).shape();
                    if eshape.len() != 2 || eshape[1] != *width || eshape[0] != batch {
                        return Err(LayerError::Incompatible {
                            network: self.name.clone(),
                            index: i,
                            kind: "concat",
                            shape: eshape.to_vec(),
                        });
                    }
                    g.concat_cols(h, e)?
                }
            };
            if tap == Some(i) {
                tapped = Some(h);
            }
        }
        let out_expected: Vec<usize> = std::iter::once(batch)
            .chain(self.shapes.last().unwrap().iter().copied())
            .collect();
        debug_assert_eq!(g.value(h).shape(), out_expected.as_slice());
        Ok((h, tapped))
    }

    /// Human-readable per-layer summary (kind and output shape).
    pub fn describe(&self) -> String {
        let mut s = format!("{}: input {:?}\n", self.name, self.shapes[0]);
        for (i, layer) in self.layers.iter().enumerate() {
            s.push_str(&format!("  {:02} {:<10} -> {:?}\n", i, layer.kind_name(), self.shapes[i + 1]));
        }
        s
    }
}

/// Batch-norm statistics handle for `forward_with_tap`.
pub enum BnForward<'a> {
    Train(&'a mut BnStats),
    Eval(&'a BnStats),
}

/// Normalize per channel/unit over the batch (and spatial axes for rank-4
/// inputs). Train mode uses biased batch statistics and folds them into the
/// running statistics; eval mode is a pure function of the running stats.
fn batch_norm_forward(
    g: &mut Graph,
    x: NodeId,
    gain: NodeId,
    bias: NodeId,
    key: &str,
    bn: &mut BnCtx<'_>,
) -> Result<NodeId> {
    let normalized = match bn {
        BnCtx::Train(stats) => {
            let batch = g.value(x).shape()[0];
            if batch < 2 {
                return Err(LayerError::BatchTooSmall(batch));
            }
            let state = stats
                .entries
                .get_mut(key)
                .ok_or_else(|| LayerError::MissingParameter(key.to_string()))?;
            let mean = g.mean_channels(x)?;
            let centered = g.sub(x, mean)?;
            let sq = g.mul(centered, centered)?;
            let var = g.mean_channels(sq)?;
            let var_eps = g.add_scalar(var, state.epsilon);
            let denom = g.sqrt(var_eps);
            let normalized = g.div(centered, denom)?;

            // Fold batch statistics into the running estimates.
            let m = state.momentum;
            let batch_mean = g.value(mean).clone();
            let batch_var = g.value(var).clone();
            for (r, b) in state.running_mean.data_mut().iter_mut().zip(batch_mean.data()) {
                *r = m * *r + (1.0 - m) * b;
            }
            for (r, b) in state.running_var.data_mut().iter_mut().zip(batch_var.data()) {
                *r = m * *r + (1.0 - m) * b;
            }
            normalized
        }
        BnCtx::Eval(stats) => {
            let state = stats
                .entries
                .get(key)
                .ok_or_else(|| LayerError::MissingParameter(key.to_string()))?;
            let mean = g.constant(state.running_mean.clone());
            let var = g.constant(state.running_var.clone());
            let centered = g.sub(x, mean)?;
            let var_eps = g.add_scalar(var, state.epsilon);
            let denom = g.sqrt(var_eps);
            g.div(centered, denom)?
        }
    };
    let scaled = g.mul(normalized, gain)?;
    Ok(g.add(scaled, bias)?)
}
