//! Minimal reverse-mode network engine: exactly the layer zoo the two
//! architectures need (conv / pool / upsample / fully-connected / batch-norm
//! / ELU / dropout / softmax / identity) on an explicit DAG with
//! multi-stream fan-in at fully-connected fusion nodes.

mod gradcheck;
mod layers;
mod run;

pub use gradcheck::{finite_difference_check, FdBatch};
pub use run::{FrozenNoise, LossKind};

#[cfg(feature = "layer-timing")]
pub fn timing_dump() {
    run::timing::dump();
}

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Tensor};
use rand_chacha::ChaCha8Rng;

/// One layer. Fields mirror what each kind needs; construction goes through
/// `NetworkBuilder`, which validates them.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum LayerSpec {
    Conv2d {
        filters: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        /// Zero padding in voxels per side (h, w).
        padding: (usize, usize),
    },
    MaxPool2d {
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    Upsample2d {
        factor: (usize, usize),
    },
    FullyConnected {
        units: usize,
    },
    BatchNorm,
    Elu {
        alpha: f64,
    },
    Dropout {
        rate: f64,
    },
    Softmax,
    Identity,
    /// Value-preserving shape adapter (flat fully-connected output into a
    /// spatial tensor for the decoder); element count must match.
    Reshape {
        shape: [usize; 3],
    },
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool2d { .. } => "max_pool2d",
            LayerSpec::Upsample2d { .. } => "upsample2d",
            LayerSpec::FullyConnected { .. } => "fully_connected",
            LayerSpec::BatchNorm => "batch_norm",
            LayerSpec::Elu { .. } => "elu",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Identity => "identity",
            LayerSpec::Reshape { .. } => "reshape",
        }
    }
}

/// Where a node reads its input from: an external input slot or an earlier node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PortRef {
    Input(usize),
    Node(usize),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NodeSpec {
    pub name: String,
    pub layer: LayerSpec,
    pub inputs: Vec<PortRef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Layer graph. Nodes are stored in topological order (each node only
/// references earlier nodes), which makes acyclicity structural.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NetworkSpec {
    /// (name, (channels, height, width)) per external input slot.
    pub inputs: Vec<(String, [usize; 3])>,
    pub nodes: Vec<NodeSpec>,
    /// Index of the single output node.
    pub output: usize,
    pub mode: Mode,
}

/// Incrementally assembles a `NetworkSpec`; `Network::build` validates and
/// infers shapes.
pub struct NetworkBuilder {
    inputs: Vec<(String, [usize; 3])>,
    nodes: Vec<NodeSpec>,
}

impl NetworkBuilder {
    pub fn new() -> Self {
        NetworkBuilder {
            inputs: Vec::new(),
            nodes: Vec::new(),
        }
    }

    pub fn input(&mut self, name: &str, shape: [usize; 3]) -> PortRef {
        self.inputs.push((name.to_string(), shape));
        PortRef::Input(self.inputs.len() - 1)
    }

    pub fn node(&mut self, name: &str, layer: LayerSpec, inputs: &[PortRef]) -> PortRef {
        self.nodes.push(NodeSpec {
            name: name.to_string(),
            layer,
            inputs: inputs.to_vec(),
        });
        PortRef::Node(self.nodes.len() - 1)
    }

    pub fn finish(self, output: PortRef) -> Result<NetworkSpec> {
        let output = match output {
            PortRef::Node(i) => i,
            PortRef::Input(_) => {
                return Err(Error::Dimension("output must be a node, not an input".into()))
            }
        };
        Ok(NetworkSpec {
            inputs: self.inputs,
            nodes: self.nodes,
            output,
            mode: Mode::Train,
        })
    }
}

impl Default for NetworkBuilder {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameters owned by a node.
#[derive(Debug, Clone)]
pub(crate) enum NodeParams<T: Scalar> {
    None,
    Conv {
        /// [filters, in_channels, kh, kw]
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
    Fc {
        /// [units, fan_in]
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
    BatchNorm {
        gamma: Tensor<T>,
        beta: Tensor<T>,
        running_mean: Vec<T>,
        running_var: Vec<T>,
    },
}

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.9;

/// A spec plus parameters, shape table, and (in train mode) the activation
/// cache the backward pass consumes.
pub struct Network<T: Scalar> {
    pub(crate) spec: NetworkSpec,
    /// Output shape (c, h, w) per node; fully-connected outputs are (units, 1, 1).
    pub(crate) shapes: Vec<[usize; 3]>,
    pub(crate) params: Vec<NodeParams<T>>,
    pub(crate) cache: Option<run::Cache<T>>,
}

impl<T: Scalar> Network<T> {
    /// Validate the graph, infer shapes, and He-initialize parameters from
    /// the given seed (fan-in scaled normals; batch-norm starts at identity).
    pub fn build(spec: NetworkSpec, init_seed: u64) -> Result<Self> {
        let shapes = infer_shapes(&spec)?;
        let mut rng = rng::substream(init_seed, "weight-init");
        let params = init_params(&spec, &shapes, &mut rng);
        Ok(Network {
            spec,
            shapes,
            params,
            cache: None,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn mode(&self) -> Mode {
        self.spec.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.spec.mode = mode;
        if mode == Mode::Eval {
            self.cache = None;
        }
    }

    pub fn input_shape(&self, slot: usize) -> [usize; 3] {
        self.spec.inputs[slot].1
    }

    pub fn output_shape(&self) -> [usize; 3] {
        self.shapes[self.spec.output]
    }

    /// Shape of a node's output, for structural tests.
    pub fn node_shape(&self, node: usize) -> [usize; 3] {
        self.shapes[node]
    }

    /// All persistent tensors in deterministic order: trainable parameters
    /// plus batch-norm running statistics, named `<node>.<role>`.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<T>)> {
        let mut out = Vec::new();
        for (node, params) in self.spec.nodes.iter().zip(&self.params) {
            match params {
                NodeParams::None => {}
                NodeParams::Conv { weight, bias } | NodeParams::Fc { weight, bias } => {
                    out.push((
                        format!("{}.weight", node.name),
                        weight.shape().to_vec(),
                        weight.data().to_vec(),
                    ));
                    out.push((
                        format!("{}.bias", node.name),
                        bias.shape().to_vec(),
                        bias.data().to_vec(),
                    ));
                }
                NodeParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    out.push((
                        format!("{}.gamma", node.name),
                        gamma.shape().to_vec(),
                        gamma.data().to_vec(),
                    ));
                    out.push((
                        format!("{}.beta", node.name),
                        beta.shape().to_vec(),
                        beta.data().to_vec(),
                    ));
                    out.push((
                        format!("{}.running_mean", node.name),
                        vec![running_mean.len()],
                        running_mean.clone(),
                    ));
                    out.push((
                        format!("{}.running_var", node.name),
                        vec![running_var.len()],
                        running_var.clone(),
                    ));
                }
            }
        }
        out
    }

    /// Load tensors produced by `named_tensors` (e.g. from a weights file).
    /// Every name must resolve and every shape must match.
    pub fn load_named_tensors(&mut self, tensors: &[(String, Vec<usize>, Vec<T>)]) -> Result<()> {
        for (name, shape, data) in tensors {
            let (node_name, role) = name.rsplit_once('.').ok_or_else(|| {
                Error::Format(format!("tensor name `{name}` lacks a `.role` suffix"))
            })?;
            let idx = self
                .spec
                .nodes
                .iter()
                .position(|n| n.name == node_name)
                .ok_or_else(|| Error::Format(format!("no node named `{node_name}`")))?;
            let target: &mut Tensor<T> = match (&mut self.params[idx], role) {
                (NodeParams::Conv { weight, .. }, "weight")
                | (NodeParams::Fc { weight, .. }, "weight") => weight,
                (NodeParams::Conv { bias, .. }, "bias") | (NodeParams::Fc { bias, .. }, "bias") => {
                    bias
                }
                (NodeParams::BatchNorm { gamma, .. }, "gamma") => gamma,
                (NodeParams::BatchNorm { beta, .. }, "beta") => beta,
                (NodeParams::BatchNorm { running_mean, .. }, "running_mean") => {
                    if running_mean.len() != data.len() {
                        return Err(Error::Format(format!(
                            "tensor `{name}` length {} != expected {}",
                            data.len(),
                            running_mean.len()
                        )));
                    }
                    running_mean.copy_from_slice(data);
                    continue;
                }
                (NodeParams::BatchNorm { running_var, .. }, "running_var") => {
                    if running_var.len() != data.len() {
                        return Err(Error::Format(format!(
                            "tensor `{name}` length {} != expected {}",
                            data.len(),
                            running_var.len()
                        )));
                    }
                    running_var.copy_from_slice(data);
                    continue;
                }
                _ => {
                    return Err(Error::Format(format!(
                        "node `{node_name}` has no tensor role `{role}`"
                    )))
                }
            };
            if target.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor `{name}` shape {:?} != expected {:?}",
                    shape,
                    target.shape()
                )));
            }
            *target = Tensor::from_vec(shape, data.clone())?;
        }
        Ok(())
    }

    /// Visit every trainable parameter tensor in deterministic order.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        for (node, params) in self.spec.nodes.iter().zip(self.params.iter_mut()) {
            match params {
                NodeParams::None => {}
                NodeParams::Conv { weight, bias } | NodeParams::Fc { weight, bias } => {
                    f(&node.name, weight);
                    f(&node.name, bias);
                }
                NodeParams::BatchNorm { gamma, beta, .. } => {
                    f(&node.name, gamma);
                    f(&node.name, beta);
                }
            }
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for params in &self.params {
            match params {
                NodeParams::None => {}
                NodeParams::Conv { weight, bias } | NodeParams::Fc { weight, bias } => {
                    n += weight.len() + bias.len()
                }
                NodeParams::BatchNorm { gamma, beta, .. } => n += gamma.len() + beta.len(),
            }
        }
        n
    }

    /// Forward in train mode; caches activations for `backward`. `rng`
    /// drives dropout masks.
    pub fn forward(&mut self, inputs: &[Tensor<T>], rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
        match self.spec.mode {
            Mode::Train => self.forward_train(inputs, rng),
            Mode::Eval => self.forward_eval(inputs),
        }
    }

    /// Addresses of all trainable parameter tensors, in deterministic order.
    pub fn param_slots(&self) -> Vec<ParamSlot> {
        let mut slots = Vec::new();
        for (i, params) in self.params.iter().enumerate() {
            match params {
                NodeParams::None => {}
                NodeParams::Conv { .. } | NodeParams::Fc { .. } => {
                    slots.push(ParamSlot { node: i, role: ParamRole::Weight });
                    slots.push(ParamSlot { node: i, role: ParamRole::Bias });
                }
                NodeParams::BatchNorm { .. } => {
                    slots.push(ParamSlot { node: i, role: ParamRole::Gamma });
                    slots.push(ParamSlot { node: i, role: ParamRole::Beta });
                }
            }
        }
        slots
    }

    pub fn param(&self, slot: ParamSlot) -> &Tensor<T> {
        match (&self.params[slot.node], slot.role) {
            (NodeParams::Conv { weight, .. }, ParamRole::Weight)
            | (NodeParams::Fc { weight, .. }, ParamRole::Weight) => weight,
            (NodeParams::Conv { bias, .. }, ParamRole::Bias)
            | (NodeParams::Fc { bias, .. }, ParamRole::Bias) => bias,
            (NodeParams::BatchNorm { gamma, .. }, ParamRole::Gamma) => gamma,
            (NodeParams::BatchNorm { beta, .. }, ParamRole::Beta) => beta,
            _ => panic!("param slot does not match node kind"),
        }
    }

    pub fn param_mut(&mut self, slot: ParamSlot) -> &mut Tensor<T> {
        match (&mut self.params[slot.node], slot.role) {
            (NodeParams::Conv { weight, .. }, ParamRole::Weight)
            | (NodeParams::Fc { weight, .. }, ParamRole::Weight) => weight,
            (NodeParams::Conv { bias, .. }, ParamRole::Bias)
            | (NodeParams::Fc { bias, .. }, ParamRole::Bias) => bias,
            (NodeParams::BatchNorm { gamma, .. }, ParamRole::Gamma) => gamma,
            (NodeParams::BatchNorm { beta, .. }, ParamRole::Beta) => beta,
            _ => panic!("param slot does not match node kind"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
}

/// Stable address of one trainable tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSlot {
    pub node: usize,
    pub role: ParamRole,
}

fn infer_shapes(spec: &NetworkSpec) -> Result<Vec<[usize; 3]>> {
    if spec.inputs.is_empty() {
        return Err(Error::Dimension("network has no inputs".into()));
    }
    if spec.output >= spec.nodes.len() {
        return Err(Error::Dimension("output index out of range".into()));
    }
    let mut shapes: Vec<[usize; 3]> = Vec::with_capacity(spec.nodes.len());
    for (i, node) in spec.nodes.iter().enumerate() {
        let name = &node.name;
        for port in &node.inputs {
            match *port {
                PortRef::Input(s) if s >= spec.inputs.len() => {
                    return Err(Error::Dimension(format!(
                        "node `{name}` references missing input slot {s}"
                    )))
                }
                PortRef::Node(j) if j >= i => {
                    return Err(Error::Dimension(format!(
                        "node `{name}` references node {j} that is not earlier in the graph"
                    )))
                }
                _ => {}
            }
        }
        let in_shape = |port: &PortRef| -> [usize; 3] {
            match *port {
                PortRef::Input(s) => spec.inputs[s].1,
                PortRef::Node(j) => shapes[j],
            }
        };
        let arity_one = |node: &NodeSpec| -> Result<[usize; 3]> {
            if node.inputs.len() != 1 {
                return Err(Error::Dimension(format!(
                    "node `{}` ({}) takes exactly one input, got {}",
                    node.name,
                    node.layer.kind_name(),
                    node.inputs.len()
                )));
            }
            Ok(in_shape(&node.inputs[0]))
        };
        let shape = match &node.layer {
            LayerSpec::Conv2d {
                filters,
                kernel,
                stride,
                padding,
            } => {
                let [_, h, w] = arity_one(node)?;
                if *filters == 0 || kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0
                {
                    return Err(Error::Dimension(format!(
                        "node `{name}`: conv parameters must be positive"
                    )));
                }
                let ph = h + 2 * padding.0;
                let pw = w + 2 * padding.1;
                if ph < kernel.0 || pw < kernel.1 {
                    return Err(Error::Dimension(format!(
                        "node `{name}`: kernel {:?} larger than padded input {ph}x{pw}",
                        kernel
                    )));
                }
                [
                    *filters,
                    (ph - kernel.0) / stride.0 + 1,
                    (pw - kernel.1) / stride.1 + 1,
                ]
            }
            LayerSpec::MaxPool2d { kernel, stride } => {
                let [c, h, w] = arity_one(node)?;
                if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
                    return Err(Error::Dimension(format!(
                        "node `{name}`: pool parameters must be positive"
                    )));
                }
                if h < kernel.0 || w < kernel.1 {
                    return Err(Error::Dimension(format!(
                        "node `{name}`: pool kernel {:?} larger than input {h}x{w}",
                        kernel
                    )));
                }
                [c, (h - kernel.0) / stride.0 + 1, (w - kernel.1) / stride.1 + 1]
            }
            LayerSpec::Upsample2d { factor } => {
                let [c, h, w] = arity_one(node)?;
                if factor.0 == 0 || factor.1 == 0 {
                    return Err(Error::Dimension(format!(
                        "node `{name}`: upsample factor must be positive"
                    )));
                }
                [c, h * factor.0, w * factor.1]
            }
            LayerSpec::FullyConnected { units } => {
                if node.inputs.is_empty() {
                    return Err(Error::Dimension(format!(
                        "node `{name}`: fully_connected needs at least one input"
                    )));
                }
                if *units == 0 {
                    return Err(Error::Dimension(format!(
                        "node `{name}`: units must be positive"
                    )));
                }
                [*units, 1, 1]
            }
            LayerSpec::BatchNorm | LayerSpec::Identity => arity_one(node)?,
            LayerSpec::Elu { alpha } => {
                if *alpha <= 0.0 {
                    return Err(Error::Dimension(format!(
                        "node `{name}`: elu alpha must be positive"
                    )));
                }
                arity_one(node)?
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::Dimension(format!(
                        "node `{name}`: dropout rate must be in [0, 1)"
                    )));
                }
                arity_one(node)?
            }
            LayerSpec::Softmax => {
                let [c, h, w] = arity_one(node)?;
                if h != 1 || w != 1 {
                    return Err(Error::Dimension(format!(
                        "node `{name}`: softmax expects a flat input, got {c}x{h}x{w}"
                    )));
                }
                [c, 1, 1]
            }
            LayerSpec::Reshape { shape } => {
                let [c, h, w] = arity_one(node)?;
                if c * h * w != shape[0] * shape[1] * shape[2] {
                    return Err(Error::Dimension(format!(
                        "node `{name}`: cannot reshape {c}x{h}x{w} to {}x{}x{}",
                        shape[0], shape[1], shape[2]
                    )));
                }
                *shape
            }
        };
        shapes.push(shape);
    }

    // every node must feed the output
    let mut live = vec![false; spec.nodes.len()];
    let mut stack = vec![spec.output];
    while let Some(i) = stack.pop() {
        if live[i] {
            continue;
        }
        live[i] = true;
        for port in &spec.nodes[i].inputs {
            if let PortRef::Node(j) = *port {
                stack.push(j);
            }
        }
    }
    if let Some(dead) = live.iter().position(|&l| !l) {
        return Err(Error::Dimension(format!(
            "node `{}` does not reach the output",
            spec.nodes[dead].name
        )));
    }
    Ok(shapes)
}

fn fan_in(spec: &NetworkSpec, shapes: &[[usize; 3]], node: &NodeSpec) -> usize {
    node.inputs
        .iter()
        .map(|port| {
            let [c, h, w] = match *port {
                PortRef::Input(s) => spec.inputs[s].1,
                PortRef::Node(j) => shapes[j],
            };
            c * h * w
        })
        .sum()
}

fn init_params<T: Scalar>(
    spec: &NetworkSpec,
    shapes: &[[usize; 3]],
    rng: &mut ChaCha8Rng,
) -> Vec<NodeParams<T>> {
    spec.nodes
        .iter()
        .map(|node| match &node.layer {
            LayerSpec::Conv2d {
                filters, kernel, ..
            } => {
                let in_c = match node.inputs[0] {
                    PortRef::Input(s) => spec.inputs[s].1[0],
                    PortRef::Node(j) => shapes[j][0],
                };
                let fan = in_c * kernel.0 * kernel.1;
                let std = (2.0 / fan as f64).sqrt();
                let n = filters * fan;
                let data: Vec<T> = (0..n)
                    .map(|_| T::from_f64(rng::normal(rng) * std))
                    .collect();
                NodeParams::Conv {
                    weight: Tensor::from_vec(&[*filters, in_c, kernel.0, kernel.1], data).unwrap(),
                    bias: Tensor::zeros(&[*filters]),
                }
            }
            LayerSpec::FullyConnected { units } => {
                let fan = fan_in(spec, shapes, node);
                let std = (2.0 / fan as f64).sqrt();
                let data: Vec<T> = (0..units * fan)
                    .map(|_| T::from_f64(rng::normal(rng) * std))
                    .collect();
                NodeParams::Fc {
                    weight: Tensor::from_vec(&[*units, fan], data).unwrap(),
                    bias: Tensor::zeros(&[*units]),
                }
            }
            LayerSpec::BatchNorm => {
                let c = match node.inputs[0] {
                    PortRef::Input(s) => spec.inputs[s].1[0],
                    PortRef::Node(j) => shapes[j][0],
                };
                NodeParams::BatchNorm {
                    gamma: Tensor::filled(&[c], T::one()),
                    beta: Tensor::zeros(&[c]),
                    running_mean: vec![T::zero(); c],
                    running_var: vec![T::one(); c],
                }
            }
            _ => NodeParams::None,
        })
        .collect()
}

#[cfg(test)]
mod tests;
