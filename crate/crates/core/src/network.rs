//! A sequential CNN assembled from a [`TrainConfig`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::batchnorm::BatchNorm;
use crate::checkpoint::{Checkpoint, Entry};
use crate::config::{LayerSpec, TrainConfig};
use crate::error::{Error, Result};
use crate::layers::{argmax_rows, softmax_xent, ConvLayer, DenseLayer, MaxPool, Relu};
use crate::meprop::{GateStats, MePropPolicy, Sparsifiable};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub enum Op<T> {
    Conv(ConvLayer<T>),
    Dense(DenseLayer<T>),
    Norm(BatchNorm<T>),
    Relu(Relu<T>),
    Pool(MaxPool),
}

impl<T: Scalar> Op<T> {
    fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Op::Conv(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            Op::Dense(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            Op::Norm(bn) => vec![("gamma", &bn.gamma), ("beta", &bn.beta)],
            Op::Relu(_) | Op::Pool(_) => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Op::Conv(l) => vec![&mut l.weight, &mut l.bias],
            Op::Dense(l) => vec![&mut l.weight, &mut l.bias],
            Op::Norm(bn) => vec![&mut bn.gamma, &mut bn.beta],
            Op::Relu(_) | Op::Pool(_) => Vec::new(),
        }
    }

    fn gated(&self) -> Option<&dyn Sparsifiable<T>> {
        match self {
            Op::Conv(l) => Some(l),
            Op::Dense(l) => Some(l),
            _ => None,
        }
    }

    fn gated_mut(&mut self) -> Option<&mut dyn Sparsifiable<T>> {
        match self {
            Op::Conv(l) => Some(l),
            Op::Dense(l) => Some(l),
            _ => None,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Op::Conv(_) => "conv",
            Op::Dense(_) => "dense",
            Op::Norm(_) => "bn",
            Op::Relu(_) => "relu",
            Op::Pool(_) => "pool",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node<T> {
    name: String,
    op: Op<T>,
    grads: Vec<Tensor<T>>,
    adam: Vec<AdamState<T>>,
}

impl<T: Scalar> Node<T> {
    fn new(name: String, op: Op<T>) -> Self {
        let adam = op.params().iter().map(|(_, p)| AdamState::new(p.shape())).collect();
        Self {
            name,
            op,
            grads: Vec::new(),
            adam,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn op(&self) -> &Op<T> {
        &self.op
    }

    pub fn op_mut(&mut self) -> &mut Op<T> {
        &mut self.op
    }

    /// Gradients of the last backward pass, in parameter order.
    pub fn grads(&self) -> &[Tensor<T>] {
        &self.grads
    }
}

/// Gradient traffic at one weight layer during the last backward pass.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerTraffic {
    pub layer: String,
    pub meprop: bool,
    /// Entries of the output gradient.
    pub len: usize,
    /// Nonzero entries of the output gradient before masking.
    pub nnz: usize,
    /// Entries passed on to the backward kernels.
    pub selected: usize,
    pub flops_dense: u64,
    pub flops_sparse: u64,
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    nodes: Vec<Node<T>>,
    input: [usize; 3],
    optimizer: AdamConfig,
}

impl<T: Scalar> Network<T> {
    /// Builds the network with He-normal weights drawn from `cfg.seed`.
    pub fn build(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let names = cfg.layer_names();
        let chain = cfg.shape_chain()?;
        let mut nodes = Vec::new();
        let mut in_shape = cfg.input.to_vec();
        for ((spec, name), out_shape) in cfg.layers.iter().zip(names).zip(chain) {
            match spec {
                LayerSpec::Conv {
                    kernel,
                    filters,
                    stride,
                    padding,
                    bn,
                    relu,
                    meprop,
                    ..
                } => {
                    let mut conv = ConvLayer::he_init(
                        (*kernel, *kernel),
                        in_shape[2],
                        *filters,
                        *stride,
                        *padding,
                        &mut rng,
                    )?;
                    if meprop.enabled {
                        conv.attach(MePropPolicy::new(meprop.ratio, meprop.decay, &out_shape)?)?;
                    }
                    nodes.push(Node::new(name.clone(), Op::Conv(conv)));
                    Self::push_tail(&mut nodes, &name, *bn, *relu, *filters, cfg)?;
                }
                LayerSpec::Dense {
                    units, bn, relu, meprop, ..
                } => {
                    let fan_in = in_shape.iter().product();
                    let mut dense = DenseLayer::he_init(fan_in, *units, &mut rng)?;
                    if meprop.enabled {
                        dense.attach(MePropPolicy::new(meprop.ratio, meprop.decay, &out_shape)?)?;
                    }
                    nodes.push(Node::new(name.clone(), Op::Dense(dense)));
                    Self::push_tail(&mut nodes, &name, *bn, *relu, *units, cfg)?;
                }
                LayerSpec::Pool { size, stride, .. } => {
                    nodes.push(Node::new(name, Op::Pool(MaxPool::new(*size, *stride)?)));
                }
            }
            in_shape = out_shape;
        }
        Ok(Self {
            nodes,
            input: cfg.input,
            optimizer: cfg.optimizer,
        })
    }

    fn push_tail(
        nodes: &mut Vec<Node<T>>,
        name: &str,
        bn: bool,
        relu: bool,
        channels: usize,
        cfg: &TrainConfig,
    ) -> Result<()> {
        if bn {
            let norm = BatchNorm::new(channels, cfg.bn_epsilon, cfg.bn_momentum)
                .map_err(|e| Error::config(name, e.to_string()))?;
            nodes.push(Node::new(format!("{name}.bn"), Op::Norm(norm)));
        }
        if relu {
            nodes.push(Node::new(format!("{name}.relu"), Op::Relu(Relu::new())));
        }
        Ok(())
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn node(&self, name: &str) -> Option<&Node<T>> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn node_mut(&mut self, name: &str) -> Option<&mut Node<T>> {
        self.nodes.iter_mut().find(|n| n.name == name)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn optimizer(&self) -> &AdamConfig {
        &self.optimizer
    }

    pub fn param_count(&self) -> usize {
        self.nodes
            .iter()
            .flat_map(|n| n.op.params())
            .map(|(_, p)| p.len())
            .sum()
    }

    /// The policy attached to weight layer `name`, if any.
    pub fn policy(&self, name: &str) -> Option<&MePropPolicy<T>> {
        self.node(name)?.op.gated()?.gate().policy()
    }

    /// Enables or disables every attached policy. A disabled policy leaves
    /// gradients and its accumulator untouched.
    pub fn set_meprop_enabled(&mut self, enabled: bool) {
        for node in &mut self.nodes {
            if let Some(p) = node.op.gated_mut().and_then(|g| g.gate_mut().policy_mut()) {
                p.set_enabled(enabled);
            }
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        match x.shape() {
            [_, h, w, c] if [*h, *w, *c] == self.input => Ok(()),
            s => Err(Error::Dimension(format!(
                "network input must be [m, {}, {}, {}], got {s:?}",
                self.input[0], self.input[1], self.input[2]
            ))),
        }
    }

    /// Training-mode forward pass; caches activations and uses batch
    /// statistics in batch norm.
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for node in &mut self.nodes {
            h = match &mut node.op {
                Op::Conv(l) => l.forward(&h)?,
                Op::Dense(l) => l.forward(&h)?,
                Op::Norm(bn) => bn.forward_train(&h)?,
                Op::Relu(r) => r.forward(&h),
                Op::Pool(p) => p.forward(&h)?,
            };
        }
        Ok(h)
    }

    /// Inference-mode forward pass: no caching, running batch-norm
    /// statistics.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for node in &self.nodes {
            h = match &node.op {
                Op::Conv(l) => l.infer(&h)?,
                Op::Dense(l) => l.infer(&h)?,
                Op::Norm(bn) => bn.forward_infer(&h)?,
                Op::Relu(_) => crate::layers::relu(&h),
                Op::Pool(p) => p.infer(&h)?,
            };
        }
        Ok(h)
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        argmax_rows(&self.infer(x)?)
    }

    /// Back-propagates `dlogits` through the cached forward pass, routing
    /// each weight layer's output gradient through its policy. Parameter
    /// gradients are stored on the nodes.
    pub fn backward(&mut self, dlogits: &Tensor<T>) -> Result<()> {
        let mut g = dlogits.clone();
        for node in self.nodes.iter_mut().rev() {
            let (dx, grads) = match &mut node.op {
                Op::Conv(l) => {
                    let r = l.backward(&g)?;
                    (r.dx, vec![r.dw, r.db])
                }
                Op::Dense(l) => {
                    let r = l.backward(&g)?;
                    (r.dx, vec![r.dw, r.db])
                }
                Op::Norm(bn) => {
                    let r = bn.backward(&g)?;
                    (r.dx, vec![r.dgamma, r.dbeta])
                }
                Op::Relu(r) => (r.backward(&g)?, Vec::new()),
                Op::Pool(p) => (p.backward(&g)?, Vec::new()),
            };
            node.grads = grads;
            g = dx;
        }
        Ok(())
    }

    /// Back-propagates without any masking or accumulator updates and
    /// reports the nonzero count of each weight layer's output gradient.
    /// Stored parameter gradients are left as they were.
    pub fn backward_probe(&self, dlogits: &Tensor<T>) -> Result<Vec<LayerTraffic>> {
        let mut g = dlogits.clone();
        let mut out = Vec::new();
        for node in self.nodes.iter().rev() {
            g = match &node.op {
                Op::Conv(l) => {
                    out.push(traffic(&node.name, false, g.len(), g.nnz(), g.len(), |e| {
                        l.backward_flops(e)
                    }));
                    l.backward_ungated(&g)?.dx
                }
                Op::Dense(l) => {
                    out.push(traffic(&node.name, false, g.len(), g.nnz(), g.len(), |e| {
                        l.backward_flops(e)
                    }));
                    l.backward_ungated(&g)?.dx
                }
                Op::Norm(bn) => bn.backward(&g)?.dx,
                Op::Relu(r) => r.backward(&g)?,
                Op::Pool(p) => p.backward(&g)?,
            };
        }
        out.reverse();
        Ok(out)
    }

    /// Gradient traffic of the last [`Network::backward`], per weight layer.
    pub fn traffic(&self) -> Vec<LayerTraffic> {
        self.nodes
            .iter()
            .filter_map(|node| {
                let gate = node.op.gated()?.gate();
                let GateStats { len, nnz_in, selected } = gate.stats();
                let on = gate.policy().is_some_and(|p| p.enabled());
                Some(match &node.op {
                    Op::Conv(l) => traffic(&node.name, on, len, nnz_in, selected, |e| l.backward_flops(e)),
                    Op::Dense(l) => traffic(&node.name, on, len, nnz_in, selected, |e| l.backward_flops(e)),
                    _ => unreachable!("only weight layers have gates"),
                })
            })
            .collect()
    }

    /// Applies one Adam update to every parameter using the stored
    /// gradients.
    pub fn step(&mut self) -> Result<()> {
        let cfg = self.optimizer;
        for node in &mut self.nodes {
            let Node { name, op, grads, adam } = node;
            let params = op.params_mut();
            if params.is_empty() {
                continue;
            }
            if grads.len() != params.len() {
                return Err(Error::State(format!("{name}: no gradients from a backward pass")));
            }
            for ((p, g), st) in params.into_iter().zip(grads.iter()).zip(adam.iter_mut()) {
                st.step(&cfg, p, g)?;
            }
        }
        Ok(())
    }

    /// Forward, loss, backward, Adam. Returns the mean batch loss.
    pub fn train_step(&mut self, x: &Tensor<T>, labels: &[usize]) -> Result<f64> {
        let logits = self.forward(x)?;
        let (loss, dlogits) = softmax_xent(&logits, labels)?;
        self.backward(&dlogits)?;
        for node in &self.nodes {
            for g in &node.grads {
                g.check_finite(&format!("{} gradient", node.name))?;
            }
        }
        self.step()?;
        Ok(loss.to_f64().unwrap_or(f64::NAN))
    }

    /// L2 norm of every stored parameter gradient, labelled `node.param`.
    pub fn grad_norms(&self) -> Vec<(String, f64)> {
        self.nodes
            .iter()
            .flat_map(|n| {
                n.op.params()
                    .into_iter()
                    .zip(&n.grads)
                    .map(move |((p, _), g)| (format!("{}.{p}", n.name), g.l2_norm()))
            })
            .collect()
    }

    pub fn param_norms(&self) -> Vec<(String, f64)> {
        self.nodes
            .iter()
            .flat_map(|n| {
                n.op.params()
                    .into_iter()
                    .map(move |(p, t)| (format!("{}.{p}", n.name), t.l2_norm()))
            })
            .collect()
    }

    /// Drops all cached activations.
    pub fn reset(&mut self) {
        for node in &mut self.nodes {
            match &mut node.op {
                Op::Conv(l) => l.reset(),
                Op::Dense(l) => l.reset(),
                Op::Norm(bn) => bn.reset(),
                Op::Relu(r) => r.reset(),
                Op::Pool(p) => p.reset(),
            }
        }
    }

    /// Parameters, optimizer moments, batch-norm running statistics and
    /// policy accumulators.
    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut ck = Checkpoint::new();
        for node in &self.nodes {
            let name = &node.name;
            ck.push(format!("{name}.kind"), Entry::Text(node.op.kind().into()));
            for ((p, t), st) in node.op.params().into_iter().zip(&node.adam) {
                ck.push(format!("{name}.{p}"), Entry::Tensor(t.clone()));
                ck.push(format!("{name}.{p}.adam_m"), Entry::Tensor(st.m.clone()));
                ck.push(format!("{name}.{p}.adam_v"), Entry::Tensor(st.v.clone()));
                ck.push(format!("{name}.{p}.adam_t"), Entry::Counter(st.t));
            }
            if let Op::Norm(bn) = &node.op {
                ck.push(format!("{name}.running_mean"), Entry::Tensor(bn.running_mean.clone()));
                ck.push(format!("{name}.running_var"), Entry::Tensor(bn.running_var.clone()));
            }
            if let Some(p) = node.op.gated().and_then(|g| g.gate().policy()) {
                ck.push(format!("{name}.run_grad"), Entry::Tensor(p.run_grad().clone()));
                ck.push(format!("{name}.run_grad_updates"), Entry::Counter(p.updates()));
            }
        }
        ck
    }

    /// Restores state written by [`Network::to_checkpoint`] into a network
    /// built from the same configuration.
    pub fn restore(&mut self, ck: &Checkpoint<T>) -> Result<()> {
        let shaped = |name: &str, like: &Tensor<T>| -> Result<Tensor<T>> {
            let t = ck.tensor(name)?;
            if t.shape() != like.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored shape {:?}, network expects {:?}",
                    t.shape(),
                    like.shape()
                )));
            }
            Ok(t.clone())
        };
        for node in &mut self.nodes {
            let name = node.name.clone();
            let kind = ck.text(&format!("{name}.kind"))?;
            if kind != node.op.kind() {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored layer kind {kind:?}, network has {:?}",
                    node.op.kind()
                )));
            }
            let labels: Vec<&str> = node.op.params().into_iter().map(|(p, _)| p).collect();
            for ((p, param), st) in labels.into_iter().zip(node.op.params_mut()).zip(&mut node.adam) {
                *param = shaped(&format!("{name}.{p}"), param)?;
                st.m = shaped(&format!("{name}.{p}.adam_m"), &st.m)?;
                st.v = shaped(&format!("{name}.{p}.adam_v"), &st.v)?;
                st.t = ck.counter(&format!("{name}.{p}.adam_t"))?;
            }
            if let Op::Norm(bn) = &mut node.op {
                bn.running_mean = shaped(&format!("{name}.running_mean"), &bn.running_mean)?;
                bn.running_var = shaped(&format!("{name}.running_var"), &bn.running_var)?;
            }
            if let Some(p) = node.op.gated_mut().and_then(|g| g.gate_mut().policy_mut()) {
                let run_grad = shaped(&format!("{name}.run_grad"), p.run_grad())?;
                p.restore(run_grad, ck.counter(&format!("{name}.run_grad_updates"))?)?;
            }
            node.grads.clear();
        }
        self.reset();
        Ok(())
    }
}

fn traffic(
    layer: &str,
    meprop: bool,
    len: usize,
    nnz: usize,
    selected: usize,
    flops: impl Fn(usize) -> u64,
) -> LayerTraffic {
    LayerTraffic {
        layer: layer.to_owned(),
        meprop,
        len,
        nnz,
        selected,
        flops_dense: flops(len),
        flops_sparse: flops(selected),
    }
}
