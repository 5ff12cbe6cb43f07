use std::collections::BTreeMap;

use super::ops;
use super::tensor::Tensor;
use super::AdError;
use crate::rng::{derive, purpose, uniform_at};

pub type NodeId = usize;

/// Instance-norm epsilon.
pub const NORM_EPS: f64 = 1e-5;
/// Smoothing constant in the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    /// Dropout stays active at inference.
    McDropout,
}

impl Mode {
    fn dropout_active(self) -> bool {
        !matches!(self, Mode::Eval)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    /// Inputs `x, w, b`. Stride 1, odd cubic kernel, zero same-padding.
    Conv3d,
    /// Inputs `x, w, b`. Stride 2, kernel 2.
    TransposedConv3d,
    /// Inputs `x, gamma, beta`.
    InstanceNorm,
    LeakyRelu {
        slope: f64,
    },
    Dropout {
        p: f64,
    },
    MaxPool3d,
    /// Any number of inputs, joined on the channel axis.
    Concat,
    Softmax,
    Add,
    Scale(f64),
    /// Inputs `x` and optionally a mask; sums everything to a scalar.
    ReduceSum,
    /// Inputs `probs, target, mask`; per-class soft Dice `[1, c, 1, 1, 1]`.
    DiceTerms,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Conv3d => "conv3d",
            OpKind::TransposedConv3d => "transposed_conv3d",
            OpKind::InstanceNorm => "instance_norm",
            OpKind::LeakyRelu { .. } => "leaky_relu",
            OpKind::Dropout { .. } => "dropout",
            OpKind::MaxPool3d => "max_pool3d",
            OpKind::Concat => "concat",
            OpKind::Softmax => "softmax",
            OpKind::Add => "add",
            OpKind::Scale(_) => "scale",
            OpKind::ReduceSum => "reduce_sum",
            OpKind::DiceTerms => "dice_terms",
        }
    }
}

#[derive(Debug, Clone)]
pub enum Node {
    Input(String),
    /// Index into the graph's parameter list.
    Param(usize),
    Const(Tensor),
    Op {
        kind: OpKind,
        inputs: Vec<NodeId>,
    },
}

/// Per-node state kept from forward for the adjoint pass.
#[derive(Debug, Clone)]
enum Aux {
    None,
    Dropout(Vec<f64>),
    Norm { xhat: Tensor, inv_std: Vec<f64> },
    Pool(Vec<u32>),
    Dice(Vec<(f64, f64)>),
}

#[derive(Debug, Clone)]
struct Cache {
    values: Vec<Option<Tensor>>,
    aux: Vec<Aux>,
}

/// Which leaves receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTargets {
    All,
    Params,
    Inputs,
}

#[derive(Debug, Clone, Default)]
pub struct Gradients {
    /// Indexed like the graph's parameters; `None` when not requested.
    pub params: Vec<Option<Tensor>>,
    pub inputs: BTreeMap<String, Tensor>,
}

/// Static computation graph: nodes are appended in topological order, so any
/// node's inputs always precede it.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_names: Vec<String>,
    params: Vec<Tensor>,
    cache: Option<Cache>,
    checked: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self {
            checked: true,
            ..Self::default()
        }
    }

    /// In checked mode (the default) every forward value must be finite.
    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node) -> NodeId {
        if let Node::Op { kind, inputs } = &node {
            for &i in inputs {
                assert!(i < self.nodes.len(), "{} input {i} does not precede it", kind.name());
            }
        }
        self.cache = None;
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(Node::Input(name.to_string()))
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        self.param_names.push(name.to_string());
        self.params.push(value);
        self.push(Node::Param(self.params.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Node::Const(value))
    }

    pub fn op(&mut self, kind: OpKind, inputs: &[NodeId]) -> NodeId {
        self.push(Node::Op {
            kind,
            inputs: inputs.to_vec(),
        })
    }

    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.op(OpKind::Conv3d, &[x, w, b])
    }

    pub fn transposed_conv3d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.op(OpKind::TransposedConv3d, &[x, w, b])
    }

    pub fn instance_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        self.op(OpKind::InstanceNorm, &[x, gamma, beta])
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        self.op(OpKind::LeakyRelu { slope }, &[x])
    }

    pub fn dropout(&mut self, x: NodeId, p: f64) -> NodeId {
        assert!((0.0..1.0).contains(&p), "dropout p = {p}");
        self.op(OpKind::Dropout { p }, &[x])
    }

    pub fn max_pool3d(&mut self, x: NodeId) -> NodeId {
        self.op(OpKind::MaxPool3d, &[x])
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        self.op(OpKind::Concat, parts)
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.op(OpKind::Softmax, &[x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.op(OpKind::Add, &[a, b])
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        self.op(OpKind::Scale(s), &[x])
    }

    pub fn reduce_sum(&mut self, x: NodeId, mask: Option<NodeId>) -> NodeId {
        match mask {
            Some(m) => self.op(OpKind::ReduceSum, &[x, m]),
            None => self.op(OpKind::ReduceSum, &[x]),
        }
    }

    pub fn dice_terms(&mut self, probs: NodeId, target: NodeId, mask: NodeId) -> NodeId {
        self.op(OpKind::DiceTerms, &[probs, target, mask])
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Mutable parameter access; invalidates cached activations.
    pub fn params_mut(&mut self) -> &mut [Tensor] {
        self.cache = None;
        &mut self.params
    }

    /// Sets the rate of every dropout node.
    pub fn set_dropout_rate(&mut self, p: f64) {
        self.cache = None;
        for node in &mut self.nodes {
            if let Node::Op {
                kind: OpKind::Dropout { p: q },
                ..
            } = node
            {
                *q = p;
            }
        }
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.param_names.iter().position(|n| n == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn input_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Input(name) => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Value of a node from the last forward pass.
    pub fn value(&self, id: NodeId) -> Result<&Tensor, AdError> {
        match &self.nodes[id] {
            Node::Param(i) => Ok(&self.params[*i]),
            Node::Const(t) => Ok(t),
            _ => self
                .cache
                .as_ref()
                .and_then(|c| c.values[id].as_ref())
                .ok_or(AdError::NotEvaluated(id)),
        }
    }

    /// Evaluates every node. Dropout masks are a pure function of
    /// `(key, node id, element index)`, so the same key reproduces the same
    /// realisation.
    pub fn forward(&mut self, inputs: &[(&str, &Tensor)], mode: Mode, key: u64) -> Result<(), AdError> {
        let active = vec![true; self.nodes.len()];
        self.run(inputs, &active, mode, key)
    }

    /// Like [`Graph::forward`] but evaluates only `target` and its ancestors;
    /// inputs feeding other branches may be omitted.
    pub fn forward_to(
        &mut self,
        inputs: &[(&str, &Tensor)],
        target: NodeId,
        mode: Mode,
        key: u64,
    ) -> Result<(), AdError> {
        self.cache = None;
        let mut active = vec![false; target + 1];
        active[target] = true;
        for id in (0..=target).rev() {
            if let (true, Node::Op { inputs, .. }) = (active[id], &self.nodes[id]) {
                for &i in inputs {
                    active[i] = true;
                }
            }
        }
        self.run(inputs, &active, mode, key)
    }

    fn run(&mut self, inputs: &[(&str, &Tensor)], active: &[bool], mode: Mode, key: u64) -> Result<(), AdError> {
        self.cache = None;
        let mut cache = Cache {
            values: vec![None; self.nodes.len()],
            aux: vec![Aux::None; self.nodes.len()],
        };
        for id in (0..active.len()).filter(|&i| active[i]) {
            let (value, aux) = match &self.nodes[id] {
                Node::Param(_) | Node::Const(_) => continue,
                Node::Input(name) => {
                    let t = inputs
                        .iter()
                        .find(|(n, _)| n == name)
                        .map(|(_, t)| (*t).clone())
                        .ok_or_else(|| AdError::MissingInput(name.clone()))?;
                    (t, Aux::None)
                }
                Node::Op { kind, inputs } => {
                    let args: Vec<&Tensor> = inputs
                        .iter()
                        .map(|&i| self.lookup(&cache, i))
                        .collect::<Result<_, _>>()?;
                    eval_op(*kind, &args, mode, key, id)?
                }
            };
            if self.checked && !value.is_finite() {
                return Err(AdError::NonFinite {
                    node: id,
                    op: self.node_label(id),
                });
            }
            cache.values[id] = Some(value);
            cache.aux[id] = aux;
        }
        self.cache = Some(cache);
        Ok(())
    }

    fn lookup<'a>(&'a self, cache: &'a Cache, id: NodeId) -> Result<&'a Tensor, AdError> {
        match &self.nodes[id] {
            Node::Param(i) => Ok(&self.params[*i]),
            Node::Const(t) => Ok(t),
            _ => cache.values[id].as_ref().ok_or(AdError::NotEvaluated(id)),
        }
    }

    fn node_label(&self, id: NodeId) -> String {
        match &self.nodes[id] {
            Node::Input(n) => format!("input {n}"),
            Node::Param(i) => format!("param {}", self.param_names[*i]),
            Node::Const(_) => "const".into(),
            Node::Op { kind, .. } => kind.name().into(),
        }
    }

    /// Reverse pass from `output` seeded with `cotangent`. Only adjoints on
    /// paths to the requested leaves are computed.
    pub fn backward(&self, output: NodeId, cotangent: &Tensor, targets: GradTargets) -> Result<Gradients, AdError> {
        let cache = self.cache.as_ref().ok_or(AdError::BackwardBeforeForward)?;
        let out_val = self.lookup(cache, output)?;
        if out_val.shape() != cotangent.shape() {
            return Err(AdError::Shape(format!(
                "cotangent {:?} does not match output {:?}",
                cotangent.shape(),
                out_val.shape()
            )));
        }
        let mut needs = vec![false; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            needs[id] = match node {
                Node::Input(_) => targets != GradTargets::Params,
                Node::Param(_) => targets != GradTargets::Inputs,
                Node::Const(_) => false,
                Node::Op { inputs, .. } => inputs.iter().any(|&i| needs[i]),
            };
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[output] = Some(cotangent.clone());
        let mut grads = Gradients {
            params: vec![None; self.params.len()],
            inputs: BTreeMap::new(),
        };
        for id in (0..=output).rev() {
            if !needs[id] {
                continue;
            }
            let Some(dy) = adj[id].take() else { continue };
            match &self.nodes[id] {
                Node::Input(name) => {
                    grads.inputs.insert(name.clone(), dy);
                }
                Node::Param(i) => grads.params[*i] = Some(dy),
                Node::Const(_) => {}
                Node::Op { kind, inputs } => {
                    let args: Vec<&Tensor> = inputs
                        .iter()
                        .map(|&i| self.lookup(cache, i))
                        .collect::<Result<_, _>>()?;
                    let want: Vec<bool> = inputs.iter().map(|&i| needs[i]).collect();
                    let y = self.lookup(cache, id)?;
                    let parts = adjoint(*kind, &dy, &args, y, &cache.aux[id], &want);
                    for (&i, g) in inputs.iter().zip(parts) {
                        if let Some(g) = g {
                            match &mut adj[i] {
                                Some(acc) => acc.add_assign(&g),
                                slot => *slot = Some(g),
                            }
                        }
                    }
                }
            }
        }
        // Requested leaves without any path to the output get zero gradients.
        for (id, node) in self.nodes.iter().enumerate() {
            match node {
                Node::Input(name) if needs[id] && !grads.inputs.contains_key(name) => {
                    if let Ok(v) = self.lookup(cache, id) {
                        grads.inputs.insert(name.clone(), Tensor::zeros(v.shape()));
                    }
                }
                Node::Param(i) if needs[id] && grads.params[*i].is_none() => {
                    grads.params[*i] = Some(Tensor::zeros(self.params[*i].shape()));
                }
                _ => {}
            }
        }
        Ok(grads)
    }
}

fn shape_err(kind: OpKind, node: NodeId, msg: String) -> AdError {
    AdError::Shape(format!("{} (node {node}): {msg}", kind.name()))
}

fn check_arity(kind: OpKind, node: NodeId, args: &[&Tensor], n: usize) -> Result<(), AdError> {
    if args.len() != n {
        return Err(shape_err(kind, node, format!("expects {n} inputs, got {}", args.len())));
    }
    Ok(())
}

fn check_params(kind: OpKind, node: NodeId, t: &Tensor, what: &str, channels: usize) -> Result<(), AdError> {
    if t.shape() != [1, channels, 1, 1, 1] {
        return Err(shape_err(
            kind,
            node,
            format!("{what} shape {:?}, expected [1, {channels}, 1, 1, 1]", t.shape()),
        ));
    }
    Ok(())
}

fn eval_op(kind: OpKind, args: &[&Tensor], mode: Mode, key: u64, node: NodeId) -> Result<(Tensor, Aux), AdError> {
    let err = |msg: String| shape_err(kind, node, msg);
    match kind {
        OpKind::Conv3d => {
            check_arity(kind, node, args, 3)?;
            let (x, w, b) = (args[0], args[1], args[2]);
            let ws = w.shape();
            if ws[2] % 2 == 0 || ws[2] != ws[3] || ws[2] != ws[4] {
                return Err(err(format!("kernel {:?} must be cubic with odd size", &ws[2..])));
            }
            if ws[1] != x.channels() {
                return Err(err(format!(
                    "input has {} channels (axis 1) but weight expects {}",
                    x.channels(),
                    ws[1]
                )));
            }
            check_params(kind, node, b, "bias", ws[0])?;
            Ok((ops::conv3d(x, w, b), Aux::None))
        }
        OpKind::TransposedConv3d => {
            check_arity(kind, node, args, 3)?;
            let (x, w, b) = (args[0], args[1], args[2]);
            let ws = w.shape();
            if ws[2..] != [2, 2, 2] {
                return Err(err(format!("kernel {:?} must be 2x2x2", &ws[2..])));
            }
            if ws[0] != x.channels() {
                return Err(err(format!(
                    "input has {} channels (axis 1) but weight expects {}",
                    x.channels(),
                    ws[0]
                )));
            }
            check_params(kind, node, b, "bias", ws[1])?;
            Ok((ops::conv_transpose3d(x, w, b), Aux::None))
        }
        OpKind::InstanceNorm => {
            check_arity(kind, node, args, 3)?;
            let x = args[0];
            check_params(kind, node, args[1], "gamma", x.channels())?;
            check_params(kind, node, args[2], "beta", x.channels())?;
            let (y, xhat, inv_std) = ops::instance_norm(x, args[1], args[2], NORM_EPS);
            Ok((y, Aux::Norm { xhat, inv_std }))
        }
        OpKind::LeakyRelu { slope } => {
            check_arity(kind, node, args, 1)?;
            Ok((ops::leaky_relu(args[0], slope), Aux::None))
        }
        OpKind::Dropout { p } => {
            check_arity(kind, node, args, 1)?;
            let x = args[0];
            if !mode.dropout_active() {
                return Ok((x.clone(), Aux::None));
            }
            let stream = derive(key, purpose::DROPOUT, node as u64);
            let keep = 1.0 / (1.0 - p);
            let mask: Vec<f64> = (0..x.len())
                .map(|i| if uniform_at(stream, i as u64) < p { 0.0 } else { keep })
                .collect();
            let mut y = x.clone();
            for (v, m) in y.data_mut().iter_mut().zip(&mask) {
                *v *= m;
            }
            Ok((y, Aux::Dropout(mask)))
        }
        OpKind::MaxPool3d => {
            check_arity(kind, node, args, 1)?;
            let s = args[0].spatial();
            if let Some(axis) = (0..3).find(|&a| !s[a].is_multiple_of(2)) {
                return Err(err(format!("spatial axis {} has odd size {}", axis + 2, s[axis])));
            }
            let (y, arg) = ops::max_pool(args[0]);
            Ok((y, Aux::Pool(arg)))
        }
        OpKind::Concat => {
            if args.is_empty() {
                return Err(err("needs at least one input".into()));
            }
            let s0 = args[0].shape();
            for (i, t) in args.iter().enumerate() {
                let s = t.shape();
                if let Some(axis) = [0, 2, 3, 4].into_iter().find(|&a| s[a] != s0[a]) {
                    return Err(err(format!(
                        "input {i} has size {} on axis {axis}, expected {}",
                        s[axis], s0[axis]
                    )));
                }
            }
            Ok((ops::concat(args), Aux::None))
        }
        OpKind::Softmax => {
            check_arity(kind, node, args, 1)?;
            Ok((ops::softmax(args[0]), Aux::None))
        }
        OpKind::Add => {
            check_arity(kind, node, args, 2)?;
            if args[0].shape() != args[1].shape() {
                return Err(err(format!("{:?} vs {:?}", args[0].shape(), args[1].shape())));
            }
            let mut y = args[0].clone();
            y.add_assign(args[1]);
            Ok((y, Aux::None))
        }
        OpKind::Scale(s) => {
            check_arity(kind, node, args, 1)?;
            Ok((args[0].map(|v| s * v), Aux::None))
        }
        OpKind::ReduceSum => {
            let x = args[0];
            let total = match args.len() {
                1 => x.sum(),
                2 => {
                    check_mask(kind, node, x.shape(), args[1])?;
                    (0..x.len())
                        .map(|i| x.data()[i] * ops::mask_at(args[1], x.shape(), i))
                        .sum()
                }
                n => return Err(err(format!("expects 1 or 2 inputs, got {n}"))),
            };
            Ok((Tensor::scalar(total), Aux::None))
        }
        OpKind::DiceTerms => {
            check_arity(kind, node, args, 3)?;
            let (p, g, m) = (args[0], args[1], args[2]);
            if p.shape() != g.shape() {
                return Err(err(format!("probs {:?} vs target {:?}", p.shape(), g.shape())));
            }
            let ms = m.shape();
            let ps = p.shape();
            if ms != [ps[0], 1, ps[2], ps[3], ps[4]] {
                return Err(err(format!("mask {ms:?} must be single-channel over {ps:?}")));
            }
            let (y, parts) = ops::dice_terms(p, g, m, DICE_EPS);
            Ok((y, Aux::Dice(parts)))
        }
    }
}

fn check_mask(kind: OpKind, node: NodeId, xs: [usize; 5], m: &Tensor) -> Result<(), AdError> {
    let ms = m.shape();
    if ms == xs || ms == [xs[0], 1, xs[2], xs[3], xs[4]] {
        Ok(())
    } else {
        Err(shape_err(
            kind,
            node,
            format!("mask {ms:?} does not broadcast to {xs:?}"),
        ))
    }
}

/// Input adjoints of one op; `want[i]` gates whether input `i` is computed.
fn adjoint(kind: OpKind, dy: &Tensor, args: &[&Tensor], y: &Tensor, aux: &Aux, want: &[bool]) -> Vec<Option<Tensor>> {
    let mut out: Vec<Option<Tensor>> = vec![None; args.len()];
    match kind {
        OpKind::Conv3d => {
            if want[0] {
                out[0] = Some(ops::conv3d_grad_input(dy, args[1], args[0].shape()));
            }
            if want[1] || want[2] {
                let (dw, db) = ops::conv3d_grad_params(dy, args[0], args[1].shape());
                out[1] = want[1].then_some(dw);
                out[2] = want[2].then_some(db);
            }
        }
        OpKind::TransposedConv3d => {
            if want[0] {
                out[0] = Some(ops::conv_transpose3d_grad_input(dy, args[1], args[0].shape()));
            }
            if want[1] || want[2] {
                let (dw, db) = ops::conv_transpose3d_grad_params(dy, args[0], args[1].shape());
                out[1] = want[1].then_some(dw);
                out[2] = want[2].then_some(db);
            }
        }
        OpKind::InstanceNorm => {
            let Aux::Norm { xhat, inv_std } = aux else {
                unreachable!("norm cache")
            };
            let (dx, dg, db) = ops::instance_norm_grad(dy, xhat, inv_std, args[1]);
            out[0] = want[0].then_some(dx);
            out[1] = want[1].then_some(dg);
            out[2] = want[2].then_some(db);
        }
        OpKind::LeakyRelu { slope } => out[0] = Some(ops::leaky_relu_grad(dy, args[0], slope)),
        OpKind::Dropout { .. } => {
            let mut dx = dy.clone();
            if let Aux::Dropout(mask) = aux {
                for (g, m) in dx.data_mut().iter_mut().zip(mask) {
                    *g *= m;
                }
            }
            out[0] = Some(dx);
        }
        OpKind::MaxPool3d => {
            let Aux::Pool(arg) = aux else {
                unreachable!("pool cache")
            };
            out[0] = Some(ops::max_pool_grad(dy, arg, args[0].shape()));
        }
        OpKind::Concat => {
            let channels: Vec<usize> = args.iter().map(|t| t.channels()).collect();
            for (i, g) in ops::concat_grad(dy, &channels).into_iter().enumerate() {
                if want[i] {
                    out[i] = Some(g);
                }
            }
        }
        OpKind::Softmax => out[0] = Some(ops::softmax_grad(dy, y)),
        OpKind::Add => {
            out[0] = want[0].then(|| dy.clone());
            out[1] = want[1].then(|| dy.clone());
        }
        OpKind::Scale(s) => out[0] = Some(dy.map(|v| s * v)),
        OpKind::ReduceSum => {
            let up = dy.data()[0];
            let xs = args[0].shape();
            let dx = match args.get(1) {
                None => Tensor::full(xs, up),
                Some(m) => {
                    let data = (0..args[0].len()).map(|i| up * ops::mask_at(m, xs, i)).collect();
                    Tensor::new(xs, data).expect("reduce grad shape")
                }
            };
            out[0] = Some(dx);
        }
        OpKind::DiceTerms => {
            let Aux::Dice(parts) = aux else {
                unreachable!("dice cache")
            };
            out[0] = Some(ops::dice_terms_grad(dy, args[1], args[2], parts));
        }
    }
    // Never hand back an adjoint nobody asked for.
    for (o, &w) in out.iter_mut().zip(want) {
        if !w {
            *o = None;
        }
    }
    out
}
