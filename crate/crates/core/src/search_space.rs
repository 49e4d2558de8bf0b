//! Relaxed architecture search space.
//!
//! A [`Supernet`] is a DAG over `nodes` vertices: vertex 0 takes the party's
//! features, the last vertex produces the party representation and every
//! pair `i < j` is joined by an edge. Each edge computes a softmax-weighted
//! mixture of the candidate operations in the [`OpSet`]; the logits live in
//! [`ArchParams`]. [`discretize`] turns the logits into a [`DiscreteArch`]
//! and [`Supernet::hard_forward`] evaluates it.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{softmax_in_place, Graph, GraphError, ParamSet, Tensor, Var};

/// Parameter name under which the architecture logits are registered.
pub const ALPHA: &str = "alpha";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchSpaceError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid operation set: {0}")]
    InvalidOpSet(String),
    #[error("a supernet needs at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("input has {got} features, supernet expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("architecture logits have shape {got:?}, expected {expected:?}")]
    AlphaShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("discrete architecture inconsistent with supernet: {0}")]
    Inconsistent(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Zero,
    SkipConnect,
    LinearRelu,
    LinearTanh,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Zero => "zero",
            OpKind::SkipConnect => "skip_connect",
            OpKind::LinearRelu => "linear_relu",
            OpKind::LinearTanh => "linear_tanh",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [Self::Zero, Self::SkipConnect, Self::LinearRelu, Self::LinearTanh]
            .into_iter()
            .find(|k| k.name() == name)
    }

    pub fn is_parametric(self) -> bool {
        matches!(self, OpKind::LinearRelu | OpKind::LinearTanh)
    }
}

/// Ordered candidate operations shared by every edge.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<OpKind>", into = "Vec<OpKind>")]
pub struct OpSet(Vec<OpKind>);

impl OpSet {
    pub fn new(ops: Vec<OpKind>) -> Result<Self, SearchSpaceError> {
        if ops.len() < 2 {
            return Err(SearchSpaceError::InvalidOpSet("need at least 2 operations".into()));
        }
        if ops.iter().filter(|&&o| o == OpKind::Zero).count() > 1 {
            return Err(SearchSpaceError::InvalidOpSet("zero listed more than once".into()));
        }
        if ops.iter().all(|&o| o == OpKind::Zero) {
            return Err(SearchSpaceError::InvalidOpSet("no non-zero operation".into()));
        }
        Ok(Self(ops))
    }

    pub fn ops(&self) -> &[OpKind] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn index_of(&self, kind: OpKind) -> Option<usize> {
        self.0.iter().position(|&k| k == kind)
    }
}

impl Default for OpSet {
    fn default() -> Self {
        Self(vec![
            OpKind::Zero,
            OpKind::SkipConnect,
            OpKind::LinearRelu,
            OpKind::LinearTanh,
        ])
    }
}

impl TryFrom<Vec<OpKind>> for OpSet {
    type Error = SearchSpaceError;
    fn try_from(v: Vec<OpKind>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<OpSet> for Vec<OpKind> {
    fn from(o: OpSet) -> Self {
        o.0
    }
}

/// Architecture logits, one row per edge and one column per operation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    alpha: Tensor,
}

impl ArchParams {
    pub fn zeros(edges: usize, ops: usize) -> Self {
        Self {
            alpha: Tensor::zeros(vec![edges, ops]),
        }
    }

    pub fn from_tensor(alpha: Tensor) -> Result<Self, SearchSpaceError> {
        if alpha.shape().len() != 2 || !alpha.is_finite() {
            return Err(SearchSpaceError::AlphaShape {
                expected: vec![],
                got: alpha.shape().to_vec(),
            });
        }
        Ok(Self { alpha })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.alpha
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.alpha
    }

    pub fn edges(&self) -> usize {
        self.alpha.rows()
    }

    pub fn row(&self, edge: usize) -> &[f64] {
        self.alpha.row(edge)
    }
}

/// Softmax over one edge's logits.
pub fn arch_softmax(alpha_edge: &[f64]) -> Vec<f64> {
    let mut w = alpha_edge.to_vec();
    softmax_in_place(&mut w);
    w
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupernetSpec {
    pub nodes: usize,
    pub hidden: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    #[serde(default)]
    pub opset: OpSet,
}

/// How edge weights are obtained during a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Mixing<'a> {
    /// Softmax of the registered logits; differentiable in both the logits
    /// and the operation parameters.
    Soft(Var),
    /// Constant per-edge weight vectors. Zero-weight operations are not
    /// evaluated at all.
    Fixed(&'a [Vec<f64>]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Supernet {
    dims: Vec<usize>,
    edges: Vec<Edge>,
    opset: OpSet,
    weights: ParamSet,
}

fn op_param_name(edge: usize, kind: OpKind, part: &str) -> String {
    format!("net.e{edge}.{}.{part}", kind.name())
}

/// Builds the fully connected supernet with zero logits and uniform
/// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` operation parameters.
pub fn build_supernet<R: Rng + ?Sized>(
    spec: &SupernetSpec,
    rng: &mut R,
) -> Result<(Supernet, ArchParams), SearchSpaceError> {
    if spec.nodes < 2 {
        return Err(SearchSpaceError::TooFewNodes(spec.nodes));
    }
    let mut dims = vec![spec.hidden; spec.nodes];
    dims[0] = spec.in_dim;
    dims[spec.nodes - 1] = spec.out_dim;

    let mut edges = Vec::new();
    for to in 1..spec.nodes {
        for from in 0..to {
            edges.push(Edge { from, to });
        }
    }

    let mut weights = ParamSet::new();
    for (e, edge) in edges.iter().enumerate() {
        let (fan_in, fan_out) = (dims[edge.from], dims[edge.to]);
        let s = 1.0 / (fan_in as f64).sqrt();
        for &kind in spec.opset.ops() {
            if !kind.is_parametric() {
                continue;
            }
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-s..=s)).collect();
            let b = (0..fan_out).map(|_| rng.random_range(-s..=s)).collect();
            weights.insert(op_param_name(e, kind, "w"), Tensor::matrix(fan_in, fan_out, w));
            weights.insert(op_param_name(e, kind, "b"), Tensor::vector(b));
        }
    }

    let alpha = ArchParams::zeros(edges.len(), spec.opset.len());
    Ok((
        Supernet {
            dims,
            edges,
            opset: spec.opset.clone(),
            weights,
        },
        alpha,
    ))
}

/// Applies one candidate operation to `x`, producing `out_dim` columns.
fn op_forward(
    g: &mut Graph,
    kind: OpKind,
    x: Var,
    params: &ParamSet,
    edge: usize,
    out_dim: usize,
) -> Result<Var, SearchSpaceError> {
    let rows = g.value(x).rows();
    let v = match kind {
        OpKind::Zero => g.constant(Tensor::zeros(vec![rows, out_dim])),
        OpKind::SkipConnect => g.resize_cols(x, out_dim)?,
        OpKind::LinearRelu | OpKind::LinearTanh => {
            let wn = op_param_name(edge, kind, "w");
            let bn = op_param_name(edge, kind, "b");
            let w = g.param(&wn, params.get(&wn).expect("edge weight"));
            let b = g.param(&bn, params.get(&bn).expect("edge bias"));
            let z = g.matmul(x, w)?;
            let z = g.add_bias(z, b)?;
            if kind == OpKind::LinearRelu {
                g.relu(z)?
            } else {
                g.tanh(z)?
            }
        }
    };
    Ok(v)
}

/// One relaxed edge: `sum_o softmax(alpha_edge)_o * o(x)`.
///
/// `alpha_edge` is a `[1, |O|]` row of logits on the graph; `params` holds
/// the parametric operations of edge `edge`.
pub fn mixed_op_forward(
    g: &mut Graph,
    x: Var,
    alpha_edge: Var,
    opset: &OpSet,
    params: &ParamSet,
    edge: usize,
    out_dim: usize,
) -> Result<Var, SearchSpaceError> {
    let weights = g.softmax(alpha_edge)?;
    let mut outs = Vec::with_capacity(opset.len());
    for &kind in opset.ops() {
        outs.push(op_forward(g, kind, x, params, edge, out_dim)?);
    }
    Ok(g.weighted_sum(weights, &outs)?)
}

impl Supernet {
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().expect("at least two nodes")
    }

    pub fn nodes(&self) -> usize {
        self.dims.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn opset(&self) -> &OpSet {
        &self.opset
    }

    pub fn weights(&self) -> &ParamSet {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut ParamSet {
        &mut self.weights
    }

    pub fn set_weights(&mut self, weights: ParamSet) {
        self.weights = weights;
    }

    pub fn alpha_shape(&self) -> [usize; 2] {
        [self.edges.len(), self.opset.len()]
    }

    fn check_alpha(&self, alpha: &Tensor) -> Result<(), SearchSpaceError> {
        let expected = self.alpha_shape().to_vec();
        if alpha.shape() != expected.as_slice() {
            return Err(SearchSpaceError::AlphaShape {
                expected,
                got: alpha.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Registers the logits as the `alpha` parameter and runs the relaxed
    /// network.
    pub fn forward_soft(
        &self,
        g: &mut Graph,
        x: Var,
        alpha: &ArchParams,
    ) -> Result<Var, SearchSpaceError> {
        self.check_alpha(alpha.tensor())?;
        let a = g.param(ALPHA, alpha.tensor());
        self.forward(g, x, Mixing::Soft(a))
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mixing: Mixing<'_>) -> Result<Var, SearchSpaceError> {
        self.forward_with(g, x, &self.weights, mixing)
    }

    /// Runs the network with operation parameters taken from `weights`,
    /// which must mirror [`Supernet::weights`] (e.g. a momentum copy).
    pub fn forward_with(
        &self,
        g: &mut Graph,
        x: Var,
        weights: &ParamSet,
        mixing: Mixing<'_>,
    ) -> Result<Var, SearchSpaceError> {
        let got = g.value(x).cols();
        if got != self.in_dim() || g.value(x).shape().len() != 2 {
            return Err(SearchSpaceError::InputDim {
                expected: self.in_dim(),
                got,
            });
        }
        if let Mixing::Soft(a) = mixing {
            self.check_alpha(g.value(a))?;
        }
        if let Mixing::Fixed(w) = mixing {
            if w.len() != self.edges.len() || w.iter().any(|r| r.len() != self.opset.len()) {
                return Err(SearchSpaceError::Inconsistent("fixed weight table shape".into()));
            }
        }
        let rows = g.value(x).rows();
        let mut values: Vec<Var> = Vec::with_capacity(self.dims.len());
        values.push(x);
        for to in 1..self.dims.len() {
            let mut acc: Option<Var> = None;
            for (e, edge) in self.edges.iter().enumerate().filter(|(_, ed)| ed.to == to) {
                let input = values[edge.from];
                let contribution = match mixing {
                    Mixing::Soft(a) => {
                        let row = g.row(a, e)?;
                        mixed_op_forward(g, input, row, &self.opset, weights, e, self.dims[to])?
                    }
                    Mixing::Fixed(table) => {
                        let w = &table[e];
                        if w.iter().all(|&v| v == 0.0) {
                            continue;
                        }
                        let mut outs = Vec::with_capacity(w.len());
                        for (&kind, &wo) in self.opset.ops().iter().zip(w) {
                            outs.push(if wo == 0.0 {
                                g.constant(Tensor::zeros(vec![rows, self.dims[to]]))
                            } else {
                                op_forward(g, kind, input, weights, e, self.dims[to])?
                            });
                        }
                        let wv = g.constant(Tensor::vector(w.clone()));
                        g.weighted_sum(wv, &outs)?
                    }
                };
                acc = Some(match acc {
                    None => contribution,
                    Some(prev) => g.add(prev, contribution)?,
                });
            }
            let value = match acc {
                Some(v) => v,
                None => g.constant(Tensor::zeros(vec![rows, self.dims[to]])),
            };
            values.push(value);
        }
        Ok(*values.last().expect("output node"))
    }

    /// Evaluates the discretized network: every retained edge applies only
    /// its chosen operation with weight one.
    pub fn hard_forward(
        &self,
        g: &mut Graph,
        x: Var,
        arch: &DiscreteArch,
    ) -> Result<Var, SearchSpaceError> {
        let table = arch.indicator_weights(self)?;
        self.forward(g, x, Mixing::Fixed(&table))
    }
}

/// One retained edge of a discretized architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiscreteEdge {
    pub edge: usize,
    pub from: usize,
    pub to: usize,
    pub op: OpKind,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscreteArch {
    edges: Vec<DiscreteEdge>,
}

#[derive(Serialize, Deserialize)]
struct ArchEdgeDoc {
    from: usize,
    to: usize,
    op: String,
}

#[derive(Serialize, Deserialize)]
struct ArchDoc {
    edges: Vec<ArchEdgeDoc>,
}

/// Score of an edge: log of its largest non-zero operation weight,
/// computed from max-shifted logits so that shifting the row by a constant
/// leaves it unchanged.
fn edge_score(row: &[f64], zero: Option<usize>) -> (usize, f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let mut best: Option<(usize, f64)> = None;
    for (o, &v) in row.iter().enumerate() {
        if Some(o) == zero {
            continue;
        }
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((o, v));
        }
    }
    let (op, logit) = best.expect("op set has a non-zero operation");
    (op, (logit - max) - lse)
}

/// Picks, per edge, the strongest non-zero operation and keeps, per node,
/// the `min(2, indegree)` incoming edges with the largest such weight.
/// Ties go to the lower index.
pub fn discretize(alpha: &ArchParams, supernet: &Supernet) -> Result<DiscreteArch, SearchSpaceError> {
    supernet.check_alpha(alpha.tensor())?;
    if !alpha.tensor().is_finite() {
        return Err(SearchSpaceError::Graph(GraphError::NonFinite { op: "discretize" }));
    }
    let zero = supernet.opset.index_of(OpKind::Zero);
    let scored: Vec<(usize, f64)> = (0..alpha.edges())
        .map(|e| edge_score(alpha.row(e), zero))
        .collect();

    let mut kept = Vec::new();
    for to in 1..supernet.nodes() {
        let mut incoming: Vec<usize> = supernet
            .edges
            .iter()
            .enumerate()
            .filter(|(_, ed)| ed.to == to)
            .map(|(e, _)| e)
            .collect();
        // Stable sort keeps lower edge indices first among equal scores.
        incoming.sort_by(|&a, &b| scored[b].1.total_cmp(&scored[a].1));
        let keep = incoming.len().min(2);
        let mut chosen: Vec<usize> = incoming[..keep].to_vec();
        chosen.sort_unstable();
        for e in chosen {
            let ed = supernet.edges[e];
            kept.push(DiscreteEdge {
                edge: e,
                from: ed.from,
                to: ed.to,
                op: supernet.opset.ops()[scored[e].0],
            });
        }
    }
    kept.sort_by_key(|d| d.edge);
    Ok(DiscreteArch { edges: kept })
}

impl DiscreteArch {
    pub fn edges(&self) -> &[DiscreteEdge] {
        &self.edges
    }

    /// Per-edge weight vectors: one-hot on the chosen operation for retained
    /// edges, all zero elsewhere.
    pub fn indicator_weights(&self, supernet: &Supernet) -> Result<Vec<Vec<f64>>, SearchSpaceError> {
        self.validate(supernet)?;
        let mut table = vec![vec![0.0; supernet.opset.len()]; supernet.edges.len()];
        for d in &self.edges {
            let o = supernet.opset.index_of(d.op).expect("validated");
            table[d.edge][o] = 1.0;
        }
        Ok(table)
    }

    pub fn validate(&self, supernet: &Supernet) -> Result<(), SearchSpaceError> {
        let bad = |m: String| Err(SearchSpaceError::Inconsistent(m));
        let mut seen = vec![false; supernet.edges.len()];
        for d in &self.edges {
            let Some(ed) = supernet.edges.get(d.edge) else {
                return bad(format!("edge {} does not exist", d.edge));
            };
            if ed.from != d.from || ed.to != d.to {
                return bad(format!("edge {} is {}->{}", d.edge, ed.from, ed.to));
            }
            if d.op == OpKind::Zero || supernet.opset.index_of(d.op).is_none() {
                return bad(format!("edge {} uses operation {}", d.edge, d.op.name()));
            }
            if std::mem::replace(&mut seen[d.edge], true) {
                return bad(format!("edge {} listed twice", d.edge));
            }
        }
        for to in 1..supernet.nodes() {
            let indegree = supernet.edges.iter().filter(|e| e.to == to).count();
            let kept = self.edges.iter().filter(|d| d.to == to).count();
            if kept != indegree.min(2) {
                return bad(format!("node {to} keeps {kept} edges"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let doc = ArchDoc {
            edges: self
                .edges
                .iter()
                .map(|d| ArchEdgeDoc {
                    from: d.from,
                    to: d.to,
                    op: d.op.name().to_string(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("serializable")
    }

    /// Parses an architecture document and resolves it against a supernet.
    pub fn from_json(json: &str, supernet: &Supernet) -> Result<Self, SearchSpaceError> {
        let doc: ArchDoc = serde_json::from_str(json)
            .map_err(|e| SearchSpaceError::Inconsistent(format!("bad document: {e}")))?;
        let mut edges = Vec::with_capacity(doc.edges.len());
        for ed in doc.edges {
            let op = OpKind::from_name(&ed.op)
                .ok_or_else(|| SearchSpaceError::Inconsistent(format!("unknown op {}", ed.op)))?;
            let e = supernet
                .edges
                .iter()
                .position(|x| x.from == ed.from && x.to == ed.to)
                .ok_or_else(|| {
                    SearchSpaceError::Inconsistent(format!("no edge {}->{}", ed.from, ed.to))
                })?;
            edges.push(DiscreteEdge {
                edge: e,
                from: ed.from,
                to: ed.to,
                op,
            });
        }
        edges.sort_by_key(|d| d.edge);
        let arch = DiscreteArch { edges };
        arch.validate(supernet)?;
        Ok(arch)
    }
}
