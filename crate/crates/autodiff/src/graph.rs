//! Static kernel graphs.
//!
//! A graph is built once against a [`ParamStore`] and then evaluated many
//! times with different batches. Every node's feature width is fixed at
//! construction and the batch size is supplied at evaluation time, so all
//! shape errors surface while the graph is being built.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// What a node holds for a batch of `B` examples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueKind {
    /// `B x dim` real matrix.
    Rows(usize),
    /// One integer per example, each in `0..classes`.
    Index(usize),
    /// A single real number for the whole batch (losses).
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ProtoKind {
    /// `x . p_k`
    Dot,
    /// `scale * cos(x, p_k)`
    Cosine { scale: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input,
    IndexInput,
    Affine {
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
    },
    Gelu {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
    },
    Dropout {
        x: NodeId,
        p: f64,
    },
    Concat {
        xs: Vec<NodeId>,
    },
    Embedding {
        table: ParamId,
        index: NodeId,
    },
    Softmax {
        x: NodeId,
    },
    L2Normalize {
        x: NodeId,
    },
    PrototypeLogits {
        x: NodeId,
        protos: ParamId,
        kind: ProtoKind,
    },
    WeightedCrossEntropy {
        logits: NodeId,
        target: NodeId,
        weights: Vec<f64>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        s: f64,
    },
    /// Row-wise select: the parameter vector where the flag is 1, `x` elsewhere.
    MaskedReplace {
        x: NodeId,
        flag: NodeId,
        emb: ParamId,
    },
    GumbelSt {
        logits: NodeId,
    },
    SumAll {
        x: NodeId,
    },
}

impl Op {
    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::IndexInput => vec![],
            Op::Affine { x, .. }
            | Op::Gelu { x }
            | Op::LayerNorm { x, .. }
            | Op::Dropout { x, .. }
            | Op::Softmax { x }
            | Op::L2Normalize { x }
            | Op::PrototypeLogits { x, .. }
            | Op::Scale { x, .. }
            | Op::SumAll { x } => vec![*x],
            Op::Concat { xs } => xs.clone(),
            Op::Embedding { index, .. } => vec![*index],
            Op::WeightedCrossEntropy { logits, target, .. } => vec![*logits, *target],
            Op::Add { a, b } => vec![*a, *b],
            Op::MaskedReplace { x, flag, .. } => vec![*x, *flag],
            Op::GumbelSt { logits } => vec![*logits],
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            Op::Affine { w, b, .. } => {
                let mut v = vec![*w];
                v.extend(b.iter().copied());
                v
            }
            Op::LayerNorm { gamma, beta, .. } => vec![*gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::PrototypeLogits { protos, .. } => vec![*protos],
            Op::MaskedReplace { emb, .. } => vec![*emb],
            _ => vec![],
        }
    }

    fn tag(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::IndexInput => "index",
            Op::Affine { .. } => "affine",
            Op::Gelu { .. } => "gelu",
            Op::LayerNorm { .. } => "layernorm",
            Op::Dropout { .. } => "dropout",
            Op::Concat { .. } => "concat",
            Op::Embedding { .. } => "embedding",
            Op::Softmax { .. } => "softmax",
            Op::L2Normalize { .. } => "l2norm",
            Op::PrototypeLogits { .. } => "prototypes",
            Op::WeightedCrossEntropy { .. } => "cross_entropy",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::MaskedReplace { .. } => "masked_replace",
            Op::GumbelSt { .. } => "gumbel_st",
            Op::SumAll { .. } => "sum",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub op: Op,
    pub kind: ValueKind,
    pub label: String,
}

/// An acyclic list of kernel nodes. Nodes may only reference earlier nodes,
/// which makes the list a topological order by construction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KernelGraph {
    nodes: Vec<Node>,
    names: HashMap<String, NodeId>,
}

impl KernelGraph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn lookup(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    pub fn find(&self, name: &str) -> Result<NodeId> {
        self.lookup(name)
            .ok_or_else(|| Error::Invalid(format!("graph has no node named `{name}`")))
    }

    pub fn kind(&self, id: NodeId) -> ValueKind {
        self.nodes[id.0].kind
    }

    /// Real-valued width of a `Rows` node (1 for scalars, 0 for index nodes).
    pub fn width(&self, id: NodeId) -> usize {
        match self.nodes[id.0].kind {
            ValueKind::Rows(d) => d,
            ValueKind::Scalar => 1,
            ValueKind::Index(_) => 0,
        }
    }

    /// Input nodes (real or index), in creation order.
    pub fn input_nodes(&self) -> impl Iterator<Item = (NodeId, &Node)> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Input | Op::IndexInput))
            .map(|(i, n)| (NodeId(i), n))
    }
}

/// Builds a [`KernelGraph`], validating shapes against a parameter store.
pub struct GraphBuilder<'a> {
    params: &'a ParamStore,
    graph: KernelGraph,
}

impl<'a> GraphBuilder<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self {
            params,
            graph: KernelGraph::default(),
        }
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    pub fn finish(self) -> KernelGraph {
        self.graph
    }

    pub fn kind(&self, id: NodeId) -> ValueKind {
        self.graph.kind(id)
    }

    pub fn width(&self, id: NodeId) -> usize {
        self.graph.width(id)
    }

    fn push(&mut self, op: Op, kind: ValueKind) -> NodeId {
        let id = NodeId(self.graph.nodes.len());
        let label = format!("{}#{}", op.tag(), id.0);
        self.graph.nodes.push(Node { op, kind, label });
        id
    }

    /// Attach a unique name to a node so it can be captured or overridden.
    pub fn name(&mut self, id: NodeId, name: &str) -> Result<NodeId> {
        if self.graph.names.contains_key(name) {
            return Err(Error::Invalid(format!("node name `{name}` already used")));
        }
        self.graph.names.insert(name.to_string(), id);
        self.graph.nodes[id.0].label = name.to_string();
        Ok(id)
    }

    fn rows(&self, id: NodeId, what: &str) -> Result<usize> {
        match self.graph.kind(id) {
            ValueKind::Rows(d) => Ok(d),
            k => Err(Error::Shape(format!("{what}: expected row-valued input, got {k:?}"))),
        }
    }

    fn pshape(&self, id: ParamId) -> &[usize] {
        self.params.get(id).tensor.shape()
    }

    pub fn input(&mut self, name: &str, dim: usize) -> Result<NodeId> {
        if dim == 0 {
            return Err(Error::Shape(format!("input `{name}` has zero width")));
        }
        let id = self.push(Op::Input, ValueKind::Rows(dim));
        self.name(id, name)
    }

    pub fn index_input(&mut self, name: &str, classes: usize) -> Result<NodeId> {
        if classes == 0 {
            return Err(Error::Shape(format!("index input `{name}` has no classes")));
        }
        let id = self.push(Op::IndexInput, ValueKind::Index(classes));
        self.name(id, name)
    }

    /// `y = x W^T + b` with `W` stored as `[out, in]`.
    pub fn affine(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>) -> Result<NodeId> {
        let din = self.rows(x, "affine")?;
        let ws = self.pshape(w).to_vec();
        if ws.len() != 2 || ws[1] != din {
            return Err(Error::Shape(format!(
                "affine weight `{}` has shape {:?}, input width {}",
                self.params.get(w).name,
                ws,
                din
            )));
        }
        if let Some(b) = b {
            let bs = self.pshape(b);
            if bs != [ws[0]] {
                return Err(Error::Shape(format!(
                    "affine bias `{}` has shape {:?}, expected [{}]",
                    self.params.get(b).name,
                    bs,
                    ws[0]
                )));
            }
        }
        Ok(self.push(Op::Affine { x, w, b }, ValueKind::Rows(ws[0])))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let d = self.rows(x, "gelu")?;
        Ok(self.push(Op::Gelu { x }, ValueKind::Rows(d)))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: ParamId, beta: ParamId) -> Result<NodeId> {
        let d = self.rows(x, "layernorm")?;
        for p in [gamma, beta] {
            if self.pshape(p) != [d] {
                return Err(Error::Shape(format!(
                    "layernorm parameter `{}` has shape {:?}, expected [{}]",
                    self.params.get(p).name,
                    self.pshape(p),
                    d
                )));
            }
        }
        Ok(self.push(Op::LayerNorm { x, gamma, beta }, ValueKind::Rows(d)))
    }

    pub fn dropout(&mut self, x: NodeId, p: f64) -> Result<NodeId> {
        let d = self.rows(x, "dropout")?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        Ok(self.push(Op::Dropout { x, p }, ValueKind::Rows(d)))
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Shape("concat of nothing".into()));
        }
        let mut d = 0;
        for &x in xs {
            d += self.rows(x, "concat")?;
        }
        Ok(self.push(Op::Concat { xs: xs.to_vec() }, ValueKind::Rows(d)))
    }

    pub fn embedding(&mut self, table: ParamId, index: NodeId) -> Result<NodeId> {
        let classes = match self.graph.kind(index) {
            ValueKind::Index(c) => c,
            k => return Err(Error::Shape(format!("embedding index must be an index node, got {k:?}"))),
        };
        let ts = self.pshape(table).to_vec();
        if ts.len() != 2 || ts[0] != classes {
            return Err(Error::Shape(format!(
                "embedding table `{}` has shape {:?} for {} classes",
                self.params.get(table).name,
                ts,
                classes
            )));
        }
        Ok(self.push(Op::Embedding { table, index }, ValueKind::Rows(ts[1])))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let d = self.rows(x, "softmax")?;
        Ok(self.push(Op::Softmax { x }, ValueKind::Rows(d)))
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let d = self.rows(x, "l2norm")?;
        Ok(self.push(Op::L2Normalize { x }, ValueKind::Rows(d)))
    }

    pub fn prototype_logits(&mut self, x: NodeId, protos: ParamId, kind: ProtoKind) -> Result<NodeId> {
        let d = self.rows(x, "prototypes")?;
        let ps = self.pshape(protos).to_vec();
        if ps.len() != 2 || ps[1] != d {
            return Err(Error::Shape(format!(
                "prototype matrix `{}` has shape {:?}, input width {}",
                self.params.get(protos).name,
                ps,
                d
            )));
        }
        Ok(self.push(Op::PrototypeLogits { x, protos, kind }, ValueKind::Rows(ps[0])))
    }

    pub fn weighted_cross_entropy(&mut self, logits: NodeId, target: NodeId, weights: &[f64]) -> Result<NodeId> {
        let k = self.rows(logits, "cross_entropy")?;
        match self.graph.kind(target) {
            ValueKind::Index(c) if c == k => {}
            other => {
                return Err(Error::Shape(format!(
                    "cross-entropy target {other:?} does not match {k} logits"
                )))
            }
        }
        if weights.len() != k || weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::Invalid(format!("class weights {weights:?} for {k} classes")));
        }
        Ok(self.push(
            Op::WeightedCrossEntropy {
                logits,
                target,
                weights: weights.to_vec(),
            },
            ValueKind::Scalar,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ka, kb) = (self.graph.kind(a), self.graph.kind(b));
        match (ka, kb) {
            (ValueKind::Rows(x), ValueKind::Rows(y)) if x == y => {}
            (ValueKind::Scalar, ValueKind::Scalar) => {}
            _ => return Err(Error::Shape(format!("add of {ka:?} and {kb:?}"))),
        }
        Ok(self.push(Op::Add { a, b }, ka))
    }

    /// Left fold of [`GraphBuilder::add`] over a non-empty list.
    pub fn sum(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::Shape("sum of nothing".into()))?;
        let mut acc = first;
        for &x in rest {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        let k = self.graph.kind(x);
        if matches!(k, ValueKind::Index(_)) {
            return Err(Error::Shape("scale of an index node".into()));
        }
        Ok(self.push(Op::Scale { x, s }, k))
    }

    pub fn masked_replace(&mut self, x: NodeId, flag: NodeId, emb: ParamId) -> Result<NodeId> {
        let d = self.rows(x, "masked_replace")?;
        if self.graph.kind(flag) != ValueKind::Index(2) {
            return Err(Error::Shape("masked_replace flag must be a 2-class index node".into()));
        }
        if self.pshape(emb) != [d] {
            return Err(Error::Shape(format!(
                "replacement vector `{}` has shape {:?}, expected [{}]",
                self.params.get(emb).name,
                self.pshape(emb),
                d
            )));
        }
        Ok(self.push(Op::MaskedReplace { x, flag, emb }, ValueKind::Rows(d)))
    }

    pub fn gumbel_st(&mut self, logits: NodeId) -> Result<NodeId> {
        let d = self.rows(logits, "gumbel_st")?;
        Ok(self.push(Op::GumbelSt { logits }, ValueKind::Rows(d)))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        if matches!(self.graph.kind(x), ValueKind::Index(_)) {
            return Err(Error::Shape("sum of an index node".into()));
        }
        Ok(self.push(Op::SumAll { x }, ValueKind::Scalar))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store() -> (ParamStore, ParamId, ParamId) {
        let mut ps = ParamStore::new();
        let w = ps.add("w", Tensor::zeros(vec![3, 4]), true).unwrap();
        let b = ps.add("b", Tensor::zeros(vec![3]), true).unwrap();
        (ps, w, b)
    }

    #[test]
    fn affine_shapes_checked_at_construction() {
        let (ps, w, b) = store();
        let mut g = GraphBuilder::new(&ps);
        let ok = g.input("x", 4).unwrap();
        let bad = g.input("y", 5).unwrap();
        let y = g.affine(ok, w, Some(b)).unwrap();
        assert_eq!(g.kind(y), ValueKind::Rows(3));
        assert!(matches!(g.affine(bad, w, Some(b)), Err(Error::Shape(_))));
    }

    #[test]
    fn bias_shape_checked() {
        let (ps, w, _) = store();
        let mut ps2 = ps.clone();
        let bad_b = ps2.add("bb", Tensor::zeros(vec![4]), true).unwrap();
        let mut g = GraphBuilder::new(&ps2);
        let x = g.input("x", 4).unwrap();
        assert!(g.affine(x, w, Some(bad_b)).is_err());
    }

    #[test]
    fn dropout_probability_range() {
        let (ps, _, _) = store();
        let mut g = GraphBuilder::new(&ps);
        let x = g.input("x", 4).unwrap();
        assert!(g.dropout(x, 1.0).is_err());
        assert!(g.dropout(x, -0.1).is_err());
        assert!(g.dropout(x, 0.0).is_ok());
    }

    #[test]
    fn add_requires_matching_widths() {
        let (ps, _, _) = store();
        let mut g = GraphBuilder::new(&ps);
        let x = g.input("x", 4).unwrap();
        let y = g.input("y", 3).unwrap();
        assert!(g.add(x, y).is_err());
        assert!(g.add(x, x).is_ok());
    }

    #[test]
    fn duplicate_names_rejected() {
        let (ps, _, _) = store();
        let mut g = GraphBuilder::new(&ps);
        g.input("x", 4).unwrap();
        assert!(g.input("x", 4).is_err());
    }
}
