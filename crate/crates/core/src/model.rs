//! The THEIA engine stack.
//!
//! ```text
//! c     = Arith(a, b, op)
//! v_ord = Order(c + Bridge_ao(c), d, R)
//! v_set = Set(c + Bridge_as(c), S)
//! o     = Head(Logic(v_ord, v_set, op_logic))
//! ```
//!
//! Unknown-flagged inputs are swapped for learnable per-slot vectors after
//! their encoders. Training logits are dot products with the prototypes;
//! predictions take the argmax cosine.

use serde::{Deserialize, Serialize};
use theia_autodiff::kernels::{argmax, dot, norm};
use theia_autodiff::{
    forward_eval, EvalOptions, Feed, GraphBuilder, KernelGraph, NodeId, ParamStore, ProtoKind, Stream, Tensor,
};

use crate::error::{Result, TheiaError};
use crate::k3::K3;
use crate::layers::{self, StepInputs, SET_BITS};
use crate::taskgen::Sample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrototypeInit {
    Orthogonal,
    RandomNormal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadVariant {
    FourDomain,
    Chain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub arith_width: usize,
    pub order_width: usize,
    pub set_width: usize,
    pub logic_width: usize,
    /// Parallel subspaces in the Order and Logic engines.
    pub subspace_count: usize,
    pub use_bridges: bool,
    pub prototype_init: PrototypeInit,
    pub head_variant: HeadVariant,
    pub dropout: f64,
    pub num_range: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::four_domain()
    }
}

impl ModelConfig {
    pub fn four_domain() -> Self {
        Self {
            hidden_dim: 128,
            arith_width: 1024,
            order_width: 512,
            set_width: 768,
            logic_width: 512,
            subspace_count: 3,
            use_bridges: true,
            prototype_init: PrototypeInit::Orthogonal,
            head_variant: HeadVariant::FourDomain,
            dropout: 0.1,
            num_range: 20,
        }
    }

    /// Single-subspace step with the chain head.
    pub fn chain_step() -> Self {
        Self {
            subspace_count: 1,
            head_variant: HeadVariant::Chain,
            ..Self::four_domain()
        }
    }

    /// Every width equal to `h`; used by gradient checks and fast tests.
    pub fn tiny(h: usize) -> Self {
        Self {
            hidden_dim: h,
            arith_width: 2 * h,
            order_width: 2 * h,
            set_width: 2 * h,
            logic_width: 2 * h,
            ..Self::four_domain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TheiaError::Config(m));
        if self.hidden_dim < 2 {
            return bad(format!("hidden_dim {} < 2", self.hidden_dim));
        }
        if self.prototype_init == PrototypeInit::Orthogonal
            && self.head_variant == HeadVariant::FourDomain
            && self.hidden_dim < 3
        {
            return bad(format!("three orthogonal prototypes need hidden_dim >= 3, got {}", self.hidden_dim));
        }
        if self.subspace_count == 0 {
            return bad("subspace_count must be at least 1".into());
        }
        if [self.arith_width, self.order_width, self.set_width, self.logic_width].contains(&0) {
            return bad("engine widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(1..=30).contains(&self.num_range) {
            return bad(format!("num_range {} outside 1..=30", self.num_range));
        }
        Ok(())
    }
}

/// Named engine outputs captured for probing and patching.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    C,
    VOrd,
    VSet,
    LogicOut,
    HeadOut,
}

impl Boundary {
    pub const ALL: [Boundary; 5] = [Boundary::C, Boundary::VOrd, Boundary::VSet, Boundary::LogicOut, Boundary::HeadOut];
    /// The four domain boundaries probed in the analysis.
    pub const ENGINES: [Boundary; 4] = [Boundary::C, Boundary::VOrd, Boundary::VSet, Boundary::LogicOut];

    pub fn name(self) -> &'static str {
        match self {
            Boundary::C => "c",
            Boundary::VOrd => "v_ord",
            Boundary::VSet => "v_set",
            Boundary::LogicOut => "logic_out",
            Boundary::HeadOut => "head_out",
        }
    }

    pub fn engine(self) -> &'static str {
        match self {
            Boundary::C => "Arith",
            Boundary::VOrd => "Order",
            Boundary::VSet => "Set",
            Boundary::LogicOut => "Logic",
            Boundary::HeadOut => "Head",
        }
    }

    pub fn from_name(s: &str) -> Option<Boundary> {
        Self::ALL.into_iter().find(|b| b.name() == s)
    }
}

/// Graph nodes of one THEIA step.
#[derive(Clone, Copy, Debug)]
pub struct TheiaNodes {
    pub inputs: StepInputs,
    pub c: NodeId,
    pub v_ord: NodeId,
    pub v_set: NodeId,
    pub logic_out: NodeId,
    pub head_out: NodeId,
    pub logits: NodeId,
}

impl TheiaNodes {
    pub fn boundary(&self, b: Boundary) -> NodeId {
        match b {
            Boundary::C => self.c,
            Boundary::VOrd => self.v_ord,
            Boundary::VSet => self.v_set,
            Boundary::LogicOut => self.logic_out,
            Boundary::HeadOut => self.head_out,
        }
    }
}

fn add_encoder(ps: &mut ParamStore, rng: &mut Stream, name: &str, din: usize, h: usize) -> Result<()> {
    layers::add_mlp2(ps, rng, name, din, h, h)
}

fn add_subspace_engine(
    ps: &mut ParamStore,
    rng: &mut Stream,
    name: &str,
    din: usize,
    width: usize,
    h: usize,
    subspaces: usize,
) -> Result<()> {
    for s in 0..subspaces {
        layers::add_mlp2(ps, rng, &format!("{name}.sub{s}"), din, width, h)?;
    }
    for i in 0..subspaces {
        for j in i + 1..subspaces {
            layers::add_linear(ps, rng, &format!("{name}.fuse{i}{j}"), 2 * h, h)?;
        }
    }
    layers::add_linear(ps, rng, &format!("{name}.combine"), h, h)
}

/// Parallel subspace stacks, pairwise fusion of concatenated pairs, sum,
/// GELU, combining layer.
fn subspace_engine(g: &mut GraphBuilder, name: &str, x: NodeId, subspaces: usize) -> Result<NodeId> {
    let mut subs = Vec::with_capacity(subspaces);
    for s in 0..subspaces {
        subs.push(layers::mlp2(g, &format!("{name}.sub{s}"), x)?);
    }
    let mut terms = subs.clone();
    for i in 0..subspaces {
        for j in i + 1..subspaces {
            let pair = g.concat(&[subs[i], subs[j]])?;
            terms.push(layers::linear(g, &format!("{name}.fuse{i}{j}"), pair)?);
        }
    }
    let s = g.sum(&terms)?;
    let s = g.gelu(s)?;
    layers::linear(g, &format!("{name}.combine"), s)
}

fn add_bridge(ps: &mut ParamStore, rng: &mut Stream, name: &str, h: usize) -> Result<()> {
    layers::add_linear(ps, rng, &format!("{name}.lin"), h, h)?;
    layers::add_layer_norm(ps, &format!("{name}.ln"), h)
}

/// `c + LN(GELU(W c + b))`.
fn bridge(g: &mut GraphBuilder, name: &str, c: NodeId) -> Result<NodeId> {
    let h = layers::linear(g, &format!("{name}.lin"), c)?;
    let h = g.gelu(h)?;
    let h = layers::layer_norm(g, &format!("{name}.ln"), h)?;
    Ok(g.add(c, h)?)
}

/// Gram-Schmidt on Gaussian draws; rows are exactly unit length and
/// orthogonal up to rounding.
pub fn orthonormal_rows(k: usize, d: usize, rng: &mut Stream) -> Result<Vec<f64>> {
    if k > d {
        return Err(TheiaError::Config(format!("cannot fit {k} orthonormal rows in dimension {d}")));
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    while rows.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        // two passes keep the residual dot products at rounding level
        for _ in 0..2 {
            for r in &rows {
                let p = dot(&v, r);
                v.iter_mut().zip(r).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = norm(&v);
        if n < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        rows.push(v);
    }
    Ok(rows.concat())
}

/// Adds every THEIA parameter to `ps`.
pub fn init_theia_params(cfg: &ModelConfig, ps: &mut ParamStore, rng: &mut Stream) -> Result<()> {
    cfg.validate()?;
    let h = cfg.hidden_dim;
    let s = cfg.subspace_count;

    add_encoder(ps, rng, "arith.enc_a", 1, h)?;
    add_encoder(ps, rng, "arith.enc_b", 1, h)?;
    layers::add_vector(ps, rng, "arith.unk_a", h)?;
    layers::add_vector(ps, rng, "arith.unk_b", h)?;
    layers::add_embedding(ps, rng, "arith.op_emb", 4, h)?;
    layers::add_mlp2(ps, rng, "arith.fuse", 3 * h, cfg.arith_width, h)?;

    if cfg.use_bridges {
        add_bridge(ps, rng, "bridge_ao", h)?;
        add_bridge(ps, rng, "bridge_as", h)?;
    }

    add_encoder(ps, rng, "order.enc_d", 1, h)?;
    layers::add_vector(ps, rng, "order.unk_d", h)?;
    layers::add_embedding(ps, rng, "order.rel_emb", 6, h)?;
    add_subspace_engine(ps, rng, "order", 3 * h, cfg.order_width, h, s)?;

    add_encoder(ps, rng, "set.enc", SET_BITS, h)?;
    layers::add_vector(ps, rng, "set.unk", h)?;
    layers::add_mlp2(ps, rng, "set.fuse", 2 * h, cfg.set_width, h)?;

    layers::add_embedding(ps, rng, "logic.op_emb", 5, h)?;
    add_subspace_engine(ps, rng, "logic", 3 * h, cfg.logic_width, h, s)?;

    match cfg.head_variant {
        HeadVariant::FourDomain => {
            layers::add_linear(ps, rng, "head.lin", h, h)?;
            layers::add_layer_norm(ps, "head.ln", h)?;
            let protos = match cfg.prototype_init {
                PrototypeInit::Orthogonal => orthonormal_rows(3, h, rng)?,
                PrototypeInit::RandomNormal => (0..3 * h).map(|_| 0.02 * rng.normal()).collect(),
            };
            ps.add("head.protos", Tensor::new(vec![3, h], protos)?, true)?;
        }
        HeadVariant::Chain => layers::add_chain_head(ps, rng, "head", h, h)?,
    }
    Ok(())
}

/// Builds the step on already declared inputs. Boundary nodes are named
/// `{prefix}c`, `{prefix}v_ord`, and so on.
pub fn build_theia(g: &mut GraphBuilder, cfg: &ModelConfig, inputs: StepInputs, prefix: &str) -> Result<TheiaNodes> {
    let s = cfg.subspace_count;
    let i = inputs;

    let xa = layers::mlp2(g, "arith.enc_a", i.a)?;
    let xa = layers::masked(g, xa, i.a_u, "arith.unk_a")?;
    let xb = layers::mlp2(g, "arith.enc_b", i.b)?;
    let xb = layers::masked(g, xb, i.b_u, "arith.unk_b")?;
    let op = layers::embedding(g, "arith.op_emb", i.arith_op)?;
    let cat = g.concat(&[xa, xb, op])?;
    let c = layers::mlp2(g, "arith.fuse", cat)?;
    let c = g.name(c, &format!("{prefix}c"))?;

    let (c_o, c_s) = if cfg.use_bridges {
        (bridge(g, "bridge_ao", c)?, bridge(g, "bridge_as", c)?)
    } else {
        (c, c)
    };

    let xd = layers::mlp2(g, "order.enc_d", i.d)?;
    let xd = layers::masked(g, xd, i.d_u, "order.unk_d")?;
    let rel = layers::embedding(g, "order.rel_emb", i.relation)?;
    let cat = g.concat(&[c_o, xd, rel])?;
    let v_ord = subspace_engine(g, "order", cat, s)?;
    let v_ord = g.name(v_ord, &format!("{prefix}v_ord"))?;

    let xs = layers::mlp2(g, "set.enc", i.set)?;
    let xs = layers::masked(g, xs, i.s_u, "set.unk")?;
    let cat = g.concat(&[c_s, xs])?;
    let v_set = layers::mlp2(g, "set.fuse", cat)?;
    let v_set = g.name(v_set, &format!("{prefix}v_set"))?;

    let lop = layers::embedding(g, "logic.op_emb", i.logic_op)?;
    let cat = g.concat(&[v_ord, v_set, lop])?;
    let logic_out = subspace_engine(g, "logic", cat, s)?;
    let logic_out = g.name(logic_out, &format!("{prefix}logic_out"))?;

    let (head_out, logits) = match cfg.head_variant {
        HeadVariant::FourDomain => {
            let h = layers::linear(g, "head.lin", logic_out)?;
            let h = g.gelu(h)?;
            let h = g.dropout(h, cfg.dropout)?;
            let h = layers::layer_norm(g, "head.ln", h)?;
            let p = g.params().id("head.protos")?;
            (h, g.prototype_logits(h, p, ProtoKind::Dot)?)
        }
        HeadVariant::Chain => layers::chain_head(g, "head", logic_out)?,
    };
    let head_out = g.name(head_out, &format!("{prefix}head_out"))?;
    let logits = g.name(logits, &format!("{prefix}logits"))?;
    Ok(TheiaNodes {
        inputs,
        c,
        v_ord,
        v_set,
        logic_out,
        head_out,
        logits,
    })
}

/// Graph for one batch of samples; with `loss_weights` a weighted
/// cross-entropy node named `loss` is appended on the `target` input.
pub fn theia_graph(
    cfg: &ModelConfig,
    ps: &ParamStore,
    loss_weights: Option<[f64; 3]>,
) -> Result<(KernelGraph, TheiaNodes, Option<NodeId>)> {
    let mut g = GraphBuilder::new(ps);
    let inputs = StepInputs::declare(&mut g, "")?;
    let nodes = build_theia(&mut g, cfg, inputs, "")?;
    let loss = match loss_weights {
        Some(w) => {
            let t = g.index_input("target", 3)?;
            let l = g.weighted_cross_entropy(nodes.logits, t, &w)?;
            Some(g.name(l, "loss")?)
        }
        None => None,
    };
    Ok((g.finish(), nodes, loss))
}

pub fn encode_batch(samples: &[&Sample], num_range: u32) -> Feed {
    let mut feed = Feed::new();
    layers::encode_step(&mut feed, "", samples, num_range);
    feed
}

pub fn targets(samples: &[&Sample]) -> Vec<usize> {
    samples.iter().map(|s| s.verdict.index()).collect()
}

/// Per-example boundary activations, row-major `batch x dim` per boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryActivations {
    pub batch: usize,
    pub dim: usize,
    pub c: Vec<f64>,
    pub v_ord: Vec<f64>,
    pub v_set: Vec<f64>,
    pub logic_out: Vec<f64>,
    pub head_out: Vec<f64>,
}

impl BoundaryActivations {
    pub fn get(&self, b: Boundary) -> &[f64] {
        match b {
            Boundary::C => &self.c,
            Boundary::VOrd => &self.v_ord,
            Boundary::VSet => &self.v_set,
            Boundary::LogicOut => &self.logic_out,
            Boundary::HeadOut => &self.head_out,
        }
    }

    fn get_mut(&mut self, b: Boundary) -> &mut Vec<f64> {
        match b {
            Boundary::C => &mut self.c,
            Boundary::VOrd => &mut self.v_ord,
            Boundary::VSet => &mut self.v_set,
            Boundary::LogicOut => &mut self.logic_out,
            Boundary::HeadOut => &mut self.head_out,
        }
    }

    pub fn row(&self, b: Boundary, i: usize) -> &[f64] {
        &self.get(b)[i * self.dim..(i + 1) * self.dim]
    }
}

/// Replace one engine output before anything downstream reads it.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSpec {
    pub boundary: Boundary,
    pub values: Vec<f64>,
}

impl PatchSpec {
    pub fn new(boundary: &str, values: Vec<f64>) -> Result<PatchSpec> {
        match Boundary::from_name(boundary) {
            Some(b @ (Boundary::VOrd | Boundary::VSet)) => Ok(PatchSpec { boundary: b, values }),
            _ => Err(TheiaError::Invalid(format!(
                "cannot patch boundary `{boundary}`; only v_ord and v_set are patchable"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `batch x 3` training logits.
    pub logits: Vec<f64>,
    pub predictions: Vec<K3>,
    pub boundaries: Option<BoundaryActivations>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub components: Vec<(String, usize)>,
}

impl ParamCount {
    pub fn component(&self, name: &str) -> usize {
        self.components.iter().find(|(n, _)| n == name).map_or(0, |(_, c)| *c)
    }

    pub fn bridges(&self) -> usize {
        self.component("bridge_ao") + self.component("bridge_as")
    }
}

pub const COMPONENTS: [&str; 7] = ["arith", "bridge_ao", "bridge_as", "order", "set", "logic", "head"];

pub struct TheiaModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    graph: KernelGraph,
    nodes: TheiaNodes,
}

/// Rows per forward call when evaluating large sample sets.
pub const EVAL_CHUNK: usize = 2048;

impl TheiaModel {
    pub fn init(config: ModelConfig, rng: &mut Stream) -> Result<TheiaModel> {
        let mut ps = ParamStore::new();
        init_theia_params(&config, &mut ps, rng)?;
        Self::from_params(config, ps)
    }

    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<TheiaModel> {
        config.validate()?;
        let (graph, nodes, _) = theia_graph(&config, &params, None)?;
        Ok(TheiaModel {
            config,
            params,
            graph,
            nodes,
        })
    }

    pub fn graph(&self) -> &KernelGraph {
        &self.graph
    }

    pub fn nodes(&self) -> &TheiaNodes {
        &self.nodes
    }

    pub fn param_count(&self) -> ParamCount {
        let components: Vec<(String, usize)> = COMPONENTS
            .iter()
            .map(|c| (c.to_string(), self.params.count_prefix(&format!("{c}."))))
            .collect();
        ParamCount {
            total: self.params.trainable_count(),
            components,
        }
    }

    /// Eval-mode forward over any number of samples.
    pub fn forward(&self, samples: &[&Sample], capture: bool, patch: Option<&PatchSpec>) -> Result<ForwardOutput> {
        let h = self.config.hidden_dim;
        if let Some(p) = patch {
            if p.values.len() != samples.len() * h {
                return Err(TheiaError::Invalid(format!(
                    "patch for `{}` has {} values, expected {} x {}",
                    p.boundary.name(),
                    p.values.len(),
                    samples.len(),
                    h
                )));
            }
        }
        let mut logits = Vec::with_capacity(samples.len() * 3);
        let mut predictions = Vec::with_capacity(samples.len());
        let mut acts = capture.then(|| BoundaryActivations {
            batch: samples.len(),
            dim: h,
            c: Vec::new(),
            v_ord: Vec::new(),
            v_set: Vec::new(),
            logic_out: Vec::new(),
            head_out: Vec::new(),
        });
        let mut rng = Stream::new(0, 0);
        for (k, chunk) in samples.chunks(EVAL_CHUNK).enumerate() {
            let feed = encode_batch(chunk, self.config.num_range);
            let mut opts = EvalOptions::eval();
            if let Some(p) = patch {
                let lo = k * EVAL_CHUNK * h;
                opts = opts.with_override(self.nodes.boundary(p.boundary), &p.values[lo..lo + chunk.len() * h]);
            }
            let trace = forward_eval(&self.graph, &self.params, &feed, &opts, &mut rng)?;
            let z = trace.value(self.nodes.logits);
            logits.extend_from_slice(z);
            predictions.extend(self.predict_rows(trace.value(self.nodes.head_out), z));
            if let Some(a) = acts.as_mut() {
                for b in Boundary::ALL {
                    a.get_mut(b).extend_from_slice(trace.value(self.nodes.boundary(b)));
                }
            }
        }
        Ok(ForwardOutput {
            logits,
            predictions,
            boundaries: acts,
        })
    }

    pub fn predict(&self, samples: &[&Sample]) -> Result<Vec<K3>> {
        Ok(self.forward(samples, false, None)?.predictions)
    }

    /// Argmax cosine for the four-domain head; the chain head's logits are
    /// already cosines.
    fn predict_rows(&self, head_out: &[f64], logits: &[f64]) -> Vec<K3> {
        match self.config.head_variant {
            HeadVariant::Chain => logits.chunks(3).map(|z| K3::from_index(argmax(z)).unwrap()).collect(),
            HeadVariant::FourDomain => {
                let h = self.config.hidden_dim;
                let protos = self.params.by_name("head.protos").expect("head prototypes").tensor.values();
                head_out
                    .chunks(h)
                    .map(|o| {
                        let cos: Vec<f64> = protos
                            .chunks(h)
                            .map(|p| dot(o, p) / (norm(o) * norm(p)).max(theia_autodiff::kernels::NORM_EPS))
                            .collect();
                        K3::from_index(argmax(&cos)).unwrap()
                    })
                    .collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_counts() {
        let m = TheiaModel::init(ModelConfig::four_domain(), &mut Stream::new(1, 0)).unwrap();
        let pc = m.param_count();
        assert_eq!(pc.total, 2_751_104);
        assert_eq!(pc.component("arith"), 559_744);
        assert_eq!(pc.bridges(), 33_536);
        assert_eq!(pc.component("order"), 921_216);
        assert_eq!(pc.component("set"), 315_264);
        assert_eq!(pc.component("logic"), 904_192);
        assert_eq!(pc.component("head"), 17_152);
        assert_eq!(pc.components.iter().map(|(_, c)| c).sum::<usize>(), pc.total);
        let m = TheiaModel::init(ModelConfig::chain_step(), &mut Stream::new(1, 0)).unwrap();
        assert_eq!(m.param_count().total, 1_502_339);
    }

    #[test]
    fn patch_names_are_checked() {
        assert!(PatchSpec::new("v_ord", vec![]).is_ok());
        assert!(PatchSpec::new("c", vec![]).is_err());
        assert!(PatchSpec::new("bogus", vec![]).is_err());
    }

    #[test]
    fn orthonormal_rejects_too_many_rows() {
        assert!(orthonormal_rows(3, 2, &mut Stream::new(0, 0)).is_err());
    }
}
