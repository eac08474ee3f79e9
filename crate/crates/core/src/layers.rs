//! Parameter initialization and graph helpers shared by every backbone.
//!
//! Parameters are created once by the `add_*` functions and looked up again
//! by name when a graph is built, so the two halves must use the same names.

use theia_autodiff::{GraphBuilder, NodeId, ParamStore, ProtoKind, Stream, Tensor};

use crate::error::Result;
use crate::taskgen::Sample;

/// Fan-in uniform initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn add_linear(ps: &mut ParamStore, rng: &mut Stream, name: &str, din: usize, dout: usize) -> Result<()> {
    let bound = 1.0 / (din as f64).sqrt();
    let w = (0..din * dout).map(|_| rng.range(-bound, bound)).collect();
    let b = (0..dout).map(|_| rng.range(-bound, bound)).collect();
    ps.add(&format!("{name}.w"), Tensor::new(vec![dout, din], w)?, true)?;
    ps.add(&format!("{name}.b"), Tensor::new(vec![dout], b)?, true)?;
    Ok(())
}

pub fn add_layer_norm(ps: &mut ParamStore, name: &str, d: usize) -> Result<()> {
    ps.add(&format!("{name}.gamma"), Tensor::new(vec![d], vec![1.0; d])?, true)?;
    ps.add(&format!("{name}.beta"), Tensor::zeros(vec![d]), true)?;
    Ok(())
}

pub fn add_embedding(ps: &mut ParamStore, rng: &mut Stream, name: &str, k: usize, d: usize) -> Result<()> {
    let v = (0..k * d).map(|_| rng.normal()).collect();
    ps.add(name, Tensor::new(vec![k, d], v)?, true)?;
    Ok(())
}

pub fn add_vector(ps: &mut ParamStore, rng: &mut Stream, name: &str, d: usize) -> Result<()> {
    let v = (0..d).map(|_| rng.normal()).collect();
    ps.add(name, Tensor::new(vec![d], v)?, true)?;
    Ok(())
}

/// Two affine layers with a GELU between them: `name.0`, `name.1`.
pub fn add_mlp2(ps: &mut ParamStore, rng: &mut Stream, name: &str, din: usize, dh: usize, dout: usize) -> Result<()> {
    add_linear(ps, rng, &format!("{name}.0"), din, dh)?;
    add_linear(ps, rng, &format!("{name}.1"), dh, dout)
}

pub fn linear(g: &mut GraphBuilder, name: &str, x: NodeId) -> Result<NodeId> {
    let w = g.params().id(&format!("{name}.w"))?;
    let b = g.params().id(&format!("{name}.b"))?;
    Ok(g.affine(x, w, Some(b))?)
}

pub fn layer_norm(g: &mut GraphBuilder, name: &str, x: NodeId) -> Result<NodeId> {
    let gamma = g.params().id(&format!("{name}.gamma"))?;
    let beta = g.params().id(&format!("{name}.beta"))?;
    Ok(g.layer_norm(x, gamma, beta)?)
}

pub fn mlp2(g: &mut GraphBuilder, name: &str, x: NodeId) -> Result<NodeId> {
    let h = linear(g, &format!("{name}.0"), x)?;
    let h = g.gelu(h)?;
    linear(g, &format!("{name}.1"), h)
}

pub fn embedding(g: &mut GraphBuilder, name: &str, index: NodeId) -> Result<NodeId> {
    let t = g.params().id(name)?;
    Ok(g.embedding(t, index)?)
}

pub fn masked(g: &mut GraphBuilder, x: NodeId, flag: NodeId, name: &str) -> Result<NodeId> {
    let e = g.params().id(name)?;
    Ok(g.masked_replace(x, flag, e)?)
}

/// Width of the shared per-slot encoders.
pub const SET_BITS: usize = 21;

/// Input nodes of one task step. `prefix` distinguishes the steps of an
/// unrolled chain.
#[derive(Clone, Copy, Debug)]
pub struct StepInputs {
    pub a: NodeId,
    pub b: NodeId,
    pub d: NodeId,
    pub set: NodeId,
    pub a_u: NodeId,
    pub b_u: NodeId,
    pub d_u: NodeId,
    pub s_u: NodeId,
    pub arith_op: NodeId,
    pub relation: NodeId,
    pub logic_op: NodeId,
    pub logic_onehot: NodeId,
}

impl StepInputs {
    pub fn declare(g: &mut GraphBuilder, prefix: &str) -> Result<StepInputs> {
        let n = |s: &str| format!("{prefix}{s}");
        Ok(StepInputs {
            a: g.input(&n("a"), 1)?,
            b: g.input(&n("b"), 1)?,
            d: g.input(&n("d"), 1)?,
            set: g.input(&n("set"), SET_BITS)?,
            a_u: g.index_input(&n("a_u"), 2)?,
            b_u: g.index_input(&n("b_u"), 2)?,
            d_u: g.index_input(&n("d_u"), 2)?,
            s_u: g.index_input(&n("s_u"), 2)?,
            arith_op: g.index_input(&n("arith_op"), 4)?,
            relation: g.index_input(&n("relation"), 6)?,
            logic_op: g.index_input(&n("logic_op"), 5)?,
            logic_onehot: g.input(&n("logic_onehot"), 5)?,
        })
    }
}

/// Writes one step's batch into `feed`. Operands enter as `value / num_range`.
pub fn encode_step(feed: &mut theia_autodiff::Feed, prefix: &str, samples: &[&Sample], num_range: u32) {
    let n = |s: &str| format!("{prefix}{s}");
    let scale = 1.0 / num_range as f64;
    let real = |f: &dyn Fn(&Sample) -> u32| samples.iter().map(|s| f(s) as f64 * scale).collect::<Vec<_>>();
    let flag = |f: &dyn Fn(&Sample) -> bool| samples.iter().map(|s| f(s) as usize).collect::<Vec<_>>();
    feed.set_real(&n("a"), real(&|s| s.raw.a));
    feed.set_real(&n("b"), real(&|s| s.raw.b));
    feed.set_real(&n("d"), real(&|s| s.raw.d));
    let mut bits = Vec::with_capacity(samples.len() * SET_BITS);
    let mut onehot = vec![0.0; samples.len() * 5];
    for (r, s) in samples.iter().enumerate() {
        bits.extend((0..SET_BITS as u32).map(|i| s.set_bit(i) as u8 as f64));
        onehot[r * 5 + s.raw.logic_op.index()] = 1.0;
    }
    feed.set_real(&n("set"), bits);
    feed.set_real(&n("logic_onehot"), onehot);
    feed.set_index(&n("a_u"), flag(&|s| s.raw.a_u));
    feed.set_index(&n("b_u"), flag(&|s| s.raw.b_u));
    feed.set_index(&n("d_u"), flag(&|s| s.raw.d_u));
    feed.set_index(&n("s_u"), flag(&|s| s.raw.s_u));
    feed.set_index(&n("arith_op"), samples.iter().map(|s| s.raw.arith_op.index()).collect());
    feed.set_index(&n("relation"), samples.iter().map(|s| s.raw.relation.index()).collect());
    feed.set_index(&n("logic_op"), samples.iter().map(|s| s.raw.logic_op.index()).collect());
}

/// Chain head: affine, GELU, affine to 3, L2 normalization, cosine x 10
/// against fixed axis-aligned prototypes.
pub fn add_chain_head(ps: &mut ParamStore, rng: &mut Stream, name: &str, din: usize, hidden: usize) -> Result<()> {
    add_linear(ps, rng, &format!("{name}.0"), din, hidden)?;
    add_linear(ps, rng, &format!("{name}.1"), hidden, 3)?;
    let mut eye = vec![0.0; 9];
    for i in 0..3 {
        eye[i * 3 + i] = 1.0;
    }
    ps.add(&format!("{name}.protos"), Tensor::new(vec![3, 3], eye)?, false)?;
    Ok(())
}

pub const CHAIN_COSINE_SCALE: f64 = 10.0;

/// Returns `(hidden, logits)`.
pub fn chain_head(g: &mut GraphBuilder, name: &str, x: NodeId) -> Result<(NodeId, NodeId)> {
    let h = linear(g, &format!("{name}.0"), x)?;
    let h = g.gelu(h)?;
    let z = linear(g, &format!("{name}.1"), h)?;
    let z = g.l2_normalize(z)?;
    let p = g.params().id(&format!("{name}.protos"))?;
    let logits = g.prototype_logits(z, p, ProtoKind::Cosine { scale: CHAIN_COSINE_SCALE })?;
    Ok((h, logits))
}
