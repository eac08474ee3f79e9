//! Forward and reverse evaluation of a [`KernelGraph`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::{KernelGraph, NodeId, Op, ProtoKind, ValueKind};
use crate::kernels::{self, gemm, View, LN_EPS, NORM_EPS};
use crate::params::{Grads, ParamStore};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Noise source for Gumbel straight-through nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GumbelNoise {
    Sampled,
    /// Test hook and hard decoding: forward is a plain argmax.
    Zero,
}

#[derive(Clone, Debug)]
pub struct EvalOptions<'a> {
    pub mode: Mode,
    /// Temperature shared by every Gumbel node.
    pub tau: f64,
    pub gumbel: GumbelNoise,
    /// Replace a node's value after it is computed. Downstream nodes see the
    /// replacement; no gradient flows back through a replaced node.
    pub overrides: Vec<(NodeId, &'a [f64])>,
}

impl Default for EvalOptions<'_> {
    fn default() -> Self {
        Self {
            mode: Mode::Eval,
            tau: 1.0,
            gumbel: GumbelNoise::Zero,
            overrides: Vec::new(),
        }
    }
}

impl<'a> EvalOptions<'a> {
    pub fn train() -> Self {
        Self {
            mode: Mode::Train,
            gumbel: GumbelNoise::Sampled,
            ..Self::default()
        }
    }

    pub fn eval() -> Self {
        Self::default()
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn with_gumbel(mut self, g: GumbelNoise) -> Self {
        self.gumbel = g;
        self
    }

    pub fn with_override(mut self, node: NodeId, values: &'a [f64]) -> Self {
        self.overrides.push((node, values));
        self
    }
}

/// Named batch inputs.
#[derive(Clone, Debug, Default)]
pub struct Feed {
    real: HashMap<String, Vec<f64>>,
    index: HashMap<String, Vec<usize>>,
}

impl Feed {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn real(mut self, name: &str, values: Vec<f64>) -> Self {
        self.real.insert(name.to_string(), values);
        self
    }

    pub fn index(mut self, name: &str, values: Vec<usize>) -> Self {
        self.index.insert(name.to_string(), values);
        self
    }

    pub fn set_real(&mut self, name: &str, values: Vec<f64>) {
        self.real.insert(name.to_string(), values);
    }

    pub fn set_index(&mut self, name: &str, values: Vec<usize>) {
        self.index.insert(name.to_string(), values);
    }

    pub fn real_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.real.get_mut(name)
    }

    pub fn get_real(&self, name: &str) -> Option<&[f64]> {
        self.real.get(name).map(|v| v.as_slice())
    }
}

#[derive(Clone, Debug)]
enum Aux {
    None,
    /// normalized input and per-row reciprocal std
    Ln { xhat: Vec<f64>, rstd: Vec<f64> },
    Mask(Vec<f64>),
    Norms(Vec<f64>),
    Cosine { u: Vec<f64>, v: Vec<f64>, nx: Vec<f64>, np: Vec<f64> },
    Probs(Vec<f64>),
    /// standard normal CDF of a GELU input, reused by the backward pass
    Cdf(Vec<f64>),
}

/// Retained intermediates of one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    batch: usize,
    values: Vec<Vec<f64>>,
    indices: Vec<Vec<usize>>,
    aux: Vec<Aux>,
    overridden: Vec<bool>,
    retained: bool,
    tau: f64,
}

/// Result of a backward pass.
#[derive(Clone, Debug)]
pub struct Backward {
    pub grads: Grads,
    /// Gradients with respect to real-valued input nodes (only when requested).
    pub inputs: HashMap<NodeId, Vec<f64>>,
}

fn check_finite(label: &str, xs: &[f64]) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(label.to_string()))
    }
}

/// Evaluate every node of `graph` on one batch.
pub fn forward_eval(
    graph: &KernelGraph,
    params: &ParamStore,
    feed: &Feed,
    opts: &EvalOptions,
    rng: &mut Stream,
) -> Result<Trace> {
    let n = graph.len();
    // batch size from the first input present
    let mut batch = None;
    for (_, node) in graph.input_nodes() {
        let b = match node.op {
            Op::Input => {
                let v = feed
                    .real
                    .get(&node.label)
                    .ok_or_else(|| Error::MissingInput(node.label.clone()))?;
                let d = match node.kind {
                    ValueKind::Rows(d) => d,
                    _ => unreachable!(),
                };
                if v.len() % d != 0 {
                    return Err(Error::Shape(format!(
                        "input `{}` of length {} is not a multiple of width {}",
                        node.label,
                        v.len(),
                        d
                    )));
                }
                v.len() / d
            }
            _ => feed
                .index
                .get(&node.label)
                .ok_or_else(|| Error::MissingInput(node.label.clone()))?
                .len(),
        };
        match batch {
            None => batch = Some(b),
            Some(b0) if b0 != b => {
                return Err(Error::Shape(format!(
                    "input `{}` has batch {}, expected {}",
                    node.label, b, b0
                )))
            }
            _ => {}
        }
    }
    let batch = batch.unwrap_or(1);
    if !(opts.tau > 0.0) {
        return Err(Error::Invalid(format!("temperature {} must be positive", opts.tau)));
    }

    let mut over: HashMap<NodeId, &[f64]> = HashMap::new();
    for &(id, vals) in &opts.overrides {
        let want = batch * graph.width(id);
        if vals.len() != want || matches!(graph.kind(id), ValueKind::Index(_)) {
            return Err(Error::Shape(format!(
                "override for `{}` has {} values, expected {}",
                graph.node(id).label,
                vals.len(),
                want
            )));
        }
        over.insert(id, vals);
    }

    let mut tr = Trace {
        batch,
        values: vec![Vec::new(); n],
        indices: vec![Vec::new(); n],
        aux: vec![Aux::None; n],
        overridden: vec![false; n],
        retained: true,
        tau: opts.tau,
    };
    let train = opts.mode == Mode::Train;

    for (i, node) in graph.nodes().iter().enumerate() {
        let (out, aux) = match &node.op {
            Op::Input => {
                let v = feed.real[&node.label].clone();
                check_finite(&node.label, &v)?;
                (v, Aux::None)
            }
            Op::IndexInput => {
                let v = &feed.index[&node.label];
                let classes = match node.kind {
                    ValueKind::Index(c) => c,
                    _ => unreachable!(),
                };
                if let Some(&bad) = v.iter().find(|&&x| x >= classes) {
                    return Err(Error::IndexRange {
                        node: node.label.clone(),
                        index: bad,
                        classes,
                    });
                }
                tr.indices[i] = v.clone();
                (Vec::new(), Aux::None)
            }
            Op::Affine { x, w, b } => {
                let din = graph.width(*x);
                let dout = graph.width(NodeId(i));
                let mut y = vec![0.0; batch * dout];
                if let Some(b) = b {
                    let bv = params.values(*b);
                    for r in 0..batch {
                        y[r * dout..(r + 1) * dout].copy_from_slice(bv);
                    }
                }
                gemm(
                    1.0,
                    View::row_major(&tr.values[x.0], batch, din),
                    View::row_major(params.values(*w), dout, din).t(),
                    if b.is_some() { 1.0 } else { 0.0 },
                    &mut y,
                );
                (y, Aux::None)
            }
            Op::Gelu { x } => {
                let xs = &tr.values[x.0];
                let cdf: Vec<f64> = xs.iter().map(|&v| kernels::normal_cdf(v)).collect();
                let y = xs.iter().zip(&cdf).map(|(&v, &p)| v * p).collect();
                (y, Aux::Cdf(cdf))
            }
            Op::LayerNorm { x, gamma, beta } => {
                let d = graph.width(*x);
                let xs = &tr.values[x.0];
                let (g, bta) = (params.values(*gamma), params.values(*beta));
                let mut xhat = vec![0.0; batch * d];
                let mut rstd = vec![0.0; batch];
                let mut y = vec![0.0; batch * d];
                for r in 0..batch {
                    let row = &xs[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let rs = 1.0 / (var + LN_EPS).sqrt();
                    rstd[r] = rs;
                    for j in 0..d {
                        let h = (row[j] - mean) * rs;
                        xhat[r * d + j] = h;
                        y[r * d + j] = g[j] * h + bta[j];
                    }
                }
                (y, Aux::Ln { xhat, rstd })
            }
            Op::Dropout { x, p } => {
                if train && *p > 0.0 {
                    let keep = 1.0 / (1.0 - p);
                    let mask: Vec<f64> = (0..tr.values[x.0].len())
                        .map(|_| if rng.uniform() < *p { 0.0 } else { keep })
                        .collect();
                    let y = tr.values[x.0].iter().zip(&mask).map(|(a, m)| a * m).collect();
                    (y, Aux::Mask(mask))
                } else {
                    (tr.values[x.0].clone(), Aux::None)
                }
            }
            Op::Concat { xs } => {
                let d = graph.width(NodeId(i));
                let mut y = vec![0.0; batch * d];
                let mut off = 0;
                for x in xs {
                    let dx = graph.width(*x);
                    let src = &tr.values[x.0];
                    for r in 0..batch {
                        y[r * d + off..r * d + off + dx].copy_from_slice(&src[r * dx..(r + 1) * dx]);
                    }
                    off += dx;
                }
                (y, Aux::None)
            }
            Op::Embedding { table, index } => {
                let d = graph.width(NodeId(i));
                let t = params.values(*table);
                let mut y = vec![0.0; batch * d];
                for (r, &k) in tr.indices[index.0].iter().enumerate() {
                    y[r * d..(r + 1) * d].copy_from_slice(&t[k * d..(k + 1) * d]);
                }
                (y, Aux::None)
            }
            Op::Softmax { x } => {
                let d = graph.width(*x);
                let xs = &tr.values[x.0];
                let mut y = vec![0.0; batch * d];
                for r in 0..batch {
                    kernels::softmax_row(&xs[r * d..(r + 1) * d], &mut y[r * d..(r + 1) * d]);
                }
                (y, Aux::None)
            }
            Op::L2Normalize { x } => {
                let d = graph.width(*x);
                let xs = &tr.values[x.0];
                let mut y = vec![0.0; batch * d];
                let mut norms = vec![0.0; batch];
                for r in 0..batch {
                    let nr = kernels::norm(&xs[r * d..(r + 1) * d]).max(NORM_EPS);
                    norms[r] = nr;
                    for j in 0..d {
                        y[r * d + j] = xs[r * d + j] / nr;
                    }
                }
                (y, Aux::Norms(norms))
            }
            Op::PrototypeLogits { x, protos, kind } => {
                let d = graph.width(*x);
                let k = graph.width(NodeId(i));
                let p = params.values(*protos);
                let xs = &tr.values[x.0];
                let mut y = vec![0.0; batch * k];
                match kind {
                    ProtoKind::Dot => {
                        gemm(1.0, View::row_major(xs, batch, d), View::row_major(p, k, d).t(), 0.0, &mut y);
                        (y, Aux::None)
                    }
                    ProtoKind::Cosine { scale } => {
                        let mut u = xs.clone();
                        let mut nx = vec![0.0; batch];
                        for r in 0..batch {
                            let nr = kernels::norm(&xs[r * d..(r + 1) * d]).max(NORM_EPS);
                            nx[r] = nr;
                            u[r * d..(r + 1) * d].iter_mut().for_each(|v| *v /= nr);
                        }
                        let mut v = p.to_vec();
                        let mut np = vec![0.0; k];
                        for c in 0..k {
                            let nr = kernels::norm(&p[c * d..(c + 1) * d]).max(NORM_EPS);
                            np[c] = nr;
                            v[c * d..(c + 1) * d].iter_mut().for_each(|e| *e /= nr);
                        }
                        gemm(*scale, View::row_major(&u, batch, d), View::row_major(&v, k, d).t(), 0.0, &mut y);
                        (y, Aux::Cosine { u, v, nx, np })
                    }
                }
            }
            Op::WeightedCrossEntropy { logits, target, weights } => {
                let k = graph.width(*logits);
                let z = &tr.values[logits.0];
                let t = &tr.indices[target.0];
                let mut probs = vec![0.0; batch * k];
                let mut loss = 0.0;
                for r in 0..batch {
                    let row = &z[r * k..(r + 1) * k];
                    kernels::softmax_row(row, &mut probs[r * k..(r + 1) * k]);
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    loss += weights[t[r]] * (lse - row[t[r]]);
                }
                (vec![loss / batch as f64], Aux::Probs(probs))
            }
            Op::Add { a, b } => (
                tr.values[a.0].iter().zip(&tr.values[b.0]).map(|(x, y)| x + y).collect(),
                Aux::None,
            ),
            Op::Scale { x, s } => (tr.values[x.0].iter().map(|v| v * s).collect(), Aux::None),
            Op::MaskedReplace { x, flag, emb } => {
                let d = graph.width(*x);
                let mut y = tr.values[x.0].clone();
                let e = params.values(*emb);
                for (r, &f) in tr.indices[flag.0].iter().enumerate() {
                    if f == 1 {
                        y[r * d..(r + 1) * d].copy_from_slice(e);
                    }
                }
                (y, Aux::None)
            }
            Op::GumbelSt { logits } => {
                let k = graph.width(*logits);
                let z = &tr.values[logits.0];
                let mut y = vec![0.0; batch * k];
                let mut soft = vec![0.0; batch * k];
                let mut pert = vec![0.0; k];
                for r in 0..batch {
                    for c in 0..k {
                        let g = match opts.gumbel {
                            GumbelNoise::Sampled => rng.gumbel(),
                            GumbelNoise::Zero => 0.0,
                        };
                        pert[c] = z[r * k + c] + g;
                    }
                    y[r * k + kernels::argmax(&pert)] = 1.0;
                    pert.iter_mut().for_each(|v| *v /= opts.tau);
                    kernels::softmax_row(&pert, &mut soft[r * k..(r + 1) * k]);
                }
                (y, Aux::Probs(soft))
            }
            Op::SumAll { x } => (vec![tr.values[x.0].iter().sum()], Aux::None),
        };
        check_finite(&node.label, &out)?;
        tr.values[i] = out;
        tr.aux[i] = aux;
        if let Some(vals) = over.get(&NodeId(i)) {
            tr.values[i].copy_from_slice(vals);
            tr.overridden[i] = true;
        }
    }
    Ok(tr)
}

impl Trace {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Values of a real or scalar node (`B x width`, row-major).
    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.values[id.0][0]
    }

    pub fn named<'t>(&'t self, graph: &KernelGraph, name: &str) -> Result<&'t [f64]> {
        Ok(self.value(graph.find(name)?))
    }

    pub fn take(&mut self, id: NodeId) -> Vec<f64> {
        std::mem::take(&mut self.values[id.0])
    }

    pub fn is_retained(&self) -> bool {
        self.retained
    }

    /// Drop everything except the listed nodes. Backward is no longer possible.
    pub fn release_intermediates(&mut self, keep: &[NodeId]) {
        for i in 0..self.values.len() {
            if !keep.contains(&NodeId(i)) {
                self.values[i] = Vec::new();
            }
            self.aux[i] = Aux::None;
        }
        self.retained = false;
    }

    /// Reverse pass from a scalar loss node with upstream gradient 1.
    pub fn backward(&self, graph: &KernelGraph, params: &ParamStore, loss: NodeId) -> Result<Backward> {
        if graph.kind(loss) != ValueKind::Scalar {
            return Err(Error::Shape(format!("`{}` is not a scalar", graph.node(loss).label)));
        }
        self.backward_from(graph, params, loss, &[1.0], false)
    }

    /// Reverse pass seeded with an arbitrary upstream gradient at `from`.
    pub fn backward_from(
        &self,
        graph: &KernelGraph,
        params: &ParamStore,
        from: NodeId,
        upstream: &[f64],
        input_grads: bool,
    ) -> Result<Backward> {
        if !self.retained {
            return Err(Error::NoRetainedForward);
        }
        let batch = self.batch;
        let n = graph.len();
        if upstream.len() != self.values[from.0].len() {
            return Err(Error::Shape(format!(
                "upstream gradient of length {} for `{}` with {} values",
                upstream.len(),
                graph.node(from).label,
                self.values[from.0].len()
            )));
        }

        // nodes whose gradient matters: they reach a parameter or (optionally) a real input
        let mut needs = vec![false; n];
        for (i, node) in graph.nodes().iter().enumerate() {
            let own = !node.op.params().is_empty() || (input_grads && matches!(node.op, Op::Input));
            needs[i] = own || node.op.inputs().iter().any(|x| needs[x.0]);
        }

        let mut grads = params.zero_grads();
        let mut g: Vec<Option<Vec<f64>>> = vec![None; n];
        g[from.0] = Some(upstream.to_vec());
        let mut inputs = HashMap::new();

        fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
            slot.get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..=from.0).rev() {
            let Some(gy) = g[i].take() else { continue };
            if self.overridden[i] || !needs[i] {
                continue;
            }
            let node = graph.node(NodeId(i));
            match &node.op {
                Op::Input => {
                    if input_grads {
                        inputs.insert(NodeId(i), gy);
                    }
                }
                Op::IndexInput => {}
                Op::Affine { x, w, b } => {
                    let din = graph.width(*x);
                    let dout = graph.width(NodeId(i));
                    let wv = params.values(*w);
                    gemm(
                        1.0,
                        View::row_major(&gy, batch, dout).t(),
                        View::row_major(&self.values[x.0], batch, din),
                        1.0,
                        grads.get_mut(*w),
                    );
                    if let Some(b) = b {
                        let gb = grads.get_mut(*b);
                        for r in 0..batch {
                            for j in 0..dout {
                                gb[j] += gy[r * dout + j];
                            }
                        }
                    }
                    if needs[x.0] {
                        let len = batch * din;
                        let gx = acc(&mut g[x.0], len);
                        gemm(1.0, View::row_major(&gy, batch, dout), View::row_major(wv, dout, din), 1.0, gx);
                    }
                }
                Op::Gelu { x } => {
                    if needs[x.0] {
                        let xs = &self.values[x.0];
                        let gx = acc(&mut g[x.0], xs.len());
                        if let Aux::Cdf(cdf) = &self.aux[i] {
                            for (((o, &v), &u), &p) in gx.iter_mut().zip(xs).zip(&gy).zip(cdf) {
                                *o += u * (p + v * kernels::normal_pdf(v));
                            }
                        } else {
                            for ((o, &v), &u) in gx.iter_mut().zip(xs).zip(&gy) {
                                *o += u * kernels::gelu_grad(v);
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let d = graph.width(*x);
                    let Aux::Ln { xhat, rstd } = &self.aux[i] else { unreachable!() };
                    let gam = params.values(*gamma);
                    {
                        let gg = grads.get_mut(*gamma);
                        for r in 0..batch {
                            for j in 0..d {
                                gg[j] += gy[r * d + j] * xhat[r * d + j];
                            }
                        }
                    }
                    {
                        let gb = grads.get_mut(*beta);
                        for r in 0..batch {
                            for j in 0..d {
                                gb[j] += gy[r * d + j];
                            }
                        }
                    }
                    if needs[x.0] {
                        let gx = acc(&mut g[x.0], batch * d);
                        let mut dh = vec![0.0; d];
                        for r in 0..batch {
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..d {
                                dh[j] = gy[r * d + j] * gam[j];
                                m1 += dh[j];
                                m2 += dh[j] * xhat[r * d + j];
                            }
                            m1 /= d as f64;
                            m2 /= d as f64;
                            for j in 0..d {
                                gx[r * d + j] += rstd[r] * (dh[j] - m1 - xhat[r * d + j] * m2);
                            }
                        }
                    }
                }
                Op::Dropout { x, .. } => {
                    if needs[x.0] {
                        let gx = acc(&mut g[x.0], gy.len());
                        match &self.aux[i] {
                            Aux::Mask(m) => {
                                for ((o, &u), &k) in gx.iter_mut().zip(&gy).zip(m) {
                                    *o += u * k;
                                }
                            }
                            _ => gx.iter_mut().zip(&gy).for_each(|(o, u)| *o += u),
                        }
                    }
                }
                Op::Concat { xs } => {
                    let d = graph.width(NodeId(i));
                    let mut off = 0;
                    for x in xs {
                        let dx = graph.width(*x);
                        if needs[x.0] {
                            let gx = acc(&mut g[x.0], batch * dx);
                            for r in 0..batch {
                                for j in 0..dx {
                                    gx[r * dx + j] += gy[r * d + off + j];
                                }
                            }
                        }
                        off += dx;
                    }
                }
                Op::Embedding { table, index } => {
                    let d = graph.width(NodeId(i));
                    let gt = grads.get_mut(*table);
                    for (r, &k) in self.indices[index.0].iter().enumerate() {
                        for j in 0..d {
                            gt[k * d + j] += gy[r * d + j];
                        }
                    }
                }
                Op::Softmax { x } => {
                    if needs[x.0] {
                        let d = graph.width(*x);
                        let y = &self.values[i];
                        let gx = acc(&mut g[x.0], batch * d);
                        for r in 0..batch {
                            let s: f64 = (0..d).map(|j| y[r * d + j] * gy[r * d + j]).sum();
                            for j in 0..d {
                                gx[r * d + j] += y[r * d + j] * (gy[r * d + j] - s);
                            }
                        }
                    }
                }
                Op::L2Normalize { x } => {
                    if needs[x.0] {
                        let d = graph.width(*x);
                        let y = &self.values[i];
                        let Aux::Norms(norms) = &self.aux[i] else { unreachable!() };
                        let raw = &self.values[x.0];
                        let gx = acc(&mut g[x.0], batch * d);
                        for r in 0..batch {
                            let clamped = kernels::norm(&raw[r * d..(r + 1) * d]) < NORM_EPS;
                            if clamped {
                                for j in 0..d {
                                    gx[r * d + j] += gy[r * d + j] / norms[r];
                                }
                            } else {
                                let s: f64 = (0..d).map(|j| y[r * d + j] * gy[r * d + j]).sum();
                                for j in 0..d {
                                    gx[r * d + j] += (gy[r * d + j] - y[r * d + j] * s) / norms[r];
                                }
                            }
                        }
                    }
                }
                Op::PrototypeLogits { x, protos, kind } => {
                    let d = graph.width(*x);
                    let k = graph.width(NodeId(i));
                    let p = params.values(*protos);
                    match kind {
                        ProtoKind::Dot => {
                            gemm(
                                1.0,
                                View::row_major(&gy, batch, k).t(),
                                View::row_major(&self.values[x.0], batch, d),
                                1.0,
                                grads.get_mut(*protos),
                            );
                            if needs[x.0] {
                                let gx = acc(&mut g[x.0], batch * d);
                                gemm(1.0, View::row_major(&gy, batch, k), View::row_major(p, k, d), 1.0, gx);
                            }
                        }
                        ProtoKind::Cosine { scale } => {
                            let Aux::Cosine { u, v, nx, np } = &self.aux[i] else { unreachable!() };
                            // gradients with respect to the unit vectors
                            let mut du = vec![0.0; batch * d];
                            gemm(*scale, View::row_major(&gy, batch, k), View::row_major(v, k, d), 0.0, &mut du);
                            let mut dv = vec![0.0; k * d];
                            gemm(*scale, View::row_major(&gy, batch, k).t(), View::row_major(u, batch, d), 0.0, &mut dv);
                            let raw_x = &self.values[x.0];
                            let gp = grads.get_mut(*protos);
                            for c in 0..k {
                                project_unit(
                                    &p[c * d..(c + 1) * d],
                                    &v[c * d..(c + 1) * d],
                                    np[c],
                                    &dv[c * d..(c + 1) * d],
                                    &mut gp[c * d..(c + 1) * d],
                                );
                            }
                            if needs[x.0] {
                                let gx = acc(&mut g[x.0], batch * d);
                                for r in 0..batch {
                                    project_unit(
                                        &raw_x[r * d..(r + 1) * d],
                                        &u[r * d..(r + 1) * d],
                                        nx[r],
                                        &du[r * d..(r + 1) * d],
                                        &mut gx[r * d..(r + 1) * d],
                                    );
                                }
                            }
                        }
                    }
                }
                Op::WeightedCrossEntropy { logits, target, weights } => {
                    if needs[logits.0] {
                        let k = graph.width(*logits);
                        let Aux::Probs(probs) = &self.aux[i] else { unreachable!() };
                        let t = &self.indices[target.0];
                        let gx = acc(&mut g[logits.0], batch * k);
                        let s = gy[0] / batch as f64;
                        for r in 0..batch {
                            let w = weights[t[r]] * s;
                            for c in 0..k {
                                let onehot = if c == t[r] { 1.0 } else { 0.0 };
                                gx[r * k + c] += w * (probs[r * k + c] - onehot);
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    for x in [a, b] {
                        if needs[x.0] {
                            let gx = acc(&mut g[x.0], gy.len());
                            gx.iter_mut().zip(&gy).for_each(|(o, u)| *o += u);
                        }
                    }
                }
                Op::Scale { x, s } => {
                    if needs[x.0] {
                        let gx = acc(&mut g[x.0], gy.len());
                        gx.iter_mut().zip(&gy).for_each(|(o, u)| *o += u * s);
                    }
                }
                Op::MaskedReplace { x, flag, emb } => {
                    let d = graph.width(*x);
                    let flags = &self.indices[flag.0];
                    {
                        let ge = grads.get_mut(*emb);
                        for (r, &f) in flags.iter().enumerate() {
                            if f == 1 {
                                for j in 0..d {
                                    ge[j] += gy[r * d + j];
                                }
                            }
                        }
                    }
                    if needs[x.0] {
                        let gx = acc(&mut g[x.0], batch * d);
                        for (r, &f) in flags.iter().enumerate() {
                            if f == 0 {
                                for j in 0..d {
                                    gx[r * d + j] += gy[r * d + j];
                                }
                            }
                        }
                    }
                }
                Op::GumbelSt { logits } => {
                    // straight-through: differentiate softmax((z + g) / tau)
                    if needs[logits.0] {
                        let k = graph.width(*logits);
                        let Aux::Probs(soft) = &self.aux[i] else { unreachable!() };
                        let tau = self.tau;
                        let gx = acc(&mut g[logits.0], batch * k);
                        for r in 0..batch {
                            let s: f64 = (0..k).map(|c| soft[r * k + c] * gy[r * k + c]).sum();
                            for c in 0..k {
                                gx[r * k + c] += soft[r * k + c] * (gy[r * k + c] - s) / tau;
                            }
                        }
                    }
                }
                Op::SumAll { x } => {
                    if needs[x.0] {
                        let len = self.values[x.0].len();
                        let gx = acc(&mut g[x.0], len);
                        gx.iter_mut().for_each(|o| *o += gy[0]);
                    }
                }
            }
        }
        Ok(Backward { grads, inputs })
    }
}

/// Backward through `u = a / n` with `n = max(|a|, eps)`.
fn project_unit(a: &[f64], u: &[f64], n: f64, du: &[f64], out: &mut [f64]) {
    if kernels::norm(a) < NORM_EPS {
        for (o, g) in out.iter_mut().zip(du) {
            *o += g / n;
        }
    } else {
        let s = kernels::dot(u, du);
        for j in 0..a.len() {
            out[j] += (du[j] - u[j] * s) / n;
        }
    }
}
