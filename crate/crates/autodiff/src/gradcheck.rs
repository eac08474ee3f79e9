//! Central finite-difference checks of the reverse pass.

use crate::error::{Error, Result};
use crate::eval::{forward_eval, EvalOptions, Feed};
use crate::graph::{KernelGraph, NodeId, Op, ValueKind};
use crate::params::ParamStore;
use crate::rng::Stream;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    /// `|a - n| / max(|a|, |n|, 1e-12)` with norms taken over the whole tensor.
    pub rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub tensors: Vec<TensorCheck>,
}

fn compare(name: String, analytic: &[f64], numeric: &[f64]) -> TensorCheck {
    let mut diff2 = 0.0;
    let mut a2 = 0.0;
    let mut n2 = 0.0;
    let mut max_abs: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        diff2 += (a - n) * (a - n);
        a2 += a * a;
        n2 += n * n;
        max_abs = max_abs.max((a - n).abs());
    }
    let denom = a2.sqrt().max(n2.sqrt()).max(1e-12);
    TensorCheck {
        name,
        rel_err: diff2.sqrt() / denom,
        max_abs_err: max_abs,
    }
}

/// Compare reverse-mode gradients of a scalar `loss` against central
/// differences for every trainable parameter and every real input.
///
/// Each loss evaluation re-creates the random stream from `seed`, so dropout
/// masks and Gumbel noise stay pinned across perturbations.
pub fn grad_check(
    graph: &KernelGraph,
    params: &ParamStore,
    feed: &Feed,
    loss: NodeId,
    opts: &EvalOptions,
    seed: u64,
    eps: f64,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Invalid(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    if graph.kind(loss) != ValueKind::Scalar {
        return Err(Error::Shape(format!("`{}` is not a scalar", graph.node(loss).label)));
    }
    let eval_loss = |ps: &ParamStore, f: &Feed| -> Result<f64> {
        let mut rng = Stream::new(seed, 0);
        Ok(forward_eval(graph, ps, f, opts, &mut rng)?.scalar(loss))
    };
    let mut rng = Stream::new(seed, 0);
    let trace = forward_eval(graph, params, feed, opts, &mut rng)?;
    let back = trace.backward_from(graph, params, loss, &[1.0], true)?;

    let mut tensors = Vec::new();
    let mut ps = params.clone();
    let ids: Vec<_> = params.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let len = ps.get(id).tensor.len();
        let mut numeric = vec![0.0; len];
        for j in 0..len {
            let orig = ps.get(id).tensor.values()[j];
            ps.get_mut(id).tensor.values_mut()[j] = orig + eps;
            let lp = eval_loss(&ps, feed)?;
            ps.get_mut(id).tensor.values_mut()[j] = orig - eps;
            let lm = eval_loss(&ps, feed)?;
            ps.get_mut(id).tensor.values_mut()[j] = orig;
            numeric[j] = (lp - lm) / (2.0 * eps);
        }
        tensors.push(compare(ps.get(id).name.clone(), back.grads.get(id), &numeric));
    }

    let mut f = feed.clone();
    for (nid, node) in graph.input_nodes() {
        if node.op != Op::Input {
            continue;
        }
        let len = f.get_real(&node.label).map(|v| v.len()).unwrap_or(0);
        let mut numeric = vec![0.0; len];
        for j in 0..len {
            let orig = f.get_real(&node.label).unwrap()[j];
            f.real_mut(&node.label).unwrap()[j] = orig + eps;
            let lp = eval_loss(params, &f)?;
            f.real_mut(&node.label).unwrap()[j] = orig - eps;
            let lm = eval_loss(params, &f)?;
            f.real_mut(&node.label).unwrap()[j] = orig;
            numeric[j] = (lp - lm) / (2.0 * eps);
        }
        let analytic = back.inputs.get(&nid).cloned().unwrap_or_else(|| vec![0.0; len]);
        tensors.push(compare(format!("input:{}", node.label), &analytic, &numeric));
    }

    let max_rel_err = tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_err, tensors })
}
