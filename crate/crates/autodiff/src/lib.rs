//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! Only the kernels needed by the THEIA engines are provided: affine maps,
//! exact GELU, layer normalization, dropout, concatenation, embeddings,
//! softmax, L2 normalization, prototype logits, weighted cross-entropy, plus
//! a Gumbel straight-through sampler and a few structural helpers (residual
//! add, scaling, masked replacement).
//!
//! ```
//! use theia_autodiff::*;
//!
//! let mut ps = ParamStore::new();
//! let w = ps.add("w", Tensor::new(vec![1, 1], vec![3.0]).unwrap(), true).unwrap();
//! let mut g = GraphBuilder::new(&ps);
//! let x = g.input("x", 1).unwrap();
//! let y = g.affine(x, w, None).unwrap();
//! let loss = g.sum_all(y).unwrap();
//! let graph = g.finish();
//!
//! let feed = Feed::new().real("x", vec![2.0]);
//! let tr = forward_eval(&graph, &ps, &feed, &EvalOptions::eval(), &mut Stream::new(0, 0)).unwrap();
//! assert_eq!(tr.scalar(loss), 6.0);
//! let back = tr.backward(&graph, &ps, loss).unwrap();
//! assert_eq!(back.grads.get(w), &[2.0]);
//! ```

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use eval::{forward_eval, Backward, EvalOptions, Feed, GumbelNoise, Mode, Trace};
pub use gradcheck::{grad_check, GradCheckReport, TensorCheck};
pub use graph::{GraphBuilder, KernelGraph, Node, NodeId, Op, ProtoKind, ValueKind};
pub use optim::{adamw_step, cosine_lr, AdamWConfig, AdamWState};
pub use params::{Grads, ParamId, ParamStore, Parameter};
pub use rng::Stream;
pub use tensor::Tensor;

/// Standalone straight-through Gumbel-softmax on a `B x K` logit matrix.
///
/// Returns the hard one-hot sample and the softened probabilities
/// `softmax((logits + g) / tau)` whose Jacobian the graph kernel uses in the
/// backward pass. `noise` of `None` draws fresh Gumbel noise from `rng`;
/// `Some(zeros)` turns the forward into a plain argmax.
pub fn gumbel_softmax_st(
    logits: &[f64],
    k: usize,
    tau: f64,
    noise: Option<&[f64]>,
    rng: &mut Stream,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("temperature {tau} must be positive")));
    }
    if k == 0 || logits.len() % k != 0 {
        return Err(Error::Shape(format!("{} logits for {} classes", logits.len(), k)));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gumbel_softmax_st logits".into()));
    }
    if let Some(n) = noise {
        if n.len() != logits.len() {
            return Err(Error::Shape("noise length differs from logits".into()));
        }
    }
    let mut hard = vec![0.0; logits.len()];
    let mut soft = vec![0.0; logits.len()];
    let mut pert = vec![0.0; k];
    for r in 0..logits.len() / k {
        for c in 0..k {
            let g = match noise {
                Some(n) => n[r * k + c],
                None => rng.gumbel(),
            };
            pert[c] = logits[r * k + c] + g;
        }
        hard[r * k + kernels::argmax(&pert)] = 1.0;
        pert.iter_mut().for_each(|v| *v /= tau);
        kernels::softmax_row(&pert, &mut soft[r * k..(r + 1) * k]);
    }
    Ok((hard, soft))
}
