//! Finite-difference fidelity of every kernel.

use theia_autodiff::*;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 100;
const DIM: usize = 8;
const BATCH: usize = 3;

fn randn(rng: &mut Stream, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.normal()).collect()
}

fn param(ps: &mut ParamStore, rng: &mut Stream, name: &str, shape: Vec<usize>, trainable: bool) -> ParamId {
    let n = shape.iter().product();
    ps.add(name, Tensor::new(shape, randn(rng, n, 0.7)).unwrap(), trainable).unwrap()
}

/// Project `y` to a scalar with a frozen random vector so no output entry is
/// privileged.
fn project(g: &mut GraphBuilder, ps_proj: ParamId, y: NodeId) -> NodeId {
    let z = g.affine(y, ps_proj, None).unwrap();
    g.sum_all(z).unwrap()
}

/// Build `kernel(x)` for one instance and check it.
fn check<F>(name: &str, build: F)
where
    F: Fn(&mut ParamStore, &mut Stream) -> (Box<dyn Fn(&ParamStore) -> (KernelGraph, NodeId)>, Feed, EvalOptions<'static>),
{
    let mut worst: f64 = 0.0;
    for inst in 0..INSTANCES {
        let mut rng = Stream::new(0xC0FFEE, inst);
        let mut ps = ParamStore::new();
        let (mk, feed, opts) = build(&mut ps, &mut rng);
        let (graph, loss) = mk(&ps);
        let rep = grad_check(&graph, &ps, &feed, loss, &opts, 1000 + inst, EPS).unwrap();
        worst = worst.max(rep.max_rel_err);
        assert!(
            rep.max_rel_err <= TOL,
            "{name} instance {inst}: {:?}",
            rep.tensors
        );
    }
    eprintln!("{name}: worst relative error {worst:.2e}");
}

fn x_feed(rng: &mut Stream) -> Feed {
    Feed::new().real("x", randn(rng, BATCH * DIM, 1.0))
}

#[test]
fn affine_gradients() {
    check("affine", |ps, rng| {
        let w = param(ps, rng, "w", vec![5, DIM], true);
        let b = param(ps, rng, "b", vec![5], true);
        let r = param(ps, rng, "r", vec![1, 5], false);
        (
            Box::new(move |ps: &ParamStore| {
                let mut g = GraphBuilder::new(ps);
                let x = g.input("x", DIM).unwrap();
                let y = g.affine(x, w, Some(b)).unwrap();
                let l = project(&mut g, r, y);
                (g.finish(), l)
            }),
            x_feed(rng),
            EvalOptions::eval(),
        )
    });
}

#[test]
fn gelu_gradients() {
    check("gelu", |ps, rng| {
        let r = param(ps, rng, "r", vec![1, DIM], false);
        (
            Box::new(move |ps: &ParamStore| {
                let mut g = GraphBuilder::new(ps);
                let x = g.input("x", DIM).unwrap();
                let y = g.gelu(x).unwrap();
                let l = project(&mut g, r, y);
                (g.finish(), l)
            }),
            x_feed(rng),
            EvalOptions::eval(),
        )
    });
}

#[test]
fn layer_norm_gradients() {
    check("layernorm", |ps, rng| {
        let ga = param(ps, rng, "gamma", vec![DIM], true);
        let be = param(ps, rng, "beta", vec![DIM], true);
        let r = param(ps, rng, "r", vec![1, DIM], false);
        (
            Box::new(move |ps: &ParamStore| {
                let mut g = GraphBuilder::new(ps);
                let x = g.input("x", DIM).unwrap();
                let y = g.layer_norm(x, ga, be).unwrap();
                let l = project(&mut g, r, y);
                (g.finish(), l)
            }),
            x_feed(rng),
            EvalOptions::eval(),
        )
    });
}

#[test]
fn dropout_gradients_with_pinned_mask() {
    check("dropout", |ps, rng| {
        let r = param(ps, rng, "r", vec![1, DIM], false);
        (
            Box::new(move |ps: &ParamStore| {
                let mut g = GraphBuilder::new(ps);
                let x = g.input("x", DIM).unwrap();
                let y = g.dropout(x, 0.3).unwrap();
                let l = project(&mut g, r, y);
                (g.finish(), l)
            }),
            x_feed(rng),
            EvalOptions::train(),
        )
    });
}

#[test]
fn concat_gradients() {
    check("concat", |ps, rng| {
        let r = param(ps, rng, "r", vec![1, DIM + 4], false);
        let feed = x_feed(rng).real("z", randn(rng, BATCH * 4, 1.0));
        (
            Box::new(move |ps: &ParamStore| {
                let mut g = GraphBuilder::new(ps);
                let x = g.input("x", DIM).unwrap();
                let z = g.input("z", 4).unwrap();
                let y = g.concat(&[z, x]).unwrap();
                let l = project(&mut g, r, y);
                (g.finish(), l)
            }),
            feed,
            EvalOptions::eval(),
        )
    });
}

#[test]
fn embedding_gradients() {
    check("embedding", |ps, rng| {
        let t = param(ps, rng, "table", vec![5, DIM], true);
        let r = param(ps, rng, "r", vec![1, DIM], false);
        let idx = (0..BATCH).map(|_| rng.below(5)).collect();
        (
            Box::new(move |ps: &ParamStore| {
                let mut g = GraphBuilder::new(ps);
                let i = g.index_input("i", 5).unwrap();
                let y = g.embedding(t, i).unwrap();
                let l = project(&mut g, r, y);
                (g.finish(), l)
            }),
            Feed::new().index("i", idx),
            EvalOptions::eval(),
        )
    });
}

#[test]
fn softmax_gradients() {
    check("softmax", |ps, rng| {
        let r = param(ps, rng, "r", vec![1, DIM], false);
        (
            Box::new(move |ps: &ParamStore| {
                let mut g = GraphBuilder::new(ps);
                let x = g.input("x", DIM).unwrap();
                let y = g.softmax(x).unwrap();
                let l = project(&mut g, r, y);
                (g.finish(), l)
            }),
            x_feed(rng),
            EvalOptions::eval(),
        )
    });
}

#[test]
fn l2_normalize_gradients() {
    check("l2norm", |ps, rng| {
        let r = param(ps, rng, "r", vec![1, DIM], false);
        (
            Box::new(move |ps: &ParamStore| {
                let mut g = GraphBuilder::new(ps);
                let x = g.input("x", DIM).unwrap();
                let y = g.l2_normalize(x).unwrap();
                let l = project(&mut g, r, y);
                (g.finish(), l)
            }),
            x_feed(rng),
            EvalOptions::eval(),
        )
    });
}

#[test]
fn prototype_dot_gradients() {
    check("prototypes-dot", |ps, rng| {
        let p = param(ps, rng, "protos", vec![3, DIM], true);
        let r = param(ps, rng, "r", vec![1, 3], false);
        (
            Box::new(move |ps: &ParamStore| {
                let mut g = GraphBuilder::new(ps);
                let x = g.input("x", DIM).unwrap();
                let y = g.prototype_logits(x, p, ProtoKind::Dot).unwrap();
                let l = project(&mut g, r, y);
                (g.finish(), l)
            }),
            x_feed(rng),
            EvalOptions::eval(),
        )
    });
}

#[test]
fn prototype_cosine_gradients() {
    check("prototypes-cosine", |ps, rng| {
        let p = param(ps, rng, "protos", vec![3, DIM], true);
        let r = param(ps, rng, "r", vec![1, 3], false);
        (
            Box::new(move |ps: &ParamStore| {
                let mut g = GraphBuilder::new(ps);
                let x = g.input("x", DIM).unwrap();
                let y = g.prototype_logits(x, p, ProtoKind::Cosine { scale: 10.0 }).unwrap();
                let l = project(&mut g, r, y);
                (g.finish(), l)
            }),
            x_feed(rng),
            EvalOptions::eval(),
        )
    });
}

#[test]
fn weighted_cross_entropy_gradients() {
    check("cross-entropy", |_ps, rng| {
        let t = (0..BATCH).map(|_| rng.below(DIM)).collect();
        let w: Vec<f64> = (0..DIM).map(|_| rng.range(0.5, 2.0)).collect();
        (
            Box::new(move |ps: &ParamStore| {
                let mut g = GraphBuilder::new(ps);
                let x = g.input("x", DIM).unwrap();
                let t = g.index_input("t", DIM).unwrap();
                let l = g.weighted_cross_entropy(x, t, &w).unwrap();
                (g.finish(), l)
            }),
            x_feed(rng).index("t", t),
            EvalOptions::eval(),
        )
    });
}

#[test]
fn add_scale_sum_gradients() {
    check("add/scale", |ps, rng| {
        let r = param(ps, rng, "r", vec![1, DIM], false);
        let feed = x_feed(rng).real("z", randn(rng, BATCH * DIM, 1.0));
        (
            Box::new(move |ps: &ParamStore| {
                let mut g = GraphBuilder::new(ps);
                let x = g.input("x", DIM).unwrap();
                let z = g.input("z", DIM).unwrap();
                let s = g.scale(z, -1.7).unwrap();
                let y = g.add(x, s).unwrap();
                let l = project(&mut g, r, y);
                (g.finish(), l)
            }),
            feed,
            EvalOptions::eval(),
        )
    });
}

#[test]
fn masked_replace_gradients() {
    check("masked-replace", |ps, rng| {
        let e = param(ps, rng, "unk", vec![DIM], true);
        let r = param(ps, rng, "r", vec![1, DIM], false);
        let flags = (0..BATCH).map(|i| if i == 0 { 1 } else { rng.below(2) }).collect();
        (
            Box::new(move |ps: &ParamStore| {
                let mut g = GraphBuilder::new(ps);
                let x = g.input("x", DIM).unwrap();
                let f = g.index_input("f", 2).unwrap();
                let y = g.masked_replace(x, f, e).unwrap();
                let l = project(&mut g, r, y);
                (g.finish(), l)
            }),
            x_feed(rng).index("f", flags),
            EvalOptions::eval(),
        )
    });
}

/// The straight-through backward must equal the derivative of the soft
/// relaxation `r . softmax((z + g) / tau)` with the noise `g` held fixed.
#[test]
fn gumbel_soft_path_matches_finite_differences() {
    let k = 3;
    let mut worst: f64 = 0.0;
    for inst in 0..INSTANCES {
        let mut rng = Stream::new(77, inst);
        // at very low temperature the relaxation saturates and the central
        // difference drowns in rounding noise, so stay in the well-conditioned range
        let tau = rng.range(0.5, 1.0);
        let z = randn(&mut rng, BATCH * k, 1.0);
        let rvec = randn(&mut rng, k, 1.0);
        let mut ps = ParamStore::new();
        let r = ps.add("r", Tensor::new(vec![1, k], rvec.clone()).unwrap(), false).unwrap();
        let mut g = GraphBuilder::new(&ps);
        let x = g.input("x", k).unwrap();
        let y = g.gumbel_st(x).unwrap();
        let l = project(&mut g, r, y);
        let graph = g.finish();
        let feed = Feed::new().real("x", z.clone());
        let opts = EvalOptions::train().with_tau(tau);
        let noise_seed = 5000 + inst;
        let tr = forward_eval(&graph, &ps, &feed, &opts, &mut Stream::new(noise_seed, 0)).unwrap();
        let hard = tr.value(y);
        for row in hard.chunks(k) {
            assert_eq!(row.iter().sum::<f64>(), 1.0);
            assert!(row.iter().all(|&v| v == 0.0 || v == 1.0));
        }
        let back = tr.backward_from(&graph, &ps, l, &[1.0], true).unwrap();
        let analytic = &back.inputs[&x];

        // the same stream reproduces the noise drawn inside the graph
        let noise: Vec<f64> = {
            let mut s = Stream::new(noise_seed, 0);
            (0..BATCH * k).map(|_| s.gumbel()).collect()
        };
        let soft_loss = |zz: &[f64]| -> f64 {
            let (_, soft) = gumbel_softmax_st(zz, k, tau, Some(&noise), &mut Stream::new(0, 0)).unwrap();
            soft.chunks(k).map(|row| row.iter().zip(&rvec).map(|(a, b)| a * b).sum::<f64>()).sum()
        };
        let mut numeric = vec![0.0; z.len()];
        for j in 0..z.len() {
            let mut zp = z.clone();
            zp[j] += EPS;
            let mut zm = z.clone();
            zm[j] -= EPS;
            numeric[j] = (soft_loss(&zp) - soft_loss(&zm)) / (2.0 * EPS);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let an: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let rel = diff / an.max(nn).max(1e-12);
        worst = worst.max(rel);
        assert!(rel <= TOL, "instance {inst}: rel {rel} tau {tau} an {an:e} nn {nn:e} {analytic:?} {numeric:?}");
    }
    eprintln!("gumbel soft path: worst relative error {worst:.2e}");
}

#[test]
fn linear_graph_is_exact() {
    let mut ps = ParamStore::new();
    let w = ps.add("w", Tensor::new(vec![1, 4], vec![0.5, -1.0, 2.0, 0.25]).unwrap(), false).unwrap();
    let mut g = GraphBuilder::new(&ps);
    let x = g.input("x", 4).unwrap();
    let y = g.affine(x, w, None).unwrap();
    let l = g.sum_all(y).unwrap();
    let graph = g.finish();
    let feed = Feed::new().real("x", vec![1.0, 2.0, 3.0, 4.0]);
    let rep = grad_check(&graph, &ps, &feed, l, &EvalOptions::eval(), 0, 1e-5).unwrap();
    assert!(rep.max_rel_err <= 1e-8, "{rep:?}");
}

#[test]
fn one_by_one_affine_hand_gradient() {
    // y = w x, L = 3 y  =>  dL/dw = x * dL/dy = 2 * 3
    let mut ps = ParamStore::new();
    let w = ps.add("w", Tensor::new(vec![1, 1], vec![-0.4]).unwrap(), true).unwrap();
    let mut g = GraphBuilder::new(&ps);
    let x = g.input("x", 1).unwrap();
    let y = g.affine(x, w, None).unwrap();
    let s = g.scale(y, 3.0).unwrap();
    let l = g.sum_all(s).unwrap();
    let graph = g.finish();
    let tr = forward_eval(&graph, &ps, &Feed::new().real("x", vec![2.0]), &EvalOptions::eval(), &mut Stream::new(0, 0)).unwrap();
    let back = tr.backward(&graph, &ps, l).unwrap();
    assert_eq!(back.grads.get(w), &[6.0]);
}

#[test]
fn grad_check_rejects_bad_step() {
    let ps = ParamStore::new();
    let mut g = GraphBuilder::new(&ps);
    let x = g.input("x", 2).unwrap();
    let l = g.sum_all(x).unwrap();
    let graph = g.finish();
    let feed = Feed::new().real("x", vec![1.0, 2.0]);
    assert!(grad_check(&graph, &ps, &feed, l, &EvalOptions::eval(), 0, 1e-2).is_err());
    assert!(grad_check(&graph, &ps, &feed, l, &EvalOptions::eval(), 0, 1e-8).is_err());
}
