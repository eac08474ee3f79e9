use proptest::prelude::*;
use theia_autodiff::*;

fn run(graph: &KernelGraph, ps: &ParamStore, feed: &Feed, opts: &EvalOptions, seed: u64) -> Trace {
    forward_eval(graph, ps, feed, opts, &mut Stream::new(seed, 0)).unwrap()
}

#[test]
fn gelu_values() {
    let ps = ParamStore::new();
    let mut g = GraphBuilder::new(&ps);
    let x = g.input("x", 2).unwrap();
    let y = g.gelu(x).unwrap();
    let graph = g.finish();
    let tr = run(&graph, &ps, &Feed::new().real("x", vec![0.0, 1.0]), &EvalOptions::eval(), 0);
    assert_eq!(tr.value(y)[0], 0.0);
    assert!((tr.value(y)[1] - 0.841345).abs() < 1e-6);
}

#[test]
fn layer_norm_of_constant_is_beta() {
    let mut ps = ParamStore::new();
    let ga = ps.add("g", Tensor::new(vec![4], vec![1.0; 4]).unwrap(), true).unwrap();
    let be = ps.add("b", Tensor::zeros(vec![4]), true).unwrap();
    let mut g = GraphBuilder::new(&ps);
    let x = g.input("x", 4).unwrap();
    let y = g.layer_norm(x, ga, be).unwrap();
    let graph = g.finish();
    let tr = run(&graph, &ps, &Feed::new().real("x", vec![3.5; 4]), &EvalOptions::eval(), 0);
    assert_eq!(tr.value(y), &[0.0; 4]);
}

#[test]
fn dropout_off_in_eval_mode() {
    let ps = ParamStore::new();
    let mut g = GraphBuilder::new(&ps);
    let x = g.input("x", 6).unwrap();
    let y = g.dropout(x, 0.5).unwrap();
    let graph = g.finish();
    let v: Vec<f64> = (0..6).map(|i| i as f64).collect();
    let tr = run(&graph, &ps, &Feed::new().real("x", v.clone()), &EvalOptions::eval(), 3);
    assert_eq!(tr.value(y), v.as_slice());
    let tr = run(&graph, &ps, &Feed::new().real("x", vec![1.0; 600]), &EvalOptions::train(), 3);
    let kept = tr.value(y).iter().filter(|&&v| v != 0.0).count();
    assert!(kept > 200 && kept < 400);
    assert!(tr.value(y).iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn non_finite_input_names_node() {
    let ps = ParamStore::new();
    let mut g = GraphBuilder::new(&ps);
    let x = g.input("operand", 2).unwrap();
    g.gelu(x).unwrap();
    let graph = g.finish();
    let err = forward_eval(
        &graph,
        &ps,
        &Feed::new().real("operand", vec![1.0, f64::NAN]),
        &EvalOptions::eval(),
        &mut Stream::new(0, 0),
    )
    .unwrap_err();
    assert!(matches!(err, Error::NonFinite(ref n) if n == "operand"), "{err}");
}

#[test]
fn backward_needs_retained_trace() {
    let mut ps = ParamStore::new();
    let w = ps.add("w", Tensor::new(vec![1, 1], vec![1.0]).unwrap(), true).unwrap();
    let mut g = GraphBuilder::new(&ps);
    let x = g.input("x", 1).unwrap();
    let y = g.affine(x, w, None).unwrap();
    let l = g.sum_all(y).unwrap();
    let graph = g.finish();
    let mut tr = run(&graph, &ps, &Feed::new().real("x", vec![1.0]), &EvalOptions::eval(), 0);
    tr.release_intermediates(&[y]);
    assert!(matches!(tr.backward(&graph, &ps, l), Err(Error::NoRetainedForward)));
}

#[test]
fn unreachable_parameters_get_zero_gradient() {
    let mut ps = ParamStore::new();
    let w = ps.add("w", Tensor::new(vec![1, 1], vec![2.0]).unwrap(), true).unwrap();
    let v = ps.add("v", Tensor::new(vec![1, 1], vec![5.0]).unwrap(), true).unwrap();
    let mut g = GraphBuilder::new(&ps);
    let x = g.input("x", 1).unwrap();
    let y = g.affine(x, w, None).unwrap();
    let _unused = g.affine(x, v, None).unwrap();
    let l = g.sum_all(y).unwrap();
    let graph = g.finish();
    let tr = run(&graph, &ps, &Feed::new().real("x", vec![3.0]), &EvalOptions::eval(), 0);
    let back = tr.backward(&graph, &ps, l).unwrap();
    assert_eq!(back.grads.get(w), &[3.0]);
    assert_eq!(back.grads.get(v), &[0.0]);
}

#[test]
fn gumbel_zero_noise_is_argmax() {
    let ps = ParamStore::new();
    let mut g = GraphBuilder::new(&ps);
    let x = g.input("x", 3).unwrap();
    let y = g.gumbel_st(x).unwrap();
    let graph = g.finish();
    let opts = EvalOptions::train().with_gumbel(GumbelNoise::Zero).with_tau(0.3);
    let tr = run(&graph, &ps, &Feed::new().real("x", vec![5.0, 0.0, 0.0, 1.0, 1.0, 1.0]), &opts, 0);
    assert_eq!(tr.value(y), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);

    let (hard, _) = gumbel_softmax_st(&[5.0, 0.0, 0.0], 3, 0.7, Some(&[0.0; 3]), &mut Stream::new(0, 0)).unwrap();
    assert_eq!(hard, vec![1.0, 0.0, 0.0]);
    assert!(gumbel_softmax_st(&[5.0, 0.0, 0.0], 3, 0.0, None, &mut Stream::new(0, 0)).is_err());
}

#[test]
fn cross_entropy_logit_gradient_sums_to_zero() {
    let ps = ParamStore::new();
    let mut g = GraphBuilder::new(&ps);
    let x = g.input("x", 3).unwrap();
    let t = g.index_input("t", 3).unwrap();
    let l = g.weighted_cross_entropy(x, t, &[1.0, 1.0, 2.0]).unwrap();
    let graph = g.finish();
    let feed = Feed::new().real("x", vec![0.3, -1.2, 2.0, 1.0, 1.0, -3.0]).index("t", vec![2, 0]);
    let tr = run(&graph, &ps, &feed, &EvalOptions::eval(), 0);
    let back = tr.backward_from(&graph, &ps, l, &[1.0], true).unwrap();
    for row in back.inputs[&x].chunks(3) {
        assert!(row.iter().sum::<f64>().abs() < 1e-15);
    }
}

#[test]
fn single_example_weighted_loss_scales() {
    let ps = ParamStore::new();
    let build = |w: [f64; 3]| {
        let mut g = GraphBuilder::new(&ps);
        let x = g.input("x", 3).unwrap();
        let t = g.index_input("t", 3).unwrap();
        let l = g.weighted_cross_entropy(x, t, &w).unwrap();
        (g.finish(), l)
    };
    let feed = Feed::new().real("x", vec![0.1, 0.2, -0.5]).index("t", vec![2]);
    let (g1, l1) = build([1.0, 1.0, 1.0]);
    let (g2, l2) = build([1.0, 1.0, 2.0]);
    let a = run(&g1, &ps, &feed, &EvalOptions::eval(), 0).scalar(l1);
    let b = run(&g2, &ps, &feed, &EvalOptions::eval(), 0).scalar(l2);
    assert!((b - 2.0 * a).abs() < 1e-15);
}

#[test]
fn override_replaces_downstream_values() {
    let ps = ParamStore::new();
    let mut g = GraphBuilder::new(&ps);
    let x = g.input("x", 2).unwrap();
    let h = g.scale(x, 2.0).unwrap();
    let h = g.name(h, "h").unwrap();
    let y = g.scale(h, 3.0).unwrap();
    let graph = g.finish();
    let repl = [10.0, 20.0];
    let opts = EvalOptions::eval().with_override(h, &repl);
    let tr = run(&graph, &ps, &Feed::new().real("x", vec![1.0, 1.0]), &opts, 0);
    assert_eq!(tr.value(y), &[30.0, 60.0]);
    let bad = [1.0];
    let opts = EvalOptions::eval().with_override(h, &bad);
    assert!(forward_eval(&graph, &ps, &Feed::new().real("x", vec![1.0, 1.0]), &opts, &mut Stream::new(0, 0)).is_err());
}

#[test]
fn adam_decreases_convex_quadratic() {
    // L(p) = (p - 3)^2
    let mut ps = ParamStore::new();
    ps.add("p", Tensor::new(vec![1], vec![0.0]).unwrap(), true).unwrap();
    let mut st = AdamWState::new(&ps);
    let before = 9.0;
    let mut g = ps.zero_grads();
    g.per_param[0][0] = 2.0 * (0.0 - 3.0);
    let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
    adamw_step(&mut ps, &g, &mut st, 1e-4, &cfg).unwrap();
    let p = ps.by_name("p").unwrap().tensor.values()[0];
    assert!((p - 3.0).powi(2) < before);
}

#[test]
fn adam_identical_batches_commute() {
    // two steps on gradient g then g' versus g' then g agree when g == g'
    let mk = || {
        let mut ps = ParamStore::new();
        ps.add("p", Tensor::new(vec![2], vec![0.5, -0.5]).unwrap(), true).unwrap();
        ps
    };
    let mut a = mk();
    let mut b = mk();
    let mut sa = AdamWState::new(&a);
    let mut sb = AdamWState::new(&b);
    let mut g = a.zero_grads();
    g.per_param[0] = vec![0.3, -0.1];
    for _ in 0..2 {
        adamw_step(&mut a, &g, &mut sa, 1e-3, &AdamWConfig::default()).unwrap();
        adamw_step(&mut b, &g.clone(), &mut sb, 1e-3, &AdamWConfig::default()).unwrap();
    }
    assert_eq!(a, b);
    assert_eq!(sa.step, 2);
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let mut ps = ParamStore::new();
    let mut rng = Stream::new(9, 9);
    ps.add("a.w", Tensor::new(vec![3, 2], (0..6).map(|_| rng.normal()).collect()).unwrap(), true).unwrap();
    ps.add("a.p", Tensor::new(vec![2], vec![-0.0, f64::MIN_POSITIVE]).unwrap(), false).unwrap();
    let bytes = checkpoint::encode(&ps);
    let back = checkpoint::decode(&bytes).unwrap();
    assert_eq!(checkpoint::encode(&back), bytes);
    assert_eq!(back.by_name("a.p").unwrap().trainable, false);
    assert!(checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(checkpoint::decode(&bad).is_err());
}

fn mlp_graph(ps: &mut ParamStore, rng: &mut Stream) -> (KernelGraph, NodeId) {
    let w1 = ps.add("w1", Tensor::new(vec![6, 4], (0..24).map(|_| rng.normal()).collect()).unwrap(), true).unwrap();
    let ga = ps.add("g", Tensor::new(vec![6], vec![1.0; 6]).unwrap(), true).unwrap();
    let be = ps.add("b", Tensor::zeros(vec![6]), true).unwrap();
    let mut g = GraphBuilder::new(ps);
    let x = g.input("x", 4).unwrap();
    let h = g.affine(x, w1, None).unwrap();
    let h = g.gelu(h).unwrap();
    let h = g.dropout(h, 0.2).unwrap();
    let h = g.layer_norm(h, ga, be).unwrap();
    let y = g.gumbel_st(h).unwrap();
    (g.finish(), y)
}

proptest! {
    #[test]
    fn forward_is_deterministic(seed in 0u64..1000, xs in prop::collection::vec(-3.0f64..3.0, 8)) {
        let mut ps = ParamStore::new();
        let (graph, y) = mlp_graph(&mut ps, &mut Stream::new(seed, 1));
        let feed = Feed::new().real("x", xs);
        let a = run(&graph, &ps, &feed, &EvalOptions::train(), seed);
        let b = run(&graph, &ps, &feed, &EvalOptions::train(), seed);
        let ab: Vec<u64> = a.value(y).iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u64> = b.value(y).iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(ab, bb);
    }

    #[test]
    fn gumbel_output_is_exact_one_hot(logits in prop::collection::vec(-20.0f64..20.0, 3..30), tau in 0.05f64..2.0, seed in 0u64..100) {
        let n = logits.len() / 3 * 3;
        let (hard, soft) = gumbel_softmax_st(&logits[..n], 3, tau, None, &mut Stream::new(seed, 0)).unwrap();
        for row in hard.chunks(3) {
            prop_assert_eq!(row.iter().sum::<f64>(), 1.0);
            prop_assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
        }
        for row in soft.chunks(3) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_schedule_bounded(t in 0u64..1000, total in 1u64..1000, peak in 0.0f64..1.0, frac in 0.0f64..1.0) {
        let floor = peak * frac;
        let t = t.min(total);
        let lr = cosine_lr(t, total, peak, floor);
        prop_assert!(lr <= peak + 1e-15 && lr >= floor - 1e-15);
    }

    #[test]
    fn argmax_of_dot_equals_argmax_of_cosine_with_orthonormal_protos(xs in prop::collection::vec(-5.0f64..5.0, 3)) {
        prop_assume!(xs.iter().any(|v| v.abs() > 1e-6));
        // identity prototypes are orthonormal
        let dot = xs.clone();
        let n = kernels::norm(&xs);
        let cos: Vec<f64> = xs.iter().map(|v| v / n).collect();
        prop_assert_eq!(kernels::argmax(&dot), kernels::argmax(&cos));
    }
}
