//! Forward-pass structure: routing, hooks, counts and initialization.

use theia::model::*;
use theia::taskgen::{gen_dataset, Sample, SampleConfig};
use theia::K3;
use theia_autodiff::Stream;

fn samples(n: usize) -> Vec<Sample> {
    gen_dataset(&SampleConfig::with_seed(3), 0, n)
}

fn model(cfg: ModelConfig) -> TheiaModel {
    TheiaModel::init(cfg, &mut Stream::new(11, 0)).unwrap()
}

fn within(x: usize, target: usize, tol: f64) -> bool {
    (x as f64 - target as f64).abs() <= tol * target as f64
}

#[test]
fn canonical_counts_are_near_published_totals() {
    let pc = model(ModelConfig::four_domain()).param_count();
    assert!(within(pc.total, 2_751_232, 0.05), "{}", pc.total);
    assert!(within(pc.bridges(), 33_000, 0.05), "{}", pc.bridges());
    let chain = model(ModelConfig::chain_step()).param_count();
    assert!(within(chain.total, 1_508_096, 0.05), "{}", chain.total);
}

#[test]
fn ablation_counts_change_only_where_expected() {
    let base = model(ModelConfig::four_domain()).param_count();
    let nb = model(ModelConfig {
        use_bridges: false,
        ..ModelConfig::four_domain()
    })
    .param_count();
    assert_eq!(base.total - nb.total, base.bridges());
    assert_eq!(nb.bridges(), 0);
    let single = model(ModelConfig {
        subspace_count: 1,
        ..ModelConfig::four_domain()
    })
    .param_count();
    for c in ["arith", "set", "head"] {
        assert_eq!(single.component(c), base.component(c));
    }
    assert!(single.component("order") < base.component("order"));
    assert!(single.component("logic") < base.component("logic"));
}

#[test]
fn orthogonal_prototypes() {
    let m = model(ModelConfig::four_domain());
    let p = m.params.by_name("head.protos").unwrap().tensor.values().to_vec();
    let h = m.config.hidden_dim;
    for i in 0..3 {
        for j in 0..3 {
            let d: f64 = (0..h).map(|k| p[i * h + k] * p[j * h + k]).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((d - want).abs() < 1e-10, "{i} {j} {d}");
        }
    }
}

#[test]
fn random_normal_prototypes_have_std_002() {
    let m = model(ModelConfig {
        prototype_init: PrototypeInit::RandomNormal,
        ..ModelConfig::four_domain()
    });
    let p = m.params.by_name("head.protos").unwrap().tensor.values();
    let mean = p.iter().sum::<f64>() / p.len() as f64;
    let sd = (p.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (p.len() - 1) as f64).sqrt();
    assert!((sd - 0.02).abs() < 0.002, "{sd}");
}

#[test]
fn orthogonal_init_needs_three_dims() {
    assert!(TheiaModel::init(ModelConfig::tiny(2), &mut Stream::new(0, 0)).is_err());
    TheiaModel::init(ModelConfig::tiny(3), &mut Stream::new(0, 0)).unwrap();
}

#[test]
fn same_seed_same_parameters() {
    let a = model(ModelConfig::tiny(16));
    let b = model(ModelConfig::tiny(16));
    for ((_, x), (_, y)) in a.params.iter().zip(b.params.iter()) {
        assert_eq!(x.tensor.values(), y.tensor.values());
    }
}

#[test]
fn identity_patch_changes_nothing() {
    let m = model(ModelConfig::tiny(16));
    let s = samples(300);
    let refs: Vec<&Sample> = s.iter().collect();
    let base = m.forward(&refs, true, None).unwrap();
    let acts = base.boundaries.as_ref().unwrap();
    for name in ["v_ord", "v_set"] {
        let values = acts.get(Boundary::from_name(name).unwrap()).to_vec();
        let p = m.forward(&refs, false, Some(&PatchSpec::new(name, values).unwrap())).unwrap();
        assert_eq!(p.predictions, base.predictions);
        assert_eq!(p.logits, base.logits);
    }
    assert!(m.forward(&refs, false, Some(&PatchSpec::new("v_ord", vec![0.0; 5]).unwrap())).is_err());
}

#[test]
fn zero_parameters_tie_to_the_first_class() {
    let mut m = model(ModelConfig::tiny(8));
    for (_, p) in m.params.iter_mut() {
        if p.name != "head.protos" {
            p.tensor.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let s = samples(200);
    let refs: Vec<&Sample> = s.iter().collect();
    let out = m.forward(&refs, false, None).unwrap();
    for z in out.logits.chunks(3) {
        assert!(z[0] == z[1] && z[1] == z[2], "{z:?}");
    }
    assert!(out.predictions.iter().all(|&p| p == K3::False));
}

#[test]
fn logic_operator_reaches_no_upstream_boundary() {
    let m = model(ModelConfig::tiny(16));
    let s = samples(200);
    let refs: Vec<&Sample> = s.iter().collect();
    let base = m.forward(&refs, true, None).unwrap().boundaries.unwrap();
    let mut zeroed = TheiaModel::from_params(m.config.clone(), m.params.clone()).unwrap();
    zeroed
        .params
        .by_name_mut("logic.op_emb")
        .unwrap()
        .tensor
        .values_mut()
        .iter_mut()
        .for_each(|v| *v = 0.0);
    let z = zeroed.forward(&refs, true, None).unwrap().boundaries.unwrap();
    for b in [Boundary::C, Boundary::VOrd, Boundary::VSet] {
        assert!(base.get(b).iter().zip(z.get(b)).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", b.name());
    }
    assert_ne!(base.logic_out, z.logic_out);
}

#[test]
fn d_u_moves_only_the_order_output() {
    let m = model(ModelConfig::tiny(16));
    let s: Vec<Sample> = samples(100).into_iter().filter(|s| !s.raw.d_u).collect();
    let flipped: Vec<Sample> = s
        .iter()
        .map(|x| Sample::derive(x.index, theia::taskgen::RawSample { d_u: true, ..x.raw }, 21))
        .collect();
    let a = m.forward(&s.iter().collect::<Vec<_>>(), true, None).unwrap().boundaries.unwrap();
    let b = m.forward(&flipped.iter().collect::<Vec<_>>(), true, None).unwrap().boundaries.unwrap();
    assert_eq!(a.c, b.c);
    assert_eq!(a.v_set, b.v_set);
    for i in 0..s.len() {
        assert_ne!(a.row(Boundary::VOrd, i), b.row(Boundary::VOrd, i));
    }
}

#[test]
fn dot_and_cosine_agree_at_orthonormal_init() {
    let m = model(ModelConfig::tiny(16));
    let s = samples(500);
    let refs: Vec<&Sample> = s.iter().collect();
    let out = m.forward(&refs, false, None).unwrap();
    for (z, p) in out.logits.chunks(3).zip(&out.predictions) {
        assert_eq!(theia_autodiff::kernels::argmax(z), p.index());
    }
}

#[test]
fn no_bridge_model_trains_one_step() {
    use theia::trainer::{training_graph, Optimizer, DEFAULT_CLASS_WEIGHTS};
    let mut m = model(ModelConfig {
        use_bridges: false,
        ..ModelConfig::tiny(8)
    });
    let s = samples(64);
    let refs: Vec<&Sample> = s.iter().collect();
    let (g, loss) = training_graph(&m, DEFAULT_CLASS_WEIGHTS).unwrap();
    let feed = encode_batch(&refs, 20);
    let mut feed = feed;
    feed.set_index("target", targets(&refs));
    let mut rng = Stream::new(0, 0);
    let t = theia_autodiff::forward_eval(&g, &m.params, &feed, &theia_autodiff::EvalOptions::train(), &mut rng).unwrap();
    assert!(t.scalar(loss).is_finite());
    let back = t.backward(&g, &m.params, loss).unwrap();
    let mut opt = Optimizer::new(&m.params, 1e-3, 0.0, 0.01, 10);
    opt.step(&mut m.params, &back.grads).unwrap();
}
