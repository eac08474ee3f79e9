//! Matched pairs and the patch accounting.

use proptest::prelude::*;
use theia::k3::{K3Op, K3};
use theia::model::{ModelConfig, PatchSpec, TheiaModel};
use theia::patching::*;
use theia::taskgen::{arith_eval_mod, RawSample, Relation};
use theia_autodiff::Stream;

fn model(seed: u64) -> TheiaModel {
    TheiaModel::init(ModelConfig::tiny(8), &mut Stream::new(seed, 0)).unwrap()
}

fn pairs(p: PairPattern, n: usize) -> Vec<MatchedPair> {
    let m = ModelConfig::tiny(8);
    build_pairs(p, n, PAIR_DATA_SEED, m.num_range, 0.45).unwrap()
}

#[test]
fn construction_matches_the_declared_layout() {
    let modulus = ModelConfig::tiny(8).num_range + 1;
    for pat in [PairPattern::OR, PairPattern::AND] {
        let ps = pairs(pat, DEFAULT_PAIRS);
        assert_eq!(ps.len(), 1000);
        for p in &ps {
            let (t, u) = (&p.t_side.raw, &p.u_side.raw);
            assert_eq!(*t, RawSample { d_u: false, ..*u });
            assert!(!t.d_u && u.d_u);
            assert_eq!(t.relation, Relation::Gte);
            let c = arith_eval_mod(t.a, t.b, t.arith_op, modulus);
            assert_eq!(t.d, c.saturating_sub(1));
            let bit = t.set_bits >> c & 1 == 1;
            assert_eq!(bit, pat.set_value == K3::True);
            assert_eq!(t.logic_op, pat.op);
            assert_eq!((p.t_side.val_ord, p.t_side.val_set), (K3::True, pat.set_value));
            assert_eq!((p.u_side.val_ord, p.u_side.val_set), (K3::Unknown, pat.set_value));
            assert_eq!((p.t_side.verdict, p.u_side.verdict), (K3::True, K3::Unknown));
            assert_eq!(shared_checksum(&p.t_side), shared_checksum(&p.u_side));
            assert_eq!(p.checksum, shared_checksum(&p.t_side));
        }
    }
}

#[test]
fn construction_is_deterministic() {
    assert_eq!(pairs(PairPattern::AND, 300), pairs(PairPattern::AND, 300));
    let other = build_pairs(PairPattern::AND, 300, PAIR_DATA_SEED + 1, 20, 0.45).unwrap();
    assert_ne!(pairs(PairPattern::AND, 300), other);
}

#[test]
fn absorbent_and_unknown_set_sides_are_ill_posed() {
    for (op, set_value) in [(K3Op::And, K3::False), (K3Op::Or, K3::True), (K3Op::Or, K3::Unknown), (K3Op::And, K3::Unknown)] {
        let p = PairPattern { op, set_value };
        assert!(p.check().is_err());
        assert!(build_pairs(p, 10, PAIR_DATA_SEED, 20, 0.45).is_err());
    }
    let msg = PairPattern { op: K3Op::And, set_value: K3::False }.check().unwrap_err().to_string();
    assert!(msg.contains("absorbent"), "{msg}");
}

#[test]
fn v_set_is_byte_equal_on_every_pair() {
    let m = model(5);
    for pat in [PairPattern::OR, PairPattern::AND] {
        let r = run_patching(&m, &pairs(pat, 500), PatchSource::Identity).unwrap();
        assert_eq!(r.byte_equal, r.constructed);
    }
}

#[test]
fn identity_patch_never_flips() {
    let m = model(7);
    for pat in [PairPattern::OR, PairPattern::AND] {
        let ps = pairs(pat, 400);
        let r = run_patching(&m, &ps, PatchSource::Identity).unwrap();
        assert_eq!(r.flips, 0);
        assert_eq!(r.fell, 0);
        assert_eq!(r.residual, r.eligible);
        // Stronger than the report: every patched prediction equals the baseline.
        let t: Vec<_> = ps.iter().map(|p| &p.t_side).collect();
        let base = m.forward(&t, true, None).unwrap();
        let own = base.boundaries.as_ref().unwrap().v_ord.clone();
        let patched = m.forward(&t, false, Some(&PatchSpec::new("v_ord", own).unwrap())).unwrap();
        assert_eq!(base.predictions, patched.predictions);
    }
}

#[test]
fn patching_rejects_empty_and_mixed_inputs() {
    let m = model(1);
    assert!(run_patching(&m, &[], PatchSource::Counterfactual).is_err());
    let mut mixed = pairs(PairPattern::OR, 3);
    mixed.extend(pairs(PairPattern::AND, 3));
    assert!(run_patching(&m, &mixed, PatchSource::Counterfactual).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn accounting_closes(seed in 0u64..1000, data_seed in 0u64..1000, and in any::<bool>(), cf in any::<bool>()) {
        let pat = if and { PairPattern::AND } else { PairPattern::OR };
        let src = if cf { PatchSource::Counterfactual } else { PatchSource::Identity };
        let ps = build_pairs(pat, 64, data_seed, 20, 0.45).unwrap();
        let r = run_patching(&model(seed), &ps, src).unwrap();
        prop_assert_eq!(r.flips + r.residual + r.fell, r.eligible);
        prop_assert!(r.eligible <= r.t_baseline_correct.min(r.u_baseline_correct));
        prop_assert!(r.byte_equal <= r.constructed);
        prop_assert!((0.0..=1.0).contains(&r.flip_rate()));
        prop_assert!((0.0..=1.0).contains(&r.eligible_fraction()));
    }
}
