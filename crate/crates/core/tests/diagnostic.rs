//! Rule rosters, batch construction guards and the oracle self-test.

use std::collections::HashSet;

use theia::diagnostic::*;
use theia::{k3_apply, k3_not, K3Op, K3};

#[test]
fn roster_covers_every_cell_once() {
    let rules = full_rules();
    assert_eq!(rules.len(), 39);
    let keys: HashSet<_> = rules.iter().map(|r| (r.op, r.left, r.right)).collect();
    assert_eq!(keys.len(), 39);
    for op in K3Op::NAMED {
        for l in K3::ALL {
            for r in K3::ALL {
                assert!(keys.contains(&(RuleOp::Binary(op), l, Some(r))));
            }
        }
    }
    assert_eq!(rules.iter().filter(|r| r.op == RuleOp::Not).count(), 3);
    assert_eq!(targeted_rules().len(), 12);
}

#[test]
fn expectations_come_from_the_operators() {
    for r in full_rules().iter().chain(&targeted_rules()) {
        let want = match r.op {
            RuleOp::Binary(op) => k3_apply(op, r.left, r.right.unwrap()),
            RuleOp::Not => k3_not(r.left),
        };
        assert_eq!(r.expected, want, "{}", r.name());
    }
    let names: Vec<String> = full_rules().iter().filter(|r| r.unknown_first).map(|r| r.name()).collect();
    assert_eq!(names.len(), 2);
}

#[test]
fn seeds() {
    assert_eq!(rule_seed(&RuleSpec::binary(K3Op::And, K3::False, K3::Unknown)), 2);
    assert_eq!(rule_seed(&RuleSpec::binary(K3Op::Or, K3::True, K3::Unknown)), 14);
    assert_eq!(rule_seed(&RuleSpec::not(K3::True)), (K3Op::Imp.index() * 9 + 3) as u64);
}

#[test]
fn batches_are_point_masses_without_operand_unknowns() {
    let cfg = DiagConfig::default();
    for rule in full_rules() {
        let batch = build_rule_batch(&rule, 2_000, &cfg).unwrap();
        let (_, l, r) = rule.realized();
        for s in &batch {
            assert!(!s.raw.a_u && !s.raw.b_u);
            assert_eq!((s.val_ord, s.val_set), (l, r), "{}", rule.name());
            assert_eq!(s.verdict, rule.expected);
        }
    }
}

#[test]
fn or_u_f_construction() {
    let rule = RuleSpec::binary(K3Op::Or, K3::Unknown, K3::False);
    let batch = build_rule_batch(&rule, 10_000, &DiagConfig::default()).unwrap();
    assert!(batch.iter().all(|s| s.raw.d_u && !s.set_bit(s.c) && !s.raw.s_u));
}

#[test]
fn true_side_survives_c_zero() {
    let rule = RuleSpec::binary(K3Op::And, K3::True, K3::True);
    let batch = build_rule_batch(&rule, 10_000, &DiagConfig::default()).unwrap();
    let zeros: Vec<_> = batch.iter().filter(|s| s.c == 0).collect();
    assert!(!zeros.is_empty());
    assert!(zeros.iter().all(|s| s.val_ord == K3::True));
}

#[test]
fn oracle_passes_and_constant_fails() {
    let r = run_diagnostic(&OracleClassifier, Roster::Full39, 1_000, &DiagConfig::default()).unwrap();
    assert_eq!(r.passed, 39);
    assert!(r.rules.iter().all(|x| x.accuracy == 1.0));
    assert_eq!(r.grand_mean, 1.0);
    let u = run_diagnostic(&ConstantClassifier(K3::Unknown), Roster::Full39, 200, &DiagConfig::default()).unwrap();
    for x in &u.rules {
        assert_eq!(x.passed, x.expected == K3::Unknown, "{}", x.rule);
    }
}
