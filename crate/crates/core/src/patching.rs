//! Activation patching of the Order-Engine output.
//!
//! A matched pair differs only in `d_u`: the T side compares `c >= c-1`
//! (True), the U side masks `d` as Unknown. The set side is fixed so the
//! operator is not absorbent, which makes the two verdicts differ. Patching
//! the T side's `v_ord` with the U side's should then move the prediction
//! to the U side's verdict.

use serde::{Deserialize, Serialize};
use theia_autodiff::Stream;

use crate::error::{Result, TheiaError};
use crate::k3::{k3_apply, K3Op, K3};
use crate::model::{PatchSpec, TheiaModel};
use crate::taskgen::{arith_eval_mod, ArithOp, RawSample, Relation, Sample};

pub const PAIR_DATA_SEED: u64 = 12345;
pub const DEFAULT_PAIRS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairPattern {
    pub op: K3Op,
    /// Truth value of the set side, shared by both sides.
    pub set_value: K3,
}

impl PairPattern {
    pub const OR: PairPattern = PairPattern {
        op: K3Op::Or,
        set_value: K3::False,
    };
    pub const AND: PairPattern = PairPattern {
        op: K3Op::And,
        set_value: K3::True,
    };

    pub fn t_verdict(self) -> K3 {
        k3_apply(self.op, K3::True, self.set_value)
    }

    pub fn u_verdict(self) -> K3 {
        k3_apply(self.op, K3::Unknown, self.set_value)
    }

    /// Patching can only be read when the two sides disagree. With an
    /// absorbent set value (`F` under AND, `T` under OR) both verdicts
    /// coincide and the experiment is ill-posed.
    pub fn check(self) -> Result<()> {
        if self.set_value == K3::Unknown {
            return Err(TheiaError::Invalid("set side must be definite for a matched pair".into()));
        }
        if self.t_verdict() == self.u_verdict() {
            return Err(TheiaError::Invalid(format!(
                "ill-posed patch: {} with set side {} is absorbent (both sides give {})",
                self.op.name(),
                self.set_value,
                self.t_verdict()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub pattern: PairPattern,
    pub t_side: Sample,
    pub u_side: Sample,
    pub checksum: u64,
}

/// FNV-1a over the fields both sides must share.
pub fn shared_checksum(s: &Sample) -> u64 {
    let r = &s.raw;
    let mut h: u64 = 0xcbf29ce484222325;
    let mut feed = |bytes: &[u8]| {
        for b in bytes {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    feed(&r.a.to_le_bytes());
    feed(&r.b.to_le_bytes());
    feed(&[r.arith_op.index() as u8, r.logic_op.index() as u8, r.a_u as u8, r.b_u as u8, r.s_u as u8]);
    feed(&r.set_bits.to_le_bytes());
    h
}

pub fn build_pairs(pattern: PairPattern, n: usize, data_seed: u64, num_range: u32, set_bit_prob: f64) -> Result<Vec<MatchedPair>> {
    pattern.check()?;
    let modulus = num_range + 1;
    (0..n as u64)
        .map(|i| {
            let mut rng = Stream::new(data_seed, i);
            let a = rng.below(modulus as usize) as u32;
            let b = rng.below(modulus as usize) as u32;
            let arith_op = ArithOp::ALL[rng.below(4)];
            let mut set_bits = 0u32;
            for k in 0..modulus {
                if rng.bernoulli(set_bit_prob) {
                    set_bits |= 1 << k;
                }
            }
            let c = arith_eval_mod(a, b, arith_op, modulus);
            match pattern.set_value {
                K3::True => set_bits |= 1 << c,
                _ => set_bits &= !(1 << c),
            }
            let t_raw = RawSample {
                a,
                b,
                d: c.saturating_sub(1),
                arith_op,
                relation: Relation::Gte,
                set_bits,
                logic_op: pattern.op,
                a_u: false,
                b_u: false,
                d_u: false,
                s_u: false,
            };
            let u_raw = RawSample { d_u: true, ..t_raw };
            let t_side = Sample::derive(i, t_raw, modulus);
            let u_side = Sample::derive(i, u_raw, modulus);
            let ok = t_side.val_ord == K3::True
                && u_side.val_ord == K3::Unknown
                && t_side.val_set == pattern.set_value
                && u_side.val_set == pattern.set_value
                && t_side.verdict == pattern.t_verdict()
                && u_side.verdict == pattern.u_verdict();
            let checksum = shared_checksum(&t_side);
            if !ok || checksum != shared_checksum(&u_side) {
                return Err(TheiaError::Harness(format!("matched pair {i} violates its construction")));
            }
            Ok(MatchedPair {
                pattern,
                t_side,
                u_side,
                checksum,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatchSource {
    /// The U side's `v_ord`.
    Counterfactual,
    /// The T side's own `v_ord`; a no-op control.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchReport {
    pub pattern: PairPattern,
    pub source: PatchSource,
    pub constructed: usize,
    pub t_baseline_correct: usize,
    pub u_baseline_correct: usize,
    /// Pairs whose `v_set` rows are bit-identical across sides.
    pub byte_equal: usize,
    pub eligible: usize,
    /// Patched prediction equals the U side's verdict.
    pub flips: usize,
    /// Patched prediction stayed at the T side's verdict.
    pub residual: usize,
    /// Anything else (F for the OR and AND patterns).
    pub fell: usize,
}

impl PatchReport {
    pub fn flip_rate(&self) -> f64 {
        if self.eligible == 0 {
            0.0
        } else {
            self.flips as f64 / self.eligible as f64
        }
    }

    pub fn eligible_fraction(&self) -> f64 {
        if self.constructed == 0 {
            0.0
        } else {
            self.eligible as f64 / self.constructed as f64
        }
    }
}

pub fn run_patching(model: &TheiaModel, pairs: &[MatchedPair], source: PatchSource) -> Result<PatchReport> {
    let Some(first) = pairs.first() else {
        return Err(TheiaError::Invalid("no pairs to patch".into()));
    };
    let pattern = first.pattern;
    if pairs.iter().any(|p| p.pattern != pattern) {
        return Err(TheiaError::Invalid("pairs mix several patterns".into()));
    }
    let t: Vec<&Sample> = pairs.iter().map(|p| &p.t_side).collect();
    let u: Vec<&Sample> = pairs.iter().map(|p| &p.u_side).collect();
    let ft = model.forward(&t, true, None)?;
    let fu = model.forward(&u, true, None)?;
    let (bt, bu) = (ft.boundaries.as_ref().unwrap(), fu.boundaries.as_ref().unwrap());
    let values = match source {
        PatchSource::Counterfactual => bu.v_ord.clone(),
        PatchSource::Identity => bt.v_ord.clone(),
    };
    let patched = model.forward(&t, false, Some(&PatchSpec::new("v_ord", values)?))?;
    let mut r = PatchReport {
        pattern,
        source,
        constructed: pairs.len(),
        t_baseline_correct: 0,
        u_baseline_correct: 0,
        byte_equal: 0,
        eligible: 0,
        flips: 0,
        residual: 0,
        fell: 0,
    };
    let d = bt.dim;
    for i in 0..pairs.len() {
        let tc = ft.predictions[i] == pattern.t_verdict();
        let uc = fu.predictions[i] == pattern.u_verdict();
        let same = bt.v_set[i * d..(i + 1) * d]
            .iter()
            .zip(&bu.v_set[i * d..(i + 1) * d])
            .all(|(x, y)| x.to_bits() == y.to_bits());
        r.t_baseline_correct += tc as usize;
        r.u_baseline_correct += uc as usize;
        r.byte_equal += same as usize;
        if !(tc && uc && same) {
            continue;
        }
        r.eligible += 1;
        let p = patched.predictions[i];
        if p == pattern.u_verdict() {
            r.flips += 1;
        } else if p == pattern.t_verdict() {
            r.residual += 1;
        } else {
            r.fell += 1;
        }
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn absorbent_patterns_are_refused() {
        for (op, s) in [(K3Op::And, K3::False), (K3Op::Or, K3::True)] {
            assert!(PairPattern { op, set_value: s }.check().is_err());
        }
        PairPattern::OR.check().unwrap();
        PairPattern::AND.check().unwrap();
    }

    #[test]
    fn pairs_share_everything_but_d_u() {
        for pat in [PairPattern::OR, PairPattern::AND] {
            for p in build_pairs(pat, 200, PAIR_DATA_SEED, 20, 0.45).unwrap() {
                assert_eq!(p.t_side.raw, RawSample { d_u: false, ..p.u_side.raw });
                assert_eq!(p.t_side.verdict, K3::True);
                assert_eq!(p.u_side.verdict, K3::Unknown);
            }
        }
    }
}
