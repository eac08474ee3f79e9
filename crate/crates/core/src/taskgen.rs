//! Four-domain task generator and ground-truth evaluators.
//!
//! A sample chains arithmetic (`c = a ⊕ b`), an order comparison of `c`
//! against `d`, set membership of `c` in a 21-bit set, and a K3 operator
//! joining the two truth values. Any input may be masked as Unknown.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use theia_autodiff::Stream;

use crate::error::{Result, TheiaError};
use crate::k3::{k3_apply, K3Op, K3};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArithOp {
    Add = 0,
    Sub = 1,
    Mul = 2,
    Mod = 3,
}

impl ArithOp {
    pub const ALL: [ArithOp; 4] = [ArithOp::Add, ArithOp::Sub, ArithOp::Mul, ArithOp::Mod];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Relation {
    Gt = 0,
    Gte = 1,
    Lt = 2,
    Lte = 3,
    Eq = 4,
    Neq = 5,
}

impl Relation {
    pub const ALL: [Relation; 6] = [
        Relation::Gt,
        Relation::Gte,
        Relation::Lt,
        Relation::Lte,
        Relation::Eq,
        Relation::Neq,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn holds(self, c: u32, d: u32) -> bool {
        match self {
            Relation::Gt => c > d,
            Relation::Gte => c >= d,
            Relation::Lt => c < d,
            Relation::Lte => c <= d,
            Relation::Eq => c == d,
            Relation::Neq => c != d,
        }
    }
}

/// Arithmetic with results folded into `0..=modulus-1` (21 values by default).
pub fn arith_eval_mod(a: u32, b: u32, op: ArithOp, modulus: u32) -> u32 {
    match op {
        ArithOp::Add => (a + b) % modulus,
        ArithOp::Sub => a.saturating_sub(b),
        ArithOp::Mul => (a * b) % modulus,
        ArithOp::Mod => a % b.max(1),
    }
}

pub fn arith_eval(a: u32, b: u32, op: ArithOp) -> u32 {
    arith_eval_mod(a, b, op, 21)
}

pub fn order_eval(c: u32, c_unknown: bool, d: u32, d_u: bool, rel: Relation) -> K3 {
    if c_unknown || d_u {
        K3::Unknown
    } else {
        K3::from_bool(rel.holds(c, d))
    }
}

pub fn set_eval(c: u32, c_unknown: bool, set_bits: u32, s_u: bool) -> K3 {
    if c_unknown || s_u {
        K3::Unknown
    } else {
        K3::from_bool(set_bits >> c & 1 == 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub num_range: u32,
    pub p_unk: f64,
    pub data_seed: u64,
    pub set_bit_prob: f64,
}

/// Default probability of each set bit. With XOR in the fifth operator slot,
/// 0.45 puts the U-vs-non-U reference at 0.734 (fair bits give about 0.746).
pub const DEFAULT_SET_BIT_PROB: f64 = 0.45;

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            num_range: 20,
            p_unk: 0.15,
            data_seed: 0,
            set_bit_prob: DEFAULT_SET_BIT_PROB,
        }
    }
}

impl SampleConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            data_seed: seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=30).contains(&self.num_range) {
            return Err(TheiaError::Config(format!("num_range {} outside 1..=30", self.num_range)));
        }
        if !(0.0..1.0).contains(&self.p_unk) {
            return Err(TheiaError::Config(format!("p_unk {} outside [0, 1)", self.p_unk)));
        }
        if !(0.0..=1.0).contains(&self.set_bit_prob) {
            return Err(TheiaError::Config(format!("set_bit_prob {} outside [0, 1]", self.set_bit_prob)));
        }
        Ok(())
    }

    /// Number of set bits and of possible arithmetic results.
    pub fn modulus(&self) -> u32 {
        self.num_range + 1
    }
}

/// Raw fields of one task instance; everything else is derived.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RawSample {
    pub a: u32,
    pub b: u32,
    pub d: u32,
    pub arith_op: ArithOp,
    pub relation: Relation,
    pub set_bits: u32,
    pub logic_op: K3Op,
    pub a_u: bool,
    pub b_u: bool,
    pub d_u: bool,
    pub s_u: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub index: u64,
    pub raw: RawSample,
    pub c: u32,
    pub c_unknown: bool,
    pub val_ord: K3,
    pub val_set: K3,
    pub verdict: K3,
    pub has_unknown: bool,
}

impl Sample {
    pub fn derive(index: u64, raw: RawSample, modulus: u32) -> Sample {
        let c = arith_eval_mod(raw.a, raw.b, raw.arith_op, modulus);
        let c_unknown = raw.a_u || raw.b_u;
        let val_ord = order_eval(c, c_unknown, raw.d, raw.d_u, raw.relation);
        let val_set = set_eval(c, c_unknown, raw.set_bits, raw.s_u);
        Sample {
            index,
            raw,
            c,
            c_unknown,
            val_ord,
            val_set,
            verdict: k3_apply(raw.logic_op, val_ord, val_set),
            has_unknown: raw.a_u || raw.b_u || raw.d_u || raw.s_u,
        }
    }

    pub fn set_bit(&self, i: u32) -> bool {
        self.raw.set_bits >> i & 1 == 1
    }
}

/// Pure function of `(config.data_seed, index)`.
pub fn gen_sample(config: &SampleConfig, index: u64) -> Sample {
    let mut rng = Stream::new(config.data_seed, index);
    let n = config.num_range as usize + 1;
    let a = rng.below(n) as u32;
    let b = rng.below(n) as u32;
    let d = rng.below(n) as u32;
    let arith_op = ArithOp::ALL[rng.below(4)];
    let relation = Relation::ALL[rng.below(6)];
    let logic_op = K3Op::ALL[rng.below(5)];
    let mut set_bits = 0u32;
    for i in 0..n {
        if rng.bernoulli(config.set_bit_prob) {
            set_bits |= 1 << i;
        }
    }
    let raw = RawSample {
        a,
        b,
        d,
        arith_op,
        relation,
        set_bits,
        logic_op,
        a_u: rng.bernoulli(config.p_unk),
        b_u: rng.bernoulli(config.p_unk),
        d_u: rng.bernoulli(config.p_unk),
        s_u: rng.bernoulli(config.p_unk),
    };
    Sample::derive(index, raw, config.modulus())
}

pub fn gen_dataset(config: &SampleConfig, start: u64, n: usize) -> Vec<Sample> {
    (start..start + n as u64).map(|i| gen_sample(config, i)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n: usize,
    /// Verdict fractions indexed by class (F, T, U).
    pub label_frac: [f64; 3],
    /// Fraction with no Unknown input flag at all.
    pub p_hu0: f64,
    pub p_verdict_unknown: f64,
    /// P(verdict = T | verdict != U).
    pub p_true_given_nu: f64,
    /// Marginals of a_u, b_u, d_u, s_u.
    pub flag_marginals: [f64; 4],
    pub u_oracle_reference: f64,
    pub val_ord_frac: [f64; 3],
    pub val_set_frac: [f64; 3],
}

pub fn dataset_stats(samples: &[Sample]) -> Result<DatasetStats> {
    if samples.is_empty() {
        return Err(TheiaError::Data("statistics of an empty dataset".into()));
    }
    let n = samples.len() as f64;
    let mut labels = [0usize; 3];
    let mut ord = [0usize; 3];
    let mut set = [0usize; 3];
    let mut flags = [0usize; 4];
    let mut hu0 = 0usize;
    for s in samples {
        labels[s.verdict.index()] += 1;
        ord[s.val_ord.index()] += 1;
        set[s.val_set.index()] += 1;
        for (k, f) in [s.raw.a_u, s.raw.b_u, s.raw.d_u, s.raw.s_u].into_iter().enumerate() {
            flags[k] += f as usize;
        }
        hu0 += !s.has_unknown as usize;
    }
    let frac = |c: [usize; 3]| [c[0] as f64 / n, c[1] as f64 / n, c[2] as f64 / n];
    let nu = labels[0] + labels[1];
    let p_true_given_nu = if nu == 0 { 0.0 } else { labels[1] as f64 / nu as f64 };
    let verdicts: Vec<K3> = samples.iter().map(|s| s.verdict).collect();
    Ok(DatasetStats {
        n: samples.len(),
        label_frac: frac(labels),
        p_hu0: hu0 as f64 / n,
        p_verdict_unknown: labels[2] as f64 / n,
        p_true_given_nu,
        flag_marginals: flags.map(|f| f as f64 / n),
        u_oracle_reference: u_oracle_from_verdicts(&verdicts),
        val_ord_frac: frac(ord),
        val_set_frac: frac(set),
    })
}

/// `P(U) + P(not U) * majority-fraction among non-U verdicts`.
pub fn u_oracle_from_verdicts(verdicts: &[K3]) -> f64 {
    if verdicts.is_empty() {
        return 0.0;
    }
    let mut c = [0usize; 3];
    for v in verdicts {
        c[v.index()] += 1;
    }
    let n = verdicts.len() as f64;
    (c[2] as f64 + c[0].max(c[1]) as f64) / n
}

/// Sample-level split by a seeded permutation.
pub fn split_dataset<T: Clone>(samples: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(TheiaError::Config(format!("split fraction {fraction} outside (0, 1)")));
    }
    let perm = Stream::new(seed, 0).permutation(samples.len());
    let cut = (samples.len() as f64 * fraction).round() as usize;
    let train = perm[..cut].iter().map(|&i| samples[i].clone()).collect();
    let test = perm[cut..].iter().map(|&i| samples[i].clone()).collect();
    Ok((train, test))
}

fn bitstring(bits: u32, n: u32) -> String {
    (0..n).map(|i| if bits >> i & 1 == 1 { '1' } else { '0' }).collect()
}

fn header(config: &SampleConfig) -> String {
    format!(
        "# theia-dataset version={} num_range={} p_unk={} data_seed={} set_bit_prob={}",
        DATASET_FORMAT_VERSION, config.num_range, config.p_unk, config.data_seed, config.set_bit_prob
    )
}

/// One tab-separated record:
/// `index a b arith_op d relation set_bits logic_op a_u b_u d_u s_u c val_ord val_set verdict`.
pub fn format_record(s: &Sample, modulus: u32) -> String {
    let r = &s.raw;
    let mut line = String::new();
    write!(
        line,
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        s.index,
        r.a,
        r.b,
        r.arith_op.index(),
        r.d,
        r.relation.index(),
        bitstring(r.set_bits, modulus),
        r.logic_op.index(),
        r.a_u as u8,
        r.b_u as u8,
        r.d_u as u8,
        r.s_u as u8,
        s.c,
        s.val_ord,
        s.val_set,
        s.verdict
    )
    .unwrap();
    line
}

pub fn write_dataset(path: &Path, config: &SampleConfig, samples: &[Sample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{}", header(config))?;
    for s in samples {
        writeln!(f, "{}", format_record(s, config.modulus()))?;
    }
    f.flush()?;
    Ok(())
}

fn parse_header(line: &str) -> Result<SampleConfig> {
    let rest = line
        .strip_prefix("# theia-dataset ")
        .ok_or_else(|| TheiaError::Data("missing dataset header".into()))?;
    let mut cfg = SampleConfig::default();
    let mut version = None;
    for kv in rest.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| TheiaError::Data(format!("bad header field `{kv}`")))?;
        let bad = |_| TheiaError::Data(format!("bad header value `{kv}`"));
        match k {
            "version" => version = Some(v.parse::<u32>().map_err(|e| bad(e.to_string()))?),
            "num_range" => cfg.num_range = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            "p_unk" => cfg.p_unk = v.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            "data_seed" => cfg.data_seed = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            "set_bit_prob" => cfg.set_bit_prob = v.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            _ => return Err(TheiaError::Data(format!("unknown header key `{k}`"))),
        }
    }
    match version {
        Some(DATASET_FORMAT_VERSION) => {}
        other => return Err(TheiaError::Data(format!("unsupported dataset version {other:?}"))),
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_record(line: &str, modulus: u32) -> Result<Sample> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 16 {
        return Err(TheiaError::Data(format!("expected 16 fields, got {}: `{line}`", f.len())));
    }
    let num = |i: usize| -> Result<u64> {
        f[i].parse::<u64>()
            .map_err(|_| TheiaError::Data(format!("field {i} `{}` is not an integer", f[i])))
    };
    let flag = |i: usize| -> Result<bool> {
        match f[i] {
            "0" => Ok(false),
            "1" => Ok(true),
            x => Err(TheiaError::Data(format!("field {i} `{x}` is not a flag"))),
        }
    };
    let k3 = |i: usize| -> Result<K3> {
        let mut cs = f[i].chars();
        match (cs.next().and_then(K3::from_symbol), cs.next()) {
            (Some(v), None) => Ok(v),
            _ => Err(TheiaError::Data(format!("field {i} `{}` is not F/T/U", f[i]))),
        }
    };
    let bits = f[6];
    if bits.len() != modulus as usize || !bits.chars().all(|c| c == '0' || c == '1') {
        return Err(TheiaError::Data(format!("set bits `{bits}` are not a {modulus}-char bitstring")));
    }
    let set_bits = bits
        .chars()
        .enumerate()
        .fold(0u32, |acc, (i, c)| if c == '1' { acc | 1 << i } else { acc });
    let operand = |i: usize| -> Result<u32> {
        let v = num(i)?;
        if v >= modulus as u64 {
            return Err(TheiaError::Data(format!("operand {v} out of range")));
        }
        Ok(v as u32)
    };
    let raw = RawSample {
        a: operand(1)?,
        b: operand(2)?,
        arith_op: ArithOp::from_index(num(3)? as usize)
            .ok_or_else(|| TheiaError::Data("bad arithmetic operator".into()))?,
        d: operand(4)?,
        relation: Relation::from_index(num(5)? as usize)
            .ok_or_else(|| TheiaError::Data("bad relation".into()))?,
        set_bits,
        logic_op: K3Op::from_index(num(7)? as usize)
            .ok_or_else(|| TheiaError::Data("bad logic operator".into()))?,
        a_u: flag(8)?,
        b_u: flag(9)?,
        d_u: flag(10)?,
        s_u: flag(11)?,
    };
    let s = Sample::derive(num(0)?, raw, modulus);
    let stored = (num(12)? as u32, k3(13)?, k3(14)?, k3(15)?);
    if stored != (s.c, s.val_ord, s.val_set, s.verdict) {
        return Err(TheiaError::Data(format!(
            "record {} stores derived fields {:?} but recomputation gives {:?}",
            s.index,
            stored,
            (s.c, s.val_ord, s.val_set, s.verdict)
        )));
    }
    Ok(s)
}

pub fn read_dataset(path: &Path) -> Result<(SampleConfig, Vec<Sample>)> {
    let mut lines = BufReader::new(std::fs::File::open(path)?).lines();
    let head = lines
        .next()
        .ok_or_else(|| TheiaError::Data("empty dataset file".into()))??;
    let cfg = parse_header(&head)?;
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        out.push(parse_record(&line, cfg.modulus())?);
    }
    Ok((cfg, out))
}
