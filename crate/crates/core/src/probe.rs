//! Probes on the engine boundary representations.
//!
//! Everything starts from a [`BoundaryDump`]: per-example activations at the
//! four engine outputs plus the sample they came from. Linear probes are
//! one-vs-rest hinge-loss classifiers on standardized features; multilayer
//! probes are small GELU networks trained with AdamW. Both pick their
//! hyperparameter on a validation split and touch the test split once.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use theia_autodiff::kernels::{argmax, gemm, View};
use theia_autodiff::{forward_eval, EvalOptions, Feed, GraphBuilder, ParamStore, Stream};

use crate::error::{Result, TheiaError};
use crate::k3::{K3Op, K3};
use crate::layers::{add_linear, linear};
use crate::model::{Boundary, TheiaModel};
use crate::report::{mean, sample_std};
use crate::taskgen::{gen_dataset, u_oracle_from_verdicts, ArithOp, RawSample, Relation, Sample, SampleConfig};
use crate::trainer::Optimizer;

/// The four engine boundaries in pipeline order.
pub const PROBE_BOUNDARIES: [Boundary; 4] = Boundary::ENGINES;

const DUMP_MAGIC: &[u8; 8] = b"THEIADMP";
const DUMP_VERSION: u32 = 1;

/// Activations at the four engine boundaries, row-aligned with `samples`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryDump {
    pub config: SampleConfig,
    pub dim: usize,
    pub samples: Vec<Sample>,
    /// `samples.len() x dim`, one buffer per entry of [`PROBE_BOUNDARIES`].
    pub acts: [Vec<f64>; 4],
}

fn slot(b: Boundary) -> Result<usize> {
    PROBE_BOUNDARIES
        .iter()
        .position(|&x| x == b)
        .ok_or_else(|| TheiaError::Invalid(format!("`{}` is not a probed boundary", b.name())))
}

/// Eval-mode capture of `n` fresh samples drawn from `data_seed`.
pub fn extract_boundaries(model: &TheiaModel, n: usize, data_seed: u64) -> Result<BoundaryDump> {
    let config = SampleConfig {
        num_range: model.config.num_range,
        ..SampleConfig::with_seed(data_seed)
    };
    let samples = gen_dataset(&config, 0, n);
    extract_from_samples(model, config, samples)
}

pub fn extract_from_samples(model: &TheiaModel, config: SampleConfig, samples: Vec<Sample>) -> Result<BoundaryDump> {
    let refs: Vec<&Sample> = samples.iter().collect();
    let out = model.forward(&refs, true, None)?;
    let b = out.boundaries.expect("capture requested");
    Ok(BoundaryDump {
        config,
        dim: b.dim,
        acts: PROBE_BOUNDARIES.map(|x| b.get(x).to_vec()),
        samples,
    })
}

impl BoundaryDump {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn boundary(&self, b: Boundary) -> Result<&[f64]> {
        Ok(&self.acts[slot(b)?])
    }

    pub fn row(&self, b: Boundary, i: usize) -> Result<&[f64]> {
        let a = self.boundary(b)?;
        Ok(&a[i * self.dim..(i + 1) * self.dim])
    }

    /// Rows `rows` of one boundary, gathered into a dense matrix.
    pub fn features(&self, b: Boundary, rows: &[usize]) -> Result<Vec<f64>> {
        let a = self.boundary(b)?;
        let mut x = Vec::with_capacity(rows.len() * self.dim);
        for &i in rows {
            x.extend_from_slice(&a[i * self.dim..(i + 1) * self.dim]);
        }
        Ok(x)
    }

    /// Sub-dump with the listed rows, in order.
    pub fn select(&self, rows: &[usize]) -> BoundaryDump {
        let d = self.dim;
        BoundaryDump {
            config: self.config,
            dim: d,
            samples: rows.iter().map(|&i| self.samples[i]).collect(),
            acts: std::array::from_fn(|k| {
                let mut v = Vec::with_capacity(rows.len() * d);
                for &i in rows {
                    v.extend_from_slice(&self.acts[k][i * d..(i + 1) * d]);
                }
                v
            }),
        }
    }

    /// Binary layout: magic, version, sample config, `n`, `dim`, then per
    /// row the raw sample fields, its labels, and the four activation
    /// vectors as little-endian f64.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.len() * (48 + 32 * self.dim));
        out.extend_from_slice(DUMP_MAGIC);
        out.extend_from_slice(&DUMP_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config.num_range.to_le_bytes());
        out.extend_from_slice(&self.config.p_unk.to_le_bytes());
        out.extend_from_slice(&self.config.data_seed.to_le_bytes());
        out.extend_from_slice(&self.config.set_bit_prob.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for (i, s) in self.samples.iter().enumerate() {
            let r = &s.raw;
            out.extend_from_slice(&s.index.to_le_bytes());
            for v in [r.a, r.b, r.d, r.set_bits, s.c] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let flags = r.a_u as u8 | (r.b_u as u8) << 1 | (r.d_u as u8) << 2 | (r.s_u as u8) << 3 | (s.has_unknown as u8) << 4;
            out.extend_from_slice(&[
                r.arith_op.index() as u8,
                r.relation.index() as u8,
                r.logic_op.index() as u8,
                flags,
                s.val_ord.index() as u8,
                s.val_set.index() as u8,
                s.verdict.index() as u8,
            ]);
            for a in &self.acts {
                for v in &a[i * self.dim..(i + 1) * self.dim] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    /// Inverse of [`encode`](Self::encode). Every row's labels are
    /// recomputed from its raw fields and must match the stored ones.
    pub fn decode(buf: &[u8]) -> Result<BoundaryDump> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != DUMP_MAGIC {
            return Err(TheiaError::Data("not a boundary dump".into()));
        }
        let version = r.u32()?;
        if version != DUMP_VERSION {
            return Err(TheiaError::Data(format!("dump version {version}, expected {DUMP_VERSION}")));
        }
        let config = SampleConfig {
            num_range: r.u32()?,
            p_unk: r.f64()?,
            data_seed: r.u64()?,
            set_bit_prob: r.f64()?,
        };
        config.validate()?;
        let n = r.u64()? as usize;
        let dim = r.u32()? as usize;
        let mut samples = Vec::with_capacity(n);
        let mut acts: [Vec<f64>; 4] = std::array::from_fn(|_| Vec::with_capacity(n * dim));
        let bad = |what: &str, i: usize| TheiaError::Data(format!("dump row {i}: bad {what}"));
        for i in 0..n {
            let index = r.u64()?;
            let [a, b, d, set_bits, c] = [r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?];
            let t = r.take(7)?;
            let raw = RawSample {
                a,
                b,
                d,
                arith_op: ArithOp::from_index(t[0] as usize).ok_or_else(|| bad("arith op", i))?,
                relation: Relation::from_index(t[1] as usize).ok_or_else(|| bad("relation", i))?,
                set_bits,
                logic_op: K3Op::from_index(t[2] as usize).ok_or_else(|| bad("logic op", i))?,
                a_u: t[3] & 1 != 0,
                b_u: t[3] & 2 != 0,
                d_u: t[3] & 4 != 0,
                s_u: t[3] & 8 != 0,
            };
            let s = Sample::derive(index, raw, config.modulus());
            let stored = (c, t[3] & 16 != 0, t[4] as usize, t[5] as usize, t[6] as usize);
            let derived = (s.c, s.has_unknown, s.val_ord.index(), s.val_set.index(), s.verdict.index());
            if stored != derived {
                return Err(TheiaError::Data(format!(
                    "dump row {i}: stored labels {stored:?} disagree with recomputed {derived:?}"
                )));
            }
            samples.push(s);
            for a in acts.iter_mut() {
                for _ in 0..dim {
                    a.push(r.f64()?);
                }
            }
        }
        if r.pos != buf.len() {
            return Err(TheiaError::Data("trailing bytes after dump".into()));
        }
        Ok(BoundaryDump { config, dim, samples, acts })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<BoundaryDump> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::decode(&buf)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(TheiaError::Data("truncated dump".into()));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    Verdict,
    ValOrd,
    ValSet,
    ArithResult,
    Operator,
    HasUnknown,
}

impl Target {
    pub const ALL: [Target; 6] = [
        Target::Verdict,
        Target::ValOrd,
        Target::ValSet,
        Target::ArithResult,
        Target::Operator,
        Target::HasUnknown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Target::Verdict => "verdict",
            Target::ValOrd => "val_ord",
            Target::ValSet => "val_set",
            Target::ArithResult => "arith_result",
            Target::Operator => "operator",
            Target::HasUnknown => "has_unknown",
        }
    }

    pub fn from_name(s: &str) -> Option<Target> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }

    /// Class count, or `None` for the regression target.
    pub fn classes(self) -> Option<usize> {
        match self {
            Target::Verdict | Target::ValOrd | Target::ValSet => Some(3),
            Target::Operator => Some(5),
            Target::HasUnknown => Some(2),
            Target::ArithResult => None,
        }
    }

    pub fn label(self, s: &Sample) -> usize {
        match self {
            Target::Verdict => s.verdict.index(),
            Target::ValOrd => s.val_ord.index(),
            Target::ValSet => s.val_set.index(),
            Target::ArithResult => s.c as usize,
            Target::Operator => s.raw.logic_op.index(),
            Target::HasUnknown => s.has_unknown as usize,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subset {
    All,
    NonUnknown,
}

impl Subset {
    pub fn rows(self, samples: &[Sample]) -> Vec<usize> {
        (0..samples.len())
            .filter(|&i| self == Subset::All || samples[i].verdict != K3::Unknown)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitScheme {
    /// 60/20/20 train/val/test; selection on val, test read once.
    Clean { seed: u64 },
    /// 70/30 train/test; selection on test. Kept for numeric comparison.
    Legacy { seed: u64 },
}

impl Default for SplitScheme {
    fn default() -> Self {
        SplitScheme::Clean { seed: 0 }
    }
}

/// Disjoint positions into whatever row list was split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn new(n: usize, scheme: SplitScheme) -> Split {
        let (seed, fracs) = match scheme {
            SplitScheme::Clean { seed } => (seed, (0.6, 0.8)),
            SplitScheme::Legacy { seed } => (seed, (0.7, 0.7)),
        };
        let perm = Stream::new(seed, 0).permutation(n);
        let c1 = (n as f64 * fracs.0).round() as usize;
        let c2 = (n as f64 * fracs.1).round() as usize;
        Split {
            train: perm[..c1].to_vec(),
            val: perm[c1..c2].to_vec(),
            test: perm[c2..].to_vec(),
        }
    }

    /// Rows the hyperparameter is chosen on.
    pub fn selection(&self) -> &[usize] {
        if self.val.is_empty() {
            &self.test
        } else {
            &self.val
        }
    }
}

/// Dense feature rows with one label each.
#[derive(Clone, Debug)]
pub struct Design {
    pub x: Vec<f64>,
    pub dim: usize,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl Design {
    pub fn new(x: Vec<f64>, dim: usize, y: Vec<usize>, classes: usize) -> Result<Design> {
        if dim == 0 || x.len() != y.len() * dim {
            return Err(TheiaError::Invalid(format!("{} features for {} rows of width {dim}", x.len(), y.len())));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
            return Err(TheiaError::Invalid(format!("label {bad} outside {classes} classes")));
        }
        Ok(Design { x, dim, y, classes })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn gather(&self, rows: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(rows.len() * self.dim);
        for &i in rows {
            x.extend_from_slice(&self.x[i * self.dim..(i + 1) * self.dim]);
        }
        (x, rows.iter().map(|&i| self.y[i]).collect())
    }
}

/// Per-column mean and standard deviation of the training rows.
#[derive(Clone, Debug)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[f64], dim: usize) -> Standardizer {
        let n = (x.len() / dim).max(1) as f64;
        let mut mean = vec![0.0; dim];
        for row in x.chunks(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for row in x.chunks(dim) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        // Constant columns pass through centred.
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn apply(&self, x: &mut [f64]) {
        let dim = self.mean.len();
        for row in x.chunks_mut(dim) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
    }
}

pub const SVM_C_GRID: [f64; 3] = [0.1, 1.0, 10.0];
const SVM_EPS: f64 = 0.1;
const SVM_MAX_PASSES: usize = 300;

/// L2-regularized hinge-loss binary SVM by dual coordinate descent. The
/// bias is a constant feature and is regularized with the weights. `y` is ±1.
/// Returns the `dim + 1` weights (bias last).
pub fn svm_binary(x: &[f64], dim: usize, y: &[f64], c: f64, rng: &mut Stream) -> Vec<f64> {
    let n = y.len();
    let mut w = vec![0.0; dim + 1];
    let mut alpha = vec![0.0; n];
    let qii: Vec<f64> = x.chunks(dim).map(|r| r.iter().map(|v| v * v).sum::<f64>() + 1.0).collect();
    for _ in 0..SVM_MAX_PASSES {
        let (mut pg_max, mut pg_min) = (f64::NEG_INFINITY, f64::INFINITY);
        for i in rng.permutation(n) {
            let xi = &x[i * dim..(i + 1) * dim];
            let g = y[i] * (dot(&w[..dim], xi) + w[dim]) - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == c {
                g.max(0.0)
            } else {
                g
            };
            pg_max = pg_max.max(pg);
            pg_min = pg_min.min(pg);
            if pg.abs() > 1e-12 {
                let old = alpha[i];
                alpha[i] = (old - g / qii[i]).clamp(0.0, c);
                let step = (alpha[i] - old) * y[i];
                for (wj, xj) in w[..dim].iter_mut().zip(xi) {
                    *wj += step * xj;
                }
                w[dim] += step;
            }
        }
        if pg_max - pg_min < SVM_EPS {
            break;
        }
    }
    w
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One-vs-rest linear classifier.
#[derive(Clone, Debug)]
pub struct LinearClassifier {
    pub dim: usize,
    /// One `dim + 1` weight vector per class.
    pub weights: Vec<Vec<f64>>,
}

impl LinearClassifier {
    pub fn fit(x: &[f64], dim: usize, y: &[usize], classes: usize, c: f64, seed: u64) -> LinearClassifier {
        let weights = (0..classes)
            .map(|k| {
                let yk: Vec<f64> = y.iter().map(|&l| if l == k { 1.0 } else { -1.0 }).collect();
                svm_binary(x, dim, &yk, c, &mut Stream::new(seed, k as u64))
            })
            .collect();
        LinearClassifier { dim, weights }
    }

    pub fn predict(&self, x: &[f64]) -> Vec<usize> {
        x.chunks(self.dim)
            .map(|r| {
                let scores: Vec<f64> = self.weights.iter().map(|w| dot(&w[..self.dim], r) + w[self.dim]).collect();
                argmax(&scores)
            })
            .collect()
    }
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

/// Fraction of the most frequent label.
pub fn majority_rate(y: &[usize]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let mut counts = std::collections::HashMap::new();
    for &l in y {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    *counts.values().max().unwrap() as f64 / y.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selected {
    C(f64),
    Epoch(usize),
    /// Only one class in the training rows; the probe predicts it.
    Degenerate,
}

/// One trained probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub test_accuracy: f64,
    pub selected: Selected,
    pub selection_accuracy: f64,
    /// Best test accuracy over the whole search. Reported for protocol
    /// comparison only; it never feeds back into selection.
    pub test_best_accuracy: f64,
    pub test_majority: f64,
    pub degenerate: bool,
    pub n_train: usize,
    pub n_test: usize,
    /// Test predictions at the selected setting, aligned with `split.test`.
    #[serde(skip)]
    pub test_predictions: Vec<usize>,
}

fn degenerate_outcome(label: usize, train: &[usize], test: &[usize], sel: &[usize]) -> ProbeOutcome {
    let hit = |y: &[usize]| y.iter().filter(|&&l| l == label).count() as f64 / y.len().max(1) as f64;
    ProbeOutcome {
        test_accuracy: hit(test),
        selected: Selected::Degenerate,
        selection_accuracy: hit(sel),
        test_best_accuracy: hit(test),
        test_majority: majority_rate(test),
        degenerate: true,
        n_train: train.len(),
        n_test: test.len(),
        test_predictions: vec![label; test.len()],
    }
}

fn single_class(y: &[usize]) -> Option<usize> {
    let first = *y.first()?;
    y.iter().all(|&l| l == first).then_some(first)
}

/// Linear probe with the regularization chosen on the selection rows.
pub fn linear_probe(design: &Design, split: &Split, grid: &[f64]) -> Result<ProbeOutcome> {
    if split.train.is_empty() || split.test.is_empty() {
        return Err(TheiaError::Data("probe split has an empty part".into()));
    }
    let (mut xtr, ytr) = design.gather(&split.train);
    let (mut xsel, ysel) = design.gather(split.selection());
    let (mut xte, yte) = design.gather(&split.test);
    if let Some(l) = single_class(&ytr) {
        return Ok(degenerate_outcome(l, &ytr, &yte, &ysel));
    }
    let st = Standardizer::fit(&xtr, design.dim);
    st.apply(&mut xtr);
    st.apply(&mut xsel);
    st.apply(&mut xte);
    let mut best: Option<(f64, f64, LinearClassifier)> = None;
    let mut test_best = 0.0f64;
    let legacy = split.val.is_empty();
    for &c in grid {
        let clf = LinearClassifier::fit(&xtr, design.dim, &ytr, design.classes, c, 0);
        let sel_acc = accuracy(&clf.predict(&xsel), &ysel);
        test_best = test_best.max(if legacy { sel_acc } else { accuracy(&clf.predict(&xte), &yte) });
        if best.as_ref().is_none_or(|b| sel_acc > b.0) {
            best = Some((sel_acc, c, clf));
        }
    }
    let (sel_acc, c, clf) = best.ok_or_else(|| TheiaError::Invalid("empty regularization grid".into()))?;
    let pred = clf.predict(&xte);
    let test_accuracy = accuracy(&pred, &yte);
    Ok(ProbeOutcome {
        test_accuracy,
        selected: Selected::C(c),
        selection_accuracy: sel_acc,
        test_best_accuracy: test_best,
        test_majority: majority_rate(&yte),
        degenerate: false,
        n_train: ytr.len(),
        n_test: yte.len(),
        test_predictions: pred,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpProbeConfig {
    pub depth: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl MlpProbeConfig {
    pub fn with_depth(depth: usize) -> Self {
        Self { depth, ..Self::default() }
    }
}

impl Default for MlpProbeConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            hidden: 256,
            epochs: 40,
            batch_size: 2048,
            lr: 1e-3,
            weight_decay: 0.01,
            dropout: 0.1,
            seed: 0,
        }
    }
}

pub const MLP_PROBE_DEPTHS: [usize; 3] = [2, 4, 6];

/// `dim -> hidden -> [hidden -> hidden]^(depth-1) -> classes` with GELU on
/// every hidden layer and dropout between hidden layers. The epoch with the
/// best selection accuracy is kept and the test rows are scored once.
pub fn mlp_probe(design: &Design, split: &Split, cfg: &MlpProbeConfig) -> Result<ProbeOutcome> {
    if cfg.depth == 0 || cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(TheiaError::Config(format!("mlp probe {cfg:?}")));
    }
    if split.train.is_empty() || split.test.is_empty() {
        return Err(TheiaError::Data("probe split has an empty part".into()));
    }
    let (mut xtr, ytr) = design.gather(&split.train);
    let (mut xsel, ysel) = design.gather(split.selection());
    let (mut xte, yte) = design.gather(&split.test);
    if let Some(l) = single_class(&ytr) {
        return Ok(degenerate_outcome(l, &ytr, &yte, &ysel));
    }
    let st = Standardizer::fit(&xtr, design.dim);
    st.apply(&mut xtr);
    st.apply(&mut xsel);
    st.apply(&mut xte);

    let mut ps = ParamStore::new();
    let mut init = Stream::new(cfg.seed, 0);
    let mut din = design.dim;
    for l in 0..cfg.depth {
        add_linear(&mut ps, &mut init, &format!("probe.{l}"), din, cfg.hidden)?;
        din = cfg.hidden;
    }
    add_linear(&mut ps, &mut init, "probe.out", din, design.classes)?;
    let mut g = GraphBuilder::new(&ps);
    let x = g.input("x", design.dim)?;
    let target = g.index_input("target", design.classes)?;
    let mut h = x;
    for l in 0..cfg.depth {
        h = linear(&mut g, &format!("probe.{l}"), h)?;
        h = g.gelu(h)?;
        if l + 1 < cfg.depth && cfg.dropout > 0.0 {
            h = g.dropout(h, cfg.dropout)?;
        }
    }
    let logits = linear(&mut g, "probe.out", h)?;
    let loss = g.weighted_cross_entropy(logits, target, &vec![1.0; design.classes])?;
    let graph = g.finish();

    let n = ytr.len();
    let steps = (n.div_ceil(cfg.batch_size) * cfg.epochs) as u64;
    let mut opt = Optimizer::new(&ps, cfg.lr, 0.0, cfg.weight_decay, steps);
    let mut dropout_rng = Stream::new(cfg.seed, 2);
    let predict = |ps: &ParamStore, x: &[f64], rng: &mut Stream| -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(x.len() / design.dim);
        for chunk in x.chunks(cfg.batch_size * design.dim) {
            let rows = chunk.len() / design.dim;
            let feed = Feed::new().real("x", chunk.to_vec()).index("target", vec![0; rows]);
            let t = forward_eval(&graph, ps, &feed, &EvalOptions::eval(), rng)?;
            out.extend(t.value(logits).chunks(design.classes).map(argmax));
        }
        Ok(out)
    };
    let legacy = split.val.is_empty();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut test_best = 0.0f64;
    for epoch in 0..cfg.epochs {
        let perm = Stream::new(cfg.seed, 1000 + epoch as u64).permutation(n);
        for batch in perm.chunks(cfg.batch_size) {
            let mut xb = Vec::with_capacity(batch.len() * design.dim);
            for &i in batch {
                xb.extend_from_slice(&xtr[i * design.dim..(i + 1) * design.dim]);
            }
            let feed = Feed::new().real("x", xb).index("target", batch.iter().map(|&i| ytr[i]).collect());
            let t = forward_eval(&graph, &ps, &feed, &EvalOptions::train(), &mut dropout_rng)?;
            if !t.scalar(loss).is_finite() {
                return Err(TheiaError::Diverged {
                    epoch,
                    reason: "probe loss is not finite".into(),
                });
            }
            let back = t.backward(&graph, &ps, loss)?;
            opt.step(&mut ps, &back.grads)?;
        }
        let sel_acc = accuracy(&predict(&ps, &xsel, &mut dropout_rng)?, &ysel);
        test_best = test_best.max(if legacy { sel_acc } else { accuracy(&predict(&ps, &xte, &mut dropout_rng)?, &yte) });
        if best.as_ref().is_none_or(|b| sel_acc > b.0) {
            best = Some((sel_acc, epoch + 1, ps.clone()));
        }
    }
    let (sel_acc, epoch, best_ps) = best.expect("at least one epoch");
    let pred = predict(&best_ps, &xte, &mut dropout_rng)?;
    let test_accuracy = accuracy(&pred, &yte);
    Ok(ProbeOutcome {
        test_accuracy,
        selected: Selected::Epoch(epoch),
        selection_accuracy: sel_acc,
        test_best_accuracy: test_best,
        test_majority: majority_rate(&yte),
        degenerate: false,
        n_train: n,
        n_test: yte.len(),
        test_predictions: pred,
    })
}

/// Ordinary least squares with intercept, fit on `train` rows and scored on
/// `test` rows. R² is measured against the training mean, so a model that
/// can only predict that mean scores exactly zero.
pub fn ols_r2(x: &[f64], dim: usize, y: &[f64], train: &[usize], test: &[usize]) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(TheiaError::Data("regression split has an empty part".into()));
    }
    let p = dim + 1;
    let mut a = Vec::with_capacity(train.len() * p);
    for &i in train {
        a.extend_from_slice(&x[i * dim..(i + 1) * dim]);
        a.push(1.0);
    }
    let mut xtx = vec![0.0; p * p];
    let view = View::row_major(&a, train.len(), p);
    gemm(1.0, view.t(), view, 0.0, &mut xtx);
    let mut xty = vec![0.0; p];
    for (r, &i) in train.iter().enumerate() {
        for (j, v) in a[r * p..(r + 1) * p].iter().enumerate() {
            xty[j] += v * y[i];
        }
    }
    let beta = DMatrix::from_row_slice(p, p, &xtx)
        .svd(true, true)
        .solve(&DVector::from_vec(xty), 1e-9)
        .map_err(|e| TheiaError::Invalid(format!("least squares: {e}")))?;
    let ybar = train.iter().map(|&i| y[i]).sum::<f64>() / train.len() as f64;
    let (mut sse, mut sst) = (0.0, 0.0);
    for &i in test {
        let row = &x[i * dim..(i + 1) * dim];
        let pred = row.iter().zip(beta.iter()).map(|(a, b)| a * b).sum::<f64>() + beta[dim];
        sse += (y[i] - pred).powi(2);
        sst += (y[i] - ybar).powi(2);
    }
    Ok(if sst == 0.0 {
        if sse == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - sse / sst
    })
}

/// R² of `c` from each boundary, on the test split of `scheme`.
pub fn arith_r2_probe(dump: &BoundaryDump, scheme: SplitScheme) -> Result<Vec<(Boundary, f64)>> {
    if dump.is_empty() {
        return Err(TheiaError::Data("empty dump".into()));
    }
    let split = Split::new(dump.len(), scheme);
    let y: Vec<f64> = dump.samples.iter().map(|s| s.c as f64).collect();
    PROBE_BOUNDARIES
        .iter()
        .map(|&b| Ok((b, ols_r2(dump.boundary(b)?, dump.dim, &y, &split.train, &split.test)?)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "depth")]
pub enum Family {
    Linear,
    Mlp(usize),
}

impl Family {
    pub fn name(self) -> String {
        match self {
            Family::Linear => "linear".into(),
            Family::Mlp(d) => format!("mlp-d{d}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub boundary: Boundary,
    pub target: Target,
    pub family: Family,
    pub scheme: SplitScheme,
    pub subset: Subset,
}

impl ProbeSpec {
    pub fn new(boundary: Boundary, target: Target, family: Family) -> Self {
        Self {
            boundary,
            target,
            family,
            scheme: SplitScheme::default(),
            subset: Subset::All,
        }
    }
}

/// Feature rows of one boundary for a categorical target, restricted to the subset.
pub fn design_for(dump: &BoundaryDump, spec: &ProbeSpec) -> Result<Design> {
    let classes = spec.target.classes().ok_or_else(|| {
        TheiaError::Invalid(format!("`{}` is not categorical; use the R² probe", spec.target.name()))
    })?;
    let rows = spec.subset.rows(&dump.samples);
    let x = dump.features(spec.boundary, &rows)?;
    let y = rows.iter().map(|&i| spec.target.label(&dump.samples[i])).collect();
    Design::new(x, dump.dim, y, classes)
}

pub fn train_linear_probe(dump: &BoundaryDump, spec: &ProbeSpec) -> Result<ProbeOutcome> {
    let design = design_for(dump, spec)?;
    linear_probe(&design, &Split::new(design.len(), spec.scheme), &SVM_C_GRID)
}

pub fn train_mlp_probe(dump: &BoundaryDump, spec: &ProbeSpec, cfg: &MlpProbeConfig) -> Result<ProbeOutcome> {
    let design = design_for(dump, spec)?;
    mlp_probe(&design, &Split::new(design.len(), spec.scheme), cfg)
}

/// `(1 - (1-p)^k) + (1-p)^k (1-p)^(4-k)`: the best Has-Unknown accuracy when
/// `k` of the four independent flags are visible.
pub fn hu_bayes_ceiling(k: u32, p: f64) -> Result<f64> {
    if k > 4 {
        return Err(TheiaError::Invalid(format!("{k} visible flags out of 4")));
    }
    if !(p > 0.0 && p < 0.5) {
        return Err(TheiaError::Invalid(format!(
            "flag probability {p} outside (0, 0.5); the all-clear branch would no longer predict HU = 0"
        )));
    }
    let q = 1.0 - p;
    Ok((1.0 - q.powi(k as i32)) + q.powi(k as i32) * q.powi(4 - k as i32))
}

/// Flags architecturally visible at each boundary, as indices into
/// `(a_u, b_u, d_u, s_u)`.
pub fn visible_flags(b: Boundary) -> &'static [usize] {
    match b {
        Boundary::C => &[0, 1],
        Boundary::VOrd => &[0, 1, 2],
        Boundary::VSet => &[0, 1, 3],
        Boundary::LogicOut | Boundary::HeadOut => &[0, 1, 2, 3],
    }
}

/// Majority-per-visible-pattern accuracy for Has-Unknown on the dump itself.
pub fn empirical_hu_ceiling(samples: &[Sample], b: Boundary) -> f64 {
    let mut counts = [[0usize; 2]; 16];
    for s in samples {
        let f = [s.raw.a_u, s.raw.b_u, s.raw.d_u, s.raw.s_u];
        let key = visible_flags(b).iter().fold(0, |acc, &i| acc << 1 | f[i] as usize);
        counts[key][s.has_unknown as usize] += 1;
    }
    let hit: usize = counts.iter().map(|c| c[0].max(c[1])).sum();
    hit as f64 / samples.len().max(1) as f64
}

/// `P(U) + P(not U) * majority(not U)` on the dump's verdicts.
pub fn u_oracle_reference(dump: &BoundaryDump) -> Result<f64> {
    if dump.is_empty() {
        return Err(TheiaError::Data("empty dump".into()));
    }
    let v: Vec<K3> = dump.samples.iter().map(|s| s.verdict).collect();
    Ok(u_oracle_from_verdicts(&v))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryCentroids {
    pub boundary: Boundary,
    /// Indexed by verdict class (F, T, U); `None` when the class is absent.
    pub centroids: [Option<Vec<f64>>; 3],
    pub counts: [usize; 3],
    pub ft_distance: Option<f64>,
    pub cosine: [[Option<f64>; 3]; 3],
    pub missing: Vec<K3>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidStats {
    pub boundaries: Vec<BoundaryCentroids>,
    /// Logic over Arith F-T distance.
    pub logic_arith_ratio: Option<f64>,
}

impl CentroidStats {
    pub fn get(&self, b: Boundary) -> Option<&BoundaryCentroids> {
        self.boundaries.iter().find(|c| c.boundary == b)
    }
}

pub fn centroid_stats(dump: &BoundaryDump) -> Result<CentroidStats> {
    let d = dump.dim;
    let mut boundaries = Vec::new();
    for &b in &PROBE_BOUNDARIES {
        let acts = dump.boundary(b)?;
        let mut sums = vec![vec![0.0; d]; 3];
        let mut counts = [0usize; 3];
        for (i, s) in dump.samples.iter().enumerate() {
            let k = s.verdict.index();
            counts[k] += 1;
            for (a, v) in sums[k].iter_mut().zip(&acts[i * d..(i + 1) * d]) {
                *a += v;
            }
        }
        let centroids: [Option<Vec<f64>>; 3] = std::array::from_fn(|k| {
            (counts[k] > 0).then(|| sums[k].iter().map(|v| v / counts[k] as f64).collect())
        });
        let mut cosine = [[None; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                if let (Some(u), Some(v)) = (&centroids[i], &centroids[j]) {
                    let nn = dot(u, u).sqrt() * dot(v, v).sqrt();
                    cosine[i][j] = (nn > 0.0).then(|| dot(u, v) / nn);
                }
            }
        }
        let ft_distance = match (&centroids[0], &centroids[1]) {
            (Some(f), Some(t)) => Some(f.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()),
            _ => None,
        };
        let missing = K3::ALL.into_iter().filter(|k| counts[k.index()] == 0).collect();
        boundaries.push(BoundaryCentroids {
            boundary: b,
            centroids,
            counts,
            ft_distance,
            cosine,
            missing,
        });
    }
    let dist = |b: Boundary| boundaries.iter().find(|c| c.boundary == b).and_then(|c| c.ft_distance);
    let logic_arith_ratio = match (dist(Boundary::LogicOut), dist(Boundary::C)) {
        (Some(l), Some(a)) if a > 0.0 => Some(l / a),
        _ => None,
    };
    Ok(CentroidStats {
        boundaries,
        logic_arith_ratio,
    })
}

/// Mean of the per-seed Logic/Arith F-T distance ratios.
pub fn separation_ratio(per_seed: &[CentroidStats]) -> Option<f64> {
    let r: Option<Vec<f64>> = per_seed.iter().map(|s| s.logic_arith_ratio).collect();
    mean(&r?)
}

/// Percentile bootstrap interval of the mean.
pub fn bootstrap_ci(values: &[f64], resamples: usize, level: f64, rng: &mut Stream) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(TheiaError::Invalid("bootstrap needs at least two values".into()));
    }
    if resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(TheiaError::Invalid(format!("bootstrap with {resamples} resamples at level {level}")));
    }
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.below(n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(|a, b| a.total_cmp(b));
    let tail = (1.0 - level) / 2.0;
    Ok((quantile(&means, tail), quantile(&means, 1.0 - tail)))
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-operator slice of the Probe C test rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorStratum {
    pub op: K3Op,
    pub n_test: usize,
    pub accuracy: f64,
    pub majority: f64,
    pub delta: f64,
    /// Fewer than [`MIN_STRATUM`] test rows.
    pub too_small: bool,
}

pub const MIN_STRATUM: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpDecomposition {
    pub nu_count: usize,
    pub nu_majority: f64,
    /// Set boundary to verdict.
    pub probe_a: ProbeOutcome,
    /// Operator one-hot alone to verdict.
    pub probe_b: ProbeOutcome,
    /// Set boundary concatenated with the operator one-hot.
    pub probe_c: ProbeOutcome,
    /// Operator identity from each upstream boundary.
    pub probe_d: Vec<(Boundary, ProbeOutcome)>,
    pub per_operator: Vec<OperatorStratum>,
}

/// Probes A-D on the non-Unknown subset, with the Probe C test accuracy
/// broken down by operator.
pub fn op_decomposition(dump: &BoundaryDump, scheme: SplitScheme) -> Result<OpDecomposition> {
    let rows = Subset::NonUnknown.rows(&dump.samples);
    if rows.is_empty() {
        return Err(TheiaError::Data("no non-Unknown samples in the dump".into()));
    }
    let split = Split::new(rows.len(), scheme);
    let verdict: Vec<usize> = rows.iter().map(|&i| dump.samples[i].verdict.index()).collect();
    let op: Vec<usize> = rows.iter().map(|&i| dump.samples[i].raw.logic_op.index()).collect();
    let onehot: Vec<f64> = op
        .iter()
        .flat_map(|&o| (0..5).map(move |k| (k == o) as u8 as f64))
        .collect();
    let set = dump.features(Boundary::VSet, &rows)?;
    let d = dump.dim;
    let mut concat = Vec::with_capacity(rows.len() * (d + 5));
    for r in 0..rows.len() {
        concat.extend_from_slice(&set[r * d..(r + 1) * d]);
        concat.extend_from_slice(&onehot[r * 5..(r + 1) * 5]);
    }
    let probe_a = linear_probe(&Design::new(set, d, verdict.clone(), 3)?, &split, &SVM_C_GRID)?;
    let probe_b = linear_probe(&Design::new(onehot, 5, verdict.clone(), 3)?, &split, &SVM_C_GRID)?;
    let probe_c = linear_probe(&Design::new(concat, d + 5, verdict.clone(), 3)?, &split, &SVM_C_GRID)?;
    let mut probe_d = Vec::new();
    for b in [Boundary::C, Boundary::VOrd, Boundary::VSet] {
        let x = dump.features(b, &rows)?;
        probe_d.push((b, linear_probe(&Design::new(x, d, op.clone(), 5)?, &split, &SVM_C_GRID)?));
    }
    let mut per_operator = Vec::new();
    for o in K3Op::ALL {
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        for (t, &r) in split.test.iter().enumerate() {
            if op[r] == o.index() {
                pred.push(probe_c.test_predictions[t]);
                truth.push(verdict[r]);
            }
        }
        let acc = accuracy(&pred, &truth);
        let maj = majority_rate(&truth);
        per_operator.push(OperatorStratum {
            op: o,
            n_test: truth.len(),
            accuracy: acc,
            majority: maj,
            delta: acc - maj,
            too_small: truth.len() < MIN_STRATUM,
        });
    }
    Ok(OpDecomposition {
        nu_count: rows.len(),
        nu_majority: majority_rate(&verdict),
        probe_a,
        probe_b,
        probe_c,
        probe_d,
        per_operator,
    })
}

/// One probe result for one model seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeCell {
    pub seed: u64,
    pub boundary: Boundary,
    pub target: Target,
    pub family: Family,
    /// Test accuracy, or R² for the arithmetic-result target.
    pub value: f64,
    pub selected: Option<Selected>,
    pub test_best: Option<f64>,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub boundary: Boundary,
    pub target: Target,
    pub family: Family,
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: Option<f64>,
}

/// Groups cells by `(boundary, target, family)` and reports mean and sample std.
pub fn summarize(cells: &[ProbeCell]) -> Vec<ProbeSummary> {
    let mut out: Vec<ProbeSummary> = Vec::new();
    for c in cells {
        match out
            .iter_mut()
            .find(|s| s.boundary == c.boundary && s.target == c.target && s.family == c.family)
        {
            Some(s) => {
                s.seeds.push(c.seed);
                s.values.push(c.value);
            }
            None => out.push(ProbeSummary {
                boundary: c.boundary,
                target: c.target,
                family: c.family,
                seeds: vec![c.seed],
                values: vec![c.value],
                mean: 0.0,
                std: None,
            }),
        }
    }
    for s in &mut out {
        s.mean = mean(&s.values).unwrap_or(0.0);
        s.std = sample_std(&s.values);
    }
    out
}

/// Which cells of the grid to run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeGrid {
    pub targets: Vec<Target>,
    pub families: Vec<Family>,
    pub scheme: SplitScheme,
    pub mlp: MlpProbeConfig,
}

impl Default for ProbeGrid {
    fn default() -> Self {
        Self {
            targets: Target::ALL.to_vec(),
            families: vec![Family::Linear, Family::Mlp(2), Family::Mlp(4), Family::Mlp(6)],
            scheme: SplitScheme::default(),
            mlp: MlpProbeConfig::default(),
        }
    }
}

/// Every `(boundary, target, family)` cell on one dump. The regression
/// target ignores the family and contributes one R² cell per boundary.
pub fn run_probe_grid(dump: &BoundaryDump, seed: u64, grid: &ProbeGrid) -> Result<Vec<ProbeCell>> {
    let mut cells = Vec::new();
    for &target in &grid.targets {
        if target == Target::ArithResult {
            for (b, r2) in arith_r2_probe(dump, grid.scheme)? {
                cells.push(ProbeCell {
                    seed,
                    boundary: b,
                    target,
                    family: Family::Linear,
                    value: r2,
                    selected: None,
                    test_best: None,
                    degenerate: false,
                });
            }
            continue;
        }
        for &b in &PROBE_BOUNDARIES {
            for &family in &grid.families {
                let spec = ProbeSpec {
                    scheme: grid.scheme,
                    ..ProbeSpec::new(b, target, family)
                };
                let o = match family {
                    Family::Linear => train_linear_probe(dump, &spec)?,
                    Family::Mlp(depth) => train_mlp_probe(dump, &spec, &MlpProbeConfig { depth, ..grid.mlp })?,
                };
                cells.push(ProbeCell {
                    seed,
                    boundary: b,
                    target,
                    family,
                    value: o.test_accuracy,
                    selected: Some(o.selected),
                    test_best: Some(o.test_best_accuracy),
                    degenerate: o.degenerate,
                });
            }
        }
    }
    Ok(cells)
}
