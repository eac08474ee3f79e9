//! Mod-3 sequential composition.
//!
//! A chain is a run of independent task samples. The state starts in
//! {0, 1, 2} and each step adds its verdict, read as F=0, T=1, U=2, modulo 3.
//! A step backbone predicts the verdict and a small transition net maps
//! (previous state, verdict) to the next state. Training runs in three
//! phases: the backbone alone, the transition net alone with teacher
//! forcing, then everything end to end on unrolled 5-step chains with
//! straight-through Gumbel discretization of verdicts and states.

use serde::{Deserialize, Serialize};
use theia_autodiff::kernels::argmax;
use theia_autodiff::{checkpoint, forward_eval, EvalOptions, Feed, GraphBuilder, KernelGraph, NodeId, ParamStore, Stream};

use crate::diagnostic::Classifier;
use crate::error::{Result, TheiaError};
use crate::k3::K3;
use crate::layers::{self, encode_step, StepInputs, SET_BITS};
use crate::model::{build_theia, init_theia_params, ModelConfig};
use crate::report::mean;
use crate::taskgen::{gen_dataset, gen_sample, Sample, SampleConfig};
use crate::trainer::{plateau_restart_check, restart_seed, Optimizer, PlateauConfig, PlateauDecision, RestartEvent, CHAIN_CLASS_WEIGHTS};

/// Verdict read as a state increment.
pub fn verdict_increment(v: K3) -> u8 {
    v.index() as u8
}

pub fn mod3_oracle(state: u8, verdict: K3) -> u8 {
    (state + verdict_increment(verdict)) % 3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainSample {
    pub initial: u8,
    pub steps: Vec<Sample>,
    /// State after each step.
    pub states: Vec<u8>,
}

impl ChainSample {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn final_state(&self) -> u8 {
        *self.states.last().unwrap_or(&self.initial)
    }

    /// State before step `t`.
    pub fn state_before(&self, t: usize) -> u8 {
        if t == 0 {
            self.initial
        } else {
            self.states[t - 1]
        }
    }
}

/// Step samples of chain `chain` are drawn at indices `chain << 20 | t`.
pub const MAX_CHAIN_LEN: usize = 1 << 20;

pub fn gen_chain(config: &SampleConfig, chain: u64, len: usize) -> ChainSample {
    assert!(len <= MAX_CHAIN_LEN, "chain length {len} exceeds {MAX_CHAIN_LEN}");
    let initial = Stream::new(config.data_seed, 1 << 63 | chain).below(3) as u8;
    let steps: Vec<Sample> = (0..len as u64).map(|t| gen_sample(config, chain << 20 | t)).collect();
    let mut s = initial;
    let states = steps
        .iter()
        .map(|x| {
            s = mod3_oracle(s, x.verdict);
            s
        })
        .collect();
    ChainSample { initial, steps, states }
}

pub fn gen_chains(config: &SampleConfig, start: u64, n: usize, len: usize) -> Vec<ChainSample> {
    (start..start + n as u64).map(|c| gen_chain(config, c, len)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthUniformity {
    pub depth: usize,
    pub n: usize,
    pub freq: [f64; 3],
    pub max_deviation: f64,
}

/// Histogram of true states after `depth` steps, over chains at least that long.
pub fn state_uniformity(chains: &[ChainSample], depths: &[usize]) -> Vec<DepthUniformity> {
    depths
        .iter()
        .map(|&depth| {
            let mut c = [0usize; 3];
            for ch in chains.iter().filter(|ch| ch.len() >= depth) {
                c[ch.state_before(depth) as usize] += 1;
            }
            let n: usize = c.iter().sum();
            let freq = c.map(|k| if n == 0 { 0.0 } else { k as f64 / n as f64 });
            DepthUniformity {
                depth,
                n,
                freq,
                max_deviation: freq.iter().map(|f| (f - 1.0 / 3.0).abs()).fold(0.0, f64::max),
            }
        })
        .collect()
}

/// Final-state accuracy when every step is an independent Bernoulli(`step_accuracy`)
/// success and one miss is never recovered, as with undiscretized state passing.
pub fn soft_chain_monte_carlo(step_accuracy: f64, len: usize, n: usize, rng: &mut Stream) -> f64 {
    let ok = (0..n).filter(|_| (0..len).all(|_| rng.bernoulli(step_accuracy))).count();
    ok as f64 / n.max(1) as f64
}

/// Width of every per-slot encoder in the flat and residual backbones.
pub const ENC_DIM: usize = 128;
/// Encoder outputs `(a, b, d, set, arith op, relation)` plus the 5-dim
/// logic-operator one-hot.
pub const FLAT_INPUT_DIM: usize = 6 * ENC_DIM + 5;
pub const HEAD_HIDDEN: usize = 128;
/// Transition net layer widths.
pub const TRANSITION_SHAPE: [usize; 4] = [6, 64, 64, 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "family")]
pub enum BackboneSpec {
    TheiaStep,
    Flat { hidden: usize, layers: usize },
    ResMlp { blocks: usize, expansion: usize, d: usize },
}

impl BackboneSpec {
    pub const FLAT_SMALL: BackboneSpec = BackboneSpec::Flat { hidden: 512, layers: 3 };
    /// Three layers sized to the four-domain model's parameter count.
    pub const FLAT_LARGE: BackboneSpec = BackboneSpec::Flat { hidden: 1246, layers: 3 };

    pub fn name(&self) -> String {
        match *self {
            BackboneSpec::TheiaStep => "theia-step".into(),
            BackboneSpec::Flat { hidden, layers } => format!("flat-h{hidden}-l{layers}"),
            BackboneSpec::ResMlp { blocks, expansion, d } => format!("resmlp-{blocks}b-x{expansion}-d{d}"),
        }
    }

    /// Accepts `theia-step`, `flat-small`, `flat-large`, the names produced by
    /// [`BackboneSpec::name`], and `resmlp-<blocks>x<expansion>` with the width
    /// solved against the parameter budget.
    pub fn parse(s: &str) -> Result<BackboneSpec> {
        let bad = || TheiaError::Config(format!("unknown backbone `{s}`"));
        let num = |t: &str, p: &str| t.strip_prefix(p).and_then(|x| x.parse::<usize>().ok()).ok_or_else(bad);
        let spec = match s {
            "theia-step" => BackboneSpec::TheiaStep,
            "flat-small" => Self::FLAT_SMALL,
            "flat-large" => Self::FLAT_LARGE,
            _ => {
                let parts: Vec<&str> = s.split('-').collect();
                match parts.as_slice() {
                    ["flat", h, l] => BackboneSpec::Flat {
                        hidden: num(h, "h")?,
                        layers: num(l, "l")?,
                    },
                    ["resmlp", b, e, d] => BackboneSpec::ResMlp {
                        blocks: b.strip_suffix('b').and_then(|x| x.parse().ok()).ok_or_else(bad)?,
                        expansion: num(e, "x")?,
                        d: num(d, "d")?,
                    },
                    ["resmlp", be] => {
                        let (b, e) = be.split_once('x').ok_or_else(bad)?;
                        let blocks = b.parse().map_err(|_| bad())?;
                        let expansion = e.parse().map_err(|_| bad())?;
                        BackboneSpec::ResMlp {
                            blocks,
                            expansion,
                            d: resmlp_solve_d(blocks, expansion, RESMLP_BUDGET)?,
                        }
                    }
                    _ => return Err(bad()),
                }
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            BackboneSpec::Flat { hidden, layers } if hidden == 0 || layers < 2 => Err(TheiaError::Config(format!(
                "flat backbone needs hidden > 0 and at least 2 layers, got {hidden} x {layers}"
            ))),
            BackboneSpec::ResMlp { blocks, expansion, d } if blocks == 0 || expansion == 0 || d == 0 => {
                Err(TheiaError::Config(format!("resmlp {blocks} blocks x{expansion} d={d}")))
            }
            _ => Ok(()),
        }
    }

    /// Closed-form trainable count, transition net excluded.
    pub fn param_count(&self) -> usize {
        match *self {
            BackboneSpec::TheiaStep => {
                let mut ps = ParamStore::new();
                init_theia_params(&ModelConfig::chain_step(), &mut ps, &mut Stream::new(0, 0)).expect("valid config");
                ps.trainable_count()
            }
            BackboneSpec::Flat { hidden: h, layers } => {
                encoder_count() + (FLAT_INPUT_DIM + 1) * h + (layers - 2) * (h * h + h) + head_count(h)
            }
            BackboneSpec::ResMlp { blocks, expansion, d } => resmlp_count(blocks, expansion, d),
        }
    }
}

/// Encoders, Unknown vectors and embeddings shared by the flat families.
pub fn encoder_count() -> usize {
    let e = ENC_DIM;
    let scalar = 2 * e + e * e + e;
    let set = SET_BITS * e + e + e * e + e;
    3 * scalar + set + 4 * e + 4 * e + 6 * e
}

fn head_count(din: usize) -> usize {
    din * HEAD_HIDDEN + HEAD_HIDDEN + HEAD_HIDDEN * 3 + 3
}

/// `blocks (2 e d^2 + 3 e d + d)` plus input affine, final norm, head and encoders.
pub fn resmlp_count(blocks: usize, expansion: usize, d: usize) -> usize {
    let ed = expansion * d;
    let block = 2 * ed * d + 3 * ed + d;
    encoder_count() + (FLAT_INPUT_DIM + 1) * d + blocks * block + 2 * d + head_count(d)
}

pub const RESMLP_BUDGET: usize = 2_780_000;
pub const RESMLP_TOLERANCE: f64 = 0.015;

/// Hidden width whose count is closest to `budget`, restricted to the
/// `±1.5%` window.
pub fn resmlp_solve_d(blocks: usize, expansion: usize, budget: usize) -> Result<usize> {
    let lo = budget as f64 * (1.0 - RESMLP_TOLERANCE);
    let hi = budget as f64 * (1.0 + RESMLP_TOLERANCE);
    if blocks == 0 || expansion == 0 || (resmlp_count(blocks, expansion, 1) as f64) > hi {
        return Err(TheiaError::Config(format!(
            "budget {budget} is below the smallest {blocks}-block x{expansion} network ({})",
            resmlp_count(blocks, expansion, 1)
        )));
    }
    let mut best: Option<(f64, usize)> = None;
    let mut d = 1;
    loop {
        let c = resmlp_count(blocks, expansion, d) as f64;
        if c > hi {
            break;
        }
        if c >= lo && best.is_none_or(|(gap, _)| (c - budget as f64).abs() < gap) {
            best = Some(((c - budget as f64).abs(), d));
        }
        d += 1;
    }
    best.map(|(_, d)| d).ok_or_else(|| {
        TheiaError::Config(format!(
            "no width puts a {blocks}-block x{expansion} network within ±1.5% of {budget}; counts jump from {} to {}",
            resmlp_count(blocks, expansion, d - 1),
            resmlp_count(blocks, expansion, d)
        ))
    })
}

fn add_encoders(ps: &mut ParamStore, rng: &mut Stream) -> Result<()> {
    let e = ENC_DIM;
    for s in ["a", "b", "d"] {
        layers::add_mlp2(ps, rng, &format!("enc.{s}"), 1, e, e)?;
        layers::add_vector(ps, rng, &format!("enc.unk_{s}"), e)?;
    }
    layers::add_mlp2(ps, rng, "enc.set", SET_BITS, e, e)?;
    layers::add_vector(ps, rng, "enc.unk_set", e)?;
    layers::add_embedding(ps, rng, "enc.arith_op", 4, e)?;
    layers::add_embedding(ps, rng, "enc.relation", 6, e)
}

fn encoders(g: &mut GraphBuilder, i: &StepInputs) -> Result<NodeId> {
    let mut parts = Vec::with_capacity(7);
    for (s, x, flag) in [("a", i.a, i.a_u), ("b", i.b, i.b_u), ("d", i.d, i.d_u), ("set", i.set, i.s_u)] {
        let h = layers::mlp2(g, &format!("enc.{s}"), x)?;
        parts.push(layers::masked(g, h, flag, &format!("enc.unk_{s}"))?);
    }
    parts.push(layers::embedding(g, "enc.arith_op", i.arith_op)?);
    parts.push(layers::embedding(g, "enc.relation", i.relation)?);
    parts.push(i.logic_onehot);
    Ok(g.concat(&parts)?)
}

pub fn init_backbone(spec: &BackboneSpec, ps: &mut ParamStore, rng: &mut Stream) -> Result<()> {
    spec.validate()?;
    match *spec {
        BackboneSpec::TheiaStep => init_theia_params(&ModelConfig::chain_step(), ps, rng),
        BackboneSpec::Flat { hidden, layers: l } => {
            add_encoders(ps, rng)?;
            layers::add_linear(ps, rng, "flat.0", FLAT_INPUT_DIM, hidden)?;
            for k in 1..l - 1 {
                layers::add_linear(ps, rng, &format!("flat.{k}"), hidden, hidden)?;
            }
            layers::add_chain_head(ps, rng, "head", hidden, HEAD_HIDDEN)
        }
        BackboneSpec::ResMlp { blocks, expansion, d } => {
            add_encoders(ps, rng)?;
            layers::add_linear(ps, rng, "res.in", FLAT_INPUT_DIM, d)?;
            for k in 0..blocks {
                layers::add_linear(ps, rng, &format!("res.b{k}.up"), d, expansion * d)?;
                layers::add_layer_norm(ps, &format!("res.b{k}.ln"), expansion * d)?;
                layers::add_linear(ps, rng, &format!("res.b{k}.down"), expansion * d, d)?;
            }
            layers::add_layer_norm(ps, "res.ln", d)?;
            layers::add_chain_head(ps, rng, "head", d, HEAD_HIDDEN)
        }
    }
}

/// Verdict logits of one step; the node is named `{prefix}logits`.
pub fn build_backbone(g: &mut GraphBuilder, spec: &BackboneSpec, inputs: StepInputs, prefix: &str) -> Result<NodeId> {
    let logits = match *spec {
        BackboneSpec::TheiaStep => return Ok(build_theia(g, &ModelConfig::chain_step(), inputs, prefix)?.logits),
        BackboneSpec::Flat { layers: l, .. } => {
            let mut h = encoders(g, &inputs)?;
            for k in 0..l - 1 {
                h = layers::linear(g, &format!("flat.{k}"), h)?;
                h = g.gelu(h)?;
            }
            layers::chain_head(g, "head", h)?.1
        }
        BackboneSpec::ResMlp { blocks, .. } => {
            let x = encoders(g, &inputs)?;
            let mut h = layers::linear(g, "res.in", x)?;
            for k in 0..blocks {
                let u = layers::linear(g, &format!("res.b{k}.up"), h)?;
                let u = g.gelu(u)?;
                let u = layers::layer_norm(g, &format!("res.b{k}.ln"), u)?;
                let u = layers::linear(g, &format!("res.b{k}.down"), u)?;
                h = g.add(h, u)?;
            }
            let h = layers::layer_norm(g, "res.ln", h)?;
            layers::chain_head(g, "head", h)?.1
        }
    };
    Ok(g.name(logits, &format!("{prefix}logits"))?)
}

pub fn init_transition(ps: &mut ParamStore, rng: &mut Stream) -> Result<()> {
    for k in 0..3 {
        layers::add_linear(ps, rng, &format!("trans.{k}"), TRANSITION_SHAPE[k], TRANSITION_SHAPE[k + 1])?;
    }
    Ok(())
}

/// `x` is the previous-state one-hot concatenated with the verdict one-hot.
pub fn transition(g: &mut GraphBuilder, x: NodeId) -> Result<NodeId> {
    let h = layers::linear(g, "trans.0", x)?;
    let h = g.gelu(h)?;
    let h = layers::linear(g, "trans.1", h)?;
    let h = g.gelu(h)?;
    layers::linear(g, "trans.2", h)
}

pub fn transition_param_count() -> usize {
    TRANSITION_SHAPE.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

pub const CHAIN_NUM_RANGE: u32 = 20;

/// A step backbone and its transition net in one parameter store.
pub struct ChainModel {
    pub spec: BackboneSpec,
    pub params: ParamStore,
    step_graph: KernelGraph,
    step_logits: NodeId,
    trans_graph: KernelGraph,
    trans_logits: NodeId,
}

impl ChainModel {
    pub fn new(spec: BackboneSpec, seed: u64) -> Result<ChainModel> {
        let mut ps = ParamStore::new();
        let mut rng = Stream::new(seed, 0);
        init_backbone(&spec, &mut ps, &mut rng)?;
        init_transition(&mut ps, &mut rng)?;
        Self::from_params(spec, ps)
    }

    pub fn from_params(spec: BackboneSpec, params: ParamStore) -> Result<ChainModel> {
        let mut g = GraphBuilder::new(&params);
        let inputs = StepInputs::declare(&mut g, "")?;
        let step_logits = build_backbone(&mut g, &spec, inputs, "")?;
        let step_graph = g.finish();
        let mut g = GraphBuilder::new(&params);
        let x = g.input("x", 6)?;
        let trans_logits = transition(&mut g, x)?;
        let trans_graph = g.finish();
        Ok(ChainModel {
            spec,
            params,
            step_graph,
            step_logits,
            trans_graph,
            trans_logits,
        })
    }

    pub fn backbone_param_count(&self) -> usize {
        self.params.trainable_count() - self.params.count_prefix("trans.")
    }

    /// Replaces the backbone with a fresh draw, keeping the transition net.
    pub fn reinit_backbone(&mut self, seed: u64) -> Result<()> {
        let mut fresh = ParamStore::new();
        init_backbone(&self.spec, &mut fresh, &mut Stream::new(seed, 0))?;
        for (_, p) in fresh.iter() {
            self.params.by_name_mut(&p.name)?.tensor = p.tensor.clone();
        }
        Ok(())
    }

    /// Trainability of every parameter outside `trans.` and of the transition net.
    pub fn set_trainable(&mut self, backbone: bool, trans: bool) {
        for (_, p) in self.params.iter_mut() {
            if p.name.ends_with(".protos") {
                continue;
            }
            p.trainable = if p.name.starts_with("trans.") { trans } else { backbone };
        }
    }

    pub fn verdict_logits(&self, samples: &[&Sample]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len() * 3);
        let mut rng = Stream::new(0, 0);
        for chunk in samples.chunks(crate::model::EVAL_CHUNK) {
            let mut feed = Feed::new();
            encode_step(&mut feed, "", chunk, CHAIN_NUM_RANGE);
            let t = forward_eval(&self.step_graph, &self.params, &feed, &EvalOptions::eval(), &mut rng)?;
            out.extend_from_slice(t.value(self.step_logits));
        }
        Ok(out)
    }

    /// Hard argmax verdicts.
    pub fn verdicts(&self, samples: &[&Sample]) -> Result<Vec<K3>> {
        Ok(self
            .verdict_logits(samples)?
            .chunks(3)
            .map(|z| K3::from_index(argmax(z)).unwrap())
            .collect())
    }

    /// Argmax of the transition net on all nine exact one-hot inputs,
    /// indexed `[state][verdict]`.
    pub fn transition_table(&self) -> Result<[[u8; 3]; 3]> {
        let mut x = vec![0.0; 9 * 6];
        for s in 0..3 {
            for v in 0..3 {
                let r = s * 3 + v;
                x[r * 6 + s] = 1.0;
                x[r * 6 + 3 + v] = 1.0;
            }
        }
        let t = forward_eval(
            &self.trans_graph,
            &self.params,
            &Feed::new().real("x", x),
            &EvalOptions::eval(),
            &mut Stream::new(0, 0),
        )?;
        let z = t.value(self.trans_logits);
        let mut table = [[0u8; 3]; 3];
        for s in 0..3 {
            for v in 0..3 {
                table[s][v] = argmax(&z[(s * 3 + v) * 3..(s * 3 + v + 1) * 3]) as u8;
            }
        }
        Ok(table)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(&self.params, path)?;
        Ok(())
    }

    pub fn load(spec: BackboneSpec, path: &std::path::Path) -> Result<ChainModel> {
        Self::from_params(spec, checkpoint::load(path)?)
    }
}

impl Classifier for ChainModel {
    fn classify(&self, samples: &[&Sample]) -> Result<Vec<K3>> {
        self.verdicts(samples)
    }
}

/// The mod-3 table itself.
pub fn oracle_table() -> [[u8; 3]; 3] {
    let mut t = [[0u8; 3]; 3];
    for s in 0..3u8 {
        for v in K3::ALL {
            t[s as usize][v.index()] = mod3_oracle(s, v);
        }
    }
    t
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionAudit {
    /// `(state, verdict, predicted, expected)` for all nine cells.
    pub cells: Vec<(u8, K3, u8, u8)>,
    pub correct: usize,
}

impl TransitionAudit {
    pub fn passed(&self) -> bool {
        self.correct == 9
    }
}

pub fn audit_table(table: &[[u8; 3]; 3]) -> TransitionAudit {
    let mut cells = Vec::with_capacity(9);
    for s in 0..3u8 {
        for v in K3::ALL {
            cells.push((s, v, table[s as usize][v.index()], mod3_oracle(s, v)));
        }
    }
    let correct = cells.iter().filter(|c| c.2 == c.3).count();
    TransitionAudit { cells, correct }
}

/// Rolls every chain through `table` using the verdicts of `step`.
/// Returns the fraction whose final state matches the ground truth.
pub fn roll_chains(chains: &[ChainSample], step: &dyn Classifier, table: &[[u8; 3]; 3]) -> Result<f64> {
    if chains.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    // Verdicts never depend on the state, so a batch of chains can be
    // classified in one pass before the states are rolled.
    for batch in chains.chunks(64) {
        let refs: Vec<&Sample> = batch.iter().flat_map(|c| c.steps.iter()).collect();
        let verdicts = step.classify(&refs)?;
        let mut k = 0;
        for c in batch {
            let mut s = c.initial;
            for _ in 0..c.len() {
                s = table[s as usize][verdicts[k].index()];
                k += 1;
            }
            correct += (s == c.final_state()) as usize;
        }
    }
    Ok(correct as f64 / chains.len() as f64)
}

pub const EVAL_LENGTHS: [usize; 5] = [5, 10, 50, 100, 500];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthResult {
    pub length: usize,
    pub chains: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    pub backbone: String,
    pub seed: u64,
    pub lengths: Vec<LengthResult>,
    pub restarts: Vec<RestartEvent>,
    pub phase1_accuracy: Option<f64>,
    pub transition_audit: Option<usize>,
    pub uniformity: Vec<DepthUniformity>,
}

impl ChainReport {
    pub fn accuracy_at(&self, length: usize) -> Option<f64> {
        self.lengths.iter().find(|l| l.length == length).map(|l| l.accuracy)
    }
}

/// Hard-decoded final-state accuracy at each length, on chains drawn from
/// `data_seed`. Chain ids are disjoint across lengths.
pub fn chain_eval(
    step: &dyn Classifier,
    table: &[[u8; 3]; 3],
    lengths: &[usize],
    n: usize,
    data_seed: u64,
) -> Result<(Vec<LengthResult>, Vec<DepthUniformity>)> {
    let cfg = SampleConfig {
        num_range: CHAIN_NUM_RANGE,
        ..SampleConfig::with_seed(data_seed)
    };
    let mut out = Vec::new();
    let mut uniformity = Vec::new();
    for (k, &len) in lengths.iter().enumerate() {
        let chains = gen_chains(&cfg, (k * n) as u64, n, len);
        out.push(LengthResult {
            length: len,
            chains: n,
            accuracy: roll_chains(&chains, step, table)?,
        });
        let depths: Vec<usize> = [1, 5, 10, 50, 100, 500].into_iter().filter(|&d| d <= len).collect();
        if k + 1 == lengths.len() {
            uniformity = state_uniformity(&chains, &depths);
        }
    }
    Ok((out, uniformity))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase1Config {
    pub train_samples: usize,
    pub test_samples: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Epoch budget of one try.
    pub max_epochs: usize,
    pub target_accuracy: f64,
    pub plateau: PlateauConfig,
    pub max_restarts: u64,
    pub data_seed: u64,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Self {
            train_samples: 500_000,
            test_samples: 50_000,
            batch_size: 1024,
            lr: 1e-3,
            weight_decay: 0.01,
            max_epochs: 150,
            target_accuracy: 0.999,
            plateau: PlateauConfig::default(),
            max_restarts: 2,
            data_seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase1Outcome {
    pub accuracy: f64,
    pub converged: bool,
    pub epochs: usize,
    /// Test accuracy per epoch across all tries.
    pub history: Vec<f64>,
    pub restarts: Vec<RestartEvent>,
}

fn step_loss_graph(model: &ChainModel) -> Result<(KernelGraph, NodeId)> {
    let mut g = GraphBuilder::new(&model.params);
    let inputs = StepInputs::declare(&mut g, "")?;
    let logits = build_backbone(&mut g, &model.spec, inputs, "")?;
    let t = g.index_input("target", 3)?;
    let loss = g.weighted_cross_entropy(logits, t, &CHAIN_CLASS_WEIGHTS)?;
    Ok((g.finish(), loss))
}

fn local_accuracy(model: &ChainModel, samples: &[Sample]) -> Result<f64> {
    let refs: Vec<&Sample> = samples.iter().collect();
    let pred = model.verdicts(&refs)?;
    Ok(pred.iter().zip(samples).filter(|(p, s)| **p == s.verdict).count() as f64 / samples.len().max(1) as f64)
}

/// Single-step training of the backbone until the local verdict accuracy
/// reaches the target, with plateau restarts.
pub fn phase1(model: &mut ChainModel, cfg: &Phase1Config, seed: u64) -> Result<Phase1Outcome> {
    if cfg.batch_size == 0 || cfg.max_epochs == 0 || cfg.train_samples == 0 || cfg.test_samples == 0 {
        return Err(TheiaError::Config(format!("phase 1 {cfg:?}")));
    }
    let sc = SampleConfig {
        num_range: CHAIN_NUM_RANGE,
        ..SampleConfig::with_seed(cfg.data_seed)
    };
    let train = gen_dataset(&sc, 0, cfg.train_samples);
    let test = gen_dataset(&sc, cfg.train_samples as u64, cfg.test_samples);
    model.set_trainable(true, false);
    let (graph, loss) = step_loss_graph(model)?;
    let steps = (train.len().div_ceil(cfg.batch_size) * cfg.max_epochs) as u64;
    let mut history = Vec::new();
    let mut restarts = Vec::new();
    let mut try_hist: Vec<f64> = Vec::new();
    let mut opt = Optimizer::new(&model.params, cfg.lr, 0.0, cfg.weight_decay, steps);
    let mut epoch_in_try = 0usize;
    let mut total_epochs = 0usize;
    loop {
        let perm = Stream::new(seed, 1 + total_epochs as u64).permutation(train.len());
        let mut rng = Stream::new(seed, 1_000_000 + total_epochs as u64);
        for batch in perm.chunks(cfg.batch_size) {
            let refs: Vec<&Sample> = batch.iter().map(|&i| &train[i]).collect();
            let mut feed = Feed::new();
            encode_step(&mut feed, "", &refs, CHAIN_NUM_RANGE);
            feed.set_index("target", refs.iter().map(|s| s.verdict.index()).collect());
            let t = forward_eval(&graph, &model.params, &feed, &EvalOptions::train(), &mut rng)?;
            if !t.scalar(loss).is_finite() {
                return Err(TheiaError::Diverged {
                    epoch: total_epochs,
                    reason: "phase 1 loss is not finite".into(),
                });
            }
            let back = t.backward(&graph, &model.params, loss)?;
            opt.step(&mut model.params, &back.grads)?;
        }
        epoch_in_try += 1;
        total_epochs += 1;
        let acc = local_accuracy(model, &test)?;
        history.push(acc);
        try_hist.push(acc);
        if acc >= cfg.target_accuracy {
            return Ok(Phase1Outcome {
                accuracy: acc,
                converged: true,
                epochs: total_epochs,
                history,
                restarts,
            });
        }
        let plateau = plateau_restart_check(&try_hist, &cfg.plateau) == PlateauDecision::Restart;
        if plateau || epoch_in_try >= cfg.max_epochs {
            if restarts.len() as u64 >= cfg.max_restarts {
                let log = serde_json::to_string(&restarts)?;
                return Err(TheiaError::RestartCap {
                    restarts: restarts.len() as u64,
                    log,
                });
            }
            let count = restarts.len() as u64 + 1;
            let new_seed = restart_seed(seed, count);
            restarts.push(RestartEvent {
                at_epoch: total_epochs,
                restart_count: count,
                new_seed,
                reason: if plateau { "plateau".into() } else { "epoch budget exhausted".into() },
            });
            model.reinit_backbone(new_seed)?;
            opt = Optimizer::new(&model.params, cfg.lr, 0.0, cfg.weight_decay, steps);
            try_hist.clear();
            epoch_in_try = 0;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase2Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for Phase2Config {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 256,
            lr: 1e-3,
        }
    }
}

/// Teacher-forced transition training on `(true state, true verdict)` pairs
/// from the chains; the backbone stays frozen.
pub fn phase2(model: &mut ChainModel, chains: &[ChainSample], cfg: &Phase2Config, seed: u64) -> Result<TransitionAudit> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for c in chains {
        for (t, s) in c.steps.iter().enumerate() {
            let mut row = [0.0; 6];
            row[c.state_before(t) as usize] = 1.0;
            row[3 + s.verdict.index()] = 1.0;
            x.push(row);
            y.push(c.states[t] as usize);
        }
    }
    if x.is_empty() || cfg.batch_size == 0 {
        return Err(TheiaError::Config("phase 2 needs chain data and a positive batch size".into()));
    }
    model.set_trainable(false, true);
    let mut g = GraphBuilder::new(&model.params);
    let xi = g.input("x", 6)?;
    let logits = transition(&mut g, xi)?;
    let t = g.index_input("target", 3)?;
    let loss = g.weighted_cross_entropy(logits, t, &[1.0; 3])?;
    let graph = g.finish();
    let steps = (x.len().div_ceil(cfg.batch_size) * cfg.epochs) as u64;
    let mut opt = Optimizer::new(&model.params, cfg.lr, 0.0, 0.0, steps);
    let mut rng = Stream::new(seed, 2);
    for epoch in 0..cfg.epochs {
        for batch in Stream::new(seed, 3 + epoch as u64).permutation(x.len()).chunks(cfg.batch_size) {
            let feed = Feed::new()
                .real("x", batch.iter().flat_map(|&i| x[i]).collect())
                .index("target", batch.iter().map(|&i| y[i]).collect());
            let tr = forward_eval(&graph, &model.params, &feed, &EvalOptions::train(), &mut rng)?;
            let back = tr.backward(&graph, &model.params, loss)?;
            opt.step(&mut model.params, &back.grads)?;
        }
    }
    model.set_trainable(true, true);
    Ok(audit_table(&model.transition_table()?))
}

pub fn tau_schedule(epoch: usize) -> f64 {
    (0.5 - 0.01 * epoch as f64).max(0.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase3Config {
    pub epochs: usize,
    pub chain_len: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for Phase3Config {
    fn default() -> Self {
        Self {
            epochs: 30,
            chain_len: 5,
            batch_size: 256,
            lr: 1e-4,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase3Epoch {
    pub epoch: usize,
    pub tau: f64,
    pub loss: f64,
}

/// The unrolled chain graph. Per step: verdict logits, a straight-through
/// one-hot verdict, the transition on `[state, verdict]`, and a
/// straight-through one-hot state fed to the next step. The loss averages
/// the verdict and next-state cross-entropies over steps.
pub fn chain_graph(model: &ChainModel, len: usize) -> Result<(KernelGraph, NodeId)> {
    if len == 0 {
        return Err(TheiaError::Config("chain length must be positive".into()));
    }
    let mut g = GraphBuilder::new(&model.params);
    let mut state = g.input("state0", 3)?;
    let mut terms = Vec::with_capacity(2 * len);
    for t in 0..len {
        let p = format!("s{t}.");
        let inputs = StepInputs::declare(&mut g, &p)?;
        let logits = build_backbone(&mut g, &model.spec, inputs, &p)?;
        let vt = g.index_input(&format!("{p}target"), 3)?;
        let vl = g.weighted_cross_entropy(logits, vt, &CHAIN_CLASS_WEIGHTS)?;
        terms.push(g.name(vl, &format!("{p}verdict_loss"))?);
        let v = g.gumbel_st(logits)?;
        let x = g.concat(&[state, v])?;
        let sl = transition(&mut g, x)?;
        let st = g.index_input(&format!("{p}state"), 3)?;
        terms.push(g.weighted_cross_entropy(sl, st, &[1.0; 3])?);
        state = g.gumbel_st(sl)?;
    }
    let total = g.sum(&terms)?;
    let loss = g.scale(total, 1.0 / len as f64)?;
    Ok((g.finish(), loss))
}

pub fn chain_feed(chains: &[&ChainSample], len: usize) -> Feed {
    let mut feed = Feed::new();
    let mut s0 = vec![0.0; chains.len() * 3];
    for (r, c) in chains.iter().enumerate() {
        s0[r * 3 + c.initial as usize] = 1.0;
    }
    feed.set_real("state0", s0);
    for t in 0..len {
        let p = format!("s{t}.");
        let steps: Vec<&Sample> = chains.iter().map(|c| &c.steps[t]).collect();
        encode_step(&mut feed, &p, &steps, CHAIN_NUM_RANGE);
        feed.set_index(&format!("{p}target"), steps.iter().map(|s| s.verdict.index()).collect());
        feed.set_index(&format!("{p}state"), chains.iter().map(|c| c.states[t] as usize).collect());
    }
    feed
}

/// End-to-end fine-tuning on fixed chains with the temperature schedule.
pub fn phase3(model: &mut ChainModel, chains: &[ChainSample], cfg: &Phase3Config, seed: u64) -> Result<Vec<Phase3Epoch>> {
    if chains.iter().any(|c| c.len() < cfg.chain_len) || chains.is_empty() || cfg.batch_size == 0 {
        return Err(TheiaError::Config(format!(
            "phase 3 needs chains of length >= {} and a positive batch size",
            cfg.chain_len
        )));
    }
    if !audit_table(&model.transition_table()?).passed() {
        return Err(TheiaError::Invalid("phase 3 requires a 9/9 transition table".into()));
    }
    model.set_trainable(true, true);
    let (graph, loss) = chain_graph(model, cfg.chain_len)?;
    let steps = (chains.len().div_ceil(cfg.batch_size) * cfg.epochs) as u64;
    let mut opt = Optimizer::new(&model.params, cfg.lr, 0.0, cfg.weight_decay, steps);
    let mut out = Vec::new();
    for epoch in 0..cfg.epochs {
        let tau = tau_schedule(epoch);
        let mut rng = Stream::new(seed, 2_000_000 + epoch as u64);
        let mut total = 0.0;
        for batch in Stream::new(seed, 3_000_000 + epoch as u64).permutation(chains.len()).chunks(cfg.batch_size) {
            let refs: Vec<&ChainSample> = batch.iter().map(|&i| &chains[i]).collect();
            let feed = chain_feed(&refs, cfg.chain_len);
            let t = forward_eval(&graph, &model.params, &feed, &EvalOptions::train().with_tau(tau), &mut rng)?;
            let l = t.scalar(loss);
            if !l.is_finite() {
                return Err(TheiaError::Diverged {
                    epoch,
                    reason: format!("phase 3 loss {l}"),
                });
            }
            total += l * refs.len() as f64;
            let back = t.backward(&graph, &model.params, loss)?;
            opt.step(&mut model.params, &back.grads)?;
        }
        out.push(Phase3Epoch {
            epoch: epoch + 1,
            tau,
            loss: total / chains.len() as f64,
        });
    }
    Ok(out)
}

/// Sizes of one full chain run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainRunConfig {
    pub backbone: BackboneSpec,
    pub phase1: Phase1Config,
    pub phase2: Phase2Config,
    pub phase3: Phase3Config,
    /// Fixed pool of training chains for phases 2 and 3.
    pub train_chains: usize,
    pub eval_chains: usize,
    pub eval_lengths: Vec<usize>,
    pub data_seed: u64,
}

impl ChainRunConfig {
    pub fn desk(backbone: BackboneSpec) -> Self {
        Self {
            backbone,
            phase1: Phase1Config::default(),
            phase2: Phase2Config::default(),
            phase3: Phase3Config::default(),
            train_chains: 20_000,
            eval_chains: 2_000,
            eval_lengths: EVAL_LENGTHS.to_vec(),
            data_seed: 7,
        }
    }

    pub fn full(backbone: BackboneSpec) -> Self {
        Self {
            phase1: Phase1Config {
                train_samples: 2_000_000,
                ..Phase1Config::default()
            },
            train_chains: 100_000,
            eval_chains: 10_000,
            ..Self::desk(backbone)
        }
    }
}

/// Phases 1-3 and the length sweep for one seed.
pub fn run_chain(cfg: &ChainRunConfig, seed: u64) -> Result<(ChainModel, ChainReport)> {
    let mut model = ChainModel::new(cfg.backbone, seed)?;
    let p1 = phase1(&mut model, &cfg.phase1, seed)?;
    let sc = SampleConfig {
        num_range: CHAIN_NUM_RANGE,
        ..SampleConfig::with_seed(cfg.data_seed + 1)
    };
    let chains = gen_chains(&sc, 0, cfg.train_chains, cfg.phase3.chain_len);
    let audit = phase2(&mut model, &chains, &cfg.phase2, seed)?;
    if !audit.passed() {
        return Err(TheiaError::Invalid(format!("transition audit {}/9 after phase 2", audit.correct)));
    }
    phase3(&mut model, &chains, &cfg.phase3, seed)?;
    let table = model.transition_table()?;
    let (lengths, uniformity) = chain_eval(&model, &table, &cfg.eval_lengths, cfg.eval_chains, cfg.data_seed + 2)?;
    let report = ChainReport {
        backbone: cfg.backbone.name(),
        seed,
        lengths,
        restarts: p1.restarts,
        phase1_accuracy: Some(p1.accuracy),
        transition_audit: Some(audit.correct),
        uniformity,
    };
    Ok((model, report))
}

/// Mean final-state accuracy over reports at one length.
pub fn mean_at(reports: &[ChainReport], length: usize) -> Option<f64> {
    let v: Option<Vec<f64>> = reports.iter().map(|r| r.accuracy_at(length)).collect();
    mean(&v?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transition_has_4803_params() {
        assert_eq!(transition_param_count(), 4803);
    }

    #[test]
    fn closed_form_counts_match_built_stores() {
        for spec in [
            BackboneSpec::FLAT_SMALL,
            BackboneSpec::Flat { hidden: 40, layers: 4 },
            BackboneSpec::ResMlp { blocks: 2, expansion: 3, d: 17 },
        ] {
            let mut ps = ParamStore::new();
            init_backbone(&spec, &mut ps, &mut Stream::new(1, 0)).unwrap();
            assert_eq!(ps.trainable_count(), spec.param_count(), "{}", spec.name());
        }
    }

    #[test]
    fn backbone_names_parse_back() {
        for spec in [BackboneSpec::TheiaStep, BackboneSpec::FLAT_LARGE, BackboneSpec::ResMlp { blocks: 4, expansion: 2, d: 300 }] {
            assert_eq!(BackboneSpec::parse(&spec.name()).unwrap(), spec);
        }
        assert!(BackboneSpec::parse("flat-h0-l3").is_err());
        assert!(BackboneSpec::parse("mystery").is_err());
    }

    #[test]
    fn tau_clamps() {
        assert_eq!(tau_schedule(0), 0.5);
        assert!((tau_schedule(1) - 0.49).abs() < 1e-12);
        assert!((tau_schedule(40) - 0.1).abs() < 1e-12);
        assert_eq!(tau_schedule(100), 0.1);
    }
}
