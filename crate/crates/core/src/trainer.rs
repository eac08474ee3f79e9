//! Four-domain training with Kleene-aware stopping, and the plateau-restart
//! policy shared with the chain pipeline.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use theia_autodiff::{
    adamw_step, checkpoint, cosine_lr, forward_eval, AdamWConfig, AdamWState, EvalOptions, Grads, KernelGraph,
    NodeId, ParamStore, Stream,
};

use crate::diagnostic::{run_diagnostic, DiagConfig, DiagnosticReport, Roster};
use crate::error::{Result, TheiaError};
use crate::k3::K3;
use crate::model::{encode_batch, targets, theia_graph, ModelConfig, PrototypeInit, TheiaModel};
use crate::taskgen::{gen_dataset, split_dataset, Sample, SampleConfig};

/// Class-weight presets `(w_F, w_T, w_U)`.
pub const DEFAULT_CLASS_WEIGHTS: [f64; 3] = [1.0, 1.0, 2.0];
pub const UNIFORM_CLASS_WEIGHTS: [f64; 3] = [1.0, 1.0, 1.0];
pub const CHAIN_CLASS_WEIGHTS: [f64; 3] = [1.0, 2.0, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub class_weights: [f64; 3],
    pub p_unk_train: f64,
    pub p_unk_eval: f64,
    pub train_samples: usize,
    pub test_fraction: f64,
    pub seed: u64,
    pub data_seed: u64,
    /// Samples per rule in the per-epoch 12-rule diagnostic.
    pub diag_samples: usize,
    /// Stop as soon as the Kleene-aware criterion fires.
    pub early_stop: bool,
}

impl Default for TrainConfig {
    /// Desk-scale profile.
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_floor: 0.0,
            weight_decay: 0.01,
            batch_size: 1024,
            max_epochs: 150,
            class_weights: DEFAULT_CLASS_WEIGHTS,
            p_unk_train: 0.15,
            p_unk_eval: 0.15,
            train_samples: 500_000,
            test_fraction: 0.2,
            seed: 42,
            data_seed: 42,
            diag_samples: 10_000,
            early_stop: true,
        }
    }
}

impl TrainConfig {
    pub fn full_scale() -> Self {
        Self {
            batch_size: 4096,
            train_samples: 2_000_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TheiaError::Config(m));
        if self.class_weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return bad(format!("class weights {:?} must be positive", self.class_weights));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr >= self.lr_floor && self.lr_floor >= 0.0) {
            return bad(format!("learning rates peak {} floor {}", self.lr, self.lr_floor));
        }
        if !(0.0..1.0).contains(&self.p_unk_train) || !(0.0..1.0).contains(&self.p_unk_eval) {
            return bad("p_unk values must lie in [0, 1)".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test_fraction {} outside (0, 1)", self.test_fraction));
        }
        Ok(())
    }

    /// Whether evaluation happens under a different Unknown rate.
    pub fn shifted(&self) -> bool {
        self.p_unk_eval != self.p_unk_train
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub overall: f64,
    pub per_class: [f64; 3],
    pub rule_accuracies: Vec<f64>,
    pub shifted_accuracy: Option<f64>,
    pub wall_time_s: f64,
}

impl CheckpointRecord {
    pub fn min_rule(&self) -> f64 {
        self.rule_accuracies.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn passes_kleene(&self) -> bool {
        self.overall > KLEENE_OVERALL && !self.rule_accuracies.is_empty() && self.min_rule() > KLEENE_RULE
    }
}

pub const KLEENE_OVERALL: f64 = 0.999;
pub const KLEENE_RULE: f64 = 0.99;

/// True when the two most recent records both clear the overall and per-rule bars.
pub fn kleene_aware_stop(history: &[CheckpointRecord]) -> bool {
    match history {
        [.., a, b] => a.passes_kleene() && b.passes_kleene(),
        _ => false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub coarse_epochs: usize,
    pub threshold: f64,
    pub patience: usize,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            coarse_epochs: 40,
            threshold: 0.90,
            patience: 30,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlateauDecision {
    Continue,
    Restart,
}

/// Coarse trigger: every one of the first `coarse_epochs` accuracies below
/// the threshold. Fine trigger: the threshold was reached and the best value
/// is `patience` or more epochs old.
pub fn plateau_restart_check(accuracies: &[f64], cfg: &PlateauConfig) -> PlateauDecision {
    let Some((best_at, &best)) = accuracies
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, &f64)>, (i, v)| match acc {
            Some((_, b)) if *v <= *b => acc,
            _ => Some((i, v)),
        })
    else {
        return PlateauDecision::Continue;
    };
    if best < cfg.threshold {
        if accuracies.len() >= cfg.coarse_epochs {
            return PlateauDecision::Restart;
        }
        return PlateauDecision::Continue;
    }
    if accuracies.len() - 1 - best_at >= cfg.patience {
        PlateauDecision::Restart
    } else {
        PlateauDecision::Continue
    }
}

/// Deterministic re-initialization seed after `restarts` restarts.
pub fn restart_seed(base: u64, restarts: u64) -> u64 {
    base * 1000 + restarts
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartEvent {
    pub at_epoch: usize,
    pub restart_count: u64,
    pub new_seed: u64,
    pub reason: String,
}

/// AdamW on a cosine schedule over a fixed step budget.
pub struct Optimizer {
    pub state: AdamWState,
    pub cfg: AdamWConfig,
    pub peak: f64,
    pub floor: f64,
    pub total_steps: u64,
}

impl Optimizer {
    pub fn new(params: &ParamStore, peak: f64, floor: f64, weight_decay: f64, total_steps: u64) -> Self {
        Self {
            state: AdamWState::new(params),
            cfg: AdamWConfig {
                weight_decay,
                ..AdamWConfig::default()
            },
            peak,
            floor,
            total_steps,
        }
    }

    pub fn lr(&self) -> f64 {
        cosine_lr(self.state.step.min(self.total_steps), self.total_steps, self.peak, self.floor)
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) -> Result<()> {
        let lr = self.lr();
        adamw_step(params, grads, &mut self.state, lr, &self.cfg)?;
        Ok(())
    }
}

/// Accuracy and per-class recall.
pub fn accuracy_by_class(pred: &[K3], truth: &[K3]) -> (f64, [f64; 3]) {
    let mut hit = [0usize; 3];
    let mut tot = [0usize; 3];
    for (p, t) in pred.iter().zip(truth) {
        tot[t.index()] += 1;
        hit[t.index()] += (p == t) as usize;
    }
    let n: usize = tot.iter().sum();
    let overall = if n == 0 { 0.0 } else { hit.iter().sum::<usize>() as f64 / n as f64 };
    let per = [0, 1, 2].map(|k| if tot[k] == 0 { 0.0 } else { hit[k] as f64 / tot[k] as f64 });
    (overall, per)
}

pub fn evaluate(model: &TheiaModel, samples: &[Sample]) -> Result<(f64, [f64; 3])> {
    let refs: Vec<&Sample> = samples.iter().collect();
    let pred = model.predict(&refs)?;
    let truth: Vec<K3> = samples.iter().map(|s| s.verdict).collect();
    Ok(accuracy_by_class(&pred, &truth))
}

/// Train and test sets for one run, plus the shifted evaluation set when
/// `p_unk_eval` differs from `p_unk_train`.
pub struct TrainData {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub shifted: Option<Vec<Sample>>,
}

pub fn make_data(cfg: &TrainConfig) -> Result<TrainData> {
    cfg.validate()?;
    let total = (cfg.train_samples as f64 / (1.0 - cfg.test_fraction)).round() as usize;
    let sc = SampleConfig {
        p_unk: cfg.p_unk_train,
        data_seed: cfg.data_seed,
        ..SampleConfig::default()
    };
    let all = gen_dataset(&sc, 0, total);
    let (train, test) = split_dataset(&all, 1.0 - cfg.test_fraction, cfg.data_seed)?;
    let shifted = cfg.shifted().then(|| {
        let sc = SampleConfig {
            p_unk: cfg.p_unk_eval,
            ..sc
        };
        gen_dataset(&sc, total as u64, test.len())
    });
    Ok(TrainData { train, test, shifted })
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub history: Vec<CheckpointRecord>,
    pub stopped_early: bool,
    pub final_diagnostic: Option<DiagnosticReport>,
}

/// Per-epoch callback, e.g. for streaming the history to disk.
pub type EpochHook<'a> = &'a mut dyn FnMut(&CheckpointRecord, &TheiaModel) -> Result<()>;

pub fn training_graph(model: &TheiaModel, weights: [f64; 3]) -> Result<(KernelGraph, NodeId)> {
    let (g, _, loss) = theia_graph(&model.config, &model.params, Some(weights))?;
    Ok((g, loss.expect("loss node requested")))
}

pub fn train(model: &mut TheiaModel, data: &TrainData, cfg: &TrainConfig, mut hook: Option<EpochHook>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut history = Vec::new();
    if cfg.max_epochs == 0 {
        return Ok(TrainOutcome {
            history,
            stopped_early: false,
            final_diagnostic: None,
        });
    }
    if data.train.is_empty() || data.test.is_empty() {
        return Err(TheiaError::Data("training needs non-empty train and test sets".into()));
    }
    let (graph, loss) = training_graph(model, cfg.class_weights)?;
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size) as u64;
    let mut opt = Optimizer::new(&model.params, cfg.lr, cfg.lr_floor, cfg.weight_decay, steps_per_epoch * cfg.max_epochs as u64);
    let diag_cfg = DiagConfig {
        num_range: model.config.num_range,
        ..DiagConfig::default()
    };
    let start = Instant::now();
    let mut stopped_early = false;
    for epoch in 0..cfg.max_epochs {
        let perm = Stream::new(cfg.seed, 1 + epoch as u64).permutation(data.train.len());
        let mut dropout_rng = Stream::new(cfg.seed, 1_000_000 + epoch as u64);
        let mut loss_sum = 0.0;
        for batch in perm.chunks(cfg.batch_size) {
            let refs: Vec<&Sample> = batch.iter().map(|&i| &data.train[i]).collect();
            let mut feed = encode_batch(&refs, model.config.num_range);
            feed.set_index("target", targets(&refs));
            let trace = forward_eval(&graph, &model.params, &feed, &EvalOptions::train(), &mut dropout_rng)?;
            let l = trace.scalar(loss);
            if !l.is_finite() {
                return Err(TheiaError::Diverged {
                    epoch,
                    reason: format!("loss {l}"),
                });
            }
            loss_sum += l * refs.len() as f64;
            let back = trace.backward(&graph, &model.params, loss)?;
            opt.step(&mut model.params, &back.grads).map_err(|e| TheiaError::Diverged {
                epoch,
                reason: e.to_string(),
            })?;
        }
        let (overall, per_class) = evaluate(model, &data.test)?;
        let diag = if cfg.diag_samples > 0 {
            run_diagnostic(model, Roster::Targeted12, cfg.diag_samples, &diag_cfg)?.accuracies()
        } else {
            Vec::new()
        };
        let shifted_accuracy = match &data.shifted {
            Some(s) => Some(evaluate(model, s)?.0),
            None => None,
        };
        let rec = CheckpointRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / data.train.len() as f64,
            overall,
            per_class,
            rule_accuracies: diag,
            shifted_accuracy,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        if let Some(h) = hook.as_mut() {
            h(&rec, model)?;
        }
        history.push(rec);
        if cfg.early_stop && kleene_aware_stop(&history) {
            stopped_early = true;
            break;
        }
    }
    let final_diagnostic = if cfg.diag_samples > 0 {
        Some(run_diagnostic(model, Roster::Targeted12, cfg.diag_samples, &diag_cfg)?)
    } else {
        None
    };
    Ok(TrainOutcome {
        history,
        stopped_early,
        final_diagnostic,
    })
}

/// Named ablation presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    None,
    SingleSubspace,
    NoBridges,
    RandomPrototypes,
    UniformWeights,
    UnknownShift,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::None,
        Ablation::SingleSubspace,
        Ablation::NoBridges,
        Ablation::RandomPrototypes,
        Ablation::UniformWeights,
        Ablation::UnknownShift,
    ];

    pub fn apply(self, model: &mut ModelConfig, train: &mut TrainConfig) {
        match self {
            Ablation::None => {}
            Ablation::SingleSubspace => model.subspace_count = 1,
            Ablation::NoBridges => model.use_bridges = false,
            Ablation::RandomPrototypes => model.prototype_init = PrototypeInit::RandomNormal,
            Ablation::UniformWeights => train.class_weights = UNIFORM_CLASS_WEIGHTS,
            Ablation::UnknownShift => {
                train.p_unk_train = 0.05;
                train.p_unk_eval = 0.50;
            }
        }
    }
}

/// Files of a training run directory.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub const CONFIG: &'static str = "config.json";
    pub const HISTORY: &'static str = "history.jsonl";
    pub const CHECKPOINT: &'static str = "model.theia";
    pub const DIAGNOSTIC: &'static str = "diagnostic.json";

    /// Creates `root`, refusing a directory that already holds a run.
    pub fn create(root: &Path) -> Result<RunDir> {
        if root.join(Self::CONFIG).exists() {
            return Err(TheiaError::Config(format!("{} already contains a run", root.display())));
        }
        std::fs::create_dir_all(root)?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn open(root: &Path) -> Result<RunDir> {
        if !root.join(Self::CONFIG).exists() {
            return Err(TheiaError::Config(format!("{} is not a run directory", root.display())));
        }
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write_config(&self, model: &ModelConfig, train: &TrainConfig) -> Result<()> {
        let v = serde_json::json!({ "model": model, "train": train });
        std::fs::write(self.path(Self::CONFIG), serde_json::to_string_pretty(&v)? + "\n")?;
        Ok(())
    }

    pub fn read_config(&self) -> Result<(ModelConfig, TrainConfig)> {
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(self.path(Self::CONFIG))?)?;
        Ok((serde_json::from_value(v["model"].clone())?, serde_json::from_value(v["train"].clone())?))
    }

    pub fn append_history(&self, rec: &CheckpointRecord) -> Result<()> {
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.path(Self::HISTORY))?;
        writeln!(f, "{}", serde_json::to_string(rec)?)?;
        Ok(())
    }

    pub fn read_history(&self) -> Result<Vec<CheckpointRecord>> {
        let text = std::fs::read_to_string(self.path(Self::HISTORY))?;
        text.lines()
            .filter(|l| !l.is_empty())
            .map(|l| serde_json::from_str(l).map_err(TheiaError::from))
            .collect()
    }

    pub fn save_model(&self, model: &TheiaModel) -> Result<()> {
        checkpoint::save(&model.params, &self.path(Self::CHECKPOINT))?;
        Ok(())
    }

    pub fn load_model(&self) -> Result<TheiaModel> {
        let (mc, _) = self.read_config()?;
        let ps = checkpoint::load(&self.path(Self::CHECKPOINT))?;
        TheiaModel::from_params(mc, ps)
    }
}

/// Full run: data, init, training with per-epoch history and checkpoint
/// files, final diagnostic.
pub fn run_training(dir: &Path, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<(TheiaModel, TrainOutcome)> {
    let run = RunDir::create(dir)?;
    run.write_config(model_cfg, cfg)?;
    let data = make_data(cfg)?;
    let mut model = TheiaModel::init(model_cfg.clone(), &mut Stream::new(cfg.seed, 0))?;
    let mut hook = |rec: &CheckpointRecord, m: &TheiaModel| -> Result<()> {
        run.append_history(rec)?;
        run.save_model(m)
    };
    let outcome = train(&mut model, &data, cfg, Some(&mut hook))?;
    run.save_model(&model)?;
    if let Some(d) = &outcome.final_diagnostic {
        std::fs::write(run.path(RunDir::DIAGNOSTIC), serde_json::to_string_pretty(d)? + "\n")?;
    }
    Ok((model, outcome))
}
