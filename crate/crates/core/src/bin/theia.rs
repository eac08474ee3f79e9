//! Command-line entry point.
//!
//! Every subcommand takes `--config`, `--seeds`, `--scale` and `--out`.
//! Per-seed outputs go to `<out>/seed-<n>/`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use theia::chain::{run_chain, BackboneSpec, ChainRunConfig};
use theia::diagnostic::{run_diagnostic, Classifier, DiagConfig, OracleClassifier, Roster};
use theia::model::ModelConfig;
use theia::patching::{build_pairs, run_patching, PairPattern, PatchSource, DEFAULT_PAIRS, PAIR_DATA_SEED};
use theia::probe::{extract_boundaries, run_probe_grid, ProbeGrid};
use theia::report::{ReportBundle, RunConfig, RunManifest, Scale, DEFAULT_SEEDS};
use theia::taskgen::{dataset_stats, gen_dataset, write_dataset, SampleConfig};
use theia::trainer::{run_training, RunDir, TrainConfig};
use theia::TheiaError;

#[derive(Parser)]
#[command(name = "theia", version, about = "THEIA experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat key-value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SEEDS)]
    seeds: Vec<u64>,
    #[arg(long, default_value = "desk")]
    scale: Scale,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ModelSource {
    /// Directory holding `seed-<n>` training runs; defaults to `--out`.
    #[arg(long)]
    models: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a dataset per seed.
    Gen(Common),
    /// Train THEIA per seed.
    Train(Common),
    /// Per-rule K3 diagnostic.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: ModelSource,
        /// Score the ground-truth oracle instead of a trained model.
        #[arg(long)]
        oracle: bool,
    },
    /// Boundary probe grid.
    Probe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: ModelSource,
    },
    /// Activation patching of the Order output.
    Patch {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: ModelSource,
    },
    /// Chain training and length sweep.
    Chain(Common),
    /// Aggregate the `seed-<n>` directories under `--out`.
    Report {
        /// Flat key-value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding the `seed-<n>` runs; reports are written here.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct GenSection {
    samples: usize,
    data: SampleConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DiagnoseSection {
    roster: Roster,
    samples: usize,
    seed_offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ProbeSection {
    samples: usize,
    data_seed: u64,
    grid: ProbeGrid,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PatchSection {
    pairs: usize,
    data_seed: u64,
}

fn load_config(path: Option<&Path>, sections: &[&str]) -> theia::Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.check_sections(sections)?;
    Ok(cfg)
}

fn start(command: &str, c: &Common, sections: &[&str]) -> theia::Result<(RunConfig, RunManifest)> {
    let cfg = load_config(c.config.as_deref(), sections)?;
    let m = RunManifest {
        command: command.into(),
        config: c.config.clone(),
        seeds: c.seeds.clone(),
        out: c.out.clone(),
        scale: c.scale,
    };
    m.create()?;
    Ok((cfg, m))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> theia::Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn load_model(source: &ModelSource, c: &Common, seed: u64) -> theia::Result<theia::model::TheiaModel> {
    let root = source.models.as_ref().unwrap_or(&c.out);
    RunDir::open(&root.join(format!("seed-{seed}")))?.load_model()
}

fn gen(c: &Common) -> theia::Result<()> {
    let (cfg, m) = start("gen", c, &["gen"])?;
    let base = GenSection {
        samples: if c.scale == Scale::Full { 1_000_000 } else { 50_000 },
        data: SampleConfig::default(),
    };
    let s: GenSection = cfg.section("gen", &base)?;
    for &seed in &m.seeds {
        let sc = SampleConfig { data_seed: seed, ..s.data };
        sc.validate()?;
        let samples = gen_dataset(&sc, 0, s.samples);
        let dir = m.seed_dir(seed);
        std::fs::create_dir_all(&dir)?;
        write_dataset(&dir.join("dataset.tsv"), &sc, &samples)?;
        write_json(&dir.join("stats.json"), &dataset_stats(&samples)?)?;
        println!("seed {seed}: {} samples", samples.len());
    }
    Ok(())
}

fn train(c: &Common) -> theia::Result<()> {
    let (cfg, m) = start("train", c, &["model", "train"])?;
    let mc: ModelConfig = cfg.section("model", &ModelConfig::four_domain())?;
    let base = if c.scale == Scale::Full { TrainConfig::full_scale() } else { TrainConfig::default() };
    let tc: TrainConfig = cfg.section("train", &base)?;
    for &seed in &m.seeds {
        let tc = TrainConfig {
            seed,
            data_seed: seed,
            ..tc.clone()
        };
        let (_, outcome) = run_training(&m.seed_dir(seed), &mc, &tc)?;
        let last = outcome.history.last();
        println!(
            "seed {seed}: {} epochs, overall {:.4}, worst rule {:.4}, early stop {}",
            outcome.history.len(),
            last.map_or(0.0, |r| r.overall),
            last.map_or(0.0, |r| r.min_rule()),
            outcome.stopped_early
        );
    }
    Ok(())
}

fn diagnose(c: &Common, source: &ModelSource, oracle: bool) -> theia::Result<()> {
    let (cfg, m) = start("diagnose", c, &["diagnose"])?;
    let s: DiagnoseSection = cfg.section(
        "diagnose",
        &DiagnoseSection {
            roster: Roster::Full39,
            samples: 10_000,
            seed_offset: 0,
        },
    )?;
    let dc = DiagConfig {
        seed_offset: s.seed_offset,
        ..DiagConfig::default()
    };
    for &seed in &m.seeds {
        let model;
        let clf: &dyn Classifier = if oracle {
            &OracleClassifier
        } else {
            model = load_model(source, c, seed)?;
            &model
        };
        let r = run_diagnostic(clf, s.roster, s.samples, &dc)?;
        write_json(&m.seed_dir(seed).join(ReportBundle::DIAGNOSTIC), &r)?;
        println!("seed {seed}\n{}", r.to_table());
    }
    Ok(())
}

fn probe(c: &Common, source: &ModelSource) -> theia::Result<()> {
    let (cfg, m) = start("probe", c, &["probe"])?;
    let s: ProbeSection = cfg.section(
        "probe",
        &ProbeSection {
            samples: if c.scale == Scale::Full { 100_000 } else { 50_000 },
            data_seed: 999,
            grid: ProbeGrid::default(),
        },
    )?;
    for &seed in &m.seeds {
        let model = load_model(source, c, seed)?;
        let dump = extract_boundaries(&model, s.samples, s.data_seed)?;
        let dir = m.seed_dir(seed);
        std::fs::create_dir_all(&dir)?;
        dump.save(&dir.join("boundaries.dump"))?;
        let cells = run_probe_grid(&dump, seed, &s.grid)?;
        write_json(&dir.join(ReportBundle::PROBES), &cells)?;
        for cell in &cells {
            println!(
                "seed {seed} {:<10} {:<13} {:<8} {:.4}",
                cell.boundary.name(),
                cell.target.name(),
                cell.family.name(),
                cell.value
            );
        }
    }
    Ok(())
}

fn patch(c: &Common, source: &ModelSource) -> theia::Result<()> {
    let (cfg, m) = start("patch", c, &["patch"])?;
    let s: PatchSection = cfg.section(
        "patch",
        &PatchSection {
            pairs: DEFAULT_PAIRS,
            data_seed: PAIR_DATA_SEED,
        },
    )?;
    for &seed in &m.seeds {
        let model = load_model(source, c, seed)?;
        let mut reports = Vec::new();
        for pattern in [PairPattern::OR, PairPattern::AND] {
            let pairs = build_pairs(pattern, s.pairs, s.data_seed, model.config.num_range, SampleConfig::default().set_bit_prob)?;
            for src in [PatchSource::Counterfactual, PatchSource::Identity] {
                let r = run_patching(&model, &pairs, src)?;
                println!(
                    "seed {seed} {} set={} {:?}: {}/{} flipped, {} eligible of {}",
                    pattern.op.name(),
                    pattern.set_value,
                    src,
                    r.flips,
                    r.eligible,
                    r.eligible,
                    r.constructed
                );
                reports.push(r);
            }
        }
        write_json(&m.seed_dir(seed).join(ReportBundle::PATCHING), &reports)?;
    }
    Ok(())
}

fn chain(c: &Common) -> theia::Result<()> {
    let (cfg, m) = start("chain", c, &["chain"])?;
    let backbone = match cfg.get("chain.backbone") {
        None => BackboneSpec::TheiaStep,
        Some(toml::Value::String(s)) => BackboneSpec::parse(s).map_err(|e| TheiaError::Config(format!("key `chain.backbone`: {e}")))?,
        Some(v) => return Err(TheiaError::Config(format!("key `chain.backbone`: expected a string, got {v}"))),
    };
    let base = match c.scale {
        Scale::Desk => ChainRunConfig::desk(backbone),
        Scale::Full => ChainRunConfig::full(backbone),
    };
    let rc: ChainRunConfig = cfg.section_except("chain", &base, &["backbone"])?;
    println!("backbone {} ({} parameters)", backbone.name(), backbone.param_count());
    for &seed in &m.seeds {
        let (model, report) = run_chain(&rc, seed)?;
        let dir = m.seed_dir(seed);
        std::fs::create_dir_all(&dir)?;
        model.save(&dir.join("chain.theia"))?;
        write_json(&dir.join(ReportBundle::CHAIN), &report)?;
        for l in &report.lengths {
            println!("seed {seed} L={:<4} {:.2}%", l.length, 100.0 * l.accuracy);
        }
    }
    Ok(())
}

fn report(config: Option<&Path>, out: &Path) -> theia::Result<()> {
    load_config(config, &[])?;
    let b = ReportBundle::collect(out)?;
    b.write(out)?;
    print!("{}", b.to_text());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match &cli.command {
        Command::Gen(c) => gen(c),
        Command::Train(c) => train(c),
        Command::Diagnose { common, source, oracle } => diagnose(common, source, *oracle),
        Command::Probe { common, source } => probe(common, source),
        Command::Patch { common, source } => patch(common, source),
        Command::Chain(c) => chain(c),
        Command::Report { config, out } => report(config.as_deref(), out),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ TheiaError::Config(_)) => {
            eprintln!("usage error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
