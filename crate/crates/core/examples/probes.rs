//! Linear probes at the four engine boundaries, next to the closed-form
//! Has-Unknown ceilings and the U-vs-non-U reference.
//!
//! With a directory argument the model comes from a `theia train` run;
//! otherwise a narrow model is trained for a few epochs first.
use theia::model::{Boundary, ModelConfig, TheiaModel};
use theia::probe::*;
use theia::trainer::{make_data, train, RunDir, TrainConfig};
use theia_autodiff::Stream;

fn model() -> theia::Result<TheiaModel> {
    if let Some(dir) = std::env::args().nth(1) {
        return RunDir::open(dir.as_ref())?.load_model();
    }
    let cfg = TrainConfig {
        train_samples: 30_000,
        batch_size: 256,
        max_epochs: 3,
        diag_samples: 200,
        ..TrainConfig::default()
    };
    let mut m = TheiaModel::init(ModelConfig::tiny(32), &mut Stream::new(cfg.seed, 0))?;
    train(&mut m, &make_data(&cfg)?, &cfg, None)?;
    Ok(m)
}

fn main() -> theia::Result<()> {
    let m = model()?;
    let dump = extract_boundaries(&m, 10_000, 999)?;
    println!("U-vs-non-U reference {:.4}", u_oracle_reference(&dump)?);
    println!("{:<10} {:>8} {:>12} {:>8} {:>9}", "boundary", "verdict", "has_unknown", "ceiling", "operator");
    for b in PROBE_BOUNDARIES {
        let acc = |t: Target| -> theia::Result<f64> { Ok(train_linear_probe(&dump, &ProbeSpec::new(b, t, Family::Linear))?.test_accuracy) };
        let ceiling = hu_bayes_ceiling(visible_flags(b).len() as u32, 0.15)?;
        println!(
            "{:<10} {:>8.4} {:>12.4} {:>8.4} {:>9.4}",
            b.name(),
            acc(Target::Verdict)?,
            acc(Target::HasUnknown)?,
            ceiling,
            acc(Target::Operator)?
        );
    }
    let c = centroid_stats(&dump)?;
    if let Some(l) = c.get(Boundary::LogicOut) {
        println!("logic F-T centroid distance {:?}", l.ft_distance);
    }
    Ok(())
}
