//! A short training run of a narrow THEIA, printing the per-epoch record
//! and the 39-rule diagnostic at the end. Pass an output directory to keep
//! the run (config, history, checkpoint) for the probe and patching examples.
use theia::model::ModelConfig;
use theia::trainer::{make_data, run_training, train, TrainConfig};
use theia_autodiff::Stream;

fn main() -> theia::Result<()> {
    let cfg = TrainConfig {
        train_samples: 60_000,
        batch_size: 256,
        max_epochs: 20,
        diag_samples: 1_000,
        ..TrainConfig::default()
    };
    let mc = ModelConfig::tiny(32);
    let outcome = match std::env::args().nth(1) {
        Some(dir) => run_training(dir.as_ref(), &mc, &cfg)?.1,
        None => {
            let mut model = theia::model::TheiaModel::init(mc, &mut Stream::new(cfg.seed, 0))?;
            println!("{} parameters", model.param_count().total);
            train(&mut model, &make_data(&cfg)?, &cfg, None)?
        }
    };
    for r in &outcome.history {
        println!(
            "epoch {:>2}  loss {:.4}  overall {:.4}  F/T/U {:.3}/{:.3}/{:.3}  worst rule {:.4}",
            r.epoch, r.train_loss, r.overall, r.per_class[0], r.per_class[1], r.per_class[2], r.min_rule()
        );
    }
    if let Some(d) = &outcome.final_diagnostic {
        print!("{}", d.to_table());
    }
    Ok(())
}
