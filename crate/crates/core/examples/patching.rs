//! Matched-pair activation patching of the Order output for OR and AND.
//! Takes an optional `theia train` run directory like the probe example.
use theia::model::{ModelConfig, TheiaModel};
use theia::patching::*;
use theia::taskgen::DEFAULT_SET_BIT_PROB;
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
    let p = build_pairs(PairPattern::OR, 1, PAIR_DATA_SEED, m.config.num_range, DEFAULT_SET_BIT_PROB)?[0];
    println!("example pair\n  T side {:?}\n  U side {:?}", p.t_side.raw, p.u_side.raw);
    for pat in [PairPattern::OR, PairPattern::AND] {
        let pairs = build_pairs(pat, DEFAULT_PAIRS, PAIR_DATA_SEED, m.config.num_range, DEFAULT_SET_BIT_PROB)?;
        for src in [PatchSource::Counterfactual, PatchSource::Identity] {
            let r = run_patching(&m, &pairs, src)?;
            println!(
                "{} set={} {:<14} baselines T {} U {}  eligible {}/{}  flips {} stay {} fell {}  v_set equal {}",
                pat.op.name(),
                pat.set_value,
                format!("{src:?}"),
                r.t_baseline_correct,
                r.u_baseline_correct,
                r.eligible,
                r.constructed,
                r.flips,
                r.residual,
                r.fell,
                r.byte_equal
            );
        }
    }
    let absorbent = PairPattern {
        set_value: theia::K3::False,
        ..PairPattern::AND
    };
    if let Err(e) = absorbent.check() {
        println!("{e}");
    }
    Ok(())
}
