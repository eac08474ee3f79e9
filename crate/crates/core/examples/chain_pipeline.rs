//! All three chain phases on a small flat backbone, then the length sweep.
//! Sizes are tiny so it runs in about a minute; the step will not be exact,
//! which shows how per-step errors compound with length.
use theia::chain::{chain_eval, gen_chains, phase1, phase2, phase3, BackboneSpec, ChainModel, Phase1Config, Phase2Config, Phase3Config, CHAIN_NUM_RANGE};
use theia::taskgen::SampleConfig;

fn main() -> theia::Result<()> {
    let spec = BackboneSpec::Flat { hidden: 64, layers: 3 };
    let mut model = ChainModel::new(spec, 42)?;
    println!("{}: {} backbone parameters", spec.name(), model.backbone_param_count());

    let p1 = Phase1Config {
        train_samples: 20_000,
        test_samples: 4_000,
        batch_size: 256,
        max_epochs: 4,
        max_restarts: 0,
        ..Phase1Config::default()
    };
    match phase1(&mut model, &p1, 42) {
        Ok(o) => println!("phase 1 converged at {:.4}", o.accuracy),
        Err(e) => println!("phase 1 stopped short: {e}"),
    }

    let sc = SampleConfig {
        num_range: CHAIN_NUM_RANGE,
        ..SampleConfig::with_seed(8)
    };
    let chains = gen_chains(&sc, 0, 20_000, 5);
    let audit = phase2(&mut model, &chains, &Phase2Config::default(), 42)?;
    println!("transition audit {}/9", audit.correct);

    if audit.passed() {
        let p3 = Phase3Config {
            epochs: 2,
            ..Phase3Config::default()
        };
        for e in phase3(&mut model, &chains, &p3, 42)? {
            println!("phase 3 epoch {} tau {:.2} loss {:.4}", e.epoch, e.tau, e.loss);
        }
    }

    let table = model.transition_table()?;
    let (lengths, uniformity) = chain_eval(&model, &table, &[1, 5, 10, 50], 200, 9)?;
    for l in lengths {
        println!("L={:<3} {:.1}%", l.length, 100.0 * l.accuracy);
    }
    for u in uniformity {
        println!("depth {:<3} state freq {:.3?}", u.depth, u.freq);
    }
    Ok(())
}
