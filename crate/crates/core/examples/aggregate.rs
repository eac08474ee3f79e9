//! Multi-seed summaries with and without a restarted seed.
use theia::report::{aggregate, AggregateMode, SeedValue, DEFAULT_SEEDS};

fn main() -> theia::Result<()> {
    let values: Vec<SeedValue> = DEFAULT_SEEDS
        .iter()
        .zip([99.90, 99.99, 99.97, 99.99, 99.96])
        .map(|(&seed, value)| SeedValue { seed, value })
        .collect();
    // seed 999 needed a plateau restart
    let restarted = [999];
    for mode in [AggregateMode::AsSpecified, AggregateMode::Strict] {
        let a = aggregate(&values, mode, &restarted, Some(99.0))?;
        println!("{mode:?}: {}  >=99%: {}/{}  excluded {:?}", a.summary(), a.at_threshold, a.used.len(), a.excluded);
    }
    let one = aggregate(&values[..1], AggregateMode::AsSpecified, &[], None)?;
    println!("single seed: {}", one.summary());
    Ok(())
}
