//! Parameter counts of the chain backbones and the residual-MLP width solver.
use theia::chain::{resmlp_count, resmlp_solve_d, transition_param_count, BackboneSpec, RESMLP_BUDGET};

fn main() -> theia::Result<()> {
    println!("transition net: {} parameters", transition_param_count());
    for spec in [BackboneSpec::TheiaStep, BackboneSpec::FLAT_SMALL, BackboneSpec::FLAT_LARGE] {
        println!("{:<22} {:>10}", spec.name(), spec.param_count());
    }
    println!("\nresmlp widths for a {RESMLP_BUDGET} budget (±1.5%)");
    for (blocks, expansion) in [(4, 4), (4, 2), (8, 2), (8, 4)] {
        let d = resmlp_solve_d(blocks, expansion, RESMLP_BUDGET)?;
        let c = resmlp_count(blocks, expansion, d);
        println!(
            "{blocks}b x{expansion}  d={d:<4} {c:>10}  {:+.2}%",
            100.0 * (c as f64 / RESMLP_BUDGET as f64 - 1.0)
        );
    }
    Ok(())
}
