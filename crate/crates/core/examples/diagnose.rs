//! The 39-rule diagnostic run against two reference classifiers: the
//! ground-truth oracle, and one that always answers Unknown.
use theia::diagnostic::{run_diagnostic, ConstantClassifier, DiagConfig, OracleClassifier, Roster};
use theia::K3;

fn main() -> theia::Result<()> {
    let cfg = DiagConfig::default();
    let oracle = run_diagnostic(&OracleClassifier, Roster::Full39, 2_000, &cfg)?;
    print!("{}", oracle.to_table());

    let u = run_diagnostic(&ConstantClassifier(K3::Unknown), Roster::Targeted12, 2_000, &cfg)?;
    println!("\nconstant U on the 12 targeted rules");
    print!("{}", u.to_table());
    Ok(())
}
