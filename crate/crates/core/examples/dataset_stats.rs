//! Label distribution of the default generator.
use theia::taskgen::{dataset_stats, gen_dataset, SampleConfig};

fn main() {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(50_000);
    let seed: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(999);
    let samples = gen_dataset(&SampleConfig::with_seed(seed), 0, n);
    let st = dataset_stats(&samples).expect("non-empty");
    println!("n = {}  seed = {}", st.n, seed);
    println!("labels F/T/U = {:.4} / {:.4} / {:.4}", st.label_frac[0], st.label_frac[1], st.label_frac[2]);
    println!("P(HU=0) = {:.4}", st.p_hu0);
    println!("P(T | not U) = {:.4}", st.p_true_given_nu);
    println!("flag marginals = {:?}", st.flag_marginals);
    println!("U-vs-non-U reference = {:.4}", st.u_oracle_reference);
}
