//! Probe protocol controls on synthetic data and small models.

use theia::model::{Boundary, ModelConfig, TheiaModel};
use theia::probe::*;
use theia::taskgen::u_oracle_from_verdicts;
use theia::K3;
use theia_autodiff::Stream;

fn cloud(n: usize, separable: bool, seed: u64) -> Design {
    let mut rng = Stream::new(seed, 0);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let label = i % 2;
        let shift = if separable { 4.0 * label as f64 - 2.0 } else { 0.0 };
        x.push(shift + 0.3 * rng.normal());
        for _ in 0..4 {
            x.push(rng.normal());
        }
        y.push(label);
    }
    Design::new(x, 5, y, 2).unwrap()
}

fn quick_mlp() -> MlpProbeConfig {
    MlpProbeConfig {
        hidden: 32,
        epochs: 15,
        batch_size: 128,
        ..MlpProbeConfig::default()
    }
}

#[test]
fn separable_cloud_is_solved() {
    let d = cloud(1_000, true, 1);
    let split = Split::new(d.len(), SplitScheme::default());
    assert_eq!(linear_probe(&d, &split, &SVM_C_GRID).unwrap().test_accuracy, 1.0);
    assert_eq!(mlp_probe(&d, &split, &quick_mlp()).unwrap().test_accuracy, 1.0);
}

#[test]
fn shuffled_labels_fall_to_the_majority_rate() {
    let mut d = cloud(3_000, true, 2);
    // Unbalanced labels, then shuffled against the features.
    for (i, y) in d.y.iter_mut().enumerate() {
        *y = (i % 10 < 7) as usize;
    }
    let perm = Stream::new(9, 0).permutation(d.len());
    d.y = perm.iter().map(|&i| d.y[i]).collect();
    let split = Split::new(d.len(), SplitScheme::default());
    let lin = linear_probe(&d, &split, &SVM_C_GRID).unwrap();
    assert!((lin.test_accuracy - lin.test_majority).abs() <= 0.02, "{lin:?}");
    let mlp = mlp_probe(&d, &split, &quick_mlp()).unwrap();
    assert!((mlp.test_accuracy - mlp.test_majority).abs() <= 0.02, "{mlp:?}");
}

#[test]
fn single_class_is_flagged_degenerate() {
    let mut d = cloud(200, true, 3);
    d.y.iter_mut().for_each(|y| *y = 1);
    let split = Split::new(d.len(), SplitScheme::default());
    let out = linear_probe(&d, &split, &SVM_C_GRID).unwrap();
    assert!(out.degenerate);
    assert_eq!(out.selected, Selected::Degenerate);
}

#[test]
fn val_best_never_beats_test_best() {
    let d = cloud(1_500, false, 4);
    let split = Split::new(d.len(), SplitScheme::default());
    let lin = linear_probe(&d, &split, &SVM_C_GRID).unwrap();
    assert!(lin.test_accuracy <= lin.test_best_accuracy + 0.005);
    let mlp = mlp_probe(&d, &split, &quick_mlp()).unwrap();
    assert!(mlp.test_accuracy <= mlp.test_best_accuracy + 0.005);
}

#[test]
fn r2_extremes() {
    let n = 500;
    let c: Vec<f64> = (0..n).map(|i| (i % 21) as f64).collect();
    let split = Split::new(n, SplitScheme::default());
    let r2 = ols_r2(&c, 1, &c, &split.train, &split.test).unwrap();
    assert!((r2 - 1.0).abs() < 1e-9, "{r2}");
    let flat = vec![0.7; n * 3];
    let r2 = ols_r2(&flat, 3, &c, &split.train, &split.test).unwrap();
    assert!(r2.abs() < 1e-2, "{r2}");
}

#[test]
fn ceilings() {
    let at = |k| hu_bayes_ceiling(k, 0.15).unwrap();
    assert!((at(2) - 0.7995).abs() < 5e-5);
    assert!((at(3) - 0.9079).abs() < 5e-5);
    assert_eq!(at(4), 1.0);
    assert!(hu_bayes_ceiling(2, 0.5).is_err());
    assert!(hu_bayes_ceiling(5, 0.15).is_err());
}

#[test]
fn u_oracle_degenerate_cases() {
    assert_eq!(u_oracle_from_verdicts(&[K3::Unknown; 10]), 1.0);
    let v = [K3::True, K3::True, K3::False, K3::True];
    assert_eq!(u_oracle_from_verdicts(&v), 0.75);
}

fn tiny_dump(n: usize) -> BoundaryDump {
    let m = TheiaModel::init(ModelConfig::tiny(8), &mut Stream::new(5, 0)).unwrap();
    extract_boundaries(&m, n, 999).unwrap()
}

#[test]
fn dumps_are_deterministic_and_round_trip() {
    let a = tiny_dump(300);
    let b = tiny_dump(300);
    assert_eq!(a.encode(), b.encode());
    let back = BoundaryDump::decode(&a.encode()).unwrap();
    assert_eq!(back, a);
    assert_eq!(back.encode(), a.encode());
    let mut bytes = a.encode();
    bytes.push(0);
    assert!(BoundaryDump::decode(&bytes).is_err());
}

#[test]
fn probe_runs_are_deterministic() {
    let d = tiny_dump(400);
    let spec = ProbeSpec::new(Boundary::VSet, Target::Verdict, Family::Linear);
    assert_eq!(train_linear_probe(&d, &spec).unwrap(), train_linear_probe(&d, &spec).unwrap());
}

#[test]
fn duplicated_points_keep_their_centroids() {
    let d = tiny_dump(300);
    let rows: Vec<usize> = (0..d.len()).flat_map(|i| [i, i]).collect();
    let (a, b) = (centroid_stats(&d).unwrap(), centroid_stats(&d.select(&rows)).unwrap());
    for (x, y) in a.boundaries.iter().zip(&b.boundaries) {
        for k in 0..3 {
            match (&x.centroids[k], &y.centroids[k]) {
                (Some(u), Some(v)) => assert!(u.iter().zip(v).all(|(p, q)| (p - q).abs() < 1e-12)),
                (None, None) => {}
                _ => panic!("class presence changed"),
            }
        }
        assert!((x.ft_distance.unwrap() - y.ft_distance.unwrap()).abs() < 1e-12);
    }
}

#[test]
fn bootstrap_matches_the_exact_resampling_distribution() {
    let v = [1.0, 2.0, 3.0, 4.0, 5.0];
    // All 5^5 equally likely resamples.
    let mut means: Vec<f64> = (0..3125usize)
        .map(|mut code| {
            let mut s = 0.0;
            for _ in 0..5 {
                s += v[code % 5];
                code /= 5;
            }
            s / 5.0
        })
        .collect();
    means.sort_by(|a, b| a.total_cmp(b));
    let exact = (means[(0.025 * 3124.0) as usize], means[(0.975 * 3124.0f64).ceil() as usize]);
    let (lo, hi) = bootstrap_ci(&v, 1000, 0.95, &mut Stream::new(7, 0)).unwrap();
    assert!(lo < 3.0 && hi > 3.0);
    assert!((lo - exact.0).abs() <= 0.2 && (hi - exact.1).abs() <= 0.2, "({lo}, {hi}) vs {exact:?}");
    let (lo99, hi99) = bootstrap_ci(&v, 1000, 0.99, &mut Stream::new(7, 0)).unwrap();
    assert!(lo99 <= lo && hi <= hi99);
    assert_eq!(bootstrap_ci(&[2.5; 6], 100, 0.95, &mut Stream::new(0, 0)).unwrap(), (2.5, 2.5));
    assert!(bootstrap_ci(&[1.0], 100, 0.95, &mut Stream::new(0, 0)).is_err());
}
