//! Independent loop and statistical oracles for the federation arithmetic.

mod common;

use common::normal_vec;
use lindt_core::data::{allocate, generate_task, AllocationScheme, Partition, SizeDistribution, SyntheticTaskSpec};
use lindt_core::fed::{aggregate_dp, aggregate_plain, clip_update, gaussian_noise, sample_active, DpConfig};
use lindt_core::monitor::weight_divergence;
use lindt_core::WeightVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn random_updates(rng: &mut ChaCha8Rng) -> Vec<WeightVector> {
    let k = rng.random_range(1..=8);
    let p = rng.random_range(1..=40);
    let scale = rng.random_range(0.1..10.0);
    (0..k).map(|_| WeightVector::from_flat(normal_vec(rng, p, scale))).collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * x.abs().max(1.0))
}

fn naive_mean(updates: &[Vec<f64>]) -> Vec<f64> {
    let p = updates[0].len();
    let mut out = vec![0.0; p];
    for j in 0..p {
        let mut s = 0.0;
        for u in updates {
            s += u[j];
        }
        out[j] = s / updates.len() as f64;
    }
    out
}

fn naive_clip(d: &[f64], bound: f64) -> Vec<f64> {
    let mut sq = 0.0;
    for x in d {
        sq += x * x;
    }
    let norm = sq.sqrt();
    let factor = if norm > bound { bound / norm } else { 1.0 };
    d.iter().map(|x| x * factor).collect()
}

#[test]
fn plain_average_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let ups = random_updates(&mut rng);
        let raw: Vec<Vec<f64>> = ups.iter().map(|u| u.values().to_vec()).collect();
        assert!(close(aggregate_plain(&ups).unwrap().values(), &naive_mean(&raw), 1e-12));
    }
}

#[test]
fn clipping_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let len = rng.random_range(1..50);
        let d = normal_vec(&mut rng, len, 3.0);
        let bound = rng.random_range(0.01..20.0);
        let clipped = clip_update(&WeightVector::from_flat(d.clone()), bound);
        assert!(close(clipped.values(), &naive_clip(&d, bound), 1e-12));
        assert!(clipped.norm() <= bound * (1.0 + 1e-12));
    }
}

#[test]
fn noiseless_dp_matches_loop_and_plain() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..200 {
        let ups = random_updates(&mut rng);
        let prev = WeightVector::from_flat(normal_vec(&mut rng, ups[0].len(), 1.0));
        let bound = rng.random_range(0.5..30.0);
        let dp = DpConfig { enabled: true, clip_bound: bound, noise_std: 0.0 };
        let (w, noise) = aggregate_dp(&prev, &ups, &dp, &mut rng).unwrap();
        assert_eq!(noise.norm, 0.0);
        let deltas: Vec<Vec<f64>> = ups
            .iter()
            .map(|u| {
                let d: Vec<f64> = u.values().iter().zip(prev.values()).map(|(a, b)| a - b).collect();
                naive_clip(&d, bound)
            })
            .collect();
        let expected: Vec<f64> = naive_mean(&deltas).iter().zip(prev.values()).map(|(d, p)| p + d).collect();
        assert!(close(w.values(), &expected, 1e-12));

        let unclipped = DpConfig { clip_bound: f64::INFINITY, ..dp };
        let (w_inf, _) = aggregate_dp(&prev, &ups, &unclipped, &mut rng).unwrap();
        assert!(close(w_inf.values(), aggregate_plain(&ups).unwrap().values(), 1e-12));
    }
}

#[test]
fn noise_second_moment() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let template = WeightVector::from_flat(vec![0.0; 1732]);
    let sigma = 0.001;
    let draws = 200;
    let mean_sq: f64 =
        (0..draws).map(|_| gaussian_noise(&template, sigma, &mut rng).unwrap().norm.powi(2)).sum::<f64>() / draws as f64;
    let expected = 1732.0 * sigma * sigma;
    assert!((mean_sq / expected - 1.0).abs() < 0.05, "{mean_sq} vs {expected}");
}

#[test]
fn divergence_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..200 {
        let ups = random_updates(&mut rng);
        let agg = aggregate_plain(&ups).unwrap();
        let mut total = 0.0;
        for u in &ups {
            let mut sq = 0.0;
            for (a, b) in u.values().iter().zip(agg.values()) {
                sq += (a - b) * (a - b);
            }
            total += sq.sqrt();
        }
        let oracle = total / ups.len() as f64;
        let got = weight_divergence(&ups, &agg).unwrap();
        assert!((got - oracle).abs() <= 1e-12 * oracle.max(1.0));
    }
}

#[test]
fn sampling_is_uniform_among_honest_clients() {
    let attackers: Vec<bool> = (0..20).map(|i| i % 5 == 0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let rounds = 4000;
    let mut hits = [0usize; 20];
    for _ in 0..rounds {
        let chosen = sample_active(5, 1, &attackers, &mut rng).unwrap();
        assert_eq!(chosen.iter().filter(|&&i| attackers[i]).count(), 1);
        for i in chosen {
            hits[i] += 1;
        }
    }
    let chi2 = |ids: Vec<usize>, expected: f64| -> (f64, f64) {
        let stat = ids.iter().map(|&i| (hits[i] as f64 - expected).powi(2) / expected).sum();
        (stat, (ids.len() - 1) as f64)
    };
    let (honest, df_h) = chi2((0..20).filter(|&i| !attackers[i]).collect(), rounds as f64 * 4.0 / 16.0);
    let (bad, df_b) = chi2((0..20).filter(|&i| attackers[i]).collect(), rounds as f64 / 4.0);
    assert!(ChiSquared::new(df_h).unwrap().sf(honest) > 1e-3, "honest chi2 {honest}");
    assert!(ChiSquared::new(df_b).unwrap().sf(bad) > 1e-3, "attacker chi2 {bad}");
}

#[test]
fn iid_allocation_passes_homogeneity_test() {
    let task = generate_task(&SyntheticTaskSpec { samples: 4000, ..Default::default() }).unwrap();
    let scheme = AllocationScheme { partition: Partition::Iid, sizes: SizeDistribution::LogNormal { sigma: 0.5 } };
    let clients = allocate(&task.data, &scheme, 20, 3).unwrap();
    let total = task.data.class_counts();
    let n = task.data.len() as f64;
    let mut stat = 0.0;
    for c in &clients {
        let counts = c.train.class_counts();
        let test = c.test.class_counts();
        let size = c.size() as f64;
        for y in 0..4 {
            let expected = size * total[y] as f64 / n;
            stat += ((counts[y] + test[y]) as f64 - expected).powi(2) / expected;
        }
    }
    let df = (20 - 1) * (4 - 1);
    assert!(ChiSquared::new(df as f64).unwrap().sf(stat) > 1e-3, "chi2 {stat}");
}

#[test]
fn non_iid_clients_hold_exactly_k_classes() {
    let task = generate_task(&SyntheticTaskSpec::default()).unwrap();
    for k in 1..=4 {
        let scheme = AllocationScheme {
            partition: Partition::NonIid { classes_per_client: k },
            sizes: SizeDistribution::LogNormal { sigma: 1.0 },
        };
        let clients = allocate(&task.data, &scheme, 20, 9).unwrap();
        let total: usize = clients.iter().map(|c| c.size()).sum();
        assert_eq!(total, task.data.len());
        for c in &clients {
            let present = c.histogram.iter().filter(|&&p| p > 0.0).count();
            assert_eq!(present, k);
        }
    }
}
