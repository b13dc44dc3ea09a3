//! Core dynamic-programming machinery checked against enumeration,
//! Monte-Carlo, and independent-summation oracles.

mod common;

use common::*;
use latent_rl_lab::dist::{hellinger_sq, FiniteDistribution};
use latent_rl_lab::envs::make_tree_env;
use latent_rl_lab::mdp::{
    bellman_backup, occupancy, policy_value, sample_trajectory, validate_mdp, value_iteration,
    Policy, StateSpace,
};
use latent_rl_lab::oracle::{random_mdp, random_policy};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn value_iteration_matches_policy_enumeration() {
    for seed in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let m = random_mdp(3, 2, 3, &mut rng);
        let vt = value_iteration(&m);
        let best = best_value_by_enumeration(&m);
        assert!(
            (vt.j - best).abs() < 1e-10,
            "seed {seed}: dp {} vs enumeration {}",
            vt.j,
            best
        );
        // The greedy policy attains the optimum.
        let j_greedy = policy_value(&m, &vt.greedy).unwrap().j;
        assert!((j_greedy - vt.j).abs() < 1e-10);
    }
}

#[test]
fn policy_value_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = random_mdp(4, 2, 3, &mut rng);
    let pi = random_policy(4, 2, 3, &mut rng);
    let exact = policy_value(&m, &pi).unwrap().j;
    let n = 100_000usize;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n {
        let r = sample_trajectory(&m, &pi, &mut rng).total_reward();
        sum += r;
        sum_sq += r * r;
    }
    let mc = sum / n as f64;
    let var = (sum_sq / n as f64 - mc * mc).max(1e-12);
    let sigma = (var / n as f64).sqrt();
    assert!(
        (mc - exact).abs() <= 3.0 * sigma,
        "exact {exact} vs mc {mc} (3 sigma = {})",
        3.0 * sigma
    );
}

#[test]
fn occupancy_matches_path_enumeration() {
    for seed in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let m = random_mdp(4, 2, 3, &mut rng);
        let pi = random_policy(4, 2, 3, &mut rng);
        let occ = occupancy(&m, &pi).unwrap();
        let oracle = occupancy_by_enumeration(&m, &pi);
        for h in 0..3 {
            for s in 0..4 {
                assert!(
                    (occ.s[h][s] - oracle[h][s]).abs() < 1e-12,
                    "seed {seed} (h={h}, s={s})"
                );
            }
            let total: f64 = occ.sa[h].iter().flatten().sum();
            assert!((total - 1.0).abs() < 1e-10);
        }
    }
}

#[test]
fn sampled_occupancy_matches_exact_within_three_sigma() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let m = random_mdp(3, 2, 3, &mut rng);
    let pi = random_policy(3, 2, 3, &mut rng);
    let exact = occupancy(&m, &pi).unwrap();
    let n = 100_000usize;
    let mut counts = vec![vec![0u32; 3]; 3];
    for _ in 0..n {
        let tau = sample_trajectory(&m, &pi, &mut rng);
        for (h, &s) in tau.states.iter().enumerate() {
            counts[h][s] += 1;
        }
    }
    for h in 0..3 {
        for s in 0..3 {
            let p = exact.s[h][s];
            let hat = counts[h][s] as f64 / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt().max(1e-9);
            assert!(
                (hat - p).abs() <= 3.0 * sigma + 1e-9,
                "(h={h},s={s}): exact {p} sampled {hat}"
            );
        }
    }
}

#[test]
fn backup_matches_reverse_summation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let m = random_mdp(5, 3, 4, &mut rng);
    let f: Vec<Vec<f64>> = (0..5)
        .map(|_| (0..3).map(|_| rng.random::<f64>()).collect())
        .collect();
    for h in 1..=4 {
        let a = bellman_backup(&m, h, &f).unwrap();
        let b = backup_by_reverse_summation(&m, h, &f);
        for s in 0..5 {
            for ai in 0..3 {
                assert!((a[s][ai] - b[s][ai]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn terminal_backup_is_mean_terminal_reward() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let m = random_mdp(3, 2, 2, &mut rng);
    let f = vec![vec![5.0; 2]; 3]; // ignored at the terminal layer
    let b = bellman_backup(&m, 2, &f).unwrap();
    for s in 0..3 {
        for a in 0..2 {
            assert!((b[s][a] - m.mean_reward(2, s, a)).abs() < 1e-15);
        }
    }
}

#[test]
fn deterministic_dynamics_and_policy_give_one_trajectory() {
    let b = make_tree_env(4).unwrap();
    // Pin the start by conditioning: a deterministic policy on deterministic
    // dynamics can only vary through the initial draw, so fix it by running
    // until the same root appears and compare the suffix.
    let pi = value_iteration(&b.base).greedy;
    let mut seen: std::collections::HashMap<usize, (Vec<usize>, Vec<usize>)> = Default::default();
    for seed in 0..40u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tau = sample_trajectory(&b.base, &pi, &mut rng);
        let key = tau.states[0];
        let entry = (tau.states.clone(), tau.actions.clone());
        if let Some(prev) = seen.get(&key) {
            assert_eq!(prev, &entry, "same start must give the same trajectory");
        } else {
            seen.insert(key, entry);
        }
    }
    assert!(seen.len() > 1, "several roots should have been drawn");
}

#[test]
fn hellinger_root_satisfies_triangle_inequality() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    for _ in 0..20 {
        let grid: Vec<f64> = vec![0.0, 0.25, 0.5, 1.0];
        let draw = |rng: &mut ChaCha8Rng| {
            let mut probs: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
            let t: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= t);
            FiniteDistribution::new(grid.clone(), probs).unwrap()
        };
        let (p, q, r) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
        let d = |a: &FiniteDistribution, b: &FiniteDistribution| hellinger_sq(a, b).sqrt();
        assert!(d(&p, &r) <= d(&p, &q) + d(&q, &r) + 1e-10);
        assert!((hellinger_sq(&p, &q) - hellinger_sq(&q, &p)).abs() < 1e-15);
    }
}

#[test]
fn tree_occupancy_examples() {
    let b = make_tree_env(4).unwrap();
    let uniform = Policy::uniform(StateSpace::Latent, 3, 28, 2);
    let occ = occupancy(&b.base, &uniform).unwrap();
    // Roots are states i * 7 at layer 1, each hit with probability 1/4.
    for i in 0..4 {
        assert!((occ.s[0][i * 7] - 0.25).abs() < 1e-15);
    }
    let left = Policy::constant(StateSpace::Latent, 3, 28, 2, 0);
    let occ_left = occupancy(&b.base, &left).unwrap();
    // Always-left lands on each tree's left child (offset 1) at layer 2.
    for i in 0..4 {
        assert!((occ_left.s[1][i * 7 + 1] - 0.25).abs() < 1e-15);
    }
}

#[test]
fn generated_tree_env_validates() {
    let b = make_tree_env(4).unwrap();
    let report = validate_mdp(&b.base);
    assert!(report.ok(), "{:?}", report.first_violation);
    assert!(report.warnings.is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hellinger_sq_is_symmetric_and_bounded(
        raw_p in proptest::collection::vec(0.01f64..1.0, 4),
        raw_q in proptest::collection::vec(0.01f64..1.0, 4),
    ) {
        let grid = vec![0.0, 0.5, 0.75, 1.0];
        let norm = |mut v: Vec<f64>| {
            let t: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= t);
            v
        };
        let p = FiniteDistribution::new(grid.clone(), norm(raw_p)).unwrap();
        let q = FiniteDistribution::new(grid, norm(raw_q)).unwrap();
        let d = hellinger_sq(&p, &q);
        prop_assert!((0.0..=2.0 + 1e-12).contains(&d));
        prop_assert!((d - hellinger_sq(&q, &p)).abs() < 1e-12);
        prop_assert!(hellinger_sq(&p, &p) < 1e-15);
    }

    #[test]
    fn occupancy_layers_always_normalize(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = rng.random_range(2..=5usize);
        let a = rng.random_range(1..=3usize);
        let h = rng.random_range(1..=4usize);
        let m = random_mdp(s, a, h, &mut rng);
        let pi = random_policy(s, a, h, &mut rng);
        let occ = occupancy(&m, &pi).unwrap();
        for layer in &occ.sa {
            let total: f64 = layer.iter().flatten().sum();
            prop_assert!((total - 1.0).abs() < 1e-10);
        }
    }
}
