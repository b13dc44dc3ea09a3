//! Optimistic value iteration on an empirical tabular model.
//!
//! Returns in every supported environment are bounded by 1, so optimistic
//! values are capped at 1. Unvisited cells are initialized optimistically in
//! two tiers: a never-seen state is worth the full cap, while an untried
//! action at a seen state falls back on the state's observed reward average
//! plus either a mid-range continuation allowance (inner layers) or the
//! count-based bonus (terminal layer). The tiers make a single visit to a
//! terminal cell informative for the whole state without giving untried
//! actions unbounded credit.

use rand::RngCore;

use crate::mdp::{argmax, sample_trajectory, Policy, StateSpace, TabularMDP, Trajectory};

use super::BaseAlgorithm;

const VALUE_CAP: f64 = 1.0;
const UNTRIED_CONTINUATION: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct Ucbvi {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    bonus_scale: f64,
    episodes_seen: usize,
    /// n[h-1][s][a]
    counts: Vec<Vec<Vec<u64>>>,
    /// next[h-1][s][a][s']
    next_counts: Vec<Vec<Vec<Vec<u64>>>>,
    /// reward_sums[h-1][s][a]
    reward_sums: Vec<Vec<Vec<f64>>>,
    last_q: Option<Vec<Vec<Vec<f64>>>>,
}

/// Construct the optimistic tabular base learner.
pub fn ucbvi_base(num_states: usize, num_actions: usize, horizon: usize, bonus_scale: f64) -> Ucbvi {
    Ucbvi {
        num_states,
        num_actions,
        horizon,
        bonus_scale,
        episodes_seen: 0,
        counts: vec![vec![vec![0; num_actions]; num_states]; horizon],
        next_counts: vec![vec![vec![vec![0; num_states]; num_actions]; num_states]; horizon],
        reward_sums: vec![vec![vec![0.0; num_actions]; num_states]; horizon],
        last_q: None,
    }
}

impl Ucbvi {
    fn optimistic_q(&self) -> Vec<Vec<Vec<f64>>> {
        let iota = ((self.num_states * self.num_actions * self.horizon) as f64
            * (self.episodes_seen.max(2)) as f64)
            .ln();
        let mut q = vec![vec![vec![0.0; self.num_actions]; self.num_states]; self.horizon];
        let mut v = vec![vec![0.0; self.num_states]; self.horizon + 1];
        for h in (1..=self.horizon).rev() {
            for s in 0..self.num_states {
                let state_visits: u64 = self.counts[h - 1][s].iter().sum();
                let state_reward_sum: f64 = self.reward_sums[h - 1][s].iter().sum();
                let state_mean_reward = if state_visits > 0 {
                    state_reward_sum / state_visits as f64
                } else {
                    0.0
                };
                for a in 0..self.num_actions {
                    let n = self.counts[h - 1][s][a];
                    let val = if state_visits == 0 {
                        VALUE_CAP
                    } else if n == 0 {
                        if h < self.horizon {
                            state_mean_reward + UNTRIED_CONTINUATION
                        } else {
                            state_mean_reward + self.bonus_scale * iota.sqrt()
                        }
                    } else {
                        let mean_r = self.reward_sums[h - 1][s][a] / n as f64;
                        let bonus = self.bonus_scale * (iota / n as f64).sqrt();
                        let mut cont = 0.0;
                        if h < self.horizon {
                            for (s2, &c) in self.next_counts[h - 1][s][a].iter().enumerate() {
                                if c > 0 {
                                    cont += (c as f64 / n as f64) * v[h][s2];
                                }
                            }
                        }
                        mean_r + bonus + cont
                    };
                    q[h - 1][s][a] = val.clamp(0.0, VALUE_CAP);
                }
                v[h - 1][s] = q[h - 1][s][argmax(&q[h - 1][s])];
            }
        }
        q
    }

    fn greedy(&self, q: &[Vec<Vec<f64>>]) -> Policy {
        let table: Vec<Vec<usize>> = q
            .iter()
            .map(|layer| layer.iter().map(|row| argmax(row)).collect())
            .collect();
        Policy::deterministic(StateSpace::Latent, &table, self.num_actions)
    }
}

impl BaseAlgorithm for Ucbvi {
    fn next_policy(&mut self, _rng: &mut dyn RngCore) -> Policy {
        let q = self.optimistic_q();
        let pi = self.greedy(&q);
        self.last_q = Some(q);
        pi
    }

    fn observe(&mut self, tau: &Trajectory) {
        assert_eq!(tau.len(), self.horizon, "trajectory horizon mismatch");
        self.episodes_seen += 1;
        for h in 1..=self.horizon {
            let (s, a, r) = (tau.states[h - 1], tau.actions[h - 1], tau.rewards[h - 1]);
            self.counts[h - 1][s][a] += 1;
            self.reward_sums[h - 1][s][a] += r;
            if h < self.horizon {
                self.next_counts[h - 1][s][a][tau.states[h]] += 1;
            }
        }
    }

    fn final_policy(&self) -> Policy {
        match &self.last_q {
            Some(q) => self.greedy(q),
            None => Policy::uniform(
                StateSpace::Latent,
                self.horizon,
                self.num_states,
                self.num_actions,
            ),
        }
    }
}

/// Run the learner standalone on a known MDP for `episodes` episodes and
/// return the exact risk of its final policy.
pub fn standalone_final_risk(
    m: &TabularMDP,
    bonus_scale: f64,
    episodes: usize,
    rng: &mut dyn RngCore,
) -> f64 {
    let mut alg = ucbvi_base(m.num_states, m.num_actions, m.horizon, bonus_scale);
    for _ in 0..episodes {
        let pi = alg.next_policy(rng);
        let tau = sample_trajectory(m, &pi, rng);
        alg.observe(&tau);
    }
    let j_star = crate::mdp::value_iteration(m).j;
    let j = crate::mdp::policy_value(m, &alg.final_policy())
        .expect("final policy matches the MDP")
        .j;
    j_star - j
}
