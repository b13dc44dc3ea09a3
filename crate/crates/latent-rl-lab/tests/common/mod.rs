//! Brute-force oracles shared by the integration tests. Everything here is
//! deliberately independent of the library's dynamic-programming paths:
//! trajectory enumeration, policy enumeration, and reversed summation
//! orders.
#![allow(dead_code)]

use latent_rl_lab::mdp::{Policy, StateSpace, TabularMDP};

/// All (probability, state sequence, action sequence) paths of a policy.
pub fn enumerate_paths(m: &TabularMDP, pi: &Policy) -> Vec<(f64, Vec<usize>, Vec<usize>)> {
    let mut done = Vec::new();
    // (prob, states, actions) partial paths, extended layer by layer.
    let mut frontier: Vec<(f64, Vec<usize>, Vec<usize>)> = (0..m.num_states)
        .filter(|&s| m.init[s] > 0.0)
        .map(|s| (m.init[s], vec![s], vec![]))
        .collect();
    for h in 1..=m.horizon {
        let mut next = Vec::new();
        for (p, states, actions) in frontier {
            let s = *states.last().unwrap();
            for a in 0..m.num_actions {
                let pa = pi.action_probs(h, s)[a];
                if pa == 0.0 {
                    continue;
                }
                let mut acts = actions.clone();
                acts.push(a);
                if h == m.horizon {
                    done.push((p * pa, states.clone(), acts));
                } else {
                    for (s2, &pt) in m.trans[h - 1][s][a].iter().enumerate() {
                        if pt > 0.0 {
                            let mut sts = states.clone();
                            sts.push(s2);
                            next.push((p * pa * pt, sts, acts.clone()));
                        }
                    }
                }
            }
        }
        frontier = next;
    }
    done
}

/// Expected return by full path enumeration.
pub fn value_by_enumeration(m: &TabularMDP, pi: &Policy) -> f64 {
    enumerate_paths(m, pi)
        .into_iter()
        .map(|(p, states, actions)| {
            let mut ret = 0.0;
            for h in 1..=m.horizon {
                ret += m.mean_reward(h, states[h - 1], actions[h - 1]);
            }
            p * ret
        })
        .sum()
}

/// State occupancy d[h][s] by full path enumeration.
pub fn occupancy_by_enumeration(m: &TabularMDP, pi: &Policy) -> Vec<Vec<f64>> {
    let mut occ = vec![vec![0.0; m.num_states]; m.horizon];
    for (p, states, _) in enumerate_paths(m, pi) {
        for (h, &s) in states.iter().enumerate() {
            occ[h][s] += p;
        }
    }
    occ
}

/// Every deterministic non-stationary policy (action table per layer/state).
pub fn all_deterministic_policies(m: &TabularMDP) -> Vec<Policy> {
    let cells = m.horizon * m.num_states;
    let total = (m.num_actions as u64).pow(cells as u32);
    let mut out = Vec::with_capacity(total as usize);
    for code in 0..total {
        let mut c = code;
        let mut table = vec![vec![0usize; m.num_states]; m.horizon];
        for layer in table.iter_mut() {
            for cell in layer.iter_mut() {
                *cell = (c % m.num_actions as u64) as usize;
                c /= m.num_actions as u64;
            }
        }
        out.push(Policy::deterministic(StateSpace::Latent, &table, m.num_actions));
    }
    out
}

/// Best expected return over all deterministic policies, by enumeration.
pub fn best_value_by_enumeration(m: &TabularMDP) -> f64 {
    all_deterministic_policies(m)
        .iter()
        .map(|pi| value_by_enumeration(m, pi))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Bellman backup computed with reversed summation order and explicit reward
/// support sums.
pub fn backup_by_reverse_summation(m: &TabularMDP, h: usize, f: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; m.num_actions]; m.num_states];
    for s in (0..m.num_states).rev() {
        for a in (0..m.num_actions).rev() {
            let dist = &m.reward[h - 1][s][a];
            let mut val = 0.0;
            for i in (0..dist.support.len()).rev() {
                val += dist.support[i] * dist.probs[i];
            }
            if h < m.horizon {
                for s2 in (0..m.num_states).rev() {
                    let mut vf = f64::NEG_INFINITY;
                    for &q in f[s2].iter().rev() {
                        vf = vf.max(q);
                    }
                    val += m.trans[h - 1][s][a][s2] * vf;
                }
            }
            out[s][a] = val;
        }
    }
    out
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
