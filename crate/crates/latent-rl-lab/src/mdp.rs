//! Finite-horizon layered MDPs and exact dynamic programming.
//!
//! Layers are 1-based throughout the public API: `init` is the layer-1 state
//! law, `trans[h]` (for h = 1..H-1) is the kernel from layer h to h+1, and
//! `reward[h]` (for h = 1..H) is the per-step reward distribution. Internally
//! both tables are stored 0-based.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{
    is_prob_vec, sample_index, FiniteDistribution, JointDist, PROB_SUM_TOL,
};
use crate::error::LabError;

/// Tolerance for exact-identity tests on derived quantities.
pub const IDENTITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StateSpace {
    Latent,
    Observation,
}

/// A finite-horizon layered MDP with finite-support reward distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMDP {
    #[serde(rename = "H")]
    pub horizon: usize,
    #[serde(rename = "S")]
    pub num_states: usize,
    #[serde(rename = "A")]
    pub num_actions: usize,
    /// Layer-1 state law, dense over states.
    pub init: Vec<f64>,
    /// trans[h-1][s][a] = next-state law for layer h, h = 1..H-1.
    pub trans: Vec<Vec<Vec<Vec<f64>>>>,
    /// reward[h-1][s][a] for h = 1..H.
    pub reward: Vec<Vec<Vec<FiniteDistribution>>>,
}

impl TabularMDP {
    /// Mean reward table r[h][s][a] (1-based layer argument).
    pub fn mean_reward(&self, h: usize, s: usize, a: usize) -> f64 {
        self.reward[h - 1][s][a].mean()
    }

    pub fn trans_row(&self, h: usize, s: usize, a: usize) -> &[f64] {
        &self.trans[h - 1][s][a]
    }

    /// Joint law of (reward, next state) at layer h. The terminal layer uses
    /// a single dummy next state.
    pub fn joint(&self, h: usize, s: usize, a: usize) -> JointDist {
        if h < self.horizon {
            JointDist::product(&self.reward[h - 1][s][a], &self.trans[h - 1][s][a])
        } else {
            JointDist::terminal(&self.reward[h - 1][s][a])
        }
    }
}

/// Outcome of [`validate_mdp`]: either a pass, or the first violated
/// invariant with indices, plus non-fatal warnings.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub first_violation: Option<String>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.first_violation.is_none()
    }
}

/// Check every structural invariant of a [`TabularMDP`].
///
/// The total-reward check verifies that the maximum cumulative reward over
/// reachable trajectories is at most 1, by a max-sum recursion restricted to
/// reachable states.
pub fn validate_mdp(m: &TabularMDP) -> ValidationReport {
    let mut report = ValidationReport::default();
    let fail = |msg: String, report: &mut ValidationReport| {
        if report.first_violation.is_none() {
            report.first_violation = Some(msg);
        }
    };

    if m.horizon == 0 || m.num_states == 0 || m.num_actions == 0 {
        fail("H, S, A must all be positive".into(), &mut report);
        return report;
    }
    if m.init.len() != m.num_states || !is_prob_vec(&m.init, PROB_SUM_TOL) {
        fail("init is not a probability distribution over states".into(), &mut report);
        return report;
    }
    if m.trans.len() != m.horizon.saturating_sub(1) {
        fail(format!("expected {} transition layers, got {}", m.horizon - 1, m.trans.len()), &mut report);
        return report;
    }
    if m.reward.len() != m.horizon {
        fail(format!("expected {} reward layers, got {}", m.horizon, m.reward.len()), &mut report);
        return report;
    }
    for (hi, layer) in m.trans.iter().enumerate() {
        if layer.len() != m.num_states {
            fail(format!("trans layer {} has wrong state count", hi + 1), &mut report);
            return report;
        }
        for (s, row_s) in layer.iter().enumerate() {
            if row_s.len() != m.num_actions {
                fail(format!("trans at (h={},s={}) has wrong action count", hi + 1, s), &mut report);
                return report;
            }
            for (a, row) in row_s.iter().enumerate() {
                if row.len() != m.num_states || !is_prob_vec(row, PROB_SUM_TOL) {
                    fail(
                        format!("transition row at (h={},s={},a={}) is not a distribution", hi + 1, s, a),
                        &mut report,
                    );
                    return report;
                }
            }
        }
    }
    for (hi, layer) in m.reward.iter().enumerate() {
        for (s, row_s) in layer.iter().enumerate() {
            for (a, dist) in row_s.iter().enumerate() {
                if let Err(e) = dist.validate() {
                    fail(format!("reward at (h={},s={},a={}): {}", hi + 1, s, a, e), &mut report);
                    return report;
                }
                if dist.support.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                    fail(
                        format!("reward support outside [0,1] at (h={},s={},a={})", hi + 1, s, a),
                        &mut report,
                    );
                    return report;
                }
            }
        }
    }

    // Max cumulative reward over reachable trajectories must stay within 1.
    let max_total = max_total_reward(m);
    if max_total > 1.0 + 1e-9 {
        report.warnings.push(format!(
            "total reward can reach {max_total:.6}, above 1; downstream risk accounting assumes returns in [0,1]"
        ));
    }
    report
}

/// Maximum of the cumulative reward over trajectories with positive
/// probability, by backward max-sum over reachable states.
fn max_total_reward(m: &TabularMDP) -> f64 {
    let mut reachable = vec![vec![false; m.num_states]; m.horizon];
    for s in 0..m.num_states {
        reachable[0][s] = m.init[s] > 0.0;
    }
    for h in 1..m.horizon {
        for s in 0..m.num_states {
            if !reachable[h - 1][s] {
                continue;
            }
            for a in 0..m.num_actions {
                for (s2, &p) in m.trans[h - 1][s][a].iter().enumerate() {
                    if p > 0.0 {
                        reachable[h][s2] = true;
                    }
                }
            }
        }
    }
    let mut best = vec![0.0f64; m.num_states];
    for h in (1..=m.horizon).rev() {
        let mut cur = vec![f64::NEG_INFINITY; m.num_states];
        for s in 0..m.num_states {
            if !reachable[h - 1][s] {
                continue;
            }
            for a in 0..m.num_actions {
                let r_max = m.reward[h - 1][s][a].max_support();
                let cont = if h == m.horizon {
                    0.0
                } else {
                    let mut c = f64::NEG_INFINITY;
                    for (s2, &p) in m.trans[h - 1][s][a].iter().enumerate() {
                        if p > 0.0 {
                            c = c.max(best[s2]);
                        }
                    }
                    if c.is_finite() {
                        c
                    } else {
                        0.0
                    }
                };
                cur[s] = cur[s].max(r_max + cont);
            }
        }
        best = cur.iter().map(|&v| if v.is_finite() { v } else { 0.0 }).collect();
    }
    (0..m.num_states)
        .filter(|&s| m.init[s] > 0.0)
        .map(|s| best[s])
        .fold(0.0, f64::max)
}

/// A randomized non-stationary policy: a distribution over actions per
/// (layer, state).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub space: StateSpace,
    /// rows[h-1][z][a]
    pub rows: Vec<Vec<Vec<f64>>>,
}

impl Policy {
    pub fn horizon(&self) -> usize {
        self.rows.len()
    }

    pub fn num_states(&self) -> usize {
        self.rows.first().map(|l| l.len()).unwrap_or(0)
    }

    pub fn uniform(space: StateSpace, horizon: usize, states: usize, actions: usize) -> Self {
        let row = vec![1.0 / actions as f64; actions];
        Self { space, rows: vec![vec![row; states]; horizon] }
    }

    /// Deterministic policy from an action table actions[h-1][z].
    pub fn deterministic(space: StateSpace, actions_per: &[Vec<usize>], num_actions: usize) -> Self {
        let rows = actions_per
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|&a| {
                        let mut row = vec![0.0; num_actions];
                        row[a] = 1.0;
                        row
                    })
                    .collect()
            })
            .collect();
        Self { space, rows }
    }

    /// Constant action at every layer and state.
    pub fn constant(space: StateSpace, horizon: usize, states: usize, actions: usize, a: usize) -> Self {
        let table = vec![vec![a; states]; horizon];
        Self::deterministic(space, &table, actions)
    }

    pub fn action_probs(&self, h: usize, z: usize) -> &[f64] {
        &self.rows[h - 1][z]
    }

    pub fn validate(&self, horizon: usize, states: usize, actions: usize) -> Result<(), LabError> {
        if self.rows.len() != horizon {
            return Err(LabError::HorizonMismatch { expected: horizon, got: self.rows.len() });
        }
        for layer in &self.rows {
            if layer.len() != states {
                return Err(LabError::Dimension("policy state count".into()));
            }
            for row in layer {
                if row.len() != actions || !is_prob_vec(row, 1e-9) {
                    return Err(LabError::Invalid("policy row is not a distribution".into()));
                }
            }
        }
        Ok(())
    }
}

/// Q/V tables plus the scalar value of the initial distribution and the
/// greedy policy (ties broken toward the smallest action index).
#[derive(Debug, Clone)]
pub struct ValueTables {
    /// q[h-1][s][a]
    pub q: Vec<Vec<Vec<f64>>>,
    /// v[h-1][s]
    pub v: Vec<Vec<f64>>,
    pub j: f64,
    pub greedy: Policy,
}

/// Per-layer visitation distribution of a policy.
#[derive(Debug, Clone)]
pub struct OccupancyTable {
    /// sa[h-1][s][a]
    pub sa: Vec<Vec<Vec<f64>>>,
    /// s[h-1][s]
    pub s: Vec<Vec<f64>>,
}

/// One episode: per-step (state, action, realized reward), with optional
/// hindsight latent labels filled in by the interaction protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub hindsight: Option<Vec<usize>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

fn greedy_from_q(space: StateSpace, q: &[Vec<Vec<f64>>]) -> Policy {
    let table: Vec<Vec<usize>> = q
        .iter()
        .map(|layer| layer.iter().map(|row| argmax(row)).collect())
        .collect();
    let num_actions = q[0][0].len();
    Policy::deterministic(space, &table, num_actions)
}

/// Index of the maximum entry, smallest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Optimal value computation by backward recursion of the Bellman optimality
/// operator, with Q = 0 beyond the horizon.
pub fn value_iteration(m: &TabularMDP) -> ValueTables {
    let mut q = vec![vec![vec![0.0; m.num_actions]; m.num_states]; m.horizon];
    let mut v = vec![vec![0.0; m.num_states]; m.horizon];
    for h in (1..=m.horizon).rev() {
        for s in 0..m.num_states {
            for a in 0..m.num_actions {
                let mut val = m.mean_reward(h, s, a);
                if h < m.horizon {
                    for (s2, &p) in m.trans[h - 1][s][a].iter().enumerate() {
                        val += p * v[h][s2];
                    }
                }
                q[h - 1][s][a] = val;
            }
            v[h - 1][s] = q[h - 1][s][argmax(&q[h - 1][s])];
        }
    }
    let j = m.init.iter().zip(&v[0]).map(|(&p, &val)| p * val).sum();
    let greedy = greedy_from_q(StateSpace::Latent, &q);
    ValueTables { q, v, j, greedy }
}

/// Exact policy evaluation by backward dynamic programming.
pub fn policy_value(m: &TabularMDP, pi: &Policy) -> Result<ValueTables, LabError> {
    pi.validate(m.horizon, m.num_states, m.num_actions)?;
    let mut q = vec![vec![vec![0.0; m.num_actions]; m.num_states]; m.horizon];
    let mut v = vec![vec![0.0; m.num_states]; m.horizon];
    for h in (1..=m.horizon).rev() {
        for s in 0..m.num_states {
            for a in 0..m.num_actions {
                let mut val = m.mean_reward(h, s, a);
                if h < m.horizon {
                    for (s2, &p) in m.trans[h - 1][s][a].iter().enumerate() {
                        val += p * v[h][s2];
                    }
                }
                q[h - 1][s][a] = val;
            }
            v[h - 1][s] = q[h - 1][s]
                .iter()
                .zip(pi.action_probs(h, s))
                .map(|(&qv, &pa)| qv * pa)
                .sum();
        }
    }
    let j = m.init.iter().zip(&v[0]).map(|(&p, &val)| p * val).sum();
    let greedy = greedy_from_q(pi.space, &q);
    Ok(ValueTables { q, v, j, greedy })
}

/// Exact occupancy measures by forward flow propagation.
pub fn occupancy(m: &TabularMDP, pi: &Policy) -> Result<OccupancyTable, LabError> {
    pi.validate(m.horizon, m.num_states, m.num_actions)?;
    let mut s_occ = vec![vec![0.0; m.num_states]; m.horizon];
    let mut sa_occ = vec![vec![vec![0.0; m.num_actions]; m.num_states]; m.horizon];
    s_occ[0].copy_from_slice(&m.init);
    for h in 1..=m.horizon {
        for s in 0..m.num_states {
            let ds = s_occ[h - 1][s];
            if ds == 0.0 {
                continue;
            }
            for a in 0..m.num_actions {
                sa_occ[h - 1][s][a] = ds * pi.action_probs(h, s)[a];
            }
        }
        if h < m.horizon {
            for s in 0..m.num_states {
                for a in 0..m.num_actions {
                    let dsa = sa_occ[h - 1][s][a];
                    if dsa == 0.0 {
                        continue;
                    }
                    for (s2, &p) in m.trans[h - 1][s][a].iter().enumerate() {
                        s_occ[h][s2] += dsa * p;
                    }
                }
            }
        }
    }
    Ok(OccupancyTable { sa: sa_occ, s: s_occ })
}

/// One application of the Bellman operator at layer `h` to a value table over
/// states x actions (interpreted through its state-value maximum), returning
/// the backed-up table over states x actions.
///
/// `f` is the layer-(h+1) table; at h = H it is ignored and the backup is the
/// mean terminal reward.
pub fn bellman_backup(
    m: &TabularMDP,
    h: usize,
    f: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>, LabError> {
    if h == 0 || h > m.horizon {
        return Err(LabError::LayerOutOfRange { layer: h, max: m.horizon });
    }
    let mut out = vec![vec![0.0; m.num_actions]; m.num_states];
    for s in 0..m.num_states {
        for a in 0..m.num_actions {
            let mut val = m.mean_reward(h, s, a);
            if h < m.horizon {
                for (s2, &p) in m.trans[h - 1][s][a].iter().enumerate() {
                    let vf = f[s2].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    val += p * vf;
                }
            }
            out[s][a] = val;
        }
    }
    Ok(out)
}

/// Bellman backup of a state-value function g over layer-(h+1) states.
pub fn bellman_backup_state(
    m: &TabularMDP,
    h: usize,
    g: &[f64],
) -> Result<Vec<Vec<f64>>, LabError> {
    if h == 0 || h > m.horizon {
        return Err(LabError::LayerOutOfRange { layer: h, max: m.horizon });
    }
    let mut out = vec![vec![0.0; m.num_actions]; m.num_states];
    for s in 0..m.num_states {
        for a in 0..m.num_actions {
            let mut val = m.mean_reward(h, s, a);
            if h < m.horizon {
                for (s2, &p) in m.trans[h - 1][s][a].iter().enumerate() {
                    val += p * g[s2];
                }
            }
            out[s][a] = val;
        }
    }
    Ok(out)
}

/// Sample one episode. Deterministic given the rng state.
pub fn sample_trajectory(m: &TabularMDP, pi: &Policy, rng: &mut (impl Rng + ?Sized)) -> Trajectory {
    let mut states = Vec::with_capacity(m.horizon);
    let mut actions = Vec::with_capacity(m.horizon);
    let mut rewards = Vec::with_capacity(m.horizon);
    let mut s = sample_index(&m.init, rng);
    for h in 1..=m.horizon {
        let a = sample_index(pi.action_probs(h, s), rng);
        let r = m.reward[h - 1][s][a].sample(rng);
        states.push(s);
        actions.push(a);
        rewards.push(r);
        if h < m.horizon {
            s = sample_index(&m.trans[h - 1][s][a], rng);
        }
    }
    Trajectory { states, actions, rewards, hindsight: None }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn degenerate() -> TabularMDP {
        TabularMDP {
            horizon: 1,
            num_states: 1,
            num_actions: 1,
            init: vec![1.0],
            trans: vec![],
            reward: vec![vec![vec![FiniteDistribution::point(1.0)]]],
        }
    }

    #[test]
    fn degenerate_mdp_passes_validation() {
        let r = validate_mdp(&degenerate());
        assert!(r.ok(), "{:?}", r.first_violation);
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn bad_row_reports_indices() {
        let mut m = TabularMDP {
            horizon: 2,
            num_states: 2,
            num_actions: 1,
            init: vec![1.0, 0.0],
            trans: vec![vec![vec![vec![0.5, 0.5]], vec![vec![0.5, 0.4]]]],
            reward: vec![
                vec![vec![FiniteDistribution::point(0.0)]; 2],
                vec![vec![FiniteDistribution::point(0.0)]; 2],
            ],
        };
        let r = validate_mdp(&m);
        assert!(!r.ok());
        assert!(r.first_violation.as_ref().unwrap().contains("s=1"));
        m.trans[0][1][0] = vec![0.9, 0.1];
        assert!(validate_mdp(&m).ok());
    }

    #[test]
    fn excess_total_reward_warns() {
        let m = TabularMDP {
            horizon: 2,
            num_states: 1,
            num_actions: 1,
            init: vec![1.0],
            trans: vec![vec![vec![vec![1.0]]]],
            reward: vec![
                vec![vec![FiniteDistribution::point(1.0)]],
                vec![vec![FiniteDistribution::point(1.0)]],
            ],
        };
        let r = validate_mdp(&m);
        assert!(r.ok());
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn one_state_occupancy_is_one_everywhere() {
        let m = TabularMDP {
            horizon: 3,
            num_states: 1,
            num_actions: 2,
            init: vec![1.0],
            trans: vec![vec![vec![vec![1.0]; 2]]; 2],
            reward: vec![vec![vec![FiniteDistribution::point(0.0); 2]]; 3],
        };
        let pi = Policy::uniform(StateSpace::Latent, 3, 1, 2);
        let occ = occupancy(&m, &pi).unwrap();
        for h in 0..3 {
            assert!((occ.s[h][0] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn backup_of_zero_is_mean_reward() {
        let m = degenerate();
        let f = vec![vec![0.0]];
        let b = bellman_backup(&m, 1, &f).unwrap();
        assert_eq!(b[0][0], 1.0);
        assert!(bellman_backup(&m, 2, &f).is_err());
    }

    #[test]
    fn same_seed_same_trajectory() {
        let m = degenerate();
        let pi = Policy::uniform(StateSpace::Latent, 1, 1, 1);
        let t1 = sample_trajectory(&m, &pi, &mut ChaCha8Rng::seed_from_u64(7));
        let t2 = sample_trajectory(&m, &pi, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(t1, t2);
    }

    #[test]
    fn policy_value_rejects_horizon_mismatch() {
        let m = degenerate();
        let pi = Policy::uniform(StateSpace::Latent, 2, 1, 1);
        assert!(policy_value(&m, &pi).is_err());
    }
}
