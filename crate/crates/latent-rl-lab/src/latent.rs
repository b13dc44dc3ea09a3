//! Decodable emission processes and composition of a base MDP with an
//! emission into an observation-space MDP.

use serde::{Deserialize, Serialize};

use crate::dist::is_prob_vec;
use crate::error::LabError;
use crate::mdp::{StateSpace, TabularMDP, Trajectory};

/// A sparse distribution over observation indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexedDist {
    pub support: Vec<usize>,
    pub probs: Vec<f64>,
}

impl IndexedDist {
    pub fn point(x: usize) -> Self {
        Self { support: vec![x], probs: vec![1.0] }
    }

    pub fn prob_of(&self, x: usize) -> f64 {
        self.support
            .iter()
            .position(|&v| v == x)
            .map(|i| self.probs[i])
            .unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<(), LabError> {
        if self.support.len() != self.probs.len() || self.support.is_empty() {
            return Err(LabError::Invalid("emission row shape".into()));
        }
        if !is_prob_vec(&self.probs, 1e-12) {
            return Err(LabError::Invalid("emission row is not a distribution".into()));
        }
        let mut sorted = self.support.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.support.len() {
            return Err(LabError::Invalid("duplicate observation in emission row".into()));
        }
        Ok(())
    }
}

/// Per-layer stochastic map from latent states to observation distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionProcess {
    /// rows[h-1][s]
    pub rows: Vec<Vec<IndexedDist>>,
    pub num_obs: usize,
}

impl EmissionProcess {
    pub fn horizon(&self) -> usize {
        self.rows.len()
    }

    pub fn num_latent(&self) -> usize {
        self.rows.first().map(|l| l.len()).unwrap_or(0)
    }

    /// Layer-independent emission replicated across all layers.
    pub fn from_shared(row: Vec<IndexedDist>, horizon: usize, num_obs: usize) -> Self {
        Self { rows: vec![row; horizon], num_obs }
    }

    pub fn prob(&self, h: usize, s: usize, x: usize) -> f64 {
        self.rows[h - 1][s].prob_of(x)
    }
}

/// Outcome of the decodability check.
#[derive(Debug, Clone)]
pub struct DecodabilityReport {
    /// First (h, s, s', x) with overlapping supports, if any.
    pub violation: Option<(usize, usize, usize, usize)>,
}

impl DecodabilityReport {
    pub fn decodable(&self) -> bool {
        self.violation.is_none()
    }
}

/// True iff the supports of distinct latent states are disjoint at every
/// layer.
pub fn check_decodable(psi: &EmissionProcess) -> DecodabilityReport {
    for (hi, layer) in psi.rows.iter().enumerate() {
        for s in 0..layer.len() {
            for s2 in (s + 1)..layer.len() {
                for &x in &layer[s].support {
                    if layer[s2].support.contains(&x)
                        && layer[s].prob_of(x) > 0.0
                        && layer[s2].prob_of(x) > 0.0
                    {
                        return DecodabilityReport { violation: Some((hi + 1, s, s2, x)) };
                    }
                }
            }
        }
    }
    DecodabilityReport { violation: None }
}

/// A total per-layer labeling of observations by latent states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    /// map[h-1][x] = latent label
    pub map: Vec<Vec<usize>>,
}

impl Decoder {
    pub fn horizon(&self) -> usize {
        self.map.len()
    }

    pub fn num_obs(&self) -> usize {
        self.map.first().map(|l| l.len()).unwrap_or(0)
    }

    pub fn label(&self, h: usize, x: usize) -> usize {
        self.map[h - 1][x]
    }

    pub fn identity(horizon: usize, n: usize) -> Self {
        Self { map: vec![(0..n).collect(); horizon] }
    }

    pub fn constant(horizon: usize, num_obs: usize, s: usize) -> Self {
        Self { map: vec![vec![s; num_obs]; horizon] }
    }
}

/// An ordered finite family of decoders sharing (H, X, S).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderClass {
    pub decoders: Vec<Decoder>,
}

impl DecoderClass {
    pub fn len(&self) -> usize {
        self.decoders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decoders.is_empty()
    }

    pub fn validate(&self) -> Result<Vec<String>, LabError> {
        if self.decoders.is_empty() {
            return Err(LabError::EmptyClass("decoder class".into()));
        }
        let h = self.decoders[0].horizon();
        let x = self.decoders[0].num_obs();
        for d in &self.decoders {
            if d.horizon() != h || d.num_obs() != x {
                return Err(LabError::Dimension("decoder shapes differ".into()));
            }
        }
        let mut flags = Vec::new();
        for i in 0..self.decoders.len() {
            for j in (i + 1)..self.decoders.len() {
                if self.decoders[i] == self.decoders[j] {
                    flags.push(format!("decoders {i} and {j} are duplicates"));
                }
            }
        }
        Ok(flags)
    }
}

/// Inversion of a decodable emission into its exact decoder.
///
/// Observations outside every support are unreachable; they are mapped to
/// state 0 for totality and reported.
pub fn invert_emission(psi: &EmissionProcess) -> Result<(Decoder, Vec<(usize, usize)>), LabError> {
    let report = check_decodable(psi);
    if let Some((h, s, s2, x)) = report.violation {
        return Err(LabError::NotDecodable(format!(
            "states {s} and {s2} share observation {x} at layer {h}"
        )));
    }
    let mut uncovered = Vec::new();
    let mut map = Vec::with_capacity(psi.horizon());
    for (hi, layer) in psi.rows.iter().enumerate() {
        let mut row = vec![usize::MAX; psi.num_obs];
        for (s, dist) in layer.iter().enumerate() {
            for (&x, &p) in dist.support.iter().zip(&dist.probs) {
                if p > 0.0 {
                    row[x] = s;
                }
            }
        }
        for (x, label) in row.iter_mut().enumerate() {
            if *label == usize::MAX {
                *label = 0;
                uncovered.push((hi + 1, x));
            }
        }
        map.push(row);
    }
    Ok((Decoder { map }, uncovered))
}

/// A base MDP together with a decodable emission and the materialized
/// observation-space MDP it induces.
#[derive(Debug, Clone)]
pub struct LatentDynamicsMDP {
    pub base: TabularMDP,
    pub emission: EmissionProcess,
    pub obs: TabularMDP,
    pub true_decoder: Decoder,
}

/// Compose a base MDP with a decodable emission, materializing the
/// observation-space MDP.
pub fn compose(base: &TabularMDP, psi: &EmissionProcess) -> Result<LatentDynamicsMDP, LabError> {
    if psi.horizon() != base.horizon {
        return Err(LabError::HorizonMismatch { expected: base.horizon, got: psi.horizon() });
    }
    if psi.num_latent() != base.num_states {
        return Err(LabError::Dimension(format!(
            "emission covers {} latent states, base has {}",
            psi.num_latent(),
            base.num_states
        )));
    }
    let (phi_star, _) = invert_emission(psi)?;
    let x_n = psi.num_obs;
    let h_n = base.horizon;
    let a_n = base.num_actions;

    let mut init = vec![0.0; x_n];
    for (x, v) in init.iter_mut().enumerate() {
        let s = phi_star.label(1, x);
        *v = base.init[s] * psi.prob(1, s, x);
    }

    let mut trans = Vec::with_capacity(h_n.saturating_sub(1));
    for h in 1..h_n {
        let mut layer = vec![vec![vec![0.0; x_n]; a_n]; x_n];
        for (x, row_x) in layer.iter_mut().enumerate() {
            let s = phi_star.label(h, x);
            for (a, row) in row_x.iter_mut().enumerate() {
                for (x2, v) in row.iter_mut().enumerate() {
                    let s2 = phi_star.label(h + 1, x2);
                    *v = base.trans[h - 1][s][a][s2] * psi.prob(h + 1, s2, x2);
                }
            }
        }
        trans.push(layer);
    }

    let mut reward = Vec::with_capacity(h_n);
    for h in 1..=h_n {
        let layer = (0..x_n)
            .map(|x| {
                let s = phi_star.label(h, x);
                base.reward[h - 1][s].clone()
            })
            .collect();
        reward.push(layer);
    }

    let obs = TabularMDP {
        horizon: h_n,
        num_states: x_n,
        num_actions: a_n,
        init,
        trans,
        reward,
    };
    Ok(LatentDynamicsMDP {
        base: base.clone(),
        emission: psi.clone(),
        obs,
        true_decoder: phi_star,
    })
}

/// Compose a latent policy with a decoder: act on observation x as the latent
/// policy would act on its label.
pub fn compose_policy(pi_lat: &crate::mdp::Policy, phi: &Decoder) -> crate::mdp::Policy {
    assert_eq!(pi_lat.horizon(), phi.horizon(), "policy/decoder horizons differ");
    let rows = phi
        .map
        .iter()
        .enumerate()
        .map(|(hi, layer)| {
            layer
                .iter()
                .map(|&s| pi_lat.rows[hi][s].clone())
                .collect()
        })
        .collect();
    crate::mdp::Policy { space: StateSpace::Observation, rows }
}

/// Relabel an observation trajectory through a decoder, dropping hindsight
/// annotations.
pub fn compress_trajectory(tau: &Trajectory, phi: &Decoder) -> Trajectory {
    assert_eq!(tau.len(), phi.horizon(), "trajectory/decoder horizons differ");
    Trajectory {
        states: tau
            .states
            .iter()
            .enumerate()
            .map(|(hi, &x)| phi.map[hi][x])
            .collect(),
        actions: tau.actions.clone(),
        rewards: tau.rewards.clone(),
        hindsight: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::FiniteDistribution;
    use crate::mdp::{policy_value, value_iteration, Policy};

    fn two_state_base() -> TabularMDP {
        TabularMDP {
            horizon: 2,
            num_states: 2,
            num_actions: 2,
            init: vec![0.5, 0.5],
            trans: vec![vec![
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                vec![vec![0.25, 0.75], vec![0.5, 0.5]],
            ]],
            reward: vec![
                vec![vec![FiniteDistribution::point(0.0); 2]; 2],
                vec![
                    vec![FiniteDistribution::point(1.0), FiniteDistribution::point(0.0)],
                    vec![FiniteDistribution::point(0.0), FiniteDistribution::point(0.0)],
                ],
            ],
        }
    }

    fn identity_emission(n: usize, horizon: usize) -> EmissionProcess {
        let row: Vec<IndexedDist> = (0..n).map(IndexedDist::point).collect();
        EmissionProcess::from_shared(row, horizon, n)
    }

    #[test]
    fn deterministic_distinct_maps_are_decodable() {
        let psi = identity_emission(3, 2);
        assert!(check_decodable(&psi).decodable());
    }

    #[test]
    fn shared_observation_reports_location() {
        let mut psi = identity_emission(3, 2);
        psi.rows[1][2] = IndexedDist { support: vec![0, 2], probs: vec![0.5, 0.5] };
        let r = check_decodable(&psi);
        assert_eq!(r.violation, Some((2, 0, 2, 0)));
    }

    #[test]
    fn identity_emission_inverts_to_identity() {
        let psi = identity_emission(4, 3);
        let (phi, uncovered) = invert_emission(&psi).unwrap();
        assert!(uncovered.is_empty());
        assert_eq!(phi, Decoder::identity(3, 4));
    }

    #[test]
    fn uncovered_observations_map_to_sink() {
        // Two latent states emitting into a 3-observation space; x=2 unused.
        let row = vec![IndexedDist::point(0), IndexedDist::point(1)];
        let psi = EmissionProcess::from_shared(row, 1, 3);
        let (phi, uncovered) = invert_emission(&psi).unwrap();
        assert_eq!(phi.map[0], vec![0, 1, 0]);
        assert_eq!(uncovered, vec![(1, 2)]);
    }

    #[test]
    fn identity_composition_preserves_the_mdp() {
        let base = two_state_base();
        let l = compose(&base, &identity_emission(2, 2)).unwrap();
        assert_eq!(l.obs, base);
    }

    #[test]
    fn composition_preserves_optimal_value() {
        let base = two_state_base();
        // Spread each latent state over two observations.
        let rows: Vec<Vec<IndexedDist>> = vec![
            vec![
                IndexedDist { support: vec![0, 1], probs: vec![0.3, 0.7] },
                IndexedDist { support: vec![2, 3], probs: vec![0.6, 0.4] },
            ];
            2
        ];
        let psi = EmissionProcess { rows, num_obs: 4 };
        let l = compose(&base, &psi).unwrap();
        let j_base = value_iteration(&base).j;
        let j_obs = value_iteration(&l.obs).j;
        assert!((j_base - j_obs).abs() < 1e-10);
    }

    #[test]
    fn composed_policy_matches_relabeling() {
        let base = two_state_base();
        let pi = value_iteration(&base).greedy;
        let l = compose(&base, &identity_emission(2, 2)).unwrap();
        let pi_obs = compose_policy(&pi, &l.true_decoder);
        let j = policy_value(&l.obs, &pi_obs).unwrap().j;
        assert!((j - value_iteration(&base).j).abs() < 1e-12);
    }

    #[test]
    fn constant_decoder_gives_constant_policy() {
        let pi = Policy::deterministic(StateSpace::Latent, &[vec![0, 1]], 2);
        let phi = Decoder::constant(1, 3, 1);
        let pi_obs = compose_policy(&pi, &phi);
        for x in 0..3 {
            assert_eq!(pi_obs.rows[0][x], vec![0.0, 1.0]);
        }
    }

    #[test]
    fn compress_drops_hindsight_and_relabels() {
        let mut tau = Trajectory {
            states: vec![2, 0],
            actions: vec![1, 0],
            rewards: vec![0.0, 1.0],
            hindsight: Some(vec![0, 0]),
        };
        let phi = Decoder { map: vec![vec![5, 5, 7], vec![1, 2, 3]] };
        let c = compress_trajectory(&tau, &phi);
        assert_eq!(c.states, vec![7, 1]);
        assert_eq!(c.actions, tau.actions);
        assert_eq!(c.rewards, tau.rewards);
        assert!(c.hindsight.is_none());
        tau.hindsight = None;
    }
}
