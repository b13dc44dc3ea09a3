//! Exact structural diagnostics: mismatch kernels, pushforward models,
//! coverability coefficients, compressed-process kernels, and brute-force
//! verification of the identities relating observation-level and latent
//! objects.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dist::{
    hellinger_sq_dense, hellinger_sq_joint, normalize, tv_dense, FiniteDistribution, JointDist,
};
use crate::error::LabError;
use crate::latent::{
    compose, compose_policy, invert_emission, Decoder, DecoderClass, EmissionProcess,
    IndexedDist, LatentDynamicsMDP,
};
use crate::mdp::{
    bellman_backup, bellman_backup_state, occupancy, value_iteration, Policy, StateSpace,
    TabularMDP,
};

/// Probability kernel giving the law of a decoder's label when the true
/// latent state is s.
#[derive(Debug, Clone, PartialEq)]
pub struct MismatchKernel {
    /// rows[h-1][s][s']
    pub rows: Vec<Vec<Vec<f64>>>,
}

impl MismatchKernel {
    pub fn horizon(&self) -> usize {
        self.rows.len()
    }

    pub fn is_identity(&self, tol: f64) -> bool {
        self.rows.iter().all(|layer| {
            layer.iter().enumerate().all(|(s, row)| {
                row.iter()
                    .enumerate()
                    .all(|(s2, &p)| (p - if s == s2 { 1.0 } else { 0.0 }).abs() <= tol)
            })
        })
    }
}

/// Γ[h][s][s'] = probability that `phi` labels an emission of s as s'.
pub fn mismatch_kernel(
    psi: &EmissionProcess,
    phi: &Decoder,
    num_latent: usize,
) -> Result<MismatchKernel, LabError> {
    if psi.horizon() != phi.horizon() {
        return Err(LabError::Dimension("emission/decoder horizons differ".into()));
    }
    let mut rows = Vec::with_capacity(psi.horizon());
    for h in 1..=psi.horizon() {
        let mut layer = vec![vec![0.0; num_latent]; psi.num_latent()];
        for (s, dist) in psi.rows[h - 1].iter().enumerate() {
            for (&x, &p) in dist.support.iter().zip(&dist.probs) {
                layer[s][phi.label(h, x)] += p;
            }
        }
        rows.push(layer);
    }
    Ok(MismatchKernel { rows })
}

/// Joint law of (reward, decoder label of the next observation) per
/// (layer, observation, action), including the pushforward of the initial
/// observation law.
#[derive(Debug, Clone)]
pub struct PushforwardModel {
    /// entries[h-1][x][a]
    pub entries: Vec<Vec<Vec<JointDist>>>,
    /// Pushforward of the layer-1 observation law through the decoder.
    pub init: Vec<f64>,
}

/// Marginalize the observation model through a decoder.
pub fn pushforward_model(l: &LatentDynamicsMDP, phi: &Decoder) -> PushforwardModel {
    let obs = &l.obs;
    let s_n = l.base.num_states;
    let mut init = vec![0.0; s_n];
    for (x, &p) in obs.init.iter().enumerate() {
        init[phi.label(1, x)] += p;
    }
    let mut entries = Vec::with_capacity(obs.horizon);
    for h in 1..=obs.horizon {
        let mut layer = Vec::with_capacity(obs.num_states);
        for x in 0..obs.num_states {
            let mut row = Vec::with_capacity(obs.num_actions);
            for a in 0..obs.num_actions {
                if h < obs.horizon {
                    let mut next = vec![0.0; s_n];
                    for (x2, &p) in obs.trans[h - 1][x][a].iter().enumerate() {
                        next[phi.label(h + 1, x2)] += p;
                    }
                    row.push(JointDist::product(&obs.reward[h - 1][x][a], &next));
                } else {
                    row.push(JointDist::terminal(&obs.reward[h - 1][x][a]));
                }
            }
            layer.push(row);
        }
        entries.push(layer);
    }
    PushforwardModel { entries, init }
}

/// Compose a latent model with a mismatch kernel on the next-state
/// coordinate. The result is again a tabular model: rewards pass through and
/// each transition row is pushed through the next layer's kernel, as is the
/// initial law through the layer-1 kernel.
pub fn mismatch_compose_model(gamma: &MismatchKernel, m: &TabularMDP) -> TabularMDP {
    let s_n = m.num_states;
    let mut init = vec![0.0; s_n];
    for (s, &p) in m.init.iter().enumerate() {
        for (s2, &g) in gamma.rows[0][s].iter().enumerate() {
            init[s2] += p * g;
        }
    }
    let mut trans = Vec::with_capacity(m.horizon.saturating_sub(1));
    for h in 1..m.horizon {
        let mut layer = vec![vec![vec![0.0; s_n]; m.num_actions]; s_n];
        for s in 0..s_n {
            for a in 0..m.num_actions {
                for (mid, &p) in m.trans[h - 1][s][a].iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    for (s2, &g) in gamma.rows[h][mid].iter().enumerate() {
                        layer[s][a][s2] += p * g;
                    }
                }
            }
        }
        trans.push(layer);
    }
    TabularMDP {
        horizon: m.horizon,
        num_states: s_n,
        num_actions: m.num_actions,
        init,
        trans,
        reward: m.reward.clone(),
    }
}

/// Compose a latent policy with a mismatch kernel: act as the policy would on
/// a kernel-drawn relabeling of the state.
pub fn mismatch_compose_policy(gamma: &MismatchKernel, pi: &Policy) -> Policy {
    let rows = gamma
        .rows
        .iter()
        .zip(&pi.rows)
        .map(|(g_layer, p_layer)| {
            g_layer
                .iter()
                .map(|g_row| {
                    let num_actions = p_layer[0].len();
                    let mut out = vec![0.0; num_actions];
                    for (s2, &g) in g_row.iter().enumerate() {
                        for (a, &pa) in p_layer[s2].iter().enumerate() {
                            out[a] += g * pa;
                        }
                    }
                    out
                })
                .collect()
        })
        .collect();
    Policy { space: pi.space, rows }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CoverabilityKind {
    State,
    StateAction,
    Pushforward,
}

#[derive(Debug, Clone)]
pub struct CoverabilityReport {
    pub coefficient: f64,
    /// witness[h-1]: distribution over states (or state-action cells,
    /// flattened as s * A + a).
    pub witness: Vec<Vec<f64>>,
    pub kind: CoverabilityKind,
}

/// Pushforward coverability via cumulative conditional reachability:
/// the layer coefficient is the sum over target states of the best
/// one-step probability of reaching them, and the witness is that
/// envelope normalized.
pub fn pushforward_coverability(m: &TabularMDP) -> CoverabilityReport {
    let mut coefficient = f64::NEG_INFINITY;
    let mut witness = Vec::with_capacity(m.horizon);
    for h in 1..=m.horizon {
        let mut envelope = vec![0.0; m.num_states];
        if h == 1 {
            envelope.copy_from_slice(&m.init);
        } else {
            for s in 0..m.num_states {
                for a in 0..m.num_actions {
                    for (s2, &p) in m.trans[h - 2][s][a].iter().enumerate() {
                        if p > envelope[s2] {
                            envelope[s2] = p;
                        }
                    }
                }
            }
        }
        let layer_coeff: f64 = envelope.iter().sum();
        coefficient = coefficient.max(layer_coeff);
        normalize(&mut envelope);
        witness.push(envelope);
    }
    CoverabilityReport { coefficient, witness, kind: CoverabilityKind::Pushforward }
}

/// Largest ratio of any one-step transition probability (or initial
/// probability at layer 1) to the witness mass of its target.
pub fn pushforward_witness_ratio(m: &TabularMDP, witness: &[Vec<f64>]) -> f64 {
    let mut sup: f64 = 0.0;
    for h in 1..=m.horizon {
        let w = &witness[h - 1];
        let mut consider = |s2: usize, p: f64| {
            if p > 0.0 {
                sup = sup.max(if w[s2] > 0.0 { p / w[s2] } else { f64::INFINITY });
            }
        };
        if h == 1 {
            for (s2, &p) in m.init.iter().enumerate() {
                consider(s2, p);
            }
        } else {
            for s in 0..m.num_states {
                for a in 0..m.num_actions {
                    for (s2, &p) in m.trans[h - 2][s][a].iter().enumerate() {
                        consider(s2, p);
                    }
                }
            }
        }
    }
    sup
}

/// State coverability over an explicit finite policy set, via cumulative
/// state reachability.
pub fn state_coverability(m: &TabularMDP, policies: &[Policy]) -> Result<CoverabilityReport, LabError> {
    if policies.is_empty() {
        return Err(LabError::EmptyClass("policy set".into()));
    }
    let occs: Vec<_> = policies
        .iter()
        .map(|pi| occupancy(m, pi))
        .collect::<Result<_, _>>()?;
    let mut coefficient = f64::NEG_INFINITY;
    let mut witness = Vec::with_capacity(m.horizon);
    for h in 0..m.horizon {
        let mut envelope = vec![0.0; m.num_states];
        for occ in &occs {
            for (z, &d) in occ.s[h].iter().enumerate() {
                if d > envelope[z] {
                    envelope[z] = d;
                }
            }
        }
        let layer: f64 = envelope.iter().sum();
        coefficient = coefficient.max(layer);
        normalize(&mut envelope);
        witness.push(envelope);
    }
    Ok(CoverabilityReport { coefficient, witness, kind: CoverabilityKind::State })
}

/// State-action coverability over an explicit finite policy set.
pub fn state_action_coverability(
    m: &TabularMDP,
    policies: &[Policy],
) -> Result<CoverabilityReport, LabError> {
    if policies.is_empty() {
        return Err(LabError::EmptyClass("policy set".into()));
    }
    let occs: Vec<_> = policies
        .iter()
        .map(|pi| occupancy(m, pi))
        .collect::<Result<_, _>>()?;
    let a_n = m.num_actions;
    let mut coefficient = f64::NEG_INFINITY;
    let mut witness = Vec::with_capacity(m.horizon);
    for h in 0..m.horizon {
        let mut envelope = vec![0.0; m.num_states * a_n];
        for occ in &occs {
            for z in 0..m.num_states {
                for a in 0..a_n {
                    let d = occ.sa[h][z][a];
                    if d > envelope[z * a_n + a] {
                        envelope[z * a_n + a] = d;
                    }
                }
            }
        }
        let layer: f64 = envelope.iter().sum();
        coefficient = coefficient.max(layer);
        normalize(&mut envelope);
        witness.push(envelope);
    }
    Ok(CoverabilityReport { coefficient, witness, kind: CoverabilityKind::StateAction })
}

/// Best achievable visitation probability of each (layer, state) cell over
/// all deterministic non-stationary policies, by backward reachability DP.
pub fn max_reach_table(m: &TabularMDP) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; m.num_states]; m.horizon];
    for h in 1..=m.horizon {
        for z in 0..m.num_states {
            // u[s] = best probability of having s_h = z given s_{h'} = s.
            let mut u = vec![0.0; m.num_states];
            u[z] = 1.0;
            for hp in (1..h).rev() {
                let mut next = vec![0.0; m.num_states];
                for s in 0..m.num_states {
                    for a in 0..m.num_actions {
                        let mut v = 0.0;
                        for (s2, &p) in m.trans[hp - 1][s][a].iter().enumerate() {
                            v += p * u[s2];
                        }
                        if v > next[s] {
                            next[s] = v;
                        }
                    }
                }
                u = next;
            }
            out[h - 1][z] = m.init.iter().zip(&u).map(|(&p, &v)| p * v).sum();
        }
    }
    out
}

/// State coverability over the set of all deterministic non-stationary
/// policies, computed from the reachability table rather than enumeration.
pub fn state_coverability_all_deterministic(m: &TabularMDP) -> CoverabilityReport {
    let reach = max_reach_table(m);
    let mut coefficient = f64::NEG_INFINITY;
    let mut witness = Vec::with_capacity(m.horizon);
    for layer in reach {
        let total: f64 = layer.iter().sum();
        coefficient = coefficient.max(total);
        let mut w = layer;
        normalize(&mut w);
        witness.push(w);
    }
    CoverabilityReport { coefficient, witness, kind: CoverabilityKind::State }
}

/// State-action coverability over all deterministic non-stationary policies.
/// Each action at a reached state is free to choose, so every cell attains
/// the state's best reach probability.
pub fn state_action_coverability_all_deterministic(m: &TabularMDP) -> CoverabilityReport {
    let st = state_coverability_all_deterministic(m);
    let a_n = m.num_actions;
    let witness = st
        .witness
        .iter()
        .map(|layer| {
            let mut w = Vec::with_capacity(layer.len() * a_n);
            for &v in layer {
                for _ in 0..a_n {
                    w.push(v / a_n as f64);
                }
            }
            w
        })
        .collect();
    CoverabilityReport {
        coefficient: st.coefficient * a_n as f64,
        witness,
        kind: CoverabilityKind::StateAction,
    }
}

/// Maximum horizon for exact prefix enumeration of the compressed process.
pub const MAX_COMPRESSED_HORIZON: usize = 5;

/// One reachable label-action prefix of the compressed process, with its
/// probability and the conditional joint over (reward, next label) per
/// current action.
#[derive(Debug, Clone)]
pub struct PrefixEntry {
    /// Latent labels s_1..s_h.
    pub states: Vec<usize>,
    /// Actions a_1..a_{h-1}.
    pub actions: Vec<usize>,
    /// Probability of observing this prefix (before the layer-h action).
    pub prob: f64,
    /// kernel[a] = conditional joint of (r_h, label of next observation)
    /// given the prefix and action a.
    pub kernel: Vec<JointDist>,
}

/// Exact conditional kernels of the compressed process at layer `h`, plus the
/// one-step kernel averaged over prefixes under the given latent policy.
#[derive(Debug, Clone)]
pub struct PhiCompressedKernel {
    pub layer: usize,
    pub prefixes: Vec<PrefixEntry>,
    /// averaged[s][a]: policy-dependent one-step joint, `None` when (s, a)
    /// has zero probability at this layer.
    pub averaged: Vec<Vec<Option<JointDist>>>,
}

/// Weighted mixture of joints, merging reward grids by exact value.
fn mix_joints(parts: &[(f64, JointDist)]) -> JointDist {
    let n = parts
        .iter()
        .map(|(_, j)| j.num_next())
        .max()
        .unwrap_or(1);
    let mut rewards: Vec<f64> = Vec::new();
    for (_, j) in parts {
        for &r in &j.rewards {
            if !rewards.contains(&r) {
                rewards.push(r);
            }
        }
    }
    let mut probs = vec![vec![0.0; n]; rewards.len()];
    for (w, j) in parts {
        for (ri, &r) in rewards.iter().enumerate() {
            for s in 0..j.num_next() {
                probs[ri][s] += w * j.prob_of(r, s);
            }
        }
    }
    JointDist { rewards, probs }
}

/// Enumerate the compressed process exactly up to layer `h`.
///
/// Internal state per reachable prefix is the unnormalized distribution over
/// the current observation; the conditional kernels are policy-independent
/// while the prefix probabilities and averaged kernel depend on the policy.
pub fn phi_compressed_kernel(
    l: &LatentDynamicsMDP,
    phi: &Decoder,
    pi_lat: &Policy,
    h: usize,
) -> Result<PhiCompressedKernel, LabError> {
    let hz = l.base.horizon;
    if hz > MAX_COMPRESSED_HORIZON {
        return Err(LabError::HorizonTooLarge(hz, MAX_COMPRESSED_HORIZON));
    }
    if h == 0 || h > hz {
        return Err(LabError::LayerOutOfRange { layer: h, max: hz });
    }
    let obs = &l.obs;
    let s_n = l.base.num_states;

    // Key: interleaved prefix [s_1, a_1, ..., s_k]; value: unnormalized
    // distribution over the current observation.
    let mut frontier: BTreeMap<Vec<usize>, Vec<f64>> = BTreeMap::new();
    for (x, &p) in obs.init.iter().enumerate() {
        if p > 0.0 {
            let key = vec![phi.label(1, x)];
            frontier.entry(key).or_insert_with(|| vec![0.0; obs.num_states])[x] += p;
        }
    }
    for layer in 1..h {
        let mut next: BTreeMap<Vec<usize>, Vec<f64>> = BTreeMap::new();
        for (key, w) in &frontier {
            let s_cur = *key.last().unwrap();
            for a in 0..obs.num_actions {
                let pa = pi_lat.action_probs(layer, s_cur)[a];
                if pa == 0.0 {
                    continue;
                }
                for (x, &wx) in w.iter().enumerate() {
                    if wx == 0.0 {
                        continue;
                    }
                    for (x2, &p) in obs.trans[layer - 1][x][a].iter().enumerate() {
                        if p == 0.0 {
                            continue;
                        }
                        let mut key2 = key.clone();
                        key2.push(a);
                        key2.push(phi.label(layer + 1, x2));
                        next.entry(key2)
                            .or_insert_with(|| vec![0.0; obs.num_states])[x2] += wx * pa * p;
                    }
                }
            }
        }
        frontier = next;
    }

    let mut prefixes = Vec::with_capacity(frontier.len());
    let mut avg_acc: Vec<Vec<Vec<(f64, JointDist)>>> =
        vec![vec![Vec::new(); obs.num_actions]; s_n];
    for (key, w) in &frontier {
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            continue;
        }
        let states: Vec<usize> = key.iter().step_by(2).copied().collect();
        let actions: Vec<usize> = key.iter().skip(1).step_by(2).copied().collect();
        let s_cur = *states.last().unwrap();
        let mut kernel = Vec::with_capacity(obs.num_actions);
        for a in 0..obs.num_actions {
            let parts: Vec<(f64, JointDist)> = w
                .iter()
                .enumerate()
                .filter(|(_, &wx)| wx > 0.0)
                .map(|(x, &wx)| {
                    let joint = if h < hz {
                        let mut nxt = vec![0.0; s_n];
                        for (x2, &p) in obs.trans[h - 1][x][a].iter().enumerate() {
                            nxt[phi.label(h + 1, x2)] += p;
                        }
                        JointDist::product(&obs.reward[h - 1][x][a], &nxt)
                    } else {
                        JointDist::terminal(&obs.reward[h - 1][x][a])
                    };
                    (wx / total, joint)
                })
                .collect();
            kernel.push(mix_joints(&parts));
        }
        for a in 0..obs.num_actions {
            let pa = pi_lat.action_probs(h, s_cur)[a];
            if pa > 0.0 {
                avg_acc[s_cur][a].push((total * pa, kernel[a].clone()));
            }
        }
        prefixes.push(PrefixEntry { states, actions, prob: total, kernel });
    }

    let averaged = avg_acc
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|parts| {
                    let mass: f64 = parts.iter().map(|(w, _)| w).sum();
                    if mass > 0.0 {
                        let scaled: Vec<(f64, JointDist)> =
                            parts.into_iter().map(|(w, j)| (w / mass, j)).collect();
                        Some(mix_joints(&scaled))
                    } else {
                        None
                    }
                })
                .collect()
        })
        .collect();

    Ok(PhiCompressedKernel { layer: h, prefixes, averaged })
}

/// Result of checking one structural identity on one instance.
#[derive(Debug, Clone, Serialize)]
pub struct IdentityResult {
    pub name: String,
    pub max_residual: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct StructuralReport {
    pub identities: Vec<IdentityResult>,
}

impl StructuralReport {
    pub fn all_pass(&self) -> bool {
        self.identities.iter().all(|i| i.pass)
    }
}

fn build_policy_set(l: &LatentDynamicsMDP, pi_lat: &Policy) -> Vec<Policy> {
    let base = &l.base;
    vec![
        pi_lat.clone(),
        Policy::uniform(StateSpace::Latent, base.horizon, base.num_states, base.num_actions),
        value_iteration(base).greedy,
    ]
}

/// Verify every structural identity relating the base MDP, the emission, and
/// the decoders, reporting the worst residual per identity. Equalities are
/// checked to `tol`; inequalities are allowed `tol` slack.
pub fn verify_structural_identities(
    l: &LatentDynamicsMDP,
    decoders: &DecoderClass,
    pi_lat: &Policy,
    f: &[Vec<Vec<f64>>],
    tol: f64,
) -> Result<StructuralReport, LabError> {
    let base = &l.base;
    let obs = &l.obs;
    let phi_star = &l.true_decoder;
    let h_n = base.horizon;
    let mut identities = Vec::new();

    let mut cand_models: Vec<TabularMDP> = vec![base.clone()];
    let mut kernels = Vec::new();
    for phi in &decoders.decoders {
        let gamma = mismatch_kernel(&l.emission, phi, base.num_states)?;
        cand_models.push(mismatch_compose_model(&gamma, base));
        kernels.push(gamma);
    }

    // Change of measure: the marginal of (label, action) under the compressed
    // process equals the relabeled observation occupancy.
    {
        let mut worst: f64 = 0.0;
        for phi in &decoders.decoders {
            let pi_obs = compose_policy(pi_lat, phi);
            let docc = occupancy(obs, &pi_obs)?;
            for h in 1..=h_n {
                let compressed = phi_compressed_kernel(l, phi, pi_lat, h)?;
                let mut lhs = 0.0;
                for p in &compressed.prefixes {
                    let s = *p.states.last().unwrap();
                    for a in 0..base.num_actions {
                        lhs += p.prob * pi_lat.action_probs(h, s)[a] * f[h - 1][s][a];
                    }
                }
                let mut rhs = 0.0;
                for x in 0..obs.num_states {
                    for a in 0..obs.num_actions {
                        rhs += docc.sa[h - 1][x][a] * f[h - 1][phi.label(h, x)][a];
                    }
                }
                worst = worst.max((lhs - rhs).abs());
            }
        }
        identities.push(IdentityResult {
            name: "change_of_measure".into(),
            max_residual: worst,
            pass: worst <= tol,
        });
    }

    // Observation-level Bellman backups of relabeled functions commute with
    // the mismatch kernel.
    {
        let mut worst: f64 = 0.0;
        for (phi, gamma) in decoders.decoders.iter().zip(&kernels) {
            for h in 1..h_n {
                let f_obs: Vec<Vec<f64>> = (0..obs.num_states)
                    .map(|x| f[h][phi.label(h + 1, x)].clone())
                    .collect();
                let lhs = bellman_backup(obs, h, &f_obs)?;
                let vf: Vec<f64> = (0..base.num_states)
                    .map(|s| f[h][s].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
                    .collect();
                let g: Vec<f64> = (0..base.num_states)
                    .map(|s| {
                        gamma.rows[h]
                            .get(s)
                            .map(|row| row.iter().zip(&vf).map(|(&p, &v)| p * v).sum())
                            .unwrap_or(0.0)
                    })
                    .collect();
                let rhs = bellman_backup_state(base, h, &g)?;
                for x in 0..obs.num_states {
                    let s = phi_star.label(h, x);
                    for a in 0..obs.num_actions {
                        worst = worst.max((lhs[x][a] - rhs[s][a]).abs());
                    }
                }
            }
        }
        identities.push(IdentityResult {
            name: "bellman_mismatch_commutation".into(),
            max_residual: worst,
            pass: worst <= tol,
        });
    }

    // Observation occupancies factor into the emission times the occupancy of
    // the kernel-composed policy.
    {
        let mut worst: f64 = 0.0;
        for (phi, gamma) in decoders.decoders.iter().zip(&kernels) {
            let pi_obs = compose_policy(pi_lat, phi);
            let docc = occupancy(obs, &pi_obs)?;
            let pi_mix = mismatch_compose_policy(gamma, pi_lat);
            let dlat = occupancy(base, &pi_mix)?;
            for h in 1..=h_n {
                for x in 0..obs.num_states {
                    let s = phi_star.label(h, x);
                    let expected = l.emission.prob(h, s, x) * dlat.s[h - 1][s];
                    worst = worst.max((docc.s[h - 1][x] - expected).abs());
                }
            }
        }
        identities.push(IdentityResult {
            name: "occupancy_factorization".into(),
            max_residual: worst,
            pass: worst <= tol,
        });
    }

    // The decoder pushforward of the observation model is the mismatch
    // composition of the base model, evaluated at the true label.
    {
        let mut worst: f64 = 0.0;
        for (k, phi) in decoders.decoders.iter().enumerate() {
            let push = pushforward_model(l, phi);
            let composed = &cand_models[k + 1];
            for s in 0..base.num_states {
                worst = worst.max((push.init[s] - composed.init[s]).abs());
            }
            for h in 1..=h_n {
                for x in 0..obs.num_states {
                    let s = phi_star.label(h, x);
                    for a in 0..obs.num_actions {
                        let lhs = &push.entries[h - 1][x][a];
                        let rhs = composed.joint(h, s, a);
                        for &r in lhs.rewards.iter().chain(rhs.rewards.iter()) {
                            for s2 in 0..lhs.num_next() {
                                worst = worst.max((lhs.prob_of(r, s2) - rhs.prob_of(r, s2)).abs());
                            }
                        }
                    }
                }
            }
        }
        identities.push(IdentityResult {
            name: "pushforward_realizability".into(),
            max_residual: worst,
            pass: worst <= tol,
        });
    }

    // State coverability is the same computed on observations over composed
    // policies or on the base over kernel-mixed policies, and the transformed
    // witness certifies it.
    {
        let lat_policies = build_policy_set(l, pi_lat);
        let mut obs_policies = Vec::new();
        let mut mixed_policies = Vec::new();
        for phi in &decoders.decoders {
            let gamma = mismatch_kernel(&l.emission, phi, base.num_states)?;
            for pl in &lat_policies {
                obs_policies.push(compose_policy(pl, phi));
                mixed_policies.push(mismatch_compose_policy(&gamma, pl));
            }
        }
        let lhs = state_coverability(obs, &obs_policies)?;
        let rhs = state_coverability(base, &mixed_policies)?;
        let mut worst = (lhs.coefficient - rhs.coefficient).abs();

        // Transformed witness reproduces the coefficient on observations.
        let occs: Vec<_> = obs_policies
            .iter()
            .map(|pi| occupancy(obs, pi))
            .collect::<Result<Vec<_>, _>>()?;
        let mut sup: f64 = 0.0;
        for h in 1..=h_n {
            for x in 0..obs.num_states {
                let s = phi_star.label(h, x);
                let w = l.emission.prob(h, s, x) * rhs.witness[h - 1][s];
                for occ in &occs {
                    let d = occ.s[h - 1][x];
                    if d > 0.0 {
                        sup = sup.max(if w > 0.0 { d / w } else { f64::INFINITY });
                    }
                }
            }
        }
        worst = worst.max(sup - rhs.coefficient);
        identities.push(IdentityResult {
            name: "state_coverability_invariance".into(),
            max_residual: worst,
            pass: worst <= tol,
        });
    }

    // Pushforward coverability is invariant to the emission, with the
    // transformed witness again certifying the coefficient.
    {
        let lhs = pushforward_coverability(obs);
        let rhs = pushforward_coverability(base);
        let mut worst = (lhs.coefficient - rhs.coefficient).abs();
        let transformed: Vec<Vec<f64>> = (1..=h_n)
            .map(|h| {
                (0..obs.num_states)
                    .map(|x| {
                        let s = phi_star.label(h, x);
                        l.emission.prob(h, s, x) * rhs.witness[h - 1][s]
                    })
                    .collect()
            })
            .collect();
        let sup = pushforward_witness_ratio(obs, &transformed);
        worst = worst.max(sup - rhs.coefficient);
        identities.push(IdentityResult {
            name: "pushforward_coverability_invariance".into(),
            max_residual: worst,
            pass: worst <= tol,
        });
    }

    // Simulation bound: the value gap between a candidate model and the
    // compressed process is at most the accumulated pushforward TV gaps.
    {
        let mut worst: f64 = f64::NEG_INFINITY;
        for phi in &decoders.decoders {
            let pi_obs = compose_policy(pi_lat, phi);
            let docc = occupancy(obs, &pi_obs)?;
            let push = pushforward_model(l, phi);
            for cand in &cand_models {
                let cocc = occupancy(cand, pi_lat)?;
                // tv_terms[h'] for h' = 0..H-1.
                let mut tv_terms = Vec::with_capacity(h_n);
                let push_init_gap = tv_dense(&cand.init, &push.init);
                tv_terms.push(push_init_gap);
                for hp in 1..h_n {
                    let mut acc = 0.0;
                    for x in 0..obs.num_states {
                        for a in 0..obs.num_actions {
                            let d = docc.sa[hp - 1][x][a];
                            if d == 0.0 {
                                continue;
                            }
                            let cand_row = &cand.trans[hp - 1][phi.label(hp, x)][a];
                            let push_row = push.entries[hp - 1][x][a].next_marginal();
                            acc += d * tv_dense(cand_row, &push_row);
                        }
                    }
                    tv_terms.push(acc);
                }
                for h in 1..=h_n {
                    let mut lhs_cand = 0.0;
                    let mut lhs_comp = 0.0;
                    for s in 0..base.num_states {
                        for a in 0..base.num_actions {
                            lhs_cand += cocc.sa[h - 1][s][a] * f[h - 1][s][a];
                        }
                    }
                    for x in 0..obs.num_states {
                        for a in 0..obs.num_actions {
                            lhs_comp += docc.sa[h - 1][x][a] * f[h - 1][phi.label(h, x)][a];
                        }
                    }
                    let bound: f64 = tv_terms[..h].iter().sum();
                    worst = worst.max((lhs_cand - lhs_comp).abs() - bound);
                }
            }
        }
        identities.push(IdentityResult {
            name: "simulation_lemma".into(),
            max_residual: worst,
            pass: worst <= tol,
        });
    }

    // Near-markovianity: the prefix-conditional kernels of the compressed
    // process, and their policy-averaged one-step collapse, are no further
    // from a candidate model (in expected squared Hellinger) than the
    // pushforward self-prediction error.
    {
        let mut worst: f64 = f64::NEG_INFINITY;
        for phi in &decoders.decoders {
            let pi_obs = compose_policy(pi_lat, phi);
            let docc = occupancy(obs, &pi_obs)?;
            let push = pushforward_model(l, phi);
            for cand in &cand_models {
                let init_gap = hellinger_sq_dense(&cand.init, &push.init);
                let mut lhs = init_gap;
                let mut lhs_avg = init_gap;
                let mut rhs = init_gap;
                for h in 1..=h_n {
                    let compressed = phi_compressed_kernel(l, phi, pi_lat, h)?;
                    let mut marginal = vec![vec![0.0; base.num_actions]; base.num_states];
                    for p in &compressed.prefixes {
                        let s = *p.states.last().unwrap();
                        for a in 0..base.num_actions {
                            let pa = pi_lat.action_probs(h, s)[a];
                            if pa == 0.0 {
                                continue;
                            }
                            marginal[s][a] += p.prob * pa;
                            let model_joint = cand.joint(h, s, a);
                            lhs += p.prob * pa * hellinger_sq_joint(&model_joint, &p.kernel[a]);
                        }
                    }
                    for s in 0..base.num_states {
                        for a in 0..base.num_actions {
                            if marginal[s][a] == 0.0 {
                                continue;
                            }
                            let avg = compressed.averaged[s][a]
                                .as_ref()
                                .expect("positive marginal implies an averaged kernel");
                            lhs_avg += marginal[s][a]
                                * hellinger_sq_joint(&cand.joint(h, s, a), avg);
                        }
                    }
                    for x in 0..obs.num_states {
                        for a in 0..obs.num_actions {
                            let d = docc.sa[h - 1][x][a];
                            if d == 0.0 {
                                continue;
                            }
                            let model_joint = cand.joint(h, phi.label(h, x), a);
                            rhs += d
                                * hellinger_sq_joint(&model_joint, &push.entries[h - 1][x][a]);
                        }
                    }
                }
                worst = worst.max(lhs - rhs).max(lhs_avg - rhs);
            }
        }
        identities.push(IdentityResult {
            name: "near_markovianity".into(),
            max_residual: worst,
            pass: worst <= tol,
        });
    }

    Ok(StructuralReport { identities })
}

/// A randomly generated small instance for the verification suite.
pub struct RandomInstance {
    pub latent: LatentDynamicsMDP,
    pub decoders: DecoderClass,
    pub policy: Policy,
    pub f: Vec<Vec<Vec<f64>>>,
}

pub fn random_prob_row(n: usize, rng: &mut (impl Rng + ?Sized)) -> Vec<f64> {
    let mut row: Vec<f64> = (0..n).map(|_| -(rng.random::<f64>().max(1e-12)).ln()).collect();
    normalize(&mut row);
    row
}

/// Random latent MDP with rewards confined to a final-layer Bernoulli so that
/// total reward stays in [0, 1].
pub fn random_mdp(s_n: usize, a_n: usize, h_n: usize, rng: &mut (impl Rng + ?Sized)) -> TabularMDP {
    let init = random_prob_row(s_n, rng);
    let trans = (1..h_n)
        .map(|_| {
            (0..s_n)
                .map(|_| (0..a_n).map(|_| random_prob_row(s_n, rng)).collect())
                .collect()
        })
        .collect();
    let reward = (1..=h_n)
        .map(|h| {
            (0..s_n)
                .map(|_| {
                    (0..a_n)
                        .map(|_| {
                            if h == h_n {
                                FiniteDistribution::bernoulli(rng.random::<f64>())
                            } else {
                                FiniteDistribution::point(0.0)
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    TabularMDP { horizon: h_n, num_states: s_n, num_actions: a_n, init, trans, reward }
}

/// Random decodable emission: partition observations into nonempty blocks,
/// one per latent state, with random emission weights inside each block.
pub fn random_emission(
    s_n: usize,
    x_n: usize,
    h_n: usize,
    rng: &mut (impl Rng + ?Sized),
) -> EmissionProcess {
    assert!(x_n >= s_n, "need at least one observation per latent state");
    let mut rows = Vec::with_capacity(h_n);
    for _ in 0..h_n {
        let mut order: Vec<usize> = (0..x_n).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut blocks: Vec<Vec<usize>> = vec![Vec::new(); s_n];
        for (i, &x) in order.iter().enumerate() {
            let s = if i < s_n { i } else { rng.random_range(0..s_n) };
            blocks[s].push(x);
        }
        let layer = blocks
            .into_iter()
            .map(|mut block| {
                block.sort_unstable();
                let probs = random_prob_row(block.len(), rng);
                IndexedDist { support: block, probs }
            })
            .collect();
        rows.push(layer);
    }
    EmissionProcess { rows, num_obs: x_n }
}

/// Random total decoder.
pub fn random_decoder(s_n: usize, x_n: usize, h_n: usize, rng: &mut (impl Rng + ?Sized)) -> Decoder {
    let map = (0..h_n)
        .map(|_| (0..x_n).map(|_| rng.random_range(0..s_n)).collect())
        .collect();
    Decoder { map }
}

pub fn random_policy(s_n: usize, a_n: usize, h_n: usize, rng: &mut (impl Rng + ?Sized)) -> Policy {
    let rows = (0..h_n)
        .map(|_| (0..s_n).map(|_| random_prob_row(a_n, rng)).collect())
        .collect();
    Policy { space: StateSpace::Latent, rows }
}

/// Build one random instance within the documented size box
/// (|S| <= 5, |X| <= 12, |A| <= 3, H <= 4).
pub fn random_instance(seed: u64) -> RandomInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s_n = rng.random_range(2..=5);
    let x_n = rng.random_range(s_n..=12);
    let a_n = rng.random_range(2..=3);
    let h_n = rng.random_range(2..=4);
    let base = random_mdp(s_n, a_n, h_n, &mut rng);
    let psi = random_emission(s_n, x_n, h_n, &mut rng);
    let latent = compose(&base, &psi).expect("random emission must compose");
    let (phi_star, _) = invert_emission(&psi).expect("random emission is decodable");

    // Permuted true decoder.
    let mut perm: Vec<usize> = (0..s_n).collect();
    for i in (1..perm.len()).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    let permuted = Decoder {
        map: phi_star
            .map
            .iter()
            .map(|layer| layer.iter().map(|&s| perm[s]).collect())
            .collect(),
    };
    let decoders = DecoderClass {
        decoders: vec![
            phi_star,
            permuted,
            random_decoder(s_n, x_n, h_n, &mut rng),
            Decoder::constant(h_n, x_n, 0),
        ],
    };
    let policy = random_policy(s_n, a_n, h_n, &mut rng);
    let f = (0..h_n)
        .map(|_| {
            (0..s_n)
                .map(|_| (0..a_n).map(|_| rng.random::<f64>()).collect())
                .collect()
        })
        .collect();
    RandomInstance { latent, decoders, policy, f }
}

/// Run the identity suite over `num_instances` seeded random instances;
/// results are ordered by instance index regardless of scheduling.
pub fn run_verification_suite(
    num_instances: usize,
    base_seed: u64,
    tol: f64,
) -> Vec<(u64, StructuralReport)> {
    (0..num_instances)
        .into_par_iter()
        .map(|i| {
            let seed = base_seed.wrapping_add(i as u64);
            let inst = random_instance(seed);
            let report = verify_structural_identities(
                &inst.latent,
                &inst.decoders,
                &inst.policy,
                &inst.f,
                tol,
            )
            .expect("verification instance must be well-formed");
            (seed, report)
        })
        .collect()
}
