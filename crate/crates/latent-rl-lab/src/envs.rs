//! Benchmark environment families: shifted-tree and shifted-context hardness
//! constructions, a combination lock, and randomized pushforward-coverable
//! instances.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::FiniteDistribution;
use crate::error::LabError;
use crate::latent::{
    check_decodable, compose, invert_emission, Decoder, DecoderClass, EmissionProcess,
    IndexedDist, LatentDynamicsMDP,
};
use crate::mdp::{validate_mdp, TabularMDP};
use crate::oracle::{mismatch_compose_model, mismatch_kernel, random_emission, random_prob_row};

/// A family of latent-dynamics MDPs sharing one base MDP: one emission per
/// member, the decoder class, and the candidate model classes used by the
/// learners.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvBundle {
    pub name: String,
    pub n: usize,
    pub seed: u64,
    pub base: TabularMDP,
    pub emissions: Vec<EmissionProcess>,
    pub decoders: DecoderClass,
    pub model_class: Vec<TabularMDP>,
    /// Kernel-composed models, when materialized.
    pub mismatch_complete: Option<Vec<TabularMDP>>,
    /// True when the base model is a singleton known a priori.
    pub known_model: bool,
}

impl EnvBundle {
    /// Materialize family member `k` (the adversary's emission choice).
    pub fn member(&self, k: usize) -> Result<LatentDynamicsMDP, LabError> {
        if k >= self.emissions.len() {
            return Err(LabError::Invalid(format!(
                "member {k} out of range for family of {}",
                self.emissions.len()
            )));
        }
        compose(&self.base, &self.emissions[k])
    }

    pub fn num_members(&self) -> usize {
        self.emissions.len()
    }

    /// Check generator invariants: the base validates, every emission is
    /// decodable, and each emission's exact inverse appears in the decoder
    /// class.
    pub fn validate(&self) -> Result<(), LabError> {
        let report = validate_mdp(&self.base);
        if let Some(v) = report.first_violation {
            return Err(LabError::Invalid(format!("base MDP: {v}")));
        }
        for (k, psi) in self.emissions.iter().enumerate() {
            if !check_decodable(psi).decodable() {
                return Err(LabError::NotDecodable(format!("emission {k}")));
            }
            let (inv, _) = invert_emission(psi)?;
            if !self.decoders.decoders.contains(&inv) {
                return Err(LabError::Invalid(format!(
                    "inverse of emission {k} missing from decoder class"
                )));
            }
        }
        if self.known_model && !self.model_class.contains(&self.base) {
            return Err(LabError::Invalid("base model missing from model class".into()));
        }
        self.decoders.validate()?;
        Ok(())
    }
}

fn point_reward_zero() -> FiniteDistribution {
    FiniteDistribution::point(0.0)
}

/// Binary-tree family: N trees of depth log2(N)+1 over a shared state space,
/// uniform initial tree, reward for reaching the leaf whose index matches the
/// tree, and cyclic index shifts as emissions.
pub fn make_tree_env(n: usize) -> Result<EnvBundle, LabError> {
    if n < 4 || !n.is_power_of_two() {
        return Err(LabError::Invalid(format!("tree family needs a power of two >= 4, got {n}")));
    }
    let horizon = (n.trailing_zeros() as usize) + 1;
    let per_tree = 2 * n - 1;
    let num_states = n * per_tree;
    let num_actions = 2;

    // Node (tree i, layer h, position j) with j in 0..2^{h-1}.
    let node = |i: usize, h: usize, j: usize| -> usize { i * per_tree + ((1 << (h - 1)) - 1) + j };

    let mut init = vec![0.0; num_states];
    for i in 0..n {
        init[node(i, 1, 0)] = 1.0 / n as f64;
    }

    let mut trans = Vec::with_capacity(horizon - 1);
    for h in 1..horizon {
        let mut layer = vec![vec![vec![0.0; num_states]; num_actions]; num_states];
        for (s, row_s) in layer.iter_mut().enumerate() {
            for row in row_s.iter_mut() {
                row[s] = 1.0; // default self-loop for off-layer states
            }
        }
        for i in 0..n {
            for j in 0..(1 << (h - 1)) {
                let s = node(i, h, j);
                for a in 0..num_actions {
                    let s2 = node(i, h + 1, 2 * j + a);
                    layer[s][a] = vec![0.0; num_states];
                    layer[s][a][s2] = 1.0;
                }
            }
        }
        trans.push(layer);
    }

    let mut reward = vec![vec![vec![point_reward_zero(); num_actions]; num_states]; horizon];
    for i in 0..n {
        for j in 0..n {
            let s = node(i, horizon, j);
            let r = if i == j { 1.0 } else { 0.0 };
            reward[horizon - 1][s] = vec![FiniteDistribution::point(r); num_actions];
        }
    }

    let base = TabularMDP { horizon, num_states, num_actions, init, trans, reward };

    // Emission for shift k maps tree i to tree (i + k) mod n, preserving the
    // in-tree position; the decoder applies the inverse shift.
    let mut emissions = Vec::with_capacity(n);
    let mut decoders = Vec::with_capacity(n);
    for k in 0..n {
        let mut row = Vec::with_capacity(num_states);
        let mut dec = vec![0usize; num_states];
        for s in 0..num_states {
            let (i, off) = (s / per_tree, s % per_tree);
            let x = ((i + k) % n) * per_tree + off;
            row.push(IndexedDist::point(x));
            dec[x] = s;
        }
        emissions.push(EmissionProcess::from_shared(row, horizon, num_states));
        decoders.push(Decoder { map: vec![dec; horizon] });
    }

    let bundle = EnvBundle {
        name: "tree".into(),
        n,
        seed: 0,
        base: base.clone(),
        emissions,
        decoders: DecoderClass { decoders },
        model_class: vec![base],
        mismatch_complete: None,
        known_model: true,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Contextual family: uniform contexts, one rewarded action per context, and
/// cyclic context shifts as emissions.
pub fn make_cb_env(n: usize) -> Result<EnvBundle, LabError> {
    if n < 4 {
        return Err(LabError::Invalid(format!("contextual family needs N >= 4, got {n}")));
    }
    let mut reward = vec![vec![Vec::with_capacity(n); n]];
    for s in 0..n {
        for a in 0..n {
            reward[0][s].push(FiniteDistribution::point(if s == a { 1.0 } else { 0.0 }));
        }
    }
    let base = TabularMDP {
        horizon: 1,
        num_states: n,
        num_actions: n,
        init: vec![1.0 / n as f64; n],
        trans: vec![],
        reward,
    };
    let mut emissions = Vec::with_capacity(n);
    let mut decoders = Vec::with_capacity(n);
    for k in 0..n {
        let row: Vec<IndexedDist> = (0..n).map(|s| IndexedDist::point((s + k) % n)).collect();
        let dec: Vec<usize> = (0..n).map(|x| (x + n - k) % n).collect();
        emissions.push(EmissionProcess::from_shared(row, 1, n));
        decoders.push(Decoder { map: vec![dec] });
    }
    let bundle = EnvBundle {
        name: "cb".into(),
        n,
        seed: 0,
        base: base.clone(),
        emissions,
        decoders: DecoderClass { decoders },
        model_class: vec![base],
        mismatch_complete: None,
        known_model: true,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Combination lock: two live states per layer plus absorbing decoys, one
/// correct action per (layer, live state), a single rewarded terminal state,
/// and a stochastic two-observations-per-state emission.
pub fn make_combination_lock(
    horizon: usize,
    num_decoys: usize,
    rng: &mut (impl Rng + ?Sized),
) -> Result<EnvBundle, LabError> {
    if horizon < 2 {
        return Err(LabError::Invalid("lock needs horizon >= 2".into()));
    }
    let decoys = num_decoys.max(1);
    let num_states = 2 + decoys;
    let num_actions = 2;
    let mut init = vec![0.0; num_states];
    init[0] = 1.0;

    let mut trans = Vec::with_capacity(horizon - 1);
    for h in 1..horizon {
        let mut layer = vec![vec![vec![0.0; num_states]; num_actions]; num_states];
        for live in 0..2 {
            let correct = rng.random_range(0..num_actions);
            let trap = 2 + (h + live) % decoys;
            for a in 0..num_actions {
                if a == correct {
                    if h == horizon - 1 {
                        layer[live][a][0] = 1.0; // final step funnels into the goal
                    } else {
                        layer[live][a][0] = 0.5;
                        layer[live][a][1] = 0.5;
                    }
                } else {
                    layer[live][a][trap] = 1.0;
                }
            }
        }
        for d in 2..num_states {
            for a in 0..num_actions {
                layer[d][a][d] = 1.0;
            }
        }
        trans.push(layer);
    }

    let mut reward = vec![vec![vec![point_reward_zero(); num_actions]; num_states]; horizon];
    reward[horizon - 1][0] = vec![FiniteDistribution::point(1.0); num_actions];

    let base = TabularMDP { horizon, num_states, num_actions, init, trans, reward };

    let num_obs = 2 * num_states;
    let mut rows = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let layer: Vec<IndexedDist> = (0..num_states)
            .map(|s| {
                let p = 0.2 + 0.6 * rng.random::<f64>();
                IndexedDist { support: vec![2 * s, 2 * s + 1], probs: vec![p, 1.0 - p] }
            })
            .collect();
        rows.push(layer);
    }
    let psi = EmissionProcess { rows, num_obs };
    let (phi_star, _) = invert_emission(&psi)?;

    let mut decoders = vec![phi_star.clone()];
    for _ in 0..3 {
        // Corrupt a handful of labels of the true decoder.
        let mut map = phi_star.map.clone();
        for _ in 0..(1 + num_obs / 3) {
            let h = rng.random_range(0..horizon);
            let x = rng.random_range(0..num_obs);
            map[h][x] = rng.random_range(0..num_states);
        }
        let d = Decoder { map };
        if d != phi_star {
            decoders.push(d);
        }
    }

    let bundle = EnvBundle {
        name: "lock".into(),
        n: horizon,
        seed: 0,
        base: base.clone(),
        emissions: vec![psi],
        decoders: DecoderClass { decoders },
        model_class: vec![base],
        mismatch_complete: None,
        known_model: false,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Randomized family with controllable pushforward coverability: every
/// transition row is a (1-mix)/mix blend of a shared per-layer row and an
/// independent random row. Model and decoder classes contain the truth plus
/// random perturbations, and the kernel-composed class is materialized.
#[allow(clippy::too_many_arguments)]
pub fn make_random_pushforward_env(
    num_states: usize,
    num_obs: usize,
    num_actions: usize,
    horizon: usize,
    mix: f64,
    num_models: usize,
    num_decoders: usize,
    rng: &mut (impl Rng + ?Sized),
) -> Result<EnvBundle, LabError> {
    if num_obs < num_states {
        return Err(LabError::Invalid("need at least one observation per state".into()));
    }
    if !(0.0..=1.0).contains(&mix) {
        return Err(LabError::Invalid("mix must lie in [0,1]".into()));
    }
    if num_models == 0 || num_decoders == 0 {
        return Err(LabError::EmptyClass("model or decoder class".into()));
    }

    fn random_model(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        mix: f64,
        rng: &mut (impl Rng + ?Sized),
    ) -> TabularMDP {
        let init = random_prob_row(num_states, rng);
        let trans = (1..horizon)
            .map(|_| {
                let shared = random_prob_row(num_states, rng);
                (0..num_states)
                    .map(|_| {
                        (0..num_actions)
                            .map(|_| {
                                let noise = random_prob_row(num_states, rng);
                                shared
                                    .iter()
                                    .zip(&noise)
                                    .map(|(&s, &n)| (1.0 - mix) * s + mix * n)
                                    .collect()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let reward = (1..=horizon)
            .map(|h| {
                (0..num_states)
                    .map(|_| {
                        (0..num_actions)
                            .map(|_| {
                                if h == horizon {
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
        TabularMDP { horizon, num_states, num_actions, init, trans, reward }
    }

    let base = random_model(num_states, num_actions, horizon, mix, rng);
    let psi = random_emission(num_states, num_obs, horizon, rng);
    let (phi_star, _) = invert_emission(&psi)?;

    let mut decoders = vec![phi_star];
    while decoders.len() < num_decoders {
        let d = crate::oracle::random_decoder(num_states, num_obs, horizon, rng);
        if !decoders.contains(&d) {
            decoders.push(d);
        }
    }
    let decoders = DecoderClass { decoders };

    let mut model_class = vec![base.clone()];
    while model_class.len() < num_models {
        model_class.push(random_model(num_states, num_actions, horizon, mix, rng));
    }

    let mut mismatch_complete = Vec::with_capacity(num_decoders * num_models);
    for phi in &decoders.decoders {
        let gamma = mismatch_kernel(&psi, phi, num_states)?;
        for m in &model_class {
            mismatch_complete.push(mismatch_compose_model(&gamma, m));
        }
    }

    let bundle = EnvBundle {
        name: "random_pushforward".into(),
        n: num_states,
        seed: 0,
        base,
        emissions: vec![psi],
        decoders,
        model_class,
        mismatch_complete: Some(mismatch_complete),
        known_model: false,
    };
    bundle.validate()?;
    Ok(bundle)
}
