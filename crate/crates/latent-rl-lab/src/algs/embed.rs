//! Random low-dimensional embeddings of transition kernels whose clipped
//! linear predictions approximate Bellman backups, plus the finite helper
//! class they induce.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::LabError;
use crate::latent::DecoderClass;
use crate::mdp::TabularMDP;
use crate::oracle::CoverabilityReport;

use super::{FiniteQClass, ObsValueFunction};

/// Clamp to [0, 2].
pub fn clip(x: f64) -> f64 {
    x.clamp(0.0, 2.0)
}

/// Dimension prescribed by the embedding guarantee.
pub fn required_dim(c_push: f64, class_size: usize, layers: usize, eps_apx: f64, delta: f64) -> usize {
    let arg = 16.0 * class_size as f64 * layers as f64 / (delta * eps_apx);
    (512.0 * c_push * arg.ln() / eps_apx).ceil() as usize
}

/// Sign-matrix embedding of an MDP's transition rows against a pushforward
/// witness. The first feature coordinate is the mean reward; the remaining
/// block is the projected, witness-normalized transition row.
#[derive(Debug, Clone)]
pub struct JlEmbedding {
    pub dim: usize,
    /// features[h-1][s][a]: length dim + 1.
    pub features: Vec<Vec<Vec<Vec<f64>>>>,
    /// Witness distribution per layer (covers that layer's states).
    pub witness: Vec<Vec<f64>>,
    /// Sign matrix, dim x num_states, entries +-1.
    pub sign_matrix: Vec<Vec<f64>>,
    pub eps_apx: f64,
    pub matrix_seed: u64,
    /// How many sign matrices were rejected for violating the norm bounds
    /// before this one was accepted.
    pub rejected_draws: usize,
    pub c_push: f64,
    /// Number of backup layers the norm bounds were sized for.
    pub layers: usize,
    pub feature_norm_bound: f64,
}

impl JlEmbedding {
    /// Weight vector for a layered state-value function g (g[h][s] in [0,1],
    /// where g[h] scores layer h+1 states).
    pub fn weights_for(&self, g: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let d = self.dim;
        let mut out = Vec::with_capacity(self.layers);
        for h in 1..=self.layers {
            let mut w = vec![0.0; d + 1];
            w[0] = 1.0;
            let mu = &self.witness[h]; // cover of layer h+1 states
            let target = &g[h - 1];
            for i in 0..d {
                let mut acc = 0.0;
                for (s, &m) in mu.iter().enumerate() {
                    acc += self.sign_matrix[i][s] * m.sqrt() * target[s];
                }
                w[i + 1] = acc / (d as f64).sqrt();
            }
            out.push(w);
        }
        out
    }

    /// Clipped linear prediction of the backup at (h, s, a).
    pub fn predict(&self, h: usize, s: usize, a: usize, w: &[f64]) -> f64 {
        clip(dot(&self.features[h - 1][s][a], w))
    }

    /// Raw (unclipped) inner product.
    pub fn predict_raw(&self, h: usize, s: usize, a: usize, w: &[f64]) -> f64 {
        dot(&self.features[h - 1][s][a], w)
    }

    pub fn weight_norm_bound(&self, class_size: usize) -> f64 {
        16.0 * (class_size as f64 * self.layers as f64).ln() + 11.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Build the embedding for `m` against a pushforward witness.
///
/// `class_size` is the size of the value class the weight vectors will be
/// built for; together with the backup-layer count it sizes the dimension.
/// Draws whose feature norms exceed the guaranteed bound are rejected and
/// redrawn (counted in the result).
pub fn jl_embed(
    m: &TabularMDP,
    witness: &CoverabilityReport,
    class_size: usize,
    eps_apx: f64,
    delta: f64,
    rng: &mut (impl Rng + ?Sized),
) -> Result<JlEmbedding, LabError> {
    let layers = (m.horizon - 1).max(1);
    let dim = required_dim(witness.coefficient, class_size, layers, eps_apx, delta);
    jl_embed_with_dim(m, witness, dim, eps_apx, rng)
}

/// As [`jl_embed`] but at an explicit dimension (scaling studies).
pub fn jl_embed_with_dim(
    m: &TabularMDP,
    witness: &CoverabilityReport,
    dim: usize,
    eps_apx: f64,
    rng: &mut (impl Rng + ?Sized),
) -> Result<JlEmbedding, LabError> {
    let layers = (m.horizon - 1).max(1);
    // Witness cells must cover every positive-probability transition target.
    for h in 2..=m.horizon {
        let mu = &witness.witness[h - 1];
        for s in 0..m.num_states {
            for a in 0..m.num_actions {
                for (s2, &p) in m.trans[h - 2][s][a].iter().enumerate() {
                    if p > 0.0 && mu[s2] <= 0.0 {
                        return Err(LabError::Invalid(format!(
                            "witness assigns zero mass to reachable state {s2} at layer {h}"
                        )));
                    }
                }
            }
        }
    }
    let c_push = witness.coefficient;
    let feature_norm_bound = c_push
        * (16.0 * ((m.num_states * m.num_actions) as f64 * layers as f64).ln() + 11.0);

    let mut rejected = 0usize;
    loop {
        let matrix_seed: u64 = rng.random();
        let mut mrng = ChaCha8Rng::seed_from_u64(matrix_seed);
        let sign_matrix: Vec<Vec<f64>> = (0..dim)
            .map(|_| {
                (0..m.num_states)
                    .map(|_| if mrng.random::<bool>() { 1.0 } else { -1.0 })
                    .collect()
            })
            .collect();

        let mut features = Vec::with_capacity(m.horizon);
        let mut max_norm_sq: f64 = 0.0;
        for h in 1..=m.horizon {
            let mut layer = Vec::with_capacity(m.num_states);
            for s in 0..m.num_states {
                let mut row = Vec::with_capacity(m.num_actions);
                for a in 0..m.num_actions {
                    let mut feat = vec![0.0; dim + 1];
                    feat[0] = m.mean_reward(h, s, a);
                    if h < m.horizon {
                        let mu = &witness.witness[h]; // layer h+1 cover
                        let p_row = &m.trans[h - 1][s][a];
                        for (i, signs) in sign_matrix.iter().enumerate() {
                            let mut acc = 0.0;
                            for (s2, &p) in p_row.iter().enumerate() {
                                if p > 0.0 {
                                    acc += signs[s2] * p / mu[s2].sqrt();
                                }
                            }
                            feat[i + 1] = acc / (dim as f64).sqrt();
                        }
                        let norm_sq = dot(&feat, &feat);
                        max_norm_sq = max_norm_sq.max(norm_sq);
                    }
                    row.push(feat);
                }
                layer.push(row);
            }
            features.push(layer);
        }

        if max_norm_sq <= feature_norm_bound || rejected >= 10 {
            return Ok(JlEmbedding {
                dim,
                features,
                witness: witness.witness.clone(),
                sign_matrix,
                eps_apx,
                matrix_seed,
                rejected_draws: rejected,
                c_push,
                layers,
                feature_norm_bound,
            });
        }
        rejected += 1;
    }
}

/// Mean squared clipped-prediction error of a weight vector against the exact
/// backup, over witness x uniform actions at layer h.
pub fn backup_l2_error(
    m: &TabularMDP,
    emb: &JlEmbedding,
    h: usize,
    w: &[f64],
    g: &[f64],
) -> f64 {
    let mu = &emb.witness[h - 1];
    let mut acc = 0.0;
    for (s, &ms) in mu.iter().enumerate() {
        if ms == 0.0 {
            continue;
        }
        for a in 0..m.num_actions {
            let mut target = m.mean_reward(h, s, a);
            if h < m.horizon {
                for (s2, &p) in m.trans[h - 1][s][a].iter().enumerate() {
                    target += p * g[s2];
                }
            }
            let err = emb.predict(h, s, a, w) - target;
            acc += ms / m.num_actions as f64 * err * err;
        }
    }
    acc
}

/// Quantize a weight vector to a per-coordinate grid of the given resolution.
fn quantize(w: &[f64], resolution: f64) -> Vec<f64> {
    w.iter().map(|&v| (v / resolution).round() * resolution).collect()
}

/// Build the finite helper class of clipped linear predictions.
///
/// For every candidate model's embedding, decoder, and latent target
/// function, the exact weight vector is included (guaranteeing the
/// approximate-completeness error of the embedding), together with its
/// quantized version when a net resolution is supplied. Weight vectors whose
/// squared norm exceeds `weight_norm_bound` are dropped.
pub fn build_completeness_class(
    embeddings: &[(usize, &JlEmbedding)],
    targets: &[(usize, Vec<Vec<f64>>)],
    decoders: &DecoderClass,
    weight_norm_bound: f64,
    net_resolution: Option<f64>,
    num_obs: usize,
    horizon: usize,
) -> Result<FiniteQClass, LabError> {
    if decoders.is_empty() {
        return Err(LabError::EmptyClass("decoder class".into()));
    }
    if embeddings.is_empty() {
        return Err(LabError::EmptyClass("embedding list".into()));
    }
    let mut members = Vec::new();
    for &(mi, emb) in embeddings {
        for (ti, g) in targets {
            let exact = emb.weights_for(g);
            let mut variants = vec![exact.clone()];
            if let Some(res) = net_resolution {
                let snapped: Vec<Vec<f64>> =
                    exact.iter().map(|w| quantize(w, res)).collect();
                if snapped != exact {
                    variants.push(snapped);
                }
            }
            for weights in variants {
                if weights.iter().any(|w| dot(w, w) > weight_norm_bound) {
                    continue;
                }
                for (di, phi) in decoders.decoders.iter().enumerate() {
                    let table: Vec<Vec<Vec<f64>>> = (1..=horizon)
                        .map(|h| {
                            (0..num_obs)
                                .map(|x| {
                                    let s = phi.label(h, x);
                                    (0..emb.features[h - 1][s].len())
                                        .map(|a| {
                                            if h <= emb.layers {
                                                emb.predict(h, s, a, &weights[h - 1])
                                            } else {
                                                // Terminal layer: reward-only feature.
                                                clip(emb.features[h - 1][s][a][0])
                                            }
                                        })
                                        .collect()
                                })
                                .collect()
                        })
                        .collect();
                    members.push(ObsValueFunction { table, label: (mi * targets.len() + ti, di) });
                }
            }
        }
    }
    if members.is_empty() {
        return Err(LabError::EmptyClass("completeness class after norm filtering".into()));
    }
    Ok(FiniteQClass { members })
}
