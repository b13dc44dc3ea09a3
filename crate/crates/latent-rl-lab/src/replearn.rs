//! Representation learners: hindsight online classification by derandomized
//! exponential weights, and optimistic self-predictive model estimation.

use crate::dist::{hellinger_sq_dense, hellinger_sq_joint};
use crate::error::LabError;
use crate::latent::{Decoder, DecoderClass, LatentDynamicsMDP};
use crate::mdp::{occupancy, value_iteration, Policy, TabularMDP, Trajectory};
use crate::oracle::pushforward_model;

/// Floor applied to probabilities before taking logs: misspecified
/// candidates may assign zero mass to observed outcomes and the argmax must
/// stay total.
pub const LOG_FLOOR: f64 = 1e-12;

/// Derandomized exponential weights over a finite decoder class.
///
/// Per layer, each decoder is weighted by exp(-mistakes); the emitted
/// (improper) decoder labels each observation by the weight-majority label,
/// ties toward the smallest state index.
#[derive(Debug, Clone)]
pub struct ExpWeightsDr {
    pub decoders: DecoderClass,
    pub num_latent: usize,
    /// mistakes[h-1][k]
    pub mistakes: Vec<Vec<u64>>,
    /// How many emissions have been requested (history length).
    pub rounds: usize,
    /// Every decoder emitted so far, in order.
    pub emitted: Vec<Decoder>,
}

impl ExpWeightsDr {
    pub fn new(decoders: DecoderClass, num_latent: usize) -> Result<Self, LabError> {
        decoders.validate()?;
        let horizon = decoders.decoders[0].horizon();
        let mistakes = vec![vec![0; decoders.len()]; horizon];
        Ok(Self { decoders, num_latent, mistakes, rounds: 0, emitted: Vec::new() })
    }

    /// Posterior weights at layer h, normalized, computed in log space.
    pub fn weights(&self, h: usize) -> Vec<f64> {
        let m = &self.mistakes[h - 1];
        let min = m.iter().min().copied().unwrap_or(0);
        let mut w: Vec<f64> = m.iter().map(|&k| (-((k - min) as f64)).exp()).collect();
        let total: f64 = w.iter().sum();
        for x in w.iter_mut() {
            *x /= total;
        }
        w
    }

    /// Majority label of observation x at layer h under the current weights.
    pub fn mode_label(&self, h: usize, x: usize) -> usize {
        let w = self.weights(h);
        let mut score = vec![0.0; self.num_latent];
        for (k, d) in self.decoders.decoders.iter().enumerate() {
            score[d.label(h, x)] += w[k];
        }
        crate::mdp::argmax(&score)
    }

    /// Probability that a weight-drawn decoder labels x differently from
    /// `label`.
    pub fn disagreement(&self, h: usize, x: usize, label: usize) -> f64 {
        let w = self.weights(h);
        self.decoders
            .decoders
            .iter()
            .enumerate()
            .filter(|(_, d)| d.label(h, x) != label)
            .map(|(k, _)| w[k])
            .sum()
    }

    /// Emit the current mode decoder (total over the observation space; not
    /// necessarily a member of the class).
    pub fn emit(&mut self, num_obs: usize) -> Decoder {
        self.rounds += 1;
        let horizon = self.mistakes.len();
        let map = (1..=horizon)
            .map(|h| (0..num_obs).map(|x| self.mode_label(h, x)).collect())
            .collect();
        let out = Decoder { map };
        self.emitted.push(out.clone());
        out
    }

    /// Charge each decoder a mistake at every (layer, observation, true
    /// label) example of the annotated trajectory.
    pub fn update(&mut self, tau: &Trajectory) {
        let labels = tau
            .hindsight
            .as_ref()
            .expect("classification update needs hindsight labels");
        for h in 1..=tau.len() {
            let (x, y) = (tau.states[h - 1], labels[h - 1]);
            for (k, d) in self.decoders.decoders.iter().enumerate() {
                if d.label(h, x) != y {
                    self.mistakes[h - 1][k] += 1;
                }
            }
        }
    }
}

/// Per-cell squared Hellinger distance between a candidate model read
/// through a decoder and the decoder pushforward of the true observation
/// model, plus the matching initial-law term.
#[derive(Debug, Clone)]
pub struct SelfPredError {
    pub init_term: f64,
    /// table[h-1][x][a]
    pub table: Vec<Vec<Vec<f64>>>,
}

pub fn self_pred_error(
    l: &LatentDynamicsMDP,
    candidate: &TabularMDP,
    phi: &Decoder,
) -> SelfPredError {
    let push = pushforward_model(l, phi);
    let init_term = hellinger_sq_dense(&candidate.init, &push.init);
    let table = (1..=l.base.horizon)
        .map(|h| {
            (0..l.obs.num_states)
                .map(|x| {
                    (0..l.base.num_actions)
                        .map(|a| {
                            let model = candidate.joint(h, phi.label(h, x), a);
                            hellinger_sq_joint(&model, &push.entries[h - 1][x][a])
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    SelfPredError { init_term, table }
}

/// Exact expectation of the self-prediction error under a mixture of
/// observation policies (the initial-law term is policy independent).
pub fn expected_self_pred_error(
    l: &LatentDynamicsMDP,
    err: &SelfPredError,
    mixture: &[(f64, Policy)],
) -> Result<f64, LabError> {
    let mut acc = err.init_term;
    for (w, pi) in mixture {
        if *w == 0.0 {
            continue;
        }
        let docc = occupancy(&l.obs, pi)?;
        for h in 0..l.base.horizon {
            for x in 0..l.obs.num_states {
                for a in 0..l.base.num_actions {
                    acc += w * docc.sa[h][x][a] * err.table[h][x][a];
                }
            }
        }
    }
    Ok(acc)
}

/// One emitted estimate of the optimistic self-predictive estimator.
#[derive(Debug, Clone)]
pub struct SelfPredChoice {
    pub model_idx: usize,
    pub decoder_idx: usize,
    pub objective: f64,
    /// Log-floor clamps hit while scoring the chosen pair (outer and
    /// debiasing terms).
    pub clamp_events: usize,
    /// Debiased log-likelihood gap of the chosen pair (outer log-likelihood
    /// minus the inner maximum).
    pub debias_gap: f64,
}

struct ScoredLogLik {
    value: f64,
    clamps: usize,
}

/// Log-likelihood of labeled data under model `m` with conditioning labels
/// from `cond`: initial label at layer 1, then (reward, next label) given
/// (conditioning label, action).
fn loglik(
    m: &TabularMDP,
    cond: &Decoder,
    labels: &Decoder,
    data: &[Trajectory],
) -> ScoredLogLik {
    let mut value = 0.0;
    let mut clamps = 0usize;
    let h_n = m.horizon;
    for tau in data {
        let mut term = |p: f64| {
            if p < LOG_FLOOR {
                clamps += 1;
                value += LOG_FLOOR.ln();
            } else {
                value += p.ln();
            }
        };
        term(m.init[labels.label(1, tau.states[0])]);
        for h in 1..=h_n {
            let s = cond.label(h, tau.states[h - 1]);
            let a = tau.actions[h - 1];
            term(m.reward[h - 1][s][a].prob_of(tau.rewards[h - 1]));
            if h < h_n {
                let s2 = labels.label(h + 1, tau.states[h]);
                term(m.trans[h - 1][s][a][s2]);
            }
        }
    }
    ScoredLogLik { value, clamps }
}

/// One step of the optimistic debiased maximum-likelihood estimator:
/// exhaustive argmax over (model, decoder) of the optimism bonus plus the
/// data log-likelihood minus the best explanation of the same labels by the
/// kernel-composed class. Ties break lexicographically on
/// (model index, decoder index).
pub fn selfpredict_opt_step(
    dataset: &[Trajectory],
    decoders: &DecoderClass,
    model_class: &[TabularMDP],
    mismatch_complete: &[TabularMDP],
    gamma: f64,
    beta: f64,
) -> Result<SelfPredChoice, LabError> {
    if model_class.is_empty() || mismatch_complete.is_empty() {
        return Err(LabError::EmptyClass("model or kernel-composed class".into()));
    }
    decoders.validate()?;
    const CLASS_CAP: usize = 64;
    if model_class.len() > CLASS_CAP
        || decoders.len() > CLASS_CAP
        || mismatch_complete.len() > CLASS_CAP
    {
        return Err(LabError::Invalid(format!(
            "exhaustive argmax capped at {CLASS_CAP} members per class"
        )));
    }

    let opt_values: Vec<f64> = model_class.iter().map(|m| value_iteration(m).j).collect();
    let mut best: Option<(f64, usize, usize, usize, f64)> = None;

    for (di, phi) in decoders.decoders.iter().enumerate() {
        // Inner maximum: best explanation of phi's labels over the composed
        // class with any conditioning decoder.
        let mut debias = f64::NEG_INFINITY;
        let mut debias_clamps = 0usize;
        for m_prime in mismatch_complete {
            for phi_prime in &decoders.decoders {
                let s = loglik(m_prime, phi_prime, phi, dataset);
                if s.value > debias {
                    debias = s.value;
                    debias_clamps = s.clamps;
                }
            }
        }
        for (mi, m) in model_class.iter().enumerate() {
            let outer = loglik(m, phi, phi, dataset);
            let gap = outer.value - debias;
            let objective = opt_values[mi] / (gamma * beta) + gap;
            let clamps = outer.clamps + debias_clamps;
            let better = match &best {
                None => true,
                Some((v, bmi, bdi, _, _)) => {
                    objective > *v + 0.0
                        || (objective == *v && (mi, di) < (*bmi, *bdi))
                }
            };
            if better {
                best = Some((objective, mi, di, clamps, gap));
            }
        }
    }
    let (objective, model_idx, decoder_idx, clamp_events, debias_gap) = best.unwrap();
    Ok(SelfPredChoice { model_idx, decoder_idx, objective, clamp_events, debias_gap })
}

/// Debiased log-likelihood gap of one (model, decoder) pair: its own data
/// log-likelihood of the labels it induces, minus the best explanation of
/// those labels over the kernel-composed class.
pub fn debiased_loglik_gap(
    dataset: &[Trajectory],
    decoders: &DecoderClass,
    model: &TabularMDP,
    phi_idx: usize,
    mismatch_complete: &[TabularMDP],
) -> f64 {
    let phi = &decoders.decoders[phi_idx];
    let outer = loglik(model, phi, phi, dataset).value;
    let mut debias = f64::NEG_INFINITY;
    for m_prime in mismatch_complete {
        for phi_prime in &decoders.decoders {
            debias = debias.max(loglik(m_prime, phi_prime, phi, dataset).value);
        }
    }
    outer - debias
}

/// One row of the self-predictive learner's report.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SelfPredReportRow {
    pub t: usize,
    pub m_hat: usize,
    pub phi_hat: usize,
    pub hellinger_sum: f64,
    pub optimism_gap: f64,
    pub objective: f64,
    pub clamp_events: usize,
}

/// Exact cumulative optimistic self-predictive regret of a sequence of
/// estimates against the policy mixtures that collected the data.
pub fn optimistic_regret(
    l: &LatentDynamicsMDP,
    steps: &[(SelfPredChoice, Vec<(f64, Policy)>)],
    model_class: &[TabularMDP],
    decoders: &DecoderClass,
    gamma: f64,
) -> Result<f64, LabError> {
    let j_star = value_iteration(&l.base).j;
    let mut acc = 0.0;
    for (choice, mixture) in steps {
        let cand = &model_class[choice.model_idx];
        let phi = &decoders.decoders[choice.decoder_idx];
        let err = self_pred_error(l, cand, phi);
        acc += expected_self_pred_error(l, &err, mixture)?;
        acc += (j_star - value_iteration(cand).j) / gamma;
    }
    Ok(acc)
}
