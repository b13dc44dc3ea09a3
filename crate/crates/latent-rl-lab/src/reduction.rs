//! The observable-to-latent reduction: alternate representation learning with
//! a black-box latent learner run on decoder-compressed trajectories, with
//! exact risk accounting.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::algs::golf::{golf, golf_beta};
use crate::algs::{build_value_class, BaseAlgorithm, FiniteQClass};
use crate::envs::make_tree_env;
use crate::error::LabError;
use crate::latent::{compose_policy, compress_trajectory, Decoder, DecoderClass, LatentDynamicsMDP};
use crate::mdp::{
    occupancy, policy_value, sample_trajectory, value_iteration, Policy, TabularMDP, Trajectory,
};
use crate::oracle::state_action_coverability_all_deterministic;
use crate::replearn::{
    expected_self_pred_error, self_pred_error, selfpredict_opt_step, ExpWeightsDr, SelfPredChoice,
    SelfPredReportRow,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepMode {
    Hindsight,
    SelfPredictive,
}

/// Which trajectories feed the hindsight classifier each epoch. The sampled
/// single-episode scheme is the canonical one; feeding everything is exposed
/// for comparison only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierFeed {
    SampledEpisode,
    AllDataNonCanonical,
}

#[derive(Debug, Clone)]
pub struct ProtocolConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub mode: RepMode,
    pub gamma: Option<f64>,
    pub classifier_feed: ClassifierFeed,
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<(), LabError> {
        if self.epochs == 0 || self.episodes_per_epoch == 0 {
            return Err(LabError::Invalid("epochs and episodes must be positive".into()));
        }
        if self.mode == RepMode::SelfPredictive {
            match self.gamma {
                Some(g) if g > 0.0 => {}
                _ => return Err(LabError::Invalid("self-predictive mode needs gamma > 0".into())),
            }
        }
        Ok(())
    }
}

/// Per-episode metrics; risks are exact (dynamic programming, not sampling).
#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    pub t: usize,
    /// 1..=K for the learner's episodes, K+1 for the final-policy episode.
    pub k: usize,
    pub episode_return: f64,
    pub exact_risk: f64,
    /// Expected fraction of layers where the current decoder agrees with the
    /// true one under the deployed policy.
    pub decoder_correct_rate: f64,
    /// Running expected classification regret (hindsight mode).
    pub class_mistakes_cum: f64,
    /// Most recent estimator objective (self-predictive mode).
    pub selfpred_objective: f64,
}

#[derive(Debug, Clone)]
pub struct O2lOutcome {
    pub records: Vec<EpisodeRecord>,
    /// Uniform mixture over the per-epoch final policies.
    pub mixture: Vec<(f64, Policy)>,
    pub mixture_risk: f64,
    /// Monte-Carlo cross-check from the extra per-epoch episodes.
    pub mixture_risk_mc: f64,
    pub per_epoch_final_risk: Vec<f64>,
    /// Final cumulative expected classification regret (hindsight mode):
    /// per-epoch average over the K+1 deployed episodes, summed over epochs.
    pub est_class: f64,
    /// Episode index sampled for the classifier each epoch (hindsight mode).
    pub class_sample_indices: Vec<usize>,
    pub selfpred_rows: Vec<SelfPredReportRow>,
    /// Estimates with the policy mixtures that collected each epoch's data.
    pub selfpred_steps: Vec<(SelfPredChoice, Vec<(f64, Policy)>)>,
    pub episodes_deployed: usize,
}

/// Fill the hindsight labels of an observation trajectory with the true
/// decoder's labels; (x, a, r) are untouched.
pub fn hindsight_annotate(tau: &Trajectory, phi_star: &Decoder) -> Trajectory {
    let mut out = tau.clone();
    out.hindsight = Some(
        tau.states
            .iter()
            .enumerate()
            .map(|(hi, &x)| phi_star.map[hi][x])
            .collect(),
    );
    out
}

/// Exact risk of a weighted policy mixture: the value of a mixture is the
/// mixture of values.
pub fn risk_eval(m: &TabularMDP, mixture: &[(f64, Policy)]) -> Result<f64, LabError> {
    let j_star = value_iteration(m).j;
    let mut j = 0.0;
    for (w, pi) in mixture {
        j += w * policy_value(m, pi)?.j;
    }
    Ok(j_star - j)
}

/// Expected per-layer decoder agreement and expected classification loss
/// under one deployed observation policy.
fn decoder_stats(
    l: &LatentDynamicsMDP,
    phi_hat: &Decoder,
    pi_obs: &Policy,
) -> Result<(f64, f64), LabError> {
    let docc = occupancy(&l.obs, pi_obs)?;
    let h_n = l.base.horizon;
    let mut agree = 0.0;
    let mut loss = 0.0;
    for h in 1..=h_n {
        for x in 0..l.obs.num_states {
            let d = docc.s[h - 1][x];
            if d == 0.0 {
                continue;
            }
            if phi_hat.label(h, x) == l.true_decoder.label(h, x) {
                agree += d;
            } else {
                loss += d;
            }
        }
    }
    Ok((agree / h_n as f64, loss))
}

pub struct O2lInputs<'a> {
    pub latent: &'a LatentDynamicsMDP,
    pub decoders: &'a DecoderClass,
    /// Candidate base models (self-predictive mode).
    pub model_class: &'a [TabularMDP],
    /// Kernel-composed models (self-predictive mode).
    pub mismatch_complete: &'a [TabularMDP],
}

/// Run the reduction for `epochs` x (`episodes_per_epoch` + 1) episodes.
///
/// Each epoch: the representation learner proposes a decoder, a fresh base
/// instance interacts for K episodes through that decoder (seeing only
/// compressed trajectories), one extra episode is collected from the base's
/// final policy, and the learner state is updated. The returned mixture is
/// uniform over the per-epoch final policies.
pub fn o2l_run(
    inputs: &O2lInputs<'_>,
    base_factory: &mut dyn FnMut() -> Box<dyn BaseAlgorithm>,
    cfg: &ProtocolConfig,
    rng: &mut ChaCha8Rng,
) -> Result<O2lOutcome, LabError> {
    cfg.validate()?;
    let l = inputs.latent;
    let obs = &l.obs;
    let j_star_obs = value_iteration(obs).j;
    let t_n = cfg.epochs;
    let k_n = cfg.episodes_per_epoch;

    let mut classifier = match cfg.mode {
        RepMode::Hindsight => Some(ExpWeightsDr::new(inputs.decoders.clone(), l.base.num_states)?),
        RepMode::SelfPredictive => None,
    };
    let selfpred_beta = if cfg.mode == RepMode::SelfPredictive {
        let cov = state_action_coverability_all_deterministic(&l.base).coefficient;
        0.5 * (cov * l.base.horizon as f64 * (t_n.max(2) as f64).ln() / t_n as f64).sqrt()
    } else {
        0.0
    };

    let mut dataset: Vec<Trajectory> = Vec::new();
    let mut records = Vec::with_capacity(t_n * (k_n + 1));
    let mut mixture = Vec::with_capacity(t_n);
    let mut per_epoch_final_risk = Vec::with_capacity(t_n);
    let mut class_sample_indices = Vec::new();
    let mut selfpred_rows = Vec::new();
    let mut selfpred_steps = Vec::new();
    let mut est_class = 0.0;
    let mut mc_return_sum = 0.0;
    let mut episodes_deployed = 0usize;

    for t in 1..=t_n {
        let (phi_hat, selfpred_choice) = match cfg.mode {
            RepMode::Hindsight => {
                let ew = classifier.as_mut().unwrap();
                (ew.emit(obs.num_states), None)
            }
            RepMode::SelfPredictive => {
                let choice = selfpredict_opt_step(
                    &dataset,
                    inputs.decoders,
                    inputs.model_class,
                    inputs.mismatch_complete,
                    cfg.gamma.unwrap(),
                    selfpred_beta,
                )?;
                let phi = inputs.decoders.decoders[choice.decoder_idx].clone();
                (phi, Some(choice))
            }
        };

        let mut base = base_factory();
        let mut epoch_trajectories = Vec::with_capacity(k_n + 1);
        let mut epoch_policies = Vec::with_capacity(k_n + 1);
        let objective = selfpred_choice.as_ref().map(|c| c.objective).unwrap_or(0.0);

        for k in 1..=k_n + 1 {
            let pi_lat = if k <= k_n { base.next_policy(rng) } else { base.final_policy() };
            let pi_obs = compose_policy(&pi_lat, &phi_hat);
            let tau = sample_trajectory(obs, &pi_obs, rng);
            episodes_deployed += 1;
            if k <= k_n {
                base.observe(&compress_trajectory(&tau, &phi_hat));
            } else {
                mc_return_sum += tau.total_reward();
            }

            let exact_risk = j_star_obs - policy_value(obs, &pi_obs)?.j;
            let (agree, loss) = decoder_stats(l, &phi_hat, &pi_obs)?;
            if cfg.mode == RepMode::Hindsight {
                est_class += loss / (k_n + 1) as f64;
            }
            records.push(EpisodeRecord {
                t,
                k,
                episode_return: tau.total_reward(),
                exact_risk,
                decoder_correct_rate: agree,
                class_mistakes_cum: est_class,
                selfpred_objective: objective,
            });
            if k == k_n + 1 {
                per_epoch_final_risk.push(exact_risk);
                mixture.push((1.0 / t_n as f64, pi_obs.clone()));
            }
            epoch_trajectories.push(tau);
            epoch_policies.push(pi_obs);
        }

        match cfg.mode {
            RepMode::Hindsight => {
                let ew = classifier.as_mut().unwrap();
                match cfg.classifier_feed {
                    ClassifierFeed::SampledEpisode => {
                        let idx = rng.random_range(0..epoch_trajectories.len());
                        class_sample_indices.push(idx);
                        ew.update(&hindsight_annotate(&epoch_trajectories[idx], &l.true_decoder));
                    }
                    ClassifierFeed::AllDataNonCanonical => {
                        for tau in &epoch_trajectories {
                            ew.update(&hindsight_annotate(tau, &l.true_decoder));
                        }
                    }
                }
            }
            RepMode::SelfPredictive => {
                let choice = selfpred_choice.unwrap();
                let w = 1.0 / epoch_policies.len() as f64;
                let mix: Vec<(f64, Policy)> =
                    epoch_policies.iter().map(|p| (w, p.clone())).collect();
                let cand = &inputs.model_class[choice.model_idx];
                let err = self_pred_error(l, cand, &phi_hat);
                let hellinger_sum = expected_self_pred_error(l, &err, &mix)?;
                let optimism_gap = value_iteration(&l.base).j - value_iteration(cand).j;
                selfpred_rows.push(SelfPredReportRow {
                    t,
                    m_hat: choice.model_idx,
                    phi_hat: choice.decoder_idx,
                    hellinger_sum,
                    optimism_gap,
                    objective: choice.objective,
                    clamp_events: choice.clamp_events,
                });
                selfpred_steps.push((choice, mix));
                dataset.extend(epoch_trajectories);
            }
        }
    }

    let mixture_risk = risk_eval(obs, &mixture)?;
    let mixture_risk_mc = j_star_obs - mc_return_sum / t_n as f64;
    debug_assert_eq!(episodes_deployed, t_n * (k_n + 1));
    Ok(O2lOutcome {
        records,
        mixture,
        mixture_risk,
        mixture_risk_mc,
        per_epoch_final_risk,
        est_class,
        class_sample_indices,
        selfpred_rows,
        selfpred_steps,
        episodes_deployed,
    })
}

/// Episodes needed by an algorithm to push its deployed-policy mixture risk
/// below a target on each member of a tree family.
#[derive(Debug, Clone)]
pub struct HardnessArm {
    pub n: usize,
    /// Episodes to target per member draw; `None` means the cap was hit and
    /// the cap value is used for aggregation.
    pub episodes: Vec<Option<usize>>,
    pub median_episodes: f64,
}

/// Median over `draws` uniformly drawn family members of the episodes a
/// value-elimination learner needs to reach the risk target, with and
/// without the oracle decoder.
pub fn hardness_probe(
    family_sizes: &[usize],
    draws: usize,
    risk_target: f64,
    episode_cap: usize,
    oracle_decoder: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<HardnessArm>, LabError> {
    let mut arms = Vec::with_capacity(family_sizes.len());
    for &n in family_sizes {
        let bundle = make_tree_env(n)?;
        let mut episodes = Vec::with_capacity(draws);
        for _ in 0..draws {
            let member_idx = rng.random_range(0..bundle.num_members());
            let member = bundle.member(member_idx)?;
            let f_class: FiniteQClass = if oracle_decoder {
                let only = DecoderClass {
                    decoders: vec![bundle.decoders.decoders[member_idx].clone()],
                };
                build_value_class(&bundle.model_class, &only)?
            } else {
                build_value_class(&bundle.model_class, &bundle.decoders)?
            };
            let beta = golf_beta(
                2.0,
                episode_cap,
                member.obs.horizon,
                f_class.len(),
                f_class.len(),
                0.05,
                0.0,
            );
            let res = golf(&member.obs, &f_class, &f_class, beta, episode_cap, None, rng)?;
            episodes.push(res.rounds_to_mixture_risk(risk_target));
        }
        let mut vals: Vec<f64> = episodes
            .iter()
            .map(|e| e.map(|v| v as f64).unwrap_or(episode_cap as f64))
            .collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median_episodes = median_of_sorted(&vals);
        arms.push(HardnessArm { n, episodes, median_episodes });
    }
    Ok(arms)
}

pub fn median_of_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algs::ucbvi::ucbvi_base;
    use crate::envs::make_cb_env;
    use rand::SeedableRng;

    fn tiny_inputs(bundle: &crate::envs::EnvBundle, member: &LatentDynamicsMDP) {
        let _ = (bundle, member);
    }

    #[test]
    fn protocol_arithmetic_one_epoch_one_episode() {
        let bundle = make_cb_env(4).unwrap();
        let member = bundle.member(1).unwrap();
        tiny_inputs(&bundle, &member);
        let inputs = O2lInputs {
            latent: &member,
            decoders: &bundle.decoders,
            model_class: &bundle.model_class,
            mismatch_complete: &[],
        };
        let cfg = ProtocolConfig {
            epochs: 1,
            episodes_per_epoch: 1,
            mode: RepMode::Hindsight,
            gamma: None,
            classifier_feed: ClassifierFeed::SampledEpisode,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut factory =
            || Box::new(ucbvi_base(4, 4, 1, 1.0)) as Box<dyn crate::algs::BaseAlgorithm>;
        let out = o2l_run(&inputs, &mut factory, &cfg, &mut rng).unwrap();
        assert_eq!(out.episodes_deployed, 2);
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.class_sample_indices.len(), 1);
        assert_eq!(out.mixture.len(), 1);
    }

    #[test]
    fn pinned_truth_with_perfect_base_has_zero_risk() {
        // A base "algorithm" that always plays the latent optimal policy,
        // with the decoder class collapsed to the truth.
        struct Fixed(Policy);
        impl BaseAlgorithm for Fixed {
            fn next_policy(&mut self, _rng: &mut dyn rand::RngCore) -> Policy {
                self.0.clone()
            }
            fn observe(&mut self, _tau: &Trajectory) {}
            fn final_policy(&self) -> Policy {
                self.0.clone()
            }
        }
        let bundle = make_cb_env(4).unwrap();
        let member = bundle.member(2).unwrap();
        let pi_star = value_iteration(&bundle.base).greedy;
        let truth_only = DecoderClass { decoders: vec![member.true_decoder.clone()] };
        let inputs = O2lInputs {
            latent: &member,
            decoders: &truth_only,
            model_class: &bundle.model_class,
            mismatch_complete: &[],
        };
        let cfg = ProtocolConfig {
            epochs: 3,
            episodes_per_epoch: 2,
            mode: RepMode::Hindsight,
            gamma: None,
            classifier_feed: ClassifierFeed::SampledEpisode,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut factory = || Box::new(Fixed(pi_star.clone())) as Box<dyn BaseAlgorithm>;
        let out = o2l_run(&inputs, &mut factory, &cfg, &mut rng).unwrap();
        assert!(out.mixture_risk.abs() < 1e-12);
    }

    #[test]
    fn mixture_risk_is_mean_of_final_policy_risks() {
        let bundle = make_cb_env(4).unwrap();
        let member = bundle.member(0).unwrap();
        let inputs = O2lInputs {
            latent: &member,
            decoders: &bundle.decoders,
            model_class: &bundle.model_class,
            mismatch_complete: &[],
        };
        let cfg = ProtocolConfig {
            epochs: 5,
            episodes_per_epoch: 3,
            mode: RepMode::Hindsight,
            gamma: None,
            classifier_feed: ClassifierFeed::SampledEpisode,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut factory =
            || Box::new(ucbvi_base(4, 4, 1, 1.0)) as Box<dyn crate::algs::BaseAlgorithm>;
        let out = o2l_run(&inputs, &mut factory, &cfg, &mut rng).unwrap();
        let mean: f64 =
            out.per_epoch_final_risk.iter().sum::<f64>() / out.per_epoch_final_risk.len() as f64;
        assert!((out.mixture_risk - mean).abs() < 1e-10);
        assert_eq!(out.episodes_deployed, 5 * 4);
    }

    #[test]
    fn annotation_preserves_observables() {
        let bundle = make_cb_env(5).unwrap();
        let member = bundle.member(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pi = Policy::uniform(crate::mdp::StateSpace::Observation, 1, 5, 5);
        let tau = sample_trajectory(&member.obs, &pi, &mut rng);
        let ann = hindsight_annotate(&tau, &member.true_decoder);
        assert_eq!(ann.states, tau.states);
        assert_eq!(ann.actions, tau.actions);
        assert_eq!(ann.rewards, tau.rewards);
        assert_eq!(
            ann.hindsight.unwrap()[0],
            member.true_decoder.label(1, tau.states[0])
        );
    }

    #[test]
    fn risk_eval_mixture_linearity() {
        let bundle = make_cb_env(4).unwrap();
        let pi_star = value_iteration(&bundle.base).greedy;
        let uniform = Policy::uniform(crate::mdp::StateSpace::Latent, 1, 4, 4);
        let r_opt = risk_eval(&bundle.base, &[(1.0, pi_star.clone())]).unwrap();
        let r_unif = risk_eval(&bundle.base, &[(1.0, uniform.clone())]).unwrap();
        let r_mix = risk_eval(&bundle.base, &[(0.5, pi_star), (0.5, uniform)]).unwrap();
        assert!(r_opt.abs() < 1e-12);
        assert!((r_unif - 0.75).abs() < 1e-12);
        assert!((r_mix - 0.375).abs() < 1e-12);
    }
}
