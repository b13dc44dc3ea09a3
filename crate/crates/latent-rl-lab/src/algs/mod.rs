//! Latent-space base algorithms and the value-class pipeline used on
//! observations.

pub mod embed;
pub mod golf;
pub mod ucbvi;

use rand::RngCore;

use crate::error::LabError;
use crate::latent::DecoderClass;
use crate::mdp::{value_iteration, Policy, TabularMDP, Trajectory};

/// A black-box episodic learner operating on (compressed) latent states.
///
/// Implementations must be deterministic given the rng stream and the
/// sequence of observed trajectories, and never see raw observations.
pub trait BaseAlgorithm {
    /// Policy to deploy for the next episode.
    fn next_policy(&mut self, rng: &mut dyn RngCore) -> Policy;
    /// Feed back the compressed trajectory produced by the deployed policy.
    fn observe(&mut self, tau: &Trajectory);
    /// Final policy after the interaction budget is exhausted.
    fn final_policy(&self) -> Policy;
}

/// One observation-level value function with provenance labels.
#[derive(Debug, Clone)]
pub struct ObsValueFunction {
    /// table[h-1][x][a]
    pub table: Vec<Vec<Vec<f64>>>,
    /// (model index, decoder index) that produced this member.
    pub label: (usize, usize),
}

impl ObsValueFunction {
    pub fn state_value(&self, h: usize, x: usize) -> f64 {
        self.table[h - 1][x]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// A finite ordered class of observation-level value functions.
#[derive(Debug, Clone)]
pub struct FiniteQClass {
    pub members: Vec<ObsValueFunction>,
}

impl FiniteQClass {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Relabel each candidate model's optimal Q table through each decoder:
/// the class of optimal values of every (model, decoder) explanation.
/// Duplicates are retained with their labels.
pub fn build_value_class(
    model_class: &[TabularMDP],
    decoders: &DecoderClass,
) -> Result<FiniteQClass, LabError> {
    if model_class.is_empty() {
        return Err(LabError::EmptyClass("model class".into()));
    }
    if decoders.is_empty() {
        return Err(LabError::EmptyClass("decoder class".into()));
    }
    let num_obs = decoders.decoders[0].num_obs();
    let mut members = Vec::with_capacity(model_class.len() * decoders.len());
    for (mi, m) in model_class.iter().enumerate() {
        let vt = value_iteration(m);
        for (di, phi) in decoders.decoders.iter().enumerate() {
            let table = (1..=m.horizon)
                .map(|h| {
                    (0..num_obs)
                        .map(|x| vt.q[h - 1][phi.label(h, x)].clone())
                        .collect()
                })
                .collect();
            members.push(ObsValueFunction { table, label: (mi, di) });
        }
    }
    Ok(FiniteQClass { members })
}
