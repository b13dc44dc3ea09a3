//! Finite discrete distributions: validation, sampling, and Hellinger distance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::LabError;

/// Tolerance for "probabilities sum to one" checks.
pub const PROB_SUM_TOL: f64 = 1e-12;

/// A finite distribution over real values (reward grids, mostly).
///
/// Support entries are distinct; probabilities are nonnegative and sum to one
/// within [`PROB_SUM_TOL`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteDistribution {
    pub support: Vec<f64>,
    pub probs: Vec<f64>,
}

impl FiniteDistribution {
    pub fn new(support: Vec<f64>, probs: Vec<f64>) -> Result<Self, LabError> {
        let d = Self { support, probs };
        d.validate()?;
        Ok(d)
    }

    /// Point mass at `value`.
    pub fn point(value: f64) -> Self {
        Self { support: vec![value], probs: vec![1.0] }
    }

    /// Bernoulli over {0, 1} with success probability `p`.
    pub fn bernoulli(p: f64) -> Self {
        Self { support: vec![0.0, 1.0], probs: vec![1.0 - p, p] }
    }

    pub fn validate(&self) -> Result<(), LabError> {
        if self.support.len() != self.probs.len() {
            return Err(LabError::Invalid("support/probs length mismatch".into()));
        }
        if self.support.is_empty() {
            return Err(LabError::Invalid("empty distribution".into()));
        }
        if self.probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(LabError::Invalid("negative or non-finite probability".into()));
        }
        let sum: f64 = self.probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(LabError::Invalid(format!("probabilities sum to {sum}, not 1")));
        }
        for i in 0..self.support.len() {
            for j in (i + 1)..self.support.len() {
                if self.support[i] == self.support[j] {
                    return Err(LabError::Invalid(format!(
                        "duplicate support entry {}",
                        self.support[i]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.support.iter().zip(&self.probs).map(|(v, p)| v * p).sum()
    }

    pub fn max_support(&self) -> f64 {
        self.support.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sample(&self, rng: &mut (impl Rng + ?Sized)) -> f64 {
        let i = sample_index(&self.probs, rng);
        self.support[i]
    }

    /// Probability assigned to an exact support value, 0 if absent.
    pub fn prob_of(&self, value: f64) -> f64 {
        self.support
            .iter()
            .position(|&v| v == value)
            .map(|i| self.probs[i])
            .unwrap_or(0.0)
    }
}

/// Squared Hellinger distance between two finite distributions, computed over
/// the union of their supports. Always in [0, 2].
pub fn hellinger_sq(p: &FiniteDistribution, q: &FiniteDistribution) -> f64 {
    let mut values: Vec<f64> = p.support.clone();
    for &v in &q.support {
        if !values.contains(&v) {
            values.push(v);
        }
    }
    let mut acc = 0.0;
    for &v in &values {
        let a = p.prob_of(v);
        let b = q.prob_of(v);
        let d = a.sqrt() - b.sqrt();
        acc += d * d;
    }
    acc
}

/// Squared Hellinger distance between two dense probability vectors of equal
/// length.
pub fn hellinger_sq_dense(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let d = a.sqrt() - b.sqrt();
            d * d
        })
        .sum()
}

/// Total variation distance between two dense probability vectors.
pub fn tv_dense(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    0.5 * p.iter().zip(q).map(|(&a, &b)| (a - b).abs()).sum::<f64>()
}

/// Draw an index from a dense probability vector by inverse CDF.
pub fn sample_index(probs: &[f64], rng: &mut (impl Rng + ?Sized)) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Guard against accumulated rounding: fall back to the last positive cell.
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .expect("sample_index: all-zero probability vector")
}

/// Check that a dense vector is a probability distribution within `tol`.
pub fn is_prob_vec(probs: &[f64], tol: f64) -> bool {
    probs.iter().all(|&p| p >= 0.0 && p.is_finite())
        && (probs.iter().sum::<f64>() - 1.0).abs() <= tol
}

/// Normalize a nonnegative vector in place to sum to one.
pub fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    assert!(s > 0.0, "normalize: zero mass");
    for x in v.iter_mut() {
        *x /= s;
    }
}

/// A joint distribution over (reward value, next-state index).
///
/// Rewards live on a finite grid; next states are dense indices. An entry
/// `probs[r][s]` is the joint probability of reward `rewards[r]` and next
/// state `s`. Terminal layers use a single dummy next state.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDist {
    pub rewards: Vec<f64>,
    /// probs[r_idx][next_state]
    pub probs: Vec<Vec<f64>>,
}

impl JointDist {
    /// Product of an independent reward distribution and next-state law.
    pub fn product(reward: &FiniteDistribution, next: &[f64]) -> Self {
        let probs = reward
            .probs
            .iter()
            .map(|&pr| next.iter().map(|&pn| pr * pn).collect())
            .collect();
        Self { rewards: reward.support.clone(), probs }
    }

    /// Reward-only joint with a single dummy next state.
    pub fn terminal(reward: &FiniteDistribution) -> Self {
        Self::product(reward, &[1.0])
    }

    pub fn total_mass(&self) -> f64 {
        self.probs.iter().map(|row| row.iter().sum::<f64>()).sum()
    }

    pub fn num_next(&self) -> usize {
        self.probs.first().map(|r| r.len()).unwrap_or(0)
    }

    /// Joint probability of an exact reward value and next state.
    pub fn prob_of(&self, reward: f64, next: usize) -> f64 {
        self.rewards
            .iter()
            .position(|&v| v == reward)
            .map(|i| self.probs[i][next])
            .unwrap_or(0.0)
    }

    /// Marginal law of the next state.
    pub fn next_marginal(&self) -> Vec<f64> {
        let n = self.num_next();
        let mut out = vec![0.0; n];
        for row in &self.probs {
            for (s, &p) in row.iter().enumerate() {
                out[s] += p;
            }
        }
        out
    }
}

/// Squared Hellinger distance between two joints, over the union of reward
/// grids and the shared next-state index set.
pub fn hellinger_sq_joint(p: &JointDist, q: &JointDist) -> f64 {
    assert_eq!(p.num_next(), q.num_next(), "joint next-state spaces differ");
    let mut rewards: Vec<f64> = p.rewards.clone();
    for &v in &q.rewards {
        if !rewards.contains(&v) {
            rewards.push(v);
        }
    }
    let n = p.num_next();
    let mut acc = 0.0;
    for &r in &rewards {
        for s in 0..n {
            let a = p.prob_of(r, s);
            let b = q.prob_of(r, s);
            let d = a.sqrt() - b.sqrt();
            acc += d * d;
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hellinger_identical_is_zero() {
        let p = FiniteDistribution::bernoulli(0.3);
        assert_eq!(hellinger_sq(&p, &p), 0.0);
    }

    #[test]
    fn hellinger_disjoint_point_masses_is_two() {
        let p = FiniteDistribution::point(1.0);
        let q = FiniteDistribution::point(0.0);
        assert!((hellinger_sq(&p, &q) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn hellinger_bernoulli_zero_vs_half() {
        let p = FiniteDistribution::bernoulli(0.0);
        let q = FiniteDistribution::bernoulli(0.5);
        let expected = 2.0 - std::f64::consts::SQRT_2;
        assert!((hellinger_sq(&p, &q) - expected).abs() < 1e-12);
    }

    #[test]
    fn invalid_sum_rejected() {
        assert!(FiniteDistribution::new(vec![0.0, 1.0], vec![0.5, 0.4]).is_err());
    }

    #[test]
    fn duplicate_support_rejected() {
        assert!(FiniteDistribution::new(vec![0.5, 0.5], vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn joint_product_mass() {
        let j = JointDist::product(&FiniteDistribution::bernoulli(0.25), &[0.5, 0.5]);
        assert!((j.total_mass() - 1.0).abs() < 1e-15);
        assert_eq!(j.prob_of(1.0, 0), 0.125);
    }
}
