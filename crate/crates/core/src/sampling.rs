//! Negative selection for the triplet loss: a per-draw mixture of uniform
//! and distance-weighted sampling.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NegativePolicy {
    /// Probability that a draw is distance-weighted rather than uniform.
    pub hard_fraction: f64,
    pub tau: f64,
    /// Draw from the whole training set instead of the current batch.
    pub full_set: bool,
}

impl Default for NegativePolicy {
    fn default() -> Self {
        NegativePolicy {
            hard_fraction: 0.5,
            tau: 1.0,
            full_set: false,
        }
    }
}

impl NegativePolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return Err(Error::Parameter(format!(
                "neg.hard_fraction must lie in [0, 1], got {}",
                self.hard_fraction
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Parameter(format!("neg.tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Selection weights over `distances` for a hard draw, normalised to sum to 1.
/// Computed relative to the smallest distance so that large pools never
/// underflow to all-zero weights.
pub fn hard_weights(distances: &[f64], tau: f64) -> Vec<f64> {
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = distances.iter().map(|d| (-(d - min) / tau).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Marginal probability of each candidate under the mixture policy.
pub fn selection_probabilities(distances: &[f64], policy: &NegativePolicy) -> Vec<f64> {
    let n = distances.len() as f64;
    hard_weights(distances, policy.tau)
        .into_iter()
        .map(|h| policy.hard_fraction * h + (1.0 - policy.hard_fraction) / n)
        .collect()
}

/// Picks one candidate id. `candidates` pairs ids with their distance to the
/// anchor; ids in `exclude` are never returned.
pub fn sample_negative<R: Rng + ?Sized>(
    rng: &mut R,
    candidates: &[(usize, f64)],
    exclude: &[usize],
    policy: &NegativePolicy,
) -> Result<usize> {
    let pool: Vec<(usize, f64)> = candidates
        .iter()
        .copied()
        .filter(|(id, _)| !exclude.contains(id))
        .collect();
    if pool.is_empty() {
        return Err(Error::Usage("no negative candidates left after exclusion".into()));
    }
    if pool.len() == 1 {
        return Ok(pool[0].0);
    }
    let hard = rng.gen_bool(policy.hard_fraction);
    let pick = if hard {
        let dists: Vec<f64> = pool.iter().map(|c| c.1).collect();
        let weights = hard_weights(&dists, policy.tau);
        WeightedIndex::new(&weights)
            .map_err(|e| Error::Numerical(format!("negative weights: {e}")))?
            .sample(rng)
    } else {
        rng.gen_range(0..pool.len())
    };
    Ok(pool[pick].0)
}
