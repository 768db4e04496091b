//! Probability mass over tracked candidates and the exponential-weighting
//! update that concentrates it on low-error candidates.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hypothesis::CandidateId;

/// Normalization tolerance for the masses.
pub const MASS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistributionError {
    #[error("distribution has no candidates")]
    Empty,
    #[error("candidate {0} is not tracked")]
    Untracked(String),
    #[error("candidate {0} is already tracked")]
    AlreadyTracked(String),
    #[error("invalid delta {delta} for candidate {id}")]
    InvalidDelta { id: String, delta: f64 },
    #[error("invalid lambda {0}")]
    InvalidLambda(f64),
    #[error("posterior has no mass left to normalize")]
    Degenerate,
    #[error("invalid search config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub lambda: f64,
    pub pool_size: usize,
    /// Pool members carried over between iterations; the rest of the pool is
    /// refilled with fresh proposals.
    pub survivors: usize,
    pub exploration_fraction: f64,
    pub newcomer_mass: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            lambda: 2.0,
            pool_size: 8,
            survivors: 4,
            exploration_fraction: 0.25,
            newcomer_mass: 0.5,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), DistributionError> {
        let bad = |m: String| Err(DistributionError::Config(m));
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda = {} must be >= 0", self.lambda));
        }
        if self.pool_size == 0 {
            return bad("pool_size must be >= 1".into());
        }
        if self.survivors == 0 || self.survivors > self.pool_size {
            return bad(format!(
                "survivors = {} must be in 1..={}",
                self.survivors, self.pool_size
            ));
        }
        if !(0.0..=1.0).contains(&self.exploration_fraction) {
            return bad(format!(
                "exploration_fraction = {} must be in [0,1]",
                self.exploration_fraction
            ));
        }
        if !(self.newcomer_mass > 0.0 && self.newcomer_mass < 1.0) {
            return bad(format!("newcomer_mass = {} must be in (0,1)", self.newcomer_mass));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateDistribution {
    entries: BTreeMap<CandidateId, f64>,
    iteration: u64,
}

impl CandidateDistribution {
    /// Point mass on a single candidate.
    pub fn singleton(id: CandidateId) -> Self {
        CandidateDistribution {
            entries: BTreeMap::from([(id, 1.0)]),
            iteration: 0,
        }
    }

    pub fn uniform(ids: impl IntoIterator<Item = CandidateId>) -> Result<Self, DistributionError> {
        let ids: BTreeSet<_> = ids.into_iter().collect();
        if ids.is_empty() {
            return Err(DistributionError::Empty);
        }
        let m = 1.0 / ids.len() as f64;
        Ok(CandidateDistribution {
            entries: ids.into_iter().map(|id| (id, m)).collect(),
            iteration: 0,
        })
    }

    /// Builds a distribution from explicit masses, which must be
    /// non-negative and sum to one.
    pub fn from_masses(
        masses: impl IntoIterator<Item = (CandidateId, f64)>,
        iteration: u64,
    ) -> Result<Self, DistributionError> {
        let entries: BTreeMap<_, _> = masses.into_iter().collect();
        if entries.is_empty() {
            return Err(DistributionError::Empty);
        }
        if entries.values().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(DistributionError::Degenerate);
        }
        let total: f64 = entries.values().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(DistributionError::Degenerate);
        }
        Ok(CandidateDistribution { entries, iteration })
    }

    pub fn mass(&self, id: &CandidateId) -> Option<f64> {
        self.entries.get(id).copied()
    }

    pub fn entries(&self) -> &BTreeMap<CandidateId, f64> {
        &self.entries
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: &CandidateId) -> bool {
        self.entries.contains_key(id)
    }

    pub fn total_mass(&self) -> f64 {
        self.entries.values().sum()
    }

    /// Ids ordered by descending mass, ties by ascending id.
    pub fn ranked(&self) -> Vec<CandidateId> {
        let mut ids: Vec<(CandidateId, f64)> = self.entries.iter().map(|(k, v)| (*k, *v)).collect();
        ids.sort_by(rank_order);
        ids.into_iter().map(|(id, _)| id).collect()
    }
}

fn rank_order(a: &(CandidateId, f64), b: &(CandidateId, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0))
}

/// Exponential-weighting update.
///
/// Every tracked candidate `C` gets `mass(C) * exp(-lambda * d(C))`, then the
/// masses are renormalized. `d(C)` is taken from `pool_deltas` for the
/// evaluated pool; other candidates use `last_known` and default to 1.0.
/// Weights are formed in log space so large `lambda` cannot underflow the
/// whole posterior. `lambda == 0` returns the prior masses unchanged.
pub fn gibbs_update(
    dist: &CandidateDistribution,
    pool_deltas: &BTreeMap<CandidateId, f64>,
    last_known: &BTreeMap<CandidateId, f64>,
    lambda: f64,
) -> Result<CandidateDistribution, DistributionError> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(DistributionError::InvalidLambda(lambda));
    }
    if dist.entries.is_empty() {
        return Err(DistributionError::Empty);
    }
    for (id, d) in pool_deltas {
        if !dist.entries.contains_key(id) {
            return Err(DistributionError::Untracked(id.short()));
        }
        if !(d.is_finite() && *d >= 0.0) {
            return Err(DistributionError::InvalidDelta {
                id: id.short(),
                delta: *d,
            });
        }
    }
    let iteration = dist.iteration + 1;
    if lambda == 0.0 {
        return Ok(CandidateDistribution {
            entries: dist.entries.clone(),
            iteration,
        });
    }

    let log_weights: Vec<(CandidateId, f64)> = dist
        .entries
        .iter()
        .map(|(id, &m)| {
            let d = pool_deltas
                .get(id)
                .or_else(|| last_known.get(id))
                .copied()
                .unwrap_or(1.0);
            let lw = if m > 0.0 { m.ln() - lambda * d } else { f64::NEG_INFINITY };
            (*id, lw)
        })
        .collect();
    let max = log_weights
        .iter()
        .map(|(_, lw)| *lw)
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(DistributionError::Degenerate);
    }
    let scaled: Vec<(CandidateId, f64)> =
        log_weights.into_iter().map(|(id, lw)| (id, (lw - max).exp())).collect();
    let z: f64 = scaled.iter().map(|(_, w)| w).sum();
    if !(z.is_finite() && z > 0.0) {
        return Err(DistributionError::Degenerate);
    }
    Ok(CandidateDistribution {
        entries: scaled.into_iter().map(|(id, w)| (id, w / z)).collect(),
        iteration,
    })
}

/// Picks the evaluated subset `S_t`.
///
/// The exploit share is the highest-mass candidates (ties by id), the
/// exploration share is drawn uniformly from the rest with `seed`. When an
/// incumbent is given it always makes the cut, displacing the weakest exploit
/// pick if needed.
pub fn select_pool(
    dist: &CandidateDistribution,
    pool_size: usize,
    exploration_fraction: f64,
    seed: u64,
    incumbent: Option<&CandidateId>,
) -> Vec<CandidateId> {
    let size = pool_size.max(1).min(dist.len());
    let ranked = dist.ranked();
    let incumbent = incumbent.filter(|id| dist.contains(id));
    let mut n_explore = (exploration_fraction.clamp(0.0, 1.0) * size as f64).floor() as usize;
    if incumbent.is_some() {
        n_explore = n_explore.min(size - 1);
    }
    let n_exploit = size - n_explore;

    let mut exploit: Vec<CandidateId> = ranked.iter().take(n_exploit).copied().collect();
    if let Some(inc) = incumbent {
        if !exploit.contains(inc) {
            exploit.pop();
            exploit.push(*inc);
            let pos = |id: &CandidateId| ranked.iter().position(|r| r == id).unwrap_or(usize::MAX);
            exploit.sort_by_key(pos);
        }
    }
    let chosen: BTreeSet<CandidateId> = exploit.iter().copied().collect();
    let rest: Vec<CandidateId> = ranked.into_iter().filter(|id| !chosen.contains(id)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, rest.len(), n_explore.min(rest.len()));
    exploit.extend(picks.into_iter().map(|i| rest[i]));
    exploit
}

/// Brings `new_ids` into the distribution with `newcomer_mass` split evenly
/// among them; existing mass is scaled by `1 - newcomer_mass`.
pub fn admit_candidates(
    dist: &CandidateDistribution,
    new_ids: &[CandidateId],
    newcomer_mass: f64,
) -> Result<CandidateDistribution, DistributionError> {
    let fresh: BTreeSet<CandidateId> = new_ids.iter().copied().collect();
    if fresh.len() != new_ids.len() {
        return Err(DistributionError::Config("duplicate ids in admission".into()));
    }
    if let Some(id) = fresh.iter().find(|id| dist.contains(id)) {
        return Err(DistributionError::AlreadyTracked(id.short()));
    }
    if fresh.is_empty() {
        return Ok(dist.clone());
    }
    if !(newcomer_mass > 0.0 && newcomer_mass < 1.0) {
        return Err(DistributionError::Config(format!(
            "newcomer_mass = {newcomer_mass} must be in (0,1)"
        )));
    }
    let (keep, share) = if dist.is_empty() {
        (0.0, 1.0 / fresh.len() as f64)
    } else {
        (1.0 - newcomer_mass, newcomer_mass / fresh.len() as f64)
    };
    let mut entries: BTreeMap<CandidateId, f64> =
        dist.entries.iter().map(|(id, m)| (*id, m * keep)).collect();
    entries.extend(fresh.into_iter().map(|id| (id, share)));
    Ok(CandidateDistribution {
        entries,
        iteration: dist.iteration,
    })
}
