use serde::{Deserialize, Serialize};

use super::{column_variances, CodeFn};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::rng::RngStream;
use crate::space::{FactorAssignment, FactorSpace};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorVaeConfig {
    pub batch: usize,
    pub train_votes: usize,
    pub eval_votes: usize,
    pub prune_threshold: f64,
    pub global_samples: usize,
}

impl Default for FactorVaeConfig {
    fn default() -> Self {
        Self {
            batch: 64,
            train_votes: 800,
            eval_votes: 200,
            prune_threshold: 0.05,
            global_samples: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorVaeResult {
    pub score: f64,
    /// Dimensions kept after the variance prune.
    pub active_dims: Vec<usize>,
    /// Majority factor assigned to each kept dimension.
    pub classifier: Vec<Option<usize>>,
}

/// Fix one factor, sample a batch sharing it, and vote for the kept dimension
/// with the smallest variance relative to its global variance.
fn vote(
    space: &FactorSpace,
    encode: &CodeFn,
    config: &FactorVaeConfig,
    global: &[f64],
    active: &[usize],
    rng: &mut RngStream,
) -> Result<(usize, usize)> {
    let k = rng.random_range(0..space.num_factors());
    let value = rng.random_range(0..space.factors()[k].cardinality);
    let batch: Vec<FactorAssignment> = (0..config.batch)
        .map(|_| {
            let mut a = space.sample(rng);
            a.values[k] = value;
            a
        })
        .collect();
    let codes = encode(&batch, rng)?;
    let var = column_variances(&codes);
    let mut best = active[0];
    for &d in active {
        if var[d] / global[d] < var[best] / global[best] {
            best = d;
        }
    }
    Ok((best, k))
}

pub fn factor_vae_score(
    space: &FactorSpace,
    encode: &CodeFn,
    config: &FactorVaeConfig,
    rng: &RngStream,
    exec: Exec,
) -> Result<FactorVaeResult> {
    if config.batch < 2 || config.train_votes == 0 || config.eval_votes == 0 {
        return Err(Error::InvalidArgument("factor-vae votes need batch >= 2 and positive vote counts".into()));
    }
    let mut g = rng.substream(u64::MAX);
    let sample: Vec<FactorAssignment> = (0..config.global_samples.max(2)).map(|_| space.sample(&mut g)).collect();
    let global = column_variances(&encode(&sample, &mut g)?);
    let active: Vec<usize> = (0..global.len()).filter(|&d| global[d] >= config.prune_threshold).collect();
    if active.is_empty() {
        return Err(Error::InvalidArgument("every code dimension was pruned".into()));
    }
    let total = config.train_votes + config.eval_votes;
    let votes = par::try_map_indexed(exec, total, |i| {
        vote(space, encode, config, &global, &active, &mut rng.substream(i as u64))
    })?;
    let k = space.num_factors();
    let mut counts = vec![vec![0usize; k]; global.len()];
    for &(d, f) in &votes[..config.train_votes] {
        counts[d][f] += 1;
    }
    let classifier: Vec<Option<usize>> = counts
        .iter()
        .map(|c| {
            let best = (0..k).fold(0, |b, f| if c[f] > c[b] { f } else { b });
            (c[best] > 0).then_some(best)
        })
        .collect();
    let correct = votes[config.train_votes..]
        .iter()
        .filter(|&&(d, f)| classifier[d] == Some(f))
        .count();
    Ok(FactorVaeResult {
        score: correct as f64 / config.eval_votes as f64,
        classifier: active.iter().map(|&d| classifier[d]).collect(),
        active_dims: active,
    })
}
