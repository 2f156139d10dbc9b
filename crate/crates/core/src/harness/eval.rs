use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::model::{train, Model, CACHE_LIMIT};
use crate::error::Result;
use crate::metrics::{evaluate_all, factor_vae_score, CodeFn, FactorVaeConfig, MetricReport};
use crate::par::{self, Exec};
use crate::puzzle::{generate_batch, RpmInstance};
use crate::reasoner::{build_meta, predict};
use crate::rng::{streams, RngStream};
use crate::space::FactorAssignment;

const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorBreakdown {
    pub factor: String,
    pub puzzles: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub puzzles: usize,
    pub correct: usize,
    pub seed: u64,
    /// Puzzles grouped by each of their rule factors.
    pub per_factor: Vec<FactorBreakdown>,
}

/// Posterior means for every point of a small space, indexed like the space.
fn code_table(model: &Model) -> Result<Option<Vec<Vec<f64>>>> {
    if model.space.total_combinations() > CACHE_LIMIT {
        return Ok(None);
    }
    let all: Vec<FactorAssignment> = model.space.enumerate().collect();
    model.codes(&all).map(Some)
}

fn lookup(model: &Model, table: &Option<Vec<Vec<f64>>>, panels: &[&FactorAssignment]) -> Result<Vec<Vec<f64>>> {
    match table {
        Some(t) => panels
            .iter()
            .map(|a| Ok(t[model.space.index_of(a)? as usize].clone()))
            .collect(),
        None => Ok(model.encode(panels)?.into_iter().map(|p| p.mean).collect()),
    }
}

/// Argmax predictions of the model on `puzzles` (evaluation mode).
pub fn predict_batch(model: &Model, puzzles: &[RpmInstance]) -> Result<Vec<usize>> {
    let table = code_table(model)?;
    let chunks = puzzles.len().div_ceil(EVAL_CHUNK);
    let parts = par::try_map_indexed(model.exec, chunks, |c| {
        let batch = &puzzles[c * EVAL_CHUNK..((c + 1) * EVAL_CHUNK).min(puzzles.len())];
        batch
            .iter()
            .map(|p| {
                let ctx = lookup(model, &table, &p.context())?;
                let choices = lookup(model, &table, &p.choices.iter().collect::<Vec<_>>())?;
                let meta = build_meta(&ctx, &choices)?;
                let logits = model.reasoner.score(&model.store, &meta.candidate_features())?;
                Ok(predict(&logits))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(parts.into_iter().flatten().collect())
}

/// Accuracy on `n` fresh puzzles drawn from the evaluation stream of `seed`.
pub fn evaluate_reasoning(model: &Model, n: usize, seed: u64) -> Result<EvalReport> {
    let puzzles = generate_batch(
        &model.space,
        model.config.rules,
        seed,
        streams::EVAL_PUZZLES,
        0,
        n,
        model.exec,
    )?;
    let predictions = predict_batch(model, &puzzles)?;
    let mut groups: HashMap<usize, (usize, usize)> = HashMap::new();
    let mut correct = 0;
    for (p, &pred) in puzzles.iter().zip(&predictions) {
        let hit = pred == p.answer_index;
        correct += hit as usize;
        for f in p.structure.factors() {
            let e = groups.entry(f).or_default();
            e.0 += 1;
            e.1 += hit as usize;
        }
    }
    let per_factor = model
        .space
        .factors()
        .iter()
        .enumerate()
        .filter_map(|(i, def)| {
            groups.get(&i).map(|&(total, ok)| FactorBreakdown {
                factor: def.name.clone(),
                puzzles: total,
                correct: ok,
                accuracy: ok as f64 / total as f64,
            })
        })
        .collect();
    Ok(EvalReport {
        accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        puzzles: n,
        correct,
        seed,
        per_factor,
    })
}

/// Calls `f` with the model's encoder wrapped as a metric code function.
fn with_code_fn<R>(model: &Model, f: impl FnOnce(&CodeFn) -> Result<R>) -> Result<R> {
    let table = code_table(model)?;
    let encode = move |batch: &[FactorAssignment], _: &mut RngStream| -> Result<Vec<Vec<f64>>> {
        let refs: Vec<&FactorAssignment> = batch.iter().collect();
        lookup(model, &table, &refs)
    };
    f(&encode)
}

pub fn model_factor_vae(model: &Model, config: &FactorVaeConfig, seed: u64) -> Result<f64> {
    let rng = RngStream::new(seed, streams::METRICS);
    with_code_fn(model, |enc| {
        Ok(factor_vae_score(&model.space, enc, config, &rng, model.exec)?.score)
    })
}

pub fn model_metrics(model: &Model, probe_size: usize, config: &FactorVaeConfig, seed: u64) -> Result<MetricReport> {
    let rng = RngStream::new(seed, streams::METRICS);
    with_code_fn(model, |enc| {
        evaluate_all(&model.space, enc, probe_size, config, &rng, model.exec)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub seed: u64,
    pub gamma: f64,
    pub accuracy: f64,
    pub factor_vae: f64,
}

/// Trains and evaluates every (seed, gamma) pair of the grid in turn.
pub fn sweep(base: &TrainConfig, seeds: &[u64], gammas: &[f64], eval_puzzles: usize, exec: Exec) -> Result<Vec<SweepRun>> {
    let mut runs = Vec::new();
    for &gamma in gammas {
        for &seed in seeds {
            let cfg = TrainConfig {
                seed,
                gamma,
                ..base.clone()
            };
            let model = train(cfg, exec, &mut |_| {})?;
            let eval = evaluate_reasoning(&model, eval_puzzles, seed)?;
            let fv = model_factor_vae(&model, &FactorVaeConfig::default(), seed)?;
            runs.push(SweepRun {
                seed,
                gamma,
                accuracy: eval.accuracy,
                factor_vae: fv,
            });
        }
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeroed_reasoner_sits_near_chance() {
        let mut m = Model::new(TrainConfig::desk(), Exec::Parallel).unwrap();
        m.reasoner.zero_output(&mut m.store);
        let r = evaluate_reasoning(&m, 2000, 11).unwrap();
        assert!((r.accuracy - 1.0 / 6.0).abs() <= 0.04, "{}", r.accuracy);
        assert_eq!(r.per_factor.iter().map(|f| f.puzzles).sum::<usize>(), 2000);
        let again = evaluate_reasoning(&m, 2000, 11).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let mut m = Model::new(TrainConfig::desk(), Exec::Sequential).unwrap();
        let a = evaluate_reasoning(&m, 300, 2).unwrap();
        m.exec = Exec::Parallel;
        assert_eq!(a, evaluate_reasoning(&m, 300, 2).unwrap());
    }
}
