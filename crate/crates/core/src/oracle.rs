//! Ground-truth pipelines: perfectly disentangled codes, an exhaustive solver
//! over factor assignments, and a closed-form dispersion solver.

use crate::error::{Error, Result};
use crate::inference::{self, AttributeMasks, LatentTensor};
use crate::puzzle::{RpmInstance, GRID};
use crate::reasoner::{build_meta, row_std, MetaTensor};
use crate::space::{FactorAssignment, FactorSpace};
use crate::vae::PosteriorGaussian;

pub const ORACLE_LOG_VAR: f64 = -4.0;

/// Factor indices scaled to [-1, 1], followed by `nuisance` zero dimensions.
pub fn oracle_encode(space: &FactorSpace, a: &FactorAssignment, nuisance: usize) -> Result<PosteriorGaussian> {
    space.validate(a)?;
    let k = space.num_factors();
    let mut mean = Vec::with_capacity(k + nuisance);
    for (f, &v) in space.factors().iter().zip(&a.values) {
        mean.push(2.0 * v as f64 / (f.cardinality - 1) as f64 - 1.0);
    }
    mean.resize(k + nuisance, 0.0);
    let mut log_var = vec![ORACLE_LOG_VAR; k];
    log_var.resize(k + nuisance, 0.0);
    PosteriorGaussian::new(mean, log_var)
}

/// Inverse of the factor part of [`oracle_encode`].
pub fn oracle_decode(space: &FactorSpace, code: &[f64]) -> FactorAssignment {
    FactorAssignment::new(
        space
            .factors()
            .iter()
            .zip(code)
            .map(|(f, &m)| ((m + 1.0) * 0.5 * (f.cardinality - 1) as f64).round() as usize)
            .collect(),
    )
}

/// Oracle posteriors for the 8 context panels and 6 choices of a puzzle.
pub fn oracle_latents(space: &FactorSpace, p: &RpmInstance, nuisance: usize) -> Result<LatentTensor> {
    let panels = p
        .context()
        .into_iter()
        .chain(p.choices.iter())
        .map(|a| oracle_encode(space, a, nuisance))
        .collect::<Result<Vec<_>>>()?;
    inference::infer_z_prime(panels)
}

/// Finds the unique choice that keeps every factor constant in both of the
/// first two rows constant in the third. Never reads the withheld cell.
pub fn brute_force_solve(p: &RpmInstance) -> Result<usize> {
    let ctx = p.context();
    if ctx.len() != GRID * GRID - 1 {
        return Err(Error::InvalidArgument("puzzle must have 8 context panels".into()));
    }
    let k = ctx[0].len();
    let constant = |row: &[&FactorAssignment], f: usize| row.iter().all(|a| a[f] == row[0][f]);
    let rule: Vec<usize> = (0..k)
        .filter(|&f| constant(&ctx[0..3], f) && constant(&ctx[3..6], f))
        .collect();
    let consistent: Vec<usize> = p
        .choices
        .iter()
        .enumerate()
        .filter(|(_, c)| rule.iter().all(|&f| ctx[6][f] == ctx[7][f] && c[f] == ctx[6][f]))
        .map(|(i, _)| i)
        .collect();
    match consistent.as_slice() {
        [one] => Ok(*one),
        [] => Err(Error::InvalidArgument("no choice completes the third row".into())),
        many => Err(Error::InvalidArgument(format!(
            "{} choices complete the third row: {many:?}",
            many.len()
        ))),
    }
}

/// Candidate whose completed row has the smallest summed dispersion over the
/// rule dimensions (ties go to the lowest index).
pub fn variance_rule_solve(meta: &MetaTensor, o: &[bool]) -> Result<usize> {
    if !o.iter().any(|&b| b) {
        return Err(Error::InvalidArgument("rule mask is empty".into()));
    }
    let mut best = (f64::INFINITY, 0);
    for (c, row) in meta.rows[2..].iter().enumerate() {
        let s = row_std(row);
        if s.len() != o.len() {
            return Err(Error::InvalidArgument("rule mask/latent dimension mismatch".into()));
        }
        let score: f64 = s.iter().zip(o).filter(|(_, &b)| b).map(|(v, _)| v).sum();
        if score < best.0 {
            best = (score, c);
        }
    }
    Ok(best.1)
}

/// Meta tensor over posterior means.
pub fn meta_from_latents(lt: &LatentTensor) -> Result<MetaTensor> {
    let ctx: Vec<Vec<f64>> = lt.context.iter().map(|p| p.mean.clone()).collect();
    let ch: Vec<Vec<f64>> = lt.choices.iter().map(|p| p.mean.clone()).collect();
    build_meta(&ctx, &ch)
}

/// Outcome of the oracle chain on one batch.
#[derive(Clone, Debug)]
pub struct ChainResult {
    pub o_kn: Vec<bool>,
    pub masks: Vec<AttributeMasks>,
    pub predictions: Vec<usize>,
}

/// Oracle codes, active mask from all panels of the batch, per-puzzle rule
/// masks, and the dispersion solver.
pub fn oracle_chain(space: &FactorSpace, puzzles: &[RpmInstance], nuisance: usize, epsilon: f64, l: usize) -> Result<ChainResult> {
    let latents = puzzles
        .iter()
        .map(|p| oracle_latents(space, p, nuisance))
        .collect::<Result<Vec<_>>>()?;
    let reference: Vec<Vec<f64>> = latents
        .iter()
        .flat_map(|lt| lt.context.iter().chain(&lt.choices))
        .map(|p| p.mean.clone())
        .collect();
    let o_kn = inference::infer_active_mask(&reference, epsilon)?;
    let mut masks = Vec::with_capacity(puzzles.len());
    let mut predictions = Vec::with_capacity(puzzles.len());
    for lt in &latents {
        let (o, _) = inference::infer_rule_mask(lt, &o_kn, l)?;
        predictions.push(variance_rule_solve(&meta_from_latents(lt)?, &o)?);
        masks.push(AttributeMasks {
            o_kn: o_kn.clone(),
            o,
            l,
        });
    }
    Ok(ChainResult {
        o_kn,
        masks,
        predictions,
    })
}
