//! Posterior chain over a puzzle's panels: per-panel codes, the active-dimension
//! mask, the rule mask from within-row divergences, and row-consistent codes.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::puzzle::{GRID, NUM_CHOICES};
use crate::vae::{gaussian_kl, PosteriorGaussian};

pub const CONTEXT_PANELS: usize = GRID * GRID - 1;
pub const PANELS: usize = CONTEXT_PANELS + NUM_CHOICES;
pub const DEFAULT_EPSILON: f64 = 0.05;
pub const MIN_REFERENCE: usize = 32;
pub const REFERENCE_CAPACITY: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Raw,
    Consistent,
}

/// Posteriors of the 8 context panels (row-major) and the 6 choices.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor {
    pub context: Vec<PosteriorGaussian>,
    pub choices: Vec<PosteriorGaussian>,
    pub stage: Stage,
}

impl LatentTensor {
    /// Wraps 14 per-panel posteriors (8 context then 6 choices).
    pub fn from_panels(mut panels: Vec<PosteriorGaussian>) -> Result<Self> {
        if panels.len() != PANELS {
            return Err(Error::InvalidArgument(format!(
                "expected {PANELS} panel posteriors, got {}",
                panels.len()
            )));
        }
        let dim = panels[0].dim();
        if panels.iter().any(|p| p.dim() != dim) {
            return Err(Error::InvalidArgument("panel posteriors differ in dimension".into()));
        }
        let choices = panels.split_off(CONTEXT_PANELS);
        Ok(Self {
            context: panels,
            choices,
            stage: Stage::Raw,
        })
    }

    pub fn dim(&self) -> usize {
        self.context[0].dim()
    }

    /// Known panels of context row `row` (the last row has two).
    pub fn row(&self, row: usize) -> &[PosteriorGaussian] {
        let start = row * GRID;
        &self.context[start..(start + GRID).min(CONTEXT_PANELS)]
    }
}

/// Builds the raw latent tensor from an encoder's per-panel output.
pub fn infer_z_prime(posteriors: Vec<PosteriorGaussian>) -> Result<LatentTensor> {
    LatentTensor::from_panels(posteriors)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeMasks {
    pub o_kn: Vec<bool>,
    pub o: Vec<bool>,
    pub l: usize,
}

impl AttributeMasks {
    pub fn validate(&self) -> Result<()> {
        if self.o.len() != self.o_kn.len() {
            return Err(Error::InvalidArgument("mask lengths differ".into()));
        }
        if self.o.iter().zip(&self.o_kn).any(|(&o, &a)| o && !a) {
            return Err(Error::InvalidArgument("rule mask selects an inactive dimension".into()));
        }
        if popcount(&self.o) != self.l {
            return Err(Error::InvalidArgument(format!(
                "rule mask has {} bits, expected {}",
                popcount(&self.o),
                self.l
            )));
        }
        Ok(())
    }

    pub fn rule_dims(&self) -> Vec<usize> {
        self.o.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }
}

pub fn popcount(mask: &[bool]) -> usize {
    mask.iter().filter(|&&b| b).count()
}

/// Population variance of each dimension over a set of mean vectors.
pub fn mean_variances(means: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = means.first() else {
        return Err(Error::InvalidArgument("empty reference batch".into()));
    };
    let d = first.len();
    let n = means.len() as f64;
    let mut mu = vec![0.0; d];
    for m in means {
        if m.len() != d {
            return Err(Error::InvalidArgument("reference means differ in dimension".into()));
        }
        for (a, &v) in mu.iter_mut().zip(m) {
            *a += v;
        }
    }
    mu.iter_mut().for_each(|v| *v /= n);
    let mut var = vec![0.0; d];
    for m in means {
        for k in 0..d {
            var[k] += (m[k] - mu[k]).powi(2);
        }
    }
    Ok(var.into_iter().map(|v| v / n).collect())
}

/// Dimensions whose posterior means vary by more than `epsilon` across the batch.
pub fn infer_active_mask(means: &[Vec<f64>], epsilon: f64) -> Result<Vec<bool>> {
    if means.is_empty() {
        return Err(Error::InvalidArgument("empty reference batch".into()));
    }
    if means.len() < MIN_REFERENCE {
        return Err(Error::InvalidArgument(format!(
            "reference batch has {} means, need at least {MIN_REFERENCE}",
            means.len()
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("threshold must be positive, got {epsilon}")));
    }
    Ok(mean_variances(means)?.into_iter().map(|v| v > epsilon).collect())
}

/// Adds the highest-variance inactive dimensions until at least `l` are active.
pub fn augment_active_mask(o_kn: &[bool], variances: &[f64], l: usize) -> Vec<bool> {
    let mut mask = o_kn.to_vec();
    let mut idle: Vec<usize> = (0..mask.len()).filter(|&k| !mask[k]).collect();
    idle.sort_by(|&a, &b| variances[b].total_cmp(&variances[a]).then(a.cmp(&b)));
    for k in idle.into_iter().take(l.saturating_sub(popcount(o_kn))) {
        mask[k] = true;
    }
    mask
}

/// The most recent panel means, used as the population for the active mask.
#[derive(Clone, Debug)]
pub struct RollingReference {
    capacity: usize,
    means: VecDeque<Vec<f64>>,
}

impl Default for RollingReference {
    fn default() -> Self {
        Self::new(REFERENCE_CAPACITY)
    }
}

impl RollingReference {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            means: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, mean: Vec<f64>) {
        if self.means.len() == self.capacity {
            self.means.pop_front();
        }
        self.means.push_back(mean);
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn means(&self) -> Vec<Vec<f64>> {
        self.means.iter().cloned().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceProfile {
    pub delta_kl: Vec<f64>,
}

/// `(1/27) * sum over rows, and ordered pairs (j, m) within a row, of
/// KL(q_j || q_m)` per dimension.
pub fn delta_kl(rows: &[&[PosteriorGaussian]]) -> Result<DivergenceProfile> {
    let d = rows
        .iter()
        .flat_map(|r| r.iter())
        .map(|p| p.dim())
        .next()
        .ok_or_else(|| Error::InvalidArgument("no panels".into()))?;
    let norm = (GRID * GRID * GRID) as f64;
    let mut out = vec![0.0; d];
    for row in rows {
        for a in row.iter() {
            for b in row.iter() {
                if a.dim() != d || b.dim() != d {
                    return Err(Error::InvalidArgument("panel posteriors differ in dimension".into()));
                }
                for k in 0..d {
                    out[k] += gaussian_kl(a.mean[k], a.log_var[k], b.mean[k], b.log_var[k]);
                }
            }
        }
    }
    Ok(DivergenceProfile {
        delta_kl: out.into_iter().map(|v| v / norm).collect(),
    })
}

/// Selects the `l` active dimensions with the lowest within-row divergence over
/// the context panels (ties go to the lower index).
pub fn infer_rule_mask(latent: &LatentTensor, o_kn: &[bool], l: usize) -> Result<(Vec<bool>, DivergenceProfile)> {
    if o_kn.len() != latent.dim() {
        return Err(Error::InvalidArgument(format!(
            "active mask has {} bits, latent dim is {}",
            o_kn.len(),
            latent.dim()
        )));
    }
    let active = popcount(o_kn);
    if l > active {
        return Err(Error::InvalidArgument(format!(
            "rule count {l} exceeds the {active} active dimensions"
        )));
    }
    let rows: Vec<&[PosteriorGaussian]> = (0..GRID).map(|r| latent.row(r)).collect();
    let profile = delta_kl(&rows)?;
    let mut candidates: Vec<usize> = (0..o_kn.len()).filter(|&k| o_kn[k]).collect();
    candidates.sort_by(|&a, &b| profile.delta_kl[a].total_cmp(&profile.delta_kl[b]).then(a.cmp(&b)));
    let mut o = vec![false; o_kn.len()];
    for &k in candidates.iter().take(l) {
        o[k] = true;
    }
    Ok((o, profile))
}

/// Where each output dimension of [`factor_consistency`] comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimSource {
    AveragedRule,
    ActivePassThrough,
    NuisancePassThrough,
}

pub fn dimension_sources(masks: &AttributeMasks) -> Vec<DimSource> {
    masks
        .o
        .iter()
        .zip(&masks.o_kn)
        .map(|(&o, &a)| match (o, a) {
            (true, _) => DimSource::AveragedRule,
            (false, true) => DimSource::ActivePassThrough,
            (false, false) => DimSource::NuisancePassThrough,
        })
        .collect()
}

/// Replaces rule-dimension means by their row average. When `completion` names
/// a choice, that choice fills the last row and is averaged with it.
/// Log-variances are left untouched.
pub fn factor_consistency(latent: &LatentTensor, masks: &AttributeMasks, completion: Option<usize>) -> Result<LatentTensor> {
    if latent.stage != Stage::Raw {
        return Err(Error::InvalidArgument("latent tensor is already consistent".into()));
    }
    masks.validate()?;
    if masks.o.len() != latent.dim() {
        return Err(Error::InvalidArgument("mask/latent dimension mismatch".into()));
    }
    if completion.is_some_and(|c| c >= latent.choices.len()) {
        return Err(Error::IndexOutOfRange {
            index: completion.unwrap_or(0) as u64,
            total: latent.choices.len() as u64,
        });
    }
    let mut out = latent.clone();
    let rule = masks.rule_dims();
    for row in 0..GRID {
        let mut members: Vec<&PosteriorGaussian> = latent.row(row).iter().collect();
        if row == GRID - 1 {
            if let Some(c) = completion {
                members.push(&latent.choices[c]);
            }
        }
        let n = members.len() as f64;
        for &k in &rule {
            let avg = members.iter().map(|p| p.mean[k]).sum::<f64>() / n;
            let start = row * GRID;
            for p in &mut out.context[start..(start + GRID).min(CONTEXT_PANELS)] {
                p.mean[k] = avg;
            }
            if row == GRID - 1 {
                if let Some(c) = completion {
                    out.choices[c].mean[k] = avg;
                }
            }
        }
    }
    out.stage = Stage::Consistent;
    Ok(out)
}

/// Per-puzzle diagnostic record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub delta_kl: Vec<f64>,
    pub o_kn: Vec<u8>,
    pub o: Vec<u8>,
}

impl Diagnostics {
    pub fn new(profile: &DivergenceProfile, masks: &AttributeMasks) -> Self {
        let bits = |m: &[bool]| m.iter().map(|&b| b as u8).collect();
        Self {
            delta_kl: profile.delta_kl.clone(),
            o_kn: bits(&masks.o_kn),
            o: bits(&masks.o),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn post(mean: &[f64], lv: f64) -> PosteriorGaussian {
        PosteriorGaussian::new(mean.to_vec(), vec![lv; mean.len()]).unwrap()
    }

    fn tensor(f: impl Fn(usize) -> Vec<f64>) -> LatentTensor {
        LatentTensor::from_panels((0..PANELS).map(|i| post(&f(i), 0.0)).collect()).unwrap()
    }

    #[test]
    fn active_mask_threshold() {
        // columns with variance 0.5, 0.0, 0.3
        let means: Vec<Vec<f64>> = (0..32)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                vec![s * 0.5f64.sqrt(), 0.0, s * 0.3f64.sqrt()]
            })
            .collect();
        let v = mean_variances(&means).unwrap();
        assert!((v[0] - 0.5).abs() < 1e-12 && v[1] == 0.0 && (v[2] - 0.3).abs() < 1e-12);
        assert_eq!(infer_active_mask(&means, 0.05).unwrap(), vec![true, false, true]);
        assert!(infer_active_mask(&[], 0.05).is_err());
        assert!(infer_active_mask(&means[..4], 0.05).is_err());
    }

    #[test]
    fn hand_computed_divergence() {
        let row = [post(&[-1.0], 0.0), post(&[0.0], 0.0), post(&[1.0], 0.0)];
        let p = delta_kl(&[&row, &row, &row]).unwrap();
        assert!((p.delta_kl[0] - 18.0 / 27.0).abs() < 1e-10);
    }

    #[test]
    fn identical_rows_have_zero_divergence_and_are_selected() {
        let lt = tensor(|i| vec![(i / 3) as f64, i as f64 * 0.3]);
        let (o, p) = infer_rule_mask(&lt, &[true, true], 1).unwrap();
        assert_eq!(p.delta_kl[0], 0.0);
        assert_eq!(o, vec![true, false]);
        assert!(infer_rule_mask(&lt, &[true, false], 2).is_err());
    }

    #[test]
    fn ties_go_to_lower_index() {
        let lt = tensor(|_| vec![0.0, 0.0, 0.0]);
        let (o, _) = infer_rule_mask(&lt, &[false, true, true], 1).unwrap();
        assert_eq!(o, vec![false, true, false]);
    }

    #[test]
    fn consistency_averages_rule_dims_only() {
        let lt = tensor(|i| vec![0.2 * (i % 3 + 1) as f64, i as f64]);
        let masks = AttributeMasks {
            o_kn: vec![true, true],
            o: vec![true, false],
            l: 1,
        };
        let c = factor_consistency(&lt, &masks, None).unwrap();
        for p in &c.context[..6] {
            assert!((p.mean[0] - 0.4).abs() < 1e-12);
        }
        assert!((c.context[6].mean[0] - 0.3).abs() < 1e-12);
        for (a, b) in c.context.iter().zip(&lt.context) {
            assert_eq!(a.mean[1], b.mean[1]);
            assert_eq!(a.log_var, b.log_var);
        }
        assert!(factor_consistency(&c, &masks, None).is_err());
        let mut again = c.clone();
        again.stage = Stage::Raw;
        let twice = factor_consistency(&again, &masks, None).unwrap();
        assert_eq!(twice.context, c.context);

        let none = AttributeMasks {
            o_kn: vec![true, true],
            o: vec![false, false],
            l: 0,
        };
        let same = factor_consistency(&lt, &none, Some(2)).unwrap();
        assert_eq!(same.context, lt.context);
        assert_eq!(same.choices, lt.choices);
    }

    #[test]
    fn completion_joins_last_row() {
        let lt = tensor(|i| vec![i as f64]);
        let masks = AttributeMasks {
            o_kn: vec![true],
            o: vec![true],
            l: 1,
        };
        let c = factor_consistency(&lt, &masks, Some(1)).unwrap();
        let avg = (6.0 + 7.0 + 9.0) / 3.0;
        assert_eq!(c.context[6].mean[0], avg);
        assert_eq!(c.choices[1].mean[0], avg);
        assert_eq!(c.choices[0].mean[0], 8.0);
    }

    #[test]
    fn sources_partition_dimensions() {
        let masks = AttributeMasks {
            o_kn: vec![true, true, false],
            o: vec![false, true, false],
            l: 1,
        };
        assert_eq!(
            dimension_sources(&masks),
            vec![DimSource::ActivePassThrough, DimSource::AveragedRule, DimSource::NuisancePassThrough]
        );
    }

    #[test]
    fn augmentation_prefers_high_variance() {
        let m = augment_active_mask(&[false, false, true], &[0.01, 0.02, 0.5], 2);
        assert_eq!(m, vec![false, true, true]);
        assert_eq!(augment_active_mask(&[true, true], &[1.0, 1.0], 1), vec![true, true]);
    }

    #[test]
    fn rolling_reference_keeps_recent() {
        let mut r = RollingReference::new(3);
        for i in 0..5 {
            r.push(vec![i as f64]);
        }
        assert_eq!(r.means(), vec![vec![2.0], vec![3.0], vec![4.0]]);
    }

    #[test]
    fn panel_count_checked() {
        assert!(infer_z_prime(vec![post(&[0.0], 0.0); 13]).is_err());
    }
}
