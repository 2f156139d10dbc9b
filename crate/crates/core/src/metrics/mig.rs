use super::{top_gap, ProbeSet};
use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct MigResult {
    pub score: f64,
    /// `None` for factors that are constant in the probe.
    pub per_factor: Vec<Option<f64>>,
}

/// Equal-mass bins: thresholds are taken at quantiles, so equal values share a
/// bin and any increasing transform of the column gives the same labels.
pub fn quantile_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let thresholds: Vec<f64> = (1..bins).map(|b| sorted[(b * n / bins).min(n - 1)]).collect();
    values
        .iter()
        .map(|&v| thresholds.partition_point(|&t| t <= v))
        .collect()
}

fn entropy(labels: &[usize], card: usize) -> f64 {
    let n = labels.len() as f64;
    let mut counts = vec![0usize; card];
    labels.iter().for_each(|&l| counts[l] += 1);
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn mutual_information(a: &[usize], card_a: usize, b: &[usize], card_b: usize) -> f64 {
    let n = a.len() as f64;
    let mut joint = vec![0usize; card_a * card_b];
    let mut pa = vec![0usize; card_a];
    let mut pb = vec![0usize; card_b];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * card_b + y] += 1;
        pa[x] += 1;
        pb[y] += 1;
    }
    let mut mi = 0.0;
    for x in 0..card_a {
        for y in 0..card_b {
            let c = joint[x * card_b + y];
            if c > 0 {
                let pxy = c as f64 / n;
                mi += pxy * (pxy * n * n / (pa[x] as f64 * pb[y] as f64)).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Mutual information gap, normalized by each factor's entropy.
pub fn mig(probe: &ProbeSet, bins: usize) -> Result<MigResult> {
    if bins < 2 {
        return Err(Error::InvalidArgument("need at least two bins".into()));
    }
    let binned: Vec<Vec<usize>> = (0..probe.code_dim())
        .map(|d| quantile_bins(&probe.code_column(d), bins))
        .collect();
    let mut per_factor = Vec::with_capacity(probe.num_factors());
    for k in 0..probe.num_factors() {
        let f = probe.factor_column(k);
        let card = probe.cardinalities[k];
        let h = entropy(&f, card);
        if h <= 0.0 {
            log::warn!("factor {k} is constant in the probe; excluded from MIG");
            per_factor.push(None);
            continue;
        }
        let mi: Vec<f64> = binned.iter().map(|b| mutual_information(b, bins, &f, card)).collect();
        per_factor.push(Some((top_gap(&mi) / h).clamp(0.0, 1.0)));
    }
    let used: Vec<f64> = per_factor.iter().flatten().copied().collect();
    if used.is_empty() {
        return Err(Error::InvalidArgument("every factor is constant in the probe".into()));
    }
    Ok(MigResult {
        score: used.iter().sum::<f64>() / used.len() as f64,
        per_factor,
    })
}
