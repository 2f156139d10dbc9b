use super::{top_gap, ProbeSet};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SapResult {
    pub score: f64,
    pub per_factor: Vec<f64>,
    /// `r2[d][k]`: squared correlation between code dim `d` and factor `k`.
    pub r2: Vec<Vec<f64>>,
}

fn squared_correlation(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0)
}

/// Attribute predictability gap with 1-D least-squares R^2 on factor values scaled to [0, 1].
pub fn sap(probe: &ProbeSet) -> Result<SapResult> {
    if probe.code_dim() < 2 {
        return Err(Error::InvalidArgument("SAP needs at least two code dimensions".into()));
    }
    let factors: Vec<Vec<f64>> = (0..probe.num_factors())
        .map(|k| {
            let c = (probe.cardinalities[k] - 1).max(1) as f64;
            probe.factor_column(k).into_iter().map(|v| v as f64 / c).collect()
        })
        .collect();
    let r2: Vec<Vec<f64>> = (0..probe.code_dim())
        .map(|d| {
            let col = probe.code_column(d);
            factors.iter().map(|f| squared_correlation(&col, f)).collect()
        })
        .collect();
    let per_factor: Vec<f64> = (0..probe.num_factors())
        .map(|k| top_gap(&r2.iter().map(|row| row[k]).collect::<Vec<_>>()))
        .collect();
    Ok(SapResult {
        score: per_factor.iter().sum::<f64>() / per_factor.len() as f64,
        per_factor,
        r2,
    })
}
