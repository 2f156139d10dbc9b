//! Disentanglement scores over (code, ground-truth factor) pairs.

mod dci;
mod factor_vae;
mod mig;
mod sap;

pub use dci::{dci_d, dci_from_importance, lasso, DciResult};
pub use factor_vae::{factor_vae_score, FactorVaeConfig, FactorVaeResult};
pub use mig::{mig, quantile_bins, MigResult, DEFAULT_BINS};
pub use sap::{sap, SapResult};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::rng::RngStream;
use crate::space::{FactorAssignment, FactorSpace};

/// Maps a batch of assignments to code vectors. The stream lets stochastic
/// representations stay reproducible.
pub type CodeFn<'a> = dyn Fn(&[FactorAssignment], &mut RngStream) -> Result<Vec<Vec<f64>>> + Sync + 'a;

pub const MIN_PROBE: usize = 1000;

/// Codes paired with the factor indices that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSet {
    pub codes: Vec<Vec<f64>>,
    pub factors: Vec<Vec<usize>>,
    pub cardinalities: Vec<usize>,
}

impl ProbeSet {
    pub fn new(codes: Vec<Vec<f64>>, factors: Vec<Vec<usize>>, cardinalities: Vec<usize>) -> Result<Self> {
        if codes.len() != factors.len() || codes.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "probe needs matching non-empty code and factor rows, got {} and {}",
                codes.len(),
                factors.len()
            )));
        }
        let d = codes[0].len();
        if d == 0 || codes.iter().any(|c| c.len() != d) {
            return Err(Error::InvalidArgument("codes differ in dimension".into()));
        }
        if factors
            .iter()
            .any(|f| f.len() != cardinalities.len() || f.iter().zip(&cardinalities).any(|(&v, &c)| v >= c))
        {
            return Err(Error::InvalidArgument("factor row outside the space".into()));
        }
        if codes.len() < MIN_PROBE {
            log::warn!("probe has {} rows; scores are noisy below {MIN_PROBE}", codes.len());
        }
        Ok(Self {
            codes,
            factors,
            cardinalities,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn code_dim(&self) -> usize {
        self.codes[0].len()
    }

    pub fn num_factors(&self) -> usize {
        self.cardinalities.len()
    }

    pub(crate) fn code_column(&self, d: usize) -> Vec<f64> {
        self.codes.iter().map(|c| c[d]).collect()
    }

    pub(crate) fn factor_column(&self, k: usize) -> Vec<usize> {
        self.factors.iter().map(|f| f[k]).collect()
    }
}

/// Draws `n` uniform assignments and encodes them in chunks.
pub fn sample_probe(space: &FactorSpace, encode: &CodeFn, n: usize, rng: &RngStream, exec: Exec) -> Result<ProbeSet> {
    const CHUNK: usize = 256;
    let chunks = n.div_ceil(CHUNK);
    let parts = par::try_map_indexed(exec, chunks, |i| {
        let mut r = rng.substream(i as u64);
        let m = CHUNK.min(n - i * CHUNK);
        let assignments: Vec<FactorAssignment> = (0..m).map(|_| space.sample(&mut r)).collect();
        let codes = encode(&assignments, &mut r)?;
        Ok::<_, Error>((assignments, codes))
    })?;
    let mut codes = Vec::with_capacity(n);
    let mut factors = Vec::with_capacity(n);
    for (a, c) in parts {
        if c.len() != a.len() {
            return Err(Error::InvalidArgument("encoder returned the wrong number of codes".into()));
        }
        factors.extend(a.into_iter().map(|x| x.values));
        codes.extend(c);
    }
    ProbeSet::new(codes, factors, space.cardinalities())
}

/// Population variance of each column.
pub(crate) fn column_variances(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    let d = rows[0].len();
    (0..d)
        .map(|k| {
            let mean = rows.iter().map(|r| r[k]).sum::<f64>() / n;
            rows.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / n
        })
        .collect()
}

/// Sum after sorting, so the result does not depend on input order.
pub(crate) fn ordered_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().collect();
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

/// Largest minus second largest (zero with fewer than two values).
pub(crate) fn top_gap(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    match v.as_slice() {
        [a, b, ..] => a - b,
        _ => 0.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub factor_vae: f64,
    pub dci_d: f64,
    pub mig: f64,
    pub sap: f64,
    pub factor_names: Vec<String>,
    pub mig_per_factor: Vec<Option<f64>>,
    pub sap_per_factor: Vec<f64>,
    pub dci_per_dim: Vec<Option<f64>>,
}

impl MetricReport {
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:>8} {:>8} {:>8} {:>8}\n{:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
            "F-VAE", "DCI-D", "MIG", "SAP", self.factor_vae, self.dci_d, self.mig, self.sap
        );
        s.push_str(&format!("\n{:<20} {:>8} {:>8}\n", "factor", "MIG", "SAP"));
        for (i, name) in self.factor_names.iter().enumerate() {
            let mig = self.mig_per_factor[i].map_or("-".to_string(), |v| format!("{v:.4}"));
            s.push_str(&format!("{:<20} {:>8} {:>8.4}\n", name, mig, self.sap_per_factor[i]));
        }
        s
    }
}

/// All four scores: FactorVAE from fresh votes, the rest on a probe of `probe_size` rows.
pub fn evaluate_all(
    space: &FactorSpace,
    encode: &CodeFn,
    probe_size: usize,
    config: &FactorVaeConfig,
    rng: &RngStream,
    exec: Exec,
) -> Result<MetricReport> {
    let fv = factor_vae_score(space, encode, config, &rng.substream(1), exec)?;
    let probe = sample_probe(space, encode, probe_size, &rng.substream(2), exec)?;
    let m = mig(&probe, DEFAULT_BINS)?;
    let s = sap(&probe)?;
    let d = dci_d(&probe, exec)?;
    Ok(MetricReport {
        factor_vae: fv.score,
        dci_d: d.score,
        mig: m.score,
        sap: s.score,
        factor_names: space.factors().iter().map(|f| f.name.clone()).collect(),
        mig_per_factor: m.per_factor,
        sap_per_factor: s.per_factor,
        dci_per_dim: d.per_dim,
    })
}
