//! Constructed codes and a one-call scorer for the metric tests.

use rand_distr::StandardNormal;
use rand::Rng;
use rpmlab::metrics::{self, dci_d, factor_vae_score, mig, sap, CodeFn, FactorVaeConfig, DEFAULT_BINS};
use rpmlab::oracle::oracle_encode;
use rpmlab::par::Exec;
use rpmlab::rng::RngStream;
use rpmlab::space::{FactorAssignment, FactorSpace};

pub fn space() -> FactorSpace {
    FactorSpace::preset("dsprites-like").unwrap()
}

pub fn oracle_codes(space: &FactorSpace, a: &[FactorAssignment], nuisance: usize) -> Vec<Vec<f64>> {
    a.iter().map(|x| oracle_encode(space, x, nuisance).unwrap().mean).collect()
}

/// Oracle codes plus Gaussian noise whose variance is `1/snr` of the signal's.
pub fn noisy(space: &FactorSpace, a: &[FactorAssignment], snr: f64, rng: &mut RngStream) -> Vec<Vec<f64>> {
    oracle_codes(space, a, 0)
        .into_iter()
        .map(|c| {
            c.into_iter()
                .map(|v| v + (0.6 / snr).sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

pub fn transform(codes: Vec<Vec<f64>>, perm: &[usize], scale: &[f64]) -> Vec<Vec<f64>> {
    codes
        .into_iter()
        .map(|c| perm.iter().zip(scale).map(|(&p, &s)| c[p] * s).collect())
        .collect()
}

pub struct Scores {
    pub fvae: f64,
    pub mig: f64,
    pub sap: f64,
    pub dci: f64,
}

pub fn scores(space: &FactorSpace, encode: &CodeFn, n: usize, seed: u64) -> Scores {
    let rng = RngStream::new(seed, 0);
    let fv = factor_vae_score(space, encode, &FactorVaeConfig::default(), &rng, Exec::Parallel).unwrap();
    let probe = metrics::sample_probe(space, encode, n, &rng.substream(9), Exec::Parallel).unwrap();
    Scores {
        fvae: fv.score,
        mig: mig(&probe, DEFAULT_BINS).unwrap().score,
        sap: sap(&probe).unwrap().score,
        dci: dci_d(&probe, Exec::Parallel).unwrap().score,
    }
}
