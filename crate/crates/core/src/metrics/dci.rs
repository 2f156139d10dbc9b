use std::cmp::Ordering;

use super::{ordered_sum, ProbeSet};
use crate::error::Result;
use crate::par::{self, Exec};

const FOLDS: usize = 5;
const LAMBDA_FRACTIONS: [f64; 9] = [0.5, 0.2, 0.1, 0.05, 0.02, 0.01, 0.005, 0.002, 0.001];
const MAX_SWEEPS: usize = 10_000;
const TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct DciResult {
    pub score: f64,
    /// Disentanglement of each code dimension; `None` where it has no importance.
    pub per_dim: Vec<Option<f64>>,
    /// `importance[d][k]`: weight magnitude of dim `d` in the predictor of factor `k`.
    pub importance: Vec<Vec<f64>>,
    pub lambdas: Vec<f64>,
}

/// Importance-weighted mean of `1 - H_K(p_d)` where `p_d` is row `d` of the
/// importance matrix normalized to sum to one.
pub fn dci_from_importance(importance: &[Vec<f64>]) -> (f64, Vec<Option<f64>>) {
    let k = importance.first().map_or(0, |r| r.len());
    let total = ordered_sum(importance.iter().flatten().copied());
    let per_dim: Vec<Option<f64>> = importance
        .iter()
        .map(|row| {
            let s = ordered_sum(row.iter().copied());
            if s <= 0.0 {
                return None;
            }
            if k < 2 {
                return Some(1.0);
            }
            let h = ordered_sum(row.iter().filter(|&&v| v > 0.0).map(|&v| {
                let p = v / s;
                -p * p.ln()
            }));
            Some((1.0 - h / (k as f64).ln()).clamp(0.0, 1.0))
        })
        .collect();
    if total <= 0.0 {
        return (0.0, per_dim);
    }
    let weights: Vec<f64> = importance.iter().map(|row| ordered_sum(row.iter().copied())).collect();
    let weighted = ordered_sum(weights.iter().zip(&per_dim).filter_map(|(w, d)| d.map(|d| d * w)));
    let score = weighted / ordered_sum(weights.iter().copied());
    (score.clamp(0.0, 1.0), per_dim)
}

/// Lasso by cyclic coordinate descent on centered sufficient statistics:
/// minimizes `(1/2n)|y - Xw|^2 + lambda |w|_1` given `gram = X'X` and `xty = X'y`.
pub fn lasso(gram: &[f64], xty: &[f64], n: usize, lambda: f64) -> Vec<f64> {
    let p = xty.len();
    let n = n as f64;
    let mut w = vec![0.0; p];
    for _ in 0..MAX_SWEEPS {
        let mut change = 0.0f64;
        for j in 0..p {
            let gjj = gram[j * p + j] / n;
            if gjj <= 0.0 {
                continue;
            }
            let mut rho = xty[j] / n;
            for i in 0..p {
                if i != j {
                    rho -= gram[j * p + i] * w[i] / n;
                }
            }
            let next = if rho > lambda {
                (rho - lambda) / gjj
            } else if rho < -lambda {
                (rho + lambda) / gjj
            } else {
                0.0
            };
            change = change.max((next - w[j]).abs());
            w[j] = next;
        }
        if change < TOLERANCE {
            break;
        }
    }
    w
}

struct Fit {
    x_mean: Vec<f64>,
    y_mean: f64,
    gram: Vec<f64>,
    xty: Vec<f64>,
    n: usize,
}

fn statistics(cols: &[Vec<f64>], y: &[f64], rows: &[usize]) -> Fit {
    let p = cols.len();
    let n = rows.len() as f64;
    let x_mean: Vec<f64> = cols.iter().map(|c| rows.iter().map(|&r| c[r]).sum::<f64>() / n).collect();
    let y_mean = rows.iter().map(|&r| y[r]).sum::<f64>() / n;
    let mut gram = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    for &r in rows {
        let yc = y[r] - y_mean;
        for i in 0..p {
            let xi = cols[i][r] - x_mean[i];
            xty[i] += xi * yc;
            for j in i..p {
                gram[i * p + j] += xi * (cols[j][r] - x_mean[j]);
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            gram[i * p + j] = gram[j * p + i];
        }
    }
    Fit {
        x_mean,
        y_mean,
        gram,
        xty,
        n: rows.len(),
    }
}

fn fit_factor(cols: &[Vec<f64>], y: &[f64]) -> (Vec<f64>, f64) {
    let n = y.len();
    let all: Vec<usize> = (0..n).collect();
    let full = statistics(cols, y, &all);
    let lambda_max = full.xty.iter().fold(0.0f64, |m, v| m.max(v.abs())) / n as f64;
    if lambda_max <= 0.0 {
        return (vec![0.0; cols.len()], 0.0);
    }
    let lambdas: Vec<f64> = LAMBDA_FRACTIONS.iter().map(|f| f * lambda_max).collect();
    let folds: Vec<Vec<usize>> = (0..FOLDS.min(n)).map(|f| (f..n).step_by(FOLDS).collect()).collect();
    // fold_errors[l][f]: mean squared validation error of lambda l on fold f
    let mut fold_errors = vec![Vec::with_capacity(folds.len()); lambdas.len()];
    if folds.len() > 1 {
        for fold in &folds {
            let train: Vec<usize> = (0..n).filter(|r| r % FOLDS != fold[0] % FOLDS).collect();
            let fit = statistics(cols, y, &train);
            for (errs, &lam) in fold_errors.iter_mut().zip(&lambdas) {
                let w = lasso(&fit.gram, &fit.xty, fit.n, lam);
                let sse = fold
                    .iter()
                    .map(|&r| {
                        let pred = fit.y_mean
                            + w.iter().enumerate().map(|(j, wj)| wj * (cols[j][r] - fit.x_mean[j])).sum::<f64>();
                        (y[r] - pred).powi(2)
                    })
                    .sum::<f64>();
                errs.push(sse / fold.len() as f64);
            }
        }
    }
    // One-standard-error rule: the strongest penalty whose mean validation
    // error is within one standard error of the best.
    let stats: Vec<(f64, f64)> = fold_errors
        .iter()
        .map(|e| {
            if e.is_empty() {
                return (0.0, 0.0);
            }
            let m = e.iter().sum::<f64>() / e.len() as f64;
            let var = e.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (e.len() as f64 - 1.0).max(1.0);
            (m, (var / e.len() as f64).sqrt())
        })
        .collect();
    let min = (0..stats.len()).fold(0, |b, i| if stats[i].0 < stats[b].0 { i } else { b });
    let best = (0..stats.len())
        .find(|&i| stats[i].0 <= stats[min].0 + stats[min].1)
        .unwrap_or(min);
    (lasso(&full.gram, &full.xty, full.n, lambdas[best]), lambdas[best])
}

/// DCI disentanglement with L1-linear predictors on standardized codes.
pub fn dci_d(probe: &ProbeSet, exec: Exec) -> Result<DciResult> {
    let d = probe.code_dim();
    let n = probe.len() as f64;
    let mut cols: Vec<Vec<f64>> = (0..d)
        .map(|k| {
            let c = probe.code_column(k);
            let mean = c.iter().sum::<f64>() / n;
            let sd = (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            if sd > 0.0 {
                c.iter().map(|v| (v - mean) / sd).collect()
            } else {
                vec![0.0; c.len()]
            }
        })
        .collect();
    // Fit in a canonical column order so the result cannot depend on how the
    // code dimensions are listed.
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        cols[a]
            .iter()
            .zip(&cols[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    let sorted: Vec<Vec<f64>> = order.iter().map(|&i| std::mem::take(&mut cols[i])).collect();
    let fits = par::map_indexed(exec, probe.num_factors(), |k| {
        let c = (probe.cardinalities[k] - 1).max(1) as f64;
        let y: Vec<f64> = probe.factor_column(k).into_iter().map(|v| v as f64 / c).collect();
        fit_factor(&sorted, &y)
    });
    let mut importance = vec![vec![0.0; probe.num_factors()]; d];
    for (k, (w, _)) in fits.iter().enumerate() {
        for (pos, &dim) in order.iter().enumerate() {
            importance[dim][k] = w[pos].abs();
        }
    }
    let (score, per_dim) = dci_from_importance(&importance);
    Ok(DciResult {
        score,
        per_dim,
        importance,
        lambdas: fits.into_iter().map(|(_, l)| l).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_and_uniform_importance() {
        let one_hot = vec![vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 0.5]];
        assert!((dci_from_importance(&one_hot).0 - 1.0).abs() < 1e-12);
        let uniform = vec![vec![1.0; 3]; 3];
        assert!(dci_from_importance(&uniform).0.abs() < 1e-12);
        let (_, per) = dci_from_importance(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(per, vec![None, Some(1.0)]);
    }

    #[test]
    fn lasso_recovers_sparse_weights() {
        // x0 drives y, x1 is independent.
        let x0: Vec<f64> = (0..100).map(|i| ((i * 37) % 100) as f64 / 50.0 - 1.0).collect();
        let x1: Vec<f64> = (0..100).map(|i| ((i * 61 + 13) % 100) as f64 / 50.0 - 1.0).collect();
        let y: Vec<f64> = x0.iter().map(|v| 2.0 * v).collect();
        let fit = statistics(&[x0, x1], &y, &(0..100).collect::<Vec<_>>());
        let w = lasso(&fit.gram, &fit.xty, fit.n, 1e-6);
        assert!((w[0] - 2.0).abs() < 1e-3 && w[1].abs() < 1e-3, "{w:?}");
        let big = lasso(&fit.gram, &fit.xty, fit.n, 10.0);
        assert_eq!(big, vec![0.0, 0.0]);
    }
}
