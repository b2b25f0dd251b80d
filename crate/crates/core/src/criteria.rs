//! Model-comparison criteria from pointwise log-likelihood draws, predictive
//! error, and residual kernel density estimation.
//!
//! Log-likelihood draws are an `S × M` matrix: one row per posterior draw,
//! one column per observed data point.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pareto-tail shape above which a CPO estimate is flagged unreliable.
pub const KHAT_CUTOFF: f64 = 0.7;

/// `log Σ exp(v)` without overflow.
pub fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check_draws(ll: &DMatrix<f64>) -> Result<()> {
    if ll.nrows() < 2 {
        return Err(Error::TooFewDraws {
            needed: 2,
            got: ll.nrows(),
        });
    }
    if ll.iter().any(|v| v.is_nan()) {
        return Err(Error::Numerical("NaN in log-likelihood draws".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaicResult {
    pub waic: f64,
    pub lppd: f64,
    pub p_waic: f64,
}

pub fn waic(ll: &DMatrix<f64>) -> Result<WaicResult> {
    check_draws(ll)?;
    let s = ll.nrows() as f64;
    let mut lppd = 0.0;
    let mut p_waic = 0.0;
    for col in ll.column_iter() {
        lppd += log_sum_exp(col.iter().copied()) - s.ln();
        let mean = col.mean();
        p_waic += col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (s - 1.0);
    }
    Ok(WaicResult {
        waic: -2.0 * (lppd - p_waic),
        lppd,
        p_waic,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DicResult {
    pub dic: f64,
    pub expected_deviance: f64,
    pub p_d: f64,
}

/// `ll_at_mean` is the total log-likelihood at the posterior mean.
pub fn dic(ll: &DMatrix<f64>, ll_at_mean: f64) -> Result<DicResult> {
    check_draws(ll)?;
    let s = ll.nrows() as f64;
    let expected_deviance = -2.0 * ll.column_sum().sum() / s;
    let p_d = expected_deviance + 2.0 * ll_at_mean;
    Ok(DicResult {
        dic: expected_deviance + p_d,
        expected_deviance,
        p_d,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpoResult {
    pub neg_lpml: f64,
    pub log_cpo: Vec<f64>,
    pub khat: Vec<f64>,
    pub flagged: Vec<bool>,
    pub n_flagged: usize,
}

/// Harmonic-mean CPO per data point. Each point's importance ratios
/// `exp(−ℓ)` get a generalized-Pareto tail fit; points with shape above
/// [`KHAT_CUTOFF`] are flagged and left out of the LPML sum.
pub fn cpo_lpml(ll: &DMatrix<f64>) -> Result<CpoResult> {
    check_draws(ll)?;
    let s = ll.nrows() as f64;
    let mut log_cpo = Vec::with_capacity(ll.ncols());
    let mut khat = Vec::with_capacity(ll.ncols());
    for col in ll.column_iter() {
        let neg: Vec<f64> = col.iter().map(|v| -v).collect();
        log_cpo.push(s.ln() - log_sum_exp(neg.iter().copied()));
        khat.push(pareto_khat(&neg));
    }
    let flagged: Vec<bool> = khat.iter().map(|&k| k > KHAT_CUTOFF).collect();
    let neg_lpml = -log_cpo
        .iter()
        .zip(&flagged)
        .filter(|(_, &f)| !f)
        .map(|(v, _)| v)
        .sum::<f64>();
    let n_flagged = flagged.iter().filter(|&&f| f).count();
    Ok(CpoResult {
        neg_lpml,
        log_cpo,
        khat,
        flagged,
        n_flagged,
    })
}

/// Shape estimate of a generalized Pareto fit to the upper tail of
/// `exp(log_ratios)` (Zhang–Stephens profile estimator with a weak prior
/// towards 0.5). Returns `-inf` when the tail is degenerate.
pub fn pareto_khat(log_ratios: &[f64]) -> f64 {
    let s = log_ratios.len();
    let m = ((0.2 * s as f64).min(3.0 * (s as f64).sqrt())).ceil() as usize;
    if m < 5 || s <= m + 1 {
        return f64::NEG_INFINITY;
    }
    let mut sorted = log_ratios.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let top = sorted[s - 1];
    let cutoff = (sorted[s - m - 1] - top).exp();
    let x: Vec<f64> = sorted[s - m..].iter().map(|v| (v - top).exp() - cutoff).collect();
    if x[m - 1] <= 0.0 || x.iter().all(|&v| v == x[0]) {
        return f64::NEG_INFINITY;
    }
    let n = x.len();
    let nf = n as f64;
    let grid = 30 + (nf.sqrt() as usize);
    let xstar = x[((nf / 4.0 + 0.5).floor() as usize).max(1) - 1];
    if xstar <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let theta: Vec<f64> = (1..=grid)
        .map(|j| 1.0 / x[n - 1] + (1.0 - (grid as f64 / (j as f64 - 0.5)).sqrt()) / 3.0 / xstar)
        .collect();
    let profile: Vec<f64> = theta
        .iter()
        .map(|&t| {
            let a = -t;
            let k = x.iter().map(|&v| (a * v).ln_1p()).sum::<f64>() / nf;
            nf * ((a / k).ln() - k - 1.0)
        })
        .collect();
    let lse = log_sum_exp(profile.iter().copied().filter(|v| v.is_finite()));
    let theta_hat: f64 = theta
        .iter()
        .zip(&profile)
        .filter(|(_, l)| l.is_finite())
        .map(|(t, l)| t * (l - lse).exp())
        .sum();
    let k = x.iter().map(|&v| (-theta_hat * v).ln_1p()).sum::<f64>() / nf;
    // shrink towards 0.5 as if 10 extra points sat there
    (nf * k + 10.0 * 0.5) / (nf + 10.0)
}

/// Mean squared error over entries with an observed (non-NaN) `y`.
pub fn predictive_mse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    if y.len() != yhat.len() {
        return Err(Error::DimensionMismatch(format!("{} outcomes vs {} predictions", y.len(), yhat.len())));
    }
    let (sum, count) = y
        .iter()
        .zip(yhat)
        .filter(|(v, _)| !v.is_nan())
        .fold((0.0, 0usize), |(s, c), (v, p)| (s + (v - p).powi(2), c + 1));
    if count == 0 {
        return Err(Error::InvalidArgument("no observed outcomes".into()));
    }
    Ok(sum / count as f64)
}

/// Sample quantile with linear interpolation between order statistics
/// (the "type 7" definition).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Silverman's rule of thumb `0.9 · min(sd, IQR/1.34) · n^(−1/5)`.
pub fn silverman_bandwidth(x: &[f64]) -> Result<f64> {
    let n = x.len();
    if n < 2 {
        return Err(Error::InvalidArgument("bandwidth needs at least 2 values".into()));
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
    if !(sd > 0.0) {
        return Err(Error::InvalidArgument("residuals have zero variance".into()));
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Ok(0.9 * spread * (n as f64).powf(-0.2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kde {
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

/// Default number of bandwidths the evaluation grid extends past the data.
pub const KDE_CUT: f64 = 5.0;

/// Gaussian-kernel density of the residuals on `points` equally spaced
/// values spanning `[min − cut·h, max + cut·h]`.
pub fn residual_kde(resid: &[f64], points: usize, cut: f64) -> Result<Kde> {
    let h = silverman_bandwidth(resid)?;
    if points < 2 {
        return Err(Error::InvalidArgument("KDE grid needs at least 2 points".into()));
    }
    let lo = resid.iter().copied().fold(f64::INFINITY, f64::min) - cut * h;
    let hi = resid.iter().copied().fold(f64::NEG_INFINITY, f64::max) + cut * h;
    let step = (hi - lo) / (points - 1) as f64;
    let norm = 1.0 / (resid.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let grid: Vec<f64> = (0..points).map(|i| lo + step * i as f64).collect();
    let density = grid
        .iter()
        .map(|&g| norm * resid.iter().map(|&r| (-0.5 * ((g - r) / h).powi(2)).exp()).sum::<f64>())
        .collect();
    Ok(Kde {
        bandwidth: h,
        grid,
        density,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriteriaBundle {
    pub neg_lpml: f64,
    pub waic: f64,
    pub lppd: f64,
    pub p_waic: f64,
    pub dic: f64,
    pub expected_deviance: f64,
    pub p_d: f64,
    pub mse: f64,
    pub n_cpo_flagged: usize,
    pub log_cpo: Vec<f64>,
    pub cpo_flagged: Vec<bool>,
}

pub fn criteria_bundle(ll: &DMatrix<f64>, ll_at_mean: f64, y: &[f64], yhat: &[f64]) -> Result<CriteriaBundle> {
    let w = waic(ll)?;
    let d = dic(ll, ll_at_mean)?;
    let c = cpo_lpml(ll)?;
    Ok(CriteriaBundle {
        neg_lpml: c.neg_lpml,
        waic: w.waic,
        lppd: w.lppd,
        p_waic: w.p_waic,
        dic: d.dic,
        expected_deviance: d.expected_deviance,
        p_d: d.p_d,
        mse: predictive_mse(y, yhat)?,
        n_cpo_flagged: c.n_flagged,
        log_cpo: c.log_cpo,
        cpo_flagged: c.flagged,
    })
}
