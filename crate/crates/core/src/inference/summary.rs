//! Marginal summaries from Gaussian mixtures and from samples.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::criteria::quantile_sorted;

/// Mean, standard deviation and 5/50/95% quantiles of one quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
}

impl Summary {
    pub fn point(v: f64) -> Self {
        Self {
            mean: v,
            sd: 0.0,
            q05: v,
            q50: v,
            q95: v,
        }
    }

    /// Summary of the mixture `Σ w_k N(means_k, sds_k²)`.
    pub fn mixture(weights: &[f64], means: &[f64], sds: &[f64]) -> Self {
        let mean: f64 = weights.iter().zip(means).map(|(w, m)| w * m).sum();
        let second: f64 = weights.iter().zip(means).zip(sds).map(|((w, m), s)| w * (s * s + m * m)).sum();
        let sd = (second - mean * mean).max(0.0).sqrt();
        Self {
            mean,
            sd,
            q05: mixture_quantile(weights, means, sds, 0.05),
            q50: mixture_quantile(weights, means, sds, 0.5),
            q95: mixture_quantile(weights, means, sds, 0.95),
        }
    }
}

fn mixture_cdf(weights: &[f64], means: &[f64], sds: &[f64], x: f64) -> f64 {
    let mut c = 0.0;
    for ((w, m), s) in weights.iter().zip(means).zip(sds) {
        c += w * if *s > 0.0 {
            Normal::new(*m, *s).map(|d| d.cdf(x)).unwrap_or(0.5)
        } else if x >= *m {
            1.0
        } else {
            0.0
        };
    }
    c
}

/// Quantile of a Gaussian mixture by bisection on its CDF.
pub fn mixture_quantile(weights: &[f64], means: &[f64], sds: &[f64], prob: f64) -> f64 {
    if means.len() == 1 {
        return if sds[0] > 0.0 {
            Normal::new(means[0], sds[0]).map(|d| d.inverse_cdf(prob)).unwrap_or(means[0])
        } else {
            means[0]
        };
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (m, s) in means.iter().zip(sds) {
        lo = lo.min(m - 10.0 * s);
        hi = hi.max(m + 10.0 * s);
    }
    if !(hi > lo) {
        return lo;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mixture_cdf(weights, means, sds, mid) < prob {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * (1.0 + mid.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Summary of an unweighted sample (type-7 quantiles).
pub fn sample_summary(x: &[f64]) -> Summary {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = if x.len() > 1 {
        x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    Summary {
        mean,
        sd: var.sqrt(),
        q05: quantile_sorted(&sorted, 0.05),
        q50: quantile_sorted(&sorted, 0.5),
        q95: quantile_sorted(&sorted, 0.95),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_component_is_exact_gaussian() {
        let s = Summary::mixture(&[1.0], &[2.0], &[3.0]);
        assert!((s.q95 - (2.0 + 3.0 * 1.6448536269514722)).abs() < 1e-9);
        assert!((s.sd - 3.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn mixture_quantiles_monotone(
            m in proptest::collection::vec(-5.0f64..5.0, 3),
            s in proptest::collection::vec(0.1f64..3.0, 3),
            w in proptest::collection::vec(0.01f64..1.0, 3),
        ) {
            let tot: f64 = w.iter().sum();
            let w: Vec<f64> = w.iter().map(|v| v / tot).collect();
            let sm = Summary::mixture(&w, &m, &s);
            prop_assert!(sm.q05 <= sm.q50 && sm.q50 <= sm.q95);
            let mean: f64 = w.iter().zip(&m).map(|(a, b)| a * b).sum();
            prop_assert!((sm.mean - mean).abs() < 1e-12);
        }
    }
}
