//! Observation-error models.
//!
//! Outcome errors are either Gaussian with variance `ω`, or skew-normal with
//! shape `α`, reparameterized so the error has mean 0 and variance `ω`
//! regardless of `α`. The shape parameter carries a penalised-complexity
//! prior built from the Kullback–Leibler distance between the standardized
//! skew-normal and the moment-matched normal.

use std::f64::consts::{FRAC_2_PI, LN_2, PI, SQRT_2};
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::quadrature::integrate_piecewise;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Supremum of `|γ₁|` over finite shapes, reached as `|α| → ∞`.
pub fn gamma1_sup() -> f64 {
    let u = FRAC_2_PI;
    0.5 * (4.0 - PI) * (u / (1.0 - u)).powf(1.5)
}

/// `log φ(x)` for the standard normal density.
pub fn log_npdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// `log Φ(x)`, accurate in both tails.
pub fn log_ndtr(x: f64) -> f64 {
    if x > 5.0 {
        (-0.5 * erfc(x / SQRT_2)).ln_1p()
    } else if x > -20.0 {
        (0.5 * erfc(-x / SQRT_2)).ln()
    } else {
        let x2 = x * x;
        let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2)
            + 105.0 / (x2 * x2 * x2 * x2);
        log_npdf(x) - (-x).ln() + series.ln()
    }
}

/// `Φ(x)`.
pub fn ndtr(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// `φ(x)/Φ(x)`, the derivative of `log Φ`.
pub fn log_ndtr_deriv(x: f64) -> f64 {
    (log_npdf(x) - log_ndtr(x)).exp()
}

/// Skew-normal error with mean 0 and variance `omega`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkewNormalSpec {
    pub omega: f64,
    pub alpha: f64,
    pub m: f64,
    pub s: f64,
    pub gamma1: f64,
}

impl SkewNormalSpec {
    pub fn new(omega: f64, alpha: f64) -> Result<Self> {
        let (m, s) = sn_standardize(omega, alpha)?;
        Ok(Self {
            omega,
            alpha,
            m,
            s,
            gamma1: gamma1_of_alpha(alpha),
        })
    }

    /// `δ = α / sqrt(1 + α²)`.
    pub fn delta(&self) -> f64 {
        shape_delta(self.alpha)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let d = self.delta();
        let u0: f64 = rng.sample(StandardNormal);
        let u1: f64 = rng.sample(StandardNormal);
        self.m + self.s * (d * u0.abs() + (1.0 - d * d).sqrt() * u1)
    }
}

fn shape_delta(alpha: f64) -> f64 {
    if alpha.is_infinite() {
        alpha.signum()
    } else {
        alpha / (1.0 + alpha * alpha).sqrt()
    }
}

/// Location `m` and scale `s` giving mean 0 and variance `omega`:
/// `s² (1 − 2δ²/π) = ω`, `m = −s δ sqrt(2/π)`.
pub fn sn_standardize(omega: f64, alpha: f64) -> Result<(f64, f64)> {
    if !(omega > 0.0) || !omega.is_finite() {
        return Err(Error::InvalidArgument(format!("variance must be positive, got {omega}")));
    }
    if alpha.is_nan() {
        return Err(Error::InvalidArgument("shape is NaN".into()));
    }
    let d = shape_delta(alpha);
    let s = (omega / (1.0 - FRAC_2_PI * d * d)).sqrt();
    Ok((-s * d * FRAC_2_PI.sqrt(), s))
}

/// `log[2/s φ((x−m)/s) Φ(α(x−m)/s)]`.
pub fn sn_logpdf(x: f64, spec: &SkewNormalSpec) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite argument {x}")));
    }
    Ok(sn_logpdf_raw(x, spec.m, spec.s, spec.alpha))
}

fn sn_logpdf_raw(x: f64, m: f64, s: f64, alpha: f64) -> f64 {
    let z = (x - m) / s;
    LN_2 - s.ln() + log_npdf(z) + log_ndtr(alpha * z)
}

/// Skewness of the skew-normal with shape `alpha`; the sign follows `alpha`.
pub fn gamma1_of_alpha(alpha: f64) -> f64 {
    let a2 = alpha * alpha;
    let u = if alpha.is_infinite() {
        FRAC_2_PI
    } else {
        2.0 * a2 / (PI * (1.0 + a2))
    };
    alpha.signum() * 0.5 * (4.0 - PI) * (u / (1.0 - u)).powf(1.5) * if alpha == 0.0 { 0.0 } else { 1.0 }
}

/// Inverse of [`gamma1_of_alpha`]: monotone root-finding on `|α|`.
pub fn alpha_of_gamma1(gamma1: f64) -> Result<f64> {
    let target = gamma1.abs();
    if target >= gamma1_sup() || gamma1.is_nan() {
        return Err(Error::InvalidArgument(format!(
            "|gamma1| = {target} is not below the supremum {}",
            gamma1_sup()
        )));
    }
    if target == 0.0 {
        return Ok(0.0);
    }
    let mut hi = 1.0;
    while gamma1_of_alpha(hi) < target {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gamma1_of_alpha(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(gamma1.signum() * 0.5 * (lo + hi))
}

/// Kullback–Leibler divergence of the standardized (mean 0, variance 1)
/// skew-normal with shape `alpha` from the standard normal, by quadrature.
pub fn kld_to_normal(alpha: f64) -> f64 {
    let (m, s) = sn_standardize(1.0, alpha).expect("unit variance");
    let integrand = |x: f64| {
        let lp = sn_logpdf_raw(x, m, s, alpha);
        if lp == f64::NEG_INFINITY {
            return 0.0;
        }
        lp.exp() * (lp - log_npdf(x))
    };
    let breaks = [-14.0, -6.0, -3.0, m - 0.5 * s, m, m + 0.5 * s, 3.0, 6.0, 14.0];
    let mut b: Vec<f64> = breaks.to_vec();
    b.sort_by(|a, c| a.partial_cmp(c).unwrap());
    integrate_piecewise(integrand, &b, 1e-15).max(0.0)
}

/// Monotone cubic Hermite interpolant (Fritsch–Carlson tangents).
#[derive(Debug, Clone)]
struct MonotoneCubic {
    x: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl MonotoneCubic {
    fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        let n = x.len();
        let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / (x[i + 1] - x[i])).collect();
        let mut m = vec![0.0; n];
        m[0] = delta[0];
        m[n - 1] = delta[n - 2];
        for i in 1..n - 1 {
            // central difference on the non-uniform grid
            m[i] = (y[i + 1] - y[i - 1]) / (x[i + 1] - x[i - 1]);
            if delta[i - 1] * delta[i] <= 0.0 {
                m[i] = 0.0;
            }
        }
        for i in 0..n - 1 {
            if delta[i] == 0.0 {
                m[i] = 0.0;
                m[i + 1] = 0.0;
                continue;
            }
            let a = m[i] / delta[i];
            let b = m[i + 1] / delta[i];
            let r = a * a + b * b;
            if r > 9.0 {
                let t = 3.0 / r.sqrt();
                m[i] = t * a * delta[i];
                m[i + 1] = t * b * delta[i];
            }
        }
        Self { x, y, m }
    }

    fn segment(&self, x: f64) -> usize {
        match self.x.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
            Ok(i) => i.min(self.x.len() - 2),
            Err(i) => i.clamp(1, self.x.len() - 1) - 1,
        }
    }

    /// Value and first derivative.
    fn eval(&self, x: f64) -> (f64, f64) {
        let i = self.segment(x);
        let h = self.x[i + 1] - self.x[i];
        let t = (x - self.x[i]) / h;
        let (t2, t3) = (t * t, t * t * t);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        let v = h00 * self.y[i] + h10 * h * self.m[i] + h01 * self.y[i + 1] + h11 * h * self.m[i + 1];
        let d00 = 6.0 * t2 - 6.0 * t;
        let d10 = 3.0 * t2 - 4.0 * t + 1.0;
        let d01 = -6.0 * t2 + 6.0 * t;
        let d11 = 3.0 * t2 - 2.0 * t;
        let dv = (d00 * self.y[i] + d01 * self.y[i + 1]) / h + d10 * self.m[i] + d11 * self.m[i + 1];
        (v, dv)
    }
}

/// Grid of the distance `d(α) = sqrt(2 KLD)` on `|α| ∈ [0, 30]`.
#[derive(Debug, Clone)]
pub struct DistanceGrid {
    knots: Vec<f64>,
    values: Vec<f64>,
    interp: MonotoneCubic,
    /// Leading coefficient of `d(α) ≈ c |α|³` used below the first knot.
    cubic_coef: f64,
}

pub const PC_GRID_ALPHA_MAX: f64 = 30.0;
pub const PC_GRID_KNOTS: usize = 512;
/// Below this shape the distance follows its cubic leading term; the KLD
/// there is too small for quadrature to resolve.
pub const PC_GRID_ALPHA_MIN: f64 = 0.1;

impl DistanceGrid {
    fn build() -> Self {
        let (lo, hi) = (PC_GRID_ALPHA_MIN.ln(), PC_GRID_ALPHA_MAX.ln());
        let knots: Vec<f64> = (0..PC_GRID_KNOTS)
            .map(|i| (lo + (hi - lo) * i as f64 / (PC_GRID_KNOTS - 1) as f64).exp())
            .collect();
        let values: Vec<f64> = knots.iter().map(|&a| (2.0 * kld_to_normal(a)).sqrt()).collect();
        let cubic_coef = values[0] / knots[0].powi(3);
        let interp = MonotoneCubic::new(knots.clone(), values.clone());
        Self {
            knots,
            values,
            interp,
            cubic_coef,
        }
    }

    pub fn shared() -> &'static DistanceGrid {
        static GRID: OnceLock<DistanceGrid> = OnceLock::new();
        GRID.get_or_init(DistanceGrid::build)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `d(α)`, symmetric in `α`, for `|α| ≤ 30`.
    pub fn distance(&self, alpha: f64) -> f64 {
        self.eval(alpha.abs()).0
    }

    /// `d'(|α|)`.
    pub fn derivative(&self, alpha: f64) -> f64 {
        self.eval(alpha.abs()).1
    }

    fn eval(&self, a: f64) -> (f64, f64) {
        if a < self.knots[0] {
            (self.cubic_coef * a.powi(3), 3.0 * self.cubic_coef * a * a)
        } else {
            self.interp.eval(a.min(PC_GRID_ALPHA_MAX))
        }
    }

    pub fn d_max(&self) -> f64 {
        *self.values.last().unwrap()
    }

    /// Inverse map `d ↦ |α|` on `[0, d_max]`.
    pub fn alpha_of_distance(&self, d: f64) -> f64 {
        let d = d.clamp(0.0, self.d_max());
        if d <= self.values[0] {
            return (d / self.cubic_coef).cbrt();
        }
        let (mut lo, mut hi) = (self.knots[0], PC_GRID_ALPHA_MAX);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.distance(mid) < d {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-14 * hi {
                break;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Penalised-complexity prior on the skew-normal shape with rate `lambda`,
/// truncated to `|α| ≤ 30` and renormalized there.
#[derive(Debug, Clone, Copy)]
pub struct PcPrior {
    pub lambda: f64,
}

impl PcPrior {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::InvalidArgument(format!("PC rate must be positive, got {lambda}")));
        }
        Ok(Self { lambda })
    }

    fn log_norm(&self) -> f64 {
        (-(-self.lambda * DistanceGrid::shared().d_max()).exp()).ln_1p()
    }

    /// `log π(α) = log(λ/2) − λ d(α) + log|d'(α)|`, renormalized on the grid range.
    pub fn log_density(&self, alpha: f64) -> f64 {
        if alpha.abs() > PC_GRID_ALPHA_MAX {
            return f64::NEG_INFINITY;
        }
        let grid = DistanceGrid::shared();
        (0.5 * self.lambda).ln() - self.lambda * grid.distance(alpha) + grid.derivative(alpha).abs().ln()
            - self.log_norm()
    }

    /// Prior on the unconstrained coordinate `v`, where the signed distance is
    /// `t = d_max tanh(v)` and `α = sign(t) d⁻¹(|t|)`.
    pub fn log_density_internal(&self, v: f64) -> f64 {
        let d_max = DistanceGrid::shared().d_max();
        let th = v.tanh();
        let t = d_max * th;
        (0.5 * self.lambda).ln() - self.lambda * t.abs() + (d_max * (1.0 - th * th)).ln()
            - self.log_norm()
    }
}

/// Shape from the unconstrained PC coordinate.
pub fn alpha_from_internal(v: f64) -> f64 {
    let grid = DistanceGrid::shared();
    let t = grid.d_max() * v.tanh();
    t.signum() * grid.alpha_of_distance(t.abs())
}

/// Unconstrained PC coordinate from the shape (inverse of [`alpha_from_internal`]).
pub fn internal_from_alpha(alpha: f64) -> f64 {
    let grid = DistanceGrid::shared();
    let t = alpha.signum() * grid.distance(alpha.clamp(-PC_GRID_ALPHA_MAX, PC_GRID_ALPHA_MAX));
    let r = (t / grid.d_max()).clamp(-1.0 + 1e-15, 1.0 - 1e-15);
    if alpha == 0.0 {
        0.0
    } else {
        r.atanh()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    Gaussian,
    SkewNormal,
}

impl std::str::FromStr for Likelihood {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "gaussian" | "normal" => Ok(Self::Gaussian),
            "skew_normal" | "sn" | "skewnormal" => Ok(Self::SkewNormal),
            other => Err(Error::InvalidArgument(format!("unknown likelihood '{other}'"))),
        }
    }
}

/// An outcome's error distribution at fixed hyperparameters.
#[derive(Debug, Clone, Copy)]
pub enum ErrorModel {
    Gaussian { omega: f64 },
    SkewNormal(SkewNormalSpec),
}

impl ErrorModel {
    pub fn new(kind: Likelihood, omega: f64, alpha: f64) -> Result<Self> {
        match kind {
            Likelihood::Gaussian => {
                if !(omega > 0.0) {
                    return Err(Error::InvalidArgument(format!("variance must be positive, got {omega}")));
                }
                Ok(Self::Gaussian { omega })
            }
            Likelihood::SkewNormal => Ok(Self::SkewNormal(SkewNormalSpec::new(omega, alpha)?)),
        }
    }

    /// Log-density of a residual `r = y − η`.
    pub fn logpdf(&self, r: f64) -> f64 {
        match self {
            Self::Gaussian { omega } => -0.5 * r * r / omega - 0.5 * omega.ln() - LN_SQRT_2PI,
            Self::SkewNormal(sn) => sn_logpdf_raw(r, sn.m, sn.s, sn.alpha),
        }
    }

    /// Log-density and its first two derivatives with respect to the residual.
    pub fn derivs(&self, r: f64) -> (f64, f64, f64) {
        match self {
            Self::Gaussian { omega } => (self.logpdf(r), -r / omega, -1.0 / omega),
            Self::SkewNormal(sn) => {
                let z = (r - sn.m) / sn.s;
                let t = sn.alpha * z;
                let h = log_ndtr_deriv(t);
                let a_s = sn.alpha / sn.s;
                let d1 = -z / sn.s + a_s * h;
                let d2 = -1.0 / (sn.s * sn.s) - a_s * a_s * h * (t + h);
                (sn_logpdf_raw(r, sn.m, sn.s, sn.alpha), d1, d2)
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Self::Gaussian { omega } => {
                let u: f64 = rng.sample(StandardNormal);
                omega.sqrt() * u
            }
            Self::SkewNormal(sn) => sn.sample(rng),
        }
    }
}
