//! Nested approximation: hyperparameter mode, integration design, mixture
//! marginals, predictions and criteria.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optimize::{bfgs, fd_hessian, BfgsOptions};
use super::problem::{Dataset, HyperCoord, LatentFit, Problem};
use super::summary::{sample_summary, Summary};
use super::{ConvergenceReport, GridPoint, ModelSpec, ParamSummary, PosteriorFit};
use crate::criteria::criteria_bundle;
use crate::error::{Error, Result};
use crate::likelihood::{alpha_from_internal, gamma1_of_alpha};

/// How the hyperparameter posterior is integrated out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrationStrategy {
    /// Tensor grid up to three hyperparameters, central composite design above.
    #[default]
    Auto,
    /// Axis-aligned tensor grid at standardized levels `-2..=2`.
    Grid,
    /// Central composite design.
    Ccd,
    /// Plug in the mode only.
    EmpiricalBayes,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineSettings {
    pub strategy: IntegrationStrategy,
    pub seed: u64,
    /// Posterior draws used for the criteria.
    pub n_draws: usize,
    /// Draws used for the hyperparameter marginals.
    pub n_hyper_draws: usize,
    pub latent_max_iter: usize,
    pub latent_grad_tol: f64,
    pub hessian_step: f64,
}

impl Default for EngineSettings {
    fn default() -> Self {
        Self {
            strategy: IntegrationStrategy::Auto,
            seed: 1,
            n_draws: 4000,
            n_hyper_draws: 20000,
            latent_max_iter: 50,
            latent_grad_tol: 1e-8,
            hessian_step: 0.02,
        }
    }
}

const EIGEN_FLOOR: f64 = 1e-6;
const SCALE_PROBE: f64 = std::f64::consts::SQRT_2;
const CCD_F0: f64 = 1.1;
const LOG_WEIGHT_CUT: f64 = 6.0;

/// Standardized coordinates around the mode: `ψ(z) = ψ* + V Λ^{-1/2} (s ⊙ z)`
/// with side-specific scale corrections `s`.
struct Standardizer {
    mode: Vec<f64>,
    /// Columns `V_i / √λ_i`.
    axes: DMatrix<f64>,
    s_minus: Vec<f64>,
    s_plus: Vec<f64>,
}

impl Standardizer {
    fn scale(&self, i: usize, z: f64) -> f64 {
        if z >= 0.0 {
            self.s_plus[i]
        } else {
            self.s_minus[i]
        }
    }

    fn to_internal(&self, z: &[f64]) -> Vec<f64> {
        let zs = DVector::from_fn(z.len(), |i, _| z[i] * self.scale(i, z[i]));
        let d = &self.axes * zs;
        self.mode.iter().zip(d.iter()).map(|(m, v)| m + v).collect()
    }
}

struct Evaluated {
    psi: Vec<f64>,
    log_post: f64,
    latent: LatentFit,
}

/// Fit a model by the nested approximation.
pub fn fit(spec: &ModelSpec, data: &Dataset, settings: &EngineSettings) -> Result<PosteriorFit> {
    let prob = Problem::new(spec, data)?;
    let mut report = ConvergenceReport {
        warnings: prob.warnings.clone(),
        ..Default::default()
    };
    let start = prob.start_point();
    let pilot = prob.fit_latent(&start, None, settings.latent_max_iter, settings.latent_grad_tol)?;
    let warm = pilot.theta.clone();
    let objective = |psi: &[f64]| -> f64 {
        let Ok(lp) = prob.log_prior(psi) else {
            return f64::NEG_INFINITY;
        };
        match prob.fit_latent(psi, Some(&warm), settings.latent_max_iter, settings.latent_grad_tol) {
            Ok(f) => f.log_marginal + lp,
            Err(_) => f64::NEG_INFINITY,
        }
    };

    let opts = BfgsOptions::default();
    let mut opt = bfgs(&objective, &start, &opts);
    report.optimizer_iterations = opt.iterations;
    if !opt.converged || !opt.value.is_finite() {
        report.optimizer_fallback = true;
        let coarse = coarse_box(&start);
        let values: Vec<f64> = coarse.par_iter().map(|p| objective(p)).collect();
        let best = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .ok_or_else(|| Error::Numerical("log posterior is not finite anywhere on the fallback grid".into()))?;
        let restart = bfgs(&objective, &coarse[best], &opts);
        report.optimizer_iterations += restart.iterations;
        if restart.value.is_finite() && (restart.value >= opt.value || !opt.value.is_finite()) {
            opt = restart;
        }
        report
            .warnings
            .push("hyperparameter optimizer restarted from a coarse grid".into());
    }
    report.optimizer_converged = opt.converged;
    if !opt.value.is_finite() {
        return Err(Error::Numerical("hyperparameter posterior mode not found".into()));
    }
    let mode = opt.x.clone();
    let f_mode = opt.value;
    let mode_fit = prob.fit_latent(&mode, Some(&warm), settings.latent_max_iter, settings.latent_grad_tol)?;
    let warm = mode_fit.theta.clone();
    let m = mode.len();

    // Curvature at the mode.
    let hess = fd_hessian(&objective, &mode, settings.hessian_step);
    let neg = -(&hess + hess.transpose()) * 0.5;
    let eig = SymmetricEigen::new(neg);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if !(*v > EIGEN_FLOOR) {
            *v = EIGEN_FLOOR;
            report.hessian_regularized = true;
        }
    }
    if report.hessian_regularized {
        report
            .warnings
            .push("hyperparameter Hessian not negative definite at the mode; eigenvalues floored".into());
    }
    let axes = DMatrix::from_fn(m, m, |r, c| eig.eigenvectors[(r, c)] / vals[c].sqrt());
    let mut std = Standardizer {
        mode: mode.clone(),
        axes,
        s_minus: vec![1.0; m],
        s_plus: vec![1.0; m],
    };
    let probes: Vec<(usize, f64)> = (0..m).flat_map(|i| [(i, -SCALE_PROBE), (i, SCALE_PROBE)]).collect();
    let drops: Vec<f64> = probes
        .par_iter()
        .map(|&(i, z)| {
            let mut zz = vec![0.0; m];
            zz[i] = z;
            f_mode - objective(&std.to_internal(&zz))
        })
        .collect();
    for (&(i, z), &drop) in probes.iter().zip(&drops) {
        let s = if drop.is_nan() || drop == f64::INFINITY {
            0.25
        } else if drop <= 0.0 {
            4.0
        } else {
            (1.0 / drop).sqrt().clamp(0.25, 4.0)
        };
        if z < 0.0 {
            std.s_minus[i] = s;
        } else {
            std.s_plus[i] = s;
        }
    }

    // Integration design in standardized coordinates, with base weights.
    let strategy = match settings.strategy {
        IntegrationStrategy::Auto if m <= 3 => IntegrationStrategy::Grid,
        IntegrationStrategy::Auto => IntegrationStrategy::Ccd,
        s => s,
    };
    let design: Vec<(Vec<f64>, f64)> = match strategy {
        IntegrationStrategy::EmpiricalBayes => vec![(vec![0.0; m], 1.0)],
        IntegrationStrategy::Grid => grid_design(&std, m),
        _ => ccd_design(m),
    };
    let evaluated: Vec<Option<Evaluated>> = design
        .par_iter()
        .map(|(z, _)| {
            let psi = std.to_internal(z);
            if z.iter().all(|v| *v == 0.0) {
                return Some(Evaluated {
                    psi,
                    log_post: f_mode,
                    latent: mode_fit.clone(),
                });
            }
            let lp = prob.log_prior(&psi).ok()?;
            let latent = prob
                .fit_latent(&psi, Some(&warm), settings.latent_max_iter, settings.latent_grad_tol)
                .ok()?;
            let log_post = latent.log_marginal + lp;
            log_post.is_finite().then_some(Evaluated { psi, log_post, latent })
        })
        .collect();
    let mut points = Vec::new();
    let mut log_w = Vec::new();
    for ((_, base), ev) in design.iter().zip(evaluated) {
        if let Some(ev) = ev {
            let lw = base.ln() + ev.log_post - f_mode;
            if lw.is_finite() {
                log_w.push(lw);
                points.push(ev);
            }
        }
    }
    if points.is_empty() {
        return Err(Error::Numerical("no integration point could be evaluated".into()));
    }
    let max_lw = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let keep: Vec<bool> = log_w.iter().map(|lw| *lw >= max_lw - LOG_WEIGHT_CUT).collect();
    let mut kept = Vec::new();
    let mut weights = Vec::new();
    for ((p, lw), k) in points.into_iter().zip(log_w).zip(keep) {
        if k {
            weights.push((lw - max_lw).exp());
            kept.push(p);
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let points = kept;

    report.latent_converged = points.iter().all(|p| p.latent.converged);
    report.latent_max_grad_norm = points.iter().map(|p| p.latent.grad_norm).fold(0.0, f64::max);
    if !report.latent_converged {
        report
            .warnings
            .push(format!("latent Newton iterations did not converge (max gradient norm {:.3e})", report.latent_max_grad_norm));
    }

    // Latent marginals.
    let covs: Vec<DMatrix<f64>> = points.par_iter().map(|p| p.latent.chol.inverse()).collect();
    let mut fixed = Vec::new();
    for j in 0..prob.k {
        for c in 0..prob.q {
            let idx = j * prob.d + c;
            let means: Vec<f64> = points.iter().map(|p| p.latent.theta[idx]).collect();
            let sds: Vec<f64> = covs.iter().map(|s| s[(idx, idx)].max(0.0).sqrt()).collect();
            fixed.push(ParamSummary {
                name: prob.fixed_names[j * prob.q + c].clone(),
                summary: Summary::mixture(&weights, &means, &sds),
            });
        }
    }
    let mut area_effects = Vec::with_capacity(prob.k);
    let mut z_mean = Vec::with_capacity(prob.k * prob.n);
    for j in 0..prob.k {
        if prob.r == 0 {
            area_effects.push(vec![Summary::point(0.0); prob.n]);
            z_mean.extend(std::iter::repeat(0.0).take(prob.n));
            continue;
        }
        let off = j * prob.d + prob.q;
        let per_point: Vec<(DVector<f64>, Vec<f64>)> = points
            .iter()
            .zip(&covs)
            .map(|(p, cov)| {
                let mean = prob.area_field(&p.latent.theta, j);
                let suu = cov.view((off, off), (prob.r, prob.r));
                let var = match &prob.basis {
                    Some(b) => {
                        let bs = b * suu;
                        (0..prob.n).map(|i| bs.row(i).dot(&b.row(i))).collect()
                    }
                    None => (0..prob.n).map(|i| suu[(i, i)]).collect(),
                };
                (mean, var)
            })
            .collect();
        let mut row = Vec::with_capacity(prob.n);
        for i in 0..prob.n {
            let means: Vec<f64> = per_point.iter().map(|(mu, _)| mu[i]).collect();
            let sds: Vec<f64> = per_point.iter().map(|(_, v)| v[i].max(0.0).sqrt()).collect();
            let s = Summary::mixture(&weights, &means, &sds);
            z_mean.push(s.mean);
            row.push(s);
        }
        area_effects.push(row);
    }
    report.constraint_residual = match &prob.constraints {
        Some(c) if prob.r > 0 => c.residual(&z_mean),
        _ => 0.0,
    };

    // Predictions at every observation, observed or not.
    let mut fitted = vec![vec![0.0; prob.design.nrows()]; prob.k];
    for (p, w) in points.iter().zip(&weights) {
        for (j, row) in fitted.iter_mut().enumerate() {
            for (f, e) in row.iter_mut().zip(prob.linear_predictor(&p.latent.theta, j)) {
                *f += w * e;
            }
        }
    }

    // Hyperparameter marginals from the split-normal approximation.
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x6879_7065_7273);
    let hyper_draws: Vec<Vec<f64>> = (0..settings.n_hyper_draws.max(2))
        .map(|_| {
            let z: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
            std.to_internal(&z)
        })
        .collect();
    let hyper_internal: Vec<ParamSummary> = prob
        .hyper_names()
        .into_iter()
        .enumerate()
        .map(|(i, name)| {
            let col: Vec<f64> = hyper_draws.iter().map(|d| d[i]).collect();
            ParamSummary {
                name,
                summary: sample_summary(&col),
            }
        })
        .collect();
    let hyper = natural_hyper_summaries(&prob, &hyper_draws);

    // Criteria from posterior draws.
    let (ll, ll_at_mean) = criteria_draws(&prob, &points, &weights, settings)?;
    let y_obs = prob.observed_concat();
    let yhat_obs: Vec<f64> = (0..prob.k)
        .flat_map(|j| prob.observed[j].iter().map(|&h| fitted[j][h]).collect::<Vec<_>>())
        .collect();
    let criteria = criteria_bundle(&ll, ll_at_mean, &y_obs, &yhat_obs)?;
    if criteria.n_cpo_flagged > 0 {
        report.warnings.push(format!(
            "{} CPO values flagged unreliable and excluded from LPML",
            criteria.n_cpo_flagged
        ));
    }
    report.unconverged = !report.latent_converged || !report.optimizer_converged;

    let grid = points
        .iter()
        .zip(&weights)
        .map(|(p, w)| GridPoint {
            internal: p.psi.clone(),
            log_posterior: p.log_post,
            weight: *w,
        })
        .collect();
    Ok(PosteriorFit {
        method: match strategy {
            IntegrationStrategy::EmpiricalBayes => "empirical_bayes".into(),
            IntegrationStrategy::Grid => "nested_laplace_grid".into(),
            _ => "nested_laplace_ccd".into(),
        },
        outcome_names: prob.outcome_names.clone(),
        fixed,
        hyper,
        hyper_internal,
        area_effects,
        fitted,
        criteria,
        grid,
        convergence: report,
    })
}

/// Start point plus steps of ±1 and ±2 along each internal axis.
fn coarse_box(start: &[f64]) -> Vec<Vec<f64>> {
    let mut out = vec![start.to_vec()];
    for i in 0..start.len() {
        for d in [-2.0, -1.0, 1.0, 2.0] {
            let mut p = start.to_vec();
            p[i] += d;
            out.push(p);
        }
    }
    out
}

/// Tensor grid at levels `-2..=2`; the base weight is the volume of the
/// cell around each point after the side-specific scale corrections.
fn grid_design(std: &Standardizer, m: usize) -> Vec<(Vec<f64>, f64)> {
    let levels = [-2.0, -1.0, 0.0, 1.0, 2.0];
    let total = levels.len().pow(m as u32);
    (0..total)
        .map(|mut code| {
            let mut z = Vec::with_capacity(m);
            let mut vol = 1.0;
            for i in 0..m {
                let l = levels[code % levels.len()];
                code /= levels.len();
                vol *= if l == 0.0 {
                    0.5 * (std.s_minus[i] + std.s_plus[i])
                } else {
                    std.scale(i, l)
                };
                z.push(l);
            }
            (z, vol)
        })
        .collect()
}

/// Central composite design on the sphere of radius `f0 √m`: a two-level
/// factorial (half fraction from five dimensions), the axial points and the
/// center. Base weights are chosen so that a standard Gaussian posterior is
/// integrated exactly up to second moments.
fn ccd_design(m: usize) -> Vec<(Vec<f64>, f64)> {
    let f0 = CCD_F0;
    let radius = f0 * (m as f64).sqrt();
    let mut pts: Vec<Vec<f64>> = Vec::new();
    for code in 0..(1usize << m) {
        let signs: Vec<f64> = (0..m).map(|i| if code >> i & 1 == 1 { -1.0 } else { 1.0 }).collect();
        if m >= 5 && signs.iter().product::<f64>() < 0.0 {
            continue;
        }
        pts.push(signs.iter().map(|s| s * f0).collect());
    }
    for i in 0..m {
        for s in [-1.0, 1.0] {
            let mut z = vec![0.0; m];
            z[i] = s * radius;
            pts.push(z);
        }
    }
    let ns = pts.len() as f64;
    let w_other = (1.0 / (f0 * f0)) * (0.5 * m as f64 * f0 * f0).exp() / ns;
    let mut out = vec![(vec![0.0; m], 1.0 - 1.0 / (f0 * f0))];
    out.extend(pts.into_iter().map(|z| (z, w_other)));
    out
}

fn natural_hyper_summaries(prob: &Problem, draws: &[Vec<f64>]) -> Vec<ParamSummary> {
    let mut out = Vec::new();
    for (i, c) in prob.layout.iter().enumerate() {
        let col = |f: &dyn Fn(f64) -> f64| -> Vec<f64> { draws.iter().map(|d| f(d[i])).collect() };
        match *c {
            HyperCoord::LogSigma2(j) => out.push(ParamSummary {
                name: format!("sigma2[{}]", prob.outcome_names[j]),
                summary: sample_summary(&col(&f64::exp)),
            }),
            HyperCoord::AtanhRho => out.push(ParamSummary {
                name: "rho".into(),
                summary: sample_summary(&col(&f64::tanh)),
            }),
            HyperCoord::LogOmega(j) => out.push(ParamSummary {
                name: format!("omega[{}]", prob.outcome_names[j]),
                summary: sample_summary(&col(&f64::exp)),
            }),
            HyperCoord::Shape(j) => {
                out.push(ParamSummary {
                    name: format!("alpha[{}]", prob.outcome_names[j]),
                    summary: sample_summary(&col(&alpha_from_internal)),
                });
                out.push(ParamSummary {
                    name: format!("gamma1[{}]", prob.outcome_names[j]),
                    summary: sample_summary(&col(&|v| gamma1_of_alpha(alpha_from_internal(v)))),
                });
            }
            HyperCoord::LogitPhi => out.push(ParamSummary {
                name: "phi".into(),
                summary: sample_summary(&col(&|v| 1.0 / (1.0 + (-v).exp()))),
            }),
        }
    }
    out
}

/// Pointwise log-likelihood of `S` draws from the mixture (systematic
/// resampling over points, then Gaussian draws per point), and the
/// log-likelihood at the posterior mean.
fn criteria_draws(
    prob: &Problem,
    points: &[Evaluated],
    weights: &[f64],
    settings: &EngineSettings,
) -> Result<(DMatrix<f64>, f64)> {
    let s_total = settings.n_draws.max(2);
    let mut counts = vec![0usize; points.len()];
    let mut cum = 0.0;
    let mut k = 0;
    for t in 0..s_total {
        let u = (t as f64 + 0.5) / s_total as f64;
        while k + 1 < points.len() && cum + weights[k] < u {
            cum += weights[k];
            k += 1;
        }
        counts[k] += 1;
    }
    let n_obs: usize = prob.observed.iter().map(|o| o.len()).sum();
    let blocks: Vec<Result<Vec<Vec<f64>>>> = points
        .par_iter()
        .zip(&counts)
        .enumerate()
        .map(|(idx, (p, &cnt))| {
            let hv = prob.hyper_values(&p.psi)?;
            let models = prob.error_models(&hv)?;
            let mut rng = ChaCha8Rng::seed_from_u64(settings.seed.wrapping_mul(0x9E37_79B9).wrapping_add(idx as u64));
            let lt = p.latent.chol.l().transpose();
            let dim = prob.dim();
            let mut rows = Vec::with_capacity(cnt);
            for _ in 0..cnt {
                let e = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
                let x = lt
                    .solve_upper_triangular(&e)
                    .ok_or_else(|| Error::Numerical("singular latent factor".into()))?;
                let theta = &p.latent.theta + x;
                rows.push(prob.pointwise_loglik(&theta, &models));
            }
            Ok(rows)
        })
        .collect();
    let mut ll = DMatrix::zeros(s_total, n_obs);
    let mut r = 0;
    for b in blocks {
        for row in b? {
            for (c, v) in row.into_iter().enumerate() {
                ll[(r, c)] = v;
            }
            r += 1;
        }
    }

    let dim = prob.dim();
    let mut theta_bar = DVector::zeros(dim);
    let mut psi_bar = vec![0.0; prob.n_hyper()];
    for (p, w) in points.iter().zip(weights) {
        theta_bar += &p.latent.theta * *w;
        for (a, b) in psi_bar.iter_mut().zip(&p.psi) {
            *a += w * b;
        }
    }
    let hv = prob.hyper_values(&psi_bar)?;
    let models = prob.error_models(&hv)?;
    let ll_at_mean = prob.loglik(&theta_bar, &models);
    Ok((ll, ll_at_mean))
}
