//! Metropolis-within-Gibbs sampler for the same posterior as the nested
//! approximation, used as an independent check.
//!
//! The latent block is sampled in full area coordinates: the intrinsic
//! precision is made proper by adding `AᵀA` (which leaves the density on the
//! constraint set unchanged), a draw is taken from the resulting Gaussian
//! and projected back onto `A z = 0` by conditioning by kriging. Skew-normal
//! outcomes make this conditional non-Gaussian; the draw is then an
//! independence proposal centred at the constrained conditional mode,
//! accepted or rejected by Metropolis-Hastings. Hyperparameters move jointly
//! with the latent block: a random-walk proposal for `Ψ` (its covariance
//! adapted during warmup, frozen afterwards) is paired with a fresh latent
//! draw from the proposal above at the new `Ψ`, and the pair is accepted
//! against the joint posterior.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::diagnostics::{effective_sample_size, split_rhat};
use super::problem::{Dataset, HyperCoord, Problem};
use super::summary::{sample_summary, Summary};
use super::{ConvergenceReport, ModelSpec, ParamSummary, PosteriorFit};
use crate::criteria::criteria_bundle;
use crate::error::{Error, Result};
use crate::likelihood::{alpha_from_internal, gamma1_of_alpha, ErrorModel, Likelihood};
use crate::spatial_prior::{condition_by_kriging, scale_structure, LatentFamily};

pub const RHAT_LIMIT: f64 = 1.05;
const TARGET_ACCEPT: f64 = 0.3;
const ADAPT_EVERY: usize = 50;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcSettings {
    pub chains: usize,
    pub warmup: usize,
    /// Post-warmup iterations per chain.
    pub iterations: usize,
    pub seed: u64,
    /// Draws retained for the criteria.
    pub n_criteria_draws: usize,
}

impl Default for McmcSettings {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup: 1000,
            iterations: 2000,
            seed: 1,
            n_criteria_draws: 4000,
        }
    }
}

/// Raw chain output.
#[derive(Debug, Clone)]
pub struct Chains {
    /// `theta[c][t]`: full latent vector `[fixed | z]` per outcome.
    pub theta: Vec<Vec<DVector<f64>>>,
    /// `psi[c][t]`: internal hyperparameters.
    pub psi: Vec<Vec<Vec<f64>>>,
    pub latent_accept: f64,
}

/// Sampler state shared across chains.
struct Sampler<'a> {
    prob: &'a Problem,
    /// Full block size per outcome: `q + n`.
    df: usize,
    dim: usize,
    /// Structure matrix for non-PCAR fields.
    structure: Option<DMatrix<f64>>,
    degree: DMatrix<f64>,
    proximity: DMatrix<f64>,
    /// Constraint rows over the full latent vector.
    c_full: Option<DMatrix<f64>>,
    /// `AᵀA` over one outcome's area coordinates.
    ata: Option<DMatrix<f64>>,
    /// Area rows of the constraints.
    a_area: Option<DMatrix<f64>>,
    /// Latent observation rows `[design | ξ]` per outcome (observed only).
    rows: Vec<DMatrix<f64>>,
    y: Vec<DVector<f64>>,
    prior_mean: DVector<f64>,
    prior_prec_fixed: Vec<f64>,
    all_gaussian: bool,
}

struct Conditional {
    mode: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    /// Log normalizer of the constrained Gaussian at this mode.
    log_norm: f64,
}

impl<'a> Sampler<'a> {
    fn new(prob: &'a Problem, data: &Dataset) -> Result<Self> {
        let (k, n, q) = (prob.k, prob.n, prob.q);
        let has_field = prob.spec.family.has_field();
        let df = q + if has_field { n } else { 0 };
        let dim = k * df;
        let g = &data.graph;
        let structure = match prob.spec.family {
            LatentFamily::Iid => Some(DMatrix::identity(n, n)),
            LatentFamily::Icar | LatentFamily::IndepIcar => Some(if prob.spec.scaled {
                scale_structure(g).matrix
            } else {
                g.laplacian()
            }),
            _ => None,
        };
        let a_area = match (&prob.constraints, has_field) {
            (Some(c), true) => Some(c.area_rows.clone()),
            _ => None,
        };
        let c_full = a_area.as_ref().map(|a| {
            let ma = a.nrows();
            let mut c = DMatrix::zeros(k * ma, dim);
            for j in 0..k {
                c.view_mut((j * ma, j * df + q), (ma, n)).copy_from(a);
            }
            c
        });
        let ata = a_area.as_ref().map(|a| a.transpose() * a);
        let mut rows = Vec::with_capacity(k);
        let mut y = Vec::with_capacity(k);
        for j in 0..k {
            let obs = &prob.observed[j];
            let mut f = DMatrix::zeros(obs.len(), df);
            for (t, &h) in obs.iter().enumerate() {
                for c in 0..q {
                    f[(t, c)] = prob.design[(h, c)];
                }
                if has_field {
                    f[(t, q + prob.area_of[h])] = 1.0;
                }
            }
            rows.push(f);
            y.push(DVector::from_column_slice(&prob.y_obs[j]));
        }
        let pr = &prob.spec.priors;
        let mut prior_mean = DVector::zeros(dim);
        let mut prior_prec_fixed = vec![0.0; q];
        for c in 0..q {
            if c < prob.n_int {
                prior_prec_fixed[c] = 1.0 / pr.intercept_var;
                for j in 0..k {
                    prior_mean[j * df + c] = pr.intercept_mean;
                }
            } else {
                prior_prec_fixed[c] = 1.0 / pr.beta_var;
            }
        }
        Ok(Self {
            prob,
            df,
            dim,
            structure,
            degree: DMatrix::from_diagonal(&DVector::from_vec(g.degrees())),
            proximity: g.proximity(),
            c_full,
            ata,
            a_area,
            rows,
            y,
            prior_mean,
            prior_prec_fixed,
            all_gaussian: prob.spec.likelihoods.iter().all(|l| *l == Likelihood::Gaussian),
        })
    }

    fn has_field(&self) -> bool {
        self.df > self.prob.q
    }

    fn structure_at(&self, phi: Option<f64>) -> DMatrix<f64> {
        match &self.structure {
            Some(s) => s.clone(),
            None => &self.degree - &self.proximity * phi.unwrap_or(0.5),
        }
    }

    /// Prior precision over the full latent vector, with `AᵀA` added on the
    /// constrained area coordinates.
    fn prior_precision(&self, psi: &[f64]) -> Result<DMatrix<f64>> {
        let (k, q, n, df) = (self.prob.k, self.prob.q, self.prob.n, self.df);
        let mut qm = DMatrix::zeros(self.dim, self.dim);
        for j in 0..k {
            for c in 0..q {
                qm[(j * df + c, j * df + c)] = self.prior_prec_fixed[c];
            }
        }
        if self.has_field() {
            let hv = self.prob.hyper_values(psi)?;
            let lambda = self.prob.lambda(&hv)?;
            let s = self.structure_at(hv.phi);
            for a in 0..k {
                for b in 0..k {
                    let mut blk = qm.view_mut((a * df + q, b * df + q), (n, n));
                    blk += &s * lambda[(a, b)];
                }
                if let Some(ata) = &self.ata {
                    let mut blk = qm.view_mut((a * df + q, a * df + q), (n, n));
                    blk += ata;
                }
            }
        }
        Ok(qm)
    }

    fn residuals(&self, theta: &DVector<f64>, j: usize) -> DVector<f64> {
        &self.y[j] - &self.rows[j] * theta.rows(j * self.df, self.df)
    }

    fn loglik(&self, theta: &DVector<f64>, models: &[ErrorModel]) -> f64 {
        (0..self.prob.k)
            .map(|j| self.residuals(theta, j).iter().map(|r| models[j].logpdf(*r)).sum::<f64>())
            .sum()
    }

    /// Log conditional density of `θ` (up to a constant) on the constraint set.
    fn log_theta(&self, theta: &DVector<f64>, qm: &DMatrix<f64>, models: &[ErrorModel]) -> f64 {
        let dev = theta - &self.prior_mean;
        self.loglik(theta, models) - 0.5 * dev.dot(&(qm * &dev))
    }

    fn krige(&self, x: &DVector<f64>, chol: &Cholesky<f64, Dyn>) -> Result<DVector<f64>> {
        match &self.c_full {
            Some(c) => condition_by_kriging(x, chol, c, &DVector::zeros(c.nrows())),
            None => Ok(x.clone()),
        }
    }

    /// Constrained mode of `θ | y, Ψ` and the Cholesky factor of the
    /// negative Hessian there.
    fn conditional(&self, psi: &[f64], qm: &DMatrix<f64>, models: &[ErrorModel], start: &DVector<f64>) -> Result<Conditional> {
        let mut theta = start.clone();
        for _ in 0..100 {
            let mut grad = -(qm * (&theta - &self.prior_mean));
            let mut h = qm.clone();
            for j in 0..self.prob.k {
                let r = self.residuals(&theta, j);
                let mut v = DVector::zeros(r.len());
                let mut w = DVector::zeros(r.len());
                for (t, rt) in r.iter().enumerate() {
                    let (_, d1, d2) = models[j].derivs(*rt);
                    v[t] = -d1;
                    w[t] = -d2;
                }
                let f = &self.rows[j];
                let off = j * self.df;
                let mut gj = grad.rows_mut(off, self.df);
                gj += f.transpose() * v;
                let fw = DMatrix::from_fn(f.nrows(), f.ncols(), |a, b| f[(a, b)] * w[a]);
                let mut hj = h.view_mut((off, off), (self.df, self.df));
                hj += f.transpose() * fw;
            }
            let chol = Cholesky::new(h).ok_or_else(|| Error::NotPositiveDefinite(format!("conditional precision at {psi:?}")))?;
            let step = self.krige(&chol.solve(&grad), &chol)?;
            let size = step.amax();
            let f0 = self.log_theta(&theta, qm, models);
            let mut t = 1.0;
            let mut moved = false;
            for _ in 0..40 {
                let cand = &theta + &step * t;
                if self.log_theta(&cand, qm, models) >= f0 - 1e-10 * f0.abs() {
                    theta = cand;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved || size * t < 1e-10 * (1.0 + theta.amax()) {
                let mut log_norm = 0.5 * chol_log_det(&chol);
                if let Some(c) = &self.c_full {
                    log_norm += 0.5 * log_det(&(c * chol.solve(&c.transpose())), "C H⁻¹ Cᵀ")?;
                }
                return Ok(Conditional { mode: theta, chol, log_norm });
            }
        }
        Err(Error::Numerical("conditional mode search did not converge".into()))
    }

    /// `Ψ`-dependent normalizing terms of the constrained field prior:
    /// `½(n − m_a) log|Λ|`, plus `½k(log|S| + log|A S⁻¹ Aᵀ|)` for a proper
    /// structure.
    fn log_z_normalizer(&self, psi: &[f64]) -> Result<f64> {
        if !self.has_field() {
            return Ok(0.0);
        }
        let (k, n) = (self.prob.k, self.prob.n);
        let hv = self.prob.hyper_values(psi)?;
        let lambda = self.prob.lambda(&hv)?;
        let m_a = self.a_area.as_ref().map_or(0, |a| a.nrows());
        let mut lp = 0.5 * (n - m_a) as f64 * log_det(&lambda, "Λ")?;
        if self.structure.is_none() {
            let s = self.structure_at(hv.phi);
            let sc = Cholesky::new(s).ok_or_else(|| Error::NotPositiveDefinite("proper CAR structure".into()))?;
            let mut ld = chol_log_det(&sc);
            if let Some(a) = &self.a_area {
                ld += log_det(&(a * sc.solve(&a.transpose())), "A S⁻¹ Aᵀ")?;
            }
            lp += 0.5 * k as f64 * ld;
        }
        Ok(lp)
    }

    /// Joint log posterior of `(Ψ, θ)` up to a constant, `θ` on the constraint set.
    fn log_target(&self, psi: &[f64], theta: &DVector<f64>) -> Result<f64> {
        let hv = self.prob.hyper_values(psi)?;
        let models = self.prob.error_models(&hv)?;
        let qm = self.prior_precision(psi)?;
        Ok(self.prob.log_prior(psi)? + self.log_z_normalizer(psi)? + self.log_theta(theta, &qm, &models))
    }

    /// Constrained conditional mode of `θ` at `Ψ`, searched from `start`.
    fn conditional_at(&self, psi: &[f64], start: &DVector<f64>) -> Result<Conditional> {
        let hv = self.prob.hyper_values(psi)?;
        let models = self.prob.error_models(&hv)?;
        let qm = self.prior_precision(psi)?;
        self.conditional(psi, &qm, &models, start)
    }

    /// Draw from the constrained Gaussian approximation `cond` and return the
    /// draw with its log density.
    fn propose(&self, cond: &Conditional, rng: &mut ChaCha8Rng) -> Result<(DVector<f64>, f64)> {
        let e = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let noise = cond
            .chol
            .l()
            .transpose()
            .solve_upper_triangular(&e)
            .ok_or_else(|| Error::Numerical("singular conditional factor".into()))?;
        let x = self.krige(&(&cond.mode + noise), &cond.chol)?;
        let lq = self.log_proposal(cond, &x);
        Ok((x, lq))
    }

    /// Log density of the constrained Gaussian proposal, normalized on the
    /// constraint subspace: `½log|H| + ½log|C H⁻¹ Cᵀ| − ½(x−m)ᵀH(x−m)`.
    fn log_proposal(&self, cond: &Conditional, x: &DVector<f64>) -> f64 {
        let d = x - &cond.mode;
        let quad = (cond.chol.l().transpose() * d).norm_squared();
        -0.5 * quad + cond.log_norm
    }

    fn run_chain(&self, psi0: Vec<f64>, settings: &McmcSettings, rng: &mut ChaCha8Rng) -> Result<(Vec<DVector<f64>>, Vec<Vec<f64>>, usize, usize)> {
        let m = psi0.len();
        let mut psi = psi0;
        let mut cond = self.conditional_at(&psi, &self.prior_mean)?;
        let mut theta = cond.mode.clone();
        // Random-walk proposal `ψ' = ψ + scale · L ε`, with `L` adapted during warmup.
        let mut chol_prop = DMatrix::<f64>::identity(m, m) * 0.1;
        let mut scale = 1.0;
        let mut history: Vec<Vec<f64>> = Vec::new();
        let mut accepted = 0usize;
        let mut theta_out = Vec::with_capacity(settings.iterations);
        let mut psi_out = Vec::with_capacity(settings.iterations);
        let (mut lat_acc, mut lat_tot) = (0, 0);
        for it in 0..settings.warmup + settings.iterations {
            // latent block at fixed Ψ
            let (prop, lq_prop) = self.propose(&cond, rng)?;
            if self.all_gaussian {
                theta = prop;
            } else {
                let hv = self.prob.hyper_values(&psi)?;
                let models = self.prob.error_models(&hv)?;
                let qm = self.prior_precision(&psi)?;
                let log_r = self.log_theta(&prop, &qm, &models) - lq_prop - self.log_theta(&theta, &qm, &models)
                    + self.log_proposal(&cond, &theta);
                lat_tot += 1;
                if rng.random::<f64>().ln() < log_r {
                    theta = prop;
                    lat_acc += 1;
                }
            }
            let cur = self.log_target(&psi, &theta)?;

            // joint move: random walk on Ψ, fresh θ from its approximate conditional
            let e = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
            let step = &chol_prop * e * scale;
            let cand: Vec<f64> = psi.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let u: f64 = rng.random();
            if let Ok(cond_c) = self.conditional_at(&cand, &cond.mode) {
                let (theta_c, lq_c) = self.propose(&cond_c, rng)?;
                if let Ok(lp_c) = self.log_target(&cand, &theta_c) {
                    let log_r = lp_c - lq_c - cur + self.log_proposal(&cond, &theta);
                    if lp_c.is_finite() && u.ln() < log_r {
                        psi = cand;
                        theta = theta_c;
                        cond = cond_c;
                        accepted += 1;
                    }
                }
            }

            if it < settings.warmup {
                history.push(psi.clone());
                if (it + 1) % ADAPT_EVERY == 0 {
                    let rate = accepted as f64 / ADAPT_EVERY as f64;
                    let batch = ((it + 1) / ADAPT_EVERY) as f64;
                    scale *= ((rate - TARGET_ACCEPT) * 0.5f64.min(2.0 / batch.sqrt())).exp();
                    accepted = 0;
                    if history.len() >= 4 * ADAPT_EVERY && history.len() >= 10 * m {
                        let tail = &history[history.len() / 2..];
                        if let Some(l) = empirical_cov_factor(tail) {
                            chol_prop = l * (2.38 / (m as f64).sqrt());
                            scale = scale.clamp(0.2, 5.0);
                        }
                    }
                }
            } else {
                theta_out.push(theta.clone());
                psi_out.push(psi.clone());
            }
        }
        Ok((theta_out, psi_out, lat_acc, lat_tot))
    }

    fn z_of(&self, theta: &DVector<f64>, j: usize) -> Vec<f64> {
        if !self.has_field() {
            return vec![0.0; self.prob.n];
        }
        theta.rows(j * self.df + self.prob.q, self.prob.n).iter().copied().collect()
    }

    fn linear_predictor(&self, theta: &DVector<f64>, j: usize) -> Vec<f64> {
        let beta = theta.rows(j * self.df, self.prob.q);
        let fixed = &self.prob.design * beta;
        let z = self.z_of(theta, j);
        (0..fixed.len()).map(|h| fixed[h] + z[self.prob.area_of[h]]).collect()
    }
}

fn chol_log_det(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

fn log_det(m: &DMatrix<f64>, what: &str) -> Result<f64> {
    Cholesky::new(m.clone())
        .map(|c| chol_log_det(&c))
        .ok_or_else(|| Error::NotPositiveDefinite(what.into()))
}

/// Cholesky factor of the sample covariance of `rows`, with a small ridge.
fn empirical_cov_factor(rows: &[Vec<f64>]) -> Option<DMatrix<f64>> {
    let m = rows.first()?.len();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..m).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / n).collect();
    let mut cov = DMatrix::from_fn(m, m, |a, b| {
        rows.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / (n - 1.0)
    });
    for i in 0..m {
        cov[(i, i)] += 1e-8;
    }
    Cholesky::new(cov).map(|c| c.l())
}

/// Run the chains and return the raw draws.
pub fn sample(spec: &ModelSpec, data: &Dataset, settings: &McmcSettings) -> Result<(Problem, Chains)> {
    let prob = Problem::new(spec, data)?;
    let chains = {
        let sampler = Sampler::new(&prob, data)?;
        let start = prob.start_point();
        let results: Vec<Result<_>> = (0..settings.chains.max(1))
            .into_par_iter()
            .map(|c| {
                let mut rng = ChaCha8Rng::seed_from_u64(settings.seed.wrapping_mul(1_000_003).wrapping_add(c as u64));
                let psi0: Vec<f64> = start.iter().map(|v| v + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
                sampler.run_chain(psi0, settings, &mut rng)
            })
            .collect();
        let mut theta = Vec::new();
        let mut psi = Vec::new();
        let (mut acc, mut tot) = (0, 0);
        for r in results {
            let (t, p, a, n) = r?;
            theta.push(t);
            psi.push(p);
            acc += a;
            tot += n;
        }
        Chains {
            theta,
            psi,
            latent_accept: if tot == 0 { 1.0 } else { acc as f64 / tot as f64 },
        }
    };
    Ok((prob, chains))
}

/// Sample-based posterior summaries with the same layout as the engine's.
pub fn run(spec: &ModelSpec, data: &Dataset, settings: &McmcSettings) -> Result<PosteriorFit> {
    let (prob, chains) = sample(spec, data, settings)?;
    let sampler = Sampler::new(&prob, data)?;
    let df = sampler.df;
    let flat_theta: Vec<&DVector<f64>> = chains.theta.iter().flatten().collect();
    let flat_psi: Vec<&Vec<f64>> = chains.psi.iter().flatten().collect();
    if flat_theta.len() < 2 {
        return Err(Error::TooFewDraws {
            needed: 2,
            got: flat_theta.len(),
        });
    }
    let mut report = ConvergenceReport {
        warnings: prob.warnings.clone(),
        latent_converged: true,
        optimizer_converged: true,
        ..Default::default()
    };
    let mut rhat = Vec::new();
    let mut min_ess = f64::INFINITY;
    let mut monitor = |name: String, per_chain: Vec<Vec<f64>>| {
        let r = split_rhat(&per_chain);
        let e = effective_sample_size(&per_chain);
        if e.is_finite() {
            min_ess = min_ess.min(e);
        }
        rhat.push((name, r));
    };

    let mut fixed = Vec::new();
    for j in 0..prob.k {
        for c in 0..prob.q {
            let idx = j * df + c;
            let per_chain: Vec<Vec<f64>> = chains.theta.iter().map(|ch| ch.iter().map(|t| t[idx]).collect()).collect();
            let all: Vec<f64> = per_chain.iter().flatten().copied().collect();
            let name = prob.fixed_names[j * prob.q + c].clone();
            monitor(name.clone(), per_chain);
            fixed.push(ParamSummary {
                name,
                summary: sample_summary(&all),
            });
        }
    }
    let names = prob.hyper_names();
    let mut hyper_internal = Vec::new();
    for (i, name) in names.into_iter().enumerate() {
        let per_chain: Vec<Vec<f64>> = chains.psi.iter().map(|ch| ch.iter().map(|p| p[i]).collect()).collect();
        let all: Vec<f64> = per_chain.iter().flatten().copied().collect();
        monitor(name.clone(), per_chain);
        hyper_internal.push(ParamSummary {
            name,
            summary: sample_summary(&all),
        });
    }
    let mut hyper = Vec::new();
    for (i, c) in prob.layout.iter().enumerate() {
        let col = |f: &dyn Fn(f64) -> f64| -> Vec<f64> { flat_psi.iter().map(|p| f(p[i])).collect() };
        let mut push = |name: String, v: Vec<f64>| hyper.push(ParamSummary { name, summary: sample_summary(&v) });
        match *c {
            HyperCoord::LogSigma2(j) => push(format!("sigma2[{}]", prob.outcome_names[j]), col(&f64::exp)),
            HyperCoord::AtanhRho => push("rho".into(), col(&f64::tanh)),
            HyperCoord::LogOmega(j) => push(format!("omega[{}]", prob.outcome_names[j]), col(&f64::exp)),
            HyperCoord::Shape(j) => {
                push(format!("alpha[{}]", prob.outcome_names[j]), col(&alpha_from_internal));
                push(
                    format!("gamma1[{}]", prob.outcome_names[j]),
                    col(&|v| gamma1_of_alpha(alpha_from_internal(v))),
                );
            }
            HyperCoord::LogitPhi => push("phi".into(), col(&|v| 1.0 / (1.0 + (-v).exp()))),
        }
    }

    let area_effects: Vec<Vec<Summary>> = (0..prob.k)
        .map(|j| {
            let zs: Vec<Vec<f64>> = flat_theta.iter().map(|t| sampler.z_of(t, j)).collect();
            (0..prob.n)
                .map(|i| {
                    if sampler.has_field() {
                        sample_summary(&zs.iter().map(|z| z[i]).collect::<Vec<_>>())
                    } else {
                        Summary::point(0.0)
                    }
                })
                .collect()
        })
        .collect();
    let s = flat_theta.len() as f64;
    let mut theta_bar = DVector::zeros(sampler.dim);
    for t in &flat_theta {
        theta_bar += *t;
    }
    theta_bar /= s;
    let mut psi_bar = vec![0.0; prob.n_hyper()];
    for p in &flat_psi {
        for (a, b) in psi_bar.iter_mut().zip(p.iter()) {
            *a += b / s;
        }
    }
    let fitted: Vec<Vec<f64>> = (0..prob.k).map(|j| sampler.linear_predictor(&theta_bar, j)).collect();
    let z_bar: Vec<f64> = (0..prob.k).flat_map(|j| sampler.z_of(&theta_bar, j)).collect();
    report.constraint_residual = match &prob.constraints {
        Some(c) if sampler.has_field() => c.residual(&z_bar),
        _ => 0.0,
    };

    // Criteria from evenly spaced retained draws.
    let total = flat_theta.len();
    let n_keep = settings.n_criteria_draws.clamp(2, total);
    let picks: Vec<usize> = (0..n_keep).map(|t| t * total / n_keep).collect();
    let rows: Vec<Result<Vec<f64>>> = picks
        .par_iter()
        .map(|&t| {
            let hv = prob.hyper_values(flat_psi[t])?;
            let models = prob.error_models(&hv)?;
            let theta = flat_theta[t];
            let mut out = Vec::new();
            for j in 0..prob.k {
                for r in sampler.residuals(theta, j).iter() {
                    out.push(models[j].logpdf(*r));
                }
            }
            Ok(out)
        })
        .collect();
    let n_obs: usize = prob.observed.iter().map(|o| o.len()).sum();
    let mut ll = DMatrix::zeros(n_keep, n_obs);
    for (r, row) in rows.into_iter().enumerate() {
        for (c, v) in row?.into_iter().enumerate() {
            ll[(r, c)] = v;
        }
    }
    let hv = prob.hyper_values(&psi_bar)?;
    let ll_at_mean = sampler.loglik(&theta_bar, &prob.error_models(&hv)?);
    let y_obs = prob.observed_concat();
    let yhat: Vec<f64> = (0..prob.k)
        .flat_map(|j| prob.observed[j].iter().map(|&h| fitted[j][h]).collect::<Vec<_>>())
        .collect();
    let criteria = criteria_bundle(&ll, ll_at_mean, &y_obs, &yhat)?;

    let max_rhat = rhat.iter().map(|(_, r)| *r).fold(f64::NEG_INFINITY, f64::max);
    report.max_rhat = Some(max_rhat);
    report.min_ess = min_ess.is_finite().then_some(min_ess);
    report.unconverged = !(max_rhat <= RHAT_LIMIT);
    if report.unconverged {
        report.warnings.push(format!("sampler unconverged: max split-R̂ {max_rhat:.3}"));
    }
    report.rhat = rhat;
    if chains.latent_accept < 0.1 {
        report
            .warnings
            .push(format!("latent block acceptance rate low ({:.2})", chains.latent_accept));
    }
    Ok(PosteriorFit {
        method: "mcmc".into(),
        outcome_names: prob.outcome_names.clone(),
        fixed,
        hyper,
        hyper_internal,
        area_effects,
        fitted,
        criteria,
        grid: Vec::new(),
        convergence: report,
    })
}
