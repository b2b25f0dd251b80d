//! Model assembly: design, latent layout, priors, and the Gaussian
//! approximation of `θ | y, Ψ`.
//!
//! The latent vector is laid out outcome by outcome; within outcome `j`
//! the block is `[intercepts (n_int) | covariate effects (p) | u (r)]` where
//! the area field is `z_j = B u_j` and `B` is an orthonormal basis of the
//! constraint null space (identity when unconstrained).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::{ModelSpec, Treatment};
use crate::deconfound::deconfounded_design;
use crate::error::{Error, Result};
use crate::graph::{eigendecompose, AreaGraph};
use crate::likelihood::{
    alpha_from_internal, alpha_of_gamma1, gamma1_sup, internal_from_alpha, ErrorModel, Likelihood, PcPrior,
};
use crate::multilevel::{aggregate, LevelMap};
use crate::spatial_prior::{
    build_constraints, scale_structure, wishart_identity_logpdf, ConstraintSet, CovParams, LatentFamily,
};

/// Observations, their areas, and the area graph.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub graph: AreaGraph,
    pub map: LevelMap,
    /// `y[j][h]`; NaN marks a missing outcome.
    pub y: Vec<Vec<f64>>,
    pub outcome_names: Vec<String>,
    pub x: DMatrix<f64>,
    pub covariate_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        graph: AreaGraph,
        map: LevelMap,
        y: Vec<Vec<f64>>,
        outcome_names: Vec<String>,
        x: DMatrix<f64>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        if map.n_areas() != graph.n() {
            return Err(Error::DimensionMismatch(format!(
                "level map has {} areas, graph has {}",
                map.n_areas(),
                graph.n()
            )));
        }
        // The two component labelings must describe the same partition.
        let mut to_graph = vec![usize::MAX; map.n_components()];
        for i in 0..graph.n() {
            let a = map.component_of()[i];
            let b = graph.components()[i];
            if to_graph[a] == usize::MAX {
                to_graph[a] = b;
            } else if to_graph[a] != b {
                return Err(Error::ConflictingComponent {
                    area: i,
                    first: to_graph[a],
                    second: b,
                });
            }
        }
        if y.len() != outcome_names.len() || y.iter().any(|v| v.len() != map.n_obs()) {
            return Err(Error::DimensionMismatch("outcome vectors vs observations".into()));
        }
        if x.nrows() != map.n_obs() || x.ncols() != covariate_names.len() {
            return Err(Error::DimensionMismatch("covariate matrix vs observations/names".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("covariates must be finite".into()));
        }
        Ok(Self {
            graph,
            map,
            y,
            outcome_names,
            x,
            covariate_names,
        })
    }

    pub fn k(&self) -> usize {
        self.y.len()
    }

    pub fn n_obs(&self) -> usize {
        self.map.n_obs()
    }
}

/// One internal hyperparameter coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HyperCoord {
    LogSigma2(usize),
    AtanhRho,
    LogOmega(usize),
    /// Signed-distance coordinate of the skew-normal shape.
    Shape(usize),
    LogitPhi,
}

/// Natural-scale hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperValues {
    pub sigma2: Vec<f64>,
    pub rho: f64,
    pub omega: Vec<f64>,
    pub alpha: Vec<f64>,
    pub phi: Option<f64>,
}

/// Result of the Newton search for the conditional mode of `θ`.
#[derive(Debug, Clone)]
pub struct LatentFit {
    pub theta: DVector<f64>,
    /// Cholesky factor of the negative Hessian at the mode.
    pub chol: Cholesky<f64, Dyn>,
    /// Laplace approximation of `log π(y | Ψ)`.
    pub log_marginal: f64,
    pub loglik: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

struct LatentPrior {
    q0: DMatrix<f64>,
    mu: DVector<f64>,
    log_det: f64,
}

/// Everything needed to evaluate the model at a hyperparameter point.
#[derive(Debug, Clone)]
pub struct Problem {
    pub spec: ModelSpec,
    pub k: usize,
    pub n: usize,
    pub p: usize,
    pub n_int: usize,
    /// `n_int + p`.
    pub q: usize,
    /// Dimension of each outcome's field coordinates.
    pub r: usize,
    /// Latent block size per outcome.
    pub d: usize,
    /// Observation-level design `[intercepts | covariates]`, `N × q`.
    pub design: DMatrix<f64>,
    pub area_of: Vec<usize>,
    /// Observed observation indices per outcome.
    pub observed: Vec<Vec<usize>>,
    /// Observed outcome values aligned with `observed`.
    pub y_obs: Vec<Vec<f64>>,
    pub basis: Option<DMatrix<f64>>,
    pub constraints: Option<ConstraintSet>,
    pub layout: Vec<HyperCoord>,
    pub fixed_names: Vec<String>,
    pub outcome_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub warnings: Vec<String>,
    degree: DVector<f64>,
    proximity: DMatrix<f64>,
    /// `BᵀSB` and its log-determinant for non-PCAR fields.
    fixed_structure: Option<(DMatrix<f64>, f64)>,
    /// `(FᵀF, Fᵀy, yᵀy)` per Gaussian outcome.
    gauss_gram: Vec<Option<(DMatrix<f64>, DVector<f64>, f64)>>,
    pc: PcPrior,
}

fn log_det_spd(m: &DMatrix<f64>, what: &str) -> Result<f64> {
    let chol = Cholesky::new(m.clone()).ok_or_else(|| Error::NotPositiveDefinite(what.into()))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Problem {
    pub fn new(spec: &ModelSpec, data: &Dataset) -> Result<Self> {
        spec.validate()?;
        let k = spec.k();
        if data.k() != k {
            return Err(Error::DimensionMismatch(format!(
                "model has {k} likelihoods, data has {} outcomes",
                data.k()
            )));
        }
        let g = &data.graph;
        let n = g.n();
        let nobs = data.n_obs();
        let mut warnings = Vec::new();

        let covariates = match &spec.treatment {
            Treatment::SpatialPlus { pattern, rescale } => {
                let cov = aggregate(&data.x, data.covariate_names.clone(), &data.map)?;
                let eig = eigendecompose(g);
                pattern.validate(&eig)?;
                let dd = deconfounded_design(&cov, &data.map, &eig, pattern, *rescale)?;
                for m in &dd.zero_variance {
                    warnings.push(format!(
                        "deconfounded covariate '{}' has zero variance and was not rescaled",
                        data.covariate_names[*m]
                    ));
                }
                dd.x
            }
            _ => data.x.clone(),
        };
        let p = covariates.ncols();
        let comp_int = spec.uses_component_intercepts();
        let n_int = if comp_int { g.n_components() } else { 1 };
        let q = n_int + p;
        let area_of = data.map.area_of().to_vec();
        let design = DMatrix::from_fn(nobs, q, |h, c| {
            if c < n_int {
                if !comp_int || g.components()[area_of[h]] == c {
                    1.0
                } else {
                    0.0
                }
            } else {
                covariates[(h, c - n_int)]
            }
        });

        let constraints = match spec.constraint_kind() {
            Some(kind) => Some(build_constraints(kind, k, g, &data.map, Some(&design))?),
            None => None,
        };
        let basis = constraints.as_ref().map(|c| c.null_basis());
        let r = if spec.family.has_field() {
            basis.as_ref().map_or(n, |b| b.ncols())
        } else {
            0
        };
        if spec.family.has_field() && r == 0 {
            return Err(Error::InvalidArgument("constraints leave no free latent dimension".into()));
        }

        let fixed_structure = match spec.family {
            LatentFamily::Null | LatentFamily::Pcar => None,
            fam => {
                let s = match fam {
                    LatentFamily::Iid => DMatrix::identity(n, n),
                    _ if spec.scaled => {
                        let sc = scale_structure(g);
                        if !sc.flagged.is_empty() {
                            warnings.push(format!(
                                "singleton components {:?} keep an unscaled (unit) structure factor",
                                sc.flagged
                            ));
                        }
                        sc.matrix
                    }
                    _ => g.laplacian(),
                };
                let su = match &basis {
                    Some(b) => b.transpose() * s * b,
                    None => s,
                };
                let ld = log_det_spd(&su, "constrained structure matrix")?;
                Some((su, ld))
            }
        };
        if spec.family == LatentFamily::Pcar {
            if let Some(i) = (0..n).find(|&i| g.degree(i) == 0) {
                return Err(Error::NotPositiveDefinite(format!(
                    "proper CAR structure is singular: area {i} has no neighbours"
                )));
            }
        }

        let mut observed = Vec::with_capacity(k);
        let mut y_obs = Vec::with_capacity(k);
        for j in 0..k {
            let idx: Vec<usize> = (0..nobs).filter(|&h| !data.y[j][h].is_nan()).collect();
            if idx.is_empty() {
                return Err(Error::InvalidArgument(format!("outcome '{}' has no observed values", data.outcome_names[j])));
            }
            y_obs.push(idx.iter().map(|&h| data.y[j][h]).collect());
            observed.push(idx);
        }

        let mut layout = Vec::new();
        match spec.family {
            LatentFamily::Null => {}
            LatentFamily::Iid | LatentFamily::IndepIcar => layout.extend((0..k).map(HyperCoord::LogSigma2)),
            LatentFamily::Icar | LatentFamily::Pcar => {
                layout.extend((0..k).map(HyperCoord::LogSigma2));
                if k == 2 {
                    layout.push(HyperCoord::AtanhRho);
                }
            }
        }
        layout.extend((0..k).map(HyperCoord::LogOmega));
        for (j, l) in spec.likelihoods.iter().enumerate() {
            if *l == Likelihood::SkewNormal {
                layout.push(HyperCoord::Shape(j));
            }
        }
        if spec.family == LatentFamily::Pcar && spec.phi.is_none() {
            layout.push(HyperCoord::LogitPhi);
        }

        // Component intercepts are labelled with the 1-based ids used in data files.
        let mut fixed_names = Vec::new();
        for name in &data.outcome_names {
            if comp_int {
                for c in 0..n_int {
                    fixed_names.push(format!("{name}:intercept[{}]", c + 1));
                }
            } else {
                fixed_names.push(format!("{name}:intercept"));
            }
            for cname in &data.covariate_names {
                fixed_names.push(format!("{name}:{cname}"));
            }
        }

        let mut prob = Self {
            spec: spec.clone(),
            k,
            n,
            p,
            n_int,
            q,
            r,
            d: q + r,
            design,
            area_of,
            observed,
            y_obs,
            basis,
            constraints,
            layout,
            fixed_names,
            outcome_names: data.outcome_names.clone(),
            covariate_names: data.covariate_names.clone(),
            warnings,
            degree: DVector::from_vec(g.degrees()),
            proximity: g.proximity(),
            fixed_structure,
            gauss_gram: Vec::new(),
            pc: PcPrior::new(spec.priors.pc_lambda)?,
        };
        prob.gauss_gram = (0..k)
            .map(|j| {
                if spec.likelihoods[j] == Likelihood::Gaussian {
                    let ones = vec![1.0; prob.observed[j].len()];
                    let gram = prob.weighted_gram(j, &ones);
                    let b = prob.design_transpose_times(j, &prob.y_obs[j]);
                    let yy = prob.y_obs[j].iter().map(|v| v * v).sum();
                    Some((gram, b, yy))
                } else {
                    None
                }
            })
            .collect();
        Ok(prob)
    }

    /// Total latent dimension.
    pub fn dim(&self) -> usize {
        self.k * self.d
    }

    pub fn n_hyper(&self) -> usize {
        self.layout.len()
    }

    pub fn hyper_names(&self) -> Vec<String> {
        self.layout
            .iter()
            .map(|c| match c {
                HyperCoord::LogSigma2(j) => format!("log_sigma2[{}]", self.outcome_names[*j]),
                HyperCoord::AtanhRho => "atanh_rho".into(),
                HyperCoord::LogOmega(j) => format!("log_omega[{}]", self.outcome_names[*j]),
                HyperCoord::Shape(j) => format!("shape_coord[{}]", self.outcome_names[*j]),
                HyperCoord::LogitPhi => "logit_phi".into(),
            })
            .collect()
    }

    pub fn hyper_values(&self, psi: &[f64]) -> Result<HyperValues> {
        if psi.len() != self.layout.len() {
            return Err(Error::DimensionMismatch("hyperparameter vector length".into()));
        }
        if psi.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite hyperparameters {psi:?}")));
        }
        let mut hv = HyperValues {
            sigma2: Vec::new(),
            rho: 0.0,
            omega: vec![0.0; self.k],
            alpha: vec![0.0; self.k],
            phi: self.spec.phi,
        };
        for (c, &v) in self.layout.iter().zip(psi) {
            match *c {
                HyperCoord::LogSigma2(_) => hv.sigma2.push(v.exp()),
                HyperCoord::AtanhRho => hv.rho = v.tanh(),
                HyperCoord::LogOmega(j) => hv.omega[j] = v.exp(),
                HyperCoord::Shape(j) => hv.alpha[j] = alpha_from_internal(v),
                HyperCoord::LogitPhi => hv.phi = Some(sigmoid(v)),
            }
        }
        if hv.rho.abs() >= 1.0 {
            hv.rho = hv.rho.signum() * (1.0 - 1e-15);
        }
        Ok(hv)
    }

    pub fn internal_from_values(&self, hv: &HyperValues) -> Vec<f64> {
        self.layout
            .iter()
            .map(|c| match *c {
                HyperCoord::LogSigma2(j) => hv.sigma2[j].ln(),
                HyperCoord::AtanhRho => hv.rho.atanh(),
                HyperCoord::LogOmega(j) => hv.omega[j].ln(),
                HyperCoord::Shape(j) => internal_from_alpha(hv.alpha[j]),
                HyperCoord::LogitPhi => {
                    let phi = hv.phi.unwrap_or(0.5);
                    (phi / (1.0 - phi)).ln()
                }
            })
            .collect()
    }

    /// Log prior density of the internal coordinates (Jacobians included).
    pub fn log_prior(&self, psi: &[f64]) -> Result<f64> {
        let hv = self.hyper_values(psi)?;
        let pr = &self.spec.priors;
        let mut lp = 0.0;
        match self.spec.family {
            LatentFamily::Icar | LatentFamily::Pcar => {
                let cov = CovParams::new(hv.sigma2.clone(), hv.rho)?;
                lp += wishart_identity_logpdf(&cov.precision(), self.spec.wishart_df())?;
                lp += cov.log_jacobian_from_unconstrained();
            }
            LatentFamily::Iid | LatentFamily::IndepIcar => {
                // flat on each standard deviation
                lp += hv.sigma2.iter().map(|s| 0.5 * s.ln()).sum::<f64>();
            }
            LatentFamily::Null => {}
        }
        for (c, &v) in self.layout.iter().zip(psi) {
            match *c {
                HyperCoord::LogOmega(_) => {
                    let (a, b) = (pr.precision_shape, pr.precision_rate);
                    let tau = (-v).exp();
                    lp += a * b.ln() - ln_gamma(a) + a * tau.ln() - b * tau;
                }
                HyperCoord::Shape(_) => lp += self.pc.log_density_internal(v),
                HyperCoord::LogitPhi => lp += -softplus(-v) - softplus(v),
                _ => {}
            }
        }
        Ok(lp)
    }

    /// Between-outcome precision `Λ`.
    pub fn lambda(&self, hv: &HyperValues) -> Result<DMatrix<f64>> {
        match self.spec.family {
            LatentFamily::Icar | LatentFamily::Pcar => Ok(CovParams::new(hv.sigma2.clone(), hv.rho)?.precision()),
            _ => Ok(DMatrix::from_fn(self.k, self.k, |a, b| if a == b { 1.0 / hv.sigma2[a] } else { 0.0 })),
        }
    }

    /// Area structure in field coordinates, `BᵀSB`, and its log-determinant.
    pub fn structure_u(&self, hv: &HyperValues) -> Result<(DMatrix<f64>, f64)> {
        if let Some((s, ld)) = &self.fixed_structure {
            return Ok((s.clone(), *ld));
        }
        let phi = hv.phi.ok_or_else(|| Error::InvalidArgument("PCAR needs phi".into()))?;
        let s = DMatrix::from_diagonal(&self.degree) - &self.proximity * phi;
        let su = match &self.basis {
            Some(b) => b.transpose() * s * b,
            None => s,
        };
        let ld = log_det_spd(&su, "proper CAR structure")?;
        Ok((su, ld))
    }

    fn prior(&self, hv: &HyperValues) -> Result<LatentPrior> {
        let dim = self.dim();
        let pr = &self.spec.priors;
        let mut q0 = DMatrix::zeros(dim, dim);
        let mut mu = DVector::zeros(dim);
        let mut log_det = 0.0;
        for j in 0..self.k {
            let off = j * self.d;
            for c in 0..self.q {
                let var = if c < self.n_int { pr.intercept_var } else { pr.beta_var };
                q0[(off + c, off + c)] = 1.0 / var;
                log_det -= var.ln();
                if c < self.n_int {
                    mu[off + c] = pr.intercept_mean;
                }
            }
        }
        if self.r > 0 {
            let lambda = self.lambda(hv)?;
            let (su, ld) = self.structure_u(hv)?;
            let ld_lambda = log_det_spd(&lambda, "Λ")?;
            for a in 0..self.k {
                for b in 0..self.k {
                    let (oa, ob) = (a * self.d + self.q, b * self.d + self.q);
                    let mut blk = q0.view_mut((oa, ob), (self.r, self.r));
                    blk += &su * lambda[(a, b)];
                }
            }
            log_det += self.r as f64 * ld_lambda + self.k as f64 * ld;
        }
        Ok(LatentPrior { q0, mu, log_det })
    }

    pub fn error_models(&self, hv: &HyperValues) -> Result<Vec<ErrorModel>> {
        (0..self.k)
            .map(|j| ErrorModel::new(self.spec.likelihoods[j], hv.omega[j], hv.alpha[j]))
            .collect()
    }

    /// `B u_j` for the field block of outcome `j` (zeros without a field).
    pub fn area_field(&self, theta: &DVector<f64>, j: usize) -> DVector<f64> {
        if self.r == 0 {
            return DVector::zeros(self.n);
        }
        let u = theta.rows(j * self.d + self.q, self.r);
        match &self.basis {
            Some(b) => b * u,
            None => u.into_owned(),
        }
    }

    /// Linear predictor of outcome `j` for every observation.
    pub fn linear_predictor(&self, theta: &DVector<f64>, j: usize) -> Vec<f64> {
        let z = self.area_field(theta, j);
        let beta = theta.rows(j * self.d, self.q);
        let fixed = &self.design * beta;
        (0..self.design.nrows()).map(|h| fixed[h] + z[self.area_of[h]]).collect()
    }

    /// `Fⱼᵀ v` for a vector over outcome `j`'s observed entries.
    fn design_transpose_times(&self, j: usize, v: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.d);
        let mut by_area = vec![0.0; self.n];
        for (t, &h) in self.observed[j].iter().enumerate() {
            for c in 0..self.q {
                out[c] += self.design[(h, c)] * v[t];
            }
            by_area[self.area_of[h]] += v[t];
        }
        if self.r > 0 {
            let ba = DVector::from_vec(by_area);
            let zpart = match &self.basis {
                Some(b) => b.transpose() * ba,
                None => ba,
            };
            out.rows_mut(self.q, self.r).copy_from(&zpart);
        }
        out
    }

    /// `Fⱼᵀ diag(w) Fⱼ` over outcome `j`'s observed entries.
    fn weighted_gram(&self, j: usize, w: &[f64]) -> DMatrix<f64> {
        let (q, r, n) = (self.q, self.r, self.n);
        let mut out = DMatrix::zeros(self.d, self.d);
        let mut p_xi = DMatrix::zeros(q, n);
        let mut wsum = vec![0.0; n];
        for (t, &h) in self.observed[j].iter().enumerate() {
            let a = self.area_of[h];
            let wt = w[t];
            for c1 in 0..q {
                let v1 = self.design[(h, c1)] * wt;
                if v1 == 0.0 {
                    continue;
                }
                for c2 in c1..q {
                    out[(c1, c2)] += v1 * self.design[(h, c2)];
                }
                p_xi[(c1, a)] += v1;
            }
            wsum[a] += wt;
        }
        for c1 in 0..q {
            for c2 in 0..c1 {
                out[(c1, c2)] = out[(c2, c1)];
            }
        }
        if r > 0 {
            let (cross, zz) = match &self.basis {
                Some(b) => {
                    let scaled = DMatrix::from_fn(n, r, |i, c| b[(i, c)] * wsum[i]);
                    (&p_xi * b, b.transpose() * scaled)
                }
                None => (p_xi, DMatrix::from_diagonal(&DVector::from_vec(wsum))),
            };
            out.view_mut((0, q), (q, r)).copy_from(&cross);
            out.view_mut((q, 0), (r, q)).copy_from(&cross.transpose());
            out.view_mut((q, q), (r, r)).copy_from(&zz);
        }
        out
    }

    /// Log-likelihood, its gradient and its negative Hessian in `θ`.
    fn likelihood_terms(&self, theta: &DVector<f64>, models: &[ErrorModel]) -> (f64, DVector<f64>, DMatrix<f64>) {
        let dim = self.dim();
        let mut ll = 0.0;
        let mut grad = DVector::zeros(dim);
        let mut neg_hess = DMatrix::zeros(dim, dim);
        for j in 0..self.k {
            let off = j * self.d;
            let tj = theta.rows(off, self.d);
            match (&models[j], &self.gauss_gram[j]) {
                (ErrorModel::Gaussian { omega }, Some((gram, b, yy))) => {
                    let gt = gram * tj;
                    let nj = self.observed[j].len() as f64;
                    ll += -0.5 / omega * (yy - 2.0 * b.dot(&tj) + tj.dot(&gt))
                        - 0.5 * nj * (2.0 * std::f64::consts::PI * omega).ln();
                    grad.rows_mut(off, self.d).copy_from(&((b - gt) / *omega));
                    neg_hess.view_mut((off, off), (self.d, self.d)).copy_from(&(gram / *omega));
                }
                (model, _) => {
                    let eta = self.linear_predictor(&theta.clone_owned(), j);
                    let nobs = self.observed[j].len();
                    let mut v = Vec::with_capacity(nobs);
                    let mut w = Vec::with_capacity(nobs);
                    for (t, &h) in self.observed[j].iter().enumerate() {
                        let (lp, d1, d2) = model.derivs(self.y_obs[j][t] - eta[h]);
                        ll += lp;
                        v.push(-d1);
                        w.push(-d2);
                    }
                    grad.rows_mut(off, self.d).copy_from(&self.design_transpose_times(j, &v));
                    neg_hess
                        .view_mut((off, off), (self.d, self.d))
                        .copy_from(&self.weighted_gram(j, &w));
                }
            }
        }
        (ll, grad, neg_hess)
    }

    /// Total log-likelihood at `θ`.
    pub fn loglik(&self, theta: &DVector<f64>, models: &[ErrorModel]) -> f64 {
        self.pointwise_loglik(theta, models).iter().sum()
    }

    /// Log-likelihood of every observed entry, outcome by outcome.
    pub fn pointwise_loglik(&self, theta: &DVector<f64>, models: &[ErrorModel]) -> Vec<f64> {
        let mut out = Vec::new();
        for j in 0..self.k {
            let eta = self.linear_predictor(theta, j);
            for (t, &h) in self.observed[j].iter().enumerate() {
                out.push(models[j].logpdf(self.y_obs[j][t] - eta[h]));
            }
        }
        out
    }

    /// Observed outcomes concatenated in the order of [`Self::pointwise_loglik`].
    pub fn observed_concat(&self) -> Vec<f64> {
        self.y_obs.iter().flatten().copied().collect()
    }

    /// Newton iterations for the mode of `θ | y, Ψ` and the Laplace
    /// approximation of `log π(y | Ψ)`.
    pub fn fit_latent(
        &self,
        psi: &[f64],
        start: Option<&DVector<f64>>,
        max_iter: usize,
        grad_tol: f64,
    ) -> Result<LatentFit> {
        let hv = self.hyper_values(psi)?;
        let prior = self.prior(&hv)?;
        let models = self.error_models(&hv)?;
        let objective = |th: &DVector<f64>| -> (f64, f64) {
            let dev = th - &prior.mu;
            let quad = dev.dot(&(&prior.q0 * &dev));
            let (ll, _, _) = self.likelihood_terms(th, &models);
            (ll - 0.5 * quad, ll)
        };
        let mut theta = start.cloned().unwrap_or_else(|| prior.mu.clone());
        let mut iterations = 0;
        let mut converged = false;
        let (chol, grad_norm, ll, f) = loop {
            let (ll, grad_ll, neg_hess) = self.likelihood_terms(&theta, &models);
            let dev = &theta - &prior.mu;
            let qd = &prior.q0 * &dev;
            let f = ll - 0.5 * dev.dot(&qd);
            let g = grad_ll - qd;
            let h = &prior.q0 + neg_hess;
            let chol = Cholesky::new(h).ok_or_else(|| Error::NotPositiveDefinite("latent Hessian".into()))?;
            let gnorm = g.norm();
            if gnorm < grad_tol {
                converged = true;
                break (chol, gnorm, ll, f);
            }
            let step = chol.solve(&g);
            let decrement = g.dot(&step);
            if decrement < 1e-20 * (1.0 + f.abs()) {
                converged = true;
                break (chol, gnorm, ll, f);
            }
            if iterations >= max_iter {
                break (chol, gnorm, ll, f);
            }
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let cand = &theta + &step * t;
                let (fc, _) = objective(&cand);
                if fc.is_finite() && fc >= f + 1e-4 * t * decrement.min(1.0) - 1e-12 * f.abs() {
                    theta = cand;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            iterations += 1;
            if !accepted {
                break (chol, gnorm, ll, f);
            }
        };
        let log_det_h = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let quad_part = f - ll;
        Ok(LatentFit {
            log_marginal: ll + quad_part + 0.5 * prior.log_det - 0.5 * log_det_h,
            theta,
            chol,
            loglik: ll,
            iterations,
            grad_norm,
            converged,
        })
    }

    /// Gradient of the Newton objective (for checks).
    pub fn latent_objective(&self, psi: &[f64], theta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let hv = self.hyper_values(psi)?;
        let prior = self.prior(&hv)?;
        let models = self.error_models(&hv)?;
        let (ll, grad_ll, _) = self.likelihood_terms(theta, &models);
        let dev = theta - &prior.mu;
        let qd = &prior.q0 * &dev;
        Ok((ll - 0.5 * dev.dot(&qd), grad_ll - qd))
    }

    /// Unnormalized log posterior of `(θ, Ψ)` given `y`, for checks against
    /// brute-force integration.
    pub fn log_joint_latent(&self, psi: &[f64], theta: &DVector<f64>) -> Result<f64> {
        let hv = self.hyper_values(psi)?;
        let prior = self.prior(&hv)?;
        let (f, _) = self.latent_objective(psi, theta)?;
        let dim = self.dim() as f64;
        Ok(f + 0.5 * prior.log_det - 0.5 * dim * (2.0 * std::f64::consts::PI).ln())
    }

    /// Documented starting point: per-outcome least squares on the fixed
    /// design gives residual variance `v`; `ω = σ² = v/2`, `ρ = 0`, shape
    /// from the residual skewness, `logit φ = 2`.
    pub fn start_point(&self) -> Vec<f64> {
        let mut resid_var = vec![1.0; self.k];
        let mut resid_skew = vec![0.0; self.k];
        for j in 0..self.k {
            let rows = &self.observed[j];
            let x = DMatrix::from_fn(rows.len(), self.q, |t, c| self.design[(rows[t], c)]);
            let y = DVector::from_column_slice(&self.y_obs[j]);
            let mut xtx = x.transpose() * &x;
            for c in 0..self.q {
                xtx[(c, c)] += 1e-8 * (1.0 + xtx[(c, c)]);
            }
            let beta = Cholesky::new(xtx)
                .map(|ch| ch.solve(&(x.transpose() * &y)))
                .unwrap_or_else(|| DVector::zeros(self.q));
            let res = y - x * beta;
            let m = res.len() as f64;
            let dof = (m - self.q as f64).max(1.0);
            let var = res.dot(&res) / dof;
            resid_var[j] = if var > 0.0 { var } else { 1.0 };
            let mean = res.mean();
            let m2 = res.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / m;
            let m3 = res.iter().map(|e| (e - mean).powi(3)).sum::<f64>() / m;
            resid_skew[j] = if m2 > 0.0 { m3 / m2.powf(1.5) } else { 0.0 };
        }
        self.layout
            .iter()
            .map(|c| match *c {
                HyperCoord::LogSigma2(j) | HyperCoord::LogOmega(j) => (0.5 * resid_var[j]).ln(),
                HyperCoord::AtanhRho => 0.0,
                HyperCoord::Shape(j) => {
                    let g = resid_skew[j].clamp(-0.9 * gamma1_sup(), 0.9 * gamma1_sup());
                    internal_from_alpha(alpha_of_gamma1(g).unwrap_or(0.0))
                }
                HyperCoord::LogitPhi => 2.0,
            })
            .collect()
    }

    /// Area effects `z` of all outcomes, outcome-major, from a latent vector.
    pub fn z_full(&self, theta: &DVector<f64>) -> Vec<f64> {
        (0..self.k).flat_map(|j| self.area_field(theta, j).iter().copied().collect::<Vec<_>>()).collect()
    }
}
