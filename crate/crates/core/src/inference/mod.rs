//! Posterior inference for the multilevel bivariate areal model.
//!
//! The latent vector `θ = (β_C, β, z)` is Gaussian given the hyperparameters
//! `Ψ`; the engine finds its conditional mode by Newton iterations, turns the
//! Gaussian approximation into a Laplace approximation of `π(Ψ | y)`, locates
//! the mode of that, and integrates over a small design of `Ψ` points. The
//! MCMC sampler in [`mcmc`] targets the same posterior by a separate route
//! and serves as a cross-check.

mod diagnostics;
mod engine;
pub mod mcmc;
mod optimize;
mod problem;
mod summary;

use serde::{Deserialize, Serialize};

use crate::criteria::CriteriaBundle;
use crate::deconfound::RemovalPattern;
use crate::error::{Error, Result};
use crate::likelihood::Likelihood;
use crate::spatial_prior::{ConstraintKind, LatentFamily};

pub use diagnostics::{effective_sample_size, split_rhat};
pub use engine::{fit, EngineSettings, IntegrationStrategy};
pub use optimize::{bfgs, fd_gradient, fd_hessian, BfgsOptions, BfgsResult};
pub use problem::{Dataset, HyperCoord, HyperValues, LatentFit, Problem};
pub use summary::{mixture_quantile, sample_summary, Summary};

/// Prior constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Priors {
    /// Variance of the normal prior on covariate effects (mean 0).
    pub beta_var: f64,
    pub intercept_mean: f64,
    pub intercept_var: f64,
    /// Gamma shape and rate on each error precision `1/ω`.
    pub precision_shape: f64,
    pub precision_rate: f64,
    /// Rate of the penalised-complexity prior on the skew-normal shape.
    pub pc_lambda: f64,
    /// Wishart degrees of freedom; `None` uses `2k + 1` for ICAR and `k` for PCAR.
    pub wishart_df: Option<f64>,
}

impl Default for Priors {
    fn default() -> Self {
        Self {
            beta_var: 1e3,
            intercept_mean: 180.0,
            intercept_var: 1e3,
            precision_shape: 1e-3,
            precision_rate: 1e-3,
            pc_lambda: 4.0,
            wishart_df: None,
        }
    }
}

/// Spatial-confounding treatment.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Treatment {
    #[default]
    Base,
    /// Latent field restricted to the orthogonal complement of `X_totᵀ ξ`.
    Rsr,
    /// Covariates replaced by their eigenvector-filtered versions.
    SpatialPlus { pattern: RemovalPattern, rescale: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// One error model per outcome.
    pub likelihoods: Vec<Likelihood>,
    pub family: LatentFamily,
    pub treatment: Treatment,
    pub priors: Priors,
    /// Component-specific intercepts; `None` picks them for every family but PCAR.
    pub component_intercepts: Option<bool>,
    /// Scale intrinsic structure matrices to unit geometric-mean variance.
    pub scaled: bool,
    /// Fixed PCAR association parameter; estimated when `None`.
    pub phi: Option<f64>,
    /// Impose per-component sum-to-zero constraints on a proper field.
    pub constrain_proper: bool,
}

impl ModelSpec {
    pub fn new(likelihoods: Vec<Likelihood>, family: LatentFamily) -> Self {
        Self {
            likelihoods,
            family,
            treatment: Treatment::Base,
            priors: Priors::default(),
            component_intercepts: None,
            scaled: true,
            phi: None,
            constrain_proper: false,
        }
    }

    pub fn k(&self) -> usize {
        self.likelihoods.len()
    }

    pub fn uses_component_intercepts(&self) -> bool {
        self.component_intercepts.unwrap_or(self.family != LatentFamily::Pcar)
    }

    pub fn wishart_df(&self) -> f64 {
        let k = self.k() as f64;
        self.priors.wishart_df.unwrap_or(match self.family {
            LatentFamily::Pcar => k,
            _ => 2.0 * k + 1.0,
        })
    }

    pub fn constraint_kind(&self) -> Option<ConstraintKind> {
        if !self.family.has_field() {
            return None;
        }
        if self.treatment == Treatment::Rsr {
            return Some(ConstraintKind::Rsr);
        }
        if self.family.is_intrinsic() || self.constrain_proper {
            Some(ConstraintKind::SumToZero)
        } else {
            None
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 || k > 2 {
            return Err(Error::InvalidArgument(format!("1 or 2 outcomes supported, got {k}")));
        }
        if self.treatment == Treatment::Rsr && !self.family.has_field() {
            return Err(Error::InvalidArgument("RSR needs a latent field".into()));
        }
        if let Some(phi) = self.phi {
            if self.family != LatentFamily::Pcar {
                return Err(Error::InvalidArgument("a fixed phi applies to the PCAR family only".into()));
            }
            if !(phi > 0.0 && phi < 1.0) {
                return Err(Error::PhiOutOfRange(phi));
            }
        }
        let p = &self.priors;
        for (name, v) in [
            ("beta_var", p.beta_var),
            ("intercept_var", p.intercept_var),
            ("precision_shape", p.precision_shape),
            ("precision_rate", p.precision_rate),
            ("pc_lambda", p.pc_lambda),
        ] {
            if !(v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.family.correlated() && self.wishart_df() <= k as f64 - 1.0 {
            return Err(Error::InvalidArgument(format!(
                "Wishart degrees of freedom must exceed {}",
                k - 1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    #[serde(flatten)]
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub internal: Vec<f64>,
    pub log_posterior: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub optimizer_iterations: usize,
    pub optimizer_converged: bool,
    pub optimizer_fallback: bool,
    pub hessian_regularized: bool,
    pub latent_converged: bool,
    pub latent_max_grad_norm: f64,
    pub constraint_residual: f64,
    /// Split-R̂ per monitored quantity (sampler only).
    pub rhat: Vec<(String, f64)>,
    pub min_ess: Option<f64>,
    pub max_rhat: Option<f64>,
    pub unconverged: bool,
    pub warnings: Vec<String>,
}

/// Marginal posterior summaries, predictions and criteria of one fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorFit {
    pub method: String,
    pub outcome_names: Vec<String>,
    /// Intercepts then covariate effects, outcome by outcome.
    pub fixed: Vec<ParamSummary>,
    /// Natural-scale hyperparameters.
    pub hyper: Vec<ParamSummary>,
    /// Hyperparameters on the internal (unconstrained) scale.
    pub hyper_internal: Vec<ParamSummary>,
    /// `area_effects[j][i]`: latent effect of outcome `j` in area `i`.
    pub area_effects: Vec<Vec<Summary>>,
    /// `fitted[j][h]`: posterior mean of the linear predictor.
    pub fitted: Vec<Vec<f64>>,
    pub criteria: CriteriaBundle,
    pub grid: Vec<GridPoint>,
    pub convergence: ConvergenceReport,
}

impl PosteriorFit {
    pub fn fixed_by_name(&self, name: &str) -> Option<&Summary> {
        self.fixed.iter().find(|p| p.name == name).map(|p| &p.summary)
    }

    pub fn hyper_by_name(&self, name: &str) -> Option<&Summary> {
        self.hyper.iter().find(|p| p.name == name).map(|p| &p.summary)
    }
}
