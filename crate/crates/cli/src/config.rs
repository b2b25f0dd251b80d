//! Run configuration: built-in defaults, then a TOML file, then flags.

use std::path::{Path, PathBuf};

use areal_core::deconfound::RemovalPattern;
use areal_core::inference::mcmc::McmcSettings;
use areal_core::inference::{EngineSettings, ModelSpec, Priors, Treatment};
use areal_core::likelihood::Likelihood;
use areal_core::spatial_prior::LatentFamily;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub family: Option<String>,
    pub likelihoods: Option<Vec<String>>,
    pub rsr: Option<bool>,
    /// Pattern file, or `"moran"` for the Moran-minimal pattern.
    pub spatial_plus: Option<String>,
    pub rescale: Option<bool>,
    pub phi: Option<f64>,
    pub scaled: Option<bool>,
    pub component_intercepts: Option<bool>,
    pub constrain_proper: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub obs: Option<PathBuf>,
    pub adj: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub label: Option<String>,
    pub threads: Option<usize>,
    pub bit_reproducible: Option<bool>,
    pub oracle: Option<bool>,
    pub lenient: Option<bool>,
    pub model: ModelSection,
    pub priors: Option<Priors>,
    pub engine: Option<EngineSettings>,
    pub mcmc: Option<McmcSettings>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::validation(format!("config {}: {e}", path.display())))
    }
}

/// How the Spatial+ pattern is obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum PatternSource {
    File(PathBuf),
    MoranMinimal,
}

/// Fully resolved settings for `fit`.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub obs: PathBuf,
    pub adj: PathBuf,
    pub out: PathBuf,
    pub label: Option<String>,
    pub threads: Option<usize>,
    pub bit_reproducible: bool,
    pub oracle: bool,
    pub lenient: bool,
    pub family: LatentFamily,
    pub likelihoods: Option<Vec<Likelihood>>,
    pub rsr: bool,
    pub spatial_plus: Option<PatternSource>,
    pub rescale: bool,
    pub phi: Option<f64>,
    pub scaled: bool,
    pub component_intercepts: Option<bool>,
    pub constrain_proper: bool,
    pub priors: Priors,
    pub engine: EngineSettings,
    pub mcmc: McmcSettings,
}

/// Flag values; `None` leaves the config (or default) in place.
#[derive(Debug, Clone, Default)]
pub struct FitOverrides {
    pub obs: Option<PathBuf>,
    pub adj: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub label: Option<String>,
    pub threads: Option<usize>,
    pub bit_reproducible: bool,
    pub oracle: bool,
    pub lenient: bool,
    pub family: Option<String>,
    pub likelihoods: Option<Vec<String>>,
    pub rsr: bool,
    pub spatial_plus: Option<String>,
    pub no_rescale: bool,
    pub phi: Option<f64>,
    pub unscaled: bool,
    pub component_intercepts: Option<bool>,
    pub constrain_proper: bool,
    pub seed: Option<u64>,
    pub strategy: Option<String>,
    pub draws: Option<usize>,
    pub mcmc_iterations: Option<usize>,
    pub mcmc_warmup: Option<usize>,
    pub mcmc_chains: Option<usize>,
}

pub fn parse_strategy(s: &str) -> Result<areal_core::inference::IntegrationStrategy, CliError> {
    use areal_core::inference::IntegrationStrategy::*;
    match s.to_ascii_lowercase().replace('-', "_").as_str() {
        "auto" => Ok(Auto),
        "grid" => Ok(Grid),
        "ccd" => Ok(Ccd),
        "eb" | "empirical_bayes" => Ok(EmpiricalBayes),
        other => Err(CliError::validation(format!("unknown integration strategy '{other}'"))),
    }
}

impl RunConfig {
    pub fn resolve(file: Option<FileConfig>, flags: FitOverrides) -> Result<Self, CliError> {
        let file = file.unwrap_or_default();
        let m = &file.model;
        let need = |v: Option<PathBuf>, name: &str| v.ok_or_else(|| CliError::validation(format!("missing --{name}")));
        let family_name = flags.family.or(m.family.clone()).unwrap_or_else(|| "icar".into());
        let family: LatentFamily = family_name.parse().map_err(CliError::from)?;
        let likelihoods = match flags.likelihoods.or(m.likelihoods.clone()) {
            Some(v) => Some(
                v.iter()
                    .map(|s| s.parse::<Likelihood>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(CliError::from)?,
            ),
            None => None,
        };
        let rsr = flags.rsr || m.rsr.unwrap_or(false);
        let sp = flags.spatial_plus.or(m.spatial_plus.clone()).map(|s| {
            if s.eq_ignore_ascii_case("moran") {
                PatternSource::MoranMinimal
            } else {
                PatternSource::File(PathBuf::from(s))
            }
        });
        if rsr && sp.is_some() {
            return Err(CliError::validation("--rsr and --spatial-plus are mutually exclusive".into()));
        }
        let mut engine = file.engine.unwrap_or_default();
        let mut mcmc = file.mcmc.unwrap_or_default();
        if let Some(seed) = flags.seed {
            engine.seed = seed;
            mcmc.seed = seed;
        }
        if let Some(s) = &flags.strategy {
            engine.strategy = parse_strategy(s)?;
        }
        if let Some(d) = flags.draws {
            engine.n_draws = d;
            mcmc.n_criteria_draws = d;
        }
        if let Some(v) = flags.mcmc_iterations {
            mcmc.iterations = v;
        }
        if let Some(v) = flags.mcmc_warmup {
            mcmc.warmup = v;
        }
        if let Some(v) = flags.mcmc_chains {
            mcmc.chains = v;
        }
        let cfg = Self {
            obs: need(flags.obs.or(file.obs), "obs")?,
            adj: need(flags.adj.or(file.adj), "adj")?,
            out: need(flags.out.or(file.out), "out")?,
            label: flags.label.or(file.label),
            threads: flags.threads.or(file.threads),
            bit_reproducible: flags.bit_reproducible || file.bit_reproducible.unwrap_or(false),
            oracle: flags.oracle || file.oracle.unwrap_or(false),
            lenient: flags.lenient || file.lenient.unwrap_or(false),
            family,
            likelihoods,
            rsr,
            spatial_plus: sp,
            rescale: !flags.no_rescale && m.rescale.unwrap_or(true),
            phi: flags.phi.or(m.phi),
            scaled: !flags.unscaled && m.scaled.unwrap_or(true),
            component_intercepts: flags.component_intercepts.or(m.component_intercepts),
            constrain_proper: flags.constrain_proper || m.constrain_proper.unwrap_or(false),
            priors: file.priors.unwrap_or_default(),
            engine,
            mcmc,
        };
        for (p, what) in [(&cfg.obs, "observations"), (&cfg.adj, "adjacency")] {
            if !p.is_file() {
                return Err(CliError::validation(format!("{what} file {} does not exist", p.display())));
            }
        }
        if let Some(PatternSource::File(p)) = &cfg.spatial_plus {
            if !p.is_file() {
                return Err(CliError::validation(format!("pattern file {} does not exist", p.display())));
            }
        }
        Ok(cfg)
    }

    /// Default likelihoods: Gaussian for the first outcome, skew-normal for the second.
    pub fn likelihoods_for(&self, k: usize) -> Result<Vec<Likelihood>, CliError> {
        match &self.likelihoods {
            Some(v) if v.len() == k => Ok(v.clone()),
            Some(v) => Err(CliError::validation(format!(
                "{} likelihoods given for {k} outcomes",
                v.len()
            ))),
            None => Ok((0..k)
                .map(|j| if j == 0 { Likelihood::Gaussian } else { Likelihood::SkewNormal })
                .collect()),
        }
    }

    pub fn model_spec(&self, likelihoods: Vec<Likelihood>, pattern: Option<RemovalPattern>) -> ModelSpec {
        let mut spec = ModelSpec::new(likelihoods, self.family);
        spec.treatment = if self.rsr {
            Treatment::Rsr
        } else if let Some(p) = pattern {
            Treatment::SpatialPlus {
                pattern: p,
                rescale: self.rescale,
            }
        } else {
            Treatment::Base
        };
        spec.priors = self.priors.clone();
        spec.phi = self.phi;
        spec.scaled = self.scaled;
        spec.component_intercepts = self.component_intercepts;
        spec.constrain_proper = self.constrain_proper;
        spec
    }

    pub fn default_label(&self) -> String {
        let mut s = self.family.label().to_string();
        if self.rsr {
            s.push_str("+rsr");
        }
        if self.spatial_plus.is_some() {
            s.push_str("+spatial_plus");
        }
        s
    }
}

/// Pattern files hold either the full pattern or plain removal counts
/// (`counts = [[per component] per covariate]`), as JSON or TOML.
pub fn load_pattern(path: &Path) -> Result<RemovalPattern, CliError> {
    #[derive(Deserialize)]
    struct Counts {
        counts: Vec<Vec<usize>>,
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::validation(format!("cannot read pattern {}: {e}", path.display())))?;
    if let Ok(p) = serde_json::from_str::<RemovalPattern>(&text) {
        return Ok(p);
    }
    if let Ok(c) = serde_json::from_str::<Counts>(&text) {
        return Ok(RemovalPattern::from_counts(&c.counts));
    }
    if let Ok(p) = toml::from_str::<RemovalPattern>(&text) {
        return Ok(p);
    }
    toml::from_str::<Counts>(&text)
        .map(|c| RemovalPattern::from_counts(&c.counts))
        .map_err(|e| CliError::validation(format!("pattern {}: {e}", path.display())))
}
