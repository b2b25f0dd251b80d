use std::path::{Path, PathBuf};
use std::process::ExitCode;

use areal_core::io::Finding;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

mod commands;
mod config;
mod output;

pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;
pub const EXIT_UNCONVERGED: u8 = 4;

/// Error reported to the user as JSON on stderr.
#[derive(Debug, Serialize)]
pub struct CliError {
    pub kind: String,
    pub message: String,
    #[serde(skip)]
    pub code: u8,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub findings: Vec<Finding>,
}

impl CliError {
    pub fn validation(message: String) -> Self {
        Self {
            kind: "validation".into(),
            message,
            code: EXIT_VALIDATION,
            findings: Vec::new(),
        }
    }

    pub fn findings(message: String, findings: Vec<Finding>) -> Self {
        Self {
            findings,
            ..Self::validation(message)
        }
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self {
            kind: "io".into(),
            message: format!("{}: {e}", path.display()),
            code: EXIT_VALIDATION,
            findings: Vec::new(),
        }
    }
}

impl From<areal_core::Error> for CliError {
    fn from(e: areal_core::Error) -> Self {
        use areal_core::Error as E;
        let (kind, code) = match &e {
            E::Numerical(_) | E::NotPositiveDefinite(_) => ("numerical", EXIT_NUMERICAL),
            E::Io(_) => ("io", EXIT_VALIDATION),
            E::Parse { .. } | E::Csv(_) | E::Json(_) => ("parse", EXIT_VALIDATION),
            _ => ("validation", EXIT_VALIDATION),
        };
        Self {
            kind: kind.into(),
            message: e.to_string(),
            code,
            findings: Vec::new(),
        }
    }
}

#[derive(Parser)]
#[command(name = "areal", version, about = "Multivariate areal models for multilevel data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write posterior summaries, predictions and criteria.
    Fit(FitArgs),
    /// Find a Spatial+ removal pattern and write the filtered covariates.
    Deconfound(DeconfoundArgs),
    /// Moran's I of area-mean covariates, or standardize a given statistic.
    Moran(MoranArgs),
    /// Generate a synthetic dataset.
    Simulate(SimulateArgs),
    /// Merge criteria from several fit reports.
    Compare(CompareArgs),
    /// Check observation and adjacency files.
    Validate(ValidateArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// Latent family: null, iid, indep_icar, icar or pcar.
    #[arg(long, visible_alias = "model")]
    pub family: Option<String>,
    /// Error distribution per outcome (gaussian, skew_normal), comma separated.
    #[arg(long, value_delimiter = ',')]
    pub likelihoods: Option<Vec<String>>,
    /// Fix the PCAR association parameter.
    #[arg(long)]
    pub phi: Option<f64>,
    /// Use the raw Laplacian instead of the scaled structure matrix.
    #[arg(long)]
    pub unscaled: bool,
    /// Component-specific intercepts (default: all families but PCAR).
    #[arg(long)]
    pub component_intercepts: Option<bool>,
    /// Sum-to-zero constraints on a proper field.
    #[arg(long)]
    pub constrain_proper: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Hyperparameter integration: auto, grid, ccd or eb.
    #[arg(long)]
    pub strategy: Option<String>,
}

#[derive(Args)]
pub struct FitArgs {
    /// TOML configuration; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub obs: Option<PathBuf>,
    #[arg(long)]
    pub adj: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub label: Option<String>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Restricted spatial regression.
    #[arg(long, conflicts_with = "spatial_plus")]
    pub rsr: bool,
    /// Spatial+ pattern file (JSON or TOML), or `moran` to search for one.
    #[arg(long)]
    pub spatial_plus: Option<String>,
    /// Keep filtered covariates on their own scale.
    #[arg(long)]
    pub no_rescale: bool,
    /// Posterior draws used for the criteria.
    #[arg(long)]
    pub draws: Option<usize>,
    /// Also run the MCMC sampler and write engine-minus-sampler deltas.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long)]
    pub mcmc_iterations: Option<usize>,
    #[arg(long)]
    pub mcmc_warmup: Option<usize>,
    #[arg(long)]
    pub mcmc_chains: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Single thread and no timings, for byte-identical output.
    #[arg(long)]
    pub bit_reproducible: bool,
    /// Fit even when validation reports findings.
    #[arg(long)]
    pub lenient: bool,
}

#[derive(Args)]
pub struct DeconfoundArgs {
    #[arg(long)]
    pub obs: PathBuf,
    #[arg(long)]
    pub adj: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Search objective: moran or waic.
    #[arg(long, default_value = "moran")]
    pub search: String,
    /// Standardized Moran threshold for the moran search.
    #[arg(long, default_value_t = areal_core::deconfound::MORAN_THRESHOLD)]
    pub threshold: f64,
    /// Per-component cap on removed eigenvectors (default: a tenth of the component).
    #[arg(long, value_delimiter = ',')]
    pub caps: Option<Vec<usize>>,
    /// Maximum number of model fits for the waic search.
    #[arg(long, default_value_t = 200)]
    pub budget: usize,
    /// Enumerate every pattern within the caps.
    #[arg(long)]
    pub exhaustive: bool,
    /// Binary instead of row-standardized Moran weights.
    #[arg(long)]
    pub binary_weights: bool,
    #[arg(long)]
    pub no_rescale: bool,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args)]
pub struct MoranArgs {
    #[arg(long, requires = "adj")]
    pub obs: Option<PathBuf>,
    #[arg(long)]
    pub adj: Option<PathBuf>,
    #[arg(long)]
    pub binary_weights: bool,
    /// Observed statistic (arithmetic mode, with --e0 and --v0).
    #[arg(long, requires_all = ["e0", "v0"], conflicts_with = "obs", allow_hyphen_values = true)]
    pub i: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub e0: Option<f64>,
    #[arg(long)]
    pub v0: Option<f64>,
    /// Write the table as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Scenario TOML; unset fields take their defaults.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace the scenario graph with a rows × cols lattice.
    #[arg(long, requires = "cols")]
    pub rows: Option<usize>,
    #[arg(long, requires = "rows")]
    pub cols: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct CompareArgs {
    #[arg(required = true, num_args = 2..)]
    pub reports: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub obs: PathBuf,
    #[arg(long)]
    pub adj: PathBuf,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(a) => commands::fit(a),
        Command::Deconfound(a) => commands::deconfound(a),
        Command::Moran(a) => commands::moran(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Compare(a) => commands::compare(a),
        Command::Validate(a) => commands::validate(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let body = serde_json::json!({ "error": &e, "exit_code": e.code });
            eprintln!("{body}");
            ExitCode::from(e.code)
        }
    }
}
