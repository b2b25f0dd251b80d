//! Report and table writers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use areal_core::criteria::{residual_kde, KDE_CUT};
use areal_core::inference::mcmc::McmcSettings;
use areal_core::inference::{Dataset, EngineSettings, ModelSpec, PosteriorFit};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const KDE_POINTS: usize = 512;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub tool: String,
    pub version: String,
    pub label: String,
    pub dataset_hash: String,
    pub n_obs: usize,
    pub n_areas: usize,
    pub n_components: usize,
    pub model: ModelSpec,
    pub engine: Option<EngineSettings>,
    pub mcmc: Option<McmcSettings>,
    /// Wall-clock seconds; omitted in bit-reproducible runs.
    pub elapsed_seconds: Option<f64>,
    pub fit: PosteriorFit,
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "NA".into()
    }
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    w.write_record(header).map_err(|e| CliError::io(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Write every table of a fit into `dir`, file names prefixed by `prefix`.
pub fn write_fit_tables(
    dir: &Path,
    prefix: &str,
    report: &FitReport,
    data: &Dataset,
    obs_ids: &[String],
) -> Result<(), CliError> {
    let fit = &report.fit;
    let name = |s: &str| dir.join(format!("{prefix}{s}"));
    write_json(&name("report.json"), report)?;

    write_csv(
        &name("fixed_effects.csv"),
        &["parameter", "mean", "sd", "q05", "q50", "q95"],
        fit.fixed.iter().map(|p| {
            let s = &p.summary;
            vec![p.name.clone(), fmt(s.mean), fmt(s.sd), fmt(s.q05), fmt(s.q50), fmt(s.q95)]
        }),
    )?;
    write_csv(
        &name("hyperparameters.csv"),
        &["parameter", "lower_05", "median", "upper_95", "sd", "mean"],
        fit.hyper.iter().map(|p| {
            let s = &p.summary;
            vec![p.name.clone(), fmt(s.q05), fmt(s.q50), fmt(s.q95), fmt(s.sd), fmt(s.mean)]
        }),
    )?;

    let mut header = vec!["area_id".to_string(), "component_id".to_string()];
    for o in &fit.outcome_names {
        for stat in ["mean", "sd", "q05", "q95"] {
            header.push(format!("z_{stat}_{o}"));
        }
    }
    let hdr: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(
        &name("area_effects.csv"),
        &hdr,
        (0..data.graph.n()).map(|i| {
            let mut r = vec![format!("{}", i + 1), format!("{}", data.graph.components()[i] + 1)];
            for row in &fit.area_effects {
                let s = &row[i];
                r.extend([fmt(s.mean), fmt(s.sd), fmt(s.q05), fmt(s.q95)]);
            }
            r
        }),
    )?;

    let mut header = vec!["obs_id".to_string(), "area_id".to_string()];
    for o in &fit.outcome_names {
        header.push(o.clone());
        header.push(format!("fitted_{o}"));
    }
    let hdr: Vec<&str> = header.iter().map(String::as_str).collect();
    let area_of = data.map.area_of();
    write_csv(
        &name("predictions.csv"),
        &hdr,
        (0..data.n_obs()).map(|h| {
            let mut r = vec![obs_ids[h].clone(), format!("{}", area_of[h] + 1)];
            for j in 0..fit.outcome_names.len() {
                let y = data.y[j][h];
                r.push(if y.is_nan() { String::new() } else { fmt(y) });
                r.push(fmt(fit.fitted[j][h]));
            }
            r
        }),
    )?;

    let c = &fit.criteria;
    let time = report.elapsed_seconds.map_or("NA".to_string(), |t| format!("{t:.3}"));
    write_csv(
        &name("criteria.csv"),
        &["model", "neg_lpml", "waic", "dic", "mse", "expected_deviance", "p_d", "p_waic", "n_cpo_flagged", "time_s"],
        [vec![
            report.label.clone(),
            fmt(c.neg_lpml),
            fmt(c.waic),
            fmt(c.dic),
            fmt(c.mse),
            fmt(c.expected_deviance),
            fmt(c.p_d),
            fmt(c.p_waic),
            c.n_cpo_flagged.to_string(),
            time.clone(),
        ]],
    )?;
    let mut txt = String::new();
    let _ = writeln!(
        txt,
        "{:<20} {:>12} {:>12} {:>12} {:>10} {:>12} {:>8} {:>8}",
        "model", "-LPML", "WAIC", "DIC", "MSE", "Exp.Dev.", "P_D", "time"
    );
    let _ = writeln!(
        txt,
        "{:<20} {:>12.3} {:>12.3} {:>12.3} {:>10.3} {:>12.3} {:>8.3} {:>8}",
        report.label, c.neg_lpml, c.waic, c.dic, c.mse, c.expected_deviance, c.p_d, time
    );
    fs::write(name("criteria.txt"), txt).map_err(|e| CliError::io(&name("criteria.txt"), e))?;

    let mut kde_rows = Vec::new();
    for (j, o) in fit.outcome_names.iter().enumerate() {
        let resid: Vec<f64> = (0..data.n_obs())
            .filter(|&h| !data.y[j][h].is_nan())
            .map(|h| data.y[j][h] - fit.fitted[j][h])
            .collect();
        if let Ok(k) = residual_kde(&resid, KDE_POINTS, KDE_CUT) {
            for (x, d) in k.grid.iter().zip(&k.density) {
                kde_rows.push(vec![o.clone(), fmt(*x), fmt(*d), fmt(k.bandwidth)]);
            }
        }
    }
    write_csv(&name("residual_kde.csv"), &["outcome", "residual", "density", "bandwidth"], kde_rows)
}

/// Engine-minus-oracle differences of posterior means, scaled by the
/// oracle's posterior sd.
pub fn write_deltas(path: &Path, engine: &PosteriorFit, oracle: &PosteriorFit) -> Result<(), CliError> {
    let mut rows = Vec::new();
    let pairs = engine
        .fixed
        .iter()
        .map(|p| ("fixed", p))
        .chain(engine.hyper.iter().map(|p| ("hyper", p)));
    for (kind, p) in pairs {
        let other = if kind == "fixed" {
            oracle.fixed_by_name(&p.name)
        } else {
            oracle.hyper_by_name(&p.name)
        };
        if let Some(o) = other {
            let (a, b) = if kind == "fixed" {
                (p.summary.mean, o.mean)
            } else {
                (p.summary.q50, o.q50)
            };
            let scaled = if o.sd > 0.0 { (a - b) / o.sd } else { f64::NAN };
            rows.push(vec![
                kind.to_string(),
                p.name.clone(),
                if kind == "fixed" { "mean" } else { "median" }.to_string(),
                fmt(a),
                fmt(b),
                fmt(a - b),
                fmt(scaled),
            ]);
        }
    }
    write_csv(
        path,
        &["kind", "parameter", "statistic", "engine", "oracle", "delta", "delta_over_oracle_sd"],
        rows,
    )
}

pub fn write_table(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<(), CliError> {
    write_csv(path, header, rows)
}

pub fn fmt_num(v: f64) -> String {
    fmt(v)
}
