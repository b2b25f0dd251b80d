use std::fs;
use std::path::Path;
use std::time::Instant;

use areal_core::deconfound::{
    decompose_covariate, default_caps, moran_i, search_moran_minimal, search_pattern, standardize_moran, MoranWeights,
    RemovalPattern, MORAN_THRESHOLD,
};
use areal_core::graph::eigendecompose;
use areal_core::inference::{self, mcmc, Dataset, ModelSpec, PosteriorFit, Treatment};
use areal_core::io::{self, ValidationReport};
use areal_core::multilevel::aggregate;
use areal_core::simulate::{self, GraphSpec, Scenario};
use serde::Deserialize;

use crate::config::{load_pattern, parse_strategy, FileConfig, FitOverrides, PatternSource, RunConfig};
use crate::output::{fmt_num, write_deltas, write_fit_tables, write_json, write_table, FitReport};
use crate::{
    CliError, CompareArgs, DeconfoundArgs, FitArgs, ModelArgs, MoranArgs, SimulateArgs, ValidateArgs,
    EXIT_UNCONVERGED, EXIT_VALIDATION,
};

type CmdResult = Result<u8, CliError>;

fn set_threads(n: Option<usize>) {
    if let Some(n) = n {
        // Fails only if the pool already exists, which is harmless here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn require_clean(report: ValidationReport, lenient: bool) -> Result<(), CliError> {
    if report.is_clean() {
        return Ok(());
    }
    if lenient {
        for f in &report.findings {
            eprintln!("warning: {}: {}", f.file, f.message);
        }
        return Ok(());
    }
    Err(CliError::findings(
        format!("input validation found {} problem(s)", report.findings.len()),
        report.findings,
    ))
}

fn load(obs: &Path, adj: &Path) -> Result<(Dataset, Vec<String>), CliError> {
    let g = io::read_adjacency(adj)?;
    let table = io::read_observations(obs)?;
    if let Some(h) = table.area.iter().position(|&a| a >= g.n()) {
        return Err(areal_core::Error::UnknownArea {
            obs: h,
            area: table.area[h] + 1,
        }
        .into());
    }
    let data = io::build_dataset(&table, &g)?;
    Ok((data, table.obs_id))
}

fn area_means(data: &Dataset) -> Result<nalgebra::DMatrix<f64>, CliError> {
    Ok(aggregate(&data.x, data.covariate_names.clone(), &data.map)?.xbar)
}

fn moran_minimal(data: &Dataset, threshold: f64, caps: Option<&[usize]>, style: MoranWeights) -> Result<areal_core::deconfound::MoranSearch, CliError> {
    let eig = eigendecompose(&data.graph);
    let caps = caps.map(<[usize]>::to_vec).unwrap_or_else(|| default_caps(&eig));
    Ok(search_moran_minimal(&area_means(data)?, &data.graph, &eig, threshold, &caps, style)?)
}

fn overrides(a: &FitArgs) -> FitOverrides {
    let m = &a.model;
    FitOverrides {
        obs: a.obs.clone(),
        adj: a.adj.clone(),
        out: a.out.clone(),
        label: a.label.clone(),
        threads: a.threads,
        bit_reproducible: a.bit_reproducible,
        oracle: a.oracle,
        lenient: a.lenient,
        family: m.family.clone(),
        likelihoods: m.likelihoods.clone(),
        rsr: a.rsr,
        spatial_plus: a.spatial_plus.clone(),
        no_rescale: a.no_rescale,
        phi: m.phi,
        unscaled: m.unscaled,
        component_intercepts: m.component_intercepts,
        constrain_proper: m.constrain_proper,
        seed: m.seed,
        strategy: m.strategy.clone(),
        draws: a.draws,
        mcmc_iterations: a.mcmc_iterations,
        mcmc_warmup: a.mcmc_warmup,
        mcmc_chains: a.mcmc_chains,
    }
}

pub fn fit(args: FitArgs) -> CmdResult {
    let file = args.config.as_deref().map(FileConfig::load).transpose()?;
    let cfg = RunConfig::resolve(file, overrides(&args))?;
    set_threads(if cfg.bit_reproducible { Some(1) } else { cfg.threads });
    require_clean(io::validate_dataset(&cfg.obs, &cfg.adj), cfg.lenient)?;
    let (data, obs_ids) = load(&cfg.obs, &cfg.adj)?;
    let hash = io::dataset_hash(&cfg.obs, &cfg.adj)?;

    let pattern = match &cfg.spatial_plus {
        None => None,
        Some(PatternSource::File(p)) => Some(load_pattern(p)?),
        Some(PatternSource::MoranMinimal) => {
            Some(moran_minimal(&data, MORAN_THRESHOLD, None, MoranWeights::default())?.pattern)
        }
    };
    let spec = cfg.model_spec(cfg.likelihoods_for(data.k())?, pattern);
    spec.validate()?;
    create_dir(&cfg.out)?;
    let label = cfg.label.clone().unwrap_or_else(|| cfg.default_label());

    let report_for = |fit: PosteriorFit, elapsed: f64, oracle: bool| FitReport {
        tool: "areal".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        label: label.clone(),
        dataset_hash: hash.clone(),
        n_obs: data.n_obs(),
        n_areas: data.graph.n(),
        n_components: data.graph.n_components(),
        model: spec.clone(),
        engine: (!oracle).then(|| cfg.engine.clone()),
        mcmc: oracle.then(|| cfg.mcmc.clone()),
        elapsed_seconds: (!cfg.bit_reproducible).then_some(elapsed),
        fit,
    };

    let t0 = Instant::now();
    let fit = inference::fit(&spec, &data, &cfg.engine)?;
    let report = report_for(fit, t0.elapsed().as_secs_f64(), false);
    write_fit_tables(&cfg.out, "", &report, &data, &obs_ids)?;
    let mut unconverged = report.fit.convergence.unconverged;

    if cfg.oracle {
        let t0 = Instant::now();
        let ofit = mcmc::run(&spec, &data, &cfg.mcmc)?;
        let oreport = report_for(ofit, t0.elapsed().as_secs_f64(), true);
        write_fit_tables(&cfg.out, "oracle_", &oreport, &data, &obs_ids)?;
        write_deltas(&cfg.out.join("deltas.csv"), &report.fit, &oreport.fit)?;
        unconverged |= oreport.fit.convergence.unconverged;
    }
    for w in &report.fit.convergence.warnings {
        eprintln!("warning: {w}");
    }
    if unconverged {
        eprintln!("warning: fit did not converge; outputs written to {}", cfg.out.display());
        return Ok(EXIT_UNCONVERGED);
    }
    Ok(0)
}

fn weights(binary: bool) -> MoranWeights {
    if binary {
        MoranWeights::Binary
    } else {
        MoranWeights::RowStandardized
    }
}

pub fn deconfound(args: DeconfoundArgs) -> CmdResult {
    set_threads(args.threads);
    require_clean(io::validate_dataset(&args.obs, &args.adj), false)?;
    let (data, _) = load(&args.obs, &args.adj)?;
    let style = weights(args.binary_weights);
    let eig = eigendecompose(&data.graph);
    let caps = args.caps.clone().unwrap_or_else(|| default_caps(&eig));
    if caps.len() != eig.spectra.len() {
        return Err(CliError::validation(format!(
            "{} caps given for {} components",
            caps.len(),
            eig.spectra.len()
        )));
    }
    let xbar = area_means(&data)?;

    let pattern = match args.search.as_str() {
        "moran" => search_moran_minimal(&xbar, &data.graph, &eig, args.threshold, &caps, style)?.pattern,
        "waic" => {
            let base = model_spec_from(&args.model, data.k())?;
            let settings = engine_settings(&args.model)?;
            let all_caps = vec![caps.clone(); data.x.ncols()];
            let rescale = !args.no_rescale;
            let result = search_pattern(&all_caps, args.budget, args.exhaustive, |p: &RemovalPattern| {
                let mut spec = base.clone();
                spec.treatment = Treatment::SpatialPlus {
                    pattern: p.clone(),
                    rescale,
                };
                // Patterns that make the design unusable simply lose.
                Ok(inference::fit(&spec, &data, &settings)
                    .map(|f| f.criteria.waic)
                    .unwrap_or(f64::INFINITY))
            })?;
            if result.budget_exhausted {
                eprintln!("warning: evaluation budget of {} fits exhausted", args.budget);
            }
            result.pattern
        }
        other => return Err(CliError::validation(format!("unknown search '{other}' (moran or waic)"))),
    };

    create_dir(&args.out)?;
    write_json(&args.out.join("pattern.json"), &pattern)?;

    let mut moran_rows = Vec::new();
    let mut header = vec!["area_id".to_string(), "component_id".to_string()];
    let mut parts = Vec::new();
    for (m, name) in data.covariate_names.iter().enumerate() {
        let x: Vec<f64> = xbar.column(m).iter().copied().collect();
        let dec = decompose_covariate(&x, &eig, &pattern.rows[m])?;
        let before = moran_i(&x, &data.graph, style).ok();
        let after = moran_i(&dec.ns, &data.graph, style).ok();
        let removed: Vec<String> = pattern.counts()[m].iter().map(usize::to_string).collect();
        moran_rows.push(vec![
            name.clone(),
            before.map_or("NA".into(), |r| fmt_num(r.i)),
            before.map_or("NA".into(), |r| fmt_num(r.i_std)),
            after.map_or("NA".into(), |r| fmt_num(r.i)),
            after.map_or("NA".into(), |r| fmt_num(r.i_std)),
            removed.join(";"),
        ]);
        for part in ["mean", "nonspatial", "spatial", "null"] {
            header.push(format!("{name}_{part}"));
        }
        parts.push((x, dec));
    }
    write_table(
        &args.out.join("moran.csv"),
        &["covariate", "i_before", "i_std_before", "i_after", "i_std_after", "removed_per_component"],
        moran_rows,
    )?;
    let hdr: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = (0..data.graph.n())
        .map(|i| {
            let mut r = vec![(i + 1).to_string(), (data.graph.components()[i] + 1).to_string()];
            for (x, d) in &parts {
                r.extend([fmt_num(x[i]), fmt_num(d.ns[i]), fmt_num(d.s[i]), fmt_num(d.zero[i])]);
            }
            r
        })
        .collect();
    write_table(&args.out.join("deconfounded.csv"), &hdr, rows)?;
    Ok(0)
}

fn model_spec_from(m: &ModelArgs, k: usize) -> Result<ModelSpec, CliError> {
    let family = m.family.as_deref().unwrap_or("icar").parse()?;
    let likelihoods = match &m.likelihoods {
        Some(v) => v.iter().map(|s| s.parse()).collect::<Result<Vec<_>, _>>()?,
        None => (0..k)
            .map(|j| {
                if j == 0 {
                    areal_core::likelihood::Likelihood::Gaussian
                } else {
                    areal_core::likelihood::Likelihood::SkewNormal
                }
            })
            .collect(),
    };
    let mut spec = ModelSpec::new(likelihoods, family);
    spec.phi = m.phi;
    spec.scaled = !m.unscaled;
    spec.component_intercepts = m.component_intercepts;
    spec.constrain_proper = m.constrain_proper;
    spec.validate()?;
    Ok(spec)
}

fn engine_settings(m: &ModelArgs) -> Result<inference::EngineSettings, CliError> {
    let mut s = inference::EngineSettings::default();
    if let Some(seed) = m.seed {
        s.seed = seed;
    }
    if let Some(st) = &m.strategy {
        s.strategy = parse_strategy(st)?;
    }
    Ok(s)
}

pub fn moran(args: MoranArgs) -> CmdResult {
    if let (Some(i), Some(e0), Some(v0)) = (args.i, args.e0, args.v0) {
        if !(v0 > 0.0) {
            return Err(CliError::validation(format!("V0 must be positive, got {v0}")));
        }
        println!("{:.4}", standardize_moran(i, e0, v0));
        return Ok(0);
    }
    let (Some(obs), Some(adj)) = (&args.obs, &args.adj) else {
        return Err(CliError::validation("give --obs and --adj, or --i, --e0 and --v0".into()));
    };
    let (data, _) = load(obs, adj)?;
    let xbar = area_means(&data)?;
    let style = weights(args.binary_weights);
    println!("{:<16} {:>10} {:>10} {:>10} {:>10}", "covariate", "I", "E0", "V0", "I_std");
    let mut rows = Vec::new();
    for (m, name) in data.covariate_names.iter().enumerate() {
        let x: Vec<f64> = xbar.column(m).iter().copied().collect();
        match moran_i(&x, &data.graph, style) {
            Ok(r) => {
                println!("{name:<16} {:>10.4} {:>10.4} {:>10.5} {:>10.4}", r.i, r.e0, r.v0, r.i_std);
                rows.push(vec![name.clone(), fmt_num(r.i), fmt_num(r.e0), fmt_num(r.v0), fmt_num(r.i_std)]);
            }
            Err(areal_core::Error::ConstantVector) => {
                println!("{name:<16} {:>10} {:>10} {:>10} {:>10}", "NA", "NA", "NA", "NA");
                rows.push(vec![name.clone(), "NA".into(), "NA".into(), "NA".into(), "NA".into()]);
            }
            Err(e) => return Err(e.into()),
        }
    }
    if let Some(out) = &args.out {
        write_table(out, &["covariate", "i", "e0", "v0", "i_std"], rows)?;
    }
    Ok(0)
}

pub fn simulate(args: SimulateArgs) -> CmdResult {
    let mut scenario = match &args.scenario {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            toml::from_str::<Scenario>(&text)
                .map_err(|e| CliError::validation(format!("scenario {}: {e}", p.display())))?
        }
        None => Scenario::default(),
    };
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    if let (Some(rows), Some(cols)) = (args.rows, args.cols) {
        scenario.graph = GraphSpec::Lattice { rows, cols };
    }
    let data = simulate::generate(&scenario)?;
    io::write_simulated(&data, &args.out)?;
    println!(
        "wrote {} observations on {} areas to {}",
        data.area_of.len(),
        data.graph.n(),
        args.out.display()
    );
    Ok(0)
}

#[derive(Deserialize)]
struct ReportCriteria {
    neg_lpml: Option<f64>,
    waic: Option<f64>,
    dic: Option<f64>,
    mse: Option<f64>,
    expected_deviance: Option<f64>,
    p_d: Option<f64>,
}

#[derive(Deserialize)]
struct ReportFit {
    criteria: ReportCriteria,
}

#[derive(Deserialize)]
struct ReportHead {
    label: String,
    dataset_hash: String,
    elapsed_seconds: Option<f64>,
    fit: ReportFit,
}

/// Columns of the comparison table; `true` marks lower-is-better columns
/// that receive a best marker.
const COLUMNS: [(&str, bool); 7] = [
    ("-LPML", true),
    ("WAIC", true),
    ("DIC", true),
    ("MSE", true),
    ("Exp.Dev.", true),
    ("P_D", false),
    ("time", false),
];

pub fn compare(args: CompareArgs) -> CmdResult {
    let mut rows = Vec::new();
    for p in &args.reports {
        let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
        let r: ReportHead =
            serde_json::from_str(&text).map_err(|e| CliError::validation(format!("report {}: {e}", p.display())))?;
        rows.push(r);
    }
    let hash = rows[0].dataset_hash.clone();
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.dataset_hash != hash) {
        return Err(CliError::validation(format!(
            "report {} was fitted to a different dataset ({} vs {})",
            args.reports[i].display(),
            r.dataset_hash,
            hash
        )));
    }
    let values = |r: &ReportHead| {
        let c = &r.fit.criteria;
        [c.neg_lpml, c.waic, c.dic, c.mse, c.expected_deviance, c.p_d, r.elapsed_seconds]
    };
    rows.sort_by(|a, b| {
        let (x, y) = (a.fit.criteria.waic, b.fit.criteria.waic);
        match (x, y) {
            (Some(x), Some(y)) => x.total_cmp(&y),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        }
    });
    let table: Vec<[Option<f64>; 7]> = rows.iter().map(values).collect();
    let best: Vec<Option<f64>> = (0..COLUMNS.len())
        .map(|c| {
            if !COLUMNS[c].1 {
                return None;
            }
            table.iter().filter_map(|r| r[c]).min_by(f64::total_cmp)
        })
        .collect();

    let mut text = format!("{:<24}", "model");
    for (name, _) in COLUMNS {
        text.push_str(&format!(" {name:>13}"));
    }
    text.push('\n');
    let mut csv_rows = Vec::new();
    for (r, vals) in rows.iter().zip(&table) {
        text.push_str(&format!("{:<24}", r.label));
        let mut csv_row = vec![r.label.clone()];
        for (c, v) in vals.iter().enumerate() {
            let is_best = matches!((v, best[c]), (Some(v), Some(b)) if *v == b);
            let mark = if is_best { "*" } else { " " };
            let cell = v.map_or("NA".to_string(), |v| format!("{v:.3}"));
            text.push_str(&format!(" {cell:>12}{mark}"));
            csv_row.push(v.map_or("NA".to_string(), fmt_num));
            csv_row.push(is_best.to_string());
        }
        text.push('\n');
        csv_rows.push(csv_row);
    }
    // Identical criteria rows cannot be separated.
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            if table[i][..5] == table[j][..5] {
                text.push_str(&format!("tie: '{}' and '{}' have identical criteria\n", rows[i].label, rows[j].label));
            }
        }
    }
    print!("{text}");
    if let Some(out) = &args.out {
        let mut header = vec!["model".to_string()];
        for key in ["neg_lpml", "waic", "dic", "mse", "expected_deviance", "p_d", "time_s"] {
            header.push(key.to_string());
            header.push(format!("{key}_best"));
        }
        let hdr: Vec<&str> = header.iter().map(String::as_str).collect();
        write_table(out, &hdr, csv_rows)?;
    }
    Ok(0)
}

pub fn validate(args: ValidateArgs) -> CmdResult {
    let report = io::validate_dataset(&args.obs, &args.adj);
    if args.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).map_err(|e| CliError::validation(e.to_string()))?
        );
    } else {
        println!(
            "{} observations, {} areas, {} components (sizes {:?})",
            report.n_obs, report.n_areas, report.n_components, report.component_sizes
        );
        if !report.areas_without_observations.is_empty() {
            println!("areas without observations: {:?}", report.areas_without_observations);
        }
        for f in &report.findings {
            let row = f.row.map_or(String::new(), |r| format!(" row {r}"));
            let col = f.column.as_ref().map_or(String::new(), |c| format!(" column {c}"));
            println!("{}{row}{col}: {}", f.file, f.message);
        }
        println!("{} finding(s)", report.findings.len());
    }
    Ok(if report.is_clean() { 0 } else { EXIT_VALIDATION })
}
