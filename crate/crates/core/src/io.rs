//! File formats: adjacency lists, observation tables, dataset validation and
//! hashing.
//!
//! Adjacency files start with an `n=<areas>` line followed by one `i j` pair
//! per line (1-based area ids); `#` starts a comment. Observation tables are
//! CSV with `obs_id`, `area_id` and `component_id` columns (1-based ids),
//! outcome columns prefixed `y_` and covariate columns prefixed `x_`. An
//! empty outcome cell (or `NA`) marks a missing value.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::AreaGraph;
use crate::inference::Dataset;
use crate::multilevel::LevelMap;
use crate::simulate::{SimulatedData, DUMMY_COVARIATES};

fn parse_err(location: String, message: impl Into<String>) -> Error {
    Error::Parse {
        location,
        message: message.into(),
    }
}

pub fn parse_adjacency(text: &str, source: &str) -> Result<AreaGraph> {
    let mut n = None;
    let mut edges = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let loc = || format!("{source}:{}", ln + 1);
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if n.is_none() {
            let v = line
                .strip_prefix("n=")
                .or_else(|| line.strip_prefix("n ="))
                .ok_or_else(|| parse_err(loc(), "expected 'n=<count>' header"))?;
            n = Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|e| parse_err(loc(), format!("bad area count: {e}")))?,
            );
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 2 {
            return Err(parse_err(loc(), "expected two area ids"));
        }
        let id = |s: &str| -> Result<usize> {
            let v = s
                .parse::<usize>()
                .map_err(|e| parse_err(loc(), format!("bad area id '{s}': {e}")))?;
            if v == 0 {
                return Err(parse_err(loc(), "area ids are 1-based"));
            }
            Ok(v - 1)
        };
        edges.push((id(parts[0])?, id(parts[1])?));
    }
    let n = n.ok_or_else(|| parse_err(source.to_string(), "missing 'n=' header"))?;
    AreaGraph::new(n, &edges)
}

pub fn read_adjacency(path: &Path) -> Result<AreaGraph> {
    parse_adjacency(&fs::read_to_string(path)?, &path.display().to_string())
}

pub fn format_adjacency(g: &AreaGraph) -> String {
    let mut out = format!("n={}\n", g.n());
    for &(a, b) in g.edges() {
        out.push_str(&format!("{} {}\n", a + 1, b + 1));
    }
    out
}

/// Parsed observation table with 0-based area and component indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTable {
    pub obs_id: Vec<String>,
    pub area: Vec<usize>,
    pub component: Vec<usize>,
    pub outcome_names: Vec<String>,
    /// `y[j][h]`, NaN when missing.
    pub y: Vec<Vec<f64>>,
    pub covariate_names: Vec<String>,
    pub x: DMatrix<f64>,
}

/// A problem found while checking input files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub file: String,
    /// 1-based data row (header excluded).
    pub row: Option<usize>,
    pub column: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
    pub n_obs: usize,
    pub n_areas: usize,
    pub n_components: usize,
    pub component_sizes: Vec<usize>,
    /// Observations per area.
    pub area_counts: Vec<usize>,
    pub areas_without_observations: Vec<usize>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

fn parse_value(cell: &str) -> Option<f64> {
    let t = cell.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") {
        Some(f64::NAN)
    } else {
        t.parse::<f64>().ok()
    }
}

/// Parse an observation table, collecting every problem instead of stopping
/// at the first. `n_areas` bounds the area ids when known.
pub fn scan_observations(text: &str, source: &str, n_areas: Option<usize>) -> (Option<ObservationTable>, Vec<Finding>) {
    let mut findings = Vec::new();
    let mut find = |row: Option<usize>, column: Option<&str>, message: String| {
        findings.push(Finding {
            file: source.to_string(),
            row,
            column: column.map(str::to_string),
            message,
        })
    };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = match rdr.headers() {
        Ok(h) => h.iter().map(str::to_string).collect(),
        Err(e) => {
            find(None, None, format!("unreadable header: {e}"));
            return (None, findings);
        }
    };
    let col = |name: &str| header.iter().position(|h| h == name);
    let (Some(c_obs), Some(c_area), Some(c_comp)) = (col("obs_id"), col("area_id"), col("component_id")) else {
        for req in ["obs_id", "area_id", "component_id"] {
            if col(req).is_none() {
                find(None, Some(req), "required column missing".into());
            }
        }
        return (None, findings);
    };
    let y_cols: Vec<usize> = (0..header.len()).filter(|&c| header[c].starts_with("y_")).collect();
    let x_cols: Vec<usize> = (0..header.len()).filter(|&c| header[c].starts_with("x_")).collect();
    if y_cols.is_empty() {
        find(None, None, "no outcome columns (prefix 'y_')".into());
    }
    for (c, name) in header.iter().enumerate() {
        if header[..c].contains(name) {
            find(None, Some(name), "duplicate column".into());
        }
    }

    let mut obs_id = Vec::new();
    let mut area = Vec::new();
    let mut component = Vec::new();
    let mut y = vec![Vec::new(); y_cols.len()];
    let mut x = Vec::new();
    let mut ok = true;
    let mut seen_ids = BTreeMap::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = match rec {
            Ok(rec) => rec,
            Err(e) => {
                find(Some(row), None, format!("malformed record: {e}"));
                ok = false;
                continue;
            }
        };
        let id = rec.get(c_obs).unwrap_or("").to_string();
        if let Some(prev) = seen_ids.insert(id.clone(), row) {
            find(Some(row), Some("obs_id"), format!("duplicate obs_id '{id}' (first at row {prev})"));
        }
        let parse_id = |c: usize| -> std::result::Result<usize, String> {
            let s = rec.get(c).unwrap_or("");
            match s.parse::<usize>() {
                Ok(0) => Err("ids are 1-based".into()),
                Ok(v) => Ok(v - 1),
                Err(_) => Err(format!("not a positive integer: '{s}'")),
            }
        };
        match parse_id(c_area) {
            Ok(a) => {
                if let Some(n) = n_areas {
                    if a >= n {
                        find(Some(row), Some("area_id"), format!("unknown area {} (graph has {n})", a + 1));
                        ok = false;
                    }
                }
                area.push(a);
            }
            Err(m) => {
                find(Some(row), Some("area_id"), m);
                ok = false;
                area.push(0);
            }
        }
        match parse_id(c_comp) {
            Ok(c) => component.push(c),
            Err(m) => {
                find(Some(row), Some("component_id"), m);
                ok = false;
                component.push(0);
            }
        }
        for (j, &c) in y_cols.iter().enumerate() {
            match parse_value(rec.get(c).unwrap_or("")) {
                Some(v) if v.is_nan() || v.is_finite() => y[j].push(v),
                _ => {
                    find(Some(row), Some(&header[c]), format!("not a number: '{}'", rec.get(c).unwrap_or("")));
                    ok = false;
                    y[j].push(f64::NAN);
                }
            }
        }
        let mut xr = Vec::with_capacity(x_cols.len());
        for &c in &x_cols {
            let name = &header[c];
            let cell = rec.get(c).unwrap_or("");
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => {
                    if DUMMY_COVARIATES.contains(&name.as_str()) {
                        if v != 0.0 && v != 1.0 {
                            find(Some(row), Some(name), format!("dummy value {v} outside {{0, 1}}"));
                        }
                    } else if !(0.0..=1.0).contains(&v) {
                        find(Some(row), Some(name), format!("proportion {v} outside [0, 1]"));
                    }
                    xr.push(v);
                }
                _ => {
                    find(Some(row), Some(name), format!("covariates must be finite numbers, got '{cell}'"));
                    ok = false;
                    xr.push(0.0);
                }
            }
        }
        x.push(xr);
        obs_id.push(id);
    }
    if obs_id.is_empty() {
        find(None, None, "no observations".into());
        ok = false;
    }
    if !ok {
        return (None, findings);
    }
    let nobs = obs_id.len();
    let xm = DMatrix::from_fn(nobs, x_cols.len(), |h, c| x[h][c]);
    let table = ObservationTable {
        obs_id,
        area,
        component,
        outcome_names: y_cols.iter().map(|&c| header[c].clone()).collect(),
        y,
        covariate_names: x_cols.iter().map(|&c| header[c].clone()).collect(),
        x: xm,
    };
    (Some(table), findings)
}

pub fn read_observations(path: &Path) -> Result<ObservationTable> {
    let text = fs::read_to_string(path)?;
    let (table, findings) = scan_observations(&text, &path.display().to_string(), None);
    match table {
        Some(t) => Ok(t),
        None => {
            let f = &findings[0];
            Err(parse_err(
                format!("{}:{}", f.file, f.row.map_or("header".into(), |r| format!("row {r}"))),
                f.message.clone(),
            ))
        }
    }
}

/// Check that file component labels describe the graph's partition.
fn component_findings(table: &ObservationTable, g: &AreaGraph, source: &str) -> Vec<Finding> {
    let mut out = Vec::new();
    let mut area_label: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut label_to_graph: BTreeMap<usize, usize> = BTreeMap::new();
    let mut graph_to_label: BTreeMap<usize, usize> = BTreeMap::new();
    for (h, (&a, &c)) in table.area.iter().zip(&table.component).enumerate() {
        if a >= g.n() {
            continue;
        }
        let row = Some(h + 1);
        match area_label.get(&a) {
            Some(&(prev, first_row)) if prev != c => out.push(Finding {
                file: source.into(),
                row,
                column: Some("component_id".into()),
                message: format!(
                    "area {} labelled component {} here but {} at row {first_row}",
                    a + 1,
                    c + 1,
                    prev + 1
                ),
            }),
            Some(_) => {}
            None => {
                area_label.insert(a, (c, h + 1));
            }
        }
        let gc = g.components()[a];
        let clash = match (label_to_graph.get(&c), graph_to_label.get(&gc)) {
            (Some(&x), _) if x != gc => true,
            (_, Some(&l)) if l != c => true,
            _ => false,
        };
        if clash {
            out.push(Finding {
                file: source.into(),
                row,
                column: Some("component_id".into()),
                message: format!(
                    "component {} does not match the connected components of the adjacency graph",
                    c + 1
                ),
            });
        } else {
            label_to_graph.insert(c, gc);
            graph_to_label.insert(gc, c);
        }
    }
    out
}

/// Validate an observation table against an adjacency file. Never panics;
/// every problem becomes a finding.
pub fn validate_dataset(obs_path: &Path, adj_path: &Path) -> ValidationReport {
    let mut report = ValidationReport::default();
    let adj_src = adj_path.display().to_string();
    let obs_src = obs_path.display().to_string();
    let graph = match fs::read_to_string(adj_path).map_err(Error::from).and_then(|t| parse_adjacency(&t, &adj_src)) {
        Ok(g) => Some(g),
        Err(e) => {
            report.findings.push(Finding {
                file: adj_src.clone(),
                row: None,
                column: None,
                message: e.to_string(),
            });
            None
        }
    };
    let text = match fs::read_to_string(obs_path) {
        Ok(t) => t,
        Err(e) => {
            report.findings.push(Finding {
                file: obs_src,
                row: None,
                column: None,
                message: e.to_string(),
            });
            return report;
        }
    };
    let (table, findings) = scan_observations(&text, &obs_src, graph.as_ref().map(|g| g.n()));
    report.findings.extend(findings);
    if let Some(g) = &graph {
        report.n_areas = g.n();
        report.n_components = g.n_components();
        report.component_sizes = g.component_sizes();
        if let Some(t) = &table {
            report.findings.extend(component_findings(t, g, &obs_src));
            let mut counts = vec![0; g.n()];
            for &a in &t.area {
                if a < g.n() {
                    counts[a] += 1;
                }
            }
            report.areas_without_observations = (0..g.n()).filter(|&i| counts[i] == 0).map(|i| i + 1).collect();
            report.area_counts = counts;
        }
    }
    if let Some(t) = &table {
        report.n_obs = t.obs_id.len();
    }
    report
}

/// Assemble a model dataset from parsed files.
pub fn build_dataset(table: &ObservationTable, g: &AreaGraph) -> Result<Dataset> {
    if let Some(f) = component_findings(table, g, "observations").into_iter().next() {
        return Err(parse_err(
            format!("observations row {}", f.row.unwrap_or(0)),
            f.message,
        ));
    }
    let map = LevelMap::from_graph(table.area.clone(), g)?;
    Dataset::new(
        g.clone(),
        map,
        table.y.clone(),
        table.outcome_names.clone(),
        table.x.clone(),
        table.covariate_names.clone(),
    )
}

pub fn load_dataset(obs_path: &Path, adj_path: &Path) -> Result<Dataset> {
    let g = read_adjacency(adj_path)?;
    let table = read_observations(obs_path)?;
    if let Some(h) = table.area.iter().position(|&a| a >= g.n()) {
        return Err(Error::UnknownArea {
            obs: h,
            area: table.area[h] + 1,
        });
    }
    build_dataset(&table, &g)
}

/// SHA-256 over the observation and adjacency file contents.
pub fn dataset_hash(obs_path: &Path, adj_path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    h.update(fs::read(obs_path)?);
    h.update([0u8]);
    h.update(fs::read(adj_path)?);
    Ok(hex::encode(h.finalize()))
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

/// Observation table of a simulated dataset.
pub fn format_observations(d: &SimulatedData) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["obs_id".to_string(), "area_id".into(), "component_id".into()];
    header.extend(d.outcome_names.iter().cloned());
    header.extend(d.covariate_names.iter().cloned());
    w.write_record(&header)?;
    for (h, &a) in d.area_of.iter().enumerate() {
        let mut rec = vec![
            format!("{}", h + 1),
            format!("{}", a + 1),
            format!("{}", d.graph.components()[a] + 1),
        ];
        rec.extend(d.y.iter().map(|row| fmt_value(row[h])));
        rec.extend((0..d.x.ncols()).map(|c| fmt_value(d.x[(h, c)])));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Write `observations.csv`, `adjacency.txt` and `truth.json` into `dir`.
pub fn write_simulated(d: &SimulatedData, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("observations.csv"), format_observations(d)?)?;
    fs::write(dir.join("adjacency.txt"), format_adjacency(&d.graph))?;
    let mut f = fs::File::create(dir.join("truth.json"))?;
    serde_json::to_writer_pretty(&mut f, &d.truth)?;
    writeln!(f)?;
    Ok(())
}
