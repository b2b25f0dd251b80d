//! Moran's I diagnostics and eigenvector-based covariate deconfounding.
//!
//! Macro-area covariate means are expanded on each component's Laplacian
//! eigenbasis. The projection on the null eigenvector is the component mean;
//! the projection on the `K` non-null eigenvectors with the smallest
//! eigenvalues is the smooth spatial part that gets removed.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AreaGraph, ComponentEigen, ComponentSpectrum};
use crate::multilevel::{CovariateSet, LevelMap};

/// Default threshold on the standardized Moran statistic (95th percentile of N(0, 1)).
pub const MORAN_THRESHOLD: f64 = 1.645;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoranWeights {
    /// Rows of `W` divided by their sums; isolated areas keep a zero row.
    #[default]
    RowStandardized,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoranResult {
    pub i: f64,
    pub e0: f64,
    pub v0: f64,
    pub i_std: f64,
}

/// `(I − E0) / sqrt(V0)`.
pub fn standardize_moran(i: f64, e0: f64, v0: f64) -> f64 {
    (i - e0) / v0.sqrt()
}

fn weight_matrix(g: &AreaGraph, style: MoranWeights) -> DMatrix<f64> {
    let mut w = g.proximity();
    if style == MoranWeights::RowStandardized {
        for i in 0..g.n() {
            let d = g.degree(i);
            if d > 0 {
                w.row_mut(i).scale_mut(1.0 / d as f64);
            }
        }
    }
    w
}

/// Moran's I of an area-level vector with the normality-assumption null
/// moments.
pub fn moran_i(x: &[f64], g: &AreaGraph, style: MoranWeights) -> Result<MoranResult> {
    let n = g.n();
    if x.len() != n {
        return Err(Error::DimensionMismatch(format!("{} values for {} areas", x.len(), n)));
    }
    if n < 3 {
        return Err(Error::InvalidArgument("Moran's I needs at least 3 areas".into()));
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let dev: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let ss: f64 = dev.iter().map(|d| d * d).sum();
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    if ss <= (1e-12 * scale).powi(2) * n as f64 {
        return Err(Error::ConstantVector);
    }
    let w = weight_matrix(g, style);
    let mut s0 = 0.0;
    let mut cross = 0.0;
    let mut s1 = 0.0;
    let mut row = vec![0.0; n];
    let mut col = vec![0.0; n];
    for i in 0..n {
        for &j in g.neighbours(i) {
            let wij = w[(i, j)];
            let wji = w[(j, i)];
            s0 += wij;
            cross += wij * dev[i] * dev[j];
            s1 += 0.5 * (wij + wji).powi(2);
            row[i] += wij;
            col[j] += wij;
        }
    }
    if s0 == 0.0 {
        return Err(Error::InvalidArgument("graph has no edges".into()));
    }
    let s2: f64 = row.iter().zip(&col).map(|(r, c)| (r + c).powi(2)).sum();
    let nf = n as f64;
    let i = nf / s0 * cross / ss;
    let e0 = -1.0 / (nf - 1.0);
    let v0 = (nf * nf * s1 - nf * s2 + 3.0 * s0 * s0) / ((nf * nf - 1.0) * s0 * s0) - e0 * e0;
    Ok(MoranResult {
        i,
        e0,
        v0,
        i_std: standardize_moran(i, e0, v0),
    })
}

/// How many (or which) eigenvectors to remove for one covariate on one component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Removal {
    /// The `K` non-null eigenvectors with the smallest eigenvalues.
    Lowest(usize),
    /// Explicit 1-based positions in the component's decreasing-eigenvalue
    /// order. The null position is ignored.
    Indices(Vec<usize>),
}

impl Removal {
    /// Column indices into the spectrum's eigenvector matrix.
    pub fn columns(&self, spec: &ComponentSpectrum, component: usize) -> Result<Vec<usize>> {
        let size = spec.size();
        match self {
            Removal::Lowest(k) => {
                if *k > size - 1 {
                    return Err(Error::PatternOutOfRange {
                        component,
                        k: *k,
                        max: size - 1,
                    });
                }
                Ok((size - 1 - k..size - 1).collect())
            }
            Removal::Indices(idx) => {
                let mut cols = Vec::with_capacity(idx.len());
                for &l in idx {
                    if l == 0 || l > size {
                        return Err(Error::PatternOutOfRange {
                            component,
                            k: l,
                            max: size,
                        });
                    }
                    if l < size && !cols.contains(&(l - 1)) {
                        cols.push(l - 1);
                    }
                }
                cols.sort_unstable();
                Ok(cols)
            }
        }
    }

    pub fn count(&self) -> usize {
        match self {
            Removal::Lowest(k) => *k,
            Removal::Indices(idx) => idx.len(),
        }
    }
}

/// Per covariate, per component removal choices: `rows[m][c]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovalPattern {
    pub rows: Vec<Vec<Removal>>,
}

impl RemovalPattern {
    pub fn zeros(p: usize, n_components: usize) -> Self {
        Self {
            rows: vec![vec![Removal::Lowest(0); n_components]; p],
        }
    }

    pub fn from_counts(counts: &[Vec<usize>]) -> Self {
        Self {
            rows: counts
                .iter()
                .map(|r| r.iter().map(|&k| Removal::Lowest(k)).collect())
                .collect(),
        }
    }

    /// `K` values, with explicit index lists reported by their length.
    pub fn counts(&self) -> Vec<Vec<usize>> {
        self.rows.iter().map(|r| r.iter().map(Removal::count).collect()).collect()
    }

    pub fn validate(&self, eig: &ComponentEigen) -> Result<()> {
        for row in &self.rows {
            if row.len() != eig.spectra.len() {
                return Err(Error::DimensionMismatch(format!(
                    "pattern row has {} entries for {} components",
                    row.len(),
                    eig.spectra.len()
                )));
            }
            for (c, r) in row.iter().enumerate() {
                r.columns(&eig.spectra[c], c)?;
            }
        }
        Ok(())
    }
}

/// Area-level split `xbar = ns + s + zero`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub ns: Vec<f64>,
    pub s: Vec<f64>,
    pub zero: Vec<f64>,
}

/// Splits one covariate's macro-area means into nonspatial, removed spatial
/// and null-space (component mean) parts.
pub fn decompose_covariate(xbar: &[f64], eig: &ComponentEigen, row: &[Removal]) -> Result<Decomposition> {
    let n = eig.n();
    if xbar.len() != n {
        return Err(Error::DimensionMismatch(format!("{} values for {} areas", xbar.len(), n)));
    }
    if row.len() != eig.spectra.len() {
        return Err(Error::DimensionMismatch("pattern row vs components".into()));
    }
    let coords = eig.coordinates(xbar);
    let mut s = vec![0.0; n];
    let mut zero = vec![0.0; n];
    for (c, spec) in eig.spectra.iter().enumerate() {
        let null_col = spec.size() - 1;
        let removed = row[c].columns(spec, c)?;
        for (a, &node) in spec.nodes.iter().enumerate() {
            zero[node] = coords[c][null_col] * spec.vectors[(a, null_col)];
            s[node] = removed.iter().map(|&l| coords[c][l] * spec.vectors[(a, l)]).sum();
        }
    }
    let ns = (0..n).map(|i| xbar[i] - s[i] - zero[i]).collect();
    Ok(Decomposition { ns, s, zero })
}

/// Deconfounded observation-level design `ξ X̄_ns + ΔX`.
#[derive(Debug, Clone)]
pub struct DeconfoundedDesign {
    pub x: DMatrix<f64>,
    /// Columns whose deconfounded version has zero variance; left unscaled.
    pub zero_variance: Vec<usize>,
}

fn sample_sd(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    (v.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

pub fn deconfounded_design(
    cov: &CovariateSet,
    map: &LevelMap,
    eig: &ComponentEigen,
    pattern: &RemovalPattern,
    rescale: bool,
) -> Result<DeconfoundedDesign> {
    let p = cov.p();
    if pattern.rows.len() != p {
        return Err(Error::DimensionMismatch(format!("pattern has {} rows for {} covariates", pattern.rows.len(), p)));
    }
    let nobs = cov.x.nrows();
    let mut x = DMatrix::zeros(nobs, p);
    let mut zero_variance = Vec::new();
    for m in 0..p {
        let xbar: Vec<f64> = cov.xbar.column(m).iter().copied().collect();
        let dec = decompose_covariate(&xbar, eig, &pattern.rows[m])?;
        for h in 0..nobs {
            x[(h, m)] = dec.ns[map.area_of()[h]] + cov.delta[(h, m)];
        }
        if rescale {
            let sd_new = sample_sd(x.column(m).iter().copied());
            let sd_old = sample_sd(cov.x.column(m).iter().copied());
            if !(sd_new > 1e-12 * (1.0 + sd_old)) {
                zero_variance.push(m);
            } else {
                x.column_mut(m).scale_mut(sd_old / sd_new);
            }
        }
    }
    Ok(DeconfoundedDesign { x, zero_variance })
}

/// Default per-component caps on the number of removed eigenvectors:
/// a tenth of the component size, at least one, never above `size − 1`.
pub fn default_caps(eig: &ComponentEigen) -> Vec<usize> {
    eig.spectra
        .iter()
        .map(|s| (s.size() / 10).max(1).min(s.size() - 1))
        .collect()
}

#[derive(Debug, Clone)]
pub struct MoranSearch {
    pub pattern: RemovalPattern,
    /// Achieved standardized I of each nonspatial part; `None` when nothing
    /// non-constant is left.
    pub i_std: Vec<Option<f64>>,
    /// Covariates for which the caps were reached above the threshold.
    pub capped: Vec<usize>,
}

fn ns_moran(xbar: &[f64], g: &AreaGraph, eig: &ComponentEigen, counts: &[usize], style: MoranWeights) -> Result<Option<f64>> {
    let row: Vec<Removal> = counts.iter().map(|&k| Removal::Lowest(k)).collect();
    let dec = decompose_covariate(xbar, eig, &row)?;
    match moran_i(&dec.ns, g, style) {
        Ok(r) => Ok(Some(r.i_std)),
        Err(Error::ConstantVector) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Smallest removal counts, grown one eigenvector at a time (largest
/// component first, then each smaller one in decreasing size), until the
/// nonspatial part's standardized Moran statistic falls below `threshold`.
pub fn search_moran_minimal(
    xbar: &DMatrix<f64>,
    g: &AreaGraph,
    eig: &ComponentEigen,
    threshold: f64,
    caps: &[usize],
    style: MoranWeights,
) -> Result<MoranSearch> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument(format!("threshold must be positive, got {threshold}")));
    }
    let n_comp = eig.spectra.len();
    if caps.len() != n_comp {
        return Err(Error::DimensionMismatch("caps vs components".into()));
    }
    let caps: Vec<usize> = caps
        .iter()
        .zip(&eig.spectra)
        .map(|(&c, s)| c.min(s.size() - 1))
        .collect();
    let mut order: Vec<usize> = (0..n_comp).collect();
    order.sort_by(|&a, &b| eig.spectra[b].size().cmp(&eig.spectra[a].size()).then(a.cmp(&b)));

    let mut rows = Vec::new();
    let mut achieved = Vec::new();
    let mut capped = Vec::new();
    for m in 0..xbar.ncols() {
        let x: Vec<f64> = xbar.column(m).iter().copied().collect();
        let mut k = vec![0usize; n_comp];
        let mut current = ns_moran(&x, g, eig, &k, style)?;
        'grow: while current.is_some_and(|v| v >= threshold) {
            let mut grew = false;
            for &c in &order {
                if k[c] < caps[c] {
                    k[c] += 1;
                    grew = true;
                    current = ns_moran(&x, g, eig, &k, style)?;
                    if current.is_none_or(|v| v < threshold) {
                        break 'grow;
                    }
                }
            }
            if !grew {
                capped.push(m);
                break;
            }
        }
        rows.push(k.into_iter().map(Removal::Lowest).collect());
        achieved.push(current);
    }
    Ok(MoranSearch {
        pattern: RemovalPattern { rows },
        i_std: achieved,
        capped,
    })
}

#[derive(Debug, Clone)]
pub struct PatternSearch {
    pub pattern: RemovalPattern,
    pub value: f64,
    pub evaluations: usize,
    pub budget_exhausted: bool,
    /// Every evaluated pattern (as counts) with its objective value.
    pub history: Vec<(Vec<Vec<usize>>, f64)>,
}

struct Evaluator {
    cache: BTreeMap<Vec<Vec<usize>>, f64>,
    evaluations: usize,
    exhausted: bool,
    budget: usize,
}

impl Evaluator {
    /// Evaluates the uncached candidates in parallel, in a fixed order, within budget.
    fn run<F>(&mut self, cands: Vec<Vec<Vec<usize>>>, objective: &F) -> Result<()>
    where
        F: Fn(&RemovalPattern) -> Result<f64> + Sync,
    {
        let mut todo: Vec<Vec<Vec<usize>>> = Vec::new();
        for c in cands {
            if !self.cache.contains_key(&c) && !todo.contains(&c) {
                todo.push(c);
            }
        }
        if self.evaluations + todo.len() > self.budget {
            self.exhausted = true;
            todo.truncate(self.budget - self.evaluations);
        }
        let vals: Vec<Result<f64>> = todo
            .par_iter()
            .map(|c| objective(&RemovalPattern::from_counts(c)))
            .collect();
        self.evaluations += todo.len();
        for (c, v) in todo.into_iter().zip(vals) {
            let v = v?;
            self.cache.insert(c, if v.is_nan() { f64::INFINITY } else { v });
        }
        Ok(())
    }
}

/// Minimizes `objective` (typically WAIC) over removal counts within
/// `caps[m][c]`. Coordinate descent cycles covariates and components, trying
/// every count for one entry with the rest held fixed; it stops after a
/// cycle without change or when `budget` evaluations are used. With
/// `exhaustive` the whole box is enumerated instead. Ties go to the smaller
/// count (then the smaller total count for exhaustive search).
pub fn search_pattern<F>(caps: &[Vec<usize>], budget: usize, exhaustive: bool, objective: F) -> Result<PatternSearch>
where
    F: Fn(&RemovalPattern) -> Result<f64> + Sync,
{
    let p = caps.len();
    let mut ev = Evaluator {
        cache: BTreeMap::new(),
        evaluations: 0,
        exhausted: false,
        budget,
    };

    let zero: Vec<Vec<usize>> = caps.iter().map(|r| vec![0; r.len()]).collect();
    let best = if exhaustive {
        let mut all = vec![zero.clone()];
        for m in 0..p {
            for c in 0..caps[m].len() {
                let mut next = Vec::new();
                for pat in &all {
                    for k in 0..=caps[m][c] {
                        let mut q = pat.clone();
                        q[m][c] = k;
                        next.push(q);
                    }
                }
                all = next;
            }
        }
        ev.run(all.clone(), &objective)?;
        all.into_iter()
            .filter(|c| ev.cache.contains_key(c))
            .min_by(|a, b| {
                let total = |x: &Vec<Vec<usize>>| x.iter().flatten().sum::<usize>();
                ev.cache[a]
                    .partial_cmp(&ev.cache[b])
                    .unwrap()
                    .then(total(a).cmp(&total(b)))
                    .then(a.cmp(b))
            })
            .ok_or_else(|| Error::InvalidArgument("budget allows no evaluation".into()))?
    } else {
        let mut current = zero;
        ev.run(vec![current.clone()], &objective)?;
        if !ev.cache.contains_key(&current) {
            return Err(Error::InvalidArgument("budget allows no evaluation".into()));
        }
        loop {
            let mut changed = false;
            for m in 0..p {
                for c in 0..caps[m].len() {
                    let cands: Vec<Vec<Vec<usize>>> = (0..=caps[m][c])
                        .map(|k| {
                            let mut q = current.clone();
                            q[m][c] = k;
                            q
                        })
                        .collect();
                    ev.run(cands.clone(), &objective)?;
                    let mut best_k = current[m][c];
                    let mut best_v = ev.cache[&current];
                    for (k, q) in cands.iter().enumerate() {
                        if let Some(&v) = ev.cache.get(q) {
                            if v < best_v || (v == best_v && k < best_k) {
                                best_v = v;
                                best_k = k;
                            }
                        }
                    }
                    if best_k != current[m][c] {
                        current[m][c] = best_k;
                        changed = true;
                    }
                    if ev.exhausted {
                        break;
                    }
                }
                if ev.exhausted {
                    break;
                }
            }
            if !changed || ev.exhausted {
                break;
            }
        }
        current
    };
    let value = ev.cache[&best];
    Ok(PatternSearch {
        pattern: RemovalPattern::from_counts(&best),
        value,
        evaluations: ev.evaluations,
        budget_exhausted: ev.exhausted,
        history: ev.cache.into_iter().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::eigendecompose;
    use approx::assert_abs_diff_eq;

    #[test]
    fn checkerboard_is_minus_one() {
        let g = AreaGraph::lattice(2, 2);
        let x = [1.0, -1.0, -1.0, 1.0];
        for style in [MoranWeights::Binary, MoranWeights::RowStandardized] {
            let r = moran_i(&x, &g, style).unwrap();
            assert_abs_diff_eq!(r.i, -1.0, epsilon = 1e-14);
            assert_abs_diff_eq!(r.e0, -1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn constant_rejected() {
        let g = AreaGraph::path(4);
        assert!(matches!(moran_i(&[2.0; 4], &g, MoranWeights::Binary), Err(Error::ConstantVector)));
    }

    #[test]
    fn table_values_standardize() {
        let z = standardize_moran(0.2705, -1.0 / 104.0, 0.00459);
        assert_abs_diff_eq!(z, 4.1338, epsilon = 5e-3);
    }

    #[test]
    fn linear_trend_lives_on_fiedler_vector() {
        let g = AreaGraph::path(5);
        let eig = eigendecompose(&g);
        let x = [-2.0, -1.0, 0.0, 1.0, 2.0];
        let dec = decompose_covariate(&x, &eig, &[Removal::Lowest(1)]).unwrap();
        let ratio = dec.s.iter().map(|v| v * v).sum::<f64>().sqrt() / 10f64.sqrt();
        assert!(ratio > 0.99, "{ratio}");
    }

    #[test]
    fn full_removal_leaves_nothing() {
        let g = AreaGraph::new(6, &[(0, 1), (1, 2), (3, 4)]).unwrap();
        let eig = eigendecompose(&g);
        let x = [0.3, 1.2, -0.7, 2.0, 0.1, 5.0];
        let dec = decompose_covariate(&x, &eig, &[Removal::Lowest(2), Removal::Lowest(1), Removal::Lowest(0)]).unwrap();
        assert!(dec.ns.iter().all(|v| v.abs() < 1e-12));
        assert_abs_diff_eq!(dec.zero[5], 5.0, epsilon = 1e-14);
        let dec0 = decompose_covariate(&x, &eig, &vec![Removal::Lowest(0); 3]).unwrap();
        assert!(dec0.s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn explicit_indices_match_counts() {
        let g = AreaGraph::path(6);
        let eig = eigendecompose(&g);
        let x = [0.1, 0.5, -0.2, 0.9, 1.1, -0.4];
        let by_count = decompose_covariate(&x, &eig, &[Removal::Lowest(2)]).unwrap();
        // positions 4 and 5 of 6 (1-based); 6 is the null vector and is ignored.
        let by_index = decompose_covariate(&x, &eig, &[Removal::Indices(vec![5, 4, 6])]).unwrap();
        for i in 0..6 {
            assert_abs_diff_eq!(by_count.ns[i], by_index.ns[i], epsilon = 1e-14);
        }
        assert!(decompose_covariate(&x, &eig, &[Removal::Indices(vec![7])]).is_err());
        assert!(decompose_covariate(&x, &eig, &[Removal::Lowest(6)]).is_err());
    }

    #[test]
    fn moran_search_finds_fiedler_on_path30() {
        let g = AreaGraph::path(30);
        let eig = eigendecompose(&g);
        let fiedler = eig.spectra[0].embedded(28, 30);
        let noise = [
            0.3, -0.1, 0.2, -0.4, 0.1, 0.0, -0.2, 0.3, -0.3, 0.1, 0.2, -0.1, 0.0, 0.4, -0.2, 0.1, -0.3, 0.2, 0.0, -0.1,
            0.3, -0.4, 0.1, 0.2, -0.2, 0.0, 0.1, -0.1, 0.3, -0.3,
        ];
        let x = DMatrix::from_fn(30, 1, |i, _| fiedler[i] + 0.02 * noise[i]);
        let r = search_moran_minimal(&x, &g, &eig, MORAN_THRESHOLD, &[5], MoranWeights::RowStandardized).unwrap();
        assert_eq!(r.pattern.counts(), vec![vec![1]]);
        assert!(r.capped.is_empty());
    }

    #[test]
    fn exhaustive_and_descent_agree_on_separable_objective() {
        let caps = vec![vec![2, 1], vec![3, 0]];
        let target = [[2usize, 0], [1, 0]];
        let obj = |p: &RemovalPattern| -> Result<f64> {
            let c = p.counts();
            Ok((0..2)
                .flat_map(|m| (0..2).map(move |k| (m, k)))
                .map(|(m, k)| (c[m][k] as f64 - target[m][k] as f64).powi(2))
                .sum())
        };
        let ex = search_pattern(&caps, 1000, true, obj).unwrap();
        let cd = search_pattern(&caps, 1000, false, obj).unwrap();
        assert_eq!(ex.pattern.counts(), vec![vec![2, 0], vec![1, 0]]);
        assert_eq!(cd.pattern, ex.pattern);
        let capped = search_pattern(&caps, 2, false, obj).unwrap();
        assert!(capped.budget_exhausted);
    }
}
