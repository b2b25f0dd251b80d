//! Two-level structure: observations (municipalities) nested in macro-areas,
//! macro-areas nested in graph components.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::graph::AreaGraph;

/// Observation → macro-area map (`ξ`) and macro-area → component map (`C`),
/// stored as label vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelMap {
    area_of: Vec<usize>,
    component_of: Vec<usize>,
    n_components: usize,
    counts: Vec<usize>,
}

impl LevelMap {
    /// `area_of[h]` is the macro-area of observation `h`; `component_of[i]`
    /// the component of macro-area `i`. Component labels must be `0..G`.
    pub fn new(area_of: Vec<usize>, component_of: Vec<usize>) -> Result<Self> {
        let n = component_of.len();
        let mut counts = vec![0; n];
        for (h, &a) in area_of.iter().enumerate() {
            if a >= n {
                return Err(Error::UnknownArea { obs: h, area: a });
            }
            counts[a] += 1;
        }
        let n_components = component_of.iter().map(|&c| c + 1).max().unwrap_or(0);
        Ok(Self {
            area_of,
            component_of,
            n_components,
            counts,
        })
    }

    /// Uses the graph's own component labels.
    pub fn from_graph(area_of: Vec<usize>, g: &AreaGraph) -> Result<Self> {
        Self::new(area_of, g.components().to_vec())
    }

    /// Derives the area → component map from per-observation component
    /// labels, rejecting areas that appear under two components.
    pub fn from_observation_labels(
        n_areas: usize,
        area_of: Vec<usize>,
        component_of_obs: &[usize],
    ) -> Result<Self> {
        let mut component_of = vec![usize::MAX; n_areas];
        for (h, (&a, &c)) in area_of.iter().zip(component_of_obs).enumerate() {
            if a >= n_areas {
                return Err(Error::UnknownArea { obs: h, area: a });
            }
            match component_of[a] {
                usize::MAX => component_of[a] = c,
                prev if prev != c => {
                    return Err(Error::ConflictingComponent {
                        area: a,
                        first: prev,
                        second: c,
                    })
                }
                _ => {}
            }
        }
        // Areas without observations get their own (trailing) labels so that
        // every row of C still has exactly one 1.
        let mut next = component_of
            .iter()
            .filter(|&&c| c != usize::MAX)
            .map(|&c| c + 1)
            .max()
            .unwrap_or(0);
        for c in component_of.iter_mut() {
            if *c == usize::MAX {
                *c = next;
                next += 1;
            }
        }
        Self::new(area_of, component_of)
    }

    pub fn n_obs(&self) -> usize {
        self.area_of.len()
    }

    pub fn n_areas(&self) -> usize {
        self.component_of.len()
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    pub fn area_of(&self) -> &[usize] {
        &self.area_of
    }

    pub fn component_of(&self) -> &[usize] {
        &self.component_of
    }

    /// Component of observation `h` (row of `ξC`).
    pub fn obs_component(&self, h: usize) -> usize {
        self.component_of[self.area_of[h]]
    }

    /// `N_i`, observations per macro-area.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Macro-areas with `N_i = 0`.
    pub fn empty_areas(&self) -> Vec<usize> {
        (0..self.n_areas()).filter(|&i| self.counts[i] == 0).collect()
    }

    /// Dense `N × n` binary map `ξ`.
    pub fn xi(&self) -> DMatrix<f64> {
        let mut xi = DMatrix::zeros(self.n_obs(), self.n_areas());
        for (h, &a) in self.area_of.iter().enumerate() {
            xi[(h, a)] = 1.0;
        }
        xi
    }

    /// Dense `n × G` binary map `C`.
    pub fn c_matrix(&self) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(self.n_areas(), self.n_components);
        for (i, &k) in self.component_of.iter().enumerate() {
            c[(i, k)] = 1.0;
        }
        c
    }

    /// `ξᵀ v` for an observation-level vector.
    pub fn sum_by_area(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_areas()];
        for (h, &a) in self.area_of.iter().enumerate() {
            out[a] += v[h];
        }
        out
    }

    /// `ξ v` for an area-level vector.
    pub fn expand(&self, v: &[f64]) -> Vec<f64> {
        self.area_of.iter().map(|&a| v[a]).collect()
    }
}

/// Covariates split into macro-area means and within-area residuals:
/// `X = ξ X̄ + ΔX`.
#[derive(Debug, Clone)]
pub struct CovariateSet {
    pub names: Vec<String>,
    pub x: DMatrix<f64>,
    pub xbar: DMatrix<f64>,
    pub delta: DMatrix<f64>,
}

impl CovariateSet {
    pub fn p(&self) -> usize {
        self.x.ncols()
    }
}

/// Unweighted macro-area means `X̄ = (ξᵀξ)⁻¹ξᵀX` and residuals `ΔX = X − ξX̄`.
/// Every macro-area must carry at least one observation.
pub fn aggregate(x: &DMatrix<f64>, names: Vec<String>, map: &LevelMap) -> Result<CovariateSet> {
    if x.nrows() != map.n_obs() {
        return Err(Error::DimensionMismatch(format!(
            "X has {} rows, level map has {} observations",
            x.nrows(),
            map.n_obs()
        )));
    }
    if let Some(&i) = map.empty_areas().first() {
        return Err(Error::EmptyArea(i));
    }
    let n = map.n_areas();
    let p = x.ncols();
    let mut xbar = DMatrix::zeros(n, p);
    for (h, &a) in map.area_of().iter().enumerate() {
        for m in 0..p {
            xbar[(a, m)] += x[(h, m)];
        }
    }
    for i in 0..n {
        let ni = map.counts()[i] as f64;
        for m in 0..p {
            xbar[(i, m)] /= ni;
        }
    }
    let delta = DMatrix::from_fn(x.nrows(), p, |h, m| x[(h, m)] - xbar[(map.area_of()[h], m)]);
    Ok(CovariateSet {
        names,
        x: x.clone(),
        xbar,
        delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn four_obs_two_areas() {
        let map = LevelMap::new(vec![0, 0, 1, 1], vec![0, 0]).unwrap();
        let xi = map.xi();
        assert_eq!(xi, DMatrix::from_row_slice(4, 2, &[1., 0., 1., 0., 0., 1., 0., 1.]));
        assert_eq!(map.c_matrix(), DMatrix::from_row_slice(2, 1, &[1., 1.]));
        assert_eq!(map.counts(), &[2, 2]);
    }

    #[test]
    fn aggregate_means_and_residuals() {
        let map = LevelMap::new(vec![0, 0, 1, 1], vec![0, 0]).unwrap();
        let x = DMatrix::from_column_slice(4, 1, &[1., 3., 5., 7.]);
        let cov = aggregate(&x, vec!["x".into()], &map).unwrap();
        assert_eq!(cov.xbar.as_slice(), &[2., 6.]);
        assert_eq!(cov.delta.as_slice(), &[-1., 1., -1., 1.]);
    }

    #[test]
    fn constant_column() {
        let map = LevelMap::new(vec![0, 1, 1, 2], vec![0, 0, 0]).unwrap();
        let x = DMatrix::from_element(4, 1, 3.5);
        let cov = aggregate(&x, vec!["c".into()], &map).unwrap();
        assert!(cov.xbar.iter().all(|&v| v == 3.5));
        assert!(cov.delta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_area_reported_and_rejected_by_aggregate() {
        let map = LevelMap::new(vec![0, 0, 2], vec![0, 0, 0]).unwrap();
        assert_eq!(map.counts(), &[2, 0, 1]);
        assert_eq!(map.empty_areas(), vec![1]);
        let x = DMatrix::from_element(3, 1, 1.0);
        assert!(matches!(aggregate(&x, vec!["a".into()], &map), Err(Error::EmptyArea(1))));
    }

    #[test]
    fn unknown_area_and_conflicting_component() {
        assert!(matches!(
            LevelMap::new(vec![0, 5], vec![0, 0]),
            Err(Error::UnknownArea { obs: 1, area: 5 })
        ));
        assert!(matches!(
            LevelMap::from_observation_labels(2, vec![0, 0, 1], &[0, 1, 0]),
            Err(Error::ConflictingComponent { area: 0, first: 0, second: 1 })
        ));
    }

    #[test]
    fn xi_times_c_assigns_one_component() {
        let map = LevelMap::new(vec![0, 1, 2, 2, 3], vec![0, 0, 1, 1]).unwrap();
        let xc = map.xi() * map.c_matrix();
        for h in 0..5 {
            assert_abs_diff_eq!(xc.row(h).sum(), 1.0);
            assert_eq!(xc[(h, map.obs_component(h))], 1.0);
        }
    }
}
