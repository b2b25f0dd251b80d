//! Synthetic datasets drawn from the full generative model.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{eigendecompose, AreaGraph};
use crate::inference::Dataset;
use crate::likelihood::{gamma1_of_alpha, ErrorModel, Likelihood};
use crate::multilevel::LevelMap;
use crate::spatial_prior::{pcar_structure, scale_structure, CovParams, LatentFamily};

/// Standard covariate columns, in order.
pub const COVARIATE_NAMES: [&str; 4] = ["x_central", "x_peripheral", "x_bb", "x_transport"];
/// Dummy covariates take values in {0, 1}; the rest are proportions.
pub const DUMMY_COVARIATES: [&str; 2] = ["x_central", "x_peripheral"];
pub const OUTCOME_NAMES: [&str; 2] = ["y_math", "y_ital"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphSpec {
    /// `rows × cols` rook lattice.
    Lattice { rows: usize, cols: usize },
    Path { n: usize },
    /// Several rook lattices side by side, one connected component each.
    Lattices { blocks: Vec<(usize, usize)> },
    /// Adjacency file (see [`crate::io::read_adjacency`]).
    File { path: String },
}

impl GraphSpec {
    pub fn build(&self) -> Result<AreaGraph> {
        match self {
            Self::Lattice { rows, cols } => Ok(AreaGraph::lattice(*rows, *cols)),
            Self::Path { n } => Ok(AreaGraph::path(*n)),
            Self::Lattices { blocks } => {
                let mut edges = Vec::new();
                let mut off = 0;
                for &(r, c) in blocks {
                    let g = AreaGraph::lattice(r, c);
                    edges.extend(g.edges().iter().map(|&(a, b)| (a + off, b + off)));
                    off += r * c;
                }
                AreaGraph::new(off, &edges)
            }
            Self::File { path } => crate::io::read_adjacency(std::path::Path::new(path)),
        }
    }
}

/// Observations per area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AreaSize {
    Fixed(usize),
    /// Uniform on `min..=max`.
    Uniform { min: usize, max: usize },
}

/// Adds `strength · v` on the logit scale of a covariate's success
/// probability, where `v` is a Laplacian eigenvector rescaled to unit
/// standard deviation on its component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confounding {
    /// Index into the scenario's covariates.
    pub covariate: usize,
    pub strength: f64,
    pub component: usize,
    /// 1 selects the smoothest non-constant eigenvector, 2 the next, ...
    pub eigen_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub graph: GraphSpec,
    pub obs_per_area: AreaSize,
    pub likelihoods: Vec<Likelihood>,
    pub family: LatentFamily,
    /// Scale intrinsic structure matrices before sampling.
    pub scaled: bool,
    /// Intercepts per outcome: one value for all components or one per component.
    pub intercepts: Vec<Vec<f64>>,
    /// Covariate effects per outcome; the length picks the leading covariates.
    pub beta: Vec<Vec<f64>>,
    pub sigma2: Vec<f64>,
    pub rho: f64,
    pub omega: Vec<f64>,
    pub alpha: Vec<f64>,
    pub phi: f64,
    pub confounding: Option<Confounding>,
    /// Fraction of observations whose outcomes are left missing.
    pub missing_fraction: f64,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            graph: GraphSpec::Lattice { rows: 5, cols: 10 },
            obs_per_area: AreaSize::Fixed(8),
            likelihoods: vec![Likelihood::Gaussian, Likelihood::SkewNormal],
            family: LatentFamily::Icar,
            scaled: true,
            intercepts: vec![vec![180.0], vec![175.0]],
            beta: vec![vec![6.0, -4.0, 10.0, 5.0], vec![5.0, -3.0, 8.0, 4.0]],
            sigma2: vec![60.0, 50.0],
            rho: 0.9,
            omega: vec![120.0, 130.0],
            alpha: vec![0.0, -3.0],
            phi: 0.9,
            confounding: None,
            missing_fraction: 0.0,
            seed: 1,
        }
    }
}

impl Scenario {
    pub fn k(&self) -> usize {
        self.likelihoods.len()
    }

    pub fn p(&self) -> usize {
        self.beta.first().map_or(0, |b| b.len())
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 || k > 2 {
            return Err(Error::InvalidArgument(format!("1 or 2 outcomes supported, got {k}")));
        }
        let bad = |what: &str| Err(Error::InvalidArgument(format!("scenario: {what}")));
        if self.intercepts.len() != k || self.beta.len() != k || self.omega.len() != k {
            return bad("intercepts, beta and omega need one entry per outcome");
        }
        if self.beta.iter().any(|b| b.len() != self.p()) || self.p() > COVARIATE_NAMES.len() {
            return bad("beta rows must share a length of at most 4");
        }
        if self.family.has_field() && self.sigma2.len() != k {
            return bad("sigma2 needs one entry per outcome");
        }
        if self.sigma2.iter().chain(&self.omega).any(|v| !(*v > 0.0)) {
            return bad("variances must be positive");
        }
        if !(self.rho.abs() < 1.0) {
            return bad("|rho| must be below 1");
        }
        if self.family == LatentFamily::Pcar && !(self.phi > 0.0 && self.phi < 1.0) {
            return Err(Error::PhiOutOfRange(self.phi));
        }
        if !(0.0..1.0).contains(&self.missing_fraction) {
            return bad("missing_fraction must lie in [0, 1)");
        }
        match self.obs_per_area {
            AreaSize::Fixed(0) => return bad("areas need at least one observation"),
            AreaSize::Uniform { min, max } if min == 0 || max < min => return bad("invalid area size range"),
            _ => {}
        }
        if let Some(c) = &self.confounding {
            if c.covariate >= self.p() || c.eigen_rank == 0 {
                return bad("confounding refers to a missing covariate or eigenvector");
            }
        }
        Ok(())
    }
}

/// True values behind a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub scenario: Scenario,
    pub n_areas: usize,
    pub n_components: usize,
    /// Intercepts per outcome and component.
    pub intercepts: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    /// Area effects per outcome.
    pub z: Vec<Vec<f64>>,
    pub gamma1: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub graph: AreaGraph,
    pub area_of: Vec<usize>,
    pub x: DMatrix<f64>,
    pub covariate_names: Vec<String>,
    pub y: Vec<Vec<f64>>,
    pub outcome_names: Vec<String>,
    pub truth: Truth,
}

impl SimulatedData {
    pub fn to_dataset(&self) -> Result<Dataset> {
        let map = LevelMap::from_graph(self.area_of.clone(), &self.graph)?;
        Dataset::new(
            self.graph.clone(),
            map,
            self.y.clone(),
            self.outcome_names.clone(),
            self.x.clone(),
            self.covariate_names.clone(),
        )
    }
}

/// One draw of the intrinsic field with between-outcome precision `Λ`,
/// `z = Σ_l v_l ⊗ (L_Σ ε_l) / √λ_l` over the non-null eigenpairs of every
/// component block. Component sums vanish by construction.
///
/// Returns `z[j][i]`.
pub fn sample_constrained_icar<R: Rng + ?Sized>(
    g: &AreaGraph,
    lambda: &DMatrix<f64>,
    scaled: bool,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let k = lambda.nrows();
    let sigma = lambda
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NotPositiveDefinite("Λ".into()))?;
    let l_sigma = Cholesky::new(sigma)
        .ok_or_else(|| Error::NotPositiveDefinite("Λ⁻¹".into()))?
        .l();
    let factors = if scaled {
        scale_structure(g).factors
    } else {
        vec![1.0; g.n_components()]
    };
    let eig = eigendecompose(g);
    let mut z = vec![vec![0.0; g.n()]; k];
    for (c, spec) in eig.spectra.iter().enumerate() {
        for l in 0..spec.n_nonnull() {
            let ev = spec.values[l] * factors[c];
            let e = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mixed = &l_sigma * e / ev.sqrt();
            for (a, &node) in spec.nodes.iter().enumerate() {
                for j in 0..k {
                    z[j][node] += spec.vectors[(a, l)] * mixed[j];
                }
            }
        }
    }
    Ok(z)
}

/// `Z = L_S^{-T} E L_Σᵀ` for a proper field with area structure `S`.
fn sample_proper<R: Rng + ?Sized>(s: &DMatrix<f64>, sigma: &DMatrix<f64>, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let n = s.nrows();
    let k = sigma.nrows();
    let ls = Cholesky::new(s.clone())
        .ok_or_else(|| Error::NotPositiveDefinite("area structure".into()))?
        .l();
    let lsig = Cholesky::new(sigma.clone())
        .ok_or_else(|| Error::NotPositiveDefinite("Λ⁻¹".into()))?
        .l();
    let e = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let left = ls
        .transpose()
        .solve_upper_triangular(&e)
        .ok_or_else(|| Error::Numerical("singular structure factor".into()))?;
    let zm = left * lsig.transpose();
    Ok((0..k).map(|j| zm.column(j).iter().copied().collect()).collect())
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Draw a dataset. Equal seeds give identical data.
pub fn generate(scenario: &Scenario) -> Result<SimulatedData> {
    scenario.validate()?;
    let g = scenario.graph.build()?;
    let n = g.n();
    let k = scenario.k();
    let p = scenario.p();
    let n_comp = g.n_components();
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);

    let mut area_of = Vec::new();
    for i in 0..n {
        let m = match scenario.obs_per_area {
            AreaSize::Fixed(m) => m,
            AreaSize::Uniform { min, max } => rng.random_range(min..=max),
        };
        area_of.extend(std::iter::repeat(i).take(m));
    }
    let nobs = area_of.len();

    // Area-level tendencies make covariate means vary smoothly-ish by area.
    let mut area_shift = DMatrix::from_fn(n, p, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
    if let Some(conf) = &scenario.confounding {
        if conf.component >= n_comp {
            return Err(Error::InvalidArgument(format!("component {} does not exist", conf.component)));
        }
        let eig = eigendecompose(&g);
        let spec = &eig.spectra[conf.component];
        if conf.eigen_rank > spec.n_nonnull() {
            return Err(Error::InvalidArgument(format!(
                "component {} has only {} non-constant eigenvectors",
                conf.component,
                spec.n_nonnull()
            )));
        }
        let col = spec.n_nonnull() - conf.eigen_rank;
        let scale = (spec.size() as f64).sqrt();
        for (a, &node) in spec.nodes.iter().enumerate() {
            area_shift[(node, conf.covariate)] += conf.strength * scale * spec.vectors[(a, col)];
        }
    }
    let base = [-0.4, -1.0, 0.3, -0.2];
    let mut x = DMatrix::zeros(nobs, p);
    for (h, &a) in area_of.iter().enumerate() {
        for c in 0..p {
            let prob = logistic(base[c] + area_shift[(a, c)]);
            x[(h, c)] = if DUMMY_COVARIATES.contains(&COVARIATE_NAMES[c]) {
                if rng.random::<f64>() < prob {
                    1.0
                } else {
                    0.0
                }
            } else {
                let noise: f64 = rng.sample(StandardNormal);
                logistic(base[c] + area_shift[(a, c)] + 0.5 * noise)
            };
        }
    }

    let z = match scenario.family {
        LatentFamily::Null => vec![vec![0.0; n]; k],
        family => {
            let rho = if family.correlated() { scenario.rho } else { 0.0 };
            let cov = CovParams::new(scenario.sigma2.clone(), if k == 2 { rho } else { 0.0 })?;
            match family {
                LatentFamily::Icar | LatentFamily::IndepIcar => {
                    sample_constrained_icar(&g, &cov.precision(), scenario.scaled, &mut rng)?
                }
                LatentFamily::Iid => sample_proper(&DMatrix::identity(n, n), &cov.covariance(), &mut rng)?,
                LatentFamily::Pcar => sample_proper(&pcar_structure(&g, scenario.phi), &cov.covariance(), &mut rng)?,
                LatentFamily::Null => unreachable!(),
            }
        }
    };

    let intercepts: Vec<Vec<f64>> = scenario
        .intercepts
        .iter()
        .map(|v| {
            if v.len() == 1 {
                Ok(vec![v[0]; n_comp])
            } else if v.len() == n_comp {
                Ok(v.clone())
            } else {
                Err(Error::InvalidArgument(format!(
                    "{} intercepts given for {n_comp} components",
                    v.len()
                )))
            }
        })
        .collect::<Result<_>>()?;

    let mut y = vec![vec![0.0; nobs]; k];
    for j in 0..k {
        let alpha = scenario.alpha.get(j).copied().unwrap_or(0.0);
        let model = ErrorModel::new(scenario.likelihoods[j], scenario.omega[j], alpha)?;
        for (h, &a) in area_of.iter().enumerate() {
            let mut eta = intercepts[j][g.components()[a]] + z[j][a];
            for c in 0..p {
                eta += x[(h, c)] * scenario.beta[j][c];
            }
            y[j][h] = eta + model.sample(&mut rng);
        }
    }
    if scenario.missing_fraction > 0.0 {
        for h in 0..nobs {
            if rng.random::<f64>() < scenario.missing_fraction {
                for row in y.iter_mut() {
                    row[h] = f64::NAN;
                }
            }
        }
    }

    let gamma1 = (0..k)
        .map(|j| match scenario.likelihoods[j] {
            Likelihood::SkewNormal => gamma1_of_alpha(scenario.alpha.get(j).copied().unwrap_or(0.0)),
            Likelihood::Gaussian => 0.0,
        })
        .collect();
    Ok(SimulatedData {
        area_of,
        x,
        covariate_names: COVARIATE_NAMES[..p].iter().map(|s| s.to_string()).collect(),
        y,
        outcome_names: OUTCOME_NAMES[..k].iter().map(|s| s.to_string()).collect(),
        truth: Truth {
            scenario: scenario.clone(),
            n_areas: n,
            n_components: n_comp,
            intercepts,
            beta: scenario.beta.clone(),
            z,
            gamma1,
        },
        graph: g,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deconfound::{moran_i, standardize_moran, MoranWeights};
    use crate::graph::component_pseudoinverse_diag;

    #[test]
    fn icar_draws_sum_to_zero_per_component() {
        let g = GraphSpec::Lattices {
            blocks: vec![(3, 4), (2, 2), (1, 3)],
        }
        .build()
        .unwrap();
        let lambda = CovParams::new(vec![2.0, 3.0], 0.5).unwrap().precision();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = sample_constrained_icar(&g, &lambda, true, &mut rng).unwrap();
        for row in &z {
            for c in 0..g.n_components() {
                let s: f64 = g.component_nodes(c).iter().map(|&i| row[i]).sum();
                assert!(s.abs() < 1e-12, "{s}");
            }
        }
    }

    #[test]
    fn icar_covariance_matches_pseudoinverse() {
        let g = AreaGraph::path(4);
        let lambda = CovParams::new(vec![1.5, 0.7], 0.6).unwrap().precision();
        let sigma = lambda.clone().try_inverse().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 100_000;
        let mut acc = DMatrix::<f64>::zeros(8, 8);
        for _ in 0..draws {
            let z = sample_constrained_icar(&g, &lambda, false, &mut rng).unwrap();
            let v = DVector::from_iterator(8, z.iter().flatten().copied());
            acc += &v * v.transpose();
        }
        acc /= draws as f64;
        let rplus = g.laplacian().pseudo_inverse(1e-10).unwrap();
        let diag = component_pseudoinverse_diag(&g, 0).unwrap();
        for (i, d) in diag.iter().enumerate() {
            assert!((rplus[(i, i)] - d).abs() < 1e-10);
        }
        for a in 0..2 {
            for b in 0..2 {
                for i in 0..4 {
                    for jj in 0..4 {
                        let expect = sigma[(a, b)] * rplus[(i, jj)];
                        let got = acc[(a * 4 + i, b * 4 + jj)];
                        let scale = (sigma[(a, a)] * rplus[(i, i)] * sigma[(b, b)] * rplus[(jj, jj)]).sqrt();
                        assert!((got - expect).abs() < 0.02 * scale, "({a},{b},{i},{jj}) {got} vs {expect}");
                    }
                }
            }
        }
    }

    #[test]
    fn cross_outcome_correlation_follows_rho() {
        let g = AreaGraph::lattice(5, 10);
        let lambda = CovParams::new(vec![1.0, 2.0], 0.975).unwrap().precision();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut s11, mut s22, mut s12) = (0.0, 0.0, 0.0);
        for _ in 0..4000 {
            let z = sample_constrained_icar(&g, &lambda, true, &mut rng).unwrap();
            for i in 0..g.n() {
                s11 += z[0][i] * z[0][i];
                s22 += z[1][i] * z[1][i];
                s12 += z[0][i] * z[1][i];
            }
        }
        let r = s12 / (s11 * s22).sqrt();
        assert!((r - 0.975).abs() < 0.01, "{r}");
    }

    #[test]
    fn same_seed_same_data() {
        let s = Scenario::default();
        let a = generate(&s).unwrap();
        let b = generate(&s).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn skewness_of_errors_matches_shape() {
        let s = Scenario {
            graph: GraphSpec::Path { n: 10 },
            obs_per_area: AreaSize::Fixed(2000),
            family: LatentFamily::Null,
            beta: vec![vec![], vec![]],
            intercepts: vec![vec![0.0], vec![0.0]],
            alpha: vec![0.0, -5.0],
            omega: vec![1.0, 1.0],
            ..Default::default()
        };
        let d = generate(&s).unwrap();
        let e = &d.y[1];
        let n = e.len() as f64;
        let mean = e.iter().sum::<f64>() / n;
        let m2 = e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let m3 = e.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
        let skew = m3 / m2.powf(1.5);
        assert!(skew < 0.0);
        assert!((skew - gamma1_of_alpha(-5.0)).abs() < 0.05, "{skew}");
    }

    #[test]
    fn injected_confounding_is_spatially_autocorrelated() {
        let s = Scenario {
            confounding: Some(Confounding {
                covariate: 2,
                strength: 2.0,
                component: 0,
                eigen_rank: 1,
            }),
            ..Default::default()
        };
        let d = generate(&s).unwrap();
        let map = LevelMap::from_graph(d.area_of.clone(), &d.graph).unwrap();
        let means: Vec<f64> = map
            .sum_by_area(&d.x.column(2).iter().copied().collect::<Vec<_>>())
            .iter()
            .zip(map.counts())
            .map(|(s, c)| s / *c as f64)
            .collect();
        let r = moran_i(&means, &d.graph, MoranWeights::RowStandardized).unwrap();
        assert!(r.i_std > 1.645, "{r:?}");
        let again = standardize_moran(r.i, r.e0, r.v0);
        assert!((again - r.i_std).abs() < 1e-12);
    }
}
