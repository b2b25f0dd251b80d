//! Latent-field precision structures, precision scaling, constraint systems
//! and conditioning by kriging.
//!
//! Latent vectors over `k` outcomes and `n` areas are stored outcome-major:
//! entry `(j, i)` lives at index `j * n + i`, so the joint precision is the
//! Kronecker product `Λ ⊗ S` of the between-outcome precision `Λ` and the
//! area structure matrix `S`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::graph::{component_pseudoinverse_diag, AreaGraph};
use crate::multilevel::LevelMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentFamily {
    /// No latent field.
    Null,
    /// Independent area effects, one variance per outcome.
    Iid,
    /// One univariate ICAR per outcome, no cross-outcome correlation.
    IndepIcar,
    /// Bivariate ICAR with a full between-outcome precision.
    Icar,
    /// Bivariate proper CAR with association parameter `phi`.
    Pcar,
}

impl LatentFamily {
    pub fn has_field(self) -> bool {
        self != LatentFamily::Null
    }

    pub fn is_intrinsic(self) -> bool {
        matches!(self, LatentFamily::Icar | LatentFamily::IndepIcar)
    }

    /// Whether `Λ` carries an off-diagonal correlation.
    pub fn correlated(self) -> bool {
        matches!(self, LatentFamily::Icar | LatentFamily::Pcar)
    }

    pub fn label(self) -> &'static str {
        match self {
            LatentFamily::Null => "null",
            LatentFamily::Iid => "iid",
            LatentFamily::IndepIcar => "indep_icar",
            LatentFamily::Icar => "icar",
            LatentFamily::Pcar => "pcar",
        }
    }
}

impl std::str::FromStr for LatentFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "null" | "none" => Ok(Self::Null),
            "iid" => Ok(Self::Iid),
            "indep_icar" | "independent_icar" => Ok(Self::IndepIcar),
            "icar" => Ok(Self::Icar),
            "pcar" => Ok(Self::Pcar),
            other => Err(Error::InvalidArgument(format!("unknown latent family '{other}'"))),
        }
    }
}

/// Between-outcome covariance `Λ⁻¹`, parameterized by marginal variances
/// and (for `k = 2`) a correlation.
#[derive(Debug, Clone, PartialEq)]
pub struct CovParams {
    pub sigma2: Vec<f64>,
    pub rho: f64,
}

impl CovParams {
    pub fn new(sigma2: Vec<f64>, rho: f64) -> Result<Self> {
        if sigma2.is_empty() || sigma2.len() > 2 {
            return Err(Error::InvalidArgument(format!(
                "between-outcome covariance supports k = 1 or 2, got {}",
                sigma2.len()
            )));
        }
        if sigma2.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("variances must be positive: {sigma2:?}")));
        }
        if rho.abs() >= 1.0 || (sigma2.len() == 1 && rho != 0.0) {
            return Err(Error::InvalidArgument(format!("invalid correlation {rho}")));
        }
        Ok(Self { sigma2, rho })
    }

    pub fn k(&self) -> usize {
        self.sigma2.len()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let k = self.k();
        DMatrix::from_fn(k, k, |a, b| {
            if a == b {
                self.sigma2[a]
            } else {
                self.rho * (self.sigma2[a] * self.sigma2[b]).sqrt()
            }
        })
    }

    /// `Λ`, the inverse of the covariance, in closed form.
    pub fn precision(&self) -> DMatrix<f64> {
        match self.k() {
            1 => DMatrix::from_element(1, 1, 1.0 / self.sigma2[0]),
            _ => {
                let (s1, s2, r) = (self.sigma2[0], self.sigma2[1], self.rho);
                let det = s1 * s2 * (1.0 - r * r);
                let off = -r * (s1 * s2).sqrt() / det;
                DMatrix::from_row_slice(2, 2, &[s2 / det, off, off, s1 / det])
            }
        }
    }

    /// `log |Λ|`.
    pub fn log_det_precision(&self) -> f64 {
        let mut ld: f64 = -self.sigma2.iter().map(|s| s.ln()).sum::<f64>();
        if self.k() == 2 {
            ld -= (1.0 - self.rho * self.rho).ln();
        }
        ld
    }

    /// Log-Jacobian `log |∂Λ/∂u|` of the map from the unconstrained
    /// coordinates `u = (log σ²_1, .., log σ²_k, atanh ρ)` to the distinct
    /// entries of `Λ` (lower triangle).
    pub fn log_jacobian_from_unconstrained(&self) -> f64 {
        let k = self.k() as f64;
        let log_det_cov = -self.log_det_precision();
        // Σ → Σ⁻¹ on symmetric k×k matrices has |J| = |Σ|^{-(k+1)}.
        let mut lj = -(k + 1.0) * log_det_cov;
        // u → Σ: dσ²_j/du_j = σ²_j; dσ12/dz = sqrt(σ²_1 σ²_2)(1 - ρ²).
        lj += self.sigma2.iter().map(|s| s.ln()).sum::<f64>();
        if self.k() == 2 {
            lj += 0.5 * (self.sigma2[0] * self.sigma2[1]).ln() + (1.0 - self.rho * self.rho).ln();
        }
        lj
    }
}

/// `log Γ_k(a)`, the multivariate gamma function.
pub fn ln_multigamma(k: usize, a: f64) -> f64 {
    let kf = k as f64;
    kf * (kf - 1.0) / 4.0 * std::f64::consts::PI.ln()
        + (0..k).map(|j| ln_gamma(a - j as f64 / 2.0)).sum::<f64>()
}

/// Wishart log-density with scale `I_k`, `df` degrees of freedom
/// (`E[Λ] = df · I_k`).
pub fn wishart_identity_logpdf(lambda: &DMatrix<f64>, df: f64) -> Result<f64> {
    let k = lambda.nrows();
    let chol = Cholesky::new(lambda.clone())
        .ok_or_else(|| Error::NotPositiveDefinite("Wishart argument".into()))?;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let kf = k as f64;
    Ok(0.5 * (df - kf - 1.0) * log_det
        - 0.5 * lambda.trace()
        - 0.5 * df * kf * std::f64::consts::LN_2
        - ln_multigamma(k, 0.5 * df))
}

/// Laplacian with every component block multiplied by the geometric mean of
/// the diagonal of that block's pseudoinverse.
#[derive(Debug, Clone)]
pub struct ScaledStructure {
    pub matrix: DMatrix<f64>,
    /// Per-component factor `s_c`; 1 for singleton components.
    pub factors: Vec<f64>,
    /// Singleton components that received the unit factor.
    pub flagged: Vec<usize>,
}

pub fn scale_structure(g: &AreaGraph) -> ScaledStructure {
    let mut matrix = g.laplacian();
    let mut factors = vec![1.0; g.n_components()];
    let mut flagged = Vec::new();
    for (c, factor) in factors.iter_mut().enumerate() {
        match component_pseudoinverse_diag(g, c) {
            Ok(diag) => {
                let s = (diag.iter().map(|d| d.ln()).sum::<f64>() / diag.len() as f64).exp();
                *factor = s;
                let nodes = g.component_nodes(c);
                for &a in &nodes {
                    for &b in &nodes {
                        matrix[(a, b)] *= s;
                    }
                }
            }
            Err(_) => flagged.push(c),
        }
    }
    ScaledStructure {
        matrix,
        factors,
        flagged,
    }
}

/// `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    DMatrix::from_fn(ar * br, ac * bc, |r, c| a[(r / br, c / bc)] * b[(r % br, c % bc)])
}

/// Joint precision `Λ ⊗ S` of a latent field, kept in factored form.
#[derive(Debug, Clone)]
pub struct LatentPrecision {
    pub family: LatentFamily,
    pub structure: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub scaled: bool,
    pub phi: Option<f64>,
}

impl LatentPrecision {
    pub fn k(&self) -> usize {
        self.lambda.nrows()
    }

    pub fn n(&self) -> usize {
        self.structure.nrows()
    }

    pub fn full(&self) -> DMatrix<f64> {
        kron(&self.lambda, &self.structure)
    }

    /// `(Λ ⊗ S) z` without forming the Kronecker product.
    pub fn apply(&self, z: &DVector<f64>) -> DVector<f64> {
        let (k, n) = (self.k(), self.n());
        let zm = DMatrix::from_column_slice(n, k, z.as_slice());
        let out = &self.structure * zm * self.lambda.transpose();
        DVector::from_column_slice(out.as_slice())
    }

    /// Conditional mean and covariance of `z_i` (a `k`-vector) given all
    /// other areas, read off the joint precision.
    pub fn conditional(&self, i: usize, z: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (k, n) = (self.k(), self.n());
        let qii = &self.lambda * self.structure[(i, i)];
        let chol = Cholesky::new(qii.clone())
            .ok_or_else(|| Error::NotPositiveDefinite(format!("conditional precision at {i}")))?;
        let mut rhs = DVector::zeros(k);
        for j in 0..n {
            if j == i || self.structure[(i, j)] == 0.0 {
                continue;
            }
            let zj = DVector::from_fn(k, |a, _| z[a * n + j]);
            rhs += &self.lambda * zj * self.structure[(i, j)];
        }
        Ok((-chol.solve(&rhs), chol.inverse()))
    }
}

fn check_spd(lambda: &DMatrix<f64>, what: &str) -> Result<()> {
    if !lambda.is_square() || Cholesky::new(lambda.clone()).is_none() {
        return Err(Error::NotPositiveDefinite(what.into()));
    }
    Ok(())
}

/// Bivariate (or `k`-variate) ICAR precision `Λ ⊗ R`, with `R` scaled per
/// component when `scaled` is set.
pub fn build_icar_precision(g: &AreaGraph, lambda: &DMatrix<f64>, scaled: bool) -> Result<LatentPrecision> {
    check_spd(lambda, "Λ")?;
    let structure = if scaled {
        scale_structure(g).matrix
    } else {
        g.laplacian()
    };
    Ok(LatentPrecision {
        family: LatentFamily::Icar,
        structure,
        lambda: lambda.clone(),
        scaled,
        phi: None,
    })
}

/// Proper CAR precision `Λ ⊗ (D − φW)`; never scaled.
pub fn build_pcar_precision(g: &AreaGraph, lambda: &DMatrix<f64>, phi: f64) -> Result<LatentPrecision> {
    if !(phi > 0.0 && phi < 1.0) {
        return Err(Error::PhiOutOfRange(phi));
    }
    check_spd(lambda, "Λ")?;
    Ok(LatentPrecision {
        family: LatentFamily::Pcar,
        structure: pcar_structure(g, phi),
        lambda: lambda.clone(),
        scaled: false,
        phi: Some(phi),
    })
}

pub fn pcar_structure(g: &AreaGraph, phi: f64) -> DMatrix<f64> {
    g.degree_matrix() - g.proximity() * phi
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    SumToZero,
    Rsr,
}

/// Linear constraints `A z = 0` on a `k`-outcome latent field. The same
/// area-level rows apply to every outcome, so `A = I_k ⊗ area_rows`.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    pub kind: ConstraintKind,
    pub k: usize,
    pub area_rows: DMatrix<f64>,
}

impl ConstraintSet {
    /// Number of constraint rows `m = k · m_area`.
    pub fn m(&self) -> usize {
        self.k * self.area_rows.nrows()
    }

    pub fn a(&self) -> DMatrix<f64> {
        kron(&DMatrix::identity(self.k, self.k), &self.area_rows)
    }

    pub fn rhs(&self) -> DVector<f64> {
        DVector::zeros(self.m())
    }

    /// `‖A z‖∞`.
    pub fn residual(&self, z: &[f64]) -> f64 {
        let a = self.a();
        (a * DVector::from_column_slice(z)).amax()
    }

    /// Orthonormal basis (`n × (n − m_area)`) of the null space of the area rows.
    pub fn null_basis(&self) -> DMatrix<f64> {
        null_space_basis(&self.area_rows)
    }
}

/// Rows of `ξ C` intercept columns plus covariates, i.e. `X_tot`.
pub fn total_design(map: &LevelMap, x: &DMatrix<f64>, component_intercepts: bool) -> DMatrix<f64> {
    let g = if component_intercepts { map.n_components() } else { 1 };
    let nobs = map.n_obs();
    DMatrix::from_fn(nobs, g + x.ncols(), |h, q| {
        if q < g {
            if !component_intercepts || map.obs_component(h) == q {
                1.0
            } else {
                0.0
            }
        } else {
            x[(h, q - g)]
        }
    })
}

/// Columns of `x` that are linear combinations of earlier columns
/// (Gram–Schmidt residual below `1e-10` of the column norm).
pub fn dependent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for q in 0..x.ncols() {
        let col = x.column(q).into_owned();
        let norm = col.norm();
        let mut r = col.clone();
        for b in &basis {
            let proj = b.dot(&r);
            r -= b * proj;
        }
        if norm == 0.0 || r.norm() <= 1e-10 * norm {
            dependent.push(q);
        } else {
            let rn = r.norm();
            basis.push(r / rn);
        }
    }
    dependent
}

/// Builds sum-to-zero or RSR constraints for `k` outcomes.
///
/// Sum-to-zero: one indicator row per graph component. RSR: rows spanning
/// `X_totᵀ ξ`, reduced to an orthonormal basis of their row space; a
/// component whose rows vanish (no observations) keeps its sum-to-zero row
/// so the intrinsic null space stays fixed.
pub fn build_constraints(
    kind: ConstraintKind,
    k: usize,
    g: &AreaGraph,
    map: &LevelMap,
    x_tot: Option<&DMatrix<f64>>,
) -> Result<ConstraintSet> {
    let n = g.n();
    let area_rows = match kind {
        ConstraintKind::SumToZero => component_indicator_rows(g),
        ConstraintKind::Rsr => {
            let x_tot = x_tot.ok_or_else(|| Error::InvalidArgument("RSR needs X_tot".into()))?;
            if x_tot.nrows() != map.n_obs() {
                return Err(Error::DimensionMismatch("X_tot rows vs observations".into()));
            }
            let dep = dependent_columns(x_tot);
            if !dep.is_empty() {
                return Err(Error::RankDeficient(dep));
            }
            // X_totᵀ ξ: q × n.
            let q = x_tot.ncols();
            let mut m = DMatrix::zeros(q, n);
            for (h, &a) in map.area_of().iter().enumerate() {
                for c in 0..q {
                    m[(c, a)] += x_tot[(h, c)];
                }
            }
            let mut rows = orthonormal_row_basis(&m);
            let indicators = component_indicator_rows(g);
            for c in 0..g.n_components() {
                let ind = indicators.row(c).transpose();
                let coverage = (&rows * &ind).norm();
                if coverage < 1e-10 * ind.norm() {
                    let extra = DMatrix::from_row_slice(1, n, ind.as_slice());
                    rows = stack_rows(&rows, &extra);
                }
            }
            rows
        }
    };
    Ok(ConstraintSet { kind, k, area_rows })
}

fn component_indicator_rows(g: &AreaGraph) -> DMatrix<f64> {
    let mut rows = DMatrix::zeros(g.n_components(), g.n());
    for (i, &c) in g.components().iter().enumerate() {
        rows[(c, i)] = 1.0;
    }
    rows
}

fn stack_rows(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.rows_mut(0, a.nrows()).copy_from(a);
    out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    out
}

/// Orthonormal rows spanning the row space of `m`.
pub fn orthonormal_row_basis(m: &DMatrix<f64>) -> DMatrix<f64> {
    let gram = m * m.transpose();
    let eig = SymmetricEigen::new(gram);
    let lmax = eig.eigenvalues.amax();
    let keep: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&l| eig.eigenvalues[l] > 1e-12 * lmax.max(f64::MIN_POSITIVE))
        .collect();
    let mut rows = DMatrix::zeros(keep.len(), m.ncols());
    for (r, &l) in keep.iter().enumerate() {
        let u = eig.eigenvectors.column(l);
        let row = u.transpose() * m / eig.eigenvalues[l].sqrt();
        rows.row_mut(r).copy_from(&row);
    }
    rows
}

/// Orthonormal basis of `{x : rows · x = 0}` as columns.
pub fn null_space_basis(rows: &DMatrix<f64>) -> DMatrix<f64> {
    let n = rows.ncols();
    if rows.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    let eig = SymmetricEigen::new(rows.transpose() * rows);
    let lmax = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let mut cols: Vec<usize> = (0..n)
        .filter(|&l| eig.eigenvalues[l].abs() <= 1e-10 * lmax)
        .collect();
    cols.sort_unstable();
    let mut basis = DMatrix::zeros(n, cols.len());
    for (c, &l) in cols.iter().enumerate() {
        let mut v = eig.eigenvectors.column(l).into_owned();
        let vmax = v.amax();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-10 * vmax) {
            if *first < 0.0 {
                v.neg_mut();
            }
        }
        basis.set_column(c, &v);
    }
    basis
}

/// Conditioning by kriging: given `x` drawn from (or the mean of) a Gaussian
/// with precision `Q` (as its Cholesky factor), returns
/// `x − Q⁻¹Aᵀ(AQ⁻¹Aᵀ)⁻¹(A x − e)`.
pub fn condition_by_kriging(
    x: &DVector<f64>,
    q_chol: &Cholesky<f64, Dyn>,
    a: &DMatrix<f64>,
    e: &DVector<f64>,
) -> Result<DVector<f64>> {
    let qinv_at = q_chol.solve(&a.transpose());
    let s = a * &qinv_at;
    let s_chol = Cholesky::new(s).ok_or_else(|| Error::Numerical("A Q⁻¹ Aᵀ not SPD".into()))?;
    let resid = a * x - e;
    Ok(x - qinv_at * s_chol.solve(&resid))
}

/// Covariance after conditioning on `A x = e`: `Q⁻¹ − Q⁻¹Aᵀ(AQ⁻¹Aᵀ)⁻¹AQ⁻¹`.
pub fn kriged_covariance(q_chol: &Cholesky<f64, Dyn>, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let qinv = q_chol.inverse();
    let qinv_at = &qinv * a.transpose();
    let s = a * &qinv_at;
    let s_chol = Cholesky::new(s).ok_or_else(|| Error::Numerical("A Q⁻¹ Aᵀ not SPD".into()))?;
    Ok(&qinv - &qinv_at * s_chol.solve(&qinv_at.transpose()))
}
