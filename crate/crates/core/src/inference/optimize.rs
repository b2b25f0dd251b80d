//! Quasi-Newton maximization with finite-difference derivatives.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when the gradient's infinity norm falls below this.
    pub grad_tol: f64,
    /// Stop when the objective changes by less than this over an iteration.
    pub f_tol: f64,
    /// Finite-difference step.
    pub fd_step: f64,
    /// Largest allowed step (infinity norm).
    pub max_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            grad_tol: 1e-4,
            f_tol: 1e-9,
            fd_step: 1e-4,
            max_step: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
}

/// Central-difference gradient, coordinates evaluated in parallel.
pub fn fd_gradient<F>(f: &F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    (0..x.len())
        .into_par_iter()
        .map(|i| {
            let mut up = x.to_vec();
            let mut dn = x.to_vec();
            up[i] += h;
            dn[i] -= h;
            (f(&up) - f(&dn)) / (2.0 * h)
        })
        .collect()
}

/// Central-difference Hessian.
pub fn fd_hessian<F>(f: &F, x: &[f64], h: f64) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let m = x.len();
    let f0 = f(x);
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| (i..m).map(move |j| (i, j))).collect();
    let vals: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let eval = |di: f64, dj: f64| {
                let mut p = x.to_vec();
                p[i] += di;
                p[j] += dj;
                f(&p)
            };
            if i == j {
                (eval(h, 0.0) - 2.0 * f0 + eval(-h, 0.0)) / (h * h)
            } else {
                (eval(h, h) - eval(h, -h) - eval(-h, h) + eval(-h, -h)) / (4.0 * h * h)
            }
        })
        .collect();
    let mut out = DMatrix::zeros(m, m);
    for (&(i, j), v) in pairs.iter().zip(vals) {
        out[(i, j)] = v;
        out[(j, i)] = v;
    }
    out
}

/// Maximize `f` by BFGS with backtracking line search. Non-finite values are
/// treated as `-∞`.
pub fn bfgs<F>(f: &F, x0: &[f64], opts: &BfgsOptions) -> BfgsResult
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let m = x0.len();
    let eval = |x: &[f64]| {
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::NEG_INFINITY
        }
    };
    let mut x = DVector::from_column_slice(x0);
    let mut fx = eval(x.as_slice());
    let mut g = DVector::from_vec(fd_gradient(&eval, x.as_slice(), opts.fd_step));
    // inverse Hessian approximation of -f
    let mut hinv = DMatrix::<f64>::identity(m, m);
    let mut converged = false;
    let mut iterations = 0;
    if !fx.is_finite() {
        return BfgsResult {
            x: x0.to_vec(),
            value: fx,
            iterations: 0,
            converged: false,
            grad_norm: f64::INFINITY,
        };
    }
    while iterations < opts.max_iter {
        if g.amax() < opts.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let mut dir = &hinv * &g;
        if dir.dot(&g) <= 0.0 {
            hinv = DMatrix::identity(m, m);
            dir = g.clone();
        }
        let big = dir.amax();
        if big > opts.max_step {
            dir *= opts.max_step / big;
        }
        let slope = dir.dot(&g);
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..30 {
            let cand = &x + &dir * t;
            let fc = eval(cand.as_slice());
            if fc >= fx + 1e-4 * t * slope {
                next = Some((cand, fc));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fxn)) = next else {
            break;
        };
        let gn = DVector::from_vec(fd_gradient(&eval, xn.as_slice(), opts.fd_step));
        let s = &xn - &x;
        // gradient of -f changes by -(gn - g)
        let y = &g - &gn;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(m, m);
            let left = &eye - &s * y.transpose() * rho;
            let right = &eye - &y * s.transpose() * rho;
            hinv = &left * &hinv * &right + &s * s.transpose() * rho;
        }
        let df = fxn - fx;
        x = xn;
        fx = fxn;
        g = gn;
        if df.abs() < opts.f_tol * (1.0 + fx.abs()) && g.amax() < 100.0 * opts.grad_tol {
            converged = true;
            break;
        }
    }
    BfgsResult {
        grad_norm: g.amax(),
        x: x.as_slice().to_vec(),
        value: fx,
        iterations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maximizes_rosenbrock() {
        let f = |x: &[f64]| -((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2));
        let opts = BfgsOptions {
            max_iter: 500,
            grad_tol: 1e-6,
            f_tol: 0.0,
            ..Default::default()
        };
        let r = bfgs(&f, &[-1.2, 1.0], &opts);
        assert!((r.x[0] - 1.0).abs() < 1e-3 && (r.x[1] - 1.0).abs() < 1e-3, "{:?}", r.x);
    }

    #[test]
    fn hessian_of_quadratic() {
        let f = |x: &[f64]| -(2.0 * x[0] * x[0] + x[0] * x[1] + 3.0 * x[1] * x[1]);
        let h = fd_hessian(&f, &[0.3, -0.2], 1e-3);
        assert!((h[(0, 0)] + 4.0).abs() < 1e-6);
        assert!((h[(0, 1)] + 1.0).abs() < 1e-6);
        assert!((h[(1, 1)] + 6.0).abs() < 1e-6);
    }
}
