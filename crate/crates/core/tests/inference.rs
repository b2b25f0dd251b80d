use areal_core::graph::AreaGraph;
use areal_core::inference::{fit, mcmc, Dataset, EngineSettings, IntegrationStrategy, ModelSpec, Problem, Treatment};
use areal_core::likelihood::{Likelihood, SkewNormalSpec};
use areal_core::multilevel::LevelMap;
use areal_core::simulate::{generate, AreaSize, GraphSpec, Scenario};
use areal_core::spatial_prior::LatentFamily;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::ln_gamma;

/// One outcome, one covariate, `per_area` observations on each node of a path.
fn toy(n_areas: usize, per_area: usize, seed: u64, skew_alpha: Option<f64>) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = AreaGraph::path(n_areas);
    let area_of: Vec<usize> = (0..n_areas * per_area).map(|h| h / per_area).collect();
    let n = area_of.len();
    let x = DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>());
    let sn = skew_alpha.map(|a| SkewNormalSpec::new(100.0, a).unwrap());
    let y: Vec<f64> = (0..n)
        .map(|h| {
            let e = match &sn {
                Some(s) => s.sample(&mut rng),
                None => 10.0 * rng.sample::<f64, _>(StandardNormal),
            };
            175.0 + 8.0 * x[(h, 0)] + e
        })
        .collect();
    let map = LevelMap::from_graph(area_of, &g).unwrap();
    Dataset::new(g, map, vec![y], vec!["y".into()], x, vec!["x".into()]).unwrap()
}

fn log_mvn(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let chol = cov.clone().cholesky().unwrap();
    let dev = y - mean;
    let sol = chol.solve(&dev);
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (dev.dot(&sol) + log_det + y.len() as f64 * (2.0 * std::f64::consts::PI).ln())
}

#[test]
fn conjugate_normal_regression_matches_quadrature() {
    let data = toy(10, 20, 5, None);
    let spec = ModelSpec::new(vec![Likelihood::Gaussian], LatentFamily::Null);
    let f = fit(&spec, &data, &EngineSettings::default()).unwrap();

    // Oracle: β | ω is conjugate; integrate log ω on a fine grid.
    let n = data.n_obs();
    let x = DMatrix::from_fn(n, 2, |h, c| if c == 0 { 1.0 } else { data.x[(h, 0)] });
    let y = DVector::from_vec(data.y[0].clone());
    let m0 = DVector::from_vec(vec![180.0, 0.0]);
    let v0 = DMatrix::from_diagonal(&DVector::from_vec(vec![1e3, 1e3]));
    let (a, b): (f64, f64) = (1e-3, 1e-3);
    let grid: Vec<f64> = (0..2000).map(|i| 3.0 + 4.0 * i as f64 / 1999.0).collect();
    let mut logw = Vec::new();
    let mut cond = Vec::new();
    for &u in &grid {
        let omega = u.exp();
        let cov = DMatrix::identity(n, n) * omega + &x * &v0 * x.transpose();
        let tau = 1.0 / omega;
        let lp = a * b.ln() - ln_gamma(a) + a * tau.ln() - b * tau;
        logw.push(log_mvn(&y, &(&x * &m0), &cov) + lp);
        let prec = x.transpose() * &x / omega + v0.clone().try_inverse().unwrap();
        let v = prec.try_inverse().unwrap();
        let m = &v * (x.transpose() * &y / omega + v0.clone().try_inverse().unwrap() * &m0);
        cond.push((m, v));
    }
    let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();
    for k in 0..2 {
        let mean: f64 = w.iter().zip(&cond).map(|(w, (m, _))| w * m[k]).sum::<f64>() / total;
        let second: f64 = w.iter().zip(&cond).map(|(w, (m, v))| w * (v[(k, k)] + m[k] * m[k])).sum::<f64>() / total;
        let sd = (second - mean * mean).sqrt();
        let s = &f.fixed[k].summary;
        assert!((s.mean - mean).abs() < 0.01 * sd, "{}: {} vs {}", f.fixed[k].name, s.mean, mean);
        assert!((s.sd / sd - 1.0).abs() < 0.03, "{}: sd {} vs {}", f.fixed[k].name, s.sd, sd);
    }
    // Posterior median of ω from the quadrature CDF.
    let mut acc = 0.0;
    let median_u = grid
        .iter()
        .zip(&w)
        .find(|(_, wi)| {
            acc += *wi / total;
            acc >= 0.5
        })
        .map(|(u, _)| *u)
        .unwrap();
    let om = f.hyper_by_name("omega[y]").unwrap();
    assert!((om.q50 - median_u.exp()).abs() < 0.1 * om.sd, "omega median {} vs {}", om.q50, median_u.exp());
}

#[test]
fn laplace_marginal_matches_brute_force_on_two_dimensional_latent() {
    let data = toy(10, 30, 9, Some(-4.0));
    let spec = ModelSpec::new(vec![Likelihood::SkewNormal], LatentFamily::Null);
    let prob = Problem::new(&spec, &data).unwrap();
    assert_eq!(prob.dim(), 2);
    let psi: Vec<f64> = prob.start_point().iter().map(|v| v + 0.3).collect();
    let lf = prob.fit_latent(&psi, None, 50, 1e-10).unwrap();
    assert!(lf.converged);

    let lt = lf.chol.l().transpose();
    let half_log_det: f64 = lf.chol.l().diagonal().iter().map(|v| v.ln()).sum();
    let k = 241;
    let span = 8.0;
    let dz = 2.0 * span / (k - 1) as f64;
    let mut terms = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            let z = DVector::from_vec(vec![-span + i as f64 * dz, -span + j as f64 * dz]);
            let d = lt.solve_upper_triangular(&z).unwrap();
            terms.push(prob.log_joint_latent(&psi, &(&lf.theta + d)).unwrap());
        }
    }
    let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let brute = top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln() + 2.0 * dz.ln() - half_log_det;
    assert!(
        (brute - lf.log_marginal).abs() < 0.02,
        "brute force {brute} vs Laplace {}",
        lf.log_marginal
    );
}

#[test]
fn single_point_integration_is_exact_gaussian_conditional() {
    let data = toy(8, 15, 2, None);
    let spec = ModelSpec::new(vec![Likelihood::Gaussian], LatentFamily::Null);
    let settings = EngineSettings {
        strategy: IntegrationStrategy::EmpiricalBayes,
        ..Default::default()
    };
    let f = fit(&spec, &data, &settings).unwrap();
    assert_eq!(f.method, "empirical_bayes");
    let omega = f.grid[0].internal[0].exp();

    let n = data.n_obs();
    let x = DMatrix::from_fn(n, 2, |h, c| if c == 0 { 1.0 } else { data.x[(h, 0)] });
    let y = DVector::from_vec(data.y[0].clone());
    let prior_prec = DMatrix::from_diagonal_element(2, 2, 1e-3);
    let prior_mean = DVector::from_vec(vec![180.0, 0.0]);
    let v = (x.transpose() * &x / omega + &prior_prec).try_inverse().unwrap();
    let m = &v * (x.transpose() * &y / omega + &prior_prec * &prior_mean);
    for k in 0..2 {
        let s = &f.fixed[k].summary;
        assert!((s.mean - m[k]).abs() < 1e-6 * (1.0 + m[k].abs()));
        assert!((s.sd - v[(k, k)].sqrt()).abs() < 1e-6 * v[(k, k)].sqrt());
    }
}

fn icar_scenario(seed: u64) -> Scenario {
    Scenario {
        graph: GraphSpec::Lattices {
            blocks: vec![(3, 4), (2, 2), (2, 2)],
        },
        obs_per_area: AreaSize::Fixed(10),
        seed,
        ..Default::default()
    }
}

#[test]
fn held_out_observations_are_predicted() {
    let sim = generate(&icar_scenario(11)).unwrap();
    let full = sim.to_dataset().unwrap();
    let mut data = full.clone();
    let held: Vec<usize> = (0..data.n_obs()).step_by(7).collect();
    for &h in &held {
        for row in data.y.iter_mut() {
            row[h] = f64::NAN;
        }
    }
    let spec = ModelSpec::new(vec![Likelihood::Gaussian, Likelihood::SkewNormal], LatentFamily::Icar);
    let f = fit(&spec, &data, &EngineSettings::default()).unwrap();
    for j in 0..2 {
        let mse: f64 = held.iter().map(|&h| (full.y[j][h] - f.fitted[j][h]).powi(2)).sum::<f64>() / held.len() as f64;
        let omega = sim.truth.scenario.omega[j];
        assert!(mse < 1.6 * omega, "outcome {j}: held-out MSE {mse} vs error variance {omega}");
        assert!(f.fitted[j].iter().all(|v| v.is_finite()));
    }
}

#[test]
fn icar_area_effects_sum_to_zero_per_component() {
    let sim = generate(&icar_scenario(12)).unwrap();
    let data = sim.to_dataset().unwrap();
    let spec = ModelSpec::new(vec![Likelihood::Gaussian, Likelihood::SkewNormal], LatentFamily::Icar);
    let f = fit(&spec, &data, &EngineSettings::default()).unwrap();
    assert!(f.convergence.constraint_residual < 1e-6);
    for row in &f.area_effects {
        for c in 0..data.graph.n_components() {
            let s: f64 = data.graph.component_nodes(c).iter().map(|&i| row[i].mean).sum();
            assert!(s.abs() < 1e-6, "component {c} sums to {s}");
        }
    }
}

#[test]
fn rsr_field_is_orthogonal_to_the_design() {
    let sim = generate(&icar_scenario(13)).unwrap();
    let data = sim.to_dataset().unwrap();
    let mut spec = ModelSpec::new(vec![Likelihood::Gaussian, Likelihood::SkewNormal], LatentFamily::Icar);
    spec.treatment = Treatment::Rsr;
    let prob = Problem::new(&spec, &data).unwrap();
    let f = fit(&spec, &data, &EngineSettings::default()).unwrap();
    let area_of = data.map.area_of();
    for row in &f.area_effects {
        for c in 0..prob.design.ncols() {
            let s: f64 = (0..data.n_obs()).map(|h| prob.design[(h, c)] * row[area_of[h]].mean).sum();
            assert!(s.abs() < 1e-6, "design column {c}: {s}");
        }
    }
}

#[test]
fn sampler_is_deterministic_for_a_seed() {
    let sim = generate(&icar_scenario(14)).unwrap();
    let data = sim.to_dataset().unwrap();
    let spec = ModelSpec::new(vec![Likelihood::Gaussian, Likelihood::SkewNormal], LatentFamily::Icar);
    let settings = mcmc::McmcSettings {
        chains: 2,
        warmup: 100,
        iterations: 100,
        ..Default::default()
    };
    let (_, a) = mcmc::sample(&spec, &data, &settings).unwrap();
    let (_, b) = mcmc::sample(&spec, &data, &settings).unwrap();
    assert_eq!(a.psi, b.psi);
    assert_eq!(a.theta, b.theta);
    let (_, c) = mcmc::sample(&spec, &data, &mcmc::McmcSettings { seed: 2, ..settings }).unwrap();
    assert_ne!(a.psi, c.psi);
}

#[test]
fn engine_recovers_covariate_effects() {
    let mut hits = 0;
    for seed in 0..10 {
        let sim = generate(&Scenario {
            seed: 100 + seed,
            ..Default::default()
        })
        .unwrap();
        let data = sim.to_dataset().unwrap();
        let spec = ModelSpec::new(vec![Likelihood::Gaussian, Likelihood::SkewNormal], LatentFamily::Icar);
        let f = fit(&spec, &data, &EngineSettings::default()).unwrap();
        let all_inside = sim.truth.beta.iter().enumerate().all(|(j, row)| {
            row.iter().enumerate().all(|(m, &b)| {
                let name = format!("{}:{}", data.outcome_names[j], data.covariate_names[m]);
                let s = f.fixed_by_name(&name).unwrap();
                (s.mean - b).abs() < 3.0 * s.sd
            })
        });
        hits += all_inside as usize;
    }
    assert!(hits >= 8, "only {hits}/10 replicates recovered every coefficient");
}
