mod common;

use censored_additivity::additive::{additive_fit, EvaluationRegion, MarginalIntegrator};
use censored_additivity::kernels::{Kernel1D, KernelFamily, ProductKernel};
use censored_additivity::pipeline::{fit_model, run_pipeline, TestConfig};
use censored_additivity::quadrature::{GridSpec, OuterRule};
use censored_additivity::simulate::{default_null_config, run_monte_carlo, run_replicate, summarize};
use censored_additivity::survival::CensoredSample;
use censored_additivity::testing::{test_statistic, test_statistic_on_grid, ResidualVector};
use censored_additivity::Error;

use common::{additive_dataset, brute_force_t, centered_integral, fit_parts, random_instance};

#[test]
fn grid_statistic_matches_triple_loop() {
    let region = EvaluationRegion::new(vec![0.0; 2], vec![1.0; 2], vec![0.25; 2], vec![0.75; 2], 0.05).unwrap();
    let l = ProductKernel::new(Kernel1D::with_default_radius(KernelFamily::Uniform, 2).unwrap(), 2);
    let (s, eps, fhat) = random_instance(5, 5, 2);
    let res = ResidualVector { eps_star: eps.clone() };
    for ell in [0.2, 0.5, 1.0] {
        let fast = test_statistic_on_grid(&s, &res, &fhat, &l, ell, &region, 5).unwrap();
        let slow = brute_force_t(&s, &eps, &fhat, &l, ell, &region, 5);
        assert!((fast - slow).abs() <= 1e-10 * slow.abs().max(1e-300), "{fast} vs {slow}");
    }
}

#[test]
fn statistic_is_nonnegative_and_zero_for_zero_residuals() {
    let region = EvaluationRegion::new(vec![0.0; 2], vec![1.0; 2], vec![0.25; 2], vec![0.75; 2], 0.05).unwrap();
    let l = ProductKernel::new(Kernel1D::with_default_radius(KernelFamily::Epanechnikov, 2).unwrap(), 2);
    for seed in 0..10 {
        let (s, _, fhat) = random_instance(seed, 8, 2);
        let zero = ResidualVector { eps_star: vec![0.0; 8] };
        assert_eq!(test_statistic(&s, &zero, &fhat, &l, 0.3, &region, OuterRule::Exact).unwrap(), 0.0);
        let (_, eps, _) = random_instance(seed + 100, 8, 2);
        let res = ResidualVector { eps_star: eps };
        assert!(test_statistic(&s, &res, &fhat, &l, 0.3, &region, OuterRule::Exact).unwrap() >= 0.0);
    }
}

#[test]
fn components_are_centered() {
    for seed in 0..10 {
        let s = additive_dataset(seed, 150, 2);
        let (w, k, bw, q) = fit_parts(&s);
        let integ = MarginalIntegrator::new(&w, &k, &bw, &q, 64).unwrap();
        for l in 0..2 {
            let v = centered_integral(&integ, &s, &q, l, k.k1.radius() * bw.h1);
            assert!(v.abs() < 1e-6, "seed {seed} axis {l}: {v}");
        }
    }
}

#[test]
fn evaluator_is_the_decomposition() {
    let s = additive_dataset(3, 200, 2);
    let (w, k, bw, q) = fit_parts(&s);
    let fit = additive_fit(&w, &k, &bw, &q, &GridSpec::default()).unwrap();
    for x in [[0.21, 0.33], [0.5, 0.5], [0.79, 0.2]] {
        let parts = fit.mu_hat + fit.components[0].eval(x[0]) + fit.components[1].eval(x[1]);
        assert_eq!(fit.eval(&x), parts);
    }
}

#[test]
fn relabeling_axes_permutes_components() {
    let s = additive_dataset(9, 200, 2);
    let (w, k, bw, q) = fit_parts(&s);
    let fit = additive_fit(&w, &k, &bw, &q, &GridSpec::default()).unwrap();
    let swapped = s.permute_axes(&[1, 0]);
    let (w2, k2, bw2, q2) = fit_parts(&swapped);
    let fit2 = additive_fit(&w2, &k2, &bw2, &q2, &GridSpec::default()).unwrap();
    assert!((fit.mu_hat - fit2.mu_hat).abs() < 1e-10);
    for (a, b) in fit.components[0].values.iter().zip(&fit2.components[1].values) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn constant_response_gives_flat_components() {
    // Every response equal to c on a regular design reaching well past the
    // integration region, so no smoothing window meets the design boundary.
    // What is left is the lattice's Riemann-sum error, about 1% of c here
    // and halving when the spacing halves.
    let m = 90;
    let at = |k: usize| -1.0 + 3.0 * k as f64 / (m - 1) as f64;
    let rows: Vec<Vec<f64>> = (0..m * m).map(|i| vec![at(i / m), at(i % m)]).collect();
    let s = CensoredSample::from_rows(&rows, vec![4.0; m * m], vec![1; m * m]).unwrap();
    let (w, k, bw, q) = fit_parts(&s);
    let fit = additive_fit(&w, &k, &bw, &q, &GridSpec::default()).unwrap();
    let tol = 0.02 * 4.0;
    assert!((fit.mu_hat - 4.0).abs() < tol, "{}", fit.mu_hat);
    for c in &fit.components {
        assert!(c.values.iter().all(|v| v.abs() < tol), "{:?}", c.values);
    }
}

#[test]
fn rescaling_psi_leaves_z_unchanged() {
    let mut cfg = TestConfig::unit_cube(2);
    let s = common::model_sample(&default_null_config(0.0, 300, 1, 1).unwrap().model, 300, 4);
    cfg.frozen_bandwidths = Some(cfg.bandwidths(2, 300).unwrap());
    cfg.psi = censored_additivity::smoothing::PsiSpec::centered(2.5);
    let base = run_pipeline(&s, &cfg, None).unwrap().report;
    cfg.psi = cfg.psi.scaled(3.0);
    let scaled = run_pipeline(&s, &cfg, None).unwrap().report;
    assert!((base.z - scaled.z).abs() < 1e-6, "{} vs {}", base.z, scaled.z);
    assert!((scaled.t_n_star / base.t_n_star - 9.0).abs() < 1e-9);
}

#[test]
fn single_replicate_study_equals_one_run() {
    let cfg = default_null_config(0.0, 200, 1, 77).unwrap();
    let result = run_monte_carlo(&cfg).unwrap();
    let truth = cfg.model.additive_truth(&cfg.test, cfg.sup_points).unwrap();
    let (row, out) = run_replicate(&cfg, &truth, 0).unwrap();
    assert_eq!(result.rows, vec![row.clone()]);
    assert_eq!(result.summary, summarize(&[row], 0, 0.05));
    assert_eq!(result.summary.mean_z, out.report.z);
}

#[test]
fn fit_only_run_matches_full_run() {
    let cfg = TestConfig::unit_cube(2);
    let s = common::model_sample(&default_null_config(0.0, 200, 1, 1).unwrap().model, 200, 2);
    let fit = fit_model(&s, &cfg).unwrap().fit;
    let full = run_pipeline(&s, &cfg, None).unwrap();
    assert_eq!(fit, full.fit);
}

#[test]
fn incompatible_region_is_rejected() {
    let cfg = TestConfig::unit_cube(3);
    let s = additive_dataset(1, 50, 2);
    assert!(matches!(run_pipeline(&s, &cfg, None), Err(Error::InvalidConfig(_))));
}

#[test]
fn power_grows_with_interaction() {
    let rates: Vec<f64> = [0.0, 0.5, 1.0, 2.0]
        .iter()
        .map(|&theta| run_monte_carlo(&default_null_config(theta, 400, 100, 31).unwrap()).unwrap().summary.rejection_rate)
        .collect();
    // One inversion of at most 0.02 is tolerated as Monte Carlo noise.
    let drops: Vec<f64> = rates.windows(2).map(|w| w[0] - w[1]).filter(|&d| d > 0.0).collect();
    assert!(drops.len() <= 1 && drops.iter().all(|&d| d <= 0.02), "{rates:?}");
    assert!(rates[3] > rates[0], "{rates:?}");
}
