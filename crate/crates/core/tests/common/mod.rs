#![allow(dead_code)]

use censored_additivity::additive::{EvaluationRegion, IntegrationDensities, MarginalIntegrator};
use censored_additivity::kernels::{make_kernel_set, KernelFamily, KernelSet, ProductKernel};
use censored_additivity::plan::{make_plan, BandwidthConstants, Bandwidths};
use censored_additivity::quadrature::{midpoints, GaussLegendre};
use censored_additivity::smoothing::{density_estimate, PsiSpec, WeightedResponses};
use censored_additivity::survival::{ipcw_responses, kaplan_meier_censoring};
use censored_additivity::simulate::{draw_sample_with, replicate_rng, TrueModel};
use censored_additivity::survival::CensoredSample;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Test statistic by the literal triple loop over midpoint cells of the
/// weight box, observation `i` and observation `j`.
pub fn brute_force_t(
    sample: &CensoredSample,
    eps: &[f64],
    fhat: &[f64],
    l: &ProductKernel,
    ell: f64,
    region: &EvaluationRegion,
    points: usize,
) -> f64 {
    let d = sample.dim();
    let n = sample.len();
    let axes: Vec<Vec<f64>> = (0..d).map(|m| midpoints(region.g_lo[m], region.g_hi[m], points)).collect();
    let cell: f64 = (0..d).map(|m| (region.g_hi[m] - region.g_lo[m]) / points as f64).product();
    let mut total = 0.0;
    for flat in 0..points.pow(d as u32) {
        let mut rem = flat;
        let mut x = vec![0.0; d];
        for m in (0..d).rev() {
            x[m] = axes[m][rem % points];
            rem /= points;
        }
        let weight = region.g(&x) * cell;
        for i in 0..n {
            for j in 0..n {
                let li = l.eval_scaled(&x, sample.row(i), ell);
                let lj = l.eval_scaled(&x, sample.row(j), ell);
                total += weight * li * lj * (eps[i] / fhat[i]) * (eps[j] / fhat[j]);
            }
        }
    }
    let scale = n as f64 * ell.powi(d as i32);
    total / (scale * scale)
}

/// Small random instance: covariates on the unit cube, arbitrary residuals
/// and positive density values.
pub fn random_instance(seed: u64, n: usize, d: usize) -> (CensoredSample, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n * d).map(|_| rng.random::<f64>()).collect();
    let z: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
    let delta = vec![1; n];
    let eps: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let fhat: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..2.0)).collect();
    (CensoredSample::new(d, x, z, delta).unwrap(), eps, fhat)
}

pub fn model_sample(model: &TrueModel, n: usize, seed: u64) -> CensoredSample {
    draw_sample_with(model, n, &mut replicate_rng(seed, 0)).unwrap()
}

/// Uniform covariates, additive signal, mild censoring.
pub fn additive_dataset(seed: u64, n: usize, d: usize) -> CensoredSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n * d);
    let mut z = Vec::with_capacity(n);
    let mut delta = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
        let signal: f64 = 2.0 + row.iter().enumerate().map(|(j, v)| (j as f64 + 1.0) * (v - 0.5)).sum::<f64>();
        let y = signal + rng.random_range(-0.4..0.4);
        let c = -rng.random::<f64>().ln() / 0.15;
        x.extend(row);
        z.push(y.min(c));
        delta.push(u8::from(y <= c));
    }
    CensoredSample::new(d, x, z, delta).unwrap()
}

pub fn fit_parts(
    s: &CensoredSample,
) -> (
    WeightedResponses,
    KernelSet,
    Bandwidths,
    IntegrationDensities,
) {
    let d = s.dim();
    let kernels = make_kernel_set(d, 2, 2 * d as u32 + 2, KernelFamily::Epanechnikov).unwrap();
    let constants = BandwidthConstants {
        c2: 0.6,
        ..BandwidthConstants::default()
    };
    let bw = make_plan(d, 2, 2 * d as u32 + 2, constants, None).unwrap().at(s.len());
    let g = kaplan_meier_censoring(s);
    let r = ipcw_responses(s, &g, &PsiSpec::identity()).unwrap();
    let f = density_estimate(s, &kernels.density, bw.h_n).unwrap();
    let w = WeightedResponses::new(s, &r, &f.at_observations()).unwrap();
    let region = EvaluationRegion::new(vec![0.1; d], vec![0.9; d], vec![0.2; d], vec![0.8; d], 0.05).unwrap();
    (w, kernels, bw, IntegrationDensities::uniform_on(&region))
}

/// `∫ eta_l q_l` with Gauss–Legendre panels split at every kink of the
/// piecewise-polynomial component.
pub fn centered_integral(integ: &MarginalIntegrator<'_>, s: &CensoredSample, q: &IntegrationDensities, l: usize, reach: f64) -> f64 {
    let (a, b) = (q.axes[l].lo, q.axes[l].hi);
    let mut breaks: Vec<f64> = (0..s.len())
        .flat_map(|i| [s.row(i)[l] - reach, s.row(i)[l] + reach])
        .filter(|&t| t > a && t < b)
        .collect();
    breaks.sort_by(f64::total_cmp);
    let gl = GaussLegendre::new(8);
    gl.integrate_panels(a, b, &breaks, |x| integ.component_at(l, x).unwrap() * q.axes[l].eval(x))
}
