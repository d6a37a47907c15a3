//! The additivity statistic, its centering and scaling constants, and the
//! standardized statistic with its upper-tail p-value.
//!
//! With `a_i = eps_i / f_n(X_i)` the statistic is
//!
//! ```text
//! T = (n l^d)^{-2} ∫_g [ sum_i L((x - X_i)/l) a_i ]^2 dx
//! ```
//!
//! The default evaluation expands the square into pairs; for a product `L`
//! and a box `g` each pair contributes a product of one-dimensional overlap
//! integrals of polynomials, which Gauss–Legendre integrates exactly. A tensor
//! midpoint rule is also available.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::additive::{AdditiveFit, EvaluationRegion};
use crate::error::{Error, Result};
use crate::kernels::{KernelConstants, ProductKernel};
use crate::quadrature::{midpoints, GaussLegendre, OuterRule};
use crate::smoothing::{WeightedResponses, DENSITY_FLOOR};
use crate::survival::CensoredSample;

/// Relative refinement tolerance for the midpoint evaluation of `T`.
pub const STATISTIC_REFINE_TOL: f64 = 1e-6;

/// `eps_i = delta_i psi(Z_i) / G_n(Z_i) - m_add(X_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualVector {
    pub eps_star: Vec<f64>,
}

impl ResidualVector {
    pub fn new(sample: &CensoredSample, responses: &[f64], fit: &AdditiveFit) -> Result<Self> {
        if responses.len() != sample.len() {
            return Err(Error::InvalidConfig("one response per observation required".into()));
        }
        let eps_star: Vec<f64> = responses
            .iter()
            .enumerate()
            .map(|(i, r)| r - fit.eval(sample.row(i)))
            .collect();
        if eps_star.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidConfig("non-finite residual".into()));
        }
        Ok(Self { eps_star })
    }

    pub fn len(&self) -> usize {
        self.eps_star.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eps_star.is_empty()
    }
}

/// Observations whose `L` window meets the weight box, with their weights
/// `a_i`.
struct ActiveSet {
    rows: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

fn active_set(
    sample: &CensoredSample,
    residuals: &ResidualVector,
    fhat_obs: &[f64],
    l: &ProductKernel,
    ell: f64,
    region: &EvaluationRegion,
) -> Result<ActiveSet> {
    let reach = l.radius() * ell;
    let mut rows = Vec::new();
    let mut weights = Vec::new();
    let mut bad = Vec::new();
    for i in 0..sample.len() {
        let x = sample.row(i);
        let touches = x
            .iter()
            .zip(region.g_lo.iter().zip(&region.g_hi))
            .all(|(v, (a, b))| *v + reach > *a && *v - reach < *b);
        if !touches {
            continue;
        }
        if !(fhat_obs[i] >= DENSITY_FLOOR) {
            bad.push(i);
            continue;
        }
        rows.push(x.to_vec());
        weights.push(residuals.eps_star[i] / fhat_obs[i]);
    }
    if !bad.is_empty() {
        return Err(Error::DensityFloorHit { indices: bad });
    }
    Ok(ActiveSet { rows, weights })
}

/// Test statistic with the requested outer rule.
pub fn test_statistic(
    sample: &CensoredSample,
    residuals: &ResidualVector,
    fhat_obs: &[f64],
    l: &ProductKernel,
    ell: f64,
    region: &EvaluationRegion,
    outer: OuterRule,
) -> Result<f64> {
    if !(ell > 0.0 && ell.is_finite()) {
        return Err(Error::InvalidConfig(format!("ell_n must be positive, got {ell}")));
    }
    if residuals.len() != sample.len() || fhat_obs.len() != sample.len() {
        return Err(Error::InvalidConfig("residuals and density values must match the sample".into()));
    }
    let active = active_set(sample, residuals, fhat_obs, l, ell, region)?;
    let n = sample.len();
    match outer {
        OuterRule::Exact => Ok(exact_statistic(&active, n, l, ell, region)),
        OuterRule::Midpoint { points } => {
            let coarse = midpoint_statistic(&active, n, l, ell, region, points);
            let fine = midpoint_statistic(&active, n, l, ell, region, 2 * points);
            let change = if fine == 0.0 {
                coarse.abs()
            } else {
                ((coarse - fine) / fine).abs()
            };
            if change > STATISTIC_REFINE_TOL {
                return Err(Error::GridTooCoarse {
                    what: "t_n_star".into(),
                    change,
                    tol: STATISTIC_REFINE_TOL,
                });
            }
            Ok(fine)
        }
    }
}

/// Midpoint evaluation without the refinement check.
pub fn test_statistic_on_grid(
    sample: &CensoredSample,
    residuals: &ResidualVector,
    fhat_obs: &[f64],
    l: &ProductKernel,
    ell: f64,
    region: &EvaluationRegion,
    points: usize,
) -> Result<f64> {
    let active = active_set(sample, residuals, fhat_obs, l, ell, region)?;
    Ok(midpoint_statistic(&active, sample.len(), l, ell, region, points))
}

fn exact_statistic(active: &ActiveSet, n: usize, l: &ProductKernel, ell: f64, region: &EvaluationRegion) -> f64 {
    let d = region.dim();
    let factor = &l.factor;
    let reach = factor.radius() * ell;
    // The overlap integrand is a polynomial of degree 2 deg(L).
    let gl = GaussLegendre::new(factor.degree() + 1);
    let overlap = |m: usize, xi: f64, xj: f64| -> f64 {
        let a = region.g_lo[m].max(xi - reach).max(xj - reach);
        let b = region.g_hi[m].min(xi + reach).min(xj + reach);
        gl.integrate(a, b, |x| factor.eval((x - xi) / ell) * factor.eval((x - xj) / ell))
    };

    let mut order: Vec<usize> = (0..active.rows.len()).collect();
    order.sort_by(|&a, &b| active.rows[a][0].total_cmp(&active.rows[b][0]));
    let mut acc = 0.0;
    for (pos, &i) in order.iter().enumerate() {
        let xi = &active.rows[i];
        let ai = active.weights[i];
        if ai == 0.0 {
            continue;
        }
        let mut diag = 1.0;
        for m in 0..d {
            diag *= overlap(m, xi[m], xi[m]);
        }
        acc += ai * ai * diag;
        for &j in &order[pos + 1..] {
            let xj = &active.rows[j];
            if xj[0] - xi[0] >= 2.0 * reach {
                break;
            }
            let aj = active.weights[j];
            if aj == 0.0 || (1..d).any(|m| (xj[m] - xi[m]).abs() >= 2.0 * reach) {
                continue;
            }
            let mut prod = 1.0;
            for m in 0..d {
                prod *= overlap(m, xi[m], xj[m]);
                if prod == 0.0 {
                    break;
                }
            }
            acc += 2.0 * ai * aj * prod;
        }
    }
    let scale = n as f64 * ell.powi(d as i32);
    // The pair expansion is a positive semidefinite quadratic form; rounding
    // can leave it a hair below zero.
    (acc / (scale * scale)).max(0.0)
}

fn midpoint_statistic(
    active: &ActiveSet,
    n: usize,
    l: &ProductKernel,
    ell: f64,
    region: &EvaluationRegion,
    points: usize,
) -> f64 {
    let d = region.dim();
    let axes: Vec<Vec<f64>> = (0..d).map(|m| midpoints(region.g_lo[m], region.g_hi[m], points)).collect();
    let cell: f64 = (0..d).map(|m| (region.g_hi[m] - region.g_lo[m]) / points as f64).product();
    let mut field = vec![0.0; points.pow(d as u32)];
    let reach = l.radius() * ell;
    let mut ranges = Vec::with_capacity(d);
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); d];
    for (row, &a) in active.rows.iter().zip(&active.weights) {
        if a == 0.0 {
            continue;
        }
        ranges.clear();
        for m in 0..d {
            let grid = &axes[m];
            let lo = grid.partition_point(|&g| g < row[m] - reach);
            let hi = grid.partition_point(|&g| g <= row[m] + reach);
            values[m].clear();
            values[m].extend(grid[lo..hi].iter().map(|&g| l.factor.eval((g - row[m]) / ell)));
            ranges.push((lo, hi));
        }
        if ranges.iter().any(|(lo, hi)| lo >= hi) {
            continue;
        }
        // Odometer over the product of per-axis windows.
        let mut idx: Vec<usize> = ranges.iter().map(|r| r.0).collect();
        'outer: loop {
            let mut flat = 0;
            let mut w = a;
            for m in 0..d {
                flat = flat * points + idx[m];
                w *= values[m][idx[m] - ranges[m].0];
            }
            field[flat] += w;
            let mut m = d;
            loop {
                if m == 0 {
                    break 'outer;
                }
                m -= 1;
                idx[m] += 1;
                if idx[m] < ranges[m].1 {
                    break;
                }
                idx[m] = ranges[m].0;
            }
        }
    }
    let scale = n as f64 * ell.powi(d as i32);
    field.iter().map(|v| v * v).sum::<f64>() * cell / (scale * scale)
}

/// Smooth of squared residuals with the weights of the full IPCW estimator.
#[derive(Debug, Clone)]
pub struct Sigma0Estimate {
    weighted: WeightedResponses,
    k3: ProductKernel,
    h1: f64,
}

impl Sigma0Estimate {
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        self.weighted.full(&self.k3, self.h1, x)
    }
}

pub fn estimate_sigma0_sq(
    sample: &CensoredSample,
    residuals: &ResidualVector,
    k3: &ProductKernel,
    h1: f64,
    fhat_obs: &[f64],
) -> Result<Sigma0Estimate> {
    let squared: Vec<f64> = residuals.eps_star.iter().map(|e| e * e).collect();
    Ok(Sigma0Estimate {
        weighted: WeightedResponses::new(sample, &squared, fhat_obs)?,
        k3: k3.clone(),
        h1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BvMode {
    Plugin,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct VarianceEstimates {
    pub B_hat: f64,
    pub V_hat: f64,
    pub mode: BvMode,
    /// Average of the conditional variance over the weight box.
    pub sigma0_sq_mean: f64,
    /// Conditional variance at the midpoint cells of the weight box.
    #[serde(skip)]
    pub sigma0_sq_grid: Vec<f64>,
}

/// Midpoint cells (row-major, `d` coordinates each) covering the weight box.
pub fn weight_box_cells(region: &EvaluationRegion, points: usize) -> (Vec<f64>, f64) {
    let d = region.dim();
    let axes: Vec<Vec<f64>> = (0..d).map(|m| midpoints(region.g_lo[m], region.g_hi[m], points)).collect();
    let total = points.pow(d as u32);
    let mut out = Vec::with_capacity(total * d);
    for flat in 0..total {
        let mut rem = flat;
        let mut coords = vec![0.0; d];
        for m in (0..d).rev() {
            coords[m] = axes[m][rem % points];
            rem /= points;
        }
        out.extend(coords);
    }
    let cell = (0..d).map(|m| (region.g_hi[m] - region.g_lo[m]) / points as f64).product();
    (out, cell)
}

/// `B = [∫ sigma0^2 / f g] ∫L^2`, `V = 2 [∫ sigma0^4 / f^2 g^2] ∫(L*L)^2`, by a
/// midpoint rule on the weight box.
pub fn b_v_from_functions<S, F>(
    sigma0_sq: S,
    density: F,
    region: &EvaluationRegion,
    constants: &KernelConstants,
    points: usize,
    mode: BvMode,
) -> Result<VarianceEstimates>
where
    S: Fn(&[f64]) -> Result<f64>,
    F: Fn(&[f64]) -> f64,
{
    let d = region.dim();
    let (cells, cell) = weight_box_cells(region, points);
    let mut b = 0.0;
    let mut v = 0.0;
    let mut grid = Vec::with_capacity(cells.len() / d);
    let mut bad = Vec::new();
    for (c, x) in cells.chunks_exact(d).enumerate() {
        let f = density(x);
        if !(f >= DENSITY_FLOOR) {
            bad.push(c);
            continue;
        }
        let s = sigma0_sq(x)?;
        grid.push(s);
        b += s / f;
        v += s * s / (f * f);
    }
    if !bad.is_empty() {
        return Err(Error::DensityFloorHit { indices: bad });
    }
    let b_hat = b * cell * constants.l2_norm_sq;
    let v_hat = 2.0 * v * cell * constants.conv_sq_integral;
    if !(v_hat > 0.0) {
        return Err(Error::NonpositiveVariance { b_hat, v_hat });
    }
    let sigma0_sq_mean = grid.iter().sum::<f64>() / grid.len() as f64;
    Ok(VarianceEstimates {
        B_hat: b_hat,
        V_hat: v_hat,
        mode,
        sigma0_sq_mean,
        sigma0_sq_grid: grid,
    })
}

/// Plug-in constants from the smoothed squared residuals and the density
/// estimate.
pub fn plugin_b_v<F: Fn(&[f64]) -> f64>(
    sigma0_sq: &Sigma0Estimate,
    f_hat: F,
    region: &EvaluationRegion,
    constants: &KernelConstants,
    points: usize,
) -> Result<VarianceEstimates> {
    b_v_from_functions(|x| sigma0_sq.eval(x), f_hat, region, constants, points, BvMode::Plugin)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct TestReport {
    pub t_n_star: f64,
    pub ell_n: f64,
    pub n: usize,
    pub d: usize,
    pub B_hat: f64,
    pub V_hat: f64,
    pub z: f64,
    pub p_value: f64,
    pub bv_mode: BvMode,
    #[serde(default)]
    pub provenance: serde_json::Value,
}

/// Upper-tail standard normal probability.
pub fn upper_tail(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// `z = (n l^{d/2} T - B l^{-d/2}) / sqrt(V)` and its upper-tail p-value.
pub fn standardize(t_n_star: f64, estimates: &VarianceEstimates, n: usize, d: usize, ell_n: f64) -> Result<TestReport> {
    let z = standardized_value(t_n_star, estimates.B_hat, estimates.V_hat, n, d, ell_n)?;
    Ok(TestReport {
        t_n_star,
        ell_n,
        n,
        d,
        B_hat: estimates.B_hat,
        V_hat: estimates.V_hat,
        z,
        p_value: upper_tail(z),
        bv_mode: estimates.mode,
        provenance: serde_json::Value::Null,
    })
}

#[allow(non_snake_case)]
pub fn standardized_value(t_n_star: f64, B: f64, V: f64, n: usize, d: usize, ell_n: f64) -> Result<f64> {
    if !(V > 0.0) {
        return Err(Error::NonpositiveVariance { b_hat: B, v_hat: V });
    }
    let half = ell_n.powf(d as f64 / 2.0);
    Ok((n as f64 * half * t_n_star - B / half) / V.sqrt())
}
