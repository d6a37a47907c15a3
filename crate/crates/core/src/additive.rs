//! Marginal integration of the directional IPCW estimator into additive
//! component curves, and the resulting additive fit.
//!
//! With product kernels and product integration densities every marginal
//! integral factorizes into one-dimensional integrals of a kernel against a
//! weight density. Those are integrated exactly (polynomial kernel times
//! polynomial density on the overlap interval), so the `d - 1` and `d`
//! dimensional integrals reduce to sums over observations of products of
//! per-axis factors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{Kernel1D, KernelSet};
use crate::plan::Bandwidths;
use crate::quadrature::{linspace, GaussLegendre, GridSpec};
use crate::smoothing::WeightedResponses;

/// Refinement tolerance for component curves and the constant term.
pub const COMPONENT_REFINE_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightShape {
    Uniform,
    /// `(1 - s^2)^4` rescaled to the interval; three bounded continuous
    /// derivatives and vanishing at both ends.
    SmoothBump,
}

/// One integration density `q_l` on a compact interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightDensity {
    pub shape: WeightShape,
    pub lo: f64,
    pub hi: f64,
}

impl WeightDensity {
    pub fn new(shape: WeightShape, lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::InvalidConfig(format!("weight density support [{lo}, {hi}] is empty")));
        }
        Ok(Self { shape, lo, hi })
    }

    pub fn eval(&self, u: f64) -> f64 {
        if u < self.lo || u > self.hi {
            return 0.0;
        }
        let len = self.hi - self.lo;
        match self.shape {
            WeightShape::Uniform => 1.0 / len,
            WeightShape::SmoothBump => {
                let s = 2.0 * (u - self.lo) / len - 1.0;
                (1.0 - s * s).powi(4) * (315.0 / 256.0) * 2.0 / len
            }
        }
    }

    /// `∫ h^{-1} K((u - c)/h) q(u) du`.
    fn smoothed_mass(&self, gl: &GaussLegendre, kernel: &Kernel1D, c: f64, h: f64) -> f64 {
        let reach = kernel.radius() * h;
        let a = self.lo.max(c - reach);
        let b = self.hi.min(c + reach);
        gl.integrate(a, b, |u| kernel.eval((u - c) / h) * self.eval(u)) / h
    }
}

/// Product integration density `q = q_1 x ... x q_d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrationDensities {
    pub axes: Vec<WeightDensity>,
}

impl IntegrationDensities {
    pub fn uniform_on(region: &EvaluationRegion) -> Self {
        Self::on_region(region, WeightShape::Uniform)
    }

    pub fn on_region(region: &EvaluationRegion, shape: WeightShape) -> Self {
        Self {
            axes: region
                .lo
                .iter()
                .zip(&region.hi)
                .map(|(&lo, &hi)| WeightDensity { shape, lo, hi })
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    /// `q(x)`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.axes.iter().zip(x).map(|(q, &v)| q.eval(v)).product()
    }

    /// `q_{-l}(x_{-l})` for a full-length point `x`.
    pub fn eval_without(&self, l: usize, x: &[f64]) -> f64 {
        self.axes
            .iter()
            .zip(x)
            .enumerate()
            .filter(|(j, _)| *j != l)
            .map(|(_, (q, &v))| q.eval(v))
            .product()
    }
}

/// Compact box `C = C_1 x ... x C_d` and the box on which the weight `g` is
/// the indicator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRegion {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub g_lo: Vec<f64>,
    pub g_hi: Vec<f64>,
    /// Margin `alpha` of the neighbourhood on which the design density is
    /// assumed positive.
    pub margin: f64,
}

impl EvaluationRegion {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, g_lo: Vec<f64>, g_hi: Vec<f64>, margin: f64) -> Result<Self> {
        let d = lo.len();
        if d == 0 || hi.len() != d || g_lo.len() != d || g_hi.len() != d {
            return Err(Error::InvalidConfig("region bounds must all have the same dimension".into()));
        }
        if !(margin > 0.0) {
            return Err(Error::InvalidConfig("region margin must be positive".into()));
        }
        for j in 0..d {
            if !(lo[j] < hi[j]) {
                return Err(Error::InvalidConfig(format!("region axis {} is empty", j + 1)));
            }
            if !(g_lo[j] < g_hi[j]) {
                return Err(Error::InvalidConfig(format!("weight box axis {} is empty", j + 1)));
            }
            if !(lo[j] < g_lo[j] && g_hi[j] < hi[j]) {
                return Err(Error::AssumptionViolated {
                    clause: "G.1".into(),
                    message: format!(
                        "weight box [{}, {}] on axis {} is not strictly inside [{}, {}]",
                        g_lo[j],
                        g_hi[j],
                        j + 1,
                        lo[j],
                        hi[j]
                    ),
                });
            }
        }
        Ok(Self {
            lo,
            hi,
            g_lo,
            g_hi,
            margin,
        })
    }

    /// Region `C` with the weight box obtained by trimming `fraction` of each
    /// side length from both ends.
    pub fn with_trimmed_weight(lo: Vec<f64>, hi: Vec<f64>, fraction: f64, margin: f64) -> Result<Self> {
        let g_lo = lo.iter().zip(&hi).map(|(a, b)| a + fraction * (b - a)).collect();
        let g_hi = lo.iter().zip(&hi).map(|(a, b)| b - fraction * (b - a)).collect();
        Self::new(lo, hi, g_lo, g_hi, margin)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn g(&self, x: &[f64]) -> f64 {
        let inside = x
            .iter()
            .zip(self.g_lo.iter().zip(&self.g_hi))
            .all(|(v, (a, b))| *v >= *a && *v <= *b);
        if inside {
            1.0
        } else {
            0.0
        }
    }

    pub fn weight_volume(&self) -> f64 {
        self.g_lo.iter().zip(&self.g_hi).map(|(a, b)| b - a).product()
    }

    /// Region with axes reordered as in [`crate::survival::CensoredSample::permute_axes`].
    pub fn permute_axes(&self, perm: &[usize]) -> Self {
        let p = |v: &Vec<f64>| perm.iter().map(|&i| v[i]).collect();
        Self {
            lo: p(&self.lo),
            hi: p(&self.hi),
            g_lo: p(&self.g_lo),
            g_hi: p(&self.g_hi),
            margin: self.margin,
        }
    }
}

/// Tabulated component `eta_l` with piecewise-linear interpolation; held
/// constant beyond the ends of its grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentCurve {
    pub axis: usize,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

impl ComponentCurve {
    pub fn new(axis: usize, grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if grid.is_empty() || grid.len() != values.len() {
            return Err(Error::InvalidConfig("component grid and values must be non-empty and equal length".into()));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidConfig("component grid must be strictly increasing".into()));
        }
        Ok(Self { axis, grid, values })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.grid.len();
        if x <= self.grid[0] {
            return self.values[0];
        }
        if x >= self.grid[n - 1] {
            return self.values[n - 1];
        }
        let k = self.grid.partition_point(|&g| g <= x);
        let (x0, x1) = (self.grid[k - 1], self.grid[k]);
        let (y0, y1) = (self.values[k - 1], self.values[k]);
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }

    /// `x_l,eta_hat_l` rows.
    pub fn to_csv(&self) -> String {
        let mut out = format!("x{},eta_hat_{}\n", self.axis + 1, self.axis + 1);
        for (x, v) in self.grid.iter().zip(&self.values) {
            out.push_str(&format!("{x},{v}\n"));
        }
        out
    }
}

/// `m_add(x) = mu_hat + sum_l eta_l(x_l)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditiveFit {
    pub mu_hat: f64,
    pub components: Vec<ComponentCurve>,
}

impl AdditiveFit {
    pub fn new(mu_hat: f64, components: Vec<ComponentCurve>) -> Result<Self> {
        if components.iter().enumerate().any(|(l, c)| c.axis != l) {
            return Err(Error::InvalidConfig("components must be listed in axis order".into()));
        }
        Ok(Self { mu_hat, components })
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut acc = self.mu_hat;
        for c in &self.components {
            acc += c.eval(x[c.axis]);
        }
        acc
    }
}

/// Marginal integrals of the directional and full estimators, with the
/// per-observation one-dimensional factors precomputed.
#[derive(Debug, Clone)]
pub struct MarginalIntegrator<'a> {
    weighted: &'a WeightedResponses,
    k1: Kernel1D,
    h1: f64,
    /// `[axis][i]`: `∫ h2^{-1} K2_1((u - X_ij)/h2) q_j(u) du`.
    nuisance: Vec<Vec<f64>>,
    /// `[axis][i]`: `∫ h1^{-1} K1((u - X_ij)/h1) q_j(u) du`.
    direction: Vec<Vec<f64>>,
    /// `[axis][i]`: the same with the factor of `K3`.
    full: Vec<Vec<f64>>,
}

impl<'a> MarginalIntegrator<'a> {
    pub fn new(
        weighted: &'a WeightedResponses,
        kernels: &KernelSet,
        bandwidths: &Bandwidths,
        densities: &IntegrationDensities,
        nodes: usize,
    ) -> Result<Self> {
        let d = weighted.dim();
        if densities.dim() != d || kernels.d != d {
            return Err(Error::InvalidConfig(format!(
                "dimension mismatch: sample {d}, kernels {}, densities {}",
                kernels.d,
                densities.dim()
            )));
        }
        let gl = GaussLegendre::new(nodes);
        let table = |kernel: &Kernel1D, h: f64| -> Vec<Vec<f64>> {
            (0..d)
                .map(|j| {
                    (0..weighted.len())
                        .map(|i| densities.axes[j].smoothed_mass(&gl, kernel, weighted.row(i)[j], h))
                        .collect()
                })
                .collect()
        };
        Ok(Self {
            weighted,
            k1: kernels.k1.clone(),
            h1: bandwidths.h1,
            nuisance: table(&kernels.k2.factor, bandwidths.h2),
            direction: table(&kernels.k1, bandwidths.h1),
            full: table(&kernels.k3.factor, bandwidths.h1),
        })
    }

    fn nuisance_product(&self, l: usize, i: usize) -> f64 {
        let mut p = 1.0;
        for (j, col) in self.nuisance.iter().enumerate() {
            if j != l {
                p *= col[i];
            }
        }
        p
    }

    /// `∫ m_l(x) q_{-l}(x_{-l}) dx_{-l}` at `x_l`.
    pub fn partial_mean(&self, l: usize, x_l: f64) -> Result<f64> {
        let w = self.weighted;
        let n = w.len();
        let reach = self.k1.radius() * self.h1;
        let mut acc = 0.0;
        let mut bad = Vec::new();
        for i in 0..n {
            let xi = w.row(i)[l];
            if (xi - x_l).abs() > reach {
                continue;
            }
            let k = self.k1.eval((x_l - xi) / self.h1);
            if k == 0.0 {
                continue;
            }
            let p = self.nuisance_product(l, i);
            if p == 0.0 {
                continue;
            }
            if w.is_below_floor(i) {
                bad.push(i);
                continue;
            }
            acc += k * p * w.coef(i);
        }
        if !bad.is_empty() {
            return Err(Error::DensityFloorHit { indices: bad });
        }
        Ok(acc / (n as f64 * self.h1))
    }

    /// `∫ m_l(x) q(x) dx`.
    pub fn total_mean(&self, l: usize) -> Result<f64> {
        self.product_sum(|i| self.direction[l][i] * self.nuisance_product(l, i))
    }

    /// `mu_hat = ∫ m(x) q(x) dx` for the full-dimensional estimator.
    pub fn constant_term(&self) -> Result<f64> {
        self.product_sum(|i| self.full.iter().map(|col| col[i]).product())
    }

    fn product_sum<F: Fn(usize) -> f64>(&self, factor: F) -> Result<f64> {
        let w = self.weighted;
        let mut acc = 0.0;
        let mut bad = Vec::new();
        for i in 0..w.len() {
            let p = factor(i);
            if p == 0.0 {
                continue;
            }
            if w.is_below_floor(i) {
                bad.push(i);
                continue;
            }
            acc += p * w.coef(i);
        }
        if !bad.is_empty() {
            return Err(Error::DensityFloorHit { indices: bad });
        }
        Ok(acc / w.len() as f64)
    }

    /// `eta_l(x_l)` evaluated directly, without tabulation.
    pub fn component_at(&self, l: usize, x_l: f64) -> Result<f64> {
        Ok(self.partial_mean(l, x_l)? - self.total_mean(l)?)
    }

    fn curve(&self, l: usize, grid: &[f64]) -> Result<ComponentCurve> {
        let total = self.total_mean(l)?;
        let values = grid
            .iter()
            .map(|&x| self.partial_mean(l, x).map(|v| v - total))
            .collect::<Result<Vec<_>>>()?;
        ComponentCurve::new(l, grid.to_vec(), values)
    }
}

fn check_refinement(what: &str, coarse: &[f64], fine: &[f64]) -> Result<()> {
    let change = coarse
        .iter()
        .zip(fine)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if change > COMPONENT_REFINE_TOL {
        return Err(Error::GridTooCoarse {
            what: what.into(),
            change,
            tol: COMPONENT_REFINE_TOL,
        });
    }
    Ok(())
}

/// Estimate of the `l`-th additive component (0-based axis) on a grid
/// spanning the support of `q_l`.
pub fn estimate_component(
    l: usize,
    weighted: &WeightedResponses,
    kernels: &KernelSet,
    bandwidths: &Bandwidths,
    densities: &IntegrationDensities,
    grid: &GridSpec,
) -> Result<ComponentCurve> {
    if l >= weighted.dim() {
        return Err(Error::AxisOutOfRange {
            axis: l,
            dim: weighted.dim(),
        });
    }
    let q = &densities.axes[l];
    let xs = linspace(q.lo, q.hi, grid.curve_points);
    let coarse = MarginalIntegrator::new(weighted, kernels, bandwidths, densities, grid.nodes)?;
    let fine = MarginalIntegrator::new(weighted, kernels, bandwidths, densities, 2 * grid.nodes)?;
    let c = coarse.curve(l, &xs)?;
    let f = fine.curve(l, &xs)?;
    check_refinement(&format!("component {}", l + 1), &c.values, &f.values)?;
    Ok(f)
}

/// Additive fit: constant term from the full estimator and one marginal
/// integration curve per axis, tabulated on the support of `q_l`.
pub fn additive_fit(
    weighted: &WeightedResponses,
    kernels: &KernelSet,
    bandwidths: &Bandwidths,
    densities: &IntegrationDensities,
    grid: &GridSpec,
) -> Result<AdditiveFit> {
    let span: Vec<(f64, f64)> = densities.axes.iter().map(|q| (q.lo, q.hi)).collect();
    additive_fit_spanning(weighted, kernels, bandwidths, densities, grid, &span)
}

/// As [`additive_fit`], with the curves tabulated on `span[l]` instead. The
/// components are defined off the support of `q_l` too; only their centering
/// refers to it.
pub fn additive_fit_spanning(
    weighted: &WeightedResponses,
    kernels: &KernelSet,
    bandwidths: &Bandwidths,
    densities: &IntegrationDensities,
    grid: &GridSpec,
    span: &[(f64, f64)],
) -> Result<AdditiveFit> {
    let d = weighted.dim();
    if span.len() != d {
        return Err(Error::InvalidConfig(format!("{} curve spans for dimension {d}", span.len())));
    }
    let coarse = MarginalIntegrator::new(weighted, kernels, bandwidths, densities, grid.nodes)?;
    let fine = MarginalIntegrator::new(weighted, kernels, bandwidths, densities, 2 * grid.nodes)?;
    let mu_coarse = coarse.constant_term()?;
    let mu_hat = fine.constant_term()?;
    check_refinement("mu_hat", &[mu_coarse], &[mu_hat])?;
    let mut components = Vec::with_capacity(d);
    for (l, &(lo, hi)) in span.iter().enumerate() {
        let xs = linspace(lo, hi, grid.curve_points);
        let c = coarse.curve(l, &xs)?;
        let f = fine.curve(l, &xs)?;
        check_refinement(&format!("component {}", l + 1), &c.values, &f.values)?;
        components.push(f);
    }
    AdditiveFit::new(mu_hat, components)
}
