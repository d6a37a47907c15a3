//! End-to-end run on one sample: censoring estimate, IPCW responses, design
//! density, additive fit, test statistic and its standardization.

use serde::{Deserialize, Serialize};

use crate::additive::{additive_fit_spanning, AdditiveFit, EvaluationRegion, IntegrationDensities, WeightShape};
use crate::error::{Error, Result};
use crate::kernels::{kernel_constants, make_kernel_set_with, KernelFamily, KernelSet, KernelSpec};
use crate::plan::{
    check_assumptions, make_plan, AssumptionSpec, BandwidthConstants, BandwidthPlan, Bandwidths, CensoringMode,
    CheckInputs, Diagnostic,
};
use crate::quadrature::GridSpec;
use crate::smoothing::{density_estimate, PsiSpec, WeightedResponses};
use crate::survival::{ipcw_responses, kaplan_meier_censoring_with, CensoredSample, RiskCount, StepSurvival};
use crate::testing::{
    b_v_from_functions, estimate_sigma0_sq, plugin_b_v, standardize, test_statistic, BvMode, ResidualVector,
    TestReport, VarianceEstimates,
};

/// Truth used in place of the plug-in estimates of `B` and `V`.
pub trait VarianceOracle: Sync {
    /// `sigma0^2(x) = E[psi(Y)^2 / G(Y) | x] - m_psi(x)^2`.
    fn sigma0_sq(&self, psi: &PsiSpec, x: &[f64]) -> f64;
    /// Design density.
    fn density(&self, x: &[f64]) -> f64;
}

/// Every tuning choice of one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestConfig {
    /// Family (and optionally radius) of the smoothing kernels.
    pub kernel: KernelSpec,
    /// Test kernel `L`; defaults to the smoothing family with order 2.
    #[serde(default)]
    pub test_kernel: Option<KernelSpec>,
    pub k: u32,
    pub k_prime: u32,
    pub constants: BandwidthConstants,
    #[serde(default)]
    pub gamma: Option<f64>,
    /// Bandwidths used verbatim instead of the schedules.
    #[serde(default)]
    pub frozen_bandwidths: Option<Bandwidths>,
    pub psi: PsiSpec,
    pub assumptions: AssumptionSpec,
    pub region: EvaluationRegion,
    pub weight_shape: WeightShape,
    pub grid: GridSpec,
    pub bv_mode: BvMode,
    #[serde(default)]
    pub risk_count: RiskCount,
}

impl TestConfig {
    /// Defaults for covariates on `[0, 1]^d` with identity `psi`.
    pub fn unit_cube(d: usize) -> Self {
        Self {
            kernel: KernelSpec::family(KernelFamily::Epanechnikov),
            test_kernel: None,
            k: 2,
            k_prime: default_k_prime(d, 2),
            constants: BandwidthConstants {
                c2: 0.55,
                ..BandwidthConstants::default()
            },
            gamma: None,
            frozen_bandwidths: None,
            psi: PsiSpec::identity(),
            assumptions: AssumptionSpec {
                mode: CensoringMode::Moment,
                tau0: None,
                p: Some(0.5),
            },
            region: EvaluationRegion::new(vec![0.0; d], vec![1.0; d], vec![0.1; d], vec![0.9; d], 0.05)
                .expect("unit cube region is valid"),
            weight_shape: WeightShape::Uniform,
            grid: GridSpec::default(),
            bv_mode: BvMode::Plugin,
            risk_count: RiskCount::AtRisk,
        }
    }

    pub fn kernels(&self, d: usize) -> Result<KernelSet> {
        make_kernel_set_with(d, self.k, self.k_prime, &self.kernel, self.test_kernel.as_ref())
    }

    pub fn plan(&self, d: usize) -> Result<BandwidthPlan> {
        make_plan(d, self.k, self.k_prime, self.constants, self.gamma)
    }

    pub fn bandwidths(&self, d: usize, n: usize) -> Result<Bandwidths> {
        match self.frozen_bandwidths {
            Some(b) => {
                if [b.h_n, b.h1, b.h2, b.ell_n].iter().any(|h| !(h.is_finite() && *h > 0.0)) {
                    return Err(Error::InvalidConfig("frozen bandwidths must be positive".into()));
                }
                Ok(b)
            }
            None => Ok(self.plan(d)?.at(n)),
        }
    }

    /// Integration densities: the weight shape on the weight box.
    pub fn densities(&self) -> IntegrationDensities {
        let box_region = EvaluationRegion {
            lo: self.region.g_lo.clone(),
            hi: self.region.g_hi.clone(),
            g_lo: self.region.g_lo.clone(),
            g_hi: self.region.g_hi.clone(),
            margin: self.region.margin,
        };
        IntegrationDensities::on_region(&box_region, self.weight_shape)
    }
}

/// Smallest even `k'` exceeding `k d`.
pub fn default_k_prime(d: usize, k: u32) -> u32 {
    let kd = k * d as u32;
    kd + 2 - kd % 2
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: TestReport,
    pub fit: AdditiveFit,
    pub g_n: StepSurvival,
    pub bandwidths: Bandwidths,
    pub variance: VarianceEstimates,
    pub diagnostics: Vec<Diagnostic>,
}

/// Censoring estimate, IPCW responses, density and additive fit; shared by
/// the fit-only and the full runs.
pub struct FittedModel {
    pub g_n: StepSurvival,
    pub responses: Vec<f64>,
    pub fhat_obs: Vec<f64>,
    pub density: crate::smoothing::DensityEstimate,
    pub fit: AdditiveFit,
    pub kernels: KernelSet,
    pub bandwidths: Bandwidths,
    pub diagnostics: Vec<Diagnostic>,
}

pub fn fit_model(sample: &CensoredSample, config: &TestConfig) -> Result<FittedModel> {
    let d = sample.dim();
    if config.region.dim() != d {
        return Err(Error::InvalidConfig(format!(
            "region has dimension {}, sample has {d}",
            config.region.dim()
        )));
    }
    let kernels = config.kernels(d)?;
    let plan = config.plan(d)?;
    let bandwidths = config.bandwidths(d, sample.len())?;
    let g_n = kaplan_meier_censoring_with(sample, config.risk_count);
    let diagnostics = check_assumptions(
        &config.assumptions,
        &CheckInputs {
            sample,
            psi: &config.psi,
            g_n: &g_n,
            kernels: &kernels,
            region: &config.region,
            plan: &plan,
        },
    )?;
    let responses = ipcw_responses(sample, &g_n, &config.psi)?;
    let density = density_estimate(sample, &kernels.density, bandwidths.h_n)?;
    let fhat_obs = density.at_observations();
    let weighted = WeightedResponses::new(sample, &responses, &fhat_obs)?;
    // Residuals are needed wherever the test kernel reaches into the weight
    // box, so the curves extend that far past it.
    let reach = kernels.l.radius() * bandwidths.ell_n;
    let span: Vec<(f64, f64)> = (0..d)
        .map(|j| {
            let r = &config.region;
            ((r.g_lo[j] - reach).max(r.lo[j]), (r.g_hi[j] + reach).min(r.hi[j]))
        })
        .collect();
    let fit = additive_fit_spanning(&weighted, &kernels, &bandwidths, &config.densities(), &config.grid, &span)?;
    Ok(FittedModel {
        g_n,
        responses,
        fhat_obs,
        density,
        fit,
        kernels,
        bandwidths,
        diagnostics,
    })
}

pub fn run_pipeline(
    sample: &CensoredSample,
    config: &TestConfig,
    oracle: Option<&dyn VarianceOracle>,
) -> Result<PipelineOutput> {
    let fitted = fit_model(sample, config)?;
    let FittedModel {
        g_n,
        responses,
        fhat_obs,
        density,
        fit,
        kernels,
        bandwidths,
        diagnostics,
    } = fitted;
    let region = &config.region;
    let residuals = ResidualVector::new(sample, &responses, &fit)?;
    let t = test_statistic(
        sample,
        &residuals,
        &fhat_obs,
        &kernels.l,
        bandwidths.ell_n,
        region,
        config.grid.outer,
    )?;
    let constants = kernel_constants(&kernels.l, config.grid.nodes)?;
    let variance = match config.bv_mode {
        BvMode::Plugin => {
            let sigma = estimate_sigma0_sq(sample, &residuals, &kernels.k3, bandwidths.h1, &fhat_obs)?;
            plugin_b_v(&sigma, |x| density.eval(x), region, &constants, config.grid.box_points)?
        }
        BvMode::Oracle => {
            let oracle = oracle.ok_or_else(|| {
                Error::InvalidConfig("oracle B and V need the true model".into())
            })?;
            b_v_from_functions(
                |x| Ok(oracle.sigma0_sq(&config.psi, x)),
                |x| oracle.density(x),
                region,
                &constants,
                config.grid.box_points,
                BvMode::Oracle,
            )?
        }
    };
    let report = standardize(t, &variance, sample.len(), sample.dim(), bandwidths.ell_n)?;
    Ok(PipelineOutput {
        report,
        fit,
        g_n,
        bandwidths,
        variance,
        diagnostics,
    })
}

/// Largest deviation of `fit` from `truth` over a tensor grid of `points`
/// per axis on the weight box.
pub fn sup_error(fit: &AdditiveFit, truth: &AdditiveFit, region: &EvaluationRegion, points: usize) -> f64 {
    let d = region.dim();
    let axes: Vec<Vec<f64>> = (0..d)
        .map(|m| crate::quadrature::linspace(region.g_lo[m], region.g_hi[m], points))
        .collect();
    let total = points.pow(d as u32);
    let mut x = vec![0.0; d];
    let mut worst: f64 = 0.0;
    for flat in 0..total {
        let mut rem = flat;
        for m in (0..d).rev() {
            x[m] = axes[m][rem % points];
            rem /= points;
        }
        worst = worst.max((fit.eval(&x) - truth.eval(&x)).abs());
    }
    worst
}
