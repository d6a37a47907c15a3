//! Bandwidth schedules and the checkable part of the assumption set.

use serde::{Deserialize, Serialize};

use crate::additive::EvaluationRegion;
use crate::error::{Error, Result};
use crate::kernels::KernelSet;
use crate::smoothing::PsiSpec;
use crate::survival::{CensoredSample, StepSurvival};

/// Multiplicative constants of the bandwidth schedules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthConstants {
    /// Density bandwidth `h_n`.
    pub c1: f64,
    /// Direction-of-interest bandwidth `h_{1,n}` (and `h_{2,n}` unless
    /// `c2_nuisance` is set).
    pub c2: f64,
    /// Test-statistic bandwidth `l_n`.
    pub c3: f64,
    #[serde(default)]
    pub c2_nuisance: Option<f64>,
}

impl Default for BandwidthConstants {
    fn default() -> Self {
        Self {
            c1: 1.0,
            c2: 1.0,
            c3: 1.0,
            c2_nuisance: None,
        }
    }
}

/// Bandwidths at one sample size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bandwidths {
    pub h_n: f64,
    pub h1: f64,
    pub h2: f64,
    pub ell_n: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthPlan {
    pub d: usize,
    pub k: u32,
    pub k_prime: u32,
    pub constants: BandwidthConstants,
    pub gamma: f64,
}

/// Open interval of admissible exponents `gamma` for `l_n = c3 n^{-gamma}`:
/// `n l_n^d -> inf` needs `gamma < 1/d`, and
/// `n (log n / n)^{2k/(2k+1)} l_n^{d/2} -> 0` needs `gamma > 2 / (d (2k+1))`.
pub fn feasible_gamma_band(d: usize, k: u32) -> (f64, f64) {
    let d = d as f64;
    let k = k as f64;
    (2.0 / (d * (2.0 * k + 1.0)), 1.0 / d)
}

/// Lower end of the band implied by the exponent `k/(2k+1)`; it is never
/// below `1/d`, so that form of the condition leaves no admissible `gamma`.
pub fn printed_gamma_lower(d: usize, k: u32) -> f64 {
    let d = d as f64;
    let k = k as f64;
    2.0 * (k + 1.0) / (d * (2.0 * k + 1.0))
}

pub fn make_plan(
    d: usize,
    k: u32,
    k_prime: u32,
    constants: BandwidthConstants,
    gamma: Option<f64>,
) -> Result<BandwidthPlan> {
    if d == 0 {
        return Err(Error::InvalidConfig("dimension must be at least 1".into()));
    }
    if k < 1 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if (k_prime as u64) <= k as u64 * d as u64 {
        return Err(Error::OrderInfeasible(format!(
            "k' = {k_prime} must exceed k d = {}",
            k as u64 * d as u64
        )));
    }
    let all = [
        constants.c1,
        constants.c2,
        constants.c3,
        constants.c2_nuisance.unwrap_or(1.0),
    ];
    if all.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
        return Err(Error::InvalidConfig("bandwidth constants must be positive and finite".into()));
    }
    let (lo, hi) = feasible_gamma_band(d, k);
    let gamma = gamma.unwrap_or(0.5 * (lo + hi));
    if !(gamma > lo && gamma < hi) {
        return Err(Error::InfeasibleExponent { gamma, lo, hi });
    }
    Ok(BandwidthPlan {
        d,
        k,
        k_prime,
        constants,
        gamma,
    })
}

fn log_ratio(n: usize) -> f64 {
    let n = n as f64;
    n.ln() / n
}

impl BandwidthPlan {
    pub fn h_n(&self, n: usize) -> f64 {
        self.constants.c1 * log_ratio(n).powf(1.0 / (2.0 * self.k_prime as f64 + self.d as f64))
    }

    pub fn h1(&self, n: usize) -> f64 {
        self.constants.c2 * log_ratio(n).powf(1.0 / (2.0 * self.k as f64 + 1.0))
    }

    pub fn h2(&self, n: usize) -> f64 {
        self.constants.c2_nuisance.unwrap_or(self.constants.c2)
            * log_ratio(n).powf(1.0 / (2.0 * self.k as f64 + 1.0))
    }

    pub fn ell_n(&self, n: usize) -> f64 {
        self.constants.c3 * (n as f64).powf(-self.gamma)
    }

    pub fn at(&self, n: usize) -> Bandwidths {
        Bandwidths {
            h_n: self.h_n(n),
            h1: self.h1(n),
            h2: self.h2(n),
            ell_n: self.ell_n(n),
        }
    }

    /// `n l_n^d`, which must diverge.
    pub fn effective_count(&self, n: usize) -> f64 {
        n as f64 * self.ell_n(n).powi(self.d as i32)
    }

    /// `n (log n / n)^{2k/(2k+1)} l_n^{d/2}`, which must vanish.
    pub fn bias_ratio(&self, n: usize) -> f64 {
        let k = self.k as f64;
        n as f64 * log_ratio(n).powf(2.0 * k / (2.0 * k + 1.0)) * self.ell_n(n).powf(self.d as f64 / 2.0)
    }

    /// The same ratio with the exponent `k/(2k+1)`.
    pub fn bias_ratio_printed(&self, n: usize) -> f64 {
        let k = self.k as f64;
        n as f64 * log_ratio(n).powf(k / (2.0 * k + 1.0)) * self.ell_n(n).powf(self.d as f64 / 2.0)
    }

    /// Exponents of `n` (ignoring logarithms) in the two rate conditions, as
    /// used and in the alternative form; negative means the quantity vanishes.
    pub fn rate_report(&self) -> RateReport {
        let k = self.k as f64;
        let d = self.d as f64;
        let (lo, hi) = feasible_gamma_band(self.d, self.k);
        RateReport {
            gamma: self.gamma,
            band: (lo, hi),
            printed_band_lower: printed_gamma_lower(self.d, self.k),
            effective_count_exponent: 1.0 - self.gamma * d,
            bias_ratio_exponent: 1.0 / (2.0 * k + 1.0) - self.gamma * d / 2.0,
            bias_ratio_printed_exponent: (k + 1.0) / (2.0 * k + 1.0) - self.gamma * d / 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub gamma: f64,
    pub band: (f64, f64),
    pub printed_band_lower: f64,
    pub effective_count_exponent: f64,
    pub bias_ratio_exponent: f64,
    pub bias_ratio_printed_exponent: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CensoringMode {
    /// `psi` vanishes beyond some `tau0 < T_H`.
    #[serde(rename = "A_i")]
    Truncated,
    /// Moment condition on the censoring with `T_F < T_G`.
    #[serde(rename = "A_ii")]
    Moment,
}

/// Which censoring regime is declared, with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionSpec {
    pub mode: CensoringMode,
    pub tau0: Option<f64>,
    /// Exponent of the moment condition, in `(k/(2k+1), 1/2]`.
    pub p: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    /// Informational only; a well-posed configuration yields nothing else.
    Info,
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub clause: String,
    pub severity: Severity,
    pub message: String,
}

impl Diagnostic {
    fn warn(clause: &str, message: impl Into<String>) -> Self {
        Self {
            clause: clause.into(),
            severity: Severity::Warning,
            message: message.into(),
        }
    }

    fn info(clause: &str, message: impl Into<String>) -> Self {
        Self {
            clause: clause.into(),
            severity: Severity::Info,
            message: message.into(),
        }
    }
}

fn violated(clause: &str, message: impl Into<String>) -> Error {
    Error::AssumptionViolated {
        clause: clause.into(),
        message: message.into(),
    }
}

/// Everything the assumption checks look at.
#[derive(Debug, Clone, Copy)]
pub struct CheckInputs<'a> {
    pub sample: &'a CensoredSample,
    pub psi: &'a PsiSpec,
    pub g_n: &'a StepSurvival,
    pub kernels: &'a KernelSet,
    pub region: &'a EvaluationRegion,
    pub plan: &'a BandwidthPlan,
}

/// Verifies the data-checkable conditions. Hard failures are returned as
/// [`Error::AssumptionViolated`]; soft ones come back as warnings.
pub fn check_assumptions(spec: &AssumptionSpec, inputs: &CheckInputs<'_>) -> Result<Vec<Diagnostic>> {
    let mut out = Vec::new();
    let CheckInputs {
        sample,
        psi,
        g_n,
        kernels,
        region,
        plan,
    } = *inputs;
    let n = sample.len();

    match spec.mode {
        CensoringMode::Truncated => {
            let tau0 = match (spec.tau0.or(psi.tau0), psi.vanishes_beyond_tau0()) {
                (Some(t), true) => t,
                _ => return Err(violated("A(i)", "A(i) requires ψ=0 beyond τ0")),
            };
            if let Some(t) = psi.tau0 {
                if t > tau0 {
                    return Err(violated("A(i)", format!("ψ is nonzero up to {t}, beyond τ0 = {tau0}")));
                }
            }
            if !(g_n.eval(tau0) > 0.0) {
                return Err(violated("A(i)", "censoring exhausts mass before τ0"));
            }
            let max_z = sample.times().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if tau0 >= max_z {
                out.push(Diagnostic::warn(
                    "A(i)",
                    format!("τ0 = {tau0} is not below the largest observed time {max_z}"),
                ));
            }
        }
        CensoringMode::Moment => {
            let p = spec.p.ok_or_else(|| violated("A(ii)(a)", "A(ii) requires the exponent p"))?;
            let k = kernels.k as f64;
            if !(p > k / (2.0 * k + 1.0) && p <= 0.5) {
                return Err(violated(
                    "A(ii)(a)",
                    format!("p = {p} outside ({}, 1/2]", k / (2.0 * k + 1.0)),
                ));
            }
            // n^{2p-1} h^{-1} |log h| must diverge; both bandwidth sequences
            // are checked.
            for (name, h) in [("h_1n", plan.h1(n)), ("h_2n", plan.h2(n))] {
                let exponent = 2.0 * p - 1.0 + 1.0 / (2.0 * k + 1.0);
                if exponent <= 0.0 {
                    return Err(violated(
                        "A(ii)(c)",
                        format!("n^(2p-1) / {name} does not diverge (rate exponent {exponent})"),
                    ));
                }
                let value = (n as f64).powf(2.0 * p - 1.0) * h.ln().abs() / h;
                if value < 1.0 {
                    out.push(Diagnostic::warn(
                        "A(ii)(c)",
                        format!("n^(2p-1) |log {name}| / {name} = {value:.3} is still small at n = {n}"),
                    ));
                }
            }
            out.push(Diagnostic::info(
                "A(ii)(a-b)",
                "integrability and T_F < T_G concern population laws; not checkable from data",
            ));
        }
    }

    if let Some(m) = psi.bound {
        let observed = sample
            .times()
            .iter()
            .map(|&z| psi.eval(z).abs())
            .fold(0.0, f64::max);
        if observed > m {
            return Err(violated("C.3", format!("|ψ| reaches {observed} on the observed range, above M = {m}")));
        }
    } else {
        out.push(Diagnostic::warn("C.3", "no bound M declared for ψ"));
    }

    if region.dim() != sample.dim() {
        return Err(violated("G.1", "region dimension differs from the sample"));
    }
    for j in 0..region.dim() {
        if !(region.lo[j] < region.g_lo[j] && region.g_hi[j] < region.hi[j]) {
            return Err(violated("G.1", format!("weight box leaves C on axis {}", j + 1)));
        }
    }

    if kernels.k1.order() != kernels.k || kernels.k3.order() != kernels.k {
        return Err(violated("K.2", "K1 and K3 must have order k"));
    }
    if kernels.density.order() != kernels.k_prime || kernels.k_prime as usize <= kernels.k as usize * kernels.d {
        return Err(violated("K.2", "K must have order k' > k d"));
    }
    if !kernels.k1.is_lipschitz() {
        out.push(Diagnostic::warn("K.1", "K1 is not Lipschitz (uniform kernel)"));
    }

    let report = plan.rate_report();
    out.push(Diagnostic::info(
        "H.3",
        format!(
            "gamma = {:.4} in ({:.4}, {:.4}); with the exponent k/(2k+1) the lower end would be {:.4} and no gamma below 1/d qualifies",
            report.gamma, report.band.0, report.band.1, report.printed_band_lower
        ),
    ));
    Ok(out)
}
