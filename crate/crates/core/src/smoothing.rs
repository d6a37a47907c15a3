//! Kernel density estimation of the design and the two internally normalized
//! IPCW Nadaraya–Watson estimators: the full-dimensional one and the
//! directional one used by marginal integration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{Kernel1D, ProductKernel};
use crate::survival::CensoredSample;

/// Density values below this are treated as outside the region where the
/// design density is bounded away from zero.
pub const DENSITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiForm {
    /// `psi(y) = y 1{y <= tau0}`
    IdentityTruncated,
    /// `psi(y) = 1{y <= tau0}`
    IndicatorBelow,
    /// `psi(y) = y`
    Identity,
    /// `psi(y) = y - center`. Still additive in the regression, but with a
    /// much smaller IPCW variance when responses sit far from zero.
    Centered,
}

/// Transformation `psi` of the response whose conditional mean is estimated,
/// optionally multiplied by a constant `scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsiSpec {
    pub form: PsiForm,
    pub tau0: Option<f64>,
    /// Declared bound on `|psi|`.
    pub bound: Option<f64>,
    #[serde(default = "unit_scale")]
    pub scale: f64,
    /// Offset of the centered form.
    #[serde(default)]
    pub center: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl PsiSpec {
    pub fn new(form: PsiForm, tau0: Option<f64>, bound: Option<f64>) -> Result<Self> {
        if matches!(form, PsiForm::IdentityTruncated | PsiForm::IndicatorBelow) && tau0.is_none() {
            return Err(Error::InvalidConfig(format!(
                "psi form {form:?} requires tau0"
            )));
        }
        if let Some(t) = tau0 {
            if !t.is_finite() {
                return Err(Error::InvalidConfig("tau0 must be finite".into()));
            }
        }
        if let Some(m) = bound {
            if !(m > 0.0) {
                return Err(Error::InvalidConfig("psi bound M must be positive".into()));
            }
        }
        Ok(Self {
            form,
            tau0,
            bound,
            scale: 1.0,
            center: 0.0,
        })
    }

    pub fn identity() -> Self {
        Self {
            form: PsiForm::Identity,
            tau0: None,
            bound: None,
            scale: 1.0,
            center: 0.0,
        }
    }

    /// `psi(y) = y - center`.
    pub fn centered(center: f64) -> Self {
        Self {
            form: PsiForm::Centered,
            center,
            ..Self::identity()
        }
    }

    pub fn scaled(mut self, c: f64) -> Self {
        self.scale *= c;
        if let Some(m) = self.bound.as_mut() {
            *m *= c.abs();
        }
        self
    }

    #[inline]
    pub fn eval(&self, y: f64) -> f64 {
        let base = match self.form {
            PsiForm::Identity => y,
            PsiForm::Centered => y - self.center,
            PsiForm::IdentityTruncated => {
                if y <= self.tau0.unwrap_or(f64::INFINITY) {
                    y
                } else {
                    0.0
                }
            }
            PsiForm::IndicatorBelow => {
                if y <= self.tau0.unwrap_or(f64::INFINITY) {
                    1.0
                } else {
                    0.0
                }
            }
        };
        self.scale * base
    }

    /// Whether `psi` vanishes on `(tau0, inf)` by construction.
    pub fn vanishes_beyond_tau0(&self) -> bool {
        self.tau0.is_some() && !matches!(self.form, PsiForm::Identity)
    }
}

impl FromStr for PsiSpec {
    type Err = Error;

    /// `identity`, `centered:<c>`, `identity_truncated:<tau0>` or
    /// `indicator_below:<tau0>`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((a, b)) => (a.trim(), Some(b.trim())),
            None => (s.trim(), None),
        };
        let tau0 = arg
            .map(|a| {
                a.parse::<f64>()
                    .map_err(|_| Error::InvalidConfig(format!("psi threshold `{a}` is not a number")))
            })
            .transpose()?;
        let form = match name {
            "identity" => PsiForm::Identity,
            "centered" => {
                let c = tau0.ok_or_else(|| Error::InvalidConfig("centered psi needs `centered:<c>`".into()))?;
                return Ok(PsiSpec::centered(c));
            }
            "identity_truncated" | "truncated" => PsiForm::IdentityTruncated,
            "indicator_below" | "indicator" => PsiForm::IndicatorBelow,
            other => return Err(Error::InvalidConfig(format!("unknown psi form `{other}`"))),
        };
        PsiSpec::new(form, tau0, None)
    }
}

impl fmt::Display for PsiSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.form {
            PsiForm::Identity => "identity",
            PsiForm::IdentityTruncated => "identity_truncated",
            PsiForm::IndicatorBelow => "indicator_below",
            PsiForm::Centered => return write!(f, "centered:{}", self.center),
        };
        match self.tau0 {
            Some(t) => write!(f, "{name}:{t}"),
            None => write!(f, "{name}"),
        }
    }
}

/// `f_n(x) = (n h^d)^{-1} sum_j K((X_j - x) / h)`.
///
/// Higher-order kernels can make the estimate negative; it is left as is.
#[derive(Debug, Clone)]
pub struct DensityEstimate {
    kernel: ProductKernel,
    bandwidth: f64,
    d: usize,
    x: Vec<f64>,
}

impl DensityEstimate {
    pub fn kernel(&self) -> &ProductKernel {
        &self.kernel
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn eval(&self, point: &[f64]) -> f64 {
        let n = self.x.len() / self.d;
        let reach = self.kernel.radius() * self.bandwidth;
        let mut acc = 0.0;
        for row in self.x.chunks_exact(self.d) {
            if row.iter().zip(point).any(|(a, b)| (a - b).abs() > reach) {
                continue;
            }
            acc += self.kernel.eval_scaled(row, point, self.bandwidth);
        }
        acc / (n as f64 * self.bandwidth.powi(self.d as i32))
    }

    /// Estimate at every sample point.
    pub fn at_observations(&self) -> Vec<f64> {
        self.x.chunks_exact(self.d).map(|row| self.eval(row)).collect()
    }
}

pub fn density_estimate(sample: &CensoredSample, kernel: &ProductKernel, h_n: f64) -> Result<DensityEstimate> {
    if !(h_n > 0.0 && h_n.is_finite()) {
        return Err(Error::InvalidConfig(format!("bandwidth must be positive, got {h_n}")));
    }
    if kernel.dim != sample.dim() {
        return Err(Error::InvalidConfig(format!(
            "density kernel has dimension {}, sample has {}",
            kernel.dim,
            sample.dim()
        )));
    }
    Ok(DensityEstimate {
        kernel: kernel.clone(),
        bandwidth: h_n,
        d: sample.dim(),
        x: sample.covariates().to_vec(),
    })
}

/// Per-observation quantities shared by every internally normalized
/// estimator: `r_i / f_n(X_i)`, with observations whose density estimate falls
/// below [`DENSITY_FLOOR`] marked unusable.
#[derive(Debug, Clone)]
pub struct WeightedResponses {
    d: usize,
    x: Vec<f64>,
    coef: Vec<f64>,
    below_floor: Vec<bool>,
}

impl WeightedResponses {
    /// `responses[i] / fhat_obs[i]` for the observations of `sample`.
    pub fn new(sample: &CensoredSample, responses: &[f64], fhat_obs: &[f64]) -> Result<Self> {
        let n = sample.len();
        if responses.len() != n || fhat_obs.len() != n {
            return Err(Error::InvalidConfig(format!(
                "{} responses and {} density values for {} observations",
                responses.len(),
                fhat_obs.len(),
                n
            )));
        }
        let below_floor: Vec<bool> = fhat_obs.iter().map(|&f| !(f >= DENSITY_FLOOR)).collect();
        let coef = responses
            .iter()
            .zip(fhat_obs)
            .zip(&below_floor)
            .map(|((r, f), &low)| if low { 0.0 } else { r / f })
            .collect();
        Ok(Self {
            d: sample.dim(),
            x: sample.covariates().to_vec(),
            coef,
            below_floor,
        })
    }

    pub fn len(&self) -> usize {
        self.coef.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coef.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    #[inline]
    pub fn coef(&self, i: usize) -> f64 {
        self.coef[i]
    }

    #[inline]
    pub fn is_below_floor(&self, i: usize) -> bool {
        self.below_floor[i]
    }

    /// Same structure with the responses replaced.
    pub fn with_responses(&self, responses: &[f64], fhat_obs: &[f64]) -> Self {
        let coef = responses
            .iter()
            .zip(fhat_obs)
            .zip(&self.below_floor)
            .map(|((r, f), &low)| if low { 0.0 } else { r / f })
            .collect();
        Self {
            d: self.d,
            x: self.x.clone(),
            coef,
            below_floor: self.below_floor.clone(),
        }
    }

    /// `sum_i K3((x - X_i)/h1) coef_i / (n h1^d)`.
    pub fn full(&self, k3: &ProductKernel, h1: f64, point: &[f64]) -> Result<f64> {
        let n = self.len();
        let reach = k3.radius() * h1;
        let mut acc = 0.0;
        let mut bad = Vec::new();
        for i in 0..n {
            let row = self.row(i);
            if row.iter().zip(point).any(|(a, b)| (a - b).abs() > reach) {
                continue;
            }
            let w = k3.eval_scaled(point, row, h1);
            if w == 0.0 {
                continue;
            }
            if self.below_floor[i] {
                bad.push(i);
                continue;
            }
            acc += w * self.coef[i];
        }
        if !bad.is_empty() {
            return Err(Error::DensityFloorHit { indices: bad });
        }
        Ok(acc / (n as f64 * h1.powi(self.d as i32)))
    }

    /// Anisotropic estimator along axis `l` (0-based): `K1` on coordinate `l`
    /// at bandwidth `h1`, `K2` on the others at `h2`.
    #[allow(clippy::too_many_arguments)]
    pub fn directional(
        &self,
        k1: &Kernel1D,
        k2: &ProductKernel,
        h1: f64,
        h2: f64,
        l: usize,
        point: &[f64],
    ) -> Result<f64> {
        if l >= self.d {
            return Err(Error::AxisOutOfRange { axis: l, dim: self.d });
        }
        let n = self.len();
        let reach1 = k1.radius() * h1;
        let reach2 = k2.radius() * h2;
        let mut acc = 0.0;
        let mut bad = Vec::new();
        for i in 0..n {
            let row = self.row(i);
            if (row[l] - point[l]).abs() > reach1 {
                continue;
            }
            let mut w = k1.eval((point[l] - row[l]) / h1);
            for j in (0..self.d).filter(|&j| j != l) {
                if w == 0.0 || (row[j] - point[j]).abs() > reach2 {
                    w = 0.0;
                    break;
                }
                w *= k2.factor.eval((point[j] - row[j]) / h2);
            }
            if w == 0.0 {
                continue;
            }
            if self.below_floor[i] {
                bad.push(i);
                continue;
            }
            acc += w * self.coef[i];
        }
        if !bad.is_empty() {
            return Err(Error::DensityFloorHit { indices: bad });
        }
        Ok(acc / (n as f64 * h1 * h2.powi(self.d as i32 - 1)))
    }

    /// Full estimator on a batch of points (row-major, `d` per point).
    pub fn full_on_points(&self, k3: &ProductKernel, h1: f64, points: &[f64]) -> Result<Vec<f64>> {
        points.chunks_exact(self.d).map(|p| self.full(k3, h1, p)).collect()
    }
}

/// Full-dimensional IPCW estimator at one point.
pub fn nw_full(
    sample: &CensoredSample,
    responses: &[f64],
    f_hat: &DensityEstimate,
    k3: &ProductKernel,
    h1: f64,
    x: &[f64],
) -> Result<f64> {
    let w = WeightedResponses::new(sample, responses, &f_hat.at_observations())?;
    w.full(k3, h1, x)
}

/// Directional IPCW estimator along axis `l` (0-based) at one point.
#[allow(clippy::too_many_arguments)]
pub fn nw_directional(
    sample: &CensoredSample,
    responses: &[f64],
    f_hat: &DensityEstimate,
    k1: &Kernel1D,
    k2: &ProductKernel,
    h1: f64,
    h2: f64,
    l: usize,
    x: &[f64],
) -> Result<f64> {
    if !(h1 > 0.0 && h2 > 0.0) {
        return Err(Error::InvalidConfig("bandwidths must be positive".into()));
    }
    let w = WeightedResponses::new(sample, responses, &f_hat.at_observations())?;
    w.directional(k1, k2, h1, h2, l, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelFamily;
    use crate::survival::{ipcw_responses, kaplan_meier_censoring};
    use proptest::prelude::*;

    fn uniform_wide(dim: usize) -> ProductKernel {
        ProductKernel::new(Kernel1D::new(KernelFamily::Uniform, 2, 1.0).unwrap(), dim)
    }

    fn two_point() -> CensoredSample {
        CensoredSample::new(1, vec![0.0, 0.5], vec![1.0, 2.0], vec![1, 1]).unwrap()
    }

    #[test]
    fn psi_forms() {
        let t: PsiSpec = "identity_truncated:2.5".parse().unwrap();
        assert_eq!(t.eval(2.0), 2.0);
        assert_eq!(t.eval(3.0), 0.0);
        let i: PsiSpec = "indicator_below:1".parse().unwrap();
        assert_eq!(i.eval(0.5), 1.0);
        assert_eq!(i.eval(1.5), 0.0);
        assert_eq!(PsiSpec::identity().scaled(3.0).eval(2.0), 6.0);
        assert!("identity_truncated".parse::<PsiSpec>().is_err());
        assert_eq!(t.to_string(), "identity_truncated:2.5");
    }

    #[test]
    fn single_point_density() {
        let s = CensoredSample::new(1, vec![0.0], vec![1.0], vec![1]).unwrap();
        let k = ProductKernel::new(Kernel1D::with_default_radius(KernelFamily::Uniform, 2).unwrap(), 1);
        let f = density_estimate(&s, &k, 1.0).unwrap();
        assert_eq!(f.eval(&[0.0]), 1.0);
        assert_eq!(f.eval(&[0.75]), 0.0);
    }

    #[test]
    fn two_point_density() {
        let f = density_estimate(&two_point(), &uniform_wide(1), 1.0).unwrap();
        assert_eq!(f.eval(&[0.0]), 0.5);
        assert_eq!(f.at_observations(), vec![0.5, 0.5]);
    }

    #[test]
    fn two_point_regression_by_hand() {
        let s = two_point();
        let g = kaplan_meier_censoring(&s);
        let r = ipcw_responses(&s, &g, &PsiSpec::identity()).unwrap();
        let f = density_estimate(&s, &uniform_wide(1), 1.0).unwrap();
        // W_1(0) = W_2(0) = (1/2) / (2 * 1 * 1/2) = 1/2.
        let m = nw_full(&s, &r, &f, &uniform_wide(1), 1.0, &[0.0]).unwrap();
        assert!((m - 1.5).abs() < 1e-12);
        assert_eq!(nw_full(&s, &r, &f, &uniform_wide(1), 1.0, &[5.0]).unwrap(), 0.0);
    }

    #[test]
    fn directional_in_one_dimension_collapses_to_full() {
        let s = two_point();
        let r = vec![1.0, 2.0];
        let f = density_estimate(&s, &uniform_wide(1), 1.0).unwrap();
        let k1 = Kernel1D::new(KernelFamily::Uniform, 2, 1.0).unwrap();
        let k2 = ProductKernel::new(k1.clone(), 0);
        for x in [-0.3, 0.0, 0.2, 1.2] {
            let a = nw_directional(&s, &r, &f, &k1, &k2, 1.0, 0.7, 0, &[x]).unwrap();
            let b = nw_full(&s, &r, &f, &ProductKernel::new(k1.clone(), 1), 1.0, &[x]).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn directional_two_dimensional_hand_case() {
        // X_1 = (0, 0), X_2 = (0.5, 0.25); uniform [-1,1] factors (height 1/2);
        // f_n(X_i) = 2 * (1/4) / 2 = 1/4 for both points.
        let s = CensoredSample::new(2, vec![0.0, 0.0, 0.5, 0.25], vec![1.0, 2.0], vec![1, 1]).unwrap();
        let f = density_estimate(&s, &uniform_wide(2), 1.0).unwrap();
        assert_eq!(f.at_observations(), vec![0.25, 0.25]);
        let k1 = Kernel1D::new(KernelFamily::Uniform, 2, 1.0).unwrap();
        let k2 = ProductKernel::new(k1.clone(), 1);
        // At x = (0.2, 0.9): both within 1 on axis 0; on axis 1 |0.9-0|=0.9, |0.9-0.25|=0.65.
        // W^l_i = (1/2)(1/2) / (2 * 1 * 1 * 1/4) = 1/2, so the estimate is (1 + 2)/2.
        let v = nw_directional(&s, &[1.0, 2.0], &f, &k1, &k2, 1.0, 1.0, 0, &[0.2, 0.9]).unwrap();
        assert!((v - 1.5).abs() < 1e-12);
        // At x = (0.2, -0.9) the second point leaves the K2 window.
        let v = nw_directional(&s, &[1.0, 2.0], &f, &k1, &k2, 1.0, 1.0, 0, &[0.2, -0.9]).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        assert_eq!(
            nw_directional(&s, &[1.0, 2.0], &f, &k1, &k2, 1.0, 1.0, 2, &[0.2, -0.9]),
            Err(Error::AxisOutOfRange { axis: 2, dim: 2 })
        );
    }

    #[test]
    fn floor_hit_lists_offending_indices() {
        let s = CensoredSample::new(1, vec![0.0, 3.0], vec![1.0, 1.0], vec![1, 1]).unwrap();
        let w = WeightedResponses::new(&s, &[1.0, 1.0], &[0.5, 0.0]).unwrap();
        let k = uniform_wide(1);
        assert!(w.full(&k, 1.0, &[0.0]).is_ok());
        assert_eq!(w.full(&k, 1.0, &[2.5]), Err(Error::DensityFloorHit { indices: vec![1] }));
    }

    /// Classical internal NW estimator written out directly.
    fn internal_nw(s: &CensoredSample, psi: &PsiSpec, f: &DensityEstimate, k: &ProductKernel, h: f64, x: &[f64]) -> f64 {
        let n = s.len();
        let mut acc = 0.0;
        for i in 0..n {
            let w = k.eval_scaled(x, s.row(i), h);
            if w != 0.0 {
                acc += w * (psi.eval(s.times()[i]) / f.eval(s.row(i)));
            }
        }
        acc / (n as f64 * h.powi(s.dim() as i32))
    }

    fn sample_from(points: &[(f64, f64, f64)]) -> CensoredSample {
        let x: Vec<f64> = points.iter().flat_map(|p| [p.0, p.1]).collect();
        let z: Vec<f64> = points.iter().map(|p| p.2).collect();
        CensoredSample::new(2, x, z, vec![1; points.len()]).unwrap()
    }

    proptest! {
        #[test]
        fn uncensored_reduction_is_exact(
            pts in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.1f64..3.0), 3..25),
            x in (0.1f64..0.9, 0.1f64..0.9),
        ) {
            let s = sample_from(&pts);
            let psi = PsiSpec::identity();
            let r = ipcw_responses(&s, &kaplan_meier_censoring(&s), &psi).unwrap();
            let kq = ProductKernel::new(Kernel1D::with_default_radius(KernelFamily::Quartic, 2).unwrap(), 2);
            let f = density_estimate(&s, &kq, 0.8).unwrap();
            match nw_full(&s, &r, &f, &kq, 0.4, &[x.0, x.1]) {
                Ok(v) => prop_assert_eq!(v, internal_nw(&s, &psi, &f, &kq, 0.4, &[x.0, x.1])),
                Err(Error::DensityFloorHit { .. }) => {}
                Err(e) => prop_assert!(false, "{e}"),
            }
        }

        #[test]
        fn estimators_are_linear_in_responses(
            pts in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.1f64..3.0), 3..25),
            c in -5.0f64..5.0,
        ) {
            let s = sample_from(&pts);
            let k = ProductKernel::new(Kernel1D::with_default_radius(KernelFamily::Epanechnikov, 2).unwrap(), 2);
            let f = density_estimate(&s, &k, 2.0).unwrap();
            let r: Vec<f64> = s.times().to_vec();
            let rc: Vec<f64> = r.iter().map(|v| v * c).collect();
            let p = [0.5, 0.5];
            let a = nw_full(&s, &r, &f, &k, 0.5, &p).unwrap();
            let b = nw_full(&s, &rc, &f, &k, 0.5, &p).unwrap();
            prop_assert!((b - c * a).abs() <= 1e-10 * (1.0 + a.abs()));
            let k1 = k.factor.clone();
            let k2 = ProductKernel::new(k1.clone(), 1);
            let a = nw_directional(&s, &r, &f, &k1, &k2, 0.5, 0.3, 1, &p).unwrap();
            let b = nw_directional(&s, &rc, &f, &k1, &k2, 0.5, 0.3, 1, &p).unwrap();
            prop_assert!((b - c * a).abs() <= 1e-10 * (1.0 + a.abs()));
        }

        #[test]
        fn far_points_do_not_matter_with_frozen_density(
            pts in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.1f64..3.0), 3..20),
            shift in 0.0f64..5.0,
        ) {
            let mut pts = pts;
            pts.push((3.0, 3.0, 1.0));
            let s = sample_from(&pts);
            let fh = vec![0.7; s.len()];
            let r = s.times().to_vec();
            let w = WeightedResponses::new(&s, &r, &fh).unwrap();
            let mut moved = pts.clone();
            moved.last_mut().unwrap().0 = 3.0 + shift;
            let s2 = sample_from(&moved);
            let w2 = WeightedResponses::new(&s2, &r, &fh).unwrap();
            let k = ProductKernel::new(Kernel1D::with_default_radius(KernelFamily::Quartic, 2).unwrap(), 2);
            let p = [0.5, 0.5];
            prop_assert_eq!(w.full(&k, 0.4, &p).unwrap(), w2.full(&k, 0.4, &p).unwrap());
            let k2 = ProductKernel::new(k.factor.clone(), 1);
            prop_assert_eq!(
                w.directional(&k.factor, &k2, 0.4, 0.4, 0, &p).unwrap(),
                w2.directional(&k.factor, &k2, 0.4, 0.4, 0, &p).unwrap()
            );
        }

        #[test]
        fn directional_with_equal_bandwidths_matches_full(
            pts in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.1f64..3.0), 3..25),
            x in (0.0f64..1.0, 0.0f64..1.0),
            h in 0.2f64..1.0,
        ) {
            let s = sample_from(&pts);
            let k1 = Kernel1D::with_default_radius(KernelFamily::Epanechnikov, 4).unwrap();
            let k2 = ProductKernel::new(k1.clone(), 1);
            let k3 = ProductKernel::new(k1.clone(), 2);
            let fh: Vec<f64> = (0..s.len()).map(|i| 0.5 + 0.1 * i as f64).collect();
            let w = WeightedResponses::new(&s, s.times(), &fh).unwrap();
            let p = [x.0, x.1];
            for l in 0..2 {
                let a = w.directional(&k1, &k2, h, h, l, &p).unwrap();
                let b = w.full(&k3, h, &p).unwrap();
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }
}
