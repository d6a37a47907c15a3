//! Compactly supported polynomial kernels, their product extensions and the
//! constants `∫L²` and `∫(L*L)²` entering the centering and scaling of the
//! test statistic.
//!
//! Every one-dimensional kernel is a single polynomial on its support
//! `[-r, r]`: a base density (uniform, Epanechnikov or quartic) multiplied by
//! an even polynomial chosen so that the moments `1..order-1` vanish. Because
//! the kernels are polynomial pieces, all the integrals below are computed
//! exactly by Gauss–Legendre rules of modest size.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::GaussLegendre;

/// Base shape of a kernel before the higher-order multiplier is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Uniform,
    Epanechnikov,
    Quartic,
}

impl KernelFamily {
    /// Coefficients (ascending powers of `t`) of the base density on [-1, 1].
    fn base_coeffs(self) -> Vec<f64> {
        match self {
            KernelFamily::Uniform => vec![0.5],
            KernelFamily::Epanechnikov => vec![0.75, 0.0, -0.75],
            KernelFamily::Quartic => {
                let c = 15.0 / 16.0;
                vec![c, 0.0, -2.0 * c, 0.0, c]
            }
        }
    }

    /// Support radius used when none is given. The uniform kernel defaults to
    /// the unit-length window `[-1/2, 1/2]`.
    pub fn default_radius(self) -> f64 {
        match self {
            KernelFamily::Uniform => 0.5,
            _ => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            KernelFamily::Uniform => "uniform",
            KernelFamily::Epanechnikov => "epanechnikov",
            KernelFamily::Quartic => "quartic",
        }
    }
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "uniform" | "box" => Ok(KernelFamily::Uniform),
            "epanechnikov" | "epa" => Ok(KernelFamily::Epanechnikov),
            "quartic" | "biweight" => Ok(KernelFamily::Quartic),
            other => Err(Error::UnknownFamily(other.to_string())),
        }
    }
}

/// One-dimensional kernel `K(u) = p(u / r) / r` on `[-r, r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel1D {
    family: KernelFamily,
    order: u32,
    radius: f64,
    coeffs: Vec<f64>,
}

impl Kernel1D {
    /// Builds a kernel of the given even order on `[-radius, radius]`.
    pub fn new(family: KernelFamily, order: u32, radius: f64) -> Result<Self> {
        if order < 2 || !order.is_multiple_of(2) {
            return Err(Error::OrderInfeasible(format!(
                "kernel order must be an even integer >= 2, got {order}"
            )));
        }
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "kernel support radius must be positive, got {radius}"
            )));
        }
        let base = family.base_coeffs();
        let multiplier = order_multiplier(&base, (order / 2) as usize)?;
        let mut coeffs = vec![0.0; base.len() + 2 * (multiplier.len() - 1)];
        for (i, b) in base.iter().enumerate() {
            for (a, c) in multiplier.iter().enumerate() {
                coeffs[i + 2 * a] += b * c;
            }
        }
        Ok(Self {
            family,
            order,
            radius,
            coeffs,
        })
    }

    pub fn with_default_radius(family: KernelFamily, order: u32) -> Result<Self> {
        Self::new(family, order, family.default_radius())
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Polynomial degree of the kernel on its support.
    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    /// Descriptive name; higher-order constructions report
    /// `order_k_polynomial`.
    pub fn name(&self) -> String {
        if self.order == 2 {
            self.family.as_str().to_string()
        } else {
            format!("order_k_polynomial({}, k={})", self.family.as_str(), self.order)
        }
    }

    /// The uniform kernel jumps at its support edges; every other family is
    /// Lipschitz.
    pub fn is_lipschitz(&self) -> bool {
        self.family != KernelFamily::Uniform
    }

    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        let t = u / self.radius;
        if !(-1.0..=1.0).contains(&t) {
            return 0.0;
        }
        let mut acc = 0.0;
        for c in self.coeffs.iter().rev() {
            acc = acc * t + c;
        }
        acc / self.radius
    }

    /// `∫ u^j K(u) du`, evaluated in closed form.
    pub fn moment(&self, j: u32) -> f64 {
        let mut acc = 0.0;
        for (m, c) in self.coeffs.iter().enumerate() {
            let p = j as usize + m;
            if p.is_multiple_of(2) {
                acc += c * 2.0 / (p as f64 + 1.0);
            }
        }
        acc * self.radius.powi(j as i32)
    }

    /// Spec string such as `epanechnikov:k=4,r=1`.
    pub fn spec_string(&self) -> String {
        format!("{}:k={},r={}", self.family.as_str(), self.order, self.radius)
    }
}

/// Even polynomial `sum_a c_a t^{2a}` making `base * multiplier` a kernel of
/// order `2 * terms`: unit mass and vanishing even moments `2, .., 2(terms-1)`.
fn order_multiplier(base: &[f64], terms: usize) -> Result<Vec<f64>> {
    let base_moment = |p: usize| -> f64 {
        base.iter()
            .enumerate()
            .filter(|(m, _)| (p + m).is_multiple_of(2))
            .map(|(m, c)| c * 2.0 / ((p + m) as f64 + 1.0))
            .sum()
    };
    let mut a = vec![vec![0.0; terms + 1]; terms];
    for (b, row) in a.iter_mut().enumerate() {
        for (col, cell) in row.iter_mut().take(terms).enumerate() {
            *cell = base_moment(2 * (b + col));
        }
        row[terms] = if b == 0 { 1.0 } else { 0.0 };
    }
    solve_in_place(&mut a).ok_or_else(|| {
        Error::OrderInfeasible(format!("moment system singular for order {}", 2 * terms))
    })
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
fn solve_in_place(a: &mut [Vec<f64>]) -> Option<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            for k in col..=n {
                a[row][k] -= factor * a[col][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = a[row][n];
        for k in row + 1..n {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    Some(x)
}

/// Tensor product of one 1-D kernel over `dim` coordinates. A zero-dimensional
/// product is the constant 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductKernel {
    pub factor: Kernel1D,
    pub dim: usize,
}

impl ProductKernel {
    pub fn new(factor: Kernel1D, dim: usize) -> Self {
        Self { factor, dim }
    }

    #[inline]
    pub fn eval(&self, u: &[f64]) -> f64 {
        debug_assert_eq!(u.len(), self.dim);
        let mut acc = 1.0;
        for &v in u {
            acc *= self.factor.eval(v);
            if acc == 0.0 {
                return 0.0;
            }
        }
        acc
    }

    /// `K((x - c) / h)` without allocating the scaled argument.
    #[inline]
    pub fn eval_scaled(&self, x: &[f64], center: &[f64], h: f64) -> f64 {
        let mut acc = 1.0;
        for (a, b) in x.iter().zip(center) {
            acc *= self.factor.eval((a - b) / h);
            if acc == 0.0 {
                return 0.0;
            }
        }
        acc
    }

    pub fn radius(&self) -> f64 {
        self.factor.radius()
    }

    pub fn order(&self) -> u32 {
        self.factor.order()
    }
}

/// Parsed form of a kernel selection string `family[:k=<order>][,r=<radius>]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub order: Option<u32>,
    pub radius: Option<f64>,
}

impl KernelSpec {
    pub fn family(family: KernelFamily) -> Self {
        Self {
            family,
            order: None,
            radius: None,
        }
    }

    pub fn build(&self, default_order: u32) -> Result<Kernel1D> {
        Kernel1D::new(
            self.family,
            self.order.unwrap_or(default_order),
            self.radius.unwrap_or(self.family.default_radius()),
        )
    }
}

impl FromStr for KernelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, rest) = match s.split_once(':') {
            Some((n, r)) => (n, Some(r)),
            None => (s, None),
        };
        let mut spec = KernelSpec::family(name.parse()?);
        for kv in rest.into_iter().flat_map(|r| r.split(',')).filter(|p| !p.trim().is_empty()) {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("kernel option `{kv}` is not key=value")))?;
            let bad = || Error::InvalidConfig(format!("kernel option `{kv}` has an invalid value"));
            match key.trim() {
                "k" | "order" => spec.order = Some(value.trim().parse().map_err(|_| bad())?),
                "r" | "radius" => spec.radius = Some(value.trim().parse().map_err(|_| bad())?),
                other => {
                    return Err(Error::InvalidConfig(format!("unknown kernel option `{other}`")))
                }
            }
        }
        Ok(spec)
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.family.as_str())?;
        let mut sep = ':';
        if let Some(k) = self.order {
            write!(f, "{sep}k={k}")?;
            sep = ',';
        }
        if let Some(r) = self.radius {
            write!(f, "{sep}r={r}")?;
        }
        Ok(())
    }
}

/// The five kernels of the procedure.
///
/// * `l`: test-statistic kernel on R^d (order 2).
/// * `density`: kernel of the design density estimate, order `k_prime`.
/// * `k1`: kernel on the direction of interest, order `k`.
/// * `k2`: product of `k1` over the remaining `d - 1` coordinates.
/// * `k3`: product of `k1` over all `d` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSet {
    pub d: usize,
    pub k: u32,
    pub k_prime: u32,
    pub l: ProductKernel,
    pub density: ProductKernel,
    pub k1: Kernel1D,
    pub k2: ProductKernel,
    pub k3: ProductKernel,
}

/// Builds every kernel from one family, with the orders required by the
/// regularity conditions: `k` even, `k_prime` even and `k_prime > k d`.
pub fn make_kernel_set(d: usize, k: u32, k_prime: u32, family: KernelFamily) -> Result<KernelSet> {
    make_kernel_set_with(d, k, k_prime, &KernelSpec::family(family), None)
}

/// As [`make_kernel_set`], with an explicit support radius for the smoothing
/// kernels and an optional separate specification of the test kernel `L`.
pub fn make_kernel_set_with(
    d: usize,
    k: u32,
    k_prime: u32,
    smoothing: &KernelSpec,
    test_kernel: Option<&KernelSpec>,
) -> Result<KernelSet> {
    if d == 0 {
        return Err(Error::InvalidConfig("dimension must be at least 1".into()));
    }
    if k < 2 || !k.is_multiple_of(2) {
        return Err(Error::OrderInfeasible(format!(
            "k = {k}: smoothing kernels need an even order >= 2"
        )));
    }
    let kd = k as u64 * d as u64;
    if (k_prime as u64) <= kd || !k_prime.is_multiple_of(2) {
        return Err(Error::OrderInfeasible(format!(
            "k' = {k_prime} must be an even order exceeding k d = {kd}"
        )));
    }
    let radius = smoothing.radius.unwrap_or(smoothing.family.default_radius());
    let k1 = Kernel1D::new(smoothing.family, k, radius)?;
    let density_factor = Kernel1D::new(smoothing.family, k_prime, radius)?;
    let l_factor = match test_kernel {
        Some(spec) => spec.build(2)?,
        None => Kernel1D::new(smoothing.family, 2, radius)?,
    };
    Ok(KernelSet {
        d,
        k,
        k_prime,
        l: ProductKernel::new(l_factor, d),
        density: ProductKernel::new(density_factor, d),
        k2: ProductKernel::new(k1.clone(), d - 1),
        k3: ProductKernel::new(k1.clone(), d),
        k1,
    })
}

/// `∫ L²` and `∫ [∫ L(t) L(t - r) dt]² dr` for the test kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConstants {
    pub l2_norm_sq: f64,
    pub conv_sq_integral: f64,
}

/// Constants of a product kernel: the one-dimensional values raised to the
/// dimension. `nodes` is the Gauss–Legendre size per panel; the result is
/// rejected if doubling it moves either value by more than 1e-6 relative.
pub fn kernel_constants(l: &ProductKernel, nodes: usize) -> Result<KernelConstants> {
    let coarse = constants_1d(&l.factor, nodes);
    let fine = constants_1d(&l.factor, 2 * nodes);
    for (what, a, b) in [
        ("l2_norm_sq", coarse.0, fine.0),
        ("conv_sq_integral", coarse.1, fine.1),
    ] {
        let change = ((a - b) / b).abs();
        if change > 1e-6 {
            return Err(Error::GridTooCoarse {
                what: what.into(),
                change,
                tol: 1e-6,
            });
        }
    }
    let d = l.dim as i32;
    Ok(KernelConstants {
        l2_norm_sq: fine.0.powi(d),
        conv_sq_integral: fine.1.powi(d),
    })
}

fn constants_1d(kernel: &Kernel1D, nodes: usize) -> (f64, f64) {
    let gl = GaussLegendre::new(nodes);
    let r = kernel.radius();
    let l2 = gl.integrate(-r, r, |t| kernel.eval(t).powi(2));
    let conv = |s: f64| gl.integrate((-r).max(s - r), r.min(s + r), |t| kernel.eval(t) * kernel.eval(t - s));
    let conv_sq = gl.integrate_panels(-2.0 * r, 2.0 * r, &[0.0], |s| conv(s).powi(2));
    (l2, conv_sq)
}
