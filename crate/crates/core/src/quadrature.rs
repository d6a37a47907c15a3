//! Gauss–Legendre rules and the small amount of grid machinery shared by the
//! kernel constants, marginal integration and the test statistic.

use serde::{Deserialize, Serialize};

/// Nodes and weights of an `n`-point Gauss–Legendre rule on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    /// Newton iteration on the Legendre recurrence. Exact for polynomials of
    /// degree `2n - 1`.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes and weights on [-1, 1].
    pub fn nodes_weights(&self) -> (&[f64], &[f64]) {
        (&self.nodes, &self.weights)
    }

    /// Integral of `f` over `[a, b]`.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        if b <= a {
            return 0.0;
        }
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(mid + half * x);
        }
        acc * half
    }

    /// Integral over `[a, b]` split into panels at the given breakpoints.
    /// Breakpoints outside the interval are ignored.
    pub fn integrate_panels<F: FnMut(f64) -> f64>(
        &self,
        a: f64,
        b: f64,
        breaks: &[f64],
        mut f: F,
    ) -> f64 {
        if b <= a {
            return 0.0;
        }
        let mut cuts: Vec<f64> = breaks.iter().copied().filter(|&t| t > a && t < b).collect();
        cuts.sort_by(f64::total_cmp);
        let mut lo = a;
        let mut acc = 0.0;
        for c in cuts.into_iter().chain(std::iter::once(b)) {
            acc += self.integrate(lo, c, &mut f);
            lo = c;
        }
        acc
    }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Midpoint abscissae of `points` equal cells on `[lo, hi]`.
pub fn midpoints(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let step = (hi - lo) / points as f64;
    (0..points).map(|i| lo + (i as f64 + 0.5) * step).collect()
}

/// Equally spaced abscissae including both endpoints.
pub fn linspace(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![0.5 * (lo + hi)];
    }
    let step = (hi - lo) / (points - 1) as f64;
    (0..points)
        .map(|i| if i + 1 == points { hi } else { lo + i as f64 * step })
        .collect()
}

/// Resolution settings for every numerical integral in the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Gauss–Legendre nodes per panel for one-dimensional integrals.
    pub nodes: usize,
    /// Abscissae per axis on which component curves are tabulated.
    pub curve_points: usize,
    /// Midpoint cells per axis for integrals over the weight box (B, V).
    pub box_points: usize,
    /// Outer rule for the test statistic.
    pub outer: OuterRule,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            nodes: 64,
            curve_points: 101,
            box_points: 41,
            outer: OuterRule::Exact,
        }
    }
}

/// How the outer integral of the test statistic over the weight box is taken.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum OuterRule {
    /// Closed form through the pairwise expansion of the square; each
    /// one-dimensional overlap integral is a polynomial handled exactly.
    Exact,
    /// Tensor midpoint rule with `points` cells per axis, checked against a
    /// run at twice the resolution.
    Midpoint { points: usize },
}
