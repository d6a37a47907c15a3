//! Censored samples from known additive-plus-interaction truths, and Monte
//! Carlo studies of the standardized statistic.

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::additive::{AdditiveFit, ComponentCurve};
use crate::error::{Error, Result};
use crate::pipeline::{run_pipeline, sup_error, PipelineOutput, TestConfig, VarianceOracle};
use crate::quadrature::{linspace, GaussLegendre};
use crate::smoothing::{PsiForm, PsiSpec};
use crate::survival::CensoredSample;
use crate::testing::upper_tail;

/// Tolerance of the centering check `E m_l(X_l) = 0`.
pub const CENTERING_TOL: f64 = 1e-6;

/// Largest share of replicates allowed to fail before a study is abandoned.
pub const MAX_FAILURE_SHARE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ComponentFn {
    /// `slope (x - center)`
    Linear { slope: f64, center: f64 },
    /// `amplitude sin(2 pi frequency x)`
    Sine { amplitude: f64, frequency: f64 },
    Zero,
}

impl ComponentFn {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            ComponentFn::Linear { slope, center } => slope * (x - center),
            ComponentFn::Sine { amplitude, frequency } => {
                amplitude * (2.0 * std::f64::consts::PI * frequency * x).sin()
            }
            ComponentFn::Zero => 0.0,
        }
    }
}

/// `theta prod_{j in axes} (x_j - center)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub theta: f64,
    pub axes: Vec<usize>,
    pub center: f64,
}

impl Interaction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.theta * self.axes.iter().map(|&j| x[j] - self.center).product::<f64>()
    }
}

/// Gaussian noise with standard deviation `sd`, truncated to
/// `[-truncation sd, truncation sd]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseLaw {
    pub sd: f64,
    pub truncation: f64,
}

impl NoiseLaw {
    fn half_width(&self) -> f64 {
        self.sd * self.truncation
    }

    fn density(&self, e: f64) -> f64 {
        if self.sd == 0.0 || e.abs() > self.half_width() {
            return 0.0;
        }
        let mass = 1.0 - 2.0 * upper_tail(self.truncation);
        (-0.5 * (e / self.sd).powi(2)).exp() / (self.sd * (2.0 * std::f64::consts::PI).sqrt() * mass)
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.sd == 0.0 {
            return 0.0;
        }
        loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= self.truncation {
                return self.sd * z;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CensoringLaw {
    /// `C = +inf`.
    None,
    /// `C ~ Exp(rate)`, `G(t) = exp(-rate t)` for `t >= 0`.
    Exponential { rate: f64 },
}

impl CensoringLaw {
    /// `G(t) = P(C > t)`.
    pub fn survival(&self, t: f64) -> f64 {
        match *self {
            CensoringLaw::None => 1.0,
            CensoringLaw::Exponential { rate } => (-rate * t.max(0.0)).exp(),
        }
    }
}

/// `Y = mu + sum_l m_l(X_l) + interaction(X) + e` with `X` uniform on a box,
/// `e` independent truncated Gaussian noise and `C` independent of `(X, Y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrueModel {
    pub d: usize,
    pub mu: f64,
    pub components: Vec<ComponentFn>,
    #[serde(default)]
    pub interaction: Option<Interaction>,
    pub noise: NoiseLaw,
    pub covariate_lo: Vec<f64>,
    pub covariate_hi: Vec<f64>,
    pub censoring: CensoringLaw,
}

const TRUTH_NODES: usize = 48;

impl TrueModel {
    /// `d = 2`, `m_1(x) = x - 1/2`, `m_2(x) = sin(2 pi x) / 2`, `X` uniform on
    /// the unit square, noise sd 0.5 truncated at two standard deviations and
    /// exponential censoring with the given rate. `theta` scales the
    /// interaction `(x_1 - 1/2)(x_2 - 1/2)`.
    pub fn default_null(mu: f64, rate: f64, theta: f64) -> Self {
        Self {
            d: 2,
            mu,
            components: vec![
                ComponentFn::Linear { slope: 1.0, center: 0.5 },
                ComponentFn::Sine {
                    amplitude: 0.5,
                    frequency: 1.0,
                },
            ],
            interaction: (theta != 0.0).then(|| Interaction {
                theta,
                axes: vec![0, 1],
                center: 0.5,
            }),
            noise: NoiseLaw { sd: 0.5, truncation: 2.0 },
            covariate_lo: vec![0.0; 2],
            covariate_hi: vec![1.0; 2],
            censoring: CensoringLaw::Exponential { rate },
        }
    }

    pub fn with_theta(&self, theta: f64) -> Self {
        let mut m = self.clone();
        m.interaction = match &self.interaction {
            _ if theta == 0.0 => None,
            Some(i) => Some(Interaction { theta, ..i.clone() }),
            None => Some(Interaction {
                theta,
                axes: (0..self.d.min(2)).collect(),
                center: 0.5,
            }),
        };
        m
    }

    /// Checks shapes, the law parameters and the centering of every component
    /// under the covariate law.
    pub fn validate(&self) -> Result<()> {
        let d = self.d;
        if d == 0 || self.components.len() != d || self.covariate_lo.len() != d || self.covariate_hi.len() != d {
            return Err(Error::InvalidConfig("model needs d components and d covariate bounds".into()));
        }
        if (0..d).any(|j| !(self.covariate_lo[j] < self.covariate_hi[j])) {
            return Err(Error::InvalidConfig("covariate box is empty".into()));
        }
        if !(self.noise.sd >= 0.0 && self.noise.truncation > 0.0) {
            return Err(Error::InvalidConfig("noise sd must be >= 0 and truncation > 0".into()));
        }
        if let CensoringLaw::Exponential { rate } = self.censoring {
            if !(rate > 0.0 && rate.is_finite()) {
                return Err(Error::InvalidConfig("censoring rate must be positive".into()));
            }
        }
        if let Some(i) = &self.interaction {
            if i.axes.iter().any(|&j| j >= d) {
                return Err(Error::InvalidConfig("interaction axis out of range".into()));
            }
        }
        let gl = GaussLegendre::new(TRUTH_NODES);
        for (l, m) in self.components.iter().enumerate() {
            let (a, b) = (self.covariate_lo[l], self.covariate_hi[l]);
            // Panels keep the rule accurate for oscillating components.
            let breaks = linspace(a, b, 9);
            let mean = gl.integrate_panels(a, b, &breaks[1..8], |x| m.eval(x)) / (b - a);
            if mean.abs() > CENTERING_TOL {
                return Err(Error::AssumptionViolated {
                    clause: "identifiability".into(),
                    message: format!("E m_{}(X_{}) = {mean:e}, not 0", l + 1, l + 1),
                });
            }
        }
        Ok(())
    }

    /// Regression function without noise.
    pub fn signal(&self, x: &[f64]) -> f64 {
        let additive: f64 = self.components.iter().zip(x).map(|(m, &v)| m.eval(v)).sum();
        self.mu + additive + self.interaction.as_ref().map_or(0.0, |i| i.eval(x))
    }

    fn noise_expectation<F: Fn(f64) -> f64>(&self, center: f64, h: F) -> f64 {
        if self.noise.sd == 0.0 {
            return h(center);
        }
        let w = self.noise.half_width();
        let gl = GaussLegendre::new(TRUTH_NODES);
        let breaks = linspace(-w, w, 9);
        gl.integrate_panels(-w, w, &breaks[1..8], |e| h(center + e) * self.noise.density(e))
    }

    /// `m_psi(x) = E[psi(Y) | X = x]`.
    pub fn m_psi(&self, psi: &PsiSpec, x: &[f64]) -> f64 {
        let s = self.signal(x);
        // Symmetric noise.
        match psi.form {
            PsiForm::Identity => return psi.scale * s,
            PsiForm::Centered => return psi.scale * (s - psi.center),
            _ => {}
        }
        self.noise_expectation(s, |y| psi.eval(y))
    }

    /// `E[psi(Y)^2 / G(Y) | X = x] - m_psi(x)^2`.
    pub fn sigma0_sq_at(&self, psi: &PsiSpec, x: &[f64]) -> f64 {
        let s = self.signal(x);
        let second = self.noise_expectation(s, |y| {
            let p = psi.eval(y);
            if p == 0.0 {
                0.0
            } else {
                p * p / self.censoring.survival(y)
            }
        });
        let m = self.m_psi(psi, x);
        second - m * m
    }

    pub fn design_density(&self, x: &[f64]) -> f64 {
        let inside = x
            .iter()
            .zip(self.covariate_lo.iter().zip(&self.covariate_hi))
            .all(|(v, (a, b))| v >= a && v <= b);
        if inside {
            1.0 / self.volume()
        } else {
            0.0
        }
    }

    fn volume(&self) -> f64 {
        self.covariate_lo.iter().zip(&self.covariate_hi).map(|(a, b)| b - a).product()
    }

    /// Expectation over the covariate law by a tensor Gauss–Legendre rule.
    fn covariate_expectation<F: Fn(&[f64]) -> f64>(&self, nodes: usize, f: F) -> f64 {
        let d = self.d;
        let gl = GaussLegendre::new(nodes);
        let mut acc = 0.0;
        let mut idx = vec![0usize; d];
        let mut x = vec![0.0; d];
        let total = nodes.pow(d as u32);
        let (t, w) = gl.nodes_weights();
        for _ in 0..total {
            let mut weight = 1.0;
            for j in 0..d {
                let (a, b) = (self.covariate_lo[j], self.covariate_hi[j]);
                x[j] = 0.5 * (a + b) + 0.5 * (b - a) * t[idx[j]];
                weight *= 0.5 * w[idx[j]];
            }
            acc += weight * f(&x);
            for j in 0..d {
                idx[j] += 1;
                if idx[j] < nodes {
                    break;
                }
                idx[j] = 0;
            }
        }
        acc
    }

    /// `P(delta = 1) = E G(Y)`.
    pub fn uncensored_probability(&self) -> f64 {
        if self.censoring == CensoringLaw::None {
            return 1.0;
        }
        let nodes = if self.d <= 2 { 24 } else { 8 };
        self.covariate_expectation(nodes, |x| {
            self.noise_expectation(self.signal(x), |y| self.censoring.survival(y))
        })
    }

    /// Exponential rate giving censoring probability `target`, by bisection.
    pub fn calibrate_censoring(&self, target: f64) -> Result<f64> {
        if !(target > 0.0 && target < 1.0) {
            return Err(Error::InvalidConfig("target censoring rate must be in (0, 1)".into()));
        }
        let rate_of = |rate: f64| {
            let mut m = self.clone();
            m.censoring = CensoringLaw::Exponential { rate };
            1.0 - m.uncensored_probability()
        };
        let (mut lo, mut hi) = (0.0, 1.0);
        while rate_of(hi) < target {
            hi *= 2.0;
            if hi > 1e6 {
                return Err(Error::InvalidConfig(format!(
                    "censoring rate {target} is unreachable (responses are mostly negative)"
                )));
            }
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if rate_of(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Additive part of `m_psi` obtained by marginal integration against the
    /// integration densities of `config`, tabulated on the weight box.
    pub fn additive_truth(&self, config: &TestConfig, points: usize) -> Result<AdditiveFit> {
        let d = self.d;
        let q = config.densities();
        let psi = &config.psi;
        let gl = GaussLegendre::new(24);
        let (t, w) = gl.nodes_weights();
        // Tensor rule for q over all axes except `skip`.
        let integrate = |skip: Option<usize>, fixed: f64| -> f64 {
            let free: Vec<usize> = (0..d).filter(|&j| Some(j) != skip).collect();
            let mut idx = vec![0usize; free.len()];
            let mut x = vec![0.0; d];
            if let Some(l) = skip {
                x[l] = fixed;
            }
            let total = t.len().pow(free.len() as u32);
            let mut acc = 0.0;
            for _ in 0..total {
                let mut weight = 1.0;
                for (k, &j) in free.iter().enumerate() {
                    let (a, b) = (q.axes[j].lo, q.axes[j].hi);
                    x[j] = 0.5 * (a + b) + 0.5 * (b - a) * t[idx[k]];
                    weight *= 0.5 * (b - a) * w[idx[k]] * q.axes[j].eval(x[j]);
                }
                acc += weight * self.m_psi(psi, &x);
                for slot in idx.iter_mut() {
                    *slot += 1;
                    if *slot < t.len() {
                        break;
                    }
                    *slot = 0;
                }
            }
            acc
        };
        let mu = integrate(None, 0.0);
        let mut components = Vec::with_capacity(d);
        for l in 0..d {
            let grid = linspace(config.region.g_lo[l], config.region.g_hi[l], points);
            let values = grid.iter().map(|&v| integrate(Some(l), v) - mu).collect();
            components.push(ComponentCurve::new(l, grid, values)?);
        }
        AdditiveFit::new(mu, components)
    }
}

impl VarianceOracle for TrueModel {
    fn sigma0_sq(&self, psi: &PsiSpec, x: &[f64]) -> f64 {
        self.sigma0_sq_at(psi, x)
    }

    fn density(&self, x: &[f64]) -> f64 {
        self.design_density(x)
    }
}

pub fn draw_sample(model: &TrueModel, n: usize, seed: u64) -> Result<CensoredSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_sample_with(model, n, &mut rng)
}

pub fn draw_sample_with<R: Rng + ?Sized>(model: &TrueModel, n: usize, rng: &mut R) -> Result<CensoredSample> {
    model.validate()?;
    let d = model.d;
    let exp = match model.censoring {
        CensoringLaw::Exponential { rate } => Some(Exp::new(rate).map_err(|e| Error::InvalidConfig(e.to_string()))?),
        CensoringLaw::None => None,
    };
    let mut x = Vec::with_capacity(n * d);
    let mut z = Vec::with_capacity(n);
    let mut delta = Vec::with_capacity(n);
    let mut row = vec![0.0; d];
    for _ in 0..n {
        for j in 0..d {
            row[j] = model.covariate_lo[j] + (model.covariate_hi[j] - model.covariate_lo[j]) * rng.random::<f64>();
        }
        let y = model.signal(&row) + model.noise.draw(rng);
        let c = exp.map_or(f64::INFINITY, |e| e.sample(rng));
        x.extend_from_slice(&row);
        z.push(y.min(c));
        delta.push(u8::from(y <= c));
    }
    CensoredSample::new(d, x, z, delta)
}

/// Generator of replicate `rep`: the master seed with the replicate index as
/// the stream, so every replicate is reproducible on its own.
pub fn replicate_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub model: TrueModel,
    pub n: usize,
    pub replications: usize,
    pub seed: u64,
    pub test: TestConfig,
    /// Grid points per axis for the sup-norm error of the fit.
    #[serde(default = "default_sup_points")]
    pub sup_points: usize,
}

fn default_sup_points() -> usize {
    21
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.replications == 0 {
            return Err(Error::InvalidConfig("at least one replication required".into()));
        }
        if self.n < 2 {
            return Err(Error::InvalidConfig("n must be at least 2".into()));
        }
        if self.test.region.dim() != self.model.d {
            return Err(Error::InvalidConfig("region and model dimensions differ".into()));
        }
        if self.sup_points < 2 {
            return Err(Error::InvalidConfig("sup_points must be at least 2".into()));
        }
        self.test.kernels(self.model.d)?;
        self.test.plan(self.model.d)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub t_n_star: f64,
    pub z: f64,
    pub p_value: f64,
    pub B_hat: f64,
    pub V_hat: f64,
    pub sup_error: f64,
    pub censoring_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub replicates: usize,
    pub failures: usize,
    pub mean_z: f64,
    pub var_z: f64,
    pub rejection_rate: f64,
    pub ks_distance: f64,
    pub mean_sup_error: f64,
    pub mean_t_n_star: f64,
    pub mean_censoring_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloResult {
    pub rows: Vec<ReplicateRow>,
    pub summary: MonteCarloSummary,
    /// Failed replicates with their error messages.
    pub failed: Vec<(usize, String)>,
}

impl MonteCarloResult {
    pub fn rows_csv(&self) -> String {
        let mut out = String::from("replicate,t_n_star,z,p_value,B_hat,V_hat,sup_error,censoring_rate\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.replicate, r.t_n_star, r.z, r.p_value, r.B_hat, r.V_hat, r.sup_error, r.censoring_rate
            ));
        }
        out
    }
}

/// Default study: the default model with response level 2.5, censoring
/// calibrated to 30%, `psi(y) = y - 2.5` and oracle `B`, `V`.
pub fn default_null_config(theta: f64, n: usize, replications: usize, seed: u64) -> Result<SimulationConfig> {
    let mu = 2.5;
    let rate = TrueModel::default_null(mu, 1.0, 0.0).calibrate_censoring(0.3)?;
    let mut test = TestConfig::unit_cube(2);
    test.psi = PsiSpec::centered(mu);
    test.bv_mode = crate::testing::BvMode::Oracle;
    Ok(SimulationConfig {
        model: TrueModel::default_null(mu, rate, theta),
        n,
        replications,
        seed,
        test,
        sup_points: default_sup_points(),
    })
}

/// Kolmogorov–Smirnov distance of a sample to the standard normal law.
pub fn ks_distance_normal(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &z)| {
            let cdf = 1.0 - upper_tail(z);
            (cdf - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf).abs())
        })
        .fold(0.0, f64::max)
}

pub fn summarize(rows: &[ReplicateRow], failures: usize, level: f64) -> MonteCarloSummary {
    let m = rows.len() as f64;
    let mean = |f: fn(&ReplicateRow) -> f64| rows.iter().map(f).sum::<f64>() / m;
    let mean_z = mean(|r| r.z);
    let var_z = if rows.len() > 1 {
        rows.iter().map(|r| (r.z - mean_z).powi(2)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    let zs: Vec<f64> = rows.iter().map(|r| r.z).collect();
    MonteCarloSummary {
        replicates: rows.len(),
        failures,
        mean_z,
        var_z,
        rejection_rate: rows.iter().filter(|r| r.p_value < level).count() as f64 / m,
        ks_distance: ks_distance_normal(&zs),
        mean_sup_error: mean(|r| r.sup_error),
        mean_t_n_star: mean(|r| r.t_n_star),
        mean_censoring_rate: mean(|r| r.censoring_rate),
    }
}

/// One replicate: draw, run the pipeline, compare the fit with the truth.
pub fn run_replicate(config: &SimulationConfig, truth: &AdditiveFit, rep: usize) -> Result<(ReplicateRow, PipelineOutput)> {
    let mut rng = replicate_rng(config.seed, rep as u64);
    let sample = draw_sample_with(&config.model, config.n, &mut rng)?;
    let out = run_pipeline(&sample, &config.test, Some(&config.model))?;
    let row = ReplicateRow {
        replicate: rep,
        t_n_star: out.report.t_n_star,
        z: out.report.z,
        p_value: out.report.p_value,
        B_hat: out.report.B_hat,
        V_hat: out.report.V_hat,
        sup_error: sup_error(&out.fit, truth, &config.test.region, config.sup_points),
        censoring_rate: sample.censoring_rate(),
    };
    Ok((row, out))
}

pub fn run_monte_carlo(config: &SimulationConfig) -> Result<MonteCarloResult> {
    config.validate()?;
    let truth = config.model.additive_truth(&config.test, config.sup_points)?;
    let outcomes: Vec<Result<ReplicateRow>> = (0..config.replications)
        .into_par_iter()
        .map(|rep| run_replicate(config, &truth, rep).map(|(row, _)| row))
        .collect();
    let mut rows = Vec::with_capacity(outcomes.len());
    let mut failed = Vec::new();
    let mut first_error = None;
    for (rep, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(r) => rows.push(r),
            Err(e) => {
                failed.push((rep, e.to_string()));
                first_error.get_or_insert(e);
            }
        }
    }
    let total = config.replications;
    if failed.len() as f64 > MAX_FAILURE_SHARE * total as f64 || rows.is_empty() {
        return Err(Error::TooManyFailures {
            failed: failed.len(),
            total,
            first: first_error.map(|e| e.to_string()).unwrap_or_default(),
        });
    }
    let summary = summarize(&rows, failed.len(), 0.05);
    Ok(MonteCarloResult { rows, summary, failed })
}
