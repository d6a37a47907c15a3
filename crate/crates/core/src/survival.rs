//! Censored samples, the Kaplan–Meier estimate of the censoring survival
//! function and inverse-probability-of-censoring weighted responses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::smoothing::PsiSpec;

/// Observed triples `(X_i, Z_i, delta_i)`, covariates stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CensoredSample {
    d: usize,
    x: Vec<f64>,
    z: Vec<f64>,
    delta: Vec<u8>,
}

impl CensoredSample {
    pub fn new(d: usize, x: Vec<f64>, z: Vec<f64>, delta: Vec<u8>) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidSample("covariate dimension must be at least 1".into()));
        }
        let n = z.len();
        if delta.len() != n || x.len() != n * d {
            return Err(Error::InvalidSample(format!(
                "length mismatch: {} covariate values for d = {d}, {} times, {} indicators",
                x.len(),
                n,
                delta.len()
            )));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidSample(format!("non-finite covariate in row {}", i / d)));
        }
        if let Some(i) = z.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidSample(format!(
                "observed time in row {i} must be finite and nonnegative, got {}",
                z[i]
            )));
        }
        if let Some(i) = delta.iter().position(|&v| v > 1) {
            return Err(Error::InvalidSample(format!("delta in row {i} must be 0 or 1")));
        }
        Ok(Self { d, x, z, delta })
    }

    pub fn from_rows(rows: &[Vec<f64>], z: Vec<f64>, delta: Vec<u8>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidSample("ragged covariate rows".into()));
        }
        Self::new(d, rows.concat(), z, delta)
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn covariates(&self) -> &[f64] {
        &self.x
    }

    pub fn times(&self) -> &[f64] {
        &self.z
    }

    pub fn indicators(&self) -> &[u8] {
        &self.delta
    }

    /// Share of censored observations.
    pub fn censoring_rate(&self) -> f64 {
        let censored = self.delta.iter().filter(|&&v| v == 0).count();
        censored as f64 / self.len().max(1) as f64
    }

    /// Same sample with covariate columns reordered: new column `j` is old
    /// column `perm[j]`.
    pub fn permute_axes(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.d);
        let mut x = Vec::with_capacity(self.x.len());
        for i in 0..self.len() {
            let row = self.row(i);
            x.extend(perm.iter().map(|&p| row[p]));
        }
        Self {
            d: self.d,
            x,
            z: self.z.clone(),
            delta: self.delta.clone(),
        }
    }

    /// Rows reordered by `order`.
    pub fn reorder_rows(&self, order: &[usize]) -> Self {
        let mut x = Vec::with_capacity(self.x.len());
        for &i in order {
            x.extend_from_slice(self.row(i));
        }
        Self {
            d: self.d,
            x,
            z: order.iter().map(|&i| self.z[i]).collect(),
            delta: order.iter().map(|&i| self.delta[i]).collect(),
        }
    }
}

/// Right-continuous, non-increasing step function on `[0, inf)`, equal to 1
/// before the first jump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSurvival {
    jump_times: Vec<f64>,
    values: Vec<f64>,
}

impl StepSurvival {
    /// The constant function 1.
    pub fn one() -> Self {
        Self {
            jump_times: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.jump_times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn eval(&self, y: f64) -> f64 {
        let idx = self.jump_times.partition_point(|&t| t <= y);
        if idx == 0 {
            1.0
        } else {
            self.values[idx - 1]
        }
    }

    /// Two-column CSV `time,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,value\n");
        for (t, v) in self.jump_times.iter().zip(&self.values) {
            out.push_str(&format!("{t},{v}\n"));
        }
        out
    }
}

/// How the count `N_n` in each Kaplan–Meier factor `(N_n - 1) / N_n` is taken.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskCount {
    /// Number still at risk, `#{j : Z_j >= Z_i}`: the product-limit
    /// estimator.
    #[default]
    AtRisk,
    /// `#{j : Z_j <= Z_i}`, the count as it is sometimes printed. Kept for
    /// reproducing hand computations written against that form; it is not a
    /// consistent estimator of the censoring survival function.
    AsPrinted,
}

/// Kaplan–Meier estimate of the censoring survival `G(t) = P(C > t)`: censored
/// observations play the role of events. Each censored `Z_i` contributes the
/// factor `(N_n(Z_i) - 1) / N_n(Z_i)`, with tied censored observations each
/// contributing their own factor, and `0^0 = 1` for the empty product.
pub fn kaplan_meier_censoring(sample: &CensoredSample) -> StepSurvival {
    kaplan_meier_censoring_with(sample, RiskCount::AtRisk)
}

pub fn kaplan_meier_censoring_with(sample: &CensoredSample, count: RiskCount) -> StepSurvival {
    let n = sample.len();
    let mut sorted = sample.times().to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut censored: Vec<f64> = sample
        .times()
        .iter()
        .zip(sample.indicators())
        .filter(|(_, &d)| d == 0)
        .map(|(&z, _)| z)
        .collect();
    censored.sort_by(f64::total_cmp);

    let mut jump_times = Vec::new();
    let mut values = Vec::new();
    let mut g = 1.0;
    let mut tied = 0;
    for (idx, &z) in censored.iter().enumerate() {
        tied = if idx > 0 && censored[idx - 1] == z { tied + 1 } else { 0 };
        let n_count = match count {
            // Tied censorings leave the risk set one at a time, so the
            // product over a tie is (N - c) / N.
            RiskCount::AtRisk => n - sorted.partition_point(|&t| t < z) - tied,
            RiskCount::AsPrinted => sorted.partition_point(|&t| t <= z),
        } as f64;
        g *= (n_count - 1.0) / n_count;
        if jump_times.last() == Some(&z) {
            *values.last_mut().unwrap() = g;
        } else {
            jump_times.push(z);
            values.push(g);
        }
    }
    StepSurvival { jump_times, values }
}

/// IPCW responses `delta_i psi(Z_i) / G_n(Z_i)`. Terms with `delta_i = 0` or
/// `psi(Z_i) = 0` are zero without evaluating the quotient.
pub fn ipcw_responses(sample: &CensoredSample, g_n: &StepSurvival, psi: &PsiSpec) -> Result<Vec<f64>> {
    sample
        .times()
        .iter()
        .zip(sample.indicators())
        .enumerate()
        .map(|(i, (&z, &d))| {
            if d == 0 {
                return Ok(0.0);
            }
            let p = psi.eval(z);
            if p == 0.0 {
                return Ok(0.0);
            }
            let g = g_n.eval(z);
            if g <= 0.0 {
                return Err(Error::CensoringDegenerate { index: i });
            }
            Ok(p / g)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smoothing::PsiForm;
    use proptest::prelude::*;

    fn sample_1d(z: &[f64], delta: &[u8]) -> CensoredSample {
        CensoredSample::new(1, vec![0.0; z.len()], z.to_vec(), delta.to_vec()).unwrap()
    }

    #[test]
    fn no_censoring_gives_unit_survival() {
        let s = sample_1d(&[0.5, 1.0, 2.0], &[1, 1, 1]);
        for count in [RiskCount::AtRisk, RiskCount::AsPrinted] {
            let g = kaplan_meier_censoring_with(&s, count);
            for y in [0.0, 0.7, 5.0, 1e9] {
                assert_eq!(g.eval(y), 1.0);
            }
        }
    }

    #[test]
    fn single_censoring_in_middle() {
        let s = sample_1d(&[1.0, 2.0, 3.0], &[1, 0, 1]);
        for count in [RiskCount::AtRisk, RiskCount::AsPrinted] {
            let g = kaplan_meier_censoring_with(&s, count);
            assert_eq!(g.eval(0.0), 1.0);
            assert_eq!(g.eval(1.999), 1.0);
            assert_eq!(g.eval(2.0), 0.5);
            assert_eq!(g.eval(10.0), 0.5);
        }
    }

    #[test]
    fn earliest_censoring_under_both_counts() {
        let s = sample_1d(&[1.0, 2.0], &[0, 1]);
        let printed = kaplan_meier_censoring_with(&s, RiskCount::AsPrinted);
        assert_eq!(printed.eval(0.99), 1.0);
        assert_eq!(printed.eval(1.0), 0.0);
        assert_eq!(printed.eval(3.0), 0.0);
        let km = kaplan_meier_censoring(&s);
        assert_eq!(km.eval(0.99), 1.0);
        assert_eq!(km.eval(1.0), 0.5);
        assert_eq!(km.eval(3.0), 0.5);
    }

    #[test]
    fn tied_censored_times_each_contribute() {
        let s = sample_1d(&[1.0, 1.0, 2.0, 3.0], &[0, 0, 1, 1]);
        let g = kaplan_meier_censoring(&s);
        assert_eq!(g.jump_times(), &[1.0]);
        assert!((g.eval(1.0) - 0.75 * (2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn ipcw_examples() {
        let s = sample_1d(&[1.0, 2.0, 3.0], &[1, 0, 1]);
        let g = kaplan_meier_censoring(&s);
        let psi = PsiSpec::new(PsiForm::IdentityTruncated, Some(2.5), None).unwrap();
        assert_eq!(ipcw_responses(&s, &g, &psi).unwrap(), vec![1.0, 0.0, 0.0]);

        let all = sample_1d(&[0.3, 1.7, 2.2], &[1, 1, 1]);
        let g = kaplan_meier_censoring(&all);
        let id = PsiSpec::identity();
        assert_eq!(ipcw_responses(&all, &g, &id).unwrap(), vec![0.3, 1.7, 2.2]);
    }

    #[test]
    fn degenerate_censoring_is_reported() {
        let s = sample_1d(&[1.0, 2.0], &[0, 1]);
        let g = kaplan_meier_censoring_with(&s, RiskCount::AsPrinted);
        assert_eq!(
            ipcw_responses(&s, &g, &PsiSpec::identity()),
            Err(Error::CensoringDegenerate { index: 1 })
        );
        // psi vanishing at Z_2 short-circuits the quotient.
        let psi = PsiSpec::new(PsiForm::IdentityTruncated, Some(1.5), None).unwrap();
        assert_eq!(ipcw_responses(&s, &g, &psi).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn invalid_samples_are_rejected() {
        assert!(CensoredSample::new(1, vec![0.0], vec![-1.0], vec![1]).is_err());
        assert!(CensoredSample::new(1, vec![0.0], vec![1.0], vec![2]).is_err());
        assert!(CensoredSample::new(2, vec![0.0], vec![1.0], vec![1]).is_err());
        assert!(CensoredSample::new(1, vec![f64::NAN], vec![1.0], vec![1]).is_err());
    }

    proptest! {
        #[test]
        fn km_is_monotone_and_bounded(
            rows in prop::collection::vec((0.0f64..10.0, 0u8..2), 1..60),
            probes in prop::collection::vec(0.0f64..12.0, 1..20),
        ) {
            let z: Vec<f64> = rows.iter().map(|r| (r.0 * 4.0).round() / 4.0).collect();
            let delta: Vec<u8> = rows.iter().map(|r| r.1).collect();
            let s = sample_1d(&z, &delta);
            let g = kaplan_meier_censoring(&s);
            let mut probes = probes;
            probes.sort_by(f64::total_cmp);
            let vals: Vec<f64> = probes.iter().map(|&y| g.eval(y)).collect();
            for v in &vals {
                prop_assert!((0.0..=1.0).contains(v));
            }
            for w in vals.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
        }

        #[test]
        fn km_ignores_row_order(
            rows in prop::collection::vec((0.0f64..10.0, 0u8..2), 1..40),
            seed in any::<u64>(),
        ) {
            let z: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let delta: Vec<u8> = rows.iter().map(|r| r.1).collect();
            let s = sample_1d(&z, &delta);
            let mut order: Vec<usize> = (0..z.len()).collect();
            let mut state = seed;
            for i in (1..order.len()).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                order.swap(i, (state >> 33) as usize % (i + 1));
            }
            let a = kaplan_meier_censoring(&s);
            let b = kaplan_meier_censoring(&s.reorder_rows(&order));
            prop_assert_eq!(a, b);
        }
    }
}
