//! Command-line front end: `test`, `fit` and `simulate` over files.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::additive::{EvaluationRegion, WeightShape};
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::pipeline::{default_k_prime, fit_model, run_pipeline, TestConfig, VarianceOracle};
use crate::plan::{AssumptionSpec, BandwidthConstants, CensoringMode};
use crate::quadrature::{GridSpec, OuterRule};
use crate::simulate::{run_monte_carlo, SimulationConfig, TrueModel};
use crate::smoothing::PsiSpec;
use crate::survival::{CensoredSample, RiskCount};
use crate::testing::{BvMode, TestReport};

#[derive(Debug, Parser)]
#[command(name = "censadd", version, about = "Additivity test for regression with right-censored responses")]
pub struct Cli {
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the additivity test on a CSV sample and print the JSON report.
    Test(TestArgs),
    /// Fit the additive model and write one CSV per component plus a JSON
    /// summary.
    Fit(FitArgs),
    /// Run a Monte Carlo study described by a JSON configuration.
    Simulate(SimulateArgs),
}

/// Tuning flags shared by `test` and `fit`.
#[derive(Debug, Clone, Args, Serialize)]
pub struct TuningArgs {
    /// Smoothing kernel, `family[:k=<order>,r=<radius>]`.
    #[arg(long, default_value = "epanechnikov")]
    pub kernel: String,
    /// Test kernel L (order 2 unless given).
    #[arg(long)]
    pub test_kernel: Option<String>,
    /// Order of the regression kernels.
    #[arg(long, default_value_t = 2)]
    pub k: u32,
    /// Order of the density kernel; defaults to the smallest even order above k d.
    #[arg(long)]
    pub kprime: Option<u32>,
    #[arg(long, default_value_t = 1.0)]
    pub c1: f64,
    #[arg(long, default_value_t = 0.55)]
    pub c2: f64,
    #[arg(long, default_value_t = 1.0)]
    pub c3: f64,
    /// Separate constant for the nuisance-direction bandwidth.
    #[arg(long)]
    pub c2_nuisance: Option<f64>,
    /// Exponent of the test bandwidth; defaults to the middle of its admissible band.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// `identity`, `centered:<c>`, `identity_truncated:<tau0>` or `indicator_below:<tau0>`.
    #[arg(long, default_value = "identity")]
    pub psi: String,
    /// Declared bound M on |psi|.
    #[arg(long)]
    pub psi_bound: Option<f64>,
    /// Truncation point; selects the truncated censoring regime.
    #[arg(long)]
    pub tau0: Option<f64>,
    /// Moment exponent p of the untruncated regime.
    #[arg(long, default_value_t = 0.5)]
    pub p: f64,
    /// Compact region C: `lo:hi` for every axis or `lo1:hi1,lo2:hi2,...`.
    /// Defaults to the covariate bounding box.
    #[arg(long)]
    pub region: Option<String>,
    /// Box on which the weight g is the indicator; defaults to C with 10% of
    /// each side trimmed from both ends.
    #[arg(long)]
    pub weight_box: Option<String>,
    /// Shape of the integration densities on the weight box.
    #[arg(long, default_value = "uniform")]
    pub weight_shape: String,
    /// `nodes=64,curve=101,box=41,outer=exact` (any subset; `outer=midpoint:<n>`).
    #[arg(long)]
    pub grid: Option<String>,
    /// Recorded in the provenance; the test itself draws no random numbers.
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON file with a true model; B and V are then computed from it.
    #[arg(long)]
    pub oracle_bv: Option<PathBuf>,
    /// `at_risk` (product limit) or `as_printed`.
    #[arg(long, default_value = "at_risk")]
    pub risk_count: String,
}

#[derive(Debug, Args)]
pub struct TestArgs {
    /// CSV with header `x1,...,xd,z,delta`.
    pub input: PathBuf,
    #[command(flatten)]
    pub tuning: TuningArgs,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    pub input: PathBuf,
    #[command(flatten)]
    pub tuning: TuningArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Configuration JSON; see `--emit-default`.
    pub config: Option<PathBuf>,
    /// Output directory for `replicates.csv` and `summary.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override the configured master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print the default null configuration and exit.
    #[arg(long)]
    pub emit_default: bool,
}

fn input_error(msg: impl Into<String>) -> Error {
    Error::InvalidSample(msg.into())
}

/// Parses `x1,...,xd,z,delta` CSV text. Column order in the file is free; `d`
/// is the number of `x` columns, which must be `x1..xd`.
pub fn parse_sample_csv(text: &str) -> Result<CensoredSample> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| input_error(format!("line 1: {e}")))?
        .clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let z_col = find("z").ok_or_else(|| input_error("missing column `z`"))?;
    let delta_col = find("delta").ok_or_else(|| input_error("missing column `delta`"))?;
    let d = headers.iter().filter(|h| h.starts_with('x')).count();
    if d == 0 {
        return Err(input_error("missing covariate columns `x1`..`xd`"));
    }
    let x_cols = (1..=d)
        .map(|j| find(&format!("x{j}")).ok_or_else(|| input_error(format!("missing column `x{j}`"))))
        .collect::<Result<Vec<_>>>()?;
    if headers.len() != d + 2 {
        return Err(input_error(format!(
            "line 1: expected columns x1..x{d},z,delta, found {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut x = Vec::new();
    let mut z = Vec::new();
    let mut delta = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| input_error(format!("line {line}: {e}")))?;
        let num = |col: usize, name: &str| -> Result<f64> {
            let raw = record.get(col).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| input_error(format!("line {line}: `{raw}` in column `{name}` is not a finite number")))
        };
        for (j, &c) in x_cols.iter().enumerate() {
            x.push(num(c, &format!("x{}", j + 1))?);
        }
        z.push(num(z_col, "z")?);
        let raw = record.get(delta_col).unwrap_or("");
        delta.push(match raw {
            "0" => 0,
            "1" => 1,
            _ => return Err(input_error(format!("line {line}: delta must be 0 or 1, got `{raw}`"))),
        });
    }
    if z.is_empty() {
        return Err(input_error("no data rows"));
    }
    CensoredSample::new(d, x, z, delta)
}

pub fn sample_to_csv(sample: &CensoredSample) -> String {
    let d = sample.dim();
    let mut out: String = (1..=d).map(|j| format!("x{j},")).collect();
    out.push_str("z,delta\n");
    for i in 0..sample.len() {
        for v in sample.row(i) {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{},{}\n", sample.times()[i], sample.indicators()[i]));
    }
    out
}

pub fn read_sample(path: &Path) -> Result<CensoredSample> {
    let mut text = String::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| input_error(format!("{}: {e}", path.display())))?;
    parse_sample_csv(&text)
}

/// `lo:hi` for every axis, or one `lo:hi` per axis separated by commas.
pub fn parse_box(s: &str, d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let pair = |p: &str| -> Result<(f64, f64)> {
        let (a, b) = p
            .split_once(':')
            .ok_or_else(|| Error::InvalidConfig(format!("box bound `{p}` is not `lo:hi`")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("`{v}` is not a number")))
        };
        Ok((parse(a)?, parse(b)?))
    };
    let pairs = match parts.len() {
        1 => vec![pair(parts[0])?; d],
        n if n == d => parts.iter().map(|p| pair(p)).collect::<Result<Vec<_>>>()?,
        n => {
            return Err(Error::InvalidConfig(format!(
                "box has {n} axes, data has {d}"
            )))
        }
    };
    Ok(pairs.into_iter().unzip())
}

/// `nodes=..,curve=..,box=..,outer=exact|midpoint:<n>`.
pub fn parse_grid(s: &str) -> Result<GridSpec> {
    let mut g = GridSpec::default();
    for item in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("grid item `{item}` is not key=value")))?;
        let count = |v: &str| -> Result<usize> {
            v.parse::<usize>()
                .ok()
                .filter(|&n| n >= 2)
                .ok_or_else(|| Error::InvalidConfig(format!("grid value `{v}` must be an integer >= 2")))
        };
        match key {
            "nodes" => g.nodes = count(value)?,
            "curve" => g.curve_points = count(value)?,
            "box" => g.box_points = count(value)?,
            "outer" => {
                g.outer = match value.split_once(':') {
                    None if value == "exact" => OuterRule::Exact,
                    Some(("midpoint", n)) => OuterRule::Midpoint { points: count(n)? },
                    _ => return Err(Error::InvalidConfig(format!("unknown outer rule `{value}`"))),
                }
            }
            other => return Err(Error::InvalidConfig(format!("unknown grid key `{other}`"))),
        }
    }
    Ok(g)
}

fn parse_weight_shape(s: &str) -> Result<WeightShape> {
    match s {
        "uniform" => Ok(WeightShape::Uniform),
        "smooth_bump" | "bump" => Ok(WeightShape::SmoothBump),
        other => Err(Error::InvalidConfig(format!("unknown weight shape `{other}`"))),
    }
}

fn parse_risk_count(s: &str) -> Result<RiskCount> {
    match s {
        "at_risk" => Ok(RiskCount::AtRisk),
        "as_printed" => Ok(RiskCount::AsPrinted),
        other => Err(Error::InvalidConfig(format!("unknown risk count `{other}`"))),
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("--{name} must be positive, got {v}")))
    }
}

/// Validates every flag and assembles the pipeline configuration for a
/// sample of dimension `d`.
pub fn build_config(args: &TuningArgs, sample: &CensoredSample) -> Result<TestConfig> {
    let d = sample.dim();
    for (name, v) in [("c1", args.c1), ("c2", args.c2), ("c3", args.c3), ("p", args.p)] {
        positive(name, v)?;
    }
    if let Some(v) = args.c2_nuisance {
        positive("c2-nuisance", v)?;
    }
    let kernel: KernelSpec = args.kernel.parse()?;
    let test_kernel = args.test_kernel.as_deref().map(str::parse::<KernelSpec>).transpose()?;
    let mut psi: PsiSpec = args.psi.parse()?;
    if let Some(m) = args.psi_bound {
        positive("psi-bound", m)?;
        psi.bound = Some(m);
    }
    let assumptions = match args.tau0 {
        Some(t) => AssumptionSpec {
            mode: CensoringMode::Truncated,
            tau0: Some(t),
            p: None,
        },
        None => AssumptionSpec {
            mode: CensoringMode::Moment,
            tau0: None,
            p: Some(args.p),
        },
    };
    let (lo, hi) = match &args.region {
        Some(s) => parse_box(s, d)?,
        None => {
            let mut lo = vec![f64::INFINITY; d];
            let mut hi = vec![f64::NEG_INFINITY; d];
            for i in 0..sample.len() {
                for (j, &v) in sample.row(i).iter().enumerate() {
                    lo[j] = lo[j].min(v);
                    hi[j] = hi[j].max(v);
                }
            }
            (lo, hi)
        }
    };
    let region = match &args.weight_box {
        Some(s) => {
            let (g_lo, g_hi) = parse_box(s, d)?;
            EvaluationRegion::new(lo, hi, g_lo, g_hi, 0.05)?
        }
        None => EvaluationRegion::with_trimmed_weight(lo, hi, 0.1, 0.05)?,
    };
    let grid = match &args.grid {
        Some(s) => parse_grid(s)?,
        None => GridSpec::default(),
    };
    let config = TestConfig {
        kernel,
        test_kernel,
        k: args.k,
        k_prime: args.kprime.unwrap_or_else(|| default_k_prime(d, args.k)),
        constants: BandwidthConstants {
            c1: args.c1,
            c2: args.c2,
            c3: args.c3,
            c2_nuisance: args.c2_nuisance,
        },
        gamma: args.gamma,
        frozen_bandwidths: None,
        psi,
        assumptions,
        region,
        weight_shape: parse_weight_shape(&args.weight_shape)?,
        grid,
        bv_mode: if args.oracle_bv.is_some() { BvMode::Oracle } else { BvMode::Plugin },
        risk_count: parse_risk_count(&args.risk_count)?,
    };
    config.kernels(d)?;
    config.plan(d)?;
    Ok(config)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn load_oracle(args: &TuningArgs) -> Result<Option<TrueModel>> {
    args.oracle_bv
        .as_deref()
        .map(|p| {
            let m: TrueModel = read_json(p)?;
            m.validate()?;
            Ok(m)
        })
        .transpose()
}

fn provenance(command: &str, input: &Path, args: &TuningArgs, config: &TestConfig) -> serde_json::Value {
    json!({
        "tool": "censadd",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "input": input.display().to_string(),
        "flags": args,
        "config": config,
    })
}

/// Full pipeline on a CSV sample; the report carries its provenance.
pub fn cmd_test(args: &TestArgs) -> Result<TestReport> {
    let sample = read_sample(&args.input)?;
    let config = build_config(&args.tuning, &sample)?;
    let oracle = load_oracle(&args.tuning)?;
    let out = run_pipeline(&sample, &config, oracle.as_ref().map(|m| m as &dyn VarianceOracle))?;
    let mut report = out.report;
    let mut prov = provenance("test", &args.input, &args.tuning, &config);
    prov["bandwidths"] = json!(out.bandwidths);
    prov["diagnostics"] = json!(out.diagnostics);
    prov["sigma0_sq_mean"] = json!(out.variance.sigma0_sq_mean);
    report.provenance = prov;
    Ok(report)
}

/// Writes `component_<l>.csv` for each axis and `fit.json`; returns the
/// written paths.
pub fn cmd_fit(args: &FitArgs) -> Result<Vec<PathBuf>> {
    let sample = read_sample(&args.input)?;
    let config = build_config(&args.tuning, &sample)?;
    let fitted = fit_model(&sample, &config)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::InvalidConfig(format!("{}: {e}", args.out.display())))?;
    let mut written = Vec::new();
    for c in &fitted.fit.components {
        let path = args.out.join(format!("component_{}.csv", c.axis + 1));
        write_file(&path, &c.to_csv())?;
        written.push(path);
    }
    let summary = json!({
        "mu_hat": fitted.fit.mu_hat,
        "bandwidths": fitted.bandwidths,
        "diagnostics": fitted.diagnostics,
        "provenance": provenance("fit", &args.input, &args.tuning, &config),
    });
    let path = args.out.join("fit.json");
    write_file(&path, &to_pretty(&summary))?;
    written.push(path);
    Ok(written)
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<crate::simulate::MonteCarloResult> {
    let path = args
        .config
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("a configuration file is required".into()))?;
    let mut config: SimulationConfig = read_json(path)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let result = run_monte_carlo(&config)?;
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(|e| Error::InvalidConfig(format!("{}: {e}", dir.display())))?;
        write_file(&dir.join("replicates.csv"), &result.rows_csv())?;
        let summary = json!({
            "summary": result.summary,
            "failed": result.failed,
            "provenance": {
                "tool": "censadd",
                "version": env!("CARGO_PKG_VERSION"),
                "command": "simulate",
                "config": config,
                "note": "model, censoring law and tuning are implementation defaults unless set in the configuration",
            },
        });
        write_file(&dir.join("summary.json"), &to_pretty(&summary))?;
    }
    Ok(result)
}

fn to_pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("values serialize");
    s.push('\n');
    s
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

/// Runs the parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return 1;
        }
        // Only fails if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let outcome = match &cli.command {
        Command::Test(args) => cmd_test(args).and_then(|report| {
            let text = to_pretty(&report);
            match &args.out {
                Some(p) => write_file(p, &text),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }),
        Command::Fit(args) => cmd_fit(args).map(|paths| {
            for p in paths {
                println!("{}", p.display());
            }
        }),
        Command::Simulate(args) if args.emit_default => {
            crate::simulate::default_null_config(0.0, 400, 200, 20240611).map(|c| print!("{}", to_pretty(&c)))
        }
        Command::Simulate(args) => cmd_simulate(args).map(|r| {
            if args.out.is_none() {
                print!("{}", to_pretty(&r.summary));
            }
        }),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let s = CensoredSample::new(2, vec![0.1, 1.0 / 3.0, 0.7, 2e-9], vec![1.5, 0.123456789012345], vec![1, 0]).unwrap();
        assert_eq!(parse_sample_csv(&sample_to_csv(&s)).unwrap(), s);
    }

    #[test]
    fn missing_delta_is_named() {
        let err = parse_sample_csv("x1,z\n0.5,1.0\n").unwrap_err();
        assert!(err.to_string().contains("delta"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn bad_cell_reports_its_line() {
        let err = parse_sample_csv("x1,z,delta\n0.5,1.0,1\n0.2,abc,0\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = parse_sample_csv("x1,z,delta\n0.5,1.0,2\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn boxes_and_grids_parse() {
        assert_eq!(parse_box("0:1", 2).unwrap(), (vec![0.0, 0.0], vec![1.0, 1.0]));
        assert_eq!(parse_box("0:1, -1:2", 2).unwrap(), (vec![0.0, -1.0], vec![1.0, 2.0]));
        assert!(parse_box("0:1,0:1,0:1", 2).is_err());
        let g = parse_grid("nodes=32,outer=midpoint:50").unwrap();
        assert_eq!(g.nodes, 32);
        assert_eq!(g.outer, OuterRule::Midpoint { points: 50 });
        assert!(parse_grid("outer=simpson").is_err());
    }
}
