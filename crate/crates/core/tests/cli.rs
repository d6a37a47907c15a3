mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use censored_additivity::cli::{cmd_test, sample_to_csv, Cli, Command as Sub};
use censored_additivity::pipeline::{run_pipeline, TestConfig};
use censored_additivity::simulate::{default_null_config, draw_sample};
use censored_additivity::survival::CensoredSample;
use censored_additivity::testing::TestReport;
use clap::Parser;

fn censadd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_censadd")).args(args).output().expect("binary runs")
}

fn write_sample(dir: &Path, name: &str, s: &CensoredSample) -> String {
    let p = dir.join(name);
    fs::write(&p, sample_to_csv(s)).unwrap();
    p.display().to_string()
}

fn null_sample(n: usize, seed: u64) -> CensoredSample {
    draw_sample(&default_null_config(0.0, n, 1, 1).unwrap().model, n, seed).unwrap()
}

#[test]
fn missing_delta_column_exits_one_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.csv");
    fs::write(&p, "x1,x2,z\n0.1,0.2,3.0\n0.4,0.5,2.0\n").unwrap();
    let out = censadd(&["test", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("delta"), "{err}");
}

#[test]
fn no_residual_mass_near_the_weight_box() {
    // Design with a hole around the weight box: every L window misses the
    // box, yet the curve kernel still reaches data, so T is exactly zero.
    let x: Vec<f64> = (0..200)
        .map(|i| {
            let u = (i as f64 + 0.5) / 200.0;
            if u < 0.5 { 0.35 * u / 0.5 } else { 0.65 + 0.35 * (u - 0.5) / 0.5 }
        })
        .collect();
    let z: Vec<f64> = x.iter().map(|v| 2.0 + v + 0.1 * (17.0 * v).sin()).collect();
    let s = CensoredSample::new(1, x, z, vec![1; 200]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = write_sample(dir.path(), "hole.csv", &s);
    let out = censadd(&["test", &p, "--region", "0:1", "--weight-box", "0.4:0.6", "--c3", "0.3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: TestReport = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r.t_n_star, 0.0);
    let expected = -r.B_hat * r.ell_n.powf(-0.5) / r.V_hat.sqrt();
    assert!((r.z - expected).abs() <= 1e-12 * expected.abs(), "{} vs {expected}", r.z);
    assert!(r.p_value > 0.5 && r.p_value <= 1.0);
}

#[test]
fn binary_report_matches_in_process_run() {
    let s = null_sample(300, 11);
    let dir = tempfile::tempdir().unwrap();
    let p = write_sample(dir.path(), "sim.csv", &s);
    let out = censadd(&["test", &p, "--psi", "centered:2.5", "--seed", "11"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let from_binary: TestReport = serde_json::from_slice(&out.stdout).unwrap();

    let Sub::Test(args) = Cli::parse_from(["censadd", "test", &p, "--psi", "centered:2.5", "--seed", "11"]).command
    else {
        unreachable!()
    };
    assert_eq!(cmd_test(&args).unwrap(), from_binary);

    let config: TestConfig = serde_json::from_value(from_binary.provenance["config"].clone()).unwrap();
    let direct = run_pipeline(&s, &config, None).unwrap().report;
    assert_eq!(direct.t_n_star, from_binary.t_n_star);
    assert_eq!(direct.z, from_binary.z);
    assert_eq!(direct.p_value, from_binary.p_value);
}

#[test]
fn one_dimensional_fit_writes_one_component() {
    let s = common::additive_dataset(4, 150, 1);
    let dir = tempfile::tempdir().unwrap();
    let p = write_sample(dir.path(), "d1.csv", &s);
    let out_dir = dir.path().join("fit");
    let out = censadd(&["fit", &p, "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut names: Vec<String> = fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["component_1.csv", "fit.json"]);
}

#[test]
fn reruns_are_byte_identical() {
    let s = common::additive_dataset(8, 150, 2);
    let dir = tempfile::tempdir().unwrap();
    let p = write_sample(dir.path(), "d2.csv", &s);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert!(censadd(&["fit", &p, "--out", d.to_str().unwrap()]).status.success());
    }
    for f in ["component_1.csv", "component_2.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }

    let cfg = dir.path().join("sim.json");
    fs::write(&cfg, serde_json::to_string(&default_null_config(0.0, 150, 4, 5).unwrap()).unwrap()).unwrap();
    let (sa, sb) = (dir.path().join("sa"), dir.path().join("sb"));
    assert!(censadd(&["simulate", cfg.to_str().unwrap(), "--out", sa.to_str().unwrap()]).status.success());
    assert!(censadd(&["--threads", "1", "simulate", cfg.to_str().unwrap(), "--out", sb.to_str().unwrap()])
        .status
        .success());
    for f in ["replicates.csv", "summary.json"] {
        assert_eq!(fs::read(sa.join(f)).unwrap(), fs::read(sb.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn single_replicate_summary_is_its_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.json");
    fs::write(&cfg, serde_json::to_string(&default_null_config(0.0, 200, 1, 9).unwrap()).unwrap()).unwrap();
    let out_dir = dir.path().join("out");
    let out = censadd(&["simulate", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    let mut rows = csv::Reader::from_path(out_dir.join("replicates.csv")).unwrap();
    let headers = rows.headers().unwrap().clone();
    let rec = rows.records().next().unwrap().unwrap();
    let field = |name: &str| -> f64 { rec[headers.iter().position(|h| h == name).unwrap()].parse().unwrap() };
    let sm = &summary["summary"];
    assert_eq!(sm["replicates"], 1);
    assert_eq!(sm["mean_z"].as_f64().unwrap(), field("z"));
    assert_eq!(sm["mean_t_n_star"].as_f64().unwrap(), field("t_n_star"));
    assert_eq!(sm["mean_sup_error"].as_f64().unwrap(), field("sup_error"));
}

#[test]
fn violated_assumption_exits_two() {
    // The truncated regime needs psi to vanish beyond tau0; identity does not.
    let s = null_sample(150, 3);
    let dir = tempfile::tempdir().unwrap();
    let p = write_sample(dir.path(), "s.csv", &s);
    let out = censadd(&["test", &p, "--tau0", "3"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn emit_default_round_trips() {
    let out = censadd(&["simulate", "--emit-default"]);
    assert!(out.status.success());
    let cfg: censored_additivity::simulate::SimulationConfig = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg, default_null_config(0.0, 400, 200, 20240611).unwrap());
}
