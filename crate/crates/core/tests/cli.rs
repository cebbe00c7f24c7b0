use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn markovsde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_markovsde"))
        .args(args)
        .env_remove("MARKOVSDE_SEED")
        .output()
        .expect("binary runs")
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn value<'a>(report: &'a str, key: &str) -> &'a str {
    report
        .lines()
        .find_map(|l| l.strip_prefix(key)?.strip_prefix(" = "))
        .unwrap_or_else(|| panic!("{key} missing from\n{report}"))
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn steady_on_tanh1d_flags_mode_at_zero_and_positive_mean() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("steady");
    let o = markovsde(&[
        "steady",
        "--model",
        "tanh1d",
        "--t_final",
        "5",
        "--m_steps",
        "2000",
        "--n_paths",
        "4000",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = read(&out, "report.txt");
    assert_eq!(value(&report, "mode_at_attractor"), "true");
    assert_eq!(value(&report, "mean_positive"), "true");
    let csv = read(&out, "steady.csv");
    assert_eq!(
        csv.lines().next(),
        Some("x,w_ito,w_stratonovich,w_anti_ito,w_alpha,w_monte_carlo")
    );
    assert_eq!(csv.lines().count(), 401);
    for f in ["steady.svg", "config.json", "manifest.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn quasipotential_on_klein_kramers_reports_temperature_times_j() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("qp");
    let o = markovsde(&[
        "quasipotential",
        "--model",
        "klein-kramers",
        "--param",
        "T=2",
        "--x0",
        "0.4,-0.3",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a: Vec<f64> = read(&out, "A_oracle.csv")
        .split([',', '\n'])
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().unwrap())
        .collect();
    for (got, want) in a.iter().zip([0.0, 2.0, -2.0, 0.0]) {
        assert!((got - want).abs() < 1e-8, "{a:?}");
    }
    let report = read(&out, "report.txt");
    assert!(report.contains("A_paper = "));
    assert!(report.contains("A_oracle = "));
    assert!(report.contains("residual.paper_vs_oracle_A = "));
}

#[test]
fn reruns_are_byte_identical_and_write_a_manifest() {
    let tmp = TempDir::new().unwrap();
    let config = tmp.path().join("run.json");
    std::fs::write(
        &config,
        r#"{"model": {"catalog": "tanh1d"}, "x0": [1.0], "t_final": 0.5, "m_steps": 100, "n_paths": 300, "seed": 11}"#,
    )
    .unwrap();
    let mut outputs = Vec::new();
    for rep in ["a", "b"] {
        let out = tmp.path().join(rep);
        let o = markovsde(&[
            "simulate",
            "--config",
            config.to_str().unwrap(),
            "--output",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push((
            std::fs::read(out.join("ensemble.csv")).unwrap(),
            std::fs::read(out.join("moments.csv")).unwrap(),
        ));
        let manifest = read(&out, "manifest.txt");
        let keys: Vec<&str> = manifest.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        assert_eq!(
            keys,
            [
                "config_hash",
                "seed",
                "version",
                "subcommand",
                "started",
                "elapsed_seconds"
            ]
        );
        assert_eq!(value(&manifest, "seed"), "11");
        assert_eq!(value(&manifest, "subcommand"), "simulate");
    }
    assert_eq!(outputs[0], outputs[1]);
    let header = String::from_utf8_lossy(&outputs[0].0)
        .lines()
        .next()
        .unwrap()
        .to_string();
    assert_eq!(header, "path_id,step,t,x1");
}

#[test]
fn seed_precedence_is_flag_then_environment_then_file() {
    let tmp = TempDir::new().unwrap();
    let config = tmp.path().join("run.json");
    std::fs::write(
        &config,
        r#"{"model": {"catalog": "ou1d"}, "m_steps": 10, "n_paths": 10, "seed": 1}"#,
    )
    .unwrap();
    let run = |env: Option<&str>, flag: Option<&str>, dir: &str| {
        let out = tmp.path().join(dir);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_markovsde"));
        cmd.args([
            "simulate",
            "--config",
            config.to_str().unwrap(),
            "--output",
            out.to_str().unwrap(),
        ]);
        cmd.env_remove("MARKOVSDE_SEED");
        if let Some(e) = env {
            cmd.env("MARKOVSDE_SEED", e);
        }
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        let o = cmd.output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        value(&read(&out, "manifest.txt"), "seed").to_string()
    };
    assert_eq!(run(None, None, "file"), "1");
    assert_eq!(run(Some("5"), None, "env"), "5");
    assert_eq!(run(Some("5"), Some("9"), "flag"), "9");
}

#[test]
fn config_errors_exit_with_one() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o");
    let out = out.to_str().unwrap();

    let o = markovsde(&["simulate", "--model", "tanh1d", "--scheme", "milstein", "--output", out]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("scheme"), "{}", stderr(&o));

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "{\n  \"model\": {\"catalog\": \"tanh1d\"},\n  \"n_path\": 3\n}\n").unwrap();
    let o = markovsde(&["simulate", "--config", bad.to_str().unwrap(), "--output", out]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    let o = markovsde(&["fpe-evolve", "--model", "linear2d", "--n_cells", "50", "--output", out]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("grid"), "{}", stderr(&o));

    let o = markovsde(&["simulate", "--config", "/nonexistent/config.json"]);
    assert_eq!(o.status.code(), Some(1));

    let o = markovsde(&["simulate", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(markovsde(&["--help"]).status.success());
}

#[test]
fn numerical_failure_exits_with_two_and_leaves_a_diagnostic() {
    let tmp = TempDir::new().unwrap();
    let config = tmp.path().join("log.json");
    std::fs::write(
        &config,
        r#"{"model": {"drift": ["-x1"], "coupling": [["log(x1)"]]}, "x0": [0.5], "grid": {"x_min": -1, "x_max": 1, "n_cells": 40}}"#,
    )
    .unwrap();
    let out = tmp.path().join("o");
    let o = markovsde(&[
        "fpe-evolve",
        "--config",
        config.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let diag = read(&out, "diagnostic.txt");
    assert_eq!(value(&diag, "subcommand"), "fpe-evolve");
    assert!(value(&diag, "error").contains("log"), "{diag}");
}

#[test]
fn compare_emits_a_verdict_table() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("cmp");
    let o = markovsde(&[
        "compare",
        "--model",
        "ou1d",
        "--x0",
        "1",
        "--t_final",
        "0.5",
        "--m_steps",
        "200",
        "--n_paths",
        "20000",
        "--n_cells",
        "200",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let verdict = read(&out, "verdict.csv");
    let mut lines = verdict.lines();
    assert_eq!(lines.next(), Some("quantity,monte_carlo,fpe,tolerance,verdict"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    for row in rows {
        assert!(row.ends_with(",agree"), "{row}");
    }
}
