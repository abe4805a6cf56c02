//! Black-box tests of the `speedlab` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const BASE: &str = r#"
mode = "compare"
seed = 3

[population]
size = 40
zero_mass = 0.3
one_mass = 0.1
extreme_gap = 0.005

[train]
learning_rate = 5.0
total_updates = 30
"#;

fn speedlab(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_speedlab"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn run(config: &str, out: &Path) -> Output {
    speedlab(&["run", "--config", config, "--out", out.to_str().unwrap()], &[])
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn missing_required_key_exits_2_and_names_it() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.toml",
        "mode = \"speed\"\n[population]\nzero_mass = 0.3\n",
    );
    let out = run(&cfg, &tmp.path().join("out"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("population.size"));
}

#[test]
fn missing_mode_and_unknown_keys_exit_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "a.toml", "[population]\nsize = 4\n");
    let out = run(&cfg, &tmp.path().join("a"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`mode`"));

    let cfg = write_config(tmp.path(), "b.toml", &format!("{BASE}[curriculum]\nninit = 3\n"));
    let out = run(&cfg, &tmp.path().join("b"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("curriculum.ninit"));

    let out = run("/nonexistent/config.toml", &tmp.path().join("c"));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", BASE);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(run(&cfg, &a).status.success());
    assert!(run(&cfg, &b).status.success());
    for name in ["metrics_speed.jsonl", "metrics_baseline.jsonl", "summary.json"] {
        assert_eq!(read(&a, name), read(&b, name), "{name}");
    }
}

#[test]
fn effective_config_reproduces_the_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", BASE);
    let first = tmp.path().join("first");
    assert!(run(&cfg, &first).status.success());
    let echo = first.join("effective_config.toml").to_str().unwrap().to_string();
    let second = tmp.path().join("second");
    assert!(run(&echo, &second).status.success());
    for name in ["metrics_speed.jsonl", "metrics_baseline.jsonl"] {
        assert_eq!(read(&first, name), read(&second, name), "{name}");
    }
    // The echo differs only in the output directory.
    let strip = |s: String| {
        s.lines()
            .filter(|l| !l.starts_with("dir = "))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(
        strip(read(&first, "effective_config.toml")),
        strip(read(&second, "effective_config.toml"))
    );
}

#[test]
fn metrics_records_have_fixed_keys() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", BASE);
    let out = tmp.path().join("o");
    assert!(run(&cfg, &out).status.success());
    let keys = [
        "kind",
        "t",
        "sim_elapsed_s",
        "train_pass_rate",
        "grad_norm",
        "accepted_fraction",
        "population_pass_rate",
        "engine_calls",
    ];
    for line in read(&out, "metrics_speed.jsonl").lines() {
        for key in keys {
            assert!(line.contains(&format!("\"{key}\":")), "{key} missing in {line}");
        }
    }
    let summary = read(&out, "summary.json");
    assert!(summary.contains("\"schema_version\": 1"));
    assert!(summary.contains("\"speedup\""));
}

#[test]
fn seed_override_changes_the_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", BASE);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(run(&cfg, &a).status.success());
    let out = speedlab(
        &["run", "--config", &cfg, "--seed", "4", "--out", b.to_str().unwrap()],
        &[],
    );
    assert!(out.status.success());
    assert_ne!(read(&a, "metrics_speed.jsonl"), read(&b, "metrics_speed.jsonl"));
    assert!(read(&b, "effective_config.toml").contains("seed = 4"));
}

#[test]
fn verify_suite_reports_and_exits_zero() {
    let tmp = TempDir::new().unwrap();
    let out_dir = tmp.path().join("v");
    let out = speedlab(&["verify", "--suite", "phi", "--out", out_dir.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("monotone"));
    assert!(read(&out_dir, "verify_report.json").contains("screened-gradient-identity"));
}

#[test]
fn sweep_is_independent_of_thread_count() {
    let tmp = TempDir::new().unwrap();
    let text = format!(
        "{}[sweep]\naxis = \"n_init\"\nvalues = [4, 6, 8]\n",
        BASE.replace("compare", "speed")
    );
    let cfg = write_config(tmp.path(), "s.toml", &text);
    let mut dirs = Vec::new();
    for threads in ["1", "3"] {
        let dir = tmp.path().join(format!("t{threads}"));
        let out = speedlab(
            &["sweep", "--config", &cfg, "--out", dir.to_str().unwrap()],
            &[("SPEEDLAB_THREADS", threads)],
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        dirs.push(dir);
    }
    for name in [
        "sweep_table.csv",
        "series_n_init_4.csv",
        "series_n_init_8.csv",
        "summary.json",
    ] {
        assert_eq!(read(&dirs[0], name), read(&dirs[1], name), "{name}");
    }
    let table = read(&dirs[0], "sweep_table.csv");
    assert!(table.starts_with("axis,value,target,time_to_target,speedup_vs_first"));
    assert_eq!(table.lines().count(), 1 + 3 * 3);
}

#[test]
fn sweep_without_section_exits_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", BASE);
    let out = speedlab(
        &[
            "sweep",
            "--config",
            &cfg,
            "--out",
            tmp.path().join("o").to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`sweep`"));
}
