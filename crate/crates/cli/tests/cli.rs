use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_softguide");

fn shipped(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn small_config(dir: &Path, edit: impl Fn(String) -> String) -> PathBuf {
    let src = fs::read_to_string(shipped("tiny-discrete-svdd.toml")).unwrap().replace("particles = 10000", "particles = 2000");
    let path = dir.join("exp.toml");
    fs::write(&path, edit(src)).unwrap();
    path
}

fn softguide(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = softguide(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn column(csv_text: &str, name: &str) -> Vec<String> {
    let mut r = csv::Reader::from_reader(csv_text.as_bytes());
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[idx].to_string()).collect()
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), |s| s);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["run", cfg.to_str().unwrap(), "--out-dir", d.to_str().unwrap()]);
    }
    for f in ["summary.csv", "samples.csv", "trace.csv"] {
        assert_eq!(read(&a, f), read(&b, f), "{f}");
    }
}

#[test]
fn thread_count_does_not_change_outputs() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), |s| s.replace("algorithm = \"svdd\"", "algorithm = \"smc\""));
    let (a, b) = (tmp.path().join("one"), tmp.path().join("four"));
    ok(&["--threads", "1", "run", cfg.to_str().unwrap(), "--out-dir", a.to_str().unwrap()]);
    ok(&["--threads", "4", "run", cfg.to_str().unwrap(), "--out-dir", b.to_str().unwrap()]);
    for f in ["summary.csv", "samples.csv", "trace.csv"] {
        assert_eq!(read(&a, f), read(&b, f), "{f}");
    }
}

#[test]
fn seed_flag_overrides_the_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), |s| s);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["run", cfg.to_str().unwrap(), "--seed", "1", "--out-dir", a.to_str().unwrap()]);
    ok(&["run", cfg.to_str().unwrap(), "--seed", "2", "--out-dir", b.to_str().unwrap()]);
    assert_eq!(column(&read(&a, "summary.csv"), "seed"), ["1"]);
    assert_ne!(read(&a, "samples.csv"), read(&b, "samples.csv"));
}

#[test]
fn zero_alpha_with_smc_is_rejected_at_its_line() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), |s| {
        s.replace("algorithm = \"svdd\"", "algorithm = \"smc\"").replace("alpha = 1.0", "alpha = 0.0")
    });
    let out = softguide(&["run", cfg.to_str().unwrap(), "--out-dir", tmp.path().join("o").to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let line = fs::read_to_string(&cfg).unwrap().lines().position(|l| l.starts_with("alpha = 0.0")).unwrap() + 1;
    assert!(err.contains(&format!("exp.toml:{line}: sampler.alpha:")), "{err}");
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn unknown_keys_are_reported_with_a_line() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), |s| s.replace("candidates = 16", "candidates = 16\nparticels = 3"));
    let out = softguide(&["check", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let line = fs::read_to_string(&cfg).unwrap().lines().position(|l| l.starts_with("particels")).unwrap() + 1;
    assert!(err.contains(&format!("exp.toml:{line}:")) && err.contains("particels"), "{err}");
}

#[test]
fn shipped_config_matches_the_oracle() {
    let tmp = TempDir::new().unwrap();
    let cfg = shipped("tiny-discrete-svdd.toml");
    ok(&["run", cfg.to_str().unwrap(), "--out-dir", tmp.path().to_str().unwrap()]);
    let tv: f64 = column(&read(tmp.path(), "summary.csv"), "tv_to_oracle")[0].parse().unwrap();
    assert!(tv < 0.05, "TV {tv}");
}

#[test]
fn shipped_configs_validate() {
    for entry in fs::read_dir(shipped("")).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            ok(&["check", path.to_str().unwrap()]);
        }
    }
}

#[test]
fn one_point_sweep_equals_a_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), |s| s.replace("values = [1, 2, 4, 8, 16]", "values = [16]"));
    let (run, sweep) = (tmp.path().join("run"), tmp.path().join("sweep"));
    ok(&["run", cfg.to_str().unwrap(), "--out-dir", run.to_str().unwrap()]);
    ok(&["sweep", cfg.to_str().unwrap(), "--out-dir", sweep.to_str().unwrap()]);
    let summary = read(&run, "summary.csv");
    let mut s = csv::Reader::from_reader(summary.as_bytes());
    let want: Vec<String> = s.records().next().unwrap().unwrap().iter().map(String::from).collect();
    let swept = read(&sweep, "sweep.csv");
    let mut r = csv::Reader::from_reader(swept.as_bytes());
    let rows: Vec<_> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][0], "candidates");
    let got: Vec<String> = rows[0].iter().skip(2).map(String::from).collect();
    assert_eq!(got, want);
}

#[test]
fn sweep_writes_one_row_per_grid_point_in_order() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), |s| s);
    ok(&["sweep", cfg.to_str().unwrap(), "--out-dir", tmp.path().to_str().unwrap()]);
    let text = read(tmp.path(), "sweep.csv");
    assert_eq!(column(&text, "value"), ["1", "2", "4", "8", "16"]);
    assert_eq!(column(&text, "candidates"), ["1", "2", "4", "8", "16"]);
    let dat = read(tmp.path(), "sweep.dat");
    assert_eq!(dat.lines().filter(|l| !l.starts_with('#')).count(), 5);
    assert_eq!(read(tmp.path(), "sweep_timing.csv").lines().count(), 6);
}

#[test]
fn unknown_sweep_parameter_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), |s| s.replace("parameter = \"candidates\"", "parameter = \"temperature\""));
    let out = softguide(&["sweep", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("sweep.parameter") && err.contains("temperature"), "{err}");
}

#[test]
fn oracle_table_is_normalized() {
    let tmp = TempDir::new().unwrap();
    ok(&["oracle", shipped("tiny-discrete-svdd.toml").to_str().unwrap(), "--out-dir", tmp.path().to_str().unwrap()]);
    let text = read(tmp.path(), "oracle.csv");
    assert_eq!(column(&text, "state"), ["AA", "AB", "BA", "BB"]);
    for col in ["pretrained", "target"] {
        let total: f64 = column(&text, col).iter().map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-12, "{col} sums to {total}");
    }
}

#[test]
fn refinement_never_lowers_the_reward() {
    let tmp = TempDir::new().unwrap();
    ok(&["refine", shipped("tiny-discrete-svdd.toml").to_str().unwrap(), "--out-dir", tmp.path().to_str().unwrap()]);
    let text = read(tmp.path(), "refine.csv");
    let current: Vec<f64> = column(&text, "current_reward").iter().map(|v| v.parse().unwrap()).collect();
    assert_eq!(current.len(), 21);
    assert!(current.windows(2).all(|w| w[1] >= w[0]));
    assert!(column(&text, "distance").iter().all(|d| d.parse::<f64>().unwrap() <= 1.0));
}

#[test]
fn distillation_writes_a_normalized_student() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), |s| s.replace("trajectories = 20000", "trajectories = 2000"));
    ok(&["distill", cfg.to_str().unwrap(), "--out-dir", tmp.path().to_str().unwrap()]);
    let table = read(tmp.path(), "student.csv");
    let mut rows: std::collections::BTreeMap<(String, String), f64> = Default::default();
    let mut r = csv::Reader::from_reader(table.as_bytes());
    for rec in r.records() {
        let rec = rec.unwrap();
        *rows.entry((rec[0].to_string(), rec[1].to_string())).or_default() += rec[3].parse::<f64>().unwrap();
    }
    assert!(!rows.is_empty());
    assert!(rows.values().all(|s| (s - 1.0).abs() < 1e-9));
    let summary = read(tmp.path(), "distill.csv");
    assert_eq!(column(&summary, "objective"), ["forward_kl"]);
}
