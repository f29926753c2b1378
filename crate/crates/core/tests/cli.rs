use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL_BEAM: &str = r#"
methods = ["mean-solve", "sisi", "collocate", "monte-carlo"]

[model]
kind = "beam"
elements = 20

[field]
cov = 0.10
corr_len = 0.25
m_xi = 2

[discretization]
p = 2
grid_level = 3

[galerkin]
modes = [1, 2]
max_iter = 10
tol = 0.0

[monte_carlo]
samples = 300
seed = 3

[output]
kde_points = 50
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stoch-eig"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("cfg.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn compare_writes_outputs_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL_BEAM);
    let outs = [tmp.path().join("a"), tmp.path().join("b")];
    for out in &outs {
        let o = run(&["compare", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let expected = [
        "mean_eigenvalues.csv",
        "sc_samples.csv",
        "mc_samples.csv",
        "table_mode1.csv",
        "table_mode2.csv",
        "pdf_overlap.csv",
        "summary.jsonl",
    ];
    for name in expected {
        assert_eq!(read(&outs[0], name), read(&outs[1], name), "{name} differs between runs");
    }
    let table = read(&outs[0], "table_mode1.csv");
    assert!(table.lines().next().unwrap().starts_with("d,k,"));
    let summary = read(&outs[0], "summary.jsonl");
    for line in summary.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("method").is_some());
    }
    let mc = read(&outs[0], "mc_samples.csv");
    assert_eq!(mc.lines().count(), 301);
}

#[test]
fn seed_flag_changes_monte_carlo_only() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL_BEAM);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(run(&["monte-carlo", "--config", &cfg, "--out", a.to_str().unwrap()]).status.success());
    let o = run(&["monte-carlo", "--config", &cfg, "--out", b.to_str().unwrap(), "--seed", "99"]);
    assert!(o.status.success());
    assert_ne!(read(&a, "mc_samples.csv"), read(&b, "mc_samples.csv"));
}

#[test]
fn invalid_config_fails_with_message() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &SMALL_BEAM.replace("cov = 0.10", "cov = -1.0"));
    let o = run(&["mean-solve", "--config", &cfg, "--out", tmp.path().join("o").to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("error:"), "{err}");

    let cfg = write_config(tmp.path(), &format!("{SMALL_BEAM}\n[bogus]\nx = 1\n"));
    let o = run(&["mean-solve", "--config", &cfg, "--out", tmp.path().join("o").to_str().unwrap()]);
    assert!(!o.status.success());

    let o = run(&["mean-solve", "--config", "/nonexistent/cfg.toml", "--out", "/tmp/x"]);
    assert!(!o.status.success());
}
