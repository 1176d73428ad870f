use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn presets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets")
}

fn fwspde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fwspde")).args(args).env_remove("FWSPDE_THREADS").output().unwrap()
}

#[test]
fn validate_every_preset() {
    let out = tempfile::tempdir().unwrap();
    for entry in std::fs::read_dir(presets()).unwrap() {
        let p = entry.unwrap().path();
        let o = fwspde(&["validate", "--config", p.to_str().unwrap(), "--out", out.path().to_str().unwrap()]);
        let stdout = String::from_utf8_lossy(&o.stdout);
        assert!(o.status.success(), "{}: {stdout}{}", p.display(), String::from_utf8_lossy(&o.stderr));
        assert!(stdout.starts_with("config_hash "));
        assert!(!stdout.contains("FAILED"));
    }
}

#[test]
fn mutant_fails_with_witness() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("mutant.json");
    std::fs::write(&cfg, r#"{"preset": "section5_m3_nu04", "noise": {"beta": 0.4}}"#).unwrap();
    let o = fwspde(&["validate", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("FAILED noise-eigenvalue-sum"), "{stdout}");
    // other experiments refuse to run
    let o = fwspde(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("noise-eigenvalue-sum"));
}

#[test]
fn parse_errors_are_positioned() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("empty.json");
    std::fs::write(&cfg, "").unwrap();
    let o = fwspde(&["validate", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 1"), "{err}");
}

#[test]
fn seed_override_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s.json");
    std::fs::write(
        &cfg,
        r#"{"preset": "section5_m3_nu04", "domain": {"n_grid": 16}, "sim": {"horizon": 0.05}}"#,
    )
    .unwrap();
    let run = |seed: &str, out: &str, threads: &str| {
        let o = fwspde(&["simulate", "--config", cfg.to_str().unwrap(), "--seed", seed, "--out", out, "--threads", threads]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(Path::new(out).join("trajectory.csv")).unwrap()
    };
    let d = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let a = run("1", &d("a"), "1");
    let b = run("1", &d("b"), "3");
    let c = run("2", &d("c"), "1");
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn experiment_kind_must_match_subcommand() {
    let p = presets().join("ou_exit.json");
    let o = fwspde(&["sweep", "--config", p.to_str().unwrap()]);
    assert!(!o.status.success());
}
