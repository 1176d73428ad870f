use fwspde::lab::SweepReport;
use fwspde::runner::{prepare, resolve_path, run};
use fwspde::scenario::{load_scenario_str, parse_scenario, ScenarioConfig};

fn scenario(text: &str) -> ScenarioConfig {
    load_scenario_str(text).unwrap().0
}

fn small_section5(experiment: &str, eps: f64) -> ScenarioConfig {
    scenario(&format!(
        r#"{{"preset": "section5_m3_nu04", "domain": {{"n_grid": 32}},
            "sim": {{"eps": {eps}, "horizon": 0.1}}, "experiment": {experiment}}}"#
    ))
}

#[test]
fn config_json_round_trip() {
    for (name, _) in fwspde::scenario::PRESETS {
        let cfg = scenario(&format!(r#"{{"preset": "{name}"}}"#));
        let text = serde_json::to_string(&cfg).unwrap();
        let back = parse_scenario(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.content_hash(), back.content_hash());
    }
}

#[test]
fn zero_noise_simulation_matches_skeleton_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let sim = small_section5(r#"{"kind": "simulate"}"#, 0.0);
    let sk = small_section5(r#"{"kind": "skeleton"}"#, 0.0);
    run(&sim, &dir.path().join("a")).unwrap();
    run(&sk, &dir.path().join("b")).unwrap();
    let a = std::fs::read(dir.path().join("a/trajectory.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/trajectory.csv")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_section5(
        r#"{"kind": "mc", "n_samples": 64,
            "event": {"kind": "tube", "path": {"kind": "skeleton"}, "delta": 0.05, "complement": true}}"#,
        0.05,
    );
    run(&cfg, &dir.path().join("a")).unwrap();
    run(&cfg, &dir.path().join("b")).unwrap();
    for f in ["estimates.csv", "summary.json"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    let csv = std::fs::read_to_string(dir.path().join("a/estimates.csv")).unwrap();
    assert!(csv.starts_with("name,p_hat,stderr,n,flagged_frac,eps_log_p\n"));
    assert!(csv.ends_with('\n'));
}

#[test]
fn sweep_summary_parses_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario(
        r#"{"preset": "bounded_set_sweep", "domain": {"n_grid": 16}, "sim": {"horizon": 0.1},
            "experiment": {"kind": "sweep", "regime": "bounded-set",
              "family": {"kind": "ball", "radius": 1.0, "directions": 1},
              "controls": 1, "norm_bound": 1.0, "delta": 0.5, "eps_ladder": [0.2, 0.1],
              "n_samples": 20, "bandwidth": 2}}"#,
    );
    let out = run(&cfg, dir.path()).unwrap();
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out.summary).unwrap()).unwrap();
    let back: ScenarioConfig = serde_json::from_value(v["config"].clone()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(v["config_hash"].as_str().unwrap(), cfg.content_hash());
    let rep: SweepReport = serde_json::from_value(v["results"]["report"].clone()).unwrap();
    let direct: SweepReport = serde_json::from_value(out.results["report"].clone()).unwrap();
    assert_eq!(rep, direct);
    assert_eq!(rep.cells.len(), 2 * 1 * 2);
}

#[test]
fn ldp_curve_table_has_ladder_rows_and_gap() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario(
        r#"{"preset": "linear_additive", "domain": {"n_grid": 16},
            "experiment": {"kind": "ldp-curve", "n_samples": 40,
              "tube": {"path": {"kind": "mode_profile", "mode": 0, "amplitude": 1.0}},
              "eps_ladder": [0.2, 0.1, 0.05, 0.02]}}"#,
    );
    run(&cfg, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert!(header.contains(&"gap"));
    assert_eq!(lines.count(), 4);
}

#[test]
fn experiments_fail_before_running_on_invalid_models() {
    let mut cfg = small_section5(r#"{"kind": "simulate"}"#, 0.0);
    cfg.noise.beta = 0.4;
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(run(&cfg, dir.path()), Err(fwspde::Error::Validation(_))));
    assert!(!dir.path().join("trajectory.csv").exists());
}

#[test]
fn point_profile_peaks_at_its_point() {
    let cfg = scenario(r#"{"preset": "linear_additive", "domain": {"n_grid": 32}, "sim": {"horizon": 0.5}}"#);
    let p = prepare(&cfg).unwrap();
    let path = fwspde::scenario::PathConfig::PointProfile { component: 0, xi_index: 10, amplitude: 2.0 };
    let phi = resolve_path(&p.model, &p.params, &p.x, &path).unwrap();
    assert!((phi.last().values()[10] - 2.0).abs() < 1e-12);
    assert!((phi.sup_norm() - 2.0).abs() < 1e-12);
    assert!(phi.frame(0).sup_norm() < 1e-12);
}

#[test]
fn overlay_switching_kind_replaces_the_block() {
    let cfg = scenario(
        r#"{"preset": "linear_additive", "experiment": {"tube": {"path": {"kind": "mode_profile", "mode": 2, "amplitude": 1.0}}}}"#,
    );
    let text = serde_json::to_string(&cfg.experiment).unwrap();
    assert!(text.contains("mode_profile") && !text.contains("xi_index"));
}
