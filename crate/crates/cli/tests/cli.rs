use std::path::Path;
use std::process::{Command, Output};

fn projbnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_projbnn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = projbnn(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn metrics(dir: &Path) -> serde_json::Value {
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("wall_clock_seconds");
    v
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        ok(&["gen-data", "--kind", "four-modes", "--seed", "7", "--out", p.to_str().unwrap()]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn toy_rbf_has_one_input_and_one_output_column() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("toy.csv");
    ok(&["gen-data", "--kind", "toy-rbf", "--out", p.to_str().unwrap()]);
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().next().unwrap(), "x_0,y_0");
}

#[test]
fn sine_writes_a_task_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("sine.csv");
    ok(&["gen-data", "--kind", "sine", "--tasks", "3", "--points", "5", "--out", p.to_str().unwrap()]);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("sine.tasks.json")).unwrap()).unwrap();
    assert_eq!(manifest.as_array().unwrap().len(), 3);
    assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 16);
}

#[test]
fn unknown_kind_is_a_usage_error() {
    assert_eq!(projbnn(&["gen-data", "--kind", "spiral"]).status.code(), Some(2));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(projbnn(&["pipeline", "--bogus"]).status.code(), Some(2));
}

#[test]
fn invalid_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"fge": {"snapshot": 3}}"#).unwrap();
    assert_eq!(projbnn(&["pipeline", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(projbnn(&["pipeline", "--scale", "-1"]).status.code(), Some(2));
}

#[test]
fn qz_only_needs_a_decoder() {
    let out = projbnn(&["pipeline", "--method", "qz_only", "--scale", "0.01"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("decoder"));
}

#[test]
fn bbb_skips_harvesting_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let runs: Vec<_> = ["one", "two"]
        .iter()
        .map(|name| {
            let d = dir.path().join(name);
            let stdout = ok(&[
                "pipeline", "--method", "bbb", "--scale", "0.01", "--lr", "0.01", "--seed", "3", "--out",
                d.to_str().unwrap(),
            ]);
            assert!(!stdout.contains("fge:"));
            d
        })
        .collect();
    for d in &runs {
        assert!(d.join("model.json").exists());
        assert!(d.join("bands.csv").exists());
        assert!(!d.join("snapshots.csv").exists());
        assert!(!d.join("decoder.json").exists());
        assert!(!d.join("decoders").exists());
    }
    assert_eq!(metrics(&runs[0]), metrics(&runs[1]));
}

#[test]
fn stages_run_in_isolation_and_eval_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let common = ["--scale", "0.01", "--latent-dim", "2", "--lr", "0.01", "--seed", "1"];
    let with = |cmd: &str, extra: &[&str]| {
        let mut args = vec![cmd];
        args.extend(common);
        args.extend(extra);
        ok(&args)
    };
    let fge_dir = d.join("fge");
    with("fge", &["--out", fge_dir.to_str().unwrap()]);
    let snaps = fge_dir.join("snapshots.csv");
    assert!(snaps.exists());
    assert!(fge_dir.join("splits/test.csv").exists());

    let pcae_dir = d.join("pcae");
    with("pcae", &["--snapshots", snaps.to_str().unwrap(), "--out", pcae_dir.to_str().unwrap()]);
    let decoder = pcae_dir.join("decoders/dz2.json");
    assert!(decoder.exists());

    let vi_dir = d.join("vi");
    let stdout = with("vi", &["--decoder", decoder.to_str().unwrap(), "--out", vi_dir.to_str().unwrap()]);
    assert!(stdout.contains("reusing"));
    let trained = metrics(&vi_dir);

    let evald = d.join("eval.json");
    ok(&[
        "eval",
        "--model",
        vi_dir.join("model.json").to_str().unwrap(),
        "--data",
        vi_dir.join("splits/test.csv").to_str().unwrap(),
        "--out",
        evald.to_str().unwrap(),
    ]);
    let re: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&evald).unwrap()).unwrap();
    assert_eq!(re["test_marginal_ll"], trained["test_marginal_ll"]);
    assert_eq!(re["test_rmse"], trained["test_rmse"]);
}

#[test]
fn eval_names_a_missing_model() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("missing-model.json");
    let data = dir.path().join("d.csv");
    ok(&["gen-data", "--kind", "toy-rbf", "--out", data.to_str().unwrap()]);
    let out = projbnn(&["eval", "--model", model.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing-model.json"));
}

#[test]
fn vi_without_decoder_is_rejected_for_projected_methods() {
    assert_eq!(projbnn(&["vi", "--method", "projbnn", "--scale", "0.01"]).status.code(), Some(2));
}

#[test]
fn meta_fits_one_latent_per_task() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("meta");
    ok(&["meta", "--scale", "0.01", "--lr", "0.01", "--out", d.to_str().unwrap()]);
    let m = metrics(&d);
    assert_eq!(m["method"], "meta");
    assert_eq!(m["tasks"].as_array().unwrap().len(), 8);
}
