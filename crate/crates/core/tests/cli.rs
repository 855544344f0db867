use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use guidelab::data::load_dataset;

const TINY: &str = r#"{
  "data": {"kind": "gmm", "n": 400, "centers": [[-1.0, 0.0], [1.0, 0.0]], "sigma": 0.2},
  "model": {"hidden": [16], "time_dim": 8, "class_dim": 4},
  "train": {"steps": 30, "batch_size": 16},
  "noise": {"kind": "linear-beta", "horizon": 100},
  "sampler": {"kind": "ddim", "steps": 10},
  "embed": {"kind": "identity"},
  "sweep": {
    "schedulers": [{"shape": "static"}, {"shape": "linear"}],
    "omegas": [1.15],
    "samples_per_class": 12,
    "replicates": 1,
    "diversity_group": 4
  },
  "perturb": {"width": 25},
  "traj": {"omegas": [0.0, 5.0], "seeds_per_class": 2},
  "chunk": 5
}"#;

fn guidelab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_guidelab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn write_tiny(dir: &Path) -> String {
    let p = dir.join("tiny.json");
    fs::write(&p, TINY).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn curves_linear_starts_at_twice_omega() {
    let o = guidelab(&[
        "curves", "--shape", "linear", "--omega", "7.5", "--T", "1000", "--points", "1001",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "shape,omega,param,t,weight");
    assert_eq!(lines.len(), 1002);
    let first: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(first[3].parse::<f64>().unwrap(), 0.0);
    assert_eq!(first[4].parse::<f64>().unwrap(), 15.0);
    let last: Vec<&str> = lines[1001].split(',').collect();
    assert_eq!(last[3].parse::<f64>().unwrap(), 1000.0);
    assert_eq!(last[4].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn curves_clamp_takes_floor() {
    let o = guidelab(&[
        "curves",
        "--shape",
        "clamp-linear",
        "--param",
        "1",
        "--omega",
        "14",
        "--points",
        "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let weights: Vec<f64> = stdout(&o)
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(weights, vec![28.0, 14.0, 1.0]);
}

#[test]
fn misspelled_key_exits_with_config_error() {
    let o = guidelab(&["sweep", "--dry-run", "--set", "omga=5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("omga"));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"sweep": {"omegas": [1.0], "replicats": 2}}"#).unwrap();
    let o = guidelab(&["sweep", "--dry-run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("replicats"), "{}", stderr(&o));
}

#[test]
fn unknown_shape_and_flag_are_usage_errors() {
    assert_eq!(
        guidelab(&["curves", "--shape", "zigzag"]).status.code(),
        Some(2)
    );
    assert_eq!(guidelab(&["curves", "--bogus"]).status.code(), Some(2));
    assert_eq!(
        guidelab(&["curves", "--shape", "pcs", "--omega", "1"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn convert_scale_and_help() {
    let o = guidelab(&["--convert-scale", "7.5"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "6.5");
    let o = guidelab(&["--help"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("perturb.width"));
}

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = guidelab(&[
        "sweep",
        "--dry-run",
        "--out",
        out.to_str().unwrap(),
        "--set",
        "sweep.replicates=2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let plan: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(plan["cells"], 3 * 6 * 2);
    assert_eq!(plan["seeds"]["replicates"].as_array().unwrap().len(), 2);
    assert_eq!(plan["config"]["sweep"]["replicates"], 2);
    assert!(!out.exists());
}

#[test]
fn sweep_twice_is_byte_identical_and_refuses_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let o = guidelab(&[
            "sweep",
            "--config",
            &cfg,
            "--seed",
            "3",
            "--out",
            d.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["sweep.csv", "manifest.json", "params.bin"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let csv = fs::read_to_string(a.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);
    let o = guidelab(&["sweep", "--config", &cfg, "--out", a.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seed_changes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(guidelab(&[
        "sweep",
        "--config",
        &cfg,
        "--seed",
        "1",
        "--out",
        a.to_str().unwrap()
    ])
    .status
    .success());
    assert!(guidelab(&[
        "sweep",
        "--config",
        &cfg,
        "--seed",
        "2",
        "--out",
        b.to_str().unwrap()
    ])
    .status
    .success());
    assert_ne!(
        fs::read(a.join("sweep.csv")).unwrap(),
        fs::read(b.join("sweep.csv")).unwrap()
    );
}

#[test]
fn train_sample_metrics_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let tr = dir.path().join("train");
    let o = guidelab(&["train", "--config", &cfg, "--out", tr.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let params = tr.join("params.bin");
    assert!(params.exists());

    let sm = dir.path().join("sample");
    let set = format!("model.params_path={}", params.display());
    let o = guidelab(&[
        "sample",
        "--config",
        &cfg,
        "--set",
        &set,
        "--shape",
        "cosine",
        "--omega",
        "2",
        "--n",
        "6",
        "--out",
        sm.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let samples = load_dataset(&sm.join("samples.bin")).unwrap();
    assert_eq!(samples.len(), 12);
    assert_eq!(samples.dim(), 2);

    let o = guidelab(&[
        "metrics",
        "--config",
        &cfg,
        "--samples",
        sm.join("samples.bin").to_str().unwrap(),
        "--scheduler",
        "cosine",
        "--omega",
        "2",
        "--run-id",
        "probe",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("probe,cosine,"));
    let cols: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(cols.len(), lines[0].split(',').count());
    assert!(cols[4].parse::<f64>().unwrap() >= 0.0);
}

#[test]
fn gen_data_writes_dataset_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let out = dir.path().join("d");
    let o = guidelab(&["gen-data", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ds = load_dataset(&out.join("dataset.bin")).unwrap();
    assert_eq!(ds.len(), 400);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["runner"], "gen-data");
}
