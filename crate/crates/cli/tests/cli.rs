use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use axum::body::{to_bytes, Body};
use axum::http::{header, Request, StatusCode};
use serde_json::Value;
use tower::ServiceExt;

use socialcircle::Checkpoint;
use socialcircle_service::{router, AppState, CaseIndex, LoadedModel};

fn sclab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sclab"))
        .args(args)
        .output()
        .expect("run sclab")
}

fn ok(args: &[&str]) -> String {
    let out = sclab(args);
    assert!(
        out.status.success(),
        "sclab {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, kind: &str, n: usize, seed: u64) -> PathBuf {
    let path = dir.join(format!("{kind}.txt"));
    ok(&[
        "synth",
        "--kind",
        kind,
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        s(&path),
    ]);
    path
}

/// A small quickly trained noise-free checkpoint on avoidance scenes.
fn small_checkpoint(dir: &Path, data: &Path) -> PathBuf {
    let out = dir.join("small");
    ok(&[
        "train",
        "--data",
        s(data),
        "--out",
        s(&out),
        "--epochs",
        "2",
        "--lr",
        "0.001",
        "--set",
        "d=16",
        "--set",
        "d_sc=16",
        "--set",
        "n_layers=1",
        "--set",
        "noise_dim=0",
    ]);
    out.join("checkpoint.json")
}

fn first_case(path: &Path) -> String {
    let text = fs::read_to_string(path).unwrap();
    let tracks = socialcircle::data::parse_trajectory_file(&text).unwrap();
    let scene = socialcircle_service::scene_id(path);
    socialcircle::data::build_windows(&tracks, &scene, 8, 12, 1)[0]
        .case_id
        .clone()
}

fn bits(v: &Value) -> Vec<u64> {
    v.as_array()
        .unwrap()
        .iter()
        .flat_map(|s| s.as_array().unwrap().iter())
        .flat_map(|p| {
            p.as_array()
                .unwrap()
                .iter()
                .map(|x| x.as_f64().unwrap().to_bits())
        })
        .collect()
}

#[test]
fn train_then_eval_overfits_the_smoke_set() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "linear", 10, 0);
    let run = dir.path().join("run");
    ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--seed",
        "0",
        "--epochs",
        "200",
        "--lr",
        "0.003",
    ]);
    for file in [
        "checkpoint.json",
        "loss_curve.txt",
        "manifest.json",
        "settings.txt",
    ] {
        assert!(run.join(file).exists(), "{file}");
    }
    let curve = fs::read_to_string(run.join("loss_curve.txt")).unwrap();
    assert_eq!(curve.lines().count(), 201);

    let eval = dir.path().join("eval");
    let report = ok(&[
        "eval",
        "--checkpoint",
        s(&run.join("checkpoint.json")),
        "--data",
        s(&data),
        "--out",
        s(&eval),
        "--k",
        "1",
    ]);
    let min_ade: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("min_ade_k = "))
        .expect("min_ade_k line")
        .parse()
        .unwrap();
    assert!(min_ade < 0.05, "minADE1 {min_ade}");
    assert_eq!(fs::read_to_string(eval.join("report.txt")).unwrap(), report);
    assert_eq!(
        fs::read_to_string(eval.join("per_case.tsv"))
            .unwrap()
            .lines()
            .count(),
        11
    );
}

#[test]
fn probe_baseline_matches_eval_samples() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "avoidance", 3, 4);
    let out = dir.path().join("run");
    ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--epochs",
        "1",
        "--set",
        "d=16",
        "--set",
        "d_sc=16",
        "--set",
        "n_layers=1",
    ]);
    let ckpt = out.join("checkpoint.json");

    let eval = dir.path().join("eval");
    ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--out",
        s(&eval),
        "--k",
        "3",
        "--seed",
        "7",
        "--dump-samples",
    ]);
    let dump: Value =
        serde_json::from_str(&fs::read_to_string(eval.join("samples.json")).unwrap()).unwrap();
    for entry in dump.as_array().unwrap() {
        let id = entry["case_id"].as_str().unwrap();
        let probe: Value = serde_json::from_str(&ok(&[
            "probe",
            "--checkpoint",
            s(&ckpt),
            "--data",
            s(&data),
            "--case",
            id,
            "--k",
            "3",
            "--seed",
            "7",
        ]))
        .unwrap();
        assert_eq!(bits(&probe["predictions"]), bits(&entry["samples"]), "{id}");
    }
}

#[test]
fn manual_neighbor_is_interpolated_and_plotted() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "avoidance", 2, 1);
    let ckpt = small_checkpoint(dir.path(), &data);
    let id = first_case(&data);
    let out = dir.path().join("probe");
    let plot = dir.path().join("plot.txt");
    let stdout = ok(&[
        "probe",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--case",
        &id,
        "--manual",
        "0,0:7,0",
        "--out",
        s(&out),
        "--plot-data",
        s(&plot),
    ]);
    let response: Value = serde_json::from_str(&stdout).unwrap();
    let manual: Vec<&Value> = response["neighbors"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|n| n["manual"] == true)
        .collect();
    assert_eq!(manual.len(), 1);
    let expected: Vec<Value> = (0..8).map(|i| serde_json::json!([i as f64, 0.0])).collect();
    assert_eq!(manual[0]["points"].as_array().unwrap(), &expected);

    assert_eq!(fs::read_to_string(out.join("probe.json")).unwrap(), stdout);
    assert!(out.join("manifest.json").exists() && out.join("request.json").exists());
    let plot = fs::read_to_string(plot).unwrap();
    assert!(plot
        .lines()
        .any(|l| l
            == "manual/manual-0: 0.0,0.0 1.0,0.0 2.0,0.0 3.0,0.0 4.0,0.0 5.0,0.0 6.0,0.0 7.0,0.0"));
    assert!(plot.lines().any(|l| l.starts_with("observed: ")));
    assert!(plot.lines().any(|l| l.starts_with("prediction/0: ")));

    // Negative coordinates parse as values, not flags.
    ok(&[
        "probe",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--case",
        &id,
        "--manual",
        "-1,-2:-3,-4.5",
    ]);
}

#[test]
fn partition_override_on_probe() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "avoidance", 2, 2);
    let ckpt = small_checkpoint(dir.path(), &data);
    let id = first_case(&data);
    for n in [4usize, 8] {
        let resp: Value = serde_json::from_str(&ok(&[
            "probe",
            "--checkpoint",
            s(&ckpt),
            "--data",
            s(&data),
            "--case",
            &id,
            "--n-partitions",
            &n.to_string(),
        ]))
        .unwrap();
        assert_eq!(resp["partition_boundaries"].as_array().unwrap().len(), n);
    }
    let out = sclab(&[
        "probe",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--case",
        &id,
        "--n-partitions",
        "9",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[tokio::test]
async fn service_predict_matches_cli_probe() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "avoidance", 3, 3);
    let ckpt = small_checkpoint(dir.path(), &data);
    let id = first_case(&data);
    let cli: Value = serde_json::from_str(&ok(&[
        "probe",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--case",
        &id,
        "--seed",
        "11",
    ]))
    .unwrap();

    let checkpoint = Checkpoint::load(&ckpt).unwrap();
    let index = CaseIndex::from_files(
        std::slice::from_ref(&data),
        socialcircle::Unit::Meters,
        8,
        12,
        1,
    )
    .unwrap();
    let app = router(AppState::new(
        index,
        Some(LoadedModel::new(checkpoint, Some(ckpt))),
    ));
    let body = serde_json::json!({ "case_id": id, "manual_neighbors": [], "K": 1, "seed": 11 })
        .to_string();
    let req = Request::post("/predict")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body))
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let http: Value =
        serde_json::from_slice(&to_bytes(resp.into_body(), usize::MAX).await.unwrap()).unwrap();
    assert_eq!(bits(&http["predictions"]), bits(&cli["predictions"]));
    assert_eq!(http, cli);
}

#[test]
fn reruns_into_fresh_directories_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "linear", 4, 9);
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        ok(&[
            "train",
            "--data",
            s(&data),
            "--out",
            s(&out),
            "--epochs",
            "3",
            "--seed",
            "5",
            "--set",
            "d=16",
            "--set",
            "d_sc=16",
        ]);
        outputs.push((
            fs::read(out.join("checkpoint.json")).unwrap(),
            fs::read(out.join("loss_curve.txt")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn config_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "linear", 3, 0);
    let config = dir.path().join("run.conf");
    fs::write(
        &config,
        "# quick run\nepochs = 2\nd = 8\nd_sc = 8\nn_heads = 2\ncheckpoint_every = 1\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    ok(&[
        "train",
        "--config",
        s(&config),
        "--epochs",
        "3",
        "--data",
        s(&data),
        "--out",
        s(&out),
    ]);
    assert_eq!(
        fs::read_to_string(out.join("loss_curve.txt"))
            .unwrap()
            .lines()
            .count(),
        4
    );
    for e in [1, 2] {
        assert!(out.join(format!("checkpoint-epoch{e:04}.json")).exists());
    }
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "train");
    assert_eq!(manifest["settings"]["epochs"], "3");
    assert_eq!(manifest["settings"]["d"], "8");
    let ckpt = Checkpoint::load(out.join("checkpoint.json")).unwrap();
    assert_eq!(ckpt.config.d, 8);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "linear", 3, 0);
    let out = dir.path().join("x");
    let code = |args: &[&str]| {
        let o = sclab(args);
        let stderr = String::from_utf8_lossy(&o.stderr).to_string();
        assert_eq!(
            stderr.trim_end().lines().count(),
            1,
            "diagnostic should be one line: {stderr}"
        );
        o.status.code()
    };
    assert_eq!(
        code(&["train", "--data", s(&data), "--out", s(&out), "--bogus"]),
        Some(1)
    );
    assert_eq!(
        code(&[
            "train",
            "--data",
            s(&data),
            "--out",
            s(&out),
            "--n-partitions",
            "9"
        ]),
        Some(1)
    );
    assert_eq!(
        code(&[
            "train",
            "--data",
            s(&data),
            "--out",
            s(&out),
            "--factors",
            "vx"
        ]),
        Some(1)
    );
    assert_eq!(
        code(&["train", "--data", "/nonexistent/file.txt", "--out", s(&out)]),
        Some(2)
    );
    assert_eq!(
        code(&[
            "train",
            "--config",
            "/nonexistent.conf",
            "--data",
            s(&data),
            "--out",
            s(&out)
        ]),
        Some(2)
    );
    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "0 a 1.0\n").unwrap();
    assert_eq!(
        code(&["train", "--data", s(&bad), "--out", s(&out)]),
        Some(2)
    );
    assert_eq!(
        code(&[
            "train",
            "--data",
            s(&data),
            "--out",
            s(&out),
            "--epochs",
            "3",
            "--batch-size",
            "1",
            "--lr",
            "1e300"
        ]),
        Some(3)
    );
    assert!(sclab(&["--help"]).status.success());
}
