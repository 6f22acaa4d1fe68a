use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn ped(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ped")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(p: &Path, text: &str) {
    fs::write(p, text).unwrap();
}

fn csv_shape(p: &Path) -> (usize, usize) {
    let text = fs::read_to_string(p).unwrap();
    let mut it = text.lines().next().unwrap().split(',').map(|v| v.parse::<usize>().unwrap());
    (it.next().unwrap(), it.next().unwrap())
}

const SMALL: &str = r#"{"dataset": {"dims": [8, 2], "samples": 100, "seed": 4},
  "train": {"epochs": 1, "batch_size": 50},
  "eval": {"seeds": [0, 1, 2], "backbones": ["frozen-pca"], "downstream": {"epochs": 5, "batch_size": 50}}}"#;

fn small_dataset(root: &Path) -> std::path::PathBuf {
    let cfg = root.join("cfg.json");
    write(&cfg, SMALL);
    let data = root.join("data");
    ok(&ped(&["--config", s(&cfg), "--out", s(&data), "gen-data"]));
    data
}

/// One observation `y = (1, 1)` with a 2 x 2 relu layer.
fn relu_example(root: &Path, w: [f64; 4]) -> (std::path::PathBuf, std::path::PathBuf) {
    let data = root.join("relu_data");
    fs::create_dir_all(&data).unwrap();
    write(&data.join("Y.csv"), "2,1\n1.0\n1.0\n");
    write(&data.join("Z_true.csv"), "2,1\n0.0\n0.0\n");
    write(&data.join("W_true.csv"), "2,2\n1.0,0.0\n0.0,1.0\n");
    write(
        &data.join("meta.json"),
        r#"{"family": "gaussian", "maps": ["relu"], "seed": 0, "dims": [2, 2], "resolution": 317, "samples": 1, "clamp_count": 0}"#,
    );
    let layer = root.join("relu_layer.json");
    write(
        &layer,
        &format!(
            r#"{{"d": 2, "l": 2, "lambda": 1.0, "family": "gaussian", "canonical": "relu", "W": [{}, {}, {}, {}], "B": [0.0, 0.0]}}"#,
            w[0], w[1], w[2], w[3]
        ),
    );
    (data, layer)
}

#[test]
fn gen_data_writes_consistent_files() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let mut names: Vec<String> = fs::read_dir(&data).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["W_true.csv", "Y.csv", "Z_true.csv", "meta.json"]);
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(data.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["samples"], 100);
    assert_eq!(csv_shape(&data.join("Y.csv")), (8, 100));
    assert_eq!(csv_shape(&data.join("Z_true.csv")), (2, 100));
    assert_eq!(csv_shape(&data.join("W_true.csv")), (8, 2));
}

#[test]
fn gen_data_is_deterministic_and_sweeps() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    write(&cfg, SMALL);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&ped(&["--config", s(&cfg), "--out", s(&a), "gen-data"]));
    ok(&ped(&["--config", s(&cfg), "--out", s(&b), "--workers", "2", "gen-data"]));
    for f in ["Y.csv", "Z_true.csv", "W_true.csv", "meta.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let sweep = tmp.path().join("sweep");
    ok(&ped(&["--config", s(&cfg), "--out", s(&sweep), "gen-data", "--sweep", "3"]));
    let ws: Vec<Vec<u8>> = (0..3).map(|k| fs::read(sweep.join(format!("seed{k}/W_true.csv"))).unwrap()).collect();
    assert!(ws[0] != ws[1] && ws[1] != ws[2] && ws[0] != ws[2]);
}

#[test]
fn train_smoke_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let run = tmp.path().join("run");
    let start = Instant::now();
    ok(&ped(&["--config", s(&tmp.path().join("cfg.json")), "--out", s(&run), "train", "--data", s(&data)]));
    assert!(start.elapsed().as_secs() < 60);
    let losses = fs::read_to_string(run.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 3);
    assert!(run.join("checkpoint.json").exists() && run.join("model.json").exists());

    let more = tmp.path().join("more.json");
    write(&more, &SMALL.replace("\"epochs\": 1,", "\"epochs\": 3,"));
    let resumed = tmp.path().join("resumed");
    ok(&ped(&[
        "--config",
        s(&more),
        "--out",
        s(&resumed),
        "train",
        "--data",
        s(&data),
        "--resume",
        s(&run.join("checkpoint.json")),
    ]));
    let epochs: Vec<usize> = fs::read_to_string(resumed.join("losses.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(epochs, [0, 0, 1, 1, 2, 2]);

    // an uninterrupted 3-epoch run writes the same history
    let straight = tmp.path().join("straight");
    ok(&ped(&["--config", s(&more), "--out", s(&straight), "train", "--data", s(&data)]));
    assert_eq!(
        fs::read(straight.join("losses.csv")).unwrap(),
        fs::read(resumed.join("losses.csv")).unwrap()
    );
}

#[test]
fn deep_training_marks_frozen_layers() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("deep.json");
    write(
        &cfg,
        r#"{"dataset": {"dims": [8, 4, 2], "maps": ["identity", "identity"], "samples": 60},
            "train": {"epochs": 2, "batch_size": 30, "freeze_period": 1}}"#,
    );
    let data = tmp.path().join("data");
    ok(&ped(&["--config", s(&cfg), "--out", s(&data), "gen-data"]));
    assert!(data.join("W_true_2.csv").exists());
    let run = tmp.path().join("run");
    ok(&ped(&["--config", s(&cfg), "--out", s(&run), "train", "--data", s(&data)]));
    let losses = fs::read_to_string(run.join("losses.csv")).unwrap();
    let mut lines = losses.lines();
    assert!(lines.next().unwrap().ends_with(",frozen_layers"));
    assert!(lines.next().unwrap().ends_with(",1;2"));
    assert!(losses.lines().last().unwrap().ends_with(",2"));
    let emb = tmp.path().join("emb");
    ok(&ped(&["--config", s(&cfg), "--out", s(&emb), "embed", "--checkpoint", s(&run.join("checkpoint.json")), "--data", s(&data)]));
    assert_eq!(csv_shape(&emb.join("embeddings.csv")), (2, 60));
}

#[test]
fn embed_reports_alignment_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let cfg = tmp.path().join("cfg.json");
    let run = tmp.path().join("run");
    ok(&ped(&["--config", s(&cfg), "--out", s(&run), "train", "--data", s(&data)]));
    let ck = run.join("checkpoint.json");
    let a = tmp.path().join("ea");
    let b = tmp.path().join("eb");
    let stdout = ok(&ped(&["--out", s(&a), "embed", "--checkpoint", s(&ck), "--data", s(&data)]));
    assert!(stdout.contains("alignment R^2:"), "{stdout}");
    ok(&ped(&["--out", s(&b), "embed", "--checkpoint", s(&ck), "--data", s(&data)]));
    for f in ["embeddings.csv", "embeddings_qr.csv", "alignment.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(csv_shape(&a.join("embeddings_qr.csv")), (2, 100));
}

#[test]
fn zero_weight_checkpoint_embeds_to_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let layer = tmp.path().join("zero.json");
    write(
        &layer,
        &format!(
            r#"{{"d": 8, "l": 2, "lambda": 0.1, "family": "gaussian", "canonical": "identity", "W": [{}], "B": [{}]}}"#,
            vec!["0.0"; 16].join(","),
            vec!["0.0"; 8].join(",")
        ),
    );
    let out = tmp.path().join("emb");
    let stdout = ok(&ped(&["--out", s(&out), "embed", "--checkpoint", s(&layer), "--data", s(&data)]));
    assert!(stdout.contains("rank deficient"));
    let text = fs::read_to_string(out.join("embeddings.csv")).unwrap();
    assert!(text.lines().skip(1).all(|l| l.split(',').all(|v| v.parse::<f64>().unwrap() == 0.0)));
}

#[test]
fn diagnose_verdicts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let run = tmp.path().join("run");
    ok(&ped(&["--config", s(&tmp.path().join("cfg.json")), "--out", s(&run), "train", "--data", s(&data)]));
    let stdout = ok(&ped(&["--out", s(&tmp.path().join("d1")), "diagnose", "--checkpoint", s(&run.join("checkpoint.json")), "--data", s(&data)]));
    assert!(stdout.contains("verdict: always admissible"), "{stdout}");

    let (rdata, layer) = relu_example(tmp.path(), [2f64.sqrt(), 0.0, 0.0, 1.0]);
    let out = tmp.path().join("d2");
    let stdout = ok(&ped(&["--out", s(&out), "diagnose", "--checkpoint", s(&layer), "--data", s(&rdata)]));
    assert!(stdout.contains("verdict: violated"), "{stdout}");
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("diagnose.json")).unwrap()).unwrap();
    assert!((rep["layers"][0]["product"].as_f64().unwrap() - 2.0).abs() < 1e-9);
    assert!((rep["layers"][0]["kappa"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn diagnose_enumerates_relu_catalog() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, layer) = relu_example(tmp.path(), [0.3, 0.0, 0.0, 0.3]);
    let out = tmp.path().join("diag");
    let stdout = ok(&ped(&["--out", s(&out), "diagnose", "--checkpoint", s(&layer), "--data", s(&data), "--enumerate"]));
    assert!(stdout.contains("pattern 11  z* = (0.275229, 0.275229)  consistent=true"), "{stdout}");
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("diagnose.json")).unwrap()).unwrap();
    let rows = rep["catalog"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    let zero = rows.iter().find(|r| r["pattern"] == "00").unwrap();
    assert_eq!(zero["boundary"], true);
    assert_eq!(zero["z_star"], serde_json::json!([0.0, 0.0]));
}

#[test]
fn downstream_wins_tally() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let cfg = tmp.path().join("cfg.json");
    let one = tmp.path().join("one");
    ok(&ped(&["--config", s(&cfg), "--out", s(&one), "eval-downstream", "--data", s(&data)]));
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(one.join("downstream.json")).unwrap()).unwrap();
    assert_eq!(rep[0]["backbone"], "frozen-pca");
    assert_eq!(rep[0]["wins"], 3);
    assert_eq!(rep[0]["seeds"].as_array().unwrap().len(), 3);

    // identical backbones tie on every seed; the earlier one takes the win
    let z = data.join("Z_true.csv");
    let two = tmp.path().join("two");
    let ext_a = format!("first={}", s(&z));
    let ext_b = format!("second={}", s(&z));
    let no_pca = tmp.path().join("nopca.json");
    write(&no_pca, &SMALL.replace(r#""backbones": ["frozen-pca"]"#, r#""backbones": []"#));
    ok(&ped(&["--config", s(&no_pca), "--out", s(&two), "eval-downstream", "--data", s(&data), "--external", &ext_a, "--external", &ext_b]));
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(two.join("downstream.json")).unwrap()).unwrap();
    assert_eq!(rep[0]["seeds"], rep[1]["seeds"]);
    assert_eq!((rep[0]["wins"].as_u64(), rep[1]["wins"].as_u64()), (Some(3), Some(0)));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    write(&bad, "{\n  \"dataset\": {\"dimz\": [3, 2]}\n}");
    let out = ped(&["--config", s(&bad), "--out", s(&tmp.path().join("x")), "gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("dimz") && err.contains("line 2"), "{err}");

    let missing = ped(&["--out", s(&tmp.path().join("y")), "train", "--data", s(&tmp.path().join("nowhere"))]);
    assert_eq!(missing.status.code(), Some(4));

    let data = small_dataset(tmp.path());
    let starve = tmp.path().join("starve.json");
    write(&starve, r#"{"train": {"epochs": 1, "solver": {"max_iter": 1, "tol": 1e-14}}}"#);
    let abort = ped(&["--config", s(&starve), "--out", s(&tmp.path().join("z")), "train", "--data", s(&data)]);
    assert_eq!(abort.status.code(), Some(3), "{}", String::from_utf8_lossy(&abort.stderr));
}
