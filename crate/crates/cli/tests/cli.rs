use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
epochs = 1
batch_size = 64
seed = 5
precision = "f64"

[encoder]
layers = 3
d_model = 16
heads = 2
ffn_dim = 32
max_len = 16

[head]
latent_dim = 4
decoder_hidden = 16

[data]
id_train = "train.jsonl"
id_val = "val.jsonl"
id_test = "test.jsonl"
ood_test = ["ood_disjoint.jsonl"]
"#;

fn ood(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ood")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = ood(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", s(&data), "--seed", "5"]);
    for f in [
        "train.jsonl",
        "val.jsonl",
        "test.jsonl",
        "ood_disjoint.jsonl",
        "config.toml",
    ] {
        assert!(data.join(f).exists(), "{f}");
    }
    let cfg = data.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();

    let joint = dir.path().join("joint");
    let table = ok(&["train", "--config", s(&cfg), "--out", s(&joint)]);
    assert!(table.contains("maha") && table.contains("ood_disjoint"));
    for f in ["model.ckpt", "train_log.json", "report.json", "report.txt"] {
        assert!(joint.join(f).exists(), "{f}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(joint.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 5);

    let ckpt = joint.join("model.ckpt");
    let eval = dir.path().join("eval");
    ok(&[
        "eval",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&eval),
        "--deterministic-inference",
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["deterministic_inference"], true);

    let probe = dir.path().join("probe");
    ok(&[
        "probe-layers",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&probe),
    ]);
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(probe.join("probe.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 3);

    let export = dir.path().join("export");
    let csv = ok(&["export-s", "--checkpoint", s(&ckpt), "--out", s(&export)]);
    assert_eq!(csv.lines().next(), Some("layer,weight"));
    let total: f64 = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-6);

    let disc = dir.path().join("disc");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--objective",
        "disc",
        "--seed",
        "6",
        "--out",
        s(&disc),
    ]);
    let out = ood(&[
        "export-s",
        "--checkpoint",
        s(&disc.join("model.ckpt")),
        "--out",
        s(&export),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no combination vector"));

    let cmp = dir.path().join("cmp");
    let table = ok(&["compare-objectives", "--config", s(&cfg), "--out", s(&cmp)]);
    assert!(table.contains("joint") && table.contains("disc"));
    assert!(cmp.join("comparison.json").exists() && cmp.join("comparison.txt").exists());
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "epochz = 3\n").unwrap();
    let out = ood(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(!out.status.success());
    let out = ood(&["train", "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("[data]"));
    let missing = dir.path().join("missing.ckpt");
    assert!(!ood(&["export-s", "--checkpoint", s(&missing)]).status.success());
}
