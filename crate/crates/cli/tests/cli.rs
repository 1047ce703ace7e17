use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn deephoyer(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deephoyer"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

const SYNTHETIC: &str = r#"{
  "model": "lenet-300-100",
  "data": { "source": "synthetic", "train": 256, "test": 64, "classes": 4 },
  "seed": 3,
  "batch_size": 32,
  "optimizer": { "type": "adam", "lr": 0.001 },
  "pretrain": { "epochs": 2 },
  "sparsify": { "epochs": 2, "objective": [{ "kind": "hoyer_square", "decay": 0.0002 }] },
  "prune": { "method": "elementwise", "threshold": { "default": { "mode": "ratio_of_std", "ratio": RATIO } } },
  "finetune": { "epochs": 2 }
}"#;

fn write_config(dir: &Path, ratio: f64) -> String {
    let path = dir.join("exp.json");
    fs::write(&path, SYNTHETIC.replace("RATIO", &ratio.to_string())).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gradcheck_passes_and_negative_control_fails() {
    let dir = tempfile::tempdir().unwrap();
    let ok = deephoyer(&["gradcheck", "--probes", "10"], dir.path());
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    let stdout = String::from_utf8(ok.stdout).unwrap();
    for kind in ["l1", "l2", "hoyer", "hoyer_square", "group_hs", "transformed_l1"] {
        assert!(stdout.lines().any(|l| l.starts_with(&format!("{kind} "))), "missing {kind}");
    }
    let bad = deephoyer(&["gradcheck", "--probes", "5", "--inject-fault", "group_hs"], dir.path());
    assert_eq!(code(&bad), 1);
    assert!(String::from_utf8(bad.stderr).unwrap().contains("group_hs"));
}

#[test]
fn descent_demo_csv() {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &str| {
        let o = deephoyer(&["descent-demo", "--stride", "500", "--out", out], dir.path());
        assert_eq!(code(&o), 0);
        fs::read_to_string(dir.path().join(out).join("trajectory.csv")).unwrap()
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    let mut rows = csv::Reader::from_reader(a.as_bytes());
    let records: Vec<Vec<f64>> = rows
        .records()
        .map(|r| r.unwrap().iter().map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(records.len(), 201);
    for r in &records {
        let w = &r[1..21];
        let l1: f64 = w.iter().map(|x| x.abs()).sum();
        let l2sq: f64 = w.iter().map(|x| x * x).sum();
        assert!((r[21] - l2sq / l1).abs() <= 1e-9);
    }
    let last = &records.last().unwrap()[1..21];
    assert!(last.iter().filter(|w| w.abs() < 1e-2).count() >= 15);
}

#[test]
fn stages_chain_and_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 0.5);
    for stage in ["pretrain", "sparsify", "prune", "finetune"] {
        let o = deephoyer(&[stage, "--config", &config, "--out", "staged", "-q"], dir.path());
        assert_eq!(code(&o), 0, "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = deephoyer(&["pipeline", "--config", &config, "--out", "whole", "-q"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let staged = fs::read(dir.path().join("staged/finetune_report.json")).unwrap();
    let whole = fs::read(dir.path().join("whole/report.json")).unwrap();
    assert_eq!(staged, whole);
    assert!(dir.path().join("whole/config.json").exists());
    assert!(dir.path().join("whole/sparsify_log.csv").exists());
}

#[test]
fn zero_ratio_prune_keeps_everything() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 0.0);
    for stage in ["pretrain", "prune"] {
        let input: Vec<&str> = if stage == "prune" {
            vec!["--input", "run/pretrain_checkpoint.json"]
        } else {
            vec![]
        };
        let mut args = vec![stage, "--config", &config, "--out", "run", "-q"];
        args.extend(input);
        let o = deephoyer(&args, dir.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/prune_report.json")).unwrap()).unwrap();
    assert_eq!(report["nonzero_percent"], 100.0);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 0.1);

    fs::write(dir.path().join("bad.json"), SYNTHETIC.replace("\"seed\"", "\"colour\": 1, \"seed\"")).unwrap();
    let o = deephoyer(&["pipeline", "--config", "bad.json"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8(o.stderr).unwrap().contains("colour"));

    let o = deephoyer(&["finetune", "--config", &config, "--out", "empty"], dir.path());
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8(o.stderr).unwrap().contains("prune_checkpoint.json"));

    let o = deephoyer(&["pipeline", "--config", "missing.json"], dir.path());
    assert_eq!(code(&o), 3);

    let o = deephoyer(&["pipeline", "--config", &config, "--data", "no/such/dir"], dir.path());
    assert_eq!(code(&o), 3);
}
