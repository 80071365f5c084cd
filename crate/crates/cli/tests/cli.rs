use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cludi(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cludi"))
        .current_dir(dir)
        .env("CLUDI_THREADS", "2")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cludi(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL_TRAIN: &[&str] = &[
    "--k", "3", "--d", "4", "--epochs", "3", "--hidden-width", "16", "--steps", "200",
    "--teacher-steps", "10", "--eval-steps", "20", "--eval-b", "2", "--quiet",
];

fn mixture(dir: &Path) {
    ok(dir, &["generate", "--k", "3", "--dim", "4", "--per", "20", "--radius", "6", "--noise", "1", "--seed", "3", "--out", "m.cldf"]);
}

#[test]
fn generate_is_deterministic_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    for name in ["a.cldf", "b.cldf"] {
        ok(p, &["generate", "--k", "5", "--dim", "32", "--per", "200", "--radius", "8", "--noise", "1", "--seed", "7", "--out", name]);
    }
    let a = fs::read(p.join("a.cldf")).unwrap();
    assert_eq!(a, fs::read(p.join("b.cldf")).unwrap());
    let ds = cludi_core::data::read_cldf(p.join("a.cldf")).unwrap();
    assert_eq!(ds.x.dim(), (1000, 32));
    assert_eq!(ds.labels.unwrap().len(), 1000);

    ok(p, &["generate", "--k", "2", "--dim", "3", "--per", "4", "--radius", "1", "--noise", "0.5", "--out", "c.csv"]);
    let text = fs::read_to_string(p.join("c.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "x0,x1,x2,label");
    assert_eq!(text.lines().count(), 9);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = cludi(dir.path(), &["generate", "--k", "3"]);
    assert_eq!(out.status.code(), Some(2));
    let out = cludi(dir.path(), &["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    mixture(p);
    let out = cludi(p, &["train", "--data", "missing.cldf"]);
    assert_eq!(out.status.code(), Some(1));
    let mut args = vec!["train", "--data", "m.cldf", "--activation", "bogus"];
    args.extend_from_slice(SMALL_TRAIN);
    assert_eq!(cludi(p, &args).status.code(), Some(1));
}

#[test]
fn train_eval_infer_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    mixture(p);
    let mut args = vec!["train", "--data", "m.cldf", "--out", "m.cldm", "--eval-every", "1"];
    args.extend_from_slice(SMALL_TRAIN);
    let report: serde_json::Value = serde_json::from_str(&ok(p, &args)).unwrap();
    assert_eq!(report["n"], 60);

    let history = fs::read_to_string(p.join("m.history.csv")).unwrap();
    assert_eq!(history.lines().next().unwrap(), "epoch,loss,nmi,acc,ari");
    assert_eq!(history.lines().count(), 4);

    let eval = ok(p, &["eval", "--checkpoint", "m.cldm", "--data", "m.cldf", "--b", "1,4,16", "--steps", "20"]);
    let reports: Vec<serde_json::Value> = serde_json::from_str(&eval).unwrap();
    assert_eq!(reports.len(), 3);
    for r in &reports {
        let acc = r["acc"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    let infer = ok(p, &["infer", "--checkpoint", "m.cldm", "--data", "m.cldf", "--steps", "20", "--b", "3"]);
    let mut lines = infer.lines();
    assert_eq!(lines.next().unwrap(), "label,p0,p1,p2");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 60);
    for row in rows {
        let cells: Vec<f64> = row.split(',').map(|c| c.parse().unwrap()).collect();
        assert!(cells[0] < 3.0);
        assert!((cells[1..].iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    ok(p, &["export-embeddings", "--checkpoint", "m.cldm", "--data", "m.cldf", "--steps", "20", "--out", "e.csv"]);
    let emb = fs::read_to_string(p.join("e.csv")).unwrap();
    assert_eq!(emb.lines().next().unwrap(), "z0,z1,z2,z3");
    assert_eq!(emb.lines().count(), 61);

    let again = ok(p, &["infer", "--checkpoint", "m.cldm", "--data", "m.cldf", "--steps", "20", "--b", "3"]);
    assert_eq!(infer, again);
}

#[test]
fn config_file_and_overrides_combine() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    mixture(p);
    fs::write(p.join("cfg.json"), r#"{"k": 3, "d": 4, "epochs": 1, "hidden_width": 8, "steps": 100, "teacher_steps": 5}"#).unwrap();
    ok(p, &["train", "--data", "m.cldf", "--config", "cfg.json", "--epochs", "2", "--eval-steps", "10", "--quiet", "--out", "c.cldm"]);
    let model = cludi_core::checkpoint::load(p.join("c.cldm")).unwrap();
    assert_eq!(model.config.epochs, 2);
    assert_eq!(model.config.hidden_width, 8);
}

#[test]
fn ablate_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    mixture(p);
    let mut args = vec!["ablate", "--data", "m.cldf", "--out", "a.cldm", "--param", "lambda", "--grid", "0,5,50", "--scan-out", "scan.csv"];
    args.extend_from_slice(SMALL_TRAIN);
    ok(p, &args);
    let scan = fs::read_to_string(p.join("scan.csv")).unwrap();
    let lines: Vec<&str> = scan.lines().collect();
    assert_eq!(lines[0], "param,value,nmi,acc,ari,status");
    assert_eq!(lines.len(), 4);
    assert!(lines[1..].iter().all(|l| l.starts_with("lambda,") && l.ends_with(",ok")));
}

#[test]
fn seeded_training_reproduces_history() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    mixture(p);
    for name in ["a", "b"] {
        let out = format!("{name}.cldm");
        let mut args = vec!["train", "--data", "m.cldf", "--seed", "11", "--out", out.as_str()];
        args.extend_from_slice(SMALL_TRAIN);
        ok(p, &args);
    }
    let a = fs::read(p.join("a.history.csv")).unwrap();
    assert_eq!(a, fs::read(p.join("b.history.csv")).unwrap());
    assert_eq!(fs::read(p.join("a.cldm")).unwrap(), fs::read(p.join("b.cldm")).unwrap());
}

#[test]
fn zero_lambda_trains_diffusion_only() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    mixture(p);
    let mut args = vec!["train", "--data", "m.cldf", "--lambda", "0", "--out", "z.cldm"];
    args.extend_from_slice(SMALL_TRAIN);
    ok(p, &args);
    let fresh = cludi_core::CludiModel::init(cludi_core::checkpoint::load(p.join("z.cldm")).unwrap().config, 4).unwrap();
    let trained = cludi_core::checkpoint::load(p.join("z.cldm")).unwrap();
    assert_eq!(trained.heads.logits, fresh.heads.logits);
    assert_ne!(trained.denoiser, fresh.denoiser);
}
