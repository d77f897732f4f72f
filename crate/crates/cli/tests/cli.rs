use std::path::Path;
use std::process::{Command, Output};

fn flmlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flmlab")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_experiment(dir: &Path, name: &str, objective: &str) -> std::path::PathBuf {
    let path = dir.join(format!("{name}.json"));
    let text = format!(
        r#"{{
  "train": {{
    "objective": "{objective}",
    "steps": 6, "batch_size": 8, "eval_interval": 3, "n_train": 32, "n_val": 16,
    "record_wall_clock": false,
    "model": {{ "d_model": 8, "n_heads": 2, "n_bottom": 1, "n_top": 1, "bottom_r": 1, "top_r": 1 }}
  }},
  "probe": {{ "steps": 3, "n_train": 32 }}
}}"#
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn verify_defaults_pass_and_rates_match_closed_forms() {
    let o = flmlab(&["verify"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.starts_with("kind,L,param,r_pred,mean_r_corr\n"));
    assert!(text.contains("\nar,8,,1,0.5625\n"));
    assert!(text.contains("\nprefixlm,8,2,0.875,0.5\n"));
    let flm: Vec<&str> = text.lines().filter(|l| l.starts_with("flm,")).collect();
    assert_eq!(flm.len(), 3);
    assert!(flm.iter().all(|l| l.split(',').nth(3) == Some("1")));
}

#[test]
fn verify_flags_injected_matrix() {
    let o = flmlab(&["verify", "--kind", "ar", "--inject-bad"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ar-lower-triangular"));
}

#[test]
fn gradcheck_passes_and_hook_fails() {
    let o = flmlab(&["gradcheck", "--dims", "tiny"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for group in ["embed.token", "layer.1.shared.attn.wq", "layer.2.shared.xattn.wk", "recon.1.xattn.wv", "recon.head.up.w", "head.r2l.w"] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{group},"))), "{group} missing");
    }
    let bad = flmlab(&["gradcheck", "--corrupt", "recon.head.down.b"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn usage_and_io_errors_exit_two() {
    assert_eq!(flmlab(&["train", "--config", "/definitely/missing.json", "--out", "/tmp/x"]).status.code(), Some(2));
    assert_eq!(flmlab(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(flmlab(&["decode", "--checkpoint", "/definitely/missing.json"]).status.code(), Some(2));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"train": {"objective": "flm", "learning_rate": 0.1}}"#).unwrap();
    let o = flmlab(&["train", "--config", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn train_decode_probe_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_experiment(dir.path(), "tiny", "flm");
    let out = dir.path().join("run");
    let o = flmlab(&["train", "--config", cfg.to_str().unwrap(), "--seed", "7", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with(flmlab::trainer::METRICS_HEADER));
    let echoed: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("experiment.json")).unwrap()).unwrap();
    assert_eq!(echoed["train"]["seed"], 7);
    assert_eq!(echoed["train"]["lr"], 4e-4);
    assert_eq!(echoed["train"]["model"]["d_model"], 8);

    // The echoed file alone reproduces the run.
    let again = dir.path().join("again");
    let o = flmlab(&["train", "--config", out.join("experiment.json").to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(again.join("metrics.csv")).unwrap(), metrics);

    let ckpt = out.join("checkpoint.json");
    let d1 = flmlab(&["decode", "--checkpoint", ckpt.to_str().unwrap(), "--n", "4", "--out", out.to_str().unwrap()]);
    let d2 = flmlab(&["decode", "--checkpoint", ckpt.to_str().unwrap(), "--n", "4"]);
    assert_eq!(d1.status.code(), Some(0));
    assert_eq!(stdout(&d1), stdout(&d2));
    assert!(stdout(&d1).starts_with("id,reference,decoded\n"));
    assert!(out.join("decode.csv").exists());

    let p = flmlab(&["probe", "--checkpoint", ckpt.to_str().unwrap(), "--steps", "3"]);
    assert_eq!(p.status.code(), Some(0));
    let text = stdout(&p);
    assert!(text.starts_with("field,accuracy\ncolor,"));
    assert!(text.contains("\nmean,"));
}

#[test]
fn compare_writes_runs_summary_and_chart() {
    let dir = tempfile::tempdir().unwrap();
    let cfgs: Vec<String> = ["flm", "mlm", "ar"]
        .iter()
        .map(|o| tiny_experiment(dir.path(), o, o).to_str().unwrap().to_string())
        .collect();
    let out = dir.path().join("cmp");
    let mut args = vec!["compare", "--configs"];
    args.extend(cfgs.iter().map(String::as_str));
    args.extend(["--seeds", "3", "--threshold", "0.5", "--no-decode", "--out", out.to_str().unwrap()]);
    let o = Command::new(env!("CARGO_BIN_EXE_flmlab")).args(&args).env("FLMLAB_THREADS", "2").output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mut runs = 0;
    for label in ["flm", "mlm", "ar"] {
        for s in 0..3 {
            runs += usize::from(out.join("runs").join(label).join(format!("seed{s}")).join("metrics.csv").exists());
        }
    }
    assert_eq!(runs, 9);
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().next(), Some(flmlab::trainer::SUMMARY_HEADER));
    assert_eq!(summary.lines().count(), 10);
    let svg = std::fs::read_to_string(out.join("chart.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 9);
    assert_eq!(stdout(&o).lines().count(), 4);
}

#[test]
fn data_dump_writes_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let o = flmlab(&["data", "dump", "--seed", "3", "--n", "5", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(dir.path().join("samples.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0]["attributes"].as_array().unwrap().len(), 4);
    assert!(lines[0]["caption"].is_string());
}
