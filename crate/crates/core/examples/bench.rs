//! Multi-seed comparison of named variants; prints one summary line per run.
//!
//! `cargo run --release --example bench -- STEPS LR EVAL SEEDS VARIANTS [probe] [decode]`
//! with variants from flm, flm_lr, flm_unshared, mlm, mlm25, mlm50, ar, prefixlm.
use flmlab::objectives::Objective;
use flmlab::trainer::{compare, median, rank_labels, EvalOptions, ProbeConfig, TrainConfig};

fn variant(name: &str, base: &TrainConfig) -> TrainConfig {
    let mut c = base.clone();
    match name {
        "flm" => c.objective = Objective::Flm,
        "flm_lr" => {
            c.objective = Objective::Flm;
            c.use_l2r = false;
            c.use_r2l = false;
        }
        "flm_unshared" => {
            c.objective = Objective::Flm;
            c.model.share_encoder = false;
        }
        "mlm" => c.objective = Objective::Mlm,
        "mlm25" => {
            c.objective = Objective::Mlm;
            c.r_pred_target = 0.25;
        }
        "mlm50" => {
            c.objective = Objective::Mlm;
            c.r_pred_target = 0.5;
        }
        "ar" => c.objective = Objective::Ar,
        "prefixlm" => c.objective = Objective::Prefixlm,
        other => panic!("unknown variant {other}"),
    }
    c
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let arg = |k: usize, d: &str| args.get(k).cloned().unwrap_or_else(|| d.to_string());
    let steps: usize = arg(1, "300").parse().unwrap();
    let lr: f64 = arg(2, "1e-3").parse().unwrap();
    let eval: usize = arg(3, "10").parse().unwrap();
    let seeds: u64 = arg(4, "3").parse().unwrap();
    let names = arg(5, "flm,mlm,ar");
    let probe = args.iter().any(|a| a == "probe");
    let decode = args.iter().any(|a| a == "decode");
    let base = TrainConfig { steps, lr, eval_interval: eval, record_wall_clock: true, ..TrainConfig::default() };
    let configs: Vec<(String, TrainConfig)> = names.split(',').map(|n| (n.to_string(), variant(n, &base))).collect();
    let seed_list: Vec<u64> = (0..seeds).collect();
    let opts = EvalOptions { probe, decode, decode_samples: 128 };
    let t = std::time::Instant::now();
    let res = compare(&configs, &seed_list, 0.85, &opts, &ProbeConfig::default(), 1);
    let mut sums = Vec::new();
    for (label, seed, r) in res {
        let r = r.unwrap();
        let s = &r.summary;
        let accs: Vec<String> = r.metrics.val_rows().map(|m| format!("{:.2}", m.recon_acc)).collect();
        println!(
            "{label} s{seed}: stt={:?} final={:.3} probe={:.3} mention={:.3} {:.0}s | {}",
            s.steps_to_threshold, s.final_val_acc, s.probe_acc, s.mention_rate, s.wall_clock_s, accs.join(" ")
        );
        sums.push(r.summary);
    }
    for (label, steps, acc) in rank_labels(&sums) {
        let g: Vec<_> = sums.iter().filter(|s| s.label == label).collect();
        let p = median(&g.iter().map(|s| s.probe_acc).collect::<Vec<_>>());
        let m = median(&g.iter().map(|s| s.mention_rate).collect::<Vec<_>>());
        println!("== {label}: median stt {steps} acc {acc:.3} probe {p:?} mention {m:?}");
    }
    println!("total {:.0}s", t.elapsed().as_secs_f64());
}
