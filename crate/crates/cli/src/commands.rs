use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use flmlab::checks::{self, GradDims};
use flmlab::data::{dump_jsonl, gen_dataset, Dataset};
use flmlab::maskgen::{self, DependencyMatrix, MatrixKind};
use flmlab::model::Model;
use flmlab::numerics::{load_checkpoint, ParamStore};
use flmlab::objectives::Objective;
use flmlab::rng::{stream, Stream};
use flmlab::trainer::{self, EvalOptions, ProbeConfig, RunSummary, TrainConfig, TrainError};

use crate::experiment::ExperimentFile;
use crate::{Failed, Kind};

fn train_err(e: TrainError) -> anyhow::Error {
    match e {
        TrainError::Io(_) | TrainError::Config(_) => anyhow!(e),
        other => anyhow!(Failed(other.to_string())),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut exp = ExperimentFile::load(config)?;
    if let Some(s) = seed {
        exp.train.seed = s;
    }
    let out = out.or_else(|| exp.out.clone()).ok_or_else(|| anyhow!("no output directory: pass --out or set \"out\""))?;
    exp.out = Some(out.clone());
    exp.echo(&out)?;
    let res = trainer::train(&exp.train, Some(&out)).map_err(train_err)?;
    trainer::write_run(&res, &out).map_err(train_err)?;
    let stt = trainer::steps_to_threshold(&res.metrics, exp.train.threshold);
    println!(
        "{}: final val acc {:.4}, steps to {} {}, {:.1}s",
        exp.label(),
        res.metrics.final_val_acc().unwrap_or(0.0),
        exp.train.threshold,
        stt.map_or("not reached".to_string(), |s| s.to_string()),
        res.wall_clock_s
    );
    Ok(())
}

pub fn compare(configs: &[PathBuf], threshold: f64, seeds: u64, out: &Path, probe: bool, decode: bool) -> Result<()> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let exps: Vec<ExperimentFile> = configs.iter().map(|p| ExperimentFile::load(p)).collect::<Result<_>>()?;
    for (k, e) in exps.iter().enumerate() {
        if exps[..k].iter().any(|o| o.label() == e.label()) {
            bail!("duplicate label {}", e.label());
        }
        if e.probe != exps[0].probe {
            bail!("probe settings differ between experiments; compare needs one probe protocol");
        }
    }
    for e in &exps {
        e.echo(&out.join("runs").join(e.label()))?;
    }
    let base_seed = exps[0].train.seed;
    let seed_list: Vec<u64> = (0..seeds).map(|k| base_seed + k).collect();
    let jobs: Vec<(String, TrainConfig)> = exps.iter().map(|e| (e.label().to_string(), e.train.clone())).collect();
    let opts = EvalOptions { probe, decode, ..EvalOptions::default() };
    let results = trainer::compare(&jobs, &seed_list, threshold, &opts, &exps[0].probe, trainer::worker_count());

    let mut summaries: Vec<RunSummary> = Vec::new();
    let mut curves = Vec::new();
    let mut failures = Vec::new();
    for (label, seed, res) in &results {
        match res {
            Ok(run) => {
                let dir = out.join("runs").join(label).join(format!("seed{seed}"));
                write(&dir.join("metrics.csv"), &run.metrics.to_csv())?;
                summaries.push(run.summary.clone());
                curves.push((format!("{label}/seed{seed}"), &run.metrics));
            }
            Err(e) => failures.push(format!("{label} seed {seed}: {e}")),
        }
    }
    write(&out.join("summary.csv"), &trainer::summary_csv(&summaries))?;
    write(&out.join("chart.svg"), &trainer::svg_chart(&curves))?;
    let mut ranking = String::from("rank,label,median_steps_to_threshold,median_final_val_acc\n");
    for (k, (label, steps, acc)) in trainer::rank_labels(&summaries).iter().enumerate() {
        let steps = if steps.is_finite() { steps.to_string() } else { String::new() };
        ranking.push_str(&format!("{},{label},{steps},{acc}\n", k + 1));
    }
    write(&out.join("ranking.csv"), &ranking)?;
    print!("{ranking}");
    if !failures.is_empty() {
        return Err(anyhow!(Failed(format!("{} run(s) failed: {}", failures.len(), failures.join("; ")))));
    }
    Ok(())
}

fn rate_line(kind: &str, len: usize, param: &str, r: maskgen::RateReport) -> String {
    format!("{kind},{len},{param},{},{}", r.r_pred, r.mean_r_corr)
}

/// Mean rates of `samples` matrices from `draw`, failing on the first invalid one.
fn sampled_rates(
    samples: usize,
    mut draw: impl FnMut() -> Result<DependencyMatrix, maskgen::MaskError>,
    bad: &mut Vec<String>,
) -> Result<(maskgen::RateReport, DependencyMatrix)> {
    let (mut p, mut c) = (0.0, 0.0);
    let mut last = None;
    for _ in 0..samples.max(1) {
        let m = draw()?;
        let v = maskgen::validate_matrix(&m);
        if !v.is_empty() {
            bad.push(format!("{:?}\n{}", v, m.to_grid()));
        }
        let r = maskgen::rates(&m);
        p += r.r_pred;
        c += r.mean_r_corr;
        last = Some(m);
    }
    let n = samples.max(1) as f64;
    Ok((maskgen::RateReport { r_pred: p / n, mean_r_corr: c / n }, last.expect("at least one sample")))
}

pub fn verify(kind: Kind, len: usize, samples: usize, seed: u64, inject_bad: bool) -> Result<()> {
    if len == 0 {
        bail!("--L must be at least 1");
    }
    let want = |k: Kind| kind == Kind::All || kind == k;
    let (_, mut bad) = checks::exhaustive_masks(len.min(8));
    let mut lines = vec!["kind,L,param,r_pred,mean_r_corr".to_string()];
    let mut grids: Vec<(String, DependencyMatrix)> = Vec::new();
    if want(Kind::Mlm) {
        let mut rng = stream(seed, Stream::Masks, 0);
        let (r, m) = sampled_rates(samples, || maskgen::build_mlm_matrix(len, 0.4, &mut rng), &mut bad)?;
        lines.push(rate_line("mlm", len, "0.4", r));
        grids.push(("mlm r_mask=0.4".into(), m));
    }
    if want(Kind::Ar) {
        let m = maskgen::build_ar_matrix(len)?;
        lines.push(rate_line("ar", len, "", maskgen::rates(&m)));
        grids.push(("ar".into(), m));
    }
    if want(Kind::Prefixlm) {
        for lp in 1..=len.saturating_sub(1).max(1) {
            let m = maskgen::build_prefix_matrix(len, lp)?;
            lines.push(rate_line("prefixlm", len, &lp.to_string(), maskgen::rates(&m)));
            if lp == len.div_ceil(2) {
                grids.push((format!("prefixlm L_p={lp}"), m));
            }
        }
        let mut rng = stream(seed, Stream::Masks, 1);
        let (r, _) = sampled_rates(samples, || maskgen::sample_prefix_matrix(len, &mut rng).map(|x| x.0), &mut bad)?;
        lines.push(rate_line("prefixlm", len, "uniform", r));
    }
    if want(Kind::Flm) {
        let min = 1.0 / len as f64;
        let mut params = vec![("1/L".to_string(), min)];
        params.extend([0.3, 0.5].iter().filter(|&&r| r > min).map(|&r| (r.to_string(), r)));
        for (k, (name, r)) in params.into_iter().enumerate() {
            let mut rng = stream(seed, Stream::Masks, 2 + k as u64);
            let (rep, m) =
                sampled_rates(samples, || maskgen::sample_flm_spans(len, r, &mut rng).map(|s| maskgen::spans_to_matrix(&s)), &mut bad)?;
            lines.push(rate_line("flm", len, &name, rep));
            grids.push((format!("flm r_corr={name}"), m));
        }
    }
    if inject_bad {
        let rows: Vec<Vec<bool>> = (1..=len).map(|i| (1..=len).map(|j| j < i || (i == 1 && j == 1)).collect()).collect();
        let m = DependencyMatrix::from_rows(MatrixKind::Ar, &rows)?;
        let v = maskgen::validate_matrix(&m);
        if !v.is_empty() {
            bad.push(format!("injected {:?}\n{}", v, m.to_grid()));
        }
    }
    for l in &lines {
        println!("{l}");
    }
    for (name, m) in &grids {
        println!("# {name} L={len}");
        print!("{}", m.to_grid());
    }
    if !bad.is_empty() {
        for b in &bad {
            eprintln!("{b}");
        }
        return Err(anyhow!(Failed(format!("{} invariant violation(s)", bad.len()))));
    }
    Ok(())
}

pub fn gradcheck(dims: GradDims, objective: Objective, seed: u64, corrupt: Option<String>) -> Result<()> {
    let report = checks::model_gradcheck(dims, objective, corrupt, seed)?;
    println!("group,elements,max_rel_err,max_abs_grad,passed");
    for g in &report.groups {
        println!("{},{},{:e},{:e},{}", g.name, g.elements, g.max_rel_err, g.max_abs_grad, g.passed);
    }
    if !report.passed() {
        let names: Vec<&str> = report.failing().map(|g| g.name.as_str()).collect();
        return Err(anyhow!(Failed(format!("gradient mismatch in {}", names.join(", ")))));
    }
    eprintln!("all {} groups within tolerance (worst {:e})", report.groups.len(), report.worst());
    Ok(())
}

struct Loaded {
    cfg: TrainConfig,
    model: Model,
    params: ParamStore<f32>,
    data: Dataset,
}

fn load(path: &Path) -> Result<Loaded> {
    let (manifest, params) = load_checkpoint(path)?;
    let cfg = trainer::config_from_manifest(&manifest.config).map_err(train_err)?;
    let model = Model::from_store(&cfg.model, &params)?;
    let data = gen_dataset(cfg.data_seed, cfg.n_train, cfg.n_val)?;
    Ok(Loaded { cfg, model, params, data })
}

pub fn decode(checkpoint: &Path, n: usize, out: Option<PathBuf>) -> Result<()> {
    let l = load(checkpoint)?;
    let samples = &l.data.val[..n.min(l.data.val.len())];
    let (rate, decoded) = trainer::decode_eval(&l.model, &l.params, &l.data.vocab, samples).map_err(train_err)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "reference", "decoded"])?;
    for (s, d) in samples.iter().zip(&decoded) {
        w.write_record([s.id.to_string(), l.data.vocab.decode(&s.caption), l.data.vocab.decode(d)])?;
    }
    let text = String::from_utf8(w.into_inner()?)?;
    print!("{text}");
    println!("# objective={} mention_rate={rate}", l.cfg.objective.name());
    if let Some(dir) = out {
        write(&dir.join("decode.csv"), &text)?;
        write(&dir.join("decode_summary.csv"), &format!("objective,samples,mention_rate\n{},{},{rate}\n", l.cfg.objective.name(), samples.len()))?;
    }
    Ok(())
}

pub fn probe(checkpoint: &Path, steps: Option<usize>, out: Option<PathBuf>) -> Result<()> {
    let l = load(checkpoint)?;
    let mut cfg = ProbeConfig::default();
    if let Some(s) = steps {
        cfg.steps = s;
    }
    let report = trainer::train_probe(&l.model, &l.params, &l.data.train, &l.data.val, &cfg).map_err(train_err)?;
    let mut text = String::from("field,accuracy\n");
    for (name, acc) in flmlab::data::FIELD_NAMES.iter().zip(report.accuracy) {
        text.push_str(&format!("{name},{acc}\n"));
    }
    text.push_str(&format!("mean,{}\n", report.mean()));
    print!("{text}");
    if let Some(dir) = out {
        write(&dir.join("probe.csv"), &text)?;
    }
    Ok(())
}

pub fn dump(seed: u64, n: usize, out: Option<PathBuf>) -> Result<()> {
    let ds = gen_dataset(seed, n.max(1), 1)?;
    let text = dump_jsonl(&ds.train[..n.min(ds.train.len())], &ds.vocab);
    match out {
        Some(dir) => write(&dir.join("samples.jsonl"), &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
