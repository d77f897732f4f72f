//! Seeded training loop, evaluation, probes, and multi-run comparison.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{self, gen_dataset, Dataset, Sample, TokenBatch, FIELD_SIZES};
use crate::model::{Model, ModelConfig, ModelError, Probe};
use crate::numerics::{
    adamw_step, save_checkpoint, AdamWConfig, AdamWState, Graph, NumericsError, ParamStore,
};
use crate::objectives::{
    forward_plan, sample_plan, Corruption, LossBreakdown, Objective, ObjectiveConfig, ObjectiveError, Plan,
};
use crate::rng::{stream, Stream};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error("io error: {0}")]
    Io(String),
}

fn cfg_err(msg: impl Into<String>) -> TrainError {
    TrainError::Config(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: Objective,
    pub r_corr: f64,
    pub r_mask: f64,
    pub r_pred_target: f64,
    pub corruption: Corruption,
    pub use_l2r: bool,
    pub use_r2l: bool,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub data_seed: u64,
    pub eval_interval: usize,
    pub n_train: usize,
    pub n_val: usize,
    /// Accuracy threshold for steps-to-threshold.
    pub threshold: f64,
    /// Write measured seconds into `wall_clock_s`; zero otherwise.
    pub record_wall_clock: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let o = ObjectiveConfig::default();
        Self {
            objective: o.objective,
            r_corr: o.r_corr,
            r_mask: o.r_mask,
            r_pred_target: o.r_pred_target,
            corruption: o.corruption,
            use_l2r: o.use_l2r,
            use_r2l: o.use_r2l,
            steps: 2000,
            batch_size: 32,
            lr: 4e-4,
            warmup_frac: 0.05,
            weight_decay: 0.01,
            seed: 0,
            data_seed: 0,
            eval_interval: 50,
            n_train: 4000,
            n_val: 256,
            threshold: 0.85,
            record_wall_clock: true,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Validates and aligns the encoder mode with the objective.
    pub fn resolved(&self) -> Result<TrainConfig, TrainError> {
        let mut c = self.clone();
        c.model.mode = c.objective.encoder_mode();
        if !(c.warmup_frac > 0.0 && c.warmup_frac < 1.0) {
            return Err(cfg_err("warmup_frac must lie in (0, 1)"));
        }
        if c.steps < 1 || c.batch_size < 1 || c.eval_interval < 1 {
            return Err(cfg_err("steps, batch_size and eval_interval must be at least 1"));
        }
        if c.n_train < 1 || c.n_val < 1 {
            return Err(cfg_err("n_train and n_val must be at least 1"));
        }
        if !(c.lr > 0.0) {
            return Err(cfg_err("lr must be positive"));
        }
        if !(c.r_pred_target > 0.0 && c.r_pred_target <= 1.0) {
            return Err(cfg_err("r_pred_target must lie in (0, 1]"));
        }
        if !(c.r_mask > 0.0 && c.r_mask < 1.0) {
            return Err(cfg_err("r_mask must lie in (0, 1)"));
        }
        let corr_ok = match c.corruption {
            Corruption::Span => (0.0..=1.0).contains(&c.r_corr),
            Corruption::RandomPreEncoding => (0.0..1.0).contains(&c.r_corr),
        };
        if !corr_ok {
            return Err(cfg_err("r_corr out of range for the corruption mode"));
        }
        c.model.validate()?;
        Ok(c)
    }

    pub fn objective_config(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            objective: self.objective,
            r_corr: self.r_corr,
            r_mask: self.r_mask,
            r_pred_target: self.r_pred_target,
            corruption: self.corruption,
            use_l2r: self.use_l2r,
            use_r2l: self.use_r2l,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }
}

/// Linear warmup to `cfg.lr` over `warmup_frac · steps`, then linear decay to zero at `steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let total = cfg.steps as f64;
    let warm = cfg.warmup_frac * total;
    let s = step as f64;
    if step > cfg.steps {
        0.0
    } else if s <= warm {
        cfg.lr * s / warm
    } else {
        cfg.lr * (total - s) / (total - warm)
    }
}

/// One metrics CSV row; field order is the CSV column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub split: String,
    pub objective: String,
    pub loss_total: f64,
    #[serde(rename = "loss_R")]
    pub loss_r: f64,
    pub loss_l2r: f64,
    pub loss_r2l: f64,
    pub recon_acc: f64,
    pub r_pred_meas: f64,
    pub r_corr_meas: f64,
    pub lr: f64,
    pub wall_clock_s: f64,
}

pub const METRICS_HEADER: &str =
    "step,split,objective,loss_total,loss_R,loss_l2r,loss_r2l,recon_acc,r_pred_meas,r_corr_meas,lr,wall_clock_s";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub rows: Vec<MetricsRow>,
}

impl RunMetrics {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            return format!("{METRICS_HEADER}\n");
        }
        for r in &self.rows {
            w.serialize(r).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8")
    }

    pub fn from_csv(text: &str) -> Result<Self, TrainError> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r.deserialize().collect::<Result<Vec<MetricsRow>, _>>().map_err(|e| TrainError::Io(e.to_string()))?;
        Ok(Self { rows })
    }

    pub fn val_rows(&self) -> impl Iterator<Item = &MetricsRow> {
        self.rows.iter().filter(|r| r.split == "val")
    }

    pub fn final_val_acc(&self) -> Option<f64> {
        self.val_rows().last().map(|r| r.recon_acc)
    }
}

/// First validation step with `recon_acc ≥ threshold`.
pub fn steps_to_threshold(metrics: &RunMetrics, threshold: f64) -> Option<usize> {
    metrics.val_rows().find(|r| r.recon_acc >= threshold).map(|r| r.step)
}

/// Fixed evaluation batches with their frozen prediction plans.
pub struct ValSet {
    pub batches: Vec<(TokenBatch, Plan)>,
}

/// Validation plans depend on the dataset seed only, never on the model seed,
/// and always predict the full predicted set.
pub fn validation_set(ds: &Dataset, cfg: &TrainConfig) -> Result<ValSet, TrainError> {
    let mut rng = stream(cfg.data_seed, Stream::Validation, 0);
    let ocfg = ObjectiveConfig { r_pred_target: 1.0, ..cfg.objective_config() };
    let mut batches = Vec::new();
    for b in data::sequential_batches(&ds.val, 64) {
        let plan = sample_plan(&b, &ocfg, &mut rng)?;
        batches.push((b, plan));
    }
    Ok(ValSet { batches })
}

pub fn evaluate(model: &Model, params: &ParamStore<f32>, val: &ValSet, cfg: &ObjectiveConfig) -> Result<LossBreakdown, TrainError> {
    let mut acc = LossBreakdown::default();
    let (mut r, mut l, mut rl, mut n_batches) = (0.0, 0.0, 0.0, 0.0);
    for (b, plan) in &val.batches {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let out = forward_plan(model, &mut g, &bound, b, plan, cfg)?.breakdown;
        acc.predicted += out.predicted;
        acc.correct += out.correct;
        acc.real_tokens += out.real_tokens;
        acc.corr_sum += out.corr_sum;
        r += out.loss_r;
        l += out.loss_l2r;
        rl += out.loss_r2l;
        n_batches += 1.0;
    }
    acc.loss_r = r / n_batches;
    acc.loss_l2r = l / n_batches;
    acc.loss_r2l = rl / n_batches;
    acc.loss_inter = acc.loss_l2r + acc.loss_r2l;
    acc.loss_total = acc.loss_r + acc.loss_inter;
    Ok(acc)
}

pub struct RunResult {
    pub config: TrainConfig,
    pub model: Model,
    pub params: ParamStore<f32>,
    pub metrics: RunMetrics,
    pub dataset: Dataset,
    pub wall_clock_s: f64,
}

fn row(step: usize, split: &str, cfg: &TrainConfig, bd: &LossBreakdown, lr: f64, secs: f64) -> MetricsRow {
    MetricsRow {
        step,
        split: split.to_string(),
        objective: cfg.objective.name().to_string(),
        loss_total: bd.loss_total,
        loss_r: bd.loss_r,
        loss_l2r: bd.loss_l2r,
        loss_r2l: bd.loss_r2l,
        recon_acc: bd.recon_acc(),
        r_pred_meas: bd.r_pred(),
        r_corr_meas: bd.r_corr(),
        lr,
        wall_clock_s: if cfg.record_wall_clock { secs } else { 0.0 },
    }
}

/// Source of training batches: reshuffled every epoch, or one fixed batch.
pub enum BatchSource<'a> {
    Epochs(&'a [Sample]),
    Fixed(TokenBatch),
}

/// Trains per `cfg`. On a non-finite loss a diagnostic checkpoint is written
/// to `diag_dir` (when given) before the error is returned.
pub fn train(cfg: &TrainConfig, diag_dir: Option<&Path>) -> Result<RunResult, TrainError> {
    let cfg = cfg.resolved()?;
    let ds = gen_dataset(cfg.data_seed, cfg.n_train, cfg.n_val)?;
    let train = ds.train.clone();
    train_on(&cfg, ds, BatchSource::Epochs(&train), diag_dir)
}

pub fn train_on(cfg: &TrainConfig, ds: Dataset, source: BatchSource<'_>, diag_dir: Option<&Path>) -> Result<RunResult, TrainError> {
    let cfg = cfg.resolved()?;
    let start = Instant::now();
    let (model, mut params) = Model::init(&cfg.model, cfg.seed)?;
    let ocfg = cfg.objective_config();
    let adamw = cfg.adamw();
    let mut state = AdamWState::new(&params);
    let val = validation_set(&ds, &cfg)?;
    let mut mask_rng = stream(cfg.seed, Stream::Masks, 0);
    let mut metrics = RunMetrics::default();
    let mut epoch = 0u64;
    let mut queue: Vec<TokenBatch> = Vec::new();
    for step in 1..=cfg.steps {
        let batch = match &source {
            BatchSource::Fixed(b) => b.clone(),
            BatchSource::Epochs(samples) => {
                if queue.is_empty() {
                    let mut rng = stream(cfg.seed, Stream::Shuffle, epoch);
                    queue = data::make_batches(samples, cfg.batch_size, &mut rng)?;
                    queue.reverse();
                    epoch += 1;
                }
                queue.pop().expect("non-empty epoch")
            }
        };
        let plan = sample_plan(&batch, &ocfg, &mut mask_rng)?;
        let mut g = Graph::new();
        let bound = params.bind(&mut g, true);
        let out = forward_plan(&model, &mut g, &bound, &batch, &plan, &ocfg)?;
        if !out.breakdown.loss_total.is_finite() {
            if let Some(dir) = diag_dir {
                let path = dir.join("diagnostic.json");
                save_checkpoint(&path, &params, checkpoint_config(&cfg, step))?;
            }
            return Err(TrainError::NonFinite { step });
        }
        let grads = g.backward(out.total);
        let grads = params.collect_grads(&bound, &grads);
        let lr = lr_at(step, &cfg);
        adamw_step(&mut params, &grads, &mut state, lr, &adamw);
        let secs = start.elapsed().as_secs_f64();
        metrics.rows.push(row(step, "train", &cfg, &out.breakdown, lr, secs));
        if step % cfg.eval_interval == 0 || step == cfg.steps {
            let bd = evaluate(&model, &params, &val, &ocfg)?;
            metrics.rows.push(row(step, "val", &cfg, &bd, lr, start.elapsed().as_secs_f64()));
        }
    }
    let wall_clock_s = start.elapsed().as_secs_f64();
    Ok(RunResult { config: cfg, model, params, metrics, dataset: ds, wall_clock_s })
}

fn checkpoint_config(cfg: &TrainConfig, step: usize) -> serde_json::Value {
    serde_json::json!({ "train": cfg, "model": cfg.model, "step": step })
}

/// Writes `metrics.csv`, `config.json` and `checkpoint.{json,bin}` into `dir`.
pub fn write_run(result: &RunResult, dir: &Path) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir).map_err(|e| TrainError::Io(format!("{}: {e}", dir.display())))?;
    let io = |p: &Path, e: std::io::Error| TrainError::Io(format!("{}: {e}", p.display()));
    let metrics = dir.join("metrics.csv");
    std::fs::write(&metrics, result.metrics.to_csv()).map_err(|e| io(&metrics, e))?;
    let conf = dir.join("config.json");
    let text = serde_json::to_string_pretty(&result.config).expect("serializable");
    std::fs::write(&conf, text).map_err(|e| io(&conf, e))?;
    save_checkpoint(&dir.join("checkpoint.json"), &result.params, checkpoint_config(&result.config, result.config.steps))?;
    Ok(())
}

/// Recovers the training config stored in a checkpoint manifest.
pub fn config_from_manifest(value: &serde_json::Value) -> Result<TrainConfig, TrainError> {
    serde_json::from_value(value["train"].clone()).map_err(|e| cfg_err(format!("checkpoint config: {e}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub n_train: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { steps: 600, batch_size: 32, lr: 3e-2, seed: 0, n_train: 1024 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    pub accuracy: [f64; 4],
}

impl ProbeReport {
    pub fn mean(&self) -> f64 {
        self.accuracy.iter().sum::<f64>() / 4.0
    }
}

/// Trains the CLS embedding and linear heads on a frozen backbone, then
/// reports per-field accuracy on `eval`.
pub fn train_probe(
    model: &Model,
    params: &ParamStore<f32>,
    train: &[Sample],
    eval: &[Sample],
    cfg: &ProbeConfig,
) -> Result<ProbeReport, TrainError> {
    let (probe, mut pp) = Probe::init(model.config().d_model, cfg.seed);
    let mut state = AdamWState::new(&pp);
    let adamw = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
    let pool = &train[..cfg.n_train.min(train.len())];
    let mut queue: Vec<TokenBatch> = Vec::new();
    let mut epoch = 0;
    for _ in 0..cfg.steps {
        if queue.is_empty() {
            let mut rng = stream(cfg.seed, Stream::Probe, epoch);
            queue = data::make_batches(pool, cfg.batch_size, &mut rng)?;
            epoch += 1;
        }
        let batch = queue.pop().expect("non-empty");
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let pb = pp.bind(&mut g, true);
        let logits = model.probe_forward(&mut g, &b, &probe, &pb, &batch)?;
        let mut terms = Vec::with_capacity(4);
        for (f, l) in logits.iter().enumerate() {
            let picks: Vec<(usize, usize)> =
                batch.attributes.iter().enumerate().map(|(r, a)| (r, a.classes()[f])).collect();
            terms.push(g.cross_entropy(*l, &picks)?);
        }
        let loss = g.sum_scalars(&terms)?;
        let grads = g.backward(loss);
        let grads = pp.collect_grads(&pb, &grads);
        adamw_step(&mut pp, &grads, &mut state, cfg.lr, &adamw);
    }
    let mut correct = [0usize; 4];
    for batch in data::sequential_batches(eval, 64) {
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let pb = pp.bind(&mut g, false);
        let logits = model.probe_forward(&mut g, &b, &probe, &pb, &batch)?;
        for (f, l) in logits.iter().enumerate() {
            let t = g.value(*l);
            for (r, a) in batch.attributes.iter().enumerate() {
                let row = t.row(r);
                let best = (0..FIELD_SIZES[f]).fold(0, |best, k| if row[k] > row[best] { k } else { best });
                correct[f] += usize::from(best == a.classes()[f]);
            }
        }
    }
    Ok(ProbeReport { accuracy: correct.map(|c| c as f64 / eval.len() as f64) })
}

/// Fraction of (sample, field) pairs whose first mentioned value in the
/// decoded caption is the true attribute value.
pub fn mention_rate(vocab: &data::Vocab, samples: &[Sample], decoded: &[Vec<usize>]) -> f64 {
    let fields: Vec<Vec<Vec<usize>>> = (0..4).map(|f| vocab.field_words(f)).collect();
    let mut hits = 0usize;
    for (s, seq) in samples.iter().zip(decoded) {
        let truth = s.attributes.classes();
        for f in 0..4 {
            let first = seq.iter().find_map(|t| fields[f].iter().position(|ws| ws.contains(t)));
            hits += usize::from(first == Some(truth[f]));
        }
    }
    hits as f64 / (4 * samples.len().max(1)) as f64
}

pub fn decode_eval(
    model: &Model,
    params: &ParamStore<f32>,
    vocab: &data::Vocab,
    samples: &[Sample],
) -> Result<(f64, Vec<Vec<usize>>), TrainError> {
    let mut decoded = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let attrs: Vec<_> = chunk.iter().map(|s| s.attributes).collect();
        decoded.extend(model.greedy_decode(params, &attrs, data::L_MAX)?);
    }
    Ok((mention_rate(vocab, samples, &decoded), decoded))
}

/// One row of a comparison report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub label: String,
    pub objective: String,
    pub seed: u64,
    /// Empty when the threshold was not reached.
    pub steps_to_threshold: Option<usize>,
    pub final_val_acc: f64,
    pub probe_acc: f64,
    pub mention_rate: f64,
    pub wall_clock_s: f64,
}

pub const SUMMARY_HEADER: &str =
    "label,objective,seed,steps_to_threshold,final_val_acc,probe_acc,mention_rate,wall_clock_s";

pub struct CompareRun {
    pub summary: RunSummary,
    pub metrics: RunMetrics,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub probe: bool,
    pub decode: bool,
    pub decode_samples: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { probe: true, decode: true, decode_samples: 128 }
    }
}

/// Trains one labelled configuration and gathers its summary metrics.
pub fn run_and_summarize(label: &str, cfg: &TrainConfig, threshold: f64, opts: &EvalOptions, probe: &ProbeConfig) -> Result<CompareRun, TrainError> {
    let res = train(cfg, None)?;
    let probe_acc = if opts.probe {
        train_probe(&res.model, &res.params, &res.dataset.train, &res.dataset.val, probe)?.mean()
    } else {
        f64::NAN
    };
    let mention = if opts.decode {
        let n = opts.decode_samples.min(res.dataset.val.len());
        decode_eval(&res.model, &res.params, &res.dataset.vocab, &res.dataset.val[..n])?.0
    } else {
        f64::NAN
    };
    let summary = RunSummary {
        label: label.to_string(),
        objective: res.config.objective.name().to_string(),
        seed: res.config.seed,
        steps_to_threshold: steps_to_threshold(&res.metrics, threshold),
        final_val_acc: res.metrics.final_val_acc().unwrap_or(0.0),
        probe_acc,
        mention_rate: mention,
        wall_clock_s: res.wall_clock_s,
    };
    Ok(CompareRun { summary, metrics: res.metrics })
}

/// Worker count: `FLMLAB_THREADS` if set, else available parallelism.
pub fn worker_count() -> usize {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("FLMLAB_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n >= 1 => n,
        _ => avail,
    }
}

/// Runs every `(label, config)` over `seeds`, in parallel up to `threads`
/// workers. Results come back in input order regardless of scheduling.
pub fn compare(
    configs: &[(String, TrainConfig)],
    seeds: &[u64],
    threshold: f64,
    opts: &EvalOptions,
    probe: &ProbeConfig,
    threads: usize,
) -> Vec<(String, u64, Result<CompareRun, TrainError>)> {
    let jobs: Vec<(String, TrainConfig)> = configs
        .iter()
        .flat_map(|(label, c)| seeds.iter().map(move |&s| (label.clone(), TrainConfig { seed: s, ..c.clone() })))
        .collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<Result<CompareRun, TrainError>>>> =
        jobs.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..threads.max(1).min(jobs.len().max(1)) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                let Some((label, cfg)) = jobs.get(k) else { break };
                let res = run_and_summarize(label, cfg, threshold, opts, probe);
                *slots[k].lock().expect("unpoisoned") = Some(res);
            });
        }
    });
    jobs.into_iter()
        .zip(slots)
        .map(|((label, cfg), slot)| (label, cfg.seed, slot.into_inner().expect("unpoisoned").expect("job ran")))
        .collect()
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Median steps-to-threshold with "not reached" ranked as infinitely slow.
pub fn median_steps(runs: &[&RunSummary]) -> f64 {
    let v: Vec<f64> = runs.iter().map(|r| r.steps_to_threshold.map_or(f64::INFINITY, |s| s as f64)).collect();
    median(&v).unwrap_or(f64::INFINITY)
}

/// Per-run CSV followed by nothing else; column order is [`SUMMARY_HEADER`].
pub fn summary_csv(runs: &[RunSummary]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in runs {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.label,
            r.objective,
            r.seed,
            r.steps_to_threshold.map_or(String::new(), |s| s.to_string()),
            r.final_val_acc,
            r.probe_acc,
            r.mention_rate,
            r.wall_clock_s
        ));
    }
    out
}

/// Labels ranked by median steps-to-threshold, ties broken by higher median final accuracy.
pub fn rank_labels(runs: &[RunSummary]) -> Vec<(String, f64, f64)> {
    let mut labels: Vec<String> = Vec::new();
    for r in runs {
        if !labels.contains(&r.label) {
            labels.push(r.label.clone());
        }
    }
    let mut ranked: Vec<(String, f64, f64)> = labels
        .into_iter()
        .map(|l| {
            let group: Vec<&RunSummary> = runs.iter().filter(|r| r.label == l).collect();
            let acc = median(&group.iter().map(|r| r.final_val_acc).collect::<Vec<_>>()).unwrap_or(0.0);
            (l, median_steps(&group), acc)
        })
        .collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(b.2.total_cmp(&a.2)));
    ranked
}

/// Line chart of validation accuracy against step, one polyline per run.
pub fn svg_chart(runs: &[(String, &RunMetrics)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 40.0;
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];
    let max_step = runs
        .iter()
        .flat_map(|(_, m)| m.val_rows().map(|r| r.step))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{PAD}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <text x=\"{PAD}\" y=\"20\" font-size=\"12\">validation reconstruction accuracy vs step</text>\n",
        y0 = H - PAD,
        x1 = W - PAD
    );
    let mut labels: Vec<&str> = Vec::new();
    for (label, _) in runs {
        if !labels.contains(&label.as_str()) {
            labels.push(label);
        }
    }
    for (label, m) in runs {
        let color = palette[labels.iter().position(|l| l == label).unwrap_or(0) % palette.len()];
        let pts: Vec<String> = m
            .val_rows()
            .map(|r| {
                let x = PAD + (W - 2.0 * PAD) * r.step as f64 / max_step;
                let y = H - PAD - (H - 2.0 * PAD) * r.recon_acc;
                format!("{x:.1},{y:.1}")
            })
            .collect();
        out.push_str(&format!(
            "<polyline data-label=\"{label}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
    }
    for (k, l) in labels.iter().enumerate() {
        let color = palette[k % palette.len()];
        let y = PAD + 16.0 * k as f64;
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{y}\" font-size=\"12\" fill=\"{color}\">{l}</text>\n",
            W - PAD - 100.0
        ));
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TrainConfig {
        TrainConfig {
            steps: 6,
            batch_size: 4,
            eval_interval: 3,
            n_train: 16,
            n_val: 8,
            record_wall_clock: false,
            model: ModelConfig { d_model: 8, n_heads: 2, n_bottom: 1, n_top: 1, bottom_r: 1, top_r: 1, ..ModelConfig::default() },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig { steps: 1000, warmup_frac: 0.05, lr: 4e-4, ..TrainConfig::default() };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert!((lr_at(50, &cfg) - 4e-4).abs() < 1e-18);
        assert!((lr_at(525, &cfg) - 2e-4).abs() < 1e-15);
        assert_eq!(lr_at(1000, &cfg), 0.0);
        assert_eq!(lr_at(1001, &cfg), 0.0);
        let peak = (0..=1000).map(|s| lr_at(s, &cfg)).fold(f64::MIN, f64::max);
        assert_eq!((0..=1000).filter(|&s| lr_at(s, &cfg) == peak).count(), 1);
    }

    #[test]
    fn threshold_edges() {
        let mut m = RunMetrics::default();
        for (step, acc) in [(10, 0.2), (20, 0.6), (30, 0.9)] {
            m.rows.push(MetricsRow {
                step,
                split: "val".into(),
                objective: "flm".into(),
                loss_total: 0.0,
                loss_r: 0.0,
                loss_l2r: 0.0,
                loss_r2l: 0.0,
                recon_acc: acc,
                r_pred_meas: 1.0,
                r_corr_meas: 0.3,
                lr: 0.0,
                wall_clock_s: 0.0,
            });
        }
        assert_eq!(steps_to_threshold(&m, 0.0), Some(10));
        assert_eq!(steps_to_threshold(&m, 0.85), Some(30));
        assert_eq!(steps_to_threshold(&m, 1.01), None);
        assert_eq!(RunMetrics::from_csv(&m.to_csv()).unwrap(), m);
        assert!(m.to_csv().starts_with(METRICS_HEADER));
    }

    #[test]
    fn logged_lr_matches_schedule_and_runs_repeat() {
        let cfg = small();
        let a = train(&cfg, None).unwrap();
        for r in &a.metrics.rows {
            assert_eq!(r.lr, lr_at(r.step, &a.config));
        }
        let b = train(&cfg, None).unwrap();
        assert_eq!(a.metrics.to_csv(), b.metrics.to_csv());
        assert_eq!(a.metrics.val_rows().count(), 2);
    }

    #[test]
    fn config_rejections() {
        assert!(TrainConfig { warmup_frac: 1.0, ..small() }.resolved().is_err());
        assert!(TrainConfig { steps: 0, ..small() }.resolved().is_err());
        let json = r#"{"steps": 3, "bogus": 1}"#;
        assert!(serde_json::from_str::<TrainConfig>(json).is_err());
    }

    #[test]
    fn mention_rate_uses_first_mention() {
        let ds = gen_dataset(1, 2, 1).unwrap();
        let s = &ds.train[0];
        assert_eq!(mention_rate(&ds.vocab, &ds.train[..1], &[s.caption.clone()]), 1.0);
        assert_eq!(mention_rate(&ds.vocab, &ds.train[..1], &[vec![]]), 0.0);
    }

    #[test]
    fn ranking_and_svg() {
        let mk = |label: &str, steps: Option<usize>, acc: f64| RunSummary {
            label: label.into(),
            objective: label.into(),
            seed: 0,
            steps_to_threshold: steps,
            final_val_acc: acc,
            probe_acc: 0.0,
            mention_rate: 0.0,
            wall_clock_s: 0.0,
        };
        let runs = vec![mk("a", None, 0.5), mk("b", Some(100), 0.9), mk("c", None, 0.7)];
        let ranked: Vec<String> = rank_labels(&runs).into_iter().map(|r| r.0).collect();
        assert_eq!(ranked, vec!["b", "c", "a"]);
        let m = RunMetrics::default();
        let svg = svg_chart(&[("a".into(), &m), ("b".into(), &m)]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(summary_csv(&runs).lines().count(), 4);
    }
}
