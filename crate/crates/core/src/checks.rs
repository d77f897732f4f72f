//! Structural checks shared by the command line and the test suites.

use std::collections::BTreeSet;

use rand::Rng;
use serde::Serialize;

use crate::data::{Attributes, Sample, TokenBatch, FIELD_SIZES, RESERVED};
use crate::maskgen::{self, DependencyMatrix, SpanSet};
use crate::model::{EncoderMode, Model, ModelConfig, ModelError, QueryView, ReconQuery, ReconTarget, TextInput};
use crate::numerics::{grad_check, GradCheckConfig, GradCheckReport, Graph, NumericsError, ParamStore};
use crate::objectives::{forward_plan, sample_plan, Objective, ObjectiveConfig};
use crate::rng::{stream, Stream};

/// Random captions over the non-reserved ids of a `vocab`-sized vocabulary.
pub fn random_batch<R: Rng>(rng: &mut R, lengths: &[usize], vocab: usize) -> TokenBatch {
    let samples: Vec<Sample> = lengths
        .iter()
        .enumerate()
        .map(|(id, &l)| Sample {
            id,
            attributes: Attributes {
                color: rng.random_range(0..FIELD_SIZES[0]),
                shape: rng.random_range(0..FIELD_SIZES[1]),
                count: rng.random_range(1..=FIELD_SIZES[2]),
                background: rng.random_range(0..FIELD_SIZES[3]),
            },
            template: 0,
            caption: (0..l).map(|_| rng.random_range(RESERVED.len()..vocab)).collect(),
        })
        .collect();
    TokenBatch::from_samples(&samples.iter().collect::<Vec<_>>())
}

/// Exhaustive comparison of the matrix builders with direct definitions for
/// every `L` up to `max_len`. Returns the number of matrices compared and a
/// description of each mismatch.
pub fn exhaustive_masks(max_len: usize) -> (usize, Vec<String>) {
    let mut cases = 0;
    let mut failures = Vec::new();
    let mut expect = |failures: &mut Vec<String>, what: String, m: &DependencyMatrix, oracle: &dyn Fn(usize, usize) -> bool| {
        cases += 1;
        let len = m.len();
        if !(1..=len).all(|i| (1..=len).all(|j| m.bit(i, j) == oracle(i, j))) {
            failures.push(format!("{what}: entries differ"));
        }
        let violations = maskgen::validate_matrix(m);
        if !violations.is_empty() {
            failures.push(format!("{what}: {violations:?}"));
        }
    };
    for len in 1..=max_len {
        match maskgen::build_ar_matrix(len) {
            Ok(m) => expect(&mut failures, format!("ar L={len}"), &m, &|i, j| j < i),
            Err(e) => failures.push(format!("ar L={len}: {e}")),
        }
        for lp in 1..=len.saturating_sub(1).max(1) {
            match maskgen::build_prefix_matrix(len, lp) {
                Ok(m) => {
                    expect(&mut failures, format!("prefix L={len} L_p={lp}"), &m, &|i, j| j < i.max(lp));
                    let want: Vec<usize> = (lp..=len).collect();
                    if m.predicted_set() != want {
                        failures.push(format!("prefix L={len} L_p={lp}: predicted set {:?}", m.predicted_set()));
                    }
                }
                Err(e) => failures.push(format!("prefix L={len} L_p={lp}: {e}")),
            }
        }
        for bits in 1u32..(1 << len) {
            let masked: BTreeSet<usize> = (1..=len).filter(|j| bits & (1 << (j - 1)) != 0).collect();
            match maskgen::mlm_matrix_from_mask(len, &masked) {
                Ok(m) => {
                    expect(&mut failures, format!("mlm L={len} mask={bits:b}"), &m, &|_, j| !masked.contains(&j));
                    if m.predicted_set() != masked.iter().copied().collect::<Vec<_>>() {
                        failures.push(format!("mlm L={len} mask={bits:b}: predicted set"));
                    }
                }
                Err(e) => failures.push(format!("mlm L={len}: {e}")),
            }
        }
        // Every span of every target, one row at a time.
        for i in 1..=len {
            for s in 1..=i {
                for e in i..=len {
                    let mut spans: Vec<(usize, usize)> = (1..=len).map(|k| (k, k)).collect();
                    spans[i - 1] = (s, e);
                    let set = SpanSet::new(len, spans).expect("valid span");
                    let m = maskgen::spans_to_matrix(&set);
                    expect(&mut failures, format!("flm L={len} i={i} span=({s},{e})"), &m, &|r, j| {
                        let (a, b) = set.span(r);
                        j < a || j > b
                    });
                }
            }
        }
    }
    (cases, failures)
}

#[derive(Clone, Debug, Serialize)]
pub struct DecouplingRow {
    pub r_corr: f64,
    pub mean_r_corr: f64,
    pub min_r_pred: f64,
    pub max_r_pred: f64,
}

/// Samples `draws` FLM span sets per rate and reports measured rates.
pub fn decoupling(len: usize, rates: &[f64], draws: usize, seed: u64) -> Result<Vec<DecouplingRow>, maskgen::MaskError> {
    let mut out = Vec::new();
    for (k, &r) in rates.iter().enumerate() {
        let mut rng = stream(seed, Stream::Masks, k as u64);
        let (mut sum, mut lo, mut hi) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
        for _ in 0..draws {
            let m = maskgen::spans_to_matrix(&maskgen::sample_flm_spans(len, r, &mut rng)?);
            let rep = maskgen::rates(&m);
            sum += rep.mean_r_corr;
            lo = lo.min(rep.r_pred);
            hi = hi.max(rep.r_pred);
        }
        out.push(DecouplingRow { r_corr: r, mean_r_corr: sum / draws as f64, min_r_pred: lo, max_r_pred: hi });
    }
    Ok(out)
}

/// Text positions visible to a span query, split by stream.
pub fn visible_text(model: &Model, len: usize, view: QueryView) -> (Vec<usize>, Vec<usize>) {
    let w = len + 2;
    let keys = model.query_keys(&ReconQuery { batch: 0, view }, w, w);
    let l2r = (1..=len).filter(|&j| keys[j]).collect();
    let r2l = (1..=len).filter(|&j| keys[w + j]).collect();
    (l2r, r2l)
}

/// Suffix spans `(i, L)` against the AR pattern, both as matrices and as the
/// reconstructor's key sets, for every `L` up to `max_len`.
pub fn suffix_reduction(max_len: usize) -> Result<(usize, Vec<String>), ModelError> {
    let cfg = ModelConfig { d_model: 8, n_heads: 1, n_bottom: 1, n_top: 1, bottom_r: 1, top_r: 1, l_max: max_len, ..ModelConfig::default() };
    let (model, _) = Model::init(&cfg, 0)?;
    let mut cases = 0;
    let mut failures = Vec::new();
    for len in 1..=max_len {
        cases += 1;
        let ar = maskgen::build_ar_matrix(len).expect("L >= 1");
        let flm = maskgen::spans_to_matrix(&SpanSet::suffix(len));
        if (1..=len).any(|i| flm.row(i) != ar.row(i)) {
            failures.push(format!("L={len}: matrix differs from AR"));
        }
        for i in 1..=len {
            let (l2r, r2l) = visible_text(&model, len, QueryView::Span(i, len));
            if l2r != ar.visible(i) || !r2l.is_empty() {
                failures.push(format!("L={len} i={i}: keys l2r {l2r:?} r2l {r2l:?}"));
            }
        }
    }
    Ok((cases, failures))
}

#[derive(Clone, Debug, Serialize)]
pub struct LeakageReport {
    pub draws: usize,
    pub targets: usize,
    /// Largest relative change of a target's logits when its own span is rewritten.
    pub max_invariance_rel: f64,
    /// Draws where some visible-token replacement moved a target's logits by more than 1e-3.
    pub sensitive_draws: usize,
}

fn rel_change(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn recon_logits(model: &Model, params: &ParamStore<f64>, batch: &TokenBatch, targets: &[ReconTarget]) -> Result<Vec<Vec<f64>>, ModelError> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let feats = model.encode_text_dual(&mut g, &b, &TextInput::from_batch(batch), &batch.attributes)?;
    let logits = model.reconstruct(&mut g, &b, &feats, targets)?;
    let t = g.value(logits);
    Ok((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
}

/// Rewrites every token inside each target's span (the target included) and
/// checks the target's logits do not move; also replaces one visible token
/// per target and records whether any logit moved.
pub fn leakage(draws: usize, len: usize, seed: u64) -> Result<LeakageReport, ModelError> {
    let cfg = ModelConfig { d_model: 16, n_heads: 2, l_max: len, ..ModelConfig::default() };
    let vocab = cfg.vocab_size;
    let mut report = LeakageReport { draws, targets: 0, max_invariance_rel: 0.0, sensitive_draws: 0 };
    for d in 0..draws {
        let (model, params) = Model::init(&cfg, seed.wrapping_add(d as u64))?;
        let params: ParamStore<f64> = params.cast();
        let mut rng = stream(seed, Stream::Probe, d as u64);
        let batch = random_batch(&mut rng, &[len], vocab);
        let r_corr = [1.0 / len as f64, 0.3, 0.5][d % 3];
        let spans = maskgen::sample_flm_spans(len, r_corr, &mut rng).map_err(|e| ModelError::Config(e.to_string()))?;
        let targets: Vec<ReconTarget> =
            (1..=len).map(|i| ReconTarget { batch: 0, pos: i, span: spans.span(i) }).collect();
        let base = recon_logits(&model, &params, &batch, &targets)?;
        let mut sensitive = false;
        for (k, t) in targets.iter().enumerate() {
            let (s, e) = t.span;
            let mut hidden = batch.clone();
            for j in s..=e {
                let old = batch.token(0, j);
                let new = loop {
                    let c = rng.random_range(RESERVED.len()..vocab);
                    if c != old {
                        break c;
                    }
                };
                hidden = hidden.with_token(0, j, new);
            }
            let after = recon_logits(&model, &params, &hidden, std::slice::from_ref(t))?;
            report.max_invariance_rel = report.max_invariance_rel.max(rel_change(&base[k], &after[0]));
            let visible: Vec<usize> = (1..s).chain(e + 1..=len).collect();
            if !visible.is_empty() {
                let j = visible[rng.random_range(0..visible.len())];
                let old = batch.token(0, j);
                let new = if old + 1 < vocab { old + 1 } else { RESERVED.len() };
                let after = recon_logits(&model, &params, &batch.with_token(0, j, new), std::slice::from_ref(t))?;
                sensitive |= rel_change(&base[k], &after[0]) > 1e-3;
            }
            report.targets += 1;
        }
        if sensitive {
            report.sensitive_draws += 1;
        }
    }
    Ok(report)
}

/// Model sizes for gradient checking.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradDims {
    /// d = 8, one bottom and one top layer, L = 6, ten-token vocabulary.
    Tiny,
    /// d = 16, two bottom and two top layers, L = 8.
    Small,
}

impl GradDims {
    pub fn config(self, objective: Objective) -> ModelConfig {
        let mode: EncoderMode = objective.encoder_mode();
        match self {
            GradDims::Tiny => ModelConfig {
                d_model: 8,
                n_heads: 2,
                n_bottom: 1,
                n_top: 1,
                bottom_r: 1,
                top_r: 1,
                vocab_size: 10,
                l_max: 6,
                mode,
                ..ModelConfig::default()
            },
            GradDims::Small => ModelConfig { d_model: 16, n_heads: 2, l_max: 8, vocab_size: 16, mode, ..ModelConfig::default() },
        }
    }
}

/// Finite-difference check of every parameter group of the full training loss.
pub fn model_gradcheck(
    dims: GradDims,
    objective: Objective,
    corrupt_group: Option<String>,
    seed: u64,
) -> Result<GradCheckReport, NumericsError> {
    let cfg = dims.config(objective);
    let to_num = |e: ModelError| match e {
        ModelError::Numerics(n) => n,
        other => NumericsError::Shape(other.to_string()),
    };
    let (model, params) = Model::init(&cfg, seed).map_err(to_num)?;
    let params: ParamStore<f64> = params.cast();
    let mut rng = stream(seed, Stream::Data, 0);
    let len = cfg.l_max;
    let batch = random_batch(&mut rng, &[len, len - 2], cfg.vocab_size);
    let ocfg = ObjectiveConfig { objective, r_corr: 0.3, ..ObjectiveConfig::default() };
    let plan = sample_plan(&batch, &ocfg, &mut rng).map_err(|e| NumericsError::Shape(e.to_string()))?;
    let gc = GradCheckConfig { corrupt_group, ..GradCheckConfig::default() };
    grad_check(
        &params,
        |_, g, b| {
            forward_plan(&model, g, b, &batch, &plan, &ocfg).map(|o| o.total).map_err(|e| match e {
                crate::objectives::ObjectiveError::Numerics(n) => n,
                other => NumericsError::Shape(other.to_string()),
            })
        },
        &gc,
    )
}
