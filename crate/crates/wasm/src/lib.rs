//! Browser bindings for the dependency-matrix demo.
//!
//! Every export returns a JSON string so the page needs no extra glue.

use flmlab::maskgen::{self, DependencyMatrix, MaskError, SpanSet};
use flmlab::rng::{stream, Stream};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct MatrixView {
    kind: &'static str,
    len: usize,
    /// Row-major 0/1 visibility, `len * len` entries.
    bits: Vec<u8>,
    predicted: Vec<usize>,
    /// Per-target spans for FLM, empty otherwise.
    spans: Vec<(usize, usize)>,
    r_pred: f64,
    mean_r_corr: f64,
}

#[derive(Serialize)]
struct Failure {
    error: String,
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

fn fail(e: impl ToString) -> String {
    to_json(&Failure { error: e.to_string() })
}

fn view(m: &DependencyMatrix, spans: Option<&SpanSet>) -> MatrixView {
    let len = m.len();
    let rates = maskgen::rates(m);
    MatrixView {
        kind: m.kind().name(),
        len,
        bits: (1..=len).flat_map(|i| m.row(i).iter().map(|&b| u8::from(b)).collect::<Vec<_>>()).collect(),
        predicted: m.predicted_set(),
        spans: spans.map(|s| s.spans().to_vec()).unwrap_or_default(),
        r_pred: rates.r_pred,
        mean_r_corr: rates.mean_r_corr,
    }
}

fn build(kind: &str, len: usize, param: f64, seed: u64) -> Result<(DependencyMatrix, Option<SpanSet>), MaskError> {
    let mut rng = stream(seed, Stream::Masks, 0);
    Ok(match kind {
        "mlm" => (maskgen::build_mlm_matrix(len, param, &mut rng)?, None),
        "ar" => (maskgen::build_ar_matrix(len)?, None),
        "prefixlm" => (maskgen::build_prefix_matrix(len, maskgen::prefix_len_from_ratio(len, param))?, None),
        "flm" => {
            let spans = maskgen::sample_flm_spans(len, param.max(1.0 / len as f64), &mut rng)?;
            (maskgen::spans_to_matrix(&spans), Some(spans))
        }
        other => return Err(MaskError::Argument(format!("unknown kind {other}"))),
    })
}

/// One dependency matrix. `param` is the mask rate (mlm), the corrupted-span
/// ratio (prefixlm) or the corruption rate (flm); ignored for ar.
#[wasm_bindgen]
pub fn dependency_matrix(kind: &str, len: usize, param: f64, seed: u64) -> String {
    match build(kind, len, param, seed) {
        Ok((m, spans)) => to_json(&view(&m, spans.as_ref())),
        Err(e) => fail(e),
    }
}

#[derive(Serialize)]
struct KeySet {
    target: usize,
    span: (usize, usize),
    /// Caption positions read from the left-to-right stream.
    l2r: Vec<usize>,
    /// Caption positions read from the right-to-left stream.
    r2l: Vec<usize>,
}

/// Features a reconstruction query for target `i` may read given its span.
#[wasm_bindgen]
pub fn query_keys(len: usize, i: usize, s: usize, e: usize) -> String {
    match maskgen::visible_context(i, (s, e), len) {
        Ok((l2r, r2l)) => to_json(&KeySet { target: i, span: (s, e), l2r, r2l }),
        Err(e) => fail(e),
    }
}

#[derive(Serialize)]
struct RatePoint {
    kind: &'static str,
    param: f64,
    r_pred: f64,
    mean_r_corr: f64,
}

/// Mean `(r_pred, r_corr)` per kind over a grid of parameters, `samples` draws each.
#[wasm_bindgen]
pub fn rate_sweep(len: usize, samples: usize, seed: u64) -> String {
    if len < 2 {
        return fail("L must be at least 2");
    }
    let mut points = Vec::new();
    let grid: Vec<f64> = (1..=9).map(|k| k as f64 / 10.0).collect();
    for (kind, name) in [("mlm", "mlm"), ("prefixlm", "prefixlm"), ("flm", "flm")] {
        for (g, &p) in grid.iter().enumerate() {
            let (mut rp, mut rc) = (0.0, 0.0);
            for k in 0..samples.max(1) {
                let draw = seed.wrapping_add((g * 100_000 + k) as u64);
                match build(kind, len, p, draw) {
                    Ok((m, _)) => {
                        let r = maskgen::rates(&m);
                        rp += r.r_pred;
                        rc += r.mean_r_corr;
                    }
                    Err(e) => return fail(e),
                }
            }
            let n = samples.max(1) as f64;
            points.push(RatePoint { kind: name, param: p, r_pred: rp / n, mean_r_corr: rc / n });
        }
    }
    let ar = maskgen::rates(&maskgen::build_ar_matrix(len).expect("L >= 2"));
    points.push(RatePoint { kind: "ar", param: 0.0, r_pred: ar.r_pred, mean_r_corr: ar.mean_r_corr });
    to_json(&points)
}
