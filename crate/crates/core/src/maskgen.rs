//! Dependency matrices for MLM, AR, PrefixLM and FLM.
//!
//! All public contracts use 1-based positions (`1..=L`); storage is 0-based.
//! `bit(i, j) == true` means token `j` is visible when predicting token `i`,
//! and `bit(i, i) == false` marks `i` as a prediction target.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("argument error: {0}")]
    Argument(String),
}

fn arg(msg: impl Into<String>) -> MaskError {
    MaskError::Argument(msg.into())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixKind {
    Mlm,
    Ar,
    Prefixlm,
    Flm,
}

impl MatrixKind {
    pub fn name(self) -> &'static str {
        match self {
            MatrixKind::Mlm => "mlm",
            MatrixKind::Ar => "ar",
            MatrixKind::Prefixlm => "prefixlm",
            MatrixKind::Flm => "flm",
        }
    }
}

impl fmt::Display for MatrixKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// L x L boolean visibility matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DependencyMatrix {
    len: usize,
    bits: Vec<bool>,
    kind: MatrixKind,
}

impl DependencyMatrix {
    /// Builds from 0-based rows; used for hand-made matrices.
    pub fn from_rows(kind: MatrixKind, rows: &[Vec<bool>]) -> Result<Self, MaskError> {
        let len = rows.len();
        if len == 0 || rows.iter().any(|r| r.len() != len) {
            return Err(arg("dependency matrix must be square and non-empty"));
        }
        Ok(Self { len, bits: rows.concat(), kind })
    }

    fn from_fn(kind: MatrixKind, len: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(len * len);
        for i in 1..=len {
            for j in 1..=len {
                bits.push(f(i, j));
            }
        }
        Self { len, bits, kind }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn kind(&self) -> MatrixKind {
        self.kind
    }

    /// `m_ij` with 1-based indices.
    pub fn bit(&self, i: usize, j: usize) -> bool {
        self.bits[(i - 1) * self.len + (j - 1)]
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.bits[(i - 1) * self.len + (j - 1)] = value;
    }

    /// Row `i` (1-based) as 0-based storage.
    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[(i - 1) * self.len..i * self.len]
    }

    /// Targets `{i : m_ii = 0}`, 1-based and ascending.
    pub fn predicted_set(&self) -> Vec<usize> {
        (1..=self.len).filter(|&i| !self.bit(i, i)).collect()
    }

    /// Visible positions `{j : m_ij = 1}` for target `i`.
    pub fn visible(&self, i: usize) -> Vec<usize> {
        (1..=self.len).filter(|&j| self.bit(i, j)).collect()
    }

    /// 0/1 grid, one row per line.
    pub fn to_grid(&self) -> String {
        let mut s = String::with_capacity(self.len * (self.len + 1));
        for i in 1..=self.len {
            for &b in self.row(i) {
                s.push(if b { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }
}

/// Per-target contiguous corruption spans `(s_i, e_i)`, inclusive and 1-based.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanSet {
    len: usize,
    spans: Vec<(usize, usize)>,
}

impl SpanSet {
    pub fn new(len: usize, spans: Vec<(usize, usize)>) -> Result<Self, MaskError> {
        if spans.len() != len || len == 0 {
            return Err(arg(format!("{} spans for L = {len}", spans.len())));
        }
        for (k, &(s, e)) in spans.iter().enumerate() {
            let i = k + 1;
            if !(1 <= s && s <= i && i <= e && e <= len) {
                return Err(arg(format!("span ({s}, {e}) does not contain {i} within 1..={len}")));
            }
        }
        Ok(Self { len, spans })
    }

    /// Minimal corruption: every span is `(i, i)`.
    pub fn minimal(len: usize) -> Self {
        Self { len, spans: (1..=len).map(|i| (i, i)).collect() }
    }

    /// Suffix spans `(i, L)`, the AR information pattern.
    pub fn suffix(len: usize) -> Self {
        Self { len, spans: (1..=len).map(|i| (i, len)).collect() }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Span of target `i` (1-based).
    pub fn span(&self, i: usize) -> (usize, usize) {
        self.spans[i - 1]
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    pub fn mean_length(&self) -> f64 {
        self.spans.iter().map(|(s, e)| (e - s + 1) as f64).sum::<f64>() / self.len as f64
    }
}

/// Prediction rate and mean corruption rate of a dependency matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub r_pred: f64,
    pub mean_r_corr: f64,
}

pub fn build_ar_matrix(len: usize) -> Result<DependencyMatrix, MaskError> {
    if len < 1 {
        return Err(arg("L must be at least 1"));
    }
    Ok(DependencyMatrix::from_fn(MatrixKind::Ar, len, |i, j| j < i))
}

/// Prefix length from a corrupted-span ratio: `round((1 - r_span) * L)` clamped to `[1, L-1]`.
///
/// For `L = 1` the only admissible prefix length is 1.
pub fn prefix_len_from_ratio(len: usize, r_span: f64) -> usize {
    let raw = ((1.0 - r_span) * len as f64).round() as usize;
    raw.clamp(1, len.saturating_sub(1).max(1))
}

/// PrefixLM visibility `m_ij = 1[j < max(i, L_p)]`.
pub fn build_prefix_matrix(len: usize, prefix_len: usize) -> Result<DependencyMatrix, MaskError> {
    if len < 1 {
        return Err(arg("L must be at least 1"));
    }
    let upper = len.saturating_sub(1).max(1);
    if prefix_len < 1 || prefix_len > upper {
        return Err(arg(format!("L_p = {prefix_len} outside [1, {upper}]")));
    }
    Ok(DependencyMatrix::from_fn(MatrixKind::Prefixlm, len, |i, j| j < i.max(prefix_len)))
}

/// Samples `r_span ~ Uniform(0, 1)` and builds the PrefixLM matrix.
pub fn sample_prefix_matrix<R: Rng>(len: usize, rng: &mut R) -> Result<(DependencyMatrix, usize), MaskError> {
    let r_span: f64 = rng.random();
    let lp = prefix_len_from_ratio(len, r_span);
    Ok((build_prefix_matrix(len, lp)?, lp))
}

/// MLM matrix from an explicit masked-column set (1-based).
pub fn mlm_matrix_from_mask(len: usize, masked: &BTreeSet<usize>) -> Result<DependencyMatrix, MaskError> {
    if masked.is_empty() || masked.iter().any(|&j| j < 1 || j > len) {
        return Err(arg("masked set must be non-empty and within 1..=L"));
    }
    Ok(DependencyMatrix::from_fn(MatrixKind::Mlm, len, |_, j| !masked.contains(&j)))
}

/// One Bernoulli(`r_mask`) draw per column; re-draws until at least one column is masked.
pub fn build_mlm_matrix<R: Rng>(len: usize, r_mask: f64, rng: &mut R) -> Result<DependencyMatrix, MaskError> {
    if len < 1 {
        return Err(arg("L must be at least 1"));
    }
    if !(r_mask > 0.0 && r_mask < 1.0) {
        return Err(arg(format!("r_mask = {r_mask} outside (0, 1)")));
    }
    loop {
        let masked: BTreeSet<usize> = (1..=len).filter(|_| rng.random_bool(r_mask)).collect();
        if !masked.is_empty() {
            return mlm_matrix_from_mask(len, &masked);
        }
    }
}

/// Per-target span: length `~ Binomial(L, r_corr)` clamped to `[1, L]`, start
/// uniform over placements that keep the span in range and containing `i`.
///
/// At the minimum rate `r_corr = 1/L` every span is the single token `(i, i)`.
pub fn sample_flm_spans<R: Rng>(len: usize, r_corr: f64, rng: &mut R) -> Result<SpanSet, MaskError> {
    if len < 1 {
        return Err(arg("L must be at least 1"));
    }
    // Small slack so that r_corr = 1/L computed in floating point is accepted.
    if r_corr.is_nan() || r_corr * (len as f64) < 1.0 - 1e-9 || r_corr > 1.0 {
        return Err(arg(format!("r_corr = {r_corr} outside [1/L, 1] for L = {len}")));
    }
    if r_corr * (len as f64) <= 1.0 + 1e-9 {
        return Ok(SpanSet::minimal(len));
    }
    let p = r_corr.min(1.0);
    let binom = Binomial::new(len as u64, p).map_err(|e| arg(e.to_string()))?;
    let mut spans = Vec::with_capacity(len);
    for i in 1..=len {
        let l = (binom.sample(rng) as usize).clamp(1, len);
        let lo = if i + 1 > l { i + 1 - l } else { 1 };
        let hi = i.min(len + 1 - l);
        let s = rng.random_range(lo..=hi);
        spans.push((s, s + l - 1));
    }
    SpanSet::new(len, spans)
}

/// Row `i` is zero exactly on `[s_i, e_i]`.
pub fn spans_to_matrix(spans: &SpanSet) -> DependencyMatrix {
    DependencyMatrix::from_fn(MatrixKind::Flm, spans.len(), |i, j| {
        let (s, e) = spans.span(i);
        j < s || j > e
    })
}

pub fn rates(m: &DependencyMatrix) -> RateReport {
    let len = m.len();
    let predicted = m.predicted_set();
    if predicted.is_empty() {
        return RateReport { r_pred: 0.0, mean_r_corr: 0.0 };
    }
    let corr: f64 = predicted
        .iter()
        .map(|&i| m.row(i).iter().filter(|b| !**b).count() as f64 / len as f64)
        .sum();
    RateReport { r_pred: predicted.len() as f64 / len as f64, mean_r_corr: corr / predicted.len() as f64 }
}

/// Uniform subset of size `round(target * |set|)`, at least 1, in ascending order.
pub fn subsample_predictions<R: Rng>(set: &[usize], target: f64, rng: &mut R) -> Result<Vec<usize>, MaskError> {
    if set.is_empty() {
        return Err(arg("cannot subsample an empty prediction set"));
    }
    if !(target > 0.0 && target <= 1.0) {
        return Err(arg(format!("r_pred target {target} outside (0, 1]")));
    }
    let k = ((target * set.len() as f64).round() as usize).clamp(1, set.len());
    if k == set.len() {
        return Ok(set.to_vec());
    }
    let mut picked: Vec<usize> = index::sample(rng, set.len(), k).into_iter().map(|i| set[i]).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Visible positions for target `i` split by side: `({1..s-1}, {e+1..L})`.
pub fn visible_context(i: usize, span: (usize, usize), len: usize) -> Result<(Vec<usize>, Vec<usize>), MaskError> {
    let (s, e) = span;
    if !(1 <= s && s <= i && i <= e && e <= len) {
        return Err(arg(format!("span ({s}, {e}) does not contain {i} within 1..={len}")));
    }
    Ok(((1..s).collect(), (e + 1..=len).collect()))
}

/// Names of violated per-kind invariants; empty when the matrix is valid.
pub fn validate_matrix(m: &DependencyMatrix) -> Vec<&'static str> {
    let len = m.len();
    let mut violations = Vec::new();
    match m.kind() {
        MatrixKind::Mlm => {
            if (2..=len).any(|i| m.row(i) != m.row(1)) {
                violations.push("mlm-identical-rows");
            }
            if m.predicted_set().is_empty() {
                violations.push("mlm-nonempty-prediction");
            }
        }
        MatrixKind::Ar => {
            let bad = (1..=len).any(|i| (1..=len).any(|j| m.bit(i, j) != (j < i)));
            if bad {
                violations.push("ar-lower-triangular");
            }
        }
        MatrixKind::Prefixlm => {
            // Recover L_p from the first row: row 1 has ones on 1..L_p-1.
            let lp = m.row(1).iter().filter(|b| **b).count() + 1;
            let bad = (1..=len).any(|i| (1..=len).any(|j| m.bit(i, j) != (j < i.max(lp))));
            if bad {
                violations.push("prefixlm-formula");
            }
        }
        MatrixKind::Flm => {
            for i in 1..=len {
                let zeros: Vec<usize> = (1..=len).filter(|&j| !m.bit(i, j)).collect();
                let contiguous = zeros.windows(2).all(|w| w[1] == w[0] + 1);
                if !contiguous {
                    violations.push("flm-span-contiguity");
                    break;
                }
                if !zeros.contains(&i) {
                    violations.push("flm-self-corrupted");
                    break;
                }
            }
        }
    }
    violations
}

/// Replaces each position with `mask_id` independently with probability `r`.
///
/// Returns the corrupted tokens and the corrupted 1-based positions.
pub fn apply_pre_encoding_corruption<R: Rng>(
    tokens: &[usize],
    r: f64,
    mask_id: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>), MaskError> {
    if !(0.0..1.0).contains(&r) {
        return Err(arg(format!("pre-encoding corruption rate {r} outside [0, 1)")));
    }
    let mut out = tokens.to_vec();
    let mut hit = Vec::new();
    if r == 0.0 {
        return Ok((out, hit));
    }
    for (k, t) in out.iter_mut().enumerate() {
        if rng.random_bool(r) {
            *t = mask_id;
            hit.push(k + 1);
        }
    }
    Ok((out, hit))
}
