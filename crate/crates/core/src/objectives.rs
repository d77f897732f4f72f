//! The four pretraining losses viewed through the dependency-matrix lens:
//! a per-batch [`Plan`] fixes who is predicted and what each target sees,
//! then [`forward_plan`] builds the token-mean NLL on the tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{TokenBatch, MASK};
use crate::maskgen::{self, DependencyMatrix, MaskError, SpanSet};
use crate::model::{EncoderMode, Model, ModelError, ReconTarget, Regime, TextInput};
use crate::numerics::{cross_entropy, Bound, Graph, NumericsError, Scalar, Tensor, Var};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("empty prediction set")]
    EmptyPrediction,
    #[error("argument error: {0}")]
    Argument(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Flm,
    Mlm,
    Ar,
    Prefixlm,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Flm => "flm",
            Objective::Mlm => "mlm",
            Objective::Ar => "ar",
            Objective::Prefixlm => "prefixlm",
        }
    }

    pub fn encoder_mode(self) -> EncoderMode {
        match self {
            Objective::Flm => EncoderMode::DualCausal,
            Objective::Mlm => EncoderMode::Full,
            Objective::Ar => EncoderMode::Causal,
            Objective::Prefixlm => EncoderMode::Prefix,
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    /// Post-encoding span corruption inside the reconstructor.
    Span,
    /// MASK substitution before encoding, minimal spans afterwards.
    RandomPreEncoding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub objective: Objective,
    /// FLM span corruption rate, or the pre-encoding MASK rate. Span rates
    /// at or below `1/L` give single-token spans.
    pub r_corr: f64,
    pub r_mask: f64,
    pub r_pred_target: f64,
    pub corruption: Corruption,
    pub use_l2r: bool,
    pub use_r2l: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Flm,
            r_corr: 0.0,
            r_mask: 0.4,
            r_pred_target: 1.0,
            corruption: Corruption::Span,
            use_l2r: true,
            use_r2l: true,
        }
    }
}

/// Per-element corruption and prediction choices for one batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Plan {
    Flm {
        spans: Vec<SpanSet>,
        /// Pre-encoding MASK positions, empty under span corruption.
        premasked: Vec<Vec<usize>>,
        selected: Vec<Vec<usize>>,
    },
    Mlm {
        matrices: Vec<DependencyMatrix>,
        selected: Vec<Vec<usize>>,
    },
    Ar,
    Prefix {
        prefix_lens: Vec<usize>,
    },
}

impl Plan {
    /// Dependency matrix per batch element.
    pub fn matrices(&self, batch: &TokenBatch) -> Result<Vec<DependencyMatrix>, ObjectiveError> {
        let lens = &batch.lengths;
        Ok(match self {
            Plan::Flm { spans, .. } => spans.iter().map(maskgen::spans_to_matrix).collect(),
            Plan::Mlm { matrices, .. } => matrices.clone(),
            Plan::Ar => lens.iter().map(|&l| maskgen::build_ar_matrix(l)).collect::<Result<_, _>>()?,
            Plan::Prefix { prefix_lens } => lens
                .iter()
                .zip(prefix_lens)
                .map(|(&l, &p)| maskgen::build_prefix_matrix(l, p))
                .collect::<Result<_, _>>()?,
        })
    }

    /// 1-based positions entering the loss, per element.
    pub fn loss_positions(&self, batch: &TokenBatch) -> Vec<Vec<usize>> {
        match self {
            Plan::Flm { selected, .. } | Plan::Mlm { selected, .. } => selected.clone(),
            Plan::Ar => batch.lengths.iter().map(|&l| (1..=l).collect()).collect(),
            Plan::Prefix { prefix_lens } => {
                batch.lengths.iter().zip(prefix_lens).map(|(&l, &p)| (p..=l).collect()).collect()
            }
        }
    }
}

pub fn sample_plan<R: Rng>(batch: &TokenBatch, cfg: &ObjectiveConfig, rng: &mut R) -> Result<Plan, ObjectiveError> {
    let lens = &batch.lengths;
    Ok(match cfg.objective {
        Objective::Flm => {
            let mut spans = Vec::with_capacity(lens.len());
            let mut premasked = Vec::with_capacity(lens.len());
            let mut selected = Vec::with_capacity(lens.len());
            for (b, &l) in lens.iter().enumerate() {
                let set = match cfg.corruption {
                    Corruption::Span => {
                        premasked.push(Vec::new());
                        maskgen::sample_flm_spans(l, cfg.r_corr.max(1.0 / l as f64), rng)?
                    }
                    Corruption::RandomPreEncoding => {
                        let (_, hit) = maskgen::apply_pre_encoding_corruption(batch.caption(b), cfg.r_corr, MASK, rng)?;
                        premasked.push(hit);
                        SpanSet::minimal(l)
                    }
                };
                selected.push(maskgen::subsample_predictions(&(1..=l).collect::<Vec<_>>(), cfg.r_pred_target, rng)?);
                spans.push(set);
            }
            Plan::Flm { spans, premasked, selected }
        }
        Objective::Mlm => {
            let mut matrices = Vec::with_capacity(lens.len());
            let mut selected = Vec::with_capacity(lens.len());
            for &l in lens {
                let m = maskgen::build_mlm_matrix(l, cfg.r_mask, rng)?;
                selected.push(maskgen::subsample_predictions(&m.predicted_set(), cfg.r_pred_target, rng)?);
                matrices.push(m);
            }
            Plan::Mlm { matrices, selected }
        }
        Objective::Ar => Plan::Ar,
        Objective::Prefixlm => Plan::Prefix {
            prefix_lens: lens
                .iter()
                .map(|&l| maskgen::sample_prefix_matrix(l, rng).map(|(_, p)| p))
                .collect::<Result<_, _>>()?,
        },
    })
}

/// Scalar loss values of one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub loss_r: f64,
    pub loss_l2r: f64,
    pub loss_r2l: f64,
    pub loss_inter: f64,
    pub loss_total: f64,
    pub predicted: usize,
    pub correct: usize,
    pub real_tokens: usize,
    /// Sum over predicted targets of each target's corrupted fraction.
    pub corr_sum: f64,
}

impl LossBreakdown {
    pub fn recon_acc(&self) -> f64 {
        self.correct as f64 / self.predicted.max(1) as f64
    }

    pub fn r_pred(&self) -> f64 {
        self.predicted as f64 / self.real_tokens.max(1) as f64
    }

    pub fn r_corr(&self) -> f64 {
        self.corr_sum / self.predicted.max(1) as f64
    }
}

pub struct StepOutput {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Mean cross-entropy of `logits` rows against targets: `picks = [(row, target)]`.
pub fn mean_nll<T: Scalar>(logits: &Tensor<T>, picks: &[(usize, usize)]) -> Result<f64, ObjectiveError> {
    if picks.is_empty() {
        return Err(ObjectiveError::EmptyPrediction);
    }
    let mut total = 0.0;
    for &(row, target) in picks {
        if row >= logits.rows() {
            return Err(ObjectiveError::Argument(format!("row {row} out of range")));
        }
        total += cross_entropy(logits.row(row), target)?.as_f64();
    }
    Ok(total / picks.len() as f64)
}

fn count_correct<T: Scalar>(logits: &Tensor<T>, picks: &[(usize, usize)]) -> usize {
    picks
        .iter()
        .filter(|&&(row, target)| {
            let r = logits.row(row);
            let best = (0..r.len()).fold(0, |best, k| if r[k] > r[best] { k } else { best });
            best == target
        })
        .count()
}

/// Builds the loss for `plan` on the tape.
pub fn forward_plan<T: Scalar>(
    model: &Model,
    g: &mut Graph<T>,
    b: &Bound,
    batch: &TokenBatch,
    plan: &Plan,
    cfg: &ObjectiveConfig,
) -> Result<StepOutput, ObjectiveError> {
    let nb = batch.batch_size();
    let mut bd = LossBreakdown { real_tokens: batch.real_token_count(), ..Default::default() };
    let matrices = plan.matrices(batch)?;
    let positions = plan.loss_positions(batch);
    for (m, sel) in matrices.iter().zip(&positions) {
        for &i in sel {
            bd.corr_sum += m.row(i).iter().filter(|v| !**v).count() as f64 / m.len() as f64;
        }
    }
    let main_picks: Vec<(usize, usize)>;
    let main_logits: Var;
    let mut extra: Vec<(Var, bool)> = Vec::new();
    match plan {
        Plan::Flm { spans, premasked, selected } => {
            let mut input = TextInput::from_batch(batch);
            for (bi, hits) in premasked.iter().enumerate() {
                for &i in hits {
                    input.tokens[bi * batch.width + i] = MASK;
                }
                if !hits.is_empty() {
                    let l = batch.lengths[bi] as f64;
                    let covered = |i: usize| hits.iter().filter(|&&h| h != i).count() as f64 / l;
                    bd.corr_sum += selected[bi].iter().map(|&i| covered(i)).sum::<f64>();
                }
            }
            let feats = model.encode_text_dual(g, b, &input, &batch.attributes)?;
            let mut targets = Vec::new();
            let mut picks = Vec::new();
            for bi in 0..nb {
                if spans[bi].len() != batch.lengths[bi] {
                    return Err(ObjectiveError::Argument("span set length differs from caption length".into()));
                }
                for &i in &selected[bi] {
                    picks.push((targets.len(), batch.token(bi, i)));
                    targets.push(ReconTarget { batch: bi, pos: i, span: spans[bi].span(i) });
                }
            }
            main_logits = model.reconstruct(g, b, &feats, &targets)?;
            main_picks = picks;
            if cfg.use_l2r || cfg.use_r2l {
                let lm = model.lm_heads(g, b, &feats)?;
                let picks: Vec<(usize, usize)> =
                    lm.rows.iter().enumerate().map(|(k, &(bi, i))| (k, batch.token(bi, i))).collect();
                if cfg.use_l2r {
                    extra.push((g.cross_entropy(lm.l2r, &picks)?, true));
                }
                if cfg.use_r2l {
                    extra.push((g.cross_entropy(lm.r2l, &picks)?, false));
                }
            }
        }
        Plan::Mlm { selected, matrices } => {
            let mut input = TextInput::from_batch(batch);
            for (bi, m) in matrices.iter().enumerate() {
                for i in m.predicted_set() {
                    input.tokens[bi * batch.width + i] = MASK;
                }
            }
            let regimes = vec![Regime::Full; nb];
            let h = model.encode_text_single(g, b, &input, &batch.attributes, &regimes, None)?;
            let (rows, picks) = gather_plan(batch, selected, 0);
            let x = g.gather_rows(h, &rows)?;
            main_logits = model.head(g, b, crate::model::HeadKind::Mlm, x)?;
            main_picks = picks;
        }
        Plan::Ar | Plan::Prefix { .. } => {
            let regimes: Vec<Regime> = match plan {
                Plan::Prefix { prefix_lens } => prefix_lens.iter().map(|&p| Regime::Prefix(p - 1)).collect(),
                _ => vec![Regime::Causal; nb],
            };
            let input = TextInput::from_batch(batch);
            let h = model.encode_text_single(g, b, &input, &batch.attributes, &regimes, None)?;
            let (rows, picks) = gather_plan(batch, &positions, 1);
            let x = g.gather_rows(h, &rows)?;
            main_logits = model.head(g, b, crate::model::HeadKind::L2r, x)?;
            main_picks = picks;
        }
    }
    if main_picks.is_empty() {
        return Err(ObjectiveError::EmptyPrediction);
    }
    let loss_r = g.cross_entropy(main_logits, &main_picks)?;
    bd.predicted = main_picks.len();
    bd.correct = count_correct(g.value(main_logits), &main_picks);
    bd.loss_r = g.value(loss_r).data()[0].as_f64();
    let mut total = loss_r;
    for (v, l2r) in &extra {
        let val = g.value(*v).data()[0].as_f64();
        if *l2r {
            bd.loss_l2r = val;
        } else {
            bd.loss_r2l = val;
        }
        total = g.add(total, *v)?;
    }
    bd.loss_inter = bd.loss_l2r + bd.loss_r2l;
    bd.loss_total = g.value(total).data()[0].as_f64();
    Ok(StepOutput { total, breakdown: bd })
}

/// Feature rows `b·T + i − shift` and their target tokens.
fn gather_plan(batch: &TokenBatch, positions: &[Vec<usize>], shift: usize) -> (Vec<usize>, Vec<(usize, usize)>) {
    let mut rows = Vec::new();
    let mut picks = Vec::new();
    for (bi, sel) in positions.iter().enumerate() {
        for &i in sel {
            picks.push((rows.len(), batch.token(bi, i)));
            rows.push(bi * batch.width + i - shift);
        }
    }
    (rows, picks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_dataset, Sample};
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(obj: Objective) -> (Model, crate::numerics::ParamStore<f64>, TokenBatch) {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_bottom: 1,
            n_top: 1,
            bottom_r: 1,
            top_r: 1,
            mode: obj.encoder_mode(),
            ..ModelConfig::default()
        };
        let (m, s) = Model::init(&cfg, 5).unwrap();
        let ds = gen_dataset(2, 4, 1).unwrap();
        let tb = TokenBatch::from_samples(&ds.train.iter().collect::<Vec<&Sample>>());
        (m, s.cast(), tb)
    }

    #[test]
    fn mean_nll_cases() {
        let uniform = Tensor::new(vec![2, 4], vec![0.0f64; 8]).unwrap();
        assert!((mean_nll(&uniform, &[(0, 1), (1, 3)]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let peaked = Tensor::new(vec![1, 3], vec![30.0f64, 0.0, 0.0]).unwrap();
        assert!(mean_nll(&peaked, &[(0, 0)]).unwrap() < 1e-12);
        let one = Tensor::new(vec![1, 3], vec![0.5f64, -1.0, 2.0]).unwrap();
        let direct = cross_entropy(one.row(0), 1).unwrap();
        assert_eq!(mean_nll(&one, &[(0, 1)]).unwrap(), direct);
        assert_eq!(mean_nll(&one, &[]), Err(ObjectiveError::EmptyPrediction));
    }

    #[test]
    fn loss_positions_match_predicted_sets() {
        for obj in [Objective::Flm, Objective::Mlm, Objective::Ar, Objective::Prefixlm] {
            let (_, _, tb) = setup(obj);
            let cfg = ObjectiveConfig { objective: obj, ..ObjectiveConfig::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            for _ in 0..20 {
                let plan = sample_plan(&tb, &cfg, &mut rng).unwrap();
                let mats = plan.matrices(&tb).unwrap();
                let pos = plan.loss_positions(&tb);
                for (m, p) in mats.iter().zip(&pos) {
                    assert_eq!(&m.predicted_set(), p, "{obj}");
                }
            }
        }
    }

    #[test]
    fn total_is_sum_of_components() {
        for obj in [Objective::Flm, Objective::Mlm, Objective::Ar, Objective::Prefixlm] {
            let (m, s, tb) = setup(obj);
            let cfg = ObjectiveConfig { objective: obj, ..ObjectiveConfig::default() };
            let plan = sample_plan(&tb, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            let mut g = Graph::<f64>::new();
            let b = s.bind(&mut g, true);
            let out = forward_plan(&m, &mut g, &b, &tb, &plan, &cfg).unwrap();
            let bd = out.breakdown;
            assert_eq!(bd.loss_total, bd.loss_r + bd.loss_l2r + bd.loss_r2l);
            assert_eq!(bd.loss_inter, bd.loss_l2r + bd.loss_r2l);
            assert!(bd.loss_r > 0.0 && bd.loss_l2r >= 0.0 && bd.loss_r2l >= 0.0);
            if obj != Objective::Flm {
                assert_eq!(bd.loss_inter, 0.0);
            }
        }
    }

    #[test]
    fn prefix_of_one_equals_ar() {
        let (m_pre, s, tb) = setup(Objective::Prefixlm);
        let cfg = ObjectiveConfig { objective: Objective::Prefixlm, ..ObjectiveConfig::default() };
        let plan = Plan::Prefix { prefix_lens: vec![1; tb.batch_size()] };
        let mut g = Graph::<f64>::new();
        let b = s.bind(&mut g, false);
        let pre = forward_plan(&m_pre, &mut g, &b, &tb, &plan, &cfg).unwrap().breakdown;
        let ar = forward_plan(&m_pre, &mut g, &b, &tb, &Plan::Ar, &cfg).unwrap().breakdown;
        assert_eq!(pre.loss_total, ar.loss_total);
        assert_eq!(pre.predicted, tb.real_token_count());
    }

    #[test]
    fn disabled_intermediate_terms_are_zero() {
        let (m, s, tb) = setup(Objective::Flm);
        let cfg = ObjectiveConfig { use_r2l: false, ..ObjectiveConfig::default() };
        let plan = sample_plan(&tb, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut g = Graph::<f64>::new();
        let b = s.bind(&mut g, true);
        let bd = forward_plan(&m, &mut g, &b, &tb, &plan, &cfg).unwrap().breakdown;
        assert_eq!(bd.loss_r2l, 0.0);
        assert_eq!(bd.loss_total, bd.loss_r + bd.loss_l2r);
    }

    #[test]
    fn pre_encoding_plan_predicts_everything() {
        let (m, s, tb) = setup(Objective::Flm);
        let cfg = ObjectiveConfig { corruption: Corruption::RandomPreEncoding, r_corr: 0.15, ..ObjectiveConfig::default() };
        let plan = sample_plan(&tb, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut g = Graph::<f64>::new();
        let b = s.bind(&mut g, false);
        let bd = forward_plan(&m, &mut g, &b, &tb, &plan, &cfg).unwrap().breakdown;
        assert_eq!(bd.predicted, tb.real_token_count());
        assert_eq!(bd.r_pred(), 1.0);
    }
}
