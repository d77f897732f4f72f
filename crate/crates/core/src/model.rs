//! Encode-corrupt-predict network: a dual-causal text encoder with top-layer
//! vision fusion, a lookup vision encoder, a cross-attention-only
//! reconstructor and the prediction heads used by every objective.
//!
//! Sequences are laid out as `[BOS, x_1..x_L, EOS, PAD..]`, so caption token
//! `x_i` sits at padded position `i`.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{self, Attributes, TokenBatch, BOS, CLS, EOS, FIELD_SIZES, MASK, RESERVED};
use crate::numerics::{
    AttentionLayout, AttentionMask, Bound, Graph, NumericsError, ParamId, ParamStore, Scalar, Tensor, Var,
};
use crate::rng::{stream, Stream};

/// One vision token per attribute field.
pub const VISION_TOKENS: usize = 4;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

fn cfg_err(msg: impl Into<String>) -> ModelError {
    ModelError::Config(msg.into())
}

/// Attention regime of the text encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// Two unidirectional passes feeding the reconstructor (FLM).
    DualCausal,
    /// Bidirectional single stream (MLM).
    Full,
    /// Left-to-right single stream (AR).
    Causal,
    /// Bidirectional prefix then causal (PrefixLM).
    Prefix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_bottom: usize,
    pub n_top: usize,
    pub bottom_r: usize,
    pub top_r: usize,
    pub vocab_size: usize,
    pub l_max: usize,
    pub vision_tokens: usize,
    pub share_encoder: bool,
    pub mode: EncoderMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_bottom: 2,
            n_top: 2,
            bottom_r: 2,
            top_r: 2,
            vocab_size: data::build_vocab(&data::Grammar::default()).len(),
            l_max: data::L_MAX,
            vision_tokens: VISION_TOKENS,
            share_encoder: true,
            mode: EncoderMode::DualCausal,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(cfg_err(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if self.n_bottom + self.n_top == 0 {
            return Err(cfg_err("encoder needs at least one layer"));
        }
        if self.vision_tokens != VISION_TOKENS {
            return Err(cfg_err(format!("vision_tokens must be {VISION_TOKENS}")));
        }
        if self.vocab_size <= RESERVED.len() {
            return Err(cfg_err("vocabulary must extend past the reserved ids"));
        }
        if self.l_max == 0 {
            return Err(cfg_err("l_max must be positive"));
        }
        if self.mode == EncoderMode::DualCausal {
            if self.bottom_r > self.n_bottom || self.top_r > self.n_top {
                return Err(cfg_err("reconstructor deeper than the encoder block it reads"));
            }
            if self.bottom_r + self.top_r == 0 {
                return Err(cfg_err("reconstructor needs at least one layer"));
            }
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.n_bottom + self.n_top
    }

    /// Zero-based encoder layer read by each reconstructor layer: the top-most
    /// `bottom_r` text-only layers, then the top-most `top_r` fusion layers.
    pub fn recon_alignment(&self) -> Vec<usize> {
        (self.n_bottom - self.bottom_r..self.n_bottom)
            .chain(self.n_layers() - self.top_r..self.n_layers())
            .collect()
    }

    /// Names of the encoder parameter sets.
    pub fn passes(&self) -> Vec<&'static str> {
        if self.mode == EncoderMode::DualCausal && !self.share_encoder {
            vec!["l2r", "r2l"]
        } else {
            vec!["shared"]
        }
    }

    /// Positional table size: padded caption plus a trailing CLS slot.
    pub fn positions(&self) -> usize {
        self.l_max + 3
    }
}

/// Per-element self-attention regime over real positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Causal,
    ReverseCausal,
    Full,
    /// Caption tokens `x_1..x_p` (plus BOS) attend bidirectionally; later
    /// positions are causal. Covering every caption token makes it `Full`.
    Prefix(usize),
}

impl Regime {
    /// Whether position `i` may attend to position `j` in a row with `real` real positions.
    pub fn allows(self, i: usize, j: usize, real: usize) -> bool {
        if i >= real || j >= real {
            return false;
        }
        match self {
            Regime::Causal => j <= i,
            Regime::ReverseCausal => j >= i,
            Regime::Full => true,
            Regime::Prefix(p) if p + 2 >= real => true,
            Regime::Prefix(p) => j <= i || (i <= p && j <= p),
        }
    }
}

/// Token ids laid out `width` per row, with the count of real (unpadded) positions.
#[derive(Clone, Debug, PartialEq)]
pub struct TextInput {
    pub tokens: Vec<usize>,
    pub width: usize,
    pub real: Vec<usize>,
}

impl TextInput {
    pub fn from_batch(batch: &TokenBatch) -> Self {
        Self {
            tokens: batch.tokens.clone(),
            width: batch.width,
            real: batch.lengths.iter().map(|l| l + 2).collect(),
        }
    }

    /// `[BOS, x.., EOS, CLS, PAD..]`.
    pub fn with_cls(batch: &TokenBatch) -> Self {
        let width = batch.width + 1;
        let mut tokens = Vec::with_capacity(batch.batch_size() * width);
        for (b, &l) in batch.lengths.iter().enumerate() {
            let row = &batch.tokens[b * batch.width..(b + 1) * batch.width];
            tokens.extend_from_slice(&row[..l + 2]);
            tokens.push(CLS);
            tokens.extend(std::iter::repeat_n(data::PAD, width - l - 3));
        }
        Self { tokens, width, real: batch.lengths.iter().map(|l| l + 3).collect() }
    }

    pub fn batch_size(&self) -> usize {
        self.real.len()
    }
}

/// Visibility of one reconstruction query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryView {
    /// l2r features at positions `< s` and r2l features at positions `> e`.
    Span(usize, usize),
    /// Every real position of both streams.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReconQuery {
    pub batch: usize,
    pub view: QueryView,
}

/// Prediction target `x_i` of batch element `batch` with corruption span `span`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReconTarget {
    pub batch: usize,
    pub pos: usize,
    pub span: (usize, usize),
}

/// Per-layer dual-stream features. Each layer holds `2·B·T` rows: all l2r rows
/// (batch-major) followed by all r2l rows.
#[derive(Clone, Debug)]
pub struct LayerFeatures {
    pub layers: Vec<Var>,
    pub vision: Var,
    pub batch: usize,
    pub width: usize,
    pub real: Vec<usize>,
}

impl LayerFeatures {
    pub fn l2r_row(&self, b: usize, pos: usize) -> usize {
        b * self.width + pos
    }

    pub fn r2l_row(&self, b: usize, pos: usize) -> usize {
        (self.batch + b) * self.width + pos
    }
}

/// Directional next/previous-token logits for every real caption token.
#[derive(Clone, Debug)]
pub struct LmLogits {
    pub l2r: Var,
    pub r2l: Var,
    /// `(batch, i)` predicted by logits row `k`.
    pub rows: Vec<(usize, usize)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    L2r,
    R2l,
    Mlm,
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct AttnIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Ffn {
    up: Linear,
    down: Linear,
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln1: Norm,
    attn: AttnIds,
    cross: Option<(Norm, AttnIds)>,
    ln2: Norm,
    ffn: Ffn,
}

#[derive(Clone, Debug)]
struct StackIds {
    layers: Vec<LayerIds>,
    ln_f: Norm,
}

#[derive(Clone, Debug)]
struct ReconLayerIds {
    ln_q: Norm,
    ln_kv: Norm,
    attn: AttnIds,
    ln2: Norm,
    ffn: Ffn,
}

#[derive(Clone, Debug)]
struct ReconIds {
    layers: Vec<ReconLayerIds>,
    ln_f: Norm,
    mlp: Ffn,
}

#[derive(Clone, Debug)]
struct VisionIds {
    tables: [ParamId; 4],
    proj: Linear,
    ln: Norm,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Parameter handles for one configuration; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    vision: VisionIds,
    stacks: Vec<StackIds>,
    recon: Option<ReconIds>,
    head_l2r: Option<Linear>,
    head_r2l: Option<Linear>,
    head_mlm: Option<Linear>,
}

type Declare<'a> = dyn FnMut(&str, Vec<usize>, Init) -> Result<ParamId, ModelError> + 'a;

struct Decl<'a, 'b> {
    f: &'a mut Declare<'b>,
}

impl Decl<'_, '_> {
    fn p(&mut self, name: &str, shape: Vec<usize>, init: Init) -> Result<ParamId, ModelError> {
        (self.f)(name, shape, init)
    }

    fn linear(&mut self, prefix: &str, n_in: usize, n_out: usize, std: f64) -> Result<Linear, ModelError> {
        Ok(Linear {
            w: self.p(&format!("{prefix}.w"), vec![n_in, n_out], Init::Normal(std))?,
            b: self.p(&format!("{prefix}.b"), vec![n_out], Init::Zeros)?,
        })
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<Norm, ModelError> {
        Ok(Norm {
            g: self.p(&format!("{prefix}.g"), vec![d], Init::Ones)?,
            b: self.p(&format!("{prefix}.b"), vec![d], Init::Zeros)?,
        })
    }

    fn attn(&mut self, prefix: &str, d: usize) -> Result<AttnIds, ModelError> {
        let std = 1.0 / (d as f64).sqrt();
        let mut m = |s: &str| self.p(&format!("{prefix}.{s}"), vec![d, d], Init::Normal(std));
        Ok(AttnIds { wq: m("wq")?, wk: m("wk")?, wv: m("wv")?, wo: m("wo")? })
    }

    fn ffn(&mut self, prefix: &str, d: usize, hidden: usize, n_out: usize) -> Result<Ffn, ModelError> {
        Ok(Ffn {
            up: self.linear(&format!("{prefix}.up"), d, hidden, 1.0 / (d as f64).sqrt())?,
            down: self.linear(&format!("{prefix}.down"), hidden, n_out, 1.0 / (hidden as f64).sqrt())?,
        })
    }
}

fn declare(cfg: &ModelConfig, f: &mut Declare<'_>) -> Result<Model, ModelError> {
    cfg.validate()?;
    let d = cfg.d_model;
    let mut p = Decl { f };
    let emb_std = 0.5;
    let tok_emb = p.p("embed.token", vec![cfg.vocab_size, d], Init::Normal(emb_std))?;
    let pos_emb = p.p("embed.position", vec![cfg.positions(), d], Init::Normal(emb_std))?;
    let tables = [0, 1, 2, 3].map(|f| {
        p.p(&format!("vision.{}", data::FIELD_NAMES[f]), vec![FIELD_SIZES[f], d], Init::Normal(emb_std))
    });
    let [t0, t1, t2, t3] = tables;
    let vision = VisionIds {
        tables: [t0?, t1?, t2?, t3?],
        proj: p.linear("vision.proj", d, d, 1.0 / (d as f64).sqrt())?,
        ln: p.norm("vision.ln", d)?,
    };
    let mut stacks = Vec::new();
    for pass in cfg.passes() {
        let mut layers = Vec::new();
        for n in 1..=cfg.n_layers() {
            let pre = format!("layer.{n}.{pass}");
            let ln1 = p.norm(&format!("{pre}.ln1"), d)?;
            let attn = p.attn(&format!("{pre}.attn"), d)?;
            let cross = if n > cfg.n_bottom {
                Some((p.norm(&format!("{pre}.ln_x"), d)?, p.attn(&format!("{pre}.xattn"), d)?))
            } else {
                None
            };
            let ln2 = p.norm(&format!("{pre}.ln2"), d)?;
            let ffn = p.ffn(&format!("{pre}.ffn"), d, 4 * d, d)?;
            layers.push(LayerIds { ln1, attn, cross, ln2, ffn });
        }
        let ln_f = p.norm(&format!("final.{pass}.ln"), d)?;
        stacks.push(StackIds { layers, ln_f });
    }
    let head_std = 0.5 / (d as f64).sqrt();
    let (mut recon, mut head_l2r, mut head_r2l, mut head_mlm) = (None, None, None, None);
    match cfg.mode {
        EncoderMode::DualCausal => {
            let mut layers = Vec::new();
            for r in 1..=cfg.bottom_r + cfg.top_r {
                let pre = format!("recon.{r}");
                layers.push(ReconLayerIds {
                    ln_q: p.norm(&format!("{pre}.ln_q"), d)?,
                    ln_kv: p.norm(&format!("{pre}.ln_kv"), d)?,
                    attn: p.attn(&format!("{pre}.xattn"), d)?,
                    ln2: p.norm(&format!("{pre}.ln2"), d)?,
                    ffn: p.ffn(&format!("{pre}.ffn"), d, 4 * d, d)?,
                });
            }
            let ln_f = p.norm("recon.ln_f", d)?;
            let mlp = Ffn {
                up: p.linear("recon.head.up", d, d, 1.0 / (d as f64).sqrt())?,
                down: p.linear("recon.head.down", d, cfg.vocab_size, head_std)?,
            };
            recon = Some(ReconIds { layers, ln_f, mlp });
            head_l2r = Some(p.linear("head.l2r", d, cfg.vocab_size, head_std)?);
            head_r2l = Some(p.linear("head.r2l", d, cfg.vocab_size, head_std)?);
        }
        EncoderMode::Full => head_mlm = Some(p.linear("head.mlm", d, cfg.vocab_size, head_std)?),
        EncoderMode::Causal | EncoderMode::Prefix => {
            head_l2r = Some(p.linear("head.l2r", d, cfg.vocab_size, head_std)?)
        }
    }
    Ok(Model { cfg: cfg.clone(), tok_emb, pos_emb, vision, stacks, recon, head_l2r, head_r2l, head_mlm })
}

fn linear<T: Scalar>(g: &mut Graph<T>, b: &Bound, l: &Linear, x: Var) -> Result<Var, NumericsError> {
    let y = g.matmul(x, b.var(l.w))?;
    g.add_row(y, b.var(l.b))
}

fn norm<T: Scalar>(g: &mut Graph<T>, b: &Bound, n: &Norm, x: Var) -> Result<Var, NumericsError> {
    g.layer_norm(x, b.var(n.g), b.var(n.b))
}

fn ffn<T: Scalar>(g: &mut Graph<T>, b: &Bound, f: &Ffn, x: Var) -> Result<Var, NumericsError> {
    let h = linear(g, b, &f.up, x)?;
    let h = g.gelu(h);
    linear(g, b, &f.down, h)
}

#[allow(clippy::too_many_arguments)]
fn attend<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    a: &AttnIds,
    q_in: Var,
    kv_in: Var,
    heads: usize,
    layout: &Rc<AttentionLayout>,
) -> Result<Var, NumericsError> {
    let q = g.matmul(q_in, b.var(a.wq))?;
    let k = g.matmul(kv_in, b.var(a.wk))?;
    let v = g.matmul(kv_in, b.var(a.wv))?;
    let o = g.attention(q, k, v, heads, Rc::clone(layout))?;
    g.matmul(o, b.var(a.wo))
}

fn argmax_content<T: Scalar>(row: &[T]) -> usize {
    let mut best = EOS;
    for (id, v) in row.iter().enumerate() {
        if (id == EOS || id >= RESERVED.len()) && *v > row[best] {
            best = id;
        }
    }
    best
}

impl Model {
    /// Fresh parameters drawn from the `Init` stream of `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<(Model, ParamStore<f32>), ModelError> {
        let mut store = ParamStore::new();
        let mut rng = stream(seed, Stream::Init, 0);
        let model = declare(cfg, &mut |name, shape, init| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0f32; n],
                Init::Ones => vec![1.0f32; n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
                }
            };
            Ok(store.insert(name, Tensor::new(shape, data)?))
        })?;
        Ok((model, store))
    }

    /// Handles for an existing store (e.g. a loaded checkpoint).
    pub fn from_store<T: Scalar>(cfg: &ModelConfig, store: &ParamStore<T>) -> Result<Model, ModelError> {
        declare(cfg, &mut |name, shape, _| {
            let id = store.id(name).ok_or_else(|| cfg_err(format!("missing parameter {name}")))?;
            if store.get(id).shape() != shape.as_slice() {
                return Err(cfg_err(format!("parameter {name} has shape {:?}, expected {shape:?}", store.get(id).shape())));
            }
            Ok(id)
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// `K = 4` tokens per element: one embedding lookup per attribute field, projected and normalized.
    pub fn encode_vision<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        attrs: &[Attributes],
    ) -> Result<Var, ModelError> {
        let n = attrs.len();
        let mut v: Option<Var> = None;
        for (f, table) in self.vision.tables.iter().enumerate() {
            let ids: Vec<usize> = attrs.iter().map(|a| a.classes()[f]).collect();
            let rows = g.embed(b.var(*table), &ids)?;
            v = Some(match v {
                None => rows,
                Some(acc) => g.cat_blocks(acc, rows, n)?,
            });
        }
        let v = v.expect("four fields");
        let v = linear(g, b, &self.vision.proj, v)?;
        Ok(norm(g, b, &self.vision.ln, v)?)
    }

    fn embed_text<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, input: &TextInput) -> Result<Var, ModelError> {
        if input.width > self.cfg.positions() {
            return Err(cfg_err(format!("sequence width {} exceeds {} positions", input.width, self.cfg.positions())));
        }
        let tok = g.embed(b.var(self.tok_emb), &input.tokens)?;
        let positions: Vec<usize> = (0..input.tokens.len()).map(|r| r % input.width).collect();
        let pos = g.embed(b.var(self.pos_emb), &positions)?;
        Ok(g.add(tok, pos)?)
    }

    fn self_layout(width: usize, blocks: &[(Regime, usize)]) -> Rc<AttentionLayout> {
        let nq = blocks.len() * width;
        let q_block = (0..nq).map(|r| r / width).collect();
        let mask = AttentionMask::from_fn(nq, width, |r, j| {
            let (regime, real) = blocks[r / width];
            regime.allows(r % width, j, real)
        });
        Rc::new(AttentionLayout { q_block, keys_per_block: width, mask })
    }

    fn vision_layout(&self, rows: usize, width: usize, batch: usize) -> Rc<AttentionLayout> {
        let k = self.cfg.vision_tokens;
        Rc::new(AttentionLayout {
            q_block: (0..rows).map(|r| (r / width) % batch).collect(),
            keys_per_block: k,
            mask: AttentionMask::full(rows, k),
        })
    }

    fn run_stack<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        stack: &StackIds,
        x: Var,
        self_layout: &Rc<AttentionLayout>,
        vision: Var,
        vision_layout: &Rc<AttentionLayout>,
    ) -> Result<Vec<Var>, ModelError> {
        let heads = self.cfg.n_heads;
        let mut h = x;
        let mut out = Vec::with_capacity(stack.layers.len());
        for layer in &stack.layers {
            let a = norm(g, b, &layer.ln1, h)?;
            let a = attend(g, b, &layer.attn, a, a, heads, self_layout)?;
            h = g.add(h, a)?;
            if let Some((ln_x, xattn)) = &layer.cross {
                let a = norm(g, b, ln_x, h)?;
                let a = attend(g, b, xattn, a, vision, heads, vision_layout)?;
                h = g.add(h, a)?;
            }
            let f = norm(g, b, &layer.ln2, h)?;
            let f = ffn(g, b, &layer.ffn, f)?;
            h = g.add(h, f)?;
            out.push(h);
        }
        Ok(out)
    }

    /// Both unidirectional passes over every layer.
    pub fn encode_text_dual<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        input: &TextInput,
        attrs: &[Attributes],
    ) -> Result<LayerFeatures, ModelError> {
        if self.cfg.mode != EncoderMode::DualCausal {
            return Err(cfg_err("dual encoding requires mode dual_causal"));
        }
        let nb = input.batch_size();
        if attrs.len() != nb {
            return Err(cfg_err("one attribute vector per batch element"));
        }
        let width = input.width;
        let vision = self.encode_vision(g, b, attrs)?;
        let x0 = self.embed_text(g, b, input)?;
        let fwd: Vec<(Regime, usize)> = input.real.iter().map(|&r| (Regime::Causal, r)).collect();
        let bwd: Vec<(Regime, usize)> = input.real.iter().map(|&r| (Regime::ReverseCausal, r)).collect();
        let layers = if self.stacks.len() == 1 {
            let x = g.cat_blocks(x0, x0, 1)?;
            let both: Vec<_> = fwd.iter().chain(&bwd).copied().collect();
            let sl = Self::self_layout(width, &both);
            let vl = self.vision_layout(2 * nb * width, width, nb);
            self.run_stack(g, b, &self.stacks[0], x, &sl, vision, &vl)?
        } else {
            let vl = self.vision_layout(nb * width, width, nb);
            let l = self.run_stack(g, b, &self.stacks[0], x0, &Self::self_layout(width, &fwd), vision, &vl)?;
            let r = self.run_stack(g, b, &self.stacks[1], x0, &Self::self_layout(width, &bwd), vision, &vl)?;
            l.into_iter().zip(r).map(|(a, c)| g.cat_blocks(a, c, 1)).collect::<Result<_, _>>()?
        };
        Ok(LayerFeatures { layers, vision, batch: nb, width, real: input.real.clone() })
    }

    /// Final-layer normalized features of one pass of the first stack.
    ///
    /// Rows whose token is CLS additionally receive `cls` (a `[1, d]` value) when given.
    pub fn encode_text_single<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        input: &TextInput,
        attrs: &[Attributes],
        regimes: &[Regime],
        cls: Option<Var>,
    ) -> Result<Var, ModelError> {
        let nb = input.batch_size();
        if attrs.len() != nb || regimes.len() != nb {
            return Err(cfg_err("one attribute vector and regime per batch element"));
        }
        let vision = self.encode_vision(g, b, attrs)?;
        let mut x = self.embed_text(g, b, input)?;
        if let Some(cls) = cls {
            let zero = g.constant(Tensor::zeros(vec![1, self.cfg.d_model]));
            let table = g.cat_blocks(zero, cls, 1)?;
            let ids: Vec<usize> = input.tokens.iter().map(|&t| usize::from(t == CLS)).collect();
            let delta = g.embed(table, &ids)?;
            x = g.add(x, delta)?;
        }
        let blocks: Vec<_> = regimes.iter().copied().zip(input.real.iter().copied()).collect();
        let sl = Self::self_layout(input.width, &blocks);
        let vl = self.vision_layout(nb * input.width, input.width, nb);
        let stack = &self.stacks[0];
        let layers = self.run_stack(g, b, stack, x, &sl, vision, &vl)?;
        let last = *layers.last().expect("at least one layer");
        Ok(norm(g, b, &stack.ln_f, last)?)
    }

    pub fn head<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, kind: HeadKind, x: Var) -> Result<Var, ModelError> {
        let h = match kind {
            HeadKind::L2r => self.head_l2r,
            HeadKind::R2l => self.head_r2l,
            HeadKind::Mlm => self.head_mlm,
        }
        .ok_or_else(|| cfg_err(format!("{kind:?} head not present in mode {:?}", self.cfg.mode)))?;
        Ok(linear(g, b, &h, x)?)
    }

    /// Next-token logits from l2r position `i−1` and previous-token logits
    /// from r2l position `i+1`, for every real caption token.
    pub fn lm_heads<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, feats: &LayerFeatures) -> Result<LmLogits, ModelError> {
        let last = *feats.layers.last().expect("at least one layer");
        let mut rows = Vec::new();
        let (mut li, mut ri) = (Vec::new(), Vec::new());
        for (bi, &real) in feats.real.iter().enumerate() {
            for i in 1..real - 1 {
                rows.push((bi, i));
                li.push(feats.l2r_row(bi, i - 1));
                ri.push(feats.r2l_row(bi, i + 1));
            }
        }
        let l = g.gather_rows(last, &li)?;
        let l = norm(g, b, &self.stacks[0].ln_f, l)?;
        let l2r = self.head(g, b, HeadKind::L2r, l)?;
        let r = g.gather_rows(last, &ri)?;
        let r = norm(g, b, &self.stacks[self.stacks.len() - 1].ln_f, r)?;
        let r2l = self.head(g, b, HeadKind::R2l, r)?;
        Ok(LmLogits { l2r, r2l, rows })
    }

    /// Keys allowed for `query` among the `2T` per-element key rows (l2r positions then r2l positions).
    pub fn query_keys(&self, query: &ReconQuery, width: usize, real: usize) -> Vec<bool> {
        (0..2 * width)
            .map(|k| {
                let (j, l2r) = if k < width { (k, true) } else { (k - width, false) };
                j < real
                    && match query.view {
                        QueryView::All => true,
                        QueryView::Span(s, _) if l2r => j < s,
                        QueryView::Span(_, e) => j > e,
                    }
            })
            .collect()
    }

    /// Runs the reconstructor layers for queries initialised with `init`
    /// (one row per query) and returns the normalised final query states.
    pub fn reconstruct_hidden<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        feats: &LayerFeatures,
        queries: &[ReconQuery],
        init: Var,
    ) -> Result<Var, ModelError> {
        let recon = self.recon.as_ref().ok_or_else(|| cfg_err("reconstructor requires mode dual_causal"))?;
        if g.value(init).rows() != queries.len() {
            return Err(cfg_err("one initial state per query"));
        }
        let w = feats.width;
        let nq = queries.len();
        let mut bits = Vec::with_capacity(nq * 2 * w);
        for q in queries {
            bits.extend(self.query_keys(q, w, feats.real[q.batch]));
        }
        let layout = Rc::new(AttentionLayout {
            q_block: queries.iter().map(|q| q.batch).collect(),
            keys_per_block: 2 * w,
            mask: AttentionMask::new(nq, 2 * w, bits)?,
        });
        let interleave: Vec<usize> = (0..feats.batch)
            .flat_map(|bi| (0..w).map(move |p| bi * w + p).chain((0..w).map(move |p| (feats.batch + bi) * w + p)))
            .collect();
        let mut q = init;
        for (layer, &n) in recon.layers.iter().zip(&self.cfg.recon_alignment()) {
            let kv = g.gather_rows(feats.layers[n], &interleave)?;
            let kv = norm(g, b, &layer.ln_kv, kv)?;
            let a = norm(g, b, &layer.ln_q, q)?;
            let a = attend(g, b, &layer.attn, a, kv, self.cfg.n_heads, &layout)?;
            q = g.add(q, a)?;
            let f = norm(g, b, &layer.ln2, q)?;
            let f = ffn(g, b, &layer.ffn, f)?;
            q = g.add(q, f)?;
        }
        Ok(norm(g, b, &recon.ln_f, q)?)
    }

    /// Logits for each target, one row per target, with queries initialised
    /// from the target's positional embedding.
    pub fn reconstruct<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        feats: &LayerFeatures,
        targets: &[ReconTarget],
    ) -> Result<Var, ModelError> {
        let recon = self.recon.as_ref().ok_or_else(|| cfg_err("reconstructor requires mode dual_causal"))?;
        let mut queries = Vec::with_capacity(targets.len());
        for t in targets {
            let len = feats.real.get(t.batch).ok_or_else(|| cfg_err("target batch out of range"))? - 2;
            let (s, e) = t.span;
            if !(1 <= s && s <= t.pos && t.pos <= e && e <= len) {
                return Err(cfg_err(format!("span ({s},{e}) invalid for target {} of length {len}", t.pos)));
            }
            queries.push(ReconQuery { batch: t.batch, view: QueryView::Span(s, e) });
        }
        let pos: Vec<usize> = targets.iter().map(|t| t.pos).collect();
        let init = g.embed(b.var(self.pos_emb), &pos)?;
        let h = self.reconstruct_hidden(g, b, feats, &queries, init)?;
        Ok(ffn(g, b, &recon.mlp, h)?)
    }

    /// Greedy decoding conditioned on vision only. MLM-mode models fill a
    /// trailing MASK slot; every other mode uses the l2r stream from BOS.
    pub fn greedy_decode<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        attrs: &[Attributes],
        max_len: usize,
    ) -> Result<Vec<Vec<usize>>, ModelError> {
        let nb = attrs.len();
        let max_len = max_len.min(self.cfg.l_max);
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); nb];
        let mut done = vec![false; nb];
        for t in 0..max_len {
            if done.iter().all(|d| *d) {
                break;
            }
            let mut g = Graph::new();
            let b = params.bind(&mut g, false);
            let mlm = self.cfg.mode == EncoderMode::Full;
            let width = if mlm { t + 3 } else { t + 1 };
            let mut tokens = Vec::with_capacity(nb * width);
            for seq in &out {
                tokens.push(BOS);
                tokens.extend_from_slice(seq);
                tokens.extend(std::iter::repeat_n(MASK, t - seq.len()));
                if mlm {
                    tokens.extend([MASK, EOS]);
                }
            }
            let input = TextInput { tokens, width, real: vec![width; nb] };
            let (regime, head, at) = if mlm { (Regime::Full, HeadKind::Mlm, t + 1) } else { (Regime::Causal, HeadKind::L2r, t) };
            let feats = self.encode_text_single(&mut g, &b, &input, attrs, &vec![regime; nb], None)?;
            let rows: Vec<usize> = (0..nb).map(|bi| bi * width + at).collect();
            let h = g.gather_rows(feats, &rows)?;
            let logits = self.head(&mut g, &b, head, h)?;
            for bi in 0..nb {
                if done[bi] {
                    continue;
                }
                let next = argmax_content(g.value(logits).row(bi));
                if next == EOS {
                    done[bi] = true;
                } else {
                    out[bi].push(next);
                }
            }
        }
        Ok(out)
    }

    pub fn probe_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        probe: &Probe,
        pb: &Bound,
        batch: &TokenBatch,
    ) -> Result<[Var; 4], ModelError> {
        let nb = batch.batch_size();
        let cls = pb.var(probe.cls);
        let h = match self.cfg.mode {
            EncoderMode::DualCausal => {
                let feats = self.encode_text_dual(g, b, &TextInput::from_batch(batch), &batch.attributes)?;
                let init = g.gather_rows(cls, &vec![0; nb])?;
                let queries: Vec<ReconQuery> = (0..nb).map(|bi| ReconQuery { batch: bi, view: QueryView::All }).collect();
                self.reconstruct_hidden(g, b, &feats, &queries, init)?
            }
            mode => {
                let input = TextInput::with_cls(batch);
                let regime = if mode == EncoderMode::Full { Regime::Full } else { Regime::Causal };
                let feats = self.encode_text_single(g, b, &input, &batch.attributes, &vec![regime; nb], Some(cls))?;
                let rows: Vec<usize> = (0..nb).map(|bi| bi * input.width + batch.lengths[bi] + 2).collect();
                g.gather_rows(feats, &rows)?
            }
        };
        let mut out = Vec::with_capacity(4);
        for head in &probe.heads {
            out.push(linear(g, pb, head, h)?);
        }
        Ok(out.try_into().expect("four heads"))
    }
}

/// Trainable CLS embedding and one linear classifier per attribute field.
#[derive(Clone, Debug)]
pub struct Probe {
    cls: ParamId,
    heads: [Linear; 4],
}

impl Probe {
    pub fn init(d_model: usize, seed: u64) -> (Probe, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |n: usize, std: f64| -> Vec<f32> {
            let dist = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
        };
        let cls = store.insert("probe.cls", Tensor::new(vec![1, d_model], normal(d_model, 0.5)).expect("shape"));
        let heads = [0, 1, 2, 3].map(|f| {
            let k = FIELD_SIZES[f];
            let name = data::FIELD_NAMES[f];
            let w = Tensor::new(vec![d_model, k], normal(d_model * k, 1.0 / (d_model as f64).sqrt())).expect("shape");
            Linear {
                w: store.insert(format!("probe.{name}.w"), w),
                b: store.insert(format!("probe.{name}.b"), Tensor::zeros(vec![k])),
            }
        });
        (Probe { cls, heads }, store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_dataset, Sample};

    fn tiny(mode: EncoderMode, share: bool) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_bottom: 1,
            n_top: 1,
            bottom_r: 1,
            top_r: 1,
            share_encoder: share,
            mode,
            ..ModelConfig::default()
        }
    }

    fn batch(n: usize) -> TokenBatch {
        let ds = gen_dataset(4, n, 1).unwrap();
        TokenBatch::from_samples(&ds.train.iter().collect::<Vec<&Sample>>())
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig { n_heads: 3, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let deep = ModelConfig { bottom_r: 3, ..ModelConfig::default() };
        assert!(deep.validate().is_err());
        assert_eq!(ModelConfig::default().recon_alignment(), vec![0, 1, 2, 3]);
        let shallow = ModelConfig { bottom_r: 1, top_r: 1, ..ModelConfig::default() };
        assert_eq!(shallow.recon_alignment(), vec![1, 3]);
    }

    #[test]
    fn vision_rows_follow_attributes() {
        let cfg = tiny(EncoderMode::DualCausal, true);
        let (m, store) = Model::init(&cfg, 1).unwrap();
        let a = Attributes { color: 1, shape: 2, count: 3, background: 0 };
        let c = Attributes { color: 5, ..a };
        let mut g = Graph::<f32>::new();
        let b = store.bind(&mut g, false);
        let v = m.encode_vision(&mut g, &b, &[a, c, a]).unwrap();
        let t = g.value(v);
        assert_eq!(t.shape(), &[12, 8]);
        assert_eq!(t.row(0), t.row(8));
        assert_ne!(t.row(0), t.row(4));
        for k in 1..4 {
            assert_eq!(t.row(k), t.row(4 + k));
        }
    }

    #[test]
    fn sharing_halves_encoder_parameters() {
        let count = |share| {
            let (_, s) = Model::init(&tiny(EncoderMode::DualCausal, share), 0).unwrap();
            s.iter().filter(|(_, n, _)| n.starts_with("layer.") || n.starts_with("final.")).map(|(_, _, t)| t.len()).sum::<usize>()
        };
        assert_eq!(2 * count(true), count(false));
        let (_, s) = Model::init(&tiny(EncoderMode::DualCausal, true), 0).unwrap();
        assert!(s.id("layer.1.shared.attn.wq").is_some());
        assert!(s.id("layer.1.shared.xattn.wq").is_none());
        assert!(s.id("layer.2.shared.xattn.wq").is_some());
    }

    #[test]
    fn from_store_rejects_mismatch() {
        let (_, store) = Model::init(&tiny(EncoderMode::DualCausal, true), 0).unwrap();
        assert!(Model::from_store(&tiny(EncoderMode::DualCausal, true), &store).is_ok());
        assert!(Model::from_store(&tiny(EncoderMode::DualCausal, false), &store).is_err());
    }

    #[test]
    fn prefix_regime_degenerate_cases() {
        for real in 3..8 {
            for i in 0..real {
                for j in 0..real {
                    assert_eq!(Regime::Prefix(real - 2).allows(i, j, real), Regime::Full.allows(i, j, real));
                    assert_eq!(Regime::Prefix(0).allows(i, j, real), Regime::Causal.allows(i, j, real));
                }
            }
        }
    }

    #[test]
    fn single_token_caption_heads() {
        let cfg = tiny(EncoderMode::DualCausal, true);
        let (m, store) = Model::init(&cfg, 2).unwrap();
        let tb = TokenBatch {
            tokens: vec![BOS, 7, EOS],
            lengths: vec![1],
            attributes: vec![Attributes { color: 0, shape: 0, count: 1, background: 0 }],
            ids: vec![0],
            width: 3,
        };
        let mut g = Graph::<f64>::new();
        let b = store.cast::<f64>().bind(&mut g, false);
        let feats = m.encode_text_dual(&mut g, &b, &TextInput::from_batch(&tb), &tb.attributes).unwrap();
        let lm = m.lm_heads(&mut g, &b, &feats).unwrap();
        assert_eq!(lm.rows, vec![(0, 1)]);
        assert_eq!(g.value(lm.l2r).shape(), &[1, cfg.vocab_size]);
    }

    #[test]
    fn decode_is_deterministic_and_bounded() {
        for mode in [EncoderMode::DualCausal, EncoderMode::Full] {
            let cfg = tiny(mode, true);
            let (m, store) = Model::init(&cfg, 3).unwrap();
            let attrs = batch(3).attributes;
            let a = m.greedy_decode(&store, &attrs, 5).unwrap();
            assert_eq!(a, m.greedy_decode(&store, &attrs, 5).unwrap());
            assert!(a.iter().all(|s| s.len() <= 5 && s.iter().all(|&t| t >= RESERVED.len())));
            let one = m.greedy_decode(&store, &attrs, 1).unwrap();
            assert!(one.iter().all(|s| s.len() <= 1));
        }
    }

    #[test]
    fn probe_shapes_match_fields() {
        for mode in [EncoderMode::DualCausal, EncoderMode::Causal, EncoderMode::Full] {
            let (m, store) = Model::init(&tiny(mode, true), 0).unwrap();
            let (probe, ps) = Probe::init(8, 0);
            let tb = batch(3);
            let mut g = Graph::<f32>::new();
            let b = store.bind(&mut g, false);
            let pb = ps.bind(&mut g, true);
            let logits = m.probe_forward(&mut g, &b, &probe, &pb, &tb).unwrap();
            for (f, l) in logits.iter().enumerate() {
                assert_eq!(g.value(*l).shape(), &[3, FIELD_SIZES[f]]);
            }
        }
    }
}
