//! Synthetic captioned-attribute data: a template grammar, its vocabulary,
//! deterministic dataset generation and padded batching.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::rng::{stream, Stream};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const CLS: usize = 4;
pub const RESERVED: [&str; 5] = ["[PAD]", "[MASK]", "[BOS]", "[EOS]", "[CLS]"];

/// Longest caption the grammar may produce.
pub const L_MAX: usize = 16;

pub const COLORS: [&str; 8] = ["red", "green", "blue", "yellow", "purple", "orange", "black", "white"];
pub const SHAPES: [&str; 6] = ["circle", "square", "triangle", "star", "heart", "diamond"];
pub const SHAPES_PLURAL: [&str; 6] = ["circles", "squares", "triangles", "stars", "hearts", "diamonds"];
pub const COUNTS: [&str; 5] = ["one", "two", "three", "four", "five"];
pub const BACKGROUNDS: [&str; 4] = ["grass", "sand", "snow", "sky"];

/// Cardinalities of (color, shape, count, background).
pub const FIELD_SIZES: [usize; 4] = [8, 6, 5, 4];
pub const FIELD_NAMES: [&str; 4] = ["color", "shape", "count", "background"];

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DataError {
    #[error("argument error: {0}")]
    Argument(String),
}

/// One slot of a caption template.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Word(&'static str),
    Color,
    /// Shape noun, plural when count > 1.
    Shape,
    Count,
    Background,
    /// "is" / "are" agreeing with count.
    Be,
    /// "sits" / "sit" agreeing with count.
    Sit,
}

#[derive(Clone, Debug)]
pub struct Grammar {
    pub templates: Vec<Vec<Slot>>,
}

impl Default for Grammar {
    fn default() -> Self {
        use Slot::*;
        let templates = vec![
            vec![Word("there"), Be, Count, Color, Shape, Word("on"), Word("the"), Background],
            vec![Count, Color, Shape, Sit, Word("on"), Word("the"), Background],
            vec![Word("on"), Word("the"), Background, Be, Count, Color, Shape],
            vec![Word("a"), Word("picture"), Word("of"), Count, Color, Shape, Word("on"), Word("the"), Background],
            vec![Word("the"), Background, Word("has"), Count, Shape, Word("that"), Be, Color],
            vec![Word("we"), Word("see"), Count, Shape, Word("colored"), Color, Word("on"), Word("the"), Background],
            vec![
                Color,
                Word("is"),
                Word("the"),
                Word("color"),
                Word("of"),
                Word("the"),
                Count,
                Shape,
                Word("on"),
                Word("the"),
                Background,
            ],
            vec![Word("in"), Word("front"), Word("of"), Word("the"), Background, Word("we"), Word("see"), Count, Color, Shape],
        ];
        Self { templates }
    }
}

impl Grammar {
    /// Every terminal word in first-appearance order.
    pub fn terminals(&self) -> Vec<&'static str> {
        let mut out: Vec<&'static str> = Vec::new();
        let mut push = |w: &'static str| {
            if !out.contains(&w) {
                out.push(w);
            }
        };
        for t in &self.templates {
            for slot in t {
                match slot {
                    Slot::Word(w) => push(w),
                    Slot::Color => COLORS.iter().for_each(|w| push(w)),
                    Slot::Shape => SHAPES.iter().chain(&SHAPES_PLURAL).for_each(|w| push(w)),
                    Slot::Count => COUNTS.iter().for_each(|w| push(w)),
                    Slot::Background => BACKGROUNDS.iter().for_each(|w| push(w)),
                    Slot::Be => ["is", "are"].iter().for_each(|w| push(w)),
                    Slot::Sit => ["sits", "sit"].iter().for_each(|w| push(w)),
                }
            }
        }
        out
    }

    pub fn max_caption_len(&self) -> usize {
        self.templates.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Word-level vocabulary; ids `0..5` are reserved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED.len()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }

    /// Token id of each value of attribute field `field`, singular and plural forms for shapes.
    pub fn field_words(&self, field: usize) -> Vec<Vec<usize>> {
        let ids = |ws: &[&str]| ws.iter().map(|w| self.id(w).expect("grammar word")).collect::<Vec<_>>();
        match field {
            0 => COLORS.iter().map(|w| ids(&[w])).collect(),
            1 => SHAPES.iter().zip(&SHAPES_PLURAL).map(|(a, b)| ids(&[a, b])).collect(),
            2 => COUNTS.iter().map(|w| ids(&[w])).collect(),
            3 => BACKGROUNDS.iter().map(|w| ids(&[w])).collect(),
            _ => panic!("attribute field {field} out of range"),
        }
    }
}

pub fn build_vocab(grammar: &Grammar) -> Vocab {
    let words: Vec<String> = RESERVED
        .iter()
        .copied()
        .chain(grammar.terminals())
        .map(str::to_string)
        .collect();
    let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    Vocab { words, index }
}

/// (color, shape, count, background); `count` is stored as 1..=5.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Attributes {
    pub color: usize,
    pub shape: usize,
    pub count: usize,
    pub background: usize,
}

impl Attributes {
    /// Zero-based class index per field.
    pub fn classes(&self) -> [usize; 4] {
        [self.color, self.shape, self.count - 1, self.background]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub id: usize,
    pub attributes: Attributes,
    pub template: usize,
    pub caption: Vec<usize>,
}

pub fn render_caption(grammar: &Grammar, vocab: &Vocab, attrs: &Attributes, template: usize) -> Vec<usize> {
    let plural = attrs.count > 1;
    grammar.templates[template]
        .iter()
        .map(|slot| {
            let w = match slot {
                Slot::Word(w) => w,
                Slot::Color => COLORS[attrs.color],
                Slot::Shape if plural => SHAPES_PLURAL[attrs.shape],
                Slot::Shape => SHAPES[attrs.shape],
                Slot::Count => COUNTS[attrs.count - 1],
                Slot::Background => BACKGROUNDS[attrs.background],
                Slot::Be if plural => "are",
                Slot::Be => "is",
                Slot::Sit if plural => "sit",
                Slot::Sit => "sits",
            };
            vocab.id(w).expect("terminal in vocabulary")
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub grammar: Grammar,
    pub vocab: Vocab,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

pub fn gen_dataset(seed: u64, n_train: usize, n_val: usize) -> Result<Dataset, DataError> {
    if n_train < 1 || n_val < 1 {
        return Err(DataError::Argument("n_train and n_val must be at least 1".into()));
    }
    let grammar = Grammar::default();
    let vocab = build_vocab(&grammar);
    let mut rng = stream(seed, Stream::Data, 0);
    let mut all = Vec::with_capacity(n_train + n_val);
    for id in 0..n_train + n_val {
        let attributes = Attributes {
            color: rng.random_range(0..FIELD_SIZES[0]),
            shape: rng.random_range(0..FIELD_SIZES[1]),
            count: rng.random_range(1..=FIELD_SIZES[2]),
            background: rng.random_range(0..FIELD_SIZES[3]),
        };
        let template = rng.random_range(0..grammar.templates.len());
        let caption = render_caption(&grammar, &vocab, &attributes, template);
        all.push(Sample { id, attributes, template, caption });
    }
    let val = all.split_off(n_train);
    Ok(Dataset { grammar, vocab, train: all, val })
}

/// Padded batch `[BOS, x_1..x_L, EOS, PAD..]` of width `max L + 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub tokens: Vec<usize>,
    pub lengths: Vec<usize>,
    pub attributes: Vec<Attributes>,
    pub ids: Vec<usize>,
    pub width: usize,
}

impl TokenBatch {
    pub fn from_samples(samples: &[&Sample]) -> Self {
        Self::with_width(samples, samples.iter().map(|s| s.caption.len()).max().unwrap_or(0) + 2)
    }

    /// Same as [`TokenBatch::from_samples`] with extra trailing padding up to `width`.
    pub fn with_width(samples: &[&Sample], width: usize) -> Self {
        let need = samples.iter().map(|s| s.caption.len()).max().unwrap_or(0) + 2;
        let width = width.max(need);
        let mut tokens = Vec::with_capacity(samples.len() * width);
        for s in samples {
            tokens.push(BOS);
            tokens.extend_from_slice(&s.caption);
            tokens.push(EOS);
            tokens.extend(std::iter::repeat_n(PAD, width - s.caption.len() - 2));
        }
        Self {
            tokens,
            lengths: samples.iter().map(|s| s.caption.len()).collect(),
            attributes: samples.iter().map(|s| s.attributes).collect(),
            ids: samples.iter().map(|s| s.id).collect(),
            width,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    /// Token at padded position `pos` (0 = BOS) of element `b`.
    pub fn token(&self, b: usize, pos: usize) -> usize {
        self.tokens[b * self.width + pos]
    }

    /// Real caption tokens of element `b`.
    pub fn caption(&self, b: usize) -> &[usize] {
        &self.tokens[b * self.width + 1..b * self.width + 1 + self.lengths[b]]
    }

    pub fn real_token_count(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// Copy with caption position `i` (1-based) of element `b` replaced.
    pub fn with_token(&self, b: usize, i: usize, token: usize) -> Self {
        let mut out = self.clone();
        out.tokens[b * self.width + i] = token;
        out
    }
}

/// Shuffles and chunks `samples`; the final batch may be smaller.
pub fn make_batches<R: Rng>(samples: &[Sample], batch_size: usize, rng: &mut R) -> Result<Vec<TokenBatch>, DataError> {
    if batch_size < 1 {
        return Err(DataError::Argument("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    Ok(order
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            TokenBatch::from_samples(&refs)
        })
        .collect())
}

/// Fixed-order batches, used for evaluation.
pub fn sequential_batches(samples: &[Sample], batch_size: usize) -> Vec<TokenBatch> {
    samples
        .chunks(batch_size.max(1))
        .map(|c| TokenBatch::from_samples(&c.iter().collect::<Vec<_>>()))
        .collect()
}

#[derive(Serialize)]
struct DumpLine<'a> {
    attributes: [usize; 4],
    caption: &'a str,
}

/// One JSON object per line: `{"attributes":[c,s,n,b],"caption":"..."}`.
pub fn dump_jsonl(samples: &[Sample], vocab: &Vocab) -> String {
    let mut out = String::new();
    for s in samples {
        let a = s.attributes;
        let caption = vocab.decode(&s.caption);
        let line = DumpLine { attributes: [a.color, a.shape, a.count, a.background], caption: &caption };
        out.push_str(&serde_json::to_string(&line).expect("serializable"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vocab_is_deterministic_and_reserved_first() {
        let g = Grammar::default();
        let a = build_vocab(&g);
        assert_eq!(a, build_vocab(&g));
        for (i, r) in RESERVED.iter().enumerate() {
            assert_eq!(a.id(r), Some(i));
        }
        assert_eq!(a.len(), g.terminals().len() + 5);
    }

    #[test]
    fn captions_verbalize_every_attribute() {
        let ds = gen_dataset(11, 300, 10).unwrap();
        for s in &ds.train {
            let classes = s.attributes.classes();
            for f in 0..4 {
                let words = &ds.vocab.field_words(f)[classes[f]];
                assert!(s.caption.iter().any(|t| words.contains(t)), "field {f} missing in {:?}", s);
            }
            assert!(s.caption.len() <= L_MAX);
            assert!(s.caption.iter().all(|&t| !Vocab::is_reserved(t)));
        }
    }

    #[test]
    fn dataset_determinism_and_split() {
        let a = gen_dataset(7, 50, 20).unwrap();
        let b = gen_dataset(7, 50, 20).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        assert!(a.val.iter().all(|v| a.train.iter().all(|t| t.id != v.id)));
        assert!(gen_dataset(7, 0, 1).is_err());
    }

    #[test]
    fn attribute_marginals_are_uniform() {
        let ds = gen_dataset(5, 10_000, 1).unwrap();
        for (f, &k) in FIELD_SIZES.iter().enumerate() {
            let mut counts = vec![0usize; k];
            for s in &ds.train {
                counts[s.attributes.classes()[f]] += 1;
            }
            for c in counts {
                let frac = c as f64 / 10_000.0;
                assert!((frac - 1.0 / k as f64).abs() < 0.03, "field {f}: {frac}");
            }
        }
    }

    #[test]
    fn batching_cases() {
        let ds = gen_dataset(3, 37, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = make_batches(&ds.train, 8, &mut rng).unwrap();
        assert_eq!(batches.len(), 5);
        let total: usize = batches.iter().map(TokenBatch::real_token_count).sum();
        assert_eq!(total, ds.train.iter().map(|s| s.caption.len()).sum::<usize>());
        let again = make_batches(&ds.train, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(batches, again);

        let single = make_batches(&ds.train[..1], 1, &mut rng).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].width, ds.train[0].caption.len() + 2);
        assert_eq!(single[0].token(0, 0), BOS);
        assert_eq!(single[0].caption(0), &ds.train[0].caption[..]);
        assert!(make_batches(&ds.train, 0, &mut rng).is_err());
    }

    #[test]
    fn dump_format() {
        let ds = gen_dataset(1, 2, 1).unwrap();
        let text = dump_jsonl(&ds.train[..1], &ds.vocab);
        let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
        let a = ds.train[0].attributes;
        assert_eq!(v["attributes"], serde_json::json!([a.color, a.shape, a.count, a.background]));
        assert_eq!(v["caption"], ds.vocab.decode(&ds.train[0].caption));
    }
}
