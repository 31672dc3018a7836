//! A one-layer, single-head attention language model whose arithmetic is
//! selected by a [`KernelProfile`] and whose execution path is selected by an
//! [`ExecPolicy`].
//!
//! The model has no positional encoding, so the key, value and query of a
//! token depend only on the token id. Projections are therefore evaluated
//! once per vocabulary entry and linear kernel, and cached on the weights.
//!
//! # Weights
//!
//! Every entry is first drawn from `uniform(-1/sqrt(d), 1/sqrt(d))` with the
//! counter generator in [`crate::rng`] (stream 1 = embedding, 2..4 = W_q, W_k,
//! W_v, 5 = token attributes). When the vocabulary has at least
//! [`Layout::MIN_VOCAB`] entries and `d_model >= 16`, a small hand-placed
//! circuit is written over the draws so that prompts have well defined
//! answers:
//!
//! | dim | embedding role                    | projection use                        |
//! |-----|-----------------------------------|---------------------------------------|
//! | 0   | constant 1                        | query gain, score offset, value bias  |
//! | 1   | salience (score units)            | key: raises attention to the token    |
//! | 2   | unused in embeddings              | query/key meeting channel             |
//! | 3   | stop readout (stop token only)    | value: stop drive                     |
//! | 4   | answer readout (yes/no only)      | value: evidence presence              |
//! | 5   | polarity readout (+yes / -no)     | value: evidence polarity              |
//! | 6   | stop drive (pattern +1, repeat -) |                                       |
//! | 7   | evidence indicator                |                                       |
//! | 8   | evidence polarity                 |                                       |
//! | 9.. | random "identity" dims            | copy (values) and self-suppression    |
//!
//! The attention score of key `j` for a query from token `x` is
//! `score_offset + salience_j - self_suppression * <x, j> + noise`, where
//! salience is set per class with a small per-token offset, and the
//! tied readout copies attended tokens, reads out stop pressure and reads
//! out yes/no evidence. Logits are scaled by an exact power-of-two gain.
//!
//! # KV cache
//!
//! Cached keys and values are stored at half precision. Attention over
//! entries computed in the current pass uses the full-precision projections,
//! so which entries come from the cache (earlier chunks, a reused prefix,
//! previously decoded tokens) changes the result.

use crate::fpnum::{self, AccumulatorSpec, FpError, Matrix, ReductionStrategy, SoftmaxVariant};
use crate::rng::{self, CounterRng};
use half::f16;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::ops::Range;
use std::sync::{Arc, Mutex};
use thiserror::Error;

pub type Token = u32;

pub const DEFAULT_VOCAB: usize = 256;
pub const DEFAULT_D_MODEL: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmError {
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: Token, vocab: usize },
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("empty cache")]
    EmptyCache,
    #[error("max_len must be >= 1")]
    ZeroMaxLen,
    #[error("chunk size must be >= 8, got {0}")]
    ChunkTooSmall(usize),
    #[error(transparent)]
    Fp(#[from] FpError),
}

/// Fixed token ids shared by every planted vocabulary.
pub mod special {
    use super::Token;
    pub const STOP: Token = 0;
    pub const BOS: Token = 1;
    pub const YES: Token = 2;
    pub const NO: Token = 3;
    pub const RETRIEVE: Token = 4;
    pub const ASK: Token = 5;
    pub const RECALL: Token = 6;
    pub const REPEAT: Token = 7;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenClass {
    Stop,
    Bos,
    Answer,
    Cue,
    Repeat,
    Digit,
    Evidence,
    Pattern,
    Filler,
    Rare,
}

/// Partition of the vocabulary into token classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    vocab: usize,
    pub digits: Range<Token>,
    pub evidence: Range<Token>,
    pub pattern: Range<Token>,
    pub filler: Range<Token>,
    pub rare: Range<Token>,
}

impl Layout {
    pub const MIN_VOCAB: usize = 64;
    pub const PREFIX_LEN: usize = 16;

    pub fn new(vocab: usize) -> Option<Self> {
        if vocab < Self::MIN_VOCAB {
            return None;
        }
        let v = vocab as Token;
        let rest = v - 18;
        let evidence = 18..18 + rest / 8;
        let pattern = evidence.end..evidence.end + rest / 8;
        let rare_len = rest * 7 / 32;
        let filler = pattern.end..v - rare_len;
        let rare = filler.end..v;
        Some(Self {
            vocab,
            digits: 8..18,
            evidence,
            pattern,
            filler,
            rare,
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn class(&self, t: Token) -> TokenClass {
        use special::*;
        match t {
            STOP => TokenClass::Stop,
            BOS => TokenClass::Bos,
            YES | NO => TokenClass::Answer,
            RETRIEVE | ASK | RECALL => TokenClass::Cue,
            REPEAT => TokenClass::Repeat,
            _ if self.digits.contains(&t) => TokenClass::Digit,
            _ if self.evidence.contains(&t) => TokenClass::Evidence,
            _ if self.pattern.contains(&t) => TokenClass::Pattern,
            _ if self.filler.contains(&t) => TokenClass::Filler,
            _ => TokenClass::Rare,
        }
    }

    /// Shared prompt prefix: BOS followed by a fixed run of filler tokens.
    pub fn system_prefix(&self) -> Vec<Token> {
        let n = self.filler.len() as Token;
        let mut p = vec![special::BOS];
        p.extend((0..Self::PREFIX_LEN as Token - 1).map(|i| self.filler.start + (i * 7) % n));
        p
    }

    pub fn token_name(&self, t: Token) -> String {
        use special::*;
        match t {
            STOP => "<stop>".into(),
            BOS => "<bos>".into(),
            YES => "yes".into(),
            NO => "no".into(),
            RETRIEVE => "<retrieve>".into(),
            ASK => "<ask>".into(),
            RECALL => "<recall>".into(),
            REPEAT => "<repeat>".into(),
            _ => match self.class(t) {
                TokenClass::Digit => format!("{}", t - self.digits.start),
                TokenClass::Evidence => format!("e{}", t - self.evidence.start),
                TokenClass::Pattern => format!("p{}", t - self.pattern.start),
                TokenClass::Filler => format!("f{}", t - self.filler.start),
                _ => format!("r{}", t - self.rare.start),
            },
        }
    }
}

/// Score-unit salience per token class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Salience {
    pub rare: f32,
    pub digit: f32,
    pub evidence: f32,
    pub pattern: f32,
    pub repeat: f32,
    pub cue: f32,
    pub filler: f32,
}

/// Gains of the planted circuit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    pub score_offset: f32,
    pub query_gain: f32,
    pub salience: Salience,
    pub salience_jitter: f32,
    pub copy_scale: f32,
    pub self_suppression: f32,
    pub copy_gain: f32,
    pub offset_gain: f32,
    pub stop_out: f32,
    pub stop_drive: f32,
    pub repeat_drive: f32,
    pub answer_out: f32,
    pub polarity_out: f32,
    pub answer_gain: f32,
    pub polarity_gain: f32,
    pub mix_q: f32,
    pub mix_k: f32,
    pub mix_v: f32,
    /// Power-of-two factor applied to the readout, so it rescales logits
    /// exactly and leaves greedy decoding unchanged.
    pub logit_gain: f32,
}

impl Default for Circuit {
    fn default() -> Self {
        Self {
            score_offset: 62.0,
            query_gain: 16.0,
            salience: Salience {
                rare: 12.0,
                digit: 11.0,
                evidence: 9.0,
                pattern: 9.0,
                repeat: 11.0,
                cue: 0.0,
                filler: 0.0,
            },
            salience_jitter: 0.25,
            copy_scale: 3.0,
            self_suppression: 30.0,
            copy_gain: 4.0,
            offset_gain: 32.0,
            stop_out: 4.0,
            stop_drive: 3.0,
            repeat_drive: 2.0,
            answer_out: 4.0,
            polarity_out: 2.0,
            answer_gain: 3.0,
            polarity_gain: 2.0,
            mix_q: 2.0,
            mix_k: 2.0,
            mix_v: 0.5,
            logit_gain: 8.0,
        }
    }
}

const STRUCT_DIMS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CachePolicy {
    NoReuse,
    PrefixReuse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExecPolicy {
    pub chunk_size: Option<usize>,
    pub cache_policy: CachePolicy,
    pub batch_bucket: usize,
}

impl ExecPolicy {
    pub fn single_pass() -> Self {
        Self {
            chunk_size: None,
            cache_policy: CachePolicy::NoReuse,
            batch_bucket: 1,
        }
    }

    pub fn validate(&self) -> Result<(), LmError> {
        match self.chunk_size {
            Some(c) if c < 8 => Err(LmError::ChunkTooSmall(c)),
            _ => Ok(()),
        }
    }
}

/// `ceil(log2(b + 1))`, the tile multiplier for batch size `b`.
pub fn batch_bucket(batch_size: usize) -> usize {
    let b = batch_size.max(1) as u64 + 1;
    (64 - (b - 1).leading_zeros()) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KernelProfile {
    pub attention_softmax: SoftmaxVariant,
    pub attention_reduction: ReductionStrategy,
    /// Strategy of the projection and readout matrix-vector products at
    /// batch size 1. A `Blocked` tile is multiplied by the batch bucket.
    pub linear_reduction: ReductionStrategy,
    pub acc: AccumulatorSpec,
}

impl KernelProfile {
    pub fn reference() -> Self {
        Self {
            attention_softmax: SoftmaxVariant::TwoPassMaxSubtract,
            attention_reduction: ReductionStrategy::Sequential,
            linear_reduction: ReductionStrategy::Sequential,
            acc: AccumulatorSpec::F32,
        }
    }

    pub fn linear_for(&self, bucket: usize) -> ReductionStrategy {
        match self.linear_reduction {
            ReductionStrategy::Blocked { tile } => ReductionStrategy::Blocked {
                tile: tile * bucket.max(1),
            },
            other => other,
        }
    }
}

/// Per-vocabulary projections under one linear kernel.
#[derive(Debug)]
pub(crate) struct Tables {
    pub(crate) q: Vec<f32>,
    pub(crate) k: Vec<f32>,
    pub(crate) v: Vec<f32>,
    pub(crate) k_half: Vec<f32>,
    pub(crate) v_half: Vec<f32>,
}

type TableKey = (ReductionStrategy, AccumulatorSpec);

pub struct ModelWeights {
    pub vocab_size: usize,
    pub d_model: usize,
    pub embed: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub seed: u64,
    logit_gain: f32,
    layout: Option<Layout>,
    tables: Mutex<HashMap<TableKey, Arc<Tables>>>,
}

impl std::fmt::Debug for ModelWeights {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelWeights")
            .field("vocab_size", &self.vocab_size)
            .field("d_model", &self.d_model)
            .field("seed", &self.seed)
            .field("planted", &self.layout.is_some())
            .finish()
    }
}

fn uniform_matrix(seed: u64, stream: u64, rows: usize, cols: usize, bound: f32) -> Matrix {
    let mut rng = CounterRng::new(seed, stream);
    let data = (0..rows * cols)
        .map(|_| rng.uniform_f32(-bound, bound))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized by construction")
}

/// Weights for `(seed, vocab_size, d_model)` with the default circuit.
pub fn init_model(seed: u64, vocab_size: usize, d_model: usize) -> ModelWeights {
    ModelWeights::with_circuit(seed, vocab_size, d_model, &Circuit::default())
}

impl ModelWeights {
    pub fn with_circuit(seed: u64, vocab_size: usize, d_model: usize, c: &Circuit) -> Self {
        let vocab_size = vocab_size.max(2);
        let d = d_model.max(2);
        let bound = (1.0 / (d as f64).sqrt()) as f32;
        let mut embed = uniform_matrix(seed, 1, vocab_size, d, bound);
        let mut w_q = uniform_matrix(seed, 2, d, d, bound);
        let mut w_k = uniform_matrix(seed, 3, d, d, bound);
        let mut w_v = uniform_matrix(seed, 4, d, d, bound);
        let layout = if d >= 16 {
            Layout::new(vocab_size)
        } else {
            None
        };
        if let Some(layout) = &layout {
            plant(seed, layout, c, &mut embed, &mut w_q, &mut w_k, &mut w_v);
        }
        Self {
            vocab_size,
            d_model: d,
            embed,
            w_q,
            w_k,
            w_v,
            seed,
            logit_gain: if layout.is_some() { c.logit_gain } else { 1.0 },
            layout,
            tables: Mutex::new(HashMap::new()),
        }
    }

    pub fn layout(&self) -> Option<&Layout> {
        self.layout.as_ref()
    }

    pub fn logit_gain(&self) -> f32 {
        self.logit_gain
    }

    /// FNV-1a over the bit patterns of all weights.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for m in [&self.embed, &self.w_q, &self.w_k, &self.w_v] {
            for x in m.as_slice() {
                for b in x.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<(), LmError> {
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(LmError::TokenOutOfRange {
                token: t,
                vocab: self.vocab_size,
            });
        }
        Ok(())
    }

    pub(crate) fn tables(&self, linear: ReductionStrategy, acc: AccumulatorSpec) -> Arc<Tables> {
        let key = (linear, acc);
        if let Some(t) = self.tables.lock().expect("table cache poisoned").get(&key) {
            return Arc::clone(t);
        }
        let built = Arc::new(self.build_tables(linear, acc));
        let mut map = self.tables.lock().expect("table cache poisoned");
        Arc::clone(map.entry(key).or_insert(built))
    }

    fn build_tables(&self, linear: ReductionStrategy, acc: AccumulatorSpec) -> Tables {
        let n = self.vocab_size * self.d_model;
        let mut q = Vec::with_capacity(n);
        let mut k = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for t in 0..self.vocab_size {
            let e = self.embed.row(t);
            for (dst, w) in [
                (&mut q, &self.w_q),
                (&mut k, &self.w_k),
                (&mut v, &self.w_v),
            ] {
                dst.extend(
                    (0..self.d_model).map(|i| fpnum::dot_unchecked(w.row(i), e, linear, acc)),
                );
            }
        }
        let k_half = k.iter().map(|&x| to_half(x)).collect();
        let v_half = v.iter().map(|&x| to_half(x)).collect();
        Tables {
            q,
            k,
            v,
            k_half,
            v_half,
        }
    }

    /// `embed · h` under the given kernel.
    fn readout(&self, h: &[f32], linear: ReductionStrategy, acc: AccumulatorSpec) -> Vec<f32> {
        (0..self.vocab_size)
            .map(|t| fpnum::dot_unchecked(self.embed.row(t), h, linear, acc) * self.logit_gain)
            .collect()
    }
}

/// Round-trip through IEEE half precision, the cache storage format.
pub fn to_half(x: f32) -> f32 {
    f16::from_f32(x).to_f32()
}

#[allow(clippy::too_many_arguments)]
fn plant(
    seed: u64,
    layout: &Layout,
    c: &Circuit,
    embed: &mut Matrix,
    w_q: &mut Matrix,
    w_k: &mut Matrix,
    w_v: &mut Matrix,
) {
    let d = embed.cols();
    let mut attr = CounterRng::new(seed, 5);
    for t in 0..embed.rows() as Token {
        let class = layout.class(t);
        let sal = match class {
            TokenClass::Rare => c.salience.rare,
            TokenClass::Digit => c.salience.digit,
            TokenClass::Evidence => c.salience.evidence,
            TokenClass::Pattern => c.salience.pattern,
            TokenClass::Repeat => c.salience.repeat,
            TokenClass::Cue => c.salience.cue,
            _ => c.salience.filler,
        };
        let row = t as usize;
        let polarity = attr.uniform_f32(-1.0, 1.0);
        // Content tokens get a per-token offset on a 1/16 grid so that their
        // keys stay exact at half precision.
        let jitter = attr.uniform_f32(-c.salience_jitter, c.salience_jitter);
        let sal = match class {
            TokenClass::Rare
            | TokenClass::Digit
            | TokenClass::Evidence
            | TokenClass::Pattern
            | TokenClass::Filler => sal + (jitter * 16.0).round() / 16.0,
            _ => sal,
        };
        let mut s = [0.0f32; STRUCT_DIMS];
        s[0] = 1.0;
        s[1] = sal;
        match t {
            special::STOP => s[3] = c.stop_out,
            special::YES => {
                s[4] = c.answer_out;
                s[5] = c.polarity_out;
            }
            special::NO => {
                s[4] = c.answer_out;
                s[5] = -c.polarity_out;
            }
            special::REPEAT => s[6] = -c.repeat_drive,
            _ => {}
        }
        match class {
            TokenClass::Pattern => s[6] = 1.0,
            TokenClass::Evidence => {
                s[7] = 1.0;
                s[8] = polarity;
            }
            _ => {}
        }
        for (i, &x) in s.iter().enumerate() {
            embed.set(row, i, x);
        }
        // Non-content tokens carry no identity, so they are never copied.
        let identity = match class {
            TokenClass::Stop | TokenClass::Repeat | TokenClass::Cue | TokenClass::Bos => 0.0,
            _ => c.copy_scale,
        };
        for i in STRUCT_DIMS..d {
            embed.set(row, i, embed.get(row, i) * identity);
        }
    }

    // score = query_gain * k[2] / sqrt(d) = score_offset + salience
    let scale = (d as f32).sqrt() / c.query_gain;
    for (m, diag, mix) in [
        (&mut *w_q, -c.self_suppression, c.mix_q),
        (&mut *w_k, 1.0, c.mix_k),
        (&mut *w_v, c.copy_gain, c.mix_v),
    ] {
        for i in 0..d {
            for j in 0..d {
                let x = if i >= STRUCT_DIMS && j >= STRUCT_DIMS {
                    mix * m.get(i, j) + if i == j { diag } else { 0.0 }
                } else {
                    0.0
                };
                m.set(i, j, x);
            }
        }
    }
    w_q.set(2, 0, c.query_gain);
    w_k.set(2, 0, c.score_offset * scale);
    w_k.set(2, 1, scale);
    w_v.set(0, 0, c.offset_gain);
    w_v.set(3, 6, c.stop_drive);
    w_v.set(4, 7, c.answer_gain);
    w_v.set(5, 8, c.polarity_gain);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "chunk", rename_all = "snake_case")]
pub enum Provenance {
    FreshPrefill,
    ChunkedPrefill(usize),
    Reused,
    /// Appended by a decode step.
    Decoded,
}

/// Key/value cache of one request. Entries are stored at half precision.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheState {
    d_model: usize,
    tokens: Vec<Token>,
    keys: Vec<f32>,
    values: Vec<f32>,
    provenance: Vec<Provenance>,
}

impl CacheState {
    fn new(d_model: usize) -> Self {
        Self {
            d_model,
            tokens: Vec::new(),
            keys: Vec::new(),
            values: Vec::new(),
            provenance: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn key(&self, i: usize) -> &[f32] {
        &self.keys[i * self.d_model..(i + 1) * self.d_model]
    }

    pub fn value(&self, i: usize) -> &[f32] {
        &self.values[i * self.d_model..(i + 1) * self.d_model]
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    fn push(&mut self, token: Token, tables: &Tables, tag: Provenance) {
        let d = self.d_model;
        let r = token as usize * d..(token as usize + 1) * d;
        self.tokens.push(token);
        self.keys.extend_from_slice(&tables.k_half[r.clone()]);
        self.values.extend_from_slice(&tables.v_half[r]);
        self.provenance.push(tag);
    }

    /// Contiguous runs of equal provenance.
    fn segments(&self) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.len() {
            if i == self.len() || self.provenance[i] != self.provenance[start] {
                out.push(start..i);
                start = i;
            }
        }
        out
    }
}

struct Segment<'a> {
    keys: &'a [f32],
    values: &'a [f32],
}

struct Partial {
    m: f32,
    l: f32,
    o: Vec<f32>,
}

fn segment_partial(q: &[f32], seg: &Segment<'_>, p: &KernelProfile, d: usize) -> Partial {
    let n = seg.keys.len() / d;
    let red = p.attention_reduction;
    let acc = p.acc;
    let w = acc.width;
    let scale = (1.0 / (d as f64).sqrt()) as f32;
    let raw: Vec<f32> = (0..n)
        .map(|j| fpnum::dot_unchecked(q, &seg.keys[j * d..(j + 1) * d], red, acc))
        .collect();
    let scores: Vec<f32> = raw.iter().map(|&s| s * scale).collect();
    let vals = seg.values;
    let weighted = |e: &[f32], m: f32| {
        let l = fpnum::accumulate(n, |j| f64::from(e[j]), red, w) as f32;
        let o = fpnum::accumulate_rows(
            n,
            d,
            |j, k| fpnum::product(e[j], vals[j * d + k], acc.fma),
            red,
            w,
        );
        Partial {
            m,
            l,
            o: o.into_iter().map(|x| x as f32).collect(),
        }
    };
    match p.attention_softmax {
        SoftmaxVariant::TwoPassMaxSubtract => {
            let m = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let e: Vec<f32> = scores.iter().map(|&s| fpnum::expf(s - m)).collect();
            weighted(&e, m)
        }
        SoftmaxVariant::NoMaxSubtract => {
            let clamp = fpnum::NO_MAX_CLAMP;
            let e: Vec<f32> = scores
                .iter()
                .map(|&s| fpnum::expf(s.clamp(-clamp, clamp)))
                .collect();
            weighted(&e, 0.0)
        }
        SoftmaxVariant::StreamingOnePass => {
            // Flash-style: unscaled scores, with the scale folded into a
            // base-2 exponent.
            let c = (f64::from(scale) * std::f64::consts::LOG2_E) as f32;
            let tile = match red {
                ReductionStrategy::Blocked { tile } => tile,
                _ => 1,
            };
            let mut m = f32::NEG_INFINITY;
            let mut l = 0.0f64;
            let mut o = vec![0.0f64; d];
            for (t, block) in raw.chunks(tile).enumerate() {
                let bm = block.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                if bm > m {
                    let alpha = f64::from(fpnum::exp2f((m - bm) * c));
                    l = fpnum::round_to(w, l * alpha);
                    for x in o.iter_mut() {
                        *x = fpnum::round_to(w, *x * alpha);
                    }
                    m = bm;
                }
                for (i, &s) in block.iter().enumerate() {
                    let j = t * tile + i;
                    let e = fpnum::exp2f((s - m) * c);
                    l = fpnum::round_to(w, l + f64::from(e));
                    for (k, x) in o.iter_mut().enumerate() {
                        *x = fpnum::mul_add(f64::from(e), f64::from(vals[j * d + k]), *x, acc);
                    }
                }
            }
            Partial {
                m: m * scale,
                l: l as f32,
                o: o.into_iter().map(|x| x as f32).collect(),
            }
        }
    }
}

/// Attention output for query `q` over `segments`, merging per-segment
/// partial states when there is more than one.
fn attend(q: &[f32], segments: &[Segment<'_>], p: &KernelProfile, d: usize) -> Vec<f32> {
    let parts: Vec<Partial> = segments
        .iter()
        .map(|s| segment_partial(q, s, p, d))
        .collect();
    if let [only] = parts.as_slice() {
        return only.o.iter().map(|&x| x / only.l).collect();
    }
    let w = p.acc.width;
    let fma = p.acc.fma;
    let big_m = parts.iter().map(|x| x.m).fold(f32::NEG_INFINITY, f32::max);
    let alpha: Vec<f32> = parts.iter().map(|x| fpnum::expf(x.m - big_m)).collect();
    let n = parts.len();
    let seq = ReductionStrategy::Sequential;
    let l = fpnum::accumulate(n, |i| fpnum::product(alpha[i], parts[i].l, fma), seq, w) as f32;
    let o = fpnum::accumulate_rows(
        n,
        d,
        |i, k| fpnum::product(alpha[i], parts[i].o[k], fma),
        seq,
        w,
    );
    o.into_iter().map(|x| x as f32 / l).collect()
}

fn slice(table: &[f32], t: Token, d: usize) -> &[f32] {
    &table[t as usize * d..(t as usize + 1) * d]
}

fn gather(table: &[f32], tokens: &[Token], d: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(tokens.len() * d);
    for &t in tokens {
        out.extend_from_slice(slice(table, t, d));
    }
    out
}

/// Length of the reusable shared prefix of `tokens` under `policy`.
fn reusable_prefix(model: &ModelWeights, tokens: &[Token], policy: &ExecPolicy) -> usize {
    if policy.cache_policy != CachePolicy::PrefixReuse {
        return 0;
    }
    match model.layout() {
        Some(layout) => {
            let prefix = layout.system_prefix();
            if tokens.len() > prefix.len() && tokens.starts_with(&prefix) {
                prefix.len()
            } else {
                0
            }
        }
        None => 0,
    }
}

/// Index of the first prompt token whose key and value the final prefill
/// pass computes itself rather than reading back from the cache.
pub(crate) fn fresh_start(model: &ModelWeights, tokens: &[Token], policy: &ExecPolicy) -> usize {
    let reused = reusable_prefix(model, tokens, policy);
    let rest = tokens.len() - reused;
    match policy.chunk_size {
        Some(c) if rest > c => {
            let last = match rest % c {
                0 => c,
                r => r,
            };
            tokens.len() - last
        }
        _ => reused,
    }
}

/// Processes `tokens` and returns the cache and the logits for the next token.
pub fn prefill(
    model: &ModelWeights,
    tokens: &[Token],
    profile: &KernelProfile,
    policy: &ExecPolicy,
) -> Result<(CacheState, Vec<f32>), LmError> {
    if tokens.is_empty() {
        return Err(LmError::EmptyPrompt);
    }
    model.check_tokens(tokens)?;
    policy.validate()?;
    profile.attention_reduction.validate()?;
    profile.linear_reduction.validate()?;
    let d = model.d_model;
    let linear = profile.linear_for(policy.batch_bucket);
    let tables = model.tables(linear, profile.acc);
    let reused = reusable_prefix(model, tokens, policy);
    // A reused prefix was computed by an earlier request at batch size 1.
    let warm = model.tables(profile.linear_for(1), profile.acc);

    let mut cache = CacheState::new(d);
    for &t in &tokens[..reused] {
        cache.push(t, &warm, Provenance::Reused);
    }
    let rest = &tokens[reused..];
    let chunks: Vec<&[Token]> = match policy.chunk_size {
        Some(c) if rest.len() > c => rest.chunks(c).collect(),
        _ => vec![rest],
    };
    let chunked = chunks.len() > 1;
    for (i, chunk) in chunks.iter().enumerate() {
        let tag = if chunked {
            Provenance::ChunkedPrefill(i)
        } else {
            Provenance::FreshPrefill
        };
        for &t in *chunk {
            cache.push(t, &tables, tag);
        }
    }

    // The last pass attends to everything before it through the cache and
    // to its own tokens with full-precision projections.
    let last = *chunks.last().expect("non-empty");
    let cached = tokens.len() - last.len();
    let fresh_k = gather(&tables.k, last, d);
    let fresh_v = gather(&tables.v, last, d);
    let mut segments = Vec::new();
    for r in cache.segments() {
        if r.start >= cached {
            break;
        }
        segments.push(Segment {
            keys: &cache.keys[r.start * d..r.end * d],
            values: &cache.values[r.start * d..r.end * d],
        });
    }
    segments.push(Segment {
        keys: &fresh_k,
        values: &fresh_v,
    });
    let q = slice(&tables.q, *tokens.last().expect("non-empty"), d);
    let h = attend(q, &segments, profile, d);
    let logits = model.readout(&h, linear, profile.acc);
    Ok((cache, logits))
}

/// Next-token logits with the newest cache entry as the query.
pub fn decode_logits(
    model: &ModelWeights,
    cache: &CacheState,
    profile: &KernelProfile,
    policy: &ExecPolicy,
) -> Result<Vec<f32>, LmError> {
    if cache.is_empty() {
        return Err(LmError::EmptyCache);
    }
    let d = model.d_model;
    let linear = profile.linear_for(policy.batch_bucket);
    let tables = model.tables(linear, profile.acc);
    let segments: Vec<Segment<'_>> = cache
        .segments()
        .into_iter()
        .map(|r| Segment {
            keys: &cache.keys[r.start * d..r.end * d],
            values: &cache.values[r.start * d..r.end * d],
        })
        .collect();
    let q = slice(&tables.q, *cache.tokens.last().expect("non-empty"), d);
    let h = attend(q, &segments, profile, d);
    Ok(model.readout(&h, linear, profile.acc))
}

fn append(
    model: &ModelWeights,
    cache: &mut CacheState,
    token: Token,
    profile: &KernelProfile,
    policy: &ExecPolicy,
) {
    let tables = model.tables(profile.linear_for(policy.batch_bucket), profile.acc);
    cache.push(token, &tables, Provenance::Decoded);
}

/// Sampling configuration of one request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerState {
    pub temperature: f32,
    pub seed: u64,
    pub request_id: u64,
    pub step: u64,
    /// Standard deviation of Gaussian noise added to the logits before
    /// sampling. Zero disables it.
    pub logit_noise: f32,
}

impl SamplerState {
    pub fn greedy() -> Self {
        Self {
            temperature: 0.0,
            seed: 0,
            request_id: 0,
            step: 0,
            logit_noise: 0.0,
        }
    }

    pub fn new(temperature: f32, seed: u64, request_id: u64) -> Self {
        Self {
            temperature,
            seed,
            request_id,
            step: 0,
            logit_noise: 0.0,
        }
    }
}

const NOISE_KEY: u64 = 0x6E6F_6973_655F_6B79;

/// Lowest index among the maximal entries.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Draws the next token from `logits`. A pure function of the arguments.
pub fn sample(logits: &[f32], sampler: &SamplerState) -> Token {
    if sampler.logit_noise > 0.0 {
        if sampler.temperature <= 0.0 {
            return noisy_argmax(logits, sampler) as Token;
        }
        let noisy: Vec<f32> = (0..logits.len())
            .map(|i| logits[i] + noise(sampler, i))
            .collect();
        return Cdf::new(&noisy, sampler.temperature).pick(sampler);
    }
    if sampler.temperature <= 0.0 {
        return argmax(logits) as Token;
    }
    Cdf::new(logits, sampler.temperature).pick(sampler)
}

/// Noise added to logit `i`: the `i`-th normal of the request's noise stream.
fn noise(sampler: &SamplerState, i: usize) -> f32 {
    let stream = rng::mix64(sampler.request_id ^ rng::mix64(sampler.step));
    (f64::from(sampler.logit_noise) * rng::normal_at(sampler.seed ^ NOISE_KEY, stream, i as u64))
        as f32
}

/// Argmax of the noisy logits. The noise is bounded, so only entries within
/// twice the bound of the clean maximum can win and need a draw.
fn noisy_argmax(logits: &[f32], sampler: &SamplerState) -> usize {
    let top = logits[argmax(logits)];
    let bound = rng::NORMAL_BOUND * f64::from(sampler.logit_noise);
    // Slack covers the f32 roundings of the noise and the sums.
    let reach = 2.0 * bound * 1.001 + 1e-5 * (f64::from(top.abs()) + bound + 1.0);
    let floor = f64::from(top) - reach;
    let mut best: Option<(usize, f32)> = None;
    for (i, &x) in logits.iter().enumerate() {
        if f64::from(x) < floor {
            continue;
        }
        let v = x + noise(sampler, i);
        if best.is_none_or(|b| v > b.1) {
            best = Some((i, v));
        }
    }
    best.map_or(0, |b| b.0)
}

/// Cumulative sampling distribution of one logit vector at one temperature.
#[derive(Debug, Clone)]
struct Cdf {
    cum: Vec<f64>,
    last_positive: usize,
}

impl Cdf {
    fn new(logits: &[f32], temperature: f32) -> Self {
        let scaled: Vec<f32> = logits.iter().map(|&x| x / temperature).collect();
        let probs = fpnum::softmax_unchecked(
            &scaled,
            SoftmaxVariant::TwoPassMaxSubtract,
            ReductionStrategy::Sequential,
            AccumulatorSpec::F32,
        );
        let mut cum = Vec::with_capacity(probs.len());
        let mut acc = 0.0f64;
        let mut last_positive = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                last_positive = i;
            }
            acc += f64::from(p);
            cum.push(acc);
        }
        Self { cum, last_positive }
    }

    /// First index whose cumulative mass exceeds the request's uniform draw.
    fn pick(&self, sampler: &SamplerState) -> Token {
        let u = rng::unit_f64(rng::draw(sampler.seed, sampler.request_id, sampler.step));
        let i = self.cum.partition_point(|&c| c <= u);
        if i < self.cum.len() {
            i as Token
        } else {
            self.last_positive as Token
        }
    }
}

/// One decode step: logits with the newest entry as query, a sampled token,
/// and the cache with that token appended.
pub fn decode_step(
    model: &ModelWeights,
    mut cache: CacheState,
    profile: &KernelProfile,
    policy: &ExecPolicy,
    sampler: &SamplerState,
) -> Result<(Token, CacheState), LmError> {
    let logits = decode_logits(model, &cache, profile, policy)?;
    let t = sample(&logits, sampler);
    append(model, &mut cache, t, profile, policy);
    Ok((t, cache))
}

/// Output of [`generate_detailed`].
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<Token>,
    /// Logits each token was sampled from.
    pub step_logits: Vec<Vec<f32>>,
    pub cache: CacheState,
}

/// Prefill followed by decode steps until the stop token or `max_len`
/// generated tokens. The stop token, when produced, is the last element.
pub fn generate(
    model: &ModelWeights,
    prompt: &[Token],
    profile: &KernelProfile,
    policy: &ExecPolicy,
    sampler: &SamplerState,
    max_len: usize,
) -> Result<Vec<Token>, LmError> {
    generate_inner(model, prompt, profile, policy, sampler, max_len, false).map(|g| g.tokens)
}

/// [`generate`] that also returns per-step logits and the final cache.
pub fn generate_detailed(
    model: &ModelWeights,
    prompt: &[Token],
    profile: &KernelProfile,
    policy: &ExecPolicy,
    sampler: &SamplerState,
    max_len: usize,
) -> Result<Generation, LmError> {
    generate_inner(model, prompt, profile, policy, sampler, max_len, true)
}

fn generate_inner(
    model: &ModelWeights,
    prompt: &[Token],
    profile: &KernelProfile,
    policy: &ExecPolicy,
    sampler: &SamplerState,
    max_len: usize,
    keep_logits: bool,
) -> Result<Generation, LmError> {
    if max_len == 0 {
        return Err(LmError::ZeroMaxLen);
    }
    let (mut cache, mut logits) = prefill(model, prompt, profile, policy)?;
    let mut out = Vec::new();
    let mut kept = Vec::new();
    let mut s = *sampler;
    loop {
        let t = sample(&logits, &s);
        out.push(t);
        if keep_logits {
            kept.push(logits);
        }
        if t == special::STOP || out.len() == max_len {
            break;
        }
        append(model, &mut cache, t, profile, policy);
        s.step += 1;
        logits = decode_logits(model, &cache, profile, policy)?;
    }
    Ok(Generation {
        tokens: out,
        step_logits: kept,
        cache,
    })
}

/// Difference between the two largest logits.
pub fn top2_margin(logits: &[f32]) -> f32 {
    let (mut a, mut b) = (f32::NEG_INFINITY, f32::NEG_INFINITY);
    for &x in logits {
        if x > a {
            b = a;
            a = x;
        } else if x > b {
            b = x;
        }
    }
    a - b
}

/// Generation tree of one prompt under one profile and policy.
///
/// Logits depend only on the tokens generated so far, so repeated requests
/// share every decode step along a common prefix. [`Session::generate`]
/// returns what [`generate`] would for the same sampler.
pub struct Session<'a> {
    model: &'a ModelWeights,
    profile: &'a KernelProfile,
    policy: ExecPolicy,
    max_len: usize,
    root: CacheState,
    nodes: Vec<Node>,
}

struct Node {
    logits: Vec<f32>,
    children: Vec<(Token, usize)>,
    cdfs: Vec<(u32, Cdf)>,
}

impl Node {
    fn new(logits: Vec<f32>) -> Self {
        Self {
            logits,
            children: Vec::new(),
            cdfs: Vec::new(),
        }
    }
}

impl<'a> Session<'a> {
    pub fn new(
        model: &'a ModelWeights,
        prompt: &[Token],
        profile: &'a KernelProfile,
        policy: &ExecPolicy,
        max_len: usize,
    ) -> Result<Self, LmError> {
        if max_len == 0 {
            return Err(LmError::ZeroMaxLen);
        }
        let (root, logits) = prefill(model, prompt, profile, policy)?;
        Ok(Self {
            model,
            profile,
            policy: *policy,
            max_len,
            root,
            nodes: vec![Node::new(logits)],
        })
    }

    /// Number of distinct generated prefixes evaluated so far.
    pub fn evaluated(&self) -> usize {
        self.nodes.len()
    }

    pub fn generate(&mut self, sampler: &SamplerState) -> Result<Vec<Token>, LmError> {
        let mut out = Vec::new();
        let mut s = *sampler;
        let mut node = 0;
        // Cache for `out`, built only once the path leaves the tree.
        let mut cache: Option<CacheState> = None;
        loop {
            let t = self.pick(node, &s);
            out.push(t);
            if t == special::STOP || out.len() == self.max_len {
                return Ok(out);
            }
            s.step += 1;
            if let Some(c) = cache.as_mut() {
                append(self.model, c, t, self.profile, &self.policy);
            }
            node = match self.nodes[node].children.iter().find(|c| c.0 == t) {
                Some(&(_, child)) => child,
                None => {
                    let c = cache.get_or_insert_with(|| {
                        let mut c = self.root.clone();
                        for &x in &out {
                            append(self.model, &mut c, x, self.profile, &self.policy);
                        }
                        c
                    });
                    let logits = decode_logits(self.model, c, self.profile, &self.policy)?;
                    self.nodes.push(Node::new(logits));
                    let id = self.nodes.len() - 1;
                    self.nodes[node].children.push((t, id));
                    id
                }
            };
        }
    }

    fn pick(&mut self, node: usize, s: &SamplerState) -> Token {
        let n = &mut self.nodes[node];
        if s.logit_noise > 0.0 || s.temperature <= 0.0 {
            return sample(&n.logits, s);
        }
        let key = s.temperature.to_bits();
        let i = match n.cdfs.iter().position(|c| c.0 == key) {
            Some(i) => i,
            None => {
                n.cdfs.push((key, Cdf::new(&n.logits, s.temperature)));
                n.cdfs.len() - 1
            }
        };
        n.cdfs[i].1.pick(s)
    }
}
