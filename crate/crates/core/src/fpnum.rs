//! Single-precision kernels whose evaluation order is an explicit parameter.
//!
//! Every kernel here is defined as a scalar sequence of IEEE-754 operations.
//! Two kernels that are equal over the reals but use a different
//! [`ReductionStrategy`], accumulator width or multiply-add fusion return
//! different bits, which is the effect the rest of the crate builds on.
//!
//! Rounding model: all intermediate values are carried as `f64` and rounded
//! at the points dictated by [`AccumulatorSpec`]. For `Bits32` accumulators
//! without fusion this is bit-identical to native `f32` arithmetic (an `f64`
//! result of `+`, `-`, `*` or `/` on `f32` operands rounds to the correctly
//! rounded `f32`). Fused multiply-add is emulated: the product of two `f32`
//! values is exact in `f64` and is added to the accumulator before the single
//! rounding step, so results do not depend on host FMA support.
//!
//! `exp` comes from `libm` so results agree across platforms.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FpError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite logit at index {0}")]
    NonFiniteLogit(usize),
    #[error("blocked tile size must be >= 2, got {0}")]
    InvalidTile(usize),
}

/// Order in which a sum is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReductionStrategy {
    /// Left to right.
    Sequential,
    /// Right to left.
    Reversed,
    /// Recursive halving at `floor(n/2)`, base case `n <= 2`.
    Pairwise,
    /// Sequential within tiles of `tile` elements, then sequential over the
    /// tile partials.
    Blocked { tile: usize },
    /// Kahan-compensated left-to-right sum.
    Kahan,
}

impl ReductionStrategy {
    pub fn blocked(tile: usize) -> Result<Self, FpError> {
        if tile < 2 {
            return Err(FpError::InvalidTile(tile));
        }
        Ok(Self::Blocked { tile })
    }

    pub fn validate(&self) -> Result<(), FpError> {
        match *self {
            Self::Blocked { tile } if tile < 2 => Err(FpError::InvalidTile(tile)),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for ReductionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Sequential => write!(f, "sequential"),
            Self::Reversed => write!(f, "reversed"),
            Self::Pairwise => write!(f, "pairwise"),
            Self::Blocked { tile } => write!(f, "blocked({tile})"),
            Self::Kahan => write!(f, "kahan"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccWidth {
    Bits32,
    Bits64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AccumulatorSpec {
    pub width: AccWidth,
    /// Keep each product unrounded until it is added to the accumulator.
    pub fma: bool,
}

impl AccumulatorSpec {
    pub const F32: Self = Self {
        width: AccWidth::Bits32,
        fma: false,
    };
    pub const F32_FMA: Self = Self {
        width: AccWidth::Bits32,
        fma: true,
    };
    pub const F64: Self = Self {
        width: AccWidth::Bits64,
        fma: false,
    };

    /// Kahan compensation on a 64-bit accumulator is legal but pointless.
    pub fn kahan_is_redundant(&self, strategy: ReductionStrategy) -> bool {
        strategy == ReductionStrategy::Kahan && self.width == AccWidth::Bits64
    }
}

impl Default for AccumulatorSpec {
    fn default() -> Self {
        Self::F32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxVariant {
    /// `max`, then `exp(x - max)`, then normalise.
    TwoPassMaxSubtract,
    /// Running max and running sum; the sum is rescaled once per new maximum.
    StreamingOnePass,
    /// `exp(x)` with inputs clamped to `±NO_MAX_CLAMP`.
    NoMaxSubtract,
}

/// Exponent clamp used by [`SoftmaxVariant::NoMaxSubtract`].
pub const NO_MAX_CLAMP: f32 = 80.0;

/// Row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, FpError> {
        if data.len() != rows * cols {
            return Err(FpError::DimensionMismatch {
                left: rows * cols,
                right: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

#[inline(always)]
pub(crate) fn round_to(width: AccWidth, x: f64) -> f64 {
    match width {
        AccWidth::Bits32 => x as f32 as f64,
        AccWidth::Bits64 => x,
    }
}

/// Core scalar reduction: sums `term(0..n)` in the order given by `strategy`,
/// rounding every addition to `width`. Returns the accumulator value, which
/// is not yet rounded to `f32` when `width` is `Bits64`.
pub(crate) fn accumulate<F>(n: usize, term: F, strategy: ReductionStrategy, width: AccWidth) -> f64
where
    F: Fn(usize) -> f64,
{
    match strategy {
        ReductionStrategy::Sequential => {
            let mut acc = 0.0f64;
            for i in 0..n {
                acc = round_to(width, acc + term(i));
            }
            acc
        }
        ReductionStrategy::Reversed => {
            let mut acc = 0.0f64;
            for i in (0..n).rev() {
                acc = round_to(width, acc + term(i));
            }
            acc
        }
        ReductionStrategy::Pairwise => pairwise(0, n, &term, width),
        ReductionStrategy::Blocked { tile } => {
            let tile = tile.max(2);
            let mut total = 0.0f64;
            let mut start = 0;
            while start < n {
                let end = (start + tile).min(n);
                let mut part = 0.0f64;
                for i in start..end {
                    part = round_to(width, part + term(i));
                }
                total = round_to(width, total + part);
                start = end;
            }
            total
        }
        ReductionStrategy::Kahan => {
            let mut sum = 0.0f64;
            let mut c = 0.0f64;
            for i in 0..n {
                let y = round_to(width, term(i) - c);
                let t = round_to(width, sum + y);
                c = round_to(width, round_to(width, t - sum) - y);
                sum = t;
            }
            sum
        }
    }
}

fn pairwise<F>(lo: usize, hi: usize, term: &F, width: AccWidth) -> f64
where
    F: Fn(usize) -> f64,
{
    match hi - lo {
        0 => 0.0,
        1 => round_to(width, term(lo)),
        2 => round_to(width, round_to(width, term(lo)) + term(lo + 1)),
        n => {
            let mid = lo + n / 2;
            let left = pairwise(lo, mid, term, width);
            let right = pairwise(mid, hi, term, width);
            round_to(width, left + right)
        }
    }
}

/// Vector form of [`accumulate`]: `out[k] = sum_j term(j, k)` for every column
/// `k < cols`, with each column reduced exactly as [`accumulate`] would.
pub(crate) fn accumulate_rows<F>(
    n: usize,
    cols: usize,
    term: F,
    strategy: ReductionStrategy,
    width: AccWidth,
) -> Vec<f64>
where
    F: Fn(usize, usize) -> f64,
{
    let mut out = vec![0.0f64; cols];
    match strategy {
        ReductionStrategy::Sequential => {
            for j in 0..n {
                for (k, o) in out.iter_mut().enumerate() {
                    *o = round_to(width, *o + term(j, k));
                }
            }
        }
        ReductionStrategy::Reversed => {
            for j in (0..n).rev() {
                for (k, o) in out.iter_mut().enumerate() {
                    *o = round_to(width, *o + term(j, k));
                }
            }
        }
        ReductionStrategy::Pairwise => {
            let depth = usize::BITS as usize;
            let mut scratch = vec![0.0f64; cols * depth];
            pairwise_rows(0, n, cols, &term, width, &mut out, &mut scratch);
        }
        ReductionStrategy::Blocked { tile } => {
            let tile = tile.max(2);
            let mut part = vec![0.0f64; cols];
            let mut start = 0;
            while start < n {
                let end = (start + tile).min(n);
                part.iter_mut().for_each(|p| *p = 0.0);
                for j in start..end {
                    for (k, p) in part.iter_mut().enumerate() {
                        *p = round_to(width, *p + term(j, k));
                    }
                }
                for (o, p) in out.iter_mut().zip(&part) {
                    *o = round_to(width, *o + *p);
                }
                start = end;
            }
        }
        ReductionStrategy::Kahan => {
            let mut c = vec![0.0f64; cols];
            for j in 0..n {
                for k in 0..cols {
                    let y = round_to(width, term(j, k) - c[k]);
                    let t = round_to(width, out[k] + y);
                    c[k] = round_to(width, round_to(width, t - out[k]) - y);
                    out[k] = t;
                }
            }
        }
    }
    out
}

fn pairwise_rows<F>(
    lo: usize,
    hi: usize,
    cols: usize,
    term: &F,
    width: AccWidth,
    out: &mut [f64],
    scratch: &mut [f64],
) where
    F: Fn(usize, usize) -> f64,
{
    match hi - lo {
        0 => out.iter_mut().for_each(|o| *o = 0.0),
        1 => {
            for (k, o) in out.iter_mut().enumerate() {
                *o = round_to(width, term(lo, k));
            }
        }
        2 => {
            for (k, o) in out.iter_mut().enumerate() {
                *o = round_to(width, round_to(width, term(lo, k)) + term(lo + 1, k));
            }
        }
        n => {
            let mid = lo + n / 2;
            pairwise_rows(lo, mid, cols, term, width, out, scratch);
            let (right, rest) = scratch.split_at_mut(cols);
            pairwise_rows(mid, hi, cols, term, width, right, rest);
            for (o, r) in out.iter_mut().zip(right.iter()) {
                *o = round_to(width, *o + *r);
            }
        }
    }
}

/// `a * b + c` rounded per `acc`: once when fused, twice otherwise.
#[inline]
pub(crate) fn mul_add(a: f64, b: f64, c: f64, acc: AccumulatorSpec) -> f64 {
    if acc.fma {
        round_to(acc.width, a * b + c)
    } else {
        round_to(acc.width, round_to(acc.width, a * b) + c)
    }
}

/// Sum of `values` in the prescribed order.
pub fn reduce(values: &[f32], strategy: ReductionStrategy, acc: AccumulatorSpec) -> f32 {
    accumulate(values.len(), |i| f64::from(values[i]), strategy, acc.width) as f32
}

/// Product term of a dot product: exact when fused, rounded to `f32` otherwise.
#[inline(always)]
pub(crate) fn product(a: f32, b: f32, fma: bool) -> f64 {
    if fma {
        f64::from(a) * f64::from(b)
    } else {
        f64::from(a * b)
    }
}

/// Sum of elementwise products.
pub fn dot(
    a: &[f32],
    b: &[f32],
    strategy: ReductionStrategy,
    acc: AccumulatorSpec,
) -> Result<f32, FpError> {
    if a.len() != b.len() {
        return Err(FpError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(dot_unchecked(a, b, strategy, acc))
}

#[inline]
pub(crate) fn dot_unchecked(
    a: &[f32],
    b: &[f32],
    strategy: ReductionStrategy,
    acc: AccumulatorSpec,
) -> f32 {
    let fma = acc.fma;
    accumulate(a.len(), |i| product(a[i], b[i], fma), strategy, acc.width) as f32
}

/// `m · x`, each row reduced with [`dot`].
pub fn matvec(
    m: &Matrix,
    x: &[f32],
    strategy: ReductionStrategy,
    acc: AccumulatorSpec,
) -> Result<Vec<f32>, FpError> {
    if m.cols() != x.len() {
        return Err(FpError::DimensionMismatch {
            left: m.cols(),
            right: x.len(),
        });
    }
    Ok((0..m.rows())
        .map(|i| dot_unchecked(m.row(i), x, strategy, acc))
        .collect())
}

#[inline]
pub(crate) fn expf(x: f32) -> f32 {
    libm::expf(x)
}

pub(crate) fn exp2f(x: f32) -> f32 {
    libm::exp2f(x)
}

fn check_logits(logits: &[f32]) -> Result<(), FpError> {
    if logits.is_empty() {
        return Err(FpError::EmptyInput);
    }
    if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
        return Err(FpError::NonFiniteLogit(i));
    }
    Ok(())
}

/// Probability vector for `logits`.
///
/// `strategy` orders the normaliser sum for the two-pass and no-max variants.
/// The streaming variant is sequential by construction; with a `Blocked`
/// strategy it tracks the running maximum per tile instead of per element.
pub fn softmax(
    logits: &[f32],
    variant: SoftmaxVariant,
    strategy: ReductionStrategy,
    acc: AccumulatorSpec,
) -> Result<Vec<f32>, FpError> {
    check_logits(logits)?;
    strategy.validate()?;
    Ok(softmax_unchecked(logits, variant, strategy, acc))
}

pub(crate) fn softmax_unchecked(
    logits: &[f32],
    variant: SoftmaxVariant,
    strategy: ReductionStrategy,
    acc: AccumulatorSpec,
) -> Vec<f32> {
    match variant {
        SoftmaxVariant::TwoPassMaxSubtract => {
            let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let e: Vec<f32> = logits.iter().map(|&x| expf(x - m)).collect();
            let s = reduce(&e, strategy, acc);
            e.iter().map(|&v| v / s).collect()
        }
        SoftmaxVariant::NoMaxSubtract => {
            let e: Vec<f32> = logits
                .iter()
                .map(|&x| expf(x.clamp(-NO_MAX_CLAMP, NO_MAX_CLAMP)))
                .collect();
            let s = reduce(&e, strategy, acc);
            e.iter().map(|&v| v / s).collect()
        }
        SoftmaxVariant::StreamingOnePass => {
            let (m, s) = streaming_normaliser(logits, strategy, acc);
            logits.iter().map(|&x| expf(x - m) / s).collect()
        }
    }
}

/// Running `(max, sum)` pair of the streaming softmax.
pub(crate) fn streaming_normaliser(
    logits: &[f32],
    strategy: ReductionStrategy,
    acc: AccumulatorSpec,
) -> (f32, f32) {
    let width = acc.width;
    let mut m = f32::NEG_INFINITY;
    let mut s = 0.0f64;
    match strategy {
        ReductionStrategy::Blocked { tile } => {
            for chunk in logits.chunks(tile.max(2)) {
                let tile_max = chunk.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                if tile_max > m {
                    let scale = expf(m - tile_max);
                    s = round_to(width, s * f64::from(scale));
                    m = tile_max;
                }
                for &x in chunk {
                    s = round_to(width, s + f64::from(expf(x - m)));
                }
            }
        }
        _ => {
            for &x in logits {
                if x > m {
                    let scale = expf(m - x);
                    s = mul_add(s, f64::from(scale), 1.0, acc);
                    m = x;
                } else {
                    s = round_to(width, s + f64::from(expf(x - m)));
                }
            }
        }
    }
    (m, s as f32)
}

/// `tr(AᵀB)` for `n×n` matrices filled with `a_val` and `b_val`: `n²`
/// accumulations of `a_val·b_val` in the prescribed order.
pub fn trace_demo(
    n: usize,
    a_val: f32,
    b_val: f32,
    strategy: ReductionStrategy,
    acc: AccumulatorSpec,
) -> f32 {
    let term = product(a_val, b_val, acc.fma);
    accumulate(n * n, |_| term, strategy, acc.width) as f32
}
