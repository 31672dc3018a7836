//! The four prompt families and their scoring functions.
//!
//! * P1 hides two rare tokens in filler text and asks for one back.
//! * P2 lists weighted evidence and asks for a yes/no verdict.
//! * P3 buries a two-digit identifier in a context long enough to be
//!   prefilled in chunks.
//! * P4 asks for a two-token pattern to be repeated until the model stops.
//!
//! Every generated prompt is steered so that the deciding pair of logits on
//! its reference system is separated by less than `delta`; small kernel
//! differences then flip the answer. References rotate through the slice
//! passed to the generators, prompt `i` using `references[i % len]`.

mod probe;

use crate::fpnum::SoftmaxVariant;
use crate::rng::CounterRng;
use crate::systems::SimulatedSystem;
use crate::toylm::{self, special, Layout, LmError, ModelWeights, SamplerState, Token, TokenClass};
use probe::{Probe, Slot};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

pub const DEFAULT_DELTA: f64 = 1e-3;
/// Candidates tried per requested prompt before giving up.
pub const BUDGET_FACTOR: usize = 50;
/// Requested repetitions in P4.
pub const REPEAT_COUNT: usize = 100;
/// Shortest P3 prompt: four times the largest engine chunk.
pub const MIN_P3_LEN: usize = 1024;

const MIN_TARGET: f64 = 1e-7;
const TUNE_ROUNDS: usize = 24;
/// Minimum lead, in logits, of the greedy token over non-stop rivals at
/// every P4 step before the stop.
const P4_MIN_GAP: f32 = 12.0;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("count must be >= 1")]
    ZeroCount,
    #[error("no reference system given")]
    NoReference,
    #[error("insufficient near-tie candidates for {family}: {accepted} of {requested} after {tried} tries")]
    InsufficientCandidates {
        family: Family,
        accepted: usize,
        requested: usize,
        tried: usize,
    },
    #[error("scorer for {scorer} applied to a {prompt} prompt")]
    FamilyMismatch { scorer: Family, prompt: Family },
    #[error("model has no planted vocabulary layout")]
    NoLayout,
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Family {
    P1,
    P2,
    P3,
    P4,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::P1, Family::P2, Family::P3, Family::P4];

    fn index(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.index())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Expected {
    /// P1, P3: the response must contain these tokens in order.
    Target { tokens: Vec<Token> },
    /// P2: `answer` is what the reference system says.
    YesNo {
        yes: Token,
        no: Token,
        answer: Token,
    },
    /// P4.
    Repeat { count: usize, pattern: Vec<Token> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub family: Family,
    pub tokens: Vec<Token>,
    pub expected: Expected,
    pub max_len: usize,
    /// System the margin was steered on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    /// Deciding logit gap on the reference system.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub tokens: Vec<Token>,
    pub text: String,
}

fn contains_run(hay: &[Token], needle: &[Token]) -> bool {
    needle.is_empty() || hay.windows(needle.len()).any(|w| w == needle)
}

fn count_non_overlapping(hay: &[Token], unit: &[Token]) -> usize {
    if unit.is_empty() {
        return 0;
    }
    let (mut i, mut n) = (0, 0);
    while i + unit.len() <= hay.len() {
        if &hay[i..i + unit.len()] == unit {
            n += 1;
            i += unit.len();
        } else {
            i += 1;
        }
    }
    n
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoringFunction {
    pub family: Family,
}

impl ScoringFunction {
    pub fn apply(&self, prompt: &Prompt, response: &Response) -> Result<f64, PromptError> {
        if prompt.family != self.family {
            return Err(PromptError::FamilyMismatch {
                scorer: self.family,
                prompt: prompt.family,
            });
        }
        Ok(score_tokens(prompt, &response.tokens))
    }
}

/// Score of `response` under the prompt's own family.
pub fn score(prompt: &Prompt, response: &Response) -> f64 {
    score_tokens(prompt, &response.tokens)
}

/// [`score`] on the generated tokens alone.
pub fn score_tokens(prompt: &Prompt, out: &[Token]) -> f64 {
    match &prompt.expected {
        Expected::Target { tokens } => f64::from(u8::from(contains_run(out, tokens))),
        Expected::YesNo { yes, .. } => f64::from(u8::from(out.first() == Some(yes))),
        Expected::Repeat { count, pattern } => {
            (count_non_overlapping(out, pattern) as f64 / (*count).max(1) as f64).min(1.0)
        }
    }
}

/// Whether the response gives the reference answer. `None` for P4, which
/// has no single right answer.
pub fn is_correct(prompt: &Prompt, response: &Response) -> Option<bool> {
    is_correct_tokens(prompt, &response.tokens)
}

pub fn is_correct_tokens(prompt: &Prompt, out: &[Token]) -> Option<bool> {
    match &prompt.expected {
        Expected::Target { tokens } => Some(contains_run(out, tokens)),
        Expected::YesNo { answer, .. } => Some(out.first() == Some(answer)),
        Expected::Repeat { .. } => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteCounts {
    pub p1: usize,
    pub p2: usize,
    pub p3: usize,
    pub p4: usize,
}

impl SuiteCounts {
    pub fn desk() -> Self {
        Self {
            p1: 200,
            p2: 400,
            p3: 60,
            p4: 60,
        }
    }

    pub fn paper() -> Self {
        Self {
            p1: 1700,
            p2: 5000,
            p3: 150,
            p4: 100,
        }
    }

    pub fn get(&self, family: Family) -> usize {
        match family {
            Family::P1 => self.p1,
            Family::P2 => self.p2,
            Family::P3 => self.p3,
            Family::P4 => self.p4,
        }
    }

    pub fn total(&self) -> usize {
        self.p1 + self.p2 + self.p3 + self.p4
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub delta: f64,
    pub budget_factor: usize,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            delta: DEFAULT_DELTA,
            budget_factor: BUDGET_FACTOR,
        }
    }
}

/// Prompts ordered by id, which puts the families in P1..P4 order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptSuite {
    pub prompts: Vec<Prompt>,
}

impl PromptSuite {
    pub fn new(mut prompts: Vec<Prompt>) -> Self {
        prompts.sort_by(|a, b| a.id.cmp(&b.id));
        Self { prompts }
    }

    pub fn generate(
        counts: SuiteCounts,
        seed: u64,
        references: &[SimulatedSystem],
        params: GenParams,
    ) -> Result<Self, PromptError> {
        let mut all = Vec::new();
        for family in Family::ALL {
            let n = counts.get(family);
            if n > 0 {
                all.extend(generate_family(family, n, seed, references, params)?);
            }
        }
        Ok(Self::new(all))
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.prompts.iter().map(|p| p.id.as_str()).collect()
    }

    pub fn composition(&self) -> SuiteCounts {
        let n = |f| self.prompts.iter().filter(|p| p.family == f).count();
        SuiteCounts {
            p1: n(Family::P1),
            p2: n(Family::P2),
            p3: n(Family::P3),
            p4: n(Family::P4),
        }
    }

    /// Prompts whose ids are in `keep`, in suite order.
    pub fn subset(&self, keep: &[&str]) -> Self {
        let keep: std::collections::HashSet<&str> = keep.iter().copied().collect();
        Self {
            prompts: self
                .prompts
                .iter()
                .filter(|p| keep.contains(p.id.as_str()))
                .cloned()
                .collect(),
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), PromptError> {
        for p in &self.prompts {
            serde_json::to_writer(&mut w, p).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, PromptError> {
        let mut prompts = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            prompts.push(
                serde_json::from_str(&line).map_err(|source| PromptError::Parse {
                    line: i + 1,
                    source,
                })?,
            );
        }
        Ok(Self::new(prompts))
    }

    pub fn save(&self, path: &Path) -> Result<(), PromptError> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(f)
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        Self::read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

pub fn gen_p1(
    count: usize,
    seed: u64,
    references: &[SimulatedSystem],
) -> Result<Vec<Prompt>, PromptError> {
    generate_family(Family::P1, count, seed, references, GenParams::default())
}

pub fn gen_p2(
    count: usize,
    seed: u64,
    references: &[SimulatedSystem],
) -> Result<Vec<Prompt>, PromptError> {
    generate_family(Family::P2, count, seed, references, GenParams::default())
}

pub fn gen_p3(
    count: usize,
    seed: u64,
    references: &[SimulatedSystem],
) -> Result<Vec<Prompt>, PromptError> {
    generate_family(Family::P3, count, seed, references, GenParams::default())
}

pub fn gen_p4(
    count: usize,
    seed: u64,
    references: &[SimulatedSystem],
) -> Result<Vec<Prompt>, PromptError> {
    generate_family(Family::P4, count, seed, references, GenParams::default())
}

pub fn generate_family(
    family: Family,
    count: usize,
    seed: u64,
    references: &[SimulatedSystem],
    params: GenParams,
) -> Result<Vec<Prompt>, PromptError> {
    if count == 0 {
        return Err(PromptError::ZeroCount);
    }
    if references.is_empty() {
        return Err(PromptError::NoReference);
    }
    let budget = count * params.budget_factor.max(1);
    let mut out = Vec::with_capacity(count);
    let mut tried = 0;
    while out.len() < count {
        if tried == budget {
            return Err(PromptError::InsufficientCandidates {
                family,
                accepted: out.len(),
                requested: count,
                tried,
            });
        }
        let reference = &references[out.len() % references.len()];
        let mut rng = CounterRng::new(seed, (family.index() << 40) | tried as u64);
        tried += 1;
        let built = match family {
            Family::P1 => build_p1(reference, &mut rng, params.delta)?,
            Family::P2 => build_p2(reference, &mut rng, params.delta)?,
            Family::P3 => build_p3(reference, &mut rng, params.delta)?,
            Family::P4 => build_p4(reference, &mut rng)?,
        };
        if let Some((tokens, expected, max_len, margin)) = built {
            out.push(Prompt {
                id: format!("{}-{:05}", family.to_string().to_lowercase(), out.len()),
                family,
                tokens,
                expected,
                max_len,
                reference: Some(reference.config.id()),
                margin: Some(margin),
            });
        }
    }
    Ok(out)
}

type Built = Option<(Vec<Token>, Expected, usize, f64)>;

fn layout_of(model: &ModelWeights) -> Result<Layout, PromptError> {
    model.layout().cloned().ok_or(PromptError::NoLayout)
}

fn pick(rng: &mut CounterRng, range: &std::ops::Range<Token>) -> Token {
    range.start + rng.below(range.len()) as Token
}

/// Log-uniform in `[MIN_TARGET, delta]`.
fn target_margin(rng: &mut CounterRng, delta: f64) -> f64 {
    let (lo, hi) = (MIN_TARGET.ln(), delta.max(MIN_TARGET).ln());
    (lo + (hi - lo) * rng.next_f64()).exp()
}

/// Gap between the logits of `x` and `y` when they are the two largest.
fn pair_gap(logits: &[f32], x: Token, y: Token) -> Option<f64> {
    let (lx, ly) = (logits[x as usize], logits[y as usize]);
    let floor = lx.min(ly);
    let crowded = logits
        .iter()
        .enumerate()
        .any(|(i, &l)| i != x as usize && i != y as usize && l >= floor);
    (!crowded).then(|| f64::from(lx) - f64::from(ly))
}

/// Indices of the two largest logits, lowest index first among equals.
fn top2(logits: &[f32]) -> (Token, Token) {
    let a = toylm::argmax(logits);
    let mut b = if a == 0 { 1 } else { 0 };
    for (i, &l) in logits.iter().enumerate() {
        if i != a && l > logits[b] {
            b = i;
        }
    }
    (a as Token, b as Token)
}

fn generate_ref(
    reference: &SimulatedSystem,
    tokens: &[Token],
    max_len: usize,
) -> Result<toylm::Generation, LmError> {
    toylm::generate_detailed(
        &reference.model,
        tokens,
        &reference.profile,
        &reference.policy,
        &SamplerState::greedy(),
        max_len,
    )
}

/// Tunes the gap of `x` over `y` towards `target` and checks each attempt
/// on the real kernels. `ctx` is the probe context; its first `prompt_len`
/// tokens are the prompt. Returns the prompt whose exact gap lies closest
/// to the target among those under `delta`.
#[allow(clippy::too_many_arguments)]
fn steer<F>(
    reference: &SimulatedSystem,
    ctx: Vec<Token>,
    prompt_len: usize,
    half_before: usize,
    slots: &[Slot],
    (x, y): (Token, Token),
    target: f64,
    delta: f64,
    mut exact: F,
) -> Result<Option<(Vec<Token>, f64)>, PromptError>
where
    F: FnMut(&[Token]) -> Result<Option<f64>, PromptError>,
{
    let mut probe = Probe::new(&reference.model, &reference.profile, ctx, half_before, x, y);
    let mut goal = target;
    let mut best: Option<(Vec<Token>, f64)> = None;
    for _ in 0..3 {
        probe.tune(slots, goal, TUNE_ROUNDS);
        let tokens = probe.tokens()[..prompt_len].to_vec();
        let ex = exact(&tokens)?;
        let Some(m) = ex else { break };
        let better = best
            .as_ref()
            .is_none_or(|(_, b)| (m - target).abs() < (b - target).abs());
        if m.abs() < delta && better {
            best = Some((tokens, m));
        }
        if (m - target).abs() <= 0.25 * target {
            break;
        }
        goal += target - m;
    }
    Ok(best)
}

fn filler_body(layout: &Layout, rng: &mut CounterRng, n: usize) -> Vec<Token> {
    (0..n).map(|_| pick(rng, &layout.filler)).collect()
}

/// `k` distinct positions in `0..n` outside `taken`.
fn positions(rng: &mut CounterRng, n: usize, k: usize, taken: &mut Vec<usize>) -> Vec<usize> {
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let p = rng.below(n);
        if !taken.contains(&p) {
            taken.push(p);
            out.push(p);
        }
    }
    out
}

fn class_slots(layout: &Layout, tokens: &[Token], range: std::ops::Range<usize>) -> Vec<Slot> {
    range
        .filter_map(|pos| {
            let cands: Vec<Token> = match layout.class(tokens[pos]) {
                TokenClass::Filler => layout.filler.clone().collect(),
                TokenClass::Pattern => layout.pattern.clone().collect(),
                TokenClass::Evidence => layout.evidence.clone().collect(),
                _ => return None,
            };
            Some(Slot {
                pos,
                candidates: cands,
            })
        })
        .collect()
}

fn build_p1(
    reference: &SimulatedSystem,
    rng: &mut CounterRng,
    delta: f64,
) -> Result<Built, PromptError> {
    let model = &reference.model;
    let layout = layout_of(model)?;
    let n = 24 + rng.below(49);
    let mut body = filler_body(&layout, rng, n);
    let mut taken = Vec::new();
    let rare = positions(rng, n, 2, &mut taken);
    let r1 = pick(rng, &layout.rare);
    body[rare[0]] = r1;
    // Clamped scores give mid-salience tokens more weight, so fewer of them.
    let nomax = reference.profile.attention_softmax == SoftmaxVariant::NoMaxSubtract;
    for p in positions(rng, n, if nomax { 2 } else { 6 }, &mut taken) {
        body[p] = pick(rng, &layout.pattern);
    }
    let mut tokens = layout.system_prefix();
    let start = tokens.len();
    tokens.extend(body);
    tokens.push(special::RETRIEVE);
    let slots = class_slots(&layout, &tokens, start..tokens.len() - 1);
    let half_before = toylm::fresh_start(model, &tokens, &reference.policy);
    // The second rare token is the one closest to a tie before tuning.
    let r2 = layout
        .rare
        .clone()
        .filter(|&r| r != r1)
        .map(|r| {
            let mut t = tokens.clone();
            t[start + rare[1]] = r;
            (
                Probe::new(model, &reference.profile, t, half_before, r1, r)
                    .margin()
                    .abs(),
                r,
            )
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, r)| r)
        .expect("at least two rare tokens");
    tokens[start + rare[1]] = r2;
    let target = target_margin(rng, delta);
    let len = tokens.len();
    let steered = steer(
        reference,
        tokens,
        len,
        half_before,
        &slots,
        (r1, r2),
        target,
        delta,
        |t| {
            let (_, logits) = toylm::prefill(model, t, &reference.profile, &reference.policy)?;
            Ok(pair_gap(&logits, r1, r2))
        },
    )?;
    let Some((tokens, margin)) = steered else {
        return Ok(None);
    };
    let g = generate_ref(reference, &tokens, 1)?;
    Ok(Some((
        tokens,
        Expected::Target { tokens: g.tokens },
        1,
        margin.abs(),
    )))
}

fn build_p2(
    reference: &SimulatedSystem,
    rng: &mut CounterRng,
    delta: f64,
) -> Result<Built, PromptError> {
    let model = &reference.model;
    let layout = layout_of(model)?;
    let n = 22 + rng.below(29);
    let mut body = filler_body(&layout, rng, n);
    let mut taken = Vec::new();
    let k = 6 + rng.below(5);
    for p in positions(rng, n, k, &mut taken) {
        body[p] = pick(rng, &layout.evidence);
    }
    let mut tokens = layout.system_prefix();
    let start = tokens.len();
    tokens.extend(body);
    tokens.push(special::ASK);
    let slots = class_slots(&layout, &tokens, start..tokens.len() - 1);
    let half_before = toylm::fresh_start(model, &tokens, &reference.policy);
    let sign = if rng.next_u64() & 1 == 0 { 1.0 } else { -1.0 };
    let target = sign * target_margin(rng, delta);
    let len = tokens.len();
    let pair = (special::YES, special::NO);
    let steered = steer(
        reference,
        tokens,
        len,
        half_before,
        &slots,
        pair,
        target,
        delta,
        |t| {
            let (_, logits) = toylm::prefill(model, t, &reference.profile, &reference.policy)?;
            Ok(pair_gap(&logits, special::YES, special::NO))
        },
    )?;
    let Some((tokens, margin)) = steered else {
        return Ok(None);
    };
    let g = generate_ref(reference, &tokens, 1)?;
    let expected = Expected::YesNo {
        yes: special::YES,
        no: special::NO,
        answer: g.tokens[0],
    };
    Ok(Some((tokens, expected, 1, margin.abs())))
}

fn build_p3(
    reference: &SimulatedSystem,
    rng: &mut CounterRng,
    delta: f64,
) -> Result<Built, PromptError> {
    let model = &reference.model;
    let layout = layout_of(model)?;
    let prefix = layout.system_prefix();
    let total = MIN_P3_LEN + rng.below(MIN_P3_LEN / 2 + 1);
    let n = total - prefix.len() - 1;
    let mut body = filler_body(&layout, rng, n);
    let mut taken = Vec::new();
    let mut digits = Vec::new();
    while digits.len() < 3 {
        let d = pick(rng, &layout.digits);
        if !digits.contains(&d) {
            digits.push(d);
        }
    }
    let digit_pos = positions(rng, n, 3, &mut taken);
    for (&p, &d) in digit_pos.iter().zip(&digits) {
        body[p] = d;
    }
    let nomax = reference.profile.attention_softmax == SoftmaxVariant::NoMaxSubtract;
    let tuners = positions(rng, n, if nomax { 1 } else { 2 }, &mut taken);
    for &p in &tuners {
        body[p] = pick(rng, &layout.pattern);
    }
    let fine = positions(rng, n, 96, &mut taken);
    let mut tokens = prefix;
    let start = tokens.len();
    tokens.extend(body);
    tokens.push(special::RECALL);
    let slots: Vec<Slot> = tuners
        .iter()
        .chain(&fine)
        .flat_map(|&p| class_slots(&layout, &tokens, start + p..start + p + 1))
        .collect();

    let (_, logits) = toylm::prefill(model, &tokens, &reference.profile, &reference.policy)?;
    let (x, y) = top2(&logits);
    if !(digits.contains(&x) && digits.contains(&y)) {
        return Ok(None);
    }
    let half_before = toylm::fresh_start(model, &tokens, &reference.policy);
    // The decoy digit is the one that leaves the leading pair closest to a tie.
    let decoy_pos = start
        + digit_pos[digits
            .iter()
            .position(|&d| d != x && d != y)
            .expect("three digits")];
    let decoy = layout
        .digits
        .clone()
        .filter(|&d| d != x && d != y)
        .map(|d| {
            let mut t = tokens.clone();
            t[decoy_pos] = d;
            (
                Probe::new(model, &reference.profile, t, half_before, x, y)
                    .margin()
                    .abs(),
                d,
            )
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, d)| d)
        .expect("ten digits");
    tokens[decoy_pos] = decoy;
    digits.retain(|&d| d == x || d == y);
    digits.push(decoy);
    let half_before = toylm::fresh_start(model, &tokens, &reference.policy);
    let target = target_margin(rng, delta);
    let len = tokens.len();
    let steered = steer(
        reference,
        tokens,
        len,
        half_before,
        &slots,
        (x, y),
        target,
        delta,
        |t| {
            let (_, logits) = toylm::prefill(model, t, &reference.profile, &reference.policy)?;
            Ok(pair_gap(&logits, x, y))
        },
    )?;
    let Some((tokens, margin)) = steered else {
        return Ok(None);
    };
    let g = generate_ref(reference, &tokens, 2)?;
    let out = g.tokens;
    if out.len() != 2 || out[0] == out[1] || !out.iter().all(|t| digits.contains(t)) {
        return Ok(None);
    }
    Ok(Some((
        tokens,
        Expected::Target { tokens: out },
        2,
        margin.abs(),
    )))
}

/// P4 output length cap: room for every requested repetition.
pub fn p4_max_len() -> usize {
    2 * REPEAT_COUNT + 10
}

/// Whether every step leads the best non-stop rival by [`P4_MIN_GAP`], so
/// sampled continuations rarely leave the greedy path except to stop.
fn confident(steps: &[Vec<f32>]) -> bool {
    steps.iter().all(|l| {
        let top = toylm::argmax(l);
        let rival = l
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != top && i != special::STOP as usize)
            .map(|(_, &x)| x)
            .fold(f32::NEG_INFINITY, f32::max);
        l[top] - rival >= P4_MIN_GAP
    })
}

fn build_p4(reference: &SimulatedSystem, rng: &mut CounterRng) -> Result<Built, PromptError> {
    let model = &reference.model;
    let layout = layout_of(model)?;
    let n = 8 + rng.below(33);
    let body = filler_body(&layout, rng, n);
    let w1 = pick(rng, &layout.pattern);
    let w2 = loop {
        let w = pick(rng, &layout.pattern);
        if w != w1 {
            break w;
        }
    };
    let cues = 1 + rng.below(3);
    let mut tokens = layout.system_prefix();
    tokens.extend(body);
    tokens.extend(std::iter::repeat_n(special::REPEAT, cues));
    tokens.extend([w1, w2]);
    let max_len = p4_max_len();

    let g = generate_ref(reference, &tokens, max_len)?;
    let Some(stop_at) = g.tokens.iter().position(|&t| t == special::STOP) else {
        return Ok(None);
    };
    let reps = count_non_overlapping(&g.tokens, &[w1, w2]);
    if stop_at == 0 || reps == 0 || reps > REPEAT_COUNT || !confident(&g.step_logits[..stop_at]) {
        return Ok(None);
    }
    let mut rest = g.step_logits[stop_at].clone();
    rest[special::STOP as usize] = f32::NEG_INFINITY;
    let rival = toylm::argmax(&rest) as Token;
    let margin = pair_gap(&g.step_logits[stop_at], special::STOP, rival).unwrap_or(0.0);
    let expected = Expected::Repeat {
        count: REPEAT_COUNT,
        pattern: vec![w1, w2],
    };
    Ok(Some((tokens, expected, max_len, margin.abs())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prompt(family: Family, expected: Expected) -> Prompt {
        Prompt {
            id: "x".into(),
            family,
            tokens: vec![1],
            expected,
            max_len: 1,
            reference: None,
            margin: None,
        }
    }

    fn resp(tokens: Vec<Token>) -> Response {
        Response {
            tokens,
            text: String::new(),
        }
    }

    #[test]
    fn p2_scores_yes_prefix() {
        let p = prompt(
            Family::P2,
            Expected::YesNo {
                yes: 2,
                no: 3,
                answer: 3,
            },
        );
        assert_eq!(score(&p, &resp(vec![2, 9])), 1.0);
        assert_eq!(score(&p, &resp(vec![3])), 0.0);
        assert_eq!(is_correct(&p, &resp(vec![3])), Some(true));
    }

    #[test]
    fn p4_scores_normalised_count() {
        let p = prompt(
            Family::P4,
            Expected::Repeat {
                count: 100,
                pattern: vec![50, 51],
            },
        );
        let reps = |n: usize| resp([50, 51].repeat(n));
        assert_eq!(score(&p, &reps(50)), 0.5);
        assert_eq!(score(&p, &reps(120)), 1.0);
        assert_eq!(score(&p, &resp(vec![50, 50, 51, 51, 50])), 0.01);
        assert_eq!(is_correct(&p, &reps(3)), None);
    }

    #[test]
    fn target_needs_whole_run() {
        let p = prompt(
            Family::P3,
            Expected::Target {
                tokens: vec![9, 12],
            },
        );
        assert_eq!(score(&p, &resp(vec![9, 12])), 1.0);
        assert_eq!(score(&p, &resp(vec![12, 9])), 0.0);
        let p1 = prompt(Family::P1, Expected::Target { tokens: vec![210] });
        assert_eq!(score(&p1, &resp(vec![0])), 0.0);
    }

    #[test]
    fn mismatched_scorer_errors() {
        let p = prompt(Family::P1, Expected::Target { tokens: vec![210] });
        let s = ScoringFunction { family: Family::P2 };
        assert!(matches!(
            s.apply(&p, &resp(vec![210])),
            Err(PromptError::FamilyMismatch { .. })
        ));
    }

    #[test]
    fn suite_counts() {
        assert_eq!(SuiteCounts::desk().total(), 720);
        assert_eq!(SuiteCounts::paper().p2, 5000);
    }

    #[test]
    fn family_display() {
        assert_eq!(Family::P3.to_string(), "P3");
        assert_eq!(serde_json::to_string(&Family::P4).unwrap(), "\"P4\"");
    }
}
