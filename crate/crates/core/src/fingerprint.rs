//! Feature vectors from prompt responses, per-axis random forests, majority
//! voting over repeated queries, and prompt-set minimisation.

use crate::prompts::{self, PromptSuite, Response, SuiteCounts};
use crate::rng::CounterRng;
use crate::systems::{Axis, QuerySession, SimulatedSystem, SystemConfig, SystemError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::ops::Range;
use std::sync::Arc;
use thiserror::Error;

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FingerprintError {
    #[error("missing response for prompt {0}")]
    MissingResponse(String),
    #[error("response for unknown prompt {0}")]
    UnknownResponse(String),
    #[error("degenerate training set: {0}")]
    Degenerate(String),
    #[error("feature vector has {got} entries, model expects {expected}")]
    FeatureLength { expected: usize, got: usize },
    #[error("{0} must be at least 1")]
    Zero(&'static str),
    #[error("unsupported model version {0}")]
    Version(u32),
    #[error("minimisation precondition failed: {0}")]
    Precondition(String),
    #[error("malformed dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-prompt scores in prompt-id order (P1, then P2, P3, P4).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub layout: Arc<[String]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub feature: FeatureVector,
    pub config: SystemConfig,
    pub replicate_index: u64,
}

impl LabeledSample {
    pub fn label(&self, axis: Axis) -> &str {
        self.config.label(axis)
    }
}

pub fn layout(suite: &PromptSuite) -> Arc<[String]> {
    suite.prompts.iter().map(|p| p.id.clone()).collect()
}

/// Scores one response per prompt.
pub fn embed(
    suite: &PromptSuite,
    responses: &BTreeMap<String, Response>,
) -> Result<FeatureVector, FingerprintError> {
    if let Some(id) = responses
        .keys()
        .find(|id| !suite.prompts.iter().any(|p| &p.id == *id))
    {
        return Err(FingerprintError::UnknownResponse(id.clone()));
    }
    let values = suite
        .prompts
        .iter()
        .map(|p| {
            responses
                .get(&p.id)
                .map(|r| prompts::score(p, r))
                .ok_or_else(|| FingerprintError::MissingResponse(p.id.clone()))
        })
        .collect::<Result<_, _>>()?;
    Ok(FeatureVector {
        values,
        layout: layout(suite),
    })
}

/// A block of replicates drawn at one temperature and sampler seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleJob {
    pub temperature: f32,
    pub seed: u64,
    pub replicates: Range<u64>,
}

/// Feature vectors for several jobs on one system. Each prompt is run in a
/// single [`QuerySession`], so all jobs share its decode work.
pub fn collect_jobs(
    system: &SimulatedSystem,
    suite: &PromptSuite,
    jobs: &[SampleJob],
    batch_size: usize,
) -> Result<Vec<Vec<FeatureVector>>, FingerprintError> {
    let deterministic = system.mitigation_sigma <= 0.0;
    // per_prompt[p][job][replicate]
    let per_prompt: Vec<Vec<Vec<f64>>> = suite
        .prompts
        .par_iter()
        .map(|p| {
            let mut session = QuerySession::new(system, p, batch_size)?;
            let mut greedy = None;
            jobs.iter()
                .map(|job| {
                    job.replicates
                        .clone()
                        .map(|r| {
                            if deterministic && job.temperature <= 0.0 {
                                if let Some(s) = greedy {
                                    return Ok(s);
                                }
                            }
                            let out = session.tokens(job.temperature, job.seed, r)?;
                            let s = prompts::score_tokens(p, &out);
                            if deterministic && job.temperature <= 0.0 {
                                greedy = Some(s);
                            }
                            Ok(s)
                        })
                        .collect::<Result<Vec<f64>, SystemError>>()
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    let layout = layout(suite);
    Ok(jobs
        .iter()
        .enumerate()
        .map(|(j, job)| {
            (0..job.replicates.end.saturating_sub(job.replicates.start) as usize)
                .map(|r| FeatureVector {
                    values: per_prompt.iter().map(|p| p[j][r]).collect(),
                    layout: Arc::clone(&layout),
                })
                .collect()
        })
        .collect())
}

/// Replicate `r` of every prompt uses the request stream `(hash(id), r)`.
pub fn collect(
    system: &SimulatedSystem,
    suite: &PromptSuite,
    replicates: usize,
    temperature: f32,
    seed: u64,
    batch_size: usize,
) -> Result<Vec<FeatureVector>, FingerprintError> {
    if replicates == 0 {
        return Err(FingerprintError::Zero("replicates"));
    }
    let job = SampleJob {
        temperature,
        seed,
        replicates: 0..replicates as u64,
    };
    Ok(collect_jobs(system, suite, &[job], batch_size)?.remove(0))
}

pub fn label_samples(
    config: &SystemConfig,
    features: Vec<FeatureVector>,
    first_replicate: u64,
) -> Vec<LabeledSample> {
    features
        .into_iter()
        .zip(first_replicate..)
        .map(|(feature, replicate_index)| LabeledSample {
            feature,
            config: config.clone(),
            replicate_index,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Random forest

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// `None` grows until leaves are pure.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    /// Features tried per split; `None` is `ceil(sqrt(n_features))`.
    pub max_features: Option<usize>,
    /// Tree `t` bootstraps with seed `seed + t`.
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: None,
            min_leaf: 1,
            max_features: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Node {
    /// Values `<= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    /// Label distribution of the training samples that reached the leaf.
    Leaf { dist: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { dist } => return argmax_first(dist),
                &Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }
}

/// Classifier for one axis. Labels are sorted, so the lowest class index is
/// also the lexicographically smallest label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub version: u32,
    pub axis: Axis,
    pub labels: Vec<String>,
    pub feature_ids: Vec<String>,
    pub params: ForestParams,
    trees: Vec<Tree>,
}

pub fn train_forest(
    samples: &[LabeledSample],
    axis: Axis,
    params: &ForestParams,
) -> Result<ForestModel, FingerprintError> {
    let Some(first) = samples.first() else {
        return Err(FingerprintError::Degenerate("no samples".into()));
    };
    let n_features = first.feature.values.len();
    if n_features == 0 {
        return Err(FingerprintError::Degenerate("no features".into()));
    }
    if let Some(s) = samples
        .iter()
        .find(|s| s.feature.values.len() != n_features)
    {
        return Err(FingerprintError::FeatureLength {
            expected: n_features,
            got: s.feature.values.len(),
        });
    }
    let labels: Vec<String> = samples
        .iter()
        .map(|s| s.label(axis).to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if labels.len() < 2 {
        return Err(FingerprintError::Degenerate(format!("one {axis} label")));
    }
    if params.n_trees == 0 {
        return Err(FingerprintError::Zero("n_trees"));
    }
    let y: Vec<usize> = samples
        .iter()
        .map(|s| {
            labels
                .binary_search_by(|l| l.as_str().cmp(s.label(axis)))
                .expect("label collected above")
        })
        .collect();
    let x: Vec<&[f64]> = samples
        .iter()
        .map(|s| s.feature.values.as_slice())
        .collect();
    let mtry = params
        .max_features
        .unwrap_or_else(|| (n_features as f64).sqrt().ceil() as usize)
        .clamp(1, n_features);
    let grower = Grower {
        x: &x,
        y: &y,
        n_classes: labels.len(),
        n_features,
        mtry,
        max_depth: params.max_depth,
        min_leaf: params.min_leaf.max(1),
    };
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = CounterRng::new(params.seed.wrapping_add(t as u64), 0);
            let n = samples.len();
            let idx: Vec<usize> = (0..n).map(|_| rng.below(n)).collect();
            grower.tree(idx, &mut rng)
        })
        .collect();
    Ok(ForestModel {
        version: MODEL_VERSION,
        axis,
        labels,
        feature_ids: first.feature.layout.to_vec(),
        params: *params,
        trees,
    })
}

struct Grower<'a> {
    x: &'a [&'a [f64]],
    y: &'a [usize],
    n_classes: usize,
    n_features: usize,
    mtry: usize,
    max_depth: Option<usize>,
    min_leaf: usize,
}

struct Split {
    feature: usize,
    threshold: f64,
    score: f64,
}

impl Grower<'_> {
    fn tree(&self, idx: Vec<usize>, rng: &mut CounterRng) -> Tree {
        let mut nodes = Vec::new();
        self.grow(idx, 0, rng, &mut nodes);
        Tree { nodes }
    }

    fn grow(
        &self,
        idx: Vec<usize>,
        depth: usize,
        rng: &mut CounterRng,
        nodes: &mut Vec<Node>,
    ) -> usize {
        let id = nodes.len();
        let mut counts = vec![0usize; self.n_classes];
        for &i in &idx {
            counts[self.y[i]] += 1;
        }
        let pure = counts.iter().filter(|&&c| c > 0).count() == 1;
        let n = idx.len() as f64;
        nodes.push(Node::Leaf {
            dist: counts.iter().map(|&c| c as f64 / n).collect(),
        });
        if pure || self.max_depth.is_some_and(|d| depth >= d) || idx.len() < 2 * self.min_leaf {
            return id;
        }
        let Some(split) = self.best_split(&idx, rng) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx
            .iter()
            .partition(|&&i| self.x[i][split.feature] <= split.threshold);
        let left = self.grow(l, depth + 1, rng, nodes);
        let right = self.grow(r, depth + 1, rng, nodes);
        nodes[id] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        id
    }

    /// Tries features in random order until `mtry` non-constant ones have
    /// been examined, so a split is found whenever one exists.
    fn best_split(&self, idx: &[usize], rng: &mut CounterRng) -> Option<Split> {
        let mut features: Vec<usize> = (0..self.n_features).collect();
        rng.shuffle(&mut features);
        let mut best: Option<Split> = None;
        let mut visited = 0;
        let mut pairs: Vec<(f64, usize)> = Vec::with_capacity(idx.len());
        for f in features {
            if visited == self.mtry {
                break;
            }
            pairs.clear();
            pairs.extend(idx.iter().map(|&i| (self.x[i][f], self.y[i])));
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            if pairs[0].0 == pairs[pairs.len() - 1].0 {
                continue;
            }
            visited += 1;
            if let Some(s) = self.scan(f, &pairs) {
                if best.as_ref().is_none_or(|b| s.score > b.score) {
                    best = Some(s);
                }
            }
        }
        best
    }

    /// Best Gini threshold on one sorted feature. The score is
    /// `sum_c n_lc^2 / n_l + sum_c n_rc^2 / n_r`, larger is better.
    fn scan(&self, feature: usize, pairs: &[(f64, usize)]) -> Option<Split> {
        let n = pairs.len();
        let mut right = vec![0usize; self.n_classes];
        for p in pairs {
            right[p.1] += 1;
        }
        let mut left = vec![0usize; self.n_classes];
        let sq = |c: usize| (c * c) as f64;
        let mut left_sq = 0.0;
        let mut right_sq: f64 = right.iter().map(|&c| sq(c)).sum();
        let mut best: Option<Split> = None;
        for i in 0..n - 1 {
            let c = pairs[i].1;
            left_sq += sq(left[c] + 1) - sq(left[c]);
            right_sq += sq(right[c] - 1) - sq(right[c]);
            left[c] += 1;
            right[c] -= 1;
            let nl = i + 1;
            if pairs[i].0 == pairs[i + 1].0 || nl < self.min_leaf || n - nl < self.min_leaf {
                continue;
            }
            let score = left_sq / nl as f64 + right_sq / (n - nl) as f64;
            if best.as_ref().is_none_or(|b| score > b.score) {
                best = Some(Split {
                    feature,
                    threshold: pairs[i].0 + (pairs[i + 1].0 - pairs[i].0) / 2.0,
                    score,
                });
            }
        }
        best
    }
}

/// Index of the largest entry; ties go to the lowest index.
fn argmax_first<T: PartialOrd>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

impl ForestModel {
    pub fn n_features(&self) -> usize {
        self.feature_ids.len()
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    fn check(&self, x: &FeatureVector) -> Result<(), FingerprintError> {
        if x.values.len() != self.n_features() {
            return Err(FingerprintError::FeatureLength {
                expected: self.n_features(),
                got: x.values.len(),
            });
        }
        Ok(())
    }

    /// Tree votes per label.
    pub fn votes(&self, x: &FeatureVector) -> Result<Vec<usize>, FingerprintError> {
        self.check(x)?;
        let mut counts = vec![0usize; self.labels.len()];
        for t in &self.trees {
            counts[t.predict(&x.values)] += 1;
        }
        Ok(counts)
    }

    /// Plurality of the trees, ties to the lexicographically smallest label.
    pub fn predict(&self, x: &FeatureVector) -> Result<&str, FingerprintError> {
        let counts = self.votes(x)?;
        Ok(&self.labels[argmax_first(&counts)])
    }

    pub fn to_json(&self) -> Result<String, FingerprintError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, FingerprintError> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        let version = v.get("version").and_then(|x| x.as_u64()).unwrap_or(0) as u32;
        if version != MODEL_VERSION {
            return Err(FingerprintError::Version(version));
        }
        let m: Self = serde_json::from_value(v)?;
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<(), FingerprintError> {
        let bad = |msg: String| Err(FingerprintError::Dataset(msg));
        if self.trees.is_empty() || self.labels.len() < 2 {
            return bad("model without trees or labels".into());
        }
        for t in &self.trees {
            for node in &t.nodes {
                match node {
                    Node::Split {
                        feature,
                        left,
                        right,
                        ..
                    } => {
                        if *feature >= self.n_features()
                            || *left >= t.nodes.len()
                            || *right >= t.nodes.len()
                        {
                            return bad(format!("split out of range: feature {feature}"));
                        }
                    }
                    Node::Leaf { dist } => {
                        if dist.len() != self.labels.len()
                            || (dist.iter().sum::<f64>() - 1.0).abs() > 1e-9
                        {
                            return bad("leaf distribution does not sum to 1".into());
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn predict(model: &ForestModel, x: &FeatureVector) -> Result<String, FingerprintError> {
    model.predict(x).map(str::to_string)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteResult {
    pub per_sample_predictions: Vec<String>,
    pub winner: String,
    /// Winner's votes minus the runner-up's.
    pub margin: usize,
}

/// Majority vote over per-sample predictions, ties to the smallest label.
pub fn vote(
    model: &ForestModel,
    samples: &[FeatureVector],
) -> Result<VoteResult, FingerprintError> {
    if samples.is_empty() {
        return Err(FingerprintError::Zero("k"));
    }
    let per_sample_predictions = samples
        .iter()
        .map(|x| predict(model, x))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(tally(per_sample_predictions))
}

pub fn tally(per_sample_predictions: Vec<String>) -> VoteResult {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for p in &per_sample_predictions {
        *counts.entry(p).or_default() += 1;
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    // Stable sort keeps lexicographic order among equal counts.
    ranked.sort_by_key(|r| std::cmp::Reverse(r.1));
    let margin = ranked[0].1 - ranked.get(1).map_or(0, |r| r.1);
    let winner = ranked[0].0.to_string();
    VoteResult {
        per_sample_predictions,
        winner,
        margin,
    }
}

/// Queries the target `k` times (replicates `0..k` at `seed`) and votes
/// with each axis model.
pub fn fingerprint_target(
    system: &SimulatedSystem,
    suite: &PromptSuite,
    k: usize,
    models: &[ForestModel],
    temperature: f32,
    seed: u64,
) -> Result<BTreeMap<Axis, VoteResult>, FingerprintError> {
    if k == 0 {
        return Err(FingerprintError::Zero("k"));
    }
    let xs = collect(system, suite, k, temperature, seed, 1)?;
    models.iter().map(|m| Ok((m.axis, vote(m, &xs)?))).collect()
}

// ---------------------------------------------------------------------------
// Minimisation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Minimized {
    pub kept: Vec<String>,
    pub composition: SuiteCounts,
}

/// Whether every pair of samples that differ in a label on `axes` differ in
/// at least one feature. For deterministic responses this is exactly the
/// condition under which a fully grown forest retrieves every configuration.
pub fn separates(samples: &[LabeledSample], axes: &[Axis]) -> bool {
    conflicts(samples, axes, None).is_empty()
}

/// Label-distinct pairs of distinct vectors not separated by the features
/// in `keep` (all features when `None`).
fn conflicts(
    samples: &[LabeledSample],
    axes: &[Axis],
    keep: Option<&[usize]>,
) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let (a, b) = (&samples[i], &samples[j]);
            if axes.iter().all(|&ax| a.label(ax) == b.label(ax)) {
                continue;
            }
            let same = match keep {
                Some(k) => k
                    .iter()
                    .all(|&f| a.feature.values[f] == b.feature.values[f]),
                None => a.feature.values == b.feature.values,
            };
            if same {
                out.push((i, j));
            }
        }
    }
    out
}

/// Greedy backward elimination in prompt-id order: a prompt is dropped when
/// the remaining prompts still tell apart every pair of configurations
/// that differ on one of `axes`.
pub fn minimize_prompt_set(
    samples: &[LabeledSample],
    axes: &[Axis],
) -> Result<Minimized, FingerprintError> {
    let Some(first) = samples.first() else {
        return Err(FingerprintError::Precondition("no samples".into()));
    };
    let layout = Arc::clone(&first.feature.layout);
    // One representative per distinct (labels, vector).
    let mut reps: Vec<&LabeledSample> = Vec::new();
    for s in samples {
        if !reps
            .iter()
            .any(|r| r.config == s.config && r.feature.values == s.feature.values)
        {
            reps.push(s);
        }
    }
    let reps: Vec<LabeledSample> = reps.into_iter().cloned().collect();
    let unresolved = conflicts(&reps, axes, None);
    if !unresolved.is_empty() {
        let (i, j) = unresolved[0];
        return Err(FingerprintError::Precondition(format!(
            "{} and {} give identical responses on the full set",
            reps[i].config, reps[j].config
        )));
    }
    // Pairs that need separating and, per pair, the features that do it.
    let mut need: Vec<Vec<usize>> = Vec::new();
    for i in 0..reps.len() {
        for j in i + 1..reps.len() {
            if axes
                .iter()
                .all(|&ax| reps[i].label(ax) == reps[j].label(ax))
            {
                continue;
            }
            let (a, b) = (&reps[i].feature.values, &reps[j].feature.values);
            need.push((0..layout.len()).filter(|&f| a[f] != b[f]).collect());
        }
    }
    let mut cover: Vec<usize> = need.iter().map(Vec::len).collect();
    let mut by_feature: Vec<Vec<usize>> = vec![Vec::new(); layout.len()];
    for (p, fs) in need.iter().enumerate() {
        for &f in fs {
            by_feature[f].push(p);
        }
    }
    let mut order: Vec<usize> = (0..layout.len()).collect();
    order.sort_by(|&a, &b| layout[a].cmp(&layout[b]));
    let mut kept = vec![true; layout.len()];
    for f in order {
        if by_feature[f].iter().all(|&p| cover[p] > 1) {
            kept[f] = false;
            for &p in &by_feature[f] {
                cover[p] -= 1;
            }
        }
    }
    let mut kept: Vec<String> = (0..layout.len())
        .filter(|&f| kept[f])
        .map(|f| layout[f].clone())
        .collect();
    kept.sort();
    let composition = composition_of(&kept);
    Ok(Minimized { kept, composition })
}

fn composition_of(ids: &[String]) -> SuiteCounts {
    let mut c = SuiteCounts {
        p1: 0,
        p2: 0,
        p3: 0,
        p4: 0,
    };
    for id in ids {
        match id.get(..2) {
            Some("p1") => c.p1 += 1,
            Some("p2") => c.p2 += 1,
            Some("p3") => c.p3 += 1,
            Some("p4") => c.p4 += 1,
            _ => {}
        }
    }
    c
}

/// Samples restricted to the features named in `keep`, in layout order.
pub fn restrict(samples: &[LabeledSample], keep: &[String]) -> Vec<LabeledSample> {
    let Some(first) = samples.first() else {
        return Vec::new();
    };
    let idx: Vec<usize> = (0..first.feature.layout.len())
        .filter(|&f| keep.contains(&first.feature.layout[f]))
        .collect();
    let layout: Arc<[String]> = idx
        .iter()
        .map(|&f| first.feature.layout[f].clone())
        .collect();
    samples
        .iter()
        .map(|s| LabeledSample {
            feature: FeatureVector {
                values: idx.iter().map(|&f| s.feature.values[f]).collect(),
                layout: Arc::clone(&layout),
            },
            config: s.config.clone(),
            replicate_index: s.replicate_index,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// CSV datasets

const LABEL_COLUMNS: [&str; 5] = ["config", "engine", "backend", "hardware", "replicate"];

/// Header `config,engine,backend,hardware,replicate,<prompt ids...>`.
pub fn write_dataset<W: Write>(w: W, samples: &[LabeledSample]) -> Result<(), FingerprintError> {
    let mut out = csv::Writer::from_writer(w);
    let Some(first) = samples.first() else {
        out.write_record(LABEL_COLUMNS)?;
        out.flush()?;
        return Ok(());
    };
    let mut header: Vec<&str> = LABEL_COLUMNS.to_vec();
    header.extend(first.feature.layout.iter().map(String::as_str));
    out.write_record(&header)?;
    for s in samples {
        if s.feature.layout != first.feature.layout {
            return Err(FingerprintError::Dataset(
                "samples with different layouts".into(),
            ));
        }
        let mut row = vec![
            s.config.id(),
            s.config.engine.clone(),
            s.config.backend.clone(),
            s.config.hardware.clone(),
            s.replicate_index.to_string(),
        ];
        row.extend(s.feature.values.iter().map(|v| v.to_string()));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(r: R) -> Result<Vec<LabeledSample>, FingerprintError> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers()?.clone();
    if header.len() < LABEL_COLUMNS.len() || header.iter().zip(LABEL_COLUMNS).any(|(a, b)| a != b) {
        return Err(FingerprintError::Dataset("unexpected header".into()));
    }
    let layout: Arc<[String]> = header
        .iter()
        .skip(LABEL_COLUMNS.len())
        .map(str::to_string)
        .collect();
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let config = SystemConfig::parse(field(0))
            .ok_or_else(|| FingerprintError::Dataset(format!("bad config '{}'", field(0))))?;
        let replicate_index = field(4)
            .parse()
            .map_err(|_| FingerprintError::Dataset(format!("bad replicate '{}'", field(4))))?;
        let values = rec
            .iter()
            .skip(LABEL_COLUMNS.len())
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| FingerprintError::Dataset(format!("bad value '{v}'")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.push(LabeledSample {
            feature: FeatureVector {
                values,
                layout: Arc::clone(&layout),
            },
            config,
            replicate_index,
        });
    }
    Ok(out)
}
