//! Experiment runner: specs with per-experiment defaults, the experiment
//! designs against the simulated zoo, and CSV/JSON/plot reports.
//!
//! Every run `r` derives one seed from the spec's run seed. That seed drives
//! the sampler of all queries in the run and the forest bootstrap. Training
//! uses replicates `0..l` of every prompt, testing uses `l..l+k`.

use crate::fingerprint::{
    self, collect_jobs, label_samples, minimize_prompt_set, restrict, tally, train_forest,
    FeatureVector, FingerprintError, ForestParams, LabeledSample, SampleJob,
};
use crate::prompts::{
    Expected, Family, GenParams, PromptError, PromptSuite, SuiteCounts, DEFAULT_DELTA,
};
use crate::rng::{self, CounterRng};
use crate::systems::{Axis, SimulatedSystem, SystemConfig, SystemError, Zoo};
use crate::toylm::ModelWeights;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;
use thiserror::Error;

/// Overrides the run seed and the suite seed of every spec.
pub const SEED_ENV: &str = "DEVFP_SEED";

const RUN_KEY: u64 = 0x7275_6e73;
const GROWTH_STREAM: u64 = 0x6772_6f77;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Fingerprint(#[from] FingerprintError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn spec_err<T>(msg: impl Into<String>) -> Result<T, HarnessError> {
    Err(HarnessError::Spec(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    ClosedWorld,
    TempSweep,
    KSweep,
    Holdout,
    BatchGen,
    TempTransfer,
    Mitigation,
}

impl Experiment {
    pub const ALL: [Experiment; 7] = [
        Experiment::ClosedWorld,
        Experiment::TempSweep,
        Experiment::KSweep,
        Experiment::Holdout,
        Experiment::BatchGen,
        Experiment::TempTransfer,
        Experiment::Mitigation,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Experiment::ClosedWorld => "closed-world",
            Experiment::TempSweep => "temp-sweep",
            Experiment::KSweep => "k-sweep",
            Experiment::Holdout => "holdout",
            Experiment::BatchGen => "batch-gen",
            Experiment::TempTransfer => "temp-transfer",
            Experiment::Mitigation => "mitigation",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| format!("unknown experiment '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    pub counts: SuiteCounts,
    pub seed: u64,
    pub delta: f64,
    /// Load the suite from this JSON Lines file instead of generating it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

/// Realizations of one component withheld from training, one at a time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Holdout {
    pub axis: Axis,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub experiment: Experiment,
    pub name: String,
    pub model_seed: u64,
    pub suite: SuiteSpec,
    pub temperatures: Vec<f32>,
    /// Training replicates per prompt and system.
    pub l: usize,
    /// Test replicates voted per fingerprint.
    pub k: usize,
    /// k-sweep only.
    pub k_values: Vec<usize>,
    /// Batch size of every query outside the batch experiment.
    pub batch_size: usize,
    /// batch-gen: training batch sizes, pooled.
    pub train_batches: Vec<usize>,
    pub test_batch: usize,
    pub holdout: Option<Holdout>,
    pub mitigation_sigmas: Vec<f32>,
    pub run_seed: u64,
    pub runs: usize,
    pub forest: ForestParams,
    /// closed-world: also minimise the prompt set.
    pub minimize: bool,
    /// closed-world: prompt counts of the suite-growth curve.
    pub growth_steps: Vec<usize>,
}

impl ExperimentSpec {
    /// Defaults for `experiment` at desk scale, or paper scale
    /// (l=768, k=50, paper suite counts).
    pub fn defaults(experiment: Experiment, paper_scale: bool) -> Self {
        let (counts, l, k) = if paper_scale {
            (SuiteCounts::paper(), 768, 50)
        } else {
            (SuiteCounts::desk(), 32, 20)
        };
        let mut spec = Self {
            experiment,
            name: experiment.name().to_string(),
            model_seed: 42,
            suite: SuiteSpec {
                counts,
                seed: 7,
                delta: DEFAULT_DELTA,
                path: None,
            },
            temperatures: vec![0.0],
            l,
            k,
            k_values: Vec::new(),
            batch_size: 1,
            train_batches: Vec::new(),
            test_batch: 256,
            holdout: None,
            mitigation_sigmas: Vec::new(),
            run_seed: 2024,
            runs: 20,
            forest: ForestParams::default(),
            minimize: false,
            growth_steps: Vec::new(),
        };
        match experiment {
            Experiment::ClosedWorld => {
                spec.minimize = true;
                spec.growth_steps = vec![5, 10, 20, 50, 100, 200, 400];
            }
            Experiment::TempSweep => spec.temperatures = vec![0.0, 0.3, 0.6, 0.9],
            Experiment::KSweep => {
                spec.temperatures = vec![0.6];
                spec.k_values = vec![1, 2, 5, 10, 20, 50];
            }
            Experiment::Holdout => {
                spec.holdout = Some(Holdout {
                    axis: Axis::Hardware,
                    labels: Zoo::builtin().labels(Axis::Hardware).to_vec(),
                })
            }
            Experiment::BatchGen => spec.train_batches = vec![32, 64, 128],
            Experiment::TempTransfer => spec.temperatures = vec![0.3, 0.6, 0.9],
            Experiment::Mitigation => spec.mitigation_sigmas = vec![0.0, 0.25, 0.5, 1.0, 2.0],
        }
        spec
    }

    /// Defaults overlaid with the fields of `overlay` (a JSON object, nested
    /// objects merged key by key), then the seed override from the
    /// environment.
    pub fn load(
        experiment: Experiment,
        paper_scale: bool,
        overlay: Option<&str>,
    ) -> Result<Self, HarnessError> {
        let mut value = serde_json::to_value(Self::defaults(experiment, paper_scale))?;
        if let Some(text) = overlay {
            let patch: Value = serde_json::from_str(text)?;
            if !patch.is_object() {
                return spec_err("spec must be a JSON object");
            }
            if let Some(e) = patch.get("experiment") {
                if e.as_str() != Some(experiment.name()) {
                    return spec_err(format!("spec is for experiment {e}, not {experiment}"));
                }
            }
            merge(&mut value, patch);
        }
        let mut spec: Self = serde_json::from_value(value)?;
        if let Ok(s) = std::env::var(SEED_ENV) {
            let seed = s
                .trim()
                .parse()
                .map_err(|_| HarnessError::Spec(format!("{SEED_ENV} is not an integer: {s}")))?;
            spec.run_seed = seed;
            spec.suite.seed = seed;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.runs == 0 || self.l == 0 || self.k == 0 {
            return spec_err("runs, l and k must be >= 1");
        }
        if self.batch_size == 0 || self.test_batch == 0 || self.train_batches.contains(&0) {
            return spec_err("batch sizes must be >= 1");
        }
        if self.temperatures.is_empty() {
            return spec_err("no temperatures");
        }
        if self
            .temperatures
            .iter()
            .any(|t| !(t.is_finite() && *t >= 0.0))
        {
            return spec_err("temperatures must be finite and >= 0");
        }
        if self
            .mitigation_sigmas
            .iter()
            .any(|s| !(s.is_finite() && *s >= 0.0))
        {
            return spec_err("sigmas must be finite and >= 0");
        }
        if self.k_values.contains(&0) {
            return spec_err("k values must be >= 1");
        }
        if self.forest.n_trees == 0 {
            return spec_err("forest needs at least one tree");
        }
        let zoo = Zoo::builtin();
        if let Some(h) = &self.holdout {
            if h.labels.is_empty() {
                return spec_err("holdout lists no labels");
            }
            if let Some(bad) = h.labels.iter().find(|l| !zoo.labels(h.axis).contains(l)) {
                return spec_err(format!("unknown {} '{bad}'", h.axis));
            }
        }
        match self.experiment {
            Experiment::ClosedWorld if !self.temperatures.contains(&0.0) => {
                spec_err("closed-world needs T=0 in its temperature list")
            }
            Experiment::KSweep if self.k_values.is_empty() => spec_err("k-sweep needs k values"),
            Experiment::Holdout if self.holdout.is_none() => {
                spec_err("holdout needs a holdout component")
            }
            Experiment::BatchGen if self.train_batches.is_empty() => {
                spec_err("batch-gen needs training batches")
            }
            Experiment::Mitigation if self.mitigation_sigmas.is_empty() => {
                spec_err("mitigation needs sigmas")
            }
            _ => Ok(()),
        }
    }

    /// Seed of run `run`.
    pub fn run_seed(&self, run: usize) -> u64 {
        rng::draw(self.run_seed, RUN_KEY, run as u64)
    }

    /// Replicates used for training and testing. Disjoint by construction.
    pub fn replicate_split(&self, k: usize) -> (Range<u64>, Range<u64>) {
        let l = self.l as u64;
        (0..l, l..l + k as u64)
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (key, v) in p {
                match b.get_mut(&key) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(key, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Model, zoo and prompt suite shared by experiments.
pub struct Context {
    pub zoo: Zoo,
    pub model: Arc<ModelWeights>,
    pub systems: Vec<SimulatedSystem>,
    pub suite: PromptSuite,
    pub model_seed: u64,
    pub suite_spec: SuiteSpec,
}

impl Context {
    pub fn new(model_seed: u64, suite_spec: &SuiteSpec) -> Result<Self, HarnessError> {
        let zoo = Zoo::builtin();
        let model = crate::systems::default_model(model_seed);
        let systems = zoo.instantiate_all(&model);
        let suite = match &suite_spec.path {
            Some(p) => PromptSuite::load(p)?,
            None => {
                let params = GenParams {
                    delta: suite_spec.delta,
                    ..GenParams::default()
                };
                PromptSuite::generate(suite_spec.counts, suite_spec.seed, &systems, params)?
            }
        };
        if suite.is_empty() {
            return spec_err("empty prompt suite");
        }
        Ok(Self {
            zoo,
            model,
            systems,
            suite,
            model_seed,
            suite_spec: suite_spec.clone(),
        })
    }

    pub fn for_spec(spec: &ExperimentSpec) -> Result<Self, HarnessError> {
        Self::new(spec.model_seed, &spec.suite)
    }

    /// Whether this context was built for `spec`'s model and suite.
    pub fn matches(&self, spec: &ExperimentSpec) -> bool {
        self.model_seed == spec.model_seed && self.suite_spec == spec.suite
    }
}

// ---------------------------------------------------------------------------
// Reports

/// One CSV row: accuracy of one run on one axis under one condition.
/// `accuracy` is `None` for an axis that cannot be evaluated (written `NA`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub experiment: String,
    pub model_seed: u64,
    pub condition: String,
    pub axis: String,
    pub accuracy: Option<f64>,
    pub n_correct: usize,
    pub n_total: usize,
    pub run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub condition: String,
    pub axis: String,
    pub mean: Option<f64>,
    /// Sample standard deviation over runs; 0 for a single run.
    pub std: Option<f64>,
    pub runs: usize,
}

/// A condition and its position on the plot's x axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    pub x: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimizationReport {
    pub full_size: usize,
    pub kept: Vec<String>,
    pub composition: SuiteCounts,
    /// Test accuracy per axis of a forest trained on the kept prompts only.
    pub accuracy: BTreeMap<String, f64>,
    /// Leave-one-config-out accuracy per axis, full suite and kept subset.
    pub loco_full: BTreeMap<String, f64>,
    pub loco_kept: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthPoint {
    pub prompts: usize,
    pub accuracy: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub experiment: Experiment,
    pub spec: ExperimentSpec,
    pub conditions: Vec<Condition>,
    pub rows: Vec<AccuracyRow>,
    pub summary: Vec<Summary>,
    pub runtime_secs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minimization: Option<MinimizationReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub growth: Vec<GrowthPoint>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub transfer: Vec<TransferDelta>,
}

/// temp-transfer: mean accuracy of one off-diagonal cell against the
/// matched cell at its test temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferDelta {
    pub train: f32,
    pub test: f32,
    pub axis: String,
    pub matched: f64,
    pub transfer: f64,
    pub delta: f64,
}

const CSV_HEADER: [&str; 8] = [
    "experiment",
    "model_seed",
    "condition",
    "axis",
    "accuracy",
    "n_correct",
    "n_total",
    "run",
];

pub fn write_rows_csv<W: Write>(w: W, rows: &[AccuracyRow]) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER)?;
    for r in rows {
        let accuracy = r
            .accuracy
            .map_or_else(|| "NA".to_string(), |a| a.to_string());
        out.write_record([
            r.experiment.clone(),
            r.model_seed.to_string(),
            r.condition.clone(),
            r.axis.clone(),
            accuracy,
            r.n_correct.to_string(),
            r.n_total.to_string(),
            r.run.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_rows_csv<R: Read>(r: R) -> Result<Vec<AccuracyRow>, HarnessError> {
    let mut reader = csv::Reader::from_reader(r);
    if reader.headers()?.iter().ne(CSV_HEADER) {
        return spec_err("unexpected CSV header");
    }
    let bad = |field: &str| HarnessError::Spec(format!("bad {field} in CSV"));
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let accuracy = match &rec[4] {
            "NA" => None,
            a => Some(a.parse().map_err(|_| bad("accuracy"))?),
        };
        rows.push(AccuracyRow {
            experiment: rec[0].to_string(),
            model_seed: rec[1].parse().map_err(|_| bad("model_seed"))?,
            condition: rec[2].to_string(),
            axis: rec[3].to_string(),
            accuracy,
            n_correct: rec[5].parse().map_err(|_| bad("n_correct"))?,
            n_total: rec[6].parse().map_err(|_| bad("n_total"))?,
            run: rec[7].parse().map_err(|_| bad("run"))?,
        });
    }
    Ok(rows)
}

impl AccuracyReport {
    fn new(
        spec: &ExperimentSpec,
        conditions: Vec<Condition>,
        rows: Vec<AccuracyRow>,
        started: Instant,
    ) -> Self {
        let summary = summarize(&conditions, &rows);
        Self {
            experiment: spec.experiment,
            spec: spec.clone(),
            conditions,
            rows,
            summary,
            runtime_secs: started.elapsed().as_secs_f64(),
            minimization: None,
            growth: Vec::new(),
            transfer: Vec::new(),
        }
    }

    pub fn summary_for(&self, condition: &str, axis: &str) -> Option<&Summary> {
        self.summary
            .iter()
            .find(|s| s.condition == condition && s.axis == axis)
    }

    /// Mean over runs, `None` when missing or not applicable.
    pub fn mean(&self, condition: &str, axis: &str) -> Option<f64> {
        self.summary_for(condition, axis).and_then(|s| s.mean)
    }

    pub fn csv_string(&self) -> Result<String, HarnessError> {
        let mut buf = Vec::new();
        write_rows_csv(&mut buf, &self.rows)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    /// Gnuplot-ready table: one line per condition with mean and std per
    /// axis (`NaN` where not applicable).
    pub fn plot_table(&self) -> String {
        let mut axes: Vec<&str> = Vec::new();
        for s in &self.summary {
            if !axes.contains(&s.axis.as_str()) {
                axes.push(&s.axis);
            }
        }
        let mut out = format!(
            "# {} ({} runs)\n# x condition",
            self.experiment, self.spec.runs
        );
        for a in &axes {
            out += &format!(" {a}_mean {a}_std");
        }
        out.push('\n');
        for c in &self.conditions {
            out += &format!("{} \"{}\"", c.x, c.name);
            for a in &axes {
                let s = self.summary_for(&c.name, a);
                let f = |v: Option<f64>| v.map_or_else(|| "NaN".to_string(), |x| format!("{x:.6}"));
                out += &format!(
                    " {} {}",
                    f(s.and_then(|s| s.mean)),
                    f(s.and_then(|s| s.std))
                );
            }
            out.push('\n');
        }
        out
    }

    fn growth_table(&self) -> String {
        let mut out = String::from("# prompts engine backend hardware\n");
        for g in &self.growth {
            out += &g.prompts.to_string();
            for a in Axis::ALL {
                out += &format!(
                    " {:.6}",
                    g.accuracy.get(a.name()).copied().unwrap_or(f64::NAN)
                );
            }
            out.push('\n');
        }
        out
    }

    /// Writes `<name>.csv`, `<name>.json` and `plots/<name>.dat` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
        let plots = dir.join("plots");
        std::fs::create_dir_all(&plots)?;
        let name = &self.spec.name;
        let csv = dir.join(format!("{name}.csv"));
        let json = dir.join(format!("{name}.json"));
        let dat = plots.join(format!("{name}.dat"));
        std::fs::write(&csv, self.csv_string()?)?;
        std::fs::write(&json, serde_json::to_string_pretty(self)? + "\n")?;
        std::fs::write(&dat, self.plot_table())?;
        let mut written = vec![csv, json, dat];
        if !self.growth.is_empty() {
            let g = plots.join(format!("{name}-growth.dat"));
            std::fs::write(&g, self.growth_table())?;
            written.push(g);
        }
        Ok(written)
    }
}

fn summarize(conditions: &[Condition], rows: &[AccuracyRow]) -> Vec<Summary> {
    let mut out = Vec::new();
    for c in conditions {
        let mut axes: Vec<&str> = Vec::new();
        for r in rows.iter().filter(|r| r.condition == c.name) {
            if !axes.contains(&r.axis.as_str()) {
                axes.push(&r.axis);
            }
        }
        for axis in axes {
            let sel: Vec<&AccuracyRow> = rows
                .iter()
                .filter(|r| r.condition == c.name && r.axis == axis)
                .collect();
            let vals: Vec<f64> = sel.iter().filter_map(|r| r.accuracy).collect();
            let (mean, std) = if vals.is_empty() {
                (None, None)
            } else {
                let n = vals.len() as f64;
                let m = vals.iter().sum::<f64>() / n;
                let var = if vals.len() > 1 {
                    vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                (Some(m), Some(var.sqrt()))
            };
            out.push(Summary {
                condition: c.name.clone(),
                axis: axis.to_string(),
                mean,
                std,
                runs: sel.len(),
            });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Collection and evaluation

/// Feature vectors indexed `[run][system][replicate]`.
type Collected = Vec<Vec<Vec<FeatureVector>>>;

/// Queries every system for all runs at once, so each prompt's prefill and
/// decode tree is shared across runs.
fn gather(
    ctx: &Context,
    systems: &[SimulatedSystem],
    spec: &ExperimentSpec,
    temperature: f32,
    batch_size: usize,
    replicates: Range<u64>,
) -> Result<Collected, HarnessError> {
    let jobs: Vec<SampleJob> = (0..spec.runs)
        .map(|r| SampleJob {
            temperature,
            seed: spec.run_seed(r),
            replicates: replicates.clone(),
        })
        .collect();
    let mut per_system = Vec::with_capacity(systems.len());
    for s in systems {
        per_system.push(collect_jobs(s, &ctx.suite, &jobs, batch_size)?);
    }
    // [system][run] -> [run][system]
    let mut out: Collected = (0..spec.runs)
        .map(|_| Vec::with_capacity(systems.len()))
        .collect();
    for runs in per_system {
        for (r, xs) in runs.into_iter().enumerate() {
            out[r].push(xs);
        }
    }
    Ok(out)
}

fn split_samples(
    systems: &[SimulatedSystem],
    run: &[Vec<FeatureVector>],
    l: usize,
) -> (Vec<LabeledSample>, Vec<Vec<FeatureVector>>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (s, xs) in systems.iter().zip(run) {
        let mut xs = xs.clone();
        let rest = xs.split_off(l.min(xs.len()));
        train.extend(label_samples(&s.config, xs, 0));
        test.push(rest);
    }
    (train, test)
}

/// `(n_correct, n_total)` per axis and per k.
type Scores = BTreeMap<(Axis, usize), (usize, usize)>;

/// Trains one forest per axis and fingerprints every test system by voting
/// over its first `k` test replicates, for each `k` in `ks`.
fn evaluate(
    train: &[LabeledSample],
    test: &[(SystemConfig, &[FeatureVector])],
    axes: &[Axis],
    params: &ForestParams,
    ks: &[usize],
) -> Result<Scores, HarnessError> {
    let k_max = ks.iter().copied().max().unwrap_or(1);
    let mut scores = Scores::new();
    for &axis in axes {
        let model = train_forest(train, axis, params)?;
        let predictions: Vec<Vec<String>> = test
            .par_iter()
            .map(|(_, xs)| {
                xs[..k_max.min(xs.len())]
                    .iter()
                    .map(|x| model.predict(x).map(str::to_string))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<_, _>>()?;
        for &k in ks {
            let mut correct = 0;
            for ((cfg, _), preds) in test.iter().zip(&predictions) {
                if preds.len() < k {
                    return spec_err(format!("need {k} test replicates, have {}", preds.len()));
                }
                let v = tally(preds[..k].to_vec());
                correct += usize::from(v.winner == cfg.label(axis));
            }
            scores.insert((axis, k), (correct, test.len()));
        }
    }
    Ok(scores)
}

fn forest_for(spec: &ExperimentSpec, run: usize) -> ForestParams {
    ForestParams {
        seed: spec.run_seed(run),
        ..spec.forest
    }
}

fn row(
    spec: &ExperimentSpec,
    condition: &str,
    axis: &str,
    score: Option<(usize, usize)>,
    run: usize,
) -> AccuracyRow {
    let (n_correct, n_total) = score.unwrap_or((0, 0));
    AccuracyRow {
        experiment: spec.experiment.name().to_string(),
        model_seed: spec.model_seed,
        condition: condition.to_string(),
        axis: axis.to_string(),
        accuracy: score.map(|(c, t)| if t == 0 { 0.0 } else { c as f64 / t as f64 }),
        n_correct,
        n_total,
        run,
    }
}

fn temp_label(t: f32) -> String {
    format!("T={t}")
}

fn test_view<'a>(
    systems: &[SimulatedSystem],
    test: &'a [Vec<FeatureVector>],
) -> Vec<(SystemConfig, &'a [FeatureVector])> {
    systems
        .iter()
        .zip(test)
        .map(|(s, xs)| (s.config.clone(), xs.as_slice()))
        .collect()
}

// ---------------------------------------------------------------------------
// Experiments

/// Runs `spec`, building its context.
pub fn run(spec: &ExperimentSpec) -> Result<AccuracyReport, HarnessError> {
    let ctx = Context::for_spec(spec)?;
    run_with(&ctx, spec)
}

/// Runs `spec` on an existing context built for the same model and suite.
pub fn run_with(ctx: &Context, spec: &ExperimentSpec) -> Result<AccuracyReport, HarnessError> {
    spec.validate()?;
    if !ctx.matches(spec) {
        return spec_err("context was built for a different model or suite");
    }
    match spec.experiment {
        Experiment::ClosedWorld => run_closed_world(ctx, spec),
        Experiment::TempSweep => run_temperature_sweep(ctx, spec),
        Experiment::KSweep => run_k_sweep(ctx, spec),
        Experiment::Holdout => run_holdout_component(ctx, spec),
        Experiment::BatchGen => run_batch_generalization(ctx, spec),
        Experiment::TempTransfer => run_temperature_transfer(ctx, spec),
        Experiment::Mitigation => run_mitigation(ctx, spec),
    }
}

/// Train and test at each temperature of the spec.
fn sweep(
    ctx: &Context,
    spec: &ExperimentSpec,
) -> Result<(Vec<Condition>, Vec<AccuracyRow>), HarnessError> {
    let (train_reps, test_reps) = spec.replicate_split(spec.k);
    let mut conditions = Vec::new();
    let mut rows = Vec::new();
    for &t in &spec.temperatures {
        let cond = temp_label(t);
        let data = gather(
            ctx,
            &ctx.systems,
            spec,
            t,
            spec.batch_size,
            train_reps.start..test_reps.end,
        )?;
        for (r, run) in data.iter().enumerate() {
            let (train, test) = split_samples(&ctx.systems, run, spec.l);
            let scores = evaluate(
                &train,
                &test_view(&ctx.systems, &test),
                &Axis::ALL,
                &forest_for(spec, r),
                &[spec.k],
            )?;
            for a in Axis::ALL {
                rows.push(row(
                    spec,
                    &cond,
                    a.name(),
                    scores.get(&(a, spec.k)).copied(),
                    r,
                ));
            }
        }
        conditions.push(Condition {
            name: cond,
            x: f64::from(t),
        });
    }
    Ok((conditions, rows))
}

pub fn run_closed_world(
    ctx: &Context,
    spec: &ExperimentSpec,
) -> Result<AccuracyReport, HarnessError> {
    let started = Instant::now();
    let (conditions, rows) = sweep(ctx, spec)?;
    let mut report = AccuracyReport::new(spec, conditions, rows, started);
    if spec.minimize || !spec.growth_steps.is_empty() {
        let data = gather(
            ctx,
            &ctx.systems,
            &single_run(spec),
            0.0,
            spec.batch_size,
            0..(spec.l + spec.k) as u64,
        )?;
        let (train, test) = split_samples(&ctx.systems, &data[0], spec.l);
        let params = forest_for(spec, 0);
        // Minimisation keeps the full suite's separation; without one there
        // is nothing to preserve.
        if spec.minimize && fingerprint::separates(&train, &Axis::ALL) {
            report.minimization = Some(minimization(ctx, &train, &test, &params)?);
        }
        report.growth = growth(ctx, spec, &train, &test, &params)?;
    }
    report.runtime_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

fn single_run(spec: &ExperimentSpec) -> ExperimentSpec {
    ExperimentSpec {
        runs: 1,
        ..spec.clone()
    }
}

fn accuracy_map(scores: &Scores, k: usize) -> BTreeMap<String, f64> {
    Axis::ALL
        .iter()
        .filter_map(|&a| {
            scores
                .get(&(a, k))
                .map(|&(c, t)| (a.name().to_string(), c as f64 / t.max(1) as f64))
        })
        .collect()
}

fn restrict_test(test: &[Vec<FeatureVector>], keep: &[String]) -> Vec<Vec<FeatureVector>> {
    test.iter()
        .map(|xs| {
            let labelled: Vec<LabeledSample> = xs
                .iter()
                .map(|f| LabeledSample {
                    feature: f.clone(),
                    config: SystemConfig::new("-", "-", "-"),
                    replicate_index: 0,
                })
                .collect();
            restrict(&labelled, keep)
                .into_iter()
                .map(|s| s.feature)
                .collect()
        })
        .collect()
}

fn minimization(
    ctx: &Context,
    train: &[LabeledSample],
    test: &[Vec<FeatureVector>],
    params: &ForestParams,
) -> Result<MinimizationReport, HarnessError> {
    let m = minimize_prompt_set(train, &Axis::ALL)?;
    let kept_train = restrict(train, &m.kept);
    let kept_test = restrict_test(test, &m.kept);
    let scores = evaluate(
        &kept_train,
        &test_view(&ctx.systems, &kept_test),
        &Axis::ALL,
        params,
        &[1],
    )?;
    Ok(MinimizationReport {
        full_size: ctx.suite.len(),
        kept: m.kept.clone(),
        composition: m.composition,
        accuracy: accuracy_map(&scores, 1),
        loco_full: leave_one_config_out(train, params)?,
        loco_kept: leave_one_config_out(&kept_train, params)?,
    })
}

/// Accuracy per axis when each config in turn is dropped from training and
/// then fingerprinted from one of its own samples.
///
/// Uses the first sample of each config; callers pass T=0 data, where a
/// config's replicates are identical.
fn leave_one_config_out(
    samples: &[LabeledSample],
    params: &ForestParams,
) -> Result<BTreeMap<String, f64>, HarnessError> {
    let mut seen = std::collections::BTreeSet::new();
    let samples: Vec<LabeledSample> = samples
        .iter()
        .filter(|s| seen.insert(s.config.clone()))
        .cloned()
        .collect();
    let mut configs: Vec<&SystemConfig> = samples.iter().map(|s| &s.config).collect();
    configs.sort();
    configs.dedup();
    let mut out = BTreeMap::new();
    for axis in Axis::ALL {
        let mut correct = 0;
        let mut total = 0;
        for c in &configs {
            let train: Vec<LabeledSample> = samples
                .iter()
                .filter(|s| &s.config != *c)
                .cloned()
                .collect();
            // A label seen only in the dropped config cannot be predicted.
            let probe = samples
                .iter()
                .find(|s| &s.config == *c)
                .expect("config has samples");
            total += 1;
            if !train.iter().any(|s| s.label(axis) == c.label(axis)) {
                continue;
            }
            let model = train_forest(&train, axis, params)?;
            correct += usize::from(model.predict(&probe.feature)? == c.label(axis));
        }
        out.insert(axis.name().to_string(), correct as f64 / total as f64);
    }
    Ok(out)
}

/// T=0 accuracy on growing prefixes of a fixed shuffle of the suite.
fn growth(
    ctx: &Context,
    spec: &ExperimentSpec,
    train: &[LabeledSample],
    test: &[Vec<FeatureVector>],
    params: &ForestParams,
) -> Result<Vec<GrowthPoint>, HarnessError> {
    let mut ids: Vec<String> = ctx.suite.prompts.iter().map(|p| p.id.clone()).collect();
    CounterRng::new(spec.run_seed, GROWTH_STREAM).shuffle(&mut ids);
    let mut steps: Vec<usize> = spec
        .growth_steps
        .iter()
        .map(|&n| n.min(ids.len()))
        .collect();
    if !steps.is_empty() {
        steps.push(ids.len());
    }
    steps.sort_unstable();
    steps.dedup();
    steps
        .into_iter()
        .filter(|&n| n > 0)
        .map(|n| {
            let keep = &ids[..n];
            let tr = restrict(train, keep);
            let te = restrict_test(test, keep);
            let scores = evaluate(&tr, &test_view(&ctx.systems, &te), &Axis::ALL, params, &[1])?;
            Ok(GrowthPoint {
                prompts: n,
                accuracy: accuracy_map(&scores, 1),
            })
        })
        .collect()
}

pub fn run_temperature_sweep(
    ctx: &Context,
    spec: &ExperimentSpec,
) -> Result<AccuracyReport, HarnessError> {
    let started = Instant::now();
    let (conditions, rows) = sweep(ctx, spec)?;
    Ok(AccuracyReport::new(spec, conditions, rows, started))
}

/// Accuracy against the number of voted test replicates, at the first
/// temperature of the spec.
pub fn run_k_sweep(ctx: &Context, spec: &ExperimentSpec) -> Result<AccuracyReport, HarnessError> {
    let started = Instant::now();
    let t = spec.temperatures[0];
    let ks = &spec.k_values;
    let k_max = ks.iter().copied().max().unwrap_or(spec.k);
    let (train_reps, test_reps) = spec.replicate_split(k_max);
    let data = gather(
        ctx,
        &ctx.systems,
        spec,
        t,
        spec.batch_size,
        train_reps.start..test_reps.end,
    )?;
    let mut rows = Vec::new();
    for (r, run) in data.iter().enumerate() {
        let (train, test) = split_samples(&ctx.systems, run, spec.l);
        let scores = evaluate(
            &train,
            &test_view(&ctx.systems, &test),
            &Axis::ALL,
            &forest_for(spec, r),
            ks,
        )?;
        for &k in ks {
            for a in Axis::ALL {
                rows.push(row(
                    spec,
                    &format!("k={k}"),
                    a.name(),
                    scores.get(&(a, k)).copied(),
                    r,
                ));
            }
        }
    }
    let conditions = ks
        .iter()
        .map(|&k| Condition {
            name: format!("k={k}"),
            x: k as f64,
        })
        .collect();
    // Rows are grouped by run; order them by condition like other reports.
    rows.sort_by_key(|r| {
        (
            ks.iter().position(|&k| format!("k={k}") == r.condition),
            r.run,
            axis_rank(&r.axis),
        )
    });
    Ok(AccuracyReport::new(spec, conditions, rows, started))
}

fn axis_rank(a: &str) -> usize {
    Axis::ALL
        .iter()
        .position(|x| x.name() == a)
        .unwrap_or(usize::MAX)
}

/// Withholds each listed realization in turn and fingerprints only the
/// configs that contain it.
pub fn run_holdout_component(
    ctx: &Context,
    spec: &ExperimentSpec,
) -> Result<AccuracyReport, HarnessError> {
    let started = Instant::now();
    let holdout = spec.holdout.as_ref().expect("validated");
    let t = spec.temperatures[0];
    let (train_reps, test_reps) = spec.replicate_split(spec.k);
    let data = gather(
        ctx,
        &ctx.systems,
        spec,
        t,
        spec.batch_size,
        train_reps.start..test_reps.end,
    )?;
    let mut rows = Vec::new();
    let mut conditions = Vec::new();
    for (i, label) in holdout.labels.iter().enumerate() {
        let cond = format!("holdout={label}");
        let withheld = |s: &SimulatedSystem| s.config.label(holdout.axis) == label;
        let axes: Vec<Axis> = Axis::ALL
            .into_iter()
            .filter(|&a| a != holdout.axis)
            .collect();
        for (r, run) in data.iter().enumerate() {
            let (train, test) = split_samples(&ctx.systems, run, spec.l);
            let train: Vec<LabeledSample> = train
                .into_iter()
                .filter(|s| s.config.label(holdout.axis) != label)
                .collect();
            let view: Vec<(SystemConfig, &[FeatureVector])> = ctx
                .systems
                .iter()
                .zip(&test)
                .filter(|(s, _)| withheld(s))
                .map(|(s, xs)| (s.config.clone(), xs.as_slice()))
                .collect();
            let scores = evaluate(&train, &view, &axes, &forest_for(spec, r), &[spec.k])?;
            for a in Axis::ALL {
                let score = (a != holdout.axis).then(|| scores[&(a, spec.k)]);
                rows.push(row(spec, &cond, a.name(), score, r));
            }
        }
        conditions.push(Condition {
            name: cond,
            x: i as f64,
        });
    }
    Ok(AccuracyReport::new(spec, conditions, rows, started))
}

/// Trains on the pooled training batch sizes and tests on `test_batch`,
/// next to a control trained on `test_batch` itself.
pub fn run_batch_generalization(
    ctx: &Context,
    spec: &ExperimentSpec,
) -> Result<AccuracyReport, HarnessError> {
    let started = Instant::now();
    let t = spec.temperatures[0];
    let (train_reps, test_reps) = spec.replicate_split(spec.k);
    let all = train_reps.start..test_reps.end;
    let mut per_batch = BTreeMap::new();
    let mut sizes = spec.train_batches.clone();
    sizes.push(spec.test_batch);
    sizes.sort_unstable();
    sizes.dedup();
    for &b in &sizes {
        per_batch.insert(b, gather(ctx, &ctx.systems, spec, t, b, all.clone())?);
    }
    let pooled: Vec<String> = spec.train_batches.iter().map(|b| b.to_string()).collect();
    let arms = [
        (
            format!("train={},test={}", pooled.join("+"), spec.test_batch),
            spec.train_batches.clone(),
        ),
        (
            format!("train={},test={}", spec.test_batch, spec.test_batch),
            vec![spec.test_batch],
        ),
    ];
    let mut rows = Vec::new();
    for (cond, batches) in &arms {
        for (r, test_run) in per_batch[&spec.test_batch].iter().enumerate() {
            let mut train = Vec::new();
            for b in batches {
                train.extend(split_samples(&ctx.systems, &per_batch[b][r], spec.l).0);
            }
            let (_, test) = split_samples(&ctx.systems, test_run, spec.l);
            let scores = evaluate(
                &train,
                &test_view(&ctx.systems, &test),
                &Axis::ALL,
                &forest_for(spec, r),
                &[spec.k],
            )?;
            for a in Axis::ALL {
                rows.push(row(
                    spec,
                    cond,
                    a.name(),
                    scores.get(&(a, spec.k)).copied(),
                    r,
                ));
            }
        }
    }
    let conditions = arms
        .iter()
        .enumerate()
        .map(|(i, (name, _))| Condition {
            name: name.clone(),
            x: i as f64,
        })
        .collect();
    Ok(AccuracyReport::new(spec, conditions, rows, started))
}

/// Trains at each temperature and tests at every temperature; the diagonal
/// is the matched baseline.
pub fn run_temperature_transfer(
    ctx: &Context,
    spec: &ExperimentSpec,
) -> Result<AccuracyReport, HarnessError> {
    let started = Instant::now();
    let (train_reps, test_reps) = spec.replicate_split(spec.k);
    let temps = &spec.temperatures;
    let mut data = Vec::new();
    for &t in temps {
        data.push(gather(
            ctx,
            &ctx.systems,
            spec,
            t,
            spec.batch_size,
            train_reps.start..test_reps.end,
        )?);
    }
    let cond = |a: f32, b: f32| format!("train={a},test={b}");
    let mut cells: BTreeMap<(usize, usize), Vec<AccuracyRow>> = BTreeMap::new();
    for r in 0..spec.runs {
        let splits: Vec<_> = data
            .iter()
            .map(|d| split_samples(&ctx.systems, &d[r], spec.l))
            .collect();
        for (i, &ta) in temps.iter().enumerate() {
            let params = forest_for(spec, r);
            let models = Axis::ALL
                .iter()
                .map(|&a| train_forest(&splits[i].0, a, &params))
                .collect::<Result<Vec<_>, _>>()?;
            for (j, &tb) in temps.iter().enumerate() {
                let test = test_view(&ctx.systems, &splits[j].1);
                for (a, model) in Axis::ALL.iter().zip(&models) {
                    let correct = test
                        .par_iter()
                        .map(|(cfg, xs)| {
                            let preds = xs[..spec.k]
                                .iter()
                                .map(|x| model.predict(x).map(str::to_string))
                                .collect::<Result<Vec<_>, _>>()?;
                            Ok(usize::from(tally(preds).winner == cfg.label(*a)))
                        })
                        .collect::<Result<Vec<usize>, FingerprintError>>()?
                        .into_iter()
                        .sum();
                    cells.entry((i, j)).or_default().push(row(
                        spec,
                        &cond(ta, tb),
                        a.name(),
                        Some((correct, test.len())),
                        r,
                    ));
                }
            }
        }
    }
    let mut rows = Vec::new();
    let mut conditions = Vec::new();
    for ((i, j), mut cell) in cells {
        cell.sort_by_key(|r| (r.run, axis_rank(&r.axis)));
        rows.extend(cell);
        conditions.push(Condition {
            name: cond(temps[i], temps[j]),
            x: (i * temps.len() + j) as f64,
        });
    }
    let mut report = AccuracyReport::new(spec, conditions, rows, started);
    for &a in temps {
        for &b in temps.iter().filter(|&&b| b != a) {
            for axis in Axis::ALL {
                let (Some(matched), Some(transfer)) = (
                    report.mean(&cond(b, b), axis.name()),
                    report.mean(&cond(a, b), axis.name()),
                ) else {
                    continue;
                };
                report.transfer.push(TransferDelta {
                    train: a,
                    test: b,
                    axis: axis.name().to_string(),
                    matched,
                    transfer,
                    delta: transfer - matched,
                });
            }
        }
    }
    Ok(report)
}

/// Whether a response with this score gives the reference answer. `None`
/// for P4.
fn answered_correctly(expected: &Expected, family: Family, score: f64) -> Option<bool> {
    match (family, expected) {
        (Family::P4, _) => None,
        (_, Expected::YesNo { yes, answer, .. }) => Some((score == 1.0) == (answer == yes)),
        _ => Some(score == 1.0),
    }
}

/// Logit noise on every system, training and target alike. Reports
/// accuracy and utility: the fraction of P1-P3 test responses that give the
/// reference answer.
pub fn run_mitigation(
    ctx: &Context,
    spec: &ExperimentSpec,
) -> Result<AccuracyReport, HarnessError> {
    let started = Instant::now();
    let t = spec.temperatures[0];
    let (train_reps, test_reps) = spec.replicate_split(spec.k);
    let mut rows = Vec::new();
    let mut conditions = Vec::new();
    for &sigma in &spec.mitigation_sigmas {
        let cond = format!("sigma={sigma}");
        let systems: Vec<SimulatedSystem> = ctx
            .systems
            .iter()
            .cloned()
            .map(|s| s.with_mitigation(sigma))
            .collect();
        let data = gather(
            ctx,
            &systems,
            spec,
            t,
            spec.batch_size,
            train_reps.start..test_reps.end,
        )?;
        for (r, run) in data.iter().enumerate() {
            let (train, test) = split_samples(&systems, run, spec.l);
            let scores = evaluate(
                &train,
                &test_view(&systems, &test),
                &Axis::ALL,
                &forest_for(spec, r),
                &[spec.k],
            )?;
            for a in Axis::ALL {
                rows.push(row(
                    spec,
                    &cond,
                    a.name(),
                    scores.get(&(a, spec.k)).copied(),
                    r,
                ));
            }
            let (mut good, mut total) = (0, 0);
            for xs in &test {
                for x in xs {
                    for (p, &v) in ctx.suite.prompts.iter().zip(&x.values) {
                        if let Some(ok) = answered_correctly(&p.expected, p.family, v) {
                            good += usize::from(ok);
                            total += 1;
                        }
                    }
                }
            }
            rows.push(row(spec, &cond, "utility", Some((good, total)), r));
        }
        conditions.push(Condition {
            name: cond,
            x: f64::from(sigma),
        });
    }
    Ok(AccuracyReport::new(spec, conditions, rows, started))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        for e in Experiment::ALL {
            for paper in [false, true] {
                ExperimentSpec::defaults(e, paper).validate().unwrap();
            }
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
        }
        let p = ExperimentSpec::defaults(Experiment::KSweep, true);
        assert_eq!((p.l, p.k, p.suite.counts), (768, 50, SuiteCounts::paper()));
    }

    #[test]
    fn overlay_merges_nested_fields() {
        let spec = ExperimentSpec::load(
            Experiment::TempSweep,
            false,
            Some(r#"{"runs": 3, "suite": {"counts": {"p1": 5, "p2": 5, "p3": 1, "p4": 1}}, "forest": {"n_trees": 7}}"#),
        )
        .unwrap();
        assert_eq!(spec.runs, 3);
        assert_eq!(spec.suite.counts.p1, 5);
        assert_eq!(
            spec.suite.seed,
            ExperimentSpec::defaults(Experiment::TempSweep, false)
                .suite
                .seed
        );
        assert_eq!(spec.forest.n_trees, 7);
        assert_eq!(spec.forest.min_leaf, 1);
        assert_eq!(spec.temperatures, vec![0.0, 0.3, 0.6, 0.9]);
    }

    #[test]
    fn overlay_rejects_bad_specs() {
        let load = |s| ExperimentSpec::load(Experiment::ClosedWorld, false, Some(s));
        assert!(load(r#"{"runz": 3}"#).is_err());
        assert!(load(r#"{"runs": 0}"#).is_err());
        assert!(load(r#"{"temperatures": [0.6]}"#).is_err());
        assert!(load(r#"{"experiment": "k-sweep"}"#).is_err());
        assert!(load("[1]").is_err());
        let holdout = r#"{"holdout": {"axis": "hardware", "labels": ["HW-Z"]}}"#;
        assert!(ExperimentSpec::load(Experiment::Holdout, false, Some(holdout)).is_err());
    }

    #[test]
    fn replicate_sets_are_disjoint() {
        let spec = ExperimentSpec::defaults(Experiment::KSweep, false);
        for k in [1, 20, 50] {
            let (train, test) = spec.replicate_split(k);
            assert_eq!(train.end, test.start);
            assert_eq!(
                (train.end - train.start, test.end - test.start),
                (spec.l as u64, k as u64)
            );
        }
    }

    #[test]
    fn run_seeds_differ() {
        let spec = ExperimentSpec::defaults(Experiment::TempSweep, false);
        let seeds: std::collections::BTreeSet<u64> =
            (0..spec.runs).map(|r| spec.run_seed(r)).collect();
        assert_eq!(seeds.len(), spec.runs);
    }

    fn sample_rows() -> Vec<AccuracyRow> {
        let spec = ExperimentSpec::defaults(Experiment::Holdout, false);
        vec![
            row(&spec, "holdout=HW-A", "engine", Some((7, 10)), 0),
            row(&spec, "holdout=HW-A", "hardware", None, 0),
            row(&spec, "holdout=HW-A", "engine", Some((1, 3)), 1),
            row(&spec, "holdout=HW-A", "hardware", None, 1),
        ]
    }

    #[test]
    fn csv_round_trip() {
        let rows = sample_rows();
        let mut buf = Vec::new();
        write_rows_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text
            .starts_with("experiment,model_seed,condition,axis,accuracy,n_correct,n_total,run\n"));
        assert!(text.contains(",NA,"));
        assert_eq!(read_rows_csv(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn summary_mean_and_std() {
        let rows = sample_rows();
        let conds = vec![Condition {
            name: "holdout=HW-A".into(),
            x: 0.0,
        }];
        let s = summarize(&conds, &rows);
        assert_eq!(s.len(), 2);
        let engine = &s[0];
        let (a, b) = (0.7, 1.0 / 3.0);
        assert!((engine.mean.unwrap() - (a + b) / 2.0).abs() < 1e-12);
        let sd = ((a - b) * (a - b) / 2.0f64).sqrt();
        assert!((engine.std.unwrap() - sd).abs() < 1e-12);
        assert_eq!(s[1].mean, None);
        assert_eq!(s[1].runs, 2);
    }

    #[test]
    fn p2_correctness_follows_reference_answer() {
        let yes = Expected::YesNo {
            yes: 2,
            no: 3,
            answer: 2,
        };
        let no = Expected::YesNo {
            yes: 2,
            no: 3,
            answer: 3,
        };
        assert_eq!(answered_correctly(&yes, Family::P2, 1.0), Some(true));
        assert_eq!(answered_correctly(&no, Family::P2, 1.0), Some(false));
        assert_eq!(answered_correctly(&no, Family::P2, 0.0), Some(true));
        let target = Expected::Target { tokens: vec![9] };
        assert_eq!(answered_correctly(&target, Family::P1, 0.0), Some(false));
        let rep = Expected::Repeat {
            count: 100,
            pattern: vec![40],
        };
        assert_eq!(answered_correctly(&rep, Family::P4, 0.3), None);
    }
}
