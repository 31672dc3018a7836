use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand};
use devfp::fingerprint::{self, ForestModel, ForestParams};
use devfp::fpnum::{reduce, trace_demo, AccumulatorSpec, ReductionStrategy};
use devfp::harness::{self, Experiment, ExperimentSpec, SEED_ENV};
use devfp::prompts::{GenParams, PromptSuite, SuiteCounts};
use devfp::systems::{self, Axis, SystemConfig, Zoo};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "devfp",
    version,
    about = "Fingerprint simulated LLM inference systems"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Inspect the system zoo.
    Zoo {
        #[command(subcommand)]
        cmd: ZooCmd,
    },
    /// Generate prompt suites.
    Suite {
        #[command(subcommand)]
        cmd: SuiteCmd,
    },
    /// Query one system with a suite and write labelled feature vectors (CSV).
    Collect(CollectArgs),
    /// Train a forest for one axis from collected data.
    Train(TrainArgs),
    /// Fingerprint a target system with trained forests.
    Fingerprint(FingerprintArgs),
    /// Run an experiment and write CSV, JSON and plot data.
    Exp(ExpArgs),
    /// Numerical demos.
    Demo {
        #[command(subcommand)]
        cmd: DemoCmd,
    },
}

#[derive(Subcommand)]
enum ZooCmd {
    /// List valid system configs.
    List,
}

#[derive(Subcommand)]
enum SuiteCmd {
    Gen(SuiteGenArgs),
}

#[derive(Subcommand)]
enum DemoCmd {
    /// Trace of AᵀB under several summation orders and accumulators.
    Trace {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0.02)]
        a: f32,
        #[arg(long, default_value_t = 0.005)]
        b: f32,
    },
}

#[derive(Args)]
struct ModelArg {
    #[arg(long, default_value_t = 42)]
    model_seed: u64,
}

#[derive(Args)]
struct SuiteGenArgs {
    /// Prompt counts per family as p1,p2,p3,p4.
    #[arg(long, value_parser = parse_counts, default_value = "200,400,60,60")]
    counts: SuiteCounts,
    #[arg(long, env = SEED_ENV, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = devfp::prompts::DEFAULT_DELTA)]
    delta: f64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArg,
}

#[derive(Args)]
struct CollectArgs {
    /// System id, ENGINE/BACKEND/HARDWARE.
    #[arg(long, value_parser = parse_config)]
    config: SystemConfig,
    #[arg(long)]
    suite: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    temp: f32,
    #[arg(long, default_value_t = 32)]
    replicates: usize,
    /// Index of the first replicate, so train and test sets can be disjoint.
    #[arg(long, default_value_t = 0)]
    first_replicate: u64,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, env = SEED_ENV, default_value_t = 2024)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    sigma: f32,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArg,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset CSVs written by `collect`; concatenated.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long, value_parser = parse_axis)]
    axis: Axis,
    #[arg(long, default_value_t = ForestParams::default().n_trees)]
    trees: usize,
    #[arg(long, env = SEED_ENV, default_value_t = ForestParams::default().seed)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FingerprintArgs {
    #[arg(long, value_parser = parse_config)]
    target: SystemConfig,
    #[arg(long)]
    suite: PathBuf,
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// Forest JSON files written by `train`, one per axis.
    #[arg(long, required = true, num_args = 1..)]
    models: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    temp: f32,
    #[arg(long, env = SEED_ENV, default_value_t = 99)]
    seed: u64,
    #[command(flatten)]
    model: ModelArg,
}

#[derive(Args)]
struct ExpArgs {
    #[arg(value_parser = parse_experiment)]
    experiment: Experiment,
    /// JSON object overriding fields of the experiment's defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Paper-scale defaults (l=768, k=50, full suite counts).
    #[arg(long)]
    paper_scale: bool,
}

fn parse_counts(s: &str) -> Result<SuiteCounts, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse().map_err(|_| format!("bad count '{x}'")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [p1, p2, p3, p4] => Ok(SuiteCounts { p1, p2, p3, p4 }),
        _ => Err("expected four counts p1,p2,p3,p4".into()),
    }
}

fn parse_config(s: &str) -> Result<SystemConfig, String> {
    let cfg = SystemConfig::parse(s)
        .ok_or_else(|| format!("expected ENGINE/BACKEND/HARDWARE, got '{s}'"))?;
    if !Zoo::builtin().is_valid(&cfg) {
        return Err(format!("{s} is not a valid config; see `devfp zoo list`"));
    }
    Ok(cfg)
}

fn parse_axis(s: &str) -> Result<Axis, String> {
    Axis::parse(s).ok_or_else(|| format!("unknown axis '{s}'"))
}

fn parse_experiment(s: &str) -> Result<Experiment, String> {
    s.parse()
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Zoo { cmd: ZooCmd::List } => {
            for c in Zoo::builtin().valid_configs() {
                println!("{}", c.id());
            }
        }
        Cmd::Suite {
            cmd: SuiteCmd::Gen(a),
        } => {
            let model = systems::default_model(a.model.model_seed);
            let refs = Zoo::builtin().instantiate_all(&model);
            let params = GenParams {
                delta: a.delta,
                ..GenParams::default()
            };
            let suite = PromptSuite::generate(a.counts, a.seed, &refs, params)?;
            suite.save(&a.out)?;
            let c = suite.composition();
            eprintln!(
                "wrote {} prompts (p1={} p2={} p3={} p4={}) to {}",
                suite.len(),
                c.p1,
                c.p2,
                c.p3,
                c.p4,
                a.out.display()
            );
        }
        Cmd::Collect(a) => {
            let suite = PromptSuite::load(&a.suite)
                .with_context(|| format!("reading {}", a.suite.display()))?;
            let system =
                systems::instantiate(&a.config, a.model.model_seed)?.with_mitigation(a.sigma);
            let job = fingerprint::SampleJob {
                temperature: a.temp,
                seed: a.seed,
                replicates: a.first_replicate..a.first_replicate + a.replicates as u64,
            };
            let xs = fingerprint::collect_jobs(&system, &suite, &[job], a.batch)?.remove(0);
            let samples = fingerprint::label_samples(&a.config, xs, a.first_replicate);
            fingerprint::write_dataset(std::fs::File::create(&a.out)?, &samples)?;
            eprintln!("wrote {} samples to {}", samples.len(), a.out.display());
        }
        Cmd::Train(a) => {
            let mut samples = Vec::new();
            for p in &a.data {
                let f =
                    std::fs::File::open(p).with_context(|| format!("reading {}", p.display()))?;
                samples.extend(fingerprint::read_dataset(f)?);
            }
            let params = ForestParams {
                n_trees: a.trees,
                seed: a.seed,
                ..ForestParams::default()
            };
            let model = fingerprint::train_forest(&samples, a.axis, &params)?;
            std::fs::write(&a.out, model.to_json()?)?;
            eprintln!(
                "trained {} trees on {} samples",
                model.n_trees(),
                samples.len()
            );
        }
        Cmd::Fingerprint(a) => {
            let suite = PromptSuite::load(&a.suite)?;
            let system = systems::instantiate(&a.target, a.model.model_seed)?;
            let models = a
                .models
                .iter()
                .map(|p| Ok(ForestModel::from_json(&std::fs::read_to_string(p)?)?))
                .collect::<Result<Vec<_>>>()?;
            let votes =
                fingerprint::fingerprint_target(&system, &suite, a.k, &models, a.temp, a.seed)?;
            for (axis, v) in votes {
                let n = v
                    .per_sample_predictions
                    .iter()
                    .filter(|p| **p == v.winner)
                    .count();
                println!("{axis}\t{}\t{n}/{}", v.winner, a.k);
            }
        }
        Cmd::Exp(a) => {
            let overlay = a
                .spec
                .as_ref()
                .map(|p| {
                    std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
                })
                .transpose()?;
            let spec = ExperimentSpec::load(a.experiment, a.paper_scale, overlay.as_deref())?;
            let report = harness::run(&spec)?;
            for p in report.write(&a.out)? {
                eprintln!("wrote {}", p.display());
            }
            for s in &report.summary {
                let f = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.3}"));
                println!("{}\t{}\t{}\t±{}", s.condition, s.axis, f(s.mean), f(s.std));
            }
            if let Some(m) = &report.minimization {
                let c = m.composition;
                println!(
                    "minimized: {} of {} prompts (p1={} p2={} p3={} p4={})",
                    m.kept.len(),
                    m.full_size,
                    c.p1,
                    c.p2,
                    c.p3,
                    c.p4
                );
            }
        }
        Cmd::Demo {
            cmd: DemoCmd::Trace { n, a, b },
        } => {
            if n == 0 {
                bail!("n must be positive");
            }
            let exact = f64::from(a) * f64::from(b) * (n * n) as f64;
            println!("tr(AᵀB), {n}x{n}, a={a}, b={b}; f64 reference {exact}");
            let strategies = [
                ("sequential", ReductionStrategy::Sequential),
                ("reversed", ReductionStrategy::Reversed),
                ("pairwise", ReductionStrategy::Pairwise),
                ("blocked-64", ReductionStrategy::Blocked { tile: 64 }),
                ("kahan", ReductionStrategy::Kahan),
            ];
            let accs = [
                ("f32", AccumulatorSpec::F32),
                ("f32+fma", AccumulatorSpec::F32_FMA),
                ("f64", AccumulatorSpec::F64),
            ];
            for (an, acc) in accs {
                for (sn, s) in strategies {
                    let v = trace_demo(n, a, b, s, acc);
                    println!("{an:8} {sn:11} {v:.9e}  bits {:08x}", v.to_bits());
                }
            }
            let tenths = vec![0.1f32; 10_000];
            println!(
                "sum of 10000 x 0.1: sequential {:.6}, pairwise {:.6}",
                reduce(&tenths, ReductionStrategy::Sequential, AccumulatorSpec::F32),
                reduce(&tenths, ReductionStrategy::Pairwise, AccumulatorSpec::F32)
            );
        }
    }
    Ok(())
}
