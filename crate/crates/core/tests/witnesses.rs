//! Recorded witnesses and golden transcripts. `DEVFP_BLESS=1` reruns the
//! searches and rewrites the fixtures.

mod common;

use common::{golden, witness};
use devfp::fpnum::{softmax, AccumulatorSpec, ReductionStrategy, SoftmaxVariant};
use devfp::prompts::{gen_p1, gen_p2};
use devfp::rng::CounterRng;
use devfp::systems::{self, query, SystemConfig, Zoo};
use devfp::toylm::{self, ExecPolicy, KernelProfile, SamplerState, Token};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Transcript {
    seed: u64,
    profile: KernelProfile,
    policy: ExecPolicy,
    sampler: SamplerState,
    max_len: usize,
    prompt: Vec<Token>,
    output: Vec<Token>,
}

impl Transcript {
    fn replay(&self) -> Vec<Token> {
        let model = systems::default_model(self.seed);
        toylm::generate(
            &model,
            &self.prompt,
            &self.profile,
            &self.policy,
            &self.sampler,
            self.max_len,
        )
        .unwrap()
    }
}

fn zoo_systems() -> Vec<systems::SimulatedSystem> {
    Zoo::builtin().instantiate_all(&systems::default_model(42))
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct Checksum {
    seed: u64,
    vocab_size: usize,
    d_model: usize,
    checksum: u64,
}

#[test]
fn weights_checksum() {
    let m = toylm::init_model(42, 256, 64);
    golden(
        "weights_checksum.json",
        &Checksum {
            seed: 42,
            vocab_size: 256,
            d_model: 64,
            checksum: m.checksum(),
        },
    );
}

#[test]
fn softmax_variants_diverge_on_witness() {
    let w = common::softmax_witness();
    let x = common::softmax_logits(w.seed);
    let seq = ReductionStrategy::Sequential;
    let a = softmax(
        &x,
        SoftmaxVariant::TwoPassMaxSubtract,
        seq,
        AccumulatorSpec::F32,
    )
    .unwrap();
    let b = softmax(
        &x,
        SoftmaxVariant::StreamingOnePass,
        seq,
        AccumulatorSpec::F32,
    )
    .unwrap();
    assert_ne!(
        a[w.first_difference].to_bits(),
        b[w.first_difference].to_bits()
    );
    assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() <= 1e-5));
    for p in [&a, &b] {
        let total: f64 = p.iter().map(|&v| f64::from(v)).sum();
        assert!((total - 1.0).abs() <= 1e-6);
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ChunkWitness {
    seed: u64,
    prompt: Vec<Token>,
}

fn random_prompt(seed: u64, len: usize) -> Vec<Token> {
    let model = systems::default_model(42);
    let layout = model.layout().unwrap();
    let mut rng = CounterRng::new(seed, 512);
    let mut t = layout.system_prefix();
    while t.len() < len - 1 {
        let r = if rng.below(8) == 0 {
            layout.rare.clone()
        } else {
            layout.filler.clone()
        };
        t.push(r.start + rng.below(r.len()) as Token);
    }
    t.push(toylm::special::RETRIEVE);
    t
}

#[test]
fn chunking_changes_logits_on_witness() {
    let model = systems::default_model(42);
    let p = KernelProfile::reference();
    let whole = ExecPolicy::single_pass();
    let chunked = ExecPolicy {
        chunk_size: Some(64),
        ..whole
    };
    let differs = |t: &[Token]| {
        let a = toylm::prefill(&model, t, &p, &whole).unwrap().1;
        let b = toylm::prefill(&model, t, &p, &chunked).unwrap().1;
        a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits())
    };
    let w = witness("chunk_witness.json", || {
        let seed = (0..).find(|&s| differs(&random_prompt(s, 512))).unwrap();
        ChunkWitness {
            seed,
            prompt: random_prompt(seed, 512),
        }
    });
    assert_eq!(w.prompt.len(), 512);
    assert_eq!(w.prompt, random_prompt(w.seed, 512));
    assert!(differs(&w.prompt));
}

#[test]
fn sampled_transcript_is_stable() {
    let t = witness("transcript_t09.json", || {
        let s = &zoo_systems()[0];
        let prompt = random_prompt(3, 40);
        let sampler = SamplerState::new(0.9, 1234, 5);
        let mut t = Transcript {
            seed: 42,
            profile: s.profile,
            policy: s.policy,
            sampler,
            max_len: 8,
            prompt,
            output: Vec::new(),
        };
        t.output = t.replay();
        t
    });
    assert_eq!(t.replay(), t.output);
    assert_eq!(t.replay(), t.replay());
}

#[derive(Debug, Serialize, Deserialize)]
struct ReductionWitness {
    a: Transcript,
    b: Transcript,
}

#[test]
fn reduction_order_changes_greedy_output() {
    let w = witness("reduction_witness.json", || {
        let systems = zoo_systems();
        let reference = &systems[0];
        let a_profile = reference.profile;
        let b_profile = KernelProfile {
            attention_reduction: ReductionStrategy::Pairwise,
            ..a_profile
        };
        assert_ne!(a_profile.attention_reduction, b_profile.attention_reduction);
        let prompts = gen_p1(64, 11, std::slice::from_ref(reference)).unwrap();
        let transcript = |profile, prompt: &devfp::prompts::Prompt| {
            let mut t = Transcript {
                seed: 42,
                profile,
                policy: reference.policy,
                sampler: SamplerState::greedy(),
                max_len: prompt.max_len,
                prompt: prompt.tokens.clone(),
                output: Vec::new(),
            };
            t.output = t.replay();
            t
        };
        prompts
            .iter()
            .map(|p| ReductionWitness {
                a: transcript(a_profile, p),
                b: transcript(b_profile, p),
            })
            .find(|w| w.a.output != w.b.output)
            .expect("no prompt separates the two reduction orders")
    });
    assert_eq!(w.a.prompt, w.b.prompt);
    let only_reduction = KernelProfile {
        attention_reduction: w.a.profile.attention_reduction,
        linear_reduction: w.a.profile.linear_reduction,
        ..w.b.profile
    };
    assert_eq!(only_reduction, w.a.profile);
    assert_eq!(w.a.replay(), w.a.output);
    assert_eq!(w.b.replay(), w.b.output);
    assert_ne!(w.a.output, w.b.output);

    // Cumulative count of bitwise logit differences never decreases.
    let model = systems::default_model(42);
    let run = |t: &Transcript| {
        toylm::generate_detailed(
            &model, &t.prompt, &t.profile, &t.policy, &t.sampler, t.max_len,
        )
        .unwrap()
    };
    let (ga, gb) = (run(&w.a), run(&w.b));
    let counts: Vec<usize> = ga
        .step_logits
        .iter()
        .zip(&gb.step_logits)
        .scan(0, |total, (x, y)| {
            *total += x
                .iter()
                .zip(y)
                .filter(|(u, v)| u.to_bits() != v.to_bits())
                .count();
            Some(*total)
        })
        .collect();
    assert!(counts.windows(2).all(|c| c[0] <= c[1]));
    assert!(counts.last().is_some_and(|&c| c > 0));
}

#[derive(Debug, Serialize, Deserialize)]
struct BatchWitness {
    config: SystemConfig,
    prompt: devfp::prompts::Prompt,
    small: Vec<Token>,
    large: Vec<Token>,
}

#[test]
fn batch_size_changes_response_on_witness() {
    let w = witness("batch_witness.json", || {
        let systems = zoo_systems();
        let s = &systems[0];
        let prompts = gen_p2(64, 13, std::slice::from_ref(s)).unwrap();
        prompts
            .into_iter()
            .find_map(|p| {
                let small = query(s, &p, 0.0, 0, 32).unwrap().tokens;
                let large = query(s, &p, 0.0, 0, 256).unwrap().tokens;
                (small != large).then(|| BatchWitness {
                    config: s.config.clone(),
                    prompt: p,
                    small,
                    large,
                })
            })
            .expect("no batch-sensitive prompt")
    });
    let s = systems::instantiate(&w.config, 42).unwrap();
    assert_eq!(query(&s, &w.prompt, 0.0, 0, 32).unwrap().tokens, w.small);
    assert_eq!(query(&s, &w.prompt, 0.0, 0, 256).unwrap().tokens, w.large);
    assert_ne!(w.small, w.large);
}
