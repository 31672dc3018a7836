//! Prompt generators against the built-in zoo.

use devfp::prompts::{
    self, gen_p1, gen_p2, gen_p3, gen_p4, generate_family, Expected, Family, GenParams, Prompt,
    PromptError, PromptSuite, Response, SuiteCounts, DEFAULT_DELTA, MIN_P3_LEN, REPEAT_COUNT,
};
use devfp::systems::{default_model, query, SimulatedSystem, Zoo};
use devfp::toylm::{self, special, CachePolicy, Provenance};
use proptest::prelude::*;
use std::sync::OnceLock;

fn zoo() -> &'static [SimulatedSystem] {
    static SYSTEMS: OnceLock<Vec<SimulatedSystem>> = OnceLock::new();
    SYSTEMS.get_or_init(|| Zoo::builtin().instantiate_all(&default_model(42)))
}

fn reference_of<'a>(p: &Prompt) -> &'a SimulatedSystem {
    let id = p.reference.as_deref().unwrap();
    zoo().iter().find(|s| s.config.id() == id).unwrap()
}

#[test]
fn generators_are_deterministic() {
    let refs = &zoo()[..3];
    assert_eq!(gen_p1(6, 9, refs).unwrap(), gen_p1(6, 9, refs).unwrap());
    assert_eq!(gen_p2(6, 9, refs).unwrap(), gen_p2(6, 9, refs).unwrap());
    assert_eq!(gen_p4(4, 9, refs).unwrap(), gen_p4(4, 9, refs).unwrap());
    assert_ne!(gen_p1(6, 9, refs).unwrap(), gen_p1(6, 10, refs).unwrap());
}

#[test]
fn near_tie_families_respect_delta() {
    let refs = zoo();
    for ps in [
        gen_p1(20, 1, refs).unwrap(),
        gen_p2(20, 1, refs).unwrap(),
        gen_p3(6, 1, refs).unwrap(),
    ] {
        for p in &ps {
            let m = p.margin.unwrap();
            assert!(m.abs() <= DEFAULT_DELTA, "{} margin {m}", p.id);
        }
    }
}

#[test]
fn p1_embeds_one_rare_token() {
    let model = default_model(42);
    let layout = model.layout().unwrap();
    for p in gen_p1(20, 2, zoo()).unwrap() {
        let Expected::Target { tokens } = &p.expected else {
            panic!()
        };
        assert_eq!(tokens.len(), 1);
        assert!(layout.rare.contains(&tokens[0]));
        assert_eq!(p.tokens.iter().filter(|&&t| t == tokens[0]).count(), 1);
        assert_eq!(*p.tokens.last().unwrap(), special::RETRIEVE);
        assert!(!p.tokens.contains(&special::STOP));
    }
}

#[test]
fn p2_answers_yes_or_no_on_reference() {
    for p in gen_p2(20, 3, zoo()).unwrap() {
        let Expected::YesNo { yes, no, answer } = p.expected else {
            panic!()
        };
        let out = query(reference_of(&p), &p, 0.0, 0, 1).unwrap().tokens;
        assert_eq!(out.len(), 1);
        assert!(out[0] == yes || out[0] == no);
        assert_eq!(out[0], answer);
    }
}

#[test]
fn p3_is_long_retrievable_and_chunked() {
    let ps = gen_p3(8, 4, zoo()).unwrap();
    let lengths: std::collections::BTreeSet<usize> = ps.iter().map(|p| p.tokens.len()).collect();
    assert!(lengths.len() > 1, "lengths should vary");
    let mut correct = 0;
    for p in &ps {
        assert!(p.tokens.len() >= MIN_P3_LEN);
        let r = query(reference_of(p), p, 0.0, 0, 1).unwrap();
        correct += usize::from(prompts::is_correct(p, &r) == Some(true));
        for s in zoo().iter().filter(|s| s.policy.chunk_size.is_some()) {
            let (cache, _) = toylm::prefill(&s.model, &p.tokens, &s.profile, &s.policy).unwrap();
            assert!(cache
                .provenance()
                .iter()
                .any(|t| matches!(t, Provenance::ChunkedPrefill(_))));
        }
    }
    assert!(correct as f64 >= 0.95 * ps.len() as f64);
}

#[test]
fn p4_repeats_within_bounds_and_reuses_prefix() {
    let ps = gen_p4(6, 5, zoo()).unwrap();
    for p in &ps {
        let Expected::Repeat { count, pattern } = &p.expected else {
            panic!()
        };
        assert_eq!(*count, REPEAT_COUNT);
        assert!(!pattern.contains(&special::STOP));
        let r = query(reference_of(p), p, 0.0, 0, 1).unwrap();
        let s = prompts::score(p, &r);
        assert!(s > 0.0 && s <= 1.0);
        for sys in zoo()
            .iter()
            .filter(|s| s.policy.cache_policy == CachePolicy::PrefixReuse)
        {
            let (cache, _) =
                toylm::prefill(&sys.model, &p.tokens, &sys.profile, &sys.policy).unwrap();
            assert!(cache.provenance().contains(&Provenance::Reused));
        }
    }
}

#[test]
fn generator_errors() {
    let refs = &zoo()[..1];
    assert!(matches!(gen_p1(0, 1, refs), Err(PromptError::ZeroCount)));
    assert!(matches!(gen_p1(1, 1, &[]), Err(PromptError::NoReference)));
    let starved = GenParams {
        delta: DEFAULT_DELTA,
        budget_factor: 1,
    };
    // A candidate budget of one per prompt runs out long before 200 are kept.
    match generate_family(Family::P4, 200, 1, refs, starved) {
        Err(PromptError::InsufficientCandidates {
            requested: 200,
            tried: 200,
            ..
        }) => {}
        other => panic!("expected budget exhaustion, got {other:?}"),
    }
}

#[test]
fn suite_round_trips_through_jsonl() {
    let counts = SuiteCounts {
        p1: 3,
        p2: 3,
        p3: 1,
        p4: 2,
    };
    let suite = PromptSuite::generate(counts, 8, &zoo()[..2], GenParams::default()).unwrap();
    assert_eq!(suite.composition(), counts);
    let mut buf = Vec::new();
    suite.write_jsonl(&mut buf).unwrap();
    assert_eq!(PromptSuite::read_jsonl(buf.as_slice()).unwrap(), suite);
}

proptest! {
    #[test]
    fn scores_stay_in_unit_interval(out in prop::collection::vec(0u32..256, 0..400), family in 0usize..4) {
        static SUITE: OnceLock<Vec<Prompt>> = OnceLock::new();
        let ps = SUITE.get_or_init(|| {
            let counts = SuiteCounts { p1: 1, p2: 1, p3: 1, p4: 1 };
            PromptSuite::generate(counts, 3, &zoo()[..1], GenParams::default()).unwrap().prompts
        });
        let p = &ps[family];
        let r = Response { text: String::new(), tokens: out };
        let s = prompts::score(p, &r);
        prop_assert!((0.0..=1.0).contains(&s));
        if p.family != Family::P4 {
            prop_assert!(s == 0.0 || s == 1.0);
        }
    }
}
