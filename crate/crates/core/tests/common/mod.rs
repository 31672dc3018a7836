#![allow(dead_code)]

use devfp::fingerprint::{FeatureVector, LabeledSample};
use devfp::rng::CounterRng;
use devfp::systems::SystemConfig;
use std::path::PathBuf;
use std::sync::Arc;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

/// Points uniform on [-1, 1]^2 labelled by the sign of x*y. The label is
/// carried on the engine axis; the other axes are constant.
pub fn xor(seed: u64, n: usize) -> Vec<LabeledSample> {
    let layout: Arc<[String]> = vec!["x".to_string(), "y".to_string()].into();
    let mut rng = CounterRng::new(seed, 0);
    (0..n)
        .map(|i| {
            let x = rng.next_f64() * 2.0 - 1.0;
            let y = rng.next_f64() * 2.0 - 1.0;
            let label = if x * y > 0.0 { "same" } else { "diff" };
            LabeledSample {
                feature: FeatureVector {
                    values: vec![x, y],
                    layout: Arc::clone(&layout),
                },
                config: SystemConfig::new(label, "-", "-"),
                replicate_index: i as u64,
            }
        })
        .collect()
}

/// Compares `actual` with a frozen JSON fixture. With `DEVFP_BLESS` set the
/// fixture is (re)written instead.
pub fn golden<T>(name: &str, actual: &T)
where
    T: serde::Serialize + serde::de::DeserializeOwned + PartialEq + std::fmt::Debug,
{
    let path = fixture(name);
    if std::env::var_os("DEVFP_BLESS").is_some() {
        std::fs::write(&path, serde_json::to_string_pretty(actual).unwrap() + "\n").unwrap();
        return;
    }
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let expected: T = serde_json::from_str(&text).unwrap();
    assert_eq!(&expected, actual, "golden mismatch for {name}");
}

/// Reads a recorded witness. With `DEVFP_BLESS` set, runs `search` and
/// records its result first.
pub fn witness<T>(name: &str, search: impl FnOnce() -> T) -> T
where
    T: serde::Serialize + serde::de::DeserializeOwned,
{
    let path = fixture(name);
    if std::env::var_os("DEVFP_BLESS").is_some() {
        let found = search();
        std::fs::write(&path, serde_json::to_string_pretty(&found).unwrap() + "\n").unwrap();
        return found;
    }
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).unwrap()
}

/// 256 logits uniform on [-30, 30].
pub fn softmax_logits(seed: u64) -> Vec<f32> {
    let mut rng = CounterRng::new(seed, 0x50f7);
    (0..256).map(|_| rng.uniform_f32(-30.0, 30.0)).collect()
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct SoftmaxWitness {
    pub seed: u64,
    pub first_difference: usize,
}

pub fn softmax_witness() -> SoftmaxWitness {
    use devfp::fpnum::{softmax, AccumulatorSpec, ReductionStrategy, SoftmaxVariant};
    witness("softmax_witness.json", || {
        (0u64..)
            .find_map(|seed| {
                let x = softmax_logits(seed);
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
                let i = (0..a.len()).find(|&i| a[i].to_bits() != b[i].to_bits())?;
                Some(SoftmaxWitness {
                    seed,
                    first_difference: i,
                })
            })
            .unwrap()
    })
}
