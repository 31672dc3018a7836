mod common;

use devfp::fingerprint::{train_forest, ForestModel, ForestParams};
use devfp::systems::Axis;

fn xor_model() -> (ForestModel, Vec<devfp::fingerprint::LabeledSample>) {
    let train = common::xor(1, 200);
    let test = common::xor(2, 200);
    let model = train_forest(&train, Axis::Engine, &ForestParams::default()).unwrap();
    (model, test)
}

#[test]
fn xor_held_out_accuracy() {
    let (model, test) = xor_model();
    let correct = test
        .iter()
        .filter(|s| model.predict(&s.feature).unwrap() == s.config.engine)
        .count();
    let acc = correct as f64 / test.len() as f64;
    println!("xor held-out accuracy {acc}");
    assert!(acc >= 0.95, "{acc}");
}

#[test]
fn xor_predictions_match_golden() {
    let (model, test) = xor_model();
    let preds: Vec<String> = test
        .iter()
        .map(|s| model.predict(&s.feature).unwrap().to_string())
        .collect();
    common::golden("xor_predictions.json", &preds);
}

#[test]
fn training_is_deterministic() {
    let train = common::xor(1, 200);
    let a = train_forest(&train, Axis::Engine, &ForestParams::default()).unwrap();
    let b = train_forest(&train, Axis::Engine, &ForestParams::default()).unwrap();
    assert_eq!(a, b);
    let other = train_forest(
        &train,
        Axis::Engine,
        &ForestParams {
            seed: 9,
            ..Default::default()
        },
    )
    .unwrap();
    assert_ne!(a, other);
}

#[test]
fn single_tree_and_unanimous_votes() {
    let train = common::xor(1, 200);
    let one = train_forest(
        &train,
        Axis::Engine,
        &ForestParams {
            n_trees: 1,
            ..Default::default()
        },
    )
    .unwrap();
    for s in &train {
        let votes = one.votes(&s.feature).unwrap();
        assert_eq!(votes.iter().sum::<usize>(), 1);
    }
    // One cleanly separating feature: every tree agrees.
    let sep: Vec<_> = train
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.feature.values[1] = if s.config.engine == "same" { 1.0 } else { 0.0 };
            s.feature.values[0] = 0.5;
            s
        })
        .collect();
    let full = train_forest(&sep, Axis::Engine, &ForestParams::default()).unwrap();
    for s in &sep {
        let votes = full.votes(&s.feature).unwrap();
        assert_eq!(votes.iter().max(), Some(&100));
        assert_eq!(full.predict(&s.feature).unwrap(), s.config.engine);
    }
}
