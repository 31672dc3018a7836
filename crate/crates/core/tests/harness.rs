//! End-to-end experiment runs on a small suite.

use devfp::harness::{
    read_rows_csv, run_with, AccuracyReport, Context, Experiment, ExperimentSpec,
};
use std::sync::OnceLock;

const SMALL: &str = r#"{
    "suite": {"counts": {"p1": 10, "p2": 20, "p3": 2, "p4": 2}},
    "runs": 2, "l": 4, "k": 3,
    "forest": {"n_trees": 15},
    "growth_steps": [4, 16],
    "k_values": [1, 3],
    "train_batches": [32, 64],
    "mitigation_sigmas": [0.0, 1.0]
}"#;

fn spec(exp: Experiment, extra: &str) -> ExperimentSpec {
    let mut s = ExperimentSpec::load(exp, false, Some(SMALL)).unwrap();
    if !extra.is_empty() {
        let mut v = serde_json::to_value(&s).unwrap();
        let patch: serde_json::Value = serde_json::from_str(extra).unwrap();
        for (k, x) in patch.as_object().unwrap() {
            v[k] = x.clone();
        }
        s = serde_json::from_value(v).unwrap();
    }
    s
}

fn ctx() -> &'static Context {
    static CTX: OnceLock<Context> = OnceLock::new();
    CTX.get_or_init(|| Context::for_spec(&spec(Experiment::ClosedWorld, "")).unwrap())
}

fn run(exp: Experiment, extra: &str) -> AccuracyReport {
    run_with(ctx(), &spec(exp, extra)).unwrap()
}

fn accuracies(r: &AccuracyReport, cond: &str) -> Vec<Option<f64>> {
    r.rows
        .iter()
        .filter(|x| x.condition == cond)
        .map(|x| x.accuracy)
        .collect()
}

#[test]
fn report_shapes() {
    let cw = run(Experiment::ClosedWorld, "");
    assert_eq!(cw.rows.len(), 2 * 3);
    // This suite leaves some configs indistinguishable, so nothing is minimised.
    assert!(cw.summary.iter().any(|s| s.mean < Some(1.0)));
    assert!(cw.minimization.is_none());
    assert_eq!(
        cw.growth.iter().map(|g| g.prompts).collect::<Vec<_>>(),
        vec![4, 16, 34]
    );

    let ks = run(Experiment::KSweep, "");
    let conds: Vec<&str> = ks.conditions.iter().map(|c| c.name.as_str()).collect();
    assert_eq!(conds, ["k=1", "k=3"]);
    assert_eq!(ks.rows.len(), 2 * 2 * 3);
    assert!(ks.rows.iter().all(|r| r.n_total == 30));

    let ho = run(
        Experiment::Holdout,
        r#"{"holdout": {"axis": "hardware", "labels": ["HW-B"]}}"#,
    );
    assert_eq!(ho.conditions.len(), 1);
    for r in &ho.rows {
        if r.axis == "hardware" {
            assert_eq!((r.accuracy, r.n_total), (None, 0));
        } else {
            // Configs on HW-B only.
            assert_eq!(r.n_total, 10);
        }
    }
    assert_eq!(ho.mean("holdout=HW-B", "hardware"), None);

    let bg = run(Experiment::BatchGen, "");
    let conds: Vec<&str> = bg.conditions.iter().map(|c| c.name.as_str()).collect();
    assert_eq!(conds, ["train=32+64,test=256", "train=256,test=256"]);

    let mi = run(Experiment::Mitigation, "");
    assert_eq!(
        mi.rows.iter().filter(|r| r.axis == "utility").count(),
        2 * 2
    );
    assert!(mi
        .rows
        .iter()
        .all(|r| r.accuracy.is_some_and(|a| (0.0..=1.0).contains(&a))));
}

#[test]
fn transfer_diagonal_matches_sweep() {
    let temps = r#"{"temperatures": [0.3, 0.9]}"#;
    let tt = run(Experiment::TempTransfer, temps);
    assert_eq!(tt.conditions.len(), 4);
    assert_eq!(tt.transfer.len(), 2 * 3);
    let sweep = run(Experiment::TempSweep, temps);
    for t in ["0.3", "0.9"] {
        assert_eq!(
            accuracies(&tt, &format!("train={t},test={t}")),
            accuracies(&sweep, &format!("T={t}"))
        );
    }
    for d in &tt.transfer {
        assert_eq!(d.delta, d.transfer - d.matched);
        assert_ne!(d.train, d.test);
    }
}

#[test]
fn zero_sigma_matches_closed_world() {
    let mi = run(Experiment::Mitigation, r#"{"mitigation_sigmas": [0.0]}"#);
    let cw = run(
        Experiment::ClosedWorld,
        r#"{"minimize": false, "growth_steps": []}"#,
    );
    let fingerprint_rows: Vec<_> = mi
        .rows
        .iter()
        .filter(|r| r.axis != "utility")
        .map(|r| (r.axis.clone(), r.run, r.accuracy))
        .collect();
    let closed: Vec<_> = cw
        .rows
        .iter()
        .map(|r| (r.axis.clone(), r.run, r.accuracy))
        .collect();
    assert_eq!(fingerprint_rows, closed);
}

#[test]
fn outputs_are_written_and_parse_back() {
    let r = run(Experiment::KSweep, "");
    let dir = tempfile::tempdir().unwrap();
    let files = r.write(dir.path()).unwrap();
    assert_eq!(files.len(), 3);
    let csv = std::fs::read(dir.path().join("k-sweep.csv")).unwrap();
    assert_eq!(read_rows_csv(csv.as_slice()).unwrap(), r.rows);
    let json: AccuracyReport =
        serde_json::from_slice(&std::fs::read(dir.path().join("k-sweep.json")).unwrap()).unwrap();
    assert_eq!(json.rows, r.rows);
    let dat = std::fs::read_to_string(dir.path().join("plots/k-sweep.dat")).unwrap();
    assert_eq!(dat.lines().filter(|l| !l.starts_with('#')).count(), 2);
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let s = spec(
        Experiment::Mitigation,
        r#"{"temperatures": [0.6], "mitigation_sigmas": [0.5]}"#,
    );
    let csv = |threads| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| run_with(ctx(), &s).unwrap().csv_string().unwrap())
    };
    let one = csv(1);
    assert_eq!(one, csv(3));
    assert_eq!(one, csv(1));
}

#[test]
fn mismatched_context_is_rejected() {
    let other =
        ExperimentSpec::load(Experiment::KSweep, false, Some(r#"{"model_seed": 1}"#)).unwrap();
    assert!(run_with(ctx(), &other).is_err());
}
