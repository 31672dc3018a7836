//! Drives the `devfp` binary end to end on a small suite.

use std::path::Path;
use std::process::{Command, Output};

fn devfp(args: &[&str], dir: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_devfp"))
        .args(args)
        .current_dir(dir)
        .env_remove("DEVFP_SEED")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "devfp {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let ids = stdout(&devfp(&["zoo", "list"], d));
    assert_eq!(ids.lines().count(), 30);

    devfp(
        &[
            "suite",
            "gen",
            "--counts",
            "10,20,0,0",
            "--seed",
            "3",
            "--out",
            "suite.jsonl",
        ],
        d,
    );
    let configs = ["ENG-A/BK-A/HW-A", "ENG-C/BK-D/HW-B", "ENG-D/BK-E/HW-C"];
    let mut data = Vec::new();
    for (i, c) in configs.iter().enumerate() {
        let f = format!("d{i}.csv");
        devfp(
            &[
                "collect",
                "--config",
                c,
                "--suite",
                "suite.jsonl",
                "--replicates",
                "2",
                "--out",
                &f,
            ],
            d,
        );
        data.push(f);
    }
    let mut args = vec![
        "train",
        "--axis",
        "engine",
        "--out",
        "engine.json",
        "--data",
    ];
    args.extend(data.iter().map(String::as_str));
    devfp(&args, d);
    let fp = stdout(&devfp(
        &[
            "fingerprint",
            "--target",
            configs[1],
            "--suite",
            "suite.jsonl",
            "--k",
            "3",
            "--models",
            "engine.json",
        ],
        d,
    ));
    assert_eq!(fp.trim(), "engine\tENG-C\t3/3");

    std::fs::write(
        d.join("spec.json"),
        r#"{"suite": {"counts": {"p1": 10, "p2": 20, "p3": 0, "p4": 0}}, "runs": 1, "k_values": [1, 2], "l": 2, "forest": {"n_trees": 5}}"#,
    )
    .unwrap();
    let exp = stdout(&devfp(
        &["exp", "k-sweep", "--spec", "spec.json", "--out", "out"],
        d,
    ));
    assert!(exp.starts_with("k=1\tengine\t"), "{exp}");
    for f in [
        "out/k-sweep.csv",
        "out/k-sweep.json",
        "out/plots/k-sweep.dat",
    ] {
        assert!(d.join(f).exists(), "{f}");
    }
}

#[test]
fn trace_demo_and_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let trace = stdout(&devfp(&["demo", "trace"], tmp.path()));
    assert!(
        trace.contains("f64      sequential  1.000000000e0"),
        "{trace}"
    );
    let bad = Command::new(env!("CARGO_BIN_EXE_devfp"))
        .args([
            "collect",
            "--config",
            "ENG-C/BK-A/HW-A",
            "--suite",
            "x",
            "--out",
            "y",
        ])
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("not a valid config"));
    let spec = tmp.path().join("s.json");
    std::fs::write(&spec, r#"{"runz": 1}"#).unwrap();
    let bad = Command::new(env!("CARGO_BIN_EXE_devfp"))
        .args([
            "exp",
            "holdout",
            "--spec",
            spec.to_str().unwrap(),
            "--out",
            "o",
        ])
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert!(!bad.status.success());
}
