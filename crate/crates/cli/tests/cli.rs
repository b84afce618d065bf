use std::path::Path;
use std::process::{Command, Output};

fn heba(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_heba"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn top_level_help_lists_subcommands_and_exit_codes() {
    let o = heba(&["--help"]);
    assert!(o.status.success());
    let h = stdout(&o);
    for sub in [
        "gen-data",
        "train",
        "eval",
        "ablate",
        "sweep-alpha",
        "gradcheck",
        "audit-hm",
        "report",
    ] {
        assert!(h.contains(sub), "missing {sub}");
    }
    for code in [
        "0  success",
        "2  usage",
        "3  I/O",
        "4  invariant",
        "5  numerical",
    ] {
        assert!(h.contains(code), "missing exit code line {code}");
    }
}

#[test]
fn subcommand_help_lists_every_flag() {
    let cases: &[(&str, &[&str])] = &[
        (
            "gen-data",
            &[
                "--config",
                "--classes",
                "--per-class",
                "--seed",
                "--noise-sigma",
                "--out",
            ],
        ),
        (
            "train",
            &[
                "--config",
                "--dataset",
                "--epochs",
                "--lr",
                "--batch-size",
                "--alpha-base",
                "--alpha-novel",
                "--shots",
                "--negative-ratio",
                "--backbone-seed",
                "--variant",
                "--seed",
                "--out",
            ],
        ),
        ("eval", &["--ckpt", "--split", "--alpha"]),
        (
            "ablate",
            &[
                "--config",
                "--dataset",
                "--epochs",
                "--seeds",
                "--threads",
                "--out",
            ],
        ),
        ("sweep-alpha", &["--ckpt", "--alphas"]),
        ("gradcheck", &["--tol", "--trials", "--seed"]),
        ("audit-hm", &["--tables", "--tol"]),
        ("report", &["--in"]),
    ];
    for (sub, flags) in cases {
        let h = stdout(&heba(&[sub, "--help"]));
        for f in *flags {
            assert!(h.contains(f), "{sub} --help is missing {f}");
        }
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(
        heba(&["eval", "--split", "sideways", "--ckpt", "x"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(heba(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn missing_checkpoint_exits_3() {
    assert_eq!(
        heba(&["eval", "--ckpt", "/nonexistent/ck.json", "--split", "base"])
            .status
            .code(),
        Some(3)
    );
}

#[test]
fn bundled_audit_exits_nonzero_and_names_mismatches() {
    let o = heba(&["audit-hm"]);
    assert_eq!(o.status.code(), Some(4));
    let s = stdout(&o);
    assert!(s.contains("8 of 156 rows"), "{s}");
    assert!(s.contains("UCF101 MaPLe"), "{s}");
}

#[test]
fn audit_of_consistent_table_passes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.csv");
    std::fs::write(
        &p,
        "table,dataset,method,base,novel,hm\nt,d,m,80,60,68.57\n",
    )
    .unwrap();
    assert!(heba(&["audit-hm", "--tables", p.to_str().unwrap()])
        .status
        .success());
}

#[test]
fn gen_train_eval_report_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let run = d.join("run");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let o = heba(&[
        "gen-data",
        "--classes",
        "4",
        "--per-class",
        "20",
        "--seed",
        "3",
        "--out",
        &s(&data),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = heba(&[
        "train",
        "--dataset",
        &s(&data),
        "--epochs",
        "1",
        "--shots",
        "4",
        "--seed",
        "2",
        "--out",
        &s(&run),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("full_seed2: base"));
    let ck = run.join("checkpoints").join("full_seed2.json");
    let o = heba(&[
        "eval",
        "--ckpt",
        &s(&ck),
        "--split",
        "novel",
        "--alpha",
        "0",
    ]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("novel alpha 0 accuracy"));
    let o = heba(&["sweep-alpha", "--ckpt", &s(&ck), "--alphas", "0.05,0.01"]);
    assert_eq!(stdout(&o).lines().count(), 3);
    let o = heba(&["report", "--in", &s(&run)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("full"));
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    assert!(heba(&[
        "gen-data",
        "--classes",
        "4",
        "--per-class",
        "8",
        "--out",
        &s(&data)
    ])
    .status
    .success());
    let cfg = d.join("cfg.json");
    let body = format!(
        r#"{{"dataset": {:?}, "optim": {{"epochs": 0}}, "split": {{"shots": 2}}}}"#,
        s(&data)
    );
    std::fs::write(&cfg, body).unwrap();
    let o = heba(&[
        "train",
        "--config",
        &s(&cfg),
        "--epochs",
        "1",
        "--out",
        &s(&d.join("run")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let results: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run").join("results.json")).unwrap())
            .unwrap();
    assert_eq!(results["config"]["optim"]["epochs"], 1);
    assert_eq!(results["config"]["split"]["shots"], 2);
    // 2 base classes × 2 shots = 4 images, one batch per epoch.
    assert_eq!(results["runs"][0]["steps"], 1);
}

#[test]
fn alpha_zero_matches_untrained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = d.join("data");
    assert!(heba(&[
        "gen-data",
        "--classes",
        "4",
        "--per-class",
        "12",
        "--out",
        &s(&data)
    ])
    .status
    .success());
    let common = ["--dataset", &s(&data), "--shots", "4", "--seed", "5"];
    let mut a = vec!["train", "--epochs", "0", "--out"];
    let untrained = s(&d.join("u"));
    a.push(&untrained);
    a.extend(common);
    assert!(heba(&a).status.success());
    let mut b = vec!["train", "--epochs", "2", "--out"];
    let trained = s(&d.join("t"));
    b.push(&trained);
    b.extend(common);
    assert!(heba(&b).status.success());
    for split in ["base", "novel"] {
        let u = heba(&[
            "eval",
            "--ckpt",
            &format!("{untrained}/checkpoints/full_seed5.json"),
            "--split",
            split,
            "--alpha",
            "0",
        ]);
        let t = heba(&[
            "eval",
            "--ckpt",
            &format!("{trained}/checkpoints/full_seed5.json"),
            "--split",
            split,
            "--alpha",
            "0",
        ]);
        assert_eq!(stdout(&u), stdout(&t));
    }
}
