use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::{json, Value};

use d2dmoe::checkpoint::load_checkpoint;
use d2dmoe::harness::{compare_methods, run_pipeline, ExperimentSpec, RunOptions};
use d2dmoe::Error;

fn base() -> Value {
    json!({
        "name": "pipe",
        "task": "byte_lm",
        "data": {"size": 20000},
        "model": {"vocab_size": 256, "context_length": 16, "num_layers": 1, "model_dim": 16, "num_heads": 2,
                  "expansion_factor": 4, "ffn_kind": "standard", "activation": "gelu", "task_head": {"kind": "lm"}},
        "seed": 5,
        "stages": [
            {"stage": "train", "train": {"steps": 12, "batch_size": 4, "opt": {"lr": 0.01}}},
            {"stage": "sparsify", "train": {"steps": 6, "batch_size": 4, "opt": {"lr": 0.003}}, "sparsity": {"alpha": 0.1}},
            {"stage": "cluster", "n_experts": 4, "max_iters": 10},
            {"stage": "train_routers", "router": {"steps": 10, "batch_size": 32, "opt": {"lr": 0.01}}, "sample_batches": 2}
        ],
        "grid": {"tau": [0.0, 0.5, 1.0], "k": [1, 4]},
        "eval": {"batch_size": 4, "batches": 2}
    })
}

fn spec(v: &Value) -> ExperimentSpec {
    ExperimentSpec::from_json(&v.to_string()).unwrap()
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn stage_files(out: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(out.join("stages"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".ckpt"))
        .collect();
    v.sort();
    v
}

#[test]
fn same_seed_reproduces_every_checkpoint_and_sweep() {
    let s = spec(&base());
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_pipeline(&s, a.path(), &RunOptions::default()).unwrap();
    run_pipeline(&s, b.path(), &RunOptions::default()).unwrap();
    let files = stage_files(a.path());
    assert_eq!(files.len(), 4);
    for f in &files {
        assert_eq!(
            read(&a.path().join("stages").join(f)),
            read(&b.path().join("stages").join(f)),
            "{f}"
        );
    }
    assert_eq!(
        read(&a.path().join("sweep.csv")),
        read(&b.path().join("sweep.csv"))
    );
}

#[test]
fn resume_reuses_finished_stages_and_reproduces_the_sweep() {
    let s = spec(&base());
    let out = tempfile::tempdir().unwrap();
    run_pipeline(&s, out.path(), &RunOptions::default()).unwrap();
    let sweep = read(&out.path().join("sweep.csv"));
    let last = out.path().join("stages/03_train_routers.ckpt");
    let ckpt = read(&last);
    let first = out.path().join("stages/00_train.ckpt");
    let stamp = fs::metadata(&first).unwrap().modified().unwrap();
    // Drop the last stage; resume must rebuild it bit for bit.
    fs::remove_file(&last).unwrap();
    let res = run_pipeline(&s, out.path(), &RunOptions { resume: true }).unwrap();
    assert_eq!(res.logs.len(), 4);
    assert_eq!(read(&last), ckpt);
    assert_eq!(
        fs::metadata(&first).unwrap().modified().unwrap(),
        stamp,
        "finished stage was rewritten"
    );
    assert_eq!(read(&out.path().join("sweep.csv")), sweep);
}

#[test]
fn resume_reruns_stages_whose_inputs_changed() {
    let out = tempfile::tempdir().unwrap();
    run_pipeline(&spec(&base()), out.path(), &RunOptions::default()).unwrap();
    let before = read(&out.path().join("stages/01_sparsify.ckpt"));
    let mut v = base();
    v["stages"][1]["sparsity"]["alpha"] = json!(0.2);
    let res = run_pipeline(&spec(&v), out.path(), &RunOptions { resume: true }).unwrap();
    assert_eq!(res.logs.len(), 4);
    assert_ne!(read(&out.path().join("stages/01_sparsify.ckpt")), before);
}

#[test]
fn failing_stage_is_named_and_keeps_its_cause() {
    let mut v = base();
    v["stages"][1]["train"]["opt"]["lr"] = json!(1e30);
    let out = tempfile::tempdir().unwrap();
    match run_pipeline(&spec(&v), out.path(), &RunOptions::default()) {
        Err(Error::Stage { stage, source }) => {
            assert_eq!(stage, "sparsify");
            assert!(matches!(*source, Error::Numeric { .. }), "{source}");
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("diverging stage succeeded"),
    }
    // The stage before it completed and stays usable.
    assert!(out.path().join("stages/00_train.ckpt").exists());
    assert!(!out.path().join("stages/01_sparsify.ckpt").exists());
}

#[test]
fn corrupted_stage_checkpoint_fails_closed_on_resume() {
    let s = spec(&base());
    let out = tempfile::tempdir().unwrap();
    run_pipeline(&s, out.path(), &RunOptions::default()).unwrap();
    let p = out.path().join("stages/02_cluster.ckpt");
    let clean = read(&p);
    for pos in [3usize, 40, clean.len() / 2, clean.len() - 1] {
        let mut bytes = clean.clone();
        bytes[pos] ^= 0x10;
        fs::write(&p, &bytes).unwrap();
        assert!(
            matches!(load_checkpoint(&p), Err(Error::Format { .. })),
            "byte {pos}"
        );
        match run_pipeline(&s, out.path(), &RunOptions { resume: true }) {
            Err(Error::Stage { stage, source }) => {
                assert_eq!(stage, "cluster");
                assert!(matches!(*source, Error::Format { .. }), "{source}");
            }
            _ => panic!("corrupt checkpoint at byte {pos} was accepted"),
        }
    }
}

fn with_methods(methods: Value) -> Value {
    let mut v = base();
    v["stages"] = json!([v["stages"][0].clone()]);
    v["methods"] = methods;
    v
}

fn method(name: &str, steps: usize, kind: &str) -> Value {
    json!({"name": name, "stages": [
        {"stage": "sparsify", "train": {"steps": steps, "batch_size": 4, "opt": {"lr": 0.003}}, "sparsity": {"alpha": 0.1}},
        {"stage": "cluster", "n_experts": 4, "max_iters": 10},
        {"stage": "train_routers", "kind": kind, "router": {"steps": 10, "batch_size": 32, "opt": {"lr": 0.01}}, "sample_batches": 2}
    ]})
}

#[test]
fn compare_rejects_unequal_budgets_before_training() {
    let v = with_methods(json!([
        method("a", 6, "regression"),
        method("b", 7, "regression")
    ]));
    let out = tempfile::tempdir().unwrap();
    let Err(Error::Validation(msgs)) =
        compare_methods(&spec(&v), out.path(), &RunOptions::default())
    else {
        panic!("budget mismatch accepted");
    };
    assert!(msgs.iter().any(|m| m.contains("budget")), "{msgs:?}");
    assert!(!out.path().join("base").exists());
}

#[test]
fn identical_methods_give_identical_curves() {
    let v = with_methods(json!([
        method("a", 6, "regression"),
        method("b", 6, "regression"),
        method("m", 6, "baseline")
    ]));
    let out = tempfile::tempdir().unwrap();
    let res = compare_methods(&spec(&v), out.path(), &RunOptions::default()).unwrap();
    assert!(res.budgets.iter().all(|(_, b)| *b == res.budgets[0].1));
    let curve = |name: &str| -> Vec<(f64, f64, f64)> {
        let mut c: Vec<_> = res
            .rows
            .iter()
            .filter(|r| r.method.starts_with(&format!("{name}-")))
            .map(|r| (r.policy_param, r.measured_flops, r.metric))
            .collect();
        c.sort_by(|x, y| x.partial_cmp(y).unwrap());
        c
    };
    assert_eq!(curve("a").len(), 5);
    assert_eq!(curve("a"), curve("b"));
    assert_eq!(curve("m").len(), 5);
    assert!(out.path().join("compare.csv").exists());
    assert!(out.path().join("budgets.json").exists());
}

fn cli(args: &[&str]) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_d2dmoe"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap();
    (
        o.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&o.stderr).into_owned(),
    )
}

#[test]
fn cli_exit_codes_follow_the_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let write = |name: &str, v: &Value| {
        let p = d.join(name);
        fs::write(&p, v.to_string()).unwrap();
        p.to_string_lossy().into_owned()
    };
    let out = d.join("out").to_string_lossy().into_owned();

    let (code, _) = cli(&[
        "--out", &out, "--seed", "1", "gen-data", "--task", "byte_lm", "--size", "5000",
    ]);
    assert_eq!(code, 0);

    let missing = d.join("nope.json").to_string_lossy().into_owned();
    assert_eq!(cli(&["--spec", &missing, "--out", &out, "run"]).0, 1);

    let mut bad = base();
    bad["stages"] = json!([bad["stages"][3].clone(), bad["stages"][0].clone()]);
    let (code, err) = cli(&["--spec", &write("bad.json", &bad), "--out", &out, "run"]);
    assert_eq!(code, 2, "{err}");

    let mut diverge = base();
    diverge["stages"][0]["train"]["opt"]["lr"] = json!(1e30);
    let (code, err) = cli(&["--spec", &write("nan.json", &diverge), "--out", &out, "run"]);
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("train"), "{err}");

    let good = write("good.json", &base());
    let run_out = d.join("run").to_string_lossy().into_owned();
    assert_eq!(cli(&["--spec", &good, "--out", &run_out, "run"]).0, 0);
    let ckpt = d.join("run/stages/03_train_routers.ckpt");
    let mut bytes = read(&ckpt);
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    let corrupt = d.join("corrupt.ckpt");
    fs::write(&corrupt, bytes).unwrap();
    let sweep_out = d.join("sweep").to_string_lossy().into_owned();
    let (code, err) = cli(&[
        "--spec",
        &good,
        "--out",
        &sweep_out,
        "sweep",
        "--input",
        &corrupt.to_string_lossy(),
    ]);
    assert_eq!(code, 4, "{err}");
    let (code, err) = cli(&[
        "--spec",
        &good,
        "--out",
        &sweep_out,
        "sweep",
        "--input",
        &ckpt.to_string_lossy(),
        "--tau",
        "0,1",
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(d.join("sweep/sweep.csv").exists());
}
