use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "dataset_size=24",
    "batch=8",
    "epochs=1",
    "k=4",
    "widths=8,8,16,16",
    "proj_hidden=32",
    "proj_out=16",
    "pred_hidden=32",
    "log_every=0",
];

fn scrl(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scrl"))
        .args(args)
        .current_dir(cwd)
        .env("SCRL_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn train_args<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["train", "--out", out, "--seed", "3"];
    for s in TINY {
        v.extend(["--set", s]);
    }
    v.extend(extra);
    v
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let cwd = tempfile::tempdir().unwrap();
    assert_eq!(code(&scrl(cwd.path(), &["--help"])), 0);
    assert_eq!(code(&scrl(cwd.path(), &["train", "--bogus"])), 1);
    assert_eq!(code(&scrl(cwd.path(), &["frobnicate"])), 1);
    let out = scrl(cwd.path(), &["train", "--config", "missing.cfg", "--out", "run"]);
    assert_eq!(code(&out), 1);
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    assert_eq!(code(&scrl(cwd.path(), &["--workers", "0", "gradcheck"])), 1);
    assert_eq!(code(&scrl(cwd.path(), &["train", "--out", "run", "--set", "nonsense=1"])), 1);
    assert_eq!(code(&scrl(cwd.path(), &["eval", "--ckpt", "nothing.bin"])), 1);
}

#[test]
fn gradcheck_passes_and_writes_json() {
    let cwd = tempfile::tempdir().unwrap();
    let out = scrl(cwd.path(), &["gradcheck", "--seed", "4", "--out", "gc"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
    assert!(text.contains("full region loss"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(cwd.path().join("gc/gradcheck.json")).unwrap()).unwrap();
    assert!(json.as_array().is_some_and(|a| !a.is_empty()));
}

#[test]
fn geom_check_writes_annotated_triplets() {
    let cwd = tempfile::tempdir().unwrap();
    let out = scrl(cwd.path(), &["geom-check", "--seed", "1", "--out", "g", "--samples", "2", "--zoom", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for i in 0..2 {
        for part in ["view1", "view2", "source"] {
            let bytes = fs::read(cwd.path().join(format!("g/sample_{i:03}_{part}.ppm"))).unwrap();
            assert!(bytes.starts_with(b"P6"));
        }
    }
}

#[test]
fn train_eval_report_stay_inside_their_output_dirs() {
    let cwd = tempfile::tempdir().unwrap();
    let p = cwd.path();
    let out = scrl(p, &["dataset", "dump", "--out", "data", "--count", "30", "--seed", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let out = scrl(p, &train_args("run", &[]));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(p.join("run/metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next().unwrap(),
        "step,epoch,loss,loss_12,loss_21,lr,tau,boxes_per_image,truncated,skipped,grad_norm,embedding_std"
    );
    assert_eq!(metrics.lines().count(), 1 + 3);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("run/run.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "complete");
    assert_eq!(manifest["seed"], 3);

    let out = scrl(
        p,
        &["eval", "--ckpt", "run/checkpoint.bin", "--data", "data", "--epochs", "2", "--seed", "0", "--out", "run"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(p.join("run/eval_roi.json").exists());

    let out = scrl(p, &["report", "run", "--out", "rep"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["report.md", "report.csv"] {
        assert!(p.join("rep").join(f).exists(), "{f}");
    }

    let mut top: Vec<String> = fs::read_dir(p)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    top.sort();
    assert_eq!(top, ["data", "rep", "run"]);
}

#[test]
fn interrupted_run_resumes_to_identical_outputs() {
    let cwd = tempfile::tempdir().unwrap();
    let p = cwd.path();
    assert_eq!(code(&scrl(p, &train_args("full", &[]))), 0);
    assert_eq!(code(&scrl(p, &train_args("part", &["--max-steps", "1"]))), 0);
    let manifest = fs::read_to_string(p.join("part/run.json")).unwrap();
    assert!(manifest.contains("interrupted"));
    let out = scrl(p, &["train", "--out", "part", "--resume", "part/checkpoint.bin"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["metrics.csv", "checkpoint.bin"] {
        assert_eq!(fs::read(p.join("full").join(f)).unwrap(), fs::read(p.join("part").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn same_seed_gives_byte_identical_runs_across_worker_counts() {
    let cwd = tempfile::tempdir().unwrap();
    let p = cwd.path();
    assert_eq!(code(&scrl(p, &train_args("a", &["--workers", "1"]))), 0);
    assert_eq!(code(&scrl(p, &train_args("b", &["--workers", "3"]))), 0);
    for f in ["metrics.csv", "checkpoint.bin"] {
        assert_eq!(fs::read(p.join("a").join(f)).unwrap(), fs::read(p.join("b").join(f)).unwrap(), "{f}");
    }
}
