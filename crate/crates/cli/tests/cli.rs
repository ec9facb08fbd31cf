use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cglab::commands::median;
use cglab::ExperimentConfig;

fn cglab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cglab"))
        .args(args)
        .env("CGLAB_THREADS", "1")
        .output()
        .unwrap()
}

fn small_config(dir: &Path, name: &str, edit: impl FnOnce(&mut ExperimentConfig)) -> String {
    let mut c = ExperimentConfig::default();
    c.task.cardinalities = vec![3, 3];
    c.task.samples_per_combo = 4;
    c.split.holdout_fraction = 0.25;
    c.model.width = 16;
    c.model.head_width = 8;
    c.model.d_h = 4;
    c.train.epochs = 20;
    c.train.eval_every = 5;
    c.train.batch_size = 8;
    c.infer.steps = 20;
    c.diag.probe_epochs = 20;
    edit(&mut c);
    let path = dir.join(format!("{name}.json"));
    fs::write(&path, c.to_json()).unwrap();
    path.to_str().unwrap().to_string()
}

fn error_line(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|_| panic!("stderr is not one JSON line: {text}"))
}

#[test]
fn stages_before_their_prerequisites_fail_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "c", |_| {});
    let run = dir.path().join("run");
    let run = run.to_str().unwrap();

    let out = cglab(&["train", "--run", run]);
    assert_eq!(out.status.code(), Some(3));
    assert!(error_line(&out)["message"]
        .as_str()
        .unwrap()
        .contains("run gen first"));

    assert!(cglab(&["gen", "--config", &cfg, "--run", run])
        .status
        .success());
    for stage in ["eval", "infer", "diag"] {
        let out = cglab(&[stage, "--run", run]);
        assert_eq!(out.status.code(), Some(3), "{stage}");
        let err = error_line(&out);
        assert_eq!(err["error"], "prerequisite");
        assert!(err["message"].as_str().unwrap().contains("run train first"));
    }
}

#[test]
fn config_errors_list_every_bad_key_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(
        &path,
        r#"{"task": {"cardinalitiez": [2, 2]}, "modle": {}, "train": {"lr": 0.1, "epoch": 3}}"#,
    )
    .unwrap();
    let out = cglab(&[
        "gen",
        "--config",
        path.to_str().unwrap(),
        "--run",
        dir.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_line(&out);
    let problems: Vec<String> = err["problems"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p.as_str().unwrap().to_string())
        .collect();
    assert_eq!(problems.len(), 3, "{problems:?}");
    for key in ["task.cardinalitiez", "modle", "train.epoch"] {
        assert!(
            problems.iter().any(|p| p.contains(key)),
            "{key} missing from {problems:?}"
        );
    }
    assert!(!dir.path().join("r").exists());
}

#[test]
fn gen_is_deterministic_and_guards_its_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "c", |_| {});
    let other = small_config(dir.path(), "d", |c| c.split.seed = 9);
    let run = dir.path().join("run");
    let r = run.to_str().unwrap();
    assert!(cglab(&["gen", "--config", &cfg, "--run", r])
        .status
        .success());
    let first = fs::read(run.join("split.json")).unwrap();
    assert!(cglab(&["gen", "--config", &cfg, "--run", r])
        .status
        .success());
    assert_eq!(first, fs::read(run.join("split.json")).unwrap());

    assert_eq!(
        cglab(&["gen", "--config", &other, "--run", r])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        cglab(&["train", "--config", &other, "--run", r])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn full_pipeline_writes_documented_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "c", |_| {});
    let run = dir.path().join("run");
    let r = run.to_str().unwrap();
    for args in [
        vec!["gen", "--config", cfg.as_str(), "--run", r],
        vec!["train", "--config", cfg.as_str(), "--run", r],
        vec!["eval", "--run", r],
        vec!["infer", "--run", r],
        vec!["diag", "--run", r, "--checkpoint", "epoch_00010"],
    ] {
        let out = cglab(&args);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    for f in [
        "config.json",
        "split.json",
        "manifest.json",
        "metrics.csv",
        "train_log.json",
        "predictions.csv",
        "predictions_eval.csv",
        "checkpoints/final.ckpt",
        "checkpoints/epoch_00000.ckpt",
        "checkpoints/epoch_00020.ckpt",
        "diag/ci_report.json",
        "diag/probe_matrix.csv",
        "diag/probe_predictions.csv",
        "diag/entropy_trajectory.csv",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next().unwrap(),
        "phase,epoch,pred_loss,recon_loss,norm_penalty,train_exact,heldout_exact,component_acc,entropy_bits"
    );
    let phases: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        phases,
        ["train", "train", "train", "train", "train", "eval", "infer", "diag"]
    );

    // Accuracy recounted from the dumped predictions.
    let preds = fs::read_to_string(run.join("predictions.csv")).unwrap();
    let rows: Vec<Vec<&str>> = preds
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    let exact = rows.iter().filter(|r| r[1] == r[2]).count() as f64 / rows.len() as f64;
    let infer_row = metrics.lines().find(|l| l.starts_with("infer")).unwrap();
    assert_eq!(
        infer_row.split(',').nth(6).unwrap().parse::<f64>().unwrap(),
        exact
    );

    // Probe accuracies recounted from the dumped probe predictions.
    let probe_rows = fs::read_to_string(run.join("diag/probe_predictions.csv")).unwrap();
    let matrix = fs::read_to_string(run.join("diag/probe_matrix.csv")).unwrap();
    for line in matrix.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (mut hit, mut n) = (0usize, 0usize);
        for p in probe_rows
            .lines()
            .skip(1)
            .map(|l| l.split(',').collect::<Vec<_>>())
        {
            if p[0] == f[0] && p[1] == f[1] {
                n += 1;
                hit += (p[3] == p[4]) as usize;
            }
        }
        let acc: f64 = f[2].parse().unwrap();
        assert!((acc - hit as f64 / n as f64).abs() <= 1e-12);
    }

    // Entropy trajectory has one point per evaluation epoch.
    let traj = fs::read_to_string(run.join("diag/entropy_trajectory.csv")).unwrap();
    assert_eq!(traj.lines().count(), 1 + 2 * 5);

    // Retraining invalidates downstream rows.
    assert!(cglab(&["train", "--run", r]).status.success());
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.lines().skip(1).all(|l| l.starts_with("train")));
}

#[test]
fn compare_reports_hand_computed_medians() {
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for seed in 0..3u64 {
        let cfg = small_config(dir.path(), &format!("s{seed}"), |c| {
            c.model.init_seed = seed;
            c.train.seed = 10 + seed;
        });
        let run = dir.path().join(format!("run{seed}"));
        let r = run.to_str().unwrap().to_string();
        for stage in ["gen", "train", "eval", "infer"] {
            let mut args = vec![stage, "--run", r.as_str()];
            if stage == "gen" {
                args.extend(["--config", cfg.as_str()]);
            }
            assert!(cglab(&args).status.success());
        }
        runs.push(r);
    }
    let mut args = vec!["compare"];
    for r in &runs {
        args.extend(["--run", r.as_str()]);
    }
    let out = cglab(&args);
    assert!(out.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();

    let last = |run: &str, phase: &str| -> f64 {
        let text = fs::read_to_string(Path::new(run).join("metrics.csv")).unwrap();
        let line = text
            .lines()
            .rfind(|l| l.starts_with(phase))
            .unwrap()
            .to_string();
        line.split(',').nth(6).unwrap().parse().unwrap()
    };
    let mut evals: Vec<f64> = runs.iter().map(|r| last(r, "eval")).collect();
    evals.sort_by(f64::total_cmp);
    let group = &summary["groups"][0];
    assert_eq!(group["label"], "factored+entreg");
    assert_eq!(group["runs"], 3);
    assert_eq!(
        group["median_eval_heldout_exact"].as_f64().unwrap(),
        evals[1]
    );
    let infers: Vec<f64> = runs.iter().map(|r| last(r, "infer")).collect();
    assert_eq!(
        group["median_infer_heldout_exact"].as_f64(),
        median(&infers)
    );
}

#[test]
fn diverging_training_exits_with_code_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "c", |c| c.train.lr = 1e12);
    let run = dir.path().join("run");
    let r = run.to_str().unwrap();
    assert!(cglab(&["gen", "--config", &cfg, "--run", r])
        .status
        .success());
    let out = cglab(&["train", "--run", r]);
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(error_line(&out)["error"], "numeric");
}
