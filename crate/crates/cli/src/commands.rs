use std::fs;
use std::path::Path;

use cglab_core::diagnostics::{
    ci_check, cross_probe, entropy_trajectory, histogram_entropy, model_joint,
};
use cglab_core::inference::{predict_batch, predicted_combinations, Metrics, PredictionRecord};
use cglab_core::model::{forward_plain, ModelBundle};
use cglab_core::tasks::{CompositionalSplit, TaskInstance, TaskMode};
use cglab_core::training::{build_store, evaluate, train_with, TrainLog};
use serde::Serialize;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::run::{join_list, parse_list, read_json, write_json, write_text, MetricsRow, RunDir};
use crate::CliError;

/// Name of the checkpoint written at the end of training.
pub const FINAL: &str = "final";

/// A generated run: its config copy, regenerated task and persisted split.
pub struct Loaded {
    pub config: ExperimentConfig,
    pub task: TaskInstance,
    pub split: CompositionalSplit,
}

/// Reads the run's config copy and split. A `--config` given again must
/// match the copy.
pub fn load(run: &RunDir, config_arg: Option<&Path>) -> Result<Loaded, CliError> {
    run.require(&run.config(), "gen")?;
    run.require(&run.split(), "gen")?;
    let config = ExperimentConfig::load(&run.config())?;
    if let Some(path) = config_arg {
        if ExperimentConfig::load(path)? != config {
            return Err(CliError::Config(vec![format!(
                "{} differs from the run's config copy {}",
                path.display(),
                run.config().display()
            )]));
        }
    }
    let task = TaskInstance::generate(&config.task)?;
    let split: CompositionalSplit = read_json(&run.split())?;
    split.validate()?;
    if split != config.split(&task)? {
        return Err(CliError::Config(vec![
            "split.json does not match the config".into(),
        ]));
    }
    Ok(Loaded {
        config,
        task,
        split,
    })
}

pub fn cmd_gen(config_path: &Path, run: &RunDir) -> Result<(), CliError> {
    let config = ExperimentConfig::load(config_path)?;
    if run.config().exists() {
        let existing = ExperimentConfig::load(&run.config())?;
        if existing != config {
            return Err(CliError::Config(vec![format!(
                "{} already holds a different config",
                run.root().display()
            )]));
        }
    }
    let task = TaskInstance::generate(&config.task)?;
    let split = config.split(&task)?;
    fs::create_dir_all(run.root())?;
    write_text(&run.config(), &config.to_json())?;
    write_json(&run.split(), &split)?;
    let model = config.model_config(&task);
    write_json(
        &run.manifest(),
        &json!({
            "tool": "cglab",
            "version": env!("CARGO_PKG_VERSION"),
            "label": config.label(),
            "model_digest": model.digest(),
            "seeds": {
                "mixing": config.task.mixing_seed,
                "sample": config.task.sample_seed,
                "split": config.split.seed,
                "init": config.model.init_seed,
                "train": config.train.seed,
                "store": config.train.store_seed,
                "probe": config.diag.probe_seed,
            },
            "train_combinations": split.train.len(),
            "test_combinations": split.test.len(),
        }),
    )?;
    Ok(())
}

fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:05}")
}

pub fn cmd_train(run: &RunDir, config_arg: Option<&Path>) -> Result<TrainLog, CliError> {
    let Loaded {
        config,
        task,
        split,
    } = load(run, config_arg)?;
    let bundle = ModelBundle::init(config.model_config(&task), config.model.init_seed)?;
    if run.checkpoints().exists() {
        fs::remove_dir_all(run.checkpoints())?;
    }
    fs::create_dir_all(run.checkpoints())?;
    let (bundle, log) = train_with(&task, &split, &config.train, bundle, |b, row| {
        fs::write(
            run.checkpoint(&checkpoint_name(row.epoch)),
            b.to_checkpoint(),
        )
        .map_err(|e| cglab_core::Error::Checkpoint(e.to_string()))
    })?;
    write_text(&run.checkpoint(FINAL), &bundle.to_checkpoint())?;
    write_json(&run.train_log(), &log)?;
    let rows = log
        .rows
        .iter()
        .map(|r| MetricsRow {
            phase: "train".into(),
            epoch: r.epoch,
            pred_loss: Some(r.pred_loss),
            recon_loss: Some(r.recon_loss),
            norm_penalty: Some(r.norm_penalty),
            train_exact: Some(r.train_acc),
            heldout_exact: Some(r.heldout_acc),
            component_acc: String::new(),
            entropy_bits: join_list(&r.entropy_bits),
        })
        .collect();
    run.write_phase("train", rows, &["eval", "infer", "diag"])?;
    Ok(log)
}

/// Loads a named checkpoint and the epoch it was taken at.
pub fn load_checkpoint(
    run: &RunDir,
    loaded: &Loaded,
    name: &str,
) -> Result<(ModelBundle, usize), CliError> {
    let path = run.checkpoint(name);
    run.require(&path, "train")?;
    let text = fs::read_to_string(&path)?;
    let bundle = ModelBundle::from_checkpoint(loaded.config.model_config(&loaded.task), &text)?;
    let epoch = if name == FINAL {
        loaded.config.train.epochs
    } else {
        name.strip_prefix("epoch_")
            .and_then(|e| e.parse().ok())
            .ok_or_else(|| CliError::Config(vec![format!("unrecognized checkpoint name {name}")]))?
    };
    Ok((bundle, epoch))
}

fn combo_string(z: &cglab_core::tasks::Combination) -> String {
    z.to_string()
}

/// Plain `g -> f` forward on the held-out samples.
pub fn cmd_eval(
    run: &RunDir,
    config_arg: Option<&Path>,
    checkpoint: &str,
) -> Result<MetricsRow, CliError> {
    let loaded = load(run, config_arg)?;
    let (bundle, epoch) = load_checkpoint(run, &loaded, checkpoint)?;
    let Loaded {
        config,
        task,
        split,
    } = &loaded;
    let train = task.train_samples(split)?;
    let test = task.test_samples(split)?;
    let row = evaluate(&bundle, task, &train, &test, &config.train, epoch)?;

    let inputs: Vec<Vec<f64>> = test.iter().map(|s| s.x.clone()).collect();
    let (pred, _) = forward_plain(&bundle, &inputs)?;
    let predicted = predicted_combinations(task, &pred)?;
    let records: Vec<PredictionRecord> = test
        .iter()
        .zip(predicted)
        .map(|(s, p)| PredictionRecord {
            sample_id: s.id,
            truth: s.combo.clone(),
            predicted: p,
            j_initial: f64::NAN,
            j_final: f64::NAN,
            steps: 0,
        })
        .collect();
    let metrics = Metrics::from_records(&records, task.spec.k());
    let mut w = csv::Writer::from_path(run.eval_predictions())?;
    w.write_record(["sample_id", "true", "predicted"])?;
    for r in &records {
        w.write_record([
            r.sample_id.to_string(),
            combo_string(&r.truth),
            combo_string(&r.predicted),
        ])?;
    }
    w.flush()?;

    let out = MetricsRow {
        phase: "eval".into(),
        epoch,
        pred_loss: Some(row.pred_loss),
        recon_loss: Some(row.recon_loss),
        norm_penalty: Some(row.norm_penalty),
        train_exact: Some(row.train_acc),
        heldout_exact: Some(metrics.exact_match),
        component_acc: join_list(&metrics.component_acc),
        entropy_bits: join_list(&row.entropy_bits),
    };
    run.write_phase("eval", vec![out.clone()], &[])?;
    Ok(out)
}

/// Latent optimization against the reverse decoder, then decode.
pub fn cmd_infer(
    run: &RunDir,
    config_arg: Option<&Path>,
    checkpoint: &str,
) -> Result<Metrics, CliError> {
    let loaded = load(run, config_arg)?;
    let (bundle, epoch) = load_checkpoint(run, &loaded, checkpoint)?;
    let Loaded {
        config,
        task,
        split,
    } = &loaded;
    let store = build_store(
        &bundle,
        task,
        split,
        config.train.store_size,
        config.train.store_seed,
    )?;
    let batch = predict_batch(task, split, &bundle, &store, &config.infer)?;
    let mut w = csv::Writer::from_path(run.predictions())?;
    w.write_record([
        "sample_id",
        "true",
        "predicted",
        "j_initial",
        "j_final",
        "steps",
    ])?;
    for r in &batch.records {
        w.write_record([
            r.sample_id.to_string(),
            combo_string(&r.truth),
            combo_string(&r.predicted),
            r.j_initial.to_string(),
            r.j_final.to_string(),
            r.steps.to_string(),
        ])?;
    }
    w.flush()?;
    let out = MetricsRow {
        phase: "infer".into(),
        epoch,
        heldout_exact: Some(batch.metrics.exact_match),
        component_acc: join_list(&batch.metrics.component_acc),
        ..Default::default()
    };
    run.write_phase("infer", vec![out], &[])?;
    Ok(batch.metrics)
}

#[derive(Clone, Debug, Serialize)]
pub struct ComponentEntropy {
    pub component: usize,
    pub bits: f64,
    /// `log2(V_k)`: a code carrying exactly its own factor.
    pub target_bits: f64,
    pub bin_width: f64,
    pub samples: usize,
}

/// Entropy, conditional-independence and probe reports under `diag/`.
pub fn cmd_diag(run: &RunDir, config_arg: Option<&Path>, checkpoint: &str) -> Result<(), CliError> {
    let loaded = load(run, config_arg)?;
    let (bundle, epoch) = load_checkpoint(run, &loaded, checkpoint)?;
    let Loaded {
        config,
        task,
        split,
    } = &loaded;
    let cards = task.spec.cardinalities();

    let train = task.train_samples(split)?;
    let inputs: Vec<Vec<f64>> = train.iter().map(|s| s.x.clone()).collect();
    let (_, hidden) = forward_plain(&bundle, &inputs)?;
    let entropies = hidden
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let rows: Vec<&[f64]> = (0..h.rows()).map(|r| h.row(r)).collect();
            let e = histogram_entropy(&rows, config.diag.bin_width)?;
            Ok(ComponentEntropy {
                component: i,
                bits: e.bits,
                target_bits: (cards[i] as f64).log2(),
                bin_width: e.bin_width,
                samples: e.samples,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    let ci = if task.mode() == TaskMode::Labels {
        let report = ci_check(&model_joint(&bundle, task)?, config.diag.ci_tol)?;
        serde_json::to_value(report)?
    } else {
        json!(null)
    };
    write_json(
        &run.diag().join("ci_report.json"),
        &json!({
            "checkpoint": checkpoint,
            "epoch": epoch,
            "model_joint": ci,
            "entropy": entropies,
        }),
    )?;

    let probes = cross_probe(&bundle, task, split, &config.diag.probe())?;
    let mut w = csv::Writer::from_path(run.diag().join("probe_matrix.csv"))?;
    w.write_record(["hidden", "factor", "accuracy"])?;
    for (i, row) in probes.accuracy.iter().enumerate() {
        for (j, acc) in row.iter().enumerate() {
            w.write_record([i.to_string(), j.to_string(), acc.to_string()])?;
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(run.diag().join("probe_predictions.csv"))?;
    w.write_record(["hidden", "factor", "sample", "label", "prediction"])?;
    for (i, per_factor) in probes.predictions.iter().enumerate() {
        for (j, preds) in per_factor.iter().enumerate() {
            for (s, (p, l)) in preds.iter().zip(&probes.labels[j]).enumerate() {
                w.write_record([
                    i.to_string(),
                    j.to_string(),
                    s.to_string(),
                    l.to_string(),
                    p.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;

    if run.train_log().exists() {
        let log: TrainLog = read_json(&run.train_log())?;
        let mut w = csv::Writer::from_path(run.diag().join("entropy_trajectory.csv"))?;
        w.write_record(["component", "epoch", "bits", "target_bits"])?;
        for (i, series) in entropy_trajectory(&log).iter().enumerate() {
            for (e, bits) in series {
                w.write_record([
                    i.to_string(),
                    e.to_string(),
                    bits.to_string(),
                    (cards[i] as f64).log2().to_string(),
                ])?;
            }
        }
        w.flush()?;
    }

    let bits: Vec<f64> = entropies.iter().map(|e| e.bits).collect();
    let out = MetricsRow {
        phase: "diag".into(),
        epoch,
        entropy_bits: join_list(&bits),
        ..Default::default()
    };
    run.write_phase("diag", vec![out], &[])?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub run: String,
    pub label: String,
    pub eval_heldout_exact: Option<f64>,
    pub infer_heldout_exact: Option<f64>,
    /// Final training-log entropy per component.
    pub entropy_bits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupSummary {
    pub label: String,
    pub runs: usize,
    pub median_eval_heldout_exact: Option<f64>,
    pub median_infer_heldout_exact: Option<f64>,
    pub median_entropy_bits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub runs: Vec<RunSummary>,
    pub groups: Vec<GroupSummary>,
}

/// Median with the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

pub fn summarize(run: &RunDir) -> Result<RunSummary, CliError> {
    run.require(&run.config(), "gen")?;
    run.require(&run.metrics(), "train")?;
    let config = ExperimentConfig::load(&run.config())?;
    let rows = run.read_metrics()?;
    let last = |phase: &str| rows.iter().rev().find(|r| r.phase == phase);
    let train = last("train")
        .ok_or_else(|| CliError::Prerequisite("no train rows: run train first".into()))?;
    Ok(RunSummary {
        run: run.root().display().to_string(),
        label: config.label(),
        eval_heldout_exact: last("eval").and_then(|r| r.heldout_exact),
        infer_heldout_exact: last("infer").and_then(|r| r.heldout_exact),
        entropy_bits: parse_list(&train.entropy_bits)?,
    })
}

/// Read-only summary over completed runs, grouped by configuration label.
pub fn cmd_compare(runs: &[RunDir]) -> Result<Comparison, CliError> {
    let summaries = runs.iter().map(summarize).collect::<Result<Vec<_>, _>>()?;
    let mut labels: Vec<String> = summaries.iter().map(|s| s.label.clone()).collect();
    labels.sort();
    labels.dedup();
    let groups = labels
        .into_iter()
        .map(|label| {
            let members: Vec<&RunSummary> = summaries.iter().filter(|s| s.label == label).collect();
            let k = members
                .iter()
                .map(|s| s.entropy_bits.len())
                .min()
                .unwrap_or(0);
            GroupSummary {
                runs: members.len(),
                median_eval_heldout_exact: median(
                    &members
                        .iter()
                        .filter_map(|s| s.eval_heldout_exact)
                        .collect::<Vec<_>>(),
                ),
                median_infer_heldout_exact: median(
                    &members
                        .iter()
                        .filter_map(|s| s.infer_heldout_exact)
                        .collect::<Vec<_>>(),
                ),
                median_entropy_bits: (0..k)
                    .filter_map(|i| {
                        median(
                            &members
                                .iter()
                                .map(|s| s.entropy_bits[i])
                                .collect::<Vec<_>>(),
                        )
                    })
                    .collect(),
                label,
            }
        })
        .collect();
    Ok(Comparison {
        runs: summaries,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }
}
