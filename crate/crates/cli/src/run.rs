use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CliError;

/// Phases in the order their rows appear in `metrics.csv`.
pub const PHASES: [&str; 4] = ["train", "eval", "infer", "diag"];

/// Layout of one run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("split.json")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn train_log(&self) -> PathBuf {
        self.root.join("train_log.json")
    }

    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions.csv")
    }

    pub fn eval_predictions(&self) -> PathBuf {
        self.root.join("predictions_eval.csv")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.checkpoints().join(format!("{name}.ckpt"))
    }

    pub fn diag(&self) -> PathBuf {
        self.root.join("diag")
    }

    pub fn require(&self, path: &Path, stage: &str) -> Result<(), CliError> {
        if path.exists() {
            Ok(())
        } else {
            Err(CliError::Prerequisite(format!(
                "{} is missing: run {stage} first",
                path.display()
            )))
        }
    }

    pub fn read_metrics(&self) -> Result<Vec<MetricsRow>, CliError> {
        let path = self.metrics();
        if !path.exists() {
            return Ok(Vec::new());
        }
        let mut reader = csv::Reader::from_path(path)?;
        Ok(reader.deserialize().collect::<Result<_, _>>()?)
    }

    /// Replaces every row of `phase` with `rows`, dropping rows of the phases
    /// listed in `invalidate`.
    pub fn write_phase(
        &self,
        phase: &str,
        rows: Vec<MetricsRow>,
        invalidate: &[&str],
    ) -> Result<(), CliError> {
        let mut all: Vec<MetricsRow> = self
            .read_metrics()?
            .into_iter()
            .filter(|r| r.phase != phase && !invalidate.contains(&r.phase.as_str()))
            .collect();
        all.extend(rows);
        all.sort_by_key(|r| {
            PHASES
                .iter()
                .position(|p| *p == r.phase)
                .unwrap_or(PHASES.len())
        });
        let mut writer = csv::Writer::from_path(self.metrics())?;
        for r in &all {
            writer.serialize(r)?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// One line of `metrics.csv`; empty cells mean "not measured in this phase".
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub phase: String,
    pub epoch: usize,
    pub pred_loss: Option<f64>,
    pub recon_loss: Option<f64>,
    pub norm_penalty: Option<f64>,
    pub train_exact: Option<f64>,
    pub heldout_exact: Option<f64>,
    /// Per-component held-out accuracy, `;`-separated.
    pub component_acc: String,
    /// Per-component histogram entropy on training encodings, `;`-separated.
    pub entropy_bits: String,
}

pub fn join_list(values: &[f64]) -> String {
    values
        .iter()
        .map(f64::to_string)
        .collect::<Vec<_>>()
        .join(";")
}

pub fn parse_list(text: &str) -> Result<Vec<f64>, CliError> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(';')
        .map(|v| {
            v.parse::<f64>()
                .map_err(|e| CliError::Io(format!("bad list entry {v:?}: {e}")))
        })
        .collect()
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(path, &s)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_roundtrip() {
        let v = vec![0.1, 2.5e-7, 1.0];
        assert_eq!(parse_list(&join_list(&v)).unwrap(), v);
        assert!(parse_list("").unwrap().is_empty());
    }

    #[test]
    fn phases_replace_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path());
        let row = |phase: &str, epoch| MetricsRow {
            phase: phase.into(),
            epoch,
            ..Default::default()
        };
        run.write_phase("infer", vec![row("infer", 3)], &[])
            .unwrap();
        run.write_phase("train", vec![row("train", 0), row("train", 1)], &[])
            .unwrap();
        run.write_phase("infer", vec![row("infer", 4)], &[])
            .unwrap();
        let phases: Vec<(String, usize)> = run
            .read_metrics()
            .unwrap()
            .into_iter()
            .map(|r| (r.phase, r.epoch))
            .collect();
        assert_eq!(
            phases,
            vec![
                ("train".into(), 0),
                ("train".into(), 1),
                ("infer".into(), 4)
            ]
        );
        run.write_phase("train", vec![row("train", 9)], &["infer"])
            .unwrap();
        assert_eq!(run.read_metrics().unwrap().len(), 1);
    }
}
