use std::path::Path;

use cglab_core::diagnostics::ProbeConfig;
use cglab_core::inference::InferConfig;
use cglab_core::model::{DecoderKind, EntRegConfig, ModelConfig, ReverseInput};
use cglab_core::tasks::{make_split, CompositionalSplit, TaskConfig, TaskInstance};
use cglab_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// One experiment: everything needed to regenerate a run from scratch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub split: SplitSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub diag: DiagSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            holdout_fraction: 0.32,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_h: usize,
    pub width: usize,
    pub head_width: usize,
    pub decoder: DecoderKind,
    pub reverse_input: ReverseInput,
    /// `false` trains with `alpha = lambda = 0` regardless of the values below.
    pub entreg: bool,
    pub alpha: f64,
    pub lambda: f64,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let er = EntRegConfig::default();
        ModelSection {
            d_h: 8,
            width: 64,
            head_width: 32,
            decoder: DecoderKind::Factored,
            reverse_input: ReverseInput::Noised,
            entreg: true,
            alpha: er.alpha,
            lambda: er.lambda,
            init_seed: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagSection {
    pub bin_width: f64,
    pub probe_seed: u64,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub ci_tol: f64,
}

impl Default for DiagSection {
    fn default() -> Self {
        let p = ProbeConfig::default();
        DiagSection {
            bin_width: 0.25,
            probe_seed: p.seed,
            probe_epochs: p.epochs,
            probe_lr: p.lr,
            ci_tol: 1e-9,
        }
    }
}

impl DiagSection {
    pub fn probe(&self) -> ProbeConfig {
        ProbeConfig {
            epochs: self.probe_epochs,
            lr: self.probe_lr,
            seed: self.probe_seed,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(vec![format!("{}: {e}", path.display())]))?;
        Self::parse(&text)
    }

    /// Parses and validates; every unknown key and every invalid value is
    /// reported together.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| CliError::Config(vec![format!("invalid JSON: {e}")]))?;
        let reference =
            serde_json::to_value(ExperimentConfig::default()).expect("default serializes");
        let mut bad = Vec::new();
        unknown_keys(&value, &reference, "", &mut bad);
        if !bad.is_empty() {
            return Err(CliError::Config(bad));
        }
        let config: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| CliError::Config(vec![e.to_string()]))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn entreg(&self) -> EntRegConfig {
        if self.model.entreg {
            EntRegConfig {
                alpha: self.model.alpha,
                lambda: self.model.lambda,
            }
        } else {
            EntRegConfig::OFF
        }
    }

    pub fn model_config(&self, task: &TaskInstance) -> ModelConfig {
        let mut mc = ModelConfig::for_task(task);
        mc.d_h = self.model.d_h;
        mc.width = self.model.width;
        mc.head_width = self.model.head_width;
        mc.decoder = self.model.decoder;
        mc.reverse_input = self.model.reverse_input;
        mc.entreg = self.entreg();
        mc
    }

    /// Short tag used to group runs in comparisons.
    pub fn label(&self) -> String {
        let decoder = match self.model.decoder {
            DecoderKind::Factored => "factored",
            DecoderKind::Entangled => "entangled",
        };
        let er = self.entreg();
        if er.alpha > 0.0 || er.lambda > 0.0 {
            format!("{decoder}+entreg")
        } else {
            decoder.to_string()
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let mut bad = Vec::new();
        let spec = self.task.spec();
        if let Err(e) = &spec {
            bad.push(e.to_string());
        }
        if !(self.task.input_noise >= 0.0 && self.task.input_noise.is_finite()) {
            bad.push(format!(
                "task.input_noise must be finite and >= 0, got {}",
                self.task.input_noise
            ));
        }
        if self.task.samples_per_combo == 0 {
            bad.push("task.samples_per_combo must be positive".into());
        }
        let m = &self.model;
        if m.d_h == 0 {
            bad.push("model.d_h must be positive".into());
        }
        for r in [
            EntRegConfig {
                alpha: m.alpha,
                lambda: m.lambda,
            }
            .validate(),
            self.infer.validate(),
        ] {
            if let Err(e) = r {
                bad.push(e.to_string());
            }
        }
        let d = &self.diag;
        if !(d.bin_width > 0.0 && d.bin_width.is_finite()) {
            bad.push(format!(
                "diag.bin_width must be positive, got {}",
                d.bin_width
            ));
        }
        if !(d.probe_lr > 0.0 && d.probe_lr.is_finite()) {
            bad.push(format!(
                "diag.probe_lr must be positive, got {}",
                d.probe_lr
            ));
        }
        if d.ci_tol.is_nan() || d.ci_tol < 0.0 {
            bad.push(format!("diag.ci_tol must be >= 0, got {}", d.ci_tol));
        }
        if let Ok(spec) = &spec {
            match make_split(spec, self.split.holdout_fraction, self.split.seed) {
                Ok(split) => {
                    let train_size = split.train.len() * self.task.samples_per_combo.max(1);
                    if let Err(e) = self.train.validate(train_size) {
                        bad.push(e.to_string());
                    }
                }
                Err(e) => bad.push(e.to_string()),
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(bad))
        }
    }

    pub fn split(&self, task: &TaskInstance) -> Result<CompositionalSplit, CliError> {
        Ok(make_split(
            &task.spec,
            self.split.holdout_fraction,
            self.split.seed,
        )?)
    }
}

fn unknown_keys(value: &Value, reference: &Value, path: &str, out: &mut Vec<String>) {
    let (Value::Object(user), Value::Object(known)) = (value, reference) else {
        return;
    };
    for (key, v) in user {
        let full = if path.is_empty() {
            key.clone()
        } else {
            format!("{path}.{key}")
        };
        match known.get(key) {
            Some(r) => unknown_keys(v, r, &full, out),
            None => out.push(format!("unknown key {full}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        assert_eq!(
            ExperimentConfig::parse("{}").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn every_unknown_key_is_listed() {
        let err = ExperimentConfig::parse(
            r#"{"task": {"mixng_seed": 3}, "trian": {}, "model": {"d_h": 4, "widht": 2}}"#,
        )
        .unwrap_err();
        let CliError::Config(list) = err else {
            panic!("expected config error")
        };
        assert_eq!(list.len(), 3, "{list:?}");
        assert!(list.iter().any(|m| m.contains("task.mixng_seed")));
        assert!(list.iter().any(|m| m.contains("trian")));
        assert!(list.iter().any(|m| m.contains("model.widht")));
    }

    #[test]
    fn invalid_values_are_collected() {
        let err = ExperimentConfig::parse(
            r#"{"train": {"epochs": 0}, "infer": {"eta": -1.0}, "diag": {"bin_width": 0.0}}"#,
        )
        .unwrap_err();
        let CliError::Config(list) = err else {
            panic!("expected config error")
        };
        assert!(list.len() >= 3, "{list:?}");
    }

    #[test]
    fn roundtrip_through_json() {
        let mut c = ExperimentConfig::default();
        c.model.decoder = DecoderKind::Entangled;
        c.train.epochs = 7;
        assert_eq!(ExperimentConfig::parse(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn labels() {
        let mut c = ExperimentConfig::default();
        assert_eq!(c.label(), "factored+entreg");
        c.model.entreg = false;
        assert_eq!(c.label(), "factored");
        c.model.decoder = DecoderKind::Entangled;
        assert_eq!(c.label(), "entangled");
    }
}
