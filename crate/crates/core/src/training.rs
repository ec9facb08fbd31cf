//! Joint SGD training of `g`, `h` and `f`, and the exemplar store.

use serde::{Deserialize, Serialize};

use crate::autodiff::{derive_seed, sgd_step, Graph, RngState, Tensor, Var};
use crate::diagnostics::histogram_entropy;
use crate::error::{Error, Result};
use crate::inference::{exact_match_accuracy, predicted_combinations};
use crate::model::{forward_plain, Decoded, ModelBundle, ReverseInput};
use crate::tasks::{Combination, CompositionalSplit, Sample, Target, TaskInstance};

/// Upper bound on optimizer steps per run.
pub const MAX_TOTAL_STEPS: usize = 1_000_000;

const NOISE_STREAM: u64 = 0x4E015E;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// 0 freezes the parameters.
    pub lr: f64,
    /// Weight of the reconstruction loss.
    pub beta: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub entropy_bin_width: f64,
    /// Exemplars kept for inference, `M`.
    pub store_size: usize,
    pub store_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 32,
            lr: 0.05,
            beta: 1.0,
            seed: 5,
            eval_every: 10,
            entropy_bin_width: 0.25,
            store_size: 256,
            store_seed: 6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, train_size: usize) -> Result<()> {
        let mut bad = Vec::new();
        if self.epochs == 0 {
            bad.push("epochs must be positive".to_string());
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be positive".to_string());
        }
        if self.eval_every == 0 {
            bad.push("eval_every must be positive".to_string());
        }
        if self.store_size == 0 {
            bad.push("store_size must be positive".to_string());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            bad.push(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            bad.push(format!("beta must be finite and >= 0, got {}", self.beta));
        }
        if !(self.entropy_bin_width > 0.0 && self.entropy_bin_width.is_finite()) {
            bad.push(format!(
                "entropy_bin_width must be positive, got {}",
                self.entropy_bin_width
            ));
        }
        if self.batch_size > 0 {
            let steps = self
                .epochs
                .saturating_mul(train_size.div_ceil(self.batch_size));
            if steps > MAX_TOTAL_STEPS {
                bad.push(format!("{steps} total steps exceeds {MAX_TOTAL_STEPS}"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Loss components. `total = pred + beta * recon + lambda * norm`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub pred: f64,
    pub recon: f64,
    pub norm: f64,
    pub beta: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossParts {
    pub fn weighted_sum(&self) -> f64 {
        self.pred + self.beta * self.recon + self.lambda * self.norm
    }
}

pub(crate) fn input_tensor(samples: &[&Sample]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.x.clone()).collect();
    Tensor::from_rows(&rows)
}

/// Prediction loss of decoder output against the samples' targets.
pub fn prediction_loss(g: &mut Graph, out: &Decoded, samples: &[&Sample]) -> Result<Var> {
    match out {
        Decoded::Labels(logits) => {
            let mut terms = Vec::with_capacity(logits.len());
            for (i, &l) in logits.iter().enumerate() {
                let targets = samples
                    .iter()
                    .map(|s| match &s.y {
                        Target::Labels(y) => Ok(y[i]),
                        Target::Image(_) => Err(Error::UnsupportedMode(
                            "image target for label decoder".into(),
                        )),
                    })
                    .collect::<Result<Vec<_>>>()?;
                terms.push(g.softmax_cross_entropy(l, &targets)?);
            }
            let mut sum = terms[0];
            for &t in &terms[1..] {
                sum = g.add(sum, t)?;
            }
            Ok(g.scale(sum, 1.0 / terms.len() as f64))
        }
        Decoded::Render { image, .. } => {
            let rows = samples
                .iter()
                .map(|s| match &s.y {
                    Target::Image(img) => Ok(img.clone()),
                    Target::Labels(_) => Err(Error::UnsupportedMode(
                        "label target for render decoder".into(),
                    )),
                })
                .collect::<Result<Vec<_>>>()?;
            let target = g.constant(Tensor::from_rows(&rows)?);
            g.mse(*image, target)
        }
    }
}

/// Combined objective on one batch. Noise is injected only when `training`.
pub fn total_loss(
    bundle: &ModelBundle,
    g: &mut Graph,
    vars: &[Var],
    samples: &[&Sample],
    beta: f64,
    training: bool,
    rng: &mut RngState,
) -> Result<(Var, LossParts)> {
    let x = g.constant(input_tensor(samples)?);
    let enc = bundle.encode(g, vars, x, training, rng)?;
    let out = bundle.decode_f(g, vars, &enc.noised)?;
    let pred = prediction_loss(g, &out, samples)?;
    let h_in = match bundle.config.reverse_input {
        ReverseInput::Noised => &enc.noised,
        ReverseInput::Clean => &enc.clean,
    };
    let x_hat = bundle.decode_h(g, vars, h_in)?;
    let recon = g.mse(x_hat, x)?;
    let mut norm = g.l2_sq(enc.noised[0]);
    for &h in &enc.noised[1..] {
        let n = g.l2_sq(h);
        norm = g.add(norm, n)?;
    }
    let lambda = bundle.config.entreg.lambda;
    let weighted_recon = g.scale(recon, beta);
    let weighted_norm = g.scale(norm, lambda);
    let partial = g.add(pred, weighted_recon)?;
    let total = g.add(partial, weighted_norm)?;
    let value = |v: Var| g.value(v).values()[0];
    let parts = LossParts {
        pred: value(pred),
        recon: value(recon),
        norm: value(norm),
        beta,
        lambda,
        total: value(total),
    };
    Ok((total, parts))
}

/// One evaluation row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub pred_loss: f64,
    pub recon_loss: f64,
    pub norm_penalty: f64,
    /// Histogram entropy of each clean `H_i` over the training samples.
    pub entropy_bits: Vec<f64>,
    pub train_acc: f64,
    pub heldout_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
}

/// Noise-free losses, entropies and accuracies of `bundle`.
pub fn evaluate(
    bundle: &ModelBundle,
    task: &TaskInstance,
    train: &[Sample],
    test: &[Sample],
    config: &TrainConfig,
    epoch: usize,
) -> Result<TrainLogRow> {
    let refs: Vec<&Sample> = train.iter().collect();
    let mut g = Graph::new();
    let vars = bundle.bind_frozen(&mut g);
    let (_, parts) = total_loss(
        bundle,
        &mut g,
        &vars,
        &refs,
        config.beta,
        false,
        &mut RngState::new(0),
    )?;

    let inputs: Vec<Vec<f64>> = train.iter().map(|s| s.x.clone()).collect();
    let (pred, hidden) = forward_plain(bundle, &inputs)?;
    let entropy_bits = hidden
        .iter()
        .map(|h| {
            let rows: Vec<&[f64]> = (0..h.rows()).map(|r| h.row(r)).collect();
            histogram_entropy(&rows, config.entropy_bin_width).map(|e| e.bits)
        })
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<Combination> = train.iter().map(|s| s.combo.clone()).collect();
    let train_acc = exact_match_accuracy(&predicted_combinations(task, &pred)?, &truth);

    let heldout_acc = if test.is_empty() {
        0.0
    } else {
        let inputs: Vec<Vec<f64>> = test.iter().map(|s| s.x.clone()).collect();
        let (pred, _) = forward_plain(bundle, &inputs)?;
        let truth: Vec<Combination> = test.iter().map(|s| s.combo.clone()).collect();
        exact_match_accuracy(&predicted_combinations(task, &pred)?, &truth)
    };
    Ok(TrainLogRow {
        epoch,
        pred_loss: parts.pred,
        recon_loss: parts.recon,
        norm_penalty: parts.norm,
        entropy_bits,
        train_acc,
        heldout_acc,
    })
}

fn max_abs_grad(bundle: &ModelBundle) -> f64 {
    bundle
        .params()
        .iter()
        .filter_map(|p| p.tensor.grad())
        .flat_map(|g| g.iter())
        .fold(
            0.0,
            |m, v| if v.is_nan() { f64::NAN } else { m.max(v.abs()) },
        )
}

/// Trains `bundle` in place-free fashion and returns it with its log.
pub fn train(
    task: &TaskInstance,
    split: &CompositionalSplit,
    config: &TrainConfig,
    bundle: ModelBundle,
) -> Result<(ModelBundle, TrainLog)> {
    train_with(task, split, config, bundle, |_, _| Ok(()))
}

/// [`train`] with a hook called after every evaluation (epoch 0, every
/// `eval_every` epochs, and the final epoch).
pub fn train_with(
    task: &TaskInstance,
    split: &CompositionalSplit,
    config: &TrainConfig,
    mut bundle: ModelBundle,
    mut on_eval: impl FnMut(&ModelBundle, &TrainLogRow) -> Result<()>,
) -> Result<(ModelBundle, TrainLog)> {
    split.validate()?;
    let train = task.train_samples(split)?;
    let test = task.test_samples(split)?;
    config.validate(train.len())?;

    let mut log = TrainLog::default();
    let mut record = |bundle: &ModelBundle, epoch: usize, log: &mut TrainLog| -> Result<()> {
        let row = evaluate(bundle, task, &train, &test, config, epoch)?;
        on_eval(bundle, &row)?;
        log.rows.push(row);
        Ok(())
    };
    record(&bundle, 0, &mut log)?;

    let mut noise_rng = RngState::new(derive_seed(config.seed, NOISE_STREAM));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        RngState::new(derive_seed(config.seed, epoch as u64)).shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let vars = bundle.bind(&mut g);
            let (loss, parts) = total_loss(
                &bundle,
                &mut g,
                &vars,
                &batch,
                config.beta,
                true,
                &mut noise_rng,
            )?;
            g.backward(loss)?;
            bundle.zero_grads();
            bundle.accumulate_grads(&g, &vars)?;
            let max_grad = max_abs_grad(&bundle);
            if !parts.total.is_finite() || !max_grad.is_finite() {
                return Err(Error::Numeric(format!(
                    "step {step}: total {} (pred {}, recon {}, norm {}), max |grad| {max_grad}",
                    parts.total, parts.pred, parts.recon, parts.norm
                )));
            }
            if config.lr > 0.0 {
                sgd_step(bundle.tensors_mut(), config.lr)?;
            }
            step += 1;
        }
        if epoch % config.eval_every == 0 || epoch == config.epochs {
            record(&bundle, epoch, &mut log)?;
        }
    }
    bundle.zero_grads();
    Ok((bundle, log))
}

/// Training-time hidden vectors kept per component for inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExemplarStore {
    /// `vectors[i][m]` is the `H_i` of exemplar `m`.
    pub vectors: Vec<Vec<Vec<f64>>>,
    /// Source combination of exemplar `m`.
    pub sources: Vec<Combination>,
    /// Index of exemplar `m` in the training sample list.
    pub sample_ids: Vec<usize>,
}

impl ExemplarStore {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn component(&self, i: usize) -> &[Vec<f64>] {
        &self.vectors[i]
    }
}

/// Encodes every training sample noise-free and keeps up to `size` of them.
///
/// When subsampling, one exemplar per seen component value is taken first
/// (in seeded order) and the rest are filled uniformly.
pub fn build_store(
    bundle: &ModelBundle,
    task: &TaskInstance,
    split: &CompositionalSplit,
    size: usize,
    seed: u64,
) -> Result<ExemplarStore> {
    let train = task.train_samples(split)?;
    let chosen: Vec<usize> = if size >= train.len() {
        (0..train.len()).collect()
    } else {
        let mut order: Vec<usize> = (0..train.len()).collect();
        RngState::new(seed).shuffle(&mut order);
        let mut picked = vec![false; train.len()];
        let mut covered: Vec<Vec<bool>> = task
            .spec
            .cardinalities()
            .iter()
            .map(|&c| vec![false; c])
            .collect();
        let mut count = 0;
        for &i in &order {
            let z = &train[i].combo;
            if z.values().iter().enumerate().any(|(k, &v)| !covered[k][v]) {
                z.values()
                    .iter()
                    .enumerate()
                    .for_each(|(k, &v)| covered[k][v] = true);
                picked[i] = true;
                count += 1;
            }
        }
        for &i in &order {
            if count >= size {
                break;
            }
            if !picked[i] {
                picked[i] = true;
                count += 1;
            }
        }
        (0..train.len()).filter(|&i| picked[i]).collect()
    };
    let inputs: Vec<Vec<f64>> = chosen.iter().map(|&i| train[i].x.clone()).collect();
    let (_, hidden) = forward_plain(bundle, &inputs)?;
    let vectors = hidden
        .iter()
        .map(|h| (0..h.rows()).map(|r| h.row(r).to_vec()).collect())
        .collect();
    Ok(ExemplarStore {
        vectors,
        sources: chosen.iter().map(|&i| train[i].combo.clone()).collect(),
        sample_ids: chosen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tasks::{make_split, TaskConfig};

    fn small_setup() -> (TaskInstance, CompositionalSplit, ModelBundle) {
        let cfg = TaskConfig {
            cardinalities: vec![3, 3],
            samples_per_combo: 4,
            ..TaskConfig::default()
        };
        let task = TaskInstance::generate(&cfg).unwrap();
        let split = make_split(&task.spec, 2.0 / 9.0, 3).unwrap();
        let mut mc = ModelConfig::for_task(&task);
        mc.width = 16;
        mc.head_width = 8;
        mc.d_h = 4;
        let bundle = ModelBundle::init(mc, 7).unwrap();
        (task, split, bundle)
    }

    #[test]
    fn parts_add_up() {
        let (task, split, bundle) = small_setup();
        let samples = task.train_samples(&split).unwrap();
        let refs: Vec<&Sample> = samples.iter().take(10).collect();
        let mut g = Graph::new();
        let vars = bundle.bind(&mut g);
        let (_, parts) = total_loss(
            &bundle,
            &mut g,
            &vars,
            &refs,
            0.7,
            true,
            &mut RngState::new(1),
        )
        .unwrap();
        assert!((parts.total - parts.weighted_sum()).abs() <= 1e-12);
    }

    #[test]
    fn switched_off_terms_leave_prediction_loss() {
        let (task, split, mut bundle) = small_setup();
        bundle.config.entreg.lambda = 0.0;
        let samples = task.train_samples(&split).unwrap();
        let refs: Vec<&Sample> = samples.iter().take(10).collect();
        let mut g = Graph::new();
        let vars = bundle.bind(&mut g);
        let (_, parts) = total_loss(
            &bundle,
            &mut g,
            &vars,
            &refs,
            0.0,
            false,
            &mut RngState::new(1),
        )
        .unwrap();
        assert_eq!(parts.total, parts.pred);
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let (task, split, bundle) = small_setup();
        let cfg = TrainConfig {
            epochs: 3,
            lr: 0.0,
            eval_every: 1,
            ..TrainConfig::default()
        };
        let (trained, log) = train(&task, &split, &cfg, bundle.clone()).unwrap();
        assert_eq!(trained, bundle);
        assert_eq!(log.rows.len(), 4);
    }

    #[test]
    fn training_is_deterministic() {
        let (task, split, bundle) = small_setup();
        let cfg = TrainConfig {
            epochs: 4,
            eval_every: 2,
            ..TrainConfig::default()
        };
        let (a, la) = train(&task, &split, &cfg, bundle.clone()).unwrap();
        let (b, lb) = train(&task, &split, &cfg, bundle).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(
            la.rows.iter().map(|r| r.epoch).collect::<Vec<_>>(),
            vec![0, 2, 4]
        );
    }

    #[test]
    fn rejects_bad_config() {
        let (task, split, bundle) = small_setup();
        let cfg = TrainConfig {
            batch_size: 0,
            epochs: 0,
            ..TrainConfig::default()
        };
        let err = train(&task, &split, &cfg, bundle).unwrap_err().to_string();
        assert!(
            err.contains("epochs") && err.contains("batch_size"),
            "{err}"
        );
        let cfg = TrainConfig {
            epochs: 10_000_000,
            ..TrainConfig::default()
        };
        assert!(cfg.validate(100).is_err());
    }

    #[test]
    fn numeric_failure_aborts() {
        let (task, split, mut bundle) = small_setup();
        bundle.params_mut()[0].tensor.values_mut()[0] = f64::NAN;
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        // The initial evaluation already sees NaN losses; training aborts on step 0.
        match train(&task, &split, &cfg, bundle) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("step 0"), "{msg}"),
            other => panic!("expected numeric failure, got {other:?}"),
        }
    }

    #[test]
    fn store_covers_and_matches_fresh_encode() {
        let (task, split, bundle) = small_setup();
        let train_samples = task.train_samples(&split).unwrap();
        let all = build_store(&bundle, &task, &split, 10_000, 1).unwrap();
        assert_eq!(all.len(), train_samples.len());

        let store = build_store(&bundle, &task, &split, 5, 1).unwrap();
        assert!((5..=6).contains(&store.len()), "store size {}", store.len());
        for k in 0..2 {
            for v in 0..3 {
                assert!(store.sources.iter().any(|z| z.get(k) == v));
            }
        }
        let inputs: Vec<Vec<f64>> = store
            .sample_ids
            .iter()
            .map(|&i| train_samples[i].x.clone())
            .collect();
        let (_, hidden) = forward_plain(&bundle, &inputs).unwrap();
        for (i, h) in hidden.iter().enumerate() {
            for m in 0..store.len() {
                assert_eq!(h.row(m), &store.vectors[i][m][..]);
            }
        }
    }
}
