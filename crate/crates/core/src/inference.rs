//! Inference by optimizing the hidden code.
//!
//! The encoder supplies a starting code `H0 = g(X)`. The code is then moved
//! by gradient steps on
//!
//! ```text
//! J(H) = mean((h(H) - X)^2) + mu * sum_i min_m ||H_i - store_i[m]||^2
//! ```
//!
//! with all network parameters frozen, and the result is decoded with `f`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{ModelBundle, Prediction};
use crate::tasks::{
    enumerate_combinations, sq_dist, Combination, CompositionalSplit, Sample, TaskInstance,
};
use crate::training::ExemplarStore;

/// Smallest step size reached by halving.
pub const MIN_STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub steps: usize,
    pub eta: f64,
    pub mu: f64,
    /// Roll back steps that raise `J` and halve the step size.
    pub accept_if_improved: bool,
    /// Update one component per step, cycling, instead of all at once.
    pub alternating: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            steps: 200,
            eta: 0.05,
            mu: 0.1,
            accept_if_improved: true,
            alternating: false,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!(
                "eta must be positive, got {}",
                self.eta
            )));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(format!(
                "mu must be finite and >= 0, got {}",
                self.mu
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub value: f64,
    pub recon: f64,
    pub manifold: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferStep {
    /// Objective at the proposed point.
    pub objective: Objective,
    pub accepted: bool,
    pub eta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferTrace {
    pub initial: Objective,
    pub steps: Vec<InferStep>,
    pub final_objective: Objective,
    pub accepted_steps: usize,
}

impl InferTrace {
    /// Objective values of the starting point and every accepted step.
    pub fn accepted_values(&self) -> Vec<f64> {
        std::iter::once(self.initial.value)
            .chain(
                self.steps
                    .iter()
                    .filter(|s| s.accepted)
                    .map(|s| s.objective.value),
            )
            .collect()
    }
}

/// Index and squared distance of the closest exemplar (first on ties).
pub fn nearest_exemplar(v: &[f64], exemplars: &[Vec<f64>]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (m, e) in exemplars.iter().enumerate() {
        let d = sq_dist(v, e);
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((m, d));
        }
    }
    best
}

/// `J(H)` and its gradient with respect to each slice of `H`.
pub fn objective(
    bundle: &ModelBundle,
    hidden: &[Vec<f64>],
    x: &[f64],
    store: &ExemplarStore,
    mu: f64,
) -> Result<(Objective, Vec<Vec<f64>>)> {
    if mu > 0.0 && store.is_empty() {
        return Err(Error::Config(
            "manifold weight > 0 with an empty exemplar store".into(),
        ));
    }
    let mut g = Graph::new();
    let vars = bundle.bind_frozen(&mut g);
    let h = hidden
        .iter()
        .map(|hi| Ok(g.param(Tensor::new(vec![1, hi.len()], hi.clone())?)))
        .collect::<Result<Vec<Var>>>()?;
    let x_var = g.constant(Tensor::new(vec![1, x.len()], x.to_vec())?);
    let x_hat = bundle.decode_h(&mut g, &vars, &h)?;
    let recon = g.mse(x_hat, x_var)?;
    let (total, manifold) = if mu > 0.0 {
        let mut terms = Vec::with_capacity(h.len());
        for (i, (&hv, hi)) in h.iter().zip(hidden).enumerate() {
            let (m, _) = nearest_exemplar(hi, store.component(i)).expect("non-empty store");
            let anchor = g.constant(Tensor::new(
                vec![1, hi.len()],
                store.component(i)[m].clone(),
            )?);
            let diff = g.sub(hv, anchor)?;
            terms.push(g.l2_sq(diff));
        }
        let mut manifold = terms[0];
        for &t in &terms[1..] {
            manifold = g.add(manifold, t)?;
        }
        let weighted = g.scale(manifold, mu);
        (g.add(recon, weighted)?, Some(manifold))
    } else {
        (recon, None)
    };
    g.backward(total)?;
    let obj = Objective {
        value: g.value(total).values()[0],
        recon: g.value(recon).values()[0],
        manifold: manifold.map(|m| g.value(m).values()[0]).unwrap_or(0.0),
    };
    let grads = h
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; g.value(v).len()])
        })
        .collect();
    Ok((obj, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferResult {
    pub prediction: Prediction,
    pub hidden: Vec<Vec<f64>>,
    pub trace: InferTrace,
}

fn decode_hidden(bundle: &ModelBundle, hidden: &[Vec<f64>]) -> Result<Prediction> {
    let mut g = Graph::new();
    let vars = bundle.bind_frozen(&mut g);
    let h = hidden
        .iter()
        .map(|hi| Ok(g.constant(Tensor::new(vec![1, hi.len()], hi.clone())?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(bundle.decode_f(&mut g, &vars, &h)?.values(&g))
}

/// Optimizes the hidden code of one input against `h` and decodes it.
pub fn infer(
    x: &[f64],
    bundle: &ModelBundle,
    store: &ExemplarStore,
    cfg: &InferConfig,
) -> Result<InferResult> {
    cfg.validate()?;
    let (_, start) = crate::model::forward_plain(bundle, &[x.to_vec()])?;
    let mut hidden: Vec<Vec<f64>> = start.into_iter().map(Tensor::into_values).collect();
    let (mut current, mut grad) = objective(bundle, &hidden, x, store, cfg.mu)?;
    let initial = current;
    let mut eta = cfg.eta;
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut accepted_steps = 0;
    for t in 0..cfg.steps {
        let k = hidden.len();
        let candidate: Vec<Vec<f64>> = hidden
            .iter()
            .zip(&grad)
            .enumerate()
            .map(|(i, (hi, gi))| {
                if cfg.alternating && i != t % k {
                    hi.clone()
                } else {
                    hi.iter().zip(gi).map(|(h, g)| h - eta * g).collect()
                }
            })
            .collect();
        let (obj, cand_grad) = objective(bundle, &candidate, x, store, cfg.mu)?;
        let accepted = !cfg.accept_if_improved || obj.value <= current.value;
        steps.push(InferStep {
            objective: obj,
            accepted,
            eta,
        });
        if accepted {
            hidden = candidate;
            current = obj;
            grad = cand_grad;
            accepted_steps += 1;
        } else {
            eta = (eta / 2.0).max(MIN_STEP);
        }
    }
    let prediction = decode_hidden(bundle, &hidden)?;
    Ok(InferResult {
        prediction,
        hidden,
        trace: InferTrace {
            initial,
            steps,
            final_objective: current,
            accepted_steps,
        },
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] || row[best].is_nan() && !v.is_nan() {
            best = j;
        }
    }
    best
}

fn nearest_index(v: &[f64], prototypes: impl Iterator<Item = Vec<f64>>) -> usize {
    let protos: Vec<Vec<f64>> = prototypes.collect();
    nearest_exemplar(v, &protos).map(|(m, _)| m).unwrap_or(0)
}

/// Reads combinations off decoder outputs: per-head argmax for labels,
/// nearest mask and colour prototypes (or nearest full image for the
/// entangled decoder) for renders.
pub fn predicted_combinations(task: &TaskInstance, pred: &Prediction) -> Result<Vec<Combination>> {
    match pred {
        Prediction::Labels(logits) => {
            let rows = logits.first().map(Tensor::rows).unwrap_or(0);
            Ok((0..rows)
                .map(|r| Combination(logits.iter().map(|l| argmax(l.row(r))).collect()))
                .collect())
        }
        Prediction::Render { image, parts } => {
            let assets = task.assets.as_ref().ok_or_else(|| {
                Error::UnsupportedMode("render prediction for a labels task".into())
            })?;
            match parts {
                Some((mask, rgb)) => Ok((0..mask.rows())
                    .map(|r| {
                        let shape = nearest_index(mask.row(r), assets.masks.iter().cloned());
                        let color =
                            nearest_index(rgb.row(r), assets.colors.iter().map(|c| c.to_vec()));
                        Combination(vec![shape, color])
                    })
                    .collect()),
                None => {
                    let combos = enumerate_combinations(&task.spec);
                    Ok((0..image.rows())
                        .map(|r| {
                            let m = nearest_index(
                                image.row(r),
                                combos.iter().map(|z| assets.render(z.get(0), z.get(1))),
                            );
                            combos[m].clone()
                        })
                        .collect())
                }
            }
        }
    }
}

pub fn exact_match_accuracy(pred: &[Combination], truth: &[Combination]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

/// One row of `predictions.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: usize,
    pub truth: Combination,
    pub predicted: Combination,
    pub j_initial: f64,
    pub j_final: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub component_acc: Vec<f64>,
    pub exact_match: f64,
}

impl Metrics {
    pub fn from_records(records: &[PredictionRecord], k: usize) -> Metrics {
        let n = records.len();
        let frac = |count: usize| if n == 0 { 0.0 } else { count as f64 / n as f64 };
        let component_acc = (0..k)
            .map(|i| {
                frac(
                    records
                        .iter()
                        .filter(|r| r.truth.get(i) == r.predicted.get(i))
                        .count(),
                )
            })
            .collect();
        let exact_match = frac(records.iter().filter(|r| r.truth == r.predicted).count());
        Metrics {
            n,
            component_acc,
            exact_match,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchResult {
    pub records: Vec<PredictionRecord>,
    pub traces: Vec<InferTrace>,
    pub metrics: Metrics,
}

/// Runs [`infer`] on every sample (in parallel on the current rayon pool).
pub fn predict_samples(
    task: &TaskInstance,
    samples: &[Sample],
    bundle: &ModelBundle,
    store: &ExemplarStore,
    cfg: &InferConfig,
) -> Result<BatchResult> {
    let results: Vec<(PredictionRecord, InferTrace)> = samples
        .par_iter()
        .map(|s| {
            let res = infer(&s.x, bundle, store, cfg)?;
            let predicted = predicted_combinations(task, &res.prediction)?.remove(0);
            let record = PredictionRecord {
                sample_id: s.id,
                truth: s.combo.clone(),
                predicted,
                j_initial: res.trace.initial.value,
                j_final: res.trace.final_objective.value,
                steps: res.trace.steps.len(),
            };
            Ok((record, res.trace))
        })
        .collect::<Result<_>>()?;
    let (records, traces): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let metrics = Metrics::from_records(&records, task.spec.k());
    Ok(BatchResult {
        records,
        traces,
        metrics,
    })
}

/// [`predict_samples`] over the held-out combinations of `split`.
pub fn predict_batch(
    task: &TaskInstance,
    split: &CompositionalSplit,
    bundle: &ModelBundle,
    store: &ExemplarStore,
    cfg: &InferConfig,
) -> Result<BatchResult> {
    let samples = task.test_samples(split)?;
    predict_samples(task, &samples, bundle, store, cfg)
}
