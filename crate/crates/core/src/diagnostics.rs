//! Component entropy, conditional-independence checks on explicit joint
//! tables, and linear leakage probes on learned hidden codes.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, RngState, Tensor};
use crate::error::{Error, Result};
use crate::model::{forward_plain, ModelBundle, Prediction};
use crate::tasks::{enumerate_combinations, CompositionalSplit, TaskInstance};
use crate::training::TrainLog;

/// Largest joint table the exhaustive checks will enumerate.
pub const MAX_JOINT_CELLS: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyEstimate {
    pub component: usize,
    pub bits: f64,
    pub bin_width: f64,
    pub samples: usize,
}

/// Shannon entropy (bits) of the quantized rows, each coordinate binned by
/// `floor(x / bin_width)` and the tuple of bins treated as one symbol.
pub fn histogram_entropy<R: AsRef<[f64]>>(rows: &[R], bin_width: f64) -> Result<EntropyEstimate> {
    if rows.len() < 2 {
        return Err(Error::Sample(format!(
            "need at least 2 samples, got {}",
            rows.len()
        )));
    }
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(Error::Param(format!(
            "bin width must be positive, got {bin_width}"
        )));
    }
    let mut counts: HashMap<Vec<i64>, usize> = HashMap::new();
    for r in rows {
        let key = r
            .as_ref()
            .iter()
            .map(|x| (x / bin_width).floor() as i64)
            .collect();
        *counts.entry(key).or_default() += 1;
    }
    let n = rows.len() as f64;
    // Sum in a fixed order so the result does not depend on hash iteration.
    let mut freqs: Vec<usize> = counts.into_values().collect();
    freqs.sort_unstable();
    let bits = -freqs
        .iter()
        .map(|&c| c as f64 / n)
        .map(|p| p * p.log2())
        .sum::<f64>();
    Ok(EntropyEstimate {
        component: 0,
        bits: bits.max(0.0),
        bin_width,
        samples: rows.len(),
    })
}

/// Full probability table over `(X_1..X_K, Y_1..Y_K)`.
///
/// Cells are laid out in mixed radix over `x_1, ..., x_K, y_1, ..., y_K`,
/// with `y_K` varying fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    x_cards: Vec<usize>,
    y_cards: Vec<usize>,
    probs: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(x_cards: Vec<usize>, y_cards: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        if x_cards.is_empty() || x_cards.len() != y_cards.len() {
            return Err(Error::Config(format!(
                "cardinalities {x_cards:?} / {y_cards:?}"
            )));
        }
        if x_cards.iter().chain(&y_cards).any(|&c| c == 0) {
            return Err(Error::Config("zero cardinality".into()));
        }
        let cells = cell_count(&x_cards, &y_cards);
        if cells != Some(probs.len()) {
            return Err(Error::Config(format!(
                "{} probabilities for {cells:?} cells",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Config(
                "probabilities must be finite and >= 0".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("probabilities sum to {total}")));
        }
        Ok(DiscreteJoint {
            x_cards,
            y_cards,
            probs,
        })
    }

    /// `P(x) * prod_i P(y_i | x_i)`, the conditionally independent form.
    ///
    /// `p_x` is indexed in mixed radix over `x_1..x_K`; `conditionals[i][x_i]`
    /// is the distribution of `Y_i` given `X_i = x_i`.
    pub fn product_form(
        x_cards: Vec<usize>,
        p_x: &[f64],
        conditionals: &[Vec<Vec<f64>>],
    ) -> Result<Self> {
        let y_cards: Vec<usize> = conditionals
            .iter()
            .map(|c| c.first().map(Vec::len).unwrap_or(0))
            .collect();
        let nx: usize = x_cards.iter().product();
        let ny: usize = y_cards.iter().product();
        if p_x.len() != nx || conditionals.len() != x_cards.len() {
            return Err(Error::Config("product_form dimension mismatch".into()));
        }
        let mut probs = Vec::with_capacity(nx * ny);
        for (xi, &px) in p_x.iter().enumerate() {
            let x = unrank(xi, &x_cards);
            for yi in 0..ny {
                let y = unrank(yi, &y_cards);
                let p: f64 = (0..x.len()).map(|i| conditionals[i][x[i]][y[i]]).product();
                probs.push(px * p);
            }
        }
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        DiscreteJoint::new(x_cards, y_cards, probs)
    }

    pub fn k(&self) -> usize {
        self.x_cards.len()
    }

    pub fn x_cards(&self) -> &[usize] {
        &self.x_cards
    }

    pub fn y_cards(&self) -> &[usize] {
        &self.y_cards
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Moves `mass` from cell `from` to cell `to` (flat indices).
    pub fn move_mass(&mut self, from: usize, to: usize, mass: f64) -> Result<()> {
        if from >= self.probs.len() || to >= self.probs.len() {
            return Err(Error::Bounds(format!(
                "cell index out of {}",
                self.probs.len()
            )));
        }
        if self.probs[from] < mass {
            return Err(Error::Param(format!(
                "cell {from} holds {} < {mass}",
                self.probs[from]
            )));
        }
        self.probs[from] -= mass;
        self.probs[to] += mass;
        Ok(())
    }

    fn cards(&self) -> Vec<usize> {
        self.x_cards.iter().chain(&self.y_cards).copied().collect()
    }

    pub fn index(&self, x: &[usize], y: &[usize]) -> usize {
        let full: Vec<usize> = x.iter().chain(y).copied().collect();
        rank(&full, &self.cards())
    }

    pub fn assignment(&self, cell: usize) -> (Vec<usize>, Vec<usize>) {
        let mut full = unrank(cell, &self.cards());
        let y = full.split_off(self.k());
        (full, y)
    }

    fn guard(&self) -> Result<()> {
        if self.probs.len() > MAX_JOINT_CELLS {
            return Err(Error::Size(format!(
                "{} cells exceeds {MAX_JOINT_CELLS}",
                self.probs.len()
            )));
        }
        Ok(())
    }

    /// `P(X = x)`.
    pub fn p_x(&self, x: &[usize]) -> f64 {
        let ny: usize = self.y_cards.iter().product();
        let start = rank(x, &self.x_cards) * ny;
        self.probs[start..start + ny].iter().sum()
    }

    /// `P(X_i = xi, Y_i = yi)` and `P(X_i = xi)` for every `(xi, yi)`.
    fn component_marginals(&self, i: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut joint = vec![vec![0.0; self.y_cards[i]]; self.x_cards[i]];
        let mut marg = vec![0.0; self.x_cards[i]];
        for (cell, &p) in self.probs.iter().enumerate() {
            let (x, y) = self.assignment(cell);
            joint[x[i]][y[i]] += p;
            marg[x[i]] += p;
        }
        (joint, marg)
    }
}

fn cell_count(x_cards: &[usize], y_cards: &[usize]) -> Option<usize> {
    x_cards
        .iter()
        .chain(y_cards)
        .try_fold(1usize, |acc, &c| acc.checked_mul(c))
}

fn rank(values: &[usize], cards: &[usize]) -> usize {
    values
        .iter()
        .zip(cards)
        .fold(0, |acc, (&v, &c)| acc * c + v)
}

fn unrank(mut index: usize, cards: &[usize]) -> Vec<usize> {
    let mut out = vec![0; cards.len()];
    for (slot, &c) in out.iter_mut().zip(cards).rev() {
        *slot = index % c;
        index /= c;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiReport {
    pub is_ci: bool,
    pub tol: f64,
    pub max_deviation: f64,
    /// Largest deviation per component `i`.
    pub per_component: Vec<f64>,
}

/// Compares `P(Y_i | X, Y_{-i})` with `P(Y_i | X_i)` on every cell whose
/// conditioning event has positive probability, for every `i`.
pub fn ci_check(joint: &DiscreteJoint, tol: f64) -> Result<CiReport> {
    joint.guard()?;
    let k = joint.k();
    let mut per_component = vec![0.0f64; k];
    for i in 0..k {
        let (pair, marg) = joint.component_marginals(i);
        // P(x, y_{-i}): sum over y_i, keyed by the cell with y_i zeroed.
        let mut cond: HashMap<usize, f64> = HashMap::new();
        let keys: Vec<usize> = (0..joint.probs.len())
            .map(|cell| {
                let (x, mut y) = joint.assignment(cell);
                y[i] = 0;
                joint.index(&x, &y)
            })
            .collect();
        for (cell, &key) in keys.iter().enumerate() {
            *cond.entry(key).or_default() += joint.probs[cell];
        }
        for (cell, &key) in keys.iter().enumerate() {
            let denom = cond[&key];
            if denom <= 0.0 {
                continue;
            }
            let (x, y) = joint.assignment(cell);
            let lhs = joint.probs[cell] / denom;
            let rhs = pair[x[i]][y[i]] / marg[x[i]];
            per_component[i] = per_component[i].max((lhs - rhs).abs());
        }
    }
    let max_deviation = per_component.iter().cloned().fold(0.0, f64::max);
    Ok(CiReport {
        is_ci: max_deviation <= tol,
        tol,
        max_deviation,
        per_component,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorizationCheck {
    /// `P(Y = y | X = x)` read from the table.
    pub lhs: f64,
    /// `prod_i P(Y_i = y_i | X_i = x_i)` by marginalization.
    pub rhs: f64,
    pub gap: f64,
}

pub fn factorization_check(
    joint: &DiscreteJoint,
    x: &[usize],
    y: &[usize],
) -> Result<FactorizationCheck> {
    joint.guard()?;
    if x.len() != joint.k() || y.len() != joint.k() {
        return Err(Error::Bounds(format!(
            "assignment lengths {} / {} for K = {}",
            x.len(),
            y.len(),
            joint.k()
        )));
    }
    for (i, (&xi, &yi)) in x.iter().zip(y).enumerate() {
        if xi >= joint.x_cards[i] || yi >= joint.y_cards[i] {
            return Err(Error::Bounds(format!(
                "component {i}: ({xi}, {yi}) out of range"
            )));
        }
    }
    let px = joint.p_x(x);
    if px <= 0.0 {
        return Err(Error::UndefinedConditional(format!("P(X = {x:?}) = 0")));
    }
    let lhs = joint.probs[joint.index(x, y)] / px;
    let mut rhs = 1.0;
    for i in 0..joint.k() {
        let (pair, marg) = joint.component_marginals(i);
        rhs *= pair[x[i]][y[i]] / marg[x[i]];
    }
    Ok(FactorizationCheck {
        lhs,
        rhs,
        gap: (lhs - rhs).abs(),
    })
}

/// Largest factorization gap over every `(x, y)` with `P(x) > 0`.
pub fn max_factorization_gap(joint: &DiscreteJoint) -> Result<f64> {
    joint.guard()?;
    let nx: usize = joint.x_cards.iter().product();
    let ny: usize = joint.y_cards.iter().product();
    let k = joint.k();
    let marginals: Vec<_> = (0..k).map(|i| joint.component_marginals(i)).collect();
    let mut worst = 0.0f64;
    for xi in 0..nx {
        let x = unrank(xi, &joint.x_cards);
        let px = joint.p_x(&x);
        if px <= 0.0 {
            continue;
        }
        for yi in 0..ny {
            let y = unrank(yi, &joint.y_cards);
            let lhs = joint.probs[xi * ny + yi] / px;
            let rhs: f64 = (0..k)
                .map(|i| marginals[i].0[x[i]][y[i]] / marginals[i].1[x[i]])
                .product();
            worst = worst.max((lhs - rhs).abs());
        }
    }
    Ok(worst)
}

/// Joint table of a trained labels-mode model: `X` uniform over all
/// combinations, `P(Y | X = z) = prod_i softmax_i(f(g(x_z)))` at the
/// noise-free input of `z`.
pub fn model_joint(bundle: &ModelBundle, task: &TaskInstance) -> Result<DiscreteJoint> {
    let combos = enumerate_combinations(&task.spec);
    let inputs: Vec<Vec<f64>> = combos
        .iter()
        .map(|z| task.clean_input(z).to_vec())
        .collect();
    let (pred, _) = forward_plain(bundle, &inputs)?;
    let Prediction::Labels(logits) = pred else {
        return Err(Error::UnsupportedMode(
            "model joint needs a labels-mode model".into(),
        ));
    };
    let cards = task.spec.cardinalities().to_vec();
    let p_x = 1.0 / combos.len() as f64;
    let ny: usize = cards.iter().product();
    let mut probs = Vec::with_capacity(combos.len() * ny);
    for r in 0..combos.len() {
        let soft: Vec<Vec<f64>> = logits.iter().map(|l| softmax(l.row(r))).collect();
        for yi in 0..ny {
            let y = unrank(yi, &cards);
            probs.push(
                p_x * y
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| soft[i][v])
                    .product::<f64>(),
            );
        }
    }
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    DiscreteJoint::new(cards.clone(), cards, probs)
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 200,
            lr: 0.1,
            seed: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub predictions: Vec<usize>,
    pub accuracy: f64,
}

/// Full-batch softmax regression from `features` to `labels`, scored on the
/// same data. Weights start uniform in (-0.01, 0.01), biases at zero.
pub fn train_linear_probe(
    features: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::Sample(format!(
            "{} feature rows for {} labels",
            features.len(),
            labels.len()
        )));
    }
    let d = features[0].len();
    let mut rng = RngState::new(seed);
    let mut w = Tensor::new(
        vec![d, classes],
        (0..d * classes)
            .map(|_| rng.uniform_range(-0.01, 0.01))
            .collect(),
    )?;
    let mut b = Tensor::zeros(vec![classes])?;
    let x = Tensor::from_rows(features)?;
    let logits_of = |g: &mut Graph, w: &Tensor, b: &Tensor, grad: bool| -> Result<_> {
        let (wv, bv) = if grad {
            (g.param(w.clone()), g.param(b.clone()))
        } else {
            (g.constant(w.clone()), g.constant(b.clone()))
        };
        let xv = g.constant(x.clone());
        let z = g.matmul(xv, wv)?;
        Ok((g.add(z, bv)?, wv, bv))
    };
    for _ in 0..cfg.epochs {
        let mut g = Graph::new();
        let (logits, wv, bv) = logits_of(&mut g, &w, &b, true)?;
        let loss = g.softmax_cross_entropy(logits, labels)?;
        g.backward(loss)?;
        for (t, v) in [(&mut w, wv), (&mut b, bv)] {
            let grad = g.grad(v).expect("param leaf");
            t.values_mut()
                .iter_mut()
                .zip(grad)
                .for_each(|(p, gr)| *p -= cfg.lr * gr);
        }
    }
    let mut g = Graph::new();
    let (logits, _, _) = logits_of(&mut g, &w, &b, false)?;
    let out = g.value(logits);
    let predictions: Vec<usize> = (0..out.rows())
        .map(|r| {
            let row = out.row(r);
            (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect();
    let accuracy = probe_accuracy(&predictions, labels);
    Ok(ProbeResult {
        predictions,
        accuracy,
    })
}

pub fn probe_accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count() as f64
        / labels.len() as f64
}

/// `accuracy[i][j]`: linear probe from clean `H_i` to factor `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeMatrix {
    pub accuracy: Vec<Vec<f64>>,
    /// `predictions[i][j][s]` for training sample `s`.
    pub predictions: Vec<Vec<Vec<usize>>>,
    /// `labels[j][s]`.
    pub labels: Vec<Vec<usize>>,
}

/// Probes every (hidden slice, factor) pair on the training encodings.
pub fn cross_probe(
    bundle: &ModelBundle,
    task: &TaskInstance,
    split: &CompositionalSplit,
    cfg: &ProbeConfig,
) -> Result<ProbeMatrix> {
    let train = task.train_samples(split)?;
    let inputs: Vec<Vec<f64>> = train.iter().map(|s| s.x.clone()).collect();
    let (_, hidden) = forward_plain(bundle, &inputs)?;
    let k = task.spec.k();
    let labels: Vec<Vec<usize>> = (0..k)
        .map(|j| train.iter().map(|s| s.combo.get(j)).collect())
        .collect();
    let mut accuracy = vec![vec![0.0; k]; k];
    let mut predictions = vec![vec![Vec::new(); k]; k];
    for (i, h) in hidden.iter().enumerate() {
        let features: Vec<Vec<f64>> = (0..h.rows()).map(|r| h.row(r).to_vec()).collect();
        for j in 0..k {
            let seed = crate::autodiff::derive_seed(cfg.seed, (i * k + j) as u64);
            let res = train_linear_probe(
                &features,
                &labels[j],
                task.spec.cardinalities()[j],
                cfg,
                seed,
            )?;
            accuracy[i][j] = res.accuracy;
            predictions[i][j] = res.predictions;
        }
    }
    Ok(ProbeMatrix {
        accuracy,
        predictions,
        labels,
    })
}

/// `(epoch, bits)` series per component.
pub fn entropy_trajectory(log: &TrainLog) -> Vec<Vec<(usize, f64)>> {
    let k = log.rows.first().map(|r| r.entropy_bits.len()).unwrap_or(0);
    (0..k)
        .map(|i| {
            log.rows
                .iter()
                .map(|r| (r.epoch, r.entropy_bits[i]))
                .collect()
        })
        .collect()
}
