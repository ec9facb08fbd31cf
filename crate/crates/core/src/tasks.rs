//! Seeded synthetic multi-factor tasks and compositional train/test splits.
//!
//! Inputs are built by pushing the concatenated one-hot codes of a
//! combination through a fixed random tanh network, so no input coordinate
//! lines up with a single factor. Targets are either the factor labels
//! themselves or a small rendered image whose support comes from factor 1
//! (shape) and whose colour comes from factor 2.

use serde::{Deserialize, Serialize};

use crate::autodiff::{derive_seed, RngState};
use crate::error::{Error, Result};

/// The components of a task and the number of values each can take.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "FactorSpecRepr", into = "FactorSpecRepr")]
pub struct FactorSpec {
    names: Vec<String>,
    cardinalities: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct FactorSpecRepr {
    names: Vec<String>,
    cardinalities: Vec<usize>,
}

impl TryFrom<FactorSpecRepr> for FactorSpec {
    type Error = Error;
    fn try_from(r: FactorSpecRepr) -> Result<Self> {
        FactorSpec::new(r.names, r.cardinalities)
    }
}

impl From<FactorSpec> for FactorSpecRepr {
    fn from(s: FactorSpec) -> Self {
        FactorSpecRepr {
            names: s.names,
            cardinalities: s.cardinalities,
        }
    }
}

impl FactorSpec {
    pub fn new(names: Vec<String>, cardinalities: Vec<usize>) -> Result<Self> {
        if cardinalities.len() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 components, got {}",
                cardinalities.len()
            )));
        }
        if names.len() != cardinalities.len() {
            return Err(Error::Config(format!(
                "{} factor names for {} components",
                names.len(),
                cardinalities.len()
            )));
        }
        if let Some(k) = cardinalities.iter().position(|&v| v < 2) {
            return Err(Error::Config(format!(
                "component {k} has cardinality {} (< 2)",
                cardinalities[k]
            )));
        }
        Ok(FactorSpec {
            names,
            cardinalities,
        })
    }

    /// Factors named `f0, f1, ...`.
    pub fn unnamed(cardinalities: Vec<usize>) -> Result<Self> {
        let names = (0..cardinalities.len()).map(|k| format!("f{k}")).collect();
        FactorSpec::new(names, cardinalities)
    }

    pub fn k(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }

    pub fn total_combinations(&self) -> usize {
        self.cardinalities.iter().product()
    }

    /// Sum of cardinalities: the width of the concatenated one-hot code.
    pub fn one_hot_width(&self) -> usize {
        self.cardinalities.iter().sum()
    }

    /// Lexicographic rank of `z` among all combinations.
    pub fn index_of(&self, z: &Combination) -> usize {
        z.0.iter()
            .zip(&self.cardinalities)
            .fold(0, |acc, (&v, &card)| acc * card + v)
    }

    pub fn check(&self, z: &Combination) -> Result<()> {
        if z.0.len() != self.k() {
            return Err(Error::Bounds(format!(
                "combination of length {} for K = {}",
                z.0.len(),
                self.k()
            )));
        }
        for (k, (&v, &card)) in z.0.iter().zip(&self.cardinalities).enumerate() {
            if v >= card {
                return Err(Error::Bounds(format!("component {k} value {v} >= {card}")));
            }
        }
        Ok(())
    }
}

/// One joint value of the components.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Combination(pub Vec<usize>);

impl Combination {
    pub fn values(&self) -> &[usize] {
        &self.0
    }

    pub fn get(&self, k: usize) -> usize {
        self.0[k]
    }
}

impl std::fmt::Display for Combination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", parts.join("-"))
    }
}

/// All combinations in lexicographic order (last component varies fastest).
pub fn enumerate_combinations(spec: &FactorSpec) -> Vec<Combination> {
    let mut out = Vec::with_capacity(spec.total_combinations());
    let mut z = vec![0usize; spec.k()];
    loop {
        out.push(Combination(z.clone()));
        let mut k = spec.k();
        loop {
            if k == 0 {
                return out;
            }
            k -= 1;
            z[k] += 1;
            if z[k] < spec.cardinalities[k] {
                break;
            }
            z[k] = 0;
        }
    }
}

/// Train/test partition in which every component value is seen in training
/// but the test combinations never are.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionalSplit {
    pub spec: FactorSpec,
    pub holdout_fraction: f64,
    pub seed: u64,
    pub train: Vec<Combination>,
    pub test: Vec<Combination>,
}

impl CompositionalSplit {
    /// Checks coverage, exclusion and non-emptiness; returns the first violation.
    pub fn validate(&self) -> Result<()> {
        if self.test.is_empty() {
            return Err(Error::Config("split has an empty test set".into()));
        }
        for z in self.train.iter().chain(&self.test) {
            self.spec.check(z)?;
        }
        if let Some(z) = self.test.iter().find(|z| self.train.contains(z)) {
            return Err(Error::Config(format!(
                "combination {z} is in both train and test"
            )));
        }
        for (k, &card) in self.spec.cardinalities().iter().enumerate() {
            for v in 0..card {
                if !self.train.iter().any(|z| z.get(k) == v) {
                    return Err(Error::Infeasible {
                        component: k,
                        value: v,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Holds out `round(fraction * N)` combinations, fewer if coverage demands.
///
/// Combinations are visited in seeded shuffled order and moved to the test
/// set unless that would leave some component value without a training
/// combination.
pub fn make_split(
    spec: &FactorSpec,
    holdout_fraction: f64,
    seed: u64,
) -> Result<CompositionalSplit> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::Param(format!(
            "holdout fraction must be in (0, 1), got {holdout_fraction}"
        )));
    }
    let all = enumerate_combinations(spec);
    let n = all.len();
    let target = (holdout_fraction * n as f64).round() as usize;
    if target == 0 {
        return Err(Error::Param(format!(
            "holdout fraction {holdout_fraction} of {n} combinations rounds to an empty test set"
        )));
    }
    if target >= n {
        return Err(Error::Infeasible {
            component: 0,
            value: 0,
        });
    }
    let mut counts: Vec<Vec<usize>> = spec
        .cardinalities()
        .iter()
        .map(|&card| vec![n / card; card])
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    RngState::new(seed).shuffle(&mut order);
    let mut held = vec![false; n];
    let mut moved = 0;
    for &i in &order {
        if moved == target {
            break;
        }
        let z = &all[i];
        if z.0.iter().enumerate().all(|(k, &v)| counts[k][v] > 1) {
            z.0.iter().enumerate().for_each(|(k, &v)| counts[k][v] -= 1);
            held[i] = true;
            moved += 1;
        }
    }
    let (test, train): (Vec<_>, Vec<_>) = all.into_iter().zip(&held).partition(|(_, &h)| h);
    let split = CompositionalSplit {
        spec: spec.clone(),
        holdout_fraction,
        seed,
        train: train.into_iter().map(|(z, _)| z).collect(),
        test: test.into_iter().map(|(z, _)| z).collect(),
    };
    split.validate()?;
    Ok(split)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    Labels,
    Render,
}

/// Fixed entangling network: one-hot codes -> tanh -> tanh.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixing {
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    passthrough: bool,
}

impl Mixing {
    /// Weights `N(0, gain^2 / fan_in)`, biases `N(0, 0.1^2)`.
    pub fn generate(in_dim: usize, out_dim: usize, gain: f64, seed: u64) -> Self {
        let hidden = 2 * in_dim;
        let mut rng = RngState::new(seed);
        let mut draw =
            |n: usize, std: f64| -> Vec<f64> { (0..n).map(|_| std * rng.normal()).collect() };
        let w1 = draw(in_dim * hidden, gain / (in_dim as f64).sqrt());
        let b1 = draw(hidden, 0.1);
        let w2 = draw(hidden * out_dim, gain / (hidden as f64).sqrt());
        let b2 = draw(out_dim, 0.1);
        Mixing {
            in_dim,
            hidden,
            out_dim,
            w1,
            b1,
            w2,
            b2,
            passthrough: false,
        }
    }

    /// Debug configuration: identity weights, no nonlinearity.
    pub fn passthrough(dim: usize) -> Self {
        Mixing {
            in_dim: dim,
            hidden: dim,
            out_dim: dim,
            w1: Vec::new(),
            b1: Vec::new(),
            w2: Vec::new(),
            b2: Vec::new(),
            passthrough: true,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn apply(&self, code: &[f64]) -> Vec<f64> {
        assert_eq!(code.len(), self.in_dim, "one-hot width");
        if self.passthrough {
            return code.to_vec();
        }
        let layer = |x: &[f64], w: &[f64], b: &[f64], out: usize| -> Vec<f64> {
            (0..out)
                .map(|j| {
                    (b[j]
                        + x.iter()
                            .enumerate()
                            .map(|(i, xi)| xi * w[i * out + j])
                            .sum::<f64>())
                    .tanh()
                })
                .collect()
        };
        let h = layer(code, &self.w1, &self.b1, self.hidden);
        layer(&h, &self.w2, &self.b2, self.out_dim)
    }
}

pub fn one_hot_code(spec: &FactorSpec, z: &Combination) -> Vec<f64> {
    let mut code = vec![0.0; spec.one_hot_width()];
    let mut offset = 0;
    for (&v, &card) in z.0.iter().zip(spec.cardinalities()) {
        code[offset + v] = 1.0;
        offset += card;
    }
    code
}

/// Entangled input for `z`: deterministic in `(z, mixing)`.
pub fn entangle(spec: &FactorSpec, z: &Combination, mixing: &Mixing) -> Vec<f64> {
    mixing.apply(&one_hot_code(spec, z))
}

/// Shape masks and colours for render mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderAssets {
    pub grid: usize,
    pub masks: Vec<Vec<f64>>,
    pub colors: Vec<[f64; 3]>,
}

const MAX_ASSET_ATTEMPTS: usize = 100_000;

impl RenderAssets {
    /// Binary masks with at least `G²/8` active pixels and pairwise Hamming
    /// distance at least `G²/4`; colours in the unit cube at pairwise
    /// distance at least 0.5.
    pub fn generate(n_shapes: usize, n_colors: usize, grid: usize, seed: u64) -> Result<Self> {
        let pixels = grid * grid;
        let mut rng = RngState::new(seed);
        let mut masks: Vec<Vec<f64>> = Vec::with_capacity(n_shapes);
        let mut attempts = 0;
        while masks.len() < n_shapes {
            attempts += 1;
            if attempts > MAX_ASSET_ATTEMPTS {
                return Err(Error::Config(format!(
                    "could not draw {n_shapes} distinct {grid}x{grid} masks"
                )));
            }
            let m: Vec<f64> = (0..pixels)
                .map(|_| if rng.uniform() < 0.5 { 1.0 } else { 0.0 })
                .collect();
            if !mask_is_admissible(&m, grid) {
                continue;
            }
            if masks.iter().all(|o| hamming(o, &m) * 4 >= pixels) {
                masks.push(m);
            }
        }
        let mut colors: Vec<[f64; 3]> = Vec::with_capacity(n_colors);
        attempts = 0;
        while colors.len() < n_colors {
            attempts += 1;
            if attempts > MAX_ASSET_ATTEMPTS {
                return Err(Error::Config(format!(
                    "could not draw {n_colors} distinct colours"
                )));
            }
            let c = [rng.uniform(), rng.uniform(), rng.uniform()];
            if colors.iter().all(|o| sq_dist(o, &c) >= 0.25) {
                colors.push(c);
            }
        }
        Ok(RenderAssets {
            grid,
            masks,
            colors,
        })
    }

    pub fn image_len(&self) -> usize {
        self.grid * self.grid * 3
    }

    /// `pixel[p * 3 + c] = mask[p] * rgb[c]`.
    pub fn compose(mask: &[f64], rgb: &[f64]) -> Vec<f64> {
        mask.iter()
            .flat_map(|m| rgb.iter().map(move |c| m * c))
            .collect()
    }

    pub fn render(&self, shape: usize, color: usize) -> Vec<f64> {
        RenderAssets::compose(&self.masks[shape], &self.colors[color])
    }
}

/// Rejects masks with fewer than `G²/8` active pixels.
pub fn mask_is_admissible(mask: &[f64], grid: usize) -> bool {
    let active = mask.iter().filter(|&&m| m > 0.5).count();
    active * 8 >= grid * grid
}

fn hamming(a: &[f64], b: &[f64]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Labels(Vec<usize>),
    Image(Vec<f64>),
}

/// Output for `z`: the labels themselves, or the rendered image.
pub fn target(
    z: &Combination,
    spec: &FactorSpec,
    mode: TaskMode,
    assets: Option<&RenderAssets>,
) -> Result<Target> {
    spec.check(z)?;
    match mode {
        TaskMode::Labels => Ok(Target::Labels(z.0.clone())),
        TaskMode::Render => {
            if spec.k() != 2 {
                return Err(Error::UnsupportedMode(format!(
                    "render mode needs K = 2, got {}",
                    spec.k()
                )));
            }
            let assets = assets
                .ok_or_else(|| Error::UnsupportedMode("render mode without assets".into()))?;
            Ok(Target::Image(assets.render(z.get(0), z.get(1))))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub names: Vec<String>,
    pub cardinalities: Vec<usize>,
    pub mode: TaskMode,
    pub mixing_seed: u64,
    pub sample_seed: u64,
    pub samples_per_combo: usize,
    pub input_noise: f64,
    /// Defaults to twice the one-hot width.
    pub input_dim: Option<usize>,
    pub mixing_gain: f64,
    pub grid: usize,
    /// Train samples per combination proportional to `1 + z_1`.
    pub skew_train: bool,
    /// Identity mixing (debug).
    pub passthrough: bool,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            names: vec!["shape".into(), "color".into()],
            cardinalities: vec![5, 5],
            mode: TaskMode::Labels,
            mixing_seed: 11,
            sample_seed: 12,
            samples_per_combo: 20,
            input_noise: 0.01,
            input_dim: None,
            mixing_gain: 2.0,
            grid: 8,
            skew_train: false,
            passthrough: false,
        }
    }
}

impl TaskConfig {
    pub fn spec(&self) -> Result<FactorSpec> {
        FactorSpec::new(self.names.clone(), self.cardinalities.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub combo: Combination,
    pub x: Vec<f64>,
    pub y: Target,
    pub seed: u64,
}

/// A generated task: factor spec, entangling map and render assets.
#[derive(Clone, Debug)]
pub struct TaskInstance {
    pub config: TaskConfig,
    pub spec: FactorSpec,
    pub mixing: Mixing,
    pub assets: Option<RenderAssets>,
    /// Noise-free input per combination, in lexicographic order.
    clean_inputs: Vec<Vec<f64>>,
}

/// Smallest pairwise distance an accepted entangling map must achieve.
pub const MIN_INPUT_SEPARATION: f64 = 1e-6;

impl TaskInstance {
    pub fn generate(config: &TaskConfig) -> Result<Self> {
        let spec = config.spec()?;
        if !(config.input_noise >= 0.0 && config.input_noise.is_finite()) {
            return Err(Error::Config(format!(
                "input_noise must be >= 0, got {}",
                config.input_noise
            )));
        }
        if config.samples_per_combo == 0 {
            return Err(Error::Config("samples_per_combo must be positive".into()));
        }
        let width = spec.one_hot_width();
        let mixing = if config.passthrough {
            if let Some(d) = config.input_dim.filter(|&d| d != width) {
                return Err(Error::Config(format!(
                    "passthrough mixing needs input_dim = {width}, got {d}"
                )));
            }
            Mixing::passthrough(width)
        } else {
            let dim = config.input_dim.unwrap_or(2 * width);
            if dim == 0 {
                return Err(Error::Config("input_dim must be positive".into()));
            }
            Mixing::generate(width, dim, config.mixing_gain, config.mixing_seed)
        };
        let assets = match config.mode {
            TaskMode::Labels => None,
            TaskMode::Render => {
                if spec.k() != 2 {
                    return Err(Error::UnsupportedMode(format!(
                        "render mode needs K = 2, got {}",
                        spec.k()
                    )));
                }
                let seed = derive_seed(config.mixing_seed, 0xA55E7);
                Some(RenderAssets::generate(
                    spec.cardinalities()[0],
                    spec.cardinalities()[1],
                    config.grid,
                    seed,
                )?)
            }
        };
        let combos = enumerate_combinations(&spec);
        let clean_inputs: Vec<Vec<f64>> =
            combos.iter().map(|z| entangle(&spec, z, &mixing)).collect();
        let min_dist = min_pairwise_distance(&clean_inputs);
        if min_dist <= MIN_INPUT_SEPARATION {
            return Err(Error::Config(format!(
                "entangling map with seed {} is not injective (min distance {min_dist:e})",
                config.mixing_seed
            )));
        }
        Ok(TaskInstance {
            config: config.clone(),
            spec,
            mixing,
            assets,
            clean_inputs,
        })
    }

    pub fn mode(&self) -> TaskMode {
        self.config.mode
    }

    pub fn input_dim(&self) -> usize {
        self.mixing.out_dim()
    }

    pub fn clean_input(&self, z: &Combination) -> &[f64] {
        &self.clean_inputs[self.spec.index_of(z)]
    }

    pub fn target(&self, z: &Combination) -> Result<Target> {
        target(z, &self.spec, self.config.mode, self.assets.as_ref())
    }

    /// Output length: classes per head in labels mode, image length in render mode.
    pub fn output_dims(&self) -> Vec<usize> {
        match &self.assets {
            None => self.spec.cardinalities().to_vec(),
            Some(a) => vec![a.image_len()],
        }
    }

    fn samples_for(&self, z: &Combination, skew: bool) -> usize {
        let base = self.config.samples_per_combo;
        if !skew {
            return base;
        }
        let v1 = self.spec.cardinalities()[0] as f64;
        let weight = (1.0 + z.get(0) as f64) / ((v1 + 1.0) / 2.0);
        ((base as f64 * weight).round() as usize).max(1)
    }

    fn samples(&self, combos: &[Combination], skew: bool) -> Result<Vec<Sample>> {
        let mut out = Vec::new();
        for z in combos {
            let ci = self.spec.index_of(z) as u64;
            let y = self.target(z)?;
            for s in 0..self.samples_for(z, skew) {
                let seed = derive_seed(derive_seed(self.config.sample_seed, ci), s as u64);
                let mut rng = RngState::new(seed);
                let x = self
                    .clean_input(z)
                    .iter()
                    .map(|v| v + self.config.input_noise * rng.normal())
                    .collect();
                out.push(Sample {
                    id: out.len(),
                    combo: z.clone(),
                    x,
                    y: y.clone(),
                    seed,
                });
            }
        }
        Ok(out)
    }

    pub fn train_samples(&self, split: &CompositionalSplit) -> Result<Vec<Sample>> {
        self.samples(&split.train, self.config.skew_train)
    }

    pub fn test_samples(&self, split: &CompositionalSplit) -> Result<Vec<Sample>> {
        self.samples(&split.test, false)
    }
}

pub fn min_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            best = best.min(sq_dist(&points[i], &points[j]).sqrt());
        }
    }
    best
}
