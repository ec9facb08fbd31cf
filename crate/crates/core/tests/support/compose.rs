//! Seeded random compositions of every graph primitive, with a central
//! finite-difference oracle that rebuilds the graph from plain tensors.

#![allow(dead_code)]

use cglab_core::autodiff::{Graph, RngState, Tensor, Var};

/// Leaf order: x, w1, b1, w2, offsets are constants.
pub struct Composition {
    pub seed: u64,
    pub leaves: Vec<Tensor>,
    batch: usize,
    width: usize,
    split: usize,
    tanh_first: bool,
    repeats: usize,
    alpha: f64,
    offsets: Vec<f64>,
    targets: Vec<usize>,
    image_target: Tensor,
    noise_seed: u64,
}

fn random_tensor(rng: &mut RngState, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.uniform_range(-scale, scale)).collect(),
    )
    .unwrap()
}

impl Composition {
    /// Redraws until every relu input sits well away from its kink.
    pub fn generate(seed: u64) -> Self {
        let mut attempt = 0u64;
        loop {
            let c = Self::draw(seed, attempt);
            if c.relu_margin() > 1e-3 {
                return c;
            }
            attempt += 1;
        }
    }

    fn draw(seed: u64, attempt: u64) -> Self {
        let mut rng = RngState::new(seed.wrapping_mul(1_000_003).wrapping_add(attempt));
        let batch = 2 + rng.below(2);
        let inputs = 2 + rng.below(3);
        let width = 3 + rng.below(3);
        let classes = 2 + rng.below(2);
        let split = 1 + rng.below(width - 1);
        let leaves = vec![
            random_tensor(&mut rng, vec![batch, inputs], 1.0),
            random_tensor(&mut rng, vec![inputs, width], 1.0),
            random_tensor(&mut rng, vec![width], 0.5),
            random_tensor(&mut rng, vec![width, classes], 1.0),
        ];
        let offsets = (0..batch * width)
            .map(|_| rng.uniform_range(-0.5, 0.5))
            .collect();
        let targets = (0..batch).map(|_| rng.below(classes)).collect();
        let outer_len = 2 * (width - 2);
        Composition {
            seed,
            batch,
            width,
            split,
            tanh_first: rng.below(2) == 0,
            repeats: 1 + rng.below(2),
            alpha: rng.uniform_range(0.0, 0.3),
            offsets,
            targets,
            image_target: random_tensor(&mut rng, vec![batch, outer_len], 1.0),
            noise_seed: rng.below(1 << 30) as u64,
            leaves,
        }
    }

    pub fn num_params(&self) -> usize {
        self.leaves.iter().map(Tensor::len).sum()
    }

    /// Builds the loss on `g`; returns it with every relu input.
    pub fn build(&self, g: &mut Graph, vars: &[Var]) -> (Var, Vec<Var>) {
        let (x, w1, b1, w2) = (vars[0], vars[1], vars[2], vars[3]);
        let mut relu_inputs = Vec::new();
        let z = g.matmul(x, w1).unwrap();
        let z = g.add(z, b1).unwrap();
        let mut h = g.shift(z, &self.offsets).unwrap();
        for _ in 0..self.repeats {
            let left = g.slice(h, 0..self.split).unwrap();
            let right = g.slice(h, self.split..self.width).unwrap();
            let (left, right) = if self.tanh_first {
                (g.tanh(left), g.sigmoid(right))
            } else {
                (g.sigmoid(left), g.tanh(right))
            };
            let squashed = g.concat(&[left, right]).unwrap();
            relu_inputs.push(h);
            let r = g.relu(h);
            let p = g.mul(squashed, r).unwrap();
            let half = g.scale(z, 0.5);
            h = g.sub(p, half).unwrap();
        }
        let mut rng = RngState::new(self.noise_seed);
        let n = g.gaussian_noise(h, self.alpha, &mut rng, true).unwrap();
        let logits = g.matmul(n, w2).unwrap();
        let ce = g.softmax_cross_entropy(logits, &self.targets).unwrap();
        let a = g.slice(n, 0..2).unwrap();
        let b = g.slice(n, 2..self.width).unwrap();
        let outer = g.outer_rows(a, b).unwrap();
        let target = g.constant(self.image_target.clone());
        let recon = g.mse(outer, target).unwrap();
        let norm = g.l2_sq(n);
        let norm = g.scale(norm, 0.1);
        let total = g.sum(n);
        let total = g.scale(total, 0.01);
        let loss = g.add(ce, recon).unwrap();
        let loss = g.add(loss, norm).unwrap();
        (g.add(loss, total).unwrap(), relu_inputs)
    }

    fn relu_margin(&self) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.leaves.iter().map(|t| g.constant(t.clone())).collect();
        let (_, relu_inputs) = self.build(&mut g, &vars);
        relu_inputs
            .iter()
            .flat_map(|&v| g.value(v).values().to_vec())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }

    pub fn loss_at(&self, leaves: &[Tensor]) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.constant(t.clone())).collect();
        let (loss, _) = self.build(&mut g, &vars);
        g.value(loss).item().unwrap()
    }

    pub fn reverse_mode(&self) -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.leaves.iter().map(|t| g.param(t.clone())).collect();
        let (loss, _) = self.build(&mut g, &vars);
        g.backward(loss).unwrap();
        vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect()
    }
}

/// Central differences with step `1e-6 * max(1, |x|)`.
pub fn finite_differences(f: impl Fn(&[Tensor]) -> f64, leaves: &[Tensor]) -> Vec<Vec<f64>> {
    let mut work = leaves.to_vec();
    let mut out = Vec::with_capacity(leaves.len());
    for t in 0..leaves.len() {
        let mut grads = Vec::with_capacity(leaves[t].len());
        for i in 0..leaves[t].len() {
            let x = leaves[t].values()[i];
            let h = 1e-6 * x.abs().max(1.0);
            work[t].values_mut()[i] = x + h;
            let up = f(&work);
            work[t].values_mut()[i] = x - h;
            let down = f(&work);
            work[t].values_mut()[i] = x;
            grads.push((up - down) / (2.0 * h));
        }
        out.push(grads);
    }
    out
}

/// `|a - n| / max(|a|, |n|, 1e-6)`, maximized over every entry.
pub fn max_relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    analytic
        .iter()
        .flatten()
        .zip(numeric.iter().flatten())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
