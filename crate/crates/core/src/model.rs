//! Encoder `g`, reverse decoder `h` and factored decoder `f`.
//!
//! The factored decoder owns one head per component. Head `i` is wired to
//! the `i`-th slice of the hidden code and nothing else, so output component
//! `i` cannot depend on any other slice. The entangled variant replaces the
//! heads with one network over the full hidden code and exists as an
//! ablation baseline.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, RngState, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::tasks::{TaskInstance, TaskMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Factored,
    Entangled,
}

/// Which hidden code the reverse decoder sees during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReverseInput {
    Noised,
    Clean,
}

/// Noise weight `alpha` and norm-penalty weight `lambda`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntRegConfig {
    pub alpha: f64,
    pub lambda: f64,
}

impl Default for EntRegConfig {
    fn default() -> Self {
        EntRegConfig {
            alpha: 0.1,
            lambda: 1e-3,
        }
    }
}

impl EntRegConfig {
    pub const OFF: EntRegConfig = EntRegConfig {
        alpha: 0.0,
        lambda: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("lambda", self.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum OutputLayout {
    /// Class count per component.
    Labels(Vec<usize>),
    /// `grid × grid` RGB image composed from a shape mask and a colour.
    Render { grid: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub k: usize,
    pub d_h: usize,
    pub input_dim: usize,
    /// Hidden width of `g` and `h`; 0 drops the hidden layer.
    pub width: usize,
    /// Hidden width of each decoder head; 0 drops the hidden layer.
    pub head_width: usize,
    pub output: OutputLayout,
    pub decoder: DecoderKind,
    pub reverse_input: ReverseInput,
    pub entreg: EntRegConfig,
}

impl ModelConfig {
    /// Defaults (`d_h = 8`, `width = 64`, `head_width = 32`) sized for `task`.
    pub fn for_task(task: &TaskInstance) -> Self {
        let output = match task.mode() {
            TaskMode::Labels => OutputLayout::Labels(task.spec.cardinalities().to_vec()),
            TaskMode::Render => OutputLayout::Render {
                grid: task.config.grid,
            },
        };
        ModelConfig {
            k: task.spec.k(),
            d_h: 8,
            input_dim: task.input_dim(),
            width: 64,
            head_width: 32,
            output,
            decoder: DecoderKind::Factored,
            reverse_input: ReverseInput::Noised,
            entreg: EntRegConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.d_h == 0 || self.input_dim == 0 {
            return Err(Error::Config(format!(
                "k, d_h and input_dim must be positive (k={}, d_h={}, input_dim={})",
                self.k, self.d_h, self.input_dim
            )));
        }
        match &self.output {
            OutputLayout::Labels(cards) => {
                if cards.len() != self.k || cards.iter().any(|&c| c < 2) {
                    return Err(Error::Config(format!(
                        "label layout {cards:?} for k = {}",
                        self.k
                    )));
                }
            }
            OutputLayout::Render { grid } => {
                if self.k != 2 || *grid == 0 {
                    return Err(Error::Config(format!(
                        "render layout needs k = 2 and grid > 0 (k = {})",
                        self.k
                    )));
                }
            }
        }
        self.entreg.validate()
    }

    pub fn hidden_dim(&self) -> usize {
        self.k * self.d_h
    }

    /// Output width of head `i` in the factored decoder.
    fn head_out(&self, i: usize) -> usize {
        match &self.output {
            OutputLayout::Labels(cards) => cards[i],
            OutputLayout::Render { grid } => {
                if i == 0 {
                    grid * grid
                } else {
                    3
                }
            }
        }
    }

    fn entangled_out(&self) -> usize {
        match &self.output {
            OutputLayout::Labels(cards) => cards.iter().sum(),
            OutputLayout::Render { grid } => grid * grid * 3,
        }
    }

    /// Stable textual form hashed into checkpoints.
    pub fn canonical(&self) -> String {
        let output = match &self.output {
            OutputLayout::Labels(c) => format!("labels{c:?}"),
            OutputLayout::Render { grid } => format!("render{grid}"),
        };
        format!(
            "k={};d_h={};input_dim={};width={};head_width={};output={};decoder={:?};reverse_input={:?};alpha={};lambda={}",
            self.k,
            self.d_h,
            self.input_dim,
            self.width,
            self.head_width,
            output,
            self.decoder,
            self.reverse_input,
            self.entreg.alpha,
            self.entreg.lambda
        )
    }

    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.canonical().as_bytes());
        hash.iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// Network a parameter tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Owner {
    Encoder,
    Reverse,
    Head(usize),
    EntangledDecoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub owner: Owner,
    pub tensor: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Linear {
    w: usize,
    b: usize,
}

/// Stack of affine layers with tanh between them and a linear output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    layers: Vec<Linear>,
    owner: Owner,
}

impl Mlp {
    fn build(
        params: &mut Vec<ParamEntry>,
        rng: &mut RngState,
        prefix: &str,
        owner: Owner,
        dims: &[usize],
    ) -> Mlp {
        let mut layers = Vec::new();
        for (l, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let s = xavier_bound(fan_in, fan_out);
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.uniform_range(-s, s))
                .collect();
            params.push(ParamEntry {
                name: format!("{prefix}.{l}.w"),
                owner,
                tensor: Tensor::new(vec![fan_in, fan_out], w).expect("positive dims"),
            });
            params.push(ParamEntry {
                name: format!("{prefix}.{l}.b"),
                owner,
                tensor: Tensor::zeros(vec![fan_out]).expect("positive dims"),
            });
            layers.push(Linear {
                w: params.len() - 2,
                b: params.len() - 1,
            });
        }
        Mlp { layers, owner }
    }

    fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = g.matmul(h, vars[layer.w])?;
            h = g.add(z, vars[layer.b])?;
            if i + 1 < self.layers.len() {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }

    fn param_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.iter().flat_map(|l| [l.w, l.b])
    }
}

/// `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn dims(input: usize, hidden: usize, output: usize) -> Vec<usize> {
    if hidden == 0 {
        vec![input, output]
    } else {
        vec![input, hidden, output]
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Decoder {
    Factored(Vec<Mlp>),
    Entangled(Mlp),
}

/// Hidden code split into per-component slices.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Full encoder output `g(X)`.
    pub full: Var,
    pub clean: Vec<Var>,
    /// Slices after noise injection; equal to `clean` outside training.
    pub noised: Vec<Var>,
}

/// Decoder output on a graph.
#[derive(Clone, Debug)]
pub enum Decoded {
    /// Logits per component.
    Labels(Vec<Var>),
    /// Rendered image, plus the (mask probability, colour) parts for the
    /// factored decoder.
    Render {
        image: Var,
        parts: Option<(Var, Var)>,
    },
}

/// Parameters of `g`, `h` and `f`, plus their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub seed: u64,
    params: Vec<ParamEntry>,
    encoder: Mlp,
    reverse: Mlp,
    decoder: Decoder,
}

impl ModelBundle {
    /// Weights uniform in `(-s, s)` with `s = sqrt(6 / (fan_in + fan_out))`,
    /// biases zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngState::new(seed);
        let mut params = Vec::new();
        let hd = config.hidden_dim();
        let encoder = Mlp::build(
            &mut params,
            &mut rng,
            "g",
            Owner::Encoder,
            &dims(config.input_dim, config.width, hd),
        );
        let reverse = Mlp::build(
            &mut params,
            &mut rng,
            "h",
            Owner::Reverse,
            &dims(hd, config.width, config.input_dim),
        );
        let decoder = match config.decoder {
            DecoderKind::Factored => Decoder::Factored(
                (0..config.k)
                    .map(|i| {
                        let d = dims(config.d_h, config.head_width, config.head_out(i));
                        Mlp::build(
                            &mut params,
                            &mut rng,
                            &format!("f.head{i}"),
                            Owner::Head(i),
                            &d,
                        )
                    })
                    .collect(),
            ),
            DecoderKind::Entangled => {
                let d = dims(hd, config.head_width * config.k, config.entangled_out());
                Decoder::Entangled(Mlp::build(
                    &mut params,
                    &mut rng,
                    "f.full",
                    Owner::EntangledDecoder,
                    &d,
                ))
            }
        };
        Ok(ModelBundle {
            config,
            seed,
            params,
            encoder,
            reverse,
            decoder,
        })
    }

    pub fn params(&self) -> &[ParamEntry] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.params
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.tensor)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Puts every parameter on `g` as a gradient-receiving leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.param(p.tensor.clone()))
            .collect()
    }

    /// Puts every parameter on `g` as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.constant(p.tensor.clone()))
            .collect()
    }

    /// Adds the leaf gradients from `g` into the parameter tensors.
    pub fn accumulate_grads(&mut self, g: &Graph, vars: &[Var]) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if let Some(grad) = g.grad(v) {
                p.tensor.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// `g(X)` split into `K` slices, then entropy-regularization noise.
    pub fn encode(
        &self,
        g: &mut Graph,
        vars: &[Var],
        x: Var,
        training: bool,
        rng: &mut RngState,
    ) -> Result<Encoded> {
        let cols = g.value(x).cols();
        if cols != self.config.input_dim {
            return Err(shape_err(format!(
                "input width {cols}, model expects {}",
                self.config.input_dim
            )));
        }
        let full = self.encoder.forward(g, vars, x)?;
        let d = self.config.d_h;
        let clean = (0..self.config.k)
            .map(|i| g.slice(full, i * d..(i + 1) * d))
            .collect::<Result<Vec<_>>>()?;
        let noised = clean
            .iter()
            .map(|&h| g.gaussian_noise(h, self.config.entreg.alpha, rng, training))
            .collect::<Result<Vec<_>>>()?;
        Ok(Encoded {
            full,
            clean,
            noised,
        })
    }

    fn check_slices(&self, g: &Graph, h: &[Var]) -> Result<()> {
        if h.len() != self.config.k {
            return Err(shape_err(format!(
                "{} hidden slices for k = {}",
                h.len(),
                self.config.k
            )));
        }
        if let Some(bad) = h.iter().find(|&&v| g.value(v).cols() != self.config.d_h) {
            return Err(shape_err(format!(
                "hidden slice of width {} (d_h = {})",
                g.value(*bad).cols(),
                self.config.d_h
            )));
        }
        Ok(())
    }

    /// Decoder `f`. For the factored decoder, head `i` reads only `h[i]`.
    pub fn decode_f(&self, g: &mut Graph, vars: &[Var], h: &[Var]) -> Result<Decoded> {
        self.check_slices(g, h)?;
        match (&self.decoder, &self.config.output) {
            (Decoder::Factored(heads), OutputLayout::Labels(_)) => {
                let logits = heads
                    .iter()
                    .zip(h)
                    .map(|(head, &hi)| head.forward(g, vars, hi))
                    .collect::<Result<_>>()?;
                Ok(Decoded::Labels(logits))
            }
            (Decoder::Factored(heads), OutputLayout::Render { .. }) => {
                let mask_logits = heads[0].forward(g, vars, h[0])?;
                let rgb = heads[1].forward(g, vars, h[1])?;
                let mask = g.sigmoid(mask_logits);
                let image = g.outer_rows(mask, rgb)?;
                Ok(Decoded::Render {
                    image,
                    parts: Some((mask, rgb)),
                })
            }
            (Decoder::Entangled(net), OutputLayout::Labels(cards)) => {
                let full_h = g.concat(h)?;
                let out = net.forward(g, vars, full_h)?;
                let mut offset = 0;
                let mut logits = Vec::with_capacity(cards.len());
                for &c in cards {
                    logits.push(g.slice(out, offset..offset + c)?);
                    offset += c;
                }
                Ok(Decoded::Labels(logits))
            }
            (Decoder::Entangled(net), OutputLayout::Render { .. }) => {
                let full_h = g.concat(h)?;
                let image = net.forward(g, vars, full_h)?;
                Ok(Decoded::Render { image, parts: None })
            }
        }
    }

    /// Reverse decoder `h` on the concatenated hidden code.
    pub fn decode_h(&self, g: &mut Graph, vars: &[Var], h: &[Var]) -> Result<Var> {
        self.check_slices(g, h)?;
        let full_h = g.concat(h)?;
        self.reverse.forward(g, vars, full_h)
    }

    /// Owner of every parameter, by name.
    pub fn owners(&self) -> Vec<(&str, Owner)> {
        self.params
            .iter()
            .map(|p| (p.name.as_str(), p.owner))
            .collect()
    }

    /// Checks that every network touches only parameters it owns and that
    /// no parameter is shared between networks.
    pub fn audit_partition(&self) -> Result<()> {
        let mut used = vec![None::<Owner>; self.params.len()];
        let mut nets: Vec<&Mlp> = vec![&self.encoder, &self.reverse];
        match &self.decoder {
            Decoder::Factored(heads) => nets.extend(heads.iter()),
            Decoder::Entangled(net) => nets.push(net),
        }
        for net in nets {
            for idx in net.param_indices() {
                if self.params[idx].owner != net.owner {
                    return Err(Error::Config(format!(
                        "{} owned by {:?} but used by {:?}",
                        self.params[idx].name, self.params[idx].owner, net.owner
                    )));
                }
                if let Some(prev) = used[idx].replace(net.owner) {
                    return Err(Error::Config(format!(
                        "{} shared by {prev:?} and {:?}",
                        self.params[idx].name, net.owner
                    )));
                }
            }
        }
        Ok(())
    }

    /// Serializes all parameters in the `CGLAB v1` text format.
    ///
    /// ```text
    /// CGLAB v1
    /// <name>
    /// <dim> <dim> ...
    /// <value> <value> ...        (shortest round-trip decimals)
    /// ...                        (three lines per tensor)
    /// seed <u64> digest <hex>
    /// ```
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::from("CGLAB v1\n");
        for p in &self.params {
            out.push_str(&p.name);
            out.push('\n');
            let shape: Vec<String> = p.tensor.shape().iter().map(|d| d.to_string()).collect();
            out.push_str(&shape.join(" "));
            out.push('\n');
            let values: Vec<String> = p.tensor.values().iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&values.join(" "));
            out.push('\n');
        }
        let _ = writeln!(out, "seed {} digest {}", self.seed, self.config.digest());
        out
    }

    /// Rebuilds a bundle for `config` and fills it from checkpoint text.
    pub fn from_checkpoint(config: ModelConfig, text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let mut lines = text.lines();
        if lines.next() != Some("CGLAB v1") {
            return Err(bad("missing CGLAB v1 header".into()));
        }
        let body: Vec<&str> = lines.collect();
        let (footer, tensors) = body
            .split_last()
            .ok_or_else(|| bad("empty checkpoint".into()))?;
        let parts: Vec<&str> = footer.split_whitespace().collect();
        let (seed, digest) = match parts.as_slice() {
            ["seed", s, "digest", d] => {
                (s.parse::<u64>().map_err(|e| bad(format!("seed: {e}")))?, *d)
            }
            _ => return Err(bad(format!("malformed footer {footer:?}"))),
        };
        if digest != config.digest() {
            return Err(bad(format!(
                "config digest {digest} does not match {}",
                config.digest()
            )));
        }
        let mut bundle = ModelBundle::init(config, seed)?;
        if tensors.len() != 3 * bundle.params.len() {
            return Err(bad(format!(
                "{} tensor lines for {} parameters",
                tensors.len(),
                bundle.params.len()
            )));
        }
        for (p, chunk) in bundle.params.iter_mut().zip(tensors.chunks(3)) {
            if chunk[0] != p.name {
                return Err(bad(format!("expected {}, found {}", p.name, chunk[0])));
            }
            let shape = chunk[1]
                .split_whitespace()
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(format!("{}: shape: {e}", p.name)))?;
            if shape != p.tensor.shape() {
                return Err(bad(format!(
                    "{}: shape {shape:?}, expected {:?}",
                    p.name,
                    p.tensor.shape()
                )));
            }
            let values = chunk[2]
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(format!("{}: values: {e}", p.name)))?;
            p.tensor = Tensor::new(shape, values).map_err(|e| bad(format!("{}: {e}", p.name)))?;
        }
        Ok(bundle)
    }
}

/// Plain forward pass outputs as values.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Labels(Vec<Tensor>),
    Render {
        image: Tensor,
        parts: Option<(Tensor, Tensor)>,
    },
}

impl Decoded {
    pub fn values(&self, g: &Graph) -> Prediction {
        match self {
            Decoded::Labels(l) => {
                Prediction::Labels(l.iter().map(|&v| g.value(v).clone()).collect())
            }
            Decoded::Render { image, parts } => Prediction::Render {
                image: g.value(*image).clone(),
                parts: parts.map(|(m, c)| (g.value(m).clone(), g.value(c).clone())),
            },
        }
    }
}

/// Noise-free `f(g(X))` and the clean hidden slices for a batch of inputs.
pub fn forward_plain(
    bundle: &ModelBundle,
    inputs: &[Vec<f64>],
) -> Result<(Prediction, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars = bundle.bind_frozen(&mut g);
    let x = g.constant(Tensor::from_rows(inputs)?);
    let mut rng = RngState::new(0);
    let enc = bundle.encode(&mut g, &vars, x, false, &mut rng)?;
    let out = bundle.decode_f(&mut g, &vars, &enc.clean)?;
    let hidden = enc.clean.iter().map(|&v| g.value(v).clone()).collect();
    Ok((out.values(&g), hidden))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::TaskConfig;

    fn labels_config() -> ModelConfig {
        ModelConfig {
            k: 2,
            d_h: 4,
            input_dim: 6,
            width: 8,
            head_width: 5,
            output: OutputLayout::Labels(vec![3, 4]),
            decoder: DecoderKind::Factored,
            reverse_input: ReverseInput::Noised,
            entreg: EntRegConfig::default(),
        }
    }

    fn random_rows(rng: &mut RngState, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.normal()).collect())
            .collect()
    }

    #[test]
    fn inference_mode_encode_is_noise_free() {
        let b = ModelBundle::init(labels_config(), 1).unwrap();
        let mut rng = RngState::new(5);
        let mut g = Graph::new();
        let vars = b.bind(&mut g);
        let x = g.constant(Tensor::from_rows(&random_rows(&mut rng, 3, 6)).unwrap());
        let enc = b.encode(&mut g, &vars, x, false, &mut rng).unwrap();
        for (c, n) in enc.clean.iter().zip(&enc.noised) {
            assert_eq!(g.value(*c).values(), g.value(*n).values());
        }
        let cat = g.concat(&enc.clean).unwrap();
        assert_eq!(g.value(cat).values(), g.value(enc.full).values());

        let train = b.encode(&mut g, &vars, x, true, &mut rng).unwrap();
        assert_ne!(
            g.value(train.noised[0]).values(),
            g.value(train.clean[0]).values()
        );
    }

    #[test]
    fn zero_alpha_encode_identical_across_modes() {
        let mut cfg = labels_config();
        cfg.entreg.alpha = 0.0;
        let b = ModelBundle::init(cfg, 1).unwrap();
        let mut rng = RngState::new(5);
        let mut g = Graph::new();
        let vars = b.bind(&mut g);
        let x = g.constant(Tensor::from_rows(&random_rows(&mut rng, 3, 6)).unwrap());
        let a = b.encode(&mut g, &vars, x, true, &mut rng).unwrap();
        let c = b.encode(&mut g, &vars, x, false, &mut rng).unwrap();
        for (p, q) in a.noised.iter().zip(&c.noised) {
            assert_eq!(g.value(*p).values(), g.value(*q).values());
        }
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let b = ModelBundle::init(labels_config(), 1).unwrap();
        let mut g = Graph::new();
        let vars = b.bind(&mut g);
        let x = g.constant(Tensor::zeros(vec![2, 5]).unwrap());
        assert!(matches!(
            b.encode(&mut g, &vars, x, false, &mut RngState::new(0)),
            Err(Error::Shape(_))
        ));
        let h = g.constant(Tensor::zeros(vec![2, 4]).unwrap());
        assert!(matches!(
            b.decode_f(&mut g, &vars, &[h]),
            Err(Error::Shape(_))
        ));
    }

    fn head_outputs(b: &ModelBundle, h: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        let vars = b.bind_frozen(&mut g);
        let hv: Vec<Var> = h
            .iter()
            .map(|rows| g.constant(Tensor::from_rows(rows).unwrap()))
            .collect();
        match b.decode_f(&mut g, &vars, &hv).unwrap() {
            Decoded::Labels(l) => l.iter().map(|&v| g.value(v).values().to_vec()).collect(),
            Decoded::Render {
                parts: Some((m, c)),
                ..
            } => {
                vec![g.value(m).values().to_vec(), g.value(c).values().to_vec()]
            }
            Decoded::Render { parts: None, .. } => unreachable!(),
        }
    }

    #[test]
    fn perturbing_other_slice_leaves_head_bitwise() {
        let b = ModelBundle::init(labels_config(), 3).unwrap();
        let mut rng = RngState::new(9);
        let base = vec![random_rows(&mut rng, 2, 4), random_rows(&mut rng, 2, 4)];
        let out = head_outputs(&b, &base);
        let mut pert = base.clone();
        pert[1] = random_rows(&mut rng, 2, 4);
        let out2 = head_outputs(&b, &pert);
        assert_eq!(out[0], out2[0]);
        assert_ne!(out[1], out2[1]);
    }

    #[test]
    fn render_color_head_ignores_shape_slice() {
        let task = TaskInstance::generate(&TaskConfig {
            mode: TaskMode::Render,
            ..TaskConfig::default()
        })
        .unwrap();
        let b = ModelBundle::init(ModelConfig::for_task(&task), 3).unwrap();
        let mut rng = RngState::new(9);
        let base = vec![random_rows(&mut rng, 2, 8), random_rows(&mut rng, 2, 8)];
        let mut pert = base.clone();
        pert[0] = random_rows(&mut rng, 2, 8);
        let (a, c) = (head_outputs(&b, &base), head_outputs(&b, &pert));
        assert_eq!(a[1], c[1]);
        assert_ne!(a[0], c[0]);
    }

    #[test]
    fn zero_heads_give_uniform_probabilities() {
        let mut b = ModelBundle::init(labels_config(), 3).unwrap();
        b.params_mut()
            .iter_mut()
            .filter(|p| matches!(p.owner, Owner::Head(_)))
            .for_each(|p| {
                p.tensor.values_mut().iter_mut().for_each(|v| *v = 0.0);
            });
        let mut rng = RngState::new(1);
        let out = head_outputs(
            &b,
            &[random_rows(&mut rng, 2, 4), random_rows(&mut rng, 2, 4)],
        );
        assert!(out.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_h_shape_and_purity() {
        let b = ModelBundle::init(labels_config(), 4).unwrap();
        let mut rng = RngState::new(2);
        let rows = [random_rows(&mut rng, 3, 4), random_rows(&mut rng, 3, 4)];
        let run = || {
            let mut g = Graph::new();
            let vars = b.bind_frozen(&mut g);
            let hv: Vec<Var> = rows
                .iter()
                .map(|r| g.constant(Tensor::from_rows(r).unwrap()))
                .collect();
            let x = b.decode_h(&mut g, &vars, &hv).unwrap();
            g.value(x).clone()
        };
        let (a, c) = (run(), run());
        assert_eq!(a, c);
        assert_eq!(a.shape(), &[3, 6]);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = ModelBundle::init(labels_config(), 10).unwrap();
        let b = ModelBundle::init(labels_config(), 10).unwrap();
        let c = ModelBundle::init(labels_config(), 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
        for p in a.params() {
            if p.name.ends_with(".w") {
                let s = xavier_bound(p.tensor.shape()[0], p.tensor.shape()[1]);
                assert!(p.tensor.values().iter().all(|v| v.abs() < s));
            } else {
                assert!(p.tensor.values().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn partition_audit_passes_for_both_decoders() {
        let a = ModelBundle::init(labels_config(), 1).unwrap();
        a.audit_partition().unwrap();
        let heads: Vec<Owner> = a
            .owners()
            .iter()
            .map(|(_, o)| *o)
            .filter(|o| matches!(o, Owner::Head(_)))
            .collect();
        assert_eq!(heads.len(), 8);
        let mut cfg = labels_config();
        cfg.decoder = DecoderKind::Entangled;
        ModelBundle::init(cfg, 1)
            .unwrap()
            .audit_partition()
            .unwrap();
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let a = ModelBundle::init(labels_config(), 21).unwrap();
        let text = a.to_checkpoint();
        assert!(text.starts_with("CGLAB v1\n"));
        let b = ModelBundle::from_checkpoint(labels_config(), &text).unwrap();
        assert_eq!(a, b);

        let mut other = labels_config();
        other.d_h = 5;
        assert!(matches!(
            ModelBundle::from_checkpoint(other, &text),
            Err(Error::Checkpoint(_))
        ));
        assert!(ModelBundle::from_checkpoint(labels_config(), "nope").is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = labels_config();
        c.d_h = 0;
        assert!(matches!(ModelBundle::init(c, 0), Err(Error::Config(_))));
        let mut c = labels_config();
        c.entreg.alpha = -1.0;
        assert!(ModelBundle::init(c, 0).is_err());
        let mut c = labels_config();
        c.output = OutputLayout::Labels(vec![3]);
        assert!(ModelBundle::init(c, 0).is_err());
    }
}
