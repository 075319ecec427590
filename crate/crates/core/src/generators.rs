//! Frozen differentiable generators mapping noise (plus an optional
//! condition) to outputs.
//!
//! Three variants share one representation, a stack of dense layers:
//!
//! * `affine`: a single identity-activated layer `x = A x0 + b`;
//! * `mlp`: hidden layers with a smooth activation and a linear readout;
//! * `image_decoder`: an MLP whose `H·W·3` outputs are squashed into `[0, 1]`
//!   by a sigmoid. Pixels are laid out channel-major (all red values, then
//!   green, then blue).
//!
//! Conditioning is input concatenation `[x0, c]`. Weights are immutable once
//! constructed; the only way to obtain different weights is to build a new
//! generator.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hypernet::LoraNodes;
use crate::numcore::{self, Activation, Graph, NodeId, Tensor};

fn default_activation() -> Activation {
    Activation::Tanh
}
fn default_bias_std() -> f64 {
    1.0
}
fn default_mix() -> f64 {
    0.5
}
fn default_damping() -> f64 {
    0.8
}

/// Generator description as it appears in the experiment config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// `affine`, `mlp` or `image_decoder`.
    pub variant: String,
    pub latent_dim: usize,
    /// Derived for `affine` (defaults to `latent_dim`) and `image_decoder`
    /// (`height·width·3`) when left at zero.
    #[serde(default)]
    pub output_dim: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Zero means unconditional.
    #[serde(default)]
    pub condition_dim: usize,
    #[serde(default)]
    pub height: usize,
    #[serde(default)]
    pub width: usize,
    /// Explicit affine matrix, rows = outputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<f64>>,
    /// Standard deviation of the seeded layer biases.
    #[serde(default = "default_bias_std")]
    pub bias_std: f64,
    /// Weight of each fresh evaluation in multi-call generation.
    #[serde(default = "default_mix")]
    pub multistep_mix: f64,
    /// Input damping per extra call: call `k` sees `damping^(k-1) · x0`.
    #[serde(default = "default_damping")]
    pub multistep_damping: f64,
}

impl GeneratorConfig {
    pub fn affine(latent_dim: usize, output_dim: usize) -> Self {
        Self {
            variant: "affine".into(),
            latent_dim,
            output_dim,
            hidden: Vec::new(),
            activation: Activation::Identity,
            condition_dim: 0,
            height: 0,
            width: 0,
            a: None,
            b: None,
            bias_std: default_bias_std(),
            multistep_mix: default_mix(),
            multistep_damping: default_damping(),
        }
    }

    pub fn affine_explicit(a: Vec<Vec<f64>>, b: Vec<f64>) -> Self {
        let latent = a.first().map_or(0, Vec::len);
        let mut cfg = Self::affine(latent, a.len());
        cfg.a = Some(a);
        cfg.b = Some(b);
        cfg
    }

    pub fn mlp(latent_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        Self {
            variant: "mlp".into(),
            hidden,
            activation: default_activation(),
            ..Self::affine(latent_dim, output_dim)
        }
    }

    pub fn image_decoder(latent_dim: usize, hidden: Vec<usize>, height: usize, width: usize) -> Self {
        Self {
            variant: "image_decoder".into(),
            height,
            width,
            output_dim: height * width * 3,
            ..Self::mlp(latent_dim, hidden, 0)
        }
    }

    pub fn with_condition(mut self, condition_dim: usize) -> Self {
        self.condition_dim = condition_dim;
        self
    }

    /// Fills derived fields and validates.
    pub fn resolved(&self) -> Result<Self> {
        let mut cfg = self.clone();
        if cfg.latent_dim == 0 {
            return Err(Error::Config("generator.latent_dim must be positive".into()));
        }
        match cfg.variant.as_str() {
            "affine" => {
                if let Some(a) = &cfg.a {
                    cfg.output_dim = a.len();
                    let cols = a.first().map_or(0, Vec::len);
                    if cols != cfg.latent_dim {
                        return Err(Error::Config(format!(
                            "generator.a has {cols} columns but latent_dim is {}",
                            cfg.latent_dim
                        )));
                    }
                }
                if cfg.output_dim == 0 {
                    cfg.output_dim = cfg.latent_dim;
                }
                if cfg.condition_dim != 0 {
                    return Err(Error::Config("affine generators are unconditional".into()));
                }
                if !cfg.hidden.is_empty() {
                    return Err(Error::Config("affine generators have no hidden layers".into()));
                }
                cfg.activation = Activation::Identity;
            }
            "mlp" => {
                if cfg.output_dim == 0 {
                    return Err(Error::Config("generator.output_dim must be positive".into()));
                }
            }
            "image_decoder" => {
                if cfg.height == 0 || cfg.width == 0 {
                    return Err(Error::Config("image_decoder needs height and width".into()));
                }
                cfg.output_dim = cfg.height * cfg.width * 3;
            }
            other => {
                return Err(Error::UnknownVariant {
                    kind: "generator",
                    name: other.to_string(),
                })
            }
        }
        if cfg.hidden.contains(&0) {
            return Err(Error::Config("generator.hidden sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&cfg.multistep_mix) || cfg.multistep_mix == 0.0 {
            return Err(Error::Config("generator.multistep_mix must lie in (0, 1]".into()));
        }
        if !(cfg.multistep_damping > 0.0) {
            return Err(Error::Config("generator.multistep_damping must be positive".into()));
        }
        if let Some(b) = &cfg.b {
            if b.len() != cfg.output_dim {
                return Err(Error::Config(format!(
                    "generator.b has length {} but output_dim is {}",
                    b.len(),
                    cfg.output_dim
                )));
            }
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// `act(x Wᵀ + b)` on a batch `[B, in]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let pre = x.matmul_t(&self.weight)?.add_row(&self.bias)?;
        Ok(pre.map(|v| self.activation.apply(v)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorVariant {
    Affine,
    Mlp,
    ImageDecoder { height: usize, width: usize },
}

/// Schedule for multi-call generation.
///
/// With core network `N` (all layers, before any output squash):
/// `s₁ = N(x0)`, `s_k = (1 − mix)·s_{k−1} + mix·N(damping^(k−1)·x0)`, and
/// the output is `squash(s_steps)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MultiStepSchedule {
    pub mix: f64,
    pub damping: f64,
}

#[derive(Clone, Debug)]
pub struct Generator {
    variant: GeneratorVariant,
    layers: Vec<DenseLayer>,
    squash: Option<Activation>,
    latent_dim: usize,
    output_dim: usize,
    condition_dim: Option<usize>,
    schedule: MultiStepSchedule,
    config: GeneratorConfig,
    hash: String,
}

/// Builds a generator from its config; identical `(config, seed)` pairs give
/// identical weights.
pub fn make_generator(config: &GeneratorConfig, seed: u64) -> Result<Generator> {
    let cfg = config.resolved()?;
    let mut rng = numcore::rng(seed);
    let cond = cfg.condition_dim;
    let (variant, layers, squash) = match cfg.variant.as_str() {
        "affine" => {
            let (d_in, d_out) = (cfg.latent_dim, cfg.output_dim);
            let weight = match &cfg.a {
                Some(a) => Tensor::from_rows(a)?,
                None => numcore::standard_normal(&mut rng, d_out, d_in).scale(1.0 / (d_in as f64).sqrt()),
            };
            let bias = match &cfg.b {
                Some(b) => Tensor::vector(b.clone()),
                None => Tensor::vector(
                    numcore::standard_normal(&mut rng, 1, d_out)
                        .scale(cfg.bias_std)
                        .into_data(),
                ),
            };
            let layer = DenseLayer {
                weight,
                bias,
                activation: Activation::Identity,
            };
            (GeneratorVariant::Affine, vec![layer], None)
        }
        "mlp" | "image_decoder" => {
            let mut dims = vec![cfg.latent_dim + cond];
            dims.extend(&cfg.hidden);
            dims.push(cfg.output_dim);
            let n_layers = dims.len() - 1;
            let layers = (0..n_layers)
                .map(|i| {
                    let (fan_in, fan_out) = (dims[i], dims[i + 1]);
                    let weight = numcore::standard_normal(&mut rng, fan_out, fan_in)
                        .scale(1.0 / (fan_in as f64).sqrt());
                    let bias = Tensor::vector(
                        numcore::standard_normal(&mut rng, 1, fan_out)
                            .scale(cfg.bias_std)
                            .into_data(),
                    );
                    let activation = if i + 1 == n_layers {
                        Activation::Identity
                    } else {
                        cfg.activation
                    };
                    DenseLayer {
                        weight,
                        bias,
                        activation,
                    }
                })
                .collect();
            if cfg.variant == "mlp" {
                (GeneratorVariant::Mlp, layers, None)
            } else {
                (
                    GeneratorVariant::ImageDecoder {
                        height: cfg.height,
                        width: cfg.width,
                    },
                    layers,
                    Some(Activation::Sigmoid),
                )
            }
        }
        _ => unreachable!("resolved() rejects unknown variants"),
    };
    Generator::assemble(variant, layers, squash, cfg)
}

impl Generator {
    fn assemble(
        variant: GeneratorVariant,
        layers: Vec<DenseLayer>,
        squash: Option<Activation>,
        config: GeneratorConfig,
    ) -> Result<Self> {
        let condition_dim = (config.condition_dim > 0).then_some(config.condition_dim);
        let mut g = Self {
            variant,
            layers,
            squash,
            latent_dim: config.latent_dim,
            output_dim: config.output_dim,
            condition_dim,
            schedule: MultiStepSchedule {
                mix: config.multistep_mix,
                damping: config.multistep_damping,
            },
            config,
            hash: String::new(),
        };
        if !g.layers.iter().all(|l| l.weight.is_finite() && l.bias.is_finite()) {
            return Err(Error::NonFinite("generator weights".into()));
        }
        g.hash = g.compute_hash();
        Ok(g)
    }

    /// A generator with the same structure but replacement layers, e.g. after
    /// merging fine-tuning adapters. The original is left untouched.
    pub fn with_layers(&self, layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.len() != self.layers.len()
            || layers
                .iter()
                .zip(&self.layers)
                .any(|(a, b)| a.weight.shape() != b.weight.shape() || a.bias.len() != b.bias.len())
        {
            return Err(Error::Shape("replacement layers do not match the architecture".into()));
        }
        Self::assemble(self.variant, layers, self.squash, self.config.clone())
    }

    fn compute_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!(
            "{:?}|{}|{}|{:?}|{:?}|{:?}|{}|{}",
            self.variant,
            self.latent_dim,
            self.output_dim,
            self.condition_dim,
            self.squash,
            self.layers.iter().map(|l| l.activation).collect::<Vec<_>>(),
            self.schedule.mix,
            self.schedule.damping
        ));
        for l in &self.layers {
            for v in l.weight.data().iter().chain(l.bias.data()) {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize()[..16].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Digest of structure and weights; also the checksum used to verify
    /// that training never touches the backbone.
    pub fn spec_hash(&self) -> &str {
        &self.hash
    }

    /// Recomputes the digest from the current weights.
    pub fn weights_checksum(&self) -> String {
        self.compute_hash()
    }

    pub fn variant(&self) -> GeneratorVariant {
        self.variant
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn squash(&self) -> Option<Activation> {
        self.squash
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn condition_dim(&self) -> Option<usize> {
        self.condition_dim
    }

    pub fn schedule(&self) -> MultiStepSchedule {
        self.schedule
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Box containing every output, when one exists.
    pub fn output_range(&self) -> Option<(f64, f64)> {
        match self.squash {
            Some(Activation::Sigmoid) => Some((0.0, 1.0)),
            Some(Activation::Tanh) => Some((-1.0, 1.0)),
            _ => None,
        }
    }

    fn check_inputs(&self, x0: &Tensor, condition: Option<&Tensor>, steps: usize) -> Result<()> {
        if steps == 0 {
            return Err(Error::Domain("generation needs at least one step".into()));
        }
        if x0.cols() != self.latent_dim {
            return Err(Error::Dimension {
                what: "noise",
                expected: self.latent_dim,
                got: x0.cols(),
            });
        }
        match (self.condition_dim, condition) {
            (None, None) => Ok(()),
            (Some(k), Some(c)) => {
                if c.cols() != k {
                    return Err(Error::Dimension {
                        what: "condition",
                        expected: k,
                        got: c.cols(),
                    });
                }
                if c.rows() != x0.rows() && c.rows() != 1 {
                    return Err(Error::Dimension {
                        what: "condition rows",
                        expected: x0.rows(),
                        got: c.rows(),
                    });
                }
                Ok(())
            }
            (Some(k), None) => Err(Error::Dimension {
                what: "condition",
                expected: k,
                got: 0,
            }),
            (None, Some(c)) => Err(Error::Dimension {
                what: "condition",
                expected: 0,
                got: c.cols(),
            }),
        }
    }

    fn with_condition(x: &Tensor, condition: Option<&Tensor>) -> Result<Tensor> {
        match condition {
            None => Ok(x.as_matrix()),
            Some(c) if c.rows() == x.rows() => x.concat_cols(c),
            Some(c) => {
                let tiled = c.select_rows(&vec![0; x.rows()]);
                x.concat_cols(&tiled)
            }
        }
    }

    fn core(&self, x: &Tensor, condition: Option<&Tensor>) -> Result<Tensor> {
        let mut h = Self::with_condition(x, condition)?;
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    /// Generates one output per row of `x0` (`[B, latent]`, or a single
    /// `[latent]` vector). A single-row `condition` is shared by all rows.
    pub fn generate(&self, x0: &Tensor, condition: Option<&Tensor>, steps: usize) -> Result<Tensor> {
        self.check_inputs(x0, condition, steps)?;
        let mut state = self.core(x0, condition)?;
        let MultiStepSchedule { mix, damping } = self.schedule;
        for k in 1..steps {
            let fresh = self.core(&x0.scale(damping.powi(k as i32)), condition)?;
            state = state.scale(1.0 - mix).add(&fresh.scale(mix))?;
        }
        if let Some(act) = self.squash {
            state = state.map(|v| act.apply(v));
        }
        if x0.shape().len() == 1 {
            state = state.reshape(&[self.output_dim])?;
        }
        Ok(state)
    }

    /// Adds this generator to `graph` with input nodes `x` (`[B, latent]`)
    /// and `condition`, returning the output node. Per-layer `adapters`
    /// contribute `x Dᵀ Uᵀ · scale` and optional bias shifts to each layer.
    pub fn build_graph(
        &self,
        graph: &mut Graph,
        x: NodeId,
        condition: Option<NodeId>,
        steps: usize,
        adapters: Option<&[LayerAdapterNodes]>,
    ) -> Result<NodeId> {
        if steps == 0 {
            return Err(Error::Domain("generation needs at least one step".into()));
        }
        if condition.is_some() != self.condition_dim.is_some() {
            return Err(Error::State("condition node presence must match the generator".into()));
        }
        if let Some(a) = adapters {
            if a.len() != self.layers.len() {
                return Err(Error::Shape("one adapter slot per generator layer".into()));
            }
        }
        let weights: Vec<(NodeId, NodeId)> = self
            .layers
            .iter()
            .map(|l| (graph.constant(l.weight.clone()), graph.constant(l.bias.clone())))
            .collect();
        let core = |graph: &mut Graph, input: NodeId| -> NodeId {
            let mut h = match condition {
                Some(c) => graph.concat_cols(input, c),
                None => input,
            };
            for (i, (layer, (w, b))) in self.layers.iter().zip(&weights).enumerate() {
                let lin = graph.matmul_t(h, *w);
                let mut pre = graph.add_row(lin, *b);
                if let Some(slot) = adapters.map(|a| &a[i]) {
                    if let Some(lora) = &slot.lora {
                        let delta = lora.apply(graph, h);
                        pre = graph.add(pre, delta);
                    }
                    if let Some(shift) = slot.bias_shift {
                        pre = graph.add_row(pre, shift);
                    }
                }
                h = graph.activation(pre, layer.activation);
            }
            h
        };
        let mut state = core(graph, x);
        let MultiStepSchedule { mix, damping } = self.schedule;
        for k in 1..steps {
            let damped = graph.scale(x, damping.powi(k as i32));
            let fresh = core(graph, damped);
            let kept = graph.scale(state, 1.0 - mix);
            let fresh = graph.scale(fresh, mix);
            state = graph.add(kept, fresh);
        }
        if let Some(act) = self.squash {
            state = graph.activation(state, act);
        }
        graph.set_output(state);
        Ok(state)
    }
}

/// Graph nodes for trainable per-layer modifications of a generator.
#[derive(Clone, Debug, Default)]
pub struct LayerAdapterNodes {
    pub lora: Option<LoraNodes>,
    pub bias_shift: Option<NodeId>,
}

/// Sample statistics of the base output distribution `g ♯ N(0, I)`.
#[derive(Clone, Debug)]
pub struct BaseOutputReference {
    pub mean: Vec<f64>,
    pub covariance: Tensor,
    /// `[n, output_dim]`
    pub samples: Tensor,
    pub seed: u64,
}

impl BaseOutputReference {
    pub fn from_samples(samples: Tensor, seed: u64) -> Self {
        Self {
            mean: samples.column_means(),
            covariance: samples.row_covariance(),
            samples,
            seed,
        }
    }
}

pub fn base_output_reference(
    g: &Generator,
    n: usize,
    seed: u64,
    condition: Option<&Tensor>,
) -> Result<BaseOutputReference> {
    if n < 2 {
        return Err(Error::Domain("base reference needs at least two samples".into()));
    }
    let mut rng = numcore::rng(seed);
    let x0 = numcore::standard_normal(&mut rng, n, g.latent_dim());
    let samples = g.generate(&x0, condition, 1)?;
    Ok(BaseOutputReference::from_samples(samples, seed))
}
