//! Comparison methods: per-sample noise optimization, best-of-N sampling and
//! reward-only fine-tuning of the generator itself.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::{DenseLayer, Generator, LayerAdapterNodes};
use crate::hypernet::{LoraAdapter, LoraNodes};
use crate::numcore::{self, derive_seed, Bindings, Graph, NodeId, Tensor};
use crate::rewards::Reward;
use crate::training::{clip_grad_norm, sample_conditions, Optimizer, OptimizerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseOptConfig {
    pub steps: usize,
    pub lr: f64,
    /// `λ` in the penalty `λ/2 ‖x0‖²`
    #[serde(default = "default_reg_weight")]
    pub reg_weight: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_reg_weight() -> f64 {
    1.0
}

impl NoiseOptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("noise optimization needs at least one step".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("noise optimization learning rate must be positive".into()));
        }
        if !(self.reg_weight >= 0.0) {
            return Err(Error::Config("reg_weight must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct NoiseOptResult {
    /// optimized noise, shaped like the initial noise
    pub x0_star: Tensor,
    /// mean reward `r(g(x0))` before each step and after the last one
    pub rewards: Vec<f64>,
    /// mean objective `r(g(x0)) − λ/2 ‖x0‖²` alongside `rewards`
    pub objectives: Vec<f64>,
    /// set when a non-finite objective stopped the ascent early
    pub aborted: bool,
}

/// Gradient ascent on `r(g(x0)) − λ/2 ‖x0‖²`, independently per row of
/// `x0_init`.
pub fn noise_opt(
    g: &Generator,
    r: &Reward,
    x0_init: &Tensor,
    cfg: &NoiseOptConfig,
    condition: Option<&Tensor>,
) -> Result<NoiseOptResult> {
    cfg.validate()?;
    let single = x0_init.shape().len() == 1;
    let mut x = x0_init.as_matrix();
    let (b, d) = x.dims2();
    if d != g.latent_dim() {
        return Err(Error::Dimension {
            what: "noise",
            expected: g.latent_dim(),
            got: d,
        });
    }
    let mut graph = Graph::new();
    let xn = graph.input("x0", true);
    let cn = g.condition_dim().map(|_| graph.input("c", false));
    let out = g.build_graph(&mut graph, xn, cn, 1, None)?;
    let rewards = r.build_graph(&mut graph, out, g.output_dim())?;
    let total = graph.sum(rewards);
    graph.set_output(total);
    let tiled = match condition {
        Some(c) if c.rows() != b => Some(c.select_rows(&vec![0; b])),
        Some(c) => Some(c.as_matrix()),
        None => None,
    };

    let mut reward_trace = Vec::with_capacity(cfg.steps + 1);
    let mut objective_trace = Vec::with_capacity(cfg.steps + 1);
    let mut best = (f64::NEG_INFINITY, x.clone());
    let mut aborted = false;
    for step in 0..=cfg.steps {
        let mut bindings = Bindings::new();
        bindings.insert("x0", &x);
        if let Some(c) = &tiled {
            bindings.insert("c", c);
        }
        let sum_r = graph.forward(&bindings)?.data()[0];
        let reg: f64 = 0.5 * cfg.reg_weight * x.data().iter().map(|v| v * v).sum::<f64>();
        let objective = (sum_r - reg) / b as f64;
        if !objective.is_finite() {
            aborted = true;
            break;
        }
        reward_trace.push(sum_r / b as f64);
        objective_trace.push(objective);
        if objective > best.0 {
            best = (objective, x.clone());
        }
        if step == cfg.steps {
            break;
        }
        let grads = graph.backward(&Tensor::scalar(1.0))?;
        let grad = grads["x0"].as_matrix().sub(&x.scale(cfg.reg_weight))?;
        x = x.add(&grad.scale(cfg.lr))?;
    }
    let mut x0_star = if aborted { best.1 } else { x };
    if single {
        x0_star = x0_star.reshape(&[d])?;
    }
    Ok(NoiseOptResult {
        x0_star,
        rewards: reward_trace,
        objectives: objective_trace,
        aborted,
    })
}

#[derive(Clone, Debug)]
pub struct BestOfN {
    pub best_index: usize,
    pub best_noise: Tensor,
    pub best_sample: Tensor,
    pub best_reward: f64,
    pub rewards: Vec<f64>,
}

/// Draws `n` noises from one seeded stream (so smaller `n` sees a prefix of
/// the same draws) and keeps the highest-reward output.
pub fn best_of_n(
    g: &Generator,
    r: &Reward,
    n: usize,
    seed: u64,
    condition: Option<&Tensor>,
) -> Result<BestOfN> {
    if n == 0 {
        return Err(Error::Domain("best-of-n needs n ≥ 1".into()));
    }
    let mut rng = numcore::rng(seed);
    let x0 = numcore::standard_normal(&mut rng, n, g.latent_dim());
    let out = g.generate(&x0, condition, 1)?;
    let rewards = r.evaluate_batch(&out)?;
    let mut best_index = 0;
    for (i, v) in rewards.iter().enumerate() {
        if *v > rewards[best_index] {
            best_index = i;
        }
    }
    Ok(BestOfN {
        best_index,
        best_noise: Tensor::vector(x0.row(best_index).to_vec()),
        best_sample: Tensor::vector(out.row(best_index).to_vec()),
        best_reward: rewards[best_index],
        rewards,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneTarget {
    /// low-rank adapters on every generator layer
    Lora,
    /// a trainable shift on every layer's bias
    BiasOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectFinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_clip")]
    pub grad_norm_clip: f64,
    #[serde(default)]
    pub seed: u64,
    pub rank: usize,
    /// `0` means `2 · rank`
    #[serde(default)]
    pub lora_alpha: f64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default = "default_target")]
    pub target: FinetuneTarget,
}

fn default_clip() -> f64 {
    1.0
}
fn default_log_every() -> usize {
    10
}
fn default_target() -> FinetuneTarget {
    FinetuneTarget::Lora
}

impl Default for DirectFinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 64,
            optimizer: OptimizerConfig::sgd(1e-4),
            grad_norm_clip: default_clip(),
            seed: 0,
            rank: 4,
            lora_alpha: 0.0,
            log_every: default_log_every(),
            target: FinetuneTarget::Lora,
        }
    }
}

impl DirectFinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.steps == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("steps, batch_size and log_every must be at least 1".into()));
        }
        if !(self.grad_norm_clip > 0.0) {
            return Err(Error::Config("grad_norm_clip must be positive".into()));
        }
        if self.target == FinetuneTarget::Lora && self.rank == 0 {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        Ok(())
    }

    fn resolved_lora_alpha(&self) -> f64 {
        if self.lora_alpha > 0.0 {
            self.lora_alpha
        } else {
            2.0 * self.rank as f64
        }
    }

    pub fn logs_at(&self, t: usize) -> bool {
        t % self.log_every == 0 || t + 1 == self.steps
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DirectHistoryRow {
    pub step: usize,
    /// batch mean reward before the update
    pub reward_mean: f64,
    pub grad_norm: f64,
    /// `‖θ − θ0‖` over the trainable parameters
    pub param_drift: f64,
}

#[derive(Clone, Debug, Default)]
pub struct DirectHistory {
    pub rows: Vec<DirectHistoryRow>,
}

/// Trainable modifications of a generator's layers.
#[derive(Clone, Debug)]
pub struct GeneratorAdapters {
    base: Arc<Generator>,
    lora: Vec<LoraAdapter>,
    shifts: Vec<Tensor>,
    target: FinetuneTarget,
}

impl GeneratorAdapters {
    pub fn new(g: &Arc<Generator>, target: FinetuneTarget, rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        let mut rng = numcore::rng(seed);
        let mut lora = Vec::new();
        let mut shifts = Vec::new();
        for (i, layer) in g.layers().iter().enumerate() {
            match target {
                FinetuneTarget::Lora => {
                    let max = layer.out_dim().min(layer.in_dim());
                    if rank > max {
                        return Err(Error::RankTooLarge { layer: i, rank, max });
                    }
                    lora.push(LoraAdapter::new(layer.out_dim(), layer.in_dim(), rank, alpha, &mut rng));
                }
                FinetuneTarget::BiasOnly => shifts.push(Tensor::zeros(&[layer.out_dim()])),
            }
        }
        Ok(Self {
            base: Arc::clone(g),
            lora,
            shifts,
            target,
        })
    }

    fn tensors(&self) -> Vec<(String, &Tensor)> {
        match self.target {
            FinetuneTarget::Lora => self
                .lora
                .iter()
                .enumerate()
                .flat_map(|(i, a)| [(format!("ft{i}.down"), a.down()), (format!("ft{i}.up"), a.up())])
                .collect(),
            FinetuneTarget::BiasOnly => self
                .shifts
                .iter()
                .enumerate()
                .map(|(i, t)| (format!("ft{i}.bias"), t))
                .collect(),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        self.tensors().into_iter().map(|(n, _)| n).collect()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let mut offset = 0;
        let mut take = |n: usize| {
            let s = &flat[offset..offset + n];
            offset += n;
            s.to_vec()
        };
        if flat.len() != self.flat_params().len() {
            return Err(Error::Dimension {
                what: "flat parameter vector",
                expected: self.flat_params().len(),
                got: flat.len(),
            });
        }
        match self.target {
            FinetuneTarget::Lora => {
                for a in &mut self.lora {
                    let (r, n) = a.down().dims2();
                    let m = a.up().rows();
                    a.set_down(Tensor::matrix(r, n, take(r * n))?)?;
                    a.set_up(Tensor::matrix(m, r, take(m * r))?)?;
                }
            }
            FinetuneTarget::BiasOnly => {
                for s in &mut self.shifts {
                    *s = Tensor::vector(take(s.len()));
                }
            }
        }
        Ok(())
    }

    /// Graph nodes for every adapter, registered as differentiable inputs.
    fn build_nodes(&self, graph: &mut Graph, names: &[String]) -> Vec<LayerAdapterNodes> {
        let inputs: Vec<NodeId> = names.iter().map(|n| graph.input(n.clone(), true)).collect();
        match self.target {
            FinetuneTarget::Lora => self
                .lora
                .iter()
                .enumerate()
                .map(|(i, a)| LayerAdapterNodes {
                    lora: Some(LoraNodes {
                        down: inputs[2 * i],
                        up: inputs[2 * i + 1],
                        scale: a.scale(),
                    }),
                    bias_shift: None,
                })
                .collect(),
            FinetuneTarget::BiasOnly => inputs
                .iter()
                .map(|&n| LayerAdapterNodes {
                    lora: None,
                    bias_shift: Some(n),
                })
                .collect(),
        }
    }

    /// The generator with every adapter folded into its weights.
    pub fn merged(&self) -> Result<Generator> {
        let layers: Vec<DenseLayer> = self
            .base
            .layers()
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let mut layer = l.clone();
                match self.target {
                    FinetuneTarget::Lora => {
                        layer.weight = layer.weight.add(&self.lora[i].delta_weight())?;
                    }
                    FinetuneTarget::BiasOnly => {
                        layer.bias = layer.bias.add(&self.shifts[i])?;
                    }
                }
                Ok(layer)
            })
            .collect::<Result<_>>()?;
        self.base.with_layers(layers)
    }
}

/// Called with `(updates applied, adapted generator)` at logged steps and
/// after the final update.
pub type DirectObserver<'a> = dyn FnMut(usize, &Generator) -> Result<()> + 'a;

pub fn train_direct_finetune(
    g: &Arc<Generator>,
    r: &Reward,
    cfg: &DirectFinetuneConfig,
    conditions: Option<&Tensor>,
) -> Result<(Generator, DirectHistory)> {
    train_direct_finetune_observed(g, r, cfg, conditions, &mut |_, _| Ok(()))
}

/// Reward-only ascent `max E r(g_θ(x0))` on generator adapters; no
/// divergence penalty of any kind.
pub fn train_direct_finetune_observed(
    g: &Arc<Generator>,
    r: &Reward,
    cfg: &DirectFinetuneConfig,
    conditions: Option<&Tensor>,
    observer: &mut DirectObserver<'_>,
) -> Result<(Generator, DirectHistory)> {
    cfg.validate()?;
    if g.condition_dim().is_some() != conditions.is_some() {
        return Err(Error::Config("a condition set is required exactly when the generator is conditional".into()));
    }
    let mut adapters = GeneratorAdapters::new(g, cfg.target, cfg.rank, cfg.resolved_lora_alpha(), derive_seed(cfg.seed, 0))?;
    let names = adapters.param_names();
    let mut graph = Graph::new();
    let xn = graph.input("x0", false);
    let cn = g.condition_dim().map(|_| graph.input("c", false));
    let nodes = adapters.build_nodes(&mut graph, &names);
    let out = g.build_graph(&mut graph, xn, cn, 1, Some(&nodes))?;
    let rewards = r.build_graph(&mut graph, out, g.output_dim())?;
    let sum = graph.sum(rewards);
    let loss = graph.scale(sum, -1.0 / cfg.batch_size as f64);
    graph.set_output(loss);

    let theta0 = adapters.flat_params();
    let mut opt = Optimizer::new(cfg.optimizer, theta0.len());
    let mut noise_rng = numcore::rng(derive_seed(cfg.seed, 1));
    let mut cond_rng = numcore::rng(derive_seed(cfg.seed, 2));
    let mut history = DirectHistory::default();
    for t in 0..cfg.steps {
        let x0 = numcore::standard_normal(&mut noise_rng, cfg.batch_size, g.latent_dim());
        let c = conditions.map(|set| sample_conditions(set, cfg.batch_size, &mut cond_rng));
        let params: Vec<(String, &Tensor)> = adapters.tensors();
        let mut bindings = Bindings::new();
        bindings.insert("x0", &x0);
        if let Some(c) = &c {
            bindings.insert("c", c);
        }
        for (name, (_, t)) in names.iter().zip(&params) {
            bindings.insert(name.as_str(), *t);
        }
        let value = graph.forward(&bindings)?.data()[0];
        if !value.is_finite() {
            return Err(Error::Diverged { step: t });
        }
        let grads: BTreeMap<String, Tensor> = graph.backward(&Tensor::scalar(1.0))?;
        let mut flat: Vec<f64> = names.iter().flat_map(|n| grads[n].data().to_vec()).collect();
        let grad_norm = clip_grad_norm(&mut flat, cfg.grad_norm_clip);
        let mut theta = adapters.flat_params();
        if cfg.logs_at(t) {
            history.rows.push(DirectHistoryRow {
                step: t,
                reward_mean: -value,
                grad_norm,
                param_drift: drift(&theta, &theta0),
            });
            observer(t, &adapters.merged()?)?;
        }
        opt.step(&mut theta, &flat);
        adapters.set_flat_params(&theta)?;
    }
    let merged = adapters.merged()?;
    observer(cfg.steps, &merged)?;
    Ok((merged, history))
}

fn drift(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// For `g(x) = Ax + b` with only `b` trained on `r(y) = cᵀy` by SGD with
/// clipping: the gradient is the constant `−c`, so after `t` steps
/// `‖b_t − b_0‖ = t · lr · min(‖c‖, clip)`.
pub fn affine_bias_drift(c: &[f64], lr: f64, clip: f64, steps: usize) -> f64 {
    let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    steps as f64 * lr * norm.min(clip)
}
