//! The hypernetwork training loop, optimizers, history and checkpoints.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::Generator;
use crate::hypernet::{init_hypernet, NoiseHypernetwork};
use crate::numcore::{self, derive_seed, Tensor};
use crate::objectives::{LossBreakdown, LossGraph};
use crate::rewards::Reward;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig::Sgd { lr, momentum: 0.0 }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr() > 0.0) || !self.lr().is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr())));
        }
        match *self {
            OptimizerConfig::Sgd { momentum, .. } if !(0.0..1.0).contains(&momentum) => {
                Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")))
            }
            OptimizerConfig::Adam { beta1, beta2, eps, .. }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) =>
            {
                Err(Error::Config("adam needs β1, β2 in [0, 1) and eps > 0".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Optimizer state over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, n: usize) -> Self {
        Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        match self.config {
            OptimizerConfig::Sgd { lr, momentum } => {
                for ((p, g), m) in params.iter_mut().zip(grads).zip(&mut self.m) {
                    *m = momentum * *m + g;
                    *p -= lr * *m;
                }
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Rescales `grads` in place so its norm is at most `clip`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], clip: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > clip {
        let s = clip / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_clip")]
    pub grad_norm_clip: f64,
    /// reward temperature
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    pub rank: usize,
    /// LoRA scaling numerator; `0` means `2 · rank`
    #[serde(default)]
    pub lora_alpha: f64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// `0` disables periodic checkpoints
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub checkpoint_path: Option<PathBuf>,
    /// `0` means `10 · latent_dim`
    #[serde(default)]
    pub l2_ceiling: f64,
    /// sampled pairs for the per-log Lipschitz audit
    #[serde(default = "default_audit_pairs")]
    pub audit_pairs: usize,
}

fn default_clip() -> f64 {
    1.0
}
fn default_alpha() -> f64 {
    1.0
}
fn default_log_every() -> usize {
    10
}
fn default_audit_pairs() -> usize {
    64
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 64,
            optimizer: OptimizerConfig::sgd(1e-3),
            grad_norm_clip: default_clip(),
            alpha: default_alpha(),
            seed: 0,
            rank: 4,
            lora_alpha: 0.0,
            log_every: default_log_every(),
            checkpoint_every: 0,
            checkpoint_path: None,
            l2_ceiling: 0.0,
            audit_pairs: default_audit_pairs(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.grad_norm_clip > 0.0) {
            return Err(Error::Config("grad_norm_clip must be positive".into()));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if self.rank == 0 {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        if self.lora_alpha < 0.0 || self.l2_ceiling < 0.0 {
            return Err(Error::Config("lora_alpha and l2_ceiling must be non-negative".into()));
        }
        if self.checkpoint_every > 0 && self.checkpoint_path.is_none() {
            return Err(Error::Config("checkpoint_every needs checkpoint_path".into()));
        }
        Ok(())
    }

    pub fn resolved_lora_alpha(&self) -> f64 {
        if self.lora_alpha > 0.0 {
            self.lora_alpha
        } else {
            2.0 * self.rank as f64
        }
    }

    pub fn resolved_l2_ceiling(&self, latent_dim: usize) -> f64 {
        if self.l2_ceiling > 0.0 {
            self.l2_ceiling
        } else {
            10.0 * latent_dim as f64
        }
    }

    /// Whether step `t` (updates applied so far) produces a history row.
    pub fn logs_at(&self, t: usize) -> bool {
        t % self.log_every == 0 || t + 1 == self.steps
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HistoryRow {
    /// optimizer updates applied before this loss was measured
    pub step: usize,
    pub l2_term: f64,
    pub reward_term: f64,
    pub total_loss: f64,
    /// pre-clip global gradient norm
    pub grad_norm: f64,
    /// sampled lower bound on the Lipschitz constant of `f`
    pub lipschitz_audit: f64,
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
}

impl TrainHistory {
    pub const COLUMNS: [&'static str; 6] =
        ["step", "l2_term", "reward_term", "total_loss", "grad_norm", "lipschitz_audit"];

    /// History as CSV. Wall time is left out so identical runs produce
    /// identical bytes; see [`Self::timing_csv`].
    pub fn to_csv(&self) -> String {
        let mut out = Self::COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.l2_term, r.reward_term, r.total_loss, r.grad_norm, r.lipschitz_audit
            ));
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let mut out = String::from("step,wall_time_s\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.6}\n", r.step, r.wall_time_s));
        }
        out
    }

    pub fn last(&self) -> Option<&HistoryRow> {
        self.rows.last()
    }
}

/// Called with `(updates applied, network)` at every logged step and once
/// after the final update.
pub type Observer<'a> = dyn FnMut(usize, &NoiseHypernetwork) -> Result<()> + 'a;

/// Draws one condition row per batch element, uniformly from `set`.
pub(crate) fn sample_conditions(set: &Tensor, batch: usize, rng: &mut numcore::Rng) -> Tensor {
    let k = set.rows();
    let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..k)).collect();
    set.select_rows(&idx)
}

pub fn train_hypernoise(
    g: &Arc<Generator>,
    r: &Reward,
    cfg: &TrainConfig,
    conditions: Option<&Tensor>,
) -> Result<(NoiseHypernetwork, TrainHistory)> {
    train_hypernoise_observed(g, r, cfg, conditions, &mut |_, _| Ok(()))
}

/// The training loop: fresh `x0 ~ N(0, I)` (and `c ~ C`) every step, loss
/// `½‖f(x0)‖² − r(g(x0 + f(x0)))/α`, global-norm clipping, optimizer step.
pub fn train_hypernoise_observed(
    g: &Arc<Generator>,
    r: &Reward,
    cfg: &TrainConfig,
    conditions: Option<&Tensor>,
    observer: &mut Observer<'_>,
) -> Result<(NoiseHypernetwork, TrainHistory)> {
    cfg.validate()?;
    if let (Some(k), Some(c)) = (g.condition_dim(), conditions) {
        if c.cols() != k {
            return Err(Error::Dimension {
                what: "condition set",
                expected: k,
                got: c.cols(),
            });
        }
    }
    if g.condition_dim().is_some() != conditions.is_some() {
        return Err(Error::Config("a condition set is required exactly when the generator is conditional".into()));
    }
    let mut hn = init_hypernet(g, cfg.rank, cfg.resolved_lora_alpha(), derive_seed(cfg.seed, 0))?;
    let mut loss = LossGraph::new(&hn, r, cfg.batch_size, cfg.alpha, 1)?;
    let mut opt = Optimizer::new(cfg.optimizer, hn.param_count());
    let mut noise_rng = numcore::rng(derive_seed(cfg.seed, 1));
    let mut cond_rng = numcore::rng(derive_seed(cfg.seed, 2));
    let ceiling = cfg.resolved_l2_ceiling(g.latent_dim());
    let audit_condition = conditions.map(|c| Tensor::vector(c.row(0).to_vec()));
    let mut history = TrainHistory::default();
    let start = Instant::now();
    for t in 0..cfg.steps {
        let x0 = numcore::standard_normal(&mut noise_rng, cfg.batch_size, g.latent_dim());
        let c = conditions.map(|set| sample_conditions(set, cfg.batch_size, &mut cond_rng));
        let (lb, grads) = match loss.evaluate(&hn, &x0, c.as_ref()) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => return Err(Error::Diverged { step: t }),
            Err(e) => return Err(e),
        };
        if lb.l2_term > ceiling {
            return Err(Error::RegularizationBreach {
                step: t,
                l2: lb.l2_term,
                ceiling,
            });
        }
        let mut flat = hn.flatten_grads(&grads)?;
        let grad_norm = clip_grad_norm(&mut flat, cfg.grad_norm_clip);
        if !grad_norm.is_finite() {
            return Err(Error::Diverged { step: t });
        }
        if cfg.logs_at(t) {
            history.rows.push(row(t, &lb, grad_norm, &hn, cfg, audit_condition.as_ref(), &start)?);
            observer(t, &hn)?;
        }
        let mut params = hn.flat_params();
        opt.step(&mut params, &flat);
        hn.set_flat_params(&params)?;
        if cfg.checkpoint_every > 0 && (t + 1) % cfg.checkpoint_every == 0 {
            if let Some(path) = &cfg.checkpoint_path {
                save_checkpoint(&hn, path)?;
            }
        }
    }
    observer(cfg.steps, &hn)?;
    if let Some(path) = &cfg.checkpoint_path {
        save_checkpoint(&hn, path)?;
    }
    Ok((hn, history))
}

fn row(
    t: usize,
    lb: &LossBreakdown,
    grad_norm: f64,
    hn: &NoiseHypernetwork,
    cfg: &TrainConfig,
    condition: Option<&Tensor>,
    start: &Instant,
) -> Result<HistoryRow> {
    let audit = hn.lipschitz_lower_bound(cfg.audit_pairs.max(1), derive_seed(cfg.seed, 3), condition)?;
    Ok(HistoryRow {
        step: t,
        l2_term: lb.l2_term,
        reward_term: lb.reward_term,
        total_loss: lb.total,
        grad_norm,
        lipschitz_audit: audit,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

const MAGIC: &[u8; 4] = b"HNCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format_version: u32,
    generator_hash: String,
    rank: usize,
    alpha: f64,
    layers: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

/// Writes `bytes` to a sibling temporary file, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Checkpoint(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Header `{version, generator hash, rank, alpha, manifest}` as
/// length-prefixed JSON after a magic tag, then every adapter tensor as
/// little-endian `f64` in manifest order.
pub fn save_checkpoint(hn: &NoiseHypernetwork, path: &Path) -> Result<()> {
    let params = hn.parameters();
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        generator_hash: hn.generator().spec_hash().to_string(),
        rank: hn.rank(),
        alpha: hn.alpha(),
        layers: params
            .iter()
            .map(|(name, t)| ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut bytes = Vec::with_capacity(8 + json.len() + 8 * hn.param_count());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, t) in params {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path, g: &Arc<Generator>) -> Result<NoiseHypernetwork> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes, g)
}

pub fn decode_checkpoint(bytes: &[u8], g: &Arc<Generator>) -> Result<NoiseHypernetwork> {
    let corrupt = |why: &str| Error::Checkpoint(why.to_string());
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(corrupt("missing checkpoint magic"));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes")) as usize;
    let body = bytes.get(8..8 + len).ok_or_else(|| corrupt("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    if header.generator_hash != g.spec_hash() {
        return Err(Error::GeneratorMismatch {
            expected: g.spec_hash().to_string(),
            found: header.generator_hash,
        });
    }
    let mut hn = init_hypernet(g, header.rank, header.alpha, 0)?;
    let expected: Vec<ManifestEntry> = hn
        .parameters()
        .iter()
        .map(|(name, t)| ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    if expected != header.layers {
        return Err(corrupt("layer manifest does not match the generator"));
    }
    let data = &bytes[8 + len..];
    if data.len() != 8 * hn.param_count() {
        return Err(corrupt("payload length does not match the manifest"));
    }
    let flat: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
        .collect();
    hn.set_flat_params(&flat)?;
    Ok(hn)
}
