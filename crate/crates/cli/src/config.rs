//! Experiment configuration: a TOML file with one table per concern.
//!
//! Unknown keys anywhere are rejected. Sub-seeds left at `0` are derived
//! from the top-level `seed`; the resolved configuration written next to
//! every run lists them explicitly, so it can be fed back in unchanged.

use std::fs;
use std::path::{Path, PathBuf};

use hypernoise::baselines::{DirectFinetuneConfig, NoiseOptConfig};
use hypernoise::generators::GeneratorConfig;
use hypernoise::numcore::derive_seed;
use hypernoise::rewards::Reward;
use hypernoise::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Hypernoise,
    DirectFt,
    NoiseOpt,
    BestOfN,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Hypernoise => "hypernoise",
            Method::DirectFt => "direct_ft",
            Method::NoiseOpt => "noise_opt",
            Method::BestOfN => "best_of_n",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fidelity {
    KnnKl,
    ClosedFormGaussianKl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BestOfNConfig {
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// held-out noise samples per evaluation point
    pub heldout: usize,
    /// base-model samples the fidelity is measured against
    pub reference: usize,
    pub fidelity: Fidelity,
    pub knn_k: usize,
    /// generator call counts evaluated at the final step
    pub multistep: Vec<usize>,
    pub diversity_seeds: usize,
    pub diversity_samples: usize,
    /// outputs used for the mean pairwise distance column
    pub diversity_pool: usize,
    pub seed: u64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            heldout: 2000,
            reference: 2000,
            fidelity: Fidelity::KnnKl,
            knn_k: 5,
            multistep: vec![1],
            diversity_seeds: 20,
            diversity_samples: 16,
            diversity_pool: 500,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub plots: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            plots: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryConfig {
    pub bound_networks: usize,
    pub bound_points: usize,
    pub bound_dim: usize,
    pub lipschitz_budgets: Vec<f64>,
    pub stein_networks: usize,
    pub stein_n: usize,
    pub stein_dims: Vec<usize>,
    pub tilt_trials: usize,
    pub tilt_n: usize,
    pub pushforward_n: usize,
    pub dpi_n: usize,
    pub knn_k: usize,
    pub bilipschitz_pairs: usize,
    pub seed: u64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            bound_networks: 20,
            bound_points: 200,
            bound_dim: 8,
            lipschitz_budgets: vec![0.05, 0.1, 0.3, 0.5],
            stein_networks: 20,
            stein_n: 100_000,
            stein_dims: vec![2, 4, 8],
            tilt_trials: 20,
            tilt_n: 4000,
            pushforward_n: 20_000,
            dpi_n: 10_000,
            knn_k: 5,
            bilipschitz_pairs: 1000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_method")]
    pub method: Method,
    /// seed for the generator's weights; `0` derives it from `seed`
    #[serde(default)]
    pub generator_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<Reward>,
    /// finite condition set, one row per condition
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditions: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direct_ft: Option<DirectFinetuneConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_opt: Option<NoiseOptConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_of_n: Option<BestOfNConfig>,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub theory: TheoryConfig,
}

fn default_method() -> Method {
    Method::Hypernoise
}

/// Sub-seed streams, kept below `2^63` so they survive a TOML round trip.
fn sub_seed(seed: u64, stream: u64) -> u64 {
    derive_seed(seed, stream) >> 1
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }

    /// Applies `--seed-override`, fills every derived value and validates.
    pub fn resolve(mut self, seed_override: Option<u64>) -> CliResult<Self> {
        if let Some(s) = seed_override {
            self.seed = s;
            self.generator_seed = 0;
            self.evaluation.seed = 0;
            self.theory.seed = 0;
            if let Some(t) = &mut self.train {
                t.seed = 0;
            }
            if let Some(t) = &mut self.direct_ft {
                t.seed = 0;
            }
            if let Some(t) = &mut self.noise_opt {
                t.seed = 0;
            }
            if let Some(t) = &mut self.best_of_n {
                t.seed = 0;
            }
        }
        let seed = self.seed;
        let fill = |v: &mut u64, stream: u64| {
            if *v == 0 {
                *v = sub_seed(seed, stream);
            }
        };
        fill(&mut self.generator_seed, 100);
        fill(&mut self.evaluation.seed, 101);
        fill(&mut self.theory.seed, 102);
        if let Some(g) = &self.generator {
            let resolved = g
                .resolved()
                .map_err(|e| CliError::Config(format!("generator: {e}")))?;
            self.generator = Some(resolved);
        }
        if let Some(t) = &mut self.train {
            fill(&mut t.seed, 1);
            t.lora_alpha = t.resolved_lora_alpha();
            if let Some(g) = &self.generator {
                t.l2_ceiling = t.resolved_l2_ceiling(g.latent_dim);
            }
        }
        if let Some(t) = &mut self.direct_ft {
            fill(&mut t.seed, 2);
            if t.lora_alpha == 0.0 {
                t.lora_alpha = 2.0 * t.rank as f64;
            }
        }
        if let Some(t) = &mut self.noise_opt {
            fill(&mut t.seed, 3);
        }
        if let Some(t) = &mut self.best_of_n {
            fill(&mut t.seed, 4);
        }
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> CliResult<()> {
        let cfg_err = |what: &str, e: hypernoise::Error| CliError::Config(format!("{what}: {e}"));
        if let (Some(g), Some(r)) = (&self.generator, &self.reward) {
            r.validate(g.output_dim).map_err(|e| cfg_err("reward", e))?;
        }
        if let Some(t) = &self.train {
            t.validate().map_err(|e| cfg_err("train", e))?;
        }
        if let Some(t) = &self.direct_ft {
            t.validate().map_err(|e| cfg_err("direct_ft", e))?;
        }
        if let Some(t) = &self.noise_opt {
            t.validate().map_err(|e| cfg_err("noise_opt", e))?;
        }
        if let Some(b) = &self.best_of_n {
            if b.n == 0 {
                return Err(CliError::Config("best_of_n.n must be at least 1".into()));
            }
        }
        let e = &self.evaluation;
        if e.heldout < 2 || e.reference < 2 {
            return Err(CliError::Config("evaluation.heldout and evaluation.reference must be at least 2".into()));
        }
        if e.knn_k == 0 || e.knn_k >= e.heldout.min(e.reference) {
            return Err(CliError::Config("evaluation.knn_k must lie in [1, min(heldout, reference))".into()));
        }
        if e.multistep.is_empty() || e.multistep.contains(&0) {
            return Err(CliError::Config("evaluation.multistep entries must be at least 1".into()));
        }
        if e.diversity_samples < 2 || e.diversity_pool < 2 {
            return Err(CliError::Config("evaluation diversity sizes must be at least 2".into()));
        }
        if let (Some(g), Some(c)) = (&self.generator, &self.conditions) {
            if c.is_empty() || c.iter().any(|row| row.len() != g.condition_dim) {
                return Err(CliError::Config(format!(
                    "conditions must be nonempty rows of length generator.condition_dim = {}",
                    g.condition_dim
                )));
            }
        }
        if let Some(g) = &self.generator {
            if g.condition_dim > 0 && self.conditions.is_none() {
                return Err(CliError::Config("a conditional generator needs a conditions list".into()));
            }
            if g.condition_dim == 0 && self.conditions.is_some() {
                return Err(CliError::Config("conditions given for an unconditional generator".into()));
            }
        }
        Ok(())
    }

    /// The experiment's single method, checked against the sections present.
    pub fn require_method(&self) -> CliResult<Method> {
        let present = [
            (Method::Hypernoise, self.train.is_some()),
            (Method::DirectFt, self.direct_ft.is_some()),
            (Method::NoiseOpt, self.noise_opt.is_some()),
            (Method::BestOfN, self.best_of_n.is_some()),
        ];
        for (m, here) in present {
            if m == self.method && !here {
                return Err(CliError::Config(format!(
                    "method = \"{}\" needs a [{}] table",
                    m.as_str(),
                    section_name(m)
                )));
            }
            if m != self.method && here {
                return Err(CliError::Config(format!(
                    "exactly one method per run: [{}] given but method = \"{}\"",
                    section_name(m),
                    self.method.as_str()
                )));
            }
        }
        if self.generator.is_none() {
            return Err(CliError::Config("missing [generator] table".into()));
        }
        if self.reward.is_none() {
            return Err(CliError::Config("missing [reward] table".into()));
        }
        Ok(self.method)
    }
}

fn section_name(m: Method) -> &'static str {
    match m {
        Method::Hypernoise => "train",
        Method::DirectFt => "direct_ft",
        Method::NoiseOpt => "noise_opt",
        Method::BestOfN => "best_of_n",
    }
}
