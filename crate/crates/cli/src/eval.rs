//! Held-out evaluation shared by every method: reward statistics, output
//! fidelity against the frozen base model, and sample diversity.

use std::collections::BTreeMap;
use std::sync::Arc;

use hypernoise::generators::Generator;
use hypernoise::hypernet::NoiseHypernetwork;
use hypernoise::numcore::{self, derive_seed, Tensor};
use hypernoise::oracles::{gaussian_kl, kl_knn_whitened};
use hypernoise::rewards::Reward;
use serde::Serialize;

use crate::config::{EvaluationConfig, Fidelity};
use crate::error::{CliError, CliResult};

/// One line of `report.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub method: String,
    pub step: usize,
    pub gen_steps: usize,
    pub n: usize,
    pub reward_mean: f64,
    pub reward_se: f64,
    pub fidelity: f64,
    pub diversity_mean_pairwise: f64,
    pub lipschitz_audit: Option<f64>,
}

/// A map from noise to outputs.
pub enum Pipeline<'a> {
    Base(&'a Generator),
    Hypernoise(&'a NoiseHypernetwork),
    Tuned(&'a Generator),
}

impl Pipeline<'_> {
    pub fn run(&self, x0: &Tensor, cond: Option<&Tensor>, steps: usize) -> CliResult<Tensor> {
        Ok(match self {
            Pipeline::Base(g) | Pipeline::Tuned(g) => g.generate(x0, cond, steps)?,
            Pipeline::Hypernoise(hn) => {
                let (_, xhat) = hn.modulate(x0, cond)?;
                hn.generator().generate(&xhat, cond, steps)?
            }
        })
    }
}

pub struct Evaluator {
    g: Arc<Generator>,
    reward: Reward,
    cfg: EvaluationConfig,
    heldout: Tensor,
    heldout_cond: Option<Tensor>,
    reference_noise: Tensor,
    reference_cond: Option<Tensor>,
    reference: BTreeMap<usize, Tensor>,
}

/// Row `i` gets condition `i mod K`.
fn cycle_conditions(set: &Tensor, n: usize) -> Tensor {
    let idx: Vec<usize> = (0..n).map(|i| i % set.rows()).collect();
    set.select_rows(&idx)
}

impl Evaluator {
    pub fn new(
        g: Arc<Generator>,
        reward: Reward,
        cfg: EvaluationConfig,
        conditions: Option<&Tensor>,
    ) -> CliResult<Self> {
        let d = g.latent_dim();
        let heldout = numcore::standard_normal(&mut numcore::rng(derive_seed(cfg.seed, 0)), cfg.heldout, d);
        let reference_noise =
            numcore::standard_normal(&mut numcore::rng(derive_seed(cfg.seed, 1)), cfg.reference, d);
        let heldout_cond = conditions.map(|c| cycle_conditions(c, cfg.heldout));
        let reference_cond = conditions.map(|c| cycle_conditions(c, cfg.reference));
        let mut reference = BTreeMap::new();
        for &s in &cfg.multistep {
            reference.insert(s, g.generate(&reference_noise, reference_cond.as_ref(), s)?);
        }
        Ok(Self {
            g,
            reward,
            cfg,
            heldout,
            heldout_cond,
            reference_noise,
            reference_cond,
            reference,
        })
    }

    pub fn heldout(&self) -> &Tensor {
        &self.heldout
    }

    pub fn heldout_conditions(&self) -> Option<&Tensor> {
        self.heldout_cond.as_ref()
    }

    pub fn config(&self) -> &EvaluationConfig {
        &self.cfg
    }

    fn reference_outputs(&self, steps: usize) -> CliResult<Tensor> {
        match self.reference.get(&steps) {
            Some(t) => Ok(t.clone()),
            None => Ok(self.g.generate(&self.reference_noise, self.reference_cond.as_ref(), steps)?),
        }
    }

    /// Evaluates a noise-to-output pipeline on the held-out noise.
    pub fn evaluate_pipeline(
        &self,
        method: &str,
        step: usize,
        steps: usize,
        pipeline: &Pipeline<'_>,
        lipschitz_audit: Option<f64>,
    ) -> CliResult<ReportRow> {
        let outputs = pipeline.run(&self.heldout, self.heldout_cond.as_ref(), steps)?;
        let fidelity = match self.cfg.fidelity {
            Fidelity::KnnKl => kl_knn_whitened(&outputs, &self.reference_outputs(steps)?, self.cfg.knn_k)?,
            Fidelity::ClosedFormGaussianKl => self.closed_form_fidelity(pipeline, steps)?,
        };
        self.row(method, step, steps, &outputs, fidelity, lipschitz_audit)
    }

    /// Evaluates outputs that do not come from a fixed map (per-sample
    /// optimization, best-of-N); fidelity is always the kNN estimate.
    pub fn evaluate_outputs(&self, method: &str, step: usize, steps: usize, outputs: &Tensor) -> CliResult<ReportRow> {
        if self.cfg.fidelity == Fidelity::ClosedFormGaussianKl {
            return Err(CliError::Config(format!(
                "closed_form_gaussian_kl needs an affine noise-to-output map; {method} has none"
            )));
        }
        let fidelity = kl_knn_whitened(outputs, &self.reference_outputs(steps)?, self.cfg.knn_k)?;
        self.row(method, step, steps, outputs, fidelity, None)
    }

    fn row(
        &self,
        method: &str,
        step: usize,
        steps: usize,
        outputs: &Tensor,
        fidelity: f64,
        lipschitz_audit: Option<f64>,
    ) -> CliResult<ReportRow> {
        let rewards = self.reward.evaluate_batch(outputs)?;
        if let Some(i) = rewards.iter().position(|v| !v.is_finite()) {
            return Err(hypernoise::Error::NonFinite(format!("evaluation reward at sample {i}")).into());
        }
        let (mean, se) = mean_se(&rewards);
        let pool = outputs.rows().min(self.cfg.diversity_pool);
        let idx: Vec<usize> = (0..pool).collect();
        Ok(ReportRow {
            method: method.to_string(),
            step,
            gen_steps: steps,
            n: rewards.len(),
            reward_mean: mean,
            reward_se: se,
            fidelity,
            diversity_mean_pairwise: mean_pairwise_distance(&outputs.select_rows(&idx)),
            lipschitz_audit,
        })
    }

    /// Exact KL between the two Gaussian output laws when both the pipeline
    /// and the base model are affine in the noise.
    fn closed_form_fidelity(&self, pipeline: &Pipeline<'_>, steps: usize) -> CliResult<f64> {
        if self.heldout_cond.is_some() {
            return Err(CliError::Config("closed_form_gaussian_kl needs an unconditional generator".into()));
        }
        let (a, b) = affine_probe(pipeline, self.g.latent_dim(), steps)?;
        let (a0, b0) = affine_probe(&Pipeline::Base(&self.g), self.g.latent_dim(), steps)?;
        let cov = a.matmul_t(&a)?;
        let cov0 = a0.matmul_t(&a0)?;
        Ok(gaussian_kl(&b, &cov, &b0, &cov0)?)
    }
}

/// Recovers `(A, b)` of an affine map by probing the origin and the unit
/// vectors, then confirms affinity at a random point.
fn affine_probe(p: &Pipeline<'_>, d: usize, steps: usize) -> CliResult<(Tensor, Vec<f64>)> {
    let mut probes = Tensor::zeros(&[d + 1, d]);
    for i in 0..d {
        probes.set(i + 1, i, 1.0);
    }
    let out = p.run(&probes, None, steps)?;
    let m = out.cols();
    let b = out.row(0).to_vec();
    let mut a = Tensor::zeros(&[m, d]);
    for j in 0..d {
        for i in 0..m {
            a.set(i, j, out.get(j + 1, i) - b[i]);
        }
    }
    let x = numcore::standard_normal(&mut numcore::rng(0x5eed), 1, d);
    let direct = p.run(&x, None, steps)?;
    let predicted = x.matmul_t(&a)?.add_row(&Tensor::vector(b.clone()))?;
    let gap = direct.sub(&predicted)?.max_abs();
    if gap > 1e-8 * (1.0 + direct.max_abs()) {
        return Err(CliError::Config(format!(
            "closed_form_gaussian_kl needs an affine noise-to-output map (residual {gap:.3e})"
        )));
    }
    Ok((a, b))
}

pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Mean Euclidean distance over all unordered pairs of rows.
pub fn mean_pairwise_distance(x: &Tensor) -> f64 {
    let n = x.rows();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
        }
    }
    total / (n * (n - 1) / 2) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use hypernoise::generators::{make_generator, GeneratorConfig};

    #[test]
    fn pairwise_distance_of_a_triangle() {
        let x = Tensor::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0], vec![0.0, 4.0]]).unwrap();
        assert!((mean_pairwise_distance(&x) - 12.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn probe_recovers_affine_map() {
        let g = make_generator(
            &GeneratorConfig::affine_explicit(vec![vec![1.0, 2.0], vec![0.0, -1.0]], vec![0.5, 0.25]),
            0,
        )
        .unwrap();
        let (a, b) = affine_probe(&Pipeline::Base(&g), 2, 1).unwrap();
        assert_eq!(a.data(), &[1.0, 2.0, 0.0, -1.0]);
        assert_eq!(b, vec![0.5, 0.25]);
    }

    #[test]
    fn probe_rejects_nonlinear_map() {
        let g = make_generator(&GeneratorConfig::mlp(2, vec![8], 2), 3).unwrap();
        assert!(affine_probe(&Pipeline::Base(&g), 2, 1).is_err());
    }
}
