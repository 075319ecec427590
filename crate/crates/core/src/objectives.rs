//! The training loss, the exact noise-space KL and the log-determinant
//! error bound.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::hypernet::NoiseHypernetwork;
use crate::numcore::{jacobian_fd, logdet_and_trace, Bindings, Graph, NodeId, Tensor, DEFAULT_FD_EPS};
use crate::rewards::Reward;

/// Largest latent dimension for which dense Jacobians are formed.
pub const MAX_JACOBIAN_DIM: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    /// batch mean of `½‖f(x0)‖²`
    pub l2_term: f64,
    /// batch mean of `r(g(x0 + f(x0))) / α`
    pub reward_term: f64,
    pub total: f64,
    pub batch_size: usize,
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KlBreakdown {
    pub l2_term: f64,
    pub trace_term: f64,
    pub logdet_term: f64,
    pub exact_kl: f64,
    /// `exact_kl − l2_term`
    pub approx_error: f64,
    /// largest per-sample `|Tr J − log|det(I + J)||`
    pub max_abs_error_term: f64,
    /// `d(−ln(1−L) − L)` at `lipschitz_used`, absent when `L ≥ 1`
    pub bound: Option<f64>,
    /// compositional upper bound on the Lipschitz constant
    pub lipschitz_used: f64,
    /// sampled lower bound, for reference
    pub lipschitz_sampled: f64,
    pub n: usize,
}

/// A reusable graph for the batch loss `½‖f‖² − r(g(x0 + f))/α`.
pub struct LossGraph {
    graph: Graph,
    names: Vec<String>,
    delta: NodeId,
    reward: NodeId,
    l2: NodeId,
    reward_mean: NodeId,
    batch: usize,
    alpha: f64,
    conditioned: bool,
}

impl LossGraph {
    pub fn new(
        hn: &NoiseHypernetwork,
        reward: &Reward,
        batch: usize,
        alpha: f64,
        gen_steps: usize,
    ) -> Result<Self> {
        if batch == 0 {
            return Err(Error::Domain("loss batch must be nonempty".into()));
        }
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::Domain(format!("temperature must be positive, got {alpha}")));
        }
        let g = hn.generator();
        let names = hn.param_names();
        let mut graph = Graph::new();
        let x = graph.input("x0", false);
        let c = g.condition_dim().map(|_| graph.input("c", false));
        let delta = hn.build_graph(&mut graph, x, c, &names, true)?.delta;
        let xhat = graph.add(x, delta);
        let out = g.build_graph(&mut graph, xhat, c, gen_steps, None)?;
        let rewards = reward.build_graph(&mut graph, out, g.output_dim())?;
        let l2_sum = graph.half_sq_norm(delta);
        let l2 = graph.scale(l2_sum, 1.0 / batch as f64);
        let r_sum = graph.sum(rewards);
        let reward_mean = graph.scale(r_sum, 1.0 / (alpha * batch as f64));
        let total = graph.sub(l2, reward_mean);
        graph.set_output(total);
        Ok(Self {
            graph,
            names,
            delta,
            reward: rewards,
            l2,
            reward_mean,
            batch,
            alpha,
            conditioned: c.is_some(),
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Loss breakdown and gradients with respect to every hypernetwork
    /// parameter, keyed by parameter name.
    pub fn evaluate(
        &mut self,
        hn: &NoiseHypernetwork,
        noise: &Tensor,
        conditions: Option<&Tensor>,
    ) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
        let noise = noise.as_matrix();
        if noise.rows() != self.batch {
            return Err(Error::Dimension {
                what: "noise batch",
                expected: self.batch,
                got: noise.rows(),
            });
        }
        if conditions.is_some() != self.conditioned {
            return Err(Error::State("conditions must be supplied exactly when the generator is conditional".into()));
        }
        let tiled;
        let mut bindings = Bindings::new();
        bindings.insert("x0", &noise);
        if let Some(c) = conditions {
            tiled = if c.rows() == self.batch {
                c.as_matrix()
            } else {
                c.select_rows(&vec![0; self.batch])
            };
            bindings.insert("c", &tiled);
        }
        hn.bind(&self.names, &mut bindings);
        let total = self.graph.forward(&bindings)?.data()[0];
        let rewards = self.graph.value(self.reward)?;
        if let Some(i) = rewards.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("reward at sample {i}")));
        }
        if !self.graph.value(self.delta)?.is_finite() {
            return Err(Error::NonFinite("hypernetwork output".into()));
        }
        let l2_term = self.graph.value(self.l2)?.data()[0];
        let reward_term = self.graph.value(self.reward_mean)?.data()[0];
        if !total.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let grads = self.graph.backward(&Tensor::scalar(1.0))?;
        let grads = grads
            .into_iter()
            .filter(|(k, _)| self.names.contains(k))
            .collect();
        Ok((
            LossBreakdown {
                l2_term,
                reward_term,
                total,
                batch_size: self.batch,
                alpha: self.alpha,
            },
            grads,
        ))
    }
}

/// One-shot evaluation of the batch loss and its parameter gradients.
pub fn hypernoise_loss(
    hn: &NoiseHypernetwork,
    reward: &Reward,
    noise: &Tensor,
    conditions: Option<&Tensor>,
    alpha: f64,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
    let mut lg = LossGraph::new(hn, reward, noise.as_matrix().rows(), alpha, 1)?;
    lg.evaluate(hn, noise, conditions)
}

/// `Tr A − log|det(I + A)|`
pub fn error_term(j: &Tensor) -> Result<f64> {
    let (trace, logdet) = logdet_and_trace(j)?;
    Ok(trace - logdet)
}

/// `d(−ln(1 − L) − L)`, valid for `0 ≤ L < 1`.
pub fn theorem_bound(d: usize, lipschitz: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&lipschitz) {
        return Err(Error::Domain(format!(
            "log-determinant bound needs 0 ≤ L < 1, got {lipschitz}"
        )));
    }
    Ok(d as f64 * (-(-lipschitz).ln_1p() - lipschitz))
}

/// Noise-space KL `E[½‖f‖² + Tr J − log|det(I + J)|]` over the rows of
/// `noise`, with Jacobians from reverse mode. The first sample's Jacobian is
/// cross-checked against central differences.
pub fn exact_noise_kl(
    hn: &NoiseHypernetwork,
    noise: &Tensor,
    conditions: Option<&Tensor>,
) -> Result<KlBreakdown> {
    let noise = noise.as_matrix();
    let (n, d) = noise.dims2();
    if d > MAX_JACOBIAN_DIM {
        return Err(Error::Domain(format!(
            "dense Jacobians are limited to latent dimension {MAX_JACOBIAN_DIM}, got {d}"
        )));
    }
    let jacs = hn.jacobians(&noise, conditions)?;
    let first_cond = conditions.map(|c| Tensor::vector(c.row(0).to_vec()));
    let x_first = Tensor::vector(noise.row(0).to_vec());
    let fd = jacobian_fd(
        |x| hn.perturbation(x, first_cond.as_ref()),
        &x_first,
        DEFAULT_FD_EPS,
    )?;
    let scale = 1.0 + fd.max_abs();
    let mismatch = jacs[0].sub(&fd)?.max_abs() / scale;
    if mismatch > 1e-6 {
        return Err(Error::JacobianMismatch(mismatch));
    }
    let delta = hn.perturbation(&noise, conditions)?;
    let (mut l2, mut tr, mut ld, mut worst) = (0.0, 0.0, 0.0, 0.0f64);
    for (i, jac) in jacs.iter().enumerate() {
        let (t, l) = logdet_and_trace(jac).map_err(|e| match e {
            Error::Singular(_) => Error::Singular(Some(format!("sample {i}"))),
            other => other,
        })?;
        l2 += 0.5 * delta.row(i).iter().map(|v| v * v).sum::<f64>();
        tr += t;
        ld += l;
        worst = worst.max((t - l).abs());
    }
    let nf = n as f64;
    let (l2, tr, ld) = (l2 / nf, tr / nf, ld / nf);
    let exact = l2 + tr - ld;
    let lipschitz_used = hn.lipschitz_upper_bound();
    Ok(KlBreakdown {
        l2_term: l2,
        trace_term: tr,
        logdet_term: ld,
        exact_kl: exact,
        approx_error: exact - l2,
        max_abs_error_term: worst,
        bound: theorem_bound(d, lipschitz_used).ok(),
        lipschitz_used,
        lipschitz_sampled: hn.lipschitz_lower_bound(256, 0x5eed, first_cond.as_ref())?,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::{make_generator, GeneratorConfig};
    use crate::hypernet::{init_hypernet, AdapterSlot};
    use crate::numcore;
    use std::sync::Arc;

    #[test]
    fn error_term_scalars() {
        assert_eq!(error_term(&Tensor::zeros(&[3, 3])).unwrap(), 0.0);
        let e = error_term(&Tensor::diag(&[0.5])).unwrap();
        assert!((e - (0.5 - 1.5f64.ln())).abs() < 1e-15);
        assert!((e - 0.094_535).abs() < 1e-6);
        let e = error_term(&Tensor::diag(&[-0.5])).unwrap();
        assert!((e - 0.193_147).abs() < 1e-6);
    }

    #[test]
    fn bound_values() {
        assert_eq!(theorem_bound(5, 0.0).unwrap(), 0.0);
        assert!((theorem_bound(1, 0.5).unwrap() - (2f64.ln() - 0.5)).abs() < 1e-15);
        assert!((theorem_bound(16, 0.1).unwrap() - 16.0 * (-(0.9f64).ln() - 0.1)).abs() < 1e-14);
        assert!((theorem_bound(16, 0.1).unwrap() - 0.085_768).abs() < 1e-6);
        assert!(matches!(theorem_bound(2, 1.0), Err(Error::Domain(_))));
    }

    fn affine(d: usize) -> Arc<crate::generators::Generator> {
        Arc::new(make_generator(&GeneratorConfig::affine(d, d), 1).unwrap())
    }

    #[test]
    fn zero_init_loss_is_negative_reward() {
        let g = Arc::new(make_generator(&GeneratorConfig::image_decoder(4, vec![8], 2, 2), 0).unwrap());
        let hn = init_hypernet(&g, 2, 4.0, 0).unwrap();
        let r = Reward::redness(3.0);
        let x = numcore::standard_normal(&mut numcore::rng(1), 16, 4);
        let (lb, grads) = hypernoise_loss(&hn, &r, &x, None, 2.0).unwrap();
        let mean_r: f64 = r.evaluate_batch(&g.generate(&x, None, 1).unwrap()).unwrap().iter().sum::<f64>() / 16.0;
        assert_eq!(lb.l2_term, 0.0);
        assert!((lb.total + mean_r / 2.0).abs() < 1e-14);
        assert_eq!(grads.len(), hn.param_names().len());
    }

    #[test]
    fn constant_shift_kl_is_half_squared_norm() {
        let g = affine(3);
        let mut hn = init_hypernet(&g, 1, 1.0, 0).unwrap();
        hn.set_head_bias(Tensor::vector(vec![0.3, -0.4, 1.2])).unwrap();
        let x = numcore::standard_normal(&mut numcore::rng(2), 10, 3);
        let kl = exact_noise_kl(&hn, &x, None).unwrap();
        let half = 0.5 * (0.09 + 0.16 + 1.44);
        assert!((kl.exact_kl - half).abs() < 1e-12);
        assert_eq!(kl.trace_term, 0.0);
        assert_eq!(kl.logdet_term, 0.0);
    }

    #[test]
    fn linear_map_terms() {
        let g = affine(2);
        let mut hn = init_hypernet(&g, 2, 2.0, 0).unwrap();
        let head = hn.adapter_mut(AdapterSlot::Head);
        head.set_down(Tensor::identity(2)).unwrap();
        head.set_up(Tensor::identity(2).scale(0.3)).unwrap();
        let x = numcore::standard_normal(&mut numcore::rng(3), 40, 2);
        let kl = exact_noise_kl(&hn, &x, None).unwrap();
        assert!((kl.trace_term - 0.6).abs() < 1e-12);
        assert!((kl.logdet_term - 2.0 * 1.3f64.ln()).abs() < 1e-12);
        let sq: f64 = x.data().iter().map(|v| v * v).sum::<f64>() / 40.0;
        assert!((kl.l2_term - 0.045 * sq).abs() < 1e-12);
        assert!(kl.approx_error.abs() <= kl.bound.unwrap() + 1e-15);
    }

    #[test]
    fn non_finite_reward_names_sample() {
        let g = affine(2);
        let hn = init_hypernet(&g, 1, 1.0, 0).unwrap();
        let r = Reward::linear(vec![1.0, 0.0]);
        let mut x = Tensor::zeros(&[3, 2]);
        x.set(2, 0, f64::INFINITY);
        let err = hypernoise_loss(&hn, &r, &x, None, 1.0).unwrap_err();
        assert!(err.to_string().contains("sample 2"), "{err}");
    }
}
