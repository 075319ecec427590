//! Differentiable scalar rewards on generator outputs.
//!
//! Image outputs are laid out channel-major: all red values, then all green
//! values, then all blue values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Graph, NodeId, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Reward {
    /// `cᵀx`
    Linear { c: Vec<f64> },
    /// `sign · ½ xᵀQx` with symmetric `Q` given row by row.
    Quadratic { q: Vec<Vec<f64>>, sign: f64 },
    /// `scale · (mean red − ½ (mean green + mean blue))`
    Redness { scale: f64 },
    /// `Σ weightᵢ · partᵢ(x)`
    Composite { parts: Vec<WeightedReward> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedReward {
    pub weight: f64,
    pub reward: Reward,
}

impl Reward {
    pub fn linear(c: Vec<f64>) -> Self {
        Reward::Linear { c }
    }

    pub fn zero(dim: usize) -> Self {
        Reward::Linear { c: vec![0.0; dim] }
    }

    pub fn redness(scale: f64) -> Self {
        Reward::Redness { scale }
    }

    pub fn quadratic(q: Vec<Vec<f64>>, sign: f64) -> Self {
        Reward::Quadratic { q, sign }
    }

    pub fn composite(parts: Vec<(Reward, f64)>) -> Self {
        Reward::Composite {
            parts: parts
                .into_iter()
                .map(|(reward, weight)| WeightedReward { weight, reward })
                .collect(),
        }
    }

    /// Checks the reward against an output dimension.
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Reward::Linear { c } => {
                if c.len() != dim {
                    return Err(Error::Dimension {
                        what: "linear reward coefficients",
                        expected: dim,
                        got: c.len(),
                    });
                }
                if c.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("linear reward coefficients".into()));
                }
            }
            Reward::Quadratic { q, sign } => {
                if q.len() != dim || q.iter().any(|r| r.len() != dim) {
                    return Err(Error::Shape(format!("quadratic reward matrix must be {dim}x{dim}")));
                }
                for i in 0..dim {
                    for j in 0..i {
                        if (q[i][j] - q[j][i]).abs() > 1e-12 * (1.0 + q[i][j].abs()) {
                            return Err(Error::Domain("quadratic reward matrix must be symmetric".into()));
                        }
                    }
                }
                if !sign.is_finite() {
                    return Err(Error::NonFinite("quadratic reward sign".into()));
                }
            }
            Reward::Redness { scale } => {
                if dim == 0 || dim % 3 != 0 {
                    return Err(Error::Dimension {
                        what: "redness input (multiple of 3)",
                        expected: 3 * (dim / 3).max(1),
                        got: dim,
                    });
                }
                if !scale.is_finite() {
                    return Err(Error::NonFinite("redness scale".into()));
                }
            }
            Reward::Composite { parts } => {
                for p in parts {
                    if !p.weight.is_finite() {
                        return Err(Error::NonFinite("composite reward weight".into()));
                    }
                    p.reward.validate(dim)?;
                }
            }
        }
        Ok(())
    }

    /// Linear rewards as their coefficient vector, if this reward is linear.
    pub fn linear_coefficients(&self, dim: usize) -> Option<Vec<f64>> {
        match self {
            Reward::Linear { c } => Some(c.clone()),
            Reward::Redness { scale } => {
                let p = dim / 3;
                let red = scale / p as f64;
                let other = -scale / (2.0 * p as f64);
                Some(
                    (0..dim)
                        .map(|i| if i < p { red } else { other })
                        .collect(),
                )
            }
            Reward::Quadratic { .. } => None,
            Reward::Composite { parts } => {
                let mut acc = vec![0.0; dim];
                for p in parts {
                    let c = p.reward.linear_coefficients(dim)?;
                    acc.iter_mut().zip(c).for_each(|(a, v)| *a += p.weight * v);
                }
                Some(acc)
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Reward::Linear { c } => c.iter().all(|v| *v == 0.0),
            Reward::Quadratic { q, sign } => *sign == 0.0 || q.iter().flatten().all(|v| *v == 0.0),
            Reward::Redness { scale } => *scale == 0.0,
            Reward::Composite { parts } => parts.iter().all(|p| p.weight == 0.0 || p.reward.is_zero()),
        }
    }

    fn evaluate_row(&self, x: &[f64]) -> f64 {
        match self {
            Reward::Linear { c } => c.iter().zip(x).map(|(a, b)| a * b).sum(),
            Reward::Quadratic { q, sign } => {
                let quad: f64 = q
                    .iter()
                    .zip(x)
                    .map(|(row, xi)| xi * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
                    .sum();
                sign * 0.5 * quad
            }
            Reward::Redness { scale } => {
                let p = x.len() / 3;
                let mean = |k: usize| x[k * p..(k + 1) * p].iter().sum::<f64>() / p as f64;
                scale * (mean(0) - 0.5 * (mean(1) + mean(2)))
            }
            Reward::Composite { parts } => parts.iter().map(|p| p.weight * p.reward.evaluate_row(x)).sum(),
        }
    }

    fn gradient_row(&self, x: &[f64], out: &mut [f64], weight: f64) {
        match self {
            Reward::Linear { c } => out.iter_mut().zip(c).for_each(|(o, v)| *o += weight * v),
            Reward::Quadratic { q, sign } => {
                for (o, row) in out.iter_mut().zip(q) {
                    *o += weight * sign * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Reward::Redness { scale } => {
                let p = x.len() / 3;
                for (i, o) in out.iter_mut().enumerate() {
                    *o += weight
                        * if i < p {
                            scale / p as f64
                        } else {
                            -scale / (2.0 * p as f64)
                        };
                }
            }
            Reward::Composite { parts } => {
                for p in parts {
                    p.reward.gradient_row(x, out, weight * p.weight);
                }
            }
        }
    }

    /// `r(x)` for a single output vector.
    pub fn evaluate(&self, x: &Tensor) -> Result<f64> {
        self.validate(x.len())?;
        Ok(self.evaluate_row(x.data()))
    }

    /// `r` applied to each row of `x: [B, D]`.
    pub fn evaluate_batch(&self, x: &Tensor) -> Result<Vec<f64>> {
        let x = x.as_matrix();
        self.validate(x.cols())?;
        Ok((0..x.rows()).map(|i| self.evaluate_row(x.row(i))).collect())
    }

    /// `∇r(x)` for a single output vector, shaped like `x`.
    pub fn gradient(&self, x: &Tensor) -> Result<Tensor> {
        self.validate(x.len())?;
        let mut g = vec![0.0; x.len()];
        self.gradient_row(x.data(), &mut g, 1.0);
        Tensor::new(x.shape().to_vec(), g)
    }

    /// Adds per-row rewards (`[B, 1]`) of the batch node `x` to `graph`.
    pub fn build_graph(&self, graph: &mut Graph, x: NodeId, dim: usize) -> Result<NodeId> {
        self.validate(dim)?;
        Ok(self.build_unchecked(graph, x, dim))
    }

    fn build_unchecked(&self, graph: &mut Graph, x: NodeId, dim: usize) -> NodeId {
        match self {
            Reward::Linear { .. } | Reward::Redness { .. } => {
                let c = self.linear_coefficients(dim).expect("linear variant");
                let w = graph.constant(Tensor::vector(c));
                graph.matmul_t(x, w)
            }
            Reward::Quadratic { q, sign } => {
                let qm = Tensor::from_rows(q).expect("validated");
                let qn = graph.constant(qm);
                let xq = graph.matmul(x, qn);
                let prod = graph.mul(xq, x);
                let s = graph.row_sum(prod);
                graph.scale(s, 0.5 * sign)
            }
            Reward::Composite { parts } => {
                let mut acc: Option<NodeId> = None;
                for p in parts {
                    let node = p.reward.build_unchecked(graph, x, dim);
                    let node = graph.scale(node, p.weight);
                    acc = Some(match acc {
                        Some(a) => graph.add(a, node),
                        None => node,
                    });
                }
                match acc {
                    Some(a) => a,
                    None => {
                        let zero = graph.constant(Tensor::zeros(&[dim]));
                        graph.matmul_t(x, zero)
                    }
                }
            }
        }
    }

    /// `sup r` over the box `[lo, hi]^dim`, when finite and cheaply known.
    pub fn upper_bound(&self, dim: usize, range: Option<(f64, f64)>) -> Option<f64> {
        if self.is_zero() {
            return Some(0.0);
        }
        match self {
            Reward::Quadratic { q, sign } if *sign < 0.0 && is_psd(q) => Some(0.0),
            Reward::Quadratic { .. } => None,
            _ => {
                let (lo, hi) = range?;
                let c = self.linear_coefficients(dim)?;
                Some(c.iter().map(|v| (v * lo).max(v * hi)).sum())
            }
        }
    }
}

fn is_psd(q: &[Vec<f64>]) -> bool {
    let n = q.len();
    let flat: Vec<f64> = q.iter().flatten().copied().collect();
    let m = nalgebra::DMatrix::from_row_slice(n, n, &flat);
    m.symmetric_eigenvalues().iter().all(|v| *v >= -1e-12)
}
