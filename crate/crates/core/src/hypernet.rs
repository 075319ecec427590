//! The residual noise hypernetwork `f_φ`.
//!
//! The hypernetwork reuses the frozen generator's layers as its trunk and
//! adds a low-rank adapter to each of them. The generator's final layer is
//! replaced by a perturbation-only head whose base weight is zero, so the
//! head's output is purely the adapter contribution plus a trainable bias.
//! Every `up` matrix and the head bias start at zero, which makes `f_φ ≡ 0`
//! at initialization and the modulated noise `x0 + f_φ(x0)` equal to `x0`
//! bit for bit.

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::generators::Generator;
use crate::numcore::{self, spectral_norm_exact, Bindings, Graph, NodeId, Rng, Tensor};

/// `ΔW = scale · up · down` with `down: [r, n]`, `up: [m, r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    down: Tensor,
    up: Tensor,
    scale: f64,
}

impl LoraAdapter {
    /// Gaussian `down` with standard deviation `1/√n`, zero `up`,
    /// `scale = alpha / rank`.
    pub fn new(m: usize, n: usize, rank: usize, alpha: f64, rng: &mut Rng) -> Self {
        let down = numcore::standard_normal(rng, rank, n).scale(1.0 / (n as f64).sqrt());
        Self {
            down,
            up: Tensor::zeros(&[m, rank]),
            scale: alpha / rank as f64,
        }
    }

    pub fn rank(&self) -> usize {
        self.down.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.up.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.down.cols()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn down(&self) -> &Tensor {
        &self.down
    }

    pub fn up(&self) -> &Tensor {
        &self.up
    }

    pub fn param_count(&self) -> usize {
        self.rank() * (self.out_dim() + self.in_dim())
    }

    pub fn set_down(&mut self, down: Tensor) -> Result<()> {
        if down.dims2() != self.down.dims2() {
            return Err(Error::Shape(format!(
                "down matrix {:?}, expected {:?}",
                down.shape(),
                self.down.shape()
            )));
        }
        self.down = down.as_matrix();
        Ok(())
    }

    pub fn set_up(&mut self, up: Tensor) -> Result<()> {
        if up.dims2() != self.up.dims2() {
            return Err(Error::Shape(format!(
                "up matrix {:?}, expected {:?}",
                up.shape(),
                self.up.shape()
            )));
        }
        self.up = up.as_matrix();
        Ok(())
    }

    pub fn delta_weight(&self) -> Tensor {
        self.up.matmul(&self.down).expect("rank agrees").scale(self.scale)
    }

    /// `scale · (x downᵀ) upᵀ` for a batch `x: [B, n]`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul_t(&self.down)?.matmul_t(&self.up)?.scale(self.scale))
    }
}

/// Graph handles for one adapter's matrices.
#[derive(Clone, Copy, Debug)]
pub struct LoraNodes {
    pub down: NodeId,
    pub up: NodeId,
    pub scale: f64,
}

impl LoraNodes {
    pub fn apply(&self, graph: &mut Graph, x: NodeId) -> NodeId {
        let h = graph.matmul_t(x, self.down);
        let o = graph.matmul_t(h, self.up);
        graph.scale(o, self.scale)
    }
}

/// Addresses one adapter inside a hypernetwork.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterSlot {
    Trunk(usize),
    Head,
}

#[derive(Clone, Debug)]
pub struct NoiseHypernetwork {
    backbone: Arc<Generator>,
    trunk: Vec<LoraAdapter>,
    head: LoraAdapter,
    head_bias: Tensor,
    rank: usize,
    alpha: f64,
}

/// Graph nodes created by [`NoiseHypernetwork::build_graph`].
#[derive(Clone, Debug)]
pub struct HypernetNodes {
    pub delta: NodeId,
}

pub fn init_hypernet(
    g: &Arc<Generator>,
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<NoiseHypernetwork> {
    NoiseHypernetwork::new(g, rank, alpha, seed)
}

impl NoiseHypernetwork {
    pub fn new(g: &Arc<Generator>, rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if !(alpha > 0.0) {
            return Err(Error::Config("LoRA alpha must be positive".into()));
        }
        let layers = g.layers();
        let trunk_layers = &layers[..layers.len() - 1];
        let d = g.latent_dim();
        let head_in = trunk_layers
            .last()
            .map_or(d + g.condition_dim().unwrap_or(0), |l| l.out_dim());
        for (i, l) in trunk_layers.iter().enumerate() {
            let max = l.out_dim().min(l.in_dim());
            if rank > max {
                return Err(Error::RankTooLarge { layer: i, rank, max });
            }
        }
        if rank > d.min(head_in) {
            return Err(Error::RankTooLarge {
                layer: trunk_layers.len(),
                rank,
                max: d.min(head_in),
            });
        }
        let mut rng = numcore::rng(seed);
        let trunk = trunk_layers
            .iter()
            .map(|l| LoraAdapter::new(l.out_dim(), l.in_dim(), rank, alpha, &mut rng))
            .collect();
        let head = LoraAdapter::new(d, head_in, rank, alpha, &mut rng);
        Ok(Self {
            backbone: Arc::clone(g),
            trunk,
            head,
            head_bias: Tensor::zeros(&[d]),
            rank,
            alpha,
        })
    }

    pub fn generator(&self) -> &Arc<Generator> {
        &self.backbone
    }

    pub fn latent_dim(&self) -> usize {
        self.backbone.latent_dim()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Output is always the perturbation `f_φ(x0)`, never `x0 + f_φ(x0)`.
    pub fn perturbation_only(&self) -> bool {
        true
    }

    pub fn conditioned(&self) -> bool {
        self.backbone.condition_dim().is_some() && !self.trunk.is_empty()
    }

    pub fn adapter(&self, slot: AdapterSlot) -> &LoraAdapter {
        match slot {
            AdapterSlot::Trunk(i) => &self.trunk[i],
            AdapterSlot::Head => &self.head,
        }
    }

    pub fn adapter_mut(&mut self, slot: AdapterSlot) -> &mut LoraAdapter {
        match slot {
            AdapterSlot::Trunk(i) => &mut self.trunk[i],
            AdapterSlot::Head => &mut self.head,
        }
    }

    pub fn trunk_len(&self) -> usize {
        self.trunk.len()
    }

    pub fn head_bias(&self) -> &Tensor {
        &self.head_bias
    }

    pub fn set_head_bias(&mut self, bias: Tensor) -> Result<()> {
        if bias.len() != self.latent_dim() {
            return Err(Error::Dimension {
                what: "head bias",
                expected: self.latent_dim(),
                got: bias.len(),
            });
        }
        self.head_bias = Tensor::vector(bias.into_data());
        Ok(())
    }

    /// Trainable tensors in their canonical order.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(2 * self.trunk.len() + 3);
        for (i, a) in self.trunk.iter().enumerate() {
            out.push((format!("hn.trunk{i}.down"), &a.down));
            out.push((format!("hn.trunk{i}.up"), &a.up));
        }
        out.push(("hn.head.down".into(), &self.head.down));
        out.push(("hn.head.up".into(), &self.head.up));
        out.push(("hn.head.bias".into(), &self.head_bias));
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for a in &mut self.trunk {
            out.push(&mut a.down);
            out.push(&mut a.up);
        }
        out.push(&mut self.head.down);
        out.push(&mut self.head.up);
        out.push(&mut self.head_bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.parameters()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension {
                what: "flat parameter vector",
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for t in self.parameters_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Concatenates named gradients into the canonical flat order.
    pub fn flatten_grads(&self, grads: &std::collections::BTreeMap<String, Tensor>) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.param_count());
        for (name, t) in self.parameters() {
            let g = grads
                .get(&name)
                .ok_or_else(|| Error::State(format!("missing gradient for {name}")))?;
            if g.len() != t.len() {
                return Err(Error::Shape(format!("gradient for {name}")));
            }
            out.extend_from_slice(g.data());
        }
        Ok(out)
    }

    /// Inserts every trainable tensor into `bindings` under its graph name.
    pub fn bind<'a>(&'a self, names: &'a [String], bindings: &mut Bindings<'a>) {
        for (name, (_, t)) in names.iter().zip(self.parameters()) {
            bindings.insert(name.as_str(), t);
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        self.parameters().into_iter().map(|(n, _)| n).collect()
    }

    fn check_noise(&self, x0: &Tensor) -> Result<()> {
        if x0.cols() != self.latent_dim() {
            return Err(Error::Dimension {
                what: "noise",
                expected: self.latent_dim(),
                got: x0.cols(),
            });
        }
        Ok(())
    }

    fn trunk_input(&self, x0: &Tensor, condition: Option<&Tensor>) -> Result<Tensor> {
        match (self.backbone.condition_dim(), condition) {
            (Some(k), Some(c)) => {
                if c.cols() != k {
                    return Err(Error::Dimension {
                        what: "condition",
                        expected: k,
                        got: c.cols(),
                    });
                }
                let c = if c.rows() == x0.rows() {
                    c.as_matrix()
                } else {
                    c.select_rows(&vec![0; x0.rows()])
                };
                x0.concat_cols(&c)
            }
            (None, None) => Ok(x0.as_matrix()),
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

    /// `f_φ` on a batch `[B, latent]` (or a single vector).
    pub fn perturbation(&self, x0: &Tensor, condition: Option<&Tensor>) -> Result<Tensor> {
        self.check_noise(x0)?;
        let mut h = self.trunk_input(x0, condition)?;
        for (layer, adapter) in self.backbone.layers().iter().zip(&self.trunk) {
            let pre = h
                .matmul_t(&layer.weight)?
                .add_row(&layer.bias)?
                .add(&adapter.apply(&h)?)?;
            h = pre.map(|v| layer.activation.apply(v));
        }
        let mut delta = self.head.apply(&h)?.add_row(&self.head_bias)?;
        if x0.shape().len() == 1 {
            delta = delta.reshape(&[self.latent_dim()])?;
        }
        if !delta.is_finite() {
            return Err(Error::NonFinite("hypernetwork output".into()));
        }
        Ok(delta)
    }

    /// `(f_φ(x0), x0 + f_φ(x0))`.
    pub fn modulate(&self, x0: &Tensor, condition: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let delta = self.perturbation(x0, condition)?;
        let xhat = x0.add(&delta)?;
        Ok((delta, xhat))
    }

    /// Adds `f_φ` to `graph`. Parameters enter as inputs named by
    /// `names` (see [`Self::param_names`]), differentiable when
    /// `trainable` is set.
    pub fn build_graph(
        &self,
        graph: &mut Graph,
        x: NodeId,
        condition: Option<NodeId>,
        names: &[String],
        trainable: bool,
    ) -> Result<HypernetNodes> {
        if condition.is_some() != self.backbone.condition_dim().is_some() {
            return Err(Error::State("condition node presence must match the generator".into()));
        }
        let p: Vec<NodeId> = names.iter().map(|n| graph.input(n.clone(), trainable)).collect();
        let mut h = match condition {
            Some(c) if !self.trunk.is_empty() => graph.concat_cols(x, c),
            _ => x,
        };
        for (i, (layer, adapter)) in self.backbone.layers().iter().zip(&self.trunk).enumerate() {
            let w = graph.constant(layer.weight.clone());
            let b = graph.constant(layer.bias.clone());
            let lin = graph.matmul_t(h, w);
            let pre = graph.add_row(lin, b);
            let lora = LoraNodes {
                down: p[2 * i],
                up: p[2 * i + 1],
                scale: adapter.scale,
            };
            let delta = lora.apply(graph, h);
            let pre = graph.add(pre, delta);
            h = graph.activation(pre, layer.activation);
        }
        let k = 2 * self.trunk.len();
        let head = LoraNodes {
            down: p[k],
            up: p[k + 1],
            scale: self.head.scale,
        };
        let out = head.apply(graph, h);
        let delta = graph.add_row(out, p[k + 2]);
        graph.set_output(delta);
        Ok(HypernetNodes { delta })
    }

    /// Per-sample Jacobians `∂f_φ/∂x0` (`[d, d]` each) by reverse mode: one
    /// backward sweep per output coordinate over the whole batch.
    pub fn jacobians(&self, x0: &Tensor, condition: Option<&Tensor>) -> Result<Vec<Tensor>> {
        self.check_noise(x0)?;
        let x0 = x0.as_matrix();
        let (n, d) = x0.dims2();
        let names = self.param_names();
        let mut graph = Graph::new();
        let x = graph.input("x0", true);
        let c = self.backbone.condition_dim().map(|_| graph.input("c", false));
        let nodes = self.build_graph(&mut graph, x, c, &names, false)?;
        graph.set_output(nodes.delta);
        let cond_tiled;
        let mut bindings = Bindings::new();
        bindings.insert("x0", &x0);
        if let Some(cond) = condition {
            cond_tiled = if cond.rows() == n {
                cond.as_matrix()
            } else {
                cond.select_rows(&vec![0; n])
            };
            bindings.insert("c", &cond_tiled);
        }
        self.bind(&names, &mut bindings);
        graph.forward(&bindings)?;
        let mut jacs = vec![Tensor::zeros(&[d, d]); n];
        for i in 0..d {
            let mut seed = Tensor::zeros(&[n, d]);
            for s in 0..n {
                seed.set(s, i, 1.0);
            }
            let grads = graph.backward(&seed)?;
            let gx = &grads["x0"];
            for (s, jac) in jacs.iter_mut().enumerate() {
                jac.row_mut(i).copy_from_slice(gx.row(s));
            }
        }
        Ok(jacs)
    }

    /// Largest sampled ratio `‖f(x) − f(y)‖ / ‖x − y‖`; a lower bound on
    /// the Lipschitz constant of `f_φ` in its noise argument.
    pub fn lipschitz_lower_bound(
        &self,
        n_pairs: usize,
        seed: u64,
        condition: Option<&Tensor>,
    ) -> Result<f64> {
        if n_pairs == 0 {
            return Err(Error::Domain("need at least one pair".into()));
        }
        let (x, y) = sample_pairs(self.latent_dim(), n_pairs, seed);
        let fx = self.perturbation(&x, condition)?;
        let fy = self.perturbation(&y, condition)?;
        let mut best: f64 = 0.0;
        for i in 0..n_pairs {
            let num = dist(fx.row(i), fy.row(i));
            let den = dist(x.row(i), y.row(i));
            best = best.max(num / den);
        }
        Ok(best)
    }

    /// Product of exact per-layer spectral norms times activation slope
    /// bounds: an upper bound on the Lipschitz constant of `f_φ` in `x0`.
    pub fn lipschitz_upper_bound(&self) -> f64 {
        let d = self.latent_dim();
        let mut bound = 1.0;
        for (i, (layer, adapter)) in self.backbone.layers().iter().zip(&self.trunk).enumerate() {
            let mut w = layer.weight.add(&adapter.delta_weight()).expect("same shape");
            if i == 0 {
                w = w.slice_cols(0, d).expect("noise columns come first");
            }
            bound *= spectral_norm_exact(&w) * layer.activation.max_slope();
        }
        let mut head = self.head.delta_weight();
        if self.trunk.is_empty() {
            head = head.slice_cols(0, d).expect("noise columns come first");
        }
        bound * spectral_norm_exact(&head)
    }

    /// Fills every adapter `up` matrix with seeded Gaussians of standard
    /// deviation `std`, giving a generic non-zero `f_φ`.
    pub fn randomize_adapters(&mut self, std: f64, seed: u64) {
        let mut rng = numcore::rng(seed);
        for a in self.trunk.iter_mut().chain(std::iter::once(&mut self.head)) {
            for v in a.up.data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = std * z;
            }
        }
    }

    /// Rescales the head adapter so that [`Self::lipschitz_upper_bound`]
    /// equals `target`.
    pub fn rescale_to_lipschitz(&mut self, target: f64) -> Result<()> {
        let current = self.lipschitz_upper_bound();
        if !(current > 0.0) {
            return Err(Error::Domain("cannot rescale a network with zero Lipschitz bound".into()));
        }
        let factor = target / current;
        self.head.up = self.head.up.scale(factor);
        self.head_bias = self.head_bias.scale(factor);
        Ok(())
    }
}

/// Pairs `(x, x + t·u)` with `x ~ N(0, I)`, unit `u`, and `t` cycling over
/// `{1, 0.1, 0.01}` so both global and local ratios are probed.
pub(crate) fn sample_pairs(d: usize, n: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = numcore::rng(seed);
    let x = numcore::standard_normal(&mut rng, n, d);
    let mut u = numcore::standard_normal(&mut rng, n, d);
    let steps = [1.0, 0.1, 0.01];
    for i in 0..n {
        let row = u.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let t = steps[i % steps.len()];
        row.iter_mut().for_each(|v| *v *= t / norm);
    }
    let y = x.add(&u).expect("same shape");
    (x, y)
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}
