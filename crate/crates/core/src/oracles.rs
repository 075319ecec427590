//! Numerical checks of the theory: sampling the tilted noise law, the
//! pushforward identity, Stein's lemma, the data processing inequality and
//! the bi-Lipschitz property of the residual transform.

use rayon::prelude::*;
use rand::Rng as _;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::generators::{Generator, GeneratorVariant};
use crate::hypernet::{dist, sample_pairs, NoiseHypernetwork};
use crate::numcore::{self, derive_seed, Tensor};
use crate::rewards::Reward;

/// Universal statistical tolerance, in standard errors.
pub const Z_TOLERANCE: f64 = 4.0;
/// Below this effective sample size a weighted comparison is inconclusive.
pub const MIN_ESS: f64 = 100.0;
/// Rejection sampling gives up below this acceptance rate.
pub const MIN_ACCEPTANCE: f64 = 1e-4;

const PROPOSAL_CHUNK: usize = 4096;
const ACCEPTANCE_PROBE: usize = 50_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Inconclusive,
    Fail,
}

impl CheckStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckStatus::Pass => "pass",
            CheckStatus::Inconclusive => "inconclusive",
            CheckStatus::Fail => "fail",
        }
    }

    fn from_bool(ok: bool) -> Self {
        if ok {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        }
    }
}

/// Upper bound `M ≥ sup r(g(x))` used by rejection sampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Envelope {
    /// From [`Reward::upper_bound`] on the generator's output box.
    FromReward,
    Declared(f64),
    /// Maximum reward over this many pilot draws, plus `α/2`. Raised and
    /// restarted if a later proposal exceeds it.
    Pilot(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TiltMethod {
    Rejection(Envelope),
    Snis,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TiltKind {
    Rejection,
    Snis,
}

/// Draws from `p0*(x0) ∝ N(x0; 0, I) · exp(r(g(x0))/α)`.
#[derive(Clone, Debug)]
pub struct TiltedSampleSet {
    /// `[n, latent]`
    pub samples: Tensor,
    /// self-normalized; uniform for rejection
    pub weights: Vec<f64>,
    pub ess: f64,
    pub method: TiltKind,
    pub alpha: f64,
    pub acceptance_rate: Option<f64>,
    pub envelope: Option<f64>,
}

impl TiltedSampleSet {
    pub fn weighted_mean(&self) -> Vec<f64> {
        weighted_moments(&self.samples, &self.weights).0
    }
}

fn rewards_of(g: &Generator, r: &Reward, x0: &Tensor, condition: Option<&Tensor>) -> Result<Vec<f64>> {
    let out = g.generate(x0, condition, 1)?;
    let values = r.evaluate_batch(&out)?;
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("reward at sample {i}")));
    }
    Ok(values)
}

fn normalized_weights(log_w: &[f64]) -> (Vec<f64>, f64) {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    let ess = 1.0 / w.iter().map(|v| v * v).sum::<f64>();
    (w, ess)
}

pub fn sample_tilted_noise(
    g: &Generator,
    r: &Reward,
    alpha: f64,
    n: usize,
    seed: u64,
    method: TiltMethod,
    condition: Option<&Tensor>,
) -> Result<TiltedSampleSet> {
    if n == 0 {
        return Err(Error::Domain("need at least one tilted sample".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {alpha}")));
    }
    r.validate(g.output_dim())?;
    let d = g.latent_dim();
    match method {
        TiltMethod::Snis => {
            let mut rng = numcore::rng(seed);
            let x0 = numcore::standard_normal(&mut rng, n, d);
            let log_w: Vec<f64> = rewards_of(g, r, &x0, condition)?
                .into_iter()
                .map(|v| v / alpha)
                .collect();
            let (weights, ess) = normalized_weights(&log_w);
            Ok(TiltedSampleSet {
                samples: x0,
                weights,
                ess,
                method: TiltKind::Snis,
                alpha,
                acceptance_rate: None,
                envelope: None,
            })
        }
        TiltMethod::Rejection(envelope) => {
            let (mut m, adaptive) = match envelope {
                Envelope::FromReward => (
                    r.upper_bound(g.output_dim(), g.output_range())
                        .ok_or(Error::UnboundedReward)?,
                    false,
                ),
                Envelope::Declared(m) => (m, false),
                Envelope::Pilot(pilot) => {
                    let mut rng = numcore::rng(derive_seed(seed, u64::MAX));
                    let x = numcore::standard_normal(&mut rng, pilot.max(1), d);
                    let top = rewards_of(g, r, &x, condition)?
                        .into_iter()
                        .fold(f64::NEG_INFINITY, f64::max);
                    (top + 0.5 * alpha, true)
                }
            };
            for attempt in 0..4u64 {
                match rejection_pass(g, r, alpha, n, derive_seed(seed, attempt), m, condition)? {
                    RejectionOutcome::Done { samples, rate } => {
                        return Ok(TiltedSampleSet {
                            samples,
                            weights: vec![1.0 / n as f64; n],
                            ess: n as f64,
                            method: TiltKind::Rejection,
                            alpha,
                            acceptance_rate: Some(rate),
                            envelope: Some(m),
                        })
                    }
                    RejectionOutcome::Exceeded(top) if adaptive => m = top + 0.5 * alpha,
                    RejectionOutcome::Exceeded(top) => {
                        return Err(Error::Domain(format!(
                            "reward {top} exceeds the rejection envelope {m}"
                        )))
                    }
                }
            }
            Err(Error::Domain("rejection envelope kept being exceeded".into()))
        }
    }
}

enum RejectionOutcome {
    Done { samples: Tensor, rate: f64 },
    Exceeded(f64),
}

fn rejection_pass(
    g: &Generator,
    r: &Reward,
    alpha: f64,
    n: usize,
    seed: u64,
    envelope: f64,
    condition: Option<&Tensor>,
) -> Result<RejectionOutcome> {
    let d = g.latent_dim();
    let mut rng = numcore::rng(seed);
    let mut accepted: Vec<Tensor> = Vec::new();
    let mut count = 0usize;
    let mut proposals = 0usize;
    while count < n {
        let x = numcore::standard_normal(&mut rng, PROPOSAL_CHUNK, d);
        let rewards = rewards_of(g, r, &x, condition)?;
        let top = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if top > envelope {
            return Ok(RejectionOutcome::Exceeded(top));
        }
        let mut keep = Vec::new();
        for (i, v) in rewards.iter().enumerate() {
            let u: f64 = rng.random();
            if count + keep.len() == n {
                break;
            }
            proposals += 1;
            if u < ((v - envelope) / alpha).exp() {
                keep.push(i);
            }
        }
        count += keep.len();
        if !keep.is_empty() {
            accepted.push(x.select_rows(&keep));
        }
        let rate = count as f64 / proposals as f64;
        if proposals >= ACCEPTANCE_PROBE && rate < MIN_ACCEPTANCE {
            return Err(Error::LowAcceptance { rate });
        }
    }
    let samples = Tensor::concat_rows(&accepted)?;
    Ok(RejectionOutcome::Done {
        samples,
        rate: count as f64 / proposals as f64,
    })
}

/// Weighted per-column means and their standard errors
/// `sqrt(Σ wᵢ² (yᵢ − m)²)` for self-normalized weights.
pub fn weighted_moments(y: &Tensor, w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = y.dims2();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(y.row(i)) {
            *m += w[i] * v;
        }
    }
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(y.row(i)).zip(&mean) {
            *s += w[i] * w[i] * (v - m) * (v - m);
        }
    }
    (mean, var.into_iter().map(f64::sqrt).collect())
}

/// Per-coordinate first and second moments with standard errors.
#[derive(Clone, Debug, Serialize)]
pub struct MomentEstimate {
    pub mean: Vec<f64>,
    pub mean_se: Vec<f64>,
    pub second: Vec<f64>,
    pub second_se: Vec<f64>,
    pub ess: f64,
}

impl MomentEstimate {
    pub fn from_weighted(y: &Tensor, w: &[f64], ess: f64) -> Self {
        let (mean, mean_se) = weighted_moments(y, w);
        let (second, second_se) = weighted_moments(&y.map(|v| v * v), w);
        Self {
            mean,
            mean_se,
            second,
            second_se,
            ess,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PushforwardReport {
    /// outputs of tilted noise samples
    pub noise_route: MomentEstimate,
    /// importance-weighted base outputs
    pub output_route: MomentEstimate,
    /// closed-form output moments, when available
    pub analytic: Option<(Vec<f64>, Vec<f64>)>,
    /// largest standardized gap over every compared moment
    pub max_z: f64,
    pub inconclusive: bool,
    pub status: CheckStatus,
}

fn gaps(a: &[f64], sa: &[f64], b: &[f64], sb: &[f64]) -> f64 {
    a.iter()
        .zip(sa)
        .zip(b.iter().zip(sb))
        .map(|((x, sx), (y, sy))| {
            let se = (sx * sx + sy * sy).sqrt();
            if se > 0.0 {
                (x - y).abs() / se
            } else if x == y {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max)
}

/// Compares moments of `g(x̂0)` for `x̂0 ~ p0*` with importance-weighted
/// moments of `g(x0)`, `x0 ~ N(0, I)`, weights `exp(r(g(x0))/α)`, drawn from
/// independent streams.
pub fn pushforward_check(
    g: &Generator,
    r: &Reward,
    alpha: f64,
    n: usize,
    seed: u64,
    condition: Option<&Tensor>,
) -> Result<PushforwardReport> {
    if n < 1000 {
        return Err(Error::Domain("pushforward check needs n ≥ 1000".into()));
    }
    let bounded = r.upper_bound(g.output_dim(), g.output_range()).is_some();
    let method = if bounded {
        TiltMethod::Rejection(Envelope::Pilot(4096))
    } else {
        TiltMethod::Snis
    };
    let tilted = sample_tilted_noise(g, r, alpha, n, derive_seed(seed, 1), method, condition)?;
    let y_a = g.generate(&tilted.samples, condition, 1)?;
    let noise_route = MomentEstimate::from_weighted(&y_a, &tilted.weights, tilted.ess);

    let mut rng = numcore::rng(derive_seed(seed, 2));
    let x0 = numcore::standard_normal(&mut rng, n, g.latent_dim());
    let y_b = g.generate(&x0, condition, 1)?;
    let log_w: Vec<f64> = r.evaluate_batch(&y_b)?.iter().map(|v| v / alpha).collect();
    let (w, ess) = normalized_weights(&log_w);
    let output_route = MomentEstimate::from_weighted(&y_b, &w, ess);

    let mut max_z = gaps(
        &noise_route.mean,
        &noise_route.mean_se,
        &output_route.mean,
        &output_route.mean_se,
    )
    .max(gaps(
        &noise_route.second,
        &noise_route.second_se,
        &output_route.second,
        &output_route.second_se,
    ));
    let analytic = affine_linear_output_moments(g, r, alpha);
    if let Some((mean, second)) = &analytic {
        let zero = vec![0.0; mean.len()];
        for est in [&noise_route, &output_route] {
            max_z = max_z
                .max(gaps(&est.mean, &est.mean_se, mean, &zero))
                .max(gaps(&est.second, &est.second_se, second, &zero));
        }
    }
    let inconclusive = noise_route.ess < MIN_ESS || output_route.ess < MIN_ESS;
    let status = if inconclusive {
        CheckStatus::Inconclusive
    } else {
        CheckStatus::from_bool(max_z <= Z_TOLERANCE)
    };
    Ok(PushforwardReport {
        noise_route,
        output_route,
        analytic,
        max_z,
        inconclusive,
        status,
    })
}

/// For `g(x) = Ax + b` and `r(y) = cᵀy`: the tilted noise law is
/// `N(Aᵀc/α, I)`, so outputs follow `N(AAᵀc/α + b, AAᵀ)`. Returns
/// per-coordinate `(E[y], E[y²])`.
pub fn affine_linear_output_moments(
    g: &Generator,
    r: &Reward,
    alpha: f64,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let (a, b) = affine_parts(g)?;
    let c = r.linear_coefficients(g.output_dim())?;
    let shift = Tensor::vector(c).matmul(&a).ok()?.scale(1.0 / alpha);
    let mean = shift.matmul_t(&a).ok()?.add_row(&b).ok()?.into_data();
    let aat = a.matmul_t(&a).ok()?;
    let second = mean
        .iter()
        .enumerate()
        .map(|(i, m)| aat.get(i, i) + m * m)
        .collect();
    Some((mean, second))
}

/// `(A, b)` when `g` is an unconditioned, unsquashed affine map.
pub fn affine_parts(g: &Generator) -> Option<(Tensor, Tensor)> {
    if g.variant() != GeneratorVariant::Affine || g.squash().is_some() || g.condition_dim().is_some() {
        return None;
    }
    let layer = &g.layers()[0];
    Some((layer.weight.clone(), layer.bias.clone()))
}

/// Closed-form noise tilt mean `Aᵀc/α` for affine `g` and linear `r`.
pub fn affine_linear_tilt_mean(g: &Generator, r: &Reward, alpha: f64) -> Option<Vec<f64>> {
    let (a, _) = affine_parts(g)?;
    let c = r.linear_coefficients(g.output_dim())?;
    Some(
        Tensor::vector(c)
            .matmul(&a)
            .ok()?
            .scale(1.0 / alpha)
            .into_data(),
    )
}

/// A map `ℝ^d → ℝ^d` with a computable Jacobian trace.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;
    /// Row-wise values for `x: [B, d]`.
    fn eval(&self, x: &Tensor) -> Result<Tensor>;
    /// Row-wise `Tr J(x)`.
    fn jacobian_traces(&self, x: &Tensor) -> Result<Vec<f64>>;
}

/// `f(x) = W x`
pub struct LinearField(pub Tensor);

impl VectorField for LinearField {
    fn dim(&self) -> usize {
        self.0.rows()
    }

    fn eval(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul_t(&self.0)
    }

    fn jacobian_traces(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(vec![self.0.trace(); x.rows()])
    }
}

impl VectorField for NoiseHypernetwork {
    fn dim(&self) -> usize {
        self.latent_dim()
    }

    fn eval(&self, x: &Tensor) -> Result<Tensor> {
        self.perturbation(x, None)
    }

    fn jacobian_traces(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.jacobians(x, None)?.iter().map(Tensor::trace).collect())
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SteinResult {
    /// mean `xᵀf(x)`
    pub lhs: f64,
    /// mean `Tr J_f(x)`
    pub rhs: f64,
    /// standard error of the mean paired difference
    pub se: f64,
    /// `sqrt(se_lhs² + se_rhs²)`, ignoring the pairing
    pub pooled_se: f64,
    pub n: usize,
    pub status: CheckStatus,
}

/// Monte-Carlo check of `E[xᵀf(x)] = E[Tr J_f(x)]` for `x ~ N(0, I)`.
pub fn stein_check(f: &dyn VectorField, n: usize, seed: u64) -> Result<SteinResult> {
    if n < 1000 {
        return Err(Error::Domain("Stein check needs n ≥ 1000".into()));
    }
    const CHUNK: usize = 10_000;
    let d = f.dim();
    let chunks: Vec<(usize, usize)> = (0..n.div_ceil(CHUNK))
        .map(|k| (k, CHUNK.min(n - k * CHUNK)))
        .collect();
    let parts: Vec<Result<Vec<(f64, f64)>>> = chunks
        .par_iter()
        .map(|&(k, len)| {
            let mut rng = numcore::rng(derive_seed(seed, k as u64));
            let x = numcore::standard_normal(&mut rng, len, d);
            let fx = f.eval(&x)?;
            let tr = f.jacobian_traces(&x)?;
            Ok((0..len)
                .map(|i| {
                    let inner: f64 = x.row(i).iter().zip(fx.row(i)).map(|(a, b)| a * b).sum();
                    (inner, tr[i])
                })
                .collect())
        })
        .collect();
    let mut pairs = Vec::with_capacity(n);
    for p in parts {
        pairs.extend(p?);
    }
    let nf = n as f64;
    let lhs = pairs.iter().map(|p| p.0).sum::<f64>() / nf;
    let rhs = pairs.iter().map(|p| p.1).sum::<f64>() / nf;
    let var = |vals: &mut dyn Iterator<Item = f64>, m: f64| vals.map(|v| (v - m) * (v - m)).sum::<f64>() / (nf - 1.0);
    let diff_mean = lhs - rhs;
    let se = (var(&mut pairs.iter().map(|p| p.0 - p.1), diff_mean) / nf).sqrt();
    let pooled_se = ((var(&mut pairs.iter().map(|p| p.0), lhs) + var(&mut pairs.iter().map(|p| p.1), rhs)) / nf).sqrt();
    let gap = (lhs - rhs).abs();
    let status = CheckStatus::from_bool(gap <= Z_TOLERANCE * se || gap <= 1e-12 * (1.0 + lhs.abs()));
    Ok(SteinResult {
        lhs,
        rhs,
        se,
        pooled_se,
        n,
        status,
    })
}

fn kth_smallest(dists: impl Iterator<Item = f64>, k: usize) -> f64 {
    let mut best = vec![f64::INFINITY; k];
    for v in dists {
        if v < best[k - 1] {
            let pos = best.partition_point(|b| *b <= v);
            best.insert(pos, v);
            best.pop();
        }
    }
    best[k - 1]
}

fn knn_estimate(p: &Tensor, q: &Tensor, k: usize) -> Option<f64> {
    let (n, d) = p.dims2();
    let m = q.rows();
    let terms: Vec<Option<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = p.row(i);
            let rho = kth_smallest(
                (0..n).filter(|&j| j != i).map(|j| sq_dist(x, p.row(j))),
                k,
            );
            let nu = kth_smallest((0..m).map(|j| sq_dist(x, q.row(j))), k);
            if rho > 0.0 && nu > 0.0 {
                Some(0.5 * (nu.ln() - rho.ln()))
            } else {
                None
            }
        })
        .collect();
    let mut sum = 0.0;
    for t in terms {
        sum += t?;
    }
    Some(d as f64 * sum / n as f64 + (m as f64 / (n as f64 - 1.0)).ln())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-nearest-neighbour estimate of `D(P ‖ Q)` from samples (rows).
pub fn kl_knn(samples_p: &Tensor, samples_q: &Tensor, k: usize) -> Result<f64> {
    let p = samples_p.as_matrix();
    let q = samples_q.as_matrix();
    if k == 0 {
        return Err(Error::Domain("k must be at least 1".into()));
    }
    if p.cols() != q.cols() {
        return Err(Error::Dimension {
            what: "kNN sample dimension",
            expected: p.cols(),
            got: q.cols(),
        });
    }
    if p.rows() < k + 1 || q.rows() < k + 1 {
        return Err(Error::Domain(format!("kNN estimate needs more than k = {k} points per set")));
    }
    if let Some(v) = knn_estimate(&p, &q, k) {
        return Ok(v);
    }
    // Break ties with a tiny deterministic jitter, once.
    let scale = 1e-10 * (1.0 + p.max_abs().max(q.max_abs()));
    let mut rng = numcore::rng(0x6a17);
    let jp = p.add(&numcore::standard_normal(&mut rng, p.rows(), p.cols()).scale(scale))?;
    let jq = q.add(&numcore::standard_normal(&mut rng, q.rows(), q.cols()).scale(scale))?;
    knn_estimate(&jp, &jq, k).ok_or(Error::DuplicatePoints)
}

/// [`kl_knn`] after mapping both sets through the affine whitening
/// `x ↦ L⁻¹(x − μ_q)` fitted to `samples_q`. KL is invariant under the map,
/// and the estimator's bias from anisotropic scales largely disappears.
pub fn kl_knn_whitened(samples_p: &Tensor, samples_q: &Tensor, k: usize) -> Result<f64> {
    let q = samples_q.as_matrix();
    let p = samples_p.as_matrix();
    if p.cols() != q.cols() {
        return Err(Error::Dimension {
            what: "kNN sample dimension",
            expected: q.cols(),
            got: p.cols(),
        });
    }
    let white = Whitener::fit(&q)?;
    kl_knn(&white.apply(&p), &white.apply(&q), k)
}

/// Affine map to zero mean and identity covariance of a reference sample.
#[derive(Clone, Debug)]
pub struct Whitener {
    mean: Vec<f64>,
    /// `L⁻¹` for the Cholesky factor `L` of the reference covariance
    inv_chol: Tensor,
}

impl Whitener {
    pub fn fit(reference: &Tensor) -> Result<Self> {
        let d = reference.cols();
        if reference.rows() <= d {
            return Err(Error::Domain("whitening needs more samples than dimensions".into()));
        }
        let cov = reference.row_covariance();
        let chol = nalgebra::DMatrix::from_row_slice(d, d, cov.data())
            .cholesky()
            .ok_or_else(|| Error::Singular(Some("reference covariance".into())))?;
        let inv = chol
            .l()
            .try_inverse()
            .ok_or_else(|| Error::Singular(Some("reference covariance".into())))?;
        let rows: Vec<f64> = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| inv[(i, j)]).collect();
        Ok(Self {
            mean: reference.column_means(),
            inv_chol: Tensor::matrix(d, d, rows)?,
        })
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let centered = x
            .as_matrix()
            .add_row(&Tensor::vector(self.mean.iter().map(|m| -m).collect()))
            .expect("dimension checked at fit");
        centered.matmul_t(&self.inv_chol).expect("dimension checked at fit")
    }
}

/// `D(N(m1, S1) ‖ N(m2, S2))`
pub fn gaussian_kl(m1: &[f64], s1: &Tensor, m2: &[f64], s2: &Tensor) -> Result<f64> {
    let d = m1.len();
    let to_na = |t: &Tensor| nalgebra::DMatrix::from_row_slice(d, d, t.data());
    let a = to_na(s1);
    let b = to_na(s2);
    let chol_b = b
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular(Some("reference covariance".into())))?;
    let chol_a = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular(Some("covariance".into())))?;
    let binv_a = chol_b.solve(&a);
    let diff = nalgebra::DVector::from_iterator(d, m2.iter().zip(m1).map(|(x, y)| x - y));
    let maha = diff.dot(&chol_b.solve(&diff));
    let logdet = |l: &nalgebra::DMatrix<f64>| 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let ld_a = logdet(&chol_a.l());
    let ld_b = logdet(&chol_b.l());
    let kl = 0.5 * (binv_a.trace() + maha - d as f64 + ld_b - ld_a);
    // equal laws can round a hair below zero
    Ok(if kl < 0.0 { 0.0 } else { kl })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMethod {
    ClosedForm,
    Knn,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct DpiResult {
    pub kl_noise: f64,
    pub kl_output: f64,
    pub margin: f64,
    pub method: KlMethod,
    pub tolerance: f64,
    pub status: CheckStatus,
}

/// Estimator slack allowed on the DPI margin under kNN estimation.
pub const KNN_DPI_TOLERANCE: f64 = 0.05;

/// `D(p0^φ ‖ p0)` against `D(g♯p0^φ ‖ g♯p0)`.
pub fn dpi_check(hn: &NoiseHypernetwork, n: usize, seed: u64, k: usize) -> Result<DpiResult> {
    if let Some(res) = dpi_closed_form(hn)? {
        return Ok(res);
    }
    let g = hn.generator();
    let d = g.latent_dim();
    let mut rng = numcore::rng(derive_seed(seed, 1));
    let x0 = numcore::standard_normal(&mut rng, n, d);
    let (_, xhat) = hn.modulate(&x0, None)?;
    let mut rng = numcore::rng(derive_seed(seed, 2));
    let reference = numcore::standard_normal(&mut rng, n, d);
    let kl_noise = kl_knn_whitened(&xhat, &reference, k)?;
    let kl_output = kl_knn_whitened(&g.generate(&xhat, None, 1)?, &g.generate(&reference, None, 1)?, k)?;
    let margin = kl_noise - kl_output;
    Ok(DpiResult {
        kl_noise,
        kl_output,
        margin,
        method: KlMethod::Knn,
        tolerance: KNN_DPI_TOLERANCE,
        status: CheckStatus::from_bool(margin >= -KNN_DPI_TOLERANCE),
    })
}

/// Both laws are Gaussian when the hypernetwork is affine in `x0`
/// (no trunk) and the generator is affine with full-row-rank `A`.
fn dpi_closed_form(hn: &NoiseHypernetwork) -> Result<Option<DpiResult>> {
    if hn.trunk_len() != 0 {
        return Ok(None);
    }
    let g = hn.generator();
    let Some((a, b)) = affine_parts(g) else {
        return Ok(None);
    };
    let d = g.latent_dim();
    let head = hn.adapter(crate::hypernet::AdapterSlot::Head).delta_weight();
    let t = Tensor::identity(d).add(&head)?;
    let mu = hn.head_bias().data().to_vec();
    let cov = t.matmul_t(&t)?;
    let Ok(kl_noise) = gaussian_kl(&mu, &cov, &vec![0.0; d], &Tensor::identity(d)) else {
        return Ok(None);
    };
    let out_mu = Tensor::vector(mu).matmul_t(&a)?.add_row(&b)?.into_data();
    let out_cov = a.matmul(&cov)?.matmul_t(&a)?;
    let base_cov = a.matmul_t(&a)?;
    let Ok(kl_output) = gaussian_kl(&out_mu, &out_cov, b.data(), &base_cov) else {
        return Ok(None);
    };
    let margin = kl_noise - kl_output;
    // exact up to rounding in the closed forms
    let tolerance = 1e-10 * (1.0 + kl_noise.abs());
    Ok(Some(DpiResult {
        kl_noise,
        kl_output,
        margin,
        method: KlMethod::ClosedForm,
        tolerance,
        status: CheckStatus::from_bool(margin >= -tolerance),
    }))
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct BiLipschitzResult {
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub lipschitz: f64,
    pub status: CheckStatus,
}

/// Sampled ratios `‖T(x) − T(y)‖ / ‖x − y‖` for `T(x) = x + f(x)`, checked
/// against `[1 − L, 1 + L]` with `L` the compositional upper bound.
pub fn bilipschitz_check(hn: &NoiseHypernetwork, n_pairs: usize, seed: u64) -> Result<BiLipschitzResult> {
    if n_pairs == 0 {
        return Err(Error::Domain("need at least one pair".into()));
    }
    let (x, y) = sample_pairs(hn.latent_dim(), n_pairs, seed);
    let (_, tx) = hn.modulate(&x, None)?;
    let (_, ty) = hn.modulate(&y, None)?;
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for i in 0..n_pairs {
        let ratio = dist(tx.row(i), ty.row(i)) / dist(x.row(i), y.row(i));
        lo = lo.min(ratio);
        hi = hi.max(ratio);
    }
    let l = hn.lipschitz_upper_bound();
    let slack = 1e-9;
    let status = if l >= 1.0 {
        CheckStatus::Inconclusive
    } else {
        CheckStatus::from_bool(lo >= 1.0 - l - slack && hi <= 1.0 + l + slack)
    };
    Ok(BiLipschitzResult {
        min_ratio: lo,
        max_ratio: hi,
        lipschitz: l,
        status,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoryRow {
    pub check: String,
    pub statistic: f64,
    pub tolerance: f64,
    pub status: CheckStatus,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct TheoryReport {
    pub rows: Vec<TheoryRow>,
}

impl TheoryReport {
    pub fn push(&mut self, check: impl Into<String>, statistic: f64, tolerance: f64, status: CheckStatus) {
        self.rows.push(TheoryRow {
            check: check.into(),
            statistic,
            tolerance,
            status,
        });
    }

    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.status != CheckStatus::Fail)
    }

    pub fn failures(&self) -> Vec<&TheoryRow> {
        self.rows.iter().filter(|r| r.status == CheckStatus::Fail).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::{make_generator, GeneratorConfig};

    #[test]
    fn kth_smallest_picks_order_statistic() {
        let v = [5.0, 1.0, 4.0, 2.0, 3.0];
        assert_eq!(kth_smallest(v.iter().copied(), 1), 1.0);
        assert_eq!(kth_smallest(v.iter().copied(), 3), 3.0);
    }

    #[test]
    fn gaussian_kl_closed_forms() {
        let i2 = Tensor::identity(2);
        let kl = gaussian_kl(&[1.0, 0.0], &i2, &[0.0, 0.0], &i2).unwrap();
        assert!((kl - 0.5).abs() < 1e-14);
        let kl = gaussian_kl(&[0.0], &Tensor::diag(&[4.0]), &[0.0], &Tensor::diag(&[1.0])).unwrap();
        assert!((kl - 0.5 * (3.0 - 4f64.ln())).abs() < 1e-14);
    }

    #[test]
    fn zero_reward_tilt_is_base() {
        let g = make_generator(&GeneratorConfig::affine(2, 2), 0).unwrap();
        let n = 4000;
        let s = sample_tilted_noise(&g, &Reward::zero(2), 1.0, n, 1, TiltMethod::Rejection(Envelope::FromReward), None)
            .unwrap();
        assert_eq!(s.acceptance_rate, Some(1.0));
        for m in s.weighted_mean() {
            assert!(m.abs() < 4.0 / (n as f64).sqrt());
        }
    }

    #[test]
    fn unbounded_reward_rejects_rejection() {
        let g = make_generator(&GeneratorConfig::affine(2, 2), 0).unwrap();
        let err = sample_tilted_noise(
            &g,
            &Reward::linear(vec![1.0, 0.0]),
            1.0,
            10,
            0,
            TiltMethod::Rejection(Envelope::FromReward),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::UnboundedReward));
    }

    #[test]
    fn tiny_acceptance_aborts() {
        let g = make_generator(&GeneratorConfig::affine(1, 1), 0).unwrap();
        let err = sample_tilted_noise(
            &g,
            &Reward::zero(1),
            1.0,
            10,
            0,
            TiltMethod::Rejection(Envelope::Declared(20.0)),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::LowAcceptance { .. }));
    }

    #[test]
    fn knn_rejects_mismatch() {
        let p = Tensor::zeros(&[10, 2]);
        let q = Tensor::zeros(&[10, 3]);
        assert!(kl_knn(&p, &q, 3).is_err());
        assert!(kl_knn(&p, &Tensor::zeros(&[3, 2]), 3).is_err());
    }

    #[test]
    fn knn_duplicates_error_after_jitter() {
        // identical points everywhere stay tied only if jitter fails; the
        // jitter always separates them, so the estimate exists
        let p = Tensor::zeros(&[20, 2]);
        let q = Tensor::filled(&[20, 2], 1.0);
        assert!(kl_knn(&p, &q, 2).unwrap().is_finite());
    }
}
