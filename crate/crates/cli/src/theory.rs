//! The numerical theory suite behind `validate-theory`.

use std::sync::Arc;

use hypernoise::generators::{make_generator, Generator, GeneratorConfig};
use hypernoise::hypernet::{init_hypernet, NoiseHypernetwork};
use hypernoise::numcore::{self, derive_seed, Tensor};
use hypernoise::objectives::{exact_noise_kl, theorem_bound};
use hypernoise::oracles::{
    affine_linear_tilt_mean, bilipschitz_check, dpi_check, pushforward_check, sample_tilted_noise, stein_check,
    CheckStatus, Envelope, TheoryReport, TiltMethod, Z_TOLERANCE,
};
use hypernoise::rewards::Reward;

use crate::config::TheoryConfig;
use crate::error::CliResult;

/// Progress sink; the runner prints through it unless `--quiet`.
pub type Log<'a> = dyn FnMut(&str) + 'a;

/// Random adapters and head bias, rescaled to compositional Lipschitz bound `lipschitz`.
pub fn random_hypernet(g: &Arc<Generator>, rank: usize, seed: u64, lipschitz: f64) -> CliResult<NoiseHypernetwork> {
    let mut hn = init_hypernet(g, rank, 2.0 * rank as f64, derive_seed(seed, 0))?;
    hn.randomize_adapters(0.5, derive_seed(seed, 1));
    let bias = numcore::standard_normal(&mut numcore::rng(derive_seed(seed, 2)), 1, g.latent_dim());
    hn.set_head_bias(Tensor::vector(bias.into_data()).scale(0.3))?;
    hn.rescale_to_lipschitz(lipschitz)?;
    Ok(hn)
}

fn worst(a: CheckStatus, b: CheckStatus) -> CheckStatus {
    use CheckStatus::*;
    match (a, b) {
        (Fail, _) | (_, Fail) => Fail,
        (Inconclusive, _) | (_, Inconclusive) => Inconclusive,
        _ => Pass,
    }
}

/// Per-point `|Tr J − log|det(I + J)||` against `d(−ln(1−L) − L)` over
/// random networks at each Lipschitz budget.
pub fn bound_checks(cfg: &TheoryConfig, report: &mut TheoryReport, log: &mut Log<'_>) -> CliResult<()> {
    let d = cfg.bound_dim;
    let g = Arc::new(make_generator(&GeneratorConfig::mlp(d, vec![16], d), derive_seed(cfg.seed, 10))?);
    for (bi, &l) in cfg.lipschitz_budgets.iter().enumerate() {
        let mut ratio: f64 = 0.0;
        let mut status = CheckStatus::Pass;
        for k in 0..cfg.bound_networks {
            let seed = derive_seed(cfg.seed, 1000 + (bi * cfg.bound_networks + k) as u64);
            let hn = random_hypernet(&g, 2, seed, l)?;
            let x = numcore::standard_normal(&mut numcore::rng(derive_seed(seed, 9)), cfg.bound_points, d);
            let kl = exact_noise_kl(&hn, &x, None)?;
            let bound = theorem_bound(d, kl.lipschitz_used)?;
            ratio = ratio.max(kl.max_abs_error_term / bound);
            if kl.max_abs_error_term > bound * (1.0 + 1e-9) || kl.lipschitz_sampled > kl.lipschitz_used * (1.0 + 1e-9) {
                status = CheckStatus::Fail;
            }
        }
        log(&format!("bound L={l}: worst |E|/bound = {ratio:.4} ({})", status.as_str()));
        report.push(format!("logdet_bound[L={l}]"), ratio, 1.0, status);
    }
    Ok(())
}

pub fn stein_checks(cfg: &TheoryConfig, report: &mut TheoryReport, log: &mut Log<'_>) -> CliResult<()> {
    let mut status = CheckStatus::Pass;
    let mut worst_z: f64 = 0.0;
    for k in 0..cfg.stein_networks {
        let d = cfg.stein_dims[k % cfg.stein_dims.len()];
        let seed = derive_seed(cfg.seed, 2000 + k as u64);
        let g = Arc::new(make_generator(&GeneratorConfig::mlp(d, vec![16], d), derive_seed(seed, 3))?);
        let rank = 2.min(d);
        let hn = random_hypernet(&g, rank, seed, 0.8)?;
        let res = stein_check(&hn, cfg.stein_n, derive_seed(seed, 4))?;
        let z = if res.se > 0.0 { (res.lhs - res.rhs).abs() / res.se } else { 0.0 };
        worst_z = worst_z.max(z);
        status = worst(status, res.status);
    }
    log(&format!(
        "stein: {} networks, worst |z| = {worst_z:.2} ({})",
        cfg.stein_networks,
        status.as_str()
    ));
    report.push("stein_identity", worst_z, Z_TOLERANCE, status);
    Ok(())
}

/// Tilted-noise sampler against the closed-form mean `Aᵀc/α` for an affine
/// generator with a linear reward.
pub fn tilt_checks(cfg: &TheoryConfig, report: &mut TheoryReport, log: &mut Log<'_>) -> CliResult<()> {
    let g = make_generator(
        &GeneratorConfig::affine_explicit(vec![vec![1.0, 0.5], vec![-0.5, 2.0]], vec![0.1, -0.2]),
        0,
    )?;
    let r = Reward::linear(vec![0.6, -0.3]);
    for (name, method) in [
        ("rejection", TiltMethod::Rejection(Envelope::Pilot(4096))),
        ("snis", TiltMethod::Snis),
    ] {
        let mut worst_z: f64 = 0.0;
        let mut status = CheckStatus::Pass;
        for trial in 0..cfg.tilt_trials {
            let alpha = [1.0, 2.0][trial % 2];
            let want = affine_linear_tilt_mean(&g, &r, alpha).expect("affine and linear");
            let set = sample_tilted_noise(&g, &r, alpha, cfg.tilt_n, derive_seed(cfg.seed, 3000 + trial as u64), method, None)?;
            // the tilted law has identity covariance
            let se = 1.0 / set.ess.sqrt();
            let got = set.weighted_mean();
            for (a, b) in got.iter().zip(&want) {
                worst_z = worst_z.max((a - b).abs() / se);
            }
            if set.ess < hypernoise::oracles::MIN_ESS {
                status = worst(status, CheckStatus::Inconclusive);
            }
        }
        if worst_z > Z_TOLERANCE {
            status = CheckStatus::Fail;
        }
        log(&format!("tilt {name}: worst |z| = {worst_z:.2} ({})", status.as_str()));
        report.push(format!("tilted_mean[{name}]"), worst_z, Z_TOLERANCE, status);
    }
    Ok(())
}

/// The two routes to the reward-tilted output law, over a matrix of
/// generator and reward pairs.
pub fn pushforward_checks(
    cfg: &TheoryConfig,
    extra: Option<(&Generator, &Reward, Option<&Tensor>)>,
    report: &mut TheoryReport,
    log: &mut Log<'_>,
) -> CliResult<()> {
    let affine = make_generator(&GeneratorConfig::affine(2, 2), derive_seed(cfg.seed, 20))?;
    let mlp = make_generator(&GeneratorConfig::mlp(3, vec![16], 2), derive_seed(cfg.seed, 21))?;
    let decoder = make_generator(&GeneratorConfig::image_decoder(4, vec![16], 2, 2), derive_seed(cfg.seed, 22))?;
    let cases: Vec<(&str, &Generator, Reward)> = vec![
        ("affine+linear", &affine, Reward::linear(vec![0.5, -0.25])),
        ("mlp+quadratic", &mlp, Reward::quadratic(vec![vec![1.0, 0.0], vec![0.0, 0.5]], -1.0)),
        ("mlp+linear", &mlp, Reward::linear(vec![0.3, 0.3])),
        ("decoder+redness", &decoder, Reward::redness(2.0)),
    ];
    let mut run = |name: &str, g: &Generator, r: &Reward, c: Option<&Tensor>, k: u64| -> CliResult<()> {
        let rep = pushforward_check(g, r, 1.0, cfg.pushforward_n, derive_seed(cfg.seed, 4000 + k), c)?;
        log(&format!("pushforward {name}: max |z| = {:.2} ({})", rep.max_z, rep.status.as_str()));
        report.push(format!("pushforward[{name}]"), rep.max_z, Z_TOLERANCE, rep.status);
        Ok(())
    };
    for (k, (name, g, r)) in cases.iter().enumerate() {
        run(name, g, r, None, k as u64)?;
    }
    if let Some((g, r, c)) = extra {
        let first = c.map(|c| Tensor::vector(c.row(0).to_vec()));
        run("configured", g, r, first.as_ref(), 99)?;
    }
    Ok(())
}

/// Noise-space KL dominates output-space KL: closed form on affine
/// generators, whitened kNN on small full-rank MLPs.
pub fn dpi_checks(cfg: &TheoryConfig, report: &mut TheoryReport, log: &mut Log<'_>) -> CliResult<()> {
    let gens = [
        ("affine2", GeneratorConfig::affine(2, 2)),
        ("affine3to2", GeneratorConfig::affine(3, 2)),
        ("mlp2", GeneratorConfig::mlp(2, vec![8], 2)),
        ("mlp3", GeneratorConfig::mlp(3, vec![8], 3)),
    ];
    for (k, (name, gc)) in gens.iter().enumerate() {
        let seed = derive_seed(cfg.seed, 5000 + k as u64);
        let g = Arc::new(make_generator(gc, derive_seed(seed, 1))?);
        let mut hn = init_hypernet(&g, 1, 2.0, derive_seed(seed, 2))?;
        hn.randomize_adapters(0.6, derive_seed(seed, 3));
        hn.set_head_bias(Tensor::vector(vec![0.4; g.latent_dim()]))?;
        let res = dpi_check(&hn, cfg.dpi_n, derive_seed(seed, 4), cfg.knn_k)?;
        log(&format!(
            "dpi {name}: noise {:.4} output {:.4} margin {:.4} ({:?}, {})",
            res.kl_noise,
            res.kl_output,
            res.margin,
            res.method,
            res.status.as_str()
        ));
        report.push(format!("dpi[{name}]"), res.margin, -res.tolerance, res.status);
    }
    Ok(())
}

pub fn bilipschitz_checks(cfg: &TheoryConfig, report: &mut TheoryReport, log: &mut Log<'_>) -> CliResult<()> {
    let g = Arc::new(make_generator(&GeneratorConfig::mlp(4, vec![16], 4), derive_seed(cfg.seed, 30))?);
    for (k, &l) in cfg.lipschitz_budgets.iter().enumerate() {
        let hn = random_hypernet(&g, 2, derive_seed(cfg.seed, 6000 + k as u64), l)?;
        let res = bilipschitz_check(&hn, cfg.bilipschitz_pairs, derive_seed(cfg.seed, 6100 + k as u64))?;
        log(&format!(
            "bi-Lipschitz L={l:.3}: ratios in [{:.4}, {:.4}] ({})",
            res.min_ratio,
            res.max_ratio,
            res.status.as_str()
        ));
        let slack = (res.min_ratio - (1.0 - res.lipschitz)).min(1.0 + res.lipschitz - res.max_ratio);
        report.push(format!("bilipschitz[L={l}]"), slack, 0.0, res.status);
    }
    Ok(())
}

pub fn run_suite(
    cfg: &TheoryConfig,
    extra: Option<(&Generator, &Reward, Option<&Tensor>)>,
    log: &mut Log<'_>,
) -> CliResult<TheoryReport> {
    let mut report = TheoryReport::default();
    bound_checks(cfg, &mut report, log)?;
    stein_checks(cfg, &mut report, log)?;
    tilt_checks(cfg, &mut report, log)?;
    pushforward_checks(cfg, extra, &mut report, log)?;
    dpi_checks(cfg, &mut report, log)?;
    bilipschitz_checks(cfg, &mut report, log)?;
    Ok(report)
}
