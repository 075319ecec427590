//! The ten acceptance criteria, one pass/fail line each. Artifacts (curves,
//! reports) land under the cargo target tmpdir in `acceptance/`.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use hypernoise::baselines::{affine_bias_drift, noise_opt, train_direct_finetune, NoiseOptConfig};
use hypernoise::generators::{make_generator, GeneratorConfig};
use hypernoise::hypernet::init_hypernet;
use hypernoise::numcore::{self, derive_seed, Activation, Bindings, Graph, NodeId, Tensor};
use hypernoise::objectives::{exact_noise_kl, hypernoise_loss, theorem_bound};
use hypernoise::oracles::{dpi_check, gaussian_kl, stein_check, CheckStatus, TheoryReport, Z_TOLERANCE};
use hypernoise::rewards::Reward;
use hypernoise::training::train_hypernoise;
use hypernoise_cli::config::TheoryConfig;
use hypernoise_cli::runner::{run_diversity, run_method, run_tradeoff, Context, Setup};
use hypernoise_cli::{theory, ExperimentConfig};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_s: f64, detail: String) -> Check {
    let secs = elapsed.as_secs_f64();
    ensure(secs < limit_s, format!("{detail}; {secs:.1}s of {limit_s:.0}s budget"))
}

fn config(name: &str) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name);
    ExperimentConfig::load(&path).and_then(|c| c.resolve(None)).expect("shipped config loads")
}

fn artifacts(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn quiet(dir: PathBuf) -> Context {
    Context::new(dir, true).expect("artifact dir")
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// 1. autodiff

const EPS: f64 = 1e-5;
type Build = fn(&mut Graph, NodeId, NodeId) -> NodeId;

fn rel_err(ad: &[f64], fd: &[f64]) -> f64 {
    let num = ad.iter().zip(fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    num / fd.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12)
}

fn probe(build: Build, a: &Tensor, b: &Tensor) -> (Graph, Tensor) {
    let mut g = Graph::new();
    let na = g.input("a", true);
    let nb = g.input("b", true);
    let out = build(&mut g, na, nb);
    g.set_output(out);
    let mut bind = Bindings::new();
    bind.insert("a", a);
    bind.insert("b", b);
    let y = g.forward(&bind).expect("forward");
    (g, y)
}

fn primitive_error(build: Build, a: &Tensor, b: &Tensor, rng: &mut numcore::Rng) -> f64 {
    let (g, y) = probe(build, a, b);
    let seed = numcore::standard_normal(rng, 1, y.len()).reshape(y.shape()).expect("shape");
    let grads = g.backward(&seed).expect("backward");
    let mut worst: f64 = 0.0;
    for (which, x) in [("a", a), ("b", b)] {
        let fd: Vec<f64> = (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += EPS;
                let mut m = x.clone();
                m.data_mut()[i] -= EPS;
                let f = |t: &Tensor| {
                    let (a, b) = if which == "a" { (t, b) } else { (a, t) };
                    probe(build, a, b).1.dot(&seed)
                };
                (f(&p) - f(&m)) / (2.0 * EPS)
            })
            .collect();
        let ad = grads.get(which).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; x.len()]);
        if fd.iter().chain(&ad).any(|v| *v != 0.0) {
            worst = worst.max(rel_err(&ad, &fd));
        }
    }
    worst
}

fn primitives() -> Vec<(&'static str, Build, usize, Vec<usize>)> {
    vec![
        ("matmul", |g, a, b| g.matmul(a, b), 4, vec![4, 2]),
        ("matmul_t", |g, a, b| g.matmul_t(a, b), 4, vec![2, 4]),
        ("add", |g, a, b| g.add(a, b), 4, vec![3, 4]),
        ("sub", |g, a, b| g.sub(a, b), 4, vec![3, 4]),
        ("mul", |g, a, b| g.mul(a, b), 4, vec![3, 4]),
        ("add_row", |g, a, b| g.add_row(a, b), 4, vec![4]),
        ("scale", |g, a, _| g.scale(a, -1.7), 4, vec![1]),
        ("tanh", |g, a, _| g.activation(a, Activation::Tanh), 4, vec![1]),
        ("silu", |g, a, _| g.activation(a, Activation::Silu), 4, vec![1]),
        ("sigmoid", |g, a, _| g.activation(a, Activation::Sigmoid), 4, vec![1]),
        ("identity", |g, a, _| g.activation(a, Activation::Identity), 4, vec![1]),
        ("sum", |g, a, _| g.sum(a), 4, vec![1]),
        ("row_sum", |g, a, _| g.row_sum(a), 4, vec![1]),
        ("concat_cols", |g, a, b| g.concat_cols(a, b), 4, vec![3, 2]),
        ("half_sq_norm", |g, a, _| g.half_sq_norm(a), 4, vec![1]),
    ]
}

fn loss_error(case: usize, point: u64) -> f64 {
    let (gcfg, reward, cond) = match case {
        0 => (
            GeneratorConfig::mlp(3, vec![8], 3),
            Reward::composite(vec![
                (Reward::linear(vec![0.5, -1.0, 0.25]), 1.0),
                (Reward::quadratic(vec![vec![1.0, 0.2, 0.0], vec![0.2, 0.5, 0.0], vec![0.0, 0.0, 0.3]], -1.0), 0.7),
            ]),
            None,
        ),
        1 => (GeneratorConfig::image_decoder(4, vec![6], 1, 2), Reward::redness(3.0), None),
        _ => (
            GeneratorConfig::mlp(3, vec![8], 2).with_condition(2),
            Reward::linear(vec![1.0, -0.5]),
            Some(numcore::standard_normal(&mut numcore::rng(point), 4, 2)),
        ),
    };
    let g = Arc::new(make_generator(&gcfg, 100 + point).expect("generator"));
    let mut hn = init_hypernet(&g, 2, 4.0, 200 + point).expect("hypernet");
    hn.randomize_adapters(0.3, 300 + point);
    let mut rng = numcore::rng(400 + point);
    let bias = numcore::standard_normal(&mut rng, 1, g.latent_dim()).into_data();
    hn.set_head_bias(Tensor::vector(bias).scale(0.2)).expect("bias");
    let noise = numcore::standard_normal(&mut rng, 4, g.latent_dim());
    let (_, grads) = hypernoise_loss(&hn, &reward, &noise, cond.as_ref(), 0.7).expect("loss");
    let ad = hn.flatten_grads(&grads).expect("grads");
    let theta = hn.flat_params();
    let mut at = hn.clone();
    let mut loss = |t: &[f64]| {
        at.set_flat_params(t).expect("params");
        hypernoise_loss(&at, &reward, &noise, cond.as_ref(), 0.7).expect("loss").0.total
    };
    let fd: Vec<f64> = (0..theta.len())
        .map(|i| {
            let mut p = theta.clone();
            p[i] += EPS;
            let mut m = theta.clone();
            m[i] -= EPS;
            (loss(&p) - loss(&m)) / (2.0 * EPS)
        })
        .collect();
    rel_err(&ad, &fd)
}

fn autodiff() -> Check {
    let start = Instant::now();
    let mut rng = numcore::rng(1);
    let mut worst_prim: f64 = 0.0;
    for (_, build, cols, sb) in primitives() {
        for _ in 0..100 {
            let a = numcore::standard_normal(&mut rng, 3, cols);
            let b = numcore::standard_normal(&mut rng, 1, sb.iter().product()).reshape(&sb).expect("shape");
            worst_prim = worst_prim.max(primitive_error(build, &a, &b, &mut rng));
        }
    }
    let worst_loss = (0..3)
        .flat_map(|c| (0..100).map(move |p| (c, p)))
        .map(|(c, p)| loss_error(c, p))
        .fold(0.0, f64::max);
    let detail = format!("primitive rel err {worst_prim:.1e} (tol 1e-6), loss rel err {worst_loss:.1e} (tol 1e-5)");
    ensure(worst_prim <= 1e-6 && worst_loss <= 1e-5, detail.clone())?;
    within(start.elapsed(), 30.0, detail)
}

// 2, 3. log-determinant bound and the KL approximation

const BUDGETS: [f64; 4] = [0.05, 0.1, 0.3, 0.5];
const BOUND_DIM: usize = 8;

fn bound_networks() -> impl Iterator<Item = (f64, hypernoise::hypernet::NoiseHypernetwork)> {
    let g = Arc::new(make_generator(&GeneratorConfig::mlp(BOUND_DIM, vec![16], BOUND_DIM), 10).expect("generator"));
    BUDGETS.into_iter().flat_map(move |l| {
        let g = Arc::clone(&g);
        (0..20u64).map(move |k| (l, theory::random_hypernet(&g, 2, derive_seed(k, l.to_bits()), l).expect("network")))
    })
}

fn logdet_bound() -> Check {
    let start = Instant::now();
    let mut violations = 0;
    let mut worst: f64 = 0.0;
    for (l, hn) in bound_networks() {
        let x = numcore::standard_normal(&mut numcore::rng(l.to_bits()), 200, BOUND_DIM);
        let kl = exact_noise_kl(&hn, &x, None).map_err(|e| e.to_string())?;
        if kl.lipschitz_used > l * (1.0 + 1e-9) || kl.lipschitz_sampled > kl.lipschitz_used * (1.0 + 1e-9) {
            return Err(format!("network exceeds its budget {l}"));
        }
        let bound = theorem_bound(BOUND_DIM, kl.lipschitz_used).map_err(|e| e.to_string())?;
        if kl.max_abs_error_term > bound {
            violations += 1;
        }
        worst = worst.max(kl.max_abs_error_term / bound);
    }
    let mut quad_ok = true;
    for d in 1..=16 {
        for l in [0.01, 0.05, 0.1] {
            quad_ok &= theorem_bound(d, l).map_err(|e| e.to_string())? <= 1.1 * d as f64 * l * l / 2.0;
        }
    }
    let detail = format!("{violations} violations over 80 networks x 200 points, worst |E|/bound {worst:.3}, small-L quadratic {quad_ok}");
    ensure(violations == 0 && quad_ok, detail.clone())?;
    within(start.elapsed(), 120.0, detail)
}

fn kl_approximation() -> Check {
    let mut worst: f64 = 0.0;
    for (l, hn) in bound_networks() {
        let x = numcore::standard_normal(&mut numcore::rng(l.to_bits() ^ 1), 200, BOUND_DIM);
        let kl = exact_noise_kl(&hn, &x, None).map_err(|e| e.to_string())?;
        let bound = theorem_bound(BOUND_DIM, kl.lipschitz_used).map_err(|e| e.to_string())?;
        let gap = (kl.exact_kl - kl.l2_term).abs();
        if gap > bound {
            return Err(format!("gap {gap} above bound {bound} at L = {l}"));
        }
        worst = worst.max(gap / bound);
    }
    let g = Arc::new(make_generator(&GeneratorConfig::affine(4, 4), 0).expect("generator"));
    let mut hn = init_hypernet(&g, 2, 4.0, 0).expect("hypernet");
    let c = vec![0.3, -1.2, 0.5, 2.0];
    hn.set_head_bias(Tensor::vector(c.clone())).expect("bias");
    let kl = exact_noise_kl(&hn, &numcore::standard_normal(&mut numcore::rng(3), 500, 4), None).map_err(|e| e.to_string())?;
    let half = 0.5 * c.iter().map(|v| v * v).sum::<f64>();
    let closed = gaussian_kl(&c, &Tensor::identity(4), &[0.0; 4], &Tensor::identity(4)).map_err(|e| e.to_string())?;
    let shift_err = (kl.exact_kl - kl.l2_term).abs().max((kl.exact_kl - half).abs()).max((closed - half).abs());
    ensure(
        shift_err <= 1e-10,
        format!("worst gap/bound {worst:.3}; constant shift error {shift_err:.1e} (tol 1e-10)"),
    )
}

// 4. Stein

fn stein() -> Check {
    let start = Instant::now();
    let mut worst_z: f64 = 0.0;
    for k in 0..20u64 {
        let d = [2, 4, 8][k as usize % 3];
        let g = Arc::new(make_generator(&GeneratorConfig::mlp(d, vec![16], d), 50 + k).expect("generator"));
        let hn = theory::random_hypernet(&g, 2.min(d), 60 + k, 0.5).map_err(|e| e.to_string())?;
        let res = stein_check(&hn, 100_000, 70 + k).map_err(|e| e.to_string())?;
        let gap = (res.lhs - res.rhs).abs();
        if gap > Z_TOLERANCE * res.se {
            return Err(format!("network {k} (d = {d}): |lhs - rhs| = {gap:.2e} > 4 SE = {:.2e}", 4.0 * res.se));
        }
        worst_z = worst_z.max(gap / res.se);
    }
    within(start.elapsed(), 120.0, format!("20 networks at n = 1e5, worst |lhs - rhs|/SE {worst_z:.2}"))
}

// 5. tilted-law recovery

fn recovery() -> Check {
    let start = Instant::now();
    let setup = Setup::new(config("affine_hypernoise.toml")).map_err(|e| e.to_string())?;
    let tc = setup.cfg.train.clone().expect("hypernoise config");
    let (hn, _) = train_hypernoise(&setup.g, &setup.reward, &tc, None).map_err(|e| e.to_string())?;
    let layer = &setup.g.layers()[0];
    let c = setup.reward.linear_coefficients(setup.g.output_dim()).expect("linear reward");
    let (rows, cols) = (layer.weight.rows(), layer.weight.cols());
    let want: Vec<f64> = (0..cols)
        .map(|j| (0..rows).map(|i| layer.weight.get(i, j) * c[i]).sum::<f64>() / tc.alpha)
        .collect();
    let n = 2000;
    let x = numcore::standard_normal(&mut numcore::rng(derive_seed(setup.cfg.evaluation.seed, 0)), n, cols);
    let delta = hn.perturbation(&x, None).map_err(|e| e.to_string())?;
    let err = (0..n)
        .map(|i| norm(&delta.row(i).iter().zip(&want).map(|(a, b)| a - b).collect::<Vec<_>>()))
        .sum::<f64>()
        / n as f64
        / norm(&want);
    let learned: Vec<f64> = (0..cols).map(|j| (0..n).map(|i| delta.get(i, j)).sum::<f64>() / n as f64).collect();
    let opt_cfg = NoiseOptConfig {
        steps: 500,
        lr: 0.1,
        reg_weight: tc.alpha,
        seed: 0,
    };
    let opt = noise_opt(&setup.g, &setup.reward, &Tensor::vector(vec![0.0; cols]), &opt_cfg, None)
        .map_err(|e| e.to_string())?;
    let agree = norm(&opt.x0_star.data().iter().zip(&learned).map(|(a, b)| a - b).collect::<Vec<_>>()) / norm(&learned);
    let detail = format!("mean |f - A^T c|/|A^T c| = {err:.1e} (tol 0.02), noise_opt vs learned shift {agree:.1e} (tol 0.05)");
    ensure(err <= 0.02 && agree <= 0.05, detail.clone())?;
    within(start.elapsed(), 120.0, detail)
}

// 6, 7. pushforward and DPI

fn statuses(report: &TheoryReport) -> Check {
    let bad: Vec<String> = report
        .rows
        .iter()
        .filter(|r| r.status != CheckStatus::Pass)
        .map(|r| format!("{} = {:.3} ({})", r.check, r.statistic, r.status.as_str()))
        .collect();
    let all: Vec<String> = report.rows.iter().map(|r| format!("{} {:.3}", r.check, r.statistic)).collect();
    ensure(bad.is_empty(), if bad.is_empty() { all.join(", ") } else { bad.join(", ") })
}

fn pushforward() -> Check {
    let mut report = TheoryReport::default();
    theory::pushforward_checks(&TheoryConfig::default(), None, &mut report, &mut |_| {}).map_err(|e| e.to_string())?;
    statuses(&report)
}

fn dpi() -> Check {
    let g = Arc::new(
        make_generator(&GeneratorConfig::affine_explicit(vec![vec![1.0, 0.0, 0.0]], vec![0.0]), 0).expect("generator"),
    );
    let mut hn = init_hypernet(&g, 1, 2.0, 0).expect("hypernet");
    let c = [0.4, -0.6, 0.8];
    hn.set_head_bias(Tensor::vector(c.to_vec())).expect("bias");
    let res = dpi_check(&hn, 1000, 0, 5).map_err(|e| e.to_string())?;
    let want = 0.5 * (c[1] * c[1] + c[2] * c[2]);
    if (res.margin - want).abs() > 1e-12 || res.margin < 0.0 {
        return Err(format!("projection margin {} vs {want}", res.margin));
    }
    let mut report = TheoryReport::default();
    theory::dpi_checks(&TheoryConfig::default(), &mut report, &mut |_| {}).map_err(|e| e.to_string())?;
    statuses(&report).map(|d| format!("projection margin {:.4} = {want:.4}; {d}", res.margin))
}

// 8. reward hacking contrast

fn contrast() -> Check {
    let ctx = quiet(artifacts("tradeoff"));
    let summary = run_tradeoff(config("decoder_hypernoise.toml"), config("decoder_direct_ft.toml"), &ctx)
        .map_err(|e| e.to_string())?;
    let ratios: Vec<String> = summary
        .matched
        .iter()
        .map(|m| format!("{:.2}", m.direct_ft_fidelity / m.hypernoise_fidelity))
        .collect();
    let tradeoff = format!("{} matched levels, direct/hypernoise KL ratios [{}]", summary.matched.len(), ratios.join(" "));
    if !summary.hypernoise_dominates() {
        return Err(tradeoff);
    }
    let setup = Setup::new(config("affine_direct_ft.toml")).map_err(|e| e.to_string())?;
    let dc = setup.cfg.direct_ft.clone().expect("direct_ft config");
    let (_, hist) = train_direct_finetune(&setup.g, &setup.reward, &dc, None).map_err(|e| e.to_string())?;
    let c = setup.reward.linear_coefficients(setup.g.output_dim()).expect("linear reward");
    let lr = dc.optimizer.lr();
    let drift_err = hist
        .rows
        .iter()
        .map(|r| (r.param_drift - affine_bias_drift(&c, lr, dc.grad_norm_clip, r.step)).abs())
        .fold(0.0, f64::max);
    ensure(drift_err <= 1e-9, format!("{tradeoff}; affine drift max deviation from linear law {drift_err:.1e}"))
}

// 9. diversity

fn diversity() -> Check {
    let ctx = quiet(artifacts("diversity"));
    let summary = run_diversity(config("decoder_hypernoise.toml"), Some(20), &ctx).map_err(|e| e.to_string())?;
    let (lo, hi) = summary
        .rows
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.ratio), hi.max(r.ratio)));
    let in_band = |v: f64| (0.8..=1.2).contains(&v);
    ensure(
        summary.rows.len() >= 20 && in_band(lo) && in_band(hi) && in_band(summary.aggregate_ratio),
        format!("{} seeds, ratio {:.3}, per-seed range [{lo:.3}, {hi:.3}]", summary.rows.len(), summary.aggregate_ratio),
    )
}

// 10. determinism

fn determinism() -> Check {
    let names = [
        "affine_hypernoise.toml",
        "affine_direct_ft.toml",
        "affine_noise_opt.toml",
        "conditional_hypernoise.toml",
        "decoder_hypernoise.toml",
        "decoder_direct_ft.toml",
        "decoder_best_of_n.toml",
        "decoder_noise_opt.toml",
    ];
    for name in names {
        let mut reports = Vec::new();
        for run in ["first", "second"] {
            let dir = artifacts(&format!("determinism/{}/{run}", name.trim_end_matches(".toml")));
            run_method(config(name), &quiet(dir.clone())).map_err(|e| format!("{name}: {e}"))?;
            reports.push(fs::read(dir.join("report.csv")).map_err(|e| e.to_string())?);
        }
        if reports[0] != reports[1] {
            return Err(format!("{name}: report.csv differs between identical runs"));
        }
    }
    Ok(format!("{} configs re-run with byte-identical report.csv", names.len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("autodiff soundness", autodiff),
        ("log-determinant bound", logdet_bound),
        ("KL approximation", kl_approximation),
        ("Stein identity", stein),
        ("tilted-law recovery", recovery),
        ("pushforward identity", pushforward),
        ("data processing inequality", dpi),
        ("reward-hacking contrast", contrast),
        ("diversity guard", diversity),
        ("determinism", determinism),
    ];
    let suite = Instant::now();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let mut outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        if i + 1 == criteria.len() {
            // the whole suite has a ten-minute budget
            outcome = outcome.and_then(|d| within(suite.elapsed(), 600.0, format!("{d}; whole suite")));
        }
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} {name}: {tag} ({detail}) [{:.1}s]", i + 1, start.elapsed().as_secs_f64());
    }
    println!("acceptance: {} of {} criteria pass in {:.1}s", criteria.len() - failed, criteria.len(), suite.elapsed().as_secs_f64());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
