//! Subcommand implementations. Every run writes into its own output
//! directory: the resolved config first, then artifacts as they are
//! produced. A runtime failure leaves what was written plus a `FAILED`
//! marker holding the error.

use std::cell::RefCell;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use hypernoise::baselines::{
    best_of_n, noise_opt, train_direct_finetune_observed, DirectHistory, NoiseOptConfig,
};
use hypernoise::generators::{make_generator, Generator};
use hypernoise::hypernet::NoiseHypernetwork;
use hypernoise::numcore::{derive_seed, Tensor};
use hypernoise::oracles::TheoryReport;
use hypernoise::rewards::Reward;
use hypernoise::training::{save_checkpoint, train_hypernoise_observed, write_atomic};
use serde::Serialize;

use crate::config::{ExperimentConfig, Method};
use crate::error::{CliError, CliResult};
use crate::eval::{Evaluator, Pipeline, ReportRow};
use crate::plot::{bars_svg, curve_svg, Series};
use crate::theory;

pub const FAILED_MARKER: &str = "FAILED";

pub struct Context {
    pub out: PathBuf,
    pub quiet: bool,
}

impl Context {
    pub fn new(out: impl Into<PathBuf>, quiet: bool) -> CliResult<Self> {
        let out = out.into();
        fs::create_dir_all(&out).map_err(|e| CliError::io(format!("cannot create {}", out.display()), e))?;
        Ok(Self { out, quiet })
    }

    fn child(&self, name: &str) -> CliResult<Self> {
        Self::new(self.out.join(name), self.quiet)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> CliResult<()> {
        write_atomic(&self.path(name), bytes.as_ref())?;
        Ok(())
    }

    pub fn say(&self, msg: &str) {
        if !self.quiet {
            println!("{msg}");
        }
    }

    /// Runs `body`; on a runtime error writes the `FAILED` marker.
    pub fn guard<T>(&self, body: impl FnOnce() -> CliResult<T>) -> CliResult<T> {
        let res = body();
        if let Err(e) = &res {
            if !matches!(e, CliError::Config(_)) {
                let _ = fs::write(self.path(FAILED_MARKER), format!("{e}\n"));
            }
        }
        res
    }
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Csv(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Everything a run needs that follows from its config.
pub struct Setup {
    pub cfg: ExperimentConfig,
    pub g: Arc<Generator>,
    pub reward: Reward,
    pub conditions: Option<Tensor>,
}

impl Setup {
    pub fn new(cfg: ExperimentConfig) -> CliResult<Self> {
        cfg.require_method()?;
        let gcfg = cfg.generator.clone().expect("checked by require_method");
        let reward = cfg.reward.clone().expect("checked by require_method");
        let g = Arc::new(make_generator(&gcfg, cfg.generator_seed)?);
        let conditions = match &cfg.conditions {
            Some(rows) => Some(Tensor::from_rows(rows)?),
            None => None,
        };
        Ok(Self {
            cfg,
            g,
            reward,
            conditions,
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub method: Method,
    pub rows: Vec<ReportRow>,
}

impl RunOutcome {
    /// Rows of the trained method at the final step for one generator call
    /// count.
    pub fn final_row(&self, gen_steps: usize) -> Option<&ReportRow> {
        self.rows
            .iter()
            .filter(|r| r.method == self.method.as_str() && r.gen_steps == gen_steps)
            .max_by_key(|r| r.step)
    }

    pub fn base_row(&self, gen_steps: usize) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == "base" && r.gen_steps == gen_steps)
    }
}

/// `train` and `baseline`: run the config's single method.
pub fn run_method(cfg: ExperimentConfig, ctx: &Context) -> CliResult<RunOutcome> {
    let setup = Setup::new(cfg)?;
    ctx.write("resolved_config.toml", setup.cfg.to_toml()?)?;
    let rows = RefCell::new(Vec::new());
    let res = ctx.guard(|| run_inner(&setup, ctx, &rows));
    let rows = rows.into_inner();
    // partial rows survive a failure
    ctx.write("report.csv", to_csv(&rows)?)?;
    res?;
    if setup.cfg.output.plots {
        let series = series_by_method(&rows, 1, |r| r.step as f64, |r| r.reward_mean);
        ctx.write("reward_curve.svg", curve_svg("held-out reward", "step", "reward_mean", &series))?;
    }
    Ok(RunOutcome {
        method: setup.cfg.method,
        rows,
    })
}

fn series_by_method(
    rows: &[ReportRow],
    gen_steps: usize,
    x: impl Fn(&ReportRow) -> f64,
    y: impl Fn(&ReportRow) -> f64,
) -> Vec<Series> {
    let mut out: Vec<Series> = Vec::new();
    for r in rows.iter().filter(|r| r.gen_steps == gen_steps) {
        let p = (x(r), y(r));
        match out.iter_mut().find(|s| s.name == r.method) {
            Some(s) => s.points.push(p),
            None => out.push(Series {
                name: r.method.clone(),
                points: vec![p],
            }),
        }
    }
    out
}

fn run_inner(setup: &Setup, ctx: &Context, rows: &RefCell<Vec<ReportRow>>) -> CliResult<()> {
    let cfg = &setup.cfg;
    let g = &setup.g;
    let cond = setup.conditions.as_ref();
    let ev = Evaluator::new(Arc::clone(g), setup.reward.clone(), cfg.evaluation.clone(), cond)?;
    let multistep = cfg.evaluation.multistep.clone();
    for &s in &multistep {
        rows.borrow_mut()
            .push(ev.evaluate_pipeline("base", 0, s, &Pipeline::Base(g), None)?);
    }
    match cfg.method {
        Method::Hypernoise => {
            let tc = cfg.train.as_ref().expect("checked");
            let audit_cond = cond.map(|c| Tensor::vector(c.row(0).to_vec()));
            let mut observer = |t: usize, hn: &NoiseHypernetwork| -> hypernoise::Result<()> {
                let audit = hn.lipschitz_lower_bound(tc.audit_pairs.max(1), derive_seed(tc.seed, 3), audit_cond.as_ref())?;
                let steps: &[usize] = if t == tc.steps { &multistep } else { &[1] };
                for &s in steps {
                    let row = ev
                        .evaluate_pipeline("hypernoise", t, s, &Pipeline::Hypernoise(hn), Some(audit))
                        .map_err(into_core)?;
                    rows.borrow_mut().push(row);
                }
                Ok(())
            };
            let (hn, history) = train_hypernoise_observed(g, &setup.reward, tc, cond, &mut observer)?;
            ctx.write("history.csv", history.to_csv())?;
            ctx.write("timing.csv", history.timing_csv())?;
            save_checkpoint(&hn, &ctx.path("checkpoint.hnck"))?;
            report_final(ctx, &rows.borrow(), "hypernoise");
        }
        Method::DirectFt => {
            let dc = cfg.direct_ft.as_ref().expect("checked");
            let mut observer = |t: usize, tuned: &Generator| -> hypernoise::Result<()> {
                let steps: &[usize] = if t == dc.steps { &multistep } else { &[1] };
                for &s in steps {
                    let row = ev
                        .evaluate_pipeline("direct_ft", t, s, &Pipeline::Tuned(tuned), None)
                        .map_err(into_core)?;
                    rows.borrow_mut().push(row);
                }
                Ok(())
            };
            let (_, history) = train_direct_finetune_observed(g, &setup.reward, dc, cond, &mut observer)?;
            ctx.write("history.csv", direct_history_csv(&history)?)?;
            report_final(ctx, &rows.borrow(), "direct_ft");
        }
        Method::NoiseOpt => {
            let nc = cfg.noise_opt.as_ref().expect("checked");
            let mut x = ev.heldout().clone();
            let held_cond = ev.heldout_conditions().cloned();
            let chunk = nc.steps.div_ceil(10).max(1);
            let mut done = 0;
            rows.borrow_mut().push(noise_opt_row(&ev, g, &x, held_cond.as_ref(), 0, 1)?);
            while done < nc.steps {
                let n = chunk.min(nc.steps - done);
                let part = NoiseOptConfig { steps: n, ..nc.clone() };
                let res = noise_opt(g, &setup.reward, &x, &part, held_cond.as_ref())?;
                x = res.x0_star;
                done += n;
                if res.aborted {
                    return Err(hypernoise::Error::Diverged { step: done }.into());
                }
                let steps: &[usize] = if done == nc.steps { &multistep } else { &[1] };
                for &s in steps {
                    rows.borrow_mut().push(noise_opt_row(&ev, g, &x, held_cond.as_ref(), done, s)?);
                }
            }
            report_final(ctx, &rows.borrow(), "noise_opt");
        }
        Method::BestOfN => {
            let bc = cfg.best_of_n.as_ref().expect("checked");
            let mut sizes: Vec<usize> = std::iter::successors(Some(1usize), |k| Some(k * 2))
                .take_while(|&k| k < bc.n)
                .collect();
            sizes.push(bc.n);
            let held_cond = ev.heldout_conditions();
            for &k in &sizes {
                let mut picked = Vec::with_capacity(ev.heldout().rows());
                for i in 0..ev.heldout().rows() {
                    let c = held_cond.map(|c| Tensor::vector(c.row(i).to_vec()));
                    let best = best_of_n(g, &setup.reward, k, derive_seed(bc.seed, i as u64), c.as_ref())?;
                    picked.push(best.best_noise);
                }
                let noise = Tensor::stack_rows(&picked)?;
                let steps: &[usize] = if k == bc.n { &multistep } else { &[1] };
                for &s in steps {
                    let out = g.generate(&noise, held_cond, s)?;
                    rows.borrow_mut().push(ev.evaluate_outputs("best_of_n", k, s, &out)?);
                }
            }
            report_final(ctx, &rows.borrow(), "best_of_n");
        }
    }
    Ok(())
}

fn noise_opt_row(
    ev: &Evaluator,
    g: &Generator,
    x: &Tensor,
    cond: Option<&Tensor>,
    step: usize,
    gen_steps: usize,
) -> CliResult<ReportRow> {
    let out = g.generate(x, cond, gen_steps)?;
    ev.evaluate_outputs("noise_opt", step, gen_steps, &out)
}

fn into_core(e: CliError) -> hypernoise::Error {
    match e {
        CliError::Runtime(inner) => inner,
        other => hypernoise::Error::Config(other.to_string()),
    }
}

fn direct_history_csv(h: &DirectHistory) -> CliResult<String> {
    to_csv(&h.rows)
}

fn report_final(ctx: &Context, rows: &[ReportRow], method: &str) {
    let base = rows.iter().find(|r| r.method == "base" && r.gen_steps == 1);
    let last = rows
        .iter()
        .filter(|r| r.method == method && r.gen_steps == 1)
        .max_by_key(|r| r.step);
    if let (Some(b), Some(l)) = (base, last) {
        ctx.say(&format!(
            "{method}: reward {:.4} ± {:.4} (base {:.4}), fidelity {:.4}, diversity {:.4} (base {:.4})",
            l.reward_mean, l.reward_se, b.reward_mean, l.fidelity, l.diversity_mean_pairwise, b.diversity_mean_pairwise
        ));
    }
}

/// `validate-theory`: fails when any check fails.
pub fn run_theory(cfg: ExperimentConfig, ctx: &Context) -> CliResult<TheoryReport> {
    ctx.write("resolved_config.toml", cfg.to_toml()?)?;
    let report = ctx.guard(|| {
        let g = match &cfg.generator {
            Some(gc) => Some(make_generator(gc, cfg.generator_seed)?),
            None => None,
        };
        let conds = match &cfg.conditions {
            Some(rows) => Some(Tensor::from_rows(rows)?),
            None => None,
        };
        let extra = match (&g, &cfg.reward) {
            (Some(g), Some(r)) => Some((g, r, conds.as_ref())),
            _ => None,
        };
        let mut log = |m: &str| ctx.say(m);
        let report = theory::run_suite(&cfg.theory, extra, &mut log)?;
        ctx.write("theory.csv", to_csv(&report.rows)?)?;
        if !report.all_pass() {
            let names: Vec<&str> = report.failures().iter().map(|r| r.check.as_str()).collect();
            return Err(CliError::Check(format!("theory checks failed: {}", names.join(", "))));
        }
        Ok(report)
    })?;
    ctx.say(&format!("all {} theory checks passed or were inconclusive", report.rows.len()));
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatchedRow {
    pub reward_level: f64,
    pub hypernoise_fidelity: f64,
    pub direct_ft_fidelity: f64,
}

#[derive(Clone, Debug)]
pub struct TradeoffSummary {
    pub hypernoise: RunOutcome,
    pub direct_ft: RunOutcome,
    pub matched: Vec<MatchedRow>,
}

impl TradeoffSummary {
    /// Direct fine-tuning has strictly worse fidelity at every matched level.
    pub fn hypernoise_dominates(&self) -> bool {
        !self.matched.is_empty() && self.matched.iter().all(|m| m.direct_ft_fidelity > m.hypernoise_fidelity)
    }
}

/// Fidelity at the first point along the curve where reward reaches
/// `level`, interpolating linearly between logged steps.
pub fn fidelity_at_reward(curve: &[(f64, f64)], level: f64) -> Option<f64> {
    if let Some(&(r, f)) = curve.first() {
        if r == level {
            return Some(f);
        }
    }
    curve.windows(2).find_map(|w| {
        let ((r0, f0), (r1, f1)) = (w[0], w[1]);
        let crosses = (r0 < level && level <= r1) || (r1 <= level && level < r0);
        crosses.then(|| f0 + (level - r0) / (r1 - r0) * (f1 - f0))
    })
}

/// Matched-reward comparison over the upper half of the reward range both
/// curves reach.
pub fn matched_levels(h: &[(f64, f64)], d: &[(f64, f64)], levels: usize) -> Vec<MatchedRow> {
    let range = |c: &[(f64, f64)]| {
        c.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(r, _)| (lo.min(r), hi.max(r)))
    };
    let (hl, hh) = range(h);
    let (dl, dh) = range(d);
    let (lo, hi) = (hl.max(dl), hh.min(dh));
    if !(hi > lo) {
        return Vec::new();
    }
    let mid = 0.5 * (lo + hi);
    (0..levels)
        .filter_map(|k| {
            let level = mid + (hi - mid) * k as f64 / (levels - 1).max(1) as f64;
            Some(MatchedRow {
                reward_level: level,
                hypernoise_fidelity: fidelity_at_reward(h, level)?,
                direct_ft_fidelity: fidelity_at_reward(d, level)?,
            })
        })
        .collect()
}

fn curve_of(outcome: &RunOutcome) -> Vec<(f64, f64)> {
    let mut rows: Vec<&ReportRow> = outcome
        .rows
        .iter()
        .filter(|r| r.gen_steps == 1 && (r.method == "base" || r.method == outcome.method.as_str()))
        .collect();
    rows.sort_by_key(|r| (r.method != "base", r.step));
    rows.iter()
        .filter(|r| r.method != "base")
        .map(|r| (r.reward_mean, r.fidelity))
        .collect()
}

fn check_same(what: &str, same: bool) -> CliResult<()> {
    if same {
        Ok(())
    } else {
        Err(CliError::Config(format!("tradeoff configs differ in {what}")))
    }
}

/// `tradeoff`: one hypernoise and one direct fine-tuning config sharing
/// generator, reward, seed and step budget.
pub fn run_tradeoff(a: ExperimentConfig, b: ExperimentConfig, ctx: &Context) -> CliResult<TradeoffSummary> {
    let (h, d) = match (a.method, b.method) {
        (Method::Hypernoise, Method::DirectFt) => (a, b),
        (Method::DirectFt, Method::Hypernoise) => (b, a),
        _ => {
            return Err(CliError::Config(
                "tradeoff needs one hypernoise config and one direct_ft config".into(),
            ))
        }
    };
    h.require_method()?;
    d.require_method()?;
    check_same("generator", h.generator == d.generator && h.generator_seed == d.generator_seed)?;
    check_same("reward", h.reward == d.reward)?;
    check_same("conditions", h.conditions == d.conditions)?;
    check_same("seed", h.seed == d.seed)?;
    check_same("evaluation", h.evaluation == d.evaluation)?;
    let (ht, dt) = (h.train.as_ref().expect("checked"), d.direct_ft.as_ref().expect("checked"));
    check_same("step budget", ht.steps == dt.steps && ht.batch_size == dt.batch_size)?;
    check_same("logging cadence", ht.log_every == dt.log_every)?;

    let hyper = run_method(h, &ctx.child("hypernoise")?)?;
    let direct = run_method(d, &ctx.child("direct_ft")?)?;
    let (hc, dc) = (curve_of(&hyper), curve_of(&direct));
    let matched = matched_levels(&hc, &dc, 9);

    #[derive(Serialize)]
    struct CurveRow<'a> {
        method: &'a str,
        step: usize,
        reward_mean: f64,
        fidelity: f64,
    }
    let mut curve_rows = Vec::new();
    for o in [&hyper, &direct] {
        for r in o.rows.iter().filter(|r| r.gen_steps == 1) {
            curve_rows.push(CurveRow {
                method: &r.method,
                step: r.step,
                reward_mean: r.reward_mean,
                fidelity: r.fidelity,
            });
        }
    }
    ctx.write("tradeoff.csv", to_csv(&curve_rows)?)?;
    ctx.write("matched.csv", to_csv(&matched)?)?;
    let series = vec![
        Series {
            name: "hypernoise".into(),
            points: hc.iter().map(|&(r, f)| (f, r)).collect(),
        },
        Series {
            name: "direct_ft".into(),
            points: dc.iter().map(|&(r, f)| (f, r)).collect(),
        },
    ];
    ctx.write("tradeoff.svg", curve_svg("reward against fidelity", "fidelity (KL to base)", "reward", &series))?;
    let summary = TradeoffSummary {
        hypernoise: hyper,
        direct_ft: direct,
        matched,
    };
    for m in &summary.matched {
        ctx.say(&format!(
            "reward {:.4}: hypernoise KL {:.4}, direct_ft KL {:.4}",
            m.reward_level, m.hypernoise_fidelity, m.direct_ft_fidelity
        ));
    }
    if summary.matched.is_empty() {
        ctx.say("the two reward curves do not overlap; no matched comparison");
    }
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiversityRow {
    pub seed: usize,
    pub base: f64,
    pub hypernoise: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug)]
pub struct DiversitySummary {
    pub rows: Vec<DiversityRow>,
    /// mean hypernoise diversity over mean base diversity
    pub aggregate_ratio: f64,
}

/// `diversity`: trains once, then for each seed compares the mean pairwise
/// distance of base and modulated outputs from the same noise draws.
pub fn run_diversity(cfg: ExperimentConfig, seeds: Option<usize>, ctx: &Context) -> CliResult<DiversitySummary> {
    if cfg.method != Method::Hypernoise {
        return Err(CliError::Config("diversity needs a hypernoise config".into()));
    }
    let setup = Setup::new(cfg)?;
    ctx.write("resolved_config.toml", setup.cfg.to_toml()?)?;
    ctx.guard(|| {
        let cfg = &setup.cfg;
        let n_seeds = seeds.unwrap_or(cfg.evaluation.diversity_seeds);
        if n_seeds < 2 {
            return Err(CliError::Config("--seeds must be at least 2".into()));
        }
        let tc = cfg.train.as_ref().expect("checked");
        let (hn, _) = train_hypernoise_observed(&setup.g, &setup.reward, tc, setup.conditions.as_ref(), &mut |_, _| Ok(()))?;
        let m = cfg.evaluation.diversity_samples;
        let mut rows = Vec::with_capacity(n_seeds);
        for s in 0..n_seeds {
            let mut rng = hypernoise::numcore::rng(derive_seed(cfg.evaluation.seed, 7000 + s as u64));
            let x0 = hypernoise::numcore::standard_normal(&mut rng, m, setup.g.latent_dim());
            let c = setup
                .conditions
                .as_ref()
                .map(|set| Tensor::vector(set.row(s % set.rows()).to_vec()));
            let base = Pipeline::Base(&setup.g).run(&x0, c.as_ref(), 1)?;
            let tuned = Pipeline::Hypernoise(&hn).run(&x0, c.as_ref(), 1)?;
            let (b, h) = (
                crate::eval::mean_pairwise_distance(&base),
                crate::eval::mean_pairwise_distance(&tuned),
            );
            rows.push(DiversityRow {
                seed: s,
                base: b,
                hypernoise: h,
                ratio: h / b,
            });
        }
        let mean = |f: fn(&DiversityRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
        let aggregate_ratio = mean(|r| r.hypernoise) / mean(|r| r.base);
        ctx.write("diversity.csv", to_csv(&rows)?)?;
        let bars = vec![("base".to_string(), mean(|r| r.base)), ("hypernoise".to_string(), mean(|r| r.hypernoise))];
        ctx.write("diversity.svg", bars_svg("mean pairwise distance", "distance", &bars))?;
        ctx.say(&format!("diversity ratio hypernoise/base over {n_seeds} seeds: {aggregate_ratio:.4}"));
        Ok(DiversitySummary { rows, aggregate_ratio })
    })
}

/// `plot`: renders an existing CSV file.
pub fn run_plot(csv: &Path, kind: crate::plot::PlotKind, x: &str, y: &str, out: &Path) -> CliResult<()> {
    let svg = crate::plot::plot_csv(csv, kind, x, y)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(format!("cannot create {}", dir.display()), e))?;
    }
    write_atomic(out, svg.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_finds_first_crossing() {
        let c = [(0.0, 0.0), (1.0, 1.0), (2.0, 3.0), (1.5, 5.0), (2.5, 6.0)];
        assert_eq!(fidelity_at_reward(&c, 0.5), Some(0.5));
        assert_eq!(fidelity_at_reward(&c, 1.5), Some(2.0));
        assert_eq!(fidelity_at_reward(&c, 2.25), Some(5.75));
        assert_eq!(fidelity_at_reward(&c, 3.0), None);
    }

    #[test]
    fn matched_levels_cover_upper_half_of_overlap() {
        let h = [(0.0, 0.0), (4.0, 0.4)];
        let d = [(1.0, 0.0), (3.0, 2.0)];
        let m = matched_levels(&h, &d, 3);
        let levels: Vec<f64> = m.iter().map(|r| r.reward_level).collect();
        assert_eq!(levels, vec![2.0, 2.5, 3.0]);
        assert!((m[0].hypernoise_fidelity - 0.2).abs() < 1e-12);
        assert!((m[0].direct_ft_fidelity - 1.0).abs() < 1e-12);
    }
}
