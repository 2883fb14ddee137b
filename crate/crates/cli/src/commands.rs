//! The four subcommands. Every artifact is a function of the config bytes
//! and the seed only.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use ttsa_core::covariance::covariance_report;
use ttsa_core::engine::{run, write_checkpoints_csv, RunOptions};
use ttsa_core::gauss::{
    collect_cloud, collect_moments, distance_to_gaussian, fit_rate, noise_floor_check, replication_rng,
    target_covariance, DistanceOptions, DistanceReport, Metric, NoiseFloorVerdict, RateFit, Target,
    NOISE_FLOOR_FACTOR,
};
use ttsa_core::linalg::solve_lyapunov;
use ttsa_core::model::{solve_exact, validate_assumptions, ValidationReport};
use ttsa_core::rlapps::evaluate_policy_exact;
use ttsa_core::schedule::{check_schedule, ScheduleReport, StepSchedule};
use ttsa_core::stats::loglog_fit;
use ttsa_core::Error as CoreError;

use crate::config::{ExperimentConfig, Resolved};
use crate::error::CliError;

/// Moment order and unnamed constant used for the `k0` moment condition.
const MOMENT_ORDER: f64 = 2.0;
const C_MOMENT: f64 = 1.0;
/// Stream tag for the trajectories written by `simulate`.
const TRAJECTORY_TAG: u64 = u64::MAX - 16;

pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub config_sha256: String,
    pub seed: u64,
    pub out: PathBuf,
    pub strict: bool,
}

impl Ctx {
    fn provenance(&self) -> String {
        format!("config_sha256={} seed={}", self.config_sha256, self.seed)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Checks that fail the run under `--strict`. Under a Markov oracle the
/// constant-conditional-covariance check is informational.
fn strict_failures(report: &ValidationReport, markov: bool) -> Vec<String> {
    report
        .failures()
        .into_iter()
        .filter(|c| !(markov && c.name == "A3"))
        .map(|c| format!("{}: {}", c.name, c.message))
        .collect()
}

fn schedule_report(r: &Resolved, s: &StepSchedule) -> Result<ScheduleReport, CliError> {
    let p = &r.setup.problem;
    let c22 = solve_lyapunov(p.a22()).map_err(CoreError::from)?;
    let cd = solve_lyapunov(p.delta()).map_err(CoreError::from)?;
    Ok(check_schedule(s, &c22, &cd, MOMENT_ORDER, C_MOMENT))
}

fn default_checkpoints(horizon: u64) -> Vec<u64> {
    let mut v: Vec<u64> = (0..64).map(|i| 1u64 << i).take_while(|&k| k < horizon).collect();
    v.push(horizon);
    v
}

#[derive(Serialize)]
struct SlopeFit {
    slope: f64,
    r2: f64,
    expected: f64,
    points: usize,
}

/// `simulate`: trajectory CSVs and a summary with the MSE-vs-k table.
/// Returns the strict-mode failures found.
pub fn simulate(ctx: &Ctx, r: &Resolved) -> Result<Vec<String>, CliError> {
    let cfg = &ctx.cfg;
    let horizon = cfg.horizon()?;
    let sched = cfg.schedule.resolve(horizon)?;
    sched.require_finite_steps()?;
    let p = &r.setup.problem;
    let o = &r.setup.oracle;
    let validation = validate_assumptions(p, o);
    let sreport = schedule_report(r, &sched)?;
    let sol = solve_exact(p)?;
    let checkpoints = cfg.simulate.checkpoints.clone().unwrap_or_else(|| default_checkpoints(horizon));
    if checkpoints.windows(2).any(|w| w[1] <= w[0]) || checkpoints.last().is_some_and(|&k| k > horizon) {
        return Err(CliError::Config(
            "config: field `simulate.checkpoints` must be increasing and within the horizon".into(),
        ));
    }

    let opts = RunOptions {
        checkpoints: checkpoints.clone(),
        theta0: r.setup.theta0.clone(),
        w0: r.setup.w0.clone(),
        ..Default::default()
    };
    let records: Vec<_> = (0..cfg.simulate.trajectories)
        .into_par_iter()
        .map(|rep| {
            let mut rng = replication_rng(ctx.seed, TRAJECTORY_TAG, rep as u64);
            run(p, o, &sched, horizon, &opts, &mut rng)
        })
        .collect::<Result<_, _>>()?;
    let header = [ctx.provenance()];
    let mut finals = Vec::with_capacity(records.len());
    for (rep, rec) in records.iter().enumerate() {
        let mut buf = Vec::new();
        write_checkpoints_csv(rec, &header, &mut buf)?;
        fs::write(ctx.path(&format!("trajectory_{rep}.csv")), buf)?;
        finals.push(&rec.final_state);
    }

    let moments = collect_moments(&r.setup, sched, &checkpoints, cfg.simulate.moment_replications, ctx.seed)?;
    let fit_rows: Vec<_> = moments
        .rows
        .iter()
        .filter(|m| m.k >= cfg.simulate.fit_from && m.mse_theta > 0.0 && m.mse_w > 0.0)
        .collect();
    let fit = |f: &dyn Fn(&ttsa_core::gauss::MomentRow) -> f64, expected: f64| {
        (fit_rows.len() >= 2).then(|| {
            let x: Vec<f64> = fit_rows.iter().map(|m| m.k as f64).collect();
            let y: Vec<f64> = fit_rows.iter().map(|m| f(m)).collect();
            let l = loglog_fit(&x, &y);
            SlopeFit {
                slope: l.slope,
                r2: l.r2,
                expected,
                points: x.len(),
            }
        })
    };
    let summary = json!({
        "command": "simulate",
        "config_sha256": ctx.config_sha256,
        "seed": ctx.seed,
        "horizon": horizon,
        "schedule": sched,
        "solution": sol,
        "validation": validation,
        "schedule_checks": sreport,
        "final_states": finals,
        "moments": moments,
        "mse_slope_theta": fit(&|m| m.mse_theta, -sched.b_exp),
        "mse_slope_w": fit(&|m| m.mse_w, -sched.a_exp),
    });
    write_json(&ctx.path("summary.json"), &summary)?;

    let mut fails = strict_failures(&validation, o.is_markov());
    fails.extend(sreport.checks.iter().filter(|c| !c.passed).map(|c| format!("schedule {}: {}", c.name, c.message)));
    Ok(fails)
}

fn check_grid(grid: &[u64]) -> Result<(), CliError> {
    let points = grid.len();
    let doublings = match (grid.first(), grid.last()) {
        (Some(&a), Some(&b)) if points > 0 => (b as f64 / a as f64).log2(),
        _ => 0.0,
    };
    if points < 5 || doublings < 4.0 - 1e-9 {
        return Err(CoreError::InsufficientGrid { points, doublings }.into());
    }
    Ok(())
}

#[derive(Serialize)]
struct FitEntry {
    target: Target,
    metric: Metric,
    fit: RateFit,
    noise_floor: NoiseFloorVerdict,
}

/// `rates`: clouds over the grid, distances, and fitted slopes.
pub fn rates(ctx: &Ctx, r: &Resolved) -> Result<Vec<String>, CliError> {
    let cfg = &ctx.cfg;
    check_grid(&cfg.n_grid)?;
    if cfg.replications < 100 {
        return Err(CliError::Config(format!(
            "config: field `replications` must be at least 100 for distance experiments, got {}",
            cfg.replications
        )));
    }
    if cfg.targets.is_empty() || cfg.metrics.is_empty() {
        return Err(CliError::Config("config: fields `targets` and `metrics` must be nonempty".into()));
    }
    let p = &r.setup.problem;
    if cfg.metrics.contains(&Metric::Ks1d) && p.d_theta() != 1 {
        return Err(CliError::Config(format!(
            "config: metric `ks1d` needs d_theta = 1, problem has {}",
            p.d_theta()
        )));
    }
    let opts = DistanceOptions {
        directions: cfg.distance.directions,
        direction_seed: cfg.distance.direction_seed,
        explicit_directions: None,
        bootstrap: cfg.distance.bootstrap,
        bootstrap_seed: ctx.seed,
    };
    let mut csv = format!("# {}\nn,target,metric,value,stderr,replications,directions_used\n", ctx.provenance());
    let mut per_n = Vec::new();
    let mut reports: Vec<(Target, DistanceReport)> = Vec::new();
    for &target in &cfg.targets {
        let cov = target_covariance(p, &r.setup.oracle, target)?;
        for &n in &cfg.n_grid {
            let cloud = collect_cloud(&r.setup, target, n, cfg.replications, ctx.seed, None)?;
            per_n.push(json!({
                "target": target,
                "n": n,
                "schedule": cfg.schedule.resolve(n)?,
                "replications": cloud.replications,
                "diverged": cloud.diverged,
                "degenerate": cloud.degenerate,
            }));
            for &metric in &cfg.metrics {
                let rep = distance_to_gaussian(&cloud, &cov, metric, &opts)?;
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    rep.n,
                    target.as_str(),
                    metric.as_str(),
                    rep.value,
                    rep.stderr,
                    rep.replications,
                    rep.directions_used
                ));
                reports.push((target, rep));
            }
        }
    }
    fs::write(ctx.path("distances.csv"), csv)?;

    let mut fits = Vec::new();
    let mut fails = Vec::new();
    for &target in &cfg.targets {
        for &metric in &cfg.metrics {
            let rs: Vec<DistanceReport> = reports
                .iter()
                .filter(|(t, d)| *t == target && d.metric == metric)
                .map(|(_, d)| d.clone())
                .collect();
            let fit = fit_rate(&rs)?;
            let nf = noise_floor_check(&rs, NOISE_FLOOR_FACTOR);
            if !nf.passed {
                fails.push(format!(
                    "noise floor: {} {} distances within {}x of {:.4} at n = {:?}",
                    target.as_str(),
                    metric.as_str(),
                    nf.factor,
                    nf.floor,
                    nf.violations
                ));
            }
            fits.push(FitEntry {
                target,
                metric,
                fit,
                noise_floor: nf,
            });
        }
    }
    write_json(
        &ctx.path("ratefit.json"),
        &json!({
            "config_sha256": ctx.config_sha256,
            "seed": ctx.seed,
            "fits": fits,
        }),
    )?;
    write_json(
        &ctx.path("summary.json"),
        &json!({
            "command": "rates",
            "config_sha256": ctx.config_sha256,
            "seed": ctx.seed,
            "clouds": per_n,
        }),
    )?;
    Ok(fails)
}

/// `covariance`: exact target covariances and the gap table.
pub fn covariance(ctx: &Ctx, r: &Resolved) -> Result<Vec<String>, CliError> {
    let cfg = &ctx.cfg;
    let grid: Vec<u64> = if cfg.n_grid.len() >= 2 {
        cfg.n_grid.clone()
    } else {
        (10..=20).map(|k| 1u64 << k).collect()
    };
    let sched = cfg.schedule.resolve(*grid.last().expect("nonempty"))?;
    sched.require_finite_steps()?;
    let report = covariance_report(&r.setup.problem, &r.setup.oracle, &sched, &grid, ctx.strict)?;
    write_json(
        &ctx.path("covariance.json"),
        &json!({
            "config_sha256": ctx.config_sha256,
            "seed": ctx.seed,
            "schedule": sched,
            "report": report,
        }),
    )?;
    Ok(Vec::new())
}

/// `rl`: the GTD/TDC mapping, its validation, then `simulate` (and `rates`
/// when a grid is configured).
pub fn rl(ctx: &Ctx, r: &Resolved) -> Result<Vec<String>, CliError> {
    let Some((inst, mdp, features)) = &r.rl else {
        return Err(CliError::Config("config: `rl` needs fields `mdp` and `algorithm`".into()));
    };
    let validation = validate_assumptions(&inst.problem, &inst.oracle);
    let eval = evaluate_policy_exact(mdp, features, inst)?;
    let hurwitz = |name: &str| validation.check(name).is_some_and(|c| c.passed);
    write_json(
        &ctx.path("rl.json"),
        &json!({
            "config_sha256": ctx.config_sha256,
            "seed": ctx.seed,
            "algorithm": inst.algorithm,
            "tuples": inst.tuples.len(),
            "mu": inst.mu,
            "state_mixing_time": inst.state_mixing_time,
            "tuple_mixing_time": inst.tuple_mixing_time,
            "hurwitz": {"a22": hurwitz("A4-a22"), "delta": hurwitz("A4-delta")},
            "validation": validation,
            "policy_evaluation": eval,
        }),
    )?;
    let mut fails = simulate(ctx, r)?;
    if !ctx.cfg.n_grid.is_empty() && !ctx.cfg.targets.is_empty() {
        let sim_summary = fs::read(ctx.path("summary.json"))?;
        fails.extend(rates(ctx, r)?);
        // keep the simulate summary alongside the rates one
        fs::write(ctx.path("simulate_summary.json"), sim_summary)?;
    }
    Ok(fails)
}
