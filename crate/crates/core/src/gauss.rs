//! Monte Carlo distances between scaled TTSA errors and their Gaussian limits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::covariance::{sigma_eps, sigma_limit_last};
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::linalg::{self, sym_eigen, sym_fn, Mat};
use crate::model::{NoiseOracle, TtsaProblem};
use crate::poisson::markov_asymptotic_covariance;
use crate::schedule::{ScheduleSpec, StepSchedule, StepTable};
use crate::stats::{ols, pairwise_sum};

/// Largest tolerated fraction of diverged replications.
pub const MAX_DIVERGED_FRACTION: f64 = 0.01;
/// Mean of the Kolmogorov statistic under the null, times `√N`:
/// `√(π/2)·ln 2`.
pub const KS_NULL_MEAN: f64 = 0.868_731_160_636_526_2;
pub const NOISE_FLOOR_FACTOR: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    /// `√n Δ(θ̄_n − θ*)`
    Pr,
    /// `β_n^{-1/2}(θ_{n+1} − θ*)`
    Last,
}

impl Target {
    pub fn as_str(self) -> &'static str {
        match self {
            Target::Pr => "pr",
            Target::Last => "last",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "ks1d")]
    Ks1d,
    #[serde(rename = "proj-ks")]
    ProjKs,
    #[serde(rename = "sw1")]
    Sw1,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Ks1d => "ks1d",
            Metric::ProjKs => "proj-ks",
            Metric::Sw1 => "sw1",
        }
    }
}

/// Everything a replication needs besides its horizon and stream.
#[derive(Debug, Clone)]
pub struct CloudSetup {
    pub problem: TtsaProblem,
    pub oracle: NoiseOracle,
    pub schedule: ScheduleSpec,
    pub theta0: Option<Vec<f64>>,
    pub w0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleCloud {
    pub n: u64,
    pub target: Target,
    pub replications: usize,
    pub points: Vec<Vec<f64>>,
    /// Replications dropped after diverging.
    pub diverged: usize,
    /// Sample covariance is rank-deficient.
    pub degenerate: bool,
    pub whitened: bool,
}

impl SampleCloud {
    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for replication `rep` of the experiment keyed by
/// `(seed, tag)`; the same triple always yields the same stream.
pub fn replication_rng(seed: u64, tag: u64, rep: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(tag)));
    r.set_stream(rep);
    r
}

/// Exact covariance of the Gaussian limit of `target`: `Σ_ε` (or `Σ_∞^mark`
/// for a Markov oracle) for PR averaging, its Lyapunov limit for the last
/// iterate.
pub fn target_covariance(problem: &TtsaProblem, oracle: &NoiseOracle, target: Target) -> Result<Mat> {
    let source = match oracle.as_markov() {
        Some(m) => markov_asymptotic_covariance(m, problem)?,
        None => sigma_eps(problem, oracle, false)?,
    };
    match target {
        Target::Pr => Ok(source),
        Target::Last => sigma_limit_last(problem, &source),
    }
}

/// `Σ^{-1/2}` for symmetric positive definite `Σ`.
pub fn inverse_sqrt(sigma: &Mat) -> Result<Mat> {
    let e = sym_eigen(sigma)?;
    if e.values.first().map_or(true, |&v| v <= 0.0) {
        return Err(Error::DegenerateCloud("whitening covariance is not positive definite".into()));
    }
    Ok(sym_fn(sigma, |v| v.powf(-0.5))?)
}

fn run_one(
    setup: &CloudSetup,
    table: &StepTable,
    target: Target,
    n: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let sched = table.schedule;
    let mut eng = Engine::new(
        &setup.problem,
        &setup.oracle,
        sched,
        setup.theta0.as_deref(),
        setup.w0.as_deref(),
        false,
        rng,
    )?
    .with_table(table);
    let steps = match target {
        Target::Pr => n,
        Target::Last => n + 1,
    };
    for _ in 0..steps {
        eng.step(rng, false, false)?;
    }
    let star = &eng.solution().theta_star;
    Ok(match target {
        Target::Pr => {
            let err: Vec<f64> = eng.theta_bar().iter().zip(star).map(|(a, b)| a - b).collect();
            let s = (n as f64).sqrt();
            setup.problem.delta().mat_vec(&err)?.into_iter().map(|v| v * s).collect()
        }
        Target::Last => {
            let s = sched.beta(n).powf(-0.5);
            eng.theta().iter().zip(star).map(|(a, b)| (a - b) * s).collect()
        }
    })
}

fn fails_divergence_limit(diverged: usize, total: usize) -> bool {
    diverged as f64 > MAX_DIVERGED_FRACTION * total as f64
}

/// Runs `replications` independent trajectories of horizon `n` and returns
/// the scaled errors for `target`, optionally whitened by `Σ^{-1/2}`.
pub fn collect_cloud(
    setup: &CloudSetup,
    target: Target,
    n: u64,
    replications: usize,
    seed: u64,
    whiten: Option<&Mat>,
) -> Result<SampleCloud> {
    if replications == 0 {
        return Err(Error::EmptyCloud);
    }
    let sched = setup.schedule.resolve(n)?;
    sched.require_finite_steps()?;
    let table = StepTable::new(sched, n + 2);
    let tag = n.wrapping_mul(2) + matches!(target, Target::Last) as u64;
    let results: Vec<Result<Vec<f64>>> = (0..replications)
        .into_par_iter()
        .map(|rep| {
            let mut rng = replication_rng(seed, tag, rep as u64);
            run_one(setup, &table, target, n, &mut rng)
        })
        .collect();
    let mut points = Vec::with_capacity(replications);
    let mut diverged = 0;
    for r in results {
        match r {
            Ok(p) => points.push(p),
            Err(Error::Diverged { .. }) => diverged += 1,
            Err(e) => return Err(e),
        }
    }
    if fails_divergence_limit(diverged, replications) {
        return Err(Error::TooManyDivergences {
            diverged,
            total: replications,
        });
    }
    let whitened = whiten.is_some();
    if let Some(sigma) = whiten {
        let m = inverse_sqrt(sigma)?;
        for p in &mut points {
            *p = m.mat_vec(p)?;
        }
    }
    let degenerate = is_degenerate(&points);
    Ok(SampleCloud {
        n,
        target,
        replications: points.len(),
        points,
        diverged,
        degenerate,
        whitened,
    })
}

/// Sample covariance with pairwise-tree sums.
pub fn sample_covariance(points: &[Vec<f64>]) -> Mat {
    let d = points.first().map_or(0, Vec::len);
    let n = points.len() as f64;
    let mean: Vec<f64> = (0..d)
        .map(|i| pairwise_sum(&points.iter().map(|p| p[i]).collect::<Vec<_>>()) / n)
        .collect();
    let mut c = Mat::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let prods: Vec<f64> = points.iter().map(|p| (p[i] - mean[i]) * (p[j] - mean[j])).collect();
            let v = pairwise_sum(&prods) / (n - 1.0).max(1.0);
            c.set(i, j, v);
            c.set(j, i, v);
        }
    }
    c
}

fn is_degenerate(points: &[Vec<f64>]) -> bool {
    if points.len() < 2 {
        return true;
    }
    let c = sample_covariance(points);
    match sym_eigen(&c) {
        Ok(e) => {
            let lo = e.values.first().copied().unwrap_or(0.0);
            let hi = e.values.last().copied().unwrap_or(0.0);
            hi <= 0.0 || lo <= 1e-12 * hi
        }
        Err(_) => true,
    }
}

/// CDF of `N(0, σ²)`, a unit step at 0 when `σ = 0`.
fn gauss_cdf(sd: f64) -> impl Fn(f64) -> f64 {
    let std = Normal::standard();
    move |x: f64| {
        if sd > 0.0 {
            std.cdf(x / sd)
        } else if x >= 0.0 {
            1.0
        } else {
            0.0
        }
    }
}

/// Kolmogorov distance between the empirical law of `x` and `N(0, σ²)`.
pub fn ks_statistic(x: &[f64], sd: f64) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    ks_sorted(&s, sd)
}

fn ks_sorted(s: &[f64], sd: f64) -> f64 {
    let f = gauss_cdf(sd);
    let n = s.len() as f64;
    let mut d = 0.0_f64;
    for (i, &x) in s.iter().enumerate() {
        let fx = f(x);
        d = d.max((i + 1) as f64 / n - fx).max(fx - i as f64 / n);
    }
    d
}

/// `W1` between the empirical law of `x` and `N(0, σ²)`, computed exactly
/// through the quantile representation `∫_0^1 |F_n^{-1}(t) − σΦ^{-1}(t)| dt`.
pub fn w1_statistic(x: &[f64], sd: f64) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    w1_sorted(&s, sd)
}

fn w1_sorted(s: &[f64], sd: f64) -> f64 {
    let n = s.len();
    if sd <= 0.0 {
        return s.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    }
    let std = Normal::standard();
    // φ(Φ^{-1}(t)), 0 at both ends
    let phi_q = |t: f64| {
        if t <= 0.0 || t >= 1.0 {
            0.0
        } else {
            std.pdf(std.inverse_cdf(t))
        }
    };
    // ∫_{t0}^{t1} (c − σΦ^{-1}(t)) dt = c(t1 − t0) + σ(φ(z1) − φ(z0))
    let signed = |c: f64, t0: f64, t1: f64| c * (t1 - t0) + sd * (phi_q(t1) - phi_q(t0));
    let mut total = 0.0;
    for (i, &c) in s.iter().enumerate() {
        let t0 = i as f64 / n as f64;
        let t1 = (i + 1) as f64 / n as f64;
        // integrand decreasing in t, zero at t* = Φ(c/σ)
        let ts = std.cdf(c / sd);
        total += if ts <= t0 {
            -signed(c, t0, t1)
        } else if ts >= t1 {
            signed(c, t0, t1)
        } else {
            signed(c, t0, ts) - signed(c, ts, t1)
        };
    }
    total
}

fn first_primes(d: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(d);
    let mut c = 2u64;
    while out.len() < d {
        if out.iter().take_while(|&&p| p * p <= c).all(|&p| c % p != 0) {
            out.push(c);
        }
        c += 1;
    }
    out
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Quasi-random unit directions: a randomly shifted Halton sequence mapped
/// through the normal quantile and normalized. Direction `i` does not depend
/// on `m`, so shorter pools are prefixes of longer ones.
pub fn directions(d: usize, m: usize, seed: u64) -> Vec<Vec<f64>> {
    let primes = first_primes(d);
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
    let shift: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
    let std = Normal::standard();
    (0..m)
        .map(|i| {
            let z: Vec<f64> = (0..d)
                .map(|j| {
                    let u = (radical_inverse(i as u64 + 1, primes[j]) + shift[j]).fract();
                    std.inverse_cdf(u.clamp(1e-12, 1.0 - 1e-12))
                })
                .collect();
            let nz = linalg::norm2(&z);
            if nz > 0.0 {
                z.iter().map(|v| v / nz).collect()
            } else {
                let mut e = vec![0.0; d];
                e[0] = 1.0;
                e
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceOptions {
    pub directions: usize,
    pub direction_seed: u64,
    /// Explicit direction pool; overrides `directions`/`direction_seed`.
    pub explicit_directions: Option<Vec<Vec<f64>>>,
    pub bootstrap: usize,
    pub bootstrap_seed: u64,
}

impl Default for DistanceOptions {
    fn default() -> Self {
        Self {
            directions: 64,
            direction_seed: 0,
            explicit_directions: None,
            bootstrap: 200,
            bootstrap_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub n: u64,
    pub metric: Metric,
    pub value: f64,
    /// Bootstrap standard error over replication resampling.
    pub stderr: f64,
    pub directions_used: usize,
    pub direction_seed: u64,
    pub replications: usize,
}

fn metric_value(points: &[Vec<f64>], idx: Option<&[usize]>, cov: &Mat, metric: Metric, dirs: &[Vec<f64>]) -> f64 {
    let pick = |f: &dyn Fn(&Vec<f64>) -> f64| -> Vec<f64> {
        match idx {
            Some(ix) => ix.iter().map(|&i| f(&points[i])).collect(),
            None => points.iter().map(f).collect(),
        }
    };
    match metric {
        Metric::Ks1d => {
            let sd = cov.get(0, 0).max(0.0).sqrt();
            let mut x = pick(&|p| p[0]);
            x.sort_by(f64::total_cmp);
            ks_sorted(&x, sd)
        }
        Metric::ProjKs | Metric::Sw1 => {
            let vals: Vec<f64> = dirs
                .par_iter()
                .map(|u| {
                    let sd = linalg::dot(u, &cov.mat_vec(u).expect("shape")).max(0.0).sqrt();
                    let mut x = pick(&|p| linalg::dot(u, p));
                    x.sort_by(f64::total_cmp);
                    if metric == Metric::ProjKs {
                        ks_sorted(&x, sd)
                    } else {
                        w1_sorted(&x, sd)
                    }
                })
                .collect();
            if metric == Metric::ProjKs {
                vals.into_iter().fold(0.0, f64::max)
            } else {
                pairwise_sum(&vals) / vals.len() as f64
            }
        }
    }
}

/// Distance between the cloud and `N(0, target_cov)` under `metric`.
pub fn distance_to_gaussian(
    cloud: &SampleCloud,
    target_cov: &Mat,
    metric: Metric,
    opts: &DistanceOptions,
) -> Result<DistanceReport> {
    if cloud.points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let d = cloud.dim();
    if target_cov.shape() != (d, d) {
        return Err(Error::Dimension {
            what: "target covariance".into(),
            expected: d,
            got: target_cov.rows(),
        });
    }
    if linalg::lambda_min(&target_cov.symmetrize())? < -1e-10 * target_cov.max_abs().max(1.0) {
        return Err(Error::InvalidArgument("target covariance is not PSD".into()));
    }
    let dirs = match metric {
        Metric::Ks1d => {
            if d != 1 {
                return Err(Error::InvalidArgument(format!("ks1d needs dimension 1, cloud has {d}")));
            }
            Vec::new()
        }
        Metric::ProjKs | Metric::Sw1 => {
            if cloud.degenerate {
                return Err(Error::DegenerateCloud("sample covariance is rank-deficient".into()));
            }
            match &opts.explicit_directions {
                Some(v) => {
                    if v.iter().any(|u| u.len() != d) {
                        return Err(Error::InvalidArgument("direction of wrong dimension".into()));
                    }
                    v.clone()
                }
                None => directions(d, opts.directions.max(1), opts.direction_seed),
            }
        }
    };
    let value = metric_value(&cloud.points, None, target_cov, metric, &dirs);
    let stderr = if opts.bootstrap >= 2 {
        let np = cloud.points.len();
        let boot: Vec<f64> = (0..opts.bootstrap)
            .into_par_iter()
            .map(|b| {
                let mut rng = replication_rng(opts.bootstrap_seed, u64::MAX, b as u64);
                let idx: Vec<usize> = (0..np).map(|_| rng.random_range(0..np)).collect();
                metric_value(&cloud.points, Some(&idx), target_cov, metric, &dirs)
            })
            .collect();
        crate::stats::variance(&boot).sqrt()
    } else {
        0.0
    };
    Ok(DistanceReport {
        n: cloud.n,
        metric,
        value,
        stderr,
        directions_used: dirs.len(),
        direction_seed: opts.direction_seed,
        replications: cloud.points.len(),
    })
}

/// Expected Kolmogorov statistic of an exact Gaussian sample of size `n`.
pub fn ks_noise_floor(replications: usize) -> f64 {
    KS_NULL_MEAN / (replications as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseFloorVerdict {
    pub floor: f64,
    pub factor: f64,
    pub passed: bool,
    /// Grid points whose distance is below `factor × floor`.
    pub violations: Vec<u64>,
}

/// Checks KS-type distances stay at least `factor` times above the
/// replication noise floor.
pub fn noise_floor_check(reports: &[DistanceReport], factor: f64) -> NoiseFloorVerdict {
    let reps = reports.iter().map(|r| r.replications).min().unwrap_or(0);
    let floor = if reps > 0 { ks_noise_floor(reps) } else { f64::INFINITY };
    let violations: Vec<u64> = reports
        .iter()
        .filter(|r| r.metric != Metric::Sw1 && r.value < factor * floor)
        .map(|r| r.n)
        .collect();
    NoiseFloorVerdict {
        floor,
        factor,
        passed: violations.is_empty(),
        violations,
    }
}

/// As [`noise_floor_check`], failing on the first violation.
pub fn enforce_noise_floor(reports: &[DistanceReport], factor: f64) -> Result<()> {
    let v = noise_floor_check(reports, factor);
    if let Some(&n) = v.violations.first() {
        let r = reports.iter().find(|r| r.n == n).expect("present");
        return Err(Error::NoiseFloorViolated {
            n,
            value: r.value,
            floor: v.floor,
            factor,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    /// `(ln n, ln distance)`
    pub pairs: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    /// 95% interval from a parametric bootstrap over the per-point
    /// replication-bootstrap standard errors.
    pub slope_ci: (f64, f64),
    pub r2: f64,
}

const FIT_BOOTSTRAP: usize = 2000;

/// Least-squares slope of `ln distance` against `ln n`.
pub fn fit_rate(reports: &[DistanceReport]) -> Result<RateFit> {
    let points = reports.len();
    let (lo, hi) = reports.iter().fold((u64::MAX, 0u64), |(l, h), r| (l.min(r.n), h.max(r.n)));
    let doublings = if points > 0 { (hi as f64 / lo as f64).log2() } else { 0.0 };
    if points < 5 || doublings < 4.0 - 1e-9 {
        return Err(Error::InsufficientGrid { points, doublings });
    }
    if let Some(r) = reports.iter().find(|r| !(r.value > 0.0)) {
        return Err(Error::InvalidArgument(format!("distance at n = {} is not positive", r.n)));
    }
    let x: Vec<f64> = reports.iter().map(|r| (r.n as f64).ln()).collect();
    let y: Vec<f64> = reports.iter().map(|r| r.value.ln()).collect();
    let fit = ols(&x, &y);
    let normal = Normal::standard();
    let mut slopes: Vec<f64> = (0..FIT_BOOTSTRAP)
        .map(|b| {
            let mut rng = replication_rng(0x5eed, u64::MAX - 1, b as u64);
            let yb: Vec<f64> = reports
                .iter()
                .map(|r| {
                    let z = normal.inverse_cdf(rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12));
                    (r.value + r.stderr * z).max(r.value * 1e-3).ln()
                })
                .collect();
            ols(&x, &yb).slope
        })
        .collect();
    slopes.sort_by(f64::total_cmp);
    let q = |p: f64| slopes[((p * (FIT_BOOTSTRAP - 1) as f64).round() as usize).min(FIT_BOOTSTRAP - 1)];
    let slope_ci = (q(0.025).min(fit.slope), q(0.975).max(fit.slope));
    Ok(RateFit {
        pairs: x.into_iter().zip(y).collect(),
        slope: fit.slope,
        intercept: fit.intercept,
        slope_ci,
        r2: fit.r2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub k: u64,
    /// `E‖θ_k − θ*‖²`
    pub mse_theta: f64,
    /// `E‖w_k − w*‖²`
    pub mse_w: f64,
    pub stderr_theta: f64,
    pub stderr_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentTable {
    pub rows: Vec<MomentRow>,
    pub replications: usize,
    pub diverged: usize,
}

/// Mean squared errors at `checkpoints` (increasing) over independent
/// replications of one schedule.
pub fn collect_moments(
    setup: &CloudSetup,
    schedule: StepSchedule,
    checkpoints: &[u64],
    replications: usize,
    seed: u64,
) -> Result<MomentTable> {
    if replications == 0 {
        return Err(Error::EmptyCloud);
    }
    if checkpoints.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("checkpoints must be strictly increasing".into()));
    }
    schedule.require_finite_steps()?;
    let last = checkpoints.last().copied().unwrap_or(0);
    let table = StepTable::new(schedule, last + 1);
    let runs: Vec<Result<Vec<(f64, f64)>>> = (0..replications)
        .into_par_iter()
        .map(|rep| {
            let mut rng = replication_rng(seed, u64::MAX - 2, rep as u64);
            let mut eng = Engine::new(
                &setup.problem,
                &setup.oracle,
                schedule,
                setup.theta0.as_deref(),
                setup.w0.as_deref(),
                false,
                &mut rng,
            )?
            .with_table(&table);
            let sol = eng.solution().clone();
            let mut out = Vec::with_capacity(checkpoints.len());
            for &c in checkpoints {
                while eng.k() < c {
                    eng.step(&mut rng, false, false)?;
                }
                let et: f64 = eng.theta().iter().zip(&sol.theta_star).map(|(a, b)| (a - b).powi(2)).sum();
                let ew: f64 = eng.w().iter().zip(&sol.w_star).map(|(a, b)| (a - b).powi(2)).sum();
                out.push((et, ew));
            }
            Ok(out)
        })
        .collect();
    let mut ok = Vec::with_capacity(replications);
    let mut diverged = 0;
    for r in runs {
        match r {
            Ok(v) => ok.push(v),
            Err(Error::Diverged { .. }) => diverged += 1,
            Err(e) => return Err(e),
        }
    }
    if fails_divergence_limit(diverged, replications) {
        return Err(Error::TooManyDivergences {
            diverged,
            total: replications,
        });
    }
    let m = ok.len() as f64;
    let rows = checkpoints
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let t: Vec<f64> = ok.iter().map(|v| v[i].0).collect();
            let w: Vec<f64> = ok.iter().map(|v| v[i].1).collect();
            let se = |v: &[f64]| if v.len() > 1 { (crate::stats::variance(v) / m).sqrt() } else { 0.0 };
            MomentRow {
                k,
                mse_theta: pairwise_sum(&t) / m,
                mse_w: pairwise_sum(&w) / m,
                stderr_theta: se(&t),
                stderr_w: se(&w),
            }
        })
        .collect();
    Ok(MomentTable {
        rows,
        replications: ok.len(),
        diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Observation;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_sample(n: usize, sd: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                vec![sd * z]
            })
            .collect()
    }

    fn cloud(points: Vec<Vec<f64>>) -> SampleCloud {
        let degenerate = is_degenerate(&points);
        SampleCloud {
            n: 1,
            target: Target::Pr,
            replications: points.len(),
            points,
            diverged: 0,
            degenerate,
            whitened: false,
        }
    }

    fn rademacher_setup(schedule: ScheduleSpec) -> CloudSetup {
        let p = TtsaProblem::scalar(1.0, 0.0, 0.0, 1.0, 0.0, 0.0).unwrap();
        let mk = |b: f64| {
            let mut o: Observation = p.mean_observation();
            o.b1[0] = b;
            o
        };
        let o = NoiseOracle::mixture(&p, vec![0.5, 0.5], vec![mk(1.0), mk(-1.0)]).unwrap();
        CloudSetup {
            problem: p,
            oracle: o,
            schedule,
            theta0: None,
            w0: None,
        }
    }

    #[test]
    fn all_zero_points_ks_is_half() {
        let c = cloud(vec![vec![0.0]; 50]);
        assert!(c.degenerate);
        let opts = DistanceOptions {
            bootstrap: 0,
            ..Default::default()
        };
        let r = distance_to_gaussian(&c, &Mat::identity(1), Metric::Ks1d, &opts).unwrap();
        assert!((r.value - 0.5).abs() < 1e-15);
        assert!(matches!(
            distance_to_gaussian(&c, &Mat::identity(1), Metric::ProjKs, &opts),
            Err(Error::DegenerateCloud(_))
        ));
    }

    #[test]
    fn exact_gaussian_ks_small() {
        let c = cloud(gaussian_sample(10_000, 2.0, 3));
        let sig = Mat::from_rows(&[vec![4.0]]).unwrap();
        let r = distance_to_gaussian(&c, &sig, Metric::Ks1d, &DistanceOptions::default()).unwrap();
        assert!(r.value < 0.02, "{}", r.value);
        assert!(r.stderr > 0.0 && r.stderr < 0.01);
    }

    #[test]
    fn proj_ks_single_direction_equals_ks1d() {
        let c = cloud(gaussian_sample(500, 1.0, 4));
        let opts = DistanceOptions {
            explicit_directions: Some(vec![vec![1.0]]),
            bootstrap: 0,
            ..Default::default()
        };
        let sig = Mat::identity(1);
        let a = distance_to_gaussian(&c, &sig, Metric::ProjKs, &opts).unwrap().value;
        let b = distance_to_gaussian(&c, &sig, Metric::Ks1d, &opts).unwrap().value;
        assert_eq!(a, b);
    }

    #[test]
    fn proj_ks_monotone_in_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec<f64>> = (0..400)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                let c: f64 = StandardNormal.sample(&mut rng);
                vec![a, 0.5 * a + b, c.abs()]
            })
            .collect();
        let c = cloud(pts);
        let mut last = 0.0;
        for m in [1, 4, 16, 64] {
            let opts = DistanceOptions {
                directions: m,
                bootstrap: 0,
                ..Default::default()
            };
            let v = distance_to_gaussian(&c, &Mat::identity(3), Metric::ProjKs, &opts).unwrap().value;
            assert!(v >= last);
            last = v;
        }
        let d4 = directions(3, 4, 9);
        let d8 = directions(3, 8, 9);
        assert_eq!(&d8[..4], &d4[..]);
        assert!(d8.iter().all(|u| (linalg::norm2(u) - 1.0).abs() < 1e-12));
    }

    #[test]
    fn whitening_invariance_ks1d() {
        let pts = gaussian_sample(300, 1.7, 6);
        let sig = Mat::from_rows(&[vec![2.5]]).unwrap();
        let raw = ks_statistic(&pts.iter().map(|p| p[0]).collect::<Vec<_>>(), 2.5f64.sqrt());
        let m = inverse_sqrt(&sig).unwrap();
        let white: Vec<f64> = pts.iter().map(|p| m.get(0, 0) * p[0]).collect();
        assert!((ks_statistic(&white, 1.0) - raw).abs() < 1e-12);
    }

    #[test]
    fn w1_matches_numerical_integral() {
        let x = [-1.3, -0.2, 0.1, 0.4, 2.0];
        let sd = 0.8;
        let std = Normal::standard();
        let m = 200_000;
        let mut num = 0.0;
        for j in 0..m {
            let t = (j as f64 + 0.5) / m as f64;
            let q = x[((t * 5.0) as usize).min(4)];
            num += (q - sd * std.inverse_cdf(t)).abs() / m as f64;
        }
        assert!((w1_statistic(&x, sd) - num).abs() < 1e-4);
        assert!((w1_statistic(&x, 0.0) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn ks_dkw_decay() {
        // averaged over seeds, the statistic shrinks like N^{-1/2}
        let mean_ks = |n: usize| {
            (0..20)
                .map(|s| ks_statistic(&gaussian_sample(n, 1.0, 100 + s).iter().map(|p| p[0]).collect::<Vec<_>>(), 1.0))
                .sum::<f64>()
                / 20.0
        };
        for n in [400usize, 1600, 6400] {
            let m = mean_ks(n);
            assert!((m * (n as f64).sqrt() / KS_NULL_MEAN - 1.0).abs() < 0.3, "n = {n}: {m}");
        }
    }

    #[test]
    fn rate_fit_examples() {
        let mk = |n: u64, v: f64| DistanceReport {
            n,
            metric: Metric::Ks1d,
            value: v,
            stderr: 0.0,
            directions_used: 0,
            direction_seed: 0,
            replications: 1000,
        };
        let grid: Vec<u64> = (10..=18).map(|k| 1u64 << k).collect();
        let exact: Vec<_> = grid.iter().map(|&n| mk(n, 2.0 * (n as f64).powf(-0.25))).collect();
        let f = fit_rate(&exact).unwrap();
        assert!((f.slope + 0.25).abs() < 1e-6);
        assert!(f.slope_ci.0 <= f.slope && f.slope <= f.slope_ci.1);
        let logged: Vec<_> = grid
            .iter()
            .map(|&n| mk(n, (n as f64).powf(-0.25) * (n as f64).ln()))
            .collect();
        let s = fit_rate(&logged).unwrap().slope;
        // local slope −1/4 + 1/ln n at the geometric midpoint n = 2^14
        let local = -0.25 + 1.0 / (14.0 * 2f64.ln());
        assert!((s - local).abs() < 5e-3, "{s}");
        assert!(s > -0.25);
        let flat: Vec<_> = grid.iter().map(|&n| mk(n, 0.1)).collect();
        assert!(fit_rate(&flat).unwrap().slope.abs() < 1e-12);
        assert!(matches!(
            fit_rate(&exact[..2]),
            Err(Error::InsufficientGrid { points: 2, .. })
        ));
    }

    #[test]
    fn empty_and_deterministic_clouds() {
        let s = rademacher_setup(ScheduleSpec::explicit(0.6, 0.8, 0.5, 0.5, 1));
        assert!(matches!(collect_cloud(&s, Target::Pr, 10, 0, 1, None), Err(Error::EmptyCloud)));
        let det = CloudSetup {
            oracle: NoiseOracle::deterministic(&s.problem),
            theta0: Some(vec![1.0]),
            ..s.clone()
        };
        let c = collect_cloud(&det, Target::Last, 50, 20, 1, None).unwrap();
        assert!(c.degenerate);
        assert!(c.points.iter().all(|p| p == &c.points[0]));
    }

    #[test]
    fn clouds_are_reproducible_and_thread_independent() {
        let s = rademacher_setup(ScheduleSpec::explicit(0.6, 0.8, 0.5, 0.5, 1));
        let a = collect_cloud(&s, Target::Pr, 200, 64, 42, None).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| collect_cloud(&s, Target::Pr, 200, 64, 42, None).unwrap());
        assert_eq!(a, b);
        let c = collect_cloud(&s, Target::Pr, 200, 64, 43, None).unwrap();
        assert_ne!(a.points, c.points);
    }

    #[test]
    fn pr_cloud_variance_near_sigma_eps() {
        let s = rademacher_setup(ScheduleSpec::explicit(0.6, 0.7, 1.0, 1.0, 1));
        let c = collect_cloud(&s, Target::Pr, 2000, 2000, 7, None).unwrap();
        let v = sample_covariance(&c.points).get(0, 0);
        // Σ_ε/Δ² = 1; finite-n bias is small at this horizon
        assert!((v - 1.0).abs() < 0.15, "{v}");
    }

    #[test]
    fn moments_shrink() {
        let s = rademacher_setup(ScheduleSpec::explicit(0.6, 0.8, 0.5, 0.5, 1));
        let sched = s.schedule.resolve(1000).unwrap();
        let t = collect_moments(&s, sched, &[100, 1000], 200, 3).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert!(t.rows[1].mse_theta < t.rows[0].mse_theta);
    }
}
