//! Target covariances of the Gaussian limits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, eig_check_hurwitz, solve_sylvester_transposed, Mat};
use crate::model::{noise_covariances, validate_assumptions, MarkovOracle, NoiseOracle, TtsaProblem};
use crate::poisson::markov_asymptotic_covariance;
use crate::schedule::StepSchedule;
use crate::stats::loglog_fit;

/// `Var[ψ]` with `ψ = ε_V − A12 A22^{-1} ε_W`; for a Markov oracle the
/// variance is taken under the stationary law. With `strict`, a martingale
/// oracle whose conditional second moment moves with the state is rejected.
pub fn sigma_eps(problem: &TtsaProblem, oracle: &NoiseOracle, strict: bool) -> Result<Mat> {
    if strict && !oracle.is_markov() {
        let report = validate_assumptions(problem, oracle);
        if let Some(c) = report.check("A3") {
            if !c.passed {
                return Err(Error::AssumptionViolated(format!("A3: {}", c.message)));
            }
        }
    }
    Ok(noise_covariances(problem, oracle)?.sigma_psi(problem).symmetrize())
}

/// One step of `Σ ← (I − βΔ) Σ (I − βΔ)^T + β² S`.
fn push(sigma: &Mat, delta: &Mat, source: &Mat, beta: f64) -> Mat {
    let d = delta.rows();
    let g = Mat::identity(d).sub(&delta.scale(beta)).expect("shape");
    let mut next = g.matmul(sigma).expect("shape").matmul(&g.transpose()).expect("shape");
    next.axpy(beta * beta, source).expect("shape");
    next.symmetrize()
}

/// `Σ_n = Σ_{k=0}^{n} β_k² G_{k+1:n} S G_{k+1:n}^T` with
/// `G_{k+1:n} = Π_{j=k+1}^{n} (I − β_j Δ)`.
pub fn sigma_n_last(problem: &TtsaProblem, schedule: &StepSchedule, source: &Mat, n: u64) -> Mat {
    sigma_n_path(problem, schedule, source, &[n]).pop().expect("one entry")
}

/// `Σ_n` at every `n` in the increasing list `at`, from a single pass.
pub fn sigma_n_path(problem: &TtsaProblem, schedule: &StepSchedule, source: &Mat, at: &[u64]) -> Vec<Mat> {
    let delta = problem.delta();
    let b0 = schedule.beta(0);
    let mut sigma = source.scale(b0 * b0);
    let mut out = Vec::with_capacity(at.len());
    let mut k = 0u64;
    for &n in at {
        assert!(n >= k, "sigma_n_path: checkpoints must increase");
        while k < n {
            k += 1;
            sigma = push(&sigma, &delta, source, schedule.beta(k));
        }
        out.push(sigma.clone());
    }
    out
}

/// Solves `Δ S + S Δ^T = source`.
pub fn sigma_limit_last(problem: &TtsaProblem, source: &Mat) -> Result<Mat> {
    lyapunov_limit(&problem.delta(), source)
}

fn lyapunov_limit(delta: &Mat, source: &Mat) -> Result<Mat> {
    let h = eig_check_hurwitz(delta);
    if !h.stable {
        return Err(Error::NotHurwitz {
            what: "delta".into(),
            min_real_part: h.min_real_part,
        });
    }
    Ok(solve_sylvester_transposed(&delta.transpose(), source)?.symmetrize())
}

/// `‖Δ S + S Δ^T − source‖_∞` (entrywise max).
pub fn lyapunov_residual(delta: &Mat, s: &Mat, source: &Mat) -> f64 {
    let lhs = delta.matmul(s).expect("shape").add(&s.matmul(&delta.transpose()).expect("shape")).expect("shape");
    lhs.sub(source).expect("shape").max_abs()
}

/// The Lyapunov limit with `Σ_∞^mark` as the source.
pub fn markov_sigma_limit_last(problem: &TtsaProblem, schedule: &StepSchedule, oracle: &MarkovOracle) -> Result<Mat> {
    if schedule.b_exp >= 1.0 {
        return Err(Error::InvalidSchedule("the last-iterate limit needs b < 1".into()));
    }
    sigma_limit_last(problem, &markov_asymptotic_covariance(oracle, problem)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapEntry {
    pub n: u64,
    /// `‖β_n^{-1} Σ_n − Σ_∞‖` in operator norm.
    pub gap: f64,
    pub lambda_min: f64,
}

/// A closed-form candidate for `lim β_n^{-1} Σ_n` and its distance to the
/// extrapolated finite-sum limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitCandidate {
    pub name: String,
    pub value: Option<Mat>,
    pub distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceReport {
    pub sigma_eps: Mat,
    pub sigma_markov: Option<Mat>,
    pub n_max: u64,
    pub sigma_n_last: Mat,
    pub sigma_limit_last: Mat,
    pub lyapunov_residual: f64,
    pub convergence_gaps: Vec<GapEntry>,
    pub gap_slope: f64,
    pub gap_slope_r2: f64,
    /// `λ_min(Σ_∞)`
    pub lambda_min: f64,
    /// Smallest `n^b` on the grid from which `λ_min(β_n^{-1}Σ_n) ≥ λ_min(Σ_∞)/2`
    /// holds at every later grid point.
    pub lambda_min_threshold: Option<f64>,
    /// Richardson extrapolation of `β_n^{-1}Σ_n` from the last two grid points.
    pub extrapolated_limit: Mat,
    pub candidates: Vec<LimitCandidate>,
}

/// Builds the covariance report for a geometric grid `n_grid` (increasing).
/// `sigma_markov` takes precedence as the source when present.
pub fn covariance_report(
    problem: &TtsaProblem,
    oracle: &NoiseOracle,
    schedule: &StepSchedule,
    n_grid: &[u64],
    strict: bool,
) -> Result<CovarianceReport> {
    if n_grid.is_empty() {
        return Err(Error::InvalidArgument("empty n grid".into()));
    }
    if n_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("n grid must be strictly increasing".into()));
    }
    let sigma_eps = sigma_eps(problem, oracle, strict)?;
    let sigma_markov = match oracle.as_markov() {
        Some(m) => Some(markov_asymptotic_covariance(m, problem)?),
        None => None,
    };
    let source = sigma_markov.clone().unwrap_or_else(|| sigma_eps.clone());
    let delta = problem.delta();
    let limit = lyapunov_limit(&delta, &source)?;
    let residual = lyapunov_residual(&delta, &limit, &source);
    let lambda_min = linalg::lambda_min(&limit)?;

    let path = sigma_n_path(problem, schedule, &source, n_grid);
    let normalized: Vec<Mat> = n_grid
        .iter()
        .zip(&path)
        .map(|(&n, s)| s.scale(1.0 / schedule.beta(n)))
        .collect();
    let mut gaps = Vec::with_capacity(n_grid.len());
    for (&n, x) in n_grid.iter().zip(&normalized) {
        gaps.push(GapEntry {
            n,
            gap: x.sub(&limit)?.op_norm(),
            lambda_min: linalg::lambda_min(x)?,
        });
    }
    let fit_pts: Vec<(f64, f64)> = gaps.iter().filter(|g| g.gap > 0.0).map(|g| (g.n as f64, g.gap)).collect();
    let (gap_slope, gap_slope_r2) = if fit_pts.len() >= 2 {
        let (x, y): (Vec<f64>, Vec<f64>) = fit_pts.into_iter().unzip();
        let f = loglog_fit(&x, &y);
        (f.slope, f.r2)
    } else {
        (0.0, 1.0)
    };
    let half = lambda_min / 2.0;
    let lambda_min_threshold = {
        let first_bad = gaps.iter().rposition(|g| g.lambda_min < half);
        let start = first_bad.map_or(0, |i| i + 1);
        gaps.get(start).map(|g| (g.n as f64).powf(schedule.b_exp))
    };

    let m = normalized.len();
    let extrapolated_limit = if m >= 2 {
        // error ∝ n^{-(1-b)} when the step-size drift dominates
        let r = (n_grid[m - 1] as f64 / n_grid[m - 2] as f64).powf(-(1.0 - schedule.b_exp));
        normalized[m - 1]
            .sub(&normalized[m - 2].scale(r))?
            .scale(1.0 / (1.0 - r))
    } else {
        normalized[0].clone()
    };
    let b0 = schedule.c0_beta;
    let mut candidates = vec![LimitCandidate {
        name: "lyapunov: delta*S + S*delta^T = source".into(),
        distance: Some(limit.sub(&extrapolated_limit)?.op_norm()),
        value: Some(limit.clone()),
    }];
    // S = β0(ΔS + SΔ^T − source)  ⇔  (Δ − I/(2β0))S + S(Δ − I/(2β0))^T = source
    let shifted = delta.sub(&Mat::identity(delta.rows()).scale(0.5 / b0))?;
    let alt = solve_sylvester_transposed(&shifted.transpose(), &source).ok().map(|s| s.symmetrize());
    candidates.push(LimitCandidate {
        name: "beta0 display: S = c0_beta*(delta*S + S*delta^T - source)".into(),
        distance: alt
            .as_ref()
            .and_then(|s| s.sub(&extrapolated_limit).ok())
            .map(|d| d.op_norm()),
        value: alt,
    });

    Ok(CovarianceReport {
        sigma_eps,
        sigma_markov,
        n_max: *n_grid.last().expect("nonempty"),
        sigma_n_last: path.last().expect("nonempty").clone(),
        sigma_limit_last: limit,
        lyapunov_residual: residual,
        convergence_gaps: gaps,
        gap_slope,
        gap_slope_r2,
        lambda_min,
        lambda_min_threshold,
        extrapolated_limit,
        candidates,
    })
}
