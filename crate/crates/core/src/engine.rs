//! The coupled recursion, its decoupled form, and the deterministic matrix
//! products used by the error representations.
//!
//! Index conventions: `θ_0, w_0` are the initial values; step `k` uses
//! `β_k, γ_k` and the observation at `X_{k+1}` and produces `θ_{k+1}, w_{k+1}`.
//! The Polyak–Ruppert mean after `n` steps is `n^{-1} Σ_{k=1}^n θ_k`.

use std::io::{self, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Lu, Mat};
use crate::model::{solve_exact, NoiseOracle, NoiseSample, Observation, OracleCursor, Solution, TtsaProblem};
use crate::schedule::{StepSchedule, StepTable};

/// Iterates whose sup-norm exceeds this abort the run.
pub const DIVERGENCE_BOUND: f64 = 1e12;
/// Condition number of `I − β_k U_k` above which the decoupling aborts.
pub const DECOUPLING_MAX_COND: f64 = 1e10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterateState {
    pub k: u64,
    pub theta: Vec<f64>,
    pub w: Vec<f64>,
    /// `k^{-1} Σ_{j=1}^k θ_j` (initial value when `k = 0`).
    pub theta_bar: Vec<f64>,
    pub w_bar: Vec<f64>,
    /// `θ_k − θ*`
    pub theta_tilde: Vec<f64>,
    /// `w_k − w* + D_{k−1}(θ_k − θ*)`; present only when the decoupling
    /// matrices are tracked.
    pub w_tilde: Option<Vec<f64>>,
    pub x_state: usize,
}

/// Matrices of the change of variables, for the current step `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecouplingState {
    pub k: u64,
    /// `L_k`
    pub l_k: Mat,
    /// `U_k = Δ − A12 L_k`
    pub u_k: Mat,
    /// `D_k = L_{k+1} + A22^{-1} A21`
    pub d_k: Mat,
    /// `B11^k = U_k`
    pub b11_k: Mat,
    /// `B22^k = (β_k/γ_k) D_k A12 + A22`
    pub b22_k: Mat,
    /// `D_{k−1}` (`A22^{-1}A21` at `k = 0`)
    pub d_prev: Mat,
    l_next: Mat,
    ready: bool,
}

impl DecouplingState {
    /// `L_0 = 0`.
    pub fn new(p: &TtsaProblem) -> Self {
        let (dt, dw) = (p.d_theta(), p.d_w());
        Self {
            k: 0,
            l_k: Mat::zeros(dw, dt),
            u_k: p.delta().clone(),
            d_k: p.a22inv_a21().clone(),
            b11_k: p.delta().clone(),
            b22_k: p.a22().clone(),
            d_prev: p.a22inv_a21().clone(),
            l_next: Mat::zeros(dw, dt),
            ready: false,
        }
    }

    /// Computes `U_k, B11^k, L_{k+1}, D_k, B22^k` from `L_k`.
    pub fn prepare(&mut self, p: &TtsaProblem, beta: f64, gamma: f64) -> Result<()> {
        let dt = p.d_theta();
        self.u_k = p.delta().sub(&p.a12().matmul(&self.l_k)?)?;
        self.b11_k = self.u_k.clone();
        let mut x = self.l_k.clone();
        x.axpy(-gamma, &p.a22().matmul(&self.l_k)?)?;
        x.axpy(beta, &p.a22inv_a21().matmul(&self.u_k)?)?;
        let mut m = Mat::identity(dt);
        m.axpy(-beta, &self.u_k)?;
        let lu = Lu::new(&m)?;
        if lu.is_singular() {
            return Err(Error::IllConditioned {
                k: self.k,
                cond: f64::INFINITY,
            });
        }
        let inv = lu.inverse()?;
        let cond = m.norm_1() * inv.norm_1();
        if !(cond <= DECOUPLING_MAX_COND) {
            return Err(Error::IllConditioned { k: self.k, cond });
        }
        self.l_next = x.matmul(&inv)?;
        self.d_k = self.l_next.add(p.a22inv_a21())?;
        let mut b22 = self.d_k.matmul(p.a12())?.scale(beta / gamma);
        b22.axpy(1.0, p.a22())?;
        self.b22_k = b22;
        self.ready = true;
        Ok(())
    }

    /// Moves to step `k + 1`.
    pub fn shift(&mut self) {
        debug_assert!(self.ready);
        std::mem::swap(&mut self.l_k, &mut self.l_next);
        self.d_prev = self.d_k.clone();
        self.k += 1;
        self.ready = false;
    }
}

/// Decoupled iterates `(θ̃_k, w̃_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TildeState {
    pub theta_tilde: Vec<f64>,
    pub w_tilde: Vec<f64>,
}

/// One step of the decoupled recursion driven by the noise `(V_{k+1}, W_{k+1})`:
///
/// `θ̃_{k+1} = (I − β_k B11^k) θ̃_k − β_k A12 w̃_k + β_k V_{k+1}`
/// `w̃_{k+1} = (I − γ_k B22^k) w̃_k + β_k D_k V_{k+1} + γ_k W_{k+1}`
///
/// `dec` must already be prepared for step `k`.
pub fn step_decoupled(
    t: &TildeState,
    p: &TtsaProblem,
    dec: &DecouplingState,
    v: &[f64],
    w_noise: &[f64],
    beta: f64,
    gamma: f64,
) -> Result<TildeState> {
    let b11t = dec.b11_k.mat_vec(&t.theta_tilde)?;
    let a12w = p.a12().mat_vec(&t.w_tilde)?;
    let theta_tilde: Vec<f64> = (0..t.theta_tilde.len())
        .map(|i| t.theta_tilde[i] - beta * b11t[i] - beta * a12w[i] + beta * v[i])
        .collect();
    let b22w = dec.b22_k.mat_vec(&t.w_tilde)?;
    let dv = dec.d_k.mat_vec(v)?;
    let w_tilde: Vec<f64> = (0..t.w_tilde.len())
        .map(|i| t.w_tilde[i] - gamma * b22w[i] + beta * dv[i] + gamma * w_noise[i])
        .collect();
    let norm = linalg::norm_inf_vec(&theta_tilde).max(linalg::norm_inf_vec(&w_tilde));
    if !(norm <= DIVERGENCE_BOUND) {
        return Err(Error::Diverged {
            k: dec.k + 1,
            norm,
        });
    }
    Ok(TildeState {
        theta_tilde,
        w_tilde,
    })
}

/// Compensated running sum.
#[derive(Debug, Clone)]
struct KahanVec {
    sum: Vec<f64>,
    comp: Vec<f64>,
}

impl KahanVec {
    fn new(d: usize) -> Self {
        Self {
            sum: vec![0.0; d],
            comp: vec![0.0; d],
        }
    }

    #[inline]
    fn add(&mut self, x: &[f64]) {
        for ((s, c), &v) in self.sum.iter_mut().zip(&mut self.comp).zip(x) {
            let y = v - *c;
            let t = *s + y;
            *c = (t - *s) - y;
            *s = t;
        }
    }

    fn mean(&self, n: u64) -> Vec<f64> {
        self.sum.iter().map(|s| s / n as f64).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    /// Steps `k` at which to record the state; must be strictly increasing.
    pub checkpoints: Vec<u64>,
    pub keep_noise_log: bool,
    /// Track `L_k, D_k, B11^k, B22^k` and run the decoupled recursion
    /// alongside the coupled one.
    pub track_decoupling: bool,
    /// Evaluate the per-iterate error identity at every step.
    pub check_identity: bool,
    /// Defaults to zero.
    pub theta0: Option<Vec<f64>>,
    pub w0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub k: u64,
    pub theta: Vec<f64>,
    pub w: Vec<f64>,
    pub theta_bar: Vec<f64>,
    pub w_bar: Vec<f64>,
    pub theta_tilde: Vec<f64>,
    pub w_tilde: Option<Vec<f64>>,
    /// Largest identity residual seen up to `k` (0 when not checked).
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub checkpoints: Vec<Checkpoint>,
    pub final_state: IterateState,
    /// Max relative residual of the per-iterate identity
    /// `Δθ̃_k = (θ_k − θ_{k+1})/β_k − A12A22^{-1}(w_k − w_{k+1})/γ_k + (V − A12A22^{-1}W)`.
    pub identity_residual_max: f64,
    /// Max relative gap between decoupled iterates and the tilde variables
    /// reconstructed from the coupled run.
    pub decoupling_residual_max: f64,
    /// `max_k ‖L_k‖ γ_k / β_k`.
    pub l_scaled_max: f64,
    /// `noise_log[k]` holds the noise of step `k`.
    pub noise_log: Option<Vec<NoiseSample>>,
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn rel_gap(a: &[f64], b: &[f64]) -> f64 {
    let scale = linalg::norm2(a).max(linalg::norm2(b)).max(1e-300);
    linalg::norm2(&sub(a, b)) / scale
}

/// `b_i(x) − A_i1(x)θ − A_i2(x)w` for both blocks.
#[inline]
fn drifts(obs: &Observation, theta: &[f64], w: &[f64], d_theta: &mut [f64], d_w: &mut [f64]) {
    for (i, d) in d_theta.iter_mut().enumerate() {
        *d = obs.b1[i] - linalg::dot(obs.a11.row(i), theta) - linalg::dot(obs.a12.row(i), w);
    }
    for (i, d) in d_w.iter_mut().enumerate() {
        *d = obs.b2[i] - linalg::dot(obs.a21.row(i), theta) - linalg::dot(obs.a22.row(i), w);
    }
}

/// Coupled recursion with optional decoupled shadow.
pub struct Engine<'a> {
    problem: &'a TtsaProblem,
    sol: Solution,
    schedule: StepSchedule,
    table: Option<&'a StepTable>,
    cursor: OracleCursor<'a>,
    k: u64,
    theta: Vec<f64>,
    w: Vec<f64>,
    d_theta: Vec<f64>,
    d_w: Vec<f64>,
    sum_theta: KahanVec,
    sum_w: KahanVec,
    dec: Option<DecouplingState>,
    tilde: Option<TildeState>,
    identity_residual_max: f64,
    decoupling_residual_max: f64,
    l_scaled_max: f64,
}

impl<'a> Engine<'a> {
    pub fn new<R: Rng + ?Sized>(
        problem: &'a TtsaProblem,
        oracle: &'a NoiseOracle,
        schedule: StepSchedule,
        theta0: Option<&[f64]>,
        w0: Option<&[f64]>,
        track_decoupling: bool,
        rng: &mut R,
    ) -> Result<Self> {
        schedule.require_finite_steps()?;
        let sol = solve_exact(problem)?;
        let (dt, dw) = (problem.d_theta(), problem.d_w());
        let theta = theta0.map_or_else(|| vec![0.0; dt], <[f64]>::to_vec);
        let w = w0.map_or_else(|| vec![0.0; dw], <[f64]>::to_vec);
        if theta.len() != dt || w.len() != dw {
            return Err(Error::Dimension {
                what: "initial iterate".into(),
                expected: if theta.len() != dt { dt } else { dw },
                got: if theta.len() != dt { theta.len() } else { w.len() },
            });
        }
        let cursor = OracleCursor::new(oracle, rng);
        let (dec, tilde) = if track_decoupling {
            let dec = DecouplingState::new(problem);
            let tt = sub(&theta, &sol.theta_star);
            let mut wt = sub(&w, &sol.w_star);
            let corr = dec.d_prev.mat_vec(&tt)?;
            wt.iter_mut().zip(corr).for_each(|(a, b)| *a += b);
            (
                Some(dec),
                Some(TildeState {
                    theta_tilde: tt,
                    w_tilde: wt,
                }),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            problem,
            sol,
            schedule,
            table: None,
            cursor,
            k: 0,
            theta,
            w,
            d_theta: vec![0.0; dt],
            d_w: vec![0.0; dw],
            sum_theta: KahanVec::new(dt),
            sum_w: KahanVec::new(dw),
            dec,
            tilde,
            identity_residual_max: 0.0,
            decoupling_residual_max: 0.0,
            l_scaled_max: 0.0,
        })
    }

    /// Uses precomputed steps; the table's schedule must match.
    pub fn with_table(mut self, table: &'a StepTable) -> Self {
        debug_assert_eq!(table.schedule, self.schedule);
        self.table = Some(table);
        self
    }

    pub fn k(&self) -> u64 {
        self.k
    }
    pub fn theta(&self) -> &[f64] {
        &self.theta
    }
    pub fn w(&self) -> &[f64] {
        &self.w
    }
    pub fn solution(&self) -> &Solution {
        &self.sol
    }
    pub fn decoupling(&self) -> Option<&DecouplingState> {
        self.dec.as_ref()
    }
    pub fn tilde(&self) -> Option<&TildeState> {
        self.tilde.as_ref()
    }

    pub fn theta_bar(&self) -> Vec<f64> {
        if self.k == 0 {
            self.theta.clone()
        } else {
            self.sum_theta.mean(self.k)
        }
    }

    pub fn w_bar(&self) -> Vec<f64> {
        if self.k == 0 {
            self.w.clone()
        } else {
            self.sum_w.mean(self.k)
        }
    }

    /// `w_k − w* + D_{k−1} θ̃_k`, when the decoupling is tracked.
    pub fn w_tilde_from_definition(&self) -> Option<Vec<f64>> {
        let dec = self.dec.as_ref()?;
        let tt = sub(&self.theta, &self.sol.theta_star);
        let mut wt = sub(&self.w, &self.sol.w_star);
        let corr = dec.d_prev.mat_vec(&tt).ok()?;
        wt.iter_mut().zip(corr).for_each(|(a, b)| *a += b);
        Some(wt)
    }

    pub fn snapshot(&self) -> IterateState {
        IterateState {
            k: self.k,
            theta: self.theta.clone(),
            w: self.w.clone(),
            theta_bar: self.theta_bar(),
            w_bar: self.w_bar(),
            theta_tilde: sub(&self.theta, &self.sol.theta_star),
            w_tilde: self.w_tilde_from_definition(),
            x_state: self.cursor.state(),
        }
    }

    /// Advances one step. Returns the step's noise terms when `want_noise`
    /// is set (or when the identity check or the decoupling needs them).
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        want_noise: bool,
        check_identity: bool,
    ) -> Result<Option<NoiseSample>> {
        let k = self.k;
        let (beta, gamma) = match self.table {
            Some(t) => t.steps(k),
            None => (self.schedule.beta(k), self.schedule.gamma(k)),
        };
        let prev_state = self.cursor.state();
        let need_noise = want_noise || check_identity || self.dec.is_some();
        let (state, obs) = self.cursor.advance(rng);
        let noise = if need_noise {
            Some(NoiseSample::compute(
                self.problem,
                &self.sol,
                obs,
                prev_state,
                state,
                &self.theta,
                &self.w,
            ))
        } else {
            None
        };
        drifts(obs, &self.theta, &self.w, &mut self.d_theta, &mut self.d_w);
        let theta_old = if check_identity {
            Some((self.theta.clone(), self.w.clone()))
        } else {
            None
        };
        let mut norm = 0.0_f64;
        for (t, d) in self.theta.iter_mut().zip(&self.d_theta) {
            *t += beta * d;
            norm = norm.max(t.abs());
        }
        for (x, d) in self.w.iter_mut().zip(&self.d_w) {
            *x += gamma * d;
            norm = norm.max(x.abs());
        }
        if !(norm <= DIVERGENCE_BOUND) {
            return Err(Error::Diverged { k: k + 1, norm });
        }
        self.sum_theta.add(&self.theta);
        self.sum_w.add(&self.w);

        if let (Some((t_old, w_old)), Some(nz)) = (theta_old, noise.as_ref()) {
            let p = self.problem;
            let lhs = p.delta().mat_vec(&sub(&t_old, &self.sol.theta_star))?;
            let t1: Vec<f64> = sub(&t_old, &self.theta).iter().map(|x| x / beta).collect();
            let dw: Vec<f64> = sub(&w_old, &self.w).iter().map(|x| x / gamma).collect();
            let t2 = p.a12_a22inv().mat_vec(&dw)?;
            let t3 = sub(&nz.v, &p.a12_a22inv().mat_vec(&nz.w_noise)?);
            let rhs: Vec<f64> = (0..lhs.len()).map(|i| t1[i] - t2[i] + t3[i]).collect();
            let scale = [
                linalg::norm2(&lhs),
                linalg::norm2(&t1),
                linalg::norm2(&t2),
                linalg::norm2(&t3),
            ]
            .into_iter()
            .fold(1e-300, f64::max);
            let r = linalg::norm2(&sub(&lhs, &rhs)) / scale;
            self.identity_residual_max = self.identity_residual_max.max(r);
        }

        if let Some(dec) = self.dec.as_mut() {
            dec.prepare(self.problem, beta, gamma)?;
            let nz = noise.as_ref().expect("noise computed when decoupling");
            let next = step_decoupled(
                self.tilde.as_ref().expect("tilde with decoupling"),
                self.problem,
                dec,
                &nz.v,
                &nz.w_noise,
                beta,
                gamma,
            )?;
            self.l_scaled_max = self
                .l_scaled_max
                .max(dec.l_k.op_norm() * gamma / beta);
            dec.shift();
            self.tilde = Some(next);
        }
        self.k += 1;
        if self.dec.is_some() {
            let tt = sub(&self.theta, &self.sol.theta_star);
            let wt = self.w_tilde_from_definition().expect("tracked");
            let sh = self.tilde.as_ref().expect("tracked");
            let g = rel_gap(&tt, &sh.theta_tilde).max(rel_gap(&wt, &sh.w_tilde));
            self.decoupling_residual_max = self.decoupling_residual_max.max(g);
        }
        Ok(if want_noise { noise } else { None })
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            k: self.k,
            theta: self.theta.clone(),
            w: self.w.clone(),
            theta_bar: self.theta_bar(),
            w_bar: self.w_bar(),
            theta_tilde: sub(&self.theta, &self.sol.theta_star),
            w_tilde: self.w_tilde_from_definition(),
            residual: self.identity_residual_max,
        }
    }
}

/// Runs `n` steps from the configured initial values.
pub fn run<R: Rng + ?Sized>(
    problem: &TtsaProblem,
    oracle: &NoiseOracle,
    schedule: &StepSchedule,
    n: u64,
    opts: &RunOptions,
    rng: &mut R,
) -> Result<TrajectoryRecord> {
    if opts.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "checkpoints must be strictly increasing".into(),
        ));
    }
    let mut eng = Engine::new(
        problem,
        oracle,
        *schedule,
        opts.theta0.as_deref(),
        opts.w0.as_deref(),
        opts.track_decoupling,
        rng,
    )?;
    let mut cps = opts.checkpoints.iter().copied().filter(|&c| c <= n).peekable();
    let mut checkpoints = Vec::new();
    let mut log = opts.keep_noise_log.then(|| Vec::with_capacity(n as usize));
    if cps.peek() == Some(&0) {
        checkpoints.push(eng.checkpoint());
        cps.next();
    }
    for _ in 0..n {
        let nz = eng.step(rng, opts.keep_noise_log, opts.check_identity)?;
        if let (Some(l), Some(nz)) = (log.as_mut(), nz) {
            l.push(nz);
        }
        if cps.peek() == Some(&eng.k()) {
            checkpoints.push(eng.checkpoint());
            cps.next();
        }
    }
    Ok(TrajectoryRecord {
        checkpoints,
        final_state: eng.snapshot(),
        identity_residual_max: eng.identity_residual_max,
        decoupling_residual_max: eng.decoupling_residual_max,
        l_scaled_max: eng.l_scaled_max,
        noise_log: log,
    })
}

/// Replays the decoupled recursion from a logged noise sequence, starting at
/// the tilde variables of `(θ_0, w_0)`. Returns `(θ̃_k, w̃_k)` for `k = 0..=len`.
pub fn replay_decoupled(
    problem: &TtsaProblem,
    schedule: &StepSchedule,
    noise_log: &[NoiseSample],
    theta0: &[f64],
    w0: &[f64],
) -> Result<Vec<TildeState>> {
    schedule.require_finite_steps()?;
    let sol = solve_exact(problem)?;
    let mut dec = DecouplingState::new(problem);
    let tt = sub(theta0, &sol.theta_star);
    let mut wt = sub(w0, &sol.w_star);
    let corr = dec.d_prev.mat_vec(&tt)?;
    wt.iter_mut().zip(corr).for_each(|(a, b)| *a += b);
    let mut out = vec![TildeState {
        theta_tilde: tt,
        w_tilde: wt,
    }];
    for (k, nz) in noise_log.iter().enumerate() {
        let k = k as u64;
        let (beta, gamma) = (schedule.beta(k), schedule.gamma(k));
        dec.prepare(problem, beta, gamma)?;
        let next = step_decoupled(out.last().expect("nonempty"), problem, &dec, &nz.v, &nz.w_noise, beta, gamma)?;
        dec.shift();
        out.push(next);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Deterministic products

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixProducts {
    /// `G^(1)_{m:k} = Π_{i=m}^k (I − β_i Δ)`
    pub g1: Mat,
    /// `G^(2)_{m:k} = Π_{i=m}^k (I − γ_i A22)`
    pub g2: Mat,
    /// `P^(1)_{m:k} = Π_{i=m}^k (1 − β_i a_Δ / 2)`
    pub p1: f64,
    /// `P^(2)_{m:k} = Π_{i=m}^k (1 − γ_i a_22 / 2)`
    pub p2: f64,
    /// `‖G^(1)‖ ≤ √κ_Δ P^(1)`
    pub bound1_holds: bool,
    /// `‖G^(2)‖ ≤ √κ_22 P^(2)`
    pub bound2_holds: bool,
}

/// Products over `i = m..=k` (later factors on the left). An empty range
/// (`m > k`) gives the identity and 1.
pub fn matrix_products(
    schedule: &StepSchedule,
    problem: &TtsaProblem,
    m: u64,
    k: u64,
) -> Result<MatrixProducts> {
    let cert_d = linalg::solve_lyapunov(problem.delta())?;
    let cert22 = linalg::solve_lyapunov(problem.a22())?;
    let (dt, dw) = (problem.d_theta(), problem.d_w());
    let mut g1 = Mat::identity(dt);
    let mut g2 = Mat::identity(dw);
    let (mut p1, mut p2) = (1.0, 1.0);
    let mut scratch1 = Mat::zeros(dt, dt);
    let mut scratch2 = Mat::zeros(dw, dw);
    if m <= k {
        for i in m..=k {
            let (b, g) = (schedule.beta(i), schedule.gamma(i));
            let mut f1 = Mat::identity(dt);
            f1.axpy(-b, problem.delta())?;
            linalg::matmul_into(&f1, &g1, &mut scratch1);
            std::mem::swap(&mut g1, &mut scratch1);
            let mut f2 = Mat::identity(dw);
            f2.axpy(-g, problem.a22())?;
            linalg::matmul_into(&f2, &g2, &mut scratch2);
            std::mem::swap(&mut g2, &mut scratch2);
            p1 *= 1.0 - 0.5 * b * cert_d.contraction_rate;
            p2 *= 1.0 - 0.5 * g * cert22.contraction_rate;
        }
    }
    let tol = 1e-12;
    let bound1_holds = g1.op_norm() <= cert_d.kappa().sqrt() * p1 * (1.0 + tol) + tol;
    let bound2_holds = g2.op_norm() <= cert22.kappa().sqrt() * p2 * (1.0 + tol) + tol;
    Ok(MatrixProducts {
        g1,
        g2,
        p1,
        p2,
        bound1_holds,
        bound2_holds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LastIterateDecomposition {
    /// `Σ_{j=0}^n β_j G^(1)_{j+1:n} ψ_{j+1}`
    pub statistic: Vec<f64>,
    /// `θ̃_{n+1}`
    pub theta_tilde: Vec<f64>,
    /// `θ̃_{n+1} − statistic`
    pub residual: Vec<f64>,
}

/// Linear part of the last iterate, `θ̃_{n+1} ≈ Σ_{j=0}^n β_j G^(1)_{j+1:n} ψ_{j+1}`
/// with `ψ = ε_V − A12A22^{-1}ε_W`, and the remainder. Needs the noise of
/// steps `0..=n` and `θ̃_{n+1}`, taken from the log or the final state.
pub fn leading_statistic_last(
    record: &TrajectoryRecord,
    problem: &TtsaProblem,
    schedule: &StepSchedule,
    n: u64,
) -> Result<LastIterateDecomposition> {
    let log = record.noise_log.as_ref().ok_or(Error::MissingNoiseLog)?;
    let n = n as usize;
    if log.len() < n + 1 {
        return Err(Error::MissingNoiseLog);
    }
    let theta_tilde = if log.len() > n + 1 {
        log[n + 1].theta_err.clone()
    } else if record.final_state.k as usize == n + 1 {
        record.final_state.theta_tilde.clone()
    } else {
        return Err(Error::MissingNoiseLog);
    };
    let dt = problem.d_theta();
    let mut s = vec![0.0; dt];
    for (j, nz) in log.iter().take(n + 1).enumerate() {
        let b = schedule.beta(j as u64);
        let ds = problem.delta().mat_vec(&s)?;
        let psi = nz.psi(problem);
        for i in 0..dt {
            s[i] += -b * ds[i] + b * psi[i];
        }
    }
    let residual = sub(&theta_tilde, &s);
    Ok(LastIterateDecomposition {
        statistic: s,
        theta_tilde,
        residual,
    })
}

/// Writes checkpoints as CSV: `k,theta_*,w_*,theta_bar_*,w_bar_*,residual`,
/// preceded by optional `#` comment lines.
pub fn write_checkpoints_csv<W: Write>(
    record: &TrajectoryRecord,
    comments: &[String],
    out: &mut W,
) -> io::Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    let dt = record.final_state.theta.len();
    let dw = record.final_state.w.len();
    let mut header = vec!["k".to_string()];
    for (prefix, d) in [("theta", dt), ("w", dw), ("theta_bar", dt), ("w_bar", dw)] {
        header.extend((0..d).map(|i| format!("{prefix}_{i}")));
    }
    header.push("residual".into());
    writeln!(out, "{}", header.join(","))?;
    for cp in &record.checkpoints {
        let mut row = vec![cp.k.to_string()];
        for v in [&cp.theta, &cp.w, &cp.theta_bar, &cp.w_bar] {
            row.extend(v.iter().map(|x| format!("{x:e}")));
        }
        row.push(format!("{:e}", cp.residual));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ObservationSpec, PerturbationLaw};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Mat {
        Mat::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn two_by_two() -> TtsaProblem {
        TtsaProblem::new(
            m(&[&[1.2, 0.1], &[-0.2, 0.9]]),
            m(&[&[0.3, -0.1], &[0.2, 0.4]]),
            m(&[&[0.5, 0.1], &[0.0, -0.3]]),
            m(&[&[1.5, 0.2], &[-0.1, 1.1]]),
            vec![1.0, -0.5],
            vec![0.3, 0.7],
        )
        .unwrap()
    }

    fn full_scales(p: &TtsaProblem, s: f64) -> ObservationSpec {
        let (dt, dw) = (p.d_theta(), p.d_w());
        let f = |r, c| Some(Mat::new(r, c, vec![s; r * c]).unwrap());
        ObservationSpec {
            a11: f(dt, dt),
            a12: f(dt, dw),
            a21: f(dw, dt),
            a22: f(dw, dw),
            b1: Some(vec![s; dt]),
            b2: Some(vec![s; dw]),
        }
    }

    #[test]
    fn fixed_point_is_stationary() {
        let p = two_by_two();
        let sol = solve_exact(&p).unwrap();
        let o = NoiseOracle::deterministic(&p);
        let s = StepSchedule::new(0.6, 0.8, 0.5, 0.2, 5).unwrap();
        let opts = RunOptions {
            theta0: Some(sol.theta_star.clone()),
            w0: Some(sol.w_star.clone()),
            ..Default::default()
        };
        let r = run(&p, &o, &s, 1000, &opts, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (a, b) in r.final_state.theta.iter().zip(&sol.theta_star) {
            assert!((a - b).abs() < 1e-13);
        }
        for (a, b) in r.final_state.w.iter().zip(&sol.w_star) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn scalar_decoupled_product() {
        let p = TtsaProblem::scalar(1.0, 0.0, 0.0, 1.0, 0.0, 0.0).unwrap();
        let o = NoiseOracle::deterministic(&p);
        let s = StepSchedule::new(0.6, 0.8, 0.5, 0.7, 3).unwrap();
        let opts = RunOptions {
            theta0: Some(vec![1.0]),
            checkpoints: (0..=50).collect(),
            ..Default::default()
        };
        let r = run(&p, &o, &s, 50, &opts, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut prod = 1.0;
        for (k, cp) in r.checkpoints.iter().enumerate() {
            assert_relative_eq!(cp.theta[0], prod, epsilon = 1e-15);
            prod *= 1.0 - s.beta(k as u64);
        }
    }

    #[test]
    fn identity_and_decoupling_hold() {
        let p = two_by_two();
        let o = NoiseOracle::perturbation(
            &p,
            p.mean_observation(),
            &full_scales(&p, 0.3),
            PerturbationLaw::Uniform,
        )
        .unwrap();
        let s = StepSchedule::new(0.55, 0.85, 0.6, 0.3, 10).unwrap();
        let opts = RunOptions {
            track_decoupling: true,
            check_identity: true,
            keep_noise_log: true,
            ..Default::default()
        };
        let r = run(&p, &o, &s, 10_000, &opts, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert!(r.identity_residual_max < 1e-9, "{}", r.identity_residual_max);
        assert!(r.decoupling_residual_max < 1e-8, "{}", r.decoupling_residual_max);
        let rep = replay_decoupled(&p, &s, r.noise_log.as_ref().unwrap(), &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        let last = rep.last().unwrap();
        let fs = &r.final_state;
        assert!(rel_gap(&last.theta_tilde, &fs.theta_tilde) < 1e-8);
        assert!(rel_gap(&last.w_tilde, fs.w_tilde.as_ref().unwrap()) < 1e-8);
    }

    #[test]
    fn a21_zero_keeps_l_zero() {
        let p = TtsaProblem::new(
            m(&[&[1.0, 0.2], &[0.0, 1.0]]),
            m(&[&[0.3, 0.0], &[0.1, 0.4]]),
            Mat::zeros(2, 2),
            Mat::identity(2),
            vec![0.0; 2],
            vec![0.0; 2],
        )
        .unwrap();
        let mut dec = DecouplingState::new(&p);
        let s = StepSchedule::new(0.6, 0.8, 0.5, 0.2, 5).unwrap();
        for k in 0..100 {
            dec.prepare(&p, s.beta(k), s.gamma(k)).unwrap();
            assert_eq!(dec.l_next.max_abs(), 0.0);
            assert_eq!(dec.b11_k, *p.delta());
            dec.shift();
        }
    }

    #[test]
    fn zero_noise_decoupled_contraction_with_a12_zero() {
        let p = TtsaProblem::new(
            m(&[&[1.0, 0.3], &[0.0, 0.8]]),
            Mat::zeros(2, 1),
            m(&[&[0.4, 0.2]]),
            m(&[&[1.0]]),
            vec![0.0; 2],
            vec![0.0],
        )
        .unwrap();
        let s = StepSchedule::new(0.6, 0.8, 0.5, 0.2, 5).unwrap();
        let mut dec = DecouplingState::new(&p);
        let mut t = TildeState {
            theta_tilde: vec![1.0, -1.0],
            w_tilde: vec![0.0],
        };
        let mut expect = vec![1.0, -1.0];
        for k in 0..200 {
            let (b, g) = (s.beta(k), s.gamma(k));
            dec.prepare(&p, b, g).unwrap();
            t = step_decoupled(&t, &p, &dec, &[0.0, 0.0], &[0.0], b, g).unwrap();
            let mut f = Mat::identity(2);
            f.axpy(-b, &dec.b11_k).unwrap();
            expect = f.mat_vec(&expect).unwrap();
            dec.shift();
            assert_eq!(t.w_tilde, vec![0.0]);
            assert!(rel_gap(&t.theta_tilde, &expect) < 1e-14);
        }
    }

    #[test]
    fn determinism_and_empty_horizon() {
        let p = two_by_two();
        let o = NoiseOracle::perturbation(
            &p,
            p.mean_observation(),
            &full_scales(&p, 0.2),
            PerturbationLaw::Rademacher,
        )
        .unwrap();
        let s = StepSchedule::new(0.6, 0.8, 0.5, 0.2, 5).unwrap();
        let opts = RunOptions {
            checkpoints: vec![0, 10, 100, 500],
            ..Default::default()
        };
        let a = run(&p, &o, &s, 500, &opts, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = run(&p, &o, &s, 500, &opts, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let e = run(&p, &o, &s, 0, &opts, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(e.checkpoints.len(), 1);
        assert_eq!(e.checkpoints[0].k, 0);
        assert_eq!(e.final_state.k, 0);
    }

    #[test]
    fn pr_mean_matches_checkpoints() {
        let p = two_by_two();
        let o = NoiseOracle::perturbation(
            &p,
            p.mean_observation(),
            &full_scales(&p, 0.2),
            PerturbationLaw::Uniform,
        )
        .unwrap();
        let s = StepSchedule::new(0.6, 0.8, 0.5, 0.2, 5).unwrap();
        let n = 2000;
        let opts = RunOptions {
            checkpoints: (1..=n).collect(),
            ..Default::default()
        };
        let r = run(&p, &o, &s, n, &opts, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut acc = [0.0; 2];
        for cp in &r.checkpoints {
            acc[0] += cp.theta[0];
            acc[1] += cp.theta[1];
        }
        for i in 0..2 {
            assert!((acc[i] / n as f64 - r.final_state.theta_bar[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn matrix_products_examples() {
        let p = TtsaProblem::scalar(1.0, 0.0, 0.0, 1.0, 0.0, 0.0).unwrap();
        let s = StepSchedule::new(0.6, 0.8, 0.5, 0.5, 1).unwrap();
        let e = matrix_products(&s, &p, 5, 4).unwrap();
        assert_eq!(e.g1, Mat::identity(1));
        assert_eq!(e.p1, 1.0);
        // β constant 1/2 is the b -> 0 limit; use k0 large with b tiny instead
        let s = StepSchedule::new(1e-12, 1e-12, 0.5, 0.5, 1).unwrap();
        let e = matrix_products(&s, &p, 0, 2).unwrap();
        assert_relative_eq!(e.g1.get(0, 0), 0.125, epsilon = 1e-9);

        let p = two_by_two();
        let s = StepSchedule::new(0.6, 0.8, 0.5, 0.2, 5).unwrap();
        let e = matrix_products(&s, &p, 3, 40).unwrap();
        let mut acc = Mat::identity(2);
        for i in 3..=40 {
            let mut f = Mat::identity(2);
            f.axpy(-s.beta(i), p.delta()).unwrap();
            acc = f.matmul(&acc).unwrap();
        }
        assert!(e.g1.sub(&acc).unwrap().max_abs() < 1e-12);
        assert!(e.bound1_holds && e.bound2_holds);
    }

    #[test]
    fn leading_statistic_collapses_for_additive_noise() {
        let p = TtsaProblem::new(
            m(&[&[1.0, 0.2], &[0.0, 0.7]]),
            Mat::zeros(2, 1),
            m(&[&[0.4, 0.2]]),
            m(&[&[1.0]]),
            vec![0.5, -0.5],
            vec![0.1],
        )
        .unwrap();
        let sol = solve_exact(&p).unwrap();
        let scales = ObservationSpec {
            b1: Some(vec![0.5, 0.3]),
            b2: Some(vec![0.4]),
            ..Default::default()
        };
        let o = NoiseOracle::perturbation(&p, p.mean_observation(), &scales, PerturbationLaw::Uniform)
            .unwrap();
        let s = StepSchedule::new(0.6, 0.8, 0.5, 0.3, 5).unwrap();
        let n = 500;
        let opts = RunOptions {
            keep_noise_log: true,
            theta0: Some(sol.theta_star.clone()),
            ..Default::default()
        };
        let r = run(&p, &o, &s, n + 1, &opts, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let d = leading_statistic_last(&r, &p, &s, n).unwrap();
        assert!(linalg::norm2(&d.residual) <= 1e-12 * (1.0 + linalg::norm2(&d.statistic)));
        assert!(linalg::norm2(&d.statistic) > 0.0);

        // zero noise: statistic vanishes and the residual is θ̃_{n+1}
        let o = NoiseOracle::deterministic(&p);
        let opts = RunOptions {
            keep_noise_log: true,
            theta0: Some(vec![1.0, 1.0]),
            ..Default::default()
        };
        let r = run(&p, &o, &s, n + 1, &opts, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let d = leading_statistic_last(&r, &p, &s, n).unwrap();
        assert!(linalg::norm2(&d.statistic) < 1e-14);
        assert_eq!(d.residual, d.theta_tilde);

        let no_log = RunOptions::default();
        let r = run(&p, &o, &s, n + 1, &no_log, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(matches!(
            leading_statistic_last(&r, &p, &s, n),
            Err(Error::MissingNoiseLog)
        ));
    }

    #[test]
    fn divergence_is_reported() {
        let p = TtsaProblem::scalar(-1.0, 0.0, 0.0, 1.0, 1.0, 0.0).unwrap();
        let o = NoiseOracle::deterministic(&p);
        let s = StepSchedule::new(0.6, 0.8, 0.5, 0.9, 1).unwrap();
        let err = run(&p, &o, &s, 100_000, &RunOptions::default(), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
    }

    #[test]
    fn checkpoint_csv_layout() {
        let p = two_by_two();
        let o = NoiseOracle::deterministic(&p);
        let s = StepSchedule::new(0.6, 0.8, 0.5, 0.2, 5).unwrap();
        let opts = RunOptions {
            checkpoints: vec![1, 2],
            ..Default::default()
        };
        let r = run(&p, &o, &s, 2, &opts, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut buf = Vec::new();
        write_checkpoints_csv(&r, &["seed=1".into()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# seed=1"));
        assert_eq!(
            lines.next(),
            Some("k,theta_0,theta_1,w_0,w_1,theta_bar_0,theta_bar_1,w_bar_0,w_bar_1,residual")
        );
        assert_eq!(lines.count(), 2);
    }
}
