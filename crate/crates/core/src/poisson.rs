//! Poisson equation for finite chains and the martingale/remainder split of
//! Markov noise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, eigenvalues, Lu, Mat};
use crate::model::{solve_exact, MarkovOracle, NoiseSample, TtsaProblem, MAX_COND};

/// Chains whose spectral gap falls below this are treated as non-ergodic.
pub const MIN_SPECTRAL_GAP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonSolution {
    /// `f̂(x)` with `π(f̂) = 0`.
    pub f_hat: Vec<Vec<f64>>,
    /// `(P f̂)(x)`.
    pub p_f_hat: Vec<Vec<f64>>,
    /// `π(f)`.
    pub pi_f: Vec<f64>,
    /// `max_x ‖f̂(x) − P f̂(x) − (f(x) − π(f))‖_∞`.
    pub residual_max: f64,
    /// `max_x ‖f̂(x)‖`
    pub f_hat_sup: f64,
    /// `(8/3) t_mix max_x ‖f(x)‖`
    pub sup_bound: f64,
}

impl PoissonSolution {
    pub fn sup_bound_holds(&self) -> bool {
        self.f_hat_sup <= self.sup_bound * (1.0 + 1e-12)
    }
}

/// `1 − max |λ|` over the eigenvalues of `P` other than the Perron root.
pub fn spectral_gap(kernel: &Mat) -> Result<f64> {
    let mut ev = eigenvalues(kernel)?;
    // drop the eigenvalue closest to 1
    let (i1, _) = ev
        .iter()
        .enumerate()
        .map(|(i, (re, im))| (i, (re - 1.0).hypot(*im)))
        .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    ev.remove(i1);
    let second = ev.iter().map(|(re, im)| re.hypot(*im)).fold(0.0, f64::max);
    Ok(1.0 - second)
}

/// `Z = (I − P + 1π^T)^{-1}`.
pub fn fundamental_matrix(kernel: &Mat, pi: &[f64]) -> Result<Mat> {
    let n = kernel.rows();
    let gap = spectral_gap(kernel)?;
    if gap < MIN_SPECTRAL_GAP {
        return Err(Error::NotErgodic(format!("spectral gap {gap:e} below {MIN_SPECTRAL_GAP:e}")));
    }
    let mut m = Mat::identity(n).sub(kernel)?;
    for i in 0..n {
        for j in 0..n {
            m.set(i, j, m.get(i, j) + pi[j]);
        }
    }
    let lu = Lu::new(&m)?;
    if lu.is_singular() {
        return Err(Error::NotErgodic("fundamental matrix is singular".into()));
    }
    let z = lu.inverse()?;
    let cond = m.norm_1() * z.norm_1();
    if cond > MAX_COND {
        return Err(Error::NotErgodic(format!(
            "fundamental matrix ill-conditioned (condition {cond:e})"
        )));
    }
    Ok(z)
}

/// Solves `f̂ − P f̂ = f − π(f)` for a vector-valued `f` given per state.
pub fn solve_poisson(oracle: &MarkovOracle, f: &[Vec<f64>]) -> Result<PoissonSolution> {
    solve_poisson_kernel(oracle.kernel(), oracle.stationary(), oracle.t_mix(), f)
}

pub(crate) fn solve_poisson_kernel(
    kernel: &Mat,
    pi: &[f64],
    t_mix: usize,
    f: &[Vec<f64>],
) -> Result<PoissonSolution> {
    let n = kernel.rows();
    if f.len() != n {
        return Err(Error::Dimension {
            what: "poisson right-hand side (states)".into(),
            expected: n,
            got: f.len(),
        });
    }
    let d = f.first().map_or(0, Vec::len);
    let z = fundamental_matrix(kernel, pi)?;
    let mut pi_f = vec![0.0; d];
    for (x, fx) in f.iter().enumerate() {
        if fx.len() != d {
            return Err(Error::Dimension {
                what: format!("poisson right-hand side at state {x}"),
                expected: d,
                got: fx.len(),
            });
        }
        for (m, v) in pi_f.iter_mut().zip(fx) {
            *m += pi[x] * v;
        }
    }
    // column c of the centered rhs, solved for all components at once
    let mut rhs = Mat::zeros(n, d);
    for x in 0..n {
        for c in 0..d {
            rhs.set(x, c, f[x][c] - pi_f[c]);
        }
    }
    let fh = z.matmul(&rhs)?;
    let pfh = kernel.matmul(&fh)?;
    let f_hat = fh.to_rows();
    let p_f_hat = pfh.to_rows();
    let mut residual_max = 0.0_f64;
    for x in 0..n {
        for c in 0..d {
            let r = f_hat[x][c] - p_f_hat[x][c] - rhs.get(x, c);
            residual_max = residual_max.max(r.abs());
        }
    }
    let f_sup = f.iter().map(|v| linalg::norm2(v)).fold(0.0, f64::max);
    let f_hat_sup = f_hat.iter().map(|v| linalg::norm2(v)).fold(0.0, f64::max);
    Ok(PoissonSolution {
        f_hat,
        p_f_hat,
        pi_f,
        residual_max,
        f_hat_sup,
        sup_bound: 8.0 / 3.0 * t_mix as f64 * f_sup,
    })
}

/// Per-state `(ε_V(x), ε_W(x))`.
pub fn state_eps(oracle: &MarkovOracle, problem: &TtsaProblem) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let sol = solve_exact(problem)?;
    Ok(oracle.states().iter().map(|o| o.eps(&sol)).collect())
}

/// `ψ(x) = ε_V(x) − A12 A22^{-1} ε_W(x)` per state.
pub fn state_psi(oracle: &MarkovOracle, problem: &TtsaProblem) -> Result<Vec<Vec<f64>>> {
    Ok(state_eps(oracle, problem)?
        .iter()
        .map(|(v, w)| problem.psi(v, w))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSplit {
    pub v0: Vec<f64>,
    pub w0: Vec<f64>,
    pub v1: Vec<f64>,
    pub w1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub splits: Vec<NoiseSplit>,
    /// `max_k max(‖v0 + v1 − V‖_∞, ‖w0 + w1 − W‖_∞)`
    pub additivity_max: f64,
    /// `max_x ‖E[ĝ(X') | X = x] − Pĝ(x)‖_∞` over every Poisson solution
    /// entering `v0, w0`; exact, computed from the kernel rows.
    pub conditional_mean_max: f64,
}

/// Poisson solutions of one block function (vector or flattened matrix).
struct BlockPoisson {
    hat: Vec<Vec<f64>>,
    p_hat: Vec<Vec<f64>>,
    mean: Vec<f64>,
}

impl BlockPoisson {
    fn new(oracle: &MarkovOracle, f: Vec<Vec<f64>>) -> Result<Self> {
        let s = solve_poisson(oracle, &f)?;
        Ok(Self {
            hat: s.f_hat,
            p_hat: s.p_f_hat,
            mean: s.pi_f,
        })
    }

    fn conditional_defect(&self, kernel: &Mat) -> f64 {
        let n = kernel.rows();
        let d = self.hat.first().map_or(0, Vec::len);
        let mut worst = 0.0_f64;
        for x in 0..n {
            for c in 0..d {
                let e: f64 = (0..n).map(|y| kernel.get(x, y) * self.hat[y][c]).sum();
                worst = worst.max((e - self.p_hat[x][c]).abs());
            }
        }
        worst
    }
}

fn sub_flat(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(p, q)| p - q).collect()
}

/// `M v` for `M` stored row-major with `v.len()` columns.
fn flat_mat_vec(m: &[f64], v: &[f64], out: &mut [f64], sign: f64) {
    let c = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o += sign * linalg::dot(&m[i * c..(i + 1) * c], v);
    }
}

/// Splits logged Markov noise into a martingale-increment part `(v0, w0)`
/// and a telescoping remainder `(v1, w1)`:
///
/// `v0 = {ε̂_V(X') − Pε̂_V(X)} − {Â11(X') − PÂ11(X)}θ̃ − {Â12(X') − PÂ12(X)}(w − w*)`
///
/// `v1 = V − v0`, which equals `{Pε̂_V(X) − Pε̂_V(X')} + {PÂ11(X') − PÂ11(X)}θ̃ + …`
/// plus the stationary means `π(ε_V) − π(Ã11)θ̃ − …` (zero for a centered oracle).
pub fn split_noise(
    oracle: &MarkovOracle,
    problem: &TtsaProblem,
    noise_log: Option<&[NoiseSample]>,
) -> Result<SplitReport> {
    let log = noise_log.ok_or(Error::MissingNoiseLog)?;
    let eps = state_eps(oracle, problem)?;
    let tilde = |sel: fn(&crate::model::Observation) -> &Mat, mean: &Mat| -> Vec<Vec<f64>> {
        oracle
            .states()
            .iter()
            .map(|o| sel(o).sub(mean).expect("shape").into_vec())
            .collect()
    };
    let ev = BlockPoisson::new(oracle, eps.iter().map(|e| e.0.clone()).collect())?;
    let ew = BlockPoisson::new(oracle, eps.iter().map(|e| e.1.clone()).collect())?;
    let a11 = BlockPoisson::new(oracle, tilde(|o| &o.a11, problem.a11()))?;
    let a12 = BlockPoisson::new(oracle, tilde(|o| &o.a12, problem.a12()))?;
    let a21 = BlockPoisson::new(oracle, tilde(|o| &o.a21, problem.a21()))?;
    let a22 = BlockPoisson::new(oracle, tilde(|o| &o.a22, problem.a22()))?;
    let kernel = oracle.kernel();
    let conditional_mean_max = [&ev, &ew, &a11, &a12, &a21, &a22]
        .iter()
        .map(|b| b.conditional_defect(kernel))
        .fold(0.0, f64::max);

    let (dt, dw) = (problem.d_theta(), problem.d_w());
    let mut splits = Vec::with_capacity(log.len());
    let mut additivity_max = 0.0_f64;
    for nz in log {
        let (x, y) = (nz.prev_state, nz.state);
        let te = &nz.theta_err;
        let we = &nz.w_err;
        let block = |e: &BlockPoisson, ma: &BlockPoisson, mb: &BlockPoisson, d: usize| {
            let mut v0 = vec![0.0; d];
            for i in 0..d {
                v0[i] = e.hat[y][i] - e.p_hat[x][i];
            }
            flat_mat_vec(&sub_flat(&ma.hat[y], &ma.p_hat[x]), te, &mut v0, -1.0);
            flat_mat_vec(&sub_flat(&mb.hat[y], &mb.p_hat[x]), we, &mut v0, -1.0);
            v0
        };
        let v0 = block(&ev, &a11, &a12, dt);
        let w0 = block(&ew, &a21, &a22, dw);
        let remainder = |e: &BlockPoisson, ma: &BlockPoisson, mb: &BlockPoisson, d: usize| {
            let mut r: Vec<f64> = (0..d).map(|i| e.p_hat[x][i] - e.p_hat[y][i] + e.mean[i]).collect();
            flat_mat_vec(&sub_flat(&ma.p_hat[y], &ma.p_hat[x]), te, &mut r, 1.0);
            flat_mat_vec(&ma.mean, te, &mut r, -1.0);
            flat_mat_vec(&sub_flat(&mb.p_hat[y], &mb.p_hat[x]), we, &mut r, 1.0);
            flat_mat_vec(&mb.mean, we, &mut r, -1.0);
            r
        };
        let v1 = remainder(&ev, &a11, &a12, dt);
        let w1 = remainder(&ew, &a21, &a22, dw);
        for i in 0..dt {
            additivity_max = additivity_max.max((v0[i] + v1[i] - nz.v[i]).abs());
        }
        for i in 0..dw {
            additivity_max = additivity_max.max((w0[i] + w1[i] - nz.w_noise[i]).abs());
        }
        splits.push(NoiseSplit { v0, w0, v1, w1 });
    }
    Ok(SplitReport {
        splits,
        additivity_max,
        conditional_mean_max,
    })
}

/// `Σ_∞^mark = Σ_x π(x) Σ_x' P(x,x') (ψ̂(x') − Pψ̂(x))(ψ̂(x') − Pψ̂(x))^T`,
/// the long-run covariance of `n^{-1/2} Σ (ψ(X_k) − π(ψ))`.
pub fn markov_asymptotic_covariance(oracle: &MarkovOracle, problem: &TtsaProblem) -> Result<Mat> {
    let psi = state_psi(oracle, problem)?;
    markov_long_run_covariance(oracle, &psi)
}

/// Long-run covariance of a vector function of the chain via its Poisson solution.
pub fn markov_long_run_covariance(oracle: &MarkovOracle, f: &[Vec<f64>]) -> Result<Mat> {
    let sol = solve_poisson(oracle, f)?;
    let kernel = oracle.kernel();
    let pi = oracle.stationary();
    let n = kernel.rows();
    let d = sol.pi_f.len();
    let mut s = Mat::zeros(d, d);
    for x in 0..n {
        for y in 0..n {
            let w = pi[x] * kernel.get(x, y);
            if w == 0.0 {
                continue;
            }
            let inc: Vec<f64> = (0..d).map(|c| sol.f_hat[y][c] - sol.p_f_hat[x][c]).collect();
            s.axpy(w, &Mat::outer(&inc, &inc))?;
        }
    }
    Ok(s.symmetrize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InitialState, NoiseOracle};
    use approx::assert_relative_eq;

    fn m(rows: &[&[f64]]) -> Mat {
        Mat::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn scalar_chain(kernel: Mat, b1: &[f64]) -> (TtsaProblem, NoiseOracle) {
        let p = TtsaProblem::scalar(1.0, 0.0, 0.0, 1.0, 0.0, 0.0).unwrap();
        let states = b1
            .iter()
            .map(|&b| {
                let mut o = p.mean_observation();
                o.b1[0] = b;
                o
            })
            .collect();
        let o = NoiseOracle::markov(&p, kernel, states, InitialState::Stationary).unwrap();
        (p, o)
    }

    #[test]
    fn constant_function_has_zero_solution() {
        let (_, o) = scalar_chain(m(&[&[0.9, 0.1], &[0.2, 0.8]]), &[0.0, 0.0]);
        let s = solve_poisson(o.as_markov().unwrap(), &[vec![3.0], vec![3.0]]).unwrap();
        assert!(s.f_hat.iter().all(|v| v[0].abs() < 1e-14));
    }

    #[test]
    fn two_state_matches_truncated_series() {
        let k = m(&[&[0.9, 0.1], &[0.2, 0.8]]);
        let (_, o) = scalar_chain(k.clone(), &[0.0, 0.0]);
        let mk = o.as_markov().unwrap();
        let f = vec![vec![1.0], vec![0.0]];
        let s = solve_poisson(mk, &f).unwrap();
        assert_relative_eq!(s.pi_f[0], 2.0 / 3.0, epsilon = 1e-14);
        // Σ_{k<=500} (P^k f − π(f))
        let mut series = [0.0; 2];
        let mut pk = Mat::identity(2);
        for _ in 0..=500 {
            for x in 0..2 {
                series[x] += pk.get(x, 0) - 2.0 / 3.0;
            }
            pk = pk.matmul(&k).unwrap();
        }
        for x in 0..2 {
            assert!((s.f_hat[x][0] - series[x]).abs() < 1e-10);
        }
        assert!(s.residual_max < 1e-12);
        assert!(s.sup_bound_holds());
    }

    #[test]
    fn iid_chain_solution_is_centered_f() {
        let (_, o) = scalar_chain(m(&[&[0.25, 0.75], &[0.25, 0.75]]), &[0.0, 0.0]);
        let s = solve_poisson(o.as_markov().unwrap(), &[vec![1.0], vec![5.0]]).unwrap();
        let mean = 0.25 + 0.75 * 5.0;
        assert_relative_eq!(s.f_hat[0][0], 1.0 - mean, epsilon = 1e-13);
        assert_relative_eq!(s.f_hat[1][0], 5.0 - mean, epsilon = 1e-13);
    }

    /// `Var_π ψ + 2 Σ_{k≥1} Cov(ψ_0, ψ_k)` by brute-force powers of P.
    fn autocov_series(k: &Mat, pi: &[f64], f: &[f64], terms: usize) -> f64 {
        let mean: f64 = pi.iter().zip(f).map(|(p, v)| p * v).sum();
        let c: Vec<f64> = f.iter().map(|v| v - mean).collect();
        let mut total = pi.iter().zip(&c).map(|(p, v)| p * v * v).sum::<f64>();
        let mut pk = k.clone();
        for _ in 1..terms {
            let pc = pk.mat_vec(&c).unwrap();
            total += 2.0 * pi.iter().zip(&c).zip(&pc).map(|((p, a), b)| p * a * b).sum::<f64>();
            pk = pk.matmul(k).unwrap();
        }
        total
    }

    #[test]
    fn asymptotic_covariance_two_state_oracles() {
        let k = m(&[&[0.9, 0.1], &[0.2, 0.8]]);
        let (p, o) = scalar_chain(k.clone(), &[1.0, -2.0]);
        let mk = o.as_markov().unwrap();
        let s = markov_asymptotic_covariance(mk, &p).unwrap();
        // Var_π ψ = 2, eigenvalue 0.7: 2 (1 + 0.7)/(1 − 0.7)
        let closed = 2.0 * 1.7 / 0.3;
        assert!((s.get(0, 0) - closed).abs() < 1e-8);
        let series = autocov_series(&k, mk.stationary(), &[1.0, -2.0], 400);
        assert!((s.get(0, 0) - series).abs() < 1e-8);
    }

    #[test]
    fn iid_chain_covariance_is_variance() {
        let (p, o) = scalar_chain(m(&[&[0.25, 0.75], &[0.25, 0.75]]), &[3.0, -1.0]);
        let s = markov_asymptotic_covariance(o.as_markov().unwrap(), &p).unwrap();
        assert_relative_eq!(s.get(0, 0), 0.25 * 9.0 + 0.75 * 1.0, epsilon = 1e-12);
    }

    #[test]
    fn relabeling_invariance() {
        let k = m(&[&[0.5, 0.3, 0.2], &[0.1, 0.6, 0.3], &[0.3, 0.3, 0.4]]);
        let b = [1.0, -0.5, 0.2];
        let (p, o) = scalar_chain(k.clone(), &b);
        let s1 = markov_asymptotic_covariance(o.as_markov().unwrap(), &p).unwrap();
        let perm = [2, 0, 1];
        let mut kp = Mat::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                kp.set(i, j, k.get(perm[i], perm[j]));
            }
        }
        let bp: Vec<f64> = perm.iter().map(|&i| b[i]).collect();
        let (p2, o2) = scalar_chain(kp, &bp);
        let s2 = markov_asymptotic_covariance(o2.as_markov().unwrap(), &p2).unwrap();
        assert!((s1.get(0, 0) - s2.get(0, 0)).abs() < 1e-12);
    }

    #[test]
    fn split_is_additive_along_a_trajectory() {
        use crate::engine::{run, RunOptions};
        use crate::schedule::StepSchedule;
        use rand::SeedableRng;
        let p = TtsaProblem::new(
            m(&[&[1.0, 0.2], &[0.0, 0.8]]),
            m(&[&[0.3], &[0.1]]),
            m(&[&[0.5, -0.2]]),
            m(&[&[1.5]]),
            vec![1.0, 0.5],
            vec![-0.3],
        )
        .unwrap();
        let k = m(&[&[0.6, 0.3, 0.1], &[0.2, 0.5, 0.3], &[0.3, 0.3, 0.4]]);
        let mut states = Vec::new();
        for (i, s) in [0.4, -0.2, 0.7].iter().enumerate() {
            let mut o = p.mean_observation();
            o.b1[0] += s;
            o.b2[0] -= s * 0.5;
            o.a11.set(0, 0, o.a11.get(0, 0) + 0.1 * i as f64 - 0.1);
            o.a22.set(0, 0, o.a22.get(0, 0) + 0.2 * s);
            o.a21.set(0, 1, o.a21.get(0, 1) - s);
            states.push(o);
        }
        let o = NoiseOracle::markov(&p, k, states, InitialState::Fixed(1)).unwrap();
        let sched = StepSchedule::new(0.6, 0.9, 0.5, 0.5, 10).unwrap();
        let opts = RunOptions {
            keep_noise_log: true,
            ..Default::default()
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let rec = run(&p, &o, &sched, 2000, &opts, &mut rng).unwrap();
        let mk = o.as_markov().unwrap();
        let rep = split_noise(mk, &p, rec.noise_log.as_deref()).unwrap();
        assert_eq!(rep.splits.len(), 2000);
        assert!(rep.additivity_max < 1e-10, "{}", rep.additivity_max);
        assert!(rep.conditional_mean_max < 1e-12);
        assert!(matches!(split_noise(mk, &p, None), Err(Error::MissingNoiseLog)));
    }

    #[test]
    fn near_reducible_chain_rejected() {
        let k = m(&[&[1.0 - 1e-9, 1e-9], &[1e-9, 1.0 - 1e-9]]);
        assert!(matches!(
            fundamental_matrix(&k, &[0.5, 0.5]),
            Err(Error::NotErgodic(_))
        ));
    }
}
