//! GTD(0) and TDC on finite MDPs as two-timescale problems with a Markov
//! oracle over transition tuples `(s, a, s')`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, cond_1, Mat};
use crate::model::{mixing_time, solve_exact, InitialState, NoiseOracle, Observation, Solution, TtsaProblem, MAX_COND};

const ROW_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiniteMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transition[s][a][s'] = P(s' | s, a)`
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `reward[s][a] ∈ [0, 1]`
    pub reward: Vec<Vec<f64>>,
    pub discount: f64,
    /// `policy[s][a] = π(a | s)`
    pub policy: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureMap {
    pub phi: Vec<Vec<f64>>,
}

impl FeatureMap {
    pub fn dim(&self) -> usize {
        self.phi.first().map_or(0, Vec::len)
    }

    /// One-hot features.
    pub fn tabular(n_states: usize) -> Self {
        Self {
            phi: (0..n_states)
                .map(|s| (0..n_states).map(|j| if j == s { 1.0 } else { 0.0 }).collect())
                .collect(),
        }
    }

    pub fn validate(&self, n_states: usize) -> Result<()> {
        if self.phi.len() != n_states {
            return Err(Error::InvalidMdp(format!(
                "features given for {} states, MDP has {n_states}",
                self.phi.len()
            )));
        }
        let d = self.dim();
        if d == 0 {
            return Err(Error::InvalidMdp("features have dimension 0".into()));
        }
        for (s, f) in self.phi.iter().enumerate() {
            if f.len() != d {
                return Err(Error::InvalidMdp(format!("phi[{s}] has length {}, expected {d}", f.len())));
            }
            let n = linalg::norm2(f);
            if !(n <= 1.0 + 1e-12) {
                return Err(Error::InvalidMdp(format!("||phi[{s}]|| = {n} exceeds 1")));
            }
        }
        Ok(())
    }
}

fn check_distribution(row: &[f64], len: usize, what: &str) -> Result<()> {
    if row.len() != len {
        return Err(Error::InvalidMdp(format!("{what} has length {}, expected {len}", row.len())));
    }
    if row.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::InvalidMdp(format!("{what} has negative or NaN entries")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > ROW_TOL {
        return Err(Error::InvalidMdp(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

impl FiniteMdp {
    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            return Err(Error::InvalidMdp("need at least one state and one action".into()));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::InvalidMdp(format!("discount {} outside [0, 1)", self.discount)));
        }
        if self.transition.len() != ns || self.reward.len() != ns || self.policy.len() != ns {
            return Err(Error::InvalidMdp("transition, reward and policy need one entry per state".into()));
        }
        for s in 0..ns {
            if self.transition[s].len() != na {
                return Err(Error::InvalidMdp(format!("transition[{s}] needs {na} actions")));
            }
            for a in 0..na {
                check_distribution(&self.transition[s][a], ns, &format!("transition[{s}][{a}]"))?;
            }
            if self.reward[s].len() != na {
                return Err(Error::InvalidMdp(format!("reward[{s}] needs {na} actions")));
            }
            if let Some(r) = self.reward[s].iter().find(|r| !(0.0..=1.0).contains(*r)) {
                return Err(Error::InvalidMdp(format!("reward {r} at state {s} outside [0, 1]")));
            }
            check_distribution(&self.policy[s], na, &format!("policy[{s}]"))?;
        }
        Ok(())
    }

    /// `P_π(s' | s) = Σ_a π(a|s) P(s'|s,a)`.
    pub fn state_kernel(&self) -> Mat {
        let ns = self.n_states;
        let mut k = Mat::zeros(ns, ns);
        for s in 0..ns {
            for a in 0..self.n_actions {
                let pa = self.policy[s][a];
                for t in 0..ns {
                    k.set(s, t, k.get(s, t) + pa * self.transition[s][a][t]);
                }
            }
        }
        k
    }

    /// `r_π(s) = Σ_a π(a|s) r(s,a)`.
    pub fn expected_reward(&self) -> Vec<f64> {
        (0..self.n_states)
            .map(|s| (0..self.n_actions).map(|a| self.policy[s][a] * self.reward[s][a]).sum())
            .collect()
    }
}

/// MDP file layout: the MDP fields plus `features`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpSpec {
    pub n_states: usize,
    pub n_actions: usize,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<f64>>,
    pub discount: f64,
    pub policy: Vec<Vec<f64>>,
    pub features: Vec<Vec<f64>>,
}

impl MdpSpec {
    pub fn split(&self) -> (FiniteMdp, FeatureMap) {
        (
            FiniteMdp {
                n_states: self.n_states,
                n_actions: self.n_actions,
                transition: self.transition.clone(),
                reward: self.reward.clone(),
                discount: self.discount,
                policy: self.policy.clone(),
            },
            FeatureMap {
                phi: self.features.clone(),
            },
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Gtd,
    Tdc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    /// Consecutive tuples along one trajectory.
    #[default]
    Markov,
    /// Independent tuples with `s ~ μ` (the generative-model setting).
    Iid,
}

/// A constructed instance: problem, oracle, and the tuple enumeration the
/// oracle's states refer to.
#[derive(Debug, Clone)]
pub struct RlInstance {
    pub algorithm: Algorithm,
    pub problem: TtsaProblem,
    pub oracle: NoiseOracle,
    /// Oracle state `i` is the transition `tuples[i] = (s, a, s')`.
    pub tuples: Vec<(usize, usize, usize)>,
    /// Stationary law of the tuples.
    pub tuple_law: Vec<f64>,
    /// Stationary law `μ` of `P_π`.
    pub mu: Vec<f64>,
    pub state_mixing_time: usize,
    pub tuple_mixing_time: usize,
}

/// Per-tuple matrices of the two recursions.
fn tuple_observation(alg: Algorithm, phi: &[f64], phi_next: &[f64], r: f64, lambda: f64) -> Observation {
    let d = phi.len();
    let diff: Vec<f64> = phi.iter().zip(phi_next).map(|(a, b)| a - lambda * b).collect();
    let phi_diff = Mat::outer(phi, &diff); // φ(φ − λφ')^T
    let rphi: Vec<f64> = phi.iter().map(|v| r * v).collect();
    match alg {
        Algorithm::Gtd => Observation {
            a11: Mat::zeros(d, d),
            a12: Mat::outer(&diff, phi).scale(-1.0),
            a21: phi_diff,
            a22: Mat::identity(d),
            b1: vec![0.0; d],
            b2: rphi,
        },
        Algorithm::Tdc => Observation {
            a11: phi_diff.clone(),
            a12: Mat::outer(phi_next, phi).scale(lambda),
            a21: phi_diff,
            a22: Mat::outer(phi, phi),
            b1: rphi.clone(),
            b2: rphi,
        },
    }
}

fn weighted_mean(weights: &[f64], obs: &[Observation]) -> Observation {
    let mut m = obs[0].clone();
    for e in m.entries_mut() {
        e.iter_mut().for_each(|v| *v = 0.0);
    }
    for (w, o) in weights.iter().zip(obs) {
        for (dst, src) in m.entries_mut().into_iter().zip(o.entries()) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += w * b;
            }
        }
    }
    m
}

/// Builds the problem and oracle for `alg`; expectations are exact under the
/// stationary tuple law.
pub fn build(alg: Algorithm, mdp: &FiniteMdp, features: &FeatureMap, sampling: Sampling) -> Result<RlInstance> {
    mdp.validate()?;
    features.validate(mdp.n_states)?;
    let ns = mdp.n_states;
    let pk = mdp.state_kernel();
    let mu = crate::model::stationary_distribution(&pk)?;
    let state_mixing_time = mixing_time(&pk, 0.25)?;

    let mut tuples = Vec::new();
    for s in 0..ns {
        for a in 0..mdp.n_actions {
            for t in 0..ns {
                if mdp.policy[s][a] * mdp.transition[s][a][t] > 0.0 {
                    tuples.push((s, a, t));
                }
            }
        }
    }
    let m = tuples.len();
    let tuple_law: Vec<f64> = tuples
        .iter()
        .map(|&(s, a, t)| mu[s] * mdp.policy[s][a] * mdp.transition[s][a][t])
        .collect();
    let mut kernel = Mat::zeros(m, m);
    for (i, &(_, _, t)) in tuples.iter().enumerate() {
        for (j, &(s2, a2, t2)) in tuples.iter().enumerate() {
            if s2 == t {
                kernel.set(i, j, mdp.policy[s2][a2] * mdp.transition[s2][a2][t2]);
            }
        }
    }
    let tuple_mixing_time = mixing_time(&kernel, 0.25)?;

    let lambda = mdp.discount;
    let obs: Vec<Observation> = tuples
        .iter()
        .map(|&(s, a, t)| tuple_observation(alg, &features.phi[s], &features.phi[t], mdp.reward[s][a], lambda))
        .collect();
    let mean = weighted_mean(&tuple_law, &obs);
    let gram = weighted_gram(&mu, features);
    let gc = cond_1(&gram).unwrap_or(f64::INFINITY);
    if !(gc <= MAX_COND) {
        return Err(Error::SingularFeatureGram { cond: gc });
    }
    let problem = TtsaProblem::new(mean.a11, mean.a12, mean.a21, mean.a22, mean.b1, mean.b2)?;
    let oracle = match sampling {
        Sampling::Markov => NoiseOracle::markov(&problem, kernel, obs, InitialState::Stationary)?,
        Sampling::Iid => NoiseOracle::mixture(&problem, tuple_law.clone(), obs)?,
    };
    Ok(RlInstance {
        algorithm: alg,
        problem,
        oracle,
        tuples,
        tuple_law,
        mu,
        state_mixing_time,
        tuple_mixing_time,
    })
}

pub fn build_gtd(mdp: &FiniteMdp, features: &FeatureMap) -> Result<RlInstance> {
    build(Algorithm::Gtd, mdp, features, Sampling::Markov)
}

pub fn build_tdc(mdp: &FiniteMdp, features: &FeatureMap) -> Result<RlInstance> {
    build(Algorithm::Tdc, mdp, features, Sampling::Markov)
}

/// `E_μ[φφ^T]`
pub fn weighted_gram(mu: &[f64], features: &FeatureMap) -> Mat {
    let d = features.dim();
    let mut g = Mat::zeros(d, d);
    for (w, f) in mu.iter().zip(&features.phi) {
        g.axpy(*w, &Mat::outer(f, f)).expect("shape");
    }
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEvaluation {
    pub theta_star: Vec<f64>,
    pub w_star: Vec<f64>,
    /// Solution of `E[φ(φ − λφ')^T] θ = E[φ r]`.
    pub projected_fixed_point: Vec<f64>,
    /// `max |θ* − projected_fixed_point|`
    pub fixed_point_gap: f64,
    /// `V^π = (I − λP_π)^{-1} r_π`
    pub v_pi: Vec<f64>,
    /// `φ(s)^T θ*`
    pub v_approx: Vec<f64>,
}

pub fn evaluate_policy_exact(mdp: &FiniteMdp, features: &FeatureMap, inst: &RlInstance) -> Result<PolicyEvaluation> {
    let Solution { theta_star, w_star } = solve_exact(&inst.problem)?;
    let ns = mdp.n_states;
    let d = features.dim();
    let lambda = mdp.discount;
    // E[φ(φ − λφ')^T] and E[φ r] from the tuple law
    let mut m = Mat::zeros(d, d);
    let mut rhs = vec![0.0; d];
    for (&(s, a, t), &w) in inst.tuples.iter().zip(&inst.tuple_law) {
        let phi = &features.phi[s];
        let diff: Vec<f64> = phi.iter().zip(&features.phi[t]).map(|(x, y)| x - lambda * y).collect();
        m.axpy(w, &Mat::outer(phi, &diff))?;
        for i in 0..d {
            rhs[i] += w * mdp.reward[s][a] * phi[i];
        }
    }
    let projected_fixed_point = linalg::solve(&m, &rhs)?;
    let fixed_point_gap = theta_star
        .iter()
        .zip(&projected_fixed_point)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let sys = Mat::identity(ns).sub(&mdp.state_kernel().scale(lambda))?;
    let v_pi = linalg::solve(&sys, &mdp.expected_reward())?;
    let v_approx = features.phi.iter().map(|f| linalg::dot(f, &theta_star)).collect();
    Ok(PolicyEvaluation {
        theta_star,
        w_star,
        projected_fixed_point,
        fixed_point_gap,
        v_pi,
        v_approx,
    })
}

/// `δ = r + λθ^Tφ' − θ^Tφ`.
pub fn td_error(theta: &[f64], phi: &[f64], phi_next: &[f64], r: f64, lambda: f64) -> f64 {
    r + lambda * linalg::dot(theta, phi_next) - linalg::dot(theta, phi)
}

/// One GTD(0) update written directly from the sample.
#[allow(clippy::too_many_arguments)]
pub fn gtd_raw_step(
    theta: &[f64],
    w: &[f64],
    phi: &[f64],
    phi_next: &[f64],
    r: f64,
    lambda: f64,
    beta: f64,
    gamma: f64,
) -> (Vec<f64>, Vec<f64>) {
    let delta = td_error(theta, phi, phi_next, r, lambda);
    let pw = linalg::dot(phi, w);
    let t = theta
        .iter()
        .zip(phi.iter().zip(phi_next))
        .map(|(th, (p, q))| th + beta * (p - lambda * q) * pw)
        .collect();
    let wn = w.iter().zip(phi).map(|(x, p)| x + gamma * (delta * p - x)).collect();
    (t, wn)
}

/// One TDC update written directly from the sample.
#[allow(clippy::too_many_arguments)]
pub fn tdc_raw_step(
    theta: &[f64],
    w: &[f64],
    phi: &[f64],
    phi_next: &[f64],
    r: f64,
    lambda: f64,
    beta: f64,
    gamma: f64,
) -> (Vec<f64>, Vec<f64>) {
    let delta = td_error(theta, phi, phi_next, r, lambda);
    let pw = linalg::dot(phi, w);
    let t = theta
        .iter()
        .zip(phi.iter().zip(phi_next))
        .map(|(th, (p, q))| th + beta * delta * p - beta * lambda * q * pw)
        .collect();
    let wn = w.iter().zip(phi).map(|(x, p)| x + gamma * (delta - pw) * p).collect();
    (t, wn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Engine;
    use crate::model::validate_assumptions;
    use crate::schedule::StepSchedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_state(discount: f64) -> FiniteMdp {
        FiniteMdp {
            n_states: 2,
            n_actions: 1,
            transition: vec![vec![vec![0.7, 0.3]], vec![vec![0.4, 0.6]]],
            reward: vec![vec![1.0], vec![0.2]],
            discount,
            policy: vec![vec![1.0], vec![1.0]],
        }
    }

    pub(crate) fn random_mdp(ns: usize, na: usize, seed: u64) -> FiniteMdp {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dist = |n: usize| {
            let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.05).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let transition = (0..ns).map(|_| (0..na).map(|_| dist(ns)).collect()).collect();
        let policy = (0..ns).map(|_| dist(na)).collect();
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed + 1);
        let reward = (0..ns).map(|_| (0..na).map(|_| rng2.random::<f64>()).collect()).collect();
        FiniteMdp {
            n_states: ns,
            n_actions: na,
            transition,
            reward,
            discount: 0.8,
            policy,
        }
    }

    fn random_features(ns: usize, d: usize, seed: u64) -> FeatureMap {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap {
            phi: (0..ns)
                .map(|_| {
                    let v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
                    let n = linalg::norm2(&v).max(1.0);
                    v.into_iter().map(|x| x / n).collect()
                })
                .collect(),
        }
    }

    #[test]
    fn gtd_tabular_matrices_match_enumeration() {
        let mdp = two_state(0.9);
        let f = FeatureMap::tabular(2);
        let inst = build_gtd(&mdp, &f).unwrap();
        // μ for [[0.7,0.3],[0.4,0.6]]: (4/7, 3/7)
        let mu = [4.0 / 7.0, 3.0 / 7.0];
        let mut a12 = Mat::zeros(2, 2);
        for s in 0..2 {
            for t in 0..2 {
                let w = mu[s] * mdp.transition[s][0][t];
                let mut diff = f.phi[s].clone();
                for i in 0..2 {
                    diff[i] -= 0.9 * f.phi[t][i];
                }
                a12.axpy(-w, &Mat::outer(&diff, &f.phi[s])).unwrap();
            }
        }
        assert!(inst.problem.a12().sub(&a12).unwrap().max_abs() < 1e-14);
        let ev = evaluate_policy_exact(&mdp, &f, &inst).unwrap();
        for s in 0..2 {
            assert!((ev.v_approx[s] - ev.v_pi[s]).abs() < 1e-10);
        }
        assert!(ev.fixed_point_gap < 1e-10);
    }

    #[test]
    fn zero_discount_gives_diag_mu() {
        let mdp = two_state(0.0);
        let inst = build_gtd(&mdp, &FeatureMap::tabular(2)).unwrap();
        let expect = Mat::diag(&[-4.0 / 7.0, -3.0 / 7.0]);
        assert!(inst.problem.a12().sub(&expect).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn gtd_delta_is_gram() {
        let mdp = random_mdp(4, 2, 1);
        let inst = build_gtd(&mdp, &random_features(4, 2, 2)).unwrap();
        let d = inst.problem.delta();
        assert!(d.asymmetry() < 1e-12);
        assert!(linalg::lambda_min(d).unwrap() > 0.0);
        assert!(validate_assumptions(&inst.problem, &inst.oracle).check("A4-delta").unwrap().passed);
    }

    #[test]
    fn tdc_identities_and_spectrum() {
        let mdp = random_mdp(4, 2, 3);
        let inst = build_tdc(&mdp, &random_features(4, 2, 4)).unwrap();
        let p = &inst.problem;
        assert!(p.a11().sub(p.a21()).unwrap().max_abs() < 1e-14);
        assert!(p.a12().sub(&p.a22().sub(&p.a11().transpose()).unwrap()).unwrap().max_abs() < 1e-14);
        let ev = linalg::eigenvalues(p.delta()).unwrap();
        assert!(ev.iter().all(|(re, im)| *re > 0.0 && im.abs() < 1e-10));
    }

    #[test]
    fn tdc_tabular_gram_is_diag_mu() {
        let mdp = two_state(0.5);
        let inst = build_tdc(&mdp, &FeatureMap::tabular(2)).unwrap();
        assert!(inst.problem.a22().sub(&Mat::diag(&inst.mu)).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn rank_deficient_features_rejected() {
        let mdp = random_mdp(3, 1, 5);
        let f = FeatureMap {
            phi: vec![vec![0.5, 0.1, 0.0], vec![0.5, 0.1, 0.0], vec![0.0, 0.3, 0.0]],
        };
        assert!(matches!(build_tdc(&mdp, &f), Err(Error::SingularFeatureGram { .. })));
    }

    #[test]
    fn zero_reward_zero_solution() {
        let mut mdp = random_mdp(3, 2, 6);
        mdp.reward = vec![vec![0.0; 2]; 3];
        let f = random_features(3, 2, 7);
        let inst = build_tdc(&mdp, &f).unwrap();
        let ev = evaluate_policy_exact(&mdp, &f, &inst).unwrap();
        assert!(ev.theta_star.iter().chain(&ev.w_star).all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn malformed_mdp_rejected() {
        let mut mdp = two_state(0.9);
        mdp.transition[0][0] = vec![0.7, 0.4];
        assert!(matches!(build_gtd(&mdp, &FeatureMap::tabular(2)), Err(Error::InvalidMdp(_))));
        let mut mdp = two_state(0.9);
        mdp.reward[1][0] = 1.5;
        assert!(matches!(build_gtd(&mdp, &FeatureMap::tabular(2)), Err(Error::InvalidMdp(_))));
    }

    #[test]
    fn iid_mode_is_martingale() {
        let mdp = random_mdp(3, 2, 8);
        let inst = build(Algorithm::Tdc, &mdp, &random_features(3, 2, 9), Sampling::Iid).unwrap();
        assert!(!inst.oracle.is_markov());
        assert!(validate_assumptions(&inst.problem, &inst.oracle).check("A1").unwrap().passed);
    }

    #[test]
    fn tuple_chain_mixing_close_to_state_chain() {
        for seed in 0..5 {
            let inst = build_gtd(&random_mdp(5, 2, 10 + seed), &random_features(5, 3, seed)).unwrap();
            let diff = inst.tuple_mixing_time as i64 - inst.state_mixing_time as i64;
            assert!(diff.abs() <= 1, "{} vs {}", inst.tuple_mixing_time, inst.state_mixing_time);
        }
    }

    #[test]
    fn raw_updates_equal_engine_steps() {
        for alg in [Algorithm::Gtd, Algorithm::Tdc] {
            let mdp = random_mdp(5, 2, 20);
            let f = random_features(5, 3, 21);
            let inst = build(alg, &mdp, &f, Sampling::Markov).unwrap();
            let sched = StepSchedule::new(0.6, 0.8, 0.5, 0.3, 1).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(22);
            let theta0 = [0.3, -0.2, 0.1];
            let mut eng = Engine::new(&inst.problem, &inst.oracle, sched, Some(&theta0), None, false, &mut rng).unwrap();
            for k in 0..2000u64 {
                let (th, w) = (eng.theta().to_vec(), eng.w().to_vec());
                eng.step(&mut rng, false, false).unwrap();
                let (s, a, t) = inst.tuples[eng.snapshot().x_state];
                let step = match alg {
                    Algorithm::Gtd => gtd_raw_step,
                    Algorithm::Tdc => tdc_raw_step,
                };
                let (th2, w2) = step(&th, &w, &f.phi[s], &f.phi[t], mdp.reward[s][a], mdp.discount, sched.beta(k), sched.gamma(k));
                let err = th2
                    .iter()
                    .zip(eng.theta())
                    .chain(w2.iter().zip(eng.w()))
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                assert!(err < 1e-13, "{alg:?} step {k}: {err}");
            }
        }
    }
}
