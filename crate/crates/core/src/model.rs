//! Linear two-timescale problems, their exact solution, and noise oracles.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, eig_check_hurwitz, inverse_guarded, Mat};

/// Condition number above which a matrix counts as singular.
pub const MAX_COND: f64 = 1e12;

/// `A11 θ + A12 w = b1`, `A21 θ + A22 w = b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProblemSpec", into = "ProblemSpec")]
pub struct TtsaProblem {
    a11: Mat,
    a12: Mat,
    a21: Mat,
    a22: Mat,
    b1: Vec<f64>,
    b2: Vec<f64>,
    delta: Mat,
    a22_inv: Mat,
    /// `A12 A22^{-1}`
    k12: Mat,
    /// `A22^{-1} A21`
    k21: Mat,
}

/// Wire format of a problem: dimensions plus the raw blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub d_theta: usize,
    pub d_w: usize,
    pub a11: Mat,
    pub a12: Mat,
    pub a21: Mat,
    pub a22: Mat,
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
}

impl TryFrom<ProblemSpec> for TtsaProblem {
    type Error = Error;

    fn try_from(s: ProblemSpec) -> Result<Self> {
        let p = TtsaProblem::new(s.a11, s.a12, s.a21, s.a22, s.b1, s.b2)?;
        if p.d_theta() != s.d_theta {
            return Err(Error::Dimension {
                what: "d_theta".into(),
                expected: s.d_theta,
                got: p.d_theta(),
            });
        }
        if p.d_w() != s.d_w {
            return Err(Error::Dimension {
                what: "d_w".into(),
                expected: s.d_w,
                got: p.d_w(),
            });
        }
        Ok(p)
    }
}

impl From<TtsaProblem> for ProblemSpec {
    fn from(p: TtsaProblem) -> Self {
        ProblemSpec {
            d_theta: p.d_theta(),
            d_w: p.d_w(),
            a11: p.a11,
            a12: p.a12,
            a21: p.a21,
            a22: p.a22,
            b1: p.b1,
            b2: p.b2,
        }
    }
}

fn expect_shape(what: &str, m: &Mat, rows: usize, cols: usize) -> Result<()> {
    if m.rows() != rows {
        return Err(Error::Dimension {
            what: format!("{what} rows"),
            expected: rows,
            got: m.rows(),
        });
    }
    if m.cols() != cols {
        return Err(Error::Dimension {
            what: format!("{what} cols"),
            expected: cols,
            got: m.cols(),
        });
    }
    Ok(())
}

fn expect_len(what: &str, v: &[f64], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::Dimension {
            what: what.into(),
            expected: len,
            got: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(format!("{what} has non-finite entries")));
    }
    Ok(())
}

impl TtsaProblem {
    /// Builds a problem after checking block shapes and invertibility of `A22`.
    ///
    /// Stability of `-A22` and `-Δ` is not enforced here; see
    /// [`validate_assumptions`].
    pub fn new(a11: Mat, a12: Mat, a21: Mat, a22: Mat, b1: Vec<f64>, b2: Vec<f64>) -> Result<Self> {
        let dt = a11.rows();
        let dw = a22.rows();
        expect_shape("a11", &a11, dt, dt)?;
        expect_shape("a12", &a12, dt, dw)?;
        expect_shape("a21", &a21, dw, dt)?;
        expect_shape("a22", &a22, dw, dw)?;
        expect_len("b1", &b1, dt)?;
        expect_len("b2", &b2, dw)?;
        let a22_inv = inverse_guarded(&a22, MAX_COND).map_err(|e| match e {
            linalg::LinalgError::Singular { cond } => Error::Singular {
                what: "a22".into(),
                cond,
            },
            other => other.into(),
        })?;
        let k12 = a12.matmul(&a22_inv)?;
        let k21 = a22_inv.matmul(&a21)?;
        let delta = a11.sub(&a12.matmul(&k21)?)?;
        Ok(Self {
            a11,
            a12,
            a21,
            a22,
            b1,
            b2,
            delta,
            a22_inv,
            k12,
            k21,
        })
    }

    /// Scalar problem with `d_theta = d_w = 1`.
    pub fn scalar(a11: f64, a12: f64, a21: f64, a22: f64, b1: f64, b2: f64) -> Result<Self> {
        let s = |x: f64| Mat::new(1, 1, vec![x]).expect("1x1");
        Self::new(s(a11), s(a12), s(a21), s(a22), vec![b1], vec![b2])
    }

    pub fn d_theta(&self) -> usize {
        self.a11.rows()
    }
    pub fn d_w(&self) -> usize {
        self.a22.rows()
    }
    pub fn a11(&self) -> &Mat {
        &self.a11
    }
    pub fn a12(&self) -> &Mat {
        &self.a12
    }
    pub fn a21(&self) -> &Mat {
        &self.a21
    }
    pub fn a22(&self) -> &Mat {
        &self.a22
    }
    pub fn b1(&self) -> &[f64] {
        &self.b1
    }
    pub fn b2(&self) -> &[f64] {
        &self.b2
    }
    /// `Δ = A11 − A12 A22^{-1} A21`
    pub fn delta(&self) -> &Mat {
        &self.delta
    }
    pub fn a22_inv(&self) -> &Mat {
        &self.a22_inv
    }
    /// `A12 A22^{-1}`
    pub fn a12_a22inv(&self) -> &Mat {
        &self.k12
    }
    /// `A22^{-1} A21`
    pub fn a22inv_a21(&self) -> &Mat {
        &self.k21
    }

    /// The deterministic observation `(A_ij, b_i)`.
    pub fn mean_observation(&self) -> Observation {
        Observation {
            a11: self.a11.clone(),
            a12: self.a12.clone(),
            a21: self.a21.clone(),
            a22: self.a22.clone(),
            b1: self.b1.clone(),
            b2: self.b2.clone(),
        }
    }

    /// `ψ = ε_V − A12 A22^{-1} ε_W`.
    pub fn psi(&self, eps_v: &[f64], eps_w: &[f64]) -> Vec<f64> {
        let k = self.k12.mat_vec(eps_w).expect("shape");
        eps_v.iter().zip(k).map(|(a, b)| a - b).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub theta_star: Vec<f64>,
    pub w_star: Vec<f64>,
}

/// `θ* = Δ^{-1}(b1 − A12 A22^{-1} b2)`, `w* = A22^{-1}(b2 − A21 θ*)`.
pub fn solve_exact(p: &TtsaProblem) -> Result<Solution> {
    let delta_inv = inverse_guarded(p.delta(), MAX_COND).map_err(|e| match e {
        linalg::LinalgError::Singular { cond } => Error::Singular {
            what: "delta".into(),
            cond,
        },
        other => other.into(),
    })?;
    let kb = p.k12.mat_vec(&p.b2)?;
    let rhs: Vec<f64> = p.b1.iter().zip(&kb).map(|(a, b)| a - b).collect();
    let theta_star = delta_inv.mat_vec(&rhs)?;
    let at = p.a21.mat_vec(&theta_star)?;
    let r2: Vec<f64> = p.b2.iter().zip(&at).map(|(a, b)| a - b).collect();
    let w_star = p.a22_inv.mat_vec(&r2)?;
    Ok(Solution { theta_star, w_star })
}

/// One realization `(A_ij(x), b_i(x))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub a11: Mat,
    pub a12: Mat,
    pub a21: Mat,
    pub a22: Mat,
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Observation {
    fn check_against(&self, p: &TtsaProblem, what: &str) -> Result<()> {
        let (dt, dw) = (p.d_theta(), p.d_w());
        expect_shape(&format!("{what}.a11"), &self.a11, dt, dt)?;
        expect_shape(&format!("{what}.a12"), &self.a12, dt, dw)?;
        expect_shape(&format!("{what}.a21"), &self.a21, dw, dt)?;
        expect_shape(&format!("{what}.a22"), &self.a22, dw, dw)?;
        expect_len(&format!("{what}.b1"), &self.b1, dt)?;
        expect_len(&format!("{what}.b2"), &self.b2, dw)?;
        Ok(())
    }

    /// `(ε_V, ε_W)` at this observation: `b_i(x) − A_i1(x)θ* − A_i2(x)w*`.
    pub fn eps(&self, sol: &Solution) -> (Vec<f64>, Vec<f64>) {
        let mut ev = self.b1.clone();
        let mut ew = self.b2.clone();
        let t = &sol.theta_star;
        let w = &sol.w_star;
        for (i, e) in ev.iter_mut().enumerate() {
            *e -= linalg::dot(self.a11.row(i), t) + linalg::dot(self.a12.row(i), w);
        }
        for (i, e) in ew.iter_mut().enumerate() {
            *e -= linalg::dot(self.a21.row(i), t) + linalg::dot(self.a22.row(i), w);
        }
        (ev, ew)
    }

    /// Max absolute entrywise difference from the deterministic problem.
    fn max_deviation(&self, p: &TtsaProblem) -> f64 {
        let m = |a: &Mat, b: &Mat| a.sub(b).map(|d| d.max_abs()).unwrap_or(f64::INFINITY);
        let v = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        };
        m(&self.a11, p.a11())
            .max(m(&self.a12, p.a12()))
            .max(m(&self.a21, p.a21()))
            .max(m(&self.a22, p.a22()))
            .max(v(&self.b1, p.b1()))
            .max(v(&self.b2, p.b2()))
    }

    fn sup_norms(&self, p: &TtsaProblem) -> (f64, f64) {
        let mut ba = 0.0_f64;
        for (x, m) in [
            (&self.a11, p.a11()),
            (&self.a12, p.a12()),
            (&self.a21, p.a21()),
            (&self.a22, p.a22()),
        ] {
            ba = ba.max(x.op_norm()).max(x.sub(m).expect("shape").op_norm());
        }
        let mut bb = 0.0_f64;
        for (x, m) in [(&self.b1, p.b1()), (&self.b2, p.b2())] {
            let d: Vec<f64> = x.iter().zip(m).map(|(a, b)| a - b).collect();
            bb = bb.max(linalg::norm2(x)).max(linalg::norm2(&d));
        }
        (ba, bb)
    }

    /// Blocks in the order `a11, a12, a21, a22, b1, b2`, flattened row-major.
    pub fn entries_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.a11.as_mut_slice(),
            self.a12.as_mut_slice(),
            self.a21.as_mut_slice(),
            self.a22.as_mut_slice(),
            &mut self.b1,
            &mut self.b2,
        ]
    }

    pub fn entries(&self) -> [&[f64]; 6] {
        [
            self.a11.as_slice(),
            self.a12.as_slice(),
            self.a21.as_slice(),
            self.a22.as_slice(),
            &self.b1,
            &self.b2,
        ]
    }
}

/// Observation in a config file; missing blocks default to the problem's.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a11: Option<Mat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a12: Option<Mat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a21: Option<Mat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a22: Option<Mat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b1: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b2: Option<Vec<f64>>,
}

impl ObservationSpec {
    pub fn resolve(&self, base: &Observation) -> Observation {
        Observation {
            a11: self.a11.clone().unwrap_or_else(|| base.a11.clone()),
            a12: self.a12.clone().unwrap_or_else(|| base.a12.clone()),
            a21: self.a21.clone().unwrap_or_else(|| base.a21.clone()),
            a22: self.a22.clone().unwrap_or_else(|| base.a22.clone()),
            b1: self.b1.clone().unwrap_or_else(|| base.b1.clone()),
            b2: self.b2.clone().unwrap_or_else(|| base.b2.clone()),
        }
    }
}

/// Unit-variance, mean-zero, bounded scalar laws for entrywise perturbations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationLaw {
    /// ±1 with equal probability.
    Rademacher,
    /// Uniform on `[-√3, √3]`.
    Uniform,
    /// `√((1−p)/p)` with probability `p`, else `−√(p/(1−p))`.
    Skewed { p: f64 },
}

impl PerturbationLaw {
    #[inline]
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            PerturbationLaw::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            PerturbationLaw::Uniform => {
                let s3 = 3f64.sqrt();
                (2.0 * rng.random::<f64>() - 1.0) * s3
            }
            PerturbationLaw::Skewed { p } => {
                if rng.random::<f64>() < p {
                    ((1.0 - p) / p).sqrt()
                } else {
                    -(p / (1.0 - p)).sqrt()
                }
            }
        }
    }

    /// Largest absolute value in the support.
    pub fn bound(&self) -> f64 {
        match *self {
            PerturbationLaw::Rademacher => 1.0,
            PerturbationLaw::Uniform => 3f64.sqrt(),
            PerturbationLaw::Skewed { p } => ((1.0 - p) / p).sqrt().max((p / (1.0 - p)).sqrt()),
        }
    }

    fn validate(&self) -> Result<()> {
        if let PerturbationLaw::Skewed { p } = *self {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::InvalidOracle(format!(
                    "skewed law needs p in (0,1), got {p}"
                )));
            }
        }
        Ok(())
    }
}

/// I.i.d. observation laws.
#[derive(Debug, Clone)]
pub enum MartingaleOracle {
    /// Finite mixture: draw atom `i` with probability `weights[i]`.
    Mixture {
        weights: Vec<f64>,
        atoms: Vec<Observation>,
        index: WeightedIndex<f64>,
    },
    /// `A_ij(x) = A_ij + scale_ij ∘ ξ` with independent unit-variance `ξ`.
    Perturbation {
        base: Observation,
        scales: Observation,
        law: PerturbationLaw,
        /// (block, flat index, scale) for every nonzero scale.
        active: Vec<(usize, usize, f64)>,
    },
}

/// Finite-state Markov observation process.
#[derive(Debug, Clone)]
pub struct MarkovOracle {
    kernel: Mat,
    states: Vec<Observation>,
    stationary: Vec<f64>,
    t_mix: usize,
    initial: InitialState,
    rows: Vec<WeightedIndex<f64>>,
    stationary_index: WeightedIndex<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialState {
    /// `X_0 ~ π`.
    #[default]
    Stationary,
    /// `X_0 = x`.
    Fixed(usize),
}

#[derive(Debug, Clone)]
pub enum NoiseOracle {
    Martingale(MartingaleOracle),
    Markov(MarkovOracle),
}

fn weighted(w: &[f64], what: &str) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new(w.iter().copied())
        .map_err(|e| Error::InvalidOracle(format!("{what}: {e}")))
}

impl NoiseOracle {
    /// Observation always equal to the problem's matrices.
    pub fn deterministic(p: &TtsaProblem) -> Self {
        Self::mixture(p, vec![1.0], vec![p.mean_observation()]).expect("single atom")
    }

    pub fn mixture(p: &TtsaProblem, weights: Vec<f64>, atoms: Vec<Observation>) -> Result<Self> {
        if weights.len() != atoms.len() || atoms.is_empty() {
            return Err(Error::InvalidOracle(format!(
                "mixture needs as many weights as atoms (got {} and {})",
                weights.len(),
                atoms.len()
            )));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidOracle(
                "mixture weights must be nonnegative and sum to 1".into(),
            ));
        }
        for (i, a) in atoms.iter().enumerate() {
            a.check_against(p, &format!("atoms[{i}]"))?;
        }
        let index = weighted(&weights, "mixture weights")?;
        Ok(NoiseOracle::Martingale(MartingaleOracle::Mixture {
            weights,
            atoms,
            index,
        }))
    }

    /// Entrywise bounded perturbation of `base` (usually the problem's own
    /// matrices). Blocks absent from `scales` are not perturbed.
    pub fn perturbation(
        p: &TtsaProblem,
        base: Observation,
        scales: &ObservationSpec,
        law: PerturbationLaw,
    ) -> Result<Self> {
        law.validate()?;
        base.check_against(p, "base")?;
        let zero = Observation {
            a11: Mat::zeros(p.d_theta(), p.d_theta()),
            a12: Mat::zeros(p.d_theta(), p.d_w()),
            a21: Mat::zeros(p.d_w(), p.d_theta()),
            a22: Mat::zeros(p.d_w(), p.d_w()),
            b1: vec![0.0; p.d_theta()],
            b2: vec![0.0; p.d_w()],
        };
        let scales = scales.resolve(&zero);
        scales.check_against(p, "scales")?;
        let mut active = Vec::new();
        for (blk, s) in scales.entries().iter().enumerate() {
            for (i, &v) in s.iter().enumerate() {
                if v < 0.0 {
                    return Err(Error::InvalidOracle("scales must be nonnegative".into()));
                }
                if v != 0.0 {
                    active.push((blk, i, v));
                }
            }
        }
        Ok(NoiseOracle::Martingale(MartingaleOracle::Perturbation {
            base,
            scales,
            law,
            active,
        }))
    }

    pub fn markov(
        p: &TtsaProblem,
        kernel: Mat,
        states: Vec<Observation>,
        initial: InitialState,
    ) -> Result<Self> {
        let n = kernel.rows();
        if !kernel.is_square() || n == 0 {
            return Err(Error::InvalidOracle("kernel must be a nonempty square matrix".into()));
        }
        if states.len() != n {
            return Err(Error::InvalidOracle(format!(
                "kernel has {n} states but {} observations were given",
                states.len()
            )));
        }
        check_stochastic(&kernel)?;
        for (i, s) in states.iter().enumerate() {
            s.check_against(p, &format!("states[{i}]"))?;
        }
        if let InitialState::Fixed(x) = initial {
            if x >= n {
                return Err(Error::InvalidOracle(format!("initial state {x} out of range")));
            }
        }
        let stationary = stationary_distribution(&kernel)?;
        let t_mix = mixing_time(&kernel, 0.25)?;
        let rows = (0..n)
            .map(|i| weighted(kernel.row(i), &format!("kernel row {i}")))
            .collect::<Result<Vec<_>>>()?;
        let stationary_index = weighted(&stationary, "stationary law")?;
        Ok(NoiseOracle::Markov(MarkovOracle {
            kernel,
            states,
            stationary,
            t_mix,
            initial,
            rows,
            stationary_index,
        }))
    }

    pub fn as_markov(&self) -> Option<&MarkovOracle> {
        match self {
            NoiseOracle::Markov(m) => Some(m),
            _ => None,
        }
    }

    pub fn is_markov(&self) -> bool {
        matches!(self, NoiseOracle::Markov(_))
    }

    /// Initial oracle state.
    pub fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match self {
            NoiseOracle::Markov(m) => match m.initial {
                InitialState::Stationary => m.stationary_index.sample(rng),
                InitialState::Fixed(x) => x,
            },
            NoiseOracle::Martingale(_) => 0,
        }
    }

    /// Draws the next observation given the current state; allocating form
    /// of [`OracleCursor::advance`].
    pub fn sample_observation<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        current_state: usize,
    ) -> (usize, Observation) {
        let mut c = OracleCursor::at(self, current_state);
        let (s, obs) = c.advance(rng);
        (s, obs.clone())
    }

    /// Finite support with probabilities: atoms for mixtures, states under π
    /// for chains. `None` for continuous perturbation laws.
    fn support(&self) -> Option<(Vec<f64>, Vec<&Observation>)> {
        match self {
            NoiseOracle::Martingale(MartingaleOracle::Mixture { weights, atoms, .. }) => {
                Some((weights.clone(), atoms.iter().collect()))
            }
            NoiseOracle::Markov(m) => Some((m.stationary.clone(), m.states.iter().collect())),
            NoiseOracle::Martingale(MartingaleOracle::Perturbation { .. }) => None,
        }
    }
}

impl MarkovOracle {
    pub fn kernel(&self) -> &Mat {
        &self.kernel
    }
    pub fn states(&self) -> &[Observation] {
        &self.states
    }
    pub fn n_states(&self) -> usize {
        self.states.len()
    }
    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }
    pub fn t_mix(&self) -> usize {
        self.t_mix
    }
    pub fn initial(&self) -> InitialState {
        self.initial
    }
}

/// Sequential sampler over an oracle. Holds the current chain state and a
/// scratch observation so that draws do not allocate.
#[derive(Debug, Clone)]
pub struct OracleCursor<'a> {
    oracle: &'a NoiseOracle,
    state: usize,
    buf: Option<Observation>,
}

impl<'a> OracleCursor<'a> {
    pub fn new<R: Rng + ?Sized>(oracle: &'a NoiseOracle, rng: &mut R) -> Self {
        let s = oracle.initial_state(rng);
        Self::at(oracle, s)
    }

    pub fn at(oracle: &'a NoiseOracle, state: usize) -> Self {
        let buf = match oracle {
            NoiseOracle::Martingale(MartingaleOracle::Perturbation { base, .. }) => {
                Some(base.clone())
            }
            _ => None,
        };
        Self { oracle, state, buf }
    }

    pub fn state(&self) -> usize {
        self.state
    }

    /// Advances one step and returns the new state with its observation.
    #[inline]
    pub fn advance<R: Rng + ?Sized>(&mut self, rng: &mut R) -> (usize, &Observation) {
        match self.oracle {
            NoiseOracle::Markov(m) => {
                self.state = m.rows[self.state].sample(rng);
                (self.state, &m.states[self.state])
            }
            NoiseOracle::Martingale(MartingaleOracle::Mixture { atoms, index, .. }) => {
                self.state = if atoms.len() == 1 { 0 } else { index.sample(rng) };
                (self.state, &atoms[self.state])
            }
            NoiseOracle::Martingale(MartingaleOracle::Perturbation {
                base, law, active, ..
            }) => {
                let buf = self.buf.as_mut().expect("perturbation buffer");
                let base_entries = base.entries();
                let out = buf.entries_mut();
                for &(blk, i, s) in active {
                    out[blk][i] = base_entries[blk][i] + s * law.sample(rng);
                }
                (self.state, buf)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Chains

pub(crate) fn check_stochastic(kernel: &Mat) -> Result<()> {
    for i in 0..kernel.rows() {
        let row = kernel.row(i);
        if row.iter().any(|&x| x < 0.0) {
            return Err(Error::InvalidOracle(format!("kernel row {i} has negative entries")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidOracle(format!(
                "kernel row {i} sums to {s}, not 1"
            )));
        }
    }
    Ok(())
}

/// Stationary law: solves `(P^T − I)π = 0` with the last equation replaced
/// by `Σπ = 1`.
pub fn stationary_distribution(kernel: &Mat) -> Result<Vec<f64>> {
    let n = kernel.rows();
    let mut m = kernel.transpose().sub(&Mat::identity(n))?;
    for j in 0..n {
        m.set(n - 1, j, 1.0);
    }
    let mut rhs = vec![0.0; n];
    rhs[n - 1] = 1.0;
    let lu = linalg::Lu::new(&m)?;
    if lu.is_singular() {
        return Err(Error::NotErgodic("stationary law is not unique".into()));
    }
    let cond = linalg::cond_1(&m)?;
    if cond > MAX_COND {
        return Err(Error::NotErgodic(format!(
            "stationary system ill-conditioned (condition {cond:e})"
        )));
    }
    let pi = lu.solve_vec(&rhs)?;
    if pi.iter().any(|&x| x < -1e-12) {
        return Err(Error::NotErgodic("stationary solve produced negative mass".into()));
    }
    Ok(pi.into_iter().map(|x| x.max(0.0)).collect())
}

/// `max_{x,x'} d_TV(M(x,·), M(x',·))`.
pub fn dobrushin(m: &Mat) -> f64 {
    let n = m.rows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in i + 1..n {
            let tv: f64 = m
                .row(i)
                .iter()
                .zip(m.row(j))
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                * 0.5;
            worst = worst.max(tv);
        }
    }
    worst
}

/// Smallest `t ≥ 1` with `max_{x,x'} d_TV(P^t(x,·), P^t(x',·)) ≤ threshold`.
pub fn mixing_time(kernel: &Mat, threshold: f64) -> Result<usize> {
    check_stochastic(kernel)?;
    let n = kernel.rows();
    let nf = n as f64;
    let k_max = (10.0 * nf * nf * nf.ln()).ceil() as usize + 1000;
    let mut pk = kernel.clone();
    let mut t = None;
    for k in 1..=k_max {
        if dobrushin(&pk) <= threshold {
            t = Some(k);
            break;
        }
        pk = pk.matmul(kernel)?;
    }
    let t = t.ok_or_else(|| {
        Error::NotErgodic(format!(
            "total variation above {threshold} after {k_max} steps"
        ))
    })?;
    // geometric decay at multiples of t
    let pt = pk;
    let mut acc = pt.clone();
    for m in 1..=4 {
        let d = dobrushin(&acc);
        if d > threshold.powi(m) + 1e-12 {
            return Err(Error::NotErgodic(format!(
                "decay check failed: Δ(P^{}) = {d} > {}",
                m as usize * t,
                threshold.powi(m)
            )));
        }
        acc = acc.matmul(&pt)?;
    }
    Ok(t)
}

// ---------------------------------------------------------------------------
// Noise

/// Per-step noise quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSample {
    /// Oracle state before the step (`X_k`).
    pub prev_state: usize,
    /// Oracle state producing the observation (`X_{k+1}`).
    pub state: usize,
    /// `θ_k − θ*`
    pub theta_err: Vec<f64>,
    /// `w_k − w*`
    pub w_err: Vec<f64>,
    pub eps_v: Vec<f64>,
    pub eps_w: Vec<f64>,
    /// `V_{k+1} = ε_V − Ã11(θ_k − θ*) − Ã12(w_k − w*)`
    pub v: Vec<f64>,
    /// `W_{k+1} = ε_W − Ã21(θ_k − θ*) − Ã22(w_k − w*)`
    pub w_noise: Vec<f64>,
}

impl NoiseSample {
    /// Builds the noise terms of one observation at the current iterate.
    pub fn compute(
        p: &TtsaProblem,
        sol: &Solution,
        obs: &Observation,
        prev_state: usize,
        state: usize,
        theta: &[f64],
        w: &[f64],
    ) -> Self {
        let theta_err: Vec<f64> = theta.iter().zip(&sol.theta_star).map(|(a, b)| a - b).collect();
        let w_err: Vec<f64> = w.iter().zip(&sol.w_star).map(|(a, b)| a - b).collect();
        let (eps_v, eps_w) = obs.eps(sol);
        let mut v = eps_v.clone();
        for (i, vi) in v.iter_mut().enumerate() {
            let mut s = 0.0;
            for (j, e) in theta_err.iter().enumerate() {
                s += (obs.a11.get(i, j) - p.a11.get(i, j)) * e;
            }
            for (j, e) in w_err.iter().enumerate() {
                s += (obs.a12.get(i, j) - p.a12.get(i, j)) * e;
            }
            *vi -= s;
        }
        let mut wn = eps_w.clone();
        for (i, wi) in wn.iter_mut().enumerate() {
            let mut s = 0.0;
            for (j, e) in theta_err.iter().enumerate() {
                s += (obs.a21.get(i, j) - p.a21.get(i, j)) * e;
            }
            for (j, e) in w_err.iter().enumerate() {
                s += (obs.a22.get(i, j) - p.a22.get(i, j)) * e;
            }
            *wi -= s;
        }
        Self {
            prev_state,
            state,
            theta_err,
            w_err,
            eps_v,
            eps_w,
            v,
            w_noise: wn,
        }
    }

    pub fn psi(&self, p: &TtsaProblem) -> Vec<f64> {
        p.psi(&self.eps_v, &self.eps_w)
    }
}

/// Covariances of `(ε_V, ε_W)` under the sampling law (stationary law for chains).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseCovariances {
    pub sigma_v: Mat,
    pub sigma_w: Mat,
    /// `E[ε_V ε_W^T]`
    pub sigma_vw: Mat,
}

impl NoiseCovariances {
    /// `Var[ψ] = Σ_V − KΣ_VW^T − Σ_VW K^T + KΣ_WK^T`, `K = A12 A22^{-1}`.
    pub fn sigma_psi(&self, p: &TtsaProblem) -> Mat {
        let k = p.a12_a22inv();
        let kt = k.transpose();
        let t1 = k.matmul(&self.sigma_vw.transpose()).expect("shape");
        let t2 = self.sigma_vw.matmul(&kt).expect("shape");
        let t3 = k.matmul(&self.sigma_w).expect("shape").matmul(&kt).expect("shape");
        let mut s = self.sigma_v.sub(&t1).expect("shape");
        s = s.sub(&t2).expect("shape").add(&t3).expect("shape");
        s.symmetrize()
    }
}

/// Weighted covariance of a finite set of vectors.
fn weighted_cov(w: &[f64], xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Mat {
    let dx = xs[0].len();
    let dy = ys[0].len();
    let mut mx = vec![0.0; dx];
    let mut my = vec![0.0; dy];
    for ((wi, x), y) in w.iter().zip(xs).zip(ys) {
        for (m, v) in mx.iter_mut().zip(x) {
            *m += wi * v;
        }
        for (m, v) in my.iter_mut().zip(y) {
            *m += wi * v;
        }
    }
    let mut c = Mat::zeros(dx, dy);
    for ((wi, x), y) in w.iter().zip(xs).zip(ys) {
        for i in 0..dx {
            for j in 0..dy {
                let v = c.get(i, j) + wi * (x[i] - mx[i]) * (y[j] - my[j]);
                c.set(i, j, v);
            }
        }
    }
    c
}

/// Closed-form `Σ_V`, `Σ_W`, `Σ_VW`.
pub fn noise_covariances(p: &TtsaProblem, oracle: &NoiseOracle) -> Result<NoiseCovariances> {
    let sol = solve_exact(p)?;
    let (dt, dw) = (p.d_theta(), p.d_w());
    if let Some((w, support)) = oracle.support() {
        let (ev, ew): (Vec<_>, Vec<_>) = support.iter().map(|o| o.eps(&sol)).unzip();
        return Ok(NoiseCovariances {
            sigma_v: weighted_cov(&w, &ev, &ev).symmetrize(),
            sigma_w: weighted_cov(&w, &ew, &ew).symmetrize(),
            sigma_vw: weighted_cov(&w, &ev, &ew),
        });
    }
    let NoiseOracle::Martingale(MartingaleOracle::Perturbation { scales, .. }) = oracle else {
        unreachable!("finite-support oracles handled above")
    };
    // independent unit-variance entries: every component of ε is a separate
    // sum of independent terms, so the covariance is diagonal
    let t = &sol.theta_star;
    let w = &sol.w_star;
    let mut sv = Mat::zeros(dt, dt);
    for i in 0..dt {
        let mut v = scales.b1[i].powi(2);
        for j in 0..dt {
            v += (scales.a11.get(i, j) * t[j]).powi(2);
        }
        for j in 0..dw {
            v += (scales.a12.get(i, j) * w[j]).powi(2);
        }
        sv.set(i, i, v);
    }
    let mut sw = Mat::zeros(dw, dw);
    for i in 0..dw {
        let mut v = scales.b2[i].powi(2);
        for j in 0..dt {
            v += (scales.a21.get(i, j) * t[j]).powi(2);
        }
        for j in 0..dw {
            v += (scales.a22.get(i, j) * w[j]).powi(2);
        }
        sw.set(i, i, v);
    }
    Ok(NoiseCovariances {
        sigma_v: sv,
        sigma_w: sw,
        sigma_vw: Mat::zeros(dt, dw),
    })
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<AssumptionCheck>,
    pub noise: Option<NoiseCovariances>,
    /// `sup ‖A_ij(x)‖ ∨ ‖A_ij(x) − A_ij‖`
    pub b_a: f64,
    /// `sup ‖b_i(x)‖ ∨ ‖b_i(x) − b_i‖`
    pub b_b: f64,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> Vec<&AssumptionCheck> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    /// Turns any failure into [`Error::AssumptionViolated`].
    pub fn strict(&self) -> Result<()> {
        let f = self.failures();
        if f.is_empty() {
            return Ok(());
        }
        Err(Error::AssumptionViolated(
            f.iter()
                .map(|c| format!("{}: {}", c.name, c.message))
                .collect::<Vec<_>>()
                .join("; "),
        ))
    }
}

/// Tolerance for exact (closed-form) mean and constancy checks.
pub const VALIDATION_TOL: f64 = 1e-10;

pub fn validate_assumptions(p: &TtsaProblem, oracle: &NoiseOracle) -> ValidationReport {
    let mut checks = Vec::new();
    let mut push = |name: &str, passed: bool, value: f64, message: String| {
        checks.push(AssumptionCheck {
            name: name.into(),
            passed,
            value,
            message,
        })
    };

    let h22 = eig_check_hurwitz(p.a22());
    push(
        "A4-a22",
        h22.stable,
        h22.min_real_part,
        format!("min real part of eig(a22) = {:.6e}", h22.min_real_part),
    );
    let hd = eig_check_hurwitz(p.delta());
    push(
        "A4-delta",
        hd.stable,
        hd.min_real_part,
        format!("min real part of eig(delta) = {:.6e}", hd.min_real_part),
    );

    let sol = solve_exact(p).ok();
    if sol.is_none() {
        push(
            "solution",
            false,
            f64::NAN,
            "delta is singular; theta*, w* undefined".into(),
        );
    }

    // sup-norm bounds and mean checks
    let (mut b_a, mut b_b) = (0.0_f64, 0.0_f64);
    let mean_dev;
    match oracle {
        NoiseOracle::Martingale(MartingaleOracle::Perturbation {
            base, scales, law, ..
        }) => {
            let lb = law.bound();
            let (ba0, bb0) = base.sup_norms(p);
            let sa = |m: &Mat| m.scale(lb).op_norm();
            b_a = ba0
                + [&scales.a11, &scales.a12, &scales.a21, &scales.a22]
                    .iter()
                    .map(|m| sa(m))
                    .fold(0.0, f64::max);
            b_b = bb0 + lb * linalg::norm2(&scales.b1).max(linalg::norm2(&scales.b2));
            mean_dev = base.max_deviation(p);
        }
        _ => {
            let (w, support) = oracle.support().expect("finite support");
            for o in &support {
                let (a, b) = o.sup_norms(p);
                b_a = b_a.max(a);
                b_b = b_b.max(b);
            }
            let mut mean = support[0].clone();
            for (blk, e) in mean.entries_mut().into_iter().enumerate() {
                for (i, v) in e.iter_mut().enumerate() {
                    *v = w
                        .iter()
                        .zip(&support)
                        .map(|(wi, o)| wi * o.entries()[blk][i])
                        .sum();
                }
            }
            mean_dev = mean.max_deviation(p);
        }
    }
    push(
        "A6",
        b_a.is_finite() && b_b.is_finite(),
        b_a.max(b_b),
        format!("b_A = {b_a:.6e}, b_b = {b_b:.6e}"),
    );
    push(
        "A2",
        b_a.is_finite() && b_b.is_finite(),
        b_a.max(b_b),
        "all moments finite by boundedness".into(),
    );
    let mean_name = if oracle.is_markov() { "B1-mean" } else { "A1" };
    push(
        mean_name,
        mean_dev <= VALIDATION_TOL,
        mean_dev,
        format!("max |E[A_ij(X)] - A_ij|, |E[b_i(X)] - b_i| = {mean_dev:.6e}"),
    );

    match oracle {
        NoiseOracle::Markov(m) => {
            push(
                "B1-ergodic",
                true,
                m.t_mix as f64,
                format!("t_mix = {}", m.t_mix),
            );
            if let Some(sol) = &sol {
                let dev = markov_conditional_cov_spread(m, sol);
                push(
                    "A3",
                    dev <= VALIDATION_TOL,
                    dev,
                    if dev <= VALIDATION_TOL {
                        "conditional second moment of (eps_V, eps_W) constant across states".into()
                    } else {
                        format!(
                            "not constant: conditional second moment varies across states by {dev:.6e} (expected under Markov noise)"
                        )
                    },
                );
            }
        }
        NoiseOracle::Martingale(_) => push(
            "A3",
            true,
            0.0,
            "observations are i.i.d.; conditional covariance is constant".into(),
        ),
    }

    let noise = noise_covariances(p, oracle).ok();
    ValidationReport {
        checks,
        noise,
        b_a,
        b_b,
    }
}

/// Max entrywise deviation of `E[εε^T | X_k = x]` from its π-average.
fn markov_conditional_cov_spread(m: &MarkovOracle, sol: &Solution) -> f64 {
    let n = m.n_states();
    let eps: Vec<Vec<f64>> = m
        .states
        .iter()
        .map(|o| {
            let (mut v, w) = o.eps(sol);
            v.extend(w);
            v
        })
        .collect();
    let d = eps[0].len();
    let cond: Vec<Mat> = (0..n)
        .map(|x| {
            let mut c = Mat::zeros(d, d);
            for (y, e) in eps.iter().enumerate() {
                c.axpy(m.kernel.get(x, y), &Mat::outer(e, e)).expect("shape");
            }
            c
        })
        .collect();
    let mut avg = Mat::zeros(d, d);
    for (x, c) in cond.iter().enumerate() {
        avg.axpy(m.stationary[x], c).expect("shape");
    }
    cond.iter()
        .map(|c| c.sub(&avg).expect("shape").max_abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Config format

/// Oracle section of a problem file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum OracleSpec {
    Deterministic,
    Mixture {
        weights: Vec<f64>,
        atoms: Vec<ObservationSpec>,
    },
    Perturbation {
        #[serde(default)]
        scales: ObservationSpec,
        law: PerturbationLaw,
    },
    Markov {
        kernel: Mat,
        states: Vec<ObservationSpec>,
        #[serde(default)]
        initial: InitialState,
    },
}

impl OracleSpec {
    pub fn build(&self, p: &TtsaProblem) -> Result<NoiseOracle> {
        let base = p.mean_observation();
        match self {
            OracleSpec::Deterministic => Ok(NoiseOracle::deterministic(p)),
            OracleSpec::Mixture { weights, atoms } => NoiseOracle::mixture(
                p,
                weights.clone(),
                atoms.iter().map(|a| a.resolve(&base)).collect(),
            ),
            OracleSpec::Perturbation { scales, law } => {
                NoiseOracle::perturbation(p, base, scales, *law)
            }
            OracleSpec::Markov {
                kernel,
                states,
                initial,
            } => NoiseOracle::markov(
                p,
                kernel.clone(),
                states.iter().map(|s| s.resolve(&base)).collect(),
                *initial,
            ),
        }
    }
}
