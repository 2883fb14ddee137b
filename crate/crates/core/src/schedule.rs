//! Polynomial two-timescale step sizes and their admissibility checks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::LyapunovCertificate;

/// `β_k = c0_beta (k+k0)^{-b}`, `γ_k = c0_gamma (k+k0)^{-a}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub a_exp: f64,
    pub b_exp: f64,
    pub c0_gamma: f64,
    pub c0_beta: f64,
    pub k0: u64,
}

impl StepSchedule {
    /// Checks only that the constants are positive and the exponents lie in
    /// `(0, 1]`; the stricter ordering `1/2 < a < b < 1` is reported by
    /// [`check_schedule`] so deliberately invalid schedules can still run.
    pub fn new(a_exp: f64, b_exp: f64, c0_gamma: f64, c0_beta: f64, k0: u64) -> Result<Self> {
        for (name, v) in [("a", a_exp), ("b", b_exp)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidSchedule(format!(
                    "exponent {name} = {v} outside (0, 1]"
                )));
            }
        }
        for (name, v) in [("c0_gamma", c0_gamma), ("c0_beta", c0_beta)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidSchedule(format!("{name} = {v} must be positive")));
            }
        }
        Ok(Self {
            a_exp,
            b_exp,
            c0_gamma,
            c0_beta,
            k0,
        })
    }

    #[inline]
    pub fn beta(&self, k: u64) -> f64 {
        self.c0_beta * ((k + self.k0) as f64).powf(-self.b_exp)
    }

    #[inline]
    pub fn gamma(&self, k: u64) -> f64 {
        self.c0_gamma * ((k + self.k0) as f64).powf(-self.a_exp)
    }

    /// `c0_beta / c0_gamma`.
    pub fn r_step(&self) -> f64 {
        self.c0_beta / self.c0_gamma
    }

    /// Errors unless every step from `k = 0` is finite.
    pub fn require_finite_steps(&self) -> Result<()> {
        if self.k0 == 0 {
            return Err(Error::InvalidSchedule(
                "k0 must be at least 1 so that the step at k = 0 is finite".into(),
            ));
        }
        Ok(())
    }
}

/// Precomputed `(β_k, γ_k)` for `k < len`, shared across replications.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTable {
    pub schedule: StepSchedule,
    beta: Vec<f64>,
    gamma: Vec<f64>,
}

impl StepTable {
    pub fn new(schedule: StepSchedule, len: u64) -> Self {
        let beta = (0..len).map(|k| schedule.beta(k)).collect();
        let gamma = (0..len).map(|k| schedule.gamma(k)).collect();
        Self {
            schedule,
            beta,
            gamma,
        }
    }

    #[inline]
    pub fn steps(&self, k: u64) -> (f64, f64) {
        match (self.beta.get(k as usize), self.gamma.get(k as usize)) {
            (Some(&b), Some(&g)) => (b, g),
            _ => (self.schedule.beta(k), self.schedule.gamma(k)),
        }
    }
}

/// Named exponent choices parameterized by the planned horizon `n`
/// (natural logarithm).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// `a = 1/2 + 1/ln n`, `b = a + 1/ln n`
    PrMartingale,
    /// `a = 1/2 + 1/ln n`, `b = 1 − 1/ln n`
    LastMartingale,
    /// `a = 2/3`, `b = 2/3 + 1/ln n`
    PrMarkov,
    /// `a = 2/3`, `b = 1 − 1/ln n`
    LastMarkov,
}

impl Preset {
    pub fn exponents(self, horizon: u64) -> Result<(f64, f64)> {
        if horizon < 3 {
            return Err(Error::InvalidSchedule(format!(
                "preset needs a horizon of at least 3, got {horizon}"
            )));
        }
        let il = 1.0 / (horizon as f64).ln();
        Ok(match self {
            Preset::PrMartingale => (0.5 + il, 0.5 + 2.0 * il),
            Preset::LastMartingale => (0.5 + il, 1.0 - il),
            Preset::PrMarkov => (2.0 / 3.0, 2.0 / 3.0 + il),
            Preset::LastMarkov => (2.0 / 3.0, 1.0 - il),
        })
    }
}

/// Schedule block of an experiment file: either explicit exponents `a, b`
/// or a `preset` (optionally pinned to a `horizon`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<u64>,
    pub c0_gamma: f64,
    pub c0_beta: f64,
    pub k0: u64,
}

impl ScheduleSpec {
    pub fn explicit(a: f64, b: f64, c0_gamma: f64, c0_beta: f64, k0: u64) -> Self {
        Self {
            a: Some(a),
            b: Some(b),
            preset: None,
            horizon: None,
            c0_gamma,
            c0_beta,
            k0,
        }
    }

    pub fn preset(preset: Preset, c0_gamma: f64, c0_beta: f64, k0: u64) -> Self {
        Self {
            a: None,
            b: None,
            preset: Some(preset),
            horizon: None,
            c0_gamma,
            c0_beta,
            k0,
        }
    }

    /// Whether the resolved schedule depends on the run horizon.
    pub fn depends_on_horizon(&self) -> bool {
        self.preset.is_some() && self.horizon.is_none()
    }

    /// Resolves to a concrete schedule for a run of length `n`. A preset
    /// with a pinned `horizon` ignores `n`.
    pub fn resolve(&self, n: u64) -> Result<StepSchedule> {
        let (a, b) = match (self.preset, self.a, self.b) {
            (Some(p), None, None) => p.exponents(self.horizon.unwrap_or(n))?,
            (None, Some(a), Some(b)) => {
                if self.horizon.is_some() {
                    return Err(Error::InvalidSchedule(
                        "horizon is only meaningful with a preset".into(),
                    ));
                }
                (a, b)
            }
            (Some(_), _, _) => {
                return Err(Error::InvalidSchedule(
                    "give either a preset or explicit a and b, not both".into(),
                ))
            }
            (None, _, _) => {
                return Err(Error::InvalidSchedule(
                    "missing field: either preset or both a and b".into(),
                ))
            }
        };
        StepSchedule::new(a, b, self.c0_gamma, self.c0_beta, self.k0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleCheck {
    pub name: String,
    pub passed: bool,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub checks: Vec<ScheduleCheck>,
    /// Smallest `k0` meeting every `k0` lower bound below.
    pub implied_min_k0: u64,
    /// Sufficient conditions that involve constants with no numerical value.
    pub unchecked: Vec<String>,
    pub a22: f64,
    pub a_delta: f64,
}

impl ScheduleReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&ScheduleCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Indices at which the ratio conditions are evaluated: every `k` below
/// `10^5`, then a geometric tail up to `10^15`.
fn ratio_grid() -> impl Iterator<Item = u64> {
    let dense = 0..100_000u64;
    let tail = (0..=200).map(|i| (1e5 * 10f64.powf(i as f64 * 10.0 / 200.0)) as u64);
    dense.chain(tail)
}

/// Worst violation `lhs − rhs` over the grid; also returns the offending `k`.
fn worst_ratio(f: impl Fn(u64) -> (f64, f64)) -> (f64, u64) {
    let mut worst = (f64::NEG_INFINITY, 0);
    for k in ratio_grid() {
        let (lhs, rhs) = f(k);
        let gap = (lhs - 1.0) - (rhs - 1.0);
        if gap > worst.0 {
            worst = (gap, k);
        }
    }
    worst
}

/// Smallest integer `k0 ≥ 1` with `k0^{e} ≥ rhs` for `e > 0`.
fn min_k0_pow(e: f64, rhs: f64) -> u64 {
    if rhs <= 1.0 {
        return 1;
    }
    let est = rhs.powf(1.0 / e).ceil().max(1.0);
    if !(est < 2f64.powi(62)) {
        return u64::MAX;
    }
    // the float estimate is off by a few units at most
    let mut k = est as u64;
    for _ in 0..64 {
        if k > 1 && ((k - 1) as f64).powf(e) >= rhs {
            k -= 1;
        } else {
            break;
        }
    }
    for _ in 0..64 {
        if (k as f64).powf(e) < rhs {
            k += 1;
        } else {
            break;
        }
    }
    k
}

/// Checks the constant-free step-size conditions against the stability
/// certificates of `A22` and `Δ` and the moment order `p`.
pub fn check_schedule(
    s: &StepSchedule,
    cert22: &LyapunovCertificate,
    cert_d: &LyapunovCertificate,
    p: f64,
    c_a5: f64,
) -> ScheduleReport {
    let a22 = cert22.contraction_rate;
    let ad = cert_d.contraction_rate;
    let (a, b) = (s.a_exp, s.b_exp);
    let mut checks = Vec::new();
    let mut push = |name: &str, passed: bool, message: String| {
        checks.push(ScheduleCheck {
            name: name.into(),
            passed,
            message,
        })
    };

    let ordered = 0.5 < a && a < b && b < 1.0;
    push(
        "exponents",
        ordered,
        if ordered {
            format!("1/2 < a = {a} < b = {b} < 1")
        } else if a >= b {
            format!("a_exp must be strictly smaller than b_exp (a = {a}, b = {b})")
        } else {
            format!("exponents must satisfy 1/2 < a < b < 1 (a = {a}, b = {b})")
        },
    );
    push(
        "gamma0-max-step",
        s.c0_gamma <= cert22.max_step,
        format!("c0_gamma = {} vs max step {:.6e} for a22", s.c0_gamma, cert22.max_step),
    );
    push(
        "beta0-max-step",
        s.c0_beta <= cert_d.max_step,
        format!("c0_beta = {} vs max step {:.6e} for delta", s.c0_beta, cert_d.max_step),
    );

    if s.k0 == 0 {
        push("k0-positive", false, "k0 = 0 makes the first step infinite".into());
    }
    let k0 = s.k0.max(1);
    let sched = StepSchedule { k0, ..*s };
    let (g1, k1) = worst_ratio(|k| {
        (
            sched.gamma(k) / sched.gamma(k + 1),
            1.0 + a22 / 8.0 * sched.gamma(k + 1),
        )
    });
    push(
        "ratio-gamma-a22",
        g1 <= 0.0,
        format!("gamma_k/gamma_(k+1) <= 1 + (a22/8) gamma_(k+1); worst excess {g1:.3e} at k = {k1}"),
    );
    let (g2, k2) = worst_ratio(|k| {
        (
            sched.beta(k) / sched.beta(k + 1),
            1.0 + ad / 16.0 * sched.beta(k + 1),
        )
    });
    push(
        "ratio-beta-delta",
        g2 <= 0.0,
        format!("beta_k/beta_(k+1) <= 1 + (a_delta/16) beta_(k+1); worst excess {g2:.3e} at k = {k2}"),
    );
    let (g3, k3) = worst_ratio(|k| {
        (
            sched.gamma(k) / sched.gamma(k + 1),
            1.0 + ad / 16.0 * sched.beta(k + 1),
        )
    });
    push(
        "ratio-gamma-delta",
        g3 <= 0.0,
        format!("gamma_k/gamma_(k+1) <= 1 + (a_delta/16) beta_(k+1); worst excess {g3:.3e} at k = {k3}"),
    );

    let r = s.r_step();
    let r_max = a22 / (2.0 * ad);
    push(
        "r-step",
        r <= r_max,
        format!("r_step = {r:.6e} vs a22/(2 a_delta) = {r_max:.6e} (ratio {:.3})", r / r_max),
    );

    let mut bounds = Vec::new();
    let mut k0_check = |name: &str, e: f64, rhs: f64, desc: &str| {
        let need = if e > 0.0 { min_k0_pow(e, rhs) } else { u64::MAX };
        bounds.push(need);
        (name.to_string(), s.k0 >= need, format!("{desc}: needs k0 >= {need}, have {}", s.k0))
    };
    let c1 = k0_check(
        "k0-gamma",
        1.0 - a,
        32.0 * a / (a22 * s.c0_gamma),
        "k0^(1-a) >= 32a/(a22 c0_gamma)",
    );
    let c2 = k0_check(
        "k0-beta",
        1.0 - b,
        32.0 * b / (ad * s.c0_beta),
        "k0^(1-b) >= 32b/(a_delta c0_beta)",
    );
    let c3 = k0_check(
        "k0-beta-2",
        1.0 - b,
        2.0 * b / (ad * s.c0_beta),
        "k0^(1-b) >= 2b/(a_delta c0_beta)",
    );
    let c4 = k0_check(
        "k0-moment",
        1.0,
        c_a5 * p.powf(4.0 / b),
        &format!("k0 >= C p^(4/b) with C = {c_a5}, p = {p}"),
    );
    for (n, ok, msg) in [c1, c2, c3, c4] {
        push(&n, ok, msg);
    }
    let implied_min_k0 = bounds.into_iter().max().unwrap_or(1).max(1);

    ScheduleReport {
        checks,
        implied_min_k0,
        unchecked: vec![
            "r_step <= a_delta/(2 ||A12|| sqrt(kappa_delta) l_inf): l_inf has no closed form".into(),
            "r_step <= a22/(2 ||A12|| sqrt(kappa_22) c_inf): depends on l_inf".into(),
            "gamma0 <= a22/(12 p^2 kappa_22 m^2 + a22^2/2): noise moment constant m unspecified".into(),
            "beta0 <= a_delta/(4 p^4 C_2): moment constants unspecified".into(),
        ],
        a22,
        a_delta: ad,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{solve_lyapunov, Mat};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cert(x: f64) -> LyapunovCertificate {
        solve_lyapunov(&Mat::new(1, 1, vec![x]).unwrap()).unwrap()
    }

    #[test]
    fn min_k0_is_smallest() {
        for &(e, rhs) in &[(0.5, 10.0), (0.25, 3.0), (0.4, 1234.5)] {
            let k = min_k0_pow(e, rhs);
            assert!((k as f64).powf(e) >= rhs);
            assert!(((k - 1) as f64).powf(e) < rhs);
        }
        assert_eq!(min_k0_pow(0.1, 1e3), u64::MAX);
        assert_eq!(min_k0_pow(0.3, 0.5), 1);
    }

    #[test]
    fn beta_examples() {
        let s = StepSchedule::new(0.6, 0.75, 1.0, 1.0, 0).unwrap();
        assert_relative_eq!(s.beta(15), 15f64.powf(-0.75), epsilon = 1e-15);
        let s = StepSchedule::new(0.6, 0.75, 1.0, 0.3, 10).unwrap();
        assert_relative_eq!(s.beta(0), 0.3 * 10f64.powf(-0.75), epsilon = 1e-15);
        assert!(StepSchedule::new(0.6, 0.75, 1.0, 0.3, 0)
            .unwrap()
            .require_finite_steps()
            .is_err());
    }

    #[test]
    fn ratio_bounds_on_grid() {
        let s = StepSchedule::new(0.55, 0.8, 0.7, 0.2, 3).unwrap();
        for k in 0..100_000u64 {
            let kk = (k + s.k0) as f64;
            assert!(s.beta(k) / s.beta(k + 1) <= 1.0 + s.b_exp / kk + 1e-15);
            assert!(s.gamma(k) / s.gamma(k + 1) <= 1.0 + s.a_exp / kk + 1e-15);
            assert!(s.beta(k + 1) <= s.beta(k) && s.gamma(k + 1) <= s.gamma(k));
            assert!(s.beta(k + 1) / s.gamma(k + 1) <= s.beta(k) / s.gamma(k));
            if k >= 1 {
                assert!(s.beta(k) / s.gamma(k) < s.r_step());
            }
        }
    }

    #[test]
    fn asymptotic_regime_passes() {
        let s = StepSchedule::new(0.55, 0.6, 0.5, 0.1, 1_000_000).unwrap();
        let r = check_schedule(&s, &cert(1.0), &cert(1.0), 2.0, 1.0);
        assert!(r.all_passed(), "{r:#?}");
        assert!(r.implied_min_k0 <= 1_000_000);
    }

    #[test]
    fn equal_exponents_fail() {
        let s = StepSchedule::new(0.7, 0.7, 0.5, 0.1, 1000).unwrap();
        let r = check_schedule(&s, &cert(1.0), &cert(1.0), 2.0, 1.0);
        let c = r.check("exponents").unwrap();
        assert!(!c.passed);
        assert!(c.message.contains("strictly smaller"));
    }

    #[test]
    fn r_step_boundary_fails_by_factor_two() {
        // a22 = a_delta, so a22/(2 a_delta) = 1/2; r_step = a22/a_delta = 1
        let s = StepSchedule::new(0.55, 0.6, 0.5, 0.5, 1_000_000).unwrap();
        let r = check_schedule(&s, &cert(1.0), &cert(1.0), 2.0, 1.0);
        let c = r.check("r-step").unwrap();
        assert!(!c.passed);
        assert!(c.message.contains("ratio 2.000"), "{}", c.message);
    }

    #[test]
    fn presets_use_natural_log() {
        let n = 1u64 << 16;
        let l = (n as f64).ln();
        let (a, b) = Preset::PrMartingale.exponents(n).unwrap();
        assert_relative_eq!(a, 0.5 + 1.0 / l);
        assert_relative_eq!(b, 0.5 + 2.0 / l);
        let (a, b) = Preset::LastMarkov.exponents(n).unwrap();
        assert_relative_eq!(a, 2.0 / 3.0);
        assert_relative_eq!(b, 1.0 - 1.0 / l);
        let spec = ScheduleSpec::preset(Preset::PrMarkov, 1.0, 0.5, 10);
        let s = spec.resolve(n).unwrap();
        assert_relative_eq!(s.b_exp, 2.0 / 3.0 + 1.0 / l);
        assert!(spec.depends_on_horizon());
    }

    #[test]
    fn spec_rejects_mixed_forms() {
        let mut spec = ScheduleSpec::preset(Preset::PrMarkov, 1.0, 0.5, 10);
        spec.a = Some(0.6);
        assert!(spec.resolve(100).is_err());
        let spec = ScheduleSpec {
            a: Some(0.6),
            ..ScheduleSpec::explicit(0.6, 0.7, 1.0, 1.0, 1)
        };
        assert!(spec.resolve(100).is_ok());
    }

    proptest! {
        #[test]
        fn steps_positive_and_nonincreasing(
            a in 0.51f64..0.99, db in 0.0f64..0.4, c0g in 0.01f64..5.0,
            c0b in 0.01f64..5.0, k0 in 1u64..1000, k in 0u64..1_000_000,
        ) {
            let b = (a + db).min(0.999);
            let s = StepSchedule::new(a, b, c0g, c0b, k0).unwrap();
            prop_assert!(s.beta(k) > 0.0 && s.gamma(k) > 0.0);
            prop_assert!(s.beta(k + 1) <= s.beta(k));
            prop_assert!(s.gamma(k + 1) <= s.gamma(k));
            prop_assert!(s.beta(k + 1) / s.gamma(k + 1) <= s.beta(k) / s.gamma(k) * (1.0 + 1e-14));
        }
    }
}
