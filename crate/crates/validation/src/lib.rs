//! Benchmark problems shared by the acceptance suite. The configs live in
//! `configs/` at the workspace root so the CLI and the suite run the same
//! problems.

use std::path::PathBuf;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use ttsa_core::linalg::{eigenvalues, Mat};
use ttsa_core::model::TtsaProblem;
use ttsa_lab::config::{ExperimentConfig, Resolved};

pub fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn config_path(name: &str) -> PathBuf {
    configs_dir().join(name)
}

/// Parses `configs/<name>` and resolves its problem and oracle.
pub fn load(name: &str) -> (ExperimentConfig, Resolved) {
    let path = config_path(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let cfg = ExperimentConfig::parse(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
    let r = cfg.resolve().unwrap_or_else(|e| panic!("{name}: {e}"));
    (cfg, r)
}

fn gaussian_mat<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Mat {
    let data = (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Mat::new(rows, cols, data).expect("shape")
}

fn min_real_part(a: &Mat) -> f64 {
    eigenvalues(a).expect("square").iter().map(|e| e.0).fold(f64::INFINITY, f64::min)
}

/// Random instance with `A22` and `Δ` both Hurwitz (min real part of the
/// spectrum at least 0.3).
pub fn random_problem(rng: &mut ChaCha8Rng, d_theta: usize, d_w: usize) -> TtsaProblem {
    let mut a22 = gaussian_mat(rng, d_w, d_w, 0.4 / (d_w as f64).sqrt());
    let shift = (0.3 - min_real_part(&a22)).max(0.0);
    a22.axpy(shift + rng.random::<f64>(), &Mat::identity(d_w)).expect("shape");
    let a12 = gaussian_mat(rng, d_theta, d_w, 0.5);
    let a21 = gaussian_mat(rng, d_w, d_theta, 0.5);
    let mut a11 = gaussian_mat(rng, d_theta, d_theta, 0.4 / (d_theta as f64).sqrt());
    let b1: Vec<f64> = (0..d_theta).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b2: Vec<f64> = (0..d_w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let trial = TtsaProblem::new(a11.clone(), a12.clone(), a21.clone(), a22.clone(), b1.clone(), b2.clone())
        .expect("invertible a22");
    let shift = (0.3 - min_real_part(trial.delta())).max(0.0);
    a11.axpy(shift + 0.5 * rng.random::<f64>(), &Mat::identity(d_theta)).expect("shape");
    TtsaProblem::new(a11, a12, a21, a22, b1, b2).expect("invertible a22")
}

/// Random row-stochastic matrix with every entry at least `floor / n`.
pub fn random_kernel(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> Mat {
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let mut r: Vec<f64> = (0..n).map(|_| floor / n as f64 + rng.random::<f64>().powi(3)).collect();
        let s: f64 = r.iter().sum();
        r.iter_mut().for_each(|x| *x /= s);
        rows.push(r);
    }
    Mat::from_rows(&rows).expect("square")
}

/// One acceptance line.
pub struct Verdict {
    pub id: u32,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Verdict {
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} {}: {} ({:.1}s) {}",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.seconds,
            self.detail
        )
    }
}
