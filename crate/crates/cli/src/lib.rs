//! `ttsa-lab`: configuration, orchestration and artifact emission for
//! two-timescale stochastic approximation experiments.

pub mod commands;
pub mod config;
pub mod error;

use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

pub use config::ExperimentConfig;
pub use error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Trajectory CSVs and an MSE-vs-k summary
    Simulate,
    /// Gaussian-approximation distances over the n grid and fitted rates
    Rates,
    /// Exact limiting covariances and the convergence gap table
    Covariance,
    /// GTD/TDC on a finite MDP, then simulate (and rates when a grid is set)
    Rl,
}

#[derive(Debug, Parser)]
#[command(name = "ttsa-lab", version, about = "Linear two-timescale stochastic approximation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment configuration (JSON)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config's output_dir
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (defaults to the available cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Exit with status 4 when a validation or acceptance check fails
    #[arg(long, global = true)]
    pub strict: bool,
    /// Print the resolved configuration and exit
    #[arg(long, global = true)]
    pub dry_run: bool,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Runs one invocation; the `Ok` value is the text printed on stdout.
pub fn execute(cli: &Cli) -> Result<String, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("missing required flag --config".into()))?;
    let bytes = fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let text = std::str::from_utf8(&bytes).map_err(|_| CliError::Config("config is not UTF-8".into()))?;
    let mut cfg = ExperimentConfig::parse(text)?;
    let seed = cli
        .seed
        .or(cfg.seed)
        .ok_or_else(|| CliError::Config("no seed: pass --seed or set `seed` in the config".into()))?;
    cfg.seed = Some(seed);
    if let Some(out) = &cli.out {
        cfg.output_dir = Some(out.clone());
    }
    let resolved = cfg.resolve()?;

    if cli.dry_run {
        let mut schedules = serde_json::Map::new();
        let mut ns: Vec<u64> = cfg.n_grid.clone();
        if let Ok(h) = cfg.horizon() {
            ns.push(h);
        }
        ns.sort_unstable();
        ns.dedup();
        for n in ns {
            schedules.insert(n.to_string(), serde_json::to_value(cfg.schedule.resolve(n)?).expect("serializable"));
        }
        let v = serde_json::json!({
            "command": format!("{:?}", cli.command).to_lowercase(),
            "config_sha256": sha256_hex(&bytes),
            "config": cfg,
            "resolved_schedules": schedules,
            "d_theta": resolved.setup.problem.d_theta(),
            "d_w": resolved.setup.problem.d_w(),
        });
        return Ok(serde_json::to_string_pretty(&v).expect("serializable") + "\n");
    }

    let out = cfg
        .output_dir
        .clone()
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set `output_dir`".into()))?;
    fs::create_dir_all(&out)?;
    let strict = cli.strict;
    let ctx = commands::Ctx {
        cfg,
        config_sha256: sha256_hex(&bytes),
        seed,
        out: out.clone(),
        strict,
    };
    let fails = match cli.command {
        Command::Simulate => commands::simulate(&ctx, &resolved)?,
        Command::Rates => commands::rates(&ctx, &resolved)?,
        Command::Covariance => commands::covariance(&ctx, &resolved)?,
        Command::Rl => commands::rl(&ctx, &resolved)?,
    };
    if strict && !fails.is_empty() {
        return Err(CliError::Strict(fails.join("; ")));
    }
    let mut msg = format!("wrote artifacts to {}\n", out.display());
    for f in &fails {
        msg.push_str(&format!("warning: {f}\n"));
    }
    Ok(msg)
}

/// Parses `args` and runs on a pool of `--threads` workers when given.
/// Clap's own errors (and `--help`) come back as `Err(clap::Error)`.
pub fn run_args<I, T>(args: I) -> Result<Result<String, CliError>, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    Ok(match cli.threads {
        Some(t) => match rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build() {
            Ok(pool) => pool.install(|| execute(&cli)),
            Err(e) => Err(CliError::Config(format!("cannot build thread pool: {e}"))),
        },
        None => execute(&cli),
    })
}

/// Parses `args`, runs, prints, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match run_args(args) {
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                2
            } else {
                0
            }
        }
        Ok(Ok(text)) => {
            print!("{text}");
            0
        }
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
