//! Command line front end.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use photovol::eval::PhantomSpec;
use photovol::reconstruct::{ReconWeights, ReferenceMode};

use crate::case::Case;
use crate::config::Config;
use crate::error::{PipelineError, Result};
use crate::report;
use crate::stages::{self, StageOutput};

#[derive(Debug, Parser)]
#[command(
    name = "photovol",
    version,
    about = "3D reconstruction and segmentation of serial dissection photographs"
)]
pub struct Cli {
    /// Extra TOML configuration applied after the case's config.toml.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CaseArg {
    /// Case directory.
    pub case: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RefArg {
    Hard,
    Soft,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Correct pixel size and distortion from ruler landmarks.
    Calibrate(CaseArg),
    /// Extract tissue masks from seed clicks.
    Mask(CaseArg),
    /// Order, resample and centre the slices into a stack.
    Stack(CaseArg),
    /// Align the stack to the reference volume.
    Reconstruct {
        #[command(flatten)]
        case: CaseArg,
        #[arg(long, value_enum)]
        reference: Option<RefArg>,
        /// Reference volume (NIfTI), relative to the case directory.
        #[arg(long)]
        reference_volume: Option<String>,
        /// Objective weights as alpha,beta,gamma,nu.
        #[arg(long, value_parser = parse_weights)]
        weights: Option<ReconWeights>,
    },
    /// Segment the reconstruction with a probabilistic atlas.
    Segment {
        #[command(flatten)]
        case: CaseArg,
        /// Atlas probabilities (NIfTI); labels.tsv must sit next to it.
        #[arg(long)]
        atlas: Option<String>,
        /// Write the posterior volume (true or false).
        #[arg(long)]
        posterior: Option<bool>,
    },
    /// Structure volumes, Dice against a truth map, or cross-case
    /// correlation with `--correlate`.
    Evaluate {
        /// Case directory (omit with --correlate).
        case: Option<PathBuf>,
        #[arg(long)]
        truth: Option<String>,
        /// Measurement table (case, structure, value) to correlate with.
        #[arg(long, requires = "cases")]
        correlate: Option<PathBuf>,
        #[arg(long, num_args = 1..)]
        cases: Vec<PathBuf>,
        /// Output directory for the correlation report.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write a synthetic case with known ground truth.
    Phantom {
        /// Directory to create.
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        slices: Option<usize>,
    },
    /// Print the effective configuration.
    Config { case: Option<PathBuf> },
    /// Serve the annotation and job API over HTTP.
    Serve {
        /// Directory holding one sub-directory per case.
        root: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
}

fn parse_weights(s: &str) -> std::result::Result<ReconWeights, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [alpha, beta, gamma, nu] => Ok(ReconWeights {
            alpha,
            beta,
            gamma,
            nu,
        }),
        _ => Err("expected four comma-separated numbers: alpha,beta,gamma,nu".into()),
    }
}

fn load(case: &Path, extra: Option<&Path>) -> Result<(Case, Config)> {
    let c = Case::open(case)?;
    let cfg = Config::load(Some(case), extra)?;
    Ok((c, cfg))
}

fn report(out: &StageOutput) {
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    for p in &out.products {
        println!("{}", p.display());
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let extra = cli.config.as_deref();
    match cli.command {
        Command::Calibrate(a) => {
            let (c, cfg) = load(&a.case, extra)?;
            report(&stages::calibrate(&c, &cfg)?);
        }
        Command::Mask(a) => {
            let (c, cfg) = load(&a.case, extra)?;
            report(&stages::mask(&c, &cfg)?);
        }
        Command::Stack(a) => {
            let (c, cfg) = load(&a.case, extra)?;
            report(&stages::stack(&c, &cfg)?);
        }
        Command::Reconstruct {
            case,
            reference,
            reference_volume,
            weights,
        } => {
            let (c, mut cfg) = load(&case.case, extra)?;
            if let Some(r) = reference {
                cfg.reconstruct.reference = match r {
                    RefArg::Hard => ReferenceMode::Hard,
                    RefArg::Soft => ReferenceMode::Soft,
                };
            }
            if let Some(v) = reference_volume {
                cfg.reconstruct.reference_volume = v;
            }
            if weights.is_some() {
                cfg.reconstruct.weights = weights;
            }
            cfg.validate()?;
            report(&stages::reconstruct(&c, &cfg, &mut |_| {})?);
        }
        Command::Segment {
            case,
            atlas,
            posterior,
        } => {
            let (c, mut cfg) = load(&case.case, extra)?;
            if atlas.is_some() {
                cfg.segment.atlas = atlas;
            }
            if let Some(p) = posterior {
                cfg.segment.write_posterior = p;
            }
            report(&stages::segment(&c, &cfg)?);
        }
        Command::Evaluate {
            case,
            truth,
            correlate,
            cases,
            out,
        } => match (correlate, case) {
            (Some(table), None) => {
                let cases = cases
                    .iter()
                    .map(|p| Case::open(p))
                    .collect::<Result<Vec<_>>>()?;
                let rows = report::correlate(&cases, &report::read_measurements(&table)?)?;
                for p in report::write_correlation(&out, &rows)? {
                    println!("{}", p.display());
                }
            }
            (None, Some(case)) => {
                let (c, mut cfg) = load(&case, extra)?;
                if truth.is_some() {
                    cfg.evaluate.truth = truth;
                }
                report(&stages::evaluate(&c, &cfg)?);
            }
            _ => {
                return Err(PipelineError::Config(
                    "give either a case directory or --correlate with --cases".into(),
                ))
            }
        },
        Command::Phantom { out, seed, slices } => {
            let cfg = Config::load(None, extra)?;
            let mut spec: PhantomSpec = cfg.phantom;
            if let Some(s) = seed {
                spec.seed = s;
            }
            if let Some(n) = slices {
                spec.n_slices = n;
            }
            crate::phantom::write_phantom_case(&out, &spec)?;
            println!("{}", out.display());
        }
        Command::Config { case } => {
            let cfg = Config::load(case.as_deref(), extra)?;
            print!("{}", cfg.to_toml());
        }
        Command::Serve { root, port, host } => {
            if !root.is_dir() {
                return Err(PipelineError::missing(
                    root.display().to_string(),
                    "the served root must be a directory",
                ));
            }
            crate::server::serve(root, cli.config, SocketAddr::new(host, port))?;
        }
    }
    Ok(())
}

/// Parse arguments, run, and map the outcome to a process exit status.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
