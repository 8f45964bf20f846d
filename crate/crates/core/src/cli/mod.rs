//! `fidpoint` command line: prepare, train, mirror, detect, evaluate, inspect.

pub mod commands;
pub mod config;
pub mod report;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{ArgAction, Parser, Subcommand};

use crate::error::Error;
use crate::geom::TiltMode;
use commands::{DetectInput, EvalSource, TrainInputs};
pub use config::RunConfig;
pub use report::{DetectionReport, FrameDetections, Tally};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_STUCK: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration.
    Usage(String),
    Run(Error),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Run(Error::StageStuck { .. }) => EXIT_STUCK,
            CliError::Run(_) => EXIT_DATA,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "fidpoint", version, about = "Haar cascade training and facial point detection")]
struct Cli {
    /// Config file of `key = value` lines; defaults to $FIDPOINT_CONFIG.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Cut positive and negative sample archives for one point.
    Prepare {
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        markups: Option<PathBuf>,
        #[arg(long)]
        point: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(short = 'w', long = "w")]
        w: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a cascade from sample archives.
    #[command(disable_help_flag = true)]
    Train {
        #[arg(long)]
        pos: PathBuf,
        #[arg(long)]
        neg: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory of object-free images to mine extra negatives from.
        #[arg(long)]
        background: Option<PathBuf>,
        #[arg(long)]
        nstages: Option<usize>,
        #[arg(long)]
        minhitrate: Option<f64>,
        #[arg(long)]
        maxfalsealarm: Option<f64>,
        /// BASIC or ALL.
        #[arg(long)]
        mode: Option<String>,
        #[arg(short = 'w', long = "w")]
        w: Option<u32>,
        #[arg(short = 'h', long = "h")]
        h: Option<u32>,
        #[arg(long)]
        npos: Option<usize>,
        #[arg(long)]
        nneg: Option<usize>,
        #[arg(long)]
        nsplits: Option<u32>,
        #[arg(long)]
        mem: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "max-weak")]
        max_weak: Option<usize>,
        #[arg(long, action = ArgAction::Help)]
        help: Option<bool>,
    },
    /// Write the left-right mirror of a cascade.
    Mirror { input: PathBuf, output: PathBuf },
    /// Detect points in images, directories or an ordered frame list.
    Detect {
        inputs: Vec<PathBuf>,
        #[arg(long, conflicts_with = "inputs")]
        frames: Option<PathBuf>,
        #[arg(long = "tilt-mode")]
        tilt_mode: Option<TiltMode>,
    },
    /// Score detections against ground truth.
    Evaluate {
        #[arg(long)]
        markups: Option<PathBuf>,
        /// Saved detect output for one tilt mode, as MODE=FILE (repeatable).
        #[arg(long = "detections", value_name = "MODE=FILE")]
        detections: Vec<String>,
        /// Run detection live on this frame list for each tilt mode.
        #[arg(long, conflicts_with = "detections")]
        frames: Option<PathBuf>,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print cascade statistics.
    Inspect { cascade: PathBuf },
}

/// Accepts single-dash long options (`-nstages 20`) by doubling the dash.
pub fn normalize_args(args: impl IntoIterator<Item = OsString>) -> Vec<OsString> {
    args.into_iter()
        .enumerate()
        .map(|(i, a)| match a.to_str() {
            Some(s)
                if i > 0
                    && s.len() > 2
                    && s.starts_with('-')
                    && !s.starts_with("--")
                    && s[1..].chars().all(|c| c.is_ascii_alphabetic() || c == '-') =>
            {
                OsString::from(format!("-{s}"))
            }
            _ => a,
        })
        .collect()
}

fn set_opt<T: ToString>(cfg: &mut RunConfig, key: &str, v: &Option<T>) -> Result<(), CliError> {
    if let Some(v) = v {
        cfg.set(key, v.to_string()).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.to_string_lossy().into_owned())
}

fn dispatch(cli: Cli, out: &mut dyn Write, log: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = RunConfig::discover(cli.config.as_deref()).map_err(|e| CliError::Usage(e.to_string()))?;
    for pair in &cli.set {
        cfg.set_pair(pair).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match cli.cmd {
        Cmd::Prepare { images, markups, point, out: o, w, seed } => {
            set_opt(&mut cfg, "images", &path_str(&images))?;
            set_opt(&mut cfg, "markups", &path_str(&markups))?;
            set_opt(&mut cfg, "output", &path_str(&o))?;
            set_opt(&mut cfg, "point", &point)?;
            set_opt(&mut cfg, "w", &w)?;
            set_opt(&mut cfg, "seed", &seed)?;
            commands::cmd_prepare(&cfg, out, log).map(|_| ())
        }
        Cmd::Train {
            pos,
            neg,
            out: o,
            background,
            nstages,
            minhitrate,
            maxfalsealarm,
            mode,
            w,
            h,
            npos,
            nneg,
            nsplits,
            mem,
            seed,
            max_weak,
            help: _,
        } => {
            set_opt(&mut cfg, "background", &path_str(&background))?;
            set_opt(&mut cfg, "nstages", &nstages)?;
            set_opt(&mut cfg, "minhitrate", &minhitrate)?;
            set_opt(&mut cfg, "maxfalsealarm", &maxfalsealarm)?;
            set_opt(&mut cfg, "mode", &mode)?;
            set_opt(&mut cfg, "w", &w)?;
            set_opt(&mut cfg, "h", &h)?;
            set_opt(&mut cfg, "npos", &npos)?;
            set_opt(&mut cfg, "nneg", &nneg)?;
            set_opt(&mut cfg, "seed", &seed)?;
            set_opt(&mut cfg, "max_weak", &max_weak)?;
            let inp = TrainInputs {
                positives: pos,
                negatives: neg,
                output: o,
                nsplits,
                mem,
            };
            commands::cmd_train(&cfg, &inp, out, log).map(|_| ())
        }
        Cmd::Mirror { input, output } => commands::cmd_mirror(&input, &output),
        Cmd::Inspect { cascade } => commands::cmd_inspect(&cascade, out),
        Cmd::Detect { inputs, frames, tilt_mode } => {
            set_opt(&mut cfg, "tilt_mode", &tilt_mode)?;
            let input = match frames {
                Some(f) => DetectInput::from_frame_list(&f)?,
                None if inputs.is_empty() => match cfg.path("images") {
                    Some(d) => DetectInput::from_paths(&[d])?,
                    None => return Err(CliError::Usage("no images given".into())),
                },
                None => DetectInput::from_paths(&inputs)?,
            };
            commands::cmd_detect(&cfg, &input, out)
        }
        Cmd::Evaluate { markups, detections, frames, fraction, csv } => {
            set_opt(&mut cfg, "markups", &path_str(&markups))?;
            set_opt(&mut cfg, "fraction", &fraction)?;
            let source = match frames {
                Some(f) => EvalSource::Live(DetectInput::from_frame_list(&f)?),
                None if detections.is_empty() => {
                    return Err(CliError::Usage("give --detections MODE=FILE or --frames LIST".into()))
                }
                None => EvalSource::Files(
                    detections
                        .iter()
                        .map(|d| {
                            let (m, p) = d
                                .split_once('=')
                                .ok_or_else(|| CliError::Usage(format!("expected MODE=FILE, found {d:?}")))?;
                            let m: TiltMode = m.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
                            Ok((m, PathBuf::from(p)))
                        })
                        .collect::<Result<_, CliError>>()?,
                ),
            };
            commands::cmd_evaluate(&cfg, &source, csv.as_deref(), out, log).map(|_| ())
        }
    }
}

/// Runs the command line and returns the process exit status.
pub fn run(args: impl IntoIterator<Item = OsString>, out: &mut dyn Write, log: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(normalize_args(args)) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(log, "{e}");
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match dispatch(cli, out, log) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(log, "error: {e}");
            e.code()
        }
    }
}
