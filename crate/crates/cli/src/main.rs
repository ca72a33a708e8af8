//! `confmotion`: simulate data, fit and calibrate predictors, run the
//! streaming pipeline and reproduce the evaluation tables.

mod commands;
mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use confmotion::harness::{MpjpeMode, Split, SyntheticKind};
use serde::de::DeserializeOwned;

use crate::config::RunConfig;

/// Parses a snake_case enum value through its serde name.
fn serde_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Parser)]
#[command(
    name = "confmotion",
    version,
    about = "Uncertainty-aware human motion prediction with conformal occupancy sets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Pipeline configuration (TOML). Keys can be overridden with CM_<KEY>.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::from_env(self.config.as_deref())
    }
}

#[derive(Args)]
struct ReportArgs {
    /// JSON report path; stdout when absent.
    #[arg(long)]
    json: Option<PathBuf>,
    /// CSV report path (one row per metric and method).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as JSON lines.
    Simulate {
        /// static, linear, sinusoidal or piecewise.
        #[arg(long, value_parser = serde_enum::<SyntheticKind>, default_value = "linear")]
        kind: SyntheticKind,
        /// Generator parameters (TOML, SyntheticParams field names).
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        sequences: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        joints: Option<usize>,
        #[arg(long)]
        noise_sigma: Option<f64>,
        #[arg(long)]
        ood_probability: Option<f64>,
        /// train, cal or test.
        #[arg(long, value_parser = serde_enum::<Split>)]
        split: Option<Split>,
        #[arg(long)]
        output: PathBuf,
        /// Also write the sequences as one stereo observation stream.
        #[arg(long)]
        observations: Option<PathBuf>,
        /// Also write the camera pair used for the observations.
        #[arg(long)]
        cameras: Option<PathBuf>,
        /// Pixel noise of the observation stream (px).
        #[arg(long, default_value_t = 0.5)]
        pixel_sigma: f64,
    },
    /// Fit a ridge-DCT predictor on a training dataset.
    Fit {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dct_cutoff: Option<usize>,
        #[arg(long)]
        ridge_mu: Option<f64>,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Build the calibration document: conformal quantiles plus OOD thresholds.
    Calibrate {
        #[command(flatten)]
        config: ConfigArg,
        /// Non-conformity scores, one K_P × J array per line.
        #[arg(long, conflicts_with = "data")]
        scores: Option<PathBuf>,
        /// Calibration dataset scored with the configured predictor.
        #[arg(long)]
        data: Option<PathBuf>,
        /// In-distribution observation stream for the 2D OOD threshold.
        #[arg(long)]
        observations: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        /// Also write the non-conformity scores used.
        #[arg(long)]
        write_scores: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run the streaming pipeline over an observation stream.
    Run {
        #[command(flatten)]
        config: ConfigArg,
        /// One StereoObservation per line.
        #[arg(long)]
        input: PathBuf,
        /// One StepOutput per line.
        #[arg(long)]
        output: PathBuf,
    },
    /// MPJPE (and coverage, with a calibration) of the configured predictor.
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        /// global or root_relative.
        #[arg(long, value_parser = serde_enum::<MpjpeMode>, default_value = "global")]
        mode: MpjpeMode,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Conformal sets versus the constant-velocity reachability baseline.
    Table2 {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        cal: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Streaming OOD-handling study over several N_req values.
    Table3 {
        /// Study parameters (TOML, Table3Config field names).
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        ood_probability: Option<f64>,
        /// N_req values, comma separated.
        #[arg(long, value_delimiter = ',')]
        n_req: Vec<usize>,
        #[command(flatten)]
        report: ReportArgs,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate {
            kind,
            params,
            seed,
            sequences,
            frames,
            joints,
            noise_sigma,
            ood_probability,
            split,
            output,
            observations,
            cameras,
            pixel_sigma,
        } => {
            let mut p = commands::synthetic_params(params.as_deref())?;
            p.sequences = sequences.unwrap_or(p.sequences);
            p.frames = frames.unwrap_or(p.frames);
            p.joints = joints.unwrap_or(p.joints);
            p.noise_sigma = noise_sigma.unwrap_or(p.noise_sigma);
            p.ood_probability = ood_probability.unwrap_or(p.ood_probability);
            p.split = split.unwrap_or(p.split);
            commands::simulate(commands::SimulateArgs {
                kind,
                params: p,
                seed,
                output,
                observations,
                cameras,
                pixel_sigma,
            })
        }
        Command::Fit {
            config,
            data,
            dct_cutoff,
            ridge_mu,
            stride,
            output,
        } => commands::fit(commands::FitArgs {
            data,
            config: config.load()?,
            dct_cutoff,
            ridge_mu,
            stride,
            output,
        }),
        Command::Calibrate {
            config,
            scores,
            data,
            observations,
            stride,
            write_scores,
            output,
        } => commands::calibrate(commands::CalibrateArgs {
            config: config.load()?,
            scores,
            data,
            observations,
            stride,
            write_scores,
            output,
        }),
        Command::Run {
            config,
            input,
            output,
        } => commands::run(&config.load()?, &input, &output),
        Command::Evaluate {
            config,
            data,
            mode,
            report,
        } => commands::evaluate(commands::EvaluateArgs {
            config: config.load()?,
            data,
            mode,
            json: report.json,
            csv: report.csv,
        }),
        Command::Table2 {
            config,
            cal,
            test,
            report,
        } => commands::table2(commands::Table2Args {
            config: config.load()?,
            cal,
            test,
            json: report.json,
            csv: report.csv,
        }),
        Command::Table3 {
            params,
            steps,
            seed,
            ood_probability,
            n_req,
            report,
        } => commands::table3(commands::Table3Args {
            params,
            steps,
            seed,
            ood_probability,
            n_req,
            json: report.json,
            csv: report.csv,
        }),
    }
}
