//! `cvshare`: command-line access to the dealer simulation, bounds,
//! certificates and security analysis.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cvshare_core::bounds::BandMode;
use cvshare_core::{ExperimentModel, Party};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "cvshare",
    version,
    about = "Three-party continuous-variable secure-access simulator"
)]
struct Cli {
    /// Directory for CSV/JSON outputs and the run manifest.
    #[arg(
        long,
        short = 'o',
        global = true,
        env = "CVSHARE_OUT",
        default_value = "cvshare-out"
    )]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
enum Command {
    /// Build the dealer state and export it in text form.
    State(StateArgs),
    /// Theory curves of the coalition MSEs over a squeezing range.
    Bounds(BoundsArgs),
    /// Verify the primal/dual certificates of the thermal-state bound.
    Certify(CertifyArgs),
    /// Run the full protocol from a key = value config file.
    Simulate(SimulateArgs),
    /// Security and success probabilities from batch-MSE means.
    Security(SecurityArgs),
    /// Mutual-information curves.
    Mi(MiArgs),
    /// Entanglement-witness run.
    Witness(WitnessArgs),
}

#[derive(Debug, Clone, Copy, Args, Serialize)]
struct LossArgs {
    #[arg(long, default_value_t = 1.0)]
    eta_a: f64,
    #[arg(long, default_value_t = 1.0)]
    eta_b: f64,
    #[arg(long, default_value_t = 1.0)]
    eta_c: f64,
    #[arg(long, default_value_t = 0.0)]
    eps_a: f64,
    #[arg(long, default_value_t = 0.0)]
    eps_b: f64,
    #[arg(long, default_value_t = 0.0)]
    eps_c: f64,
}

impl LossArgs {
    fn model(&self, r: f64) -> ExperimentModel {
        ExperimentModel {
            r,
            eta_a: self.eta_a,
            eta_b: self.eta_b,
            eta_c: self.eta_c,
            eps_a: self.eps_a,
            eps_b: self.eps_b,
            eps_c: self.eps_c,
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct StateArgs {
    /// Squeezing parameter.
    #[arg(long, default_value_t = 1.0)]
    r: f64,
    #[command(flatten)]
    loss: LossArgs,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    alpha_x: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    alpha_p: f64,
    /// Export only this party's reduced state.
    #[arg(long)]
    party: Option<Party>,
}

#[derive(Debug, Args, Serialize)]
struct BoundsArgs {
    #[arg(long, default_value_t = 0.0)]
    r_min: f64,
    #[arg(long, default_value_t = 1.5)]
    r_max: f64,
    #[arg(long, default_value_t = 16)]
    steps: usize,
    #[command(flatten)]
    loss: LossArgs,
    /// Also write a parameter-fluctuation band (`bounds_band.csv`).
    #[arg(long)]
    band: Option<BandMode>,
    /// Relative parameter fluctuation for the band.
    #[arg(long, default_value_t = 0.03)]
    band_rel: f64,
    #[arg(long, default_value_t = 500)]
    band_samples: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct CertifyArgs {
    #[arg(long, requires = "n2", conflicts_with = "grid")]
    n1: Option<f64>,
    #[arg(long, requires = "n1")]
    n2: Option<f64>,
    /// Verify a `K × K` grid of `(n1, n2)` over `[lo, hi]`.
    #[arg(long, value_name = "K", required_unless_present = "n1")]
    grid: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    lo: f64,
    #[arg(long, default_value_t = 3.0)]
    hi: f64,
    #[arg(long, default_value_t = cvshare_core::certificates::DEFAULT_TOL)]
    tol: f64,
}

#[derive(Debug, Args, Serialize)]
struct SimulateArgs {
    /// Configuration file (`key = value` lines, `#` comments).
    #[arg(long)]
    config: PathBuf,
    /// Write every round to `rounds.csv`.
    #[arg(long)]
    dump_rounds: bool,
}

#[derive(Debug, Args, Serialize)]
struct MuArgs {
    /// Mean summed batch MSE of a single party.
    #[arg(long, default_value_t = cvshare_core::security::fixtures::MU_SINGLE)]
    mu_single: f64,
    /// Mean summed batch MSE of a two-party coalition.
    #[arg(long, default_value_t = cvshare_core::security::fixtures::MU_PAIR)]
    mu_pair: f64,
    /// Mean summed batch MSE of the three-party coalition.
    #[arg(long, default_value_t = cvshare_core::security::fixtures::MU_TRIPLE)]
    mu_triple: f64,
}

#[derive(Debug, Args, Serialize)]
struct SecurityArgs {
    #[command(flatten)]
    mu: MuArgs,
    /// Probes per quadrature in one batch.
    #[arg(long, default_value_t = 10)]
    n_probes: u32,
    /// Access threshold; defaults to the crossing point of the single-party
    /// and coalition densities.
    #[arg(long)]
    v_t: Option<f64>,
    /// Largest batch size in the sweep.
    #[arg(long, default_value_t = 100)]
    n_max: u32,
}

#[derive(Debug, Args, Serialize)]
struct MiArgs {
    #[command(flatten)]
    mu: MuArgs,
    #[arg(long, default_value_t = 4.0)]
    v_dist: f64,
    #[arg(long, default_value_t = 1.0)]
    c_bits: f64,
    #[arg(long, default_value_t = 100)]
    n_max: u32,
}

#[derive(Debug, Args, Serialize)]
struct WitnessArgs {
    #[arg(long, default_value_t = 1.0)]
    r: f64,
    #[command(flatten)]
    loss: LossArgs,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    alpha_x: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    alpha_p: f64,
    #[arg(long, default_value_t = 100_000)]
    n_rounds: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Distribute the intercept-resend state instead of the dealer state.
    #[arg(long)]
    surrogate: bool,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(cvshare_core::Error),
    Io(std::io::Error),
    CertificateFailed(usize),
}

impl From<cvshare_core::Error> for CliError {
    fn from(e: cvshare_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => e.kind(),
            CliError::Io(_) => "io",
            CliError::CertificateFailed(_) => "certificate-failed",
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
            CliError::Io(e) => e.to_string(),
            CliError::CertificateFailed(n) => format!("{n} certificate check(s) failed"),
        }
    }

    /// Bad flags or configuration exit with 2; failures while running with 1.
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(
                cvshare_core::Error::InvalidArgument(_) | cvshare_core::Error::Parse(_),
            ) => 2,
            _ => 1,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let argv = output::replay_argv(std::env::args().skip(1));
    match commands::run(&cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "error": e.kind(), "message": e.message() });
            eprintln!("{body}");
            ExitCode::from(e.exit_code())
        }
    }
}
