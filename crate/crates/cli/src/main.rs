use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod error;
mod manifest;
mod svg;

use error::Failure;

#[derive(Parser, Debug)]
#[command(name = "pairforge", version, about = "Design and analysis toolkit for electrically injected AlGaAs photon-pair sources")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Device JSON (layer stack, diode, nonlinear sections); defaults to the bundled device.
    #[arg(long, global = true)]
    pub device: Option<PathBuf>,
    /// Dispersion table JSON; defaults to $PAIRFORGE_DATA, then the bundled table.
    #[arg(long, global = true)]
    pub table: Option<PathBuf>,
    /// Device temperature in °C; defaults to the device file.
    #[arg(long = "temp-C", global = true, allow_negative_numbers = true)]
    pub temp_c: Option<f64>,
    /// Seed for commands that draw random numbers; one is chosen and printed when absent.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output file; a run manifest is written next to it. Standard output when absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Also render the result as an SVG plot.
    #[arg(long, global = true)]
    pub svg: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pol {
    Te,
    Tm,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Guided modes of the stack at one wavelength.
    Modes {
        #[arg(long, default_value_t = 785.0)]
        wavelength_nm: f64,
        #[arg(long, value_enum, default_value_t = Pol::Te)]
        pol: Pol,
        /// Write the field profiles (|E| per mode) to this CSV.
        #[arg(long)]
        profiles: Option<PathBuf>,
    },
    /// SPDC tuning curve (signal and idler versus pump wavelength).
    Tune {
        #[arg(long)]
        pump_start_nm: Option<f64>,
        #[arg(long)]
        pump_stop_nm: Option<f64>,
        #[arg(long, default_value_t = 0.05)]
        pump_step_nm: f64,
    },
    /// Simulated SHG spectrum including the facet cavities.
    Shg {
        #[arg(long, default_value_t = 0.05)]
        power_w: f64,
        /// Full span around the phase-matching centre.
        #[arg(long, default_value_t = 3.0)]
        span_nm: f64,
        #[arg(long, default_value_t = 0.002)]
        step_nm: f64,
    },
    /// Fit an SHG spectrum (lambda_nm, SH power in W) for η, centre and FWHM.
    Fitshg {
        #[arg(long)]
        spectrum: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        power_w: f64,
    },
    /// Propagation loss from the fringe contrast of a transmission spectrum.
    Loss {
        #[arg(long)]
        spectrum: PathBuf,
        /// Facet reflectivity; defaults to the device TE00 value.
        #[arg(long)]
        reflectivity: Option<f64>,
        #[arg(long)]
        length_mm: Option<f64>,
    },
    /// Laser operating window against the phase-matching trend.
    Operate {
        #[arg(long, default_value_t = 0.7)]
        current_a: f64,
        #[arg(long = "t-start-C", default_value_t = 15.0, allow_negative_numbers = true)]
        t_start_c: f64,
        #[arg(long = "t-stop-C", default_value_t = 40.0, allow_negative_numbers = true)]
        t_stop_c: f64,
        #[arg(long = "t-step-C", default_value_t = 0.5)]
        t_step_c: f64,
        /// Temperatures at which phase matching is solved for the trend.
        #[arg(long, default_value_t = 3)]
        pm_points: usize,
    },
    /// Monte-Carlo coincidence histogram.
    Coincide {
        /// Experiment JSON; defaults to the bundled pulsed-experiment fixture.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Peak, background and SNR of a coincidence histogram.
    Analyze {
        #[arg(long)]
        histogram: PathBuf,
        /// Metadata sidecar; `<histogram>.meta.json` is used when present.
        #[arg(long)]
        metadata: Option<PathBuf>,
    },
    /// Werner-state weight and fidelity from a coincidence SNR.
    Fidelity {
        #[arg(long, allow_negative_numbers = true)]
        snr: f64,
    },
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let result = match Cli::try_parse_from(&argv) {
        Ok(cli) => commands::run(cli, argv),
        Err(e) => match e.kind() {
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            _ => Err(Failure::Usage(e.to_string().lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").into())),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.code() as u8)
        }
    }
}
