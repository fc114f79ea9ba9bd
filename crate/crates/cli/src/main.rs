//! `nlf`: synthesize data, train the shape and deformation spaces, register
//! pairs, fit observations and evaluate meshes.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use settings::Settings;

#[derive(Parser, Debug)]
#[command(name = "nlf", version, about = "Parametric leaf model toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Settings accepted by every subcommand.
#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat `key = value` config file; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Any config key, as `key=value`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    k_control: Option<usize>,
    #[arg(long, global = true)]
    latent_dim: Option<usize>,
    #[arg(long, global = true)]
    grid_res: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

impl Common {
    fn settings(&self) -> anyhow::Result<Settings> {
        Settings::load(
            self.config.as_deref(),
            &self.sets,
            &[
                ("epochs", self.epochs.map(|v| v.to_string())),
                ("lr", self.lr.map(|v| v.to_string())),
                ("k_control", self.k_control.map(|v| v.to_string())),
                ("latent_dim", self.latent_dim.map(|v| v.to_string())),
                ("grid_res", self.grid_res.map(|v| v.to_string())),
                ("seed", self.seed.map(|v| v.to_string())),
            ],
        )
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a procedural dataset of leaf masks and deformed pairs.
    Synth {
        #[arg(long, default_value_t = 20)]
        n: usize,
        /// Mask resolution in pixels.
        #[arg(long, default_value_t = 64)]
        res: usize,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train the shape decoder and its latent table on the dataset masks.
    TrainShape {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "shape.nlf")]
        out: PathBuf,
    },
    /// Train the deformation decoder on the dataset pairs.
    TrainDeform {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        shape: PathBuf,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Stage-1 checkpoint to continue from (stage 2 only).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value = "deform.nlf")]
        out: PathBuf,
    },
    /// Train the volumetric inversion encoders.
    TrainEnc {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        shape: PathBuf,
        #[arg(long)]
        deform: PathBuf,
        #[arg(long, default_value = "enc.nlf")]
        out: PathBuf,
    },
    /// Rigid alignment, contour-keypoint ARAP and point drift for dataset pairs.
    Register {
        #[arg(long)]
        data: PathBuf,
        /// Only this pair id; all pairs by default.
        #[arg(long)]
        pair: Option<String>,
        #[arg(long, default_value_t = 32)]
        keypoints: usize,
    },
    /// Fit the model to one observed leaf cloud.
    Fit {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        deform: PathBuf,
        /// Encoders for initialization; latent means are used without.
        #[arg(long)]
        enc: Option<PathBuf>,
        /// XYZ or PLY point cloud.
        #[arg(long)]
        cloud: PathBuf,
        /// The cloud is already in the model frame.
        #[arg(long)]
        aligned: bool,
        /// Ground-truth OBJ in input units, for normal consistency.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, default_value = "fit")]
        out: PathBuf,
    },
    /// Fit several leaves of one plant with a shared anchor shape.
    FitMulti {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        deform: PathBuf,
        #[arg(long)]
        enc: Option<PathBuf>,
        /// One cloud per leaf instance. Repeatable.
        #[arg(long = "cloud", required = true)]
        clouds: Vec<PathBuf>,
        #[arg(long)]
        aligned: bool,
        /// Fit every instance independently.
        #[arg(long)]
        no_share: bool,
        #[arg(long, default_value = "fit")]
        out: PathBuf,
    },
    /// Decode a leaf from latents drawn with the given seeds or read from a file.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        deform: PathBuf,
        #[arg(long, default_value_t = 0)]
        zs_seed: u64,
        #[arg(long, default_value_t = 0)]
        zd_seed: u64,
        /// Latent file (`z_s`, separator, `z_d`) instead of seeds.
        #[arg(long)]
        latents: Option<PathBuf>,
        /// Write the flat base instead of the deformed leaf.
        #[arg(long)]
        flat: bool,
        #[arg(long, default_value = "leaf.obj")]
        out: PathBuf,
    },
    /// Decode leaves along a straight latent path.
    Interp {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        deform: PathBuf,
        /// Latent file of the start; first table rows by default.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Latent file of the end; last table rows by default.
        #[arg(long)]
        to: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long, default_value = "interp")]
        out: PathBuf,
    },
    /// Compare a predicted mesh or cloud with a ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("NLF_THREADS") {
        let n: usize =
            v.parse().map_err(|_| nlf_core::Error::Validation(format!("NLF_THREADS must be a count, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<nlf_core::Error>() {
            return err.exit_code() as u8;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let run = || -> anyhow::Result<()> {
        configure_threads()?;
        let settings = cli.common.settings()?;
        commands::run(&cli.command, &settings, argv.clone())
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
