//! `ccm`: dataset generation, training, evaluation, reconstruction,
//! insertion scans, volume assembly and benchmarking.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use settings::Settings;

#[derive(Parser)]
#[command(
    name = "ccm",
    version,
    about = "Computational cannula microscopy pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Root seed for every random draw.
    #[arg(long)]
    seed: Option<u64>,
    /// Plain-text key=value file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root holding dataset/, models/, reports/ and volumes/.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn pairs(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("seed", self.seed.map(|v| v.to_string())),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
        ]
    }
}

macro_rules! pairs {
    ($s:ident; $($f:ident),* $(,)?) => {
        vec![$((stringify!($f), $s.$f.as_ref().map(|v| v.to_string()))),*]
    };
}

#[derive(Args)]
struct DataArgs {
    /// Object extent in pixels.
    #[arg(long)]
    side: Option<usize>,
    /// Measurement extent in pixels.
    #[arg(long)]
    meas_side: Option<usize>,
    #[arg(long)]
    per_layer: Option<usize>,
    #[arg(long)]
    test_count: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    conditioning: Option<f64>,
    /// beads or neurons.
    #[arg(long)]
    object: Option<String>,
    #[arg(long)]
    bead_diameter_px: Option<f64>,
    #[arg(long)]
    beads_min: Option<usize>,
    #[arg(long)]
    beads_max: Option<usize>,
    #[arg(long)]
    neuron_branches: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// ann1_r, ann1_c, ann2, ann1_r_star or svd.
    #[arg(long)]
    net: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    /// U-Net encoder levels.
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    /// Linear rank policy: energy:<tau> or fixed:<k>.
    #[arg(long)]
    rank: Option<String>,
    /// Layer the linear calibration is recorded on.
    #[arg(long)]
    layer: Option<usize>,
    /// Add detector noise to the calibration scan.
    #[arg(long)]
    calibration_noise: Option<bool>,
}

#[derive(Args)]
struct InputArgs {
    /// Measurement file: a TNSR container holding one [M, M] f32 image.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Id of a dataset sample to use instead of a file.
    #[arg(long)]
    sample: Option<usize>,
}

impl InputArgs {
    fn pairs(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            (
                "input",
                self.input.as_ref().map(|p| p.display().to_string()),
            ),
            ("sample", self.sample.map(|v| v.to_string())),
        ]
    }
}

#[derive(Args)]
struct ScanArgs {
    #[arg(long)]
    scan_z0_um: Option<f64>,
    #[arg(long)]
    scan_z_step_um: Option<f64>,
    #[arg(long)]
    scan_max_depth_um: Option<f64>,
    #[arg(long)]
    scan_noise: Option<bool>,
    #[arg(long)]
    phantom_depth_um: Option<f64>,
    #[arg(long)]
    phantom_beads: Option<usize>,
}

#[derive(Args)]
struct VolumeArgs {
    #[arg(long)]
    z_step_um: Option<f64>,
    #[arg(long)]
    z0_um: Option<f64>,
    #[arg(long)]
    fov_um: Option<f64>,
    /// Output stem under volumes/.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the single-layer dataset and its merged counterpart.
    GenData {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train one network, or fit the linear baseline with --net svd.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Score a trained model on the held-out split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        net: Option<String>,
    },
    /// Reconstruct one measurement.
    Recon {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        net: Option<String>,
        #[command(flatten)]
        input: InputArgs,
    },
    /// Predict the layer of one measurement.
    Classify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: InputArgs,
    },
    /// Step a probe through a bead phantom and stack the reconstructions.
    InsertScan {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scan: ScanArgs,
    },
    /// Assemble 2D slice containers (files or directories) into a volume.
    Volume {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        volume: VolumeArgs,
        /// Slice files in depth order; directories contribute their *.tnsr files sorted by name.
        slices: Vec<PathBuf>,
    },
    /// Compare all four methods on the held-out split.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Timed passes per test image.
        #[arg(long)]
        repeats: Option<usize>,
    },
}

fn settings(
    common: &Common,
    extra: Vec<(&'static str, Option<String>)>,
) -> anyhow::Result<Settings> {
    let mut flags = common.pairs();
    flags.extend(extra);
    Settings::resolve(common.config.as_deref(), flags)
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenData { common, data: d } => {
            let s = settings(
                &common,
                pairs!(d; side, meas_side, per_layer, test_count, noise_sigma, conditioning,
                    object, bead_diameter_px, beads_min, beads_max, neuron_branches),
            )?;
            commands::gen_data(&s)
        }
        Command::Train { common, train: t } => {
            let s = settings(
                &common,
                pairs!(t; net, batch_size, max_epochs, lr, patience, depth, base_channels, rank,
                    layer, calibration_noise),
            )?;
            commands::train(&s)
        }
        Command::Eval { common, net } => {
            let s = settings(&common, vec![("net", net)])?;
            commands::eval(&s)
        }
        Command::Recon { common, net, input } => {
            let mut extra = vec![("net", net)];
            extra.extend(input.pairs());
            commands::recon(&settings(&common, extra)?)
        }
        Command::Classify { common, input } => {
            commands::classify(&settings(&common, input.pairs())?)
        }
        Command::InsertScan { common, scan: a } => {
            let s = settings(
                &common,
                pairs!(a; scan_z0_um, scan_z_step_um, scan_max_depth_um, scan_noise,
                    phantom_depth_um, phantom_beads),
            )?;
            commands::insert_scan(&s)
        }
        Command::Volume {
            common,
            volume: v,
            slices,
        } => {
            let s = settings(&common, pairs!(v; z_step_um, z0_um, fov_um, name))?;
            commands::volume(&s, &slices)
        }
        Command::Bench { common, repeats } => {
            let s = settings(&common, vec![("repeats", repeats.map(|v| v.to_string()))])?;
            commands::bench(&s)
        }
    }
}

fn main() -> ExitCode {
    // Usage errors exit with status 2 from inside `parse`.
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
