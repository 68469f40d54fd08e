//! `opmicro`: command-line front end for the operando-microscopy toolkit.
//!
//! Exit codes: 0 success, 2 invalid input or i/o failure, 3 numerical
//! failure (including simulation blow-up).

mod commands;
mod config;
mod schema;

use clap::{Parser, Subcommand};
use opmicro::Error;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "opmicro", version, about = "Quantitative operando microscopy toolkit")]
struct Cli {
    /// RNG seed shared by every stochastic stage of the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker-thread cap (default: all cores; env OPMICRO_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Log filter (error|warn|info|debug|trace).
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a phase-separation image stack from a random initial state.
    Simulate {
        /// TOML config ([simulate] section).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (stack.npy + report.json).
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a seeded noise recipe to a stack.
    Corrupt {
        /// Input stack (.npy with optional sidecar, or single-frame .csv).
        #[arg(long = "in")]
        input: PathBuf,
        /// Axis order of the input file.
        #[arg(long, default_value = "THWC")]
        layout: String,
        /// TOML config ([corrupt] section).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output stack path (report lands next to it).
        #[arg(long)]
        out: PathBuf,
    },
    /// Denoise a stack with a classical filter or the blind-spot model.
    Denoise {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "THWC")]
        layout: String,
        /// TOML config ([denoise] section).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Apply a previously exported blind-spot model instead of fitting.
        #[arg(long, conflicts_with = "export_model")]
        import: Option<PathBuf>,
        /// Fit a blind-spot model, write it here, then apply it.
        #[arg(long)]
        export_model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Image-quality metrics (MSE / PSNR / SSIM) between two stacks.
    Metrics {
        /// Reference stack.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Stack under test.
        #[arg(long)]
        test: PathBuf,
        /// Dynamic range of the data.
        #[arg(long, default_value_t = 1.0)]
        range: f64,
        #[arg(long, default_value = "THWC")]
        layout: String,
        /// Report path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recover the material model from an observed stack.
    Recover {
        /// Observed concentration stack.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "THWC")]
        layout: String,
        /// TOML config ([recover] section).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (report.json + curves.csv).
        #[arg(long)]
        out: PathBuf,
    },
    /// Composition mapping from a spectro-microscopy stack.
    Stxm {
        /// Spectral image stack; energies come from the sidecar
        /// (energies_ev or times).
        #[arg(long)]
        stack: PathBuf,
        #[arg(long, default_value = "THW")]
        layout: String,
        /// Reference-spectra CSV (energy_ev,lfp,fp); synthetic when omitted.
        #[arg(long)]
        refs: Option<PathBuf>,
        /// Unmixing mode.
        #[arg(long, default_value = "two_energy")]
        mode: String,
        /// What the stack's values are.
        #[arg(long, default_value = "absorbance")]
        kind: String,
        /// Rigid-register frames to the first image before unmixing.
        #[arg(long)]
        register: bool,
        /// Bootstrap replicate count (0 = no uncertainty map).
        #[arg(long, default_value_t = 0)]
        bootstrap: usize,
        /// Bootstrap energy pool: even:N or edge:K.
        #[arg(long, default_value = "even:20")]
        sampling: String,
        /// Output directory (x.npy, valid.npy, sigma.npy, report.json).
        #[arg(long)]
        out: PathBuf,
    },
    /// Radiography attenuation-change and active-area analysis.
    Neutron {
        /// Intensity stack over the cycling run.
        #[arg(long)]
        intensity: PathBuf,
        #[arg(long, default_value = "THW")]
        layout: String,
        /// Open-beam frame (.npy, HW).
        #[arg(long)]
        ob: PathBuf,
        /// Dark-current frame (.npy, HW).
        #[arg(long)]
        dc: PathBuf,
        /// Half-cycle split JSON: {"boundaries":[...9 fenceposts],
        /// "first":"charge"} or explicit "labels".
        #[arg(long)]
        split: PathBuf,
        /// Cell geometry JSON: {"px_per_cm":..,"cell_radius_cm":..,
        /// "cell_center_px":[x,y]}.
        #[arg(long)]
        geom: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Color-video phase classification and particle statistics.
    Optical {
        /// RGB video stack (values in [0,1]).
        #[arg(long)]
        video: PathBuf,
        #[arg(long, default_value = "THWC")]
        layout: String,
        /// TOML config ([optical] section).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a report JSON against the schema (and artifact digests).
    Report {
        /// Report file to check.
        path: PathBuf,
        /// Directory holding the artifacts named in the report.
        #[arg(long)]
        artifacts_dir: Option<PathBuf>,
    },
}

fn run(cli: &Cli) -> opmicro::Result<()> {
    match &cli.command {
        Command::Simulate { config, out } => {
            commands::simulate(config.as_deref(), out, cli.seed)
        }
        Command::Corrupt {
            input,
            layout,
            config,
            out,
        } => commands::corrupt(input, layout, config.as_deref(), out, cli.seed),
        Command::Denoise {
            input,
            layout,
            config,
            import,
            export_model,
            out,
        } => commands::denoise(
            input,
            layout,
            config.as_deref(),
            import.as_deref(),
            export_model.as_deref(),
            out,
            cli.seed,
        ),
        Command::Metrics {
            reference,
            test,
            range,
            layout,
            out,
        } => commands::metrics(reference, test, *range, layout, out.as_deref()),
        Command::Recover {
            data,
            layout,
            config,
            out,
        } => commands::recover(data, layout, config.as_deref(), out, cli.seed),
        Command::Stxm {
            stack,
            layout,
            refs,
            mode,
            kind,
            register,
            bootstrap,
            sampling,
            out,
        } => commands::stxm_run(
            stack,
            layout,
            refs.as_deref(),
            mode,
            kind,
            *register,
            *bootstrap,
            sampling,
            out,
            cli.seed,
        ),
        Command::Neutron {
            intensity,
            layout,
            ob,
            dc,
            split,
            geom,
            out,
        } => commands::neutron_run(intensity, layout, ob, dc, split, geom, out),
        Command::Optical {
            video,
            layout,
            config,
            out,
        } => commands::optical_run(video, layout, config.as_deref(), out, cli.seed),
        Command::Report {
            path,
            artifacts_dir,
        } => commands::report_check(path, artifacts_dir.as_deref()),
    }
}

fn main() {
    let cli = Cli::parse();

    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .init();

    let threads = cli.threads.or_else(|| {
        std::env::var("OPMICRO_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("thread pool already initialized: {e}");
        }
    }

    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        let code = match e {
            Error::Io { .. } | Error::Invalid(_) => 2,
            Error::Numeric(_) | Error::BlowUp { .. } => 3,
        };
        std::process::exit(code);
    }
}
