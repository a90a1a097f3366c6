mod budget;
mod calib;
mod depth;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qstereo_core::harness::config::HarnessConfig;
use qstereo_core::Error;

#[derive(Parser, Debug)]
#[command(name = "qstereo", version, about = "Quadocular long-range stereo: simulation, calibration, depth and training")]
struct Cli {
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the configuration (corpus, survey and training).
    /// Give it before the subcommand.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; outputs do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic corpus of quad scenes with ground truth.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        /// Scene count; overrides `dataset.count`.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Render calibration target views and their survey log.
    Target {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        views: Option<usize>,
    },
    /// Find the target nodes in every view of a target directory.
    DetectGrid { dir: PathBuf },
    /// Fit the camera model to the detected nodes.
    FitCalib {
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-view mean reprojection error of a fitted camera.
    MreReport {
        dir: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Disparity budget of the rig lenses.
    Budget {
        /// Rig description (TOML with `[[modality]]` tables).
        #[arg(long)]
        rig: Option<PathBuf>,
    },
    /// Disparity map of one scene directory (`cam0.pfm` .. `cam3.pfm`).
    Depth {
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `sweep`, `prior:<disparity.pfm>` or `neighbors`.
        #[arg(long = "seed", default_value = "sweep")]
        seeding: String,
        /// Refine with a trained network checkpoint.
        #[arg(long)]
        predict: Option<PathBuf>,
    },
    /// Train the refinement network on a corpus.
    Train {
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a corpus split, with and without a network.
    Eval {
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// `test` or `train`.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Print an evaluation table with column means.
    Report { table: PathBuf },
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    NoConvergence(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::NoConvergence(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::NoConvergence(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            Error::Divergence(_) => Failure::NoConvergence(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

pub type CmdResult = std::result::Result<(), Failure>;

pub fn ctx(path: &Path) -> impl Fn(Error) -> Failure + '_ {
    move |e| {
        let f = Failure::from(e);
        let msg = format!("{}: {}", path.display(), f.message());
        match f {
            Failure::Usage(_) => Failure::Usage(msg),
            Failure::Data(_) => Failure::Data(msg),
            Failure::NoConvergence(_) => Failure::NoConvergence(msg),
        }
    }
}

fn load_config(cli: &Cli) -> std::result::Result<HarnessConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => HarnessConfig::load(p).map_err(|e| match e {
            Error::Io(_) => Failure::Usage(format!("{}: {e}", p.display())),
            other => ctx(p)(other),
        })?,
        None => HarnessConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CmdResult {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Failure::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Simulate { out, count } => {
            if let Some(c) = count {
                cfg.dataset.count = c;
            }
            depth::simulate(&cfg, &out)
        }
        Command::Target { out, views } => {
            if let Some(v) = views {
                cfg.calib.views = v;
            }
            cfg.validate()?;
            calib::target(&cfg, &out)
        }
        Command::DetectGrid { dir } => calib::detect(&cfg, &dir),
        Command::FitCalib { dir, out } => calib::fit(&cfg, &dir, &out),
        Command::MreReport { dir, camera, out } => calib::mre_report(&cfg, &dir, &camera, &out),
        Command::Budget { rig } => budget::run(&cfg, rig.as_deref()),
        Command::Depth {
            scene,
            out,
            seeding,
            predict,
        } => depth::depth(&cfg, &scene, &out, &seeding, predict.as_deref()),
        Command::Train { corpus, out } => depth::train(&cfg, &corpus, &out),
        Command::Eval {
            corpus,
            checkpoint,
            out,
            split,
        } => depth::eval(&cfg, &corpus, checkpoint.as_deref(), &out, &split),
        Command::Report { table } => depth::report(&table),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("qstereo: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
