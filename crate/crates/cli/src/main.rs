//! `cadd`: generate phantom data, train both stages, calibrate, restore and
//! evaluate. Exit codes: 0 success, 1 input or configuration error, 2
//! internal failure.

use std::path::PathBuf;
use std::process::ExitCode;

use cadd::phantom::Cohort;
use cadd::pipeline::{
    cmd_calibrate, cmd_evaluate, cmd_gen_data, cmd_restore, cmd_train, RestoreMode, RunConfig, RunPaths, Stage,
};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "cadd", version, about = "Conditional latent diffusion anomaly detection on 3D phantoms")]
struct Cli {
    /// TOML run configuration; defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Allow gen-data to replace existing data.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the phantom cohorts and manifest.
    GenData,
    /// Train the autoencoder or the diffusion model.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
    },
    /// Build KL thresholds and pixel statistics on the validation cohort.
    Calibrate {
        #[arg(long, value_enum, default_value = "cadd")]
        mode: ModeArg,
    },
    /// Restore test cohorts to pseudo-healthy volumes.
    Restore {
        #[arg(long, value_enum, default_value = "cadd")]
        mode: ModeArg,
        /// Cohorts to restore (repeatable).
        #[arg(long = "cohort", value_enum, default_values = ["test-healthy", "disease"])]
        cohorts: Vec<CohortArg>,
    },
    /// Score restorations and write the report.
    Evaluate {
        #[arg(long, value_enum, default_value = "cadd")]
        mode: ModeArg,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    Ae,
    Ddpm,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Cadd,
    Plain,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CohortArg {
    Train,
    Validation,
    TestHealthy,
    Disease,
}

impl From<ModeArg> for RestoreMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Cadd => RestoreMode::Cadd,
            ModeArg::Plain => RestoreMode::Plain,
        }
    }
}

impl From<CohortArg> for Cohort {
    fn from(c: CohortArg) -> Self {
        match c {
            CohortArg::Train => Cohort::Train,
            CohortArg::Validation => Cohort::Validation,
            CohortArg::TestHealthy => Cohort::TestHealthy,
            CohortArg::Disease => Cohort::Disease,
        }
    }
}

fn load_config(cli: &Cli) -> cadd::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> cadd::Result<()> {
    let cfg = load_config(cli)?;
    let paths = RunPaths::new(&cfg.out_dir);
    match &cli.command {
        Command::GenData => {
            let m = cmd_gen_data(&cfg, cli.force)?;
            println!("wrote {} subjects to {}", m.rows.len(), paths.data().display());
        }
        Command::Train { stage } => {
            let (stage, name) = match stage {
                StageArg::Ae => (Stage::Ae, "ae"),
                StageArg::Ddpm => (Stage::Ddpm, "ddpm"),
            };
            let r = cmd_train(&cfg, stage)?;
            if let (Some(first), Some(best)) = (r.log.first(), r.log.iter().filter(|l| l.saved).last()) {
                println!(
                    "{name}: initial loss {:.4}, best val loss {:.4} at step {}",
                    first.train_loss, best.val_loss, best.step
                );
            }
            println!("{name} checkpoint {} ({})", r.checksum, paths.train_log(name).display());
        }
        Command::Calibrate { mode } => {
            let t = cmd_calibrate(&cfg, (*mode).into())?;
            println!("calibrated {} levels {:?}", t.thresholds.len(), t.config.grid());
        }
        Command::Restore { mode, cohorts } => {
            let cohorts: Vec<Cohort> = cohorts.iter().map(|&c| c.into()).collect();
            let mode: RestoreMode = (*mode).into();
            let r = cmd_restore(&cfg, mode, &cohorts)?;
            println!("restored {} subjects to {}", r.subjects.len(), paths.restored(mode.as_str()).display());
            if !r.mask_fractions.is_empty() {
                let mean = r.mask_fractions.iter().sum::<f64>() / r.mask_fractions.len() as f64;
                println!("mean combined-mask fraction {mean:.4}");
            }
        }
        Command::Evaluate { mode } => {
            let e = cmd_evaluate(&cfg, (*mode).into())?;
            print!("{}", e.report);
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // usage mistakes are input errors
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
