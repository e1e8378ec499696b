use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use liquidseg::pipeline::{
    exit_code, load_config, resolve_workspace, run_all, run_command, Command, Logger, Perception, PipelineConfig,
    RunOptions, Workspace,
};
use liquidseg::{Error, Result};

/// Annotation-free transparent liquid segmentation and pouring, on
/// synthetic scenes.
#[derive(Parser)]
#[command(name = "liquidseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// TOML config file; every field has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set translation.epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Pipeline seed (overrides `seed` in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Workspace directory (default: $LIQUIDSEG_WORKSPACE, then the config, then ./liquidseg-workspace).
    #[arg(long, global = true)]
    workspace: Option<PathBuf>,
    /// Let `report` combine artifacts produced under different seeds.
    #[arg(long, global = true)]
    force: bool,
    /// Only write the log files.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render colored, transparent and test datasets plus empty-scene frames.
    SynthGen,
    /// Label the colored dataset by background subtraction.
    PseudoLabel,
    /// Train the colored-to-transparent translator.
    TrainTranslate,
    /// Translate the pseudo-labelled colored images.
    Translate,
    /// Train the UNet on the translated images.
    TrainSeg,
    /// Write predicted masks for the test set.
    Segment,
    /// IoU of the UNet on the test set.
    EvalSeg,
    /// Color-jitter and training-fraction ablations.
    Ablate,
    /// Closed-loop pouring simulations.
    PourSim(PourArgs),
    /// Collate segmentation and pouring reports.
    Report,
    /// Every stage in order.
    RunAll {
        /// Built-in desk-scale defaults; refuses a config file.
        #[arg(long)]
        desk: bool,
    },
    /// Print the effective config as TOML.
    ShowConfig,
}

#[derive(Args)]
struct PourArgs {
    /// Run a single scenario starting at this fill level.
    #[arg(long, requires = "l_target")]
    l0: Option<f64>,
    #[arg(long, requires = "l0")]
    l_target: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    q_max: Option<f64>,
    #[arg(long, value_parser = ["oracle", "vision"])]
    perception: Option<String>,
}

fn build_config(cli: &Cli) -> Result<PipelineConfig> {
    if matches!(cli.command, Cmd::RunAll { desk: true }) && cli.config.is_some() {
        return Err(Error::Config { path: "--config".into(), message: "--desk uses built-in defaults".into() });
    }
    let mut cfg = load_config(cli.config.as_deref(), &cli.set)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Cmd::PourSim(p) = &cli.command {
        if let (Some(l0), Some(t)) = (p.l0, p.l_target) {
            cfg.pour.scenarios = vec![[l0, t]];
        }
        if let Some(e) = p.epsilon {
            cfg.controller.epsilon = e;
        }
        if let Some(q) = p.q_max {
            cfg.pour.q_max = q;
        }
        match p.perception.as_deref() {
            Some("oracle") => cfg.pour.perception = Perception::Oracle,
            Some("vision") => cfg.pour.perception = Perception::Vision,
            _ => {}
        }
        cfg.validate()?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = build_config(cli)?;
    let ws = Workspace::new(resolve_workspace(cli.workspace.as_deref(), &cfg));
    let opts = RunOptions { force: cli.force };
    let cmd = match &cli.command {
        Cmd::SynthGen => Command::SynthGen,
        Cmd::PseudoLabel => Command::PseudoLabel,
        Cmd::TrainTranslate => Command::TrainTranslate,
        Cmd::Translate => Command::Translate,
        Cmd::TrainSeg => Command::TrainSeg,
        Cmd::Segment => Command::Segment,
        Cmd::EvalSeg => Command::EvalSeg,
        Cmd::Ablate => Command::Ablate,
        Cmd::PourSim(_) => Command::PourSim,
        Cmd::Report => Command::Report,
        Cmd::RunAll { .. } => return run_all(&cfg, &ws, opts, cli.quiet),
        Cmd::ShowConfig => {
            print!("{}", toml::to_string(&cfg).map_err(|e| Error::InvalidArgument(e.to_string()))?);
            return Ok(());
        }
    };
    let mut log = Logger::open(&ws, cmd, cli.quiet)?;
    run_command(cmd, &cfg, &ws, opts, &mut log)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = run(&cli);
    if let Err(e) = &r {
        eprintln!("error: {e}");
    }
    ExitCode::from(exit_code(&r) as u8)
}
