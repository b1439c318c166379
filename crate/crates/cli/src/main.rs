use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use issnet::config::RunConfig;
use issnet_cli::{
    cmd_ablate, cmd_evaluate, cmd_pipeline, cmd_pretrain, cmd_report, cmd_stylize, cmd_synth, cmd_train_stylizer,
    cmd_verify, pipeline_summary, CliResult,
};
use serde_json::Value;

#[derive(Parser)]
#[command(name = "issnet", version, about = "Inter-source stylization for cross-domain few-shot classification")]
struct Cli {
    /// TOML run configuration; the desk defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Overwrite a directory that already holds results.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic benchmark as image folders.
    Synth,
    /// Train the AdaIN stylizer.
    TrainStylizer,
    /// Generate the pseudo-labeled set with a trained stylizer.
    Stylize {
        #[arg(long)]
        stylizer: PathBuf,
    },
    /// Pretrain the encoder and classifier.
    Pretrain {
        /// Labeled source folder; defaults to the configured data.
        #[arg(long)]
        labeled: Option<PathBuf>,
        /// Pseudo-labeled set written by `stylize`; omit for the baseline.
        #[arg(long)]
        pseudo: Option<PathBuf>,
    },
    /// Run the episodic protocol on a pretrained checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "issnet")]
        label: String,
    },
    /// Evaluate every loss x augmentation x propagation cell plus the baseline.
    Ablate,
    /// Rebuild tables and plots from saved `reports.json` files.
    Report {
        #[arg(long = "reports", required = true)]
        reports: Vec<PathBuf>,
    },
    /// Re-hash the artifacts of a run directory.
    Verify {
        /// Run directory; defaults to --out.
        dir: Option<PathBuf>,
    },
    /// Stylize, pretrain and evaluate in one go.
    Pipeline {
        /// Skip stylization to produce the baseline control.
        #[arg(long)]
        skip_stylize: bool,
    },
}

fn config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.out_dir = Some(cli.out.clone());
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> CliResult<Value> {
    if let Command::Verify { dir } = &cli.command {
        return cmd_verify(dir.as_ref().unwrap_or(&cli.out));
    }
    let cfg = config(cli)?;
    let out = &cli.out;
    match &cli.command {
        Command::Synth => cmd_synth(&cfg, out, cli.force),
        Command::TrainStylizer => cmd_train_stylizer(&cfg, out, cli.force),
        Command::Stylize { stylizer } => cmd_stylize(&cfg, stylizer, out, cli.force),
        Command::Pretrain { labeled, pseudo } => {
            cmd_pretrain(&cfg, labeled.as_deref(), pseudo.as_deref(), out, cli.force)
        }
        Command::Evaluate { checkpoint, label } => cmd_evaluate(&cfg, checkpoint, label, out, cli.force),
        Command::Ablate => cmd_ablate(&cfg, out, cli.force),
        Command::Report { reports } => cmd_report(&cfg, reports, out, cli.force),
        Command::Pipeline { skip_stylize } => {
            cmd_pipeline(&cfg, out, *skip_stylize, cli.force).map(|o| pipeline_summary(&o))
        }
        Command::Verify { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(2);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(&cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("json value"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = e.exit_code();
            eprintln!("error: {e}");
            println!("{}", serde_json::json!({ "error": e.to_string(), "exit_code": code }));
            ExitCode::from(code as u8)
        }
    }
}
