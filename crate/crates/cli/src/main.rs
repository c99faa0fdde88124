//! Command-line front end for the self-training addition laboratory.
//!
//! Five subcommands cover the full workflow: `gen` writes oracle-sourced
//! datasets, `run` executes the curriculum (resumable), `eval` scores a
//! model per length, `simulate` runs the closed-form error studies, and
//! `inspect` pretty-prints any artifact file. Exit codes: 0 on success,
//! 1 for configuration or usage problems, 2 for runtime failures.

use std::fmt::Write as FmtWrite;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use selfadd_core::config::RunConfig;
use selfadd_core::curriculum::Phase;
use selfadd_core::learner::load_checkpoint;
use selfadd_core::model::CompletionModel;
use selfadd_core::run::{
    cmd_eval, cmd_gen, cmd_inspect, cmd_run, cmd_simulate, format_avalanche, format_decay,
    format_eval_table, load_run_model, RunSummary,
};
use selfadd_core::simlab::SimModel;
use selfadd_core::RunError;

#[derive(Parser)]
#[command(
    name = "selfadd",
    version,
    about = "Self-training laboratory for multi-digit addition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write oracle-sourced fast and slow training files into out_dir
    Gen(ConfigArg),
    /// Train through the supervised curriculum, then self-train to max_length
    Run {
        #[command(flatten)]
        config: ConfigArg,
        /// Continue the run already present in out_dir from its newest snapshot
        #[arg(long)]
        resume: bool,
    },
    /// Score a model per length at temperature 0
    Eval(EvalArgs),
    /// Run the error-avalanche and generation-decay studies on the simulated learner
    Simulate(ConfigArg),
    /// Pretty-print any artifact file this tool writes
    Inspect {
        /// Dataset, metrics, ledger, state, study, or config file
        #[arg(required_unless_present = "schema", conflicts_with = "schema")]
        path: Option<PathBuf>,
        /// Print every configuration key with its default value and exit
        #[arg(long)]
        schema: bool,
    },
}

#[derive(Args)]
struct ConfigArg {
    /// Flat TOML run configuration
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory to score; uses its own config.toml and newest snapshot
    #[arg(long, conflicts_with_all = ["checkpoint", "simulated", "config"])]
    run_dir: Option<PathBuf>,
    /// Transformer checkpoint file to score; template comes from --config
    #[arg(long, requires = "config")]
    checkpoint: Option<PathBuf>,
    /// Score the configured simulated profile instead of a checkpoint
    #[arg(long, requires = "config", conflicts_with = "checkpoint")]
    simulated: bool,
    /// Flat TOML run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Lengths to score; defaults to 1 through max_length
    #[arg(long, value_delimiter = ',')]
    lengths: Vec<usize>,
    /// Problems per length; graded exhaustively when the population is smaller
    #[arg(long)]
    problems: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let usage_error = err.use_stderr();
            let _ = err.print();
            return if usage_error {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(if err.is_validation() { 1 } else { 2 })
        }
    }
}

fn dispatch(command: Command) -> Result<(), RunError> {
    match command {
        Command::Gen(args) => {
            let config = RunConfig::load(&args.config)?;
            for path in cmd_gen(&config)? {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Run { config, resume } => {
            let config = RunConfig::load(&config.config)?;
            let summary = cmd_run(&config, resume)?;
            print!("{}", render_summary(&summary));
            Ok(())
        }
        Command::Eval(args) => {
            let (model, config) = eval_model(&args)?;
            let template = config.template_set();
            let lengths: Vec<usize> = if args.lengths.is_empty() {
                (1..=config.max_length).collect()
            } else {
                args.lengths.clone()
            };
            let problems = args.problems.unwrap_or(config.eval_problems);
            let rows = cmd_eval(
                model.as_ref(),
                &template,
                &lengths,
                problems,
                config.data_seed,
            )?;
            print!("{}", format_eval_table(&rows));
            Ok(())
        }
        Command::Simulate(args) => {
            let config = RunConfig::load(&args.config)?;
            let (avalanche, decay) = cmd_simulate(&config)?;
            println!("wrote {}", config.out_dir.join("avalanche.jsonl").display());
            println!("wrote {}", config.out_dir.join("decay.jsonl").display());
            print!("{}", format_avalanche(&avalanche));
            print!("{}", format_decay(&decay));
            Ok(())
        }
        Command::Inspect { path, schema } => {
            if schema {
                print!("{}", RunConfig::schema());
            } else {
                let path = path.expect("clap requires a path without --schema");
                print!("{}", cmd_inspect(&path)?);
            }
            Ok(())
        }
    }
}

fn eval_model(args: &EvalArgs) -> Result<(Box<dyn CompletionModel>, RunConfig), RunError> {
    if let Some(run_dir) = &args.run_dir {
        return load_run_model(run_dir);
    }
    let source_help = "pass --run-dir, or --config together with --checkpoint or --simulated";
    let Some(config_path) = &args.config else {
        return Err(RunError::Config(source_help.into()));
    };
    let config = RunConfig::load(config_path)?;
    if args.simulated {
        let model = SimModel::new(config.sim_profile(), config.template_set());
        return Ok((Box::new(model), config));
    }
    let Some(checkpoint) = &args.checkpoint else {
        return Err(RunError::Config(source_help.into()));
    };
    let (model, _) = load_checkpoint(checkpoint)?;
    Ok((Box::new(model), config))
}

fn render_summary(summary: &RunSummary) -> String {
    let mut out = String::new();
    let phase = match summary.phase {
        Phase::Supervised => "supervised",
        Phase::SelfTraining => "self_training",
        Phase::Terminated => "terminated",
    };
    let _ = writeln!(out, "phase: {phase}");
    if let Some(reason) = &summary.stop_reason {
        let _ = writeln!(out, "stop reason: {reason}");
    }
    let _ = writeln!(
        out,
        "active length: {} (supervised through {})",
        summary.active_length, summary.supervised_max
    );
    let _ = writeln!(out, "steps: {}", summary.global_step);
    let _ = writeln!(
        out,
        "self-training iterations: {}",
        summary.iterations_completed
    );
    let _ = writeln!(
        out,
        "snapshots written: {}{}",
        summary.snapshots_written,
        if summary.resumed { " (resumed)" } else { "" }
    );
    match summary.selftrain_data_reads {
        Some(reads) => {
            let _ = writeln!(
                out,
                "training-data oracle reads during self-training: {reads}"
            );
        }
        None => {
            let _ = writeln!(out, "self-training never began; no oracle audit window");
        }
    }
    if !summary.final_accuracies.is_empty() {
        let _ = writeln!(out, "held-out accuracy by length:");
        for (length, fast, slow) in &summary.final_accuracies {
            match slow {
                Some(slow) => {
                    let _ = writeln!(out, "  len {length}: fast {fast:.3} slow {slow:.3}");
                }
                None => {
                    let _ = writeln!(out, "  len {length}: fast {fast:.3}");
                }
            }
        }
    }
    out.push_str(&summary.ledger_report);
    out
}
