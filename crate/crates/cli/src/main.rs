//! `visenc`: train, tune, evaluate and export vision encoders.
//!
//! Config precedence, lowest to highest: built-in defaults or `--preset`,
//! `--config FILE`, `VISENC_OUTPUT_DIR`, then each `--set key=value` in
//! order, so a repeated key takes its last value.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use visenc::commands;
use visenc::config::RunConfig;
use visenc::data::ProbeMode;
use visenc::{Error, Result};

#[derive(Parser)]
#[command(name = "visenc", version, about = "Vision-encoder pretraining at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run config.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Named experiment; some expand into several runs.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Override a key, e.g. `--set stages.0.samples=640`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Mixed,
    Stratified,
}

#[derive(Subcommand)]
enum Command {
    /// Run the resolution curriculum.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from a saved `state.ovts`.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Instruction-tune a language model on top of an exported encoder.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Zero-shot classification and retrieval report.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Strip a full checkpoint down to its vision tower.
    Export {
        checkpoint: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Finite-difference check of the training objective.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write a synthetic probe shard.
    Gendata {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, short, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 128)]
        resolution: usize,
        #[arg(long, value_enum, default_value_t = Mode::Mixed)]
        mode: Mode,
        #[arg(long, short)]
        out: PathBuf,
    },
}

fn configs(a: &ConfigArgs) -> Result<Vec<(String, RunConfig)>> {
    RunConfig::load(a.config.as_deref(), a.preset.as_deref(), &a.overrides)
}

fn json<S: serde::Serialize>(v: &S) -> String {
    serde_json::to_string(v).unwrap_or_default()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, resume, max_steps } => {
            let runs = configs(&cfg)?;
            if resume.is_some() && runs.len() > 1 {
                return Err(Error::Config("--resume needs a single run".into()));
            }
            for (name, c) in runs {
                let s = commands::cmd_train(&c, resume.as_deref(), max_steps)?;
                println!("{name}: {}", json(&s));
            }
        }
        Command::Finetune { cfg } => {
            for (name, c) in configs(&cfg)? {
                println!("{name}: {}", json(&commands::cmd_finetune(&c)?));
            }
        }
        Command::Eval { cfg } => {
            for (name, c) in configs(&cfg)? {
                let entries = commands::cmd_eval(&c)?;
                print!("# {name}\n{}", commands::eval_table(&entries));
            }
        }
        Command::Export { checkpoint, out } => {
            let bytes = commands::cmd_export(&checkpoint, &out)?;
            println!("wrote {} ({bytes} bytes)", out.display());
        }
        Command::Gradcheck { cfg } => {
            for (name, c) in configs(&cfg)? {
                let report = commands::cmd_gradcheck(&c)?;
                for e in &report.entries {
                    println!("{:<40} {:>3} probes  rel {:.3e}  {}", e.name, e.probes, e.max_rel_err, if e.pass { "ok" } else { "FAIL" });
                }
                println!("{name}: max relative error {:.3e} (tol {:.1e})", report.max_rel_err(), report.tol);
                if !report.passed() {
                    return Err(Error::Numeric(format!("gradient check failed: {:.3e}", report.max_rel_err())));
                }
            }
        }
        Command::Gendata { seed, n, resolution, mode, out } => {
            let mode = match mode {
                Mode::Mixed => ProbeMode::Mixed,
                Mode::Stratified => ProbeMode::Stratified,
            };
            let bytes = commands::cmd_gendata(seed, n, resolution, mode, &out)?;
            println!("wrote {n} records to {} ({bytes} bytes)", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
