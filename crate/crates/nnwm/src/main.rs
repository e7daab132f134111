use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nnwm::commands::{
    cmd_attack, cmd_extract, cmd_grad_check, cmd_train, default_attack_dir, KEY_FILE, MESSAGE_FILE,
};
use nnwm::error::{CliError, Result};
use nnwm::files::write_json;
use nnwm::report::build_report;
use nnwm::ExperimentConfig;

/// Neural network watermarking experiments.
#[derive(Parser, Debug)]
#[command(name = "nnwm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a host (optionally embedding a watermark) and write the run files.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the global seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory; defaults to the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract bits from a checkpoint with a key file.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        key: PathBuf,
        /// Reference message; enables the BER field.
        #[arg(long)]
        message: Option<PathBuf>,
        /// Conv layer id; defaults to the checkpoint's embed layer.
        #[arg(long)]
        layer: Option<usize>,
        /// Write the detection JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the attacks listed in a config against a checkpoint.
    Attack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to key.json next to the checkpoint.
        #[arg(long)]
        key: Option<PathBuf>,
        /// Defaults to message.json next to the checkpoint.
        #[arg(long)]
        message: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to attacks/ next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Consolidate a directory of runs into markdown and CSV tables.
    Report {
        run_dir: PathBuf,
        /// Write report.md and CSVs here; prints markdown to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients for a config's host.
    GradCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path)?.with_seed(seed);
    cfg.validate()?;
    Ok(cfg)
}

fn emit_json<T: serde::Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => write_json(path, value),
        None => {
            let mut text = serde_json::to_string_pretty(value).expect("plain data serializes");
            text.push('\n');
            print_stdout(&text)
        }
    }
}

/// A closed pipe (`nnwm ... | head`) is not an error.
fn print_stdout(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn sibling(checkpoint: &Path, name: &str) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join(name)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            let summary = cmd_train(&cfg, &out)?;
            eprintln!("wrote {}", out.display());
            emit_json(&summary, None)
        }
        Command::Extract {
            checkpoint,
            key,
            message,
            layer,
            out,
        } => {
            let detection = cmd_extract(&checkpoint, &key, message.as_deref(), layer)?;
            emit_json(&detection, out.as_deref())
        }
        Command::Attack {
            config,
            checkpoint,
            key,
            message,
            seed,
            out,
        } => {
            let cfg = load_config(&config, seed)?;
            let key = key.unwrap_or_else(|| sibling(&checkpoint, KEY_FILE));
            let message = message.unwrap_or_else(|| sibling(&checkpoint, MESSAGE_FILE));
            let out = out.unwrap_or_else(|| default_attack_dir(&checkpoint));
            let files = cmd_attack(&cfg, &checkpoint, &key, &message, &out)?;
            for f in &files {
                eprintln!(
                    "{}: BER {} -> {}, E_R {:.4e} -> {:.4e}",
                    f.name,
                    f.report.ber_before,
                    f.report.ber_after,
                    f.report.embedding_loss_before,
                    f.report.embedding_loss_after
                );
            }
            Ok(())
        }
        Command::Report { run_dir, out } => {
            let report = build_report(&run_dir)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            for (name, reason) in &report.missing {
                eprintln!("missing run {name}: {reason}");
            }
            match out {
                Some(dir) => report.write(&dir),
                None => print_stdout(&report.markdown),
            }
        }
        Command::GradCheck {
            config,
            seed,
            samples,
            tolerance,
            out,
        } => {
            let cfg = load_config(&config, seed)?;
            let report = cmd_grad_check(&cfg, samples, tolerance)?;
            emit_json(&report, out.as_deref())?;
            if report.passed {
                Ok(())
            } else {
                Err(CliError::GradCheck {
                    max_rel_error: report.max_rel_error,
                    tolerance,
                })
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
