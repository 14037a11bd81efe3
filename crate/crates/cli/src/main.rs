use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dsf_cli::commands::{self, CSV_HEADER};
use dsf_cli::config::RunConfig;
use dsf_cli::{exit, exit_code, init_threads};
use dsf_core::{Error, Result};

#[derive(Parser)]
#[command(name = "dsf", version, about = "Rotation-equivariant steerable-filter CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier; writes a metrics CSV and checkpoints.
    Train { config: PathBuf },
    /// Test-set accuracy of a checkpoint.
    Eval { config: PathBuf, checkpoint: PathBuf },
    /// Feature variance under input rotations, against a plain-CNN baseline.
    EquivReport {
        config: PathBuf,
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        image: usize,
        /// Defaults to `<output.dir>/equiv_report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Basis filters and synthesized input-layer filters as PGM images.
    ExportFilters {
        config: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        out_dir: PathBuf,
    },
    /// Compare analytic gradients with finite differences.
    GradCheck {
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let summary = commands::cmd_train(&cfg)?;
            println!("{CSV_HEADER}");
            for m in &summary.history {
                println!("{},{:.6},{:.6},{:.6},{:.3}", m.epoch, m.train_loss, m.train_acc, m.test_acc, m.wall_seconds);
            }
            match summary.best_test_acc {
                Some(acc) => println!("best test accuracy {acc:.4} ({} parameters)", summary.param_count),
                None => println!("no epochs run ({} parameters)", summary.param_count),
            }
            println!("checkpoint {}", summary.best_checkpoint.display());
            println!("metrics {}", summary.metrics.display());
        }
        Command::Eval { config, checkpoint } => {
            let cfg = RunConfig::load(&config)?;
            let s = commands::cmd_eval(&cfg, &checkpoint)?;
            println!("accuracy {:.4} on {} samples (error {:.2}%)", s.accuracy, s.samples, 100.0 * (1.0 - s.accuracy));
        }
        Command::EquivReport { config, checkpoint, image, out } => {
            let cfg = RunConfig::load(&config)?;
            let out = out.unwrap_or_else(|| cfg.output.dir.join("equiv_report"));
            let s = commands::cmd_equiv_report(&cfg, &checkpoint, image, &out)?;
            print!("{}", s.text);
            println!("written to {}", out.display());
        }
        Command::ExportFilters { config, ckpt, out_dir } => {
            let cfg = RunConfig::load(&config)?;
            let files = commands::cmd_export_filters(&cfg, ckpt.as_deref(), &out_dir)?;
            println!("wrote {} images to {}", files.len(), out_dir.display());
        }
        Command::GradCheck { op, seed } => {
            let results = commands::cmd_grad_check(op.as_deref(), seed)?;
            let mut failed = 0;
            for r in &results {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                println!("{:<24} rel_err {:.3e} over {:>5} coords  {verdict}", r.op, r.relative_error, r.coordinates);
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(Error::Numeric(format!("{failed} gradient check(s) failed")));
            }
        }
    }
    Ok(exit::OK)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(exit::USAGE as u8);
    }
    match run(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
