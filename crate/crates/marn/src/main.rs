//! Command-line entry point wiring the two-stage pipeline:
//! synth -> train-basis -> build-memory -> train-memory -> caption/eval.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error,
//! 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use marn::config::{parse_dims, Overrides, RunConfig};
use marn::error::MarnError;
use marn::pipeline::{
    load_fused, run_build_memory, run_caption, run_eval, run_gradcheck, run_synth,
    run_train_basis, run_train_memdec,
};

#[derive(Parser)]
#[command(name = "marn", version, about = "Memory-attended video captioning over precomputed features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// JSON config file mirroring the run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Fusion weight in [0, 1].
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// AC-loss weight.
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Top-k truncation for memory construction.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Model widths as m,H,A,d'.
    #[arg(long, global = true, value_parser = parse_dims)]
    dims: Option<(usize, usize, usize, usize)>,
    #[arg(long, global = true)]
    epochs: Option<u32>,
    /// Beam width (1 = greedy).
    #[arg(long, global = true)]
    beam: Option<usize>,
    /// Dimension preset: desk or paper.
    #[arg(long, global = true)]
    preset: Option<String>,
}

impl CommonOpts {
    fn resolve(&self) -> Result<RunConfig, MarnError> {
        let over = Overrides {
            seed: self.seed,
            lambda: self.lambda,
            beta: self.beta,
            k: self.k,
            dims: self.dims,
            epochs: self.epochs,
            beam: self.beam,
            preset: self.preset.clone(),
        };
        RunConfig::resolve(self.config.as_deref(), &over)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (features + manifest).
    Synth {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the basis decoder on a manifest's train split.
    TrainBasis {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the per-word memory from a trained basis checkpoint.
    BuildMemory {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        manifest: PathBuf,
        /// Path to basis.marnc (vocab.txt must sit next to it).
        #[arg(long)]
        basis: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the attended memory decoder (basis and memory frozen).
    TrainMemory {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        basis: PathBuf,
        #[arg(long)]
        memory: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode captions for a split into id<TAB>caption lines.
    Caption {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        basis: PathBuf,
        #[arg(long, requires = "memdec")]
        memory: Option<PathBuf>,
        #[arg(long, requires = "memory")]
        memdec: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a split and score it with BLEU-4, ROUGE-L, and CIDEr.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        basis: PathBuf,
        #[arg(long, requires = "memdec")]
        memory: Option<PathBuf>,
        #[arg(long, requires = "memory")]
        memdec: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Pick lambda by CIDEr grid search on the validation split.
        #[arg(long, conflicts_with = "lambda")]
        tune_lambda: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the micro model's gradients.
    Gradcheck {
        #[command(flatten)]
        common: CommonOpts,
    },
}

fn run(cli: Cli) -> Result<ExitCode, MarnError> {
    match cli.command {
        Command::Synth { common, out } => {
            let cfg = common.resolve()?;
            let manifest = run_synth(&cfg, &out)?;
            println!(
                "synth: {} videos ({} train / {} val / {} test) -> {}",
                manifest.videos.len(),
                manifest.splits.train.len(),
                manifest.splits.val.len(),
                manifest.splits.test.len(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::TrainBasis {
            common,
            manifest,
            out,
        } => {
            let cfg = common.resolve()?;
            let outcome = run_train_basis(&manifest, &cfg, &out)?;
            println!(
                "train-basis: {} epochs, selected epoch {} (val CIDEr {:.4}), digest {:016x}",
                outcome.report.epochs.len(),
                outcome.report.selected_epoch,
                outcome.report.selected_val_cider,
                outcome.digest
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::BuildMemory {
            common,
            manifest,
            basis,
            out,
        } => {
            let cfg = common.resolve()?;
            let outcome = run_build_memory(&manifest, &basis, &cfg, &out)?;
            println!(
                "build-memory: {} (basis {:016x}, memory {:016x})",
                outcome.memory_path.display(),
                outcome.basis_digest,
                outcome.memory_digest
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::TrainMemory {
            common,
            manifest,
            basis,
            memory,
            out,
        } => {
            let cfg = common.resolve()?;
            let outcome = run_train_memdec(&manifest, &basis, &memory, &cfg, &out)?;
            println!(
                "train-memory: selected epoch {} (val CIDEr {:.4}), digest {:016x}",
                outcome.report.selected_epoch, outcome.report.selected_val_cider, outcome.digest
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Caption {
            common,
            manifest,
            basis,
            memory,
            memdec,
            split,
            out,
        } => {
            let cfg = common.resolve()?;
            let pair = memory.as_deref().zip(memdec.as_deref());
            let model = load_fused(&manifest, &basis, pair)?;
            let path = run_caption(&model, &split, cfg.lambda, &cfg, &out)?;
            println!("caption: wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            common,
            manifest,
            basis,
            memory,
            memdec,
            split,
            tune_lambda,
            out,
        } => {
            let cfg = common.resolve()?;
            let pair = memory.as_deref().zip(memdec.as_deref());
            let model = load_fused(&manifest, &basis, pair)?;
            let outcome = run_eval(&model, &split, cfg.lambda, tune_lambda, &cfg, &out)?;
            println!(
                "eval[{split}]: lambda {:.2} BLEU-4 {:.4} ROUGE-L {:.4} CIDEr {:.4}",
                outcome.lambda,
                outcome.report.bleu4,
                outcome.report.rouge_l,
                outcome.report.cider
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { common } => {
            let cfg = common.resolve()?;
            let err = run_gradcheck(cfg.seed)?;
            println!("gradcheck: max relative error {err:.3e}");
            if err < 1e-4 {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("gradcheck failed: {err:.3e} >= 1e-4");
                Ok(ExitCode::from(3))
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own message; --help/--version are success.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
