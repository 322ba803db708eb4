use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mil_core::bagio::Encoding;
use mil_harness::commands;
use mil_harness::config::RunConfig;
use mil_harness::error::{HarnessError, Result};
use mil_harness::sweep::CellStatus;

#[derive(Parser)]
#[command(name = "mil", version, about = "Bag-level training and evaluation of max-pooling MIL models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML); defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the master seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train, validation and test bag files
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        encoding: Option<Encoding>,
    },
    /// Train a model on a generated dataset
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory holding train.milb and val.milb
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a model on a bag file
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        bags: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and test every (training size, fold) cell
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; bags are generated in memory when omitted
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render SVG figures from sweep or evaluation CSVs
    Plot {
        /// Directory holding the CSVs
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the effective configuration
    Config {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, out, encoding } => {
            let mut config = load(&common)?;
            if let Some(e) = encoding {
                config.data.encoding = e;
            }
            let s = commands::generate(&config, &out)?;
            println!("train: {}", s.train);
            println!("val:   {}", s.val);
            println!("test:  {}", s.test);
        }
        Command::Train { common, data, out } => {
            let config = load(&common)?;
            let o = commands::train(&config, &data, &out)?;
            println!(
                "{} epochs ({:?}), best epoch {} with validation loss {:.6}, {} optimizer steps",
                o.log.epochs.len(),
                o.stop,
                o.best_epoch,
                o.best_val_loss,
                o.optimizer_steps
            );
            for w in &o.log.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Eval { common, model, bags, threshold, out } => {
            let config = load(&common)?;
            let t = threshold.unwrap_or(config.eval.threshold);
            let r = commands::eval(&config, &model, &bags, t, &out)?;
            let c = r.confusion;
            println!("tp {} fp {} tn {} fn {}", c.tp, c.fp, c.tn, c.fn_);
            println!("tpr {:.4} tnr {:.4} accuracy {:.4} AP {:.4}", c.tpr(), c.tnr(), c.accuracy(), r.average_precision);
        }
        Command::Sweep { common, data, out } => {
            let config = load(&common)?;
            let r = commands::sweep(&config, data.as_deref(), &out, |c| {
                match c.status {
                    CellStatus::Ok => eprintln!(
                        "size {} fold {}: AP {:.4}",
                        c.size,
                        c.fold,
                        c.average_precision.unwrap_or(f64::NAN)
                    ),
                    CellStatus::Failed => eprintln!("size {} fold {}: failed: {}", c.size, c.fold, c.error),
                }
            })?;
            for s in &r.summary {
                match (s.mean_ap, s.median_ap, s.min_ap, s.max_ap) {
                    (Some(mean), Some(med), Some(lo), Some(hi)) => println!(
                        "N = {:4}: mean AP {mean:.4} median {med:.4} range [{lo:.4}, {hi:.4}] over {} folds",
                        s.size, s.folds_ok
                    ),
                    _ => println!("N = {:4}: every fold failed", s.size),
                }
            }
        }
        Command::Plot { input, out } => {
            for path in commands::plot(&input, &out)? {
                println!("{}", path.display());
            }
        }
        Command::Config { common } => print!("{}", load(&common)?.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_byte(&e))
        }
    }
}

fn exit_byte(e: &HarnessError) -> u8 {
    e.exit_code() as u8
}
