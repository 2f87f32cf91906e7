use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ott::commands::{self, TrainOptions, CHECKPOINT_FILE};
use ott::{CliError, RunConfig};
use ott_core::train::RunOutcome;

#[derive(Parser)]
#[command(name = "ott", version, about = "Continuous-time transformer with transport-cost regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = d.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, a summary and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Continue from a checkpoint written with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this iteration, leaving a resumable checkpoint.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Test loss of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Test loss and drop under input corruption at several rates.
    Robust {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Check the optimal-control certificates on synthetic problems.
    Theory {
        #[command(flatten)]
        common: Common,
        /// Use this λ in every suite.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Train one model per (λ, steps) cell.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        steps: Option<Vec<usize>>,
    },
    /// Sample text from a checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 200)]
        length: usize,
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            common,
            mode,
            iters,
            lambda,
            resume,
            stop_after,
        } => {
            let mut cfg = common.load()?;
            if let Some(m) = mode {
                cfg.mode = serde_json::from_value(serde_json::Value::String(m))
                    .map_err(|e| CliError::Config(format!("mode: {e}")))?;
            }
            if let Some(i) = iters {
                cfg.iters = i;
            }
            if let Some(l) = lambda {
                cfg.model.lambda = l;
            }
            let r = commands::train(&cfg, &TrainOptions { resume, stop_after })?;
            if let Some(last) = r.history.last() {
                println!(
                    "iteration {} test_loss {} perplexity {} transport_cost {}",
                    last.iteration, last.test_loss, last.perplexity, last.transport_cost
                );
            }
            println!("wrote {}", r.out_dir.display());
            match r.outcome {
                RunOutcome::Diverged(f) => Err(CliError::Diverged(f)),
                _ => Ok(()),
            }
        }
        Command::Eval { checkpoint, corpus } => {
            let loss = commands::eval(&checkpoint, corpus.as_deref())?;
            println!("test_loss {loss} perplexity {}", loss.exp());
            Ok(())
        }
        Command::Robust {
            checkpoint,
            corpus,
            rates,
            out_dir,
        } => {
            let dir = out_dir.unwrap_or_else(|| checkpoint.parent().map(PathBuf::from).unwrap_or_default());
            let t = commands::robust(&checkpoint, corpus.as_deref(), rates.as_deref(), &dir)?;
            for ((r, l), d) in t.rates.iter().zip(&t.losses).zip(&t.drops) {
                println!("rate {r} loss {l} drop {d}");
            }
            Ok(())
        }
        Command::Theory { common, lambda } => {
            let mut cfg = common.load()?;
            if lambda.is_some() {
                cfg.theory.lambda = lambda;
            }
            let report = commands::theory(&cfg)?;
            for s in &report.suites {
                let verdict = if s.passed { "PASS" } else { "FAIL" };
                let constant = s.constant.map(|c| format!(" constant {c}")).unwrap_or_default();
                println!("{verdict} {} cases {} worst_slack {}{constant} {}", s.name, s.cases, s.worst_slack, s.detail);
            }
            if report.passed() {
                Ok(())
            } else {
                let failed: Vec<_> = report.suites.iter().filter(|s| !s.passed).map(|s| s.name.as_str()).collect();
                Err(CliError::Theory(failed.join(", ")))
            }
        }
        Command::Ablate { common, lambdas, steps } => {
            let mut cfg = common.load()?;
            if let Some(l) = lambdas {
                cfg.ablate.lambdas = l;
            }
            if let Some(s) = steps {
                cfg.ablate.steps = s;
            }
            for c in commands::ablate(&cfg)? {
                let loss = c.final_test_loss.map(|l| l.to_string()).unwrap_or_else(|| "-".into());
                let status = c.failure.unwrap_or_else(|| "completed".into());
                println!("lambda {} steps {} test_loss {loss} {status}", c.lambda, c.steps);
            }
            Ok(())
        }
        Command::Generate {
            checkpoint,
            prompt,
            length,
            temperature,
            seed,
        } => {
            let path = if checkpoint.is_dir() { checkpoint.join(CHECKPOINT_FILE) } else { checkpoint };
            println!("{}", commands::generate(&path, &prompt, length, temperature, seed)?);
            Ok(())
        }
    }
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
