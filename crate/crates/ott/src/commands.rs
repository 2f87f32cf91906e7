//! The subcommands as library functions. Each writes its tables into the
//! output directory and returns what it computed.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use ott_core::data::{
    corrupt_replace, decode, encode, eval_windows, eval_windows_with_inputs, split_corpus, CorpusSplit, CorruptionSpec,
};
use ott_core::theory::{run_suites, TheoryReport};
use ott_core::train::{evaluate, generate as sample, MetricsRow, RunOutcome, TrainHooks, Trainer};
use ott_core::transformer::ModelConfig;
use ott_core::RngState;
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus::{Corpus, CorpusError};
use crate::error::CliError;
use crate::report::{ablation_csv, metrics_csv, robust_csv, theory_csv, AblationCell, RobustTable};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.ottc";
pub const CORPUS_CACHE_FILE: &str = "corpus.ottd";
pub const ROBUST_FILE: &str = "robust.csv";
pub const THEORY_FILE: &str = "theory.csv";
pub const THEORY_JSON_FILE: &str = "theory.json";
pub const ABLATION_FILE: &str = "ablation.csv";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn split(cfg: &RunConfig, corpus: &Corpus) -> Result<CorpusSplit, CliError> {
    split_corpus(&corpus.ids, cfg.test_fraction).map_err(|e| CliError::Corpus(e.into()))
}

fn row_json(r: &MetricsRow) -> serde_json::Value {
    json!({
        "iteration": r.iteration,
        "train_loss": r.train_loss,
        "test_loss": r.test_loss,
        "transport_cost": r.transport_cost,
        "perplexity": r.perplexity,
        "wall_ms": r.wall_ms,
    })
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint; its config must hash the same.
    pub resume: Option<PathBuf>,
    /// Stop (with a checkpoint) once this iteration completes.
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub outcome: RunOutcome,
    pub history: Vec<MetricsRow>,
    pub iteration: u64,
    pub out_dir: PathBuf,
}

struct Hooks {
    start: Option<Instant>,
    stop_after: Option<u64>,
    checkpoint_every: u64,
}

impl TrainHooks for Hooks {
    fn now_ms(&mut self) -> Option<u64> {
        self.start.map(|s| s.elapsed().as_millis() as u64)
    }

    fn should_stop(&mut self, it: u64) -> bool {
        self.stop_after == Some(it) || (self.checkpoint_every > 0 && it.is_multiple_of(self.checkpoint_every))
    }
}

pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainResult, CliError> {
    cfg.validate()?;
    let corpus = Corpus::load(&cfg.corpus_path())?;
    let data = split(cfg, &corpus)?;
    let model = cfg.model_config(corpus.vocab.len());
    let mut trainer = match &opts.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.config.hash() != cfg.hash() || ck.vocab != corpus.vocab {
                return Err(CliError::Config(format!(
                    "{} was written by a different config or corpus",
                    p.display()
                )));
            }
            Trainer::from_state(model, cfg.train_config(), ck.state)?
        }
        None => Trainer::new(model, cfg.train_config())?,
    };

    let out = cfg.out_dir.clone();
    create_dir(&out)?;
    corpus.save(&out.join(CORPUS_CACHE_FILE))?;
    // Checkpoints leave out the output directory, so identical runs written
    // to different places produce identical files.
    let identity = RunConfig {
        out_dir: PathBuf::new(),
        ..cfg.clone()
    };
    let checkpoint = |t: &Trainer, name: &str| -> Result<(), CliError> {
        let ck = Checkpoint {
            config: identity.clone(),
            vocab: corpus.vocab.clone(),
            state: t.state.clone(),
        };
        Ok(ck.save(&out.join(name))?)
    };

    let mut hooks = Hooks {
        start: cfg.record_wall_time.then(Instant::now),
        stop_after: opts.stop_after,
        checkpoint_every: cfg.checkpoint_every,
    };
    let outcome = loop {
        let outcome = trainer.run(&data, &mut hooks)?;
        if outcome != RunOutcome::Stopped {
            break outcome;
        }
        let it = trainer.state.iteration;
        if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 {
            checkpoint(&trainer, &format!("checkpoint_{it}.ottc"))?;
        }
        if opts.stop_after == Some(it) {
            break outcome;
        }
    };
    if !matches!(outcome, RunOutcome::Diverged(_)) {
        checkpoint(&trainer, CHECKPOINT_FILE)?;
    }

    let hash = cfg.hash_hex();
    let history = trainer.state.history.clone();
    write(&out.join(METRICS_FILE), metrics_csv(&history, &hash))?;
    let (status, failure) = match &outcome {
        RunOutcome::Completed => ("completed", None),
        RunOutcome::Stopped => ("stopped", None),
        RunOutcome::Diverged(r) => ("diverged", Some(r.to_string())),
    };
    let summary = json!({
        "config_hash": hash,
        "config": cfg,
        "status": status,
        "failure": failure,
        "iteration": trainer.state.iteration,
        "vocab_size": corpus.vocab.len(),
        "parameters": trainer.state.params.tensors().iter().map(|t| t.len()).sum::<usize>(),
        "final": history.last().map(row_json),
    });
    write(&out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary).expect("json") + "\n")?;
    Ok(TrainResult {
        outcome,
        iteration: trainer.state.iteration,
        history,
        out_dir: out,
    })
}

/// The corpus a checkpoint was trained on: `corpus` if given, else the
/// cache next to the checkpoint, else the path in its config.
pub fn checkpoint_corpus(checkpoint: &Path, ck: &Checkpoint, corpus: Option<&Path>) -> Result<Corpus, CliError> {
    let sibling = checkpoint.with_file_name(CORPUS_CACHE_FILE);
    let path = match corpus {
        Some(p) => p.to_path_buf(),
        None if sibling.exists() => sibling,
        None => ck.config.corpus_path(),
    };
    let c = Corpus::load(&path)?;
    if c.vocab != ck.vocab {
        return Err(CliError::Config(format!(
            "{} does not match the checkpoint vocabulary",
            path.display()
        )));
    }
    Ok(c)
}

fn model_of(ck: &Checkpoint) -> ModelConfig {
    ck.config.model_config(ck.vocab.len())
}

/// Mean test loss of a checkpoint over the configured evaluation windows.
pub fn eval(checkpoint: &Path, corpus: Option<&Path>) -> Result<f64, CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let c = checkpoint_corpus(checkpoint, &ck, corpus)?;
    let data = split(&ck.config, &c)?;
    let model = model_of(&ck);
    let windows = eval_windows(&data.test, model.n_ctx, ck.config.eval_windows).map_err(CorpusError::from)?;
    Ok(evaluate(&ck.state.params, &model, ck.config.mode.into(), &windows).map_err(ott_core::train::TrainError::from)?)
}

/// Test loss with corrupted inputs and clean targets at each rate. The
/// same seed is used at every rate, so corrupted positions are nested.
pub fn robust(
    checkpoint: &Path,
    corpus: Option<&Path>,
    rates: Option<&[f64]>,
    out_dir: &Path,
) -> Result<RobustTable, CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let c = checkpoint_corpus(checkpoint, &ck, corpus)?;
    let data = split(&ck.config, &c)?;
    let model = model_of(&ck);
    let mode = ck.config.mode.into();
    let rates = rates.unwrap_or(&ck.config.robust_rates).to_vec();
    if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(CliError::Config("rates must lie in [0, 1]".into()));
    }
    let count = ck.config.robust_windows;
    let loss_on = |inputs: &[usize]| -> Result<f64, CliError> {
        let w = eval_windows_with_inputs(inputs, &data.test, model.n_ctx, count).map_err(CorpusError::from)?;
        Ok(evaluate(&ck.state.params, &model, mode, &w).map_err(ott_core::train::TrainError::from)?)
    };
    let clean = loss_on(&data.test)?;
    let mut losses = Vec::with_capacity(rates.len());
    for &rate in &rates {
        let spec = CorruptionSpec {
            rate,
            seed: ck.config.seed,
        };
        let noisy = corrupt_replace(&data.test, c.vocab.len(), spec).map_err(CorpusError::from)?;
        losses.push(loss_on(&noisy)?);
    }
    let table = RobustTable {
        drops: losses.iter().map(|l| l - clean).collect(),
        rates,
        losses,
    };
    create_dir(out_dir)?;
    write(&out_dir.join(ROBUST_FILE), robust_csv(&table, &ck.config.hash_hex()))?;
    Ok(table)
}

pub fn theory(cfg: &RunConfig) -> Result<TheoryReport, CliError> {
    let report = run_suites(&cfg.theory_config());
    create_dir(&cfg.out_dir)?;
    let hash = cfg.hash_hex();
    write(&cfg.out_dir.join(THEORY_FILE), theory_csv(&report, &hash))?;
    let suites: Vec<_> = report
        .suites
        .iter()
        .map(|s| {
            json!({
                "name": s.name,
                "passed": s.passed,
                "cases": s.cases,
                "worst_slack": s.worst_slack,
                "certified_constant": s.constant,
                "lambda": s.lambda,
                "detail": s.detail,
            })
        })
        .collect();
    let doc = json!({ "config_hash": hash, "passed": report.passed(), "suites": suites });
    write(&cfg.out_dir.join(THEORY_JSON_FILE), serde_json::to_string_pretty(&doc).expect("json") + "\n")?;
    Ok(report)
}

/// Worker threads allowed by `OTT_THREADS` (default 1).
pub fn thread_cap() -> usize {
    std::env::var("OTT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(1)
        .max(1)
}

/// Trains one model per `(λ, M)` cell, λ-major, each into its own
/// subdirectory. A divergent cell is recorded and the grid continues.
pub fn ablate(cfg: &RunConfig) -> Result<Vec<AblationCell>, CliError> {
    cfg.validate()?;
    let grid: Vec<RunConfig> = cfg
        .ablate
        .lambdas
        .iter()
        .flat_map(|&lambda| cfg.ablate.steps.iter().map(move |&steps| (lambda, steps)))
        .enumerate()
        .map(|(i, (lambda, steps))| {
            let mut c = cfg.clone();
            c.model.lambda = lambda;
            c.model.steps = steps;
            c.out_dir = cfg.out_dir.join(format!("cell_{i}"));
            c
        })
        .collect();
    for c in &grid {
        c.validate()?;
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<TrainResult, CliError>>>> = Mutex::new((0..grid.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..thread_cap().min(grid.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(c) = grid.get(i) else { break };
                let r = train(c, &TrainOptions::default());
                results.lock().expect("no poisoned lock")[i] = Some(r);
            });
        }
    });

    let mut cells = Vec::with_capacity(grid.len());
    for (c, r) in grid.iter().zip(results.into_inner().expect("no poisoned lock")) {
        let r = r.expect("every cell ran")?;
        let last = r.history.last();
        cells.push(AblationCell {
            lambda: c.model.lambda,
            steps: c.model.steps,
            final_test_loss: last.map(|x| x.test_loss),
            final_transport_cost: last.map(|x| x.transport_cost),
            failure: match r.outcome {
                RunOutcome::Diverged(f) => Some(f.to_string()),
                _ => None,
            },
        });
    }
    create_dir(&cfg.out_dir)?;
    write(&cfg.out_dir.join(ABLATION_FILE), ablation_csv(&cells, &cfg.hash_hex()))?;
    Ok(cells)
}

/// Samples `length` characters after `prompt`; temperature 0 is greedy.
pub fn generate(checkpoint: &Path, prompt: &str, length: usize, temperature: f64, seed: u64) -> Result<String, CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let ids = encode(prompt, &ck.vocab).map_err(CorpusError::from)?;
    if ids.is_empty() {
        return Err(CliError::Config("prompt must be nonempty".into()));
    }
    let out = sample(
        &ck.state.params,
        &model_of(&ck),
        ck.config.mode.into(),
        &ids,
        length,
        temperature,
        &mut RngState::new(seed),
    )
    .map_err(ott_core::train::TrainError::from)?;
    Ok(decode(&out, &ck.vocab).map_err(CorpusError::from)?)
}
