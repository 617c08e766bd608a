use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{RunManifest, STATUS_FAILED};
use super::run::{execute, MANIFEST_FILE};
use super::{parse_json, read_file, write_file, CliError, CliResult, EXIT_FAILURE, EXIT_NO_SUCCESS};
use crate::autodiff::nn::{Positional, TokenEmbedding};
use crate::encoders::{ContextKind, EncoderConfig};
use crate::env::Regime;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream, stream_rng, RunRng};
use crate::runner::{ReplayMode, RunConfig};
use crate::sac::SacConfig;

pub const SWEEP_SCHEMA: &str = "tacrl-sweep/1";

/// Sampling space of a random search. Lists are sampled uniformly, `(lo, hi)`
/// pairs of integers uniformly inclusive, and `lr` log-uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub n_samples: usize,
    pub master_seed: u64,
    pub methods: Vec<String>,
    pub total_timesteps: Vec<u64>,
    pub n_tasks: Vec<usize>,
    pub n_dims: Vec<usize>,
    pub regimes: Vec<Regime>,
    pub lr: (f64, f64),
    pub batch_size: (usize, usize),
    pub warmup_steps: (u64, u64),
    pub burnin_steps: (u64, u64),
    pub hidden: Vec<usize>,
    pub auto_entropy: Vec<bool>,
    pub beta: Vec<f64>,
    pub buffer_capacity: Vec<usize>,
    pub history_length: Vec<usize>,
    pub context_size: usize,
    pub tx_hidden: Vec<usize>,
    pub tx_heads: Vec<usize>,
    pub tx_positional: Vec<Positional>,
    pub tx_token_embedding: Vec<TokenEmbedding>,
    pub episode_length: usize,
    /// Evaluations spread evenly over each run.
    pub evals_per_run: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            n_samples: 20,
            master_seed: 0,
            methods: ["ER", "FineTune", "TaskID", "MH", "TAMH", "3RL", "ER-TX"].map(String::from).to_vec(),
            total_timesteps: vec![2000, 4000, 8000],
            n_tasks: vec![2, 4, 8],
            n_dims: vec![2, 4, 8],
            regimes: vec![Regime::Continual, Regime::MultiTask],
            lr: (1e-5, 1e-1),
            batch_size: (2, 256),
            warmup_steps: (2, 100),
            burnin_steps: (2, 100),
            hidden: vec![8, 16, 32, 64, 128],
            auto_entropy: vec![true, false],
            beta: vec![1.0, 0.8, 0.5],
            buffer_capacity: vec![1_000, 10_000, 100_000, 1_000_000],
            history_length: vec![2, 4, 8, 16],
            context_size: 30,
            tx_hidden: vec![8, 16],
            tx_heads: vec![1, 2],
            tx_positional: vec![Positional::Learned, Positional::Sinusoidal],
            tx_token_embedding: vec![TokenEmbedding::Learned, TokenEmbedding::None],
            episode_length: 100,
            evals_per_run: 10,
        }
    }
}

/// Context kind, replay mode and (for the independent baseline) regime of a method name.
pub fn parse_method(name: &str) -> Result<(ContextKind, ReplayMode, Option<Regime>)> {
    Ok(match name.to_ascii_lowercase().as_str() {
        "er" => (ContextKind::None, ReplayMode::Replay, None),
        "finetune" => (ContextKind::None, ReplayMode::FineTune, None),
        "taskid" => (ContextKind::TaskId, ReplayMode::Replay, None),
        "mh" => (ContextKind::MultiHead, ReplayMode::Replay, None),
        "tamh" => (ContextKind::TaskAgnosticMultiHead, ReplayMode::Replay, None),
        "3rl" | "rnn" => (ContextKind::Rnn, ReplayMode::Replay, None),
        "er-tx" | "tx" => (ContextKind::Transformer, ReplayMode::Replay, None),
        "independent" => (ContextKind::None, ReplayMode::Replay, Some(Regime::Independent)),
        other => return Err(Error::invalid(format!("unknown method {other}"))),
    })
}

fn pick<T: Clone>(rng: &mut RunRng, values: &[T]) -> T {
    values[rng.random_range(0..values.len())].clone()
}

fn int_range<T: Copy + PartialOrd + rand::distr::uniform::SampleUniform>(rng: &mut RunRng, (lo, hi): (T, T)) -> T {
    rng.random_range(lo..=hi)
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        let empty = [
            ("methods", self.methods.is_empty()),
            ("total_timesteps", self.total_timesteps.is_empty()),
            ("n_tasks", self.n_tasks.is_empty()),
            ("n_dims", self.n_dims.is_empty()),
            ("regimes", self.regimes.is_empty()),
            ("hidden", self.hidden.is_empty()),
            ("auto_entropy", self.auto_entropy.is_empty()),
            ("beta", self.beta.is_empty()),
            ("buffer_capacity", self.buffer_capacity.is_empty()),
            ("history_length", self.history_length.is_empty()),
            ("tx_hidden", self.tx_hidden.is_empty()),
            ("tx_heads", self.tx_heads.is_empty()),
            ("tx_positional", self.tx_positional.is_empty()),
            ("tx_token_embedding", self.tx_token_embedding.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::invalid(format!("sweep field {name} is empty")));
        }
        for m in &self.methods {
            parse_method(m)?;
        }
        if !(self.lr.0 > 0.0 && self.lr.0 <= self.lr.1) {
            return Err(Error::invalid("lr range must be positive and ordered"));
        }
        if self.batch_size.0 == 0 || self.batch_size.0 > self.batch_size.1 {
            return Err(Error::invalid("batch_size range must be positive and ordered"));
        }
        if self.warmup_steps.0 > self.warmup_steps.1 || self.burnin_steps.0 > self.burnin_steps.1 {
            return Err(Error::invalid("warmup and burn-in ranges must be ordered"));
        }
        if self.tx_hidden.iter().any(|h| self.tx_heads.iter().any(|n| *n == 0 || h % n != 0)) {
            return Err(Error::invalid("every transformer width must be divisible by every head count"));
        }
        if self.evals_per_run == 0 || self.episode_length == 0 || self.context_size == 0 {
            return Err(Error::invalid("evals_per_run, episode_length and context_size must be positive"));
        }
        Ok(())
    }

    /// Draws `n_samples` configurations; identical for identical specs.
    pub fn sample(&self) -> Result<Vec<RunConfig>> {
        self.validate()?;
        let mut rng = stream_rng(self.master_seed, stream::SWEEP);
        (0..self.n_samples).map(|i| self.sample_one(&mut rng, i)).collect()
    }

    fn sample_one(&self, rng: &mut RunRng, index: usize) -> Result<RunConfig> {
        let (context, replay, forced) = parse_method(&pick(rng, &self.methods))?;
        let total = pick(rng, &self.total_timesteps);
        let n_tasks = pick(rng, &self.n_tasks);
        let n_dims = pick(rng, &self.n_dims);
        let regime = pick(rng, &self.regimes);
        let lr = rng.random_range(self.lr.0.ln()..=self.lr.1.ln()).exp();
        let batch_size = int_range(rng, self.batch_size);
        let warmup_steps = int_range(rng, self.warmup_steps);
        let burnin_steps = int_range(rng, self.burnin_steps);
        let hidden = pick(rng, &self.hidden);
        let auto_entropy = pick(rng, &self.auto_entropy);
        let beta = pick(rng, &self.beta);
        let buffer_capacity = pick(rng, &self.buffer_capacity);
        let history_length = pick(rng, &self.history_length);
        let encoder = if context == ContextKind::Transformer {
            EncoderConfig {
                hidden_size: pick(rng, &self.tx_hidden),
                n_heads: pick(rng, &self.tx_heads),
                positional: pick(rng, &self.tx_positional),
                token_embedding: pick(rng, &self.tx_token_embedding),
                context_size: self.context_size,
                history_length,
                ..EncoderConfig::default()
            }
        } else {
            EncoderConfig { hidden_size: hidden, context_size: self.context_size, history_length, ..EncoderConfig::default() }
        };
        let t_per_task = ((total / n_tasks as u64) as usize).max(1);
        let config = RunConfig {
            mode: forced.unwrap_or(regime),
            n_tasks,
            n_dims,
            t_per_task,
            episode_length: self.episode_length,
            context,
            encoder,
            hidden,
            sac: SacConfig { lr, batch_size, auto_entropy, ..SacConfig::default() },
            replay,
            beta,
            buffer_capacity,
            warmup_steps,
            burnin_steps,
            eval_every: Some(((t_per_task * n_tasks) as u64 / self.evals_per_run).max(1)),
            seed: derive_seed(self.master_seed, index as u64),
            ..RunConfig::default()
        };
        config.validate()?;
        Ok(config)
    }
}

fn failed_manifest(config: &RunConfig, message: String) -> RunManifest {
    let mut m = RunManifest::new(config);
    m.status = STATUS_FAILED.into();
    m.error = Some(message);
    m
}

/// Samples the sweep and runs it on up to `jobs` threads. Run `i` writes to
/// `out/NNNN-<run_id>/`; a failing run is recorded and the sweep continues.
pub fn cmd_sweep(spec_path: &Path, out: &Path, jobs: usize) -> CliResult<Vec<RunManifest>> {
    let text = read_file(spec_path)?;
    let spec: SweepSpec = parse_json(spec_path, &text)?;
    let configs = spec.sample().map_err(|e| CliError::input(format!("{}: {e}", spec_path.display())))?;
    std::fs::create_dir_all(out)
        .map_err(|e| CliError { code: EXIT_FAILURE, message: format!("cannot create {}: {e}", out.display()), step: None })?;

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<RunManifest>>> = Mutex::new(vec![None; configs.len()]);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, configs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(config) = configs.get(i) else { break };
                let dir = out.join(format!("{i:04}-{}", super::run_id(config)));
                let manifest = match catch_unwind(AssertUnwindSafe(|| execute(config, &dir))) {
                    Ok(Ok(m)) => m,
                    Ok(Err(e)) => {
                        log::info!("run {i} failed: {e}");
                        read_file(&dir.join(MANIFEST_FILE))
                            .ok()
                            .and_then(|t| serde_json::from_str(&t).ok())
                            .unwrap_or_else(|| failed_manifest(config, e.message.clone()))
                    }
                    Err(_) => {
                        let m = failed_manifest(config, "run panicked".into());
                        if let Ok(t) = serde_json::to_string_pretty(&m) {
                            let _ = std::fs::create_dir_all(&dir);
                            let _ = std::fs::write(dir.join(MANIFEST_FILE), t);
                        }
                        m
                    }
                };
                slots.lock().unwrap_or_else(|p| p.into_inner())[i] = Some(manifest);
            });
        }
    });
    let manifests: Vec<RunManifest> = slots
        .into_inner()
        .unwrap_or_else(|p| p.into_inner())
        .into_iter()
        .zip(&configs)
        .map(|(m, c)| m.unwrap_or_else(|| failed_manifest(c, "run did not complete".into())))
        .collect();

    let index = serde_json::json!({
        "schema": SWEEP_SCHEMA,
        "spec": spec,
        "runs": manifests.iter().enumerate().map(|(i, m)| serde_json::json!({
            "index": i,
            "run_id": m.run_id,
            "method": m.method,
            "status": m.status,
        })).collect::<Vec<_>>(),
    });
    write_file(&out.join("sweep.json"), &serde_json::to_string_pretty(&index).unwrap_or_default())?;
    let ok = manifests.iter().filter(|m| m.is_ok()).count();
    log::info!("sweep finished: {ok} of {} runs succeeded", manifests.len());
    if ok == 0 {
        return Err(CliError { code: EXIT_NO_SUCCESS, message: "no run of the sweep succeeded".into(), step: None });
    }
    Ok(manifests)
}
