use std::path::Path;

use serde_json::Value;

use super::manifest::{RunManifest, RunSummary, STATUS_FAILED, STATUS_OK};
use super::{parse_json, read_file, write_file, CliError, CliResult, EXIT_FAILURE};
use crate::env::Regime;
use crate::error::Result;
use crate::rng::{derive_seed, stream};
use crate::runner::{dump_hidden, run_independent, train_run_on, RunConfig};
use crate::sac::SacAgent;

pub const RESULT_FILE: &str = "result.jsonl";
pub const TASKSET_FILE: &str = "taskset.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const MANIFEST_FILE: &str = "manifest.json";

pub(crate) fn load_config(path: &Path) -> CliResult<RunConfig> {
    let text = read_file(path)?;
    let config: RunConfig = parse_json(path, &text)?;
    config.validate().map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    Ok(config)
}

struct Outputs {
    jsonl: String,
    checkpoint: String,
    summary: Option<RunSummary>,
}

fn train(config: &RunConfig, run_id: &str) -> Result<Outputs> {
    let tasks = config.task_set()?;
    if config.mode == Regime::Independent {
        let results = run_independent(config)?;
        let mut jsonl = String::new();
        let mut checkpoints = Vec::new();
        for (k, r) in results.iter().enumerate() {
            for line in r.to_jsonl(run_id)?.lines() {
                let mut v: Value = serde_json::from_str(line)?;
                v["task"] = Value::from(k);
                jsonl.push_str(&serde_json::to_string(&v)?);
                jsonl.push('\n');
            }
            checkpoints.push(r.agent.to_json()?);
        }
        return Ok(Outputs {
            jsonl,
            checkpoint: format!("[{}]", checkpoints.join(",")),
            summary: RunSummary::from_independent(&results),
        });
    }
    let r = train_run_on(config, &tasks)?;
    log::debug!("run {run_id}: {} updates in {:.1}s", r.updates, r.wall_clock_seconds);
    Ok(Outputs { jsonl: r.to_jsonl(run_id)?, checkpoint: r.agent.to_json()?, summary: RunSummary::from_run(&r) })
}

/// Trains `config` and writes result, task set, checkpoint and manifest to
/// `out`. A failed run still leaves a manifest with status `failed`.
pub fn execute(config: &RunConfig, out: &Path) -> CliResult<RunManifest> {
    std::fs::create_dir_all(out)
        .map_err(|e| CliError { code: EXIT_FAILURE, message: format!("cannot create {}: {e}", out.display()), step: None })?;
    let mut manifest = RunManifest::new(config);
    log::info!("run {} ({}, seed {})", manifest.run_id, manifest.method, config.seed);
    let outcome = config.task_set().and_then(|tasks| Ok((tasks.to_json()?, train(config, &manifest.run_id)?)));
    let result = match outcome {
        Ok((taskset, outputs)) => {
            write_file(&out.join(RESULT_FILE), &outputs.jsonl)?;
            write_file(&out.join(TASKSET_FILE), &taskset)?;
            write_file(&out.join(CHECKPOINT_FILE), &outputs.checkpoint)?;
            for (kind, file) in [("result", RESULT_FILE), ("taskset", TASKSET_FILE), ("checkpoint", CHECKPOINT_FILE)] {
                manifest.outputs.insert(kind.into(), file.into());
            }
            manifest.status = STATUS_OK.into();
            manifest.summary = outputs.summary;
            Ok(())
        }
        Err(e) => {
            manifest.status = STATUS_FAILED.into();
            manifest.error = Some(e.to_string());
            Err(CliError::from(e))
        }
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError { code: EXIT_FAILURE, message: e.to_string(), step: None })?;
    write_file(&out.join(MANIFEST_FILE), &text)?;
    result.map(|()| manifest)
}

pub fn cmd_run(config_path: &Path, out: &Path, seed: Option<u64>) -> CliResult<RunManifest> {
    let mut config = load_config(config_path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    execute(&config, out)
}

/// Writes one JSON line `{task, t, z}` per evaluation step.
pub fn cmd_dump_hidden(config_path: &Path, checkpoint: &Path, out: &Path) -> CliResult<()> {
    let config = load_config(config_path)?;
    let text = read_file(checkpoint)?;
    let agent = SacAgent::from_json(&text).map_err(|e| CliError::input(format!("{}: {e}", checkpoint.display())))?;
    let tasks = config.task_set()?;
    let traces = dump_hidden(&agent, &tasks, config.episode_length, derive_seed(config.seed, stream::EVAL))?;
    let mut lines = String::new();
    for t in &traces {
        lines.push_str(&serde_json::to_string(t).map_err(crate::Error::from)?);
        lines.push('\n');
    }
    write_file(out, &lines)?;
    log::info!("wrote {} context vectors to {}", traces.len(), out.display());
    Ok(())
}
