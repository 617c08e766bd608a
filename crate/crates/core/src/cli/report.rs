use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use super::manifest::{RunManifest, MANIFEST_SCHEMA};
use super::run::MANIFEST_FILE;
use super::sweep::SWEEP_SCHEMA;
use super::{read_file, write_file, CliError, CliResult};
use crate::encoders::ContextKind;
use crate::env::Regime;
use crate::metrics::{self, RunRecord, SettingKey};
use crate::runner::ReplayMode;

pub const REPORT_SCHEMA: &str = "tacrl-report/1";

const SETTING_FIELDS: [&str; 4] = ["total_timesteps", "n_dims", "n_tasks", "regime"];

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Run record of a successful manifest: method indicators and
/// hyperparameters as attributes, summary scalars as metrics.
pub fn record_from_manifest(m: &RunManifest) -> Option<RunRecord> {
    let s = m.summary.as_ref()?;
    let c = &m.config;
    let attributes: BTreeMap<String, f64> = [
        ("has_rnn", flag(c.context == ContextKind::Rnn)),
        ("has_tx", flag(c.context == ContextKind::Transformer)),
        ("has_history", flag(c.context.uses_history())),
        ("task_aware", flag(c.context.is_task_aware())),
        ("multi_head", flag(c.context.has_heads())),
        ("replay", flag(c.replay == ReplayMode::Replay)),
        ("mtl", flag(c.mode == Regime::MultiTask)),
        ("lr", c.sac.lr),
        ("batch_size", c.sac.batch_size as f64),
        ("hidden", c.hidden as f64),
        ("beta", c.beta),
        ("history_length", c.encoder.history_length as f64),
        ("auto_entropy", flag(c.sac.auto_entropy)),
        ("buffer_capacity", c.buffer_capacity as f64),
        ("warmup_steps", c.warmup_steps as f64),
        ("burnin_steps", c.burnin_steps as f64),
        ("n_dims", c.n_dims as f64),
        ("n_tasks", c.n_tasks as f64),
        ("total_timesteps", c.total_timesteps() as f64),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let mut metrics = BTreeMap::new();
    metrics.insert("global_return".to_string(), s.final_global_return);
    metrics.insert("current_return".to_string(), s.final_current_return);
    for (name, v) in [("grad_std", s.grad_std), ("q_instability", s.q_instability), ("h_entropy", s.h_entropy)] {
        if let Some(v) = v {
            metrics.insert(name.to_string(), v);
        }
    }
    Some(RunRecord {
        run_id: m.run_id.clone(),
        method: m.method.clone(),
        attributes,
        setting: SettingKey {
            total_timesteps: c.total_timesteps(),
            n_dims: c.n_dims,
            n_tasks: c.n_tasks,
            regime: c.mode.as_str().to_string(),
        },
        final_metric: s.final_global_return,
        metrics,
    })
}

fn manifest_paths(pattern: &str) -> CliResult<Vec<PathBuf>> {
    let entries = glob::glob(pattern).map_err(|e| CliError::input(format!("bad pattern {pattern}: {e}")))?;
    let mut out = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| CliError::input(e.to_string()))?;
        if p.is_dir() {
            let m = p.join(MANIFEST_FILE);
            if m.is_file() {
                out.push(m);
            }
        } else {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Reads every manifest matched by `pattern` (files, or directories holding
/// a manifest) and returns the records of successful runs. Sweep index files
/// are skipped.
pub fn load_records(pattern: &str) -> CliResult<Vec<RunRecord>> {
    let paths = manifest_paths(pattern)?;
    if paths.is_empty() {
        return Err(CliError::input(format!("no result files match {pattern}")));
    }
    let mut records = Vec::new();
    for p in &paths {
        let text = read_file(p)?;
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::input(format!("{}:{}:{}: {e}", p.display(), e.line(), e.column())))?;
        let schema = v.get("schema").and_then(Value::as_str).unwrap_or("");
        if schema == SWEEP_SCHEMA {
            log::debug!("skipping sweep index {}", p.display());
            continue;
        }
        if schema != MANIFEST_SCHEMA {
            return Err(CliError::input(format!(
                "{}: schema mismatch, expected {MANIFEST_SCHEMA} but found {schema:?}",
                p.display()
            )));
        }
        let m: RunManifest = serde_json::from_value(v).map_err(|e| CliError::input(format!("{}: {e}", p.display())))?;
        match record_from_manifest(&m) {
            Some(r) => records.push(r),
            None => log::warn!("skipping {} (status {})", p.display(), m.status),
        }
    }
    if records.is_empty() {
        return Err(CliError::input(format!("no successful runs among {} result files", paths.len())));
    }
    Ok(records)
}

fn csv_path(out: &Path) -> PathBuf {
    out.with_extension("csv")
}

/// Standardizes final global returns within each setting cell and writes
/// per-method statistics as JSON, plus a CSV with one row per cell and method.
pub fn cmd_report(pattern: &str, group_by: &[String], stats: &[String], out: &Path) -> CliResult<()> {
    for g in group_by {
        if !SETTING_FIELDS.contains(&g.as_str()) {
            return Err(CliError::input(format!("unknown group-by key {g}; expected one of {SETTING_FIELDS:?}")));
        }
    }
    for s in stats {
        if !["iqm", "top10", "se2"].contains(&s.as_str()) {
            return Err(CliError::input(format!("unknown statistic {s}")));
        }
    }
    let records = load_records(pattern)?;
    let (z, cells) = metrics::standardize(&records, group_by)?;
    let mut cells_json = Map::new();
    let mut csv = String::from("cell,method,n_runs");
    for s in stats {
        csv.push(',');
        csv.push_str(s);
    }
    csv.push('\n');
    for cell in &cells {
        if cell.degenerate {
            log::warn!("cell {} has no spread; its standardized values are 0", cell.key);
        }
        let mut by_method: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for &i in &cell.members {
            by_method.entry(records[i].method.as_str()).or_default().push(z[i]);
        }
        let mut methods = Map::new();
        for (method, values) in by_method {
            let mut entry = Map::new();
            entry.insert("n_runs".into(), json!(values.len()));
            csv.push_str(&format!("{},{},{}", cell.key, method, values.len()));
            for s in stats {
                let v = match s.as_str() {
                    "iqm" => Some(metrics::iqm(&values)?),
                    "top10" => Some(metrics::top_k_mean(&values, 0.1)?),
                    _ => metrics::standard_error_band(&values).ok().map(|(_, w)| w),
                };
                entry.insert(s.clone(), json!(v));
                csv.push_str(&v.map_or_else(|| ",".to_string(), |v| format!(",{v}")));
            }
            csv.push('\n');
            methods.insert(method.to_string(), Value::Object(entry));
        }
        cells_json.insert(
            cell.key.clone(),
            json!({ "n_runs": cell.members.len(), "degenerate": cell.degenerate, "methods": methods }),
        );
    }
    let doc = json!({ "schema": REPORT_SCHEMA, "group_by": group_by, "stats": stats, "cells": cells_json });
    write_file(out, &serde_json::to_string_pretty(&doc).unwrap_or_default())?;
    write_file(&csv_path(out), &csv)?;
    log::info!("report over {} runs in {} cells written to {}", records.len(), cells.len(), out.display());
    Ok(())
}

/// Spearman matrix of `attrs` against `metrics` over every matched run.
/// `standardized_return` is the final global return standardized within
/// the full setting. Constant columns are listed in `<out>.degenerate.json`.
pub fn cmd_correlate(pattern: &str, attrs: &[String], metric_names: &[String], out: &Path) -> CliResult<()> {
    if attrs.is_empty() || metric_names.is_empty() {
        return Err(CliError::input("correlate needs at least one attribute and one metric"));
    }
    let mut records = load_records(pattern)?;
    if records.len() < 2 {
        return Err(CliError::input(format!("correlation needs at least 2 runs, found {}", records.len())));
    }
    let all: Vec<String> = SETTING_FIELDS.iter().map(|s| s.to_string()).collect();
    let (z, _) = metrics::standardize(&records, &all)?;
    for (r, v) in records.iter_mut().zip(z) {
        r.metrics.insert("standardized_return".into(), v);
    }
    let matrix = metrics::correlation_matrix(&records, attrs, metric_names)?;
    for d in &matrix.degenerate {
        log::warn!("column {d} is constant; its correlations are reported as 0");
    }
    write_file(out, &matrix.to_csv())?;
    let warnings = json!({ "degenerate": matrix.degenerate });
    write_file(&out.with_extension("degenerate.json"), &warnings.to_string())?;
    Ok(())
}
