use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::ContextKind;
use crate::env::Regime;
use crate::runner::{independent_global_return, ReplayMode, RunConfig, RunResult};

pub const MANIFEST_SCHEMA: &str = "tacrl-run/1";

pub const STATUS_OK: &str = "ok";
pub const STATUS_FAILED: &str = "failed";

/// Final scalars of a run, read back by `report` and `correlate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_global_return: f64,
    pub final_current_return: f64,
    pub grad_std: Option<f64>,
    pub q_instability: Option<f64>,
    pub h_entropy: Option<f64>,
    pub audit_dereferences: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub run_id: String,
    pub seed: u64,
    pub method: String,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config: RunConfig,
    /// Output kind to file name, relative to the manifest.
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<RunSummary>,
}

impl RunManifest {
    pub fn new(config: &RunConfig) -> Self {
        Self {
            schema: MANIFEST_SCHEMA.to_string(),
            run_id: run_id(config),
            seed: config.seed,
            method: method_name(config),
            status: STATUS_FAILED.to_string(),
            error: None,
            config: config.clone(),
            outputs: BTreeMap::new(),
            summary: None,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == STATUS_OK
    }
}

/// First 16 hex digits of SHA-256 over the sorted-key config JSON and the seed.
pub fn run_id(config: &RunConfig) -> String {
    // serde_json::Value keeps object keys sorted
    let canonical = serde_json::to_value(config).map(|v| v.to_string()).unwrap_or_default();
    let mut h = Sha256::new();
    h.update(canonical.as_bytes());
    h.update(format!("#seed={}", config.seed).as_bytes());
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Conventional name of the method a configuration runs.
pub fn method_name(config: &RunConfig) -> String {
    if config.mode == Regime::Independent {
        return "Independent".into();
    }
    match (config.context, config.replay) {
        (ContextKind::None, ReplayMode::FineTune) => "FineTune",
        (ContextKind::None, ReplayMode::Replay) => "ER",
        (ContextKind::TaskId, _) => "TaskID",
        (ContextKind::MultiHead, _) => "MH",
        (ContextKind::TaskAgnosticMultiHead, _) => "TAMH",
        (ContextKind::Rnn, _) => "3RL",
        (ContextKind::Transformer, _) => "ER-TX",
    }
    .into()
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl RunSummary {
    pub fn from_run(result: &RunResult) -> Option<Self> {
        let last = result.final_record()?;
        Some(Self {
            final_global_return: last.global_return,
            final_current_return: last.current_return,
            grad_std: mean_of(result.records.iter().map(|r| r.grad_conflict_std)),
            q_instability: result.q_instability(),
            h_entropy: mean_of(result.records.iter().map(|r| r.param_update_entropy)),
            audit_dereferences: result.audit_dereferences,
        })
    }

    /// Per-task runs of the independent baseline.
    pub fn from_independent(results: &[RunResult]) -> Option<Self> {
        let global = independent_global_return(results)?;
        let parts: Vec<RunSummary> = results.iter().filter_map(Self::from_run).collect();
        Some(Self {
            final_global_return: global,
            final_current_return: parts.last()?.final_current_return,
            grad_std: mean_of(parts.iter().map(|p| p.grad_std)),
            q_instability: mean_of(parts.iter().map(|p| p.q_instability)),
            h_entropy: mean_of(parts.iter().map(|p| p.h_entropy)),
            audit_dereferences: parts.iter().map(|p| p.audit_dereferences).sum(),
        })
    }
}
