//! Saves an agent to JSON, restores it, and checks that the restored agent
//! scores exactly the same on every task.
//!
//! cargo run --release --example checkpoint

use tacrl::encoders::{ContextKind, TaskAudit};
use tacrl::rng::{derive_seed, stream};
use tacrl::runner::{evaluate_global, train_run, RunConfig};
use tacrl::sac::SacAgent;

fn main() -> tacrl::Result<()> {
    let config = RunConfig { n_tasks: 2, n_dims: 2, t_per_task: 800, context: ContextKind::TaskAgnosticMultiHead, ..RunConfig::default() };
    let result = train_run(&config)?;
    let text = result.agent.to_json()?;
    let restored = SacAgent::from_json(&text)?;

    let tasks = config.task_set()?;
    let seed = derive_seed(config.seed, stream::EVAL);
    let audit = TaskAudit::default();
    let before = evaluate_global(&result.agent.model, &result.agent.nets, &tasks, 1, config.episode_length, seed, &audit)?;
    let after = evaluate_global(&restored.model, &restored.nets, &tasks, 1, config.episode_length, seed, &audit)?;
    println!("checkpoint {} bytes, {} updates", text.len(), restored.updates);
    println!("global return before {before:.4}, after restore {after:.4}");
    assert_eq!(before.to_bits(), after.to_bits());
    Ok(())
}
