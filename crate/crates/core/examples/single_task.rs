//! Single-task SAC on one quadratic task, compared against the random and
//! greedy closed-form policies.
//!
//! cargo run --release --example single_task -- [seed] [steps]

use tacrl::encoders::ContextKind;
use tacrl::env::Regime;
use tacrl::runner::{oracle_return, random_return, train_run, RunConfig};

fn main() -> tacrl::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(20_000);
    let cfg = RunConfig {
        mode: Regime::Continual,
        n_tasks: 1,
        n_dims: 2,
        t_per_task: steps,
        context: ContextKind::None,
        eval_every: Some(2_000),
        seed,
        ..Default::default()
    };
    let tasks = cfg.task_set()?;
    let oracle = oracle_return(&tasks, 0, 1, cfg.episode_length, seed)?;
    let random = random_return(&tasks, 0, 10, cfg.episode_length, seed)?;
    let result = train_run(&cfg)?;
    for r in &result.records {
        let closed = (r.current_return - random) / (oracle - random);
        println!("step {:>6}  return {:>12.3}  gap closed {:>6.3}", r.step, r.current_return, closed);
    }
    println!("random {random:.3}  oracle {oracle:.3}  wall {:.1}s", result.wall_clock_seconds);
    Ok(())
}
