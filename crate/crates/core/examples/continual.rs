//! Continual run over a sequence of quadratic tasks: ER against 3RL (GRU
//! history encoder), printing the global-return curve of each.
//!
//! cargo run --release --example continual -- [seed] [tasks] [dims] [steps_per_task] [method] [regime] [symlog|scale]

use tacrl::encoders::{ContextKind, EncoderConfig};
use tacrl::env::Regime;
use tacrl::runner::{train_run, RunConfig};
use tacrl::sac::{RewardTransform, SacConfig};

fn main() -> tacrl::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: &str| args.get(i).cloned().unwrap_or_else(|| default.to_string());
    let seed: u64 = arg(0, "0").parse().unwrap_or(0);
    let k: usize = arg(1, "4").parse().unwrap_or(4);
    let d: usize = arg(2, "4").parse().unwrap_or(4);
    let t: usize = arg(3, "2000").parse().unwrap_or(2000);
    let methods = match arg(4, "both").as_str() {
        "er" => vec![ContextKind::None],
        "3rl" => vec![ContextKind::Rnn],
        "taskid" => vec![ContextKind::TaskId],
        _ => vec![ContextKind::None, ContextKind::Rnn],
    };
    let mode = if arg(5, "CL") == "MTL" { Regime::MultiTask } else { Regime::Continual };
    let reward_transform = match arg(6, "symlog").parse::<f64>() {
        Ok(c) => RewardTransform::Scale(c),
        Err(_) => RewardTransform::Symlog,
    };
    for context in methods {
        let cfg = RunConfig {
            mode,
            n_tasks: k,
            n_dims: d,
            t_per_task: t,
            context,
            encoder: EncoderConfig { hidden_size: 16, context_size: 16, history_length: 8, ..Default::default() },
            hidden: 64,
            sac: SacConfig { batch_size: 64, ..Default::default() },
            eval_every: Some(t as u64),
            reward_transform,
            seed,
            ..Default::default()
        };
        let result = train_run(&cfg)?;
        println!("{} ({:.1}s)", context.as_str(), result.wall_clock_seconds);
        for r in &result.records {
            println!("  step {:>6}  global {:>12.2}  current {:>12.2}", r.step, r.global_return, r.current_return);
        }
    }
    Ok(())
}
