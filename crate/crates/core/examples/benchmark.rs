//! The quadratic benchmark on its own: every task peaks at the same reward,
//! and the greedy controller walks straight to the optimum.
//!
//! cargo run --release --example benchmark -- [dims] [tasks] [seed]

use tacrl::env::{self, TaskSet};
use tacrl::rng::seeded;

fn main() -> tacrl::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<u64>().ok());
    let d = args.next().flatten().unwrap_or(3) as usize;
    let k = args.next().flatten().unwrap_or(4) as usize;
    let seed = args.next().flatten().unwrap_or(0);

    let tasks = TaskSet::generate(seed, d, k, 0.0)?;
    let mut rng = seeded(seed);
    for t in &tasks.tasks {
        let mut state = env::reset(t, 100, &mut rng);
        let start = t.reward(&state.s_obs)?;
        let mut steps = 0;
        let mut r = start;
        while r < t.r_max - 1e-9 && !state.is_done() {
            let (next, reward, _) = env::step(&state, &t.greedy_action(&state.s_obs), &tasks)?;
            state = next;
            r = reward;
            steps += 1;
        }
        let s_star: Vec<String> = t.s_star.iter().map(|v| format!("{v:+.2}")).collect();
        println!(
            "task {}  s* = [{}]  r(s0) = {start:>10.2}  r_max = {:.1e}  reached in {steps} steps",
            t.task_index,
            s_star.join(", "),
            t.r_max
        );
    }
    Ok(())
}
