//! Trains a short 3RL run and summarizes the context vectors its GRU
//! produces on each task: the per-task mean of z and the distance between
//! task centroids.
//!
//! cargo run --release --example hidden_states -- [seed] [steps_per_task]

use tacrl::encoders::{ContextKind, EncoderConfig};
use tacrl::rng::{derive_seed, stream};
use tacrl::runner::{dump_hidden, train_run, RunConfig};

fn main() -> tacrl::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<u64>().ok());
    let seed = args.next().flatten().unwrap_or(0);
    let t = args.next().flatten().unwrap_or(1500) as usize;
    let config = RunConfig {
        n_tasks: 3,
        n_dims: 2,
        t_per_task: t,
        context: ContextKind::Rnn,
        encoder: EncoderConfig { hidden_size: 16, context_size: 4, history_length: 8, ..EncoderConfig::default() },
        eval_every: Some(t as u64),
        seed,
        ..RunConfig::default()
    };
    let result = train_run(&config)?;
    let traces = dump_hidden(&result.agent, &config.task_set()?, config.episode_length, derive_seed(seed, stream::EVAL))?;

    let dim = traces[0].z.len();
    let mut centroids = vec![vec![0.0; dim]; config.n_tasks];
    let mut counts = vec![0usize; config.n_tasks];
    for tr in traces.iter().filter(|tr| tr.step > 0) {
        for (c, v) in centroids[tr.task].iter_mut().zip(&tr.z) {
            *c += v;
        }
        counts[tr.task] += 1;
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= *n as f64);
    }
    for (k, c) in centroids.iter().enumerate() {
        let shown: Vec<String> = c.iter().map(|v| format!("{v:+.3}")).collect();
        println!("task {k}: mean z = [{}]", shown.join(", "));
    }
    for i in 0..config.n_tasks {
        for j in i + 1..config.n_tasks {
            let dist = centroids[i].iter().zip(&centroids[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            println!("|z{i} - z{j}| = {dist:.3}");
        }
    }
    Ok(())
}
