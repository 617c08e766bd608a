//! Per-sample critic gradient spread on batches mixed from two tasks whose
//! optima coincide or mirror each other.
//!
//! cargo run --release --example gradient_conflict -- [dims] [seeds]

use tacrl::encoders::{ContextKind, EncoderConfig};
use tacrl::env::{sample_neg_def, QuadraticTask};
use tacrl::metrics::grad_conflict_std;
use tacrl::rng::{normal_vec, seeded, uniform_vec};
use tacrl::sac::{AgentSpec, Batch, RewardTransform, SacConfig, SacModel};

fn task(a: Vec<f64>, optimum: &[f64], index: usize) -> tacrl::Result<QuadraticTask> {
    let d = optimum.len();
    let b = (0..d).map(|i| -2.0 * (0..d).map(|j| a[i * d + j] * optimum[j]).sum::<f64>()).collect();
    QuadraticTask::from_curvature(a, b, 0.0, index)
}

fn spread(seed: u64, d: usize, mirrored: bool) -> tacrl::Result<f64> {
    let mut rng = seeded(seed);
    let s_star = uniform_vec(&mut rng, d, -2.0, 2.0);
    let other: Vec<f64> = s_star.iter().map(|v| if mirrored { -v } else { *v }).collect();
    let a1 = sample_neg_def(&mut rng, d, 0.1)?;
    let a2 = sample_neg_def(&mut rng, d, 0.1)?;
    let tasks = [task(a1, &s_star, 0)?, task(a2, &other, 1)?];

    let spec = AgentSpec {
        obs_dim: d,
        act_dim: d,
        n_tasks: 2,
        hidden: 32,
        context: ContextKind::None,
        encoder: EncoderConfig::default(),
        reward_transform: RewardTransform::IDENTITY,
    };
    let model = SacModel::new(spec, SacConfig::default())?;
    let nets = model.init_nets(&mut rng)?;
    let b = 64;
    let s: Vec<f64> = normal_vec(&mut rng, b * d).iter().enumerate().map(|(i, e)| s_star[i % d] + 0.5 * e).collect();
    let a = uniform_vec(&mut rng, b * d, -1.0, 1.0);
    let s_next: Vec<f64> = s.iter().zip(&a).map(|(x, u)| x + u).collect();
    let r = (0..b).map(|i| tasks[i % 2].reward(&s_next[i * d..(i + 1) * d])).collect::<tacrl::Result<Vec<_>>>()?;
    let batch = Batch { size: b, s, a, r, s_next, done: vec![0.0; b], ..Batch::default() };
    let y = model.compute_target_y(&nets, &batch, &normal_vec(&mut rng, b * d))?;
    grad_conflict_std(&model.critic_sample_grads(&nets, &batch, &y)?)
}

fn main() -> tacrl::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<u64>().ok());
    let d = args.next().flatten().unwrap_or(4) as usize;
    let seeds = args.next().flatten().unwrap_or(10);
    for seed in 0..seeds {
        let same = spread(seed, d, false)?;
        let mirrored = spread(seed, d, true)?;
        println!("seed {seed}: identical {same:>10.3}  mirrored {mirrored:>10.3}  ratio {:.2}", mirrored / same);
    }
    Ok(())
}
