//! Finite-difference checks shared by the gradient and acceptance suites.

use rand::Rng;
use tacrl::autodiff::nn::{squashed_gaussian, AttentionEncoder, Gru, Mlp, Positional, TokenEmbedding};
use tacrl::autodiff::{value_and_grad, Binding, Graph, ParamStore, Var};
use tacrl::encoders::{ContextKind, EncoderConfig, TokenWindows};
use tacrl::rng::{normal_vec, seeded, uniform_vec, RunRng};
use tacrl::sac::{AgentSpec, Batch, RewardTransform, SacConfig, SacModel, SacNets, LOG_ALPHA};
use tacrl::Result;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const PROBES: usize = 24;

/// Worst relative error of one checked component.
pub type Outcome = (String, f64);

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compares `grads` against central differences of `loss` at `PROBES`
/// random coordinates of `store`.
fn check<F>(out: &mut Vec<Outcome>, name: &str, store: &ParamStore, grads: &ParamStore, rng: &mut RunRng, loss: F)
where
    F: Fn(&ParamStore) -> f64,
{
    let paths: Vec<String> = store.paths().cloned().collect();
    let mut worst = 0.0f64;
    for _ in 0..PROBES {
        let path = &paths[rng.random_range(0..paths.len())];
        let n = store.get(path).unwrap().values.len();
        let i = rng.random_range(0..n);
        let mut plus = store.clone();
        plus.get_mut(path).unwrap().values[i] += EPS;
        let mut minus = store.clone();
        minus.get_mut(path).unwrap().values[i] -= EPS;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * EPS);
        let analytic = grads.get(path).map(|t| t.values[i]).unwrap_or(0.0);
        worst = worst.max(rel_err(analytic, numeric));
    }
    out.push((name.to_string(), worst));
}

fn weighted_sum(g: &mut Graph, x: Var, w: &[f64]) -> Result<Var> {
    let (r, c) = g.shape(x);
    let wv = g.input(r, c, w.to_vec())?;
    let m = g.mul(x, wv)?;
    Ok(g.sum(m))
}

pub fn mlp_gradients() -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut rng = seeded(1);
    let mlp = Mlp::new("m", vec![5, 7, 6, 3]);
    let mut store = ParamStore::new();
    mlp.init(&mut store, &mut rng).unwrap();
    let x = uniform_vec(&mut rng, 4 * 5, -1.0, 1.0);
    let w = normal_vec(&mut rng, 4 * 3);
    let f = |p: Binding<'_>, g: &mut Graph| -> Result<Var> {
        let xv = g.input(4, 5, x.clone())?;
        let out = mlp.forward(g, p, xv)?;
        weighted_sum(g, out, &w)
    };
    let (_, grads) = value_and_grad(|g| f(Binding::trainable(&store), g)).unwrap();
    check(&mut out, "mlp", &store, &grads, &mut rng, |s| {
        let mut g = Graph::new();
        let v = f(Binding::frozen(s), &mut g).unwrap();
        g.scalar(v)
    });
    out
}

pub fn gru_gradients_eight_steps() -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut rng = seeded(2);
    let gru = Gru::new("gru", 4, 5);
    let mut store = ParamStore::new();
    gru.init(&mut store, &mut rng).unwrap();
    for t in store.iter_mut() {
        for v in t.1.values.iter_mut() {
            *v += 0.1 * tacrl::rng::normal(&mut rng);
        }
    }
    let (batch, steps) = (3, 8);
    let x = uniform_vec(&mut rng, batch * steps * 4, -1.0, 1.0);
    let w = normal_vec(&mut rng, batch * 5);
    let starts = [0, 2, 5];
    let f = |p: Binding<'_>, g: &mut Graph| -> Result<Var> {
        let xv = g.input(batch * steps, 4, x.clone())?;
        let h = gru.run(g, p, xv, batch, steps, &starts)?;
        weighted_sum(g, h, &w)
    };
    let (_, grads) = value_and_grad(|g| f(Binding::trainable(&store), g)).unwrap();
    check(&mut out, "gru", &store, &grads, &mut rng, |s| {
        let mut g = Graph::new();
        let v = f(Binding::frozen(s), &mut g).unwrap();
        g.scalar(v)
    });
    out
}

pub fn transformer_gradients_one_layer() -> Vec<Outcome> {
    let mut out = Vec::new();
    for (positional, token_embedding, heads) in [
        (Positional::Sinusoidal, TokenEmbedding::None, 1),
        (Positional::Learned, TokenEmbedding::Learned, 2),
    ] {
        let mut rng = seeded(3);
        let enc = AttentionEncoder {
            prefix: "tx".into(),
            token_dim: 5,
            hidden: 8,
            heads,
            layers: 1,
            ff_width: 12,
            context: 4,
            max_len: 6,
            positional,
            token_embedding,
        };
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut rng).unwrap();
        let (batch, steps) = (2, 6);
        let x = uniform_vec(&mut rng, batch * steps * 5, -1.0, 1.0);
        let wz = normal_vec(&mut rng, batch * 4);
        let ws = normal_vec(&mut rng, batch * steps * 8);
        let starts = [0, 2];
        let f = |p: Binding<'_>, g: &mut Graph| -> Result<Var> {
            let xv = g.input(batch * steps, 5, x.clone())?;
            let (seq, z) = enc.encode(g, p, xv, batch, steps, &starts)?;
            let a = weighted_sum(g, z, &wz)?;
            let mask: Vec<f64> = (0..batch * steps).map(|r| if r % steps >= starts[r / steps] { 1.0 } else { 0.0 }).collect();
            let live = g.row_mask(seq, &mask)?;
            let b = weighted_sum(g, live, &ws)?;
            g.add(a, b)
        };
        let (_, grads) = value_and_grad(|g| f(Binding::trainable(&store), g)).unwrap();
        check(&mut out, "transformer", &store, &grads, &mut rng, |s| {
            let mut g = Graph::new();
            let v = f(Binding::frozen(s), &mut g).unwrap();
            g.scalar(v)
        });
    }
    out
}

pub fn squashed_gaussian_log_prob_gradients() -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut rng = seeded(4);
    let mlp = Mlp::new("pi", vec![3, 2 * 2]);
    let mut store = ParamStore::new();
    mlp.init(&mut store, &mut rng).unwrap();
    let x = uniform_vec(&mut rng, 5 * 3, -1.0, 1.0);
    let noise = normal_vec(&mut rng, 5 * 2);
    let w = normal_vec(&mut rng, 5 * 2);
    let f = |p: Binding<'_>, g: &mut Graph| -> Result<Var> {
        let xv = g.input(5, 3, x.clone())?;
        let out = mlp.forward(g, p, xv)?;
        let pi = squashed_gaussian(g, out, 2, Some(&noise))?;
        let lp = g.sum(pi.log_prob);
        let act = weighted_sum(g, pi.action, &w)?;
        g.add(lp, act)
    };
    let (_, grads) = value_and_grad(|g| f(Binding::trainable(&store), g)).unwrap();
    check(&mut out, "log_prob", &store, &grads, &mut rng, |s| {
        let mut g = Graph::new();
        let v = f(Binding::frozen(s), &mut g).unwrap();
        g.scalar(v)
    });
    out
}

fn sac_fixture(kind: ContextKind) -> (SacModel, SacNets, Batch, RunRng) {
    let mut rng = seeded(5);
    let d = 2;
    let spec = AgentSpec {
        obs_dim: d,
        act_dim: d,
        n_tasks: 2,
        hidden: 8,
        context: kind,
        encoder: EncoderConfig { hidden_size: 4, context_size: 3, history_length: 4, ..Default::default() },
        reward_transform: RewardTransform::IDENTITY,
    };
    let model = SacModel::new(spec, SacConfig::default()).unwrap();
    let nets = model.init_nets(&mut rng).unwrap();
    let b = 4;
    let td = 2 * d + 1;
    let mut hist = TokenWindows::new(td);
    let mut next = TokenWindows::new(td);
    for i in 0..b {
        let seq = uniform_vec(&mut rng, (i % 4) * td, -1.0, 1.0);
        let mut n = seq.clone();
        n.extend(uniform_vec(&mut rng, td, -1.0, 1.0));
        hist.seqs.push(seq);
        next.seqs.push(n);
    }
    let batch = Batch {
        size: b,
        s: uniform_vec(&mut rng, b * d, -1.0, 1.0),
        a: uniform_vec(&mut rng, b * d, -0.9, 0.9),
        r: uniform_vec(&mut rng, b, -1.0, 0.0),
        s_next: uniform_vec(&mut rng, b * d, -1.0, 1.0),
        done: vec![0.0; b],
        task_ids: Some(vec![0, 1, 1, 0]),
        history: Some(hist),
        history_next: Some(next),
    };
    (model, nets, batch, rng)
}

pub fn critic_loss_gradients() -> Vec<Outcome> {
    let mut out = Vec::new();
    for kind in [ContextKind::None, ContextKind::Rnn, ContextKind::MultiHead] {
        let (model, nets, batch, mut rng) = sac_fixture(kind);
        let noise = normal_vec(&mut rng, batch.size * 2);
        let y = model.compute_target_y(&nets, &batch, &noise).unwrap();
        let (_, grads) = model.critic_loss(&nets, &batch, &y).unwrap();
        for which in ["critic1", "critic2", "critic_encoder"] {
            let store = match which {
                "critic1" => &nets.critic1,
                "critic2" => &nets.critic2,
                _ => &nets.critic_encoder,
            };
            if store.is_empty() {
                continue;
            }
            check(&mut out, &format!("critic_loss/{}/{which}", kind.as_str()), store, &grads, &mut rng, |s| {
                let mut n = nets.clone();
                match which {
                    "critic1" => n.critic1 = s.clone(),
                    "critic2" => n.critic2 = s.clone(),
                    _ => n.critic_encoder = s.clone(),
                }
                model.critic_loss(&n, &batch, &y).unwrap().0
            });
        }
    }
    out
}

pub fn actor_loss_gradients() -> Vec<Outcome> {
    let mut out = Vec::new();
    for kind in [ContextKind::None, ContextKind::Rnn, ContextKind::TaskAgnosticMultiHead] {
        let (model, nets, batch, mut rng) = sac_fixture(kind);
        let noise = normal_vec(&mut rng, batch.size * 2);
        let (_, grads) = model.actor_loss(&nets, &batch, &noise).unwrap();
        for which in ["actor", "actor_encoder"] {
            let store = if which == "actor" { &nets.actor } else { &nets.actor_encoder };
            if store.is_empty() {
                continue;
            }
            check(&mut out, &format!("actor_loss/{}/{which}", kind.as_str()), store, &grads, &mut rng, |s| {
                let mut n = nets.clone();
                if which == "actor" {
                    n.actor = s.clone();
                } else {
                    n.actor_encoder = s.clone();
                }
                model.actor_loss(&n, &batch, &noise).unwrap().0
            });
        }
    }
    out
}

pub fn alpha_loss_gradients() -> Vec<Outcome> {
    let mut out = Vec::new();
    let (model, mut nets, _, mut rng) = sac_fixture(ContextKind::None);
    let log_probs = normal_vec(&mut rng, 6);
    for la in [-2.0, -0.3, 0.0, 0.7, 1.5] {
        nets.alpha.get_mut(LOG_ALPHA).unwrap().values[0] = la;
        let (_, grads) = model.alpha_loss(&nets, &log_probs).unwrap();
        let probe = |delta: f64| {
            let mut n = nets.clone();
            n.alpha.get_mut(LOG_ALPHA).unwrap().values[0] = la + delta;
            model.alpha_loss(&n, &log_probs).unwrap().0
        };
        let numeric = (probe(EPS) - probe(-EPS)) / (2.0 * EPS);
        let analytic = grads.get(LOG_ALPHA).unwrap().values[0];
        out.push((format!("alpha_loss/log_alpha={la}"), rel_err(analytic, numeric)));
    }
    check(&mut out, "alpha_loss", &nets.alpha, &model.alpha_loss(&nets, &log_probs).unwrap().1, &mut rng, |s| {
        let mut n = nets.clone();
        n.alpha = s.clone();
        model.alpha_loss(&n, &log_probs).unwrap().0
    });
    out
}
