//! Soft actor-critic with twin critics, Polyak-averaged targets and optional
//! automatic entropy tuning, conditioned on a context signal (none, task
//! one-hot, output heads, or a learned history encoding).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{squashed_gaussian, Mlp, SquashedGaussian};
use crate::autodiff::{clip_grad_norm, Adam, Binding, Graph, ParamStore, Var};
use crate::encoders::{
    build_context, most_confident_head, most_optimistic_head, one_hot, ContextEncoder, ContextKind, ContextSignal,
    EncoderConfig, History, TaskLabel, TokenWindows,
};
use crate::error::{Error, Result};
use crate::rng::normal_vec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConflictSource {
    Critic,
    Actor,
    Both,
}

impl ConflictSource {
    fn critic(self) -> bool {
        matches!(self, ConflictSource::Critic | ConflictSource::Both)
    }

    fn actor(self) -> bool {
        matches!(self, ConflictSource::Actor | ConflictSource::Both)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SacConfig {
    pub gamma: f64,
    pub soft_tau: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub auto_entropy: bool,
    pub alpha_init: f64,
    /// Defaults to minus the action dimension.
    pub target_entropy: Option<f64>,
    pub grad_clip: Option<f64>,
    pub twin_critics: bool,
    /// Per-sample gradients are captured every this many updates; 0 disables.
    pub conflict_every: u64,
    pub conflict_source: ConflictSource,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            soft_tau: 5e-3,
            lr: 3e-4,
            batch_size: 64,
            auto_entropy: true,
            alpha_init: 0.2,
            target_entropy: None,
            grad_clip: None,
            twin_critics: true,
            conflict_every: 100,
            conflict_source: ConflictSource::Critic,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if !(self.soft_tau > 0.0 && self.soft_tau <= 1.0) {
            return Err(Error::invalid(format!("soft_tau {} outside (0, 1]", self.soft_tau)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.alpha_init > 0.0 && self.alpha_init.is_finite()) {
            return Err(Error::invalid(format!("alpha_init {} must be positive", self.alpha_init)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::invalid(format!("grad_clip {c} must be positive")));
            }
        }
        if self.target_entropy.is_some_and(|t| !t.is_finite()) {
            return Err(Error::invalid("target_entropy must be finite"));
        }
        Ok(())
    }

    pub fn target_entropy_for(&self, act_dim: usize) -> f64 {
        self.target_entropy.unwrap_or(-(act_dim as f64))
    }
}

/// Network sizes and the context variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub n_tasks: usize,
    pub hidden: usize,
    pub context: ContextKind,
    pub encoder: EncoderConfig,
    /// Applied to rewards before they reach the critics or the encoder.
    #[serde(default)]
    pub reward_transform: RewardTransform,
}

/// Map from environment reward to the reward the agent learns from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardTransform {
    /// `c·r`.
    Scale(f64),
    /// `sign(r)·ln(1 + |r|)`.
    #[default]
    Symlog,
}

impl RewardTransform {
    pub const IDENTITY: RewardTransform = RewardTransform::Scale(1.0);

    pub fn apply(self, r: f64) -> f64 {
        match self {
            RewardTransform::Scale(c) => c * r,
            RewardTransform::Symlog => crate::encoders::symlog(r),
        }
    }

    pub fn validate(self) -> Result<()> {
        match self {
            RewardTransform::Scale(c) if !(c > 0.0 && c.is_finite()) => {
                Err(Error::invalid(format!("reward scale {c} must be positive")))
            }
            _ => Ok(()),
        }
    }
}

impl AgentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.act_dim == 0 || self.hidden == 0 {
            return Err(Error::invalid("observation, action and hidden sizes must be positive"));
        }
        if self.n_tasks == 0 {
            return Err(Error::invalid("n_tasks must be at least 1"));
        }
        self.reward_transform.validate()?;
        self.encoder.validate(self.context)
    }

    pub fn heads(&self) -> usize {
        if self.context.has_heads() {
            self.n_tasks
        } else {
            1
        }
    }
}

/// All learned state of one agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SacNets {
    pub actor: ParamStore,
    pub critic1: ParamStore,
    pub critic2: ParamStore,
    pub target1: ParamStore,
    pub target2: ParamStore,
    /// History encoder feeding the actor, trained by the actor loss.
    pub actor_encoder: ParamStore,
    /// History encoder feeding both critics, trained by the critic loss.
    pub critic_encoder: ParamStore,
    pub target_encoder: ParamStore,
    /// Holds the single entry `log_alpha`.
    pub alpha: ParamStore,
}

pub const LOG_ALPHA: &str = "log_alpha";

impl SacNets {
    pub fn log_alpha(&self) -> f64 {
        self.alpha.get(LOG_ALPHA).map(|t| t.values[0]).unwrap_or(f64::NAN)
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha().exp()
    }

    /// Online parameters (actor, critics, encoder) as one flat vector.
    pub fn online_flat(&self) -> Vec<f64> {
        let mut v = self.actor.flatten();
        v.extend(self.critic1.flatten());
        v.extend(self.critic2.flatten());
        v.extend(self.actor_encoder.flatten());
        v.extend(self.critic_encoder.flatten());
        v
    }

    pub fn is_finite(&self) -> bool {
        [&self.actor, &self.critic1, &self.critic2, &self.target1, &self.target2, &self.actor_encoder, &self.critic_encoder, &self.target_encoder, &self.alpha]
            .iter()
            .all(|s| s.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SacOptimizers {
    pub actor: Adam,
    pub critic1: Adam,
    pub critic2: Adam,
    pub actor_encoder: Adam,
    pub critic_encoder: Adam,
    pub alpha: Adam,
}

/// `target ← (1 − rho)·target + rho·online`.
pub fn soft_update(target: &mut ParamStore, online: &ParamStore, rho: f64) -> Result<()> {
    if !target.same_layout(online) {
        return Err(Error::invalid("soft_update: parameter layouts differ"));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid(format!("soft_update: rho {rho} outside [0, 1]")));
    }
    for ((_, t), (_, o)) in target.iter_mut().zip(online.iter()) {
        for (tv, ov) in t.values.iter_mut().zip(&o.values) {
            *tv = if rho == 1.0 { *ov } else { *tv + rho * (ov - *tv) };
        }
    }
    Ok(())
}

/// A minibatch in row-major layout. Context windows are required for history
/// encoders, task ids for task-aware variants.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: Vec<f64>,
    pub s_next: Vec<f64>,
    pub done: Vec<f64>,
    pub task_ids: Option<Vec<usize>>,
    /// Transitions preceding each anchor.
    pub history: Option<TokenWindows>,
    /// The same windows extended by the anchor transition.
    pub history_next: Option<TokenWindows>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha_loss: Option<f64>,
    pub alpha: f64,
    pub q_mean: f64,
    pub grad_conflict_std: Option<f64>,
}

enum Heads<'a> {
    Single,
    Fixed(&'a [usize]),
    Select,
}

struct CriticParts {
    loss: Var,
    per: Var,
    q_min: Var,
    z: Option<Var>,
}

struct ActorParts {
    loss: Var,
    per: Var,
    policy: SquashedGaussian,
}

/// Architecture of an agent: everything needed to evaluate the losses given a
/// [`SacNets`].
#[derive(Clone, Debug, PartialEq)]
pub struct SacModel {
    pub spec: AgentSpec,
    pub cfg: SacConfig,
    pub encoder: ContextEncoder,
    actor: Mlp,
    critic1: Mlp,
    critic2: Mlp,
}

impl SacModel {
    pub fn new(spec: AgentSpec, cfg: SacConfig) -> Result<Self> {
        spec.validate()?;
        cfg.validate()?;
        let encoder = ContextEncoder::new(spec.context, spec.obs_dim, spec.act_dim, &spec.encoder)?;
        let z = match spec.context {
            ContextKind::TaskId => spec.n_tasks,
            _ => encoder.context_dim(),
        };
        let h = spec.hidden;
        let heads = spec.heads();
        let actor = Mlp::new("actor", vec![spec.obs_dim + z, h, h, 2 * spec.act_dim * heads]);
        let critic = |name: &str| Mlp::new(name, vec![spec.obs_dim + spec.act_dim + z, h, h, heads]);
        Ok(Self { critic1: critic("critic1"), critic2: critic("critic2"), actor, encoder, spec, cfg })
    }

    pub fn context_dim(&self) -> usize {
        self.actor.input_dim() - self.spec.obs_dim
    }

    /// Fresh parameters; targets start as exact copies of the online networks.
    pub fn init_nets<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SacNets> {
        let mut actor = ParamStore::new();
        self.actor.init(&mut actor, rng)?;
        let mut critic1 = ParamStore::new();
        self.critic1.init(&mut critic1, rng)?;
        let mut critic2 = ParamStore::new();
        self.critic2.init(&mut critic2, rng)?;
        let mut actor_encoder = ParamStore::new();
        self.encoder.init(&mut actor_encoder, rng)?;
        let mut critic_encoder = ParamStore::new();
        self.encoder.init(&mut critic_encoder, rng)?;
        let mut alpha = ParamStore::new();
        alpha.insert(LOG_ALPHA, crate::autodiff::Tensor::scalar(self.cfg.alpha_init.ln()))?;
        Ok(SacNets {
            target1: critic1.clone(),
            target2: critic2.clone(),
            target_encoder: critic_encoder.clone(),
            actor,
            critic1,
            critic2,
            actor_encoder,
            critic_encoder,
            alpha,
        })
    }

    pub fn init_optimizers(&self, nets: &SacNets) -> SacOptimizers {
        SacOptimizers {
            actor: Adam::new(&nets.actor),
            critic1: Adam::new(&nets.critic1),
            critic2: Adam::new(&nets.critic2),
            actor_encoder: Adam::new(&nets.actor_encoder),
            critic_encoder: Adam::new(&nets.critic_encoder),
            alpha: Adam::new(&nets.alpha),
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let (b, o, a) = (batch.size, self.spec.obs_dim, self.spec.act_dim);
        if b == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if batch.s.len() != b * o || batch.s_next.len() != b * o || batch.a.len() != b * a {
            return Err(Error::invalid("batch state/action sizes do not match the agent"));
        }
        if batch.r.len() != b || batch.done.len() != b {
            return Err(Error::invalid("batch reward/done sizes do not match the batch size"));
        }
        if let Some(ids) = &batch.task_ids {
            if ids.len() != b || ids.iter().any(|&t| t >= self.spec.n_tasks) {
                return Err(Error::invalid("batch task ids are malformed"));
            }
        }
        Ok(())
    }

    fn heads_for<'b>(&self, batch: &'b Batch) -> Result<Heads<'b>> {
        match self.spec.context {
            ContextKind::MultiHead => batch
                .task_ids
                .as_deref()
                .map(Heads::Fixed)
                .ok_or_else(|| Error::InvalidState("multi-head batch needs task ids".into())),
            ContextKind::TaskAgnosticMultiHead => Ok(Heads::Select),
            _ => Ok(Heads::Single),
        }
    }

    fn batch_context(&self, g: &mut Graph, store: &ParamStore, trainable: bool, batch: &Batch, next: bool) -> Result<Option<Var>> {
        match self.spec.context {
            ContextKind::TaskId => {
                let ids = batch
                    .task_ids
                    .as_ref()
                    .ok_or_else(|| Error::InvalidState("taskid batch needs task ids".into()))?;
                let k = self.spec.n_tasks;
                let mut flat = Vec::with_capacity(ids.len() * k);
                for &t in ids {
                    flat.extend(one_hot(t, k)?);
                }
                Ok(Some(g.input(ids.len(), k, flat)?))
            }
            ContextKind::Rnn | ContextKind::Transformer => {
                let windows = if next { &batch.history_next } else { &batch.history };
                let windows = windows
                    .as_ref()
                    .ok_or_else(|| Error::InvalidState("history encoder batch needs context windows".into()))?;
                if windows.batch() != batch.size {
                    return Err(Error::invalid("context windows do not match the batch size"));
                }
                let p = if trainable { Binding::trainable(store) } else { Binding::frozen(store) };
                Ok(Some(self.encoder.encode(g, p, windows)?))
            }
            _ => Ok(None),
        }
    }

    fn with_context(g: &mut Graph, parts: &[Var], z: Option<Var>) -> Result<Var> {
        let mut all = parts.to_vec();
        all.extend(z);
        if all.len() == 1 {
            Ok(all[0])
        } else {
            g.concat_cols(&all)
        }
    }

    fn policy(&self, g: &mut Graph, p: Binding<'_>, s: Var, z: Option<Var>, heads: &Heads<'_>, noise: Option<&[f64]>) -> Result<SquashedGaussian> {
        let x = Self::with_context(g, &[s], z)?;
        let mut out = self.actor.forward(g, p, x)?;
        let width = 2 * self.spec.act_dim;
        if self.spec.heads() > 1 {
            let ids: Vec<usize> = match heads {
                Heads::Fixed(ids) => ids.to_vec(),
                Heads::Select => g.value(out).chunks(g.shape(out).1).map(|row| most_confident_head(row, self.spec.act_dim)).collect(),
                Heads::Single => return Err(Error::Internal("multi-head actor used without head choice".into())),
            };
            out = g.select_blocks(out, width, &ids)?;
        }
        squashed_gaussian(g, out, self.spec.act_dim, noise)
    }

    fn q_values(&self, g: &mut Graph, net: &Mlp, p: Binding<'_>, s: Var, a: Var, z: Option<Var>) -> Result<Var> {
        let x = Self::with_context(g, &[s, a], z)?;
        net.forward(g, p, x)
    }

    fn pick(&self, g: &mut Graph, q1: Var, q2: Option<Var>, heads: &Heads<'_>) -> Result<(Var, Option<Var>)> {
        if self.spec.heads() == 1 {
            return Ok((q1, q2));
        }
        let ids: Vec<usize> = match heads {
            Heads::Fixed(ids) => ids.to_vec(),
            Heads::Select => {
                let w = g.shape(q1).1;
                let v1 = g.value(q1).to_vec();
                let v2 = q2.map(|q| g.value(q).to_vec()).unwrap_or_else(|| v1.clone());
                v1.chunks(w).zip(v2.chunks(w)).map(|(a, b)| most_optimistic_head(a, b)).collect()
            }
            Heads::Single => return Err(Error::Internal("multi-head critic used without head choice".into())),
        };
        let a = g.select_blocks(q1, 1, &ids)?;
        let b = match q2 {
            Some(q) => Some(g.select_blocks(q, 1, &ids)?),
            None => None,
        };
        Ok((a, b))
    }

    fn twin_min(g: &mut Graph, q1: Var, q2: Option<Var>) -> Result<Var> {
        match q2 {
            Some(q2) => g.minimum(q1, q2),
            None => Ok(q1),
        }
    }

    /// TD targets `r + γ(1 − done)(min Q̂(s', a') − α log π(a'|s'))` with
    /// `a' = tanh(μ + σ·noise)`. No gradients are produced.
    pub fn compute_target_y(&self, nets: &SacNets, batch: &Batch, noise: &[f64]) -> Result<Vec<f64>> {
        self.check_batch(batch)?;
        let b = batch.size;
        let mut g = Graph::new();
        let s2 = g.input(b, self.spec.obs_dim, batch.s_next.clone())?;
        let z_online = self.batch_context(&mut g, &nets.actor_encoder, false, batch, true)?;
        let z_target = self.batch_context(&mut g, &nets.target_encoder, false, batch, true)?;
        let heads = self.heads_for(batch)?;
        let pi = self.policy(&mut g, Binding::frozen(&nets.actor), s2, z_online, &heads, Some(noise))?;
        let q1 = self.q_values(&mut g, &self.critic1, Binding::frozen(&nets.target1), s2, pi.action, z_target)?;
        let q2 = if self.cfg.twin_critics {
            Some(self.q_values(&mut g, &self.critic2, Binding::frozen(&nets.target2), s2, pi.action, z_target)?)
        } else {
            None
        };
        let (q1, q2) = self.pick(&mut g, q1, q2, &heads)?;
        let m = Self::twin_min(&mut g, q1, q2)?;
        let alpha = nets.alpha();
        let y: Vec<f64> = (0..b)
            .map(|i| {
                let soft = g.value(m)[i] - alpha * g.value(pi.log_prob)[i];
                batch.r[i] + self.cfg.gamma * (1.0 - batch.done[i]) * soft
            })
            .collect();
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("target_y"));
        }
        Ok(y)
    }

    fn critic_graph(&self, g: &mut Graph, nets: &SacNets, batch: &Batch, y: &[f64]) -> Result<CriticParts> {
        self.check_batch(batch)?;
        let b = batch.size;
        if y.len() != b {
            return Err(Error::invalid("target length does not match the batch"));
        }
        let s = g.input(b, self.spec.obs_dim, batch.s.clone())?;
        let a = g.input(b, self.spec.act_dim, batch.a.clone())?;
        let z = self.batch_context(g, &nets.critic_encoder, true, batch, false)?;
        let heads = self.heads_for(batch)?;
        let q1 = self.q_values(g, &self.critic1, Binding::trainable(&nets.critic1), s, a, z)?;
        let q2 = if self.cfg.twin_critics {
            Some(self.q_values(g, &self.critic2, Binding::trainable(&nets.critic2), s, a, z)?)
        } else {
            None
        };
        let (q1, q2) = self.pick(g, q1, q2, &heads)?;
        let yv = g.input(b, 1, y.to_vec())?;
        let d1 = g.sub(q1, yv)?;
        let mut per = g.square(d1);
        if let Some(q2) = q2 {
            let d2 = g.sub(q2, yv)?;
            let e2 = g.square(d2);
            per = g.add(per, e2)?;
        }
        let loss = g.mean(per);
        let q_min = Self::twin_min(g, q1, q2)?;
        Ok(CriticParts { loss, per, q_min, z })
    }

    /// `z` is the critics' (fixed) context for the batch.
    fn actor_graph(&self, g: &mut Graph, nets: &SacNets, batch: &Batch, z: Option<Var>, noise: &[f64]) -> Result<ActorParts> {
        let b = batch.size;
        let s = g.input(b, self.spec.obs_dim, batch.s.clone())?;
        let heads = self.heads_for(batch)?;
        let z_actor = self.batch_context(g, &nets.actor_encoder, true, batch, false)?;
        let pi = self.policy(g, Binding::trainable(&nets.actor), s, z_actor, &heads, Some(noise))?;
        let q1 = self.q_values(g, &self.critic1, Binding::frozen(&nets.critic1), s, pi.action, z)?;
        let q2 = if self.cfg.twin_critics {
            Some(self.q_values(g, &self.critic2, Binding::frozen(&nets.critic2), s, pi.action, z)?)
        } else {
            None
        };
        let (q1, q2) = self.pick(g, q1, q2, &heads)?;
        let m = Self::twin_min(g, q1, q2)?;
        let alpha = g.input(1, 1, vec![nets.alpha()])?;
        let weighted = g.mul_scalar(pi.log_prob, alpha)?;
        let per = g.sub(weighted, m)?;
        let loss = g.mean(per);
        Ok(ActorParts { loss, per, policy: pi })
    }

    fn alpha_graph(&self, g: &mut Graph, nets: &SacNets, log_probs: &[f64]) -> Result<Var> {
        if !self.cfg.auto_entropy {
            return Err(Error::InvalidState("alpha loss requested with automatic entropy tuning off".into()));
        }
        if log_probs.is_empty() {
            return Err(Error::invalid("alpha loss needs at least one log-probability"));
        }
        let target = self.cfg.target_entropy_for(self.spec.act_dim);
        let la = g.bind(Binding::trainable(&nets.alpha), LOG_ALPHA)?;
        let ea = g.exp(la);
        let shifted: Vec<f64> = log_probs.iter().map(|l| l + target).collect();
        let t = g.input(log_probs.len(), 1, shifted)?;
        let prod = g.mul_scalar(t, ea)?;
        let neg = g.scale(prod, -1.0);
        Ok(g.mean(neg))
    }

    /// `mean((Q1 − y)² + (Q2 − y)²)` and its gradient with respect to the
    /// critics and the critic encoder.
    pub fn critic_loss(&self, nets: &SacNets, batch: &Batch, y: &[f64]) -> Result<(f64, ParamStore)> {
        let mut g = Graph::new();
        let parts = self.critic_graph(&mut g, nets, batch, y)?;
        finite_loss(&g, parts.loss, "critic_loss")?;
        Ok((g.scalar(parts.loss), g.backward(parts.loss)?))
    }

    /// Flattened gradient of each sample's critic loss term against targets `y`.
    pub fn critic_sample_grads(&self, nets: &SacNets, batch: &Batch, y: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let parts = self.critic_graph(&mut g, nets, batch, y)?;
        finite_loss(&g, parts.loss, "critic_loss")?;
        per_sample_grads(&g, parts.per, batch.size)
    }

    /// `mean(α log π(â|s) − min Q(s, â))` with `â = tanh(μ + σ·noise)` and its
    /// gradient with respect to the actor and the actor encoder.
    pub fn actor_loss(&self, nets: &SacNets, batch: &Batch, noise: &[f64]) -> Result<(f64, ParamStore)> {
        self.check_batch(batch)?;
        let mut g = Graph::new();
        let z = self.batch_context(&mut g, &nets.critic_encoder, false, batch, false)?;
        let parts = self.actor_graph(&mut g, nets, batch, z, noise)?;
        finite_loss(&g, parts.loss, "actor_loss")?;
        Ok((g.scalar(parts.loss), g.backward(parts.loss)?))
    }

    /// `mean(−exp(log α)·(log π + target_entropy))` and its gradient with
    /// respect to `log_alpha`.
    pub fn alpha_loss(&self, nets: &SacNets, log_probs: &[f64]) -> Result<(f64, ParamStore)> {
        let mut g = Graph::new();
        let loss = self.alpha_graph(&mut g, nets, log_probs)?;
        finite_loss(&g, loss, "alpha_loss")?;
        Ok((g.scalar(loss), g.backward(loss)?))
    }

    /// Action for a single observation.
    pub fn act<R: Rng + ?Sized>(&self, nets: &SacNets, s: &[f64], ctx: &ContextSignal, deterministic: bool, rng: &mut R) -> Result<Vec<f64>> {
        if s.len() != self.spec.obs_dim {
            return Err(Error::invalid(format!("observation has {} values, expected {}", s.len(), self.spec.obs_dim)));
        }
        let zdim = self.context_dim();
        let mut x = s.to_vec();
        let mut head = 0;
        match ctx {
            ContextSignal::Vector(z) if z.len() == zdim && zdim > 0 => x.extend(z),
            ContextSignal::Empty if zdim == 0 && self.spec.heads() == 1 => {}
            ContextSignal::Head(h) if self.spec.context == ContextKind::MultiHead && *h < self.spec.heads() => head = *h,
            ContextSignal::SelectHead if self.spec.context == ContextKind::TaskAgnosticMultiHead => head = usize::MAX,
            other => return Err(Error::invalid(format!("context {other:?} does not fit a {} agent", self.spec.context.as_str()))),
        }
        let mut g = Graph::new();
        let xv = g.input(1, x.len(), x)?;
        let mut out = self.actor.forward(&mut g, Binding::frozen(&nets.actor), xv)?;
        let width = 2 * self.spec.act_dim;
        if self.spec.heads() > 1 {
            if head == usize::MAX {
                head = most_confident_head(g.value(out), self.spec.act_dim);
            }
            out = g.select_blocks(out, width, &[head])?;
        }
        let noise = (!deterministic).then(|| normal_vec(rng, self.spec.act_dim));
        let pi = squashed_gaussian(&mut g, out, self.spec.act_dim, noise.as_deref())?;
        let a = g.value(pi.action).to_vec();
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("action"));
        }
        Ok(a)
    }

    pub fn context(&self, nets: &SacNets, history: &History, task: Option<TaskLabel<'_>>) -> Result<ContextSignal> {
        build_context(self.spec.context, history, task, self.spec.n_tasks, &self.encoder, &nets.actor_encoder)
    }
}

fn finite_loss(g: &Graph, loss: Var, name: &str) -> Result<()> {
    if g.scalar(loss).is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(name))
    }
}

/// Gradient of each batch element's loss, flattened in parameter-path order.
fn per_sample_grads(g: &Graph, per: Var, b: usize) -> Result<Vec<Vec<f64>>> {
    (0..b)
        .map(|i| {
            let mut seed = vec![0.0; b];
            seed[i] = 1.0;
            Ok(g.backward_seeded(per, seed)?.flatten())
        })
        .collect()
}

/// Checkpoint payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentCheckpoint {
    pub spec: AgentSpec,
    pub cfg: SacConfig,
    pub nets: SacNets,
    pub optim: SacOptimizers,
    pub updates: u64,
}

#[derive(Clone, Debug)]
pub struct SacAgent {
    pub model: SacModel,
    pub nets: SacNets,
    pub optim: SacOptimizers,
    pub updates: u64,
}

impl SacAgent {
    pub fn new<R: Rng + ?Sized>(spec: AgentSpec, cfg: SacConfig, rng: &mut R) -> Result<Self> {
        let model = SacModel::new(spec, cfg)?;
        let nets = model.init_nets(rng)?;
        let optim = model.init_optimizers(&nets);
        Ok(Self { model, nets, optim, updates: 0 })
    }

    pub fn act<R: Rng + ?Sized>(&self, s: &[f64], ctx: &ContextSignal, deterministic: bool, rng: &mut R) -> Result<Vec<f64>> {
        self.model.act(&self.nets, s, ctx, deterministic, rng)
    }

    pub fn context(&self, history: &History, task: Option<TaskLabel<'_>>) -> Result<ContextSignal> {
        self.model.context(&self.nets, history, task)
    }

    /// One gradient step on critics, actor and (optionally) the entropy
    /// coefficient, followed by the target soft update.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<UpdateMetrics> {
        let model = &self.model;
        let cfg = &model.cfg;
        let b = batch.size;
        let act = model.spec.act_dim;
        let capture = cfg.conflict_every > 0 && self.updates % cfg.conflict_every == 0 && b >= 2;

        let target_noise = normal_vec(rng, b * act);
        let y = model.compute_target_y(&self.nets, batch, &target_noise)?;

        let mut samples: Option<Vec<Vec<f64>>> = None;
        let (critic_loss, q_mean, z_vals, mut critic_grads) = {
            let mut g = Graph::new();
            let parts = model.critic_graph(&mut g, &self.nets, batch, &y)?;
            finite_loss(&g, parts.loss, "critic_loss")?;
            let grads = g.backward(parts.loss)?;
            if capture && cfg.conflict_source.critic() {
                samples = Some(per_sample_grads(&g, parts.per, b)?);
            }
            let qv = g.value(parts.q_min);
            let q_mean = qv.iter().sum::<f64>() / b as f64;
            (g.scalar(parts.loss), q_mean, parts.z.map(|z| (g.shape(z), g.value(z).to_vec())), grads)
        };
        if !q_mean.is_finite() {
            return Err(Error::numeric("q_mean"));
        }
        if let Some(c) = cfg.grad_clip {
            clip_grad_norm(&mut critic_grads, c)?;
        }
        self.optim.critic1.step(&mut self.nets.critic1, &critic_grads, cfg.lr)?;
        if cfg.twin_critics {
            self.optim.critic2.step(&mut self.nets.critic2, &critic_grads, cfg.lr)?;
        }
        if !self.nets.critic_encoder.is_empty() {
            self.optim.critic_encoder.step(&mut self.nets.critic_encoder, &critic_grads, cfg.lr)?;
        }

        let actor_noise = normal_vec(rng, b * act);
        let (actor_loss, log_probs, mut actor_grads) = {
            let mut g = Graph::new();
            let z = match z_vals {
                Some(((r, c), v)) => Some(g.input(r, c, v)?),
                None => None,
            };
            let parts = model.actor_graph(&mut g, &self.nets, batch, z, &actor_noise)?;
            finite_loss(&g, parts.loss, "actor_loss")?;
            let grads = g.backward(parts.loss)?;
            if capture && cfg.conflict_source.actor() {
                let actor_samples = per_sample_grads(&g, parts.per, b)?;
                samples = Some(match samples.take() {
                    Some(mut s) => {
                        for (dst, src) in s.iter_mut().zip(actor_samples) {
                            dst.extend(src);
                        }
                        s
                    }
                    None => actor_samples,
                });
            }
            (g.scalar(parts.loss), g.value(parts.policy.log_prob).to_vec(), grads)
        };
        if let Some(c) = cfg.grad_clip {
            clip_grad_norm(&mut actor_grads, c)?;
        }
        self.optim.actor.step(&mut self.nets.actor, &actor_grads, cfg.lr)?;
        if !self.nets.actor_encoder.is_empty() {
            self.optim.actor_encoder.step(&mut self.nets.actor_encoder, &actor_grads, cfg.lr)?;
        }

        let alpha_loss = if cfg.auto_entropy {
            let (loss, grads) = model.alpha_loss(&self.nets, &log_probs)?;
            self.optim.alpha.step(&mut self.nets.alpha, &grads, cfg.lr)?;
            Some(loss)
        } else {
            None
        };

        soft_update(&mut self.nets.target1, &self.nets.critic1, cfg.soft_tau)?;
        soft_update(&mut self.nets.target2, &self.nets.critic2, cfg.soft_tau)?;
        soft_update(&mut self.nets.target_encoder, &self.nets.critic_encoder, cfg.soft_tau)?;
        self.updates += 1;

        let grad_conflict_std = samples.map(|s| crate::metrics::grad_conflict_std(&s)).transpose()?;
        let alpha = self.nets.alpha();
        if !alpha.is_finite() {
            return Err(Error::numeric("alpha"));
        }
        Ok(UpdateMetrics { critic_loss, actor_loss, alpha_loss, alpha, q_mean, grad_conflict_std })
    }

    pub fn checkpoint(&self) -> AgentCheckpoint {
        AgentCheckpoint {
            spec: self.model.spec.clone(),
            cfg: self.model.cfg.clone(),
            nets: self.nets.clone(),
            optim: self.optim.clone(),
            updates: self.updates,
        }
    }

    pub fn from_checkpoint(ck: AgentCheckpoint) -> Result<Self> {
        let model = SacModel::new(ck.spec, ck.cfg)?;
        let fresh = model.init_nets(&mut crate::rng::seeded(0))?;
        if !fresh.actor.same_layout(&ck.nets.actor) || !fresh.critic1.same_layout(&ck.nets.critic1) || !fresh.actor_encoder.same_layout(&ck.nets.actor_encoder) {
            return Err(Error::invalid("checkpoint parameters do not match its agent spec"));
        }
        Ok(Self { model, nets: ck.nets, optim: ck.optim, updates: ck.updates })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.checkpoint())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_checkpoint(serde_json::from_str(text)?)
    }
}
