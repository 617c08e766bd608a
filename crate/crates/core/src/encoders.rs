//! Context signals the actor and critics condition on.
//!
//! Task-aware methods read the task label (one-hot input or a fixed output
//! head). Task-agnostic methods either ignore it, pick heads by confidence,
//! or encode the recent `(s, a, r)` history of the current episode with a
//! GRU or a causal transformer.

use std::cell::Cell;
use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{gaussian_entropy, AttentionEncoder, Gru, Positional, TokenEmbedding};
use crate::autodiff::{nn, Binding, Graph, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum ContextKind {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "taskid")]
    TaskId,
    #[serde(rename = "mh")]
    MultiHead,
    #[serde(rename = "tamh")]
    TaskAgnosticMultiHead,
    #[serde(rename = "rnn")]
    Rnn,
    #[serde(rename = "tx")]
    Transformer,
}

impl ContextKind {
    pub fn is_task_aware(self) -> bool {
        matches!(self, ContextKind::TaskId | ContextKind::MultiHead)
    }

    pub fn uses_history(self) -> bool {
        matches!(self, ContextKind::Rnn | ContextKind::Transformer)
    }

    pub fn has_heads(self) -> bool {
        matches!(self, ContextKind::MultiHead | ContextKind::TaskAgnosticMultiHead)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ContextKind::None => "none",
            ContextKind::TaskId => "taskid",
            ContextKind::MultiHead => "mh",
            ContextKind::TaskAgnosticMultiHead => "tamh",
            ContextKind::Rnn => "rnn",
            ContextKind::Transformer => "tx",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// GRU state size, or transformer model width.
    pub hidden_size: usize,
    /// Dimension of `z`.
    pub context_size: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Transformer feed-forward width; `4·hidden_size` when unset.
    pub ff_width: Option<usize>,
    pub positional: Positional,
    pub token_embedding: TokenEmbedding,
    pub history_length: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden_size: 30,
            context_size: 30,
            n_heads: 1,
            n_layers: 1,
            ff_width: None,
            positional: Positional::Sinusoidal,
            token_embedding: TokenEmbedding::None,
            history_length: 8,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, kind: ContextKind) -> Result<()> {
        if self.hidden_size == 0 || self.context_size == 0 {
            return Err(Error::invalid("encoder sizes must be positive"));
        }
        if kind.uses_history() && self.history_length == 0 {
            return Err(Error::invalid("history length must be positive"));
        }
        if kind == ContextKind::Transformer && (self.n_heads == 0 || self.hidden_size % self.n_heads != 0) {
            return Err(Error::invalid(format!(
                "transformer hidden size {} is not divisible by {} heads",
                self.hidden_size, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryStep {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
}

/// The last `capacity` transitions of the running episode, oldest first.
#[derive(Clone, Debug)]
pub struct History {
    steps: VecDeque<HistoryStep>,
    capacity: usize,
}

impl History {
    pub fn new(capacity: usize) -> Self {
        Self { steps: VecDeque::with_capacity(capacity + 1), capacity }
    }

    pub fn push(&mut self, s: &[f64], a: &[f64], r: f64) {
        if self.capacity == 0 {
            return;
        }
        if self.steps.len() == self.capacity {
            self.steps.pop_front();
        }
        self.steps.push_back(HistoryStep { s: s.to_vec(), a: a.to_vec(), r });
    }

    pub fn clear(&mut self) {
        self.steps.clear();
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &HistoryStep> {
        self.steps.iter()
    }

    /// Flattened tokens, oldest first.
    pub fn tokens(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for st in &self.steps {
            push_token(&mut out, &st.s, &st.a, st.r);
        }
        out
    }
}

/// Appends the token `s ⊕ a ⊕ symlog(r)`.
pub fn push_token(out: &mut Vec<f64>, s: &[f64], a: &[f64], r: f64) {
    out.extend_from_slice(s);
    out.extend_from_slice(a);
    out.push(symlog(r));
}

/// `sign(x)·ln(1 + |x|)`.
pub fn symlog(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

/// A batch of variable-length token sequences, each flattened oldest first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenWindows {
    pub token_dim: usize,
    pub seqs: Vec<Vec<f64>>,
}

impl TokenWindows {
    pub fn new(token_dim: usize) -> Self {
        Self { token_dim, seqs: Vec::new() }
    }

    pub fn batch(&self) -> usize {
        self.seqs.len()
    }

    pub fn len_of(&self, b: usize) -> usize {
        self.seqs[b].len() / self.token_dim
    }

    pub fn max_len(&self) -> usize {
        (0..self.batch()).map(|b| self.len_of(b)).max().unwrap_or(0)
    }
}

/// Counts reads of a task label that a task-agnostic run must never make.
#[derive(Debug, Default)]
pub struct TaskAudit {
    dereferences: Cell<u64>,
}

impl TaskAudit {
    pub fn dereferences(&self) -> u64 {
        self.dereferences.get()
    }
}

/// Task identity as handed to context builders. Poisoned labels refuse to
/// reveal the index and record the attempt.
#[derive(Clone, Copy, Debug)]
pub struct TaskLabel<'a> {
    index: usize,
    audit: Option<&'a TaskAudit>,
}

impl<'a> TaskLabel<'a> {
    pub fn known(index: usize) -> Self {
        Self { index, audit: None }
    }

    pub fn poisoned(index: usize, audit: &'a TaskAudit) -> Self {
        Self { index, audit: Some(audit) }
    }

    pub fn get(&self) -> Result<usize> {
        match self.audit {
            None => Ok(self.index),
            Some(a) => {
                a.dereferences.set(a.dereferences.get() + 1);
                Err(Error::InvalidState("task label read in a task-agnostic run".into()))
            }
        }
    }
}

pub fn one_hot(task_id: usize, k: usize) -> Result<Vec<f64>> {
    if task_id >= k {
        return Err(Error::invalid(format!("task {task_id} outside 0..{k}")));
    }
    let mut v = vec![0.0; k];
    v[task_id] = 1.0;
    Ok(v)
}

/// Learned history encoder (or none).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ContextEncoder {
    None,
    Gru { gru: Gru, context: usize },
    Transformer(AttentionEncoder),
}

pub const ENCODER_PREFIX: &str = "encoder";

impl ContextEncoder {
    pub fn new(kind: ContextKind, obs_dim: usize, act_dim: usize, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate(kind)?;
        let token_dim = obs_dim + act_dim + 1;
        Ok(match kind {
            ContextKind::Rnn => ContextEncoder::Gru {
                gru: Gru::new(format!("{ENCODER_PREFIX}.gru"), token_dim, cfg.hidden_size),
                context: cfg.context_size,
            },
            ContextKind::Transformer => ContextEncoder::Transformer(AttentionEncoder {
                prefix: format!("{ENCODER_PREFIX}.tx"),
                token_dim,
                hidden: cfg.hidden_size,
                heads: cfg.n_heads,
                layers: cfg.n_layers,
                ff_width: cfg.ff_width.unwrap_or(4 * cfg.hidden_size),
                context: cfg.context_size,
                max_len: cfg.history_length.max(1),
                positional: cfg.positional,
                token_embedding: cfg.token_embedding,
            }),
            _ => ContextEncoder::None,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        match self {
            ContextEncoder::None => Ok(()),
            ContextEncoder::Gru { gru, context } => {
                gru.init(store, rng)?;
                nn::init_linear(store, &format!("{ENCODER_PREFIX}.proj"), gru.hidden, *context, false, rng)
            }
            ContextEncoder::Transformer(tx) => tx.init(store, rng),
        }
    }

    pub fn context_dim(&self) -> usize {
        match self {
            ContextEncoder::None => 0,
            ContextEncoder::Gru { context, .. } => *context,
            ContextEncoder::Transformer(tx) => tx.context,
        }
    }

    /// Encodes a batch of windows to `batch × context_dim`. Empty windows map to zero rows.
    pub fn encode(&self, g: &mut Graph, p: Binding<'_>, windows: &TokenWindows) -> Result<Var> {
        let batch = windows.batch();
        let steps = windows.max_len();
        let c = self.context_dim();
        let td = windows.token_dim;
        if steps == 0 || matches!(self, ContextEncoder::None) {
            return Ok(g.zeros(batch, c));
        }
        let starts: Vec<usize> = (0..batch).map(|b| steps - windows.len_of(b)).collect();
        let nonempty: Vec<f64> = (0..batch).map(|b| if windows.len_of(b) > 0 { 1.0 } else { 0.0 }).collect();
        match self {
            ContextEncoder::None => unreachable!(),
            ContextEncoder::Gru { gru, .. } => {
                // time-major, right-aligned
                let mut flat = vec![0.0; steps * batch * td];
                for (b, seq) in windows.seqs.iter().enumerate() {
                    for (i, tok) in seq.chunks(td).enumerate() {
                        let t = starts[b] + i;
                        flat[(t * batch + b) * td..(t * batch + b + 1) * td].copy_from_slice(tok);
                    }
                }
                let x = g.input(steps * batch, td, flat)?;
                let h = gru.run(g, p, x, batch, steps, &starts)?;
                let w = g.bind(p, &format!("{ENCODER_PREFIX}.proj.w"))?;
                g.matmul(h, w)
            }
            ContextEncoder::Transformer(tx) => {
                let mut flat = vec![0.0; steps * batch * td];
                for (b, seq) in windows.seqs.iter().enumerate() {
                    let off = (b * steps + starts[b]) * td;
                    flat[off..off + seq.len()].copy_from_slice(seq);
                }
                let x = g.input(steps * batch, td, flat)?;
                let (_, z) = tx.encode(g, p, x, batch, steps, &starts)?;
                g.row_mask(z, &nonempty)
            }
        }
    }

    /// Context for a single live history.
    pub fn encode_one(&self, store: &ParamStore, history: &History) -> Result<Vec<f64>> {
        let token_dim = match self {
            ContextEncoder::None => return Ok(Vec::new()),
            ContextEncoder::Gru { gru, .. } => gru.input,
            ContextEncoder::Transformer(tx) => tx.token_dim,
        };
        let windows = TokenWindows { token_dim, seqs: vec![history.tokens()] };
        let mut g = Graph::new();
        let z = self.encode(&mut g, Binding::frozen(store), &windows)?;
        Ok(g.value(z).to_vec())
    }
}

/// GRU history encoding from a zero initial state; empty history gives `z = 0`.
pub fn rnn_context(encoder: &ContextEncoder, store: &ParamStore, history: &History) -> Result<Vec<f64>> {
    match encoder {
        ContextEncoder::Gru { .. } => encoder.encode_one(store, history),
        _ => Err(Error::invalid("rnn_context needs a GRU encoder")),
    }
}

/// Causal-attention history encoding; empty history gives `z = 0`.
pub fn tx_context(encoder: &ContextEncoder, store: &ParamStore, history: &History) -> Result<Vec<f64>> {
    match encoder {
        ContextEncoder::Transformer(_) => encoder.encode_one(store, history),
        _ => Err(Error::invalid("tx_context needs a transformer encoder")),
    }
}

/// Index of the smallest value; ties go to the lowest index.
fn argmin(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v < values[b]) {
            best = Some(i);
        }
    }
    best
}

fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Task-agnostic head choice: the actor head with the lowest policy entropy
/// and the critic head with the highest (pessimistic twin) value.
pub fn select_head_tamh(actor_entropies: &[f64], critic_values: &[f64]) -> Result<(usize, usize)> {
    let a = argmin(actor_entropies).ok_or_else(|| Error::invalid("no actor heads"))?;
    let c = argmax(critic_values).ok_or_else(|| Error::invalid("no critic heads"))?;
    Ok((a, c))
}

/// Entropy of each actor head given a row of `[μ | log σ]` blocks.
pub fn head_entropies(row: &[f64], act_dim: usize) -> Vec<f64> {
    row.chunks(2 * act_dim).map(|blk| gaussian_entropy(&blk[act_dim..])).collect()
}

pub(crate) fn most_confident_head(row: &[f64], act_dim: usize) -> usize {
    argmin(&head_entropies(row, act_dim)).unwrap_or(0)
}

pub(crate) fn most_optimistic_head(q1: &[f64], q2: &[f64]) -> usize {
    let mins: Vec<f64> = q1.iter().zip(q2).map(|(a, b)| a.min(*b)).collect();
    argmax(&mins).unwrap_or(0)
}

/// What the actor and critics receive alongside the observation.
#[derive(Clone, Debug, PartialEq)]
pub enum ContextSignal {
    Empty,
    Vector(Vec<f64>),
    Head(usize),
    SelectHead,
}

pub fn build_context(
    kind: ContextKind,
    history: &History,
    task: Option<TaskLabel<'_>>,
    k: usize,
    encoder: &ContextEncoder,
    store: &ParamStore,
) -> Result<ContextSignal> {
    let need_task = || -> Result<usize> {
        let label = task.ok_or_else(|| {
            Error::InvalidState(format!("{} context needs the task identity", kind.as_str()))
        })?;
        label.get()
    };
    match kind {
        ContextKind::None => Ok(ContextSignal::Empty),
        ContextKind::TaskId => Ok(ContextSignal::Vector(one_hot(need_task()?, k)?)),
        ContextKind::MultiHead => {
            let t = need_task()?;
            if t >= k {
                return Err(Error::invalid(format!("task {t} outside 0..{k}")));
            }
            Ok(ContextSignal::Head(t))
        }
        ContextKind::TaskAgnosticMultiHead => Ok(ContextSignal::SelectHead),
        ContextKind::Rnn => Ok(ContextSignal::Vector(rnn_context(encoder, store, history)?)),
        ContextKind::Transformer => Ok(ContextSignal::Vector(tx_context(encoder, store, history)?)),
    }
}
