//! One seeded training run: sample a step, store it, update once, and
//! evaluate on a fixed cadence. The schedule decides which task is live.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::encoders::{push_token, ContextKind, EncoderConfig, History, TaskAudit, TaskLabel, TokenWindows};
use crate::env::{self, EnvState, QuadraticTask, Regime, TaskSet};
use crate::error::{Error, Result};
use crate::metrics;
use crate::replay::{batch_split, sample_windows, BufferPair, TrajectoryWindow, TransitionRecord};
use crate::rng::{derive_seed, stream, stream_rng, uniform_vec, RunRng};
use crate::sac::{AgentSpec, Batch, RewardTransform, SacAgent, SacConfig, SacModel, SacNets};

/// What happens to old-task data at a task boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayMode {
    /// Move it to the old buffer and keep replaying it.
    Replay,
    /// Drop it.
    FineTune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub mode: Regime,
    pub n_tasks: usize,
    pub n_dims: usize,
    pub t_per_task: usize,
    pub episode_length: usize,
    pub r_target: f64,
    pub context: ContextKind,
    pub encoder: EncoderConfig,
    pub hidden: usize,
    pub sac: SacConfig,
    pub replay: ReplayMode,
    pub beta: f64,
    pub buffer_capacity: usize,
    /// Defaults to `buffer_capacity`.
    pub old_buffer_capacity: Option<usize>,
    pub warmup_steps: u64,
    pub burnin_steps: u64,
    /// Defaults to `episode_length`.
    pub eval_every: Option<u64>,
    pub eval_episodes_per_task: usize,
    /// Applied to rewards before learning; returns stay raw.
    pub reward_transform: RewardTransform,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Regime::Continual,
            n_tasks: 2,
            n_dims: 2,
            t_per_task: 1000,
            episode_length: 100,
            r_target: 0.0,
            context: ContextKind::None,
            encoder: EncoderConfig::default(),
            hidden: 64,
            sac: SacConfig::default(),
            replay: ReplayMode::Replay,
            beta: 0.8,
            buffer_capacity: 1_000_000,
            old_buffer_capacity: None,
            warmup_steps: 100,
            burnin_steps: 100,
            eval_every: None,
            eval_episodes_per_task: 1,
            reward_transform: RewardTransform::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 || self.n_dims == 0 || self.t_per_task == 0 || self.episode_length == 0 {
            return Err(Error::invalid("n_tasks, n_dims, t_per_task and episode_length must be positive"));
        }
        if self.eval_every == Some(0) {
            return Err(Error::invalid("eval_every must be at least 1"));
        }
        if self.eval_episodes_per_task == 0 {
            return Err(Error::invalid("eval_episodes_per_task must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid(format!("beta {} outside [0, 1]", self.beta)));
        }
        if self.buffer_capacity == 0 || self.old_buffer_capacity == Some(0) {
            return Err(Error::invalid("buffer capacities must be positive"));
        }
        if !self.r_target.is_finite() {
            return Err(Error::invalid("r_target must be finite"));
        }
        self.sac.validate()?;
        self.agent_spec().validate()
    }

    pub fn total_timesteps(&self) -> u64 {
        (self.n_tasks * self.t_per_task) as u64
    }

    pub fn eval_every(&self) -> u64 {
        self.eval_every.unwrap_or(self.episode_length as u64)
    }

    pub fn agent_spec(&self) -> AgentSpec {
        AgentSpec {
            obs_dim: self.n_dims,
            act_dim: self.n_dims,
            n_tasks: self.n_tasks,
            hidden: self.hidden,
            context: self.context,
            encoder: self.encoder.clone(),
            reward_transform: self.reward_transform,
        }
    }

    pub fn task_set(&self) -> Result<TaskSet> {
        TaskSet::generate(self.seed, self.n_dims, self.n_tasks, self.r_target)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub global_return: f64,
    pub current_return: f64,
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub grad_conflict_std: Option<f64>,
    pub q_mean: Option<f64>,
    /// Entropy of the parameter change since the previous record.
    pub param_update_entropy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub config: RunConfig,
    pub records: Vec<EvalRecord>,
    /// Mean `min(Q1, Q2)` of every update.
    pub q_series: Vec<f64>,
    pub rollover_steps: Vec<u64>,
    /// `(first step, task)` each time the live task changes.
    pub task_trace: Vec<(u64, usize)>,
    pub updates: u64,
    pub env_steps: u64,
    /// Reads of a poisoned task label; zero for a clean task-agnostic run.
    pub audit_dereferences: u64,
    pub agent: SacAgent,
    pub wall_clock_seconds: f64,
}

impl RunResult {
    pub fn final_record(&self) -> Option<&EvalRecord> {
        self.records.last()
    }

    pub fn q_instability(&self) -> Option<f64> {
        metrics::q_instability(&self.q_series).ok()
    }

    /// One JSON object per evaluation record.
    pub fn to_jsonl(&self, run_id: &str) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            let line = serde_json::json!({
                "run_id": run_id,
                "step": r.step,
                "global_return": r.global_return,
                "current_return": r.current_return,
                "losses": { "critic": r.critic_loss, "actor": r.actor_loss },
                "grad_std": r.grad_conflict_std,
                "q_mean": r.q_mean,
                "h_entropy": r.param_update_entropy,
            });
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn label<'a>(kind: ContextKind, task: usize, audit: &'a TaskAudit) -> TaskLabel<'a> {
    if kind.is_task_aware() {
        TaskLabel::known(task)
    } else {
        TaskLabel::poisoned(task, audit)
    }
}

/// Mean undiscounted return of `episodes` episodes on one task. `policy`
/// receives the state and the history of the running episode, whose
/// rewards pass through `transform`.
#[allow(clippy::too_many_arguments)]
pub fn rollout_return<F>(
    task: &QuadraticTask,
    tasks: &TaskSet,
    episode_length: usize,
    episodes: usize,
    h: usize,
    transform: RewardTransform,
    rng: &mut RunRng,
    mut policy: F,
) -> Result<f64>
where
    F: FnMut(&EnvState, &History) -> Result<Vec<f64>>,
{
    if episodes == 0 {
        return Err(Error::invalid("at least one evaluation episode is needed"));
    }
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut state = env::reset(task, episode_length, rng);
        let mut history = History::new(h);
        loop {
            let a = policy(&state, &history)?;
            let (next, r, done) = env::step(&state, &a, tasks)?;
            total += r;
            history.push(&state.s_obs, &a, transform.apply(r));
            state = next;
            if done {
                break;
            }
        }
    }
    Ok(total / episodes as f64)
}

fn eval_rng(seed: u64, task: usize) -> RunRng {
    stream_rng(derive_seed(seed, task as u64), stream::EVAL)
}

/// Deterministic-policy return on one task.
pub fn evaluate_current(model: &SacModel, nets: &SacNets, tasks: &TaskSet, task: usize, episodes: usize, episode_length: usize, seed: u64, audit: &TaskAudit) -> Result<f64> {
    let t = tasks.task(task)?;
    let h = model.spec.encoder.history_length;
    let mut rng = eval_rng(seed, task);
    let mut unused = stream_rng(seed, stream::EVAL);
    rollout_return(t, tasks, episode_length, episodes, h, model.spec.reward_transform, &mut rng, |state, history| {
        let ctx = model.context(nets, history, Some(label(model.spec.context, state.task_index, audit)))?;
        model.act(nets, &state.s_obs, &ctx, true, &mut unused)
    })
}

/// Mean of [`evaluate_current`] over every task.
pub fn evaluate_global(model: &SacModel, nets: &SacNets, tasks: &TaskSet, episodes: usize, episode_length: usize, seed: u64, audit: &TaskAudit) -> Result<f64> {
    let mut sum = 0.0;
    for k in 0..tasks.k() {
        sum += evaluate_current(model, nets, tasks, k, episodes, episode_length, seed, audit)?;
    }
    Ok(sum / tasks.k() as f64)
}

/// Return of the closed-form greedy policy `a = clamp(s* − s)` on one task.
pub fn oracle_return(tasks: &TaskSet, task: usize, episodes: usize, episode_length: usize, seed: u64) -> Result<f64> {
    let t = tasks.task(task)?;
    rollout_return(t, tasks, episode_length, episodes, 0, RewardTransform::IDENTITY, &mut eval_rng(seed, task), |state, _| Ok(t.greedy_action(&state.s_obs)))
}

/// Return of the uniform-random policy on one task.
pub fn random_return(tasks: &TaskSet, task: usize, episodes: usize, episode_length: usize, seed: u64) -> Result<f64> {
    let t = tasks.task(task)?;
    let mut act_rng = stream_rng(seed, stream::ACT);
    rollout_return(t, tasks, episode_length, episodes, 0, RewardTransform::IDENTITY, &mut eval_rng(seed, task), |_, _| Ok(uniform_vec(&mut act_rng, t.d, -1.0, 1.0)))
}

fn window_tokens(w: &TrajectoryWindow<'_>, h: usize, with_anchor: bool) -> Vec<f64> {
    let mut steps: Vec<&TransitionRecord> = w.history.clone();
    if with_anchor {
        steps.push(w.anchor);
    }
    let skip = steps.len().saturating_sub(h);
    let mut out = Vec::new();
    for rec in &steps[skip..] {
        push_token(&mut out, &rec.s, &rec.a, rec.r);
    }
    out
}

/// Builds a minibatch from the two buffers under the replay cap.
pub fn sample_batch(buffers: &BufferPair, kind: ContextKind, h: usize, b: usize, beta: f64, rng: &mut RunRng, audit: &TaskAudit) -> Result<Batch> {
    let (n_cur, n_old) = batch_split(buffers.n, b, beta, !buffers.old.is_empty());
    let mut windows = sample_windows(&buffers.current, n_cur, h, rng)?;
    if n_old > 0 {
        windows.extend(sample_windows(&buffers.old, n_old, h, rng)?);
    }
    let mut batch = Batch { size: windows.len(), ..Default::default() };
    let mut ids = Vec::new();
    for w in &windows {
        let rec = w.anchor;
        batch.s.extend_from_slice(&rec.s);
        batch.a.extend_from_slice(&rec.a);
        batch.r.push(rec.r);
        batch.s_next.extend_from_slice(&rec.s_next);
        // the environment only ends episodes by time limit, which is not terminal
        batch.done.push(0.0);
        if kind.is_task_aware() {
            ids.push(label(kind, rec.task_index, audit).get()?);
        }
    }
    if kind.is_task_aware() {
        batch.task_ids = Some(ids);
    }
    if kind.uses_history() {
        let td = windows.first().map_or(0, |w| 2 * w.anchor.s.len() + 1);
        let mut hist = TokenWindows::new(td);
        let mut next = TokenWindows::new(td);
        for w in &windows {
            hist.seqs.push(window_tokens(w, h, false));
            next.seqs.push(window_tokens(w, h, true));
        }
        batch.history = Some(hist);
        batch.history_next = Some(next);
    }
    Ok(batch)
}

#[derive(Default)]
struct Window {
    critic: Vec<f64>,
    actor: Vec<f64>,
    conflict: Vec<f64>,
    q: Vec<f64>,
}

fn mean_opt(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs the configured regime on the tasks generated from `config.seed`.
/// Independent mode is handled by [`run_independent`].
pub fn train_run(config: &RunConfig) -> Result<RunResult> {
    config.validate()?;
    if config.mode == Regime::Independent {
        return Err(Error::invalid("independent mode trains one model per task; use run_independent"));
    }
    let tasks = config.task_set()?;
    train_run_on(config, &tasks)
}

/// [`train_run`] on an explicit task set.
pub fn train_run_on(config: &RunConfig, tasks: &TaskSet) -> Result<RunResult> {
    config.validate()?;
    if tasks.k() != config.n_tasks || tasks.d != config.n_dims {
        return Err(Error::invalid("task set does not match the configuration"));
    }
    let started = Instant::now();
    let seed = config.seed;
    let mode = config.mode;
    let kind = config.context;
    let h = config.encoder.history_length;
    let b = config.sac.batch_size;
    let total = config.total_timesteps();
    let eval_every = config.eval_every();
    let schedule_seed = derive_seed(seed, stream::SCHEDULE);

    let mut agent = SacAgent::new(config.agent_spec(), config.sac.clone(), &mut stream_rng(seed, stream::INIT))?;
    let mut env_rng = stream_rng(seed, stream::ENV);
    let mut act_rng = stream_rng(seed, stream::ACT);
    let mut replay_rng = stream_rng(seed, stream::REPLAY);
    let mut update_rng = stream_rng(seed, stream::UPDATE);
    let eval_seed = derive_seed(seed, stream::EVAL);
    let audit = TaskAudit::default();

    let old_cap = config.old_buffer_capacity.unwrap_or(config.buffer_capacity);
    let mut buffers = BufferPair::new(config.buffer_capacity, old_cap);
    let mut episode: u64 = 0;
    let mut live = env::schedule_task(mode, config.n_tasks, config.t_per_task, 0, 0, None, schedule_seed)?;
    let mut state = env::reset(tasks.task(live)?, config.episode_length, &mut env_rng);
    let mut history = History::new(h);

    let mut records = Vec::new();
    let mut q_series = Vec::new();
    let mut rollover_steps = Vec::new();
    let mut task_trace = vec![(0, live)];
    let mut window = Window::default();
    let mut prev_params = agent.nets.online_flat();

    for step in 0..total {
        if mode == Regime::Continual {
            let scheduled = env::schedule_task(mode, config.n_tasks, config.t_per_task, step, episode, None, schedule_seed)?;
            if scheduled != live {
                match config.replay {
                    ReplayMode::Replay => buffers.rollover(),
                    ReplayMode::FineTune => buffers.discard_current(),
                }
                rollover_steps.push(step);
                live = scheduled;
                task_trace.push((step, live));
                episode += 1;
                state = env::reset(tasks.task(live)?, config.episode_length, &mut env_rng);
                history.clear();
            }
        }

        let action = if step < config.warmup_steps {
            uniform_vec(&mut act_rng, config.n_dims, -1.0, 1.0)
        } else {
            let ctx = agent.context(&history, Some(label(kind, live, &audit)))?;
            agent.act(&state.s_obs, &ctx, false, &mut act_rng)?
        };
        let (next, r, done) = env::step(&state, &action, tasks).map_err(|e| e.at_step(step))?;
        if !r.is_finite() {
            return Err(Error::numeric("reward").at_step(step));
        }
        let learned_r = config.reward_transform.apply(r);
        buffers.current.push(TransitionRecord {
            s: state.s_obs.clone(),
            a: action.clone(),
            r: learned_r,
            s_next: next.s_obs.clone(),
            done,
            episode_id: episode,
            step_in_episode: state.step_count,
            task_index: live,
        });
        history.push(&state.s_obs, &action, learned_r);

        if step >= config.burnin_steps && !buffers.current.is_empty() {
            let batch = sample_batch(&buffers, kind, h, b, config.beta, &mut replay_rng, &audit)?;
            let m = agent.update(&batch, &mut update_rng).map_err(|e| e.at_step(step))?;
            window.critic.push(m.critic_loss);
            window.actor.push(m.actor_loss);
            window.q.push(m.q_mean);
            q_series.push(m.q_mean);
            window.conflict.extend(m.grad_conflict_std);
        }

        if done {
            episode += 1;
            let next_task = match mode {
                Regime::Continual => live,
                _ => env::schedule_task(mode, config.n_tasks, config.t_per_task, step + 1, episode, None, schedule_seed)?,
            };
            if next_task != live {
                live = next_task;
                task_trace.push((step + 1, live));
            }
            state = env::reset(tasks.task(live)?, config.episode_length, &mut env_rng);
            history.clear();
        } else {
            state = next;
        }

        let done_steps = step + 1;
        if done_steps % eval_every == 0 || done_steps == total {
            let model = &agent.model;
            let global = evaluate_global(model, &agent.nets, tasks, config.eval_episodes_per_task, config.episode_length, eval_seed, &audit)
                .map_err(|e| e.at_step(step))?;
            let current = evaluate_current(model, &agent.nets, tasks, live, config.eval_episodes_per_task, config.episode_length, eval_seed, &audit)
                .map_err(|e| e.at_step(step))?;
            let params = agent.nets.online_flat();
            let entropy = metrics::param_update_entropy(&prev_params, &params).ok();
            prev_params = params;
            records.push(EvalRecord {
                step: done_steps,
                global_return: global,
                current_return: current,
                critic_loss: mean_opt(&window.critic),
                actor_loss: mean_opt(&window.actor),
                grad_conflict_std: mean_opt(&window.conflict),
                q_mean: mean_opt(&window.q),
                param_update_entropy: entropy,
            });
            window = Window::default();
        }
    }

    Ok(RunResult {
        config: config.clone(),
        records,
        q_series,
        rollover_steps,
        task_trace,
        updates: agent.updates,
        env_steps: total,
        audit_dereferences: audit.dereferences(),
        agent,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Seed of the model trained on task `k` in independent mode.
pub fn independent_seed(seed: u64, k: usize) -> u64 {
    derive_seed(seed, 1000 + k as u64)
}

/// Single-task configuration and task set for task `k` of an independent run.
pub fn independent_setup(config: &RunConfig, tasks: &TaskSet, k: usize) -> Result<(RunConfig, TaskSet)> {
    let mut task = tasks.task(k)?.clone();
    task.task_index = 0;
    let sub = TaskSet { seed: tasks.seed, d: tasks.d, r_target: tasks.r_target, tasks: vec![task] };
    let cfg = RunConfig { mode: Regime::Continual, n_tasks: 1, seed: independent_seed(config.seed, k), ..config.clone() };
    Ok((cfg, sub))
}

/// One fresh model per task, each trained for `t_per_task` steps on its task.
pub fn run_independent(config: &RunConfig) -> Result<Vec<RunResult>> {
    config.validate()?;
    if config.mode != Regime::Independent {
        return Err(Error::invalid("run_independent needs mode Independent"));
    }
    let tasks = config.task_set()?;
    (0..tasks.k())
        .map(|k| {
            let (cfg, sub) = independent_setup(config, &tasks, k)?;
            train_run_on(&cfg, &sub)
        })
        .collect()
}

/// Mean final current return over per-task runs.
pub fn independent_global_return(results: &[RunResult]) -> Option<f64> {
    let finals: Vec<f64> = results.iter().filter_map(|r| r.final_record().map(|e| e.current_return)).collect();
    mean_opt(&finals)
}

/// Context vector at one step of an evaluation episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenTrace {
    pub task: usize,
    #[serde(rename = "t")]
    pub step: usize,
    pub z: Vec<f64>,
}

/// Runs one deterministic episode per task and records the context vector
/// the encoder produces at every step.
pub fn dump_hidden(agent: &SacAgent, tasks: &TaskSet, episode_length: usize, seed: u64) -> Result<Vec<HiddenTrace>> {
    let model = &agent.model;
    if !model.spec.context.uses_history() {
        return Err(Error::invalid(format!("{} agents have no history encoder", model.spec.context.as_str())));
    }
    let audit = TaskAudit::default();
    let mut out = Vec::new();
    let mut unused = stream_rng(seed, stream::EVAL);
    for k in 0..tasks.k() {
        let t = tasks.task(k)?;
        let mut step = 0;
        rollout_return(t, tasks, episode_length, 1, model.spec.encoder.history_length, model.spec.reward_transform, &mut eval_rng(seed, k), |state, history| {
            let ctx = model.context(&agent.nets, history, Some(TaskLabel::poisoned(k, &audit)))?;
            if let crate::encoders::ContextSignal::Vector(z) = &ctx {
                out.push(HiddenTrace { task: k, step, z: z.clone() });
            }
            step += 1;
            model.act(&agent.nets, &state.s_obs, &ctx, true, &mut unused)
        })?;
    }
    Ok(out)
}
