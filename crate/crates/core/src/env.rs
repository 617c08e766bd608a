//! Quadratic Optimization benchmark.
//!
//! Each task is a concave quadratic reward `r(s) = sᵀAs + bᵀs + c` over a
//! d-dimensional observable state. Dynamics are shared by every task:
//! `s' = s + clamp(a, -1, 1)`. Tasks differ only in `(A, b, c)`, and `c` is
//! chosen so every task attains the same maximum reward.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};

pub const DEFAULT_EPISODE_LENGTH: usize = 100;
pub const DEFAULT_EPS: f64 = 0.1;

/// How the hidden task evolves over a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum Regime {
    /// Non-backtracking chain: each task held for a fixed number of steps.
    #[serde(rename = "CL")]
    Continual,
    /// Stationary: a task drawn uniformly at the start of each episode.
    #[serde(rename = "MTL")]
    MultiTask,
    /// A single fixed task.
    Independent,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Continual => "CL",
            Regime::MultiTask => "MTL",
            Regime::Independent => "Independent",
        }
    }
}

/// Samples `-(MᵀM + eps·I)` with `M` a matrix of standard normal draws.
pub fn sample_neg_def<R: Rng + ?Sized>(rng: &mut R, d: usize, eps: f64) -> Result<Vec<f64>> {
    if d == 0 {
        return Err(Error::invalid("dimension must be at least 1"));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    let m = rng::normal_vec(rng, d * d);
    Ok(neg_gram(&m, d, eps))
}

/// `-(MᵀM + eps·I)` for a row-major `M`. The product is accumulated in the
/// same order for `(i, j)` and `(j, i)`, so the result is exactly symmetric.
pub(crate) fn neg_gram(m: &[f64], d: usize, eps: f64) -> Vec<f64> {
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        for j in i..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += m[k * d + i] * m[k * d + j];
            }
            if i == j {
                acc += eps;
            }
            a[i * d + j] = -acc;
            a[j * d + i] = -acc;
        }
    }
    a
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticTask {
    pub d: usize,
    /// Row-major d×d curvature, symmetric negative definite.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: f64,
    pub s_star: Vec<f64>,
    pub r_max: f64,
    pub task_index: usize,
}

impl QuadraticTask {
    /// Builds a task from `A` and `b`, choosing `c` so the maximum equals `r_target`.
    pub fn from_curvature(a: Vec<f64>, b: Vec<f64>, r_target: f64, task_index: usize) -> Result<Self> {
        let d = b.len();
        let a_inv_b = solve_neg_def(&a, &b)?;
        let quad: f64 = b.iter().zip(&a_inv_b).map(|(x, y)| x * y).sum();
        let c = r_target + 0.25 * quad;
        Self::from_parts_with_solution(d, a, b, c, a_inv_b, task_index)
    }

    /// Builds a task from explicit `(A, b, c)`.
    pub fn from_parts(a: Vec<f64>, b: Vec<f64>, c: f64, task_index: usize) -> Result<Self> {
        let d = b.len();
        let a_inv_b = solve_neg_def(&a, &b)?;
        Self::from_parts_with_solution(d, a, b, c, a_inv_b, task_index)
    }

    fn from_parts_with_solution(
        d: usize,
        a: Vec<f64>,
        b: Vec<f64>,
        c: f64,
        a_inv_b: Vec<f64>,
        task_index: usize,
    ) -> Result<Self> {
        let quad: f64 = b.iter().zip(&a_inv_b).map(|(x, y)| x * y).sum();
        let s_star = a_inv_b.iter().map(|x| -0.5 * x).collect();
        let r_max = c - 0.25 * quad;
        Ok(Self { d, a, b, c, s_star, r_max, task_index })
    }

    pub fn reward(&self, s: &[f64]) -> Result<f64> {
        if s.len() != self.d {
            return Err(Error::invalid(format!("state has dimension {}, task has {}", s.len(), self.d)));
        }
        Ok(self.reward_unchecked(s))
    }

    pub(crate) fn reward_unchecked(&self, s: &[f64]) -> f64 {
        let d = self.d;
        let mut quad = 0.0;
        for i in 0..d {
            let row = &self.a[i * d..(i + 1) * d];
            let ax: f64 = row.iter().zip(s).map(|(x, y)| x * y).sum();
            quad += s[i] * ax;
        }
        let lin: f64 = self.b.iter().zip(s).map(|(x, y)| x * y).sum();
        quad + lin + self.c
    }

    /// Closed-form greedy controller: move toward the optimum as far as the action bound allows.
    pub fn greedy_action(&self, s: &[f64]) -> Vec<f64> {
        self.s_star.iter().zip(s).map(|(t, x)| (t - x).clamp(-1.0, 1.0)).collect()
    }
}

/// Solves `A x = b` for negative-definite `A` via a Cholesky factorization of `-A`.
fn solve_neg_def(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let d = b.len();
    if d == 0 || a.len() != d * d {
        return Err(Error::invalid(format!("curvature has {} entries, expected {}", a.len(), d * d)));
    }
    let neg = DMatrix::from_row_slice(d, d, a).map(|x| -x);
    let chol = neg
        .cholesky()
        .ok_or_else(|| Error::invalid("curvature matrix is not negative definite"))?;
    let x = chol.solve(&DVector::from_column_slice(b));
    Ok(x.iter().map(|v| -v).collect())
}

pub fn make_task<R: Rng + ?Sized>(rng: &mut R, d: usize, r_target: f64, task_index: usize) -> Result<QuadraticTask> {
    let a = sample_neg_def(rng, d, DEFAULT_EPS)?;
    let b = rng::normal_vec(rng, d);
    QuadraticTask::from_curvature(a, b, r_target, task_index)
        .map_err(|e| Error::Internal(format!("task construction failed: {e}")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSet {
    pub seed: u64,
    pub d: usize,
    pub r_target: f64,
    pub tasks: Vec<QuadraticTask>,
}

impl TaskSet {
    pub fn generate(seed: u64, d: usize, k: usize, r_target: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("a task set needs at least one task"));
        }
        let mut rng = rng::stream_rng(seed, stream::TASKS);
        let tasks = (0..k)
            .map(|i| make_task(&mut rng, d, r_target, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { seed, d, r_target, tasks })
    }

    pub fn k(&self) -> usize {
        self.tasks.len()
    }

    pub fn task(&self, index: usize) -> Result<&QuadraticTask> {
        self.tasks
            .get(index)
            .ok_or_else(|| Error::OutOfRange(format!("task {index} of {}", self.tasks.len())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&TaskSetDoc::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TaskSetDoc = serde_json::from_str(text)?;
        doc.try_into()
    }
}

#[derive(Serialize, Deserialize)]
struct TaskDoc {
    #[serde(rename = "A")]
    a: Vec<f64>,
    b: Vec<f64>,
    c: f64,
}

#[derive(Serialize, Deserialize)]
struct TaskSetDoc {
    seed: u64,
    d: usize,
    #[serde(rename = "K")]
    k: usize,
    r_target: f64,
    tasks: Vec<TaskDoc>,
}

impl From<&TaskSet> for TaskSetDoc {
    fn from(ts: &TaskSet) -> Self {
        TaskSetDoc {
            seed: ts.seed,
            d: ts.d,
            k: ts.k(),
            r_target: ts.r_target,
            tasks: ts
                .tasks
                .iter()
                .map(|t| TaskDoc { a: t.a.clone(), b: t.b.clone(), c: t.c })
                .collect(),
        }
    }
}

impl TryFrom<TaskSetDoc> for TaskSet {
    type Error = Error;

    fn try_from(doc: TaskSetDoc) -> Result<Self> {
        if doc.tasks.len() != doc.k {
            return Err(Error::invalid(format!("K = {} but {} tasks listed", doc.k, doc.tasks.len())));
        }
        let tasks = doc
            .tasks
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                if t.b.len() != doc.d {
                    return Err(Error::invalid(format!("task {i} has dimension {}", t.b.len())));
                }
                QuadraticTask::from_parts(t.a, t.b, t.c, i)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TaskSet { seed: doc.seed, d: doc.d, r_target: doc.r_target, tasks })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub task_index: usize,
    pub s_obs: Vec<f64>,
    pub step_count: usize,
    pub episode_length: usize,
}

impl EnvState {
    pub fn is_done(&self) -> bool {
        self.step_count >= self.episode_length
    }
}

/// Starts an episode with `s ~ U(-1, 1)^d`.
pub fn reset<R: Rng + ?Sized>(task: &QuadraticTask, episode_length: usize, rng: &mut R) -> EnvState {
    EnvState {
        task_index: task.task_index,
        s_obs: rng::uniform_vec(rng, task.d, -1.0, 1.0),
        step_count: 0,
        episode_length,
    }
}

/// Applies the clamped action and scores the resulting state.
pub fn step(state: &EnvState, action: &[f64], tasks: &TaskSet) -> Result<(EnvState, f64, bool)> {
    let task = tasks.task(state.task_index)?;
    if action.len() != task.d || state.s_obs.len() != task.d {
        return Err(Error::invalid(format!(
            "action has dimension {}, environment has {}",
            action.len(),
            task.d
        )));
    }
    if state.is_done() {
        return Err(Error::InvalidState("episode already finished".into()));
    }
    let s_obs: Vec<f64> = state
        .s_obs
        .iter()
        .zip(action)
        .map(|(s, a)| s + a.clamp(-1.0, 1.0))
        .collect();
    let r = task.reward_unchecked(&s_obs);
    let step_count = state.step_count + 1;
    let done = step_count == state.episode_length;
    Ok((
        EnvState { task_index: state.task_index, s_obs, step_count, episode_length: state.episode_length },
        r,
        done,
    ))
}

/// Active task for a step.
///
/// CL holds each task for `t_per_task` consecutive steps and never returns.
/// MTL draws uniformly per episode; the draw is a pure function of
/// `(schedule_seed, episode_index)`, so it is constant within an episode.
pub fn schedule_task(
    regime: Regime,
    k: usize,
    t_per_task: usize,
    global_step: u64,
    episode_index: u64,
    fixed_task: Option<usize>,
    schedule_seed: u64,
) -> Result<usize> {
    match regime {
        Regime::Continual => {
            if t_per_task == 0 {
                return Err(Error::invalid("steps per task must be positive"));
            }
            let idx = (global_step / t_per_task as u64) as usize;
            if idx >= k {
                return Err(Error::OutOfRange(format!(
                    "step {global_step} is past the end of a {k}-task schedule of {t_per_task} steps each"
                )));
            }
            Ok(idx)
        }
        Regime::MultiTask => {
            if k == 0 {
                return Err(Error::invalid("no tasks to schedule"));
            }
            let mut rng = rng::seeded(rng::derive_seed(schedule_seed, episode_index));
            Ok(rng.random_range(0..k))
        }
        Regime::Independent => {
            let t = fixed_task.ok_or_else(|| Error::invalid("independent regime needs a fixed task"))?;
            if t >= k {
                return Err(Error::OutOfRange(format!("task {t} of {k}")));
            }
            Ok(t)
        }
    }
}
