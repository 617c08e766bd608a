//! Task-agnostic continual reinforcement learning on a synthetic quadratic
//! benchmark.
//!
//! An agent meets a sequence of tasks without being told which one is live
//! or when it changes. The crate provides a small reverse-mode autodiff
//! engine, Soft Actor-Critic with several context signals (none, task
//! one-hot, per-task heads, task-agnostic heads, a GRU or a transformer over
//! recent transitions), replay with a cap on old-task data, the benchmark
//! itself, and the statistics used to compare methods across settings.
//!
//! ```no_run
//! use tacrl::encoders::ContextKind;
//! use tacrl::runner::{train_run, RunConfig};
//!
//! let config = RunConfig { n_tasks: 4, n_dims: 4, context: ContextKind::Rnn, ..RunConfig::default() };
//! let result = train_run(&config)?;
//! println!("final global return {:?}", result.final_record().map(|r| r.global_return));
//! # Ok::<(), tacrl::Error>(())
//! ```

pub mod autodiff;
pub mod cli;
pub mod encoders;
pub mod env;
pub mod error;
pub mod metrics;
pub mod replay;
pub mod rng;
pub mod runner;
pub mod sac;

pub use error::{Error, Result};
