//! Training-loop invariants on short runs.

use proptest::prelude::*;
use tacrl::encoders::{ContextKind, EncoderConfig};
use tacrl::env::Regime;
use tacrl::runner::{train_run, ReplayMode, RunConfig};
use tacrl::sac::SacConfig;

fn small(kind: ContextKind, mode: Regime, seed: u64) -> RunConfig {
    RunConfig {
        mode,
        n_tasks: 3,
        n_dims: 2,
        t_per_task: 60,
        episode_length: 25,
        context: kind,
        encoder: EncoderConfig { hidden_size: 4, context_size: 3, history_length: 3, ..EncoderConfig::default() },
        hidden: 8,
        sac: SacConfig { batch_size: 8, conflict_every: 10, ..SacConfig::default() },
        warmup_steps: 20,
        burnin_steps: 15,
        eval_every: Some(50),
        seed,
        ..RunConfig::default()
    }
}

const KINDS: [ContextKind; 6] = [
    ContextKind::None,
    ContextKind::TaskId,
    ContextKind::MultiHead,
    ContextKind::TaskAgnosticMultiHead,
    ContextKind::Rnn,
    ContextKind::Transformer,
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn one_update_per_step_after_burn_in(seed in any::<u64>(), k in 0usize..6, mtl in any::<bool>()) {
        let mode = if mtl { Regime::MultiTask } else { Regime::Continual };
        let cfg = small(KINDS[k], mode, seed);
        let r = train_run(&cfg).unwrap();
        prop_assert_eq!(r.env_steps, 180);
        prop_assert_eq!(r.updates, 180 - 15);
        prop_assert_eq!(r.q_series.len() as u64, r.updates);

        let steps: Vec<u64> = r.records.iter().map(|x| x.step).collect();
        prop_assert!(steps.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(*steps.last().unwrap(), 180);

        if !KINDS[k].is_task_aware() {
            prop_assert_eq!(r.audit_dereferences, 0);
        }
        if mtl {
            prop_assert!(r.rollover_steps.is_empty());
        } else {
            prop_assert_eq!(&r.rollover_steps, &vec![60, 120]);
            let tasks: Vec<usize> = r.task_trace.iter().map(|t| t.1).collect();
            prop_assert_eq!(tasks, vec![0, 1, 2]);
        }
    }
}

#[test]
fn finetune_and_replay_share_the_first_task() {
    let replay = train_run(&small(ContextKind::None, Regime::Continual, 4)).unwrap();
    let finetune = train_run(&RunConfig { replay: ReplayMode::FineTune, ..small(ContextKind::None, Regime::Continual, 4) }).unwrap();
    assert_eq!(replay.records[0], finetune.records[0]);
    assert_ne!(replay.records.last(), finetune.records.last());
}

#[test]
fn repeat_runs_are_identical() {
    for kind in KINDS {
        let cfg = small(kind, Regime::Continual, 11);
        let a = train_run(&cfg).unwrap();
        let b = train_run(&cfg).unwrap();
        assert_eq!(a.to_jsonl("x").unwrap(), b.to_jsonl("x").unwrap());
        assert_eq!(a.agent.to_json().unwrap(), b.agent.to_json().unwrap());
    }
}
