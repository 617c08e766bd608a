//! Analytic gradients against central finite differences.

mod common;

use common::gradcheck::{self, Outcome, PROBES, TOL};

fn assert_all(outcomes: Vec<Outcome>) {
    assert!(!outcomes.is_empty());
    for (name, worst) in outcomes {
        eprintln!("{name}: worst relative error {worst:.2e} over {PROBES} probes");
        assert!(worst < TOL, "{name}: relative error {worst:.3e}");
    }
}

#[test]
fn mlp_gradients() {
    assert_all(gradcheck::mlp_gradients());
}

#[test]
fn gru_gradients_eight_steps() {
    assert_all(gradcheck::gru_gradients_eight_steps());
}

#[test]
fn transformer_gradients_one_layer() {
    assert_all(gradcheck::transformer_gradients_one_layer());
}

#[test]
fn squashed_gaussian_log_prob_gradients() {
    assert_all(gradcheck::squashed_gaussian_log_prob_gradients());
}

#[test]
fn critic_loss_gradients() {
    assert_all(gradcheck::critic_loss_gradients());
}

#[test]
fn actor_loss_gradients() {
    assert_all(gradcheck::actor_loss_gradients());
}

#[test]
fn alpha_loss_gradients() {
    assert_all(gradcheck::alpha_loss_gradients());
}
