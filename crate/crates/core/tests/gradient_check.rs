//! Central finite differences against the reverse-mode gradients.

mod common;

use common::fd_worst_error;
use multiesn::bptt::Mode;

#[test]
fn training_mode_gradients_match_finite_differences() {
    for seed in 1..=5 {
        let e = fd_worst_error(seed, Mode::Train);
        assert!(e < 1e-4, "seed {seed}: relative error {e:e}");
    }
}

#[test]
fn eval_mode_gradients_match_finite_differences() {
    let e = fd_worst_error(9, Mode::Eval);
    assert!(e < 1e-4, "relative error {e:e}");
}
