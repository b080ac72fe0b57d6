//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every training step builds a fresh [`Tape`]: parameters enter as tracked
//! leaves or as untracked constants (that choice is what implements the
//! critic/encoder detachment contracts), ops compute values eagerly, and
//! [`Tape::backward`] walks the tape once to produce gradients. All values
//! are `f64`; network sizes here are small enough that double precision is
//! cheap, and it lets the finite-difference checks run against the exact
//! arithmetic used in training.

mod conv;
mod ops;
mod tape;

pub use conv::{Conv2dSpec, ConvT2dSpec};
pub use tape::{Grads, NodeId, Tape};

use ndarray::ArrayD;

/// Central finite-difference gradient of `eval` at `at`, one entry at a time.
///
/// This is forward-evaluation only and shares nothing with the reverse-mode
/// path, so it serves as an independent oracle for gradient checks.
pub fn numeric_grad<F>(mut eval: F, at: &ArrayD<f64>, h: f64) -> ArrayD<f64>
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let mut grad = ArrayD::zeros(at.raw_dim());
    let mut probe = at.clone();
    for idx in 0..at.len() {
        grad.as_slice_mut().unwrap()[idx] = numeric_grad_entry(&mut eval, &mut probe, idx, h);
    }
    grad
}

/// Central finite difference for a single flat entry of `probe`.
///
/// `probe` is restored to its original contents before returning.
pub fn numeric_grad_entry<F>(eval: &mut F, probe: &mut ArrayD<f64>, idx: usize, h: f64) -> f64
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let orig = probe.as_slice().unwrap()[idx];
    let step = h * orig.abs().max(1.0);
    probe.as_slice_mut().unwrap()[idx] = orig + step;
    let plus = eval(probe);
    probe.as_slice_mut().unwrap()[idx] = orig - step;
    let minus = eval(probe);
    probe.as_slice_mut().unwrap()[idx] = orig;
    (plus - minus) / (2.0 * step)
}
