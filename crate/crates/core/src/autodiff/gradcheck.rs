//! Central finite-difference verification of tape gradients at 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// max |analytic - numeric| / max(|numeric|, 1e-8) over every entry.
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst entry.
    pub worst: (usize, usize),
    pub entries: usize,
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences of step `eps` for every entry of every input.
pub fn check_gradients<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_with_bias(f, inputs, eps, 0.0)
}

/// Same as [`check_gradients`] but adds `bias` to every analytic entry first.
/// Used to prove the checker notices a broken backward pass.
pub(crate) fn check_with_bias<F>(f: F, inputs: &[Tensor<f64>], eps: f64, bias: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad(v)).collect();

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        entries: 0,
    };
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i].data()[j] + bias;
            let err = (a - numeric).abs() / numeric.abs().max(1e-8);
            if !err.is_finite() {
                return Err(Error::NonFinite(format!("gradient entry ({i}, {j})")));
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
            report.entries += 1;
        }
    }
    Ok(report)
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar output, got {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Reduces any node to a scalar through a fixed random projection, so a
/// gradient check exercises every output entry with a distinct weight.
///
/// The projection is averaged rather than summed. The check's 1e-8 floor is
/// absolute, and a mean keeps the objective (and hence the rounding noise of
/// the difference quotient) small next to it.
pub fn random_projection(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(y).shape().to_vec();
    let r = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    Ok(tape.mean(p))
}
