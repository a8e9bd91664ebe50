//! Lifting (analysis) and inverse lifting (synthesis) units.
//!
//! Analysis: split into `(f_e, f_o)`, then `f_d = f_e - P(f_o)` and
//! `f_a = f_o + U(f_d)`. Synthesis undoes the two steps in reverse order,
//! `g_o = g_a - U(g_d)` and `g_e = g_d + P(g_o)`, then merges `(g_o, g_e)`.
//! With the same `P`, `U` on both sides the pair is exactly invertible no
//! matter what `P` and `U` compute.

use rand::Rng;

use super::block::{ConvParams, PredictUpdateBlock};
use super::config::{ModelConfig, SplitInit};
use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Kernel size of the fixed polyphase split/merge.
const FIXED_KERNEL: usize = 3;

/// `[2C, C, k]` strided-conv kernel whose first `C` outputs are the
/// even-indexed samples and last `C` the odd-indexed samples.
pub fn polyphase_split_kernel<T: Real>(channels: usize, k: usize) -> Tensor<T> {
    let p = (k - 1) / 2;
    let mut w = Tensor::zeros(&[2 * channels, channels, k]);
    let d = w.data_mut();
    for c in 0..channels {
        d[(c * channels + c) * k + p] = T::one();
        d[((channels + c) * channels + c) * k + p + 1] = T::one();
    }
    w
}

/// `[2C, C, k]` strided-deconv kernel taking channels `(g_o, g_e)` and
/// interleaving them back with `g_e` on even and `g_o` on odd positions.
/// Exact inverse of [`polyphase_split_kernel`] after the channel swap the
/// synthesis concatenation performs.
pub fn polyphase_merge_kernel<T: Real>(channels: usize, k: usize) -> Tensor<T> {
    let p = (k - 1) / 2;
    let mut w = Tensor::zeros(&[2 * channels, channels, k]);
    let d = w.data_mut();
    for c in 0..channels {
        d[((channels + c) * channels + c) * k + p] = T::one();
        d[(c * channels + c) * k + p + 1] = T::one();
    }
    w
}

/// Analysis lifting step on an already split pair. Returns `(f_a, f_d)`.
pub fn lift<T, P, U>(tape: &mut Tape<T>, f_e: Var, f_o: Var, mut predict: P, mut update: U) -> Result<(Var, Var)>
where
    T: Real,
    P: FnMut(&mut Tape<T>, Var) -> Result<Var>,
    U: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    let p = predict(tape, f_o)?;
    let f_d = tape.sub(f_e, p)?;
    let u = update(tape, f_d)?;
    let f_a = tape.add(f_o, u)?;
    Ok((f_a, f_d))
}

/// Synthesis lifting step. Returns `(g_o, g_e)`.
pub fn unlift<T, P, U>(tape: &mut Tape<T>, g_a: Var, g_d: Var, mut predict: P, mut update: U) -> Result<(Var, Var)>
where
    T: Real,
    P: FnMut(&mut Tape<T>, Var) -> Result<Var>,
    U: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    if tape.value(g_a).shape() != tape.value(g_d).shape() {
        return Err(dim_err!(
            "approximation {:?} and detail {:?} differ in shape",
            tape.value(g_a).shape(),
            tape.value(g_d).shape()
        ));
    }
    let u = update(tape, g_d)?;
    let g_o = tape.sub(g_a, u)?;
    let p = predict(tape, g_o)?;
    let g_e = tape.add(g_d, p)?;
    Ok((g_o, g_e))
}

#[derive(Clone, Copy, Debug)]
pub enum Resampling {
    Learnable(ConvParams),
    Polyphase,
}

#[derive(Clone, Debug)]
pub struct LiftingUnit {
    pub split: Resampling,
    pub predict: PredictUpdateBlock,
    pub update: PredictUpdateBlock,
}

#[derive(Clone, Debug)]
pub struct InverseLiftingUnit {
    pub merge: Resampling,
    pub predict: PredictUpdateBlock,
    pub update: PredictUpdateBlock,
}

fn register_resampling<R: Rng>(
    store: &mut ParamStore<f32>,
    name: &str,
    cfg: &ModelConfig,
    rng: &mut R,
    merge: bool,
) -> Result<Resampling> {
    let (c, k) = (cfg.channels, cfg.split_kernel);
    let (weight, fan_in) = match (cfg.split_init, merge) {
        (SplitInit::Polyphase, false) => (polyphase_split_kernel(c, k), 0),
        (SplitInit::Polyphase, true) => (polyphase_merge_kernel(c, k), 0),
        (SplitInit::Uniform, false) => (Tensor::zeros(&[2 * c, c, k]), c * k),
        (SplitInit::Uniform, true) => (Tensor::zeros(&[2 * c, c, k]), 2 * c * k.div_ceil(2)),
    };
    let weight = if fan_in > 0 {
        let bound = 1.0 / (fan_in as f64).sqrt();
        store.add_uniform(format!("{name}.weight"), weight.shape(), bound, rng)?
    } else {
        store.add(format!("{name}.weight"), weight)?
    };
    let bias_len = if merge { c } else { 2 * c };
    let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[bias_len]))?;
    Ok(Resampling::Learnable(ConvParams { weight, bias }))
}

impl LiftingUnit {
    pub fn register<R: Rng>(store: &mut ParamStore<f32>, prefix: &str, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let split = if cfg.learnable_split {
            register_resampling(store, &format!("{prefix}.split"), cfg, rng, false)?
        } else {
            Resampling::Polyphase
        };
        Ok(LiftingUnit {
            split,
            predict: PredictUpdateBlock::register(store, &format!("{prefix}.predict"), cfg, rng)?,
            update: PredictUpdateBlock::register(store, &format!("{prefix}.update"), cfg, rng)?,
        })
    }

    /// Strided split into `[len/2, 2C]` followed by the channel halving.
    pub fn split<T: Real>(&self, tape: &mut Tape<T>, pv: &[Var], f: Var) -> Result<(Var, Var)> {
        let (len, ch) = tape.value(f).seq_dims()?;
        if len % 2 != 0 {
            return Err(dim_err!("lifting unit needs an even length, got {}", len));
        }
        let f1 = match self.split {
            Resampling::Learnable(conv) => conv.apply(tape, pv, f, 2)?,
            Resampling::Polyphase => {
                let w = tape.constant(polyphase_split_kernel(ch, FIXED_KERNEL));
                tape.conv1d(f, w, None, 2)?
            }
        };
        tape.split_halves(f1)
    }

    /// Returns `(f_a, f_d)`, each `[len/2, C]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, pv: &[Var], f: Var) -> Result<(Var, Var)> {
        let (f_e, f_o) = self.split(tape, pv, f)?;
        lift(
            tape,
            f_e,
            f_o,
            |t, x| self.predict.forward(t, pv, x),
            |t, x| self.update.forward(t, pv, x),
        )
    }
}

impl InverseLiftingUnit {
    pub fn register<R: Rng>(store: &mut ParamStore<f32>, prefix: &str, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let merge = if cfg.learnable_merge {
            register_resampling(store, &format!("{prefix}.merge"), cfg, rng, true)?
        } else {
            Resampling::Polyphase
        };
        Ok(InverseLiftingUnit {
            merge,
            predict: PredictUpdateBlock::register(store, &format!("{prefix}.predict"), cfg, rng)?,
            update: PredictUpdateBlock::register(store, &format!("{prefix}.update"), cfg, rng)?,
        })
    }

    /// Synthesis unit that reuses an analysis unit's predict/update blocks.
    pub fn mirror_of(lu: &LiftingUnit, merge: Resampling) -> Self {
        InverseLiftingUnit {
            merge,
            predict: lu.predict.clone(),
            update: lu.update.clone(),
        }
    }

    /// Channel concatenation of `(g_o, g_e)` then the strided merge.
    pub fn merge<T: Real>(&self, tape: &mut Tape<T>, pv: &[Var], g_o: Var, g_e: Var) -> Result<Var> {
        let ch = tape.value(g_o).channels();
        let g1 = tape.concat(&[g_o, g_e])?;
        match self.merge {
            Resampling::Learnable(conv) => {
                tape.conv1d_transposed(g1, pv[conv.weight], Some(pv[conv.bias]), 2)
            }
            Resampling::Polyphase => {
                let w = tape.constant(polyphase_merge_kernel(ch, FIXED_KERNEL));
                tape.conv1d_transposed(g1, w, None, 2)
            }
        }
    }

    /// Returns `g`, `[2 * len, C]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, pv: &[Var], g_a: Var, g_d: Var) -> Result<Var> {
        let (g_o, g_e) = unlift(
            tape,
            g_a,
            g_d,
            |t, x| self.predict.forward(t, pv, x),
            |t, x| self.update.forward(t, pv, x),
        )?;
        self.merge(tape, pv, g_o, g_e)
    }
}
