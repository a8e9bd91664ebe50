//! Loss assembly, Adam, and the training loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint;
use crate::data::SignalChunk;
use crate::error::{dim_err, Error, Result};
use crate::eval::{evaluate, EvalAggregate};
use crate::network::Model;
use crate::params::ParamStore;
use crate::spectral::{LossConfig, SpectralLoss};
use crate::tensor::{Real, Tensor};

/// Which terms the objective contains.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossVariant {
    /// Temporal L1 only.
    Temporal,
    /// Temporal L1 plus a spectral term at one window length.
    SingleWindow { window: usize },
    /// Temporal L1 plus the spectral term averaged over `LossConfig::windows`.
    #[default]
    MultiResolution,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_interval: usize,
    pub loss: LossVariant,
    /// Weight, windows and norm of the spectral term.
    pub spectral: LossConfig,
    /// Rescale the batch gradient to at most this global L2 norm.
    pub clip_grad_norm: Option<f64>,
    /// Compute the samples of a batch on the rayon pool.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            batch_size: 256,
            adam: AdamConfig::default(),
            seed: 0,
            checkpoint_interval: 100,
            loss: LossVariant::MultiResolution,
            spectral: LossConfig::default(),
            clip_grad_norm: None,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self::default()
    }

    /// Laptop-scale overfit settings: 8-chunk batches, 500 epochs, lr 1e-3.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 8,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            checkpoint_interval: 100,
            ..Self::default()
        }
    }

    /// Spectral settings with the variant's window list applied.
    pub fn effective_spectral(&self) -> LossConfig {
        let mut cfg = self.spectral.clone();
        if let LossVariant::SingleWindow { window } = self.loss {
            cfg.windows = vec![window];
        }
        cfg
    }

    pub fn validate(&self, signal_len: usize) -> Result<()> {
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::config("adam.lr", format!("{} must be > 0", self.adam.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        for (name, b) in [("adam.beta1", self.adam.beta1), ("adam.beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(name, format!("{b} outside [0, 1)")));
            }
        }
        if !(self.adam.eps > 0.0) {
            return Err(Error::config("adam.eps", "must be > 0"));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config("clip_grad_norm", format!("{c} must be > 0")));
            }
        }
        if self.loss != LossVariant::Temporal {
            self.effective_spectral().validate(signal_len)?;
        }
        Ok(())
    }
}

/// Mean absolute difference of two sequences.
pub fn temporal_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(dim_err!(
            "temporal loss: lengths {} and {}",
            pred.len(),
            target.len()
        ));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Values of the loss terms of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub temporal: f64,
    /// Unweighted spectral term; absent for the temporal-only variant.
    pub spectral: Option<f64>,
}

/// The training objective `L_T + alpha * L_S` built on a tape.
#[derive(Debug)]
pub struct Objective<T> {
    alpha: f64,
    spectral: Option<SpectralLoss<T>>,
}

impl<T: Real> Objective<T> {
    pub fn new(cfg: &TrainConfig, signal_len: usize) -> Result<Self> {
        cfg.validate(signal_len)?;
        let spec = cfg.effective_spectral();
        let spectral = match cfg.loss {
            LossVariant::Temporal => None,
            _ => Some(SpectralLoss::new(&spec, signal_len)?),
        };
        Ok(Objective {
            alpha: spec.alpha,
            spectral,
        })
    }

    /// How many STFTs the spectral term has evaluated.
    pub fn stft_evaluations(&self) -> u64 {
        self.spectral.as_ref().map_or(0, |s| s.stft_evaluations())
    }

    /// Returns `(total, temporal, spectral)` nodes.
    pub fn apply(&self, tape: &mut Tape<T>, pred: Var, target: Var) -> Result<(Var, Var, Option<Var>)> {
        if tape.value(pred).shape() != tape.value(target).shape() {
            return Err(dim_err!(
                "loss: prediction {:?} vs target {:?}",
                tape.value(pred).shape(),
                tape.value(target).shape()
            ));
        }
        let d = tape.sub(pred, target)?;
        let a = tape.abs(d);
        let lt = tape.mean(a);
        match &self.spectral {
            Some(s) => {
                let ls = s.apply(tape, pred, target)?;
                let w = tape.scale(ls, self.alpha);
                Ok((tape.add(lt, w)?, lt, Some(ls)))
            }
            None => Ok((lt, lt, None)),
        }
    }

    /// Evaluates the objective on plain slices.
    pub fn evaluate(&self, pred: &[T], target: &[T]) -> Result<LossParts> {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::column(pred));
        let t = tape.constant(Tensor::column(target));
        let (total, lt, ls) = self.apply(&mut tape, p, t)?;
        Ok(LossParts {
            total: tape.value(total).item().as_f64(),
            temporal: tape.value(lt).item().as_f64(),
            spectral: ls.map(|v| tape.value(v).item().as_f64()),
        })
    }
}

/// `L_T + alpha * L_S` for the configured variant, at 64-bit.
pub fn total_loss(pred: &[f64], target: &[f64], cfg: &TrainConfig) -> Result<LossParts> {
    Objective::<f64>::new(cfg, pred.len())?.evaluate(pred, target)
}

/// One Adam update with bias correction at step `t` (1-based). Nothing is
/// modified when any gradient entry is non-finite.
pub fn adam_step(params: &mut ParamStore<f32>, grads: &[Tensor<f32>], t: u64, cfg: &AdamConfig) -> Result<()> {
    if t == 0 {
        return Err(Error::Contract("adam step index starts at 1".into()));
    }
    if grads.len() != params.len() {
        return Err(dim_err!("{} gradients for {} parameters", grads.len(), params.len()));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(dim_err!("{}: gradient shape {:?} vs {:?}", p.name, g.shape(), p.value.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for (p, g) in params.iter_mut().zip(grads) {
        let value = p.value.data_mut();
        let m = p.adam_m.data_mut();
        let v = p.adam_v.data_mut();
        for i in 0..value.len() {
            let gi = g.data()[i] as f64;
            let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let step = cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            value[i] = (value[i] as f64 - step) as f32;
        }
    }
    Ok(())
}

/// Loss and parameter gradients of one chunk.
pub fn sample_gradients(model: &Model, objective: &Objective<f32>, chunk: &SignalChunk) -> Result<(LossParts, Vec<Tensor<f32>>)> {
    let target = chunk
        .ecg
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("{}@{}: training chunk without ECG", chunk.source, chunk.offset)))?;
    let mut tape = Tape::new();
    let pv = model.params().bind(&mut tape);
    let x = tape.constant(Tensor::column(&chunk.radar));
    let y = tape.constant(Tensor::column(target));
    let pred = model.network().forward(&mut tape, &pv, x)?;
    let (total, lt, ls) = objective.apply(&mut tape, pred, y)?;
    let parts = LossParts {
        total: tape.value(total).item() as f64,
        temporal: tape.value(lt).item() as f64,
        spectral: ls.map(|v| tape.value(v).item() as f64),
    };
    if !parts.total.is_finite() {
        return Err(Error::NonFinite(format!("loss on {}@{}", chunk.source, chunk.offset)));
    }
    tape.backward(total)?;
    Ok((parts, pv.iter().map(|&v| tape.grad(v)).collect()))
}

/// Mean loss and mean gradient over a batch, reduced in batch order.
pub fn batch_gradients(
    model: &Model,
    objective: &Objective<f32>,
    batch: &[&SignalChunk],
    parallel: bool,
) -> Result<(LossParts, Vec<Tensor<f32>>)> {
    let results: Vec<(LossParts, Vec<Tensor<f32>>)> = if parallel {
        batch
            .par_iter()
            .map(|c| sample_gradients(model, objective, c))
            .collect::<Result<_>>()?
    } else {
        batch
            .iter()
            .map(|c| sample_gradients(model, objective, c))
            .collect::<Result<_>>()?
    };
    let n = results.len() as f64;
    let mut it = results.into_iter();
    let (first_parts, mut grads) = it.next().ok_or_else(|| Error::Contract("empty batch".into()))?;
    let mut parts = first_parts;
    for (p, g) in it {
        parts.total += p.total;
        parts.temporal += p.temporal;
        parts.spectral = parts.spectral.zip(p.spectral).map(|(a, b)| a + b);
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.add_assign(gi);
        }
    }
    parts.total /= n;
    parts.temporal /= n;
    parts.spectral = parts.spectral.map(|s| s / n);
    let inv = (1.0 / n) as f32;
    for g in &mut grads {
        *g = g.map(|v| v * inv);
    }
    Ok((parts, grads))
}

fn clip(grads: &mut [Tensor<f32>], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            *g = g.map(|v| v * s);
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub loss: f64,
    pub temporal: f64,
    pub spectral: Option<f64>,
    pub wall_s: f64,
    /// Held-out metrics, present on checkpoint epochs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalAggregate>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub checkpoints: Vec<PathBuf>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.json";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.json";

/// Where a run writes its log and checkpoints.
struct Sink {
    dir: PathBuf,
    log: BufWriter<File>,
}

impl Sink {
    fn open(dir: &Path) -> Result<Self> {
        let ckpt = dir.join(CHECKPOINT_DIR);
        fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
        let path = dir.join(LOG_FILE);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Sink {
            dir: dir.to_path_buf(),
            log: BufWriter::new(file),
        })
    }

    fn record(&mut self, rec: &EpochRecord) -> Result<()> {
        let line = serde_json::to_string(rec)?;
        let path = self.dir.join(LOG_FILE);
        writeln!(self.log, "{line}").and_then(|_| self.log.flush()).map_err(|e| Error::io(path, e))
    }

    fn checkpoint(&self, model: &Model, name: &str) -> Result<PathBuf> {
        let path = self.dir.join(CHECKPOINT_DIR).join(name);
        checkpoint::save(&path, model)?;
        Ok(path)
    }
}

fn check_dataset(model: &Model, data: &[SignalChunk]) -> Result<()> {
    let len = model.config().length;
    for c in data {
        if c.radar.len() != len || c.ecg.as_ref().is_some_and(|e| e.len() != len) {
            return Err(dim_err!(
                "{}@{}: chunk length {} but the model expects {len}",
                c.source,
                c.offset,
                c.radar.len()
            ));
        }
        if c.ecg.is_none() {
            return Err(Error::Contract(format!("{}@{}: training chunk without ECG", c.source, c.offset)));
        }
    }
    Ok(())
}

/// Per-epoch visiting order of the training chunks.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Trains `model` in place. With `out_dir`, a JSON-lines log and checkpoints
/// are written there; the final checkpoint is always written. A non-finite
/// loss or gradient stops the run, saves the untouched model as
/// `last_good.json` and returns [`Error::NonFinite`].
pub fn train(
    model: &mut Model,
    data: &[SignalChunk],
    holdout: &[SignalChunk],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainLog> {
    let objective = Objective::<f32>::new(cfg, model.config().length)?;
    train_with(model, data, holdout, cfg, &objective, out_dir)
}

/// [`train`] with a caller-owned objective, so its counters can be inspected.
pub fn train_with(
    model: &mut Model,
    data: &[SignalChunk],
    holdout: &[SignalChunk],
    cfg: &TrainConfig,
    objective: &Objective<f32>,
    out_dir: Option<&Path>,
) -> Result<TrainLog> {
    cfg.validate(model.config().length)?;
    if data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    check_dataset(model, data)?;
    let mut sink = out_dir.map(Sink::open).transpose()?;
    let mut log = TrainLog::default();
    let start = Instant::now();

    for epoch in 1..=cfg.epochs {
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let (mut total, mut temporal, mut spectral, mut batches) = (0.0, 0.0, None::<f64>, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&SignalChunk> = idx.iter().map(|&i| &data[i]).collect();
            let step = batch_gradients(model, objective, &batch, cfg.parallel).and_then(|(parts, mut grads)| {
                if let Some(c) = cfg.clip_grad_norm {
                    clip(&mut grads, c);
                }
                let t = model.step() + 1;
                adam_step(model.params_mut(), &grads, t, &cfg.adam)?;
                Ok(parts)
            });
            let parts = match step {
                Ok(p) => p,
                Err(Error::NonFinite(what)) => {
                    log::error!("epoch {epoch}: non-finite {what}; aborting");
                    if let Some(s) = &sink {
                        log.checkpoints.push(s.checkpoint(model, LAST_GOOD_CHECKPOINT)?);
                    }
                    return Err(Error::NonFinite(format!("{what} at epoch {epoch}")));
                }
                Err(e) => return Err(e),
            };
            model.set_step(model.step() + 1);
            total += parts.total;
            temporal += parts.temporal;
            spectral = parts.spectral.map(|s| spectral.unwrap_or(0.0) + s);
            batches += 1;
        }
        let n = batches as f64;
        let checkpoint_due = cfg.checkpoint_interval > 0 && epoch % cfg.checkpoint_interval == 0;
        let eval = if checkpoint_due && !holdout.is_empty() {
            Some(evaluate(model, holdout)?.aggregate)
        } else {
            None
        };
        let rec = EpochRecord {
            epoch,
            step: model.step(),
            loss: total / n,
            temporal: temporal / n,
            spectral: spectral.map(|s| s / n),
            wall_s: start.elapsed().as_secs_f64(),
            eval,
        };
        log::debug!("epoch {epoch}: loss {:.6}", rec.loss);
        if let Some(s) = &mut sink {
            s.record(&rec)?;
            if checkpoint_due && epoch != cfg.epochs {
                log.checkpoints.push(s.checkpoint(model, &format!("epoch_{epoch:05}.json"))?);
            }
        }
        log.epochs.push(rec);
    }
    if let Some(s) = &sink {
        log.checkpoints.push(s.checkpoint(model, FINAL_CHECKPOINT)?);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temporal_examples() {
        let t = [0.1, -0.4, 0.9];
        assert_eq!(temporal_loss(&t, &t).unwrap(), 0.0);
        let p: Vec<f64> = t.iter().map(|v| v + 0.5).collect();
        assert!((temporal_loss(&p, &t).unwrap() - 0.5).abs() < 1e-12);
        assert!(temporal_loss(&t[..2], &t).is_err());
    }

    #[test]
    fn adam_first_step() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[3])).unwrap();
        let cfg = AdamConfig::default();
        adam_step(&mut store, &[Tensor::zeros(&[3])], 1, &cfg).unwrap();
        assert!(store.get(0).value.data().iter().all(|&v| v == 0.0));
        adam_step(&mut store, &[Tensor::ones(&[3])], 1, &cfg).unwrap();
        let d = store.get(0).value.data()[0] as f64;
        assert!((d + 1e-4).abs() < 1e-9, "{d}");
    }

    #[test]
    fn non_finite_gradient_leaves_params() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::ones(&[2])).unwrap();
        let g = Tensor::new(vec![2], vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(
            adam_step(&mut store, &[g], 1, &AdamConfig::default()),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(store.get(0).value.data(), &[1.0, 1.0]);
        assert_eq!(store.get(0).adam_m.data(), &[0.0, 0.0]);
    }
}
