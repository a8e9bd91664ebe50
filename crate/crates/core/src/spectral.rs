//! Short-time Fourier analysis and the multi-resolution spectral loss.
//!
//! The transform is a direct windowed DFT against precomputed basis rows:
//! `X[t, k] = sum_n x[t*hop + n] * w[n] * exp(-2*pi*i*k*n/W)` for
//! `k = 0..=W/2`. Frames never extend past the signal, so a length-`L`
//! signal yields `(L - W) / hop + 1` frames.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{cast, Real, Tensor};

/// Symmetric Hann window `0.5 - 0.5 cos(2 pi n / (W - 1))`.
pub fn hanning(len: usize) -> Result<Vec<f64>> {
    if len < 2 {
        return Err(Error::config("window", format!("length {len} < 2")));
    }
    let denom = (len - 1) as f64;
    Ok((0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / denom).cos())
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    #[default]
    Hann,
    Rectangular,
}

impl WindowKind {
    pub fn weights(self, len: usize) -> Result<Vec<f64>> {
        match self {
            WindowKind::Hann => hanning(len),
            WindowKind::Rectangular => Ok(vec![1.0; len]),
        }
    }
}

/// Precomputed windowed DFT basis for one window length.
#[derive(Debug)]
pub struct StftPlan<T> {
    win: usize,
    hop: usize,
    bins: usize,
    /// `[bins, win]`, window folded in.
    basis_re: Vec<T>,
    /// `[bins, win]`, window and the minus sign folded in.
    basis_im: Vec<T>,
}

impl<T: Real> StftPlan<T> {
    pub fn new(win: usize, hop: usize, window: &[f64]) -> Result<Self> {
        if win < 2 || !win.is_multiple_of(2) {
            return Err(Error::config("window_length", format!("{win} must be even and >= 2")));
        }
        if hop == 0 {
            return Err(Error::config("hop", "must be >= 1"));
        }
        if window.len() != win {
            return Err(dim_err!("window has {} taps, expected {}", window.len(), win));
        }
        let bins = win / 2 + 1;
        let mut basis_re = Vec::with_capacity(bins * win);
        let mut basis_im = Vec::with_capacity(bins * win);
        for k in 0..bins {
            for (n, &w) in window.iter().enumerate() {
                // reduce k*n mod W exactly before forming the angle
                let phase = 2.0 * PI * ((k * n) % win) as f64 / win as f64;
                basis_re.push(cast(w * phase.cos()));
                basis_im.push(cast(-w * phase.sin()));
            }
        }
        Ok(StftPlan {
            win,
            hop,
            bins,
            basis_re,
            basis_im,
        })
    }

    pub fn with_kind(win: usize, hop: usize, kind: WindowKind) -> Result<Self> {
        Self::new(win, hop, &kind.weights(win)?)
    }

    pub fn window_len(&self) -> usize {
        self.win
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self, len: usize) -> usize {
        if len < self.win {
            0
        } else {
            (len - self.win) / self.hop + 1
        }
    }

    /// `[frames, bins, 2]` spectrogram of `x`.
    pub fn forward(&self, x: &[T]) -> Result<Tensor<T>> {
        if x.len() < self.win {
            return Err(Error::config(
                "window_length",
                format!("window {} longer than signal {}", self.win, x.len()),
            ));
        }
        let frames = self.frames(x.len());
        let mut out = vec![T::zero(); frames * self.bins * 2];
        for t in 0..frames {
            let seg = &x[t * self.hop..t * self.hop + self.win];
            for k in 0..self.bins {
                let re_row = &self.basis_re[k * self.win..(k + 1) * self.win];
                let im_row = &self.basis_im[k * self.win..(k + 1) * self.win];
                let mut re = T::zero();
                let mut im = T::zero();
                for n in 0..self.win {
                    re += seg[n] * re_row[n];
                    im += seg[n] * im_row[n];
                }
                let o = (t * self.bins + k) * 2;
                out[o] = re;
                out[o + 1] = im;
            }
        }
        Tensor::new(vec![frames, self.bins, 2], out)
    }

    /// Adjoint of [`StftPlan::forward`] applied to `grad` (`[frames, bins, 2]`).
    pub fn backward(&self, len: usize, grad: &[T]) -> Vec<T> {
        let frames = self.frames(len);
        let mut dx = vec![T::zero(); len];
        for t in 0..frames {
            let seg = &mut dx[t * self.hop..t * self.hop + self.win];
            for k in 0..self.bins {
                let o = (t * self.bins + k) * 2;
                let (gr, gi) = (grad[o], grad[o + 1]);
                let re_row = &self.basis_re[k * self.win..(k + 1) * self.win];
                let im_row = &self.basis_im[k * self.win..(k + 1) * self.win];
                for n in 0..self.win {
                    seg[n] += gr * re_row[n] + gi * im_row[n];
                }
            }
        }
        dx
    }
}

/// How the difference of two complex spectrograms is reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralNorm {
    /// Mean over entries of `|Re d| + |Im d|`.
    #[default]
    ComplexL1,
    /// Mean over entries of `||P| - |T||`.
    MagnitudeL1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub windows: Vec<usize>,
    pub hop_divisor: usize,
    pub window: WindowKind,
    pub norm: SpectralNorm,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.1,
            windows: vec![800, 400, 200],
            hop_divisor: 4,
            window: WindowKind::Hann,
            norm: SpectralNorm::ComplexL1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, signal_len: usize) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", "must be finite and >= 0"));
        }
        if self.hop_divisor == 0 {
            return Err(Error::config("hop_divisor", "must be >= 1"));
        }
        if self.windows.is_empty() {
            return Err(Error::config("windows", "at least one window length is required"));
        }
        for &w in &self.windows {
            if w < 2 || w % 2 != 0 {
                return Err(Error::config("windows", format!("{w} must be even and >= 2")));
            }
            if w > signal_len {
                return Err(Error::config(
                    "windows",
                    format!("{w} exceeds signal length {signal_len}"),
                ));
            }
            if w / self.hop_divisor == 0 {
                return Err(Error::config("hop_divisor", format!("hop for window {w} is zero")));
            }
        }
        Ok(())
    }

    pub fn hop_for(&self, win: usize) -> usize {
        win / self.hop_divisor
    }
}

/// Multi-resolution spectral loss: the average over window lengths of the
/// spectrogram distance between prediction and target.
#[derive(Debug)]
pub struct SpectralLoss<T> {
    plans: Vec<Arc<StftPlan<T>>>,
    norm: SpectralNorm,
    evaluations: AtomicU64,
}

impl<T: Real> SpectralLoss<T> {
    pub fn new(cfg: &LossConfig, signal_len: usize) -> Result<Self> {
        cfg.validate(signal_len)?;
        let plans = cfg
            .windows
            .iter()
            .map(|&w| StftPlan::with_kind(w, cfg.hop_for(w), cfg.window).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        Ok(SpectralLoss {
            plans,
            norm: cfg.norm,
            evaluations: AtomicU64::new(0),
        })
    }

    pub fn plans(&self) -> &[Arc<StftPlan<T>>] {
        &self.plans
    }

    /// Number of STFTs this loss has computed so far.
    pub fn stft_evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    /// `pred` carries gradient; `target` is treated as a constant.
    pub fn apply(&self, tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
        let (lp, cp) = tape.value(pred).seq_dims()?;
        let (lt, ct) = tape.value(target).seq_dims()?;
        if lp != lt || cp != 1 || ct != 1 {
            return Err(dim_err!(
                "spectral loss needs matching [L, 1] signals, got [{lp}, {cp}] and [{lt}, {ct}]"
            ));
        }
        let mut terms = Vec::with_capacity(self.plans.len());
        for plan in &self.plans {
            let sp = tape.stft(pred, plan.clone())?;
            let target_spec = plan.forward(tape.value(target).data())?;
            let st = tape.constant(target_spec);
            self.evaluations.fetch_add(2, Ordering::Relaxed);
            let count = (plan.frames(lp) * plan.bins()) as f64;
            let diff = match self.norm {
                SpectralNorm::ComplexL1 => tape.sub(sp, st)?,
                SpectralNorm::MagnitudeL1 => {
                    let mp = tape.complex_abs(sp)?;
                    let mt = tape.complex_abs(st)?;
                    tape.sub(mp, mt)?
                }
            };
            let a = tape.abs(diff);
            let s = tape.sum(a);
            terms.push(tape.scale(s, 1.0 / count));
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t)?;
        }
        Ok(tape.scale(acc, 1.0 / terms.len() as f64))
    }
}

/// Magnitude spectrogram `[frames][bins]` of a plain signal.
pub fn magnitude_spectrogram(x: &[f64], win: usize, hop: usize, kind: WindowKind) -> Result<Vec<Vec<f64>>> {
    let plan = StftPlan::<f64>::with_kind(win, hop, kind)?;
    let spec = plan.forward(x)?;
    let bins = plan.bins();
    Ok(spec
        .data()
        .chunks(bins * 2)
        .map(|frame| frame.chunks(2).map(|z| z[0].hypot(z[1])).collect())
        .collect())
}

/// Writes a spectrogram as tab-separated text, one frame per line.
pub fn write_magnitude_matrix<W: Write>(out: &mut W, mags: &[Vec<f64>]) -> std::io::Result<()> {
    for row in mags {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.6e}")).collect();
        writeln!(out, "{}", line.join("\t"))?;
    }
    Ok(())
}
