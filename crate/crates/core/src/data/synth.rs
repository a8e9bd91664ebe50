//! Deterministic synthetic radar/ECG pairs.
//!
//! Beat times come from an RR process: every beat draws an instantaneous
//! heart rate from a normal distribution around the mean rate. The ECG is a
//! sum of five Gaussian waves per beat (table [`PQRST`]). The radar signal is
//! a smooth zero-mean displacement pulse per beat, plus a respiration
//! sinusoid and white noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Recording;
use crate::error::{Error, Result};

/// One Gaussian wave of the ECG template, relative to the R peak.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Wave {
    pub name: char,
    pub offset_s: f64,
    pub width_s: f64,
    pub amplitude: f64,
}

/// ECG template used by the generator.
pub const PQRST: [Wave; 5] = [
    Wave { name: 'P', offset_s: -0.20, width_s: 0.025, amplitude: 0.15 },
    Wave { name: 'Q', offset_s: -0.03, width_s: 0.010, amplitude: -0.12 },
    Wave { name: 'R', offset_s: 0.00, width_s: 0.012, amplitude: 1.00 },
    Wave { name: 'S', offset_s: 0.03, width_s: 0.010, amplitude: -0.25 },
    Wave { name: 'T', offset_s: 0.25, width_s: 0.040, amplitude: 0.30 },
];

/// Chest displacement per beat: a systolic pulse minus a wider, half-height
/// relaxation lobe with equal area, so the pulse has no DC component.
/// `(offset_s, width_s, amplitude)` relative to the R peak.
pub const CARDIAC_PULSE: [(f64, f64, f64); 2] = [(0.15, 0.04, 1.0), (0.30, 0.08, -0.5)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub heart_rate_bpm: f64,
    /// Standard deviation of the beat-to-beat heart rate.
    pub hr_std_bpm: f64,
    pub resp_rate_bpm: f64,
    /// Respiration amplitude relative to the cardiac pulse amplitude.
    pub resp_ratio: f64,
    pub noise_std: f64,
    pub fs: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            heart_rate_bpm: 72.0,
            hr_std_bpm: 3.0,
            resp_rate_bpm: 15.0,
            resp_ratio: 3.0,
            noise_std: 0.01,
            fs: 200.0,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if !(40.0..=180.0).contains(&self.heart_rate_bpm) {
            return Err(Error::config("heart_rate_bpm", format!("{} outside 40..=180", self.heart_rate_bpm)));
        }
        if !(6.0..=30.0).contains(&self.resp_rate_bpm) {
            return Err(Error::config("resp_rate_bpm", format!("{} outside 6..=30", self.resp_rate_bpm)));
        }
        for (name, v) in [
            ("hr_std_bpm", self.hr_std_bpm),
            ("resp_ratio", self.resp_ratio),
            ("noise_std", self.noise_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(name, format!("{v} must be finite and >= 0")));
            }
        }
        if !(self.fs.is_finite() && self.fs >= 100.0) {
            return Err(Error::config("fs", format!("{} must be >= 100 Hz", self.fs)));
        }
        Ok(())
    }
}

/// A generated pair with its ground truth.
#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub recording: Recording,
    /// R-peak times in seconds, inside `[0, duration)`.
    pub r_times: Vec<f64>,
    /// Noise-free cardiac and respiration parts of the radar signal.
    pub cardiac: Vec<f64>,
    pub respiration: Vec<f64>,
}

fn gaussian(t: f64, mu: f64, sigma: f64) -> f64 {
    let z = (t - mu) / sigma;
    (-0.5 * z * z).exp()
}

/// Evaluates a sum of Gaussians placed at every beat onto a sample grid.
fn render(beats: &[f64], waves: &[(f64, f64, f64)], n: usize, fs: f64) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for &b in beats {
        for &(off, width, amp) in waves {
            let mu = b + off;
            let lo = (((mu - 5.0 * width) * fs).floor().max(0.0)) as usize;
            let hi = (((mu + 5.0 * width) * fs).ceil().max(0.0) as usize).min(n);
            for (i, o) in out.iter_mut().enumerate().take(hi).skip(lo) {
                *o += amp * gaussian(i as f64 / fs, mu, width);
            }
        }
    }
    out
}

/// Generates `duration_s` seconds of paired radar displacement and ECG.
pub fn synthesize_pair(p: &SynthParams, duration_s: f64) -> Result<SyntheticPair> {
    p.validate()?;
    if !(duration_s.is_finite() && duration_s > 0.0) {
        return Err(Error::config("duration_s", format!("{duration_s} must be > 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let n = (duration_s * p.fs).round() as usize;
    let hr = Normal::new(p.heart_rate_bpm, p.hr_std_bpm).expect("validated std");
    let next_rr = |rng: &mut ChaCha8Rng| 60.0 / hr.sample(rng).clamp(40.0, 180.0);

    // start one beat before zero so the first second looks like the rest
    let first_rr = 60.0 / p.heart_rate_bpm;
    let mut t = -first_rr + rng.random_range(0.0..first_rr);
    let mut beats = Vec::new();
    while t < duration_s + 1.0 {
        beats.push(t);
        t += next_rr(&mut rng);
    }
    let r_times: Vec<f64> = beats.iter().copied().filter(|&b| b >= 0.0 && b < duration_s).collect();

    let ecg_waves: Vec<(f64, f64, f64)> = PQRST.iter().map(|w| (w.offset_s, w.width_s, w.amplitude)).collect();
    let ecg = render(&beats, &ecg_waves, n, p.fs);
    let cardiac = render(&beats, &CARDIAC_PULSE, n, p.fs);

    let phase = rng.random_range(0.0..2.0 * PI);
    let f_resp = p.resp_rate_bpm / 60.0;
    let respiration: Vec<f64> = (0..n)
        .map(|i| p.resp_ratio * (2.0 * PI * f_resp * i as f64 / p.fs + phase).sin())
        .collect();
    let noise = Normal::new(0.0, p.noise_std).expect("validated std");
    let radar: Vec<f64> = (0..n)
        .map(|i| cardiac[i] + respiration[i] + noise.sample(&mut rng))
        .collect();

    Ok(SyntheticPair {
        recording: Recording {
            radar,
            ecg: Some(ecg),
            rate_hz: p.fs,
            subject: format!("synthetic-{}", p.seed),
            split: None,
        },
        r_times,
        cardiac,
        respiration,
    })
}
