//! Reconstruction metrics and ECG-derived vitals.
//!
//! R peaks are found with a Pan-Tompkins style detector: a zero-phase 5-15 Hz
//! band-pass, a five-point derivative, squaring, a centered 150 ms moving
//! window integration, and adaptive signal/noise thresholds with searchback.
//! Each detection is then moved to the ECG maximum within 50 ms.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};

/// Pearson correlation; 0 when either signal has (numerically) no variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(dim_err!("pearson: lengths {} and {} differ", a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(dim_err!("pearson needs at least 2 samples"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (u, v) = (x - ma, y - mb);
        num += u * v;
        da += u * u;
        db += v * v;
    }
    let (na, nb) = (da.sqrt(), db.sqrt());
    if na < 1e-12 || nb < 1e-12 {
        return Ok(0.0);
    }
    Ok((num / (na * nb)).clamp(-1.0, 1.0))
}

/// `||gt - pred||_1 / ||gt||_1`; `None` for an all-zero reference.
pub fn mre(gt: &[f64], pred: &[f64]) -> Result<Option<f64>> {
    if gt.len() != pred.len() {
        return Err(dim_err!("mre: lengths {} and {} differ", gt.len(), pred.len()));
    }
    let den: f64 = gt.iter().map(|v| v.abs()).sum();
    if den == 0.0 {
        return Ok(None);
    }
    let num: f64 = gt.iter().zip(pred).map(|(g, p)| (g - p).abs()).sum();
    Ok(Some(num / den))
}

/// Detected R peaks of one signal.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RPeakSeries {
    pub indices: Vec<usize>,
    pub fs: f64,
    /// Set when the signal was too short for adaptive thresholding.
    pub too_short: bool,
}

impl RPeakSeries {
    /// Successive RR intervals in seconds.
    pub fn rr_intervals(&self) -> Vec<f64> {
        self.indices
            .windows(2)
            .map(|w| (w[1] - w[0]) as f64 / self.fs)
            .collect()
    }
}

const MIN_SECONDS: f64 = 2.0;
const REFRACTORY_S: f64 = 0.2;
const INTEGRATION_S: f64 = 0.15;
const REFINE_S: f64 = 0.05;
const BAND: (f64, f64) = (5.0, 15.0);

/// Linear-phase FIR band-pass (Hamming-windowed sinc difference).
fn bandpass_taps(fs: f64) -> Vec<f64> {
    let half = (0.25 * fs).round() as isize;
    let (lo, hi) = (BAND.0 / fs, BAND.1 / fs);
    let sinc = |f: f64, n: f64| {
        if n == 0.0 {
            2.0 * f
        } else {
            (2.0 * std::f64::consts::PI * f * n).sin() / (std::f64::consts::PI * n)
        }
    };
    let len = (2 * half + 1) as f64;
    (-half..=half)
        .map(|i| {
            let n = i as f64;
            let w = 0.54 - 0.46 * (2.0 * std::f64::consts::PI * (n + half as f64) / (len - 1.0)).cos();
            (sinc(hi, n) - sinc(lo, n)) * w
        })
        .collect()
}

/// Centered FIR filtering with zero padding; no group delay.
fn filter_centered(x: &[f64], taps: &[f64]) -> Vec<f64> {
    let half = (taps.len() / 2) as isize;
    let n = x.len() as isize;
    (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for (j, &t) in taps.iter().enumerate() {
                let s = i + j as isize - half;
                if s >= 0 && s < n {
                    acc += t * x[s as usize];
                }
            }
            acc
        })
        .collect()
}

/// Squared five-point derivative followed by a centered moving average.
fn integrated_energy(band: &[f64], fs: f64) -> Vec<f64> {
    let n = band.len();
    let at = |i: isize| if i >= 0 && (i as usize) < n { band[i as usize] } else { 0.0 };
    let sq: Vec<f64> = (0..n as isize)
        .map(|i| {
            let d = (2.0 * at(i + 1) + at(i + 2) - at(i - 2) - 2.0 * at(i - 1)) * fs / 8.0;
            d * d
        })
        .collect();
    let win = ((INTEGRATION_S * fs).round() as usize).max(1);
    let half = win / 2;
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + sq[i];
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + win - half).min(n);
            (prefix[hi] - prefix[lo]) / win as f64
        })
        .collect()
}

fn local_maxima(x: &[f64]) -> Vec<usize> {
    (1..x.len().saturating_sub(1))
        .filter(|&i| x[i] > x[i - 1] && x[i] >= x[i + 1] && x[i] > 0.0)
        .collect()
}

/// Adaptive-threshold peak picking on the integrated energy.
fn pick_qrs(mwi: &[f64], fs: f64) -> Vec<usize> {
    let refractory = (REFRACTORY_S * fs).round() as usize;
    let learn = ((MIN_SECONDS * fs) as usize).min(mwi.len());
    let init_max = mwi[..learn].iter().cloned().fold(0.0, f64::max);
    if init_max <= 0.0 {
        return Vec::new();
    }
    let mut spki = 0.25 * init_max;
    let mut npki = 0.5 * mwi[..learn].iter().sum::<f64>() / learn as f64;
    let candidates = local_maxima(mwi);
    let mut peaks: Vec<usize> = Vec::new();
    let mut rr_avg: Option<f64> = None;
    let mut since_last: Vec<usize> = Vec::new();

    for &c in &candidates {
        let v = mwi[c];
        let thr1 = npki + 0.25 * (spki - npki);
        if let Some(&last) = peaks.last() {
            if c - last < refractory {
                // keep the larger of two detections inside the refractory period
                if v > mwi[last] && v > thr1 {
                    peaks.pop();
                    peaks.push(c);
                    spki = 0.125 * v + 0.875 * spki;
                }
                continue;
            }
            // searchback for a missed beat
            if let Some(avg) = rr_avg {
                if (c - last) as f64 > 1.66 * avg && v <= thr1 {
                    let thr2 = 0.5 * thr1;
                    if let Some(&best) = since_last
                        .iter()
                        .filter(|&&s| s - last >= refractory && c - s >= refractory && mwi[s] > thr2)
                        .max_by(|&&a, &&b| mwi[a].total_cmp(&mwi[b]))
                    {
                        peaks.push(best);
                        spki = 0.25 * mwi[best] + 0.75 * spki;
                        since_last.clear();
                    }
                }
            }
        }
        if v > thr1 {
            if let Some(&last) = peaks.last() {
                let rr = (c - last) as f64;
                rr_avg = Some(rr_avg.map_or(rr, |a| 0.875 * a + 0.125 * rr));
            }
            peaks.push(c);
            spki = 0.125 * v + 0.875 * spki;
            since_last.clear();
        } else {
            npki = 0.125 * v + 0.875 * npki;
            since_last.push(c);
        }
    }
    peaks
}

/// Locates R peaks in an ECG sampled at `fs` Hz.
pub fn detect_r_peaks(ecg: &[f64], fs: f64) -> RPeakSeries {
    if (ecg.len() as f64) < MIN_SECONDS * fs || fs <= 0.0 {
        return RPeakSeries {
            indices: Vec::new(),
            fs,
            too_short: true,
        };
    }
    if ecg.iter().any(|v| !v.is_finite()) {
        return RPeakSeries {
            indices: Vec::new(),
            fs,
            too_short: false,
        };
    }
    let band = filter_centered(ecg, &bandpass_taps(fs));
    let mwi = integrated_energy(&band, fs);
    let coarse = pick_qrs(&mwi, fs);

    let reach = (REFINE_S * fs).round() as usize;
    let refractory = (REFRACTORY_S * fs).round() as usize;
    let mut indices: Vec<usize> = Vec::with_capacity(coarse.len());
    for c in coarse {
        let lo = c.saturating_sub(reach);
        let hi = (c + reach + 1).min(ecg.len());
        let r = (lo..hi).fold(lo, |best, i| if ecg[i] > ecg[best] { i } else { best });
        match indices.last() {
            Some(&last) if r <= last || r - last < refractory => {
                if ecg[r] > ecg[last] && r > last {
                    indices.pop();
                    indices.push(r);
                }
            }
            _ => indices.push(r),
        }
    }
    RPeakSeries {
        indices,
        fs,
        too_short: false,
    }
}

/// Mean heart rate in beats per minute; `None` without any interval.
pub fn heart_rate(rr: &[f64]) -> Option<f64> {
    let total: f64 = rr.iter().sum();
    if rr.is_empty() || total <= 0.0 {
        return None;
    }
    Some(60.0 * rr.len() as f64 / total)
}

/// Root mean square of successive RR differences, in milliseconds.
pub fn rmssd(rr: &[f64]) -> Option<f64> {
    if rr.len() < 2 {
        return None;
    }
    let sum: f64 = rr.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
    Some(1000.0 * (sum / (rr.len() - 1) as f64).sqrt())
}

/// Reference and predicted vitals of one chunk.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VitalsPair {
    pub hr_gt: Option<f64>,
    pub hr_pred: Option<f64>,
    pub rmssd_gt: Option<f64>,
    pub rmssd_pred: Option<f64>,
}

impl VitalsPair {
    pub fn from_peaks(gt: &RPeakSeries, pred: &RPeakSeries) -> Self {
        let (rg, rp) = (gt.rr_intervals(), pred.rr_intervals());
        VitalsPair {
            hr_gt: heart_rate(&rg),
            hr_pred: heart_rate(&rp),
            rmssd_gt: rmssd(&rg),
            rmssd_pred: rmssd(&rp),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VitalsMae {
    /// bpm
    pub mae_hr: Option<f64>,
    /// ms
    pub mae_rmssd: Option<f64>,
    pub hr_pairs: usize,
    pub rmssd_pairs: usize,
    /// Pairs with at least one side missing, per metric.
    pub hr_missing: usize,
    pub rmssd_missing: usize,
}

fn mae_of(values: impl Iterator<Item = (Option<f64>, Option<f64>)>) -> (Option<f64>, usize, usize) {
    let (mut sum, mut used, mut missing) = (0.0, 0usize, 0usize);
    for pair in values {
        match pair {
            (Some(g), Some(p)) => {
                sum += (g - p).abs();
                used += 1;
            }
            _ => missing += 1,
        }
    }
    ((used > 0).then(|| sum / used as f64), used, missing)
}

/// Mean absolute HR and RMSSD errors over the pairs where both sides exist.
pub fn vitals_mae(pairs: &[VitalsPair]) -> VitalsMae {
    let (mae_hr, hr_pairs, hr_missing) = mae_of(pairs.iter().map(|p| (p.hr_gt, p.hr_pred)));
    let (mae_rmssd, rmssd_pairs, rmssd_missing) = mae_of(pairs.iter().map(|p| (p.rmssd_gt, p.rmssd_pred)));
    VitalsMae {
        mae_hr,
        mae_rmssd,
        hr_pairs,
        rmssd_pairs,
        hr_missing,
        rmssd_missing,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heart_rate_examples() {
        assert_eq!(heart_rate(&[1.0, 1.0, 1.0]), Some(60.0));
        assert_eq!(heart_rate(&[0.5]), Some(120.0));
        assert_eq!(heart_rate(&[0.8, 1.2]), Some(60.0));
        assert_eq!(heart_rate(&[]), None);
    }

    #[test]
    fn rmssd_examples() {
        assert_eq!(rmssd(&[1.0, 1.0, 1.0]), Some(0.0));
        assert!((rmssd(&[0.8, 1.0]).unwrap() - 200.0).abs() < 1e-9);
        assert!((rmssd(&[1.0, 0.9, 1.1]).unwrap() - 158.113_883_008_418_97).abs() < 1e-6);
        assert_eq!(rmssd(&[1.0]), None);
    }

    #[test]
    fn metric_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&a, &[2.0; 4]).unwrap(), 0.0);
        assert_eq!(mre(&a, &a).unwrap(), Some(0.0));
        assert_eq!(mre(&a, &[0.0; 4]).unwrap(), Some(1.0));
        let twice: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
        assert_eq!(mre(&a, &twice).unwrap(), Some(1.0));
        assert_eq!(mre(&[0.0; 4], &a).unwrap(), None);
        assert!(pearson(&a, &a[..3]).is_err());
    }

    #[test]
    fn mae_examples() {
        let pairs = [
            VitalsPair {
                hr_gt: Some(60.0),
                hr_pred: Some(62.0),
                rmssd_gt: Some(10.0),
                rmssd_pred: None,
            },
            VitalsPair {
                hr_gt: Some(70.0),
                hr_pred: Some(67.0),
                rmssd_gt: Some(20.0),
                rmssd_pred: Some(25.0),
            },
        ];
        let m = vitals_mae(&pairs);
        assert_eq!(m.mae_hr, Some(2.5));
        assert_eq!(m.mae_rmssd, Some(5.0));
        assert_eq!(m.rmssd_missing, 1);
        assert_eq!(vitals_mae(&[]).mae_hr, None);
    }

    #[test]
    fn flat_and_short_signals() {
        assert!(detect_r_peaks(&[0.0; 2000], 200.0).indices.is_empty());
        let short = detect_r_peaks(&[0.0; 100], 200.0);
        assert!(short.too_short && short.indices.is_empty());
    }
}
