use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Zero crossings of the sinc on each side of the kernel center.
const ZERO_CROSSINGS: f64 = 16.0;
/// Cutoff as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.9;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Blackman window on `u` in `[-1, 1]`.
fn blackman(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        return 0.0;
    }
    let p = PI * (u + 1.0);
    0.42 - 0.5 * p.cos() + 0.08 * (2.0 * p).cos()
}

/// Sample `i` of `x` extended by point reflection about both end samples,
/// which continues linear trends instead of introducing a step.
fn extended(x: &[f64], i: isize) -> f64 {
    let n = x.len() as isize;
    if i < 0 {
        let m = (-i).min(n - 1);
        2.0 * x[0] - x[m as usize]
    } else if i >= n {
        let m = (2 * (n - 1) - i).max(0);
        2.0 * x[(n - 1) as usize] - x[m as usize]
    } else {
        x[i as usize]
    }
}

/// Band-limited resampling with a Blackman-windowed sinc kernel.
///
/// The output has `round(len * to / from)` samples. The cutoff sits at 90% of
/// the lower of the two Nyquist frequencies, and each output sample's kernel
/// weights are normalized to sum to one so DC passes unchanged.
pub fn resample(x: &[f64], from_hz: f64, to_hz: f64) -> Result<Vec<f64>> {
    for (name, r) in [("from_hz", from_hz), ("to_hz", to_hz)] {
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::config(name, format!("sampling rate must be positive, got {r}")));
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("resampler input".into()));
    }
    if from_hz == to_hz || x.is_empty() {
        return Ok(x.to_vec());
    }
    let out_len = (x.len() as f64 * to_hz / from_hz).round() as usize;
    let cutoff = 0.5 * from_hz.min(to_hz) * ROLLOFF;
    let half_s = ZERO_CROSSINGS / (2.0 * cutoff);
    let reach = (half_s * from_hz).ceil() as isize;
    let mut out = Vec::with_capacity(out_len);
    for m in 0..out_len {
        let center = m as f64 * from_hz / to_hz;
        let c = center.floor() as isize;
        let (mut acc, mut wsum) = (0.0, 0.0);
        for n in c - reach..=c + reach + 1 {
            let dt = (center - n as f64) / from_hz;
            let h = sinc(2.0 * cutoff * dt) * blackman(dt / half_s);
            if h != 0.0 {
                acc += h * extended(x, n);
                wsum += h;
            }
        }
        out.push(acc / wsum);
    }
    Ok(out)
}
