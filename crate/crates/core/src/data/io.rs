use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// On-disk encoding of a 1-D signal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalFormat {
    /// One value per line, or `time,value` pairs; a header line is skipped.
    #[default]
    Csv,
    /// Raw little-endian 32-bit floats.
    F32le,
}

impl SignalFormat {
    /// Guess from the file extension: `.f32`/`.bin` are raw, anything else CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("f32") | Some("bin") => SignalFormat::F32le,
            _ => SignalFormat::Csv,
        }
    }
}

fn parse_csv(path: &Path, text: &str, rate_hz: Option<f64>) -> Result<Vec<f64>> {
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c == ';' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        let parsed: std::result::Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
        let parsed = match parsed {
            Ok(p) => p,
            Err(_) if values.is_empty() && times.is_empty() => continue, // header
            Err(_) => return Err(Error::data(path, format!("line {}: not numeric", lineno + 1))),
        };
        match parsed.as_slice() {
            [v] => values.push(*v),
            [t, v] => {
                times.push(*t);
                values.push(*v);
            }
            _ => {
                return Err(Error::data(
                    path,
                    format!("line {}: expected 1 or 2 columns, got {}", lineno + 1, parsed.len()),
                ))
            }
        }
    }
    if !times.is_empty() && times.len() != values.len() {
        return Err(Error::data(path, "mixed one- and two-column rows"));
    }
    if let (Some(rate), true) = (rate_hz, times.len() >= 2) {
        let mut dts: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
        dts.sort_by(f64::total_cmp);
        let dt = dts[dts.len() / 2];
        let actual = 1.0 / dt;
        if !(actual.is_finite() && ((actual - rate) / rate).abs() < 0.01) {
            return Err(Error::data(
                path,
                format!("time column implies {actual:.3} Hz but the manifest says {rate} Hz"),
            ));
        }
    }
    Ok(values)
}

/// Reads a signal; when `rate_hz` is given and the file carries timestamps,
/// the implied rate must agree within 1%.
pub fn read_signal(path: &Path, format: SignalFormat, rate_hz: Option<f64>) -> Result<Vec<f64>> {
    let values = match format {
        SignalFormat::Csv => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_csv(path, &text, rate_hz)?
        }
        SignalFormat::F32le => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            if bytes.len() % 4 != 0 {
                return Err(Error::data(path, format!("{} bytes is not a whole number of f32", bytes.len())));
            }
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect()
        }
    };
    if values.is_empty() {
        return Err(Error::data(path, "signal is empty"));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::data(path, format!("sample {i} is not finite")));
    }
    Ok(values)
}

/// Writes a signal. CSV output has `time,value` rows when `rate_hz` is given.
pub fn write_signal(path: &Path, format: SignalFormat, values: &[f64], rate_hz: Option<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 16);
    match format {
        SignalFormat::Csv => {
            for (i, v) in values.iter().enumerate() {
                match rate_hz {
                    Some(r) => writeln!(buf, "{},{}", i as f64 / r, v),
                    None => writeln!(buf, "{v}"),
                }
                .expect("write to memory");
            }
        }
        SignalFormat::F32le => {
            for &v in values {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}
