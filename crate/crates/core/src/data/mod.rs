//! Recordings, chunking, normalization and dataset manifests.

mod io;
mod resample;
pub mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{CHUNK_LEN, SAMPLE_RATE_HZ};

pub use io::{read_signal, write_signal, SignalFormat};
pub use resample::resample;
pub use synth::{synthesize_pair, SynthParams, SyntheticPair};

/// A paired (or radar-only) recording at one sampling rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub radar: Vec<f64>,
    pub ecg: Option<Vec<f64>>,
    pub rate_hz: f64,
    pub subject: String,
    pub split: Option<String>,
}

/// One fixed-length chunk ready for the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalChunk {
    pub radar: Vec<f32>,
    pub ecg: Option<Vec<f32>>,
    pub fs: f64,
    /// Recording the chunk came from.
    pub source: String,
    /// First sample of the chunk within its recording.
    pub offset: usize,
    pub split: Option<String>,
}

/// Offsets of the non-overlapping `len`-sample chunks of a `total`-sample
/// signal; the tail shorter than `len` is dropped.
pub fn segment_offsets(total: usize, len: usize) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    (0..total / len).map(|i| i * len).collect()
}

/// Splits `x` into consecutive `len`-sample slices, dropping the tail.
pub fn segment(x: &[f64], len: usize) -> Vec<(usize, &[f64])> {
    segment_offsets(x.len(), len)
        .into_iter()
        .map(|o| (o, &x[o..o + len]))
        .collect()
}

/// Maps `x` affinely onto `[-1, 1]`; a constant chunk becomes all zeros.
pub fn normalize_chunk(x: &[f64]) -> Vec<f64> {
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    if !(span > 0.0) || !span.is_finite() {
        return vec![0.0; x.len()];
    }
    x.iter()
        .map(|&v| (2.0 * (v - lo) / span - 1.0).clamp(-1.0, 1.0))
        .collect()
}

fn to_f32(x: &[f64]) -> Vec<f32> {
    x.iter().map(|&v| v as f32).collect()
}

/// Resamples a recording to `SAMPLE_RATE_HZ`, cuts it into `len`-sample
/// chunks and normalizes each chunk.
pub fn chunk_recording(rec: &Recording, len: usize) -> Result<Vec<SignalChunk>> {
    let radar = resample(&rec.radar, rec.rate_hz, SAMPLE_RATE_HZ)?;
    let ecg = rec
        .ecg
        .as_ref()
        .map(|e| resample(e, rec.rate_hz, SAMPLE_RATE_HZ))
        .transpose()?;
    let usable = ecg.as_ref().map_or(radar.len(), |e| e.len().min(radar.len()));
    let offsets = segment_offsets(usable, len);
    if offsets.is_empty() {
        log::warn!(
            "{}: {} samples at {} Hz is shorter than one chunk",
            rec.subject,
            usable,
            SAMPLE_RATE_HZ
        );
    } else if usable % len != 0 {
        log::info!("{}: dropping {} tail samples", rec.subject, usable % len);
    }
    Ok(offsets
        .into_iter()
        .map(|o| SignalChunk {
            radar: to_f32(&normalize_chunk(&radar[o..o + len])),
            ecg: ecg.as_ref().map(|e| to_f32(&normalize_chunk(&e[o..o + len]))),
            fs: SAMPLE_RATE_HZ,
            source: rec.subject.clone(),
            offset: o,
            split: rec.split.clone(),
        })
        .collect())
}

/// One recording listed in a dataset manifest. Paths are relative to the
/// manifest's directory unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub radar_path: PathBuf,
    #[serde(default)]
    pub ecg_path: Option<PathBuf>,
    pub rate_hz: f64,
    #[serde(default)]
    pub subject: String,
    #[serde(default)]
    pub split: Option<String>,
    #[serde(default)]
    pub format: SignalFormat,
    /// Optional JSON array of ground-truth R-peak times in seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_peaks_path: Option<PathBuf>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(path, format!("malformed manifest: {e}")))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads the signals of one manifest entry.
pub fn load_recording(base: &Path, entry: &ManifestEntry) -> Result<Recording> {
    if !(entry.rate_hz.is_finite() && entry.rate_hz > 0.0) {
        return Err(Error::data(&entry.radar_path, format!("invalid rate_hz {}", entry.rate_hz)));
    }
    let radar_path = resolve(base, &entry.radar_path);
    let radar = read_signal(&radar_path, entry.format, Some(entry.rate_hz))?;
    let ecg = match &entry.ecg_path {
        Some(p) => {
            let path = resolve(base, p);
            let ecg = read_signal(&path, entry.format, Some(entry.rate_hz))?;
            if ecg.len() != radar.len() {
                return Err(Error::data(
                    &path,
                    format!("{} ECG samples but {} radar samples", ecg.len(), radar.len()),
                ));
            }
            Some(ecg)
        }
        None => None,
    };
    let subject = if entry.subject.is_empty() {
        entry.radar_path.display().to_string()
    } else {
        entry.subject.clone()
    };
    Ok(Recording {
        radar,
        ecg,
        rate_hz: entry.rate_hz,
        subject,
        split: entry.split.clone(),
    })
}

/// Loads every recording of a manifest and returns its chunks in manifest order.
pub fn load_dataset(manifest: &Path) -> Result<Vec<SignalChunk>> {
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        log::warn!("{}: manifest lists no recordings", manifest.display());
    }
    let base = manifest.parent().unwrap_or_else(|| Path::new(""));
    let mut chunks = Vec::new();
    for entry in &entries {
        let rec = load_recording(base, entry)?;
        chunks.extend(chunk_recording(&rec, CHUNK_LEN)?);
    }
    Ok(chunks)
}

/// Splits a dataset into training and held-out chunks. Explicit manifest
/// splits win (`"train"` trains, anything else is held out); without them
/// the last `holdout` fraction of chunks is held out.
pub fn partition(chunks: &[SignalChunk], holdout: f64) -> (Vec<SignalChunk>, Vec<SignalChunk>) {
    if chunks.iter().any(|c| c.split.is_some()) {
        return chunks
            .iter()
            .cloned()
            .partition(|c| c.split.as_deref().is_none_or(|s| s == "train"));
    }
    let held = (chunks.len() as f64 * holdout).floor() as usize;
    let cut = chunks.len() - held.min(chunks.len());
    (chunks[..cut].to_vec(), chunks[cut..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_chunk(&[0.0, 5.0, 10.0]), vec![-1.0, 0.0, 1.0]);
        assert_eq!(normalize_chunk(&[3.0; 4]), vec![0.0; 4]);
    }

    #[test]
    fn segment_examples() {
        let x = vec![0.0; 3000];
        let s = segment(&x, 1024);
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].0, s[1].0), (0, 1024));
        assert_eq!(segment(&x[..1024], 1024).len(), 1);
        assert!(segment(&x[..1000], 1024).is_empty());
    }

    #[test]
    fn holdout_partition() {
        let chunk = |split: Option<&str>| SignalChunk {
            radar: vec![],
            ecg: None,
            fs: 200.0,
            source: String::new(),
            offset: 0,
            split: split.map(String::from),
        };
        let plain: Vec<_> = (0..20).map(|_| chunk(None)).collect();
        let (tr, te) = partition(&plain, 0.1);
        assert_eq!((tr.len(), te.len()), (18, 2));
        let (tr, te) = partition(&plain[..8], 0.1);
        assert_eq!((tr.len(), te.len()), (8, 0));
        let explicit = vec![chunk(Some("train")), chunk(Some("test")), chunk(Some("train"))];
        let (tr, te) = partition(&explicit, 0.1);
        assert_eq!((tr.len(), te.len()), (2, 1));
    }
}
