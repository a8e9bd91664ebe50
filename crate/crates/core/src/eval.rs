//! Per-chunk reconstruction and vitals evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SignalChunk;
use crate::error::Result;
use crate::network::Model;
use crate::vitals::{detect_r_peaks, mre, pearson, vitals_mae, VitalsMae, VitalsPair};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkEval {
    pub source: String,
    pub offset: usize,
    pub pearson: f64,
    /// The correlation was undefined (a constant signal) and reported as 0.
    pub pearson_degenerate: bool,
    /// `None` when the reference chunk is all zeros.
    pub mre: Option<f64>,
    pub vitals: VitalsPair,
    pub peaks_gt: Vec<usize>,
    pub peaks_pred: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalAggregate {
    /// Chunks that entered the metrics.
    pub chunks: usize,
    /// Chunks skipped because they carry no reference ECG.
    pub excluded_without_ecg: usize,
    pub pearson: Option<f64>,
    pub mre: Option<f64>,
    pub mre_missing: usize,
    pub mae_hr_bpm: Option<f64>,
    pub mae_rmssd_ms: Option<f64>,
    pub vitals: VitalsMae,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub chunks: Vec<ChunkEval>,
    pub aggregate: EvalAggregate,
}

fn degenerate(x: &[f64]) -> bool {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>().sqrt() < 1e-12
}

fn widen(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

/// Scores one prediction against its reference.
pub fn evaluate_chunk(chunk: &SignalChunk, gt: &[f32], pred: &[f32]) -> Result<ChunkEval> {
    let (gt, pred) = (widen(gt), widen(pred));
    let rho = pearson(&gt, &pred)?;
    let peaks_gt = detect_r_peaks(&gt, chunk.fs);
    let peaks_pred = detect_r_peaks(&pred, chunk.fs);
    Ok(ChunkEval {
        source: chunk.source.clone(),
        offset: chunk.offset,
        pearson: rho,
        pearson_degenerate: degenerate(&gt) || degenerate(&pred),
        mre: mre(&gt, &pred)?,
        vitals: VitalsPair::from_peaks(&peaks_gt, &peaks_pred),
        peaks_gt: peaks_gt.indices,
        peaks_pred: peaks_pred.indices,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Aggregates per-chunk results as arithmetic means.
pub fn aggregate(chunks: Vec<ChunkEval>, excluded_without_ecg: usize) -> EvalReport {
    let pairs: Vec<VitalsPair> = chunks.iter().map(|c| c.vitals).collect();
    let vitals = vitals_mae(&pairs);
    let aggregate = EvalAggregate {
        chunks: chunks.len(),
        excluded_without_ecg,
        pearson: mean(chunks.iter().map(|c| c.pearson)),
        mre: mean(chunks.iter().filter_map(|c| c.mre)),
        mre_missing: chunks.iter().filter(|c| c.mre.is_none()).count(),
        mae_hr_bpm: vitals.mae_hr,
        mae_rmssd_ms: vitals.mae_rmssd,
        vitals,
    };
    EvalReport { chunks, aggregate }
}

/// Evaluates arbitrary predictions; `predict` is called once per chunk that
/// has a reference ECG.
pub fn evaluate_with<F>(chunks: &[SignalChunk], predict: F) -> Result<EvalReport>
where
    F: Fn(&SignalChunk) -> Result<Vec<f32>> + Sync,
{
    let with_gt: Vec<&SignalChunk> = chunks.iter().filter(|c| c.ecg.is_some()).collect();
    let excluded = chunks.len() - with_gt.len();
    let results: Vec<ChunkEval> = with_gt
        .par_iter()
        .map(|c| {
            let pred = predict(c)?;
            evaluate_chunk(c, c.ecg.as_deref().expect("filtered"), &pred)
        })
        .collect::<Result<_>>()?;
    Ok(aggregate(results, excluded))
}

/// Runs the model on every chunk and scores it against the reference ECG.
pub fn evaluate(model: &Model, chunks: &[SignalChunk]) -> Result<EvalReport> {
    evaluate_with(chunks, |c| model.infer(&c.radar))
}
