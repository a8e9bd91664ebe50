//! `lifwavnet`: synthetic data, training, evaluation, inference, feature
//! dumps and self-checks for the lifting-wavelet ECG reconstruction network.
//!
//! Exit codes: 0 success, 1 self-check failure, 2 usage/config/data error,
//! 3 numerical abort.

mod run_config;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use lifwavnet_core::data::{
    self, normalize_chunk, read_signal, resample, segment, synthesize_pair, write_signal, ManifestEntry,
    SignalFormat, SynthParams,
};
use lifwavnet_core::eval::{evaluate, EvalReport};
use lifwavnet_core::spectral::{magnitude_spectrogram, write_magnitude_matrix, WindowKind};
use lifwavnet_core::train::{train, FINAL_CHECKPOINT};
use lifwavnet_core::{checkpoint, selfcheck, Error, Model, SAMPLE_RATE_HZ};
use serde::Serialize;

use run_config::{output_dir, Profile, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "lifwavnet", version, about = "Radar-to-ECG reconstruction with a learnable lifting-wavelet network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic radar/ECG recordings and a manifest.
    Synth(SynthArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Reconstruct ECG from a radar displacement file.
    Infer(InferArgs),
    /// Dump intermediate features and spectrograms for one chunk.
    Features(FeaturesArgs),
    /// Run the embedded verification suite.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 40.96)]
    seconds: f64,
    #[arg(long, default_value_t = 72.0)]
    hr: f64,
    #[arg(long, default_value_t = 3.0)]
    hr_std: f64,
    #[arg(long, default_value_t = 15.0)]
    resp_rate: f64,
    #[arg(long, default_value_t = 3.0)]
    resp_ratio: f64,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long, default_value_t = 200.0)]
    fs: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of recordings; recording i uses seed + i.
    #[arg(long, default_value_t = 1)]
    recordings: usize,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum FormatArg {
    Csv,
    F32le,
}

impl From<FormatArg> for SignalFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => SignalFormat::Csv,
            FormatArg::F32le => SignalFormat::F32le,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    data: PathBuf,
    /// JSON configuration; keys override the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    profile: Option<Profile>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scales: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    radar: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Sampling rate of the input file.
    #[arg(long, default_value_t = SAMPLE_RATE_HZ)]
    rate: f64,
    /// Input encoding; guessed from the extension when absent.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

#[derive(Args, Debug)]
struct FeaturesArgs {
    #[arg(long)]
    radar: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = SAMPLE_RATE_HZ)]
    rate: f64,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Which chunk of the input to visualize.
    #[arg(long, default_value_t = 0)]
    chunk: usize,
}

#[derive(Args, Debug)]
struct SelfcheckArgs {
    /// Deliberately bias one gradient check (test hook).
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(selfcheck::GRADIENT_CHECKS))]
    corrupt: Option<String>,
    /// Also write the results as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let json = serde_json::to_string_pretty(value)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let out = output_dir(a.out, "synth");
    let format: SignalFormat = a.format.into();
    let ext = match format {
        SignalFormat::Csv => "csv",
        SignalFormat::F32le => "f32",
    };
    let base = SynthParams {
        heart_rate_bpm: a.hr,
        hr_std_bpm: a.hr_std,
        resp_rate_bpm: a.resp_rate,
        resp_ratio: a.resp_ratio,
        noise_std: a.noise,
        fs: a.fs,
        seed: a.seed,
    };
    base.validate()?;
    if a.recordings == 0 {
        return Err(Error::config("recordings", "must be >= 1").into());
    }
    create_dir(&out)?;
    let mut entries = Vec::new();
    for i in 0..a.recordings {
        let p = SynthParams {
            seed: a.seed + i as u64,
            ..base.clone()
        };
        let pair = synthesize_pair(&p, a.seconds)?;
        let rec = &pair.recording;
        let radar = format!("{}_radar.{ext}", rec.subject);
        let ecg = format!("{}_ecg.{ext}", rec.subject);
        let peaks = format!("{}_rpeaks.json", rec.subject);
        let rate = (format == SignalFormat::Csv).then_some(p.fs);
        write_signal(&out.join(&radar), format, &rec.radar, rate)?;
        write_signal(&out.join(&ecg), format, rec.ecg.as_deref().unwrap_or_default(), rate)?;
        write_json(&out.join(&peaks), &pair.r_times)?;
        entries.push(ManifestEntry {
            radar_path: radar.into(),
            ecg_path: Some(ecg.into()),
            rate_hz: p.fs,
            subject: rec.subject.clone(),
            split: None,
            format,
            r_peaks_path: Some(peaks.into()),
        });
    }
    write_json(&out.join("manifest.json"), &entries)?;
    #[derive(Serialize)]
    struct SynthEcho<'a> {
        params: &'a SynthParams,
        seconds: f64,
        recordings: usize,
        format: SignalFormat,
    }
    let echo = SynthEcho {
        params: &base,
        seconds: a.seconds,
        recordings: a.recordings,
        format,
    };
    write_json(&out.join("config.json"), &echo)?;
    log::info!("resolved configuration: {}", serde_json::to_string(&echo)?);
    println!("wrote {} recording(s) and {}", a.recordings, out.join("manifest.json").display());
    Ok(())
}

fn summarize(label: &str, r: &EvalReport) {
    let a = &r.aggregate;
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "{label}: chunks {} rho {} mre {} mae_hr {} bpm mae_rmssd {} ms",
        a.chunks,
        show(a.pearson),
        show(a.mre),
        show(a.mae_hr_bpm),
        show(a.mae_rmssd_ms)
    );
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref(), a.profile)?;
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.train.adam.lr = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.scales {
        cfg.model.scales = v;
    }
    if let Some(v) = a.channels {
        cfg.model.channels = v;
    }
    cfg.validate()?;
    let out = output_dir(a.out, "train");
    create_dir(&out)?;
    cfg.echo(&out)?;

    let chunks = data::load_dataset(&a.data)?;
    let (train_set, holdout) = data::partition(&chunks, cfg.holdout);
    if train_set.is_empty() {
        return Err(Error::data(&a.data, "no training chunks").into());
    }
    log::info!("{} training chunks, {} held out", train_set.len(), holdout.len());
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    log::info!("{} parameters", model.param_count());
    let log = train(&mut model, &train_set, &holdout, &cfg.train, Some(&out))?;
    if let Some(last) = log.epochs.last() {
        println!("epoch {} step {} loss {:.6}", last.epoch, last.step, last.loss);
    }
    let report = evaluate(&model, &train_set)?;
    write_json(&out.join("train_eval.json"), &report)?;
    summarize("train", &report);
    if !holdout.is_empty() {
        let report = evaluate(&model, &holdout)?;
        write_json(&out.join("holdout_eval.json"), &report)?;
        summarize("holdout", &report);
    }
    println!("checkpoint {}", out.join("checkpoints").join(FINAL_CHECKPOINT).display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model = checkpoint::load(&a.ckpt)?;
    let chunks = data::load_dataset(&a.data)?;
    if chunks.is_empty() {
        return Err(Error::data(&a.data, "evaluation set is empty").into());
    }
    let len = model.config().length;
    if let Some(c) = chunks.iter().find(|c| c.radar.len() != len) {
        return Err(Error::Dimension(format!(
            "checkpoint expects {len}-sample chunks, data has {}",
            c.radar.len()
        ))
        .into());
    }
    let report = evaluate(&model, &chunks)?;
    if report.aggregate.chunks == 0 {
        return Err(Error::data(&a.data, "no chunk carries a reference ECG").into());
    }
    write_json(&a.report, &report)?;
    summarize("eval", &report);
    Ok(())
}

/// Reads, resamples, segments and normalizes a radar file for `model`.
fn prepare_radar(path: &Path, rate: f64, format: Option<FormatArg>, model: &Model) -> Result<(SignalFormat, Vec<Vec<f32>>)> {
    let format = format.map_or_else(|| SignalFormat::from_path(path), Into::into);
    let raw = read_signal(path, format, Some(rate))?;
    let x = resample(&raw, rate, SAMPLE_RATE_HZ)?;
    let len = model.config().length;
    let chunks: Vec<Vec<f32>> = segment(&x, len)
        .into_iter()
        .map(|(_, s)| normalize_chunk(s).into_iter().map(|v| v as f32).collect())
        .collect();
    if chunks.is_empty() {
        return Err(Error::data(path, format!("{} samples at 200 Hz is shorter than one {len}-sample chunk", x.len())).into());
    }
    if x.len() % len != 0 {
        log::warn!("{}: dropping {} tail samples", path.display(), x.len() % len);
    }
    Ok((format, chunks))
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let model = checkpoint::load(&a.ckpt)?;
    let (format, chunks) = prepare_radar(&a.radar, a.rate, a.format, &model)?;
    let mut out = Vec::with_capacity(chunks.len() * model.config().length);
    for c in &chunks {
        out.extend(model.infer(c)?.into_iter().map(|v| v as f64));
    }
    let rate = (format == SignalFormat::Csv).then_some(SAMPLE_RATE_HZ);
    write_signal(&a.out, format, &out, rate)?;
    println!("wrote {} samples to {}", out.len(), a.out.display());
    Ok(())
}

fn write_feature_csv(path: &Path, t: &lifwavnet_core::Tensor<f32>) -> Result<()> {
    use std::io::Write;
    let (rows, ch) = t.seq_dims()?;
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let header: Vec<String> = (0..ch).map(|c| format!("c{c}")).collect();
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for r in 0..rows {
        let line: Vec<String> = (0..ch).map(|c| t.at(r, c).to_string()).collect();
        writeln!(w, "{}", line.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

fn cmd_features(a: FeaturesArgs) -> Result<()> {
    let model = checkpoint::load(&a.ckpt)?;
    let (_, chunks) = prepare_radar(&a.radar, a.rate, a.format, &model)?;
    let Some(chunk) = chunks.get(a.chunk) else {
        bail!(Error::config("chunk", format!("index {} but the input has {} chunks", a.chunk, chunks.len())));
    };
    let out = output_dir(a.out, "features");
    create_dir(&out)?;
    let dumps = model.export_intermediate_features(chunk)?;
    for d in &dumps {
        write_feature_csv(&out.join(format!("{}.csv", d.name)), &d.values)?;
    }
    let output = model.infer(chunk)?;
    for (label, signal) in [("input", chunk), ("output", &output)] {
        let x: Vec<f64> = signal.iter().map(|&v| v as f64).collect();
        for win in [800, 400, 200].into_iter().filter(|&w| w <= x.len()) {
            let mags = magnitude_spectrogram(&x, win, win / 4, WindowKind::Hann)?;
            let path = out.join(format!("spectrogram_{label}_w{win}.tsv"));
            let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            write_magnitude_matrix(&mut w, &mags).map_err(|e| Error::io(&path, e))?;
        }
    }
    println!("wrote {} feature files to {}", dumps.len(), out.display());
    Ok(())
}

fn cmd_selfcheck(a: SelfcheckArgs) -> Result<ExitCode> {
    let report = selfcheck::run(&selfcheck::SelfCheckOptions { corrupt: a.corrupt });
    for c in &report.checks {
        println!(
            "{} {:<28} {:>7.2}s  {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.seconds,
            c.detail
        );
    }
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    if report.passed() {
        println!("all {} checks passed", report.checks.len());
        Ok(ExitCode::SUCCESS)
    } else {
        let failed: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
        eprintln!("failed: {}", failed.join(", "));
        Ok(ExitCode::from(1))
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::NonFinite(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a).map(|_| ExitCode::SUCCESS),
        Command::Train(a) => cmd_train(a).map(|_| ExitCode::SUCCESS),
        Command::Eval(a) => cmd_eval(a).map(|_| ExitCode::SUCCESS),
        Command::Infer(a) => cmd_infer(a).map(|_| ExitCode::SUCCESS),
        Command::Features(a) => cmd_features(a).map(|_| ExitCode::SUCCESS),
        Command::Selfcheck(a) => cmd_selfcheck(a),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(exit_code(&e))
    })
}
