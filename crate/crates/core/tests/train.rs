use std::fs;
use std::path::Path;

use lifwavnet_core::autodiff::Tape;
use lifwavnet_core::checkpoint;
use lifwavnet_core::data::{chunk_recording, synthesize_pair, SignalChunk, SynthParams};
use lifwavnet_core::eval::evaluate_with;
use lifwavnet_core::params::ParamStore;
use lifwavnet_core::spectral::{LossConfig, SpectralLoss};
use lifwavnet_core::train::{
    adam_step, batch_gradients, temporal_loss, total_loss, train, train_with, AdamConfig, LossVariant, Objective,
    TrainConfig, FINAL_CHECKPOINT, LAST_GOOD_CHECKPOINT, LOG_FILE,
};
use lifwavnet_core::{Error, Model, ModelConfig, Tensor, CHUNK_LEN};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

const L: usize = 64;

fn small_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        length: L,
        channels: 4,
        scales: 2,
        csconv_kernels: vec![3, 5, 7, 9],
        projection_kernel: 5,
        split_kernel: 5,
        ..ModelConfig::default()
    };
    Model::new(cfg, seed).unwrap()
}

fn small_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 2,
        adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
        checkpoint_interval: 2,
        spectral: LossConfig { windows: vec![32, 16, 8], ..LossConfig::default() },
        seed: 4,
        ..TrainConfig::default()
    }
}

fn small_chunks(n: usize) -> Vec<SignalChunk> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    (0..n)
        .map(|i| {
            let radar: Vec<f32> = (0..L).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ecg: Vec<f32> = radar.iter().map(|v| 0.5 * v).collect();
            SignalChunk { radar, ecg: Some(ecg), fs: 200.0, source: "rand".into(), offset: i * L, split: None }
        })
        .collect()
}

fn random_signal(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn loss_variants_vanish_on_perfect_prediction() {
    let x = random_signal(1, L);
    for loss in [
        LossVariant::Temporal,
        LossVariant::SingleWindow { window: 32 },
        LossVariant::MultiResolution,
    ] {
        let cfg = TrainConfig { loss, ..small_train_config() };
        assert_eq!(total_loss(&x, &x, &cfg).unwrap().total, 0.0);
    }
}

#[test]
fn zero_alpha_is_temporal_loss() {
    let (p, t) = (random_signal(2, L), random_signal(3, L));
    let mut cfg = small_train_config();
    cfg.spectral.alpha = 0.0;
    assert_eq!(total_loss(&p, &t, &cfg).unwrap().total, temporal_loss(&p, &t).unwrap());
}

#[test]
fn total_is_temporal_plus_weighted_spectral() {
    let (p, t) = (random_signal(4, L), random_signal(5, L));
    let cfg = small_train_config();
    let parts = total_loss(&p, &t, &cfg).unwrap();

    let lt = temporal_loss(&p, &t).unwrap();
    let spectral = SpectralLoss::<f64>::new(&cfg.spectral, L).unwrap();
    let mut tape = Tape::new();
    let pv = tape.constant(Tensor::column(&p));
    let tv = tape.constant(Tensor::column(&t));
    let ls = spectral.apply(&mut tape, pv, tv).unwrap();
    let ls = tape.value(ls).item();
    assert!((parts.total - (lt + 0.1 * ls)).abs() <= 1e-7);
    assert!((parts.temporal - lt).abs() <= 1e-12);
}

#[test]
fn single_window_requires_a_fitting_window() {
    let cfg = TrainConfig { loss: LossVariant::SingleWindow { window: 600 }, ..small_train_config() };
    assert!(matches!(cfg.validate(L), Err(Error::Config { .. })));
    assert!(cfg.validate(CHUNK_LEN).is_ok());
    let bad = TrainConfig { adam: AdamConfig { lr: 0.0, ..AdamConfig::default() }, ..small_train_config() };
    assert!(matches!(bad.validate(L), Err(Error::Config { field, .. }) if field == "adam.lr"));
    let bad = TrainConfig { batch_size: 0, ..small_train_config() };
    assert!(bad.validate(L).is_err());
}

#[test]
fn adam_steps_shrink_under_constant_gradient() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::<f32>::zeros(&[4])).unwrap();
    let cfg = AdamConfig::default();
    let g = Tensor::<f32>::ones(&[4]);
    adam_step(&mut store, std::slice::from_ref(&g), 1, &cfg).unwrap();
    let d1 = store.get(0).value.data()[0];
    adam_step(&mut store, &[g], 2, &cfg).unwrap();
    let d2 = store.get(0).value.data()[0] - d1;
    assert!((d1 as f64 + 1e-4).abs() < 1e-9);
    assert!(d2.abs() <= d1.abs());
}

#[test]
fn zero_epochs_leave_model_untouched() {
    let mut model = small_model(1);
    let before = model.params().clone();
    let cfg = TrainConfig { epochs: 0, ..small_train_config() };
    let log = train(&mut model, &small_chunks(2), &[], &cfg, None).unwrap();
    assert!(log.epochs.is_empty());
    for (a, b) in before.iter().zip(model.params().iter()) {
        assert_eq!(a.value, b.value);
    }
    assert_eq!(model.step(), 0);
}

#[test]
fn empty_or_mismatched_datasets_are_rejected() {
    let mut model = small_model(1);
    assert!(train(&mut model, &[], &[], &small_train_config(), None).is_err());
    let mut chunks = small_chunks(1);
    chunks[0].radar.pop();
    assert!(matches!(
        train(&mut model, &chunks, &[], &small_train_config(), None),
        Err(Error::Dimension(_))
    ));
}

fn read_bytes(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join("checkpoints").join(name)).unwrap()
}

#[test]
fn training_writes_log_and_checkpoints() {
    let dir = tempdir().unwrap();
    let mut model = small_model(2);
    let log = train(&mut model, &small_chunks(4), &small_chunks(2)[..1], &small_train_config(), Some(dir.path())).unwrap();
    assert_eq!(log.epochs.len(), 3);
    // 4 chunks in batches of 2
    assert_eq!(model.step(), 6);
    let lines: Vec<String> = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 3);
    for (i, line) in lines.iter().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["epoch"], i + 1);
        assert!(v["loss"].as_f64().unwrap().is_finite());
    }
    // epoch 2 is a checkpoint epoch and evaluates the held-out chunk
    assert!(log.epochs[1].eval.is_some());
    assert!(dir.path().join("checkpoints/epoch_00002.json").exists());
    let last = checkpoint::load(&dir.path().join("checkpoints").join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(last.step(), 6);
    for (a, b) in last.params().iter().zip(model.params().iter()) {
        assert_eq!(a.value, b.value);
        assert_eq!(a.adam_v, b.adam_v);
    }
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let run = |dir: &Path| {
        let mut model = small_model(3);
        train(&mut model, &small_chunks(4), &[], &small_train_config(), Some(dir)).unwrap();
    };
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    run(a.path());
    run(b.path());
    assert_eq!(read_bytes(a.path(), "final.bin"), read_bytes(b.path(), "final.bin"));
    assert_eq!(read_bytes(a.path(), FINAL_CHECKPOINT), read_bytes(b.path(), FINAL_CHECKPOINT));
}

#[test]
fn serial_and_parallel_batches_agree() {
    let model = small_model(4);
    let objective = Objective::<f32>::new(&small_train_config(), L).unwrap();
    let chunks = small_chunks(3);
    let batch: Vec<&SignalChunk> = chunks.iter().collect();
    let (pa, ga) = batch_gradients(&model, &objective, &batch, false).unwrap();
    let (pb, gb) = batch_gradients(&model, &objective, &batch, true).unwrap();
    assert_eq!(pa, pb);
    assert_eq!(ga, gb);
}

#[test]
fn checkpoint_round_trip_then_step_matches() {
    let chunks = small_chunks(2);
    let cfg = TrainConfig { epochs: 2, batch_size: 2, ..small_train_config() };
    let mut model = small_model(5);
    train(&mut model, &chunks, &[], &cfg, None).unwrap();

    let dir = tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    checkpoint::save(&path, &model).unwrap();
    let mut restored = checkpoint::load(&path).unwrap();

    let one = TrainConfig { epochs: 1, ..cfg };
    train(&mut model, &chunks, &[], &one, None).unwrap();
    train(&mut restored, &chunks, &[], &one, None).unwrap();
    assert_eq!(model.step(), restored.step());
    for (a, b) in model.params().iter().zip(restored.params().iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
        assert_eq!(a.adam_m, b.adam_m);
    }
}

#[test]
fn checkpoint_rejects_incompatible_files() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    checkpoint::save(&path, &small_model(6)).unwrap();

    let mut wider = Model::new(ModelConfig { channels: 8, ..small_model(6).config().clone() }, 0).unwrap();
    assert!(matches!(checkpoint::load_into(&path, &mut wider), Err(Error::Checkpoint(_))));

    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, text.replace("\"format_version\": 1", "\"format_version\": 99")).unwrap();
    assert!(matches!(checkpoint::load(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn temporal_variant_never_touches_the_stft() {
    let chunks = small_chunks(2);
    let cfg = TrainConfig { loss: LossVariant::Temporal, epochs: 2, ..small_train_config() };
    let objective = Objective::<f32>::new(&cfg, L).unwrap();
    train_with(&mut small_model(7), &chunks, &[], &cfg, &objective, None).unwrap();
    assert_eq!(objective.stft_evaluations(), 0);

    let cfg = TrainConfig { epochs: 2, ..small_train_config() };
    let objective = Objective::<f32>::new(&cfg, L).unwrap();
    train_with(&mut small_model(7), &chunks, &[], &cfg, &objective, None).unwrap();
    assert!(objective.stft_evaluations() > 0);
}

#[test]
fn non_finite_loss_aborts_and_keeps_last_good() {
    let dir = tempdir().unwrap();
    let mut chunks = small_chunks(2);
    chunks[1].radar[10] = f32::NAN;
    let mut model = small_model(8);
    let before = model.params().clone();
    let cfg = TrainConfig { batch_size: 1, ..small_train_config() };
    let err = train(&mut model, &chunks, &[], &cfg, Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let saved = checkpoint::load(&dir.path().join("checkpoints").join(LAST_GOOD_CHECKPOINT)).unwrap();
    for (a, b) in saved.params().iter().zip(model.params().iter()) {
        assert_eq!(a.value, b.value);
        assert!(a.value.is_finite());
    }
    // depending on the shuffle the bad chunk came first or second
    assert!(model.step() <= 1);
    if model.step() == 0 {
        for (a, b) in before.iter().zip(model.params().iter()) {
            assert_eq!(a.value, b.value);
        }
    }
}

fn ecg_chunks() -> Vec<SignalChunk> {
    let pair = synthesize_pair(&SynthParams { seed: 12, ..SynthParams::default() }, 3.0 * 5.12).unwrap();
    chunk_recording(&pair.recording, CHUNK_LEN).unwrap()
}

#[test]
fn oracle_prediction_scores_perfectly() {
    let chunks = ecg_chunks();
    let report = evaluate_with(&chunks, |c| Ok(c.ecg.clone().unwrap())).unwrap();
    let a = &report.aggregate;
    assert_eq!(a.chunks, 3);
    assert!((a.pearson.unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(a.mre, Some(0.0));
    assert_eq!(a.mae_hr_bpm, Some(0.0));
    assert_eq!(a.mae_rmssd_ms, Some(0.0));
}

#[test]
fn zero_prediction_is_uncorrelated_with_unit_error() {
    let chunks = ecg_chunks();
    let report = evaluate_with(&chunks, |c| Ok(vec![0.0; c.radar.len()])).unwrap();
    assert_eq!(report.aggregate.pearson, Some(0.0));
    assert!((report.aggregate.mre.unwrap() - 1.0).abs() < 1e-12);
    assert!(report.chunks.iter().all(|c| c.pearson_degenerate));
}

#[test]
fn aggregates_are_means_and_missing_ecg_is_counted() {
    let mut chunks = ecg_chunks();
    chunks[2].ecg = None;
    let report = evaluate_with(&chunks, |c| {
        let shift = c.offset as f32 / 10_000.0;
        Ok(c.ecg.as_ref().unwrap().iter().map(|v| 0.8 * v + shift).collect())
    })
    .unwrap();
    assert_eq!(report.aggregate.excluded_without_ecg, 1);
    assert_eq!(report.chunks.len(), 2);
    let mean_rho = report.chunks.iter().map(|c| c.pearson).sum::<f64>() / 2.0;
    let mean_mre = report.chunks.iter().map(|c| c.mre.unwrap()).sum::<f64>() / 2.0;
    assert_eq!(report.aggregate.pearson, Some(mean_rho));
    assert_eq!(report.aggregate.mre, Some(mean_mre));
}
