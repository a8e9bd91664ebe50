use lifwavnet_core::autodiff::{Tape, Var};
use lifwavnet_core::network::lifting::{lift, polyphase_merge_kernel, polyphase_split_kernel, unlift};
use lifwavnet_core::network::{
    count_params_flops, FeatureStage, InverseLiftingUnit, LiftingUnit, Model, ModelConfig, PredictUpdateBlock,
    Resampling, SplitInit,
};
use lifwavnet_core::params::ParamStore;
use lifwavnet_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(channels: usize) -> ModelConfig {
    ModelConfig {
        length: 64,
        scales: 2,
        channels,
        csconv_kernels: vec![3, 5, 7, 9],
        projection_kernel: 5,
        split_kernel: 5,
        ..ModelConfig::default()
    }
}

fn random_signal(rng: &mut ChaCha8Rng, len: usize, ch: usize) -> Tensor<f32> {
    Tensor::from_fn(&[len, ch], |_| rng.random_range(-1.0..1.0))
}

fn max_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn haar_lifting_on_four_samples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::column(&[1.0, 2.0, 3.0, 4.0]));
    let w = tape.constant(polyphase_split_kernel(1, 3));
    let f1 = tape.conv1d(x, w, None, 2).unwrap();
    let (f_e, f_o) = tape.split_halves(f1).unwrap();
    let (f_a, f_d) = lift(&mut tape, f_e, f_o, |_, v| Ok(v), |t, v| Ok(t.scale(v, 0.5))).unwrap();
    assert_eq!(tape.value(f_d).data(), &[-1.0, -1.0]);
    assert_eq!(tape.value(f_a).data(), &[1.5, 3.5]);
}

#[test]
fn lazy_wavelet_and_its_inverse() {
    let cfg = small_config(4).without_blocks();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let lu = LiftingUnit::register(&mut store, "lu", &cfg, &mut rng).unwrap();
    let ilu = InverseLiftingUnit::register(&mut store, "ilu", &cfg, &mut rng).unwrap();
    assert!(store.is_empty());

    let zero = |t: &mut Tape<f32>, v: Var| Ok(t.scale(v, 0.0));
    let mut tape = Tape::<f32>::new();
    let data = random_signal(&mut rng, 16, 4);
    let x = tape.constant(data.clone());
    let (f_e, f_o) = lu.split(&mut tape, &[], x).unwrap();
    let (f_a, f_d) = lift(&mut tape, f_e, f_o, zero, zero).unwrap();
    for t in 0..8 {
        for c in 0..4 {
            assert_eq!(tape.value(f_d).at(t, c), data.at(2 * t, c));
            assert_eq!(tape.value(f_a).at(t, c), data.at(2 * t + 1, c));
        }
    }
    // the lazy inverse puts g_d on even and g_a on odd positions
    let (g_o, g_e) = unlift(&mut tape, f_a, f_d, zero, zero).unwrap();
    let g = ilu.merge(&mut tape, &[], g_o, g_e).unwrap();
    assert_eq!(tape.value(g).data(), data.data());
}

#[test]
fn blocks_off_still_invert() {
    // disabled blocks are identities, so P(x) = U(x) = x
    let model = Model::new(small_config(4).without_blocks(), 0).unwrap();
    let mut tape = Tape::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let data = random_signal(&mut rng, 16, 4);
    let x = tape.constant(data.clone());
    let lu = &model.network().lus[0];
    let (f_a, f_d) = lu.forward(&mut tape, &[], x).unwrap();
    for t in 0..8 {
        for c in 0..4 {
            let (e, o) = (data.at(2 * t, c), data.at(2 * t + 1, c));
            assert_eq!(tape.value(f_d).at(t, c), e - o);
            assert_eq!(tape.value(f_a).at(t, c), o + (e - o));
        }
    }
    let g = model.network().ilus[0].forward(&mut tape, &[], f_a, f_d).unwrap();
    assert!(max_diff(tape.value(g).data(), data.data()) <= 1e-6);
}

#[test]
fn odd_length_and_mismatched_shapes_are_rejected() {
    let cfg = small_config(4).without_blocks();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let lu = LiftingUnit::register(&mut store, "lu", &cfg, &mut rng).unwrap();
    let ilu = InverseLiftingUnit::register(&mut store, "ilu", &cfg, &mut rng).unwrap();
    let mut tape = Tape::<f32>::new();
    let odd = tape.constant(Tensor::zeros(&[15, 4]));
    assert!(lu.forward(&mut tape, &[], odd).is_err());
    let a = tape.constant(Tensor::zeros(&[8, 4]));
    let d = tape.constant(Tensor::zeros(&[4, 4]));
    assert!(ilu.forward(&mut tape, &[], a, d).is_err());
}

/// LU followed by an ILU sharing its P/U and using the exact inverse
/// resampling, evaluated at f32. Returns the max abs error of (g_o, g_e)
/// against (f_o, f_e) and of the merged output against the input.
fn round_trip_error(seed: u64) -> (f32, f32) {
    let cfg = ModelConfig {
        learnable_split: false,
        learnable_merge: false,
        ..small_config(8)
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lu = LiftingUnit::register(&mut store, "lu", &cfg, &mut rng).unwrap();
    // random biases too, so no parameter sits at its initial zero
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let ilu = InverseLiftingUnit::mirror_of(&lu, Resampling::Polyphase);
    let mut tape = Tape::<f32>::new();
    let pv = store.bind(&mut tape);
    let data = random_signal(&mut rng, 32, 8);
    let x = tape.constant(data.clone());
    let (f_e, f_o) = lu.split(&mut tape, &pv, x).unwrap();
    let (f_a, f_d) = lu.forward(&mut tape, &pv, x).unwrap();
    let (g_o, g_e) = unlift(
        &mut tape,
        f_a,
        f_d,
        |t, v| lu.predict.forward(t, &pv, v),
        |t, v| lu.update.forward(t, &pv, v),
    )
    .unwrap();
    let parts = max_diff(tape.value(g_o).data(), tape.value(f_o).data())
        .max(max_diff(tape.value(g_e).data(), tape.value(f_e).data()));
    let g = ilu.forward(&mut tape, &pv, f_a, f_d).unwrap();
    (parts, max_diff(tape.value(g).data(), data.data()))
}

#[test]
fn lifting_inverse_for_random_parameterizations() {
    for seed in 0..20 {
        let (parts, full) = round_trip_error(seed);
        assert!(parts <= 1e-5, "seed {seed}: component error {parts}");
        assert!(full <= 1e-5, "seed {seed}: signal error {full}");
    }
}

#[test]
fn polyphase_split_then_merge_is_identity() {
    for k in [3, 31] {
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let mut tape = Tape::<f32>::new();
        let data = random_signal(&mut rng, 64, 4);
        let x = tape.constant(data.clone());
        let ws = tape.constant(polyphase_split_kernel(4, k));
        let wm = tape.constant(polyphase_merge_kernel(4, k));
        let f1 = tape.conv1d(x, ws, None, 2).unwrap();
        let (e, o) = tape.split_halves(f1).unwrap();
        // synthesis concatenates (odd, even)
        let g1 = tape.concat(&[o, e]).unwrap();
        let y = tape.conv1d_transposed(g1, wm, None, 2).unwrap();
        assert!(max_diff(tape.value(y).data(), data.data()) <= 1e-5);
    }
}

#[test]
fn polyphase_initialized_learnable_model_reconstructs() {
    let cfg = ModelConfig {
        split_init: SplitInit::Polyphase,
        ..small_config(4)
    }
    .without_blocks();
    let cfg = ModelConfig {
        learnable_split: true,
        learnable_merge: true,
        ..cfg
    };
    let mut model = Model::new(cfg, 3).unwrap();
    for name in ["inproj.weight", "outproj.weight"] {
        let p = model.params_mut().by_name_mut(name).unwrap();
        p.value.fill(0.0);
        p.value.data_mut()[2] = 1.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = model.infer(&x).unwrap();
    assert!(max_diff(&x, &y) <= 1e-5);
}

#[test]
fn block_with_everything_off_is_identity() {
    let cfg = small_config(8).without_blocks();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let block = PredictUpdateBlock::register(&mut store, "b", &cfg, &mut rng).unwrap();
    let mut tape = Tape::<f32>::new();
    let data = random_signal(&mut rng, 10, 8);
    let x = tape.constant(data.clone());
    let y = block.forward(&mut tape, &[], x).unwrap();
    assert_eq!(tape.value(y).data(), data.data());
}

#[test]
fn block_zero_input_zero_biases_gives_zero() {
    let cfg = small_config(8);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let block = PredictUpdateBlock::register(&mut store, "b", &cfg, &mut rng).unwrap();
    let mut tape = Tape::<f32>::new();
    let pv = store.bind(&mut tape);
    let x = tape.constant(Tensor::zeros(&[12, 8]));
    let y = block.forward(&mut tape, &pv, x).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_fixture_reproduces_input() {
    let model = Model::identity(1024, 4, 8).unwrap();
    let x: Vec<f32> = (0..1024).map(|i| (i as f32 * 0.05).sin()).collect();
    assert_eq!(model.infer(&x).unwrap(), x);
}

#[test]
fn zero_parameters_give_zero_output() {
    let mut model = Model::new(small_config(4), 9).unwrap();
    for p in model.params_mut().iter_mut() {
        p.value.fill(0.0);
    }
    let x: Vec<f32> = (0..64).map(|i| i as f32 / 64.0).collect();
    assert!(model.infer(&x).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn wrong_input_length_is_rejected() {
    let model = Model::new(small_config(4), 0).unwrap();
    assert!(model.infer(&[0.0; 63]).is_err());
    assert!(model.infer(&[0.0; 128]).is_err());
}

#[test]
fn feature_dumps_follow_scale_geometry() {
    let cfg = ModelConfig {
        csconv_kernels: vec![3, 5, 7, 9],
        ..ModelConfig::desk()
    };
    let model = Model::new(cfg, 1).unwrap();
    let x: Vec<f32> = (0..1024).map(|i| (i as f32 * 0.02).cos()).collect();
    let dumps = model.export_intermediate_features(&x).unwrap();
    assert_eq!(dumps.len(), 14);
    for d in &dumps {
        let expected = match d.stage {
            FeatureStage::InputProjection => 1024,
            FeatureStage::OutputProjection => 1024,
            FeatureStage::AnalysisApprox | FeatureStage::AnalysisDetail => 1024 >> d.scale,
            FeatureStage::SynthesisApprox => 1024 >> (d.scale - 1),
        };
        assert_eq!(d.values.rows(), expected, "{}", d.name);
        let ch = if d.stage == FeatureStage::OutputProjection { 1 } else { 8 };
        assert_eq!(d.values.channels(), ch, "{}", d.name);
    }
    let again = model.export_intermediate_features(&x).unwrap();
    for (a, b) in dumps.iter().zip(&again) {
        assert_eq!(a.values.data(), b.values.data());
    }
}

#[test]
fn parameter_sharing_toggle() {
    let cfg = ModelConfig {
        share_analysis_params: true,
        scales: 3,
        ..small_config(4)
    };
    let mut shared = Model::new(cfg.clone(), 7).unwrap();
    let cfg_ns = ModelConfig {
        share_analysis_params: false,
        ..cfg
    };
    let mut unshared = Model::new(cfg_ns, 7).unwrap();
    // LU3 run on a fixed input, so only its own parameters matter
    let lu3_out = |m: &Model| {
        let net = m.network();
        let mut tape = Tape::<f32>::new();
        let pv = m.params().bind(&mut tape);
        let x = tape.constant(Tensor::from_fn(&[16, 4], |i| (i as f32 * 0.7).sin()));
        let (a, _) = net.lus[2].forward(&mut tape, &pv, x).unwrap();
        tape.value(a).clone()
    };
    let bump = |m: &mut Model, name: &str| {
        for v in m.params_mut().by_name_mut(name).unwrap().value.data_mut() {
            *v += 0.25;
        }
    };
    let before = lu3_out(&shared);
    bump(&mut shared, "lu.shared.predict.csconv.0.weight");
    assert_ne!(before.data(), lu3_out(&shared).data());

    let before = lu3_out(&unshared);
    bump(&mut unshared, "lu.1.predict.csconv.0.weight");
    assert_eq!(before.data(), lu3_out(&unshared).data());
}

#[test]
fn shared_models_have_fewer_parameters() {
    let base = count_params_flops(&ModelConfig::desk()).unwrap().params;
    for (a, s) in [(true, false), (false, true), (true, true)] {
        let cfg = ModelConfig {
            share_analysis_params: a,
            share_synthesis_params: s,
            ..ModelConfig::desk()
        };
        assert!(count_params_flops(&cfg).unwrap().params < base);
    }
}

#[test]
fn projection_only_parameter_count() {
    for c in [4, 8, 32] {
        let cfg = ModelConfig {
            channels: c,
            ..ModelConfig::default()
        }
        .without_blocks();
        let n = count_params_flops(&cfg).unwrap().params;
        assert_eq!(n, 2 * 31 * c + c + 1);
    }
}

#[test]
fn paper_profile_parameter_count_near_reference() {
    let report = count_params_flops(&ModelConfig::paper()).unwrap();
    assert!((690_000..=1_290_000).contains(&report.params), "{}", report.params);
    assert!(report.flops > 0);
}

#[test]
fn doubling_channels_roughly_quadruples_parameters() {
    let a = count_params_flops(&ModelConfig::paper()).unwrap().params as f64;
    let b = count_params_flops(&ModelConfig {
        channels: 64,
        ..ModelConfig::paper()
    })
    .unwrap()
    .params as f64;
    let ratio = b / a;
    assert!((3.5..=4.5).contains(&ratio), "{ratio}");
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        ModelConfig {
            heads: 3,
            ..ModelConfig::desk()
        },
        ModelConfig {
            length: 1000,
            ..ModelConfig::desk()
        },
        ModelConfig {
            reduction: 3,
            ..ModelConfig::desk()
        },
        ModelConfig {
            split_kernel: 4,
            ..ModelConfig::desk()
        },
    ];
    for cfg in bad {
        assert!(Model::new(cfg, 0).is_err());
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let model = Model::new(small_config(8), 21).unwrap();
    let mut tape = Tape::<f32>::new();
    let pv: Vec<Var> = model.params().bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = tape.constant(random_signal(&mut rng, 64, 1));
    let y = model.network().forward(&mut tape, &pv, x).unwrap();
    let t = tape.constant(random_signal(&mut rng, 64, 1));
    let d = tape.sub(y, t).unwrap();
    let a = tape.abs(d);
    let loss = tape.mean(a);
    tape.backward(loss).unwrap();
    let dead: Vec<&str> = model
        .params()
        .iter()
        .zip(&pv)
        .filter(|(_, &v)| tape.grad(v).max_abs() == 0.0)
        .map(|(p, _)| p.name.as_str())
        .collect();
    assert!(dead.is_empty(), "no gradient reached {dead:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn lifting_round_trip_holds_for_any_parameters(seed in any::<u64>()) {
        let (parts, full) = round_trip_error(seed);
        prop_assert!(parts <= 1e-5);
        prop_assert!(full <= 1e-5);
    }

    #[test]
    fn model_preserves_length(scales in 1usize..=4, seed in any::<u64>()) {
        let cfg = ModelConfig { scales, ..small_config(4) };
        let model = Model::new(cfg, seed).unwrap();
        let x: Vec<f32> = (0..64).map(|i| ((i as u64 ^ seed) % 7) as f32 / 7.0).collect();
        let y = model.infer(&x).unwrap();
        prop_assert_eq!(y.len(), 64);
        prop_assert!(y.iter().all(|v| v.is_finite()));
    }
}
