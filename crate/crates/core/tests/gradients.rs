use std::sync::Arc;

use lifwavnet_core::autodiff::{check_gradients, random_projection, AttentionVars, Tape, Var};
use lifwavnet_core::network::{Model, ModelConfig};
use lifwavnet_core::spectral::{LossConfig, SpectralLoss, SpectralNorm, StftPlan, WindowKind};
use lifwavnet_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;
const SEEDS: [u64; 3] = [11, 12, 13];

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn assert_grad<F>(label: &str, f: F, inputs: &[Tensor<f64>], tol: f64)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let report = check_gradients(f, inputs, EPS).unwrap();
    assert!(
        report.max_rel_error < tol,
        "{label}: max relative error {:.3e} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn conv1d_stride_one_and_two() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for stride in [1, 2] {
            let x = rand_tensor(&mut rng, &[12, 3], 1.0);
            let w = rand_tensor(&mut rng, &[4, 3, 5], 0.5);
            let b = rand_tensor(&mut rng, &[4], 0.5);
            assert_grad(
                "conv1d",
                |t, v| {
                    let y = t.conv1d(v[0], v[1], Some(v[2]), stride)?;
                    random_projection(t, y, seed)
                },
                &[x, w, b],
                TOL,
            );
        }
    }
}

#[test]
fn conv1d_transposed_matches_differences() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[6, 4], 1.0);
        let w = rand_tensor(&mut rng, &[4, 2, 7], 0.5);
        let b = rand_tensor(&mut rng, &[2], 0.5);
        assert_grad(
            "conv1d_transposed",
            |t, v| {
                let y = t.conv1d_transposed(v[0], v[1], Some(v[2]), 2)?;
                random_projection(t, y, seed)
            },
            &[x, w, b],
            TOL,
        );
    }
}

#[test]
fn self_attention_matches_differences() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = vec![rand_tensor(&mut rng, &[7, 8], 1.0)];
        for _ in 0..4 {
            inputs.push(rand_tensor(&mut rng, &[8, 8], 0.4));
            inputs.push(rand_tensor(&mut rng, &[8], 0.2));
        }
        // the key bias shifts every score of a row equally, so its gradient
        // is identically zero; it is held fixed here
        let bk = inputs.remove(4);
        assert_grad(
            "self_attention",
            |t, v| {
                let p = AttentionVars {
                    wq: v[1],
                    bq: v[2],
                    wk: v[3],
                    bk: t.constant(bk.clone()),
                    wv: v[4],
                    bv: v[5],
                    wo: v[6],
                    bo: v[7],
                };
                let y = t.self_attention(v[0], p, 4)?;
                random_projection(t, y, seed)
            },
            &inputs,
            TOL,
        );
    }
}

#[test]
fn layer_norm_regular_and_near_constant() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[5, 6], 1.0);
        let g = rand_tensor(&mut rng, &[6], 1.0);
        let b = rand_tensor(&mut rng, &[6], 1.0);
        let f = |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            random_projection(t, y, seed)
        };
        assert_grad("layer_norm", f, &[x, g.clone(), b.clone()], TOL);

        // rows whose variance is on the order of eps
        let base: f64 = rng.random_range(-1.0..1.0);
        let x = Tensor::from_fn(&[5, 6], |_| base + rng.random_range(-3e-3..3e-3));
        assert_grad("layer_norm near constant", f, &[x, g, b], 1e-3);
    }
}

#[test]
fn pointwise_ops() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[9, 2], 2.0);
        let b = rand_tensor(&mut rng, &[9, 2], 2.0);
        assert_grad(
            "relu/sigmoid/abs",
            |t, v| {
                let r = t.relu(v[0]);
                let s = t.sigmoid(v[1]);
                let d = t.abs(v[1]);
                let m = t.mul(r, s)?;
                let m = t.add(m, d)?;
                random_projection(t, m, seed)
            },
            &[a.clone(), b.clone()],
            TOL,
        );
        assert_grad(
            "add/sub/mul/scale",
            |t, v| {
                let s = t.sub(v[0], v[1])?;
                let p = t.mul(s, v[0])?;
                let q = t.add(p, v[1])?;
                let q = t.scale(q, -1.7);
                let m = t.mean(q);
                let r = random_projection(t, q, seed)?;
                t.add(m, r)
            },
            &[a, b],
            TOL,
        );
    }
}

#[test]
fn channel_ops() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[5, 8], 1.0);
        let gate = rand_tensor(&mut rng, &[1, 4], 1.0);
        assert_grad(
            "split/concat/shuffle/pool/gate",
            |t, v| {
                let (lo, hi) = t.split_halves(v[0])?;
                let c = t.concat(&[hi, lo])?;
                let s = t.shuffle(c, 4)?;
                let u = t.unshuffle(s, 2)?;
                let (a, _) = t.split_halves(u)?;
                let g = t.channel_gate(a, v[1])?;
                let p = t.global_avg_pool(g)?;
                let r1 = random_projection(t, p, seed)?;
                let r2 = random_projection(t, g, seed + 1)?;
                t.add(r1, r2)
            },
            &[x, gate],
            TOL,
        );
    }
}

#[test]
fn stft_and_spectral_losses() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[64, 1], 1.0);
        let plan = Arc::new(StftPlan::<f64>::with_kind(16, 4, WindowKind::Hann).unwrap());
        assert_grad(
            "stft",
            |t, v| {
                let s = t.stft(v[0], plan.clone())?;
                random_projection(t, s, seed)
            },
            std::slice::from_ref(&x),
            TOL,
        );
        assert_grad(
            "complex_abs",
            |t, v| {
                let s = t.stft(v[0], plan.clone())?;
                let m = t.complex_abs(s)?;
                random_projection(t, m, seed)
            },
            std::slice::from_ref(&x),
            TOL,
        );
        let target = rand_tensor(&mut rng, &[64, 1], 1.0);
        for norm in [SpectralNorm::ComplexL1, SpectralNorm::MagnitudeL1] {
            let cfg = LossConfig {
                windows: vec![32, 16, 8],
                norm,
                ..LossConfig::default()
            };
            let loss = SpectralLoss::<f64>::new(&cfg, 64).unwrap();
            assert_grad(
                "spectral loss",
                |t, v| {
                    let tg = t.constant(target.clone());
                    loss.apply(t, v[0], tg)
                },
                std::slice::from_ref(&x),
                TOL,
            );
        }
    }
}

fn reduced_config() -> ModelConfig {
    ModelConfig {
        length: 64,
        channels: 4,
        scales: 2,
        ..ModelConfig::default()
    }
}

#[test]
fn reduced_model_end_to_end() {
    let model = Model::new(reduced_config(), 5).unwrap();
    let params = model.params().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    // Zero biases behind a fully dead single-filter ReLU put the next
    // pre-activation exactly on the kink, so biases are drawn at random.
    let mut inputs: Vec<Tensor<f64>> = params
        .iter()
        .map(|p| {
            if p.name.ends_with("bias") || p.name.ends_with("beta") {
                rand_tensor(&mut rng, p.value.shape(), 0.05)
            } else {
                p.value.clone()
            }
        })
        .collect();
    let n = inputs.len();
    inputs.push(rand_tensor(&mut rng, &[64, 1], 1.0));
    let net = model.network();
    assert_grad(
        "model",
        |t, v| {
            let y = net.forward(t, &v[..n], v[n])?;
            random_projection(t, y, 3)
        },
        &inputs,
        TOL,
    );
}
