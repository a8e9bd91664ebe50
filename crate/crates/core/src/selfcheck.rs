//! Embedded verification suite: gradient checks, lifting inversion, STFT
//! against a direct DFT, and metric oracles.

use std::f64::consts::PI;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::gradcheck::check_with_bias;
use crate::autodiff::{random_projection, AttentionVars, Tape, Var};
use crate::error::Result;
use crate::network::lifting::unlift;
use crate::network::{InverseLiftingUnit, LiftingUnit, Model, ModelConfig, Resampling};
use crate::params::ParamStore;
use crate::spectral::{LossConfig, SpectralLoss, StftPlan, WindowKind};
use crate::tensor::Tensor;
use crate::vitals::{mre, pearson};

const GRAD_TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

/// Names of the gradient checks, usable with [`SelfCheckOptions::corrupt`].
pub const GRADIENT_CHECKS: [&str; 8] = [
    "conv1d",
    "conv1d_transposed",
    "self_attention",
    "layer_norm",
    "pointwise",
    "stft",
    "spectral_loss",
    "model",
];

#[derive(Clone, Debug, Default)]
pub struct SelfCheckOptions {
    /// Bias the analytic gradient of this check, to prove failures surface.
    pub corrupt: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SelfCheckReport {
    pub checks: Vec<CheckResult>,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

type Objective<'a> = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a>;

fn gradient_case<'a>(name: &str, rng: &mut ChaCha8Rng) -> Result<(Objective<'a>, Vec<Tensor<f64>>)> {
    Ok(match name {
        "conv1d" => {
            let inputs = vec![
                rand_tensor(rng, &[12, 3], 1.0),
                rand_tensor(rng, &[4, 3, 5], 0.5),
                rand_tensor(rng, &[4], 0.5),
            ];
            let f: Objective = Box::new(|t, v| {
                let y = t.conv1d(v[0], v[1], Some(v[2]), 2)?;
                random_projection(t, y, 1)
            });
            (f, inputs)
        }
        "conv1d_transposed" => {
            let inputs = vec![
                rand_tensor(rng, &[6, 4], 1.0),
                rand_tensor(rng, &[4, 2, 7], 0.5),
                rand_tensor(rng, &[2], 0.5),
            ];
            let f: Objective = Box::new(|t, v| {
                let y = t.conv1d_transposed(v[0], v[1], Some(v[2]), 2)?;
                random_projection(t, y, 2)
            });
            (f, inputs)
        }
        "self_attention" => {
            let mut inputs = vec![rand_tensor(rng, &[7, 8], 1.0)];
            for _ in 0..4 {
                inputs.push(rand_tensor(rng, &[8, 8], 0.4));
                inputs.push(rand_tensor(rng, &[8], 0.2));
            }
            // the key bias has an identically zero gradient and stays fixed
            let bk = inputs.remove(4);
            let f: Objective = Box::new(move |t, v| {
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
                random_projection(t, y, 3)
            });
            (f, inputs)
        }
        "layer_norm" => {
            let inputs = vec![
                rand_tensor(rng, &[5, 6], 1.0),
                rand_tensor(rng, &[6], 1.0),
                rand_tensor(rng, &[6], 1.0),
            ];
            let f: Objective = Box::new(|t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                random_projection(t, y, 4)
            });
            (f, inputs)
        }
        "pointwise" => {
            let inputs = vec![rand_tensor(rng, &[9, 4], 1.0), rand_tensor(rng, &[9, 4], 1.0)];
            let f: Objective = Box::new(|t, v| {
                let s = t.sigmoid(v[0]);
                let r = t.relu(v[1]);
                let m = t.mul(s, r)?;
                let pooled = t.global_avg_pool(m)?;
                let gated = t.channel_gate(v[0], pooled)?;
                let sh = t.shuffle(gated, 2)?;
                random_projection(t, sh, 5)
            });
            (f, inputs)
        }
        "stft" => {
            let plan = Arc::new(StftPlan::<f64>::with_kind(16, 4, WindowKind::Hann)?);
            let f: Objective = Box::new(move |t, v| {
                let s = t.stft(v[0], plan.clone())?;
                let m = t.complex_abs(s)?;
                random_projection(t, m, 6)
            });
            (f, vec![rand_tensor(rng, &[64, 1], 1.0)])
        }
        "spectral_loss" => {
            let cfg = LossConfig {
                windows: vec![32, 16, 8],
                ..LossConfig::default()
            };
            let loss = SpectralLoss::<f64>::new(&cfg, 64)?;
            let target = rand_tensor(rng, &[64, 1], 1.0);
            let f: Objective = Box::new(move |t, v| {
                let tg = t.constant(target.clone());
                loss.apply(t, v[0], tg)
            });
            (f, vec![rand_tensor(rng, &[64, 1], 1.0)])
        }
        "model" => {
            let cfg = ModelConfig {
                length: 64,
                channels: 4,
                scales: 2,
                ..ModelConfig::default()
            };
            let model = Model::new(cfg, 5)?;
            let mut inputs: Vec<Tensor<f64>> = model
                .params()
                .cast::<f64>()
                .iter()
                .map(|p| {
                    // zero biases can sit exactly on a ReLU kink
                    if p.name.ends_with("bias") || p.name.ends_with("beta") {
                        rand_tensor(rng, p.value.shape(), 0.05)
                    } else {
                        p.value.clone()
                    }
                })
                .collect();
            let n = inputs.len();
            inputs.push(rand_tensor(rng, &[64, 1], 1.0));
            let f: Objective = Box::new(move |t, v| {
                let y = model.network().forward(t, &v[..n], v[n])?;
                random_projection(t, y, 7)
            });
            (f, inputs)
        }
        other => unreachable!("unknown gradient check {other}"),
    })
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn lifting_round_trip(seeds: u64) -> Result<(bool, String)> {
    let cfg = ModelConfig {
        length: 64,
        channels: 8,
        scales: 2,
        csconv_kernels: vec![3, 5, 7, 9],
        projection_kernel: 5,
        split_kernel: 5,
        learnable_split: false,
        learnable_merge: false,
        ..ModelConfig::default()
    };
    let mut worst = 0.0f32;
    for seed in 0..seeds {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lu = LiftingUnit::register(&mut store, "lu", &cfg, &mut rng)?;
        for p in store.iter_mut() {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        let ilu = InverseLiftingUnit::mirror_of(&lu, Resampling::Polyphase);
        let mut tape = Tape::<f32>::new();
        let pv = store.bind(&mut tape);
        let data = Tensor::from_fn(&[32, 8], |_| rng.random_range(-1.0..1.0));
        let x = tape.constant(data.clone());
        let (f_e, f_o) = lu.split(&mut tape, &pv, x)?;
        let (f_a, f_d) = lu.forward(&mut tape, &pv, x)?;
        let (g_o, g_e) = unlift(
            &mut tape,
            f_a,
            f_d,
            |t, v| lu.predict.forward(t, &pv, v),
            |t, v| lu.update.forward(t, &pv, v),
        )?;
        let y = ilu.forward(&mut tape, &pv, f_a, f_d)?;
        let diff = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        worst = worst
            .max(diff(tape.value(g_o).data(), tape.value(f_o).data()))
            .max(diff(tape.value(g_e).data(), tape.value(f_e).data()))
            .max(diff(tape.value(y).data(), data.data()));
    }
    Ok((worst <= 1e-5, format!("max abs error {worst:.2e} over {seeds} parameterizations")))
}

fn stft_oracle() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut worst = 0.0f64;
    for (win, hop) in [(64usize, 16usize), (32, 8)] {
        let plan = StftPlan::<f64>::with_kind(win, hop, WindowKind::Hann)?;
        let w = WindowKind::Hann.weights(win)?;
        let spec = plan.forward(&x)?;
        for t in 0..plan.frames(x.len()) {
            for k in 0..plan.bins() {
                let (mut re, mut im) = (0.0, 0.0);
                for n in 0..win {
                    let a = -2.0 * PI * (k * n) as f64 / win as f64;
                    re += x[t * hop + n] * w[n] * a.cos();
                    im += x[t * hop + n] * w[n] * a.sin();
                }
                let o = (t * plan.bins() + k) * 2;
                worst = worst.max((spec.data()[o] - re).abs()).max((spec.data()[o + 1] - im).abs());
            }
        }
    }
    let loss = SpectralLoss::<f64>::new(&LossConfig { windows: vec![64, 32], ..LossConfig::default() }, 256)?;
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::column(&x));
    let b = tape.constant(Tensor::column(&x));
    let l = loss.apply(&mut tape, a, b)?;
    let self_loss = tape.value(l).item();
    Ok((
        worst <= 1e-5 && self_loss == 0.0,
        format!("max entry error {worst:.2e}; loss(x, x) = {self_loss}"),
    ))
}

fn metric_oracles() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..64);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ma = a.iter().sum::<f64>() / n as f64;
        let mb = b.iter().sum::<f64>() / n as f64;
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        worst = worst.max((pearson(&a, &b)? - cov / (va * vb).sqrt()).abs());
        let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        let den: f64 = a.iter().map(|x| x.abs()).sum();
        worst = worst.max((mre(&a, &b)?.unwrap_or(f64::NAN) - num / den).abs());
    }
    Ok((worst <= 1e-9, format!("max deviation {worst:.2e}")))
}

/// Runs every check and reports each one; never stops early.
pub fn run(opts: &SelfCheckOptions) -> SelfCheckReport {
    let mut checks = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for name in GRADIENT_CHECKS {
        let bias = if opts.corrupt.as_deref() == Some(name) { 1e-2 } else { 0.0 };
        checks.push(timed(&format!("gradient/{name}"), || {
            let (f, inputs) = gradient_case(name, &mut rng)?;
            let r = check_with_bias(f, &inputs, EPS, bias)?;
            Ok((
                r.max_rel_error < GRAD_TOL,
                format!("max relative error {:.2e} over {} entries", r.max_rel_error, r.entries),
            ))
        }));
    }
    checks.push(timed("lifting/round_trip", || lifting_round_trip(20)));
    checks.push(timed("stft/direct_dft", stft_oracle));
    checks.push(timed("metrics/brute_force", metric_oracles));
    SelfCheckReport { checks }
}
