use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::block::{ConvParams, PredictUpdateBlock};
use super::config::{CsConvLayout, ModelConfig};
use super::lifting::{InverseLiftingUnit, LiftingUnit, Resampling};
use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Where a dumped intermediate feature was taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureStage {
    InputProjection,
    AnalysisApprox,
    AnalysisDetail,
    SynthesisApprox,
    OutputProjection,
}

#[derive(Clone, Debug)]
pub struct FeatureTap {
    pub name: String,
    pub stage: FeatureStage,
    /// 1-based scale index; 0 for the projections.
    pub scale: usize,
    pub var: Var,
}

/// Structure of the network: which parameters each layer reads.
#[derive(Clone, Debug)]
pub struct Network {
    pub in_proj: ConvParams,
    pub lus: Vec<LiftingUnit>,
    pub ilus: Vec<InverseLiftingUnit>,
    pub out_proj: ConvParams,
    pub length: usize,
}

impl Network {
    pub fn register(store: &mut ParamStore<f32>, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.channels;
        let in_proj = ConvParams::register(store, "inproj", 1, c, cfg.projection_kernel, &mut rng)?;
        let lus = if cfg.share_analysis_params {
            let shared = LiftingUnit::register(store, "lu.shared", cfg, &mut rng)?;
            vec![shared; cfg.scales]
        } else {
            (0..cfg.scales)
                .map(|i| LiftingUnit::register(store, &format!("lu.{}", i + 1), cfg, &mut rng))
                .collect::<Result<_>>()?
        };
        let ilus = if cfg.share_synthesis_params {
            let shared = InverseLiftingUnit::register(store, "ilu.shared", cfg, &mut rng)?;
            vec![shared; cfg.scales]
        } else {
            (0..cfg.scales)
                .map(|i| InverseLiftingUnit::register(store, &format!("ilu.{}", i + 1), cfg, &mut rng))
                .collect::<Result<_>>()?
        };
        let out_proj = ConvParams::register(store, "outproj", c, 1, cfg.projection_kernel, &mut rng)?;
        Ok(Network {
            in_proj,
            lus,
            ilus,
            out_proj,
            length: cfg.length,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, pv: &[Var], input: Var) -> Result<Var> {
        Ok(self.forward_with_features(tape, pv, input)?.0)
    }

    /// Runs the model and also returns every intermediate feature.
    pub fn forward_with_features<T: Real>(
        &self,
        tape: &mut Tape<T>,
        pv: &[Var],
        input: Var,
    ) -> Result<(Var, Vec<FeatureTap>)> {
        let (len, ch) = tape.value(input).seq_dims()?;
        if len != self.length || ch != 1 {
            return Err(dim_err!(
                "model expects input [{}, 1], got [{}, {}]",
                self.length,
                len,
                ch
            ));
        }
        let mut taps = Vec::with_capacity(3 * self.lus.len() + 2);
        let tap = |taps: &mut Vec<FeatureTap>, name: String, stage, scale, var| {
            taps.push(FeatureTap {
                name,
                stage,
                scale,
                var,
            })
        };

        let mut approx = self.in_proj.apply(tape, pv, input, 1)?;
        tap(&mut taps, "inproj".into(), FeatureStage::InputProjection, 0, approx);
        let mut details = Vec::with_capacity(self.lus.len());
        for (i, lu) in self.lus.iter().enumerate() {
            let (f_a, f_d) = lu.forward(tape, pv, approx)?;
            tap(&mut taps, format!("lu{}_approx", i + 1), FeatureStage::AnalysisApprox, i + 1, f_a);
            tap(&mut taps, format!("lu{}_detail", i + 1), FeatureStage::AnalysisDetail, i + 1, f_d);
            details.push(f_d);
            approx = f_a;
        }
        // the deepest approximation enters synthesis unchanged
        let mut g = approx;
        for (i, ilu) in self.ilus.iter().enumerate().rev() {
            g = ilu.forward(tape, pv, g, details[i])?;
            tap(&mut taps, format!("ilu{}_approx", i + 1), FeatureStage::SynthesisApprox, i + 1, g);
        }
        let out = self.out_proj.apply(tape, pv, g, 1)?;
        tap(&mut taps, "outproj".into(), FeatureStage::OutputProjection, 0, out);
        Ok((out, taps))
    }
}

/// A configured network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore<f32>,
    network: Network,
    seed: u64,
    step: u64,
}

/// One dumped intermediate feature.
#[derive(Clone, Debug)]
pub struct FeatureDump {
    pub name: String,
    pub stage: FeatureStage,
    pub scale: usize,
    pub values: Tensor<f32>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let network = Network::register(&mut params, &config, seed)?;
        Ok(Model {
            config,
            params,
            network,
            seed,
            step: 0,
        })
    }

    /// A model that reproduces its input bitwise: fixed polyphase
    /// split/merge, all-zero multi-kernel convolutions as P and U (so the
    /// lifting steps add exact zeros), delta-kernel projections through
    /// channel 0.
    pub fn identity(length: usize, scales: usize, channels: usize) -> Result<Self> {
        let cfg = ModelConfig {
            length,
            scales,
            channels,
            use_csconv: true,
            ..ModelConfig::default().without_blocks()
        };
        let mut model = Model::new(cfg, 0)?;
        for p in model.params.iter_mut() {
            p.value.fill(0.0);
        }
        let k = model.config.projection_kernel;
        for name in ["inproj.weight", "outproj.weight"] {
            let p = model.params.by_name_mut(name).expect("projection registered");
            p.value.data_mut()[(k - 1) / 2] = 1.0;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Optimizer steps applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    fn check_len(&self, radar: &[f32]) -> Result<()> {
        if radar.len() != self.config.length {
            return Err(dim_err!(
                "model expects {} samples, got {}",
                self.config.length,
                radar.len()
            ));
        }
        Ok(())
    }

    /// Reconstructs one chunk.
    pub fn infer(&self, radar: &[f32]) -> Result<Vec<f32>> {
        self.check_len(radar)?;
        let mut tape = Tape::new();
        let pv = self.params.bind(&mut tape);
        let x = tape.constant(Tensor::column(radar));
        let y = self.network.forward(&mut tape, &pv, x)?;
        Ok(tape.value(y).data().to_vec())
    }

    /// Intermediate features of one chunk, in evaluation order.
    pub fn export_intermediate_features(&self, radar: &[f32]) -> Result<Vec<FeatureDump>> {
        self.check_len(radar)?;
        let mut tape = Tape::new();
        let pv = self.params.bind(&mut tape);
        let x = tape.constant(Tensor::column(radar));
        let (_, taps) = self.network.forward_with_features(&mut tape, &pv, x)?;
        Ok(taps
            .into_iter()
            .map(|t| FeatureDump {
                name: t.name,
                stage: t.stage,
                scale: t.scale,
                values: tape.value(t.var).clone(),
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Complexity {
    pub params: usize,
    /// Floating-point operations of one forward pass at the configured length.
    pub flops: u64,
}

fn conv_flops(len_out: usize, c_in: usize, c_out: usize, k: usize) -> u64 {
    2 * (len_out * c_in * c_out * k) as u64
}

fn block_flops(block: &PredictUpdateBlock, cfg: &ModelConfig, len: usize) -> u64 {
    let c = cfg.channels;
    let f = cfg.csconv_filters();
    let mut total = 0u64;
    if block.csconv.is_some() {
        for (i, &k) in cfg.csconv_kernels.iter().enumerate() {
            let c_in = match cfg.csconv_layout {
                CsConvLayout::Cascade if i > 0 => f,
                _ => c,
            };
            total += conv_flops(len, c_in, f, k);
        }
    }
    if block.attention.is_some() {
        let (l, c) = (len as u64, c as u64);
        total += 4 * l * c; // layer norm
        total += 4 * 2 * l * c * c; // q, k, v, o projections
        total += 2 * 2 * l * l * c; // scores and value mixing
    }
    if block.channel_attention.is_some() {
        let r = c / cfg.reduction;
        total += 2 * (2 * c * r) as u64 + 2 * (len * c) as u64;
    }
    total
}

/// Exact parameter count (from the registry) and forward FLOPs.
pub fn count_params_flops(cfg: &ModelConfig) -> Result<Complexity> {
    let model = Model::new(cfg.clone(), 0)?;
    let net = model.network();
    let (c, l) = (cfg.channels, cfg.length);
    let mut flops = 2 * conv_flops(l, 1, c, cfg.projection_kernel);
    for (i, (lu, ilu)) in net.lus.iter().zip(&net.ilus).enumerate() {
        let half = l >> (i + 1);
        let k = match lu.split {
            Resampling::Learnable(_) => cfg.split_kernel,
            Resampling::Polyphase => 0,
        };
        flops += conv_flops(half, c, 2 * c, k);
        let k = match ilu.merge {
            Resampling::Learnable(_) => cfg.split_kernel,
            Resampling::Polyphase => 0,
        };
        flops += conv_flops(half, 2 * c, c, k);
        for b in [&lu.predict, &lu.update, &ilu.predict, &ilu.update] {
            flops += block_flops(b, cfg, half);
        }
        flops += 4 * (half * c) as u64; // lifting adds/subs
    }
    Ok(Complexity {
        params: model.param_count(),
        flops,
    })
}
