//! Predict/update block: multi-kernel convolution, then self-attention, then
//! channel attention. Each stage can be switched off and becomes the identity.

use rand::Rng;

use super::config::{CsConvLayout, ModelConfig, CSCONV_BRANCHES};
use crate::autodiff::{AttentionVars, Tape, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Indices into the [`ParamStore`] of one convolution layer.
#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub weight: usize,
    pub bias: usize,
}

impl ConvParams {
    /// `[c_out, c_in, k]` weight with uniform fan-in initialization, zero bias.
    pub fn register<R: Rng>(
        store: &mut ParamStore<f32>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * k) as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), &[c_out, c_in, k], bound, rng)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]))?;
        Ok(ConvParams { weight, bias })
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, pv: &[Var], x: Var, stride: usize) -> Result<Var> {
        tape.conv1d(x, pv[self.weight], Some(pv[self.bias]), stride)
    }
}

#[derive(Clone, Debug)]
pub struct CsConv {
    pub convs: Vec<ConvParams>,
    pub layout: CsConvLayout,
}

#[derive(Clone, Copy, Debug)]
pub struct SelfAttention {
    pub ln_gamma: usize,
    pub ln_beta: usize,
    /// wq, bq, wk, wv, bv, wo, bo. The key projection has no bias: softmax
    /// is invariant to it, so it would never receive a gradient.
    pub proj: [usize; 7],
    pub heads: usize,
    pub eps: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct ChannelAttention {
    pub squeeze: ConvParams,
    pub excite: ConvParams,
}

#[derive(Clone, Debug)]
pub struct PredictUpdateBlock {
    pub csconv: Option<CsConv>,
    pub attention: Option<SelfAttention>,
    pub channel_attention: Option<ChannelAttention>,
}

impl PredictUpdateBlock {
    pub fn register<R: Rng>(
        store: &mut ParamStore<f32>,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let c = cfg.channels;
        let csconv = if cfg.use_csconv {
            let f = cfg.csconv_filters();
            let mut convs = Vec::with_capacity(CSCONV_BRANCHES);
            for (i, &k) in cfg.csconv_kernels.iter().enumerate() {
                let c_in = match cfg.csconv_layout {
                    CsConvLayout::Cascade if i > 0 => f,
                    _ => c,
                };
                convs.push(ConvParams::register(
                    store,
                    &format!("{prefix}.csconv.{i}"),
                    c_in,
                    f,
                    k,
                    rng,
                )?);
            }
            Some(CsConv {
                convs,
                layout: cfg.csconv_layout,
            })
        } else {
            None
        };

        let attention = if cfg.use_self_attention {
            let ln_gamma = store.add(format!("{prefix}.attn.norm.gamma"), Tensor::ones(&[c]))?;
            let ln_beta = store.add(format!("{prefix}.attn.norm.beta"), Tensor::zeros(&[c]))?;
            let bound = 1.0 / (c as f64).sqrt();
            let mut proj = Vec::with_capacity(7);
            for n in ["q", "k", "v", "o"] {
                proj.push(store.add_uniform(format!("{prefix}.attn.{n}.weight"), &[c, c], bound, rng)?);
                if n != "k" {
                    proj.push(store.add(format!("{prefix}.attn.{n}.bias"), Tensor::zeros(&[c]))?);
                }
            }
            let proj: [usize; 7] = proj.try_into().expect("seven projection tensors");
            Some(SelfAttention {
                ln_gamma,
                ln_beta,
                proj,
                heads: cfg.heads,
                eps: cfg.layer_norm_eps,
            })
        } else {
            None
        };

        let channel_attention = if cfg.use_channel_attention {
            let r = c / cfg.reduction;
            Some(ChannelAttention {
                squeeze: ConvParams::register(store, &format!("{prefix}.ca.squeeze"), c, r, 1, rng)?,
                excite: ConvParams::register(store, &format!("{prefix}.ca.excite"), r, c, 1, rng)?,
            })
        } else {
            None
        };

        Ok(PredictUpdateBlock {
            csconv,
            attention,
            channel_attention,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, pv: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        if let Some(cs) = &self.csconv {
            let mut taps = Vec::with_capacity(cs.convs.len());
            let mut cur = h;
            for conv in &cs.convs {
                let src = match cs.layout {
                    CsConvLayout::Cascade => cur,
                    CsConvLayout::Parallel => h,
                };
                let y = conv.apply(tape, pv, src, 1)?;
                cur = tape.relu(y);
                taps.push(cur);
            }
            let cat = tape.concat(&taps)?;
            h = tape.shuffle(cat, CSCONV_BRANCHES)?;
        }
        if let Some(sa) = &self.attention {
            let n = tape.layer_norm(h, pv[sa.ln_gamma], pv[sa.ln_beta], sa.eps)?;
            let p = sa.proj.map(|i| pv[i]);
            let c = tape.value(n).channels();
            let bk = tape.constant(Tensor::zeros(&[c]));
            let vars = AttentionVars {
                wq: p[0],
                bq: p[1],
                wk: p[2],
                bk,
                wv: p[3],
                bv: p[4],
                wo: p[5],
                bo: p[6],
            };
            h = tape.self_attention(n, vars, sa.heads)?;
        }
        if let Some(ca) = &self.channel_attention {
            let pooled = tape.global_avg_pool(h)?;
            let z = ca.squeeze.apply(tape, pv, pooled, 1)?;
            let z = tape.relu(z);
            let s = ca.excite.apply(tape, pv, z, 1)?;
            let gate = tape.sigmoid(s);
            h = tape.channel_gate(h, gate)?;
        }
        Ok(h)
    }
}
