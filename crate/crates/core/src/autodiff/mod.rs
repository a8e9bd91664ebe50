//! Reverse-mode automatic differentiation over sequence tensors.
//!
//! A [`Tape`] records every operation as it is evaluated. Nodes are appended
//! in evaluation order, so the node list is already a topological order and
//! [`Tape::backward`] is a single reverse sweep. Leaf gradients persist and
//! accumulate across sweeps until [`Tape::zero_grad`].

pub mod attention;
pub mod conv;
pub(crate) mod gradcheck;

use std::sync::Arc;

pub use gradcheck::{check_gradients, random_projection, GradCheck};

use crate::error::{dim_err, Error, Result};
use crate::spectral::StftPlan;
use crate::tensor::{Real, Tensor};
use attention::{AttentionCache, AttentionWeights};
use conv::ConvGeometry;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameter handles of one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl AttentionVars {
    fn all(&self) -> [Var; 8] {
        [
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo,
        ]
    }
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    Attention {
        x: Var,
        p: AttentionVars,
        heads: usize,
        cache: Box<AttentionCache<T>>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    GlobalAvgPool(Var),
    ChannelGate {
        x: Var,
        gate: Var,
    },
    Sum(Var),
    Mean(Var),
    Stft {
        x: Var,
        plan: Arc<StftPlan<T>>,
    },
    ComplexAbs(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Channel-shuffle permutation: output channel `c` takes input channel
/// `(c mod groups) * (channels / groups) + c / groups`.
pub fn shuffle_permutation(channels: usize, groups: usize) -> Vec<usize> {
    let per = channels / groups;
    (0..channels).map(|c| (c % groups) * per + c / groups).collect()
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Computation graph recorded during a forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Accumulated gradient of a leaf (zeros if nothing reached it).
    pub fn grad(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Attention weights saved by an attention node, `[heads, len, len]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { cache, .. } => Some(&cache.probs),
            _ => None,
        }
    }

    fn seq(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).seq_dims()
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(dim_err!("shape mismatch {:?} vs {:?}", sa, sb));
        }
        Ok(())
    }

    fn check_kernel(&self, w: Var, rows: usize) -> Result<(usize, usize)> {
        let ws = self.value(w).shape();
        if ws.len() != 3 || ws[1] == 0 {
            return Err(dim_err!("kernel must be rank 3, got {:?}", ws));
        }
        if ws[0] != rows {
            return Err(dim_err!(
                "kernel {:?} expects {} input channels, input has {}",
                ws,
                ws[0],
                rows
            ));
        }
        Ok((ws[1], ws[2]))
    }

    fn check_bias(&self, b: Option<Var>, n: usize) -> Result<()> {
        if let Some(b) = b {
            if self.value(b).len() != n {
                return Err(dim_err!(
                    "bias has {} entries, expected {}",
                    self.value(b).len(),
                    n
                ));
            }
        }
        Ok(())
    }

    /// Strided convolution with zero padding of `(k - 1) / 2` on the left.
    /// `w` is `[c_out, c_in, k]`. Stride 1 keeps the length, stride 2 halves it.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (len, c_in) = self.seq(x)?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 3 {
            return Err(dim_err!("kernel must be [c_out, c_in, k], got {:?}", ws));
        }
        let (c_out, k) = (ws[0], ws[2]);
        if ws[1] != c_in {
            return Err(dim_err!(
                "kernel expects {} input channels, input has {}",
                ws[1],
                c_in
            ));
        }
        if !(stride == 1 || stride == 2) {
            return Err(dim_err!("stride must be 1 or 2, got {}", stride));
        }
        if stride == 1 && k % 2 == 0 {
            return Err(dim_err!("stride-1 same convolution needs an odd kernel, got {}", k));
        }
        if len % stride != 0 {
            return Err(dim_err!("length {} not divisible by stride {}", len, stride));
        }
        self.check_bias(b, c_out)?;
        if !self.value(x).is_finite() {
            return Err(Error::NonFinite("conv1d input".into()));
        }
        let geom = ConvGeometry::same(c_in, c_out, k, stride);
        let len_out = len / stride;
        let out = conv::conv_forward(
            self.value(x).data(),
            len,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
            len_out,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![len_out, c_out], out)?;
        Ok(self.push(value, Op::Conv { x, w, b, geom }, rg))
    }

    /// Adjoint of [`Tape::conv1d`] with the same geometry. `w` is
    /// `[c_in, c_out, k]`; output length is `stride * len`.
    pub fn conv1d_transposed(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        let (len, c_in) = self.seq(x)?;
        let (c_out, k) = self.check_kernel(w, c_in)?;
        if !(stride == 1 || stride == 2) {
            return Err(dim_err!("stride must be 1 or 2, got {}", stride));
        }
        self.check_bias(b, c_out)?;
        if !self.value(x).is_finite() {
            return Err(Error::NonFinite("conv1d_transposed input".into()));
        }
        let geom = ConvGeometry::same(c_in, c_out, k, stride);
        let out = conv::conv_transpose_forward(
            self.value(x).data(),
            len,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![stride * len, c_out], out)?;
        Ok(self.push(value, Op::ConvTranspose { x, w, b, geom }, rg))
    }

    /// Multi-head self-attention; every projection matrix is `[c, c]`.
    pub fn self_attention(&mut self, x: Var, p: AttentionVars, heads: usize) -> Result<Var> {
        let (len, ch) = self.seq(x)?;
        if heads == 0 || ch % heads != 0 {
            return Err(Error::config(
                "heads",
                format!("{} channels not divisible by {} heads", ch, heads),
            ));
        }
        for (i, v) in p.all().iter().enumerate() {
            let expect = if i % 2 == 0 { ch * ch } else { ch };
            if self.value(*v).len() != expect {
                return Err(dim_err!("attention parameter {} has wrong size", i));
            }
        }
        let (out, cache) = {
            let w = self.attention_weights(&p);
            attention::attention_forward(self.value(x).data(), len, ch, heads, &w)
        };
        let rg = self.rg(x) || p.all().iter().any(|v| self.rg(*v));
        let value = Tensor::new(vec![len, ch], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                x,
                p,
                heads,
                cache: Box::new(cache),
            },
            rg,
        ))
    }

    fn attention_weights(&self, p: &AttentionVars) -> AttentionWeights<'_, T> {
        AttentionWeights {
            wq: self.value(p.wq).data(),
            bq: self.value(p.bq).data(),
            wk: self.value(p.wk).data(),
            bk: self.value(p.bk).data(),
            wv: self.value(p.wv).data(),
            bv: self.value(p.bv).data(),
            wo: self.value(p.wo).data(),
            bo: self.value(p.bo).data(),
        }
    }

    /// Normalizes each position across channels, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (len, ch) = self.seq(x)?;
        if self.value(gamma).len() != ch || self.value(beta).len() != ch {
            return Err(dim_err!("layer norm affine parameters must have {} entries", ch));
        }
        let eps = T::from_f64_lossy(eps);
        let n = T::from_usize(ch).unwrap();
        let xs = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); len * ch];
        let mut rstd = vec![T::zero(); len];
        let mut out = vec![T::zero(); len * ch];
        for r in 0..len {
            let row = &xs[r * ch..(r + 1) * ch];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..ch {
                let h = (row[c] - mean) * rs;
                xhat[r * ch + c] = h;
                out[r * ch + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::new(vec![len, ch], out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|v| v.abs());
        let rg = self.rg(x);
        self.push(v, Op::Abs(x), rg)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        let v = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, c), rg)
    }

    /// Channels `start..start + count` of a sequence.
    pub fn slice_channels(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (len, ch) = self.seq(x)?;
        if count == 0 || start + count > ch {
            return Err(dim_err!(
                "channel slice {}..{} out of range for {} channels",
                start,
                start + count,
                ch
            ));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(len * count);
        for r in 0..len {
            out.extend_from_slice(&src[r * ch + start..r * ch + start + count]);
        }
        let value = Tensor::new(vec![len, count], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceChannels { x, start }, rg))
    }

    /// First and last halves of the channel axis.
    pub fn split_halves(&mut self, x: Var) -> Result<(Var, Var)> {
        let (_, ch) = self.seq(x)?;
        if ch % 2 != 0 {
            return Err(dim_err!("cannot split {} channels into halves", ch));
        }
        let a = self.slice_channels(x, 0, ch / 2)?;
        let b = self.slice_channels(x, ch / 2, ch / 2)?;
        Ok((a, b))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(dim_err!("concat of nothing"));
        }
        let (len, _) = self.seq(parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (l, c) = self.seq(p)?;
            if l != len {
                return Err(dim_err!("concat length mismatch {} vs {}", l, len));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(len * total);
        for r in 0..len {
            for (&p, &c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
            }
        }
        let value = Tensor::new(vec![len, total], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Output channel `c` takes input channel `perm[c]`.
    pub fn permute_channels(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let (len, ch) = self.seq(x)?;
        let mut seen = vec![false; ch];
        if perm.len() != ch || perm.iter().any(|&p| p >= ch || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err!("invalid channel permutation for {} channels", ch));
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); len * ch];
        for r in 0..len {
            for (c, &p) in perm.iter().enumerate() {
                out[r * ch + c] = src[r * ch + p];
            }
        }
        let value = Tensor::new(vec![len, ch], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    pub fn shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (_, ch) = self.seq(x)?;
        if groups == 0 || ch % groups != 0 {
            return Err(dim_err!("{} channels not divisible into {} groups", ch, groups));
        }
        self.permute_channels(x, &shuffle_permutation(ch, groups))
    }

    pub fn unshuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (_, ch) = self.seq(x)?;
        if groups == 0 || ch % groups != 0 {
            return Err(dim_err!("{} channels not divisible into {} groups", ch, groups));
        }
        self.permute_channels(x, &invert_permutation(&shuffle_permutation(ch, groups)))
    }

    /// Mean over positions: `[len, c] -> [1, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (len, ch) = self.seq(x)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); ch];
        for row in src.chunks(ch) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = T::one() / T::from_usize(len).unwrap();
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(vec![1, ch], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    /// Scales every position of `x` (`[len, c]`) channel-wise by `gate` (`[1, c]`).
    pub fn channel_gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (len, ch) = self.seq(x)?;
        let gs = self.value(gate).shape();
        if gs != [1, ch] {
            return Err(dim_err!("gate must be [1, {}], got {:?}", ch, gs));
        }
        let g = self.value(gate).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(ch) {
            for (v, &s) in row.iter_mut().zip(g) {
                *v *= s;
            }
        }
        let value = Tensor::new(vec![len, ch], out)?;
        let rg = self.rg(x) || self.rg(gate);
        Ok(self.push(value, Op::ChannelGate { x, gate }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / T::from_usize(t.len()).unwrap());
        let rg = self.rg(x);
        self.push(v, Op::Mean(x), rg)
    }

    /// Short-time Fourier transform of a `[len, 1]` signal into
    /// `[frames, bins, 2]` (real, imaginary).
    pub fn stft(&mut self, x: Var, plan: Arc<StftPlan<T>>) -> Result<Var> {
        let (len, ch) = self.seq(x)?;
        if ch != 1 {
            return Err(dim_err!("stft expects a single channel, got {}", ch));
        }
        let value = plan.forward(self.value(x).data())?;
        debug_assert_eq!(plan.frames(len), value.shape()[0]);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Stft { x, plan }, rg))
    }

    /// Modulus of a `[.., 2]` complex tensor.
    pub fn complex_abs(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.last() != Some(&2) || shape.len() < 2 {
            return Err(dim_err!("complex tensor must end in a size-2 axis, got {:?}", shape));
        }
        let data = self
            .value(x)
            .data()
            .chunks(2)
            .map(|z| (z[0] * z[0] + z[1] * z[1]).sqrt())
            .collect();
        let value = Tensor::new(shape[..shape.len() - 1].to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::ComplexAbs(x), rg))
    }

    /// Reverse sweep from a scalar node. Leaf gradients are added to whatever
    /// earlier sweeps left behind.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut work: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        work[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        for i in (0..=loss.0).rev() {
            let Some(g) = work[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            for (v, d) in self.local_grads(i, &g) {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut work[v.0] {
                    Some(acc) => acc.add_assign(&d),
                    slot => *slot = Some(d),
                }
            }
        }
        Ok(())
    }

    fn t(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor::new(self.value(v).shape().to_vec(), data).expect("gradient matches value shape")
    }

    /// Vector-Jacobian products of node `i` for each of its inputs.
    fn local_grads(&self, i: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv { x, w, b, geom } => {
                let xv = self.value(*x);
                let (dx, dw, db) = conv::conv_backward(
                    xv.data(),
                    xv.rows(),
                    self.value(*w).data(),
                    geom,
                    gd,
                    node.value.rows(),
                    self.rg(*x),
                    self.rg(*w),
                );
                let mut out = Vec::with_capacity(3);
                if self.rg(*x) {
                    out.push((*x, self.t(*x, dx)));
                }
                if self.rg(*w) {
                    out.push((*w, self.t(*w, dw)));
                }
                if let Some(b) = b {
                    out.push((*b, self.t(*b, db)));
                }
                out
            }
            Op::ConvTranspose { x, w, b, geom } => {
                let xv = self.value(*x);
                let (dx, dw, db) = conv::conv_transpose_backward(
                    xv.data(),
                    xv.rows(),
                    self.value(*w).data(),
                    geom,
                    gd,
                    self.rg(*x),
                    self.rg(*w),
                );
                let mut out = Vec::with_capacity(3);
                if self.rg(*x) {
                    out.push((*x, self.t(*x, dx)));
                }
                if self.rg(*w) {
                    out.push((*w, self.t(*w, dw)));
                }
                if let Some(b) = b {
                    out.push((*b, self.t(*b, db)));
                }
                out
            }
            Op::Attention { x, p, heads, cache } => {
                let xv = self.value(*x);
                let weights = self.attention_weights(p);
                let grads = attention::attention_backward(
                    xv.data(),
                    xv.rows(),
                    xv.channels(),
                    *heads,
                    &weights,
                    cache,
                    gd,
                );
                let mut out = vec![(*x, self.t(*x, grads.dx))];
                for (v, d) in p.all().into_iter().zip(grads.dparams) {
                    out.push((v, self.t(v, d)));
                }
                out
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let ch = node.value.channels();
                let gam = self.value(*gamma).data();
                let n = T::from_usize(ch).unwrap();
                let mut dx = vec![T::zero(); gd.len()];
                let mut dg = vec![T::zero(); ch];
                let mut dbeta = vec![T::zero(); ch];
                for (r, rs) in rstd.iter().enumerate() {
                    let row = r * ch..(r + 1) * ch;
                    let (dy, h) = (&gd[row.clone()], &xhat[row.clone()]);
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for c in 0..ch {
                        let dh = dy[c] * gam[c];
                        m1 += dh;
                        m2 += dh * h[c];
                        dg[c] += dy[c] * h[c];
                        dbeta[c] += dy[c];
                    }
                    m1 /= n;
                    m2 /= n;
                    for c in 0..ch {
                        dx[r * ch + c] = *rs * (dy[c] * gam[c] - m1 - h[c] * m2);
                    }
                }
                vec![
                    (*x, self.t(*x, dx)),
                    (*gamma, self.t(*gamma, dg)),
                    (*beta, self.t(*beta, dbeta)),
                ]
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                let d = xs
                    .iter()
                    .zip(gd)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                vec![(*x, self.t(*x, d))]
            }
            Op::Sigmoid(x) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&s, &g)| g * s * (T::one() - s))
                    .collect();
                vec![(*x, self.t(*x, d))]
            }
            Op::Abs(x) => {
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &g)| {
                        if v > T::zero() {
                            g
                        } else if v < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                vec![(*x, self.t(*x, d))]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let da = gd.iter().zip(vb).map(|(&g, &y)| g * y).collect();
                let db = gd.iter().zip(va).map(|(&g, &x)| g * x).collect();
                vec![(*a, self.t(*a, da)), (*b, self.t(*b, db))]
            }
            Op::Scale(x, c) => vec![(*x, g.map(|v| v * *c))],
            Op::SliceChannels { x, start } => {
                let (len, ch) = (self.value(*x).rows(), self.value(*x).channels());
                let cnt = node.value.channels();
                let mut d = vec![T::zero(); len * ch];
                for r in 0..len {
                    d[r * ch + start..r * ch + start + cnt]
                        .copy_from_slice(&gd[r * cnt..(r + 1) * cnt]);
                }
                vec![(*x, self.t(*x, d))]
            }
            Op::Concat(parts) => {
                let (len, total) = (node.value.rows(), node.value.channels());
                let mut off = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let c = self.value(p).channels();
                    let mut d = Vec::with_capacity(len * c);
                    for r in 0..len {
                        d.extend_from_slice(&gd[r * total + off..r * total + off + c]);
                    }
                    off += c;
                    out.push((p, self.t(p, d)));
                }
                out
            }
            Op::Permute { x, perm } => {
                let ch = perm.len();
                let mut d = vec![T::zero(); gd.len()];
                for (r, row) in gd.chunks(ch).enumerate() {
                    for (c, &p) in perm.iter().enumerate() {
                        d[r * ch + p] += row[c];
                    }
                }
                vec![(*x, self.t(*x, d))]
            }
            Op::GlobalAvgPool(x) => {
                let (len, ch) = (self.value(*x).rows(), self.value(*x).channels());
                let inv = T::one() / T::from_usize(len).unwrap();
                let mut d = Vec::with_capacity(len * ch);
                for _ in 0..len {
                    d.extend(gd.iter().map(|&v| v * inv));
                }
                vec![(*x, self.t(*x, d))]
            }
            Op::ChannelGate { x, gate } => {
                let ch = node.value.channels();
                let (xs, gs) = (self.value(*x).data(), self.value(*gate).data());
                let mut dx = vec![T::zero(); xs.len()];
                let mut dgate = vec![T::zero(); ch];
                for r in 0..node.value.rows() {
                    for c in 0..ch {
                        let k = r * ch + c;
                        dx[k] = gd[k] * gs[c];
                        dgate[c] += gd[k] * xs[k];
                    }
                }
                vec![(*x, self.t(*x, dx)), (*gate, self.t(*gate, dgate))]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(self.value(*x).shape(), gd[0]))],
            Op::Mean(x) => {
                let n = T::from_usize(self.value(*x).len()).unwrap();
                vec![(*x, Tensor::full(self.value(*x).shape(), gd[0] / n))]
            }
            Op::Stft { x, plan } => {
                let d = plan.backward(self.value(*x).rows(), gd);
                vec![(*x, self.t(*x, d))]
            }
            Op::ComplexAbs(x) => {
                let z = self.value(*x).data();
                let mut d = vec![T::zero(); z.len()];
                for (k, (&m, &gv)) in node.value.data().iter().zip(gd).enumerate() {
                    if m > T::zero() {
                        d[2 * k] = gv * z[2 * k] / m;
                        d[2 * k + 1] = gv * z[2 * k + 1] / m;
                    }
                }
                vec![(*x, self.t(*x, d))]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Tensor<f64> {
        Tensor::column(v)
    }

    #[test]
    fn identity_kernel_passes_through() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[8, 1]));
        let w = tape.constant(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
        let y = tape.conv1d(x, w, None, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0; 8]);
    }

    #[test]
    fn stride_two_picks_even_phase() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(col(&[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
        let y = tape.conv1d(x, w, None, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 1]);
        assert_eq!(tape.value(y).data(), &[1.0, 3.0]);
    }

    #[test]
    fn transposed_places_on_even_phase() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(col(&[5.0, 7.0]));
        let w = tape.constant(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
        let y = tape.conv1d_transposed(x, w, None, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 0.0, 7.0, 0.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_nan() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[8, 2]));
        let w = tape.constant(Tensor::ones(&[1, 3, 3]));
        assert!(matches!(tape.conv1d(x, w, None, 1), Err(Error::Dimension(_))));
        let bad = tape.constant(col(&[1.0, f64::NAN, 0.0, 0.0]));
        let w1 = tape.constant(Tensor::ones(&[1, 1, 3]));
        assert!(matches!(tape.conv1d(bad, w1, None, 1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn pointwise_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(col(&[-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(col(&[0.0]));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).item(), 0.5);
    }

    #[test]
    fn sub_self_is_zero_with_opposite_grads() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(col(&[1.0, 2.0]));
        let y = tape.param(col(&[1.0, 2.0]));
        let d = tape.sub(x, y).unwrap();
        assert_eq!(tape.value(d).data(), &[0.0, 0.0]);
        let s = tape.sum(d);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).data(), &[1.0, 1.0]);
        assert_eq!(tape.grad(y).data(), &[-1.0, -1.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2, 4], vec![5.0; 4].into_iter().chain([1.0, 3.0, 1.0, 3.0]).collect()).unwrap());
        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let v = tape.value(y).data();
        assert!(v[..4].iter().all(|&a| a == 0.0));
        for (a, e) in v[4..].iter().zip([-1.0, 1.0, -1.0, 1.0]) {
            assert!((a - e).abs() < 1e-9);
        }
        let g0 = tape.constant(Tensor::zeros(&[4]));
        let b3 = tape.constant(Tensor::full(&[4], 3.0));
        let y = tape.layer_norm(x, g0, b3, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&a| a == 3.0));
    }

    #[test]
    fn shuffle_permutation_matches_formula() {
        assert_eq!(shuffle_permutation(8, 4), vec![0, 2, 4, 6, 1, 3, 5, 7]);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[3, 8], |i| i as f64));
        let s = tape.shuffle(x, 4).unwrap();
        let u = tape.unshuffle(s, 4).unwrap();
        assert_eq!(tape.value(u), tape.value(x));
        assert_eq!(&tape.value(s).data()[..8], &[0.0, 2.0, 4.0, 6.0, 1.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn split_concat_and_pool() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[5, 6], |i| i as f64 * 0.5));
        let (a, b) = tape.split_halves(x).unwrap();
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(c), tape.value(x));
        let odd = tape.constant(Tensor::ones(&[4, 3]));
        assert!(tape.split_halves(odd).is_err());
        let ones = tape.constant(Tensor::ones(&[10, 3]));
        let p = tape.global_avg_pool(ones).unwrap();
        assert_eq!(tape.value(p).shape(), &[1, 3]);
        assert_eq!(tape.value(p).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_contracts() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(col(&[-1.0, -2.0, 3.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).data(), &[1.0, 1.0, 1.0]);
        // a second sweep accumulates
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).data(), &[2.0, 2.0, 2.0]);
        tape.zero_grad();

        let neg = tape.param(col(&[-1.0, -2.0, -0.5]));
        let r = tape.relu(neg);
        let s = tape.sum(r);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(neg).data(), &[0.0, 0.0, 0.0]);

        let unused = tape.param(col(&[4.0]));
        assert_eq!(tape.grad(unused).data(), &[0.0]);
    }
}
