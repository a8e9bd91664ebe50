//! Fused multi-head scaled dot-product self-attention.
//!
//! Projections are position-wise affine maps `y = x W + b` with `W` laid out
//! `[c_in, c_out]`. Keys and values are kept channel-major so every inner
//! loop walks a contiguous row of the `[length, length]` score matrix.

use crate::tensor::Real;

pub struct AttentionCache<T> {
    pub q: Vec<T>,
    /// `[channels, length]`
    pub k_t: Vec<T>,
    /// `[channels, length]`
    pub v_t: Vec<T>,
    /// Row-stochastic attention weights, `[heads, length, length]`.
    pub probs: Vec<T>,
    /// Concatenated head outputs before the output projection.
    pub mixed: Vec<T>,
}

pub struct AttentionWeights<'a, T> {
    pub wq: &'a [T],
    pub bq: &'a [T],
    pub wk: &'a [T],
    pub bk: &'a [T],
    pub wv: &'a [T],
    pub bv: &'a [T],
    pub wo: &'a [T],
    pub bo: &'a [T],
}

pub struct AttentionGrads<T> {
    pub dx: Vec<T>,
    /// In the order wq, bq, wk, bk, wv, bv, wo, bo.
    pub dparams: [Vec<T>; 8],
}

pub fn linear<T: Real>(x: &[T], rows: usize, c_in: usize, w: &[T], b: &[T], c_out: usize) -> Vec<T> {
    let mut y = vec![T::zero(); rows * c_out];
    for r in 0..rows {
        let yr = &mut y[r * c_out..(r + 1) * c_out];
        yr.copy_from_slice(b);
        for i in 0..c_in {
            let xv = x[r * c_in + i];
            let wr = &w[i * c_out..(i + 1) * c_out];
            for (yv, &wv) in yr.iter_mut().zip(wr) {
                *yv += xv * wv;
            }
        }
    }
    y
}

/// Backward of [`linear`], accumulating `dx` in place; returns `(dw, db)`.
fn linear_backward<T: Real>(
    x: &[T],
    rows: usize,
    c_in: usize,
    w: &[T],
    c_out: usize,
    dy: &[T],
    dx: &mut [T],
) -> (Vec<T>, Vec<T>) {
    let mut dw = vec![T::zero(); c_in * c_out];
    let mut db = vec![T::zero(); c_out];
    for r in 0..rows {
        let dyr = &dy[r * c_out..(r + 1) * c_out];
        for (b, &d) in db.iter_mut().zip(dyr) {
            *b += d;
        }
        for i in 0..c_in {
            let xv = x[r * c_in + i];
            let wr = &w[i * c_out..(i + 1) * c_out];
            let dwr = &mut dw[i * c_out..(i + 1) * c_out];
            let mut acc = T::zero();
            for o in 0..c_out {
                dwr[o] += xv * dyr[o];
                acc += wr[o] * dyr[o];
            }
            dx[r * c_in + i] += acc;
        }
    }
    (dw, db)
}

fn transpose<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

pub fn attention_forward<T: Real>(
    x: &[T],
    len: usize,
    ch: usize,
    heads: usize,
    p: &AttentionWeights<'_, T>,
) -> (Vec<T>, AttentionCache<T>) {
    let hd = ch / heads;
    let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
    let q = linear(x, len, ch, p.wq, p.bq, ch);
    let k_t = transpose(&linear(x, len, ch, p.wk, p.bk, ch), len, ch);
    let v_t = transpose(&linear(x, len, ch, p.wv, p.bv, ch), len, ch);
    let mut probs = vec![T::zero(); heads * len * len];
    let mut mixed = vec![T::zero(); len * ch];
    for h in 0..heads {
        for i in 0..len {
            let row = &mut probs[(h * len + i) * len..(h * len + i + 1) * len];
            for c in h * hd..(h + 1) * hd {
                let qv = q[i * ch + c] * scale;
                for (s, &kv) in row.iter_mut().zip(&k_t[c * len..(c + 1) * len]) {
                    *s += qv * kv;
                }
            }
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for s in row.iter_mut() {
                *s = (*s - m).exp();
                z += *s;
            }
            let inv = T::one() / z;
            for s in row.iter_mut() {
                *s *= inv;
            }
            for c in h * hd..(h + 1) * hd {
                let v = &v_t[c * len..(c + 1) * len];
                mixed[i * ch + c] = row.iter().zip(v).map(|(&a, &b)| a * b).sum();
            }
        }
    }
    let out = linear(&mixed, len, ch, p.wo, p.bo, ch);
    (
        out,
        AttentionCache {
            q,
            k_t,
            v_t,
            probs,
            mixed,
        },
    )
}

pub fn attention_backward<T: Real>(
    x: &[T],
    len: usize,
    ch: usize,
    heads: usize,
    p: &AttentionWeights<'_, T>,
    cache: &AttentionCache<T>,
    dout: &[T],
) -> AttentionGrads<T> {
    let hd = ch / heads;
    let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
    let mut dmixed = vec![T::zero(); len * ch];
    let (dwo, dbo) = linear_backward(&cache.mixed, len, ch, p.wo, ch, dout, &mut dmixed);

    let mut dq = vec![T::zero(); len * ch];
    let mut dk_t = vec![T::zero(); len * ch];
    let mut dv_t = vec![T::zero(); len * ch];
    let mut dscore = vec![T::zero(); len];
    for h in 0..heads {
        for i in 0..len {
            let a = &cache.probs[(h * len + i) * len..(h * len + i + 1) * len];
            dscore.iter_mut().for_each(|v| *v = T::zero());
            for c in h * hd..(h + 1) * hd {
                let g = dmixed[i * ch + c];
                let v = &cache.v_t[c * len..(c + 1) * len];
                for (d, &vv) in dscore.iter_mut().zip(v) {
                    *d += g * vv;
                }
                for (dv, &av) in dv_t[c * len..(c + 1) * len].iter_mut().zip(a) {
                    *dv += av * g;
                }
            }
            // softmax Jacobian-vector product
            let inner: T = a.iter().zip(&dscore).map(|(&p, &d)| p * d).sum();
            for (d, &p) in dscore.iter_mut().zip(a) {
                *d = p * (*d - inner) * scale;
            }
            for c in h * hd..(h + 1) * hd {
                let k = &cache.k_t[c * len..(c + 1) * len];
                dq[i * ch + c] = dscore.iter().zip(k).map(|(&d, &kv)| d * kv).sum();
                let qv = cache.q[i * ch + c];
                for (dk, &d) in dk_t[c * len..(c + 1) * len].iter_mut().zip(&dscore) {
                    *dk += d * qv;
                }
            }
        }
    }
    let dk = transpose(&dk_t, ch, len);
    let dv = transpose(&dv_t, ch, len);
    let mut dx = vec![T::zero(); len * ch];
    let (dwq, dbq) = linear_backward(x, len, ch, p.wq, ch, &dq, &mut dx);
    let (dwk, dbk) = linear_backward(x, len, ch, p.wk, ch, &dk, &mut dx);
    let (dwv, dbv) = linear_backward(x, len, ch, p.wv, ch, &dv, &mut dx);
    AttentionGrads {
        dx,
        dparams: [dwq, dbq, dwk, dbk, dwv, dbv, dwo, dbo],
    }
}
