//! Strided 1-D convolution kernels over `[length, channels]` sequences.
//!
//! Both directions share one geometry: output position `t` of the forward
//! convolution reads input position `stride * t + j - pad` for tap `j`, with
//! zero padding outside `[0, len)`. The transposed convolution scatters along
//! the same index map, which makes it the exact adjoint.

use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    /// Left padding that keeps `len / stride` outputs for an odd kernel.
    pub fn same(c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        ConvGeometry {
            c_in,
            c_out,
            k,
            stride,
            pad: (k - 1) / 2,
        }
    }

    #[inline]
    fn src(&self, t: usize, j: usize, len: usize) -> Option<usize> {
        let pos = (self.stride * t + j) as isize - self.pad as isize;
        if pos >= 0 && (pos as usize) < len {
            Some(pos as usize)
        } else {
            None
        }
    }
}

/// Reorders a kernel stored as `[a, b, k]` into `[k, a, b]` so the innermost
/// loop runs over contiguous `b`.
pub fn taps_major<T: Real>(w: &[T], a: usize, b: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for ia in 0..a {
        for ib in 0..b {
            for j in 0..k {
                out[(j * a + ia) * b + ib] = w[(ia * b + ib) * k + j];
            }
        }
    }
    out
}

/// Inverse of [`taps_major`].
pub fn taps_minor<T: Real>(wt: &[T], a: usize, b: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); wt.len()];
    for j in 0..k {
        for ia in 0..a {
            for ib in 0..b {
                out[(ia * b + ib) * k + j] = wt[(j * a + ia) * b + ib];
            }
        }
    }
    out
}

/// Reorders a `[c_out, c_in, k]` kernel into `[k, c_in, c_out]`.
fn taps_transposed<T: Real>(w: &[T], c_out: usize, c_in: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for o in 0..c_out {
        for i in 0..c_in {
            for j in 0..k {
                out[(j * c_in + i) * c_out + o] = w[(o * c_in + i) * k + j];
            }
        }
    }
    out
}

/// Inverse of [`taps_transposed`].
fn untaps_transposed<T: Real>(wt: &[T], c_out: usize, c_in: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); wt.len()];
    for o in 0..c_out {
        for i in 0..c_in {
            for j in 0..k {
                out[(o * c_in + i) * k + j] = wt[(j * c_in + i) * c_out + o];
            }
        }
    }
    out
}

#[inline]
fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Forward convolution. `w` is `[c_out, c_in, k]`; returns `[len_out, c_out]`.
pub fn conv_forward<T: Real>(
    x: &[T],
    len: usize,
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeometry,
    len_out: usize,
) -> Vec<T> {
    let wt = taps_transposed(w, g.c_out, g.c_in, g.k);
    let mut out = vec![T::zero(); len_out * g.c_out];
    for t in 0..len_out {
        let row = &mut out[t * g.c_out..(t + 1) * g.c_out];
        if let Some(b) = bias {
            row.copy_from_slice(b);
        }
        for j in 0..g.k {
            let Some(s) = g.src(t, j, len) else { continue };
            let xs = &x[s * g.c_in..(s + 1) * g.c_in];
            let wj = &wt[j * g.c_in * g.c_out..(j + 1) * g.c_in * g.c_out];
            for (i, &xv) in xs.iter().enumerate() {
                if xv != T::zero() {
                    axpy(row, xv, &wj[i * g.c_out..(i + 1) * g.c_out]);
                }
            }
        }
    }
    out
}

/// Gradients of [`conv_forward`]: returns `(dx, dw, db)` with `dw` in
/// `[c_out, c_in, k]` layout.
pub fn conv_backward<T: Real>(
    x: &[T],
    len: usize,
    w: &[T],
    g: &ConvGeometry,
    dout: &[T],
    len_out: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let wt = taps_transposed(w, g.c_out, g.c_in, g.k);
    let mut dx = if need_dx { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut dwt = if need_dw { vec![T::zero(); w.len()] } else { Vec::new() };
    let mut db = vec![T::zero(); g.c_out];
    for t in 0..len_out {
        let drow = &dout[t * g.c_out..(t + 1) * g.c_out];
        for (b, &d) in db.iter_mut().zip(drow) {
            *b += d;
        }
        for j in 0..g.k {
            let Some(s) = g.src(t, j, len) else { continue };
            let base = j * g.c_in * g.c_out;
            if need_dx {
                let wj = &wt[base..base + g.c_in * g.c_out];
                let dxs = &mut dx[s * g.c_in..(s + 1) * g.c_in];
                for (i, v) in dxs.iter_mut().enumerate() {
                    *v += dot(drow, &wj[i * g.c_out..(i + 1) * g.c_out]);
                }
            }
            if need_dw {
                let xs = &x[s * g.c_in..(s + 1) * g.c_in];
                let dwj = &mut dwt[base..base + g.c_in * g.c_out];
                for (i, &xv) in xs.iter().enumerate() {
                    if xv != T::zero() {
                        axpy(&mut dwj[i * g.c_out..(i + 1) * g.c_out], xv, drow);
                    }
                }
            }
        }
    }
    let dw = if need_dw {
        untaps_transposed(&dwt, g.c_out, g.c_in, g.k)
    } else {
        Vec::new()
    };
    (dx, dw, db)
}

/// Transposed convolution. `w` is `[c_in, c_out, k]` where `c_in` are the
/// channels of `y`; returns `[stride * len, c_out]`.
pub fn conv_transpose_forward<T: Real>(
    y: &[T],
    len: usize,
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeometry,
) -> Vec<T> {
    let len_out = g.stride * len;
    let wt = taps_major(w, g.c_in, g.c_out, g.k);
    let mut out = vec![T::zero(); len_out * g.c_out];
    if let Some(b) = bias {
        for row in out.chunks_mut(g.c_out) {
            row.copy_from_slice(b);
        }
    }
    for t in 0..len {
        let ys = &y[t * g.c_in..(t + 1) * g.c_in];
        for j in 0..g.k {
            let Some(d) = g.src(t, j, len_out) else { continue };
            let wj = &wt[j * g.c_in * g.c_out..(j + 1) * g.c_in * g.c_out];
            let row = &mut out[d * g.c_out..(d + 1) * g.c_out];
            for (i, &yv) in ys.iter().enumerate() {
                if yv != T::zero() {
                    axpy(row, yv, &wj[i * g.c_out..(i + 1) * g.c_out]);
                }
            }
        }
    }
    out
}

/// Gradients of [`conv_transpose_forward`]: `(dy, dw, db)`, `dw` in
/// `[c_in, c_out, k]` layout.
pub fn conv_transpose_backward<T: Real>(
    y: &[T],
    len: usize,
    w: &[T],
    g: &ConvGeometry,
    dout: &[T],
    need_dy: bool,
    need_dw: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let len_out = g.stride * len;
    let wt = taps_major(w, g.c_in, g.c_out, g.k);
    let mut dy = if need_dy { vec![T::zero(); y.len()] } else { Vec::new() };
    let mut dwt = if need_dw { vec![T::zero(); w.len()] } else { Vec::new() };
    let mut db = vec![T::zero(); g.c_out];
    for row in dout.chunks(g.c_out) {
        for (b, &d) in db.iter_mut().zip(row) {
            *b += d;
        }
    }
    for t in 0..len {
        for j in 0..g.k {
            let Some(d) = g.src(t, j, len_out) else { continue };
            let drow = &dout[d * g.c_out..(d + 1) * g.c_out];
            let base = j * g.c_in * g.c_out;
            if need_dy {
                let wj = &wt[base..base + g.c_in * g.c_out];
                let dys = &mut dy[t * g.c_in..(t + 1) * g.c_in];
                for (i, v) in dys.iter_mut().enumerate() {
                    *v += dot(drow, &wj[i * g.c_out..(i + 1) * g.c_out]);
                }
            }
            if need_dw {
                let ys = &y[t * g.c_in..(t + 1) * g.c_in];
                let dwj = &mut dwt[base..base + g.c_in * g.c_out];
                for (i, &yv) in ys.iter().enumerate() {
                    if yv != T::zero() {
                        axpy(&mut dwj[i * g.c_out..(i + 1) * g.c_out], yv, drow);
                    }
                }
            }
        }
    }
    let dw = if need_dw {
        taps_minor(&dwt, g.c_in, g.c_out, g.k)
    } else {
        Vec::new()
    };
    (dy, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_layout_round_trips() {
        let w: Vec<f64> = (0..2 * 3 * 5).map(|v| v as f64).collect();
        let t = taps_major(&w, 2, 3, 5);
        assert_eq!(taps_minor(&t, 2, 3, 5), w);
        let t = taps_transposed(&w, 2, 3, 5);
        assert_eq!(untaps_transposed(&t, 2, 3, 5), w);
    }

    #[test]
    fn forward_routes_each_channel_pair() {
        // two inputs, three outputs, k = 1: out[o] = sum_i w[o][i] x[i]
        let w = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let g = ConvGeometry::same(2, 3, 1, 1);
        let y = conv_forward(&[1.0, 10.0], 1, &w, None, &g, 1);
        assert_eq!(y, vec![21.0, 43.0, 65.0]);
    }

    #[test]
    fn moving_average_with_zero_padding() {
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let w = [1.0 / 3.0; 3];
        let g = ConvGeometry::same(1, 1, 3, 1);
        let y = conv_forward(&x, 4, &w, None, &g, 4);
        let expect = [1.0, 2.0, 3.0, 7.0 / 3.0];
        for (a, b) in y.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
