//! Forward math shared by the tape ops and the KV-cached decode path, so
//! both routes run the exact same arithmetic.

use crate::tensor::{gemm, Scalar, View, ViewMut};

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub(crate) fn silu<T: Scalar>(v: T) -> T {
    v * sigmoid(v)
}

/// Numerically stable softmax in place; sums run left to right.
pub(crate) fn softmax_inplace<T: Scalar>(row: &mut [T]) {
    let mut max = T::neg_infinity();
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// `log(sum(exp(row)))`.
pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let mut max = T::neg_infinity();
    for &v in row {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for &v in row {
        sum += (v - max).exp();
    }
    max + sum.ln()
}

/// Row-wise RMSNorm. `inv_rms` receives `1/sqrt(mean(x^2)+eps)` per row.
pub(crate) fn rmsnorm_rows<T: Scalar>(
    x: &[T],
    d: usize,
    weight: &[T],
    eps: T,
    out: &mut [T],
    inv_rms: &mut [T],
) {
    let dn = T::from_f64(d as f64);
    for ((row, out_row), inv) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).zip(inv_rms) {
        let mut ss = T::zero();
        for &v in row {
            ss += v * v;
        }
        let r = T::one() / (ss / dn + eps).sqrt();
        *inv = r;
        for ((o, &v), &w) in out_row.iter_mut().zip(row).zip(weight) {
            *o = v * r * w;
        }
    }
}

/// Row count up to which `linear` skips packing and takes plain dot products.
const GEMV_ROWS: usize = 4;

/// Eight-lane dot product; the independent lanes let the compiler vectorize.
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(T::zero(), |s, (x, y)| s + *x * *y);
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let lanes = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    lanes + tail
}

/// `out = x · wᵀ + beta * out` where `x` is `[m, k]` and `w` is `[n, k]`.
pub(crate) fn linear<T: Scalar>(x: &[T], m: usize, k: usize, w: &[T], n: usize, beta: T, out: &mut [T]) {
    if m <= GEMV_ROWS && k > 0 {
        assert!(x.len() >= m * k && w.len() >= n * k && out.len() >= m * n, "linear operand sizes");
        for (xr, or) in x.chunks_exact(k).take(m).zip(out.chunks_exact_mut(n)) {
            for (o, wr) in or.iter_mut().zip(w.chunks_exact(k)) {
                let v = dot(xr, wr);
                *o = if beta == T::zero() { v } else { v + beta * *o };
            }
        }
        return;
    }
    gemm(
        T::one(),
        View::rm(x, m, k),
        View::rm(w, n, k).t(),
        beta,
        ViewMut::rm(out, m, n),
    );
}

/// Rotary embedding tables for rotate-half pairing `(i, i + head_dim/2)`.
#[derive(Clone, Debug)]
pub(crate) struct RopeTable<T> {
    half: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RopeTable<T> {
    pub fn new(head_dim: usize, max_pos: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_pos * half);
        let mut sin = Vec::with_capacity(max_pos * half);
        for pos in 0..max_pos {
            for i in 0..half {
                let freq = base.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = pos as f64 * freq;
                cos.push(T::from_f64(angle.cos()));
                sin.push(T::from_f64(angle.sin()));
            }
        }
        RopeTable { half, cos, sin }
    }

    pub fn max_pos(&self) -> usize {
        if self.half == 0 {
            usize::MAX
        } else {
            self.cos.len() / self.half
        }
    }

    /// Rotates every head of one row in place; `inverse` applies the transpose.
    pub fn rotate_row(&self, row: &mut [T], n_heads: usize, pos: usize, inverse: bool) {
        let half = self.half;
        let hd = 2 * half;
        let cos = &self.cos[pos * half..(pos + 1) * half];
        let sin = &self.sin[pos * half..(pos + 1) * half];
        for h in 0..n_heads {
            let head = &mut row[h * hd..(h + 1) * hd];
            for i in 0..half {
                let (c, s) = (cos[i], if inverse { -sin[i] } else { sin[i] });
                let a = head[i];
                let b = head[i + half];
                head[i] = a * c - b * s;
                head[i + half] = b * c + a * s;
            }
        }
    }
}

/// Geometry of a batched multi-head activation `[batch * seq, n_heads * head_dim]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct AttnShape {
    pub batch: usize,
    pub seq: usize,
    pub n_heads: usize,
    pub head_dim: usize,
}

impl AttnShape {
    pub fn inner(&self) -> usize {
        self.n_heads * self.head_dim
    }

    /// Offset of head `h` of sequence `b`, row 0.
    pub fn head_offset(&self, b: usize, h: usize) -> usize {
        b * self.seq * self.inner() + h * self.head_dim
    }

    pub fn probs_offset(&self, b: usize, h: usize) -> usize {
        (b * self.n_heads + h) * self.seq * self.seq
    }
}

/// Causal scaled dot-product attention. `probs` receives the `[batch, heads,
/// seq, seq]` attention weights (zero above the diagonal).
pub(crate) fn causal_attention<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    s: AttnShape,
    out: &mut [T],
    probs: &mut [T],
) {
    let inner = s.inner();
    let t = s.seq;
    let scale = T::one() / T::from_f64(s.head_dim as f64).sqrt();
    for b in 0..s.batch {
        for h in 0..s.n_heads {
            let off = s.head_offset(b, h);
            let p_off = s.probs_offset(b, h);
            let qv = View { data: &q[off..], rows: t, cols: s.head_dim, rs: inner, cs: 1 };
            let kv = View { data: &k[off..], rows: t, cols: s.head_dim, rs: inner, cs: 1 };
            let vv = View { data: &v[off..], rows: t, cols: s.head_dim, rs: inner, cs: 1 };
            let p = &mut probs[p_off..p_off + t * t];
            gemm(scale, qv, kv.t(), T::zero(), ViewMut::rm(p, t, t));
            for i in 0..t {
                let row = &mut p[i * t..(i + 1) * t];
                softmax_inplace(&mut row[..=i]);
                row[i + 1..].iter_mut().for_each(|x| *x = T::zero());
            }
            let ov = ViewMut { data: &mut out[off..], rows: t, cols: s.head_dim, rs: inner, cs: 1 };
            gemm(T::one(), View::rm(p, t, t), vv, T::zero(), ov);
        }
    }
}
