//! Raw slice kernels shared by `Tensor` and the tape.
//!
//! Loop orders keep the innermost loop contiguous so the compiler can
//! vectorize without reassociating sums; results are deterministic.

use super::Element;

/// `out += a[m×k] · b[k×n]`
pub fn matmul<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out += a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn<E: Element>(a: &[E], b: &[E], k: usize, m: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Dot product with eight fixed accumulators (fixed order, so deterministic).
pub fn dot<E: Element>(a: &[E], b: &[E]) -> E {
    let mut acc = [E::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = E::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

pub fn transpose<E: Element>(a: &[E], rows: usize, cols: usize, out: &mut [E]) {
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<E: Element>(x: &[E], cols: usize, out: &mut [E]) {
    for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = xr.iter().copied().fold(E::neg_infinity(), E::max);
        let mut total = E::zero();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - max).exp();
            total += *o;
        }
        let inv = E::one() / total;
        for o in or.iter_mut() {
            *o *= inv;
        }
    }
}

/// Per-row normalization to zero mean and unit (population) variance.
/// Returns the reciprocal standard deviation of each row.
pub fn normalize_rows<E: Element>(x: &[E], cols: usize, eps: E, out: &mut [E]) -> Vec<E> {
    let n = E::lit(cols as f64);
    let mut rstd = Vec::with_capacity(x.len() / cols.max(1));
    for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let mean = xr.iter().copied().sum::<E>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / n;
        let r = E::one() / (var + eps).sqrt();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - mean) * r;
        }
        rstd.push(r);
    }
    rstd
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<E: Element>(x: E) -> E {
    let inner = E::lit(GELU_C) * (x + E::lit(GELU_A) * x * x * x);
    E::lit(0.5) * x * (E::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<E: Element>(x: E) -> E {
    let inner = E::lit(GELU_C) * (x + E::lit(GELU_A) * x * x * x);
    let th = inner.tanh();
    let dinner = E::lit(GELU_C) * (E::one() + E::lit(3.0 * GELU_A) * x * x);
    E::lit(0.5) * (E::one() + th) + E::lit(0.5) * x * (E::one() - th * th) * dinner
}

#[inline]
pub fn sigmoid<E: Element>(x: E) -> E {
    E::one() / (E::one() + (-x).exp())
}

#[inline]
pub fn silu<E: Element>(x: E) -> E {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<E: Element>(x: E) -> E {
    let s = sigmoid(x);
    s * (E::one() + x * (E::one() - s))
}
