//! Plain slice kernels shared by the tape primitives.
//!
//! All reductions accumulate strictly left to right so a row's result depends
//! only on that row's inputs and never on how many other rows share the call.

use crate::real::Real;

const TILE: usize = 16;

/// `out[m×n] += a[m×k] · b[k×n]`. Zero entries of `a` are skipped, so keys
/// that a softmax row assigned exactly zero weight contribute no terms.
pub fn matmul_acc<S: Real>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        axpy_panel(orow, n, |p| arow[p], k, b);
    }
}

/// `out[k×n] += aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
pub fn matmul_tn_acc<S: Real>(a: &[S], g: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let orow = &mut out[p * n..(p + 1) * n];
        axpy_panel(orow, n, |i| a[i * k + p], m, g);
    }
}

/// `orow += Σ_r coef(r) · rows[r]` over `r = 0..count` in order, skipping
/// zero coefficients; the row is processed in register-sized column tiles.
#[inline(always)]
fn axpy_panel<S: Real>(orow: &mut [S], n: usize, coef: impl Fn(usize) -> S, count: usize, rows: &[S]) {
    let mut j0 = 0;
    while j0 + TILE <= n {
        let mut acc: [S; TILE] = orow[j0..j0 + TILE].try_into().expect("tile");
        for r in 0..count {
            let c = coef(r);
            if c == S::zero() {
                continue;
            }
            let src: &[S; TILE] = rows[r * n + j0..r * n + j0 + TILE].try_into().expect("tile");
            for t in 0..TILE {
                acc[t] += c * src[t];
            }
        }
        orow[j0..j0 + TILE].copy_from_slice(&acc);
        j0 += TILE;
    }
    if j0 < n {
        let tail = &mut orow[j0..];
        for r in 0..count {
            let c = coef(r);
            if c == S::zero() {
                continue;
            }
            for (o, &v) in tail.iter_mut().zip(&rows[r * n + j0..(r + 1) * n]) {
                *o += c * v;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · bᵀ` where `b` is `k×n`.
pub fn matmul_nt_acc<S: Real>(g: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        let mut p = 0;
        while p + 4 <= k {
            let rows = [&b[p * n..(p + 1) * n], &b[(p + 1) * n..(p + 2) * n], &b[(p + 2) * n..(p + 3) * n], &b[(p + 3) * n..(p + 4) * n]];
            let mut acc = [S::zero(); 4];
            for (j, &x) in grow.iter().enumerate() {
                for t in 0..4 {
                    acc[t] += x * rows[t][j];
                }
            }
            for t in 0..4 {
                orow[p + t] += acc[t];
            }
            p += 4;
        }
        for (q, o) in orow.iter_mut().enumerate().skip(p) {
            let mut acc = S::zero();
            for (&x, &y) in grow.iter().zip(&b[q * n..(q + 1) * n]) {
                acc += x * y;
            }
            *o += acc;
        }
    }
}

/// Unmasked softmax of one row.
pub fn softmax_row<S: Real>(x: &[S], out: &mut [S]) {
    let mut max = S::neg_infinity();
    for &v in x {
        if v > max {
            max = v;
        }
    }
    let mut sum = S::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Softmax over the visible entries of one row. Hidden entries are excluded
/// from the max and the normalizer and written as exact zeros. Returns `false`
/// when the row has no visible entry.
pub fn masked_softmax_row<S: Real>(x: &[S], visible: &[bool], out: &mut [S]) -> bool {
    let mut max = S::neg_infinity();
    let mut any = false;
    for (&v, &m) in x.iter().zip(visible) {
        if m {
            any = true;
            if v > max {
                max = v;
            }
        }
    }
    if !any {
        return false;
    }
    let mut sum = S::zero();
    for ((o, &v), &m) in out.iter_mut().zip(x).zip(visible) {
        if m {
            *o = (v - max).exp();
            sum += *o;
        } else {
            *o = S::zero();
        }
    }
    for (o, &m) in out.iter_mut().zip(visible) {
        if m {
            *o /= sum;
        }
    }
    true
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<S: Real>(x: S) -> S {
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    let half = S::lit(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<S: Real>(x: S) -> S {
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    let half = S::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (S::one() + S::lit(3.0) * a * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * du
}

/// Normalizes one row to zero mean and unit variance. Returns `1/σ`.
pub fn layer_norm_row<S: Real>(x: &[S], eps: S, out: &mut [S]) -> S {
    let n = S::lit(x.len() as f64);
    let mut mean = S::zero();
    for &v in x {
        mean += v;
    }
    mean /= n;
    let mut var = S::zero();
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    var /= n;
    let inv = S::one() / (var + eps).sqrt();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mean) * inv;
    }
    inv
}
