// Slice-level numeric kernels shared by the tape and the plain tensor API.
//
// The matrix kernels accumulate over the inner dimension in ascending order,
// so every output element is summed exactly like a textbook triple loop.

use crate::Element;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn gemm<F: Element>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn gemm_tn<F: Element>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == F::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<F: Element>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    gemm(a, &bt, out, m, k, n);
}

pub fn transpose<F: Element>(x: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// Softmax over the first `valid` entries of `row`; the rest are set to 0.
pub fn softmax_in_place<F: Element>(row: &mut [F], valid: usize) {
    let (head, tail) = row.split_at_mut(valid);
    let max = head.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for v in head.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = total.recip();
    for v in head.iter_mut() {
        *v *= inv;
    }
    for v in tail.iter_mut() {
        *v = F::zero();
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<F: Element>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let half = F::lit(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (F::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<F: Element>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let half = F::lit(0.5);
    let three = F::lit(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}
