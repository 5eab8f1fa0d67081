//! Raw loops shared by forward and backward passes.

use crate::scalar::Scalar;

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[m x n] += a[m x k] * b[k x n]`
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != T::zero() {
                axpy(aip, &b[p * n..(p + 1) * n], row);
            }
        }
    }
}

/// `out[m x k] += g[m x n] * b[k x n]^T`
pub fn matmul_bt_acc<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] += dot(gi, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `out[k x n] += a[m x k]^T * g[m x n]`
pub fn matmul_at_acc<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != T::zero() {
                axpy(aip, gi, &mut out[p * n..(p + 1) * n]);
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Standard normal CDF.
#[inline]
pub fn phi_cdf<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    half * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Standard normal density.
#[inline]
pub fn phi_pdf<T: Scalar>(x: T) -> T {
    let inv_sqrt_2pi = T::from_f64_lossy(0.398_942_280_401_432_7);
    inv_sqrt_2pi * (-(x * x) * T::from_f64_lossy(0.5)).exp()
}

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    x * phi_cdf(x)
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    phi_cdf(x) + x * phi_pdf(x)
}

/// Multi-head scaled dot-product self-attention over a packed `[n x 3c]`
/// query/key/value matrix. Writes `[n x c]` into `out` and the per-head
/// attention probabilities (`heads x n x n`) into `probs`.
pub fn attention_forward<T: Scalar>(
    qkv: &[T],
    n: usize,
    c: usize,
    heads: usize,
    out: &mut [T],
    probs: &mut [T],
) {
    let d = c / heads;
    let w = 3 * c;
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    for h in 0..heads {
        let p = &mut probs[h * n * n..(h + 1) * n * n];
        for i in 0..n {
            let qi = &qkv[i * w + h * d..i * w + h * d + d];
            let row = &mut p[i * n..(i + 1) * n];
            let mut max = T::neg_infinity();
            for j in 0..n {
                let kj = &qkv[j * w + c + h * d..j * w + c + h * d + d];
                let s = dot(qi, kj) * scale;
                row[j] = s;
                if s > max {
                    max = s;
                }
            }
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            let inv = T::one() / z;
            for v in row.iter_mut() {
                *v *= inv;
            }
            let oi = &mut out[i * c + h * d..i * c + h * d + d];
            for j in 0..n {
                let vj = &qkv[j * w + 2 * c + h * d..j * w + 2 * c + h * d + d];
                axpy(row[j], vj, oi);
            }
        }
    }
}

/// Gradient of [`attention_forward`] with respect to the packed input.
pub fn attention_backward<T: Scalar>(
    qkv: &[T],
    probs: &[T],
    g_out: &[T],
    n: usize,
    c: usize,
    heads: usize,
    g_qkv: &mut [T],
) {
    let d = c / heads;
    let w = 3 * c;
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    let mut ds = vec![T::zero(); n];
    for h in 0..heads {
        let p = &probs[h * n * n..(h + 1) * n * n];
        for i in 0..n {
            let go = &g_out[i * c + h * d..i * c + h * d + d];
            let pi = &p[i * n..(i + 1) * n];
            // dP[i, j] = <dO_i, v_j>;  dv_j += P[i, j] dO_i
            let mut weighted = T::zero();
            for j in 0..n {
                let vo = j * w + 2 * c + h * d;
                let dp = dot(go, &qkv[vo..vo + d]);
                ds[j] = dp;
                weighted += dp * pi[j];
                axpy(pi[j], go, &mut g_qkv[vo..vo + d]);
            }
            for j in 0..n {
                ds[j] = pi[j] * (ds[j] - weighted) * scale;
            }
            // dq_i += sum_j dS[i, j] k_j ; dk_j += dS[i, j] q_i
            let qo = i * w + h * d;
            for j in 0..n {
                let ko = j * w + c + h * d;
                let s = ds[j];
                if s == T::zero() {
                    continue;
                }
                for t in 0..d {
                    let kv = qkv[ko + t];
                    let qv = qkv[qo + t];
                    g_qkv[qo + t] += s * kv;
                    g_qkv[ko + t] += s * qv;
                }
            }
        }
    }
}
