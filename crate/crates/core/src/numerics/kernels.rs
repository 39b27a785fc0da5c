//! Loop kernels shared by the autodiff graph and the cached inference path.
//!
//! All matrices are row-major slices. Every output element is produced by a
//! single fixed-order loop, so results are reproducible bit for bit.

use super::Scalar;

/// `c[m×n] = a[m×k] · b[k×n]`
pub fn matmul(a: &[Scalar], b: &[Scalar], m: usize, k: usize, n: usize) -> Vec<Scalar> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
    c
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt(a: &[Scalar], b: &[Scalar], m: usize, k: usize, n: usize) -> Vec<Scalar> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

/// `c[k×n] = a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn(a: &[Scalar], b: &[Scalar], m: usize, k: usize, n: usize) -> Vec<Scalar> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (c_pj, &b_ij) in c_row.iter_mut().zip(b_row) {
                *c_pj += a_ip * b_ij;
            }
        }
    }
    c
}

pub fn dot(a: &[Scalar], b: &[Scalar]) -> Scalar {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: Scalar) -> Scalar {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: Scalar) -> Scalar {
    x * sigmoid(x)
}

/// Numerically stable `log Σ exp(x)`.
pub fn logsumexp(x: &[Scalar]) -> Scalar {
    let m = x.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
    if m == Scalar::NEG_INFINITY {
        return m;
    }
    let s: Scalar = x.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

/// Softmax of one contiguous row, with max subtraction.
pub fn softmax_row(x: &[Scalar], out: &mut [Scalar]) {
    let m = x.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// `y = x / sqrt(mean(x²) + eps) ⊙ gain` on one row; returns the inverse rms.
pub fn rms_norm_row(x: &[Scalar], gain: &[Scalar], eps: Scalar, y: &mut [Scalar]) -> Scalar {
    let ms = x.iter().map(|v| v * v).sum::<Scalar>() / x.len() as Scalar;
    let r = 1.0 / (ms + eps).sqrt();
    for ((y, &x), &g) in y.iter_mut().zip(x).zip(gain) {
        *y = x * r * g;
    }
    r
}

/// Bias-free layer norm of one row; writes the normalized row (before gain)
/// into `xhat` and returns the inverse standard deviation.
///
/// A zero-variance row with `eps == 0` normalizes to zeros.
pub fn layer_norm_row(
    x: &[Scalar],
    gain: &[Scalar],
    eps: Scalar,
    xhat: &mut [Scalar],
    y: &mut [Scalar],
) -> Scalar {
    let d = x.len() as Scalar;
    let mean = x.iter().sum::<Scalar>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<Scalar>() / d;
    let denom = var + eps;
    let s = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * s;
        y[i] = xhat[i] * gain[i];
    }
    s
}

/// Rotation angles' inverse frequencies `base^(-2i/head_dim)`.
pub fn rope_frequencies(head_dim: usize, base: Scalar) -> Vec<Scalar> {
    (0..head_dim / 2)
        .map(|i| base.powf(-((2 * i) as Scalar) / head_dim as Scalar))
        .collect()
}

/// Rotates consecutive pairs of `x` (one head vector) by `pos · freq_i`.
/// `sign = -1` applies the inverse rotation.
pub fn rope_rotate(x: &mut [Scalar], pos: usize, freqs: &[Scalar], sign: Scalar) {
    for (i, &f) in freqs.iter().enumerate() {
        let angle = pos as Scalar * f;
        let (sin, cos) = angle.sin_cos();
        let sin = sign * sin;
        let (a, b) = (x[2 * i], x[2 * i + 1]);
        x[2 * i] = a * cos - b * sin;
        x[2 * i + 1] = a * sin + b * cos;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3×2
        let c = matmul(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
        // bᵀ stored explicitly as 2×3
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 2), c);
        // aᵀ stored explicitly as 3×2; (aᵀ)ᵀ·b recovers a·b
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        assert_eq!(matmul_tn(&at, &b, 3, 2, 2), c);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!((sigmoid(1.0) - 0.7310585786300049).abs() < 1e-15);
    }

    #[test]
    fn logsumexp_matches_naive() {
        let x: [Scalar; 3] = [0.1, -2.0, 3.5];
        let naive = x.iter().map(|&v| (v as f64).exp()).sum::<f64>().ln();
        assert!((logsumexp(&x) as f64 - naive).abs() < 1e4 * Scalar::EPSILON as f64);
    }
}
