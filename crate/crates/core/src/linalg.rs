//! Small dense symmetric eigendecomposition (cyclic Jacobi) for the FID
//! matrix square root. Dimensions here are the evaluation feature width,
//! so O(n^3) sweeps are comfortable.

use crate::error::{Result, StaError};

/// Eigendecomposition of a symmetric matrix. Returns (eigenvalues,
/// eigenvectors) with eigenvectors stored column-major: column j of `v`
/// (elements `v[i*n + j]`) pairs with `values[j]`.
pub fn sym_eigen(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != n * n {
        return Err(StaError::shape(
            "sym_eigen",
            format!("{} values for {}x{}", a.len(), n, n),
        ));
    }
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let max_sweeps = 100;
    for _ in 0..max_sweeps {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frobenius(&m, n)) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // rotate rows/cols p and q
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let values: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    Ok((values, v))
}

fn frobenius(m: &[f64], n: usize) -> f64 {
    m.iter().take(n * n).map(|x| x * x).sum::<f64>().sqrt()
}

pub fn mat_mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    crate::graph::matmul_raw(a, b, n, n, n)
}

/// Principal square root of a symmetric PSD matrix; eigenvalues more
/// negative than `neg_tol` (scaled by the spectral magnitude) are
/// rejected, smaller negatives are clamped to zero.
pub fn sqrt_psd(a: &[f64], n: usize, neg_tol: f64) -> Result<Vec<f64>> {
    let (values, v) = sym_eigen(a, n)?;
    let scale = values.iter().fold(0.0f64, |acc, x| acc.max(x.abs())).max(1.0);
    let mut sqrt_vals = Vec::with_capacity(n);
    for &lam in &values {
        if lam < -neg_tol * scale {
            return Err(StaError::invalid(
                "sqrt_psd",
                format!("matrix is not PSD: smallest eigenvalue {}", lam),
            ));
        }
        // two-sided clamp: magnitudes inside the noise floor are zeros
        sqrt_vals.push(if lam > neg_tol * scale { lam.sqrt() } else { 0.0 });
    }
    // V * sqrt(D) * V^T
    let mut vs = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            vs[i * n + j] = v[i * n + j] * sqrt_vals[j];
        }
    }
    let mut vt = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            vt[i * n + j] = v[j * n + i];
        }
    }
    Ok(mat_mul(&vs, &vt, n))
}
