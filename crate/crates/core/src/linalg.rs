//! Small dense linear algebra for the pre-transform trainers: symmetric
//! eigendecomposition (PCA) and a square SVD (the orthogonal Procrustes
//! update in OPQ training).
//!
//! Matrices here are at most d x d with d <= 1024, so cyclic Jacobi methods
//! are plenty fast, fully deterministic, and dependency-free. Solves run in
//! f64 regardless of the ambient scalar type.

use rayon::prelude::*;

use crate::scalar::Scalar;
use crate::vector::VectorMatrix;

/// `X * R^T` over rows: applies the rotation/projection whose rows are in `r`
/// to every row of `x`. Output is `x.rows() x r.rows()`.
pub fn rotate_rows<S: Scalar>(x: &VectorMatrix<S>, r: &VectorMatrix<S>) -> VectorMatrix<S> {
    assert_eq!(x.dim(), r.dim(), "rotation width mismatch");
    let out_dim = r.rows();
    let mut out = vec![S::zero(); x.rows() * out_dim];
    out.par_chunks_exact_mut(out_dim)
        .enumerate()
        .for_each(|(i, row)| {
            let xi = x.row(i);
            for (j, slot) in row.iter_mut().enumerate() {
                let rj = r.row(j);
                let mut acc = S::zero();
                for k in 0..xi.len() {
                    acc += xi[k] * rj[k];
                }
                *slot = acc;
            }
        });
    VectorMatrix::new(x.rows(), out_dim, out).expect("shape by construction")
}

/// Column means in f64.
pub fn column_means<S: Scalar>(x: &VectorMatrix<S>) -> Vec<f64> {
    let mut acc = vec![0f64; x.dim()];
    for row in x.iter_rows() {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v.to_f64_lossy();
        }
    }
    let inv = if x.rows() > 0 { 1.0 / x.rows() as f64 } else { 0.0 };
    acc.iter_mut().for_each(|a| *a *= inv);
    acc
}

/// Population covariance matrix (d x d, row-major, f64) of the rows of `x`
/// around `means`.
pub fn covariance<S: Scalar>(x: &VectorMatrix<S>, means: &[f64]) -> Vec<f64> {
    let d = x.dim();
    let mut cov = vec![0f64; d * d];
    let mut centered = vec![0f64; d];
    for row in x.iter_rows() {
        for (c, (v, m)) in centered.iter_mut().zip(row.iter().zip(means)) {
            *c = v.to_f64_lossy() - m;
        }
        for i in 0..d {
            let ci = centered[i];
            let out = &mut cov[i * d..(i + 1) * d];
            for j in 0..d {
                out[j] += ci * centered[j];
            }
        }
    }
    let inv = if x.rows() > 0 { 1.0 / x.rows() as f64 } else { 0.0 };
    cov.iter_mut().for_each(|c| *c *= inv);
    cov
}

/// `X^T * Y` in f64 (d x d) for equally shaped row-major matrices.
pub fn cross_gram<S: Scalar>(x: &VectorMatrix<S>, y: &VectorMatrix<S>) -> Vec<f64> {
    assert_eq!(x.rows(), y.rows());
    let (dx, dy) = (x.dim(), y.dim());
    let mut g = vec![0f64; dx * dy];
    for (rx, ry) in x.iter_rows().zip(y.iter_rows()) {
        for i in 0..dx {
            let xi = rx[i].to_f64_lossy();
            let out = &mut g[i * dy..(i + 1) * dy];
            for j in 0..dy {
                out[j] += xi * ry[j].to_f64_lossy();
            }
        }
    }
    g
}

const JACOBI_SWEEPS: usize = 100;

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` sorted by descending eigenvalue;
/// eigenvectors are rows of the returned matrix.
pub fn sym_eigen(a: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), d * d);
    let mut m = a.to_vec();
    // v holds eigenvectors as columns.
    let mut v = identity(d);

    let frob: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-14 * frob.max(1e-300);

    for _ in 0..JACOBI_SWEEPS {
        let mut off = 0f64;
        for p in 0..d {
            for q in (p + 1)..d {
                off += m[p * d + q] * m[p * d + q];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[p * d + q];
                if apq.abs() <= tol / (d as f64) {
                    continue;
                }
                let (c, s) = jacobi_rotation(m[p * d + p], m[q * d + q], apq);
                // M <- J^T M J over rows/columns p and q.
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + q];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[q * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| m[j * d + j].total_cmp(&m[i * d + i]).then(i.cmp(&j)));
    let mut values = Vec::with_capacity(d);
    let mut vectors = vec![0f64; d * d];
    for (row, &col) in order.iter().enumerate() {
        values.push(m[col * d + col]);
        for k in 0..d {
            vectors[row * d + k] = v[k * d + col];
        }
    }
    (values, vectors)
}

fn jacobi_rotation(app: f64, aqq: f64, apq: f64) -> (f64, f64) {
    let tau = (aqq - app) / (2.0 * apq);
    let t = if tau >= 0.0 {
        1.0 / (tau + (1.0 + tau * tau).sqrt())
    } else {
        -1.0 / (-tau + (1.0 + tau * tau).sqrt())
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    (c, t * c)
}

/// One-sided Jacobi SVD of a square matrix: `A = U * diag(sigma) * V^T`.
///
/// Returns `(u, sigma, v)` with `u` and `v` row-major d x d and `sigma`
/// descending. Zero singular directions are completed so that `u` and `v`
/// stay orthogonal, which the Procrustes update relies on.
pub fn svd_square(a: &[f64], d: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), d * d);
    // Work on columns of A; W accumulates right rotations (as columns).
    let mut m = a.to_vec();
    let mut w = identity(d);

    for _ in 0..JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..d {
            for q in (p + 1)..d {
                let mut alpha = 0f64;
                let mut beta = 0f64;
                let mut gamma = 0f64;
                for i in 0..d {
                    let ip = m[i * d + p];
                    let iq = m[i * d + q];
                    alpha += ip * ip;
                    beta += iq * iq;
                    gamma += ip * iq;
                }
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt().max(1e-300) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta >= 0.0 {
                    1.0 / (zeta + (1.0 + zeta * zeta).sqrt())
                } else {
                    -1.0 / (-zeta + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..d {
                    let ip = m[i * d + p];
                    let iq = m[i * d + q];
                    m[i * d + p] = c * ip - s * iq;
                    m[i * d + q] = s * ip + c * iq;
                }
                for i in 0..d {
                    let ip = w[i * d + p];
                    let iq = w[i * d + q];
                    w[i * d + p] = c * ip - s * iq;
                    w[i * d + q] = s * ip + c * iq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sigma: Vec<f64> = (0..d)
        .map(|j| (0..d).map(|i| m[i * d + j] * m[i * d + j]).sum::<f64>().sqrt())
        .collect();

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));

    let mut u = vec![0f64; d * d];
    let mut v = vec![0f64; d * d];
    let mut out_sigma = Vec::with_capacity(d);
    let scale: f64 = sigma.iter().cloned().fold(0.0, f64::max).max(1e-300);
    let mut filled = Vec::with_capacity(d);
    for (slot, &col) in order.iter().enumerate() {
        out_sigma.push(sigma[col]);
        for i in 0..d {
            v[i * d + slot] = w[i * d + col];
        }
        if sigma[col] > 1e-13 * scale {
            for i in 0..d {
                u[i * d + slot] = m[i * d + col] / sigma[col];
            }
            filled.push(slot);
        }
    }
    // Complete any null columns of U into an orthonormal basis.
    for slot in 0..d {
        if filled.contains(&slot) {
            continue;
        }
        let mut best = vec![0f64; d];
        // Gram-Schmidt a standard basis vector against the filled columns.
        'basis: for e in 0..d {
            let mut cand = vec![0f64; d];
            cand[e] = 1.0;
            for &f in &filled {
                let dot: f64 = (0..d).map(|i| cand[i] * u[i * d + f]).sum();
                for i in 0..d {
                    cand[i] -= dot * u[i * d + f];
                }
            }
            let norm: f64 = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for x in cand.iter_mut() {
                    *x /= norm;
                }
                best = cand;
                break 'basis;
            }
        }
        for i in 0..d {
            u[i * d + slot] = best[i];
        }
        filled.push(slot);
    }
    sigma.clear();
    (u, out_sigma, v)
}

/// The orthogonal matrix `Omega` (row-major d x d) minimizing
/// `||X * Omega - Y||_F`, computed from the cross matrix `G = X^T Y` as
/// `Omega = U * V^T` where `G = U * diag(sigma) * V^T`.
pub fn procrustes_from_cross(g: &[f64], d: usize) -> Vec<f64> {
    let (u, _sigma, v) = svd_square(g, d);
    // Omega[i][j] = sum_k U[i][k] * V[j][k]
    let mut omega = vec![0f64; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0f64;
            for k in 0..d {
                acc += u[i * d + k] * v[j * d + k];
            }
            omega[i * d + j] = acc;
        }
    }
    omega
}

pub fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0f64; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

/// `||M^T M - I||_F`, the orthogonality defect of a square matrix.
pub fn orthogonality_error(m: &[f64], d: usize) -> f64 {
    let mut err = 0f64;
    for i in 0..d {
        for j in 0..d {
            let mut dot = 0f64;
            for k in 0..d {
                dot += m[k * d + i] * m[k * d + j];
            }
            let target = if i == j { 1.0 } else { 0.0 };
            err += (dot - target) * (dot - target);
        }
    }
    err.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn eigen_of_diagonal_matrix() {
        let a = vec![3.0, 0.0, 0.0, 0.0, 7.0, 0.0, 0.0, 0.0, 1.0];
        let (vals, vecs) = sym_eigen(&a, 3);
        assert!((vals[0] - 7.0).abs() < 1e-12);
        assert!((vals[1] - 3.0).abs() < 1e-12);
        assert!((vals[2] - 1.0).abs() < 1e-12);
        // Leading eigenvector is +/- e1.
        assert!((vecs[0..3].iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(vecs[1].abs() > 0.999);
    }

    #[test]
    fn eigen_two_by_two_known() {
        // [[2,1],[1,2]] has eigenvalues 3 and 1.
        let a = vec![2.0, 1.0, 1.0, 2.0];
        let (vals, vecs) = sym_eigen(&a, 2);
        assert!((vals[0] - 3.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
        // v0 proportional to (1,1)/sqrt(2)
        assert!((vecs[0].abs() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-10);
        assert!((vecs[1].abs() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-10);
    }

    #[test]
    fn eigen_vectors_are_orthonormal() {
        let mut rng = SeededRng::new(4);
        let d = 12;
        let mut a = vec![0f64; d * d];
        for i in 0..d {
            for j in i..d {
                let v = rng.next_signed_unit();
                a[i * d + j] = v;
                a[j * d + i] = v;
            }
        }
        let (_, vecs) = sym_eigen(&a, d);
        // Rows of vecs are eigenvectors; transpose for the defect check.
        let mut vt = vec![0f64; d * d];
        for i in 0..d {
            for j in 0..d {
                vt[j * d + i] = vecs[i * d + j];
            }
        }
        assert!(orthogonality_error(&vt, d) < 1e-10);
    }

    #[test]
    fn svd_reconstructs_matrix() {
        let mut rng = SeededRng::new(8);
        let d = 10;
        let a: Vec<f64> = (0..d * d).map(|_| rng.next_signed_unit() * 2.0).collect();
        let (u, s, v) = svd_square(&a, d);
        assert!(orthogonality_error(&u, d) < 1e-10);
        assert!(orthogonality_error(&v, d) < 1e-10);
        for w in s.windows(2) {
            assert!(w[0] >= w[1]);
        }
        let mut err = 0f64;
        for i in 0..d {
            for j in 0..d {
                let mut acc = 0f64;
                for k in 0..d {
                    acc += u[i * d + k] * s[k] * v[j * d + k];
                }
                err += (acc - a[i * d + j]).powi(2);
            }
        }
        assert!(err.sqrt() < 1e-9, "reconstruction error {}", err.sqrt());
    }

    #[test]
    fn svd_handles_rank_deficiency() {
        // Rank-1 matrix.
        let d = 4;
        let mut a = vec![0f64; d * d];
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] = (i + 1) as f64 * (j + 1) as f64;
            }
        }
        let (u, s, v) = svd_square(&a, d);
        assert!(s[1] < 1e-9 * s[0]);
        assert!(orthogonality_error(&u, d) < 1e-9);
        assert!(orthogonality_error(&v, d) < 1e-9);
    }

    #[test]
    fn procrustes_recovers_rotation() {
        let mut rng = SeededRng::new(15);
        let d = 8;
        let n = 64;
        // A random orthogonal matrix from the SVD of a random matrix.
        let raw: Vec<f64> = (0..d * d).map(|_| rng.next_signed_unit()).collect();
        let (omega0, _, _) = {
            let (u, s, v) = svd_square(&raw, d);
            // u * v^T is orthogonal.
            let mut o = vec![0f64; d * d];
            for i in 0..d {
                for j in 0..d {
                    let mut acc = 0f64;
                    for k in 0..d {
                        acc += u[i * d + k] * v[j * d + k];
                    }
                    o[i * d + j] = acc;
                }
            }
            (o, s, ())
        };
        let x: Vec<f64> = (0..n * d).map(|_| rng.next_signed_unit()).collect();
        // y = x * omega0
        let mut y = vec![0f64; n * d];
        for r in 0..n {
            for j in 0..d {
                let mut acc = 0f64;
                for k in 0..d {
                    acc += x[r * d + k] * omega0[k * d + j];
                }
                y[r * d + j] = acc;
            }
        }
        // g = x^T y
        let mut g = vec![0f64; d * d];
        for r in 0..n {
            for i in 0..d {
                for j in 0..d {
                    g[i * d + j] += x[r * d + i] * y[r * d + j];
                }
            }
        }
        let omega = procrustes_from_cross(&g, d);
        let err: f64 = omega
            .iter()
            .zip(&omega0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(err < 1e-8, "recovered rotation off by {}", err);
    }
}
