//! Vector pre-transformations applied before quantization: PCA dimensionality
//! reduction and the learned OPQ rotation.

use crate::error::{Error, Result};
use crate::linalg;
use crate::pq::{self, PqCodebook};
use crate::scalar::Scalar;
use crate::vector::{squared_l2_unchecked, VectorMatrix};

/// Mean-centering projection onto the top principal components.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaTransform<S> {
    /// `d_out x d_in`; rows are orthonormal principal directions sorted by
    /// descending eigenvalue.
    pub w: VectorMatrix<S>,
    /// Column means of the training data, length `d_in`.
    pub mu: Vec<S>,
}

impl<S: Scalar> PcaTransform<S> {
    #[inline]
    pub fn d_in(&self) -> usize {
        self.w.dim()
    }

    #[inline]
    pub fn d_out(&self) -> usize {
        self.w.rows()
    }

    /// `W * (v - mu)`.
    pub fn apply(&self, v: &[S]) -> Result<Vec<S>> {
        if v.len() != self.d_in() {
            return Err(Error::invalid_argument(format!(
                "vector length {} does not match PCA input dim {}",
                v.len(),
                self.d_in()
            )));
        }
        let centered: Vec<S> = v.iter().zip(&self.mu).map(|(x, m)| *x - *m).collect();
        let mut out = Vec::with_capacity(self.d_out());
        for j in 0..self.d_out() {
            let row = self.w.row(j);
            let mut acc = S::zero();
            for k in 0..centered.len() {
                acc += row[k] * centered[k];
            }
            out.push(acc);
        }
        Ok(out)
    }

    pub fn apply_batch(&self, data: &VectorMatrix<S>) -> Result<VectorMatrix<S>> {
        if data.dim() != self.d_in() {
            return Err(Error::invalid_argument("PCA input dim mismatch"));
        }
        let mut out = VectorMatrix::with_dim(self.d_out());
        for row in data.iter_rows() {
            out.push_row(&self.apply(row)?);
        }
        Ok(out)
    }
}

/// Fit PCA on `data`: column means plus the top `d_out` eigenvectors of the
/// covariance matrix, rows sorted by descending eigenvalue. Each
/// eigenvector's first nonzero component is made positive so the result is
/// reproducible across eigensolvers.
pub fn train_pca<S: Scalar>(data: &VectorMatrix<S>, d_out: usize) -> Result<PcaTransform<S>> {
    let d_in = data.dim();
    if d_out == 0 || d_out > d_in {
        return Err(Error::invalid_argument(format!(
            "d_out={} out of range 1..={}",
            d_out, d_in
        )));
    }
    if data.rows() < d_out {
        return Err(Error::invalid_argument(format!(
            "need at least {} rows to fit {} components, got {}",
            d_out,
            d_out,
            data.rows()
        )));
    }
    let means = linalg::column_means(data);
    let cov = linalg::covariance(data, &means);
    let (_vals, vecs) = linalg::sym_eigen(&cov, d_in);

    let mut w = VectorMatrix::with_dim(d_in);
    for j in 0..d_out {
        let mut row: Vec<f64> = vecs[j * d_in..(j + 1) * d_in].to_vec();
        if let Some(first) = row.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                row.iter_mut().for_each(|x| *x = -*x);
            }
        }
        let row_s: Vec<S> = row.into_iter().map(S::from_f64_lossy).collect();
        w.push_row(&row_s);
    }
    Ok(PcaTransform {
        w,
        mu: means.into_iter().map(S::from_f64_lossy).collect(),
    })
}

/// Learned orthogonal rotation plus the codebook trained in rotated space.
#[derive(Debug, Clone, PartialEq)]
pub struct OpqTransform<S> {
    /// `d x d` rotation; rows of R, applied as `R * v`.
    pub rotation: VectorMatrix<S>,
    /// Product quantizer fitted to the rotated training data.
    pub codebook: PqCodebook<S>,
}

impl<S: Scalar> OpqTransform<S> {
    #[inline]
    pub fn dim(&self) -> usize {
        self.rotation.dim()
    }

    /// `R * v`.
    pub fn apply(&self, v: &[S]) -> Result<Vec<S>> {
        apply_rotation(&self.rotation, v)
    }

    pub fn apply_batch(&self, data: &VectorMatrix<S>) -> Result<VectorMatrix<S>> {
        if data.dim() != self.dim() {
            return Err(Error::invalid_argument("OPQ input dim mismatch"));
        }
        Ok(linalg::rotate_rows(data, &self.rotation))
    }
}

/// `R * v` where `r` holds the rows of R.
pub fn apply_rotation<S: Scalar>(r: &VectorMatrix<S>, v: &[S]) -> Result<Vec<S>> {
    if v.len() != r.dim() {
        return Err(Error::invalid_argument(format!(
            "vector length {} does not match rotation dim {}",
            v.len(),
            r.dim()
        )));
    }
    let mut out = Vec::with_capacity(r.rows());
    for j in 0..r.rows() {
        let row = r.row(j);
        let mut acc = S::zero();
        for k in 0..v.len() {
            acc += row[k] * v[k];
        }
        out.push(acc);
    }
    Ok(out)
}

/// Per-iteration training diagnostics.
#[derive(Debug, Clone, Default)]
pub struct OpqTrainingTrace {
    /// Mean squared reconstruction error on the training set, one entry per
    /// outer iteration.
    pub mse: Vec<f64>,
    /// `||R^T R - I||_F` after each outer iteration.
    pub orthogonality: Vec<f64>,
}

pub fn identity_rotation<S: Scalar>(d: usize) -> VectorMatrix<S> {
    let mut data = vec![S::zero(); d * d];
    for i in 0..d {
        data[i * d + i] = S::one();
    }
    VectorMatrix::new(d, d, data).expect("square identity")
}

/// Train OPQ: alternate between refreshing the product quantizer on the
/// rotated data and re-solving the rotation that best maps the data onto the
/// current reconstructions (orthogonal Procrustes via SVD of `X^T Y`).
///
/// With `outer_iters == 0` the rotation stays the identity and the codebook
/// is a plain PQ fit.
pub fn train_opq<S: Scalar>(
    data: &VectorMatrix<S>,
    m: usize,
    l: usize,
    outer_iters: usize,
    pq_iters: usize,
    seed: u64,
) -> Result<OpqTransform<S>> {
    train_opq_traced(data, m, l, outer_iters, pq_iters, seed).map(|(t, _)| t)
}

pub fn train_opq_traced<S: Scalar>(
    data: &VectorMatrix<S>,
    m: usize,
    l: usize,
    outer_iters: usize,
    pq_iters: usize,
    seed: u64,
) -> Result<(OpqTransform<S>, OpqTrainingTrace)> {
    let d = data.dim();
    let mut rotation = identity_rotation::<S>(d);
    let mut trace = OpqTrainingTrace::default();

    if outer_iters == 0 {
        let codebook = pq::train_pq(data, m, l, pq_iters, seed)?;
        return Ok((OpqTransform { rotation, codebook }, trace));
    }

    let mut codebook: Option<PqCodebook<S>> = None;
    let mut prev_reconstruction: Option<VectorMatrix<S>> = None;

    for iter in 0..outer_iters {
        if let Some(y) = prev_reconstruction.take() {
            // New rotation from the previous iteration's reconstructions:
            // minimize ||X * R^T - Y||_F over orthogonal R.
            let g = linalg::cross_gram(data, &y);
            let omega = linalg::procrustes_from_cross(&g, d);
            // omega is R^T; rows of R are columns of omega.
            let mut rows = vec![S::zero(); d * d];
            for i in 0..d {
                for j in 0..d {
                    rows[i * d + j] = S::from_f64_lossy(omega[j * d + i]);
                }
            }
            rotation = VectorMatrix::new(d, d, rows)?;
        }

        let rotated = linalg::rotate_rows(data, &rotation);
        match codebook.as_mut() {
            None => codebook = Some(pq::train_pq(&rotated, m, l, pq_iters, seed)?),
            Some(cb) => pq::refine_pq(cb, &rotated, pq_iters)?,
        }
        let cb = codebook.as_ref().expect("codebook initialized");
        let codes = pq::encode_batch(cb, &rotated)?;
        let reconstruction = pq::decode_batch(cb, &codes)?;

        let mut err = 0f64;
        for (z, y) in rotated.iter_rows().zip(reconstruction.iter_rows()) {
            err += squared_l2_unchecked(z, y).to_f64_lossy();
        }
        trace.mse.push(err / rotated.rows().max(1) as f64);
        let r64: Vec<f64> = rotation.as_slice().iter().map(|v| v.to_f64_lossy()).collect();
        trace.orthogonality.push(linalg::orthogonality_error(&r64, d));
        let _ = iter;

        prev_reconstruction = Some(reconstruction);
    }

    Ok((
        OpqTransform {
            rotation,
            codebook: codebook.expect("outer_iters > 0"),
        },
        trace,
    ))
}
