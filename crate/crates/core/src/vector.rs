//! Dense vector primitives: row-major matrices, squared L2 distance, and
//! nearest-centroid scans. Everything downstream (k-means, PQ, IVF) is built
//! on these.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major matrix of `rows` vectors, each of dimensionality `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorMatrix<S> {
    rows: usize,
    dim: usize,
    data: Vec<S>,
}

impl<S: Scalar> VectorMatrix<S> {
    pub fn new(rows: usize, dim: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::invalid_argument(format!(
                "matrix data length {} does not match {} rows x {} dim",
                data.len(),
                rows,
                dim
            )));
        }
        Ok(VectorMatrix { rows, dim, data })
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        VectorMatrix {
            rows,
            dim,
            data: vec![S::zero(); rows * dim],
        }
    }

    /// Empty matrix that rows of width `dim` can be appended to.
    pub fn with_dim(dim: usize) -> Self {
        VectorMatrix {
            rows: 0,
            dim,
            data: Vec::new(),
        }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::invalid_argument(format!(
                    "row {} has length {}, expected {}",
                    i,
                    r.len(),
                    dim
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(VectorMatrix {
            rows: rows.len(),
            dim,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push_row(&mut self, row: &[S]) {
        assert_eq!(row.len(), self.dim, "row width mismatch");
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[S]> {
        self.data.chunks_exact(self.dim)
    }

    #[inline]
    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Copy of the rows at `indices`, in the given order.
    pub fn gather(&self, indices: &[usize]) -> VectorMatrix<S> {
        let mut out = VectorMatrix::with_dim(self.dim);
        out.data.reserve(indices.len() * self.dim);
        for &i in indices {
            out.push_row(self.row(i));
        }
        out
    }

    /// Columns `lo..hi` of every row, as a new matrix.
    pub fn slice_columns(&self, lo: usize, hi: usize) -> VectorMatrix<S> {
        assert!(lo <= hi && hi <= self.dim);
        let width = hi - lo;
        let mut data = Vec::with_capacity(self.rows * width);
        for r in self.iter_rows() {
            data.extend_from_slice(&r[lo..hi]);
        }
        VectorMatrix {
            rows: self.rows,
            dim: width,
            data,
        }
    }

    /// Errors if any entry is non-finite. Run at I/O and corpus boundaries.
    pub fn validate_finite(&self) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::invalid_argument(format!(
                    "non-finite value at row {} column {}",
                    i / self.dim.max(1),
                    i % self.dim.max(1)
                )));
            }
        }
        Ok(())
    }

    pub fn map_to<T: Scalar>(&self) -> VectorMatrix<T> {
        VectorMatrix {
            rows: self.rows,
            dim: self.dim,
            data: self
                .data
                .iter()
                .map(|v| T::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }
}

const PAIRWISE_LEAF: usize = 32;

/// Squared L2 distance with pairwise summation.
///
/// Pairwise accumulation keeps the rounding error logarithmic in the vector
/// length without promoting to a wider type.
pub fn squared_l2<S: Scalar>(a: &[S], b: &[S]) -> Result<S> {
    if a.len() != b.len() {
        return Err(Error::invalid_argument(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(squared_l2_unchecked(a, b))
}

/// `squared_l2` without the length check; callers guarantee equal lengths.
#[inline]
pub fn squared_l2_unchecked<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    if a.len() <= PAIRWISE_LEAF {
        let mut acc = S::zero();
        for i in 0..a.len() {
            let d = a[i] - b[i];
            acc += d * d;
        }
        acc
    } else {
        let mid = a.len() / 2;
        squared_l2_unchecked(&a[..mid], &b[..mid]) + squared_l2_unchecked(&a[mid..], &b[mid..])
    }
}

/// The `n` nearest centroids to `v`, ascending by squared L2 distance,
/// ties broken by the lower index.
pub fn nearest_centroids<S: Scalar>(
    v: &[S],
    centroids: &VectorMatrix<S>,
    n: usize,
) -> Result<Vec<(usize, S)>> {
    if centroids.is_empty() {
        return Err(Error::invalid_state("empty centroid set"));
    }
    if n == 0 || n > centroids.rows() {
        return Err(Error::invalid_argument(format!(
            "n={} out of range 1..={}",
            n,
            centroids.rows()
        )));
    }
    if v.len() != centroids.dim() {
        return Err(Error::invalid_argument(format!(
            "query dimension {} does not match centroid dimension {}",
            v.len(),
            centroids.dim()
        )));
    }
    let mut dists: Vec<(usize, S)> = centroids
        .iter_rows()
        .enumerate()
        .map(|(i, c)| (i, squared_l2_unchecked(v, c)))
        .collect();
    dists.sort_by(|a, b| a.1.total_order(b.1).then(a.0.cmp(&b.0)));
    dists.truncate(n);
    Ok(dists)
}

/// Index of the single nearest centroid (lowest index on ties).
#[inline]
pub fn nearest_centroid_index<S: Scalar>(v: &[S], centroids: &VectorMatrix<S>) -> (usize, S) {
    debug_assert!(!centroids.is_empty());
    let mut best = 0usize;
    let mut best_d = squared_l2_unchecked(v, centroids.row(0));
    for i in 1..centroids.rows() {
        let d = squared_l2_unchecked(v, centroids.row(i));
        if d.total_order(best_d) == std::cmp::Ordering::Less {
            best = i;
            best_d = d;
        }
    }
    (best, best_d)
}
