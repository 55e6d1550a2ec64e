//! Product quantization: split a d-dimensional vector into M sub-vectors and
//! quantize each against a per-subspace codebook of L codewords.
//!
//! Queries never decode stored codes. A per-query lookup table holds the
//! distance from the query sub-vector to every codeword, and the distance to
//! a code is the sum of M table lookups (asymmetric distance computation).

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kmeans::{kmeans, kmeans_with_init};
use crate::rng::derive_seed_index;
use crate::scalar::Scalar;
use crate::vector::{nearest_centroid_index, squared_l2_unchecked, VectorMatrix};

/// Codes are stored as one unsigned byte per subspace, so a codebook can
/// never hold more than 256 codewords per subspace.
pub const MAX_CODEWORDS: usize = 256;

/// Per-subspace codewords learned by k-means.
#[derive(Debug, Clone, PartialEq)]
pub struct PqCodebook<S> {
    m: usize,
    l: usize,
    dsub: usize,
    /// One `l x dsub` matrix per subspace.
    codewords: Vec<VectorMatrix<S>>,
}

impl<S: Scalar> PqCodebook<S> {
    pub fn from_parts(m: usize, l: usize, dsub: usize, codewords: Vec<VectorMatrix<S>>) -> Result<Self> {
        if codewords.len() != m {
            return Err(Error::invalid_argument("codeword matrix count != M"));
        }
        if l == 0 || l > MAX_CODEWORDS {
            return Err(Error::invalid_argument(format!(
                "L={} out of range 1..={}",
                l, MAX_CODEWORDS
            )));
        }
        for (i, cw) in codewords.iter().enumerate() {
            if cw.rows() != l || cw.dim() != dsub {
                return Err(Error::invalid_argument(format!(
                    "subspace {} codewords are {}x{}, expected {}x{}",
                    i,
                    cw.rows(),
                    cw.dim(),
                    l,
                    dsub
                )));
            }
        }
        Ok(PqCodebook { m, l, dsub, codewords })
    }

    #[inline]
    pub fn num_subspaces(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn num_codewords(&self) -> usize {
        self.l
    }

    #[inline]
    pub fn dsub(&self) -> usize {
        self.dsub
    }

    /// Full vector dimensionality `M * dsub`.
    #[inline]
    pub fn dim(&self) -> usize {
        self.m * self.dsub
    }

    #[inline]
    pub fn subspace(&self, m: usize) -> &VectorMatrix<S> {
        &self.codewords[m]
    }

    #[inline]
    pub fn codeword(&self, m: usize, l: usize) -> &[S] {
        self.codewords[m].row(l)
    }
}

/// The compact code of a single vector: one codeword index per subspace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PqCode(pub Vec<u8>);

/// Packed codes for many vectors, M bytes per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PqCodes {
    m: usize,
    data: Vec<u8>,
}

impl PqCodes {
    pub fn new(m: usize) -> Self {
        PqCodes { m, data: Vec::new() }
    }

    pub fn from_bytes(m: usize, data: Vec<u8>) -> Result<Self> {
        if m == 0 || data.len() % m != 0 {
            return Err(Error::invalid_argument(format!(
                "packed code length {} is not a multiple of M={}",
                data.len(),
                m
            )));
        }
        Ok(PqCodes { m, data })
    }

    #[inline]
    pub fn code_len(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len() / self.m
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[u8] {
        &self.data[i * self.m..(i + 1) * self.m]
    }

    pub fn push(&mut self, code: &[u8]) {
        assert_eq!(code.len(), self.m, "code width mismatch");
        self.data.extend_from_slice(code);
    }

    #[inline]
    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn gather(&self, indices: &[usize]) -> PqCodes {
        let mut out = PqCodes::new(self.m);
        out.data.reserve(indices.len() * self.m);
        for &i in indices {
            out.data.extend_from_slice(self.row(i));
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u8]> {
        self.data.chunks_exact(self.m)
    }
}

/// Per-query table of squared distances from each query sub-vector to every
/// codeword; `M x L`, row-major by subspace.
#[derive(Debug, Clone)]
pub struct DistanceLut<S> {
    m: usize,
    l: usize,
    table: Vec<S>,
}

impl<S: Scalar> DistanceLut<S> {
    #[inline]
    pub fn num_subspaces(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn num_codewords(&self) -> usize {
        self.l
    }

    #[inline]
    pub fn entry(&self, m: usize, l: usize) -> S {
        self.table[m * self.l + l]
    }
}

/// Train per-subspace codebooks with k-means over the key sub-vectors.
pub fn train_pq<S: Scalar>(
    keys: &VectorMatrix<S>,
    m: usize,
    l: usize,
    iters: usize,
    seed: u64,
) -> Result<PqCodebook<S>> {
    validate_geometry(keys.dim(), m)?;
    if l == 0 || l > MAX_CODEWORDS {
        return Err(Error::invalid_argument(format!(
            "L={} out of range 1..={}",
            l, MAX_CODEWORDS
        )));
    }
    if keys.rows() < l {
        return Err(Error::invalid_argument(format!(
            "{} training keys but L={} codewords per subspace",
            keys.rows(),
            l
        )));
    }
    let dsub = keys.dim() / m;
    let mut codewords = Vec::with_capacity(m);
    for sub in 0..m {
        let slice = keys.slice_columns(sub * dsub, (sub + 1) * dsub);
        let r = kmeans(&slice, l, iters, derive_seed_index(seed, "pq-subspace", sub as u64))?;
        codewords.push(r.centroids);
    }
    PqCodebook::from_parts(m, l, dsub, codewords)
}

/// Refresh an existing codebook with warm-started Lloyd iterations on new
/// training data. Used by the OPQ outer loop.
pub fn refine_pq<S: Scalar>(
    cb: &mut PqCodebook<S>,
    keys: &VectorMatrix<S>,
    iters: usize,
) -> Result<()> {
    if keys.dim() != cb.dim() {
        return Err(Error::invalid_argument(format!(
            "key dim {} does not match codebook dim {}",
            keys.dim(),
            cb.dim()
        )));
    }
    let dsub = cb.dsub;
    for sub in 0..cb.m {
        let slice = keys.slice_columns(sub * dsub, (sub + 1) * dsub);
        let r = kmeans_with_init(&slice, cb.codewords[sub].clone(), iters)?;
        cb.codewords[sub] = r.centroids;
    }
    Ok(())
}

fn validate_geometry(dim: usize, m: usize) -> Result<()> {
    if m == 0 || dim % m != 0 {
        return Err(Error::invalid_argument(format!(
            "dimensionality {} is not divisible by M={}",
            dim, m
        )));
    }
    Ok(())
}

/// Quantize one vector: per subspace, the index of the nearest codeword
/// (lowest index on ties).
pub fn encode<S: Scalar>(cb: &PqCodebook<S>, v: &[S]) -> Result<PqCode> {
    let mut out = vec![0u8; cb.m];
    encode_into(cb, v, &mut out)?;
    Ok(PqCode(out))
}

pub fn encode_into<S: Scalar>(cb: &PqCodebook<S>, v: &[S], out: &mut [u8]) -> Result<()> {
    if v.len() != cb.dim() {
        return Err(Error::invalid_argument(format!(
            "vector length {} does not match codebook dim {}",
            v.len(),
            cb.dim()
        )));
    }
    debug_assert_eq!(out.len(), cb.m);
    for sub in 0..cb.m {
        let sv = &v[sub * cb.dsub..(sub + 1) * cb.dsub];
        let (idx, _) = nearest_centroid_index(sv, &cb.codewords[sub]);
        out[sub] = idx as u8;
    }
    Ok(())
}

/// Quantize every row of a matrix into packed codes.
pub fn encode_batch<S: Scalar>(cb: &PqCodebook<S>, data: &VectorMatrix<S>) -> Result<PqCodes> {
    if data.dim() != cb.dim() {
        return Err(Error::invalid_argument(format!(
            "matrix dim {} does not match codebook dim {}",
            data.dim(),
            cb.dim()
        )));
    }
    let m = cb.m;
    let mut packed = vec![0u8; data.rows() * m];
    packed
        .par_chunks_exact_mut(m)
        .enumerate()
        .for_each(|(i, out)| {
            encode_into(cb, data.row(i), out).expect("dims already validated");
        });
    PqCodes::from_bytes(m, packed)
}

/// Reconstruct the vector a code stands for: concatenated codewords.
pub fn decode<S: Scalar>(cb: &PqCodebook<S>, code: &[u8]) -> Result<Vec<S>> {
    if code.len() != cb.m {
        return Err(Error::invalid_argument(format!(
            "code length {} does not match M={}",
            code.len(),
            cb.m
        )));
    }
    let mut out = Vec::with_capacity(cb.dim());
    for (sub, &c) in code.iter().enumerate() {
        if c as usize >= cb.l {
            return Err(Error::invalid_argument(format!(
                "code entry {} in subspace {} exceeds L={}",
                c, sub, cb.l
            )));
        }
        out.extend_from_slice(cb.codeword(sub, c as usize));
    }
    Ok(out)
}

/// Reconstruct every packed code into a matrix of codeword concatenations.
pub fn decode_batch<S: Scalar>(cb: &PqCodebook<S>, codes: &PqCodes) -> Result<VectorMatrix<S>> {
    let mut out = VectorMatrix::with_dim(cb.dim());
    for code in codes.iter() {
        out.push_row(&decode(cb, code)?);
    }
    Ok(out)
}

/// Build the per-query distance lookup table: `table[m][l]` is the squared L2
/// distance between the m-th query sub-vector and codeword l. Computed once
/// per query; every stored code is then scored by table lookups alone.
pub fn build_lut<S: Scalar>(cb: &PqCodebook<S>, q: &[S]) -> Result<DistanceLut<S>> {
    if q.len() != cb.dim() {
        return Err(Error::invalid_argument(format!(
            "query length {} does not match codebook dim {}",
            q.len(),
            cb.dim()
        )));
    }
    let mut table = Vec::with_capacity(cb.m * cb.l);
    for sub in 0..cb.m {
        let sv = &q[sub * cb.dsub..(sub + 1) * cb.dsub];
        for l in 0..cb.l {
            table.push(squared_l2_unchecked(sv, cb.codeword(sub, l)));
        }
    }
    Ok(DistanceLut { m: cb.m, l: cb.l, table })
}

/// Approximate squared distance between the LUT's query and a code:
/// the sum of M table lookups.
#[inline]
pub fn adc_distance<S: Scalar>(lut: &DistanceLut<S>, code: &[u8]) -> S {
    debug_assert_eq!(code.len(), lut.m);
    let mut acc = S::zero();
    for (sub, &c) in code.iter().enumerate() {
        acc += lut.table[sub * lut.l + c as usize];
    }
    acc
}

/// Bounded max-heap keeping the k best (smallest) `(distance, id)` pairs.
/// Ties resolve toward the lower id.
pub(crate) struct TopK<S> {
    k: usize,
    heap: BinaryHeap<HeapEntry<S>>,
}

struct HeapEntry<S> {
    dist: S,
    id: u64,
}

impl<S: Scalar> PartialEq for HeapEntry<S> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<S: Scalar> Eq for HeapEntry<S> {}
impl<S: Scalar> PartialOrd for HeapEntry<S> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<S: Scalar> Ord for HeapEntry<S> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_order(other.dist)
            .then(self.id.cmp(&other.id))
    }
}

impl<S: Scalar> TopK<S> {
    pub fn new(k: usize) -> Self {
        TopK {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    pub fn push(&mut self, dist: S, id: u64) {
        if self.heap.len() < self.k {
            self.heap.push(HeapEntry { dist, id });
        } else if let Some(worst) = self.heap.peek() {
            let entry = HeapEntry { dist, id };
            if entry.cmp(worst) == Ordering::Less {
                self.heap.pop();
                self.heap.push(entry);
            }
        }
    }

    /// Ascending by `(distance, id)`.
    pub fn into_sorted(self) -> Vec<(u64, S)> {
        let mut v: Vec<HeapEntry<S>> = self.heap.into_vec();
        v.sort();
        v.into_iter().map(|e| (e.id, e.dist)).collect()
    }
}

/// Positions of the k smallest ADC distances over a code buffer, ascending;
/// ties go to the lower position. Returns all positions when `k` exceeds the
/// buffer length.
pub fn adc_topk<S: Scalar>(
    lut: &DistanceLut<S>,
    codes: &PqCodes,
    k: usize,
) -> Result<Vec<(usize, S)>> {
    if codes.is_empty() {
        return Err(Error::invalid_state("adc_topk over an empty code buffer"));
    }
    if k == 0 {
        return Err(Error::invalid_argument("k must be >= 1"));
    }
    if codes.code_len() != lut.m {
        return Err(Error::invalid_argument(format!(
            "code width {} does not match LUT subspaces {}",
            codes.code_len(),
            lut.m
        )));
    }
    let mut top = TopK::new(k.min(codes.len()));
    for (pos, code) in codes.iter().enumerate() {
        top.push(adc_distance(lut, code), pos as u64);
    }
    Ok(top
        .into_sorted()
        .into_iter()
        .map(|(id, d)| (id as usize, d))
        .collect())
}
