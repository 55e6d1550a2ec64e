//! IVFPQ: a coarse k-means partition whose inverted lists hold
//! residual-encoded PQ codes.
//!
//! A query probes the `nprobe` nearest coarse centroids, rebuilds the ADC
//! lookup table against each probed centroid's residual frame, and merges
//! candidates through one k-bounded heap. Distances are the ADC
//! approximations; no exact re-ranking happens here.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::kmeans::kmeans;
use crate::pq::{self, PqCodebook, PqCodes, TopK};
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::transform::{apply_rotation, train_opq, train_pca, PcaTransform};
use crate::vector::{nearest_centroid_index, nearest_centroids, VectorMatrix};

pub const INDEX_MAGIC: &[u8; 4] = b"KSIX";
pub const INDEX_VERSION: u32 = 1;
const FLAG_PCA: u32 = 1;
const FLAG_OPQ: u32 = 1 << 1;
const SECTION_PCA: u32 = 1;
const SECTION_ROTATION: u32 = 2;
const CODEBOOK_MAGIC: &[u8; 4] = b"PQCB";

/// Optional PCA projection followed by an optional learned rotation; the
/// index stores and searches entirely in this transformed space.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PreTransform<S> {
    pub pca: Option<PcaTransform<S>>,
    pub rotation: Option<VectorMatrix<S>>,
}

impl<S: Scalar> PreTransform<S> {
    pub fn output_dim(&self, input_dim: usize) -> usize {
        match &self.pca {
            Some(p) => p.d_out(),
            None => input_dim,
        }
    }

    pub fn apply(&self, v: &[S]) -> Result<Vec<S>> {
        let mut out = match &self.pca {
            Some(p) => p.apply(v)?,
            None => v.to_vec(),
        };
        if let Some(r) = &self.rotation {
            out = apply_rotation(r, &out)?;
        }
        Ok(out)
    }

    pub fn apply_batch(&self, data: &VectorMatrix<S>) -> Result<VectorMatrix<S>> {
        let mut out = match &self.pca {
            Some(p) => p.apply_batch(data)?,
            None => data.clone(),
        };
        if let Some(r) = &self.rotation {
            out = crate::linalg::rotate_rows(&out, r);
        }
        Ok(out)
    }
}

/// One inverted list: stored entry ids and their packed residual codes.
#[derive(Debug, Clone, PartialEq)]
pub struct IvfList {
    pub ids: Vec<u64>,
    pub codes: PqCodes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchParams {
    pub k: usize,
    pub nprobe: usize,
}

/// Training knobs. `nlist`, `m`, `l`, `seed` and `use_opq` are the
/// externally meaningful parameters; the iteration counts default to values
/// that behave well at desk scale.
#[derive(Debug, Clone, PartialEq)]
pub struct IvfTrainConfig {
    pub nlist: usize,
    pub m: usize,
    pub l: usize,
    pub seed: u64,
    pub use_opq: bool,
    /// Reduce to this dimensionality with PCA before anything else.
    pub pca_dim: Option<usize>,
    pub coarse_iters: usize,
    pub pq_iters: usize,
    pub opq_outer_iters: usize,
    pub opq_pq_iters: usize,
}

impl IvfTrainConfig {
    pub fn new(nlist: usize, m: usize, l: usize, seed: u64) -> Self {
        IvfTrainConfig {
            nlist,
            m,
            l,
            seed,
            use_opq: false,
            pca_dim: None,
            coarse_iters: 25,
            pq_iters: 25,
            opq_outer_iters: 20,
            opq_pq_iters: 10,
        }
    }

    /// Geometry checks that do not need training data.
    pub fn validate_dims(&self, d_raw: usize) -> Result<()> {
        if self.nlist == 0 {
            return Err(Error::invalid_argument("nlist must be >= 1"));
        }
        if self.l == 0 || self.l > pq::MAX_CODEWORDS {
            return Err(Error::invalid_argument(format!(
                "L={} out of range 1..={}",
                self.l,
                pq::MAX_CODEWORDS
            )));
        }
        let d_index = self.pca_dim.unwrap_or(d_raw);
        if d_index == 0 || d_index > d_raw {
            return Err(Error::invalid_argument(format!(
                "pca dimension {} out of range 1..={}",
                d_index, d_raw
            )));
        }
        if self.m == 0 || d_index % self.m != 0 {
            return Err(Error::invalid_argument(format!(
                "indexed dimensionality {} is not divisible by M={}",
                d_index, self.m
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvfPqIndex<S> {
    pre: PreTransform<S>,
    coarse: VectorMatrix<S>,
    codebook: PqCodebook<S>,
    lists: Vec<IvfList>,
    d_raw: usize,
    total: u64,
}

fn subsample_rows<S: Scalar>(data: &VectorMatrix<S>, cap: usize, seed: u64) -> VectorMatrix<S> {
    if data.rows() <= cap {
        return data.clone();
    }
    let mut rng = crate::rng::SeededRng::new(seed);
    let idx = rng.sample_indices(data.rows(), cap);
    data.gather(&idx)
}

/// Train coarse centroids and a residual codebook from a sample; the result
/// is an empty, trained index ready for `add`.
pub fn train_ivfpq<S: Scalar>(
    sample: &VectorMatrix<S>,
    cfg: &IvfTrainConfig,
) -> Result<IvfPqIndex<S>> {
    cfg.validate_dims(sample.dim())?;
    let needed = cfg.nlist.max(cfg.l);
    if sample.rows() < needed {
        return Err(Error::invalid_argument(format!(
            "training sample of {} rows is smaller than max(nlist={}, L={})",
            sample.rows(),
            cfg.nlist,
            cfg.l
        )));
    }

    let mut pre = PreTransform::default();
    let mut work = sample.clone();
    if let Some(d_out) = cfg.pca_dim {
        let pca = train_pca(&work, d_out)?;
        work = pca.apply_batch(&work)?;
        pre.pca = Some(pca);
    }
    if cfg.use_opq {
        // The rotation trainer needs far fewer points than the coarse
        // quantizer; cap it at 256 per codeword.
        let opq_input = subsample_rows(
            &work,
            256 * cfg.l,
            derive_seed(cfg.seed, "ivf-opq-sample"),
        );
        let opq = train_opq(
            &opq_input,
            cfg.m,
            cfg.l,
            cfg.opq_outer_iters,
            cfg.opq_pq_iters,
            derive_seed(cfg.seed, "ivf-opq"),
        )?;
        work = crate::linalg::rotate_rows(&work, &opq.rotation);
        pre.rotation = Some(opq.rotation);
    }

    let km = kmeans(&work, cfg.nlist, cfg.coarse_iters, derive_seed(cfg.seed, "ivf-coarse"))?;

    // Residuals of the (transformed) sample against their assigned centroids.
    let mut residuals = VectorMatrix::with_dim(work.dim());
    for (i, row) in work.iter_rows().enumerate() {
        let c = km.centroids.row(km.assignments[i] as usize);
        let r: Vec<S> = row.iter().zip(c).map(|(a, b)| *a - *b).collect();
        residuals.push_row(&r);
    }
    let pq_input = subsample_rows(&residuals, 256 * cfg.l, derive_seed(cfg.seed, "ivf-pq-sample"));
    drop(residuals);
    let codebook = pq::train_pq(
        &pq_input,
        cfg.m,
        cfg.l,
        cfg.pq_iters,
        derive_seed(cfg.seed, "ivf-pq"),
    )?;

    let lists = (0..cfg.nlist)
        .map(|_| IvfList { ids: Vec::new(), codes: PqCodes::new(cfg.m) })
        .collect();

    Ok(IvfPqIndex {
        pre,
        coarse: km.centroids,
        codebook,
        lists,
        d_raw: sample.dim(),
        total: 0,
    })
}

impl<S: Scalar> IvfPqIndex<S> {
    #[inline]
    pub fn total(&self) -> u64 {
        self.total
    }

    #[inline]
    pub fn nlist(&self) -> usize {
        self.lists.len()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.d_raw
    }

    /// Dimensionality the index operates in after the pre-transform.
    #[inline]
    pub fn indexed_dim(&self) -> usize {
        self.coarse.dim()
    }

    #[inline]
    pub fn coarse_centroids(&self) -> &VectorMatrix<S> {
        &self.coarse
    }

    #[inline]
    pub fn codebook(&self) -> &PqCodebook<S> {
        &self.codebook
    }

    #[inline]
    pub fn lists(&self) -> &[IvfList] {
        &self.lists
    }

    #[inline]
    pub fn pre_transform(&self) -> &PreTransform<S> {
        &self.pre
    }

    fn check_trained(&self) -> Result<()> {
        if self.coarse.is_empty() {
            return Err(Error::invalid_state("index has not been trained"));
        }
        Ok(())
    }

    /// Append `keys` with ids `first_id..first_id + keys.rows()`.
    ///
    /// Encoding runs in parallel; list appends happen serially in row order
    /// so a rebuilt index is byte-identical at any thread count.
    pub fn add(&mut self, keys: &VectorMatrix<S>, first_id: u64) -> Result<()> {
        self.check_trained()?;
        if keys.is_empty() {
            return Ok(());
        }
        if keys.dim() != self.d_raw {
            return Err(Error::invalid_argument(format!(
                "key dim {} does not match index dim {}",
                keys.dim(),
                self.d_raw
            )));
        }
        let m = self.codebook.num_subspaces();
        let n = keys.rows();
        let mut list_of = vec![0u32; n];
        let mut codes_flat = vec![0u8; n * m];
        let pre = &self.pre;
        let coarse = &self.coarse;
        let codebook = &self.codebook;
        list_of
            .par_iter_mut()
            .zip(codes_flat.par_chunks_exact_mut(m))
            .enumerate()
            .try_for_each(|(i, (slot, code_out))| -> Result<()> {
                let t = pre.apply(keys.row(i))?;
                let (list, _) = nearest_centroid_index(&t, coarse);
                let centroid = coarse.row(list);
                let residual: Vec<S> =
                    t.iter().zip(centroid).map(|(a, b)| *a - *b).collect();
                pq::encode_into(codebook, &residual, code_out)?;
                *slot = list as u32;
                Ok(())
            })?;
        for i in 0..n {
            let list = &mut self.lists[list_of[i] as usize];
            list.ids.push(first_id + i as u64);
            list.codes.push(&codes_flat[i * m..(i + 1) * m]);
        }
        self.total += n as u64;
        Ok(())
    }

    /// ADC search over the `nprobe` nearest coarse partitions. Results are
    /// ascending by `(distance, id)`.
    pub fn search(&self, query: &[S], params: &SearchParams) -> Result<Vec<(u64, S)>> {
        self.check_trained()?;
        if self.total == 0 {
            return Err(Error::invalid_state("search on an empty index"));
        }
        if params.k == 0 {
            return Err(Error::invalid_argument("k must be >= 1"));
        }
        if params.nprobe == 0 || params.nprobe > self.nlist() {
            return Err(Error::invalid_argument(format!(
                "nprobe={} out of range 1..={}",
                params.nprobe,
                self.nlist()
            )));
        }
        if query.len() != self.d_raw {
            return Err(Error::invalid_argument(format!(
                "query dim {} does not match index dim {}",
                query.len(),
                self.d_raw
            )));
        }
        let q = self.pre.apply(query)?;
        let probes = nearest_centroids(&q, &self.coarse, params.nprobe)?;
        let mut top = TopK::new(params.k);
        let mut residual = vec![S::zero(); q.len()];
        for (list_idx, _) in probes {
            let list = &self.lists[list_idx];
            if list.ids.is_empty() {
                continue;
            }
            let centroid = self.coarse.row(list_idx);
            for (r, (a, b)) in residual.iter_mut().zip(q.iter().zip(centroid)) {
                *r = *a - *b;
            }
            let lut = pq::build_lut(&self.codebook, &residual)?;
            for (i, code) in list.codes.iter().enumerate() {
                top.push(pq::adc_distance(&lut, code), list.ids[i]);
            }
        }
        Ok(top.into_sorted())
    }
}

impl IvfPqIndex<f32> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path)?;
        let mut w = ByteWriter::new(BufWriter::new(file));
        self.write_to(&mut w)?;
        w.flush()
    }

    pub fn write_to<W: std::io::Write>(&self, w: &mut ByteWriter<W>) -> Result<()> {
        let mut flags = 0u32;
        if self.pre.pca.is_some() {
            flags |= FLAG_PCA;
        }
        if self.pre.rotation.is_some() {
            flags |= FLAG_OPQ;
        }
        w.write_magic(INDEX_MAGIC)?;
        w.write_u32(INDEX_VERSION)?;
        w.write_u32(flags)?;
        w.write_u32(self.d_raw as u32)?;
        w.write_u32(self.indexed_dim() as u32)?;
        w.write_u32(self.nlist() as u32)?;
        w.write_u32(self.codebook.num_subspaces() as u32)?;
        w.write_u32(self.codebook.num_codewords() as u32)?;
        w.write_u64(self.total)?;

        if let Some(pca) = &self.pre.pca {
            w.write_u32(SECTION_PCA)?;
            w.write_u32(pca.d_in() as u32)?;
            w.write_u32(pca.d_out() as u32)?;
            w.write_u32(0)?; // reserved
            w.write_f32_slice(&pca.mu)?;
            w.write_f32_slice(pca.w.as_slice())?;
            w.pad_to(8)?;
        }
        if let Some(rot) = &self.pre.rotation {
            w.write_u32(SECTION_ROTATION)?;
            w.write_u32(rot.dim() as u32)?;
            w.write_f32_slice(rot.as_slice())?;
            w.pad_to(8)?;
        }

        w.write_magic(CODEBOOK_MAGIC)?;
        w.write_u32(self.codebook.num_subspaces() as u32)?;
        w.write_u32(self.codebook.num_codewords() as u32)?;
        w.write_u32(self.codebook.dsub() as u32)?;
        for sub in 0..self.codebook.num_subspaces() {
            w.write_f32_slice(self.codebook.subspace(sub).as_slice())?;
        }
        w.pad_to(8)?;

        w.write_f32_slice(self.coarse.as_slice())?;
        w.pad_to(8)?;

        for list in &self.lists {
            w.write_u64(list.ids.len() as u64)?;
            w.write_u64_slice(&list.ids)?;
            w.write_bytes(list.codes.as_bytes())?;
            w.pad_to(8)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path)?;
        let mut r = ByteReader::new(BufReader::new(file));
        Self::read_from(&mut r)
    }

    pub fn read_from<R: std::io::Read>(r: &mut ByteReader<R>) -> Result<Self> {
        r.expect_magic(INDEX_MAGIC)?;
        let at_version = r.offset();
        let version = r.read_u32()?;
        if version != INDEX_VERSION {
            return Err(Error::format(
                at_version,
                format!("unsupported index version {version}"),
            ));
        }
        let flags = r.read_u32()?;
        let d_raw = r.read_u32()? as usize;
        let d_index = r.read_u32()? as usize;
        let nlist = r.read_u32()? as usize;
        let m = r.read_u32()? as usize;
        let l = r.read_u32()? as usize;
        let total = r.read_u64()?;
        if d_raw == 0 || d_index == 0 || nlist == 0 || m == 0 || l == 0 || l > pq::MAX_CODEWORDS {
            return Err(Error::format(at_version, "degenerate index header"));
        }
        if d_index % m != 0 {
            return Err(Error::format(
                at_version,
                format!("indexed dim {d_index} not divisible by M={m}"),
            ));
        }

        let mut pre = PreTransform::default();
        if flags & FLAG_PCA != 0 {
            let at = r.offset();
            let tag = r.read_u32()?;
            if tag != SECTION_PCA {
                return Err(Error::format(at, format!("expected PCA section, tag {tag}")));
            }
            let d_in = r.read_u32()? as usize;
            let d_out = r.read_u32()? as usize;
            let _reserved = r.read_u32()?;
            if d_in != d_raw || d_out != d_index {
                return Err(Error::format(at, "PCA section dims disagree with header"));
            }
            let mu = r.read_f32_vec(d_in)?;
            let wdata = r.read_f32_vec(d_out * d_in)?;
            r.skip_pad(8)?;
            pre.pca = Some(PcaTransform {
                w: VectorMatrix::new(d_out, d_in, wdata)?,
                mu,
            });
        }
        if flags & FLAG_OPQ != 0 {
            let at = r.offset();
            let tag = r.read_u32()?;
            if tag != SECTION_ROTATION {
                return Err(Error::format(at, format!("expected rotation section, tag {tag}")));
            }
            let d = r.read_u32()? as usize;
            if d != d_index {
                return Err(Error::format(at, "rotation dim disagrees with header"));
            }
            let rdata = r.read_f32_vec(d * d)?;
            r.skip_pad(8)?;
            pre.rotation = Some(VectorMatrix::new(d, d, rdata)?);
        }

        let at_cb = r.offset();
        r.expect_magic(CODEBOOK_MAGIC)?;
        let cb_m = r.read_u32()? as usize;
        let cb_l = r.read_u32()? as usize;
        let dsub = r.read_u32()? as usize;
        if cb_m != m || cb_l != l || dsub * m != d_index {
            return Err(Error::format(at_cb, "codebook geometry disagrees with header"));
        }
        let mut codewords = Vec::with_capacity(m);
        for _ in 0..m {
            let data = r.read_f32_vec(l * dsub)?;
            codewords.push(VectorMatrix::new(l, dsub, data)?);
        }
        r.skip_pad(8)?;
        let codebook = PqCodebook::from_parts(m, l, dsub, codewords)?;

        let coarse_data = r.read_f32_vec(nlist * d_index)?;
        r.skip_pad(8)?;
        let coarse = VectorMatrix::new(nlist, d_index, coarse_data)?;

        let mut lists = Vec::with_capacity(nlist);
        let mut sum = 0u64;
        for _ in 0..nlist {
            let at = r.offset();
            let len = r.read_u64()? as usize;
            let ids = r.read_u64_vec(len)?;
            let code_bytes = r.read_bytes(len * m)?;
            if let Some(bad) = code_bytes.iter().find(|&&c| c as usize >= l) {
                return Err(Error::format(
                    at,
                    format!("code entry {bad} exceeds codebook size {l}"),
                ));
            }
            r.skip_pad(8)?;
            sum += len as u64;
            lists.push(IvfList {
                ids,
                codes: PqCodes::from_bytes(m, code_bytes)?,
            });
        }
        if sum != total {
            return Err(Error::format(
                r.offset(),
                format!("list lengths sum to {sum} but header claims {total}"),
            ));
        }

        Ok(IvfPqIndex {
            pre,
            coarse,
            codebook,
            lists,
            d_raw,
            total,
        })
    }
}
