//! Lloyd's k-means with k-means++ seeding.
//!
//! Every quantizer and coarse index in the crate trains through this module.
//! Runs are deterministic for a fixed seed at any thread count: the
//! assignment step is a pure per-row map and all floating-point reductions
//! happen in a fixed order.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::vector::{nearest_centroid_index, VectorMatrix};

/// Relative objective improvement below which iteration stops.
pub const CONVERGENCE_RTOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct KMeansResult<S> {
    pub centroids: VectorMatrix<S>,
    /// Index of the assigned centroid per input row, under the final centroids.
    pub assignments: Vec<u32>,
    /// Sum of squared distances to assigned centroids, under the final centroids.
    pub objective: f64,
    /// Objective after seeding and after each Lloyd update, in order.
    pub objective_trace: Vec<f64>,
}

/// k-means++ seeding followed by Lloyd iterations.
pub fn kmeans<S: Scalar>(
    data: &VectorMatrix<S>,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<KMeansResult<S>> {
    validate(data, k, max_iters)?;
    let init = kmeanspp_init(data, k, seed);
    kmeans_with_init(data, init, max_iters)
}

/// Lloyd iterations from caller-supplied initial centroids.
pub fn kmeans_with_init<S: Scalar>(
    data: &VectorMatrix<S>,
    init: VectorMatrix<S>,
    max_iters: usize,
) -> Result<KMeansResult<S>> {
    let k = init.rows();
    validate(data, k, max_iters)?;
    if init.dim() != data.dim() {
        return Err(Error::invalid_argument(format!(
            "init centroid dim {} does not match data dim {}",
            init.dim(),
            data.dim()
        )));
    }

    let mut centroids = init;
    let (mut assignments, mut dists) = assign(data, &centroids);
    let mut objective = total(&dists);
    let mut trace = vec![objective];

    for _ in 0..max_iters {
        refill_empty_clusters(k, &mut assignments, &dists);
        update_centroids(data, &assignments, &mut centroids);
        let (a, d) = assign(data, &centroids);
        assignments = a;
        dists = d;
        let new_objective = total(&dists);
        trace.push(new_objective);
        let improvement = if objective > 0.0 {
            (objective - new_objective) / objective
        } else {
            0.0
        };
        objective = new_objective;
        if improvement < CONVERGENCE_RTOL {
            break;
        }
    }

    Ok(KMeansResult {
        centroids,
        assignments,
        objective,
        objective_trace: trace,
    })
}

fn validate<S: Scalar>(data: &VectorMatrix<S>, k: usize, max_iters: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid_argument("k must be >= 1"));
    }
    if max_iters == 0 {
        return Err(Error::invalid_argument("max_iters must be >= 1"));
    }
    if k > data.rows() {
        return Err(Error::invalid_argument(format!(
            "k={} exceeds row count {}",
            k,
            data.rows()
        )));
    }
    Ok(())
}

fn total<S: Scalar>(dists: &[S]) -> f64 {
    dists.iter().map(|d| d.to_f64_lossy()).sum()
}

fn assign<S: Scalar>(data: &VectorMatrix<S>, centroids: &VectorMatrix<S>) -> (Vec<u32>, Vec<S>) {
    let pairs: Vec<(u32, S)> = (0..data.rows())
        .into_par_iter()
        .map(|i| {
            let (c, d) = nearest_centroid_index(data.row(i), centroids);
            (c as u32, d)
        })
        .collect();
    let mut assignments = Vec::with_capacity(pairs.len());
    let mut dists = Vec::with_capacity(pairs.len());
    for (a, d) in pairs {
        assignments.push(a);
        dists.push(d);
    }
    (assignments, dists)
}

/// Move the row farthest from its centroid into each empty cluster
/// (ties broken by the lower row index).
fn refill_empty_clusters<S: Scalar>(k: usize, assignments: &mut [u32], dists: &[S]) {
    let mut counts = vec![0usize; k];
    for &a in assignments.iter() {
        counts[a as usize] += 1;
    }
    let mut moved = vec![false; assignments.len()];
    for cluster in 0..k {
        if counts[cluster] != 0 {
            continue;
        }
        let mut far: Option<(usize, S)> = None;
        for i in 0..assignments.len() {
            // Singleton donors would just leave a new hole behind.
            if moved[i] || counts[assignments[i] as usize] <= 1 {
                continue;
            }
            let better = match far {
                None => true,
                Some((_, best)) => dists[i].total_order(best) == std::cmp::Ordering::Greater,
            };
            if better {
                far = Some((i, dists[i]));
            }
        }
        if let Some((i, _)) = far {
            counts[assignments[i] as usize] -= 1;
            assignments[i] = cluster as u32;
            counts[cluster] += 1;
            moved[i] = true;
        }
    }
}

fn update_centroids<S: Scalar>(
    data: &VectorMatrix<S>,
    assignments: &[u32],
    centroids: &mut VectorMatrix<S>,
) {
    let k = centroids.rows();
    let dim = data.dim();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &a) in assignments.iter().enumerate() {
        members[a as usize].push(i);
    }
    let rows: Vec<Option<Vec<S>>> = members
        .into_par_iter()
        .map(|m| {
            if m.is_empty() {
                return None; // keep the stale centroid
            }
            let mut acc = vec![0f64; dim];
            for &i in &m {
                for (a, v) in acc.iter_mut().zip(data.row(i)) {
                    *a += v.to_f64_lossy();
                }
            }
            let inv = 1.0 / m.len() as f64;
            Some(acc.into_iter().map(|a| S::from_f64_lossy(a * inv)).collect())
        })
        .collect();
    for (c, row) in rows.into_iter().enumerate() {
        if let Some(row) = row {
            centroids.row_mut(c).copy_from_slice(&row);
        }
    }
}

fn kmeanspp_init<S: Scalar>(data: &VectorMatrix<S>, k: usize, seed: u64) -> VectorMatrix<S> {
    let mut rng = SeededRng::new(seed);
    let n = data.rows();
    let mut centroids = VectorMatrix::with_dim(data.dim());
    let first = rng.next_range(n);
    centroids.push_row(data.row(first));

    let mut min_dist: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| crate::vector::squared_l2_unchecked(data.row(i), data.row(first)).to_f64_lossy())
        .collect();

    while centroids.rows() < k {
        let total: f64 = min_dist.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.next_f64() * total;
            let mut cum = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in min_dist.iter().enumerate() {
                cum += w;
                if u < cum {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All remaining mass is zero: every point coincides with a chosen
            // centroid. Any pick keeps determinism.
            rng.next_range(n)
        };
        centroids.push_row(data.row(pick));
        let added = centroids.row(centroids.rows() - 1).to_vec();
        min_dist
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, md)| {
                let d = crate::vector::squared_l2_unchecked(data.row(i), &added).to_f64_lossy();
                if d < *md {
                    *md = d;
                }
            });
    }
    centroids
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f32]]) -> VectorMatrix<f32> {
        VectorMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn exact_symmetric_clusters() {
        let data = mat(&[&[0.0, 0.0], &[0.0, 0.0], &[10.0, 10.0], &[10.0, 10.0]]);
        let r = kmeans(&data, 2, 20, 1).unwrap();
        assert_eq!(r.objective, 0.0);
        let mut rows: Vec<Vec<f32>> = r.centroids.iter_rows().map(|x| x.to_vec()).collect();
        rows.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(rows, vec![vec![0.0, 0.0], vec![10.0, 10.0]]);
    }

    #[test]
    fn k_equals_distinct_rows_reaches_zero() {
        let data = mat(&[&[0.0], &[5.0], &[9.0]]);
        let r = kmeans(&data, 3, 20, 7).unwrap();
        assert_eq!(r.objective, 0.0);
    }

    #[test]
    fn one_lloyd_step_from_fixed_init() {
        // Oracle by hand: assignments {0,2}->c0, {10,12}->c1; means 1 and 11;
        // each point then sits at squared distance 1, objective 4.
        let data = mat(&[&[0.0], &[2.0], &[10.0], &[12.0]]);
        let init = mat(&[&[0.0], &[10.0]]);
        let r = kmeans_with_init(&data, init, 1).unwrap();
        assert_eq!(r.centroids.row(0), &[1.0]);
        assert_eq!(r.centroids.row(1), &[11.0]);
        assert_eq!(r.objective, 4.0);
    }

    #[test]
    fn objective_non_increasing_across_seeds() {
        let mut rng = SeededRng::new(99);
        let mut rows = Vec::new();
        for _ in 0..200 {
            rows.push(vec![
                rng.next_signed_unit() as f32 * 10.0,
                rng.next_signed_unit() as f32 * 10.0,
            ]);
        }
        let data = VectorMatrix::from_rows(&rows).unwrap();
        for seed in 0..5u64 {
            let r = kmeans(&data, 8, 30, seed).unwrap();
            for w in r.objective_trace.windows(2) {
                assert!(
                    w[1] <= w[0] + 1e-6 * w[0].abs().max(1.0),
                    "objective increased: {:?}",
                    r.objective_trace
                );
            }
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let mut rng = SeededRng::new(5);
        let mut rows = Vec::new();
        for _ in 0..100 {
            rows.push(vec![rng.next_signed_unit() as f32; 4]);
        }
        let data = VectorMatrix::from_rows(&rows).unwrap();
        let a = kmeans(&data, 5, 15, 42).unwrap();
        let b = kmeans(&data, 5, 15, 42).unwrap();
        assert_eq!(a.centroids.as_slice(), b.centroids.as_slice());
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.objective, b.objective);
    }

    #[test]
    fn objective_matches_recomputed_sum() {
        let mut rng = SeededRng::new(6);
        let mut rows = Vec::new();
        for _ in 0..150 {
            rows.push(vec![
                rng.next_signed_unit() as f32 * 3.0,
                rng.next_signed_unit() as f32 * 3.0,
                rng.next_signed_unit() as f32 * 3.0,
            ]);
        }
        let data = VectorMatrix::from_rows(&rows).unwrap();
        let r = kmeans(&data, 6, 25, 1).unwrap();
        let recomputed: f64 = (0..data.rows())
            .map(|i| {
                crate::vector::squared_l2(data.row(i), r.centroids.row(r.assignments[i] as usize))
                    .unwrap() as f64
            })
            .sum();
        let rel = (recomputed - r.objective).abs() / recomputed.max(1e-12);
        assert!(rel < 1e-4, "objective {} vs recomputed {}", r.objective, recomputed);
    }

    #[test]
    fn k_larger_than_rows_is_invalid() {
        let data = mat(&[&[0.0], &[1.0]]);
        assert!(matches!(
            kmeans(&data, 3, 5, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn k_above_distinct_rows_still_valid() {
        // Three distinct values, k=4: one cluster stays empty and is refilled.
        let data = mat(&[&[0.0], &[0.0], &[5.0], &[9.0]]);
        let r = kmeans(&data, 4, 10, 3).unwrap();
        assert_eq!(r.assignments.len(), 4);
        assert!(r.assignments.iter().all(|&a| (a as usize) < 4));
        assert!(r.objective >= 0.0);
    }
}
