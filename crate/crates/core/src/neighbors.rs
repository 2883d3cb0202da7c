//! Exact (brute-force) Euclidean neighbor search.

use std::cmp::Ordering;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

const ROW_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub sq_dist: f64,
}

fn by_distance(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.sq_dist
        .total_cmp(&b.sq_dist)
        .then(a.index.cmp(&b.index))
}

/// Squared Euclidean distances between every row of `a` and every row of `b`,
/// computed as `|a|^2 + |b|^2 - 2 a.b` after shifting both by `center`.
/// Negative round-off is clamped to zero.
pub(crate) fn cross_sq_dists_centered(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    center: &Array1<f64>,
) -> Array2<f64> {
    let a = &a - center;
    let b = &b - center;
    let na: Vec<f64> = a.rows().into_iter().map(|r| r.dot(&r)).collect();
    let nb: Vec<f64> = b.rows().into_iter().map(|r| r.dot(&r)).collect();
    let mut g = a.dot(&b.t());
    for ((i, j), v) in g.indexed_iter_mut() {
        *v = (na[i] + nb[j] - 2.0 * *v).max(0.0);
    }
    g
}

pub fn cross_sq_dists(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let center = b
        .mean_axis(Axis(0))
        .unwrap_or_else(|| Array1::zeros(b.ncols()));
    cross_sq_dists_centered(a, b, &center)
}

/// Symmetric matrix of squared distances with an exact zero diagonal.
pub fn self_sq_dists(points: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = points.nrows();
    let mut d = cross_sq_dists(points, points);
    for i in 0..n {
        d[[i, i]] = 0.0;
        for j in i + 1..n {
            let v = 0.5 * (d[[i, j]] + d[[j, i]]);
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

fn top_k(row: impl Iterator<Item = Neighbor>, k: usize) -> Vec<Neighbor> {
    let mut all: Vec<Neighbor> = row.collect();
    if all.len() > k {
        all.select_nth_unstable_by(k, by_distance);
        all.truncate(k);
    }
    all.sort_by(by_distance);
    all
}

/// The `k` nearest other points of every point, sorted by (distance, index).
pub fn knn(points: ArrayView2<'_, f64>, k: usize) -> Vec<Vec<Neighbor>> {
    knn_impl(points, points, k, true)
}

/// The `k` nearest reference points of every query.
pub fn knn_query(
    reference: ArrayView2<'_, f64>,
    queries: ArrayView2<'_, f64>,
    k: usize,
) -> Vec<Vec<Neighbor>> {
    knn_impl(reference, queries, k, false)
}

fn knn_impl(
    reference: ArrayView2<'_, f64>,
    queries: ArrayView2<'_, f64>,
    k: usize,
    exclude_self: bool,
) -> Vec<Vec<Neighbor>> {
    let center = reference
        .mean_axis(Axis(0))
        .unwrap_or_else(|| Array1::zeros(reference.ncols()));
    let m = queries.nrows();
    let starts: Vec<usize> = (0..m).step_by(ROW_CHUNK).collect();
    starts
        .par_iter()
        .flat_map_iter(|&start| {
            let end = (start + ROW_CHUNK).min(m);
            let block = queries.slice(s![start..end, ..]);
            let d = cross_sq_dists_centered(block, reference, &center);
            (0..end - start)
                .map(|r| {
                    let q = start + r;
                    let row = d.row(r);
                    top_k(
                        row.iter()
                            .enumerate()
                            .filter(|&(j, _)| !(exclude_self && j == q))
                            .map(|(j, &sq_dist)| Neighbor { index: j, sq_dist }),
                        k,
                    )
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Calls `f(i, row_i)` with the full row of squared distances from point `i`
/// to every point, processing rows in blocks to bound memory.
pub(crate) fn for_each_distance_row<F>(points: ArrayView2<'_, f64>, f: F)
where
    F: Fn(usize, &[f64]) + Sync,
{
    let center = points
        .mean_axis(Axis(0))
        .unwrap_or_else(|| Array1::zeros(points.ncols()));
    let n = points.nrows();
    let starts: Vec<usize> = (0..n).step_by(ROW_CHUNK).collect();
    starts.par_iter().for_each(|&start| {
        let end = (start + ROW_CHUNK).min(n);
        let mut d = cross_sq_dists_centered(points.slice(s![start..end, ..]), points, &center)
            .as_standard_layout()
            .into_owned();
        for r in 0..end - start {
            d[[r, start + r]] = 0.0;
            let row = d.row(r);
            f(start + r, row.as_slice().expect("standard layout"));
        }
    });
}
