//! Embedding quality: k-nearest-neighbor classification accuracy and
//! trustworthiness.

use std::fmt;
use std::sync::Mutex;

use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::neighbors::{self, Neighbor};

pub const DEFAULT_K: usize = 5;

/// Majority label among `neighbors` (sorted nearest first). Ties go to the
/// tied label that occurs nearest.
fn vote(neighbors: &[Neighbor], labels: &[u32]) -> u32 {
    let mut tally: Vec<(u32, usize, usize)> = Vec::with_capacity(neighbors.len());
    for (rank, n) in neighbors.iter().enumerate() {
        let l = labels[n.index];
        match tally.iter_mut().find(|t| t.0 == l) {
            Some(t) => t.1 += 1,
            None => tally.push((l, 1, rank)),
        }
    }
    tally
        .iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.2.cmp(&a.2)))
        .map(|t| t.0)
        .expect("at least one neighbor")
}

fn check_pair(embed: ArrayView2<'_, f64>, labels: &[u32], what: &str) -> Result<()> {
    if embed.nrows() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{what}: {} labels for {} points",
            labels.len(),
            embed.nrows()
        )));
    }
    Ok(())
}

fn accuracy(hoods: &[Vec<Neighbor>], ref_labels: &[u32], query_labels: &[u32]) -> f64 {
    let hits = hoods
        .iter()
        .zip(query_labels)
        .filter(|(h, &l)| vote(h, ref_labels) == l)
        .count();
    hits as f64 / query_labels.len() as f64
}

/// Fraction of queries whose label equals the majority label of their `k`
/// nearest reference points.
pub fn knn_accuracy(
    ref_embed: ArrayView2<'_, f64>,
    ref_labels: &[u32],
    query_embed: ArrayView2<'_, f64>,
    query_labels: &[u32],
    k: usize,
) -> Result<f64> {
    check_pair(ref_embed, ref_labels, "reference")?;
    check_pair(query_embed, query_labels, "query")?;
    if ref_embed.ncols() != query_embed.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "reference has {} columns, queries {}",
            ref_embed.ncols(),
            query_embed.ncols()
        )));
    }
    if k == 0 || k > ref_embed.nrows() {
        return Err(Error::KTooLarge {
            k,
            n: ref_embed.nrows(),
        });
    }
    if query_embed.nrows() == 0 {
        return Err(Error::InvalidDataset("no query points".into()));
    }
    let hoods = neighbors::knn_query(ref_embed, query_embed, k);
    Ok(accuracy(&hoods, ref_labels, query_labels))
}

/// Leave-one-out accuracy of the embedding against itself: each point is
/// classified by its `k` nearest other points.
pub fn knn_accuracy_self(embed: ArrayView2<'_, f64>, labels: &[u32], k: usize) -> Result<f64> {
    check_pair(embed, labels, "embedding")?;
    let n = embed.nrows();
    if k == 0 || k >= n {
        return Err(Error::KTooLarge { k, n });
    }
    let hoods = neighbors::knn(embed, k);
    Ok(accuracy(&hoods, labels, labels))
}

/// `T(k) = 1 - 2/(n k (2n - 3k - 1)) * sum_i sum_{j in U_k(i)} (r(i,j) - k)`,
/// where `U_k(i)` are the embedding-space k nearest neighbors of `i` that are
/// not among its input-space k nearest, and `r(i,j)` is the input-space rank
/// (1 = nearest). Distance ties are ordered by index.
pub fn trustworthiness(hi_points: ArrayView2<'_, f64>, embedding: ArrayView2<'_, f64>, k: usize) -> Result<f64> {
    let n = hi_points.nrows();
    if embedding.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} input points, {} embedded",
            n,
            embedding.nrows()
        )));
    }
    if k == 0 || 2 * k >= n {
        return Err(Error::KTooLarge { k, n });
    }
    let low = neighbors::knn(embedding, k);
    let penalties = Mutex::new(vec![0.0f64; n]);
    neighbors::for_each_distance_row(hi_points, |i, row| {
        let before = |a: usize, b: usize| row[a].total_cmp(&row[b]).then(a.cmp(&b)).is_lt();
        let mut sum = 0.0;
        for nb in &low[i] {
            let j = nb.index;
            let rank = 1 + (0..n).filter(|&l| l != i && before(l, j)).count();
            if rank > k {
                sum += (rank - k) as f64;
            }
        }
        penalties.lock().expect("poisoned")[i] = sum;
    });
    let total: f64 = penalties.into_inner().expect("poisoned").iter().sum();
    let (nf, kf) = (n as f64, k as f64);
    let t = 1.0 - 2.0 / (nf * kf * (2.0 * nf - 3.0 * kf - 1.0)) * total;
    Ok(t.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub knn_accuracy: f64,
    pub trustworthiness: Option<f64>,
    pub k_used: usize,
    pub n_eval: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "knn_accuracy,trustworthiness,k_used,n_eval";

    pub fn to_kv_string(&self) -> String {
        format!(
            "knn_accuracy = {}\ntrustworthiness = {}\nk_used = {}\nn_eval = {}\n",
            self.knn_accuracy,
            self.trust_text(),
            self.k_used,
            self.n_eval
        )
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.knn_accuracy,
            self.trust_text(),
            self.k_used,
            self.n_eval
        )
    }

    fn trust_text(&self) -> String {
        self.trustworthiness.map_or_else(|| "NA".into(), |t| t.to_string())
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_kv_string())
    }
}
