//! High-dimensional similarity structure.
//!
//! * per-batch Gaussian joint probabilities `P` for the t-SNE objective,
//! * a global KNN edge graph with t-SNE style weights for LargeVis,
//! * UMAP fuzzy memberships,
//! * weighted positive-edge sampling with uniform negatives.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::neighbors::{self, Neighbor};

/// Search domain for the Gaussian precision `beta = 1 / (2 sigma^2)`.
pub const BETA_MIN: f64 = 1e-20;
pub const BETA_MAX: f64 = 1e20;
pub const PERPLEXITY_TOL: f64 = 1e-4;
pub const PERPLEXITY_MAX_ITER: usize = 64;
/// Off-diagonal floor applied to `P` before renormalisation.
pub const P_FLOOR: f64 = 1e-12;

pub const UMAP_SIGMA_TOL: f64 = 1e-5;
pub const UMAP_SIGMA_MAX_ITER: usize = 128;

pub const NEGATIVES_PER_POSITIVE: usize = 5;
/// Smallest graph for which negative sampling is accepted.
pub const MIN_NEGATIVE_POOL: usize = 7;

pub fn pairwise_sq_dists(points: ArrayView2<'_, f64>) -> Array2<f64> {
    neighbors::self_sq_dists(points)
}

/// Gaussian conditional distribution of one point over its neighbors.
#[derive(Debug, Clone, PartialEq)]
pub struct CondProbRow {
    pub probs: Vec<f64>,
    pub sigma: f64,
    pub beta: f64,
    /// `2^H` of `probs`.
    pub perplexity: f64,
    pub iterations: usize,
    pub converged: bool,
}

struct RowEval {
    probs: Vec<f64>,
    entropy: f64,
    /// variance of the shifted distances under `probs`; `dH/dbeta = -beta * var`
    variance: f64,
}

fn evaluate_row(shifted: &[f64], beta: f64) -> RowEval {
    let mut probs: Vec<f64> = shifted.iter().map(|&d| (-beta * d).exp()).collect();
    // the smallest shifted distance is 0, so z >= 1
    let z: f64 = probs.iter().sum();
    let mut mean = 0.0;
    let mut second = 0.0;
    for (p, &d) in probs.iter_mut().zip(shifted) {
        *p /= z;
        mean += *p * d;
        second += *p * d * d;
    }
    RowEval {
        probs,
        entropy: z.ln() + beta * mean,
        variance: (second - mean * mean).max(0.0),
    }
}

/// Finds the precision `beta` whose conditional distribution has the requested
/// perplexity, by a bracketing search on `beta` in `[BETA_MIN, BETA_MAX]`.
///
/// Each step proposes a Newton step on the entropy and falls back to bisection
/// (geometric while the bracket is open) whenever that step leaves the bracket.
pub fn calibrate_sigma(
    sq_dists_row: &[f64],
    target_perplexity: f64,
    tol: f64,
    max_iter: usize,
) -> Result<CondProbRow> {
    let m = sq_dists_row.len();
    if m == 0 {
        return Err(Error::DegenerateRow("row has no neighbors".into()));
    }
    if !(target_perplexity >= 1.0 && target_perplexity <= m as f64) {
        return Err(Error::InvalidPerplexity {
            perplexity: target_perplexity,
            neighbors: m,
        });
    }
    let d_min = sq_dists_row.iter().copied().fold(f64::INFINITY, f64::min);
    let d_max = sq_dists_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if d_max == 0.0 && m < 2 {
        return Err(Error::DegenerateRow(
            "single neighbor at zero distance".into(),
        ));
    }
    // Shifting by the minimum leaves the normalised probabilities unchanged and
    // keeps exp() away from underflow. Zero-distance neighbors all get weight 1,
    // which splits mass uniformly between duplicates.
    let shifted: Vec<f64> = sq_dists_row.iter().map(|&d| d - d_min).collect();
    let spread = shifted.iter().sum::<f64>() / m as f64;

    let target_h = target_perplexity.ln();
    let mut beta = if spread > 0.0 {
        (1.0 / spread).clamp(BETA_MIN, BETA_MAX)
    } else {
        1.0
    };
    let mut lo = BETA_MIN;
    let mut hi = BETA_MAX;
    let mut lo_open = true;
    let mut hi_open = true;

    let mut eval = evaluate_row(&shifted, beta);
    let mut iterations = 1;
    loop {
        let diff = eval.entropy - target_h;
        let perplexity = eval.entropy.exp();
        if (perplexity - target_perplexity).abs() <= tol || iterations >= max_iter {
            let converged = (perplexity - target_perplexity).abs() <= tol;
            return Ok(CondProbRow {
                probs: eval.probs,
                sigma: (1.0 / (2.0 * beta)).sqrt(),
                beta,
                perplexity,
                iterations,
                converged,
            });
        }
        // entropy decreases with beta
        if diff > 0.0 {
            lo = beta;
            lo_open = false;
        } else {
            hi = beta;
            hi_open = false;
        }
        if lo >= hi {
            // bracket collapsed at a domain bound
            let converged = (perplexity - target_perplexity).abs() <= tol;
            return Ok(CondProbRow {
                probs: eval.probs,
                sigma: (1.0 / (2.0 * beta)).sqrt(),
                beta,
                perplexity,
                iterations,
                converged,
            });
        }
        let slope = beta * eval.variance;
        let newton = if slope > 0.0 { beta + diff / slope } else { f64::NAN };
        beta = if newton > lo && newton < hi {
            newton
        } else if hi_open {
            (beta * 4.0).min(BETA_MAX)
        } else if lo_open {
            (beta / 4.0).max(BETA_MIN)
        } else {
            0.5 * (lo + hi)
        };
        eval = evaluate_row(&shifted, beta);
        iterations += 1;
    }
}

/// Per-row calibration summary kept alongside a joint probability matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowCalibration {
    pub sigma: f64,
    pub perplexity: f64,
    pub converged: bool,
}

/// Symmetric joint probabilities with a zero diagonal summing to one.
#[derive(Debug, Clone)]
pub struct JointP {
    pub p: Array2<f64>,
    /// Perplexity actually targeted after the small-batch floor.
    pub perplexity: f64,
    pub rows: Vec<RowCalibration>,
}

impl JointP {
    pub fn len(&self) -> usize {
        self.p.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.p.nrows() == 0
    }
}

/// Perplexity used for a batch of `n` points: capped at `(n - 1) / 3` and
/// floored at 1.
pub fn effective_perplexity(target: f64, n: usize) -> f64 {
    target.min((n as f64 - 1.0) / 3.0).max(1.0)
}

/// Conditional rows `p_{j|i}` for every point of the batch (dense, zero diagonal).
pub fn conditional_matrix(
    sq_dists: &Array2<f64>,
    perplexity: f64,
) -> Result<(Array2<f64>, Vec<RowCalibration>)> {
    let n = sq_dists.nrows();
    let rows: Vec<CondProbRow> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sq_dists[[i, j]]).collect();
            calibrate_sigma(&row, perplexity, PERPLEXITY_TOL, PERPLEXITY_MAX_ITER)
        })
        .collect::<Result<_>>()?;

    let mut cond = Array2::zeros((n, n));
    for (i, row) in rows.iter().enumerate() {
        let mut it = row.probs.iter();
        for j in (0..n).filter(|&j| j != i) {
            cond[[i, j]] = *it.next().expect("row length n-1");
        }
    }
    let summary = rows
        .iter()
        .map(|r| RowCalibration {
            sigma: r.sigma,
            perplexity: r.perplexity,
            converged: r.converged,
        })
        .collect();
    Ok((cond, summary))
}

/// Joint probabilities of one mini-batch:
/// `p_ij = (p_{j|i} + p_{i|j}) / 2n`, floored at [`P_FLOOR`] and renormalised.
pub fn batch_joint_p(points: ArrayView2<'_, f64>, target_perplexity: f64) -> Result<JointP> {
    let n = points.nrows();
    if n < 4 {
        return Err(Error::InvalidDataset(format!(
            "joint probabilities need a batch of at least 4 points, got {n}"
        )));
    }
    let perplexity = effective_perplexity(target_perplexity, n);
    let d = pairwise_sq_dists(points);
    let (cond, rows) = conditional_matrix(&d, perplexity)?;
    let unconverged = rows.iter().filter(|r| !r.converged).count();
    if unconverged > 0 {
        log::warn!("{unconverged} of {n} rows did not reach perplexity {perplexity}");
    }

    let scale = 1.0 / (2.0 * n as f64);
    let mut p = Array2::zeros((n, n));
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let v = ((cond[[i, j]] + cond[[j, i]]) * scale).max(P_FLOOR);
            p[[i, j]] = v;
            p[[j, i]] = v;
            total += 2.0 * v;
        }
    }
    p.mapv_inplace(|v| v / total);
    Ok(JointP { p, perplexity, rows })
}

// ---------------------------------------------------------------------------
// Edge graphs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// Undirected weighted graph, each edge stored once with `i < j`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeGraph {
    pub edges: Vec<Edge>,
    pub k_neighbors: usize,
    pub node_count: usize,
}

impl EdgeGraph {
    /// Builds the undirected edge list from directed weights, merging both
    /// directions with `combine(w_ij, w_ji)` (a missing direction counts as 0).
    fn from_directed(
        directed: &[Vec<(usize, f64)>],
        k_neighbors: usize,
        combine: impl Fn(f64, f64) -> f64,
    ) -> Self {
        let mut pairs: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
        for (i, row) in directed.iter().enumerate() {
            for &(j, w) in row {
                let entry = pairs.entry((i.min(j), i.max(j))).or_insert((0.0, 0.0));
                if i < j {
                    entry.0 = w;
                } else {
                    entry.1 = w;
                }
            }
        }
        let edges = pairs
            .into_iter()
            .map(|((i, j), (a, b))| Edge {
                i,
                j,
                weight: combine(a, b),
            })
            .filter(|e| e.weight > 0.0)
            .collect();
        Self {
            edges,
            k_neighbors,
            node_count: directed.len(),
        }
    }

    pub fn total_weight(&self) -> f64 {
        self.edges.iter().map(|e| e.weight).sum()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.node_count];
        for e in &self.edges {
            deg[e.i] += 1;
            deg[e.j] += 1;
        }
        deg
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("i,j,weight\n");
        for e in &self.edges {
            out.push_str(&format!("{},{},{:?}\n", e.i, e.j, e.weight));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads the `i,j,weight` debugging format; `node_count` is one past the
    /// largest node id and `k_neighbors` is unknown (0).
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut edges = Vec::new();
        for (row, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != 3 {
                return Err(Error::Ragged {
                    row,
                    expected: 3,
                    found: cells.len(),
                });
            }
            let bad = |col: usize| Error::NonNumeric {
                row,
                col,
                value: cells[col].to_string(),
            };
            edges.push(Edge {
                i: cells[0].parse().map_err(|_| bad(0))?,
                j: cells[1].parse().map_err(|_| bad(1))?,
                weight: cells[2].parse().map_err(|_| bad(2))?,
            });
        }
        let node_count = edges.iter().map(|e| e.i.max(e.j) + 1).max().unwrap_or(0);
        Ok(Self {
            edges,
            k_neighbors: 0,
            node_count,
        })
    }
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k >= n {
        return Err(Error::KTooLarge { k, n });
    }
    Ok(())
}

/// KNN graph with t-SNE style weights: Gaussian conditionals over each node's
/// `k` neighbors calibrated to perplexity `k / 3`, symmetrised as
/// `(p_{j|i} + p_{i|j}) / 2N`. The weights of both directions of every edge sum
/// to one.
pub fn knn_graph(points: ArrayView2<'_, f64>, k: usize) -> Result<EdgeGraph> {
    let n = points.nrows();
    check_k(k, n)?;
    let perplexity = (k as f64 / 3.0).max(1.0);
    let nn = neighbors::knn(points, k);
    let directed: Vec<Vec<(usize, f64)>> = nn
        .into_par_iter()
        .map(|mut row| {
            // index order makes the calibration independent of neighbor ranking
            row.sort_by_key(|nb| nb.index);
            let d: Vec<f64> = row.iter().map(|nb| nb.sq_dist).collect();
            let cal = calibrate_sigma(&d, perplexity, PERPLEXITY_TOL, PERPLEXITY_MAX_ITER)?;
            Ok(row.iter().map(|nb| nb.index).zip(cal.probs).collect())
        })
        .collect::<Result<_>>()?;

    let scale = 1.0 / (2.0 * n as f64);
    let mut graph = EdgeGraph::from_directed(&directed, k, |a, b| (a + b) * scale);
    let total = 2.0 * graph.total_weight();
    for e in &mut graph.edges {
        e.weight /= total;
    }
    Ok(graph)
}

/// Per-node quantities behind the UMAP fuzzy memberships.
#[derive(Debug, Clone, PartialEq)]
pub struct UmapCalibration {
    /// Distance to the nearest neighbor.
    pub rho: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Nodes whose sigma search failed and fell back to the mean KNN distance.
    pub fallback: Vec<usize>,
    pub a: f64,
    pub b: f64,
}

/// Membership sum `sum_j exp(-(r_j - rho) / sigma)`.
pub fn membership_sum(dists: &[f64], rho: f64, sigma: f64) -> f64 {
    dists.iter().map(|&r| (-(r - rho).max(0.0) / sigma).exp()).sum()
}

/// Bisection on `sigma` so the membership sum equals `target`. Returns `None`
/// when the tolerance is not met within the iteration budget.
pub fn calibrate_umap_sigma(dists: &[f64], rho: f64, target: f64) -> Option<f64> {
    let mut lo = 0.0;
    let mut hi = f64::INFINITY;
    let mut sigma = 1.0;
    for _ in 0..UMAP_SIGMA_MAX_ITER {
        let sum = membership_sum(dists, rho, sigma);
        if (sum - target).abs() <= UMAP_SIGMA_TOL {
            return Some(sigma);
        }
        // the sum grows with sigma
        if sum > target {
            hi = sigma;
            sigma = 0.5 * (lo + hi);
        } else {
            lo = sigma;
            sigma = if hi.is_finite() { 0.5 * (lo + hi) } else { sigma * 2.0 };
        }
        if sigma <= 0.0 || !sigma.is_finite() {
            return None;
        }
    }
    None
}

/// Fuzzy memberships `v_{j|i} = exp(-(r_ij - rho_i) / sigma_i)` over each node's
/// `k` nearest neighbors, combined by fuzzy union
/// `v_ij = v_{j|i} + v_{i|j} - v_{j|i} v_{i|j}`.
pub fn umap_memberships(
    points: ArrayView2<'_, f64>,
    k: usize,
    a: f64,
    b: f64,
) -> Result<(EdgeGraph, UmapCalibration)> {
    let n = points.nrows();
    check_k(k, n)?;
    if k < 2 {
        return Err(Error::InvalidConfig(format!(
            "umap memberships need k >= 2, got {k}"
        )));
    }
    let target = (k as f64).log2();
    let nn = neighbors::knn(points, k);

    struct NodeCal {
        rho: f64,
        sigma: f64,
        fell_back: bool,
        row: Vec<(usize, f64)>,
    }
    let per_node: Vec<NodeCal> = nn
        .par_iter()
        .map(|row: &Vec<Neighbor>| {
            let dists: Vec<f64> = row.iter().map(|nb| nb.sq_dist.sqrt()).collect();
            let rho = dists[0];
            let (sigma, fell_back) = match calibrate_umap_sigma(&dists, rho, target) {
                Some(s) => (s, false),
                None => {
                    let mean = dists.iter().sum::<f64>() / dists.len() as f64;
                    (if mean > 0.0 { mean } else { 1.0 }, true)
                }
            };
            let memberships = row
                .iter()
                .zip(&dists)
                .map(|(nb, &r)| (nb.index, (-(r - rho).max(0.0) / sigma).exp()))
                .collect();
            NodeCal {
                rho,
                sigma,
                fell_back,
                row: memberships,
            }
        })
        .collect();

    let fallback: Vec<usize> = per_node
        .iter()
        .enumerate()
        .filter(|(_, c)| c.fell_back)
        .map(|(i, _)| i)
        .collect();
    if !fallback.is_empty() {
        log::warn!(
            "sigma search failed for {} node(s); using mean KNN distance",
            fallback.len()
        );
    }
    let directed: Vec<Vec<(usize, f64)>> = per_node.iter().map(|c| c.row.clone()).collect();
    let graph = EdgeGraph::from_directed(&directed, k, |x, y| x + y - x * y);
    let calibration = UmapCalibration {
        rho: per_node.iter().map(|c| c.rho).collect(),
        sigma: per_node.iter().map(|c| c.sigma).collect(),
        fallback,
        a,
        b,
    };
    Ok((graph, calibration))
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Walker/Vose alias table over strictly positive weights.
#[derive(Debug, Clone)]
struct AliasTable {
    /// Outcome stored in each slot.
    outcome: Vec<usize>,
    threshold: Vec<f64>,
    alias: Vec<usize>,
}

impl AliasTable {
    fn new(weights: &[f64]) -> Option<Self> {
        let outcome: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
        let m = outcome.len();
        if m == 0 {
            return None;
        }
        let total: f64 = outcome.iter().map(|&i| weights[i]).sum();
        let mut scaled: Vec<f64> = outcome
            .iter()
            .map(|&i| weights[i] * m as f64 / total)
            .collect();
        let mut threshold = vec![1.0; m];
        let mut alias: Vec<usize> = (0..m).collect();
        let (mut small, mut large): (Vec<usize>, Vec<usize>) = (0..m).partition(|&s| scaled[s] < 1.0);
        while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
            small.pop();
            threshold[s] = scaled[s];
            alias[s] = l;
            scaled[l] -= 1.0 - scaled[s];
            if scaled[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        // leftovers on either side are full slots up to round-off
        Some(Self {
            outcome,
            threshold,
            alias,
        })
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let slot = rng.random_range(0..self.outcome.len());
        let u: f64 = rng.random();
        let pick = if u < self.threshold[slot] {
            slot
        } else {
            self.alias[slot]
        };
        self.outcome[pick]
    }
}

/// One positive edge and its uniformly drawn negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeSample {
    pub positive: (usize, usize),
    pub negatives: [usize; NEGATIVES_PER_POSITIVE],
}

/// Seeded sampler: positive edges proportional to weight, negatives uniform
/// over nodes.
#[derive(Debug, Clone)]
pub struct EdgeSampler {
    table: AliasTable,
    endpoints: Vec<(usize, usize)>,
    node_count: usize,
    rng: ChaCha8Rng,
}

pub fn build_edge_sampler(graph: &EdgeGraph, seed: u64) -> Result<EdgeSampler> {
    let weights: Vec<f64> = graph.edges.iter().map(|e| e.weight).collect();
    let table = AliasTable::new(&weights).ok_or(Error::EmptyGraph)?;
    Ok(EdgeSampler {
        table,
        endpoints: graph.edges.iter().map(|e| (e.i, e.j)).collect(),
        node_count: graph.node_count,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}

impl EdgeSampler {
    /// Index (into the graph's edge list) of one weighted draw.
    pub fn sample_edge(&mut self) -> usize {
        self.table.sample(&mut self.rng)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// `batch_size` samples; the positive edge is oriented at random and every
    /// negative `j'` differs from both endpoints of the positive.
    pub fn draw_edge_batch(&mut self, batch_size: usize) -> Result<Vec<EdgeSample>> {
        if self.node_count < MIN_NEGATIVE_POOL {
            return Err(Error::NegativePoolTooSmall {
                node_count: self.node_count,
            });
        }
        let mut out = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let e = self.sample_edge();
            let (a, b) = self.endpoints[e];
            let (i, j) = if self.rng.random::<bool>() { (a, b) } else { (b, a) };
            let mut negatives = [0; NEGATIVES_PER_POSITIVE];
            for slot in &mut negatives {
                *slot = loop {
                    let c = self.rng.random_range(0..self.node_count);
                    if c != i && c != j {
                        break c;
                    }
                };
            }
            out.push(EdgeSample {
                positive: (i, j),
                negatives,
            });
        }
        Ok(out)
    }
}

pub fn draw_edge_batch(sampler: &mut EdgeSampler, batch_size: usize) -> Result<Vec<EdgeSample>> {
    sampler.draw_edge_batch(batch_size)
}
