//! Loss values and embedding-space gradients for the three objectives, and the
//! embedding-gradient clip that makes training the encoder feasible.
//!
//! Sign conventions: `tsne_embedding_grad` returns the gradient of the loss.
//! The pairwise LargeVis/UMAP functions return the *force* on `y_i` in the
//! form the two objectives are usually written in, i.e. the negative gradient
//! of the per-edge loss: attraction along a positive edge, repulsion along a
//! negative one.

use std::sync::OnceLock;

use ndarray::{Array2, ArrayView2};

use crate::affinity::EdgeSample;
use crate::error::{Error, Result};

/// Floor applied to `q_ij` inside the logarithm of the KL divergence only.
pub const Q_FLOOR: f64 = 1e-12;
pub const DEFAULT_EMBED_CLIP: f64 = 1e14;

/// Student-t weights of a batch embedding and the normalised `Q`.
#[derive(Debug, Clone)]
pub struct BatchQ {
    /// `w_ij = 1 / (1 + |y_i - y_j|^2)`, zero on the diagonal.
    pub w: Array2<f64>,
    pub q: Array2<f64>,
    /// Sum of `w` over ordered pairs `i != j`.
    pub z: f64,
}

pub fn lowdim_q(embedding: ArrayView2<'_, f64>) -> BatchQ {
    let (n, s) = embedding.dim();
    let y = embedding.as_standard_layout();
    let y = y.as_slice().expect("standard layout");
    let mut w = Array2::zeros((n, n));
    let mut z = 0.0;
    {
        let ws = w.as_slice_mut().expect("fresh array");
        for i in 0..n {
            let yi = &y[i * s..(i + 1) * s];
            for j in i + 1..n {
                let yj = &y[j * s..(j + 1) * s];
                let d2: f64 = yi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum();
                let v = 1.0 / (1.0 + d2);
                ws[i * n + j] = v;
                ws[j * n + i] = v;
                z += 2.0 * v;
            }
        }
    }
    let q = w.mapv(|v| v / z);
    BatchQ { w, q, z }
}

/// `KL(P || Q) = sum_{i != j} p_ij log(p_ij / q_ij)`; zero `p_ij` contribute 0.
pub fn tsne_loss(p: ArrayView2<'_, f64>, q: &BatchQ) -> f64 {
    let mut kl = 0.0;
    for ((i, j), &pij) in p.indexed_iter() {
        if i != j && pij > 0.0 {
            kl += pij * (pij / q.q[[i, j]].max(Q_FLOOR)).ln();
        }
    }
    kl
}

/// Objective whose embedding gradient is the exaggerated force field
/// `4 sum_j (alpha p_ij - q_ij) w_ij (y_i - y_j)`:
/// `sum alpha p_ij log(alpha p_ij / w_ij) + log Z`. Equals [`tsne_loss`] when
/// `alpha == 1` and `P` sums to one.
pub fn tsne_exaggerated_objective(p: ArrayView2<'_, f64>, q: &BatchQ, exaggeration: f64) -> f64 {
    let mut total = q.z.ln();
    for ((i, j), &pij) in p.indexed_iter() {
        if i != j && pij > 0.0 {
            let ap = exaggeration * pij;
            total += ap * (ap / q.w[[i, j]]).ln();
        }
    }
    total
}

/// Gradient of the (exaggerated) t-SNE objective with respect to every row of
/// the embedding. Exaggeration multiplies `P` without renormalising it.
pub fn tsne_embedding_grad(
    p: ArrayView2<'_, f64>,
    q: &BatchQ,
    embedding: ArrayView2<'_, f64>,
    exaggeration: f64,
) -> Array2<f64> {
    let (n, s) = embedding.dim();
    let y = embedding.as_standard_layout();
    let y = y.as_slice().expect("standard layout");
    let mut grad = Array2::zeros((n, s));
    for (i, mut g) in grad.rows_mut().into_iter().enumerate() {
        let yi = &y[i * s..(i + 1) * s];
        let (p_row, q_row, w_row) = (p.row(i), q.q.row(i), q.w.row(i));
        for j in 0..n {
            if i == j {
                continue;
            }
            let m = 4.0 * (exaggeration * p_row[j] - q_row[j]) * w_row[j];
            let yj = &y[j * s..(j + 1) * s];
            for c in 0..s {
                g[c] += m * (yi[c] - yj[c]);
            }
        }
    }
    grad
}

/// Granularity of the embedding-gradient clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmbedClipMode {
    /// Each sample's gradient row is limited independently.
    #[default]
    PerRow,
    /// The whole batch gradient is rescaled by its Frobenius norm.
    WholeMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipStats {
    pub clipped: bool,
    /// Largest row norm before clipping (whole-matrix norm in that mode).
    pub preclip_max_norm: f64,
}

/// Rescales gradient rows whose norm exceeds `threshold` down to exactly
/// `threshold`, preserving direction. Non-finite input is an error: the clip
/// bounds large gradients, it does not repair NaN/Inf produced upstream.
pub fn clip_embedding_grad(grad: &mut Array2<f64>, threshold: f64, mode: EmbedClipMode) -> Result<ClipStats> {
    if let Some(pos) = grad.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient(format!(
            "embedding gradient entry {pos} is {}",
            grad.iter().nth(pos).copied().unwrap_or(f64::NAN)
        )));
    }
    match mode {
        EmbedClipMode::PerRow => {
            let mut stats = ClipStats {
                clipped: false,
                preclip_max_norm: 0.0,
            };
            for mut row in grad.rows_mut() {
                let norm = row.dot(&row).sqrt();
                stats.preclip_max_norm = stats.preclip_max_norm.max(norm);
                if norm > threshold {
                    row.mapv_inplace(|v| v * (threshold / norm));
                    stats.clipped = true;
                }
            }
            Ok(stats)
        }
        EmbedClipMode::WholeMatrix => {
            let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
            let clipped = norm > threshold;
            if clipped {
                grad.mapv_inplace(|v| v * (threshold / norm));
            }
            Ok(ClipStats {
                clipped,
                preclip_max_norm: norm,
            })
        }
    }
}

/// Loss value and clipped embedding gradient of one batch.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub loss_value: f64,
    pub grad_embedding: Array2<f64>,
    pub clipped: bool,
    pub preclip_max_norm: f64,
}

/// `lowdim_q -> tsne_loss -> tsne_embedding_grad -> clip_embedding_grad`.
/// The reported loss is the plain KL divergence (no exaggeration).
pub fn assemble_tsne_batch_grad(
    p: ArrayView2<'_, f64>,
    embedding: ArrayView2<'_, f64>,
    exaggeration: f64,
    threshold: f64,
    mode: EmbedClipMode,
) -> Result<LossReport> {
    if p.dim() != (embedding.nrows(), embedding.nrows()) {
        return Err(Error::ShapeMismatch(format!(
            "P is {:?} but the embedding has {} rows",
            p.dim(),
            embedding.nrows()
        )));
    }
    let q = lowdim_q(embedding);
    let loss_value = tsne_loss(p, &q);
    let mut grad = tsne_embedding_grad(p, &q, embedding, exaggeration);
    let stats = clip_embedding_grad(&mut grad, threshold, mode)?;
    Ok(LossReport {
        loss_value,
        grad_embedding: grad,
        clipped: stats.clipped,
        preclip_max_norm: stats.preclip_max_norm,
    })
}

// ---------------------------------------------------------------------------
// Edge objectives
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Positive,
    Negative,
}

fn sq_norm_diff(yi: &[f64], yj: &[f64]) -> f64 {
    yi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn force_pair(yi: &[f64], yj: &[f64], coeff: f64) -> (Vec<f64>, Vec<f64>) {
    let gi: Vec<f64> = yi.iter().zip(yj).map(|(a, b)| coeff * (a - b)).collect();
    let gj = gi.iter().map(|v| -v).collect();
    (gi, gj)
}

/// Scalar `c` with force `g_i = c (y_i - y_j)` for a LargeVis edge.
pub fn largevis_force_coeff(d2: f64, kind: EdgeKind, gamma: f64, eps: f64) -> f64 {
    match kind {
        EdgeKind::Positive => -2.0 / (1.0 + d2),
        EdgeKind::Negative => 2.0 * gamma / ((eps + d2) * (1.0 + d2)),
    }
}

/// Per-edge LargeVis loss, the antiderivative of the force:
/// positive `log(1 + d^2) = -log w_ij`; negative
/// `-gamma / (1 - eps) * log((eps + d^2) / (1 + d^2))`, which tends to
/// `-gamma log(1 - w_ij)` as `eps -> 0`.
pub fn largevis_edge_loss_d2(d2: f64, kind: EdgeKind, gamma: f64, eps: f64) -> f64 {
    match kind {
        EdgeKind::Positive => d2.ln_1p(),
        EdgeKind::Negative => -gamma / (1.0 - eps) * ((eps - 1.0) / (1.0 + d2)).ln_1p(),
    }
}

/// Forces `(g_i, g_j)` on both endpoints of a LargeVis edge; `g_j = -g_i`.
pub fn largevis_edge_grads(yi: &[f64], yj: &[f64], kind: EdgeKind, gamma: f64, eps: f64) -> (Vec<f64>, Vec<f64>) {
    force_pair(yi, yj, largevis_force_coeff(sq_norm_diff(yi, yj), kind, gamma, eps))
}

pub fn largevis_edge_loss(yi: &[f64], yj: &[f64], kind: EdgeKind, gamma: f64, eps: f64) -> f64 {
    largevis_edge_loss_d2(sq_norm_diff(yi, yj), kind, gamma, eps)
}

/// Scalar `c` with force `g_i = c (y_i - y_j)` for a UMAP edge. The power term
/// of the positive force uses `max(d^2, eps)` so it stays finite when `b < 1`.
pub fn umap_force_coeff(d2: f64, kind: EdgeKind, a: f64, b: f64, eps: f64) -> f64 {
    match kind {
        EdgeKind::Positive => -2.0 * a * b * d2.max(eps).powf(b - 1.0) / (1.0 + d2),
        EdgeKind::Negative => b / ((eps + d2) * (1.0 + d2)),
    }
}

/// Per-edge UMAP loss, the antiderivative of the force.
///
/// Positive: `a b e^(b-1) log(1 + u)` for `u = d^2 <= e`, continued by
/// `int_e^u a b s^(b-1) / (1 + s) ds` above the floor. That integral has no
/// elementary closed form for general `b`; it is evaluated as
/// `a u^b int_0^1 m v^(m-1) / (1 + u v^(m/b)) dv` by Gauss-Legendre quadrature.
///
/// Negative: `-b / (2 (1 - eps)) * log((eps + u) / (1 + u))`.
pub fn umap_edge_loss_d2(d2: f64, kind: EdgeKind, a: f64, b: f64, eps: f64) -> f64 {
    match kind {
        EdgeKind::Positive => {
            let below = a * b * eps.powf(b - 1.0);
            if d2 <= eps {
                below * d2.ln_1p()
            } else {
                below * eps.ln_1p() + umap_attraction_integral(d2, a, b)
                    - umap_attraction_integral(eps, a, b)
            }
        }
        EdgeKind::Negative => -b / (2.0 * (1.0 - eps)) * ((eps - 1.0) / (1.0 + d2)).ln_1p(),
    }
}

pub fn umap_edge_grads(yi: &[f64], yj: &[f64], kind: EdgeKind, a: f64, b: f64, eps: f64) -> (Vec<f64>, Vec<f64>) {
    force_pair(yi, yj, umap_force_coeff(sq_norm_diff(yi, yj), kind, a, b, eps))
}

pub fn umap_edge_loss(yi: &[f64], yj: &[f64], kind: EdgeKind, a: f64, b: f64, eps: f64) -> f64 {
    umap_edge_loss_d2(sq_norm_diff(yi, yj), kind, a, b, eps)
}

const GL_ORDER: usize = 16;
const GL_PANELS: usize = 16;
/// Power of the `t = v^m` substitution that smooths the endpoint behaviour.
const SMOOTHING_POWER: f64 = 8.0;

/// Gauss-Legendre nodes and weights on `[-1, 1]`, by Newton iteration on the
/// Legendre recurrence.
fn gauss_legendre() -> &'static [(f64, f64)] {
    static NODES: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    NODES.get_or_init(|| {
        let n = GL_ORDER;
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for l in 2..=n {
                    let p2 = ((2 * l - 1) as f64 * x * p1 - (l - 1) as f64 * p0) / l as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
        }
        out
    })
}

/// `int_0^u a b s^(b-1) / (1 + s) ds`.
pub(crate) fn umap_attraction_integral(u: f64, a: f64, b: f64) -> f64 {
    if u <= 0.0 {
        return 0.0;
    }
    let m = SMOOTHING_POWER;
    let p = m / b;
    let nodes = gauss_legendre();
    let width = 1.0 / GL_PANELS as f64;
    let mut acc = 0.0;
    for panel in 0..GL_PANELS {
        let mid = (panel as f64 + 0.5) * width;
        for &(x, w) in nodes {
            let v = mid + 0.5 * width * x;
            acc += 0.5 * width * w * m * v.powf(m - 1.0) / (1.0 + u * v.powf(p));
        }
    }
    a * u.powf(b) * acc
}

/// Which pairwise objective drives an edge-sampled batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EdgeObjective {
    LargeVis { gamma: f64, eps: f64 },
    Umap { a: f64, b: f64, eps: f64 },
}

impl EdgeObjective {
    pub fn force_coeff(&self, d2: f64, kind: EdgeKind) -> f64 {
        match *self {
            EdgeObjective::LargeVis { gamma, eps } => largevis_force_coeff(d2, kind, gamma, eps),
            EdgeObjective::Umap { a, b, eps } => umap_force_coeff(d2, kind, a, b, eps),
        }
    }

    pub fn edge_loss(&self, d2: f64, kind: EdgeKind) -> f64 {
        match *self {
            EdgeObjective::LargeVis { gamma, eps } => largevis_edge_loss_d2(d2, kind, gamma, eps),
            EdgeObjective::Umap { a, b, eps } => umap_edge_loss_d2(d2, kind, a, b, eps),
        }
    }
}

/// Sum of per-edge losses over a batch whose node indices refer to rows of
/// `embedding`, and the clipped gradient of that sum with respect to every row.
/// Both endpoints of each edge receive their share (`g_j = -g_i`).
pub fn assemble_edge_batch_grad(
    embedding: ArrayView2<'_, f64>,
    samples: &[EdgeSample],
    objective: EdgeObjective,
    threshold: f64,
    mode: EmbedClipMode,
) -> Result<LossReport> {
    let (n, s) = embedding.dim();
    let mut grad = Array2::<f64>::zeros((n, s));
    let mut loss = 0.0;
    let mut add_edge = |i: usize, j: usize, kind: EdgeKind, grad: &mut Array2<f64>| -> Result<()> {
        if i >= n || j >= n {
            return Err(Error::ShapeMismatch(format!(
                "edge ({i}, {j}) outside an embedding of {n} rows"
            )));
        }
        let yi = embedding.row(i);
        let yj = embedding.row(j);
        let d2: f64 = yi.iter().zip(yj.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        loss += objective.edge_loss(d2, kind);
        // gradient of the loss = -force
        let c = -objective.force_coeff(d2, kind);
        for k in 0..s {
            let g = c * (yi[k] - yj[k]);
            grad[[i, k]] += g;
            grad[[j, k]] -= g;
        }
        Ok(())
    };
    for sample in samples {
        let (i, j) = sample.positive;
        add_edge(i, j, EdgeKind::Positive, &mut grad)?;
        for &neg in &sample.negatives {
            add_edge(i, neg, EdgeKind::Negative, &mut grad)?;
        }
    }
    let stats = clip_embedding_grad(&mut grad, threshold, mode)?;
    Ok(LossReport {
        loss_value: loss,
        grad_embedding: grad,
        clipped: stats.clipped,
        preclip_max_norm: stats.preclip_max_norm,
    })
}
