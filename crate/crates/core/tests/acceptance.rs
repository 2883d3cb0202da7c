//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Datasets are read from `$NNDR_DATA_DIR` (default `<workspace>/data`):
//! `mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte` and `coil-20/obj*__*.png`.
//! Set `NNDR_ACCEPTANCE=1,2,6` to run a subset; unselected criteria print SKIP.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nndr::affinity::{batch_joint_p, effective_perplexity, membership_sum, umap_memberships, EdgeSample};
use nndr::dataio::{load_idx_pair, load_image_dir, Dataset};
use nndr::eval::{knn_accuracy, knn_accuracy_self, trustworthiness};
use nndr::network::EncoderNet;
use nndr::objective::{
    assemble_edge_batch_grad, lowdim_q, tsne_embedding_grad, tsne_exaggerated_objective, EdgeObjective,
    EmbedClipMode,
};
use nndr::persist::encode_model;
use nndr::trainer::{fit_with, EmbeddingModel, LossKind, TrainConfig};

const FD_STEP: f64 = 1e-6;
const FD_INSTANCES: usize = 50;
const EMBED_GRAD_TOL: f64 = 1e-6;
const CHAIN_GRAD_TOL: f64 = 1e-5;
const CHAIN_INSTANCES: usize = 8;
const SUITE_BUDGET: Duration = Duration::from_secs(60);

const PERPLEXITY_TOL: f64 = 1e-4;
const UMAP_SUM_TOL: f64 = 1e-5;
const MASS_TOL: f64 = 1e-9;
const MASS_BATCHES: usize = 1000;

const SEEDS: [u64; 3] = [0, 1, 2];
const K: usize = 5;
const MNIST_SUBSET: usize = 10_000;
const MNIST_ITERS: usize = 4000;
const SMALL_BATCH: usize = 64;
const GENERALIZATION_TRAIN: usize = 2000;
const GENERALIZATION_ITERS: usize = 2000;
const COIL_ITERS: usize = 3000;

const CLIP_MARGIN: f64 = 0.20;
const CLIP_BUDGET: Duration = Duration::from_secs(30 * 60);
const COIL_TSNE_MIN: f64 = 0.92;
const MNIST_TSNE_MIN: f64 = 0.88;
const FIT_BUDGET: Duration = Duration::from_secs(45 * 60);
const COIL_TRUST_MIN: f64 = 0.97;
const MNIST_TRUST_MIN: f64 = 0.93;
const GENERALIZATION_MIN: f64 = 0.85;
const GENERALIZATION_BUDGET: Duration = Duration::from_secs(15 * 60);
const EDGE_METHOD_MIN: f64 = 0.85;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

type Check = Result<Outcome, String>;

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len().is_multiple_of(2) {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn fmt_all(xs: &[f64]) -> String {
    xs.iter().map(|&x| pct(x)).collect::<Vec<_>>().join("/")
}

fn mins(d: Duration) -> String {
    format!("{:.1} min", d.as_secs_f64() / 60.0)
}

// ---------------------------------------------------------------------------
// Data and shared training runs
// ---------------------------------------------------------------------------

fn data_dir() -> PathBuf {
    std::env::var_os("NNDR_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

fn mnist(split: &str) -> Result<Dataset, String> {
    let dir = data_dir().join("mnist");
    let images = dir.join(format!("{split}-images-idx3-ubyte"));
    let labels = dir.join(format!("{split}-labels-idx1-ubyte"));
    load_idx_pair(&images, &labels).map_err(|e| format!("MNIST {split} set unavailable ({e})"))
}

fn coil() -> Result<Dataset, String> {
    let dir = data_dir().join("coil-20");
    load_image_dir(&dir).map_err(|e| format!("Coil-20 unavailable at {} ({e})", dir.display()))
}

struct Run {
    model: EmbeddingModel,
    embedding: Array2<f64>,
    elapsed: Duration,
}

fn train(label: &str, data: &Dataset, cfg: &TrainConfig) -> Result<Run, String> {
    let start = Instant::now();
    let total = cfg.iterations;
    let (model, _) = fit_with(data, cfg, |rec, _| {
        if (rec.iter + 1) % 500 == 0 {
            eprintln!("  [{label}] iter {}/{total} loss {:.4}", rec.iter + 1, rec.loss);
        }
    })
    .map_err(|e| format!("{label}: {e}"))?;
    let elapsed = start.elapsed();
    let embedding = model.transform(data.points()).map_err(|e| format!("{label}: {e}"))?;
    eprintln!("  [{label}] done in {}", mins(elapsed));
    Ok(Run {
        model,
        embedding,
        elapsed,
    })
}

fn self_accuracy(run: &Run, data: &Dataset) -> Result<f64, String> {
    knn_accuracy_self(run.embedding.view(), data.labels().unwrap_or_default(), K).map_err(|e| e.to_string())
}

fn mnist_config(seed: u64) -> TrainConfig {
    TrainConfig {
        iterations: MNIST_ITERS,
        seed,
        ..TrainConfig::default()
    }
}

fn coil_config(kind: LossKind) -> TrainConfig {
    TrainConfig {
        loss_kind: kind,
        iterations: COIL_ITERS,
        ..TrainConfig::default()
    }
}

/// Training runs shared between criteria, computed on first use.
#[derive(Default)]
struct Shared {
    mnist_subset: Option<Result<Dataset, String>>,
    clipped: Option<Result<Vec<Run>, String>>,
    coil_data: Option<Result<Dataset, String>>,
    coil_tsne: Option<Result<Run, String>>,
}

impl Shared {
    fn mnist_subset(&mut self) -> Result<&Dataset, String> {
        self.mnist_subset
            .get_or_insert_with(|| mnist("train")?.head(MNIST_SUBSET).map_err(|e| e.to_string()))
            .as_ref()
            .map_err(Clone::clone)
    }

    fn clipped_runs(&mut self) -> Result<&[Run], String> {
        if self.clipped.is_none() {
            let runs = self.mnist_subset().cloned().and_then(|data| {
                SEEDS
                    .iter()
                    .map(|&s| train(&format!("mnist clipped seed {s}"), &data, &mnist_config(s)))
                    .collect()
            });
            self.clipped = Some(runs);
        }
        self.clipped.as_ref().unwrap().as_deref().map_err(Clone::clone)
    }

    fn coil_data(&mut self) -> Result<&Dataset, String> {
        self.coil_data.get_or_insert_with(coil).as_ref().map_err(Clone::clone)
    }

    fn coil_tsne(&mut self) -> Result<&Run, String> {
        if self.coil_tsne.is_none() {
            let run = self
                .coil_data()
                .cloned()
                .and_then(|data| train("coil tsne", &data, &coil_config(LossKind::Tsne)));
            self.coil_tsne = Some(run);
        }
        self.coil_tsne.as_ref().unwrap().as_ref().map_err(Clone::clone)
    }
}

// ---------------------------------------------------------------------------
// 1. Gradients
// ---------------------------------------------------------------------------

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-12)
}

fn central_differences(y: &Array2<f64>, f: impl Fn(ArrayView2<'_, f64>) -> f64) -> Vec<f64> {
    let mut y = y.clone();
    (0..y.len())
        .map(|idx| {
            let orig = y.as_slice().unwrap()[idx];
            y.as_slice_mut().unwrap()[idx] = orig + FD_STEP;
            let plus = f(y.view());
            y.as_slice_mut().unwrap()[idx] = orig - FD_STEP;
            let minus = f(y.view());
            y.as_slice_mut().unwrap()[idx] = orig;
            (plus - minus) / (2.0 * FD_STEP)
        })
        .collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || rng.random_range(-scale..scale))
}

fn random_edges(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<EdgeSample> {
    let other = |rng: &mut ChaCha8Rng, avoid: &[usize]| loop {
        let c = rng.random_range(0..n);
        if !avoid.contains(&c) {
            break c;
        }
    };
    (0..count)
        .map(|_| {
            let i = rng.random_range(0..n);
            let j = other(rng, &[i]);
            EdgeSample {
                positive: (i, j),
                negatives: std::array::from_fn(|_| other(rng, &[i, j])),
            }
        })
        .collect()
}

type LossFn<'a> = Box<dyn Fn(ArrayView2<'_, f64>) -> (f64, Array2<f64>) + 'a>;

/// Loss and embedding gradient for one random instance of the given kind.
fn instance_loss<'a>(kind: LossKind, x: &Array2<f64>, rng: &mut ChaCha8Rng) -> LossFn<'a> {
    let n = x.nrows();
    match kind {
        LossKind::Tsne => {
            let p = batch_joint_p(x.view(), 30.0).unwrap().p;
            let alpha = if rng.random_bool(0.5) { 12.0 } else { 1.0 };
            Box::new(move |y| {
                let q = lowdim_q(y);
                (tsne_exaggerated_objective(p.view(), &q, alpha), tsne_embedding_grad(p.view(), &q, y, alpha))
            })
        }
        LossKind::LargeVis | LossKind::Umap => {
            let obj = if kind == LossKind::LargeVis {
                EdgeObjective::LargeVis { gamma: 7.0, eps: 1e-3 }
            } else {
                EdgeObjective::Umap {
                    a: 1.577,
                    b: 0.8951,
                    eps: 1e-3,
                }
            };
            let count = rng.random_range(1..6);
            let samples = random_edges(rng, n, count);
            Box::new(move |y| {
                let r = assemble_edge_batch_grad(y, &samples, obj, f64::INFINITY, EmbedClipMode::PerRow).unwrap();
                (r.loss_value, r.grad_embedding)
            })
        }
    }
}

fn chain_error(net: &EncoderNet, x: &Array2<f64>, loss: &LossFn<'_>) -> f64 {
    let (y, cache) = net.forward(x.view()).unwrap();
    let grads = net.backward(&cache, loss(y.view()).1.view()).unwrap();
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.weights.iter().chain(g.bias.iter()).copied()).collect();
    let mut probe = net.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    for t in 0..net.layers().len() {
        let nw = net.layers()[t].weights.len();
        for k in 0..nw + net.layers()[t].bias.len() {
            let mut eval_at = |delta: f64| {
                let layer = &mut probe.layers_mut()[t];
                let slot = if k < nw {
                    &mut layer.weights.as_slice_mut().unwrap()[k]
                } else {
                    &mut layer.bias[k - nw]
                };
                let orig = *slot;
                *slot = orig + delta;
                let value = loss(probe.transform(x.view()).unwrap().view()).0;
                let layer = &mut probe.layers_mut()[t];
                if k < nw {
                    layer.weights.as_slice_mut().unwrap()[k] = orig;
                } else {
                    layer.bias[k - nw] = orig;
                }
                value
            };
            let plus = eval_at(FD_STEP);
            let minus = eval_at(-FD_STEP);
            numeric.push((plus - minus) / (2.0 * FD_STEP));
        }
    }
    rel_err(&analytic, &numeric)
}

fn criterion_gradients() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xfd);
    let mut worst_embed = 0.0f64;
    let mut worst_chain = 0.0f64;
    let kinds = [LossKind::Tsne, LossKind::LargeVis, LossKind::Umap];
    for kind in kinds {
        for _ in 0..FD_INSTANCES {
            let n = rng.random_range(7..=16);
            let x = random_matrix(&mut rng, n, 6, 1.0);
            let y = random_matrix(&mut rng, n, 2, 2.0);
            let loss = instance_loss(kind, &x, &mut rng);
            let analytic = loss(y.view()).1;
            let numeric = central_differences(&y, |y| loss(y).0);
            worst_embed = worst_embed.max(rel_err(analytic.as_slice().unwrap(), &numeric));
        }
        for _ in 0..CHAIN_INSTANCES {
            let n = rng.random_range(7..=16);
            let net = EncoderNet::xavier(&[8, 10, 10, 2], 0.01, rng.random()).unwrap();
            let x = random_matrix(&mut rng, n, 8, 1.0);
            let loss = instance_loss(kind, &x, &mut rng);
            worst_chain = worst_chain.max(chain_error(&net, &x, &loss));
        }
    }
    let elapsed = start.elapsed();
    Ok(Outcome::new(
        worst_embed < EMBED_GRAD_TOL && worst_chain < CHAIN_GRAD_TOL && elapsed < SUITE_BUDGET,
        format!(
            "{} instances per loss, worst embedding rel err {worst_embed:.2e} (< {EMBED_GRAD_TOL:e}), \
             worst [8,10,10,2] chain rel err {worst_chain:.2e} (< {CHAIN_GRAD_TOL:e}), {:.1} s",
            FD_INSTANCES,
            elapsed.as_secs_f64()
        ),
    ))
}

// ---------------------------------------------------------------------------
// 2. Calibration
// ---------------------------------------------------------------------------

fn sq_dist(x: ArrayView2<'_, f64>, i: usize, j: usize) -> f64 {
    x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b).powi(2)).sum()
}

fn perplexity_at_sigma(x: ArrayView2<'_, f64>, i: usize, sigma: f64) -> f64 {
    let d: Vec<f64> = (0..x.nrows()).filter(|&j| j != i).map(|j| sq_dist(x, i, j)).collect();
    let nearest = d.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = d.iter().map(|&dj| (-(dj - nearest) / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = w.iter().sum();
    let h: f64 = w.iter().map(|&v| v / z).filter(|&p| p > 0.0).map(|p| -p * p.log2()).sum();
    2f64.powf(h)
}

fn criterion_calibration() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xca1);
    let (mut worst_perp, mut worst_mass, mut rows) = (0.0f64, 0.0f64, 0usize);
    for _ in 0..MASS_BATCHES {
        let n = rng.random_range(4..64);
        let d = rng.random_range(1..10);
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        let x = random_matrix(&mut rng, n, d, scale);
        let jp = batch_joint_p(x.view(), 30.0).map_err(|e| e.to_string())?;
        worst_mass = worst_mass.max((jp.p.sum() - 1.0).abs());
        let target = effective_perplexity(30.0, n);
        for (i, row) in jp.rows.iter().enumerate() {
            worst_perp = worst_perp.max((perplexity_at_sigma(x.view(), i, row.sigma) - target).abs());
            rows += 1;
        }
    }

    let (mut worst_umap, mut fallbacks, mut nodes) = (0.0f64, 0usize, 0usize);
    for _ in 0..200 {
        let n = rng.random_range(6..80);
        let k = rng.random_range(2..n.min(20));
        let d = rng.random_range(2..10);
        let x = random_matrix(&mut rng, n, d, 1.0);
        let (_, cal) = umap_memberships(x.view(), k, 1.577, 0.8951).map_err(|e| e.to_string())?;
        fallbacks += cal.fallback.len();
        for i in 0..n {
            let mut r: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sq_dist(x.view(), i, j).sqrt()).collect();
            r.sort_by(f64::total_cmp);
            r.truncate(k);
            let err = (membership_sum(&r, cal.rho[i], cal.sigma[i]) - (k as f64).log2()).abs();
            worst_umap = worst_umap.max(err);
            nodes += 1;
        }
    }
    let elapsed = start.elapsed();
    Ok(Outcome::new(
        worst_perp <= PERPLEXITY_TOL
            && worst_umap <= UMAP_SUM_TOL
            && fallbacks == 0
            && worst_mass <= MASS_TOL
            && elapsed < SUITE_BUDGET,
        format!(
            "{rows} perplexity rows worst |2^H - target| {worst_perp:.2e} (<= {PERPLEXITY_TOL:e}), \
             {nodes} umap nodes worst sum err {worst_umap:.2e} (<= {UMAP_SUM_TOL:e}) with {fallbacks} fallbacks, \
             {MASS_BATCHES} batches worst |mass - 1| {worst_mass:.2e} (<= {MASS_TOL:e}), {:.1} s",
            elapsed.as_secs_f64()
        ),
    ))
}

// ---------------------------------------------------------------------------
// 3-9. Training runs
// ---------------------------------------------------------------------------

fn criterion_clipping(shared: &mut Shared) -> Check {
    let data = shared.mnist_subset()?.clone();
    let mut unclipped = Vec::new();
    let mut elapsed = Duration::ZERO;
    for &s in &SEEDS {
        let cfg = TrainConfig {
            embed_clip: f64::INFINITY,
            ..mnist_config(s)
        };
        let run = train(&format!("mnist unclipped seed {s}"), &data, &cfg)?;
        elapsed += run.elapsed;
        unclipped.push(self_accuracy(&run, &data)?);
    }
    let runs = shared.clipped_runs()?;
    elapsed += runs.iter().map(|r| r.elapsed).sum::<Duration>();
    let clipped: Vec<f64> = runs.iter().map(|r| self_accuracy(r, &data)).collect::<Result<_, _>>()?;
    let margin = median(&clipped) - median(&unclipped);
    Ok(Outcome::new(
        margin >= CLIP_MARGIN && elapsed <= CLIP_BUDGET,
        format!(
            "median 5-NN clipped {} vs unclipped {} ({} / {}), margin {:.2} points (>= {:.0}), {} total (<= {})",
            pct(median(&clipped)),
            pct(median(&unclipped)),
            fmt_all(&clipped),
            fmt_all(&unclipped),
            100.0 * margin,
            100.0 * CLIP_MARGIN,
            mins(elapsed),
            mins(CLIP_BUDGET)
        ),
    ))
}

fn criterion_table1(shared: &mut Shared) -> Check {
    let data = shared.mnist_subset()?.clone();
    let runs = shared.clipped_runs()?;
    let accs: Vec<f64> = runs.iter().map(|r| self_accuracy(r, &data)).collect::<Result<_, _>>()?;
    let slowest = runs.iter().map(|r| r.elapsed).max().unwrap_or_default();
    let mnist_ok = median(&accs) >= MNIST_TSNE_MIN && slowest <= FIT_BUDGET;
    let mnist = format!(
        "MNIST-10K median 5-NN {} ({}) (>= {}), slowest fit {}",
        pct(median(&accs)),
        fmt_all(&accs),
        pct(MNIST_TSNE_MIN),
        mins(slowest)
    );
    let (coil_ok, coil) = match shared.coil_data().cloned() {
        Err(e) => (false, e),
        Ok(coil_data) => {
            let run = shared.coil_tsne()?;
            let acc = self_accuracy(run, &coil_data)?;
            (
                acc >= COIL_TSNE_MIN && run.elapsed <= FIT_BUDGET,
                format!("Coil-20 5-NN {} (>= {}), fit {}", pct(acc), pct(COIL_TSNE_MIN), mins(run.elapsed)),
            )
        }
    };
    Ok(Outcome::new(mnist_ok && coil_ok, format!("{coil}; {mnist} (budget {})", mins(FIT_BUDGET))))
}

fn criterion_table2(shared: &mut Shared) -> Check {
    let data = shared.mnist_subset()?.clone();
    let runs = shared.clipped_runs()?;
    let trust: Vec<f64> = runs
        .iter()
        .map(|r| trustworthiness(data.points(), r.embedding.view(), K))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mnist_ok = median(&trust) >= MNIST_TRUST_MIN;
    let mnist = format!(
        "MNIST-10K median trustworthiness {:.4} ({}) (>= {MNIST_TRUST_MIN})",
        median(&trust),
        trust.iter().map(|t| format!("{t:.4}")).collect::<Vec<_>>().join("/")
    );
    let (coil_ok, coil) = match shared.coil_data().cloned() {
        Err(e) => (false, e),
        Ok(coil_data) => {
            let run = shared.coil_tsne()?;
            let t = trustworthiness(coil_data.points(), run.embedding.view(), K).map_err(|e| e.to_string())?;
            (t >= COIL_TRUST_MIN, format!("Coil-20 trustworthiness {t:.4} (>= {COIL_TRUST_MIN})"))
        }
    };
    Ok(Outcome::new(mnist_ok && coil_ok, format!("{coil}; {mnist}")))
}

fn criterion_generalization() -> Check {
    let train_data = mnist("train")?.head(GENERALIZATION_TRAIN).map_err(|e| e.to_string())?;
    let test_data = mnist("t10k")?;
    let cfg = TrainConfig {
        iterations: GENERALIZATION_ITERS,
        ..TrainConfig::default()
    };
    let run = train("mnist 2K generalization", &train_data, &cfg)?;
    let test_embedding = run.model.transform(test_data.points()).map_err(|e| e.to_string())?;
    let acc = knn_accuracy(
        run.embedding.view(),
        train_data.labels().unwrap_or_default(),
        test_embedding.view(),
        test_data.labels().unwrap_or_default(),
        K,
    )
    .map_err(|e| e.to_string())?;
    Ok(Outcome::new(
        acc >= GENERALIZATION_MIN && run.elapsed <= GENERALIZATION_BUDGET,
        format!(
            "test 5-NN against the training embedding {} on {} points (>= {}), fit {} (<= {})",
            pct(acc),
            test_data.count(),
            pct(GENERALIZATION_MIN),
            mins(run.elapsed),
            mins(GENERALIZATION_BUDGET)
        ),
    ))
}

fn criterion_batch_size(shared: &mut Shared) -> Check {
    let data = shared.mnist_subset()?.clone();
    let mut small = Vec::new();
    for &s in &SEEDS {
        let cfg = TrainConfig {
            batch_size: SMALL_BATCH,
            ..mnist_config(s)
        };
        let run = train(&format!("mnist batch {SMALL_BATCH} seed {s}"), &data, &cfg)?;
        small.push(self_accuracy(&run, &data)?);
    }
    let runs = shared.clipped_runs()?;
    let large: Vec<f64> = runs.iter().map(|r| self_accuracy(r, &data)).collect::<Result<_, _>>()?;
    Ok(Outcome::new(
        median(&large) >= median(&small),
        format!(
            "median 5-NN batch 1024 {} ({}) vs batch {SMALL_BATCH} {} ({})",
            pct(median(&large)),
            fmt_all(&large),
            pct(median(&small)),
            fmt_all(&small)
        ),
    ))
}

fn criterion_edge_methods(shared: &mut Shared) -> Check {
    let data = shared.coil_data()?.clone();
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in [LossKind::LargeVis, LossKind::Umap] {
        let run = train(&format!("coil {kind}"), &data, &coil_config(kind))?;
        let acc = self_accuracy(&run, &data)?;
        pass &= acc >= EDGE_METHOD_MIN;
        parts.push(format!("{kind} 5-NN {}", pct(acc)));
    }
    Ok(Outcome::new(pass, format!("Coil-20 {} (>= {})", parts.join(", "), pct(EDGE_METHOD_MIN))))
}

fn criterion_determinism(shared: &mut Shared) -> Check {
    let data = shared.coil_data()?.clone();
    let first = encode_model(&shared.coil_tsne()?.model, 0);
    let second = encode_model(&train("coil tsne rerun", &data, &coil_config(LossKind::Tsne))?.model, 0);
    Ok(Outcome::new(
        first == second,
        format!("two Coil-20 fits, model files of {} and {} bytes, identical: {}", first.len(), second.len(), first == second),
    ))
}

fn selected() -> BTreeSet<usize> {
    match std::env::var("NNDR_ACCEPTANCE") {
        Ok(list) if !list.trim().is_empty() => list.split(',').filter_map(|s| s.trim().parse().ok()).collect(),
        _ => (1..=9).collect(),
    }
}

fn main() {
    let chosen = selected();
    let mut shared = Shared::default();
    let names = [
        "gradient correctness",
        "calibration",
        "clipping efficacy",
        "5-NN accuracy",
        "trustworthiness",
        "generalization",
        "batch-size monotonicity",
        "edge-method parity",
        "determinism",
    ];
    let mut failures = 0;
    for (idx, name) in names.iter().enumerate() {
        let number = idx + 1;
        if !chosen.contains(&number) {
            println!("SKIP criterion {number} ({name}): not selected");
            continue;
        }
        eprintln!("criterion {number} ({name}) ...");
        let result = match number {
            1 => criterion_gradients(),
            2 => criterion_calibration(),
            3 => criterion_clipping(&mut shared),
            4 => criterion_table1(&mut shared),
            5 => criterion_table2(&mut shared),
            6 => criterion_generalization(),
            7 => criterion_batch_size(&mut shared),
            8 => criterion_edge_methods(&mut shared),
            _ => criterion_determinism(&mut shared),
        };
        let outcome = result.unwrap_or_else(|e| Outcome::new(false, e));
        if !outcome.pass {
            failures += 1;
        }
        println!(
            "{} criterion {number} ({name}): {}",
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.detail
        );
    }
    println!("{failures} of {} selected criteria failed", chosen.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
