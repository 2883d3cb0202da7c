//! Dataset loading, synthetic data generation and mini-batch iteration.
//!
//! Supported containers:
//!
//! * IDX (the MNIST container): big-endian, magic `0x00000803` for unsigned-byte
//!   image stacks and `0x00000801` for unsigned-byte label vectors. Pixels are
//!   scaled to `[0, 1]` by dividing by 255.
//! * CSV: comma separated, `.` decimal point, optional single header row which is
//!   detected by a non-numeric first row.
//! * A directory of grayscale PNG images named `obj<k>__<i>.png` (the processed
//!   Coil-20 layout); the object id becomes the label.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Row-major matrix of points with optional non-negative integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    points: Array2<f64>,
    labels: Option<Vec<u32>>,
}

impl Dataset {
    /// Builds a dataset, rejecting empty matrices, non-finite values and label
    /// vectors of the wrong length.
    pub fn new(points: Array2<f64>, labels: Option<Vec<u32>>) -> Result<Self> {
        let (n, d) = points.dim();
        if n == 0 || d == 0 {
            return Err(Error::InvalidDataset(format!(
                "need at least one point and one feature, got {n}x{d}"
            )));
        }
        if let Some((idx, _)) = points.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteInput {
                row: idx / d,
                col: idx % d,
            });
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "{} labels for {} points",
                    l.len(),
                    n
                )));
            }
        }
        Ok(Self { points, labels })
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn count(&self) -> usize {
        self.points.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn into_parts(self) -> (Array2<f64>, Option<Vec<u32>>) {
        (self.points, self.labels)
    }

    /// Attaches labels loaded separately (e.g. the companion IDX label file).
    pub fn with_labels(self, labels: Vec<u32>) -> Result<Self> {
        Self::new(self.points, Some(labels))
    }

    /// Copies the given rows (in order) into a new dataset.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.count()) {
            return Err(Error::InvalidDataset(format!(
                "row index {bad} out of range for {} points",
                self.count()
            )));
        }
        let points = self.points.select(Axis(0), indices);
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Self::new(points, labels)
    }

    /// First `n` rows (or all of them when `n` exceeds the count).
    pub fn head(&self, n: usize) -> Result<Self> {
        let n = n.min(self.count());
        self.select(&(0..n).collect::<Vec<_>>())
    }
}

/// Per-feature min-max scaling parameters. Off by default in training.
#[derive(Debug, Clone, PartialEq)]
pub struct MinMaxScaler {
    pub mins: Vec<f64>,
    pub ranges: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(points: ArrayView2<'_, f64>) -> Self {
        let d = points.ncols();
        let mut mins = vec![f64::INFINITY; d];
        let mut maxs = vec![f64::NEG_INFINITY; d];
        for row in points.rows() {
            for (c, &v) in row.iter().enumerate() {
                mins[c] = mins[c].min(v);
                maxs[c] = maxs[c].max(v);
            }
        }
        // constant columns map to 0
        let ranges = mins
            .iter()
            .zip(&maxs)
            .map(|(lo, hi)| if hi > lo { hi - lo } else { 1.0 })
            .collect();
        Self { mins, ranges }
    }

    pub fn apply(&self, points: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if points.ncols() != self.mins.len() {
            return Err(Error::ShapeMismatch(format!(
                "scaler fitted on {} features, input has {}",
                self.mins.len(),
                points.ncols()
            )));
        }
        let mut out = points.to_owned();
        for mut row in out.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mins[c]) / self.ranges[c];
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

/// Decoded content of one IDX file.
#[derive(Debug, Clone, PartialEq)]
pub enum IdxContent {
    Images(Array2<f64>),
    Labels(Vec<u32>),
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            Error::Truncated(format!(
                "header needs {} bytes, file has {}",
                at + 4,
                bytes.len()
            ))
        })
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxContent> {
    let magic = be_u32(bytes, 0)?;
    match magic {
        IDX_IMAGES_MAGIC => {
            let count = be_u32(bytes, 4)? as usize;
            let rows = be_u32(bytes, 8)? as usize;
            let cols = be_u32(bytes, 12)? as usize;
            let dim = rows * cols;
            let payload = &bytes[16..];
            if payload.len() != count * dim {
                return Err(Error::Truncated(format!(
                    "expected {count}x{rows}x{cols} = {} payload bytes, found {}",
                    count * dim,
                    payload.len()
                )));
            }
            let values = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
            let points = Array2::from_shape_vec((count, dim), values)
                .expect("payload length checked against header");
            Ok(IdxContent::Images(points))
        }
        IDX_LABELS_MAGIC => {
            let count = be_u32(bytes, 4)? as usize;
            let payload = &bytes[8..];
            if payload.len() != count {
                return Err(Error::Truncated(format!(
                    "expected {count} label bytes, found {}",
                    payload.len()
                )));
            }
            Ok(IdxContent::Labels(payload.iter().map(|&b| u32::from(b)).collect()))
        }
        other => Err(Error::BadMagic(format!(
            "IDX magic 0x{other:08x} is neither 0x{IDX_IMAGES_MAGIC:08x} nor 0x{IDX_LABELS_MAGIC:08x}"
        ))),
    }
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxContent> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes)
}

/// Loads an IDX image file as an unlabeled dataset.
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Dataset> {
    match load_idx(path)? {
        IdxContent::Images(points) => Dataset::new(points, None),
        IdxContent::Labels(_) => Err(Error::BadMagic(
            "expected an image file (0x00000803), found a label file".into(),
        )),
    }
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    match load_idx(path)? {
        IdxContent::Labels(labels) => Ok(labels),
        IdxContent::Images(_) => Err(Error::BadMagic(
            "expected a label file (0x00000801), found an image file".into(),
        )),
    }
}

/// Image file plus its companion label file.
pub fn load_idx_pair(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    load_idx_images(images)?.with_labels(load_idx_labels(labels)?)
}

/// Returns true when the bytes start like an IDX unsigned-byte file.
pub fn looks_like_idx(bytes: &[u8]) -> bool {
    bytes.len() >= 4 && bytes[0] == 0 && bytes[1] == 0 && bytes[2] == 0x08
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

pub fn parse_csv(text: &str, label_column: Option<usize>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let mut records = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::InvalidDataset(e.to_string()))?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::EmptyFile);
    }

    let is_numeric = |s: &str| s.parse::<f64>().is_ok();
    let skip = usize::from(!records[0].iter().all(is_numeric));
    let body = &records[skip..];
    if body.is_empty() {
        return Err(Error::EmptyFile);
    }

    let width = body[0].len();
    if let Some(lc) = label_column {
        if lc >= width {
            return Err(Error::InvalidDataset(format!(
                "label column {lc} out of range for {width} columns"
            )));
        }
    }
    let dim = width - usize::from(label_column.is_some());
    let mut values = Vec::with_capacity(body.len() * dim);
    let mut labels = label_column.map(|_| Vec::with_capacity(body.len()));

    for (r, rec) in body.iter().enumerate() {
        let row = r + skip;
        if rec.len() != width {
            return Err(Error::Ragged {
                row,
                expected: width,
                found: rec.len(),
            });
        }
        for (c, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::NonNumeric {
                row,
                col: c,
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFiniteInput { row, col: c });
            }
            if Some(c) == label_column {
                if v < 0.0 || v.fract() != 0.0 || v > f64::from(u32::MAX) {
                    return Err(Error::NonNumeric {
                        row,
                        col: c,
                        value: cell.to_string(),
                    });
                }
                labels.as_mut().expect("label column set").push(v as u32);
            } else {
                values.push(v);
            }
        }
    }

    if dim == 0 {
        return Err(Error::InvalidDataset("no feature columns".into()));
    }
    let points = Array2::from_shape_vec((body.len(), dim), values)
        .expect("row widths checked");
    Dataset::new(points, labels)
}

pub fn load_csv(path: impl AsRef<Path>, label_column: Option<usize>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, label_column)
}

/// Reads a CSV whose header row, if any, may name a `label` column; that
/// column becomes the labels.
pub fn load_csv_labeled_by_header(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let label_column = header
        .split(',')
        .position(|c| c.trim().eq_ignore_ascii_case("label"));
    parse_csv(&text, label_column)
}

/// Writes an embedding with header `x,y[,label]` (or `x0,x1,...` when it is
/// not two-dimensional).
pub fn write_embedding_csv(
    embedding: ArrayView2<'_, f64>,
    labels: Option<&[u32]>,
    path: impl AsRef<Path>,
) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != embedding.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} points",
                l.len(),
                embedding.nrows()
            )));
        }
    }
    let names: Vec<String> = if embedding.ncols() == 2 {
        vec!["x".into(), "y".into()]
    } else {
        (0..embedding.ncols()).map(|c| format!("x{c}")).collect()
    };
    write_matrix_csv(embedding, labels, &names, path)
}

/// Writes points (and labels as a trailing `label` column) with a header row.
/// Values use the shortest representation that parses back to the same `f64`.
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let names: Vec<String> = (0..dataset.feature_dim()).map(|c| format!("x{c}")).collect();
    write_matrix_csv(dataset.points(), dataset.labels(), &names, path)
}

pub(crate) fn write_matrix_csv(
    points: ArrayView2<'_, f64>,
    labels: Option<&[u32]>,
    names: &[String],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    out.push_str(&names.join(","));
    if labels.is_some() {
        out.push_str(",label");
    }
    out.push('\n');
    for (i, row) in points.rows().into_iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        if let Some(l) = labels {
            out.push_str(&format!(",{}", l[i]));
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// PNG directory (Coil-20 layout)
// ---------------------------------------------------------------------------

/// Loads every `obj<k>__<i>.png` under `dir` as a grayscale row scaled to
/// `[0, 1]`; label = `k - 1`. Files are ordered by (object, index).
pub fn load_image_dir(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut entries = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(stem) = name.strip_suffix(".png") else {
            continue;
        };
        let Some((obj, idx)) = stem.strip_prefix("obj").and_then(|s| s.split_once("__")) else {
            continue;
        };
        let (Ok(obj), Ok(idx)) = (obj.parse::<u32>(), idx.parse::<u32>()) else {
            continue;
        };
        entries.push((obj, idx, path));
    }
    if entries.is_empty() {
        return Err(Error::EmptyFile);
    }
    entries.sort();

    let mut dim = None;
    let mut values = Vec::new();
    let mut labels = Vec::with_capacity(entries.len());
    for (obj, _, path) in &entries {
        let img = image::open(path)
            .map_err(|e| Error::InvalidDataset(format!("{}: {e}", path.display())))?
            .into_luma8();
        let pixels = img.as_raw();
        match dim {
            None => dim = Some(pixels.len()),
            Some(d) if d != pixels.len() => {
                return Err(Error::DimensionMismatch(format!(
                    "{} has {} pixels, expected {d}",
                    path.display(),
                    pixels.len()
                )))
            }
            _ => {}
        }
        values.extend(pixels.iter().map(|&p| f64::from(p) / 255.0));
        labels.push(obj.saturating_sub(1));
    }
    let points = Array2::from_shape_vec((entries.len(), dim.unwrap_or(0)), values)
        .expect("pixel counts checked");
    Dataset::new(points, Some(labels))
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// `k_clusters` isotropic Gaussian clusters with standard deviation `spread`,
/// centers at pairwise distance at least `10 * spread`. Labels are cluster ids.
pub fn make_blobs(
    k_clusters: usize,
    per_cluster: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if k_clusters == 0 || per_cluster == 0 || dim == 0 || !(spread > 0.0) {
        return Err(Error::InvalidDataset(format!(
            "make_blobs needs positive sizes and spread, got k={k_clusters} per={per_cluster} dim={dim} spread={spread}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_sep = 12.0 * spread;
    let half_box = 10.0 * spread * k_clusters as f64;

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k_clusters);
    let mut attempts = 0usize;
    while centers.len() < k_clusters && attempts < 10_000 * k_clusters {
        attempts += 1;
        let c: Vec<f64> = (0..dim)
            .map(|_| rng.random_range(-half_box..half_box))
            .collect();
        let far = centers.iter().all(|o| sq_dist(o, &c).sqrt() >= min_sep);
        if far {
            centers.push(c);
        }
    }
    if centers.len() < k_clusters {
        // fall back to a lattice along the first axis
        centers = (0..k_clusters)
            .map(|c| {
                let mut v = vec![0.0; dim];
                v[0] = c as f64 * min_sep;
                v
            })
            .collect();
    }

    let normal = Normal::new(0.0, spread).expect("spread is positive");
    let n = k_clusters * per_cluster;
    let mut values = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..per_cluster {
            values.extend(center.iter().map(|&m| m + normal.sample(&mut rng)));
            labels.push(label as u32);
        }
    }
    let points = Array2::from_shape_vec((n, dim), values).expect("sizes match");
    Dataset::new(points, Some(labels))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
}

/// Endless sequence of index batches: each epoch is a fresh seeded permutation
/// of `0..count` cut into `ceil(count / batch_size)` slices, the last possibly
/// short.
#[derive(Debug, Clone)]
pub struct BatchIter {
    plan: BatchPlan,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
}

pub fn iterate_batches(count: usize, plan: BatchPlan) -> Result<BatchIter> {
    if plan.batch_size == 0 || plan.batch_size > count {
        return Err(Error::BatchTooLarge {
            batch_size: plan.batch_size,
            count,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng);
    Ok(BatchIter {
        plan,
        rng,
        order,
        cursor: 0,
        epoch: 0,
    })
}

impl BatchIter {
    /// Zero-based epoch of the next batch.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.plan.batch_size)
    }

    /// Remaining batches of the current epoch.
    pub fn rest_of_epoch(&mut self) -> Vec<Vec<usize>> {
        let epoch = self.epoch;
        let mut out = Vec::new();
        while self.epoch == epoch {
            out.push(self.next().expect("endless iterator"));
        }
        out
    }
}

impl Iterator for BatchIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let end = (self.cursor + self.plan.batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        Some(batch)
    }
}
