//! Optimisation of the encoder: configuration, optimizers, the mini-batch
//! (t-SNE) and edge-sampling (LargeVis, UMAP) training loops, and
//! out-of-sample transform.

use std::borrow::Cow;
use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis, Zip};

use crate::affinity::{self, EdgeSample};
use crate::dataio::{iterate_batches, BatchPlan, Dataset, MinMaxScaler};
use crate::error::{Error, Result};
use crate::network::{clip_layer_grads, EncoderNet, ForwardCache, LayerClipMode, LayerGrad};
use crate::objective::{
    assemble_edge_batch_grad, assemble_tsne_batch_grad, EdgeObjective, EmbedClipMode, LossReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Tsne,
    LargeVis,
    Umap,
}

impl LossKind {
    pub fn tag(self) -> u8 {
        match self {
            LossKind::Tsne => 0,
            LossKind::LargeVis => 1,
            LossKind::Umap => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(LossKind::Tsne),
            1 => Some(LossKind::LargeVis),
            2 => Some(LossKind::Umap),
            _ => None,
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Tsne => "tsne",
            LossKind::LargeVis => "largevis",
            LossKind::Umap => "umap",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().trim_start_matches("nn-") {
            "tsne" | "t-sne" => Ok(LossKind::Tsne),
            "largevis" => Ok(LossKind::LargeVis),
            "umap" => Ok(LossKind::Umap),
            other => Err(Error::InvalidConfig(format!(
                "unknown loss kind {other:?} (expected tsne, largevis or umap)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    RmsProp,
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::RmsProp => "rmsprop",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Err(Error::InvalidConfig(
                "adam is not supported: its momentum lets the large gradients of consecutive \
                 steps disturb each other and destabilises training; use rmsprop or sgd"
                    .into(),
            )),
            other => Err(Error::InvalidConfig(format!(
                "unknown optimizer {other:?} (expected rmsprop or sgd)"
            ))),
        }
    }
}

/// Every hyperparameter of a training run. Serialised as flat `key = value`
/// lines (see [`TrainConfig::to_kv_string`]).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub perplexity: f64,
    pub k_neighbors: usize,
    pub batch_size: usize,
    /// Positive edges per iteration on the LargeVis/UMAP paths.
    pub edge_batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub rmsprop_decay: f64,
    pub rmsprop_eps: f64,
    pub iterations: usize,
    pub exaggeration_factor: f64,
    pub exaggeration_iters: usize,
    pub embed_clip: f64,
    pub embed_clip_mode: EmbedClipMode,
    pub layer_clip: f64,
    pub layer_clip_mode: LayerClipMode,
    pub gamma: f64,
    pub umap_a: f64,
    pub umap_b: f64,
    pub edge_eps: f64,
    pub seed: u64,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub leaky_slope: f64,
    pub normalize: bool,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_kind: LossKind::Tsne,
            perplexity: 30.0,
            k_neighbors: 15,
            batch_size: 1024,
            edge_batch_size: 256,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::RmsProp,
            rmsprop_decay: 0.9,
            rmsprop_eps: 1e-8,
            iterations: 3000,
            exaggeration_factor: 12.0,
            exaggeration_iters: 250,
            embed_clip: 1e14,
            embed_clip_mode: EmbedClipMode::PerRow,
            layer_clip: 1e4,
            layer_clip_mode: LayerClipMode::Norm,
            gamma: 7.0,
            umap_a: 1.577,
            umap_b: 0.8951,
            edge_eps: 1e-3,
            seed: 0,
            hidden_dims: vec![256, 256, 256],
            output_dim: 2,
            leaky_slope: 0.01,
            normalize: false,
            deterministic: true,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("cannot parse {key} = {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("cannot parse {key} = {value:?} as a boolean"))),
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 26] = [
        "loss_kind",
        "perplexity",
        "k_neighbors",
        "batch_size",
        "edge_batch_size",
        "learning_rate",
        "optimizer",
        "rmsprop_decay",
        "rmsprop_eps",
        "iterations",
        "exaggeration_factor",
        "exaggeration_iters",
        "embed_clip",
        "embed_clip_mode",
        "layer_clip",
        "layer_clip_mode",
        "gamma",
        "umap_a",
        "umap_b",
        "edge_eps",
        "seed",
        "hidden_dims",
        "output_dim",
        "leaky_slope",
        "normalize",
        "deterministic",
    ];

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "loss_kind" | "loss" => self.loss_kind = value.parse()?,
            "perplexity" => self.perplexity = parse_value(key, value)?,
            "k_neighbors" => self.k_neighbors = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "edge_batch_size" => self.edge_batch_size = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "rmsprop_decay" => self.rmsprop_decay = parse_value(key, value)?,
            "rmsprop_eps" => self.rmsprop_eps = parse_value(key, value)?,
            "iterations" => self.iterations = parse_value(key, value)?,
            "exaggeration_factor" => self.exaggeration_factor = parse_value(key, value)?,
            "exaggeration_iters" => self.exaggeration_iters = parse_value(key, value)?,
            "embed_clip" => self.embed_clip = parse_value(key, value)?,
            "embed_clip_mode" => {
                self.embed_clip_mode = match value {
                    "row" => EmbedClipMode::PerRow,
                    "matrix" => EmbedClipMode::WholeMatrix,
                    _ => return Err(Error::InvalidConfig(format!("embed_clip_mode {value:?} (row|matrix)"))),
                }
            }
            "layer_clip" => self.layer_clip = parse_value(key, value)?,
            "layer_clip_mode" => {
                self.layer_clip_mode = match value {
                    "norm" => LayerClipMode::Norm,
                    "elementwise" => LayerClipMode::Elementwise,
                    _ => {
                        return Err(Error::InvalidConfig(format!(
                            "layer_clip_mode {value:?} (norm|elementwise)"
                        )))
                    }
                }
            }
            "gamma" => self.gamma = parse_value(key, value)?,
            "umap_a" => self.umap_a = parse_value(key, value)?,
            "umap_b" => self.umap_b = parse_value(key, value)?,
            "edge_eps" => self.edge_eps = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "hidden_dims" => {
                self.hidden_dims = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|v| parse_value(key, v.trim()))
                        .collect::<Result<_>>()?
                }
            }
            "output_dim" => self.output_dim = parse_value(key, value)?,
            "leaky_slope" => self.leaky_slope = parse_value(key, value)?,
            "normalize" => self.normalize = parse_bool(key, value)?,
            "deterministic" => self.deterministic = parse_bool(key, value)?,
            other => return Err(Error::InvalidConfig(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv_str(text)?;
        Ok(cfg)
    }

    pub fn apply_kv_str(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected key = value, got {line:?}", n + 1))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv_str(&text)
    }

    pub fn to_kv_string(&self) -> String {
        let hidden: Vec<String> = self.hidden_dims.iter().map(usize::to_string).collect();
        let lines = [
            ("loss_kind", self.loss_kind.to_string()),
            ("perplexity", format!("{:?}", self.perplexity)),
            ("k_neighbors", self.k_neighbors.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("edge_batch_size", self.edge_batch_size.to_string()),
            ("learning_rate", format!("{:?}", self.learning_rate)),
            ("optimizer", self.optimizer.to_string()),
            ("rmsprop_decay", format!("{:?}", self.rmsprop_decay)),
            ("rmsprop_eps", format!("{:?}", self.rmsprop_eps)),
            ("iterations", self.iterations.to_string()),
            ("exaggeration_factor", format!("{:?}", self.exaggeration_factor)),
            ("exaggeration_iters", self.exaggeration_iters.to_string()),
            ("embed_clip", format!("{:?}", self.embed_clip)),
            (
                "embed_clip_mode",
                match self.embed_clip_mode {
                    EmbedClipMode::PerRow => "row",
                    EmbedClipMode::WholeMatrix => "matrix",
                }
                .into(),
            ),
            ("layer_clip", format!("{:?}", self.layer_clip)),
            (
                "layer_clip_mode",
                match self.layer_clip_mode {
                    LayerClipMode::Norm => "norm",
                    LayerClipMode::Elementwise => "elementwise",
                }
                .into(),
            ),
            ("gamma", format!("{:?}", self.gamma)),
            ("umap_a", format!("{:?}", self.umap_a)),
            ("umap_b", format!("{:?}", self.umap_b)),
            ("edge_eps", format!("{:?}", self.edge_eps)),
            ("seed", self.seed.to_string()),
            ("hidden_dims", hidden.join(",")),
            ("output_dim", self.output_dim.to_string()),
            ("leaky_slope", format!("{:?}", self.leaky_slope)),
            ("normalize", self.normalize.to_string()),
            ("deterministic", self.deterministic.to_string()),
        ];
        lines
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("perplexity", self.perplexity),
            ("learning_rate", self.learning_rate),
            ("rmsprop_eps", self.rmsprop_eps),
            ("exaggeration_factor", self.exaggeration_factor),
            ("embed_clip", self.embed_clip),
            ("layer_clip", self.layer_clip),
            ("gamma", self.gamma),
            ("umap_a", self.umap_a),
            ("umap_b", self.umap_b),
            ("edge_eps", self.edge_eps),
            ("leaky_slope", self.leaky_slope),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.exaggeration_factor < 1.0 {
            return Err(Error::InvalidConfig("exaggeration_factor must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.rmsprop_decay) {
            return Err(Error::InvalidConfig("rmsprop_decay must lie in [0, 1)".into()));
        }
        if self.edge_eps >= 1.0 {
            return Err(Error::InvalidConfig("edge_eps must be below 1".into()));
        }
        for (name, v) in [
            ("k_neighbors", self.k_neighbors),
            ("batch_size", self.batch_size),
            ("edge_batch_size", self.edge_batch_size),
            ("iterations", self.iterations),
            ("output_dim", self.output_dim),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::InvalidConfig("hidden layer sizes must be positive".into()));
        }
        if self.exaggeration_iters > self.iterations {
            return Err(Error::InvalidConfig(format!(
                "exaggeration_iters ({}) exceeds iterations ({})",
                self.exaggeration_iters, self.iterations
            )));
        }
        Ok(())
    }

    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        std::iter::once(input_dim)
            .chain(self.hidden_dims.iter().copied())
            .chain(std::iter::once(self.output_dim))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteUpdate(format!("{what}[{i}] = {}", values[i])));
    }
    Ok(())
}

/// Elementwise RMSProp on flat slices:
/// `v <- decay v + (1 - decay) g^2`, `p <- p - lr g / (sqrt(v) + eps)`.
pub fn rmsprop_update(
    params: &mut [f64],
    grads: &[f64],
    second_moment: &mut [f64],
    lr: f64,
    decay: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != second_moment.len() {
        return Err(Error::ShapeMismatch(format!(
            "rmsprop: {} params, {} grads, {} accumulators",
            params.len(),
            grads.len(),
            second_moment.len()
        )));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(second_moment.iter_mut()) {
        *v = decay * *v + (1.0 - decay) * g * g;
        *p -= lr * g / (v.sqrt() + eps);
    }
    check_finite(params, "param")
}

/// `p <- p - lr g`.
pub fn sgd_update(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::ShapeMismatch(format!(
            "sgd: {} params, {} grads",
            params.len(),
            grads.len()
        )));
    }
    for (p, &g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    check_finite(params, "param")
}

/// Running second moments mirroring the network's parameters (RMSProp), or
/// nothing (SGD).
#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    RmsProp(Vec<LayerGrad>),
    Sgd,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, net: &EncoderNet) -> Self {
        match kind {
            OptimizerKind::RmsProp => {
                OptimizerState::RmsProp(net.layers().iter().map(LayerGrad::zeros_like).collect())
            }
            OptimizerKind::Sgd => OptimizerState::Sgd,
        }
    }
}

fn check_grad_shapes(net: &EncoderNet, grads: &[LayerGrad]) -> Result<()> {
    let ok = grads.len() == net.layers().len()
        && net
            .layers()
            .iter()
            .zip(grads)
            .all(|(l, g)| l.weights.dim() == g.weights.dim() && l.bias.len() == g.bias.len());
    if ok {
        Ok(())
    } else {
        Err(Error::ShapeMismatch("gradients do not mirror the network".into()))
    }
}

pub fn rmsprop_step(
    net: &mut EncoderNet,
    grads: &[LayerGrad],
    state: &mut [LayerGrad],
    lr: f64,
    decay: f64,
    eps: f64,
) -> Result<()> {
    check_grad_shapes(net, grads)?;
    for (t, ((layer, g), v)) in net.layers_mut().iter_mut().zip(grads).zip(state.iter_mut()).enumerate() {
        Zip::from(&mut layer.weights)
            .and(&g.weights)
            .and(&mut v.weights)
            .for_each(|p, &g, v| {
                *v = decay * *v + (1.0 - decay) * g * g;
                *p -= lr * g / (v.sqrt() + eps);
            });
        Zip::from(&mut layer.bias)
            .and(&g.bias)
            .and(&mut v.bias)
            .for_each(|p, &g, v| {
                *v = decay * *v + (1.0 - decay) * g * g;
                *p -= lr * g / (v.sqrt() + eps);
            });
        check_layer_finite(layer.weights.view(), layer.bias.view(), t)?;
    }
    Ok(())
}

pub fn sgd_step(net: &mut EncoderNet, grads: &[LayerGrad], lr: f64) -> Result<()> {
    check_grad_shapes(net, grads)?;
    for (t, (layer, g)) in net.layers_mut().iter_mut().zip(grads).enumerate() {
        layer.weights.scaled_add(-lr, &g.weights);
        layer.bias.scaled_add(-lr, &g.bias);
        check_layer_finite(layer.weights.view(), layer.bias.view(), t)?;
    }
    Ok(())
}

fn check_layer_finite(
    w: ndarray::ArrayView2<'_, f64>,
    b: ndarray::ArrayView1<'_, f64>,
    t: usize,
) -> Result<()> {
    if w.iter().chain(b.iter()).all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteUpdate(format!("layer {t}")))
    }
}

fn optimizer_step(net: &mut EncoderNet, grads: &[LayerGrad], state: &mut OptimizerState, cfg: &TrainConfig) -> Result<()> {
    match state {
        OptimizerState::RmsProp(v) => rmsprop_step(
            net,
            grads,
            v,
            cfg.learning_rate,
            cfg.rmsprop_decay,
            cfg.rmsprop_eps,
        ),
        OptimizerState::Sgd => sgd_step(net, grads, cfg.learning_rate),
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub loss: f64,
    pub preclip_max_norm: f64,
    pub clipped: bool,
    pub ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<IterRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn clipped_count(&self) -> usize {
        self.records.iter().filter(|r| r.clipped).count()
    }

    /// `iter,loss,preclip_max_norm,clipped,ms`. With `zero_timing` the `ms`
    /// column is written as 0 so repeated runs produce identical files.
    pub fn to_csv(&self, zero_timing: bool) -> String {
        let mut out = String::from("iter,loss,preclip_max_norm,clipped,ms\n");
        for r in &self.records {
            let ms = if zero_timing { 0.0 } else { r.ms };
            out.push_str(&format!(
                "{},{:?},{:?},{},{:.3}\n",
                r.iter,
                r.loss,
                r.preclip_max_norm,
                u8::from(r.clipped),
                ms
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>, zero_timing: bool) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv(zero_timing)).map_err(|e| Error::io(path, e))
    }
}

/// Trained encoder together with what is needed to embed new points.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub net: EncoderNet,
    pub config: TrainConfig,
    /// Present when the model was trained on min-max normalised inputs.
    pub scaler: Option<MinMaxScaler>,
}

impl EmbeddingModel {
    pub fn transform(&self, points: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        match &self.scaler {
            Some(s) => transform(&self.net, s.apply(points)?.view()),
            None => transform(&self.net, points),
        }
    }
}

/// Embeds points with a trained encoder; pure and valid for unseen data.
pub fn transform(net: &EncoderNet, points: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if points.nrows() == 0 {
        if points.ncols() != net.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} features, input has {}",
                net.input_dim(),
                points.ncols()
            )));
        }
        return Ok(Array2::zeros((0, net.output_dim())));
    }
    net.transform(points)
}

pub fn fit(dataset: &Dataset, config: &TrainConfig) -> Result<(EmbeddingModel, TrainHistory)> {
    fit_with(dataset, config, |_, _| {})
}

/// Like [`fit`], calling `observer` after every completed iteration.
pub fn fit_with<F>(dataset: &Dataset, config: &TrainConfig, observer: F) -> Result<(EmbeddingModel, TrainHistory)>
where
    F: FnMut(&IterRecord, &EncoderNet),
{
    config.validate()?;
    if dataset.count() < 2 {
        return Err(Error::InvalidDataset("training needs at least two points".into()));
    }
    let scaler = config.normalize.then(|| MinMaxScaler::fit(dataset.points()));
    let points: Cow<'_, Array2<f64>> = match &scaler {
        Some(s) => Cow::Owned(s.apply(dataset.points())?),
        None => Cow::Owned(dataset.points().to_owned()),
    };

    let dims = config.layer_dims(dataset.feature_dim());
    let net = EncoderNet::xavier(&dims, config.leaky_slope, config.seed)?;

    let mut trainer = Trainer {
        net,
        state: OptimizerState::Sgd,
        config,
        history: TrainHistory::default(),
    };
    trainer.state = OptimizerState::new(config.optimizer, &trainer.net);

    match config.loss_kind {
        LossKind::Tsne => trainer.run_tsne(points.view(), observer)?,
        LossKind::LargeVis | LossKind::Umap => trainer.run_edges(points.view(), observer)?,
    }

    let Trainer { net, history, .. } = trainer;
    Ok((
        EmbeddingModel {
            net,
            config: config.clone(),
            scaler,
        },
        history,
    ))
}

/// Seed offsets so data order, edge sampling and initialisation draw from
/// unrelated streams.
const BATCH_STREAM: u64 = 0x5eed_ba7c;
const EDGE_STREAM: u64 = 0x5eed_ed6e;

struct Trainer<'a> {
    net: EncoderNet,
    state: OptimizerState,
    config: &'a TrainConfig,
    history: TrainHistory,
}

impl Trainer<'_> {
    fn abort(iteration: usize) -> impl FnOnce(Error) -> Error {
        move |e| Error::TrainingAborted {
            iteration,
            source: Box::new(e),
        }
    }

    fn apply(&mut self, cache: &ForwardCache, report: &LossReport) -> Result<()> {
        let mut grads = self.net.backward(cache, report.grad_embedding.view())?;
        clip_layer_grads(&mut grads, self.config.layer_clip, self.config.layer_clip_mode)?;
        optimizer_step(&mut self.net, &grads, &mut self.state, self.config)?;
        debug_assert!(self.net.all_finite());
        Ok(())
    }

    fn record<F>(&mut self, iter: usize, report: &LossReport, start: Instant, observer: &mut F)
    where
        F: FnMut(&IterRecord, &EncoderNet),
    {
        let rec = IterRecord {
            iter,
            loss: report.loss_value,
            preclip_max_norm: report.preclip_max_norm,
            clipped: report.clipped,
            ms: start.elapsed().as_secs_f64() * 1e3,
        };
        self.history.records.push(rec);
        observer(&rec, &self.net);
    }

    fn run_tsne<F>(&mut self, points: ArrayView2<'_, f64>, mut observer: F) -> Result<()>
    where
        F: FnMut(&IterRecord, &EncoderNet),
    {
        let cfg = self.config;
        let mut batches = iterate_batches(
            points.nrows(),
            BatchPlan {
                batch_size: cfg.batch_size,
                seed: cfg.seed ^ BATCH_STREAM,
            },
        )?;
        for iter in 0..cfg.iterations {
            let start = Instant::now();
            // a short epoch tail too small for joint probabilities is skipped
            let idx = loop {
                let b = batches.next().expect("endless batch iterator");
                if b.len() >= 4 {
                    break b;
                }
            };
            let x = points.select(Axis(0), &idx);
            let step = |this: &mut Self| -> Result<LossReport> {
                let jp = affinity::batch_joint_p(x.view(), cfg.perplexity)?;
                let (y, cache) = this.net.forward(x.view())?;
                let alpha = if iter < cfg.exaggeration_iters {
                    cfg.exaggeration_factor
                } else {
                    1.0
                };
                let report = assemble_tsne_batch_grad(
                    jp.p.view(),
                    y.view(),
                    alpha,
                    cfg.embed_clip,
                    cfg.embed_clip_mode,
                )?;
                this.apply(&cache, &report)?;
                Ok(report)
            };
            let report = step(self).map_err(Self::abort(iter))?;
            self.record(iter, &report, start, &mut observer);
        }
        Ok(())
    }

    fn run_edges<F>(&mut self, points: ArrayView2<'_, f64>, mut observer: F) -> Result<()>
    where
        F: FnMut(&IterRecord, &EncoderNet),
    {
        let cfg = self.config;
        let (graph, objective) = match cfg.loss_kind {
            LossKind::LargeVis => (
                affinity::knn_graph(points, cfg.k_neighbors)?,
                EdgeObjective::LargeVis {
                    gamma: cfg.gamma,
                    eps: cfg.edge_eps,
                },
            ),
            _ => (
                affinity::umap_memberships(points, cfg.k_neighbors, cfg.umap_a, cfg.umap_b)?.0,
                EdgeObjective::Umap {
                    a: cfg.umap_a,
                    b: cfg.umap_b,
                    eps: cfg.edge_eps,
                },
            ),
        };
        let mut sampler = affinity::build_edge_sampler(&graph, cfg.seed ^ EDGE_STREAM)?;

        for iter in 0..cfg.iterations {
            let start = Instant::now();
            let mut step = |this: &mut Self| -> Result<LossReport> {
                let samples = sampler.draw_edge_batch(cfg.edge_batch_size)?;
                let (nodes, local) = localize(&samples);
                let x = points.select(Axis(0), &nodes);
                let (y, cache) = this.net.forward(x.view())?;
                let report = assemble_edge_batch_grad(
                    y.view(),
                    &local,
                    objective,
                    cfg.embed_clip,
                    cfg.embed_clip_mode,
                )?;
                this.apply(&cache, &report)?;
                Ok(report)
            };
            let report = step(self).map_err(Self::abort(iter))?;
            self.record(iter, &report, start, &mut observer);
        }
        Ok(())
    }
}

/// Sorted unique node ids of an edge batch and the batch re-indexed into that
/// list.
fn localize(samples: &[EdgeSample]) -> (Vec<usize>, Vec<EdgeSample>) {
    let mut nodes: Vec<usize> = samples
        .iter()
        .flat_map(|s| [s.positive.0, s.positive.1].into_iter().chain(s.negatives))
        .collect();
    nodes.sort_unstable();
    nodes.dedup();
    let pos: HashMap<usize, usize> = nodes.iter().enumerate().map(|(l, &g)| (g, l)).collect();
    let local = samples
        .iter()
        .map(|s| EdgeSample {
            positive: (pos[&s.positive.0], pos[&s.positive.1]),
            negatives: s.negatives.map(|n| pos[&n]),
        })
        .collect();
    (nodes, local)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::make_blobs;

    #[test]
    fn rmsprop_zero_gradient_decays_accumulator() {
        let mut p = [1.0, -2.0];
        let mut v = [0.5, 2.0];
        rmsprop_update(&mut p, &[0.0, 0.0], &mut v, 1e-3, 0.9, 1e-8).unwrap();
        assert_eq!(p, [1.0, -2.0]);
        assert!((v[0] - 0.45).abs() < 1e-15 && (v[1] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn rmsprop_first_step() {
        let mut p = [0.0];
        let mut v = [0.0];
        rmsprop_update(&mut p, &[1.0], &mut v, 1e-3, 0.9, 1e-8).unwrap();
        assert!((v[0] - 0.1).abs() < 1e-15);
        assert!((p[0] - -3.16228e-3).abs() < 1e-8);
    }

    #[test]
    fn rmsprop_constant_gradient_step_tends_to_lr() {
        let mut p = [0.0];
        let mut v = [0.0];
        let mut last = 0.0;
        for _ in 0..200 {
            let before = p[0];
            rmsprop_update(&mut p, &[3.0], &mut v, 1e-3, 0.9, 1e-8).unwrap();
            last = before - p[0];
        }
        assert!((last - 1e-3).abs() < 1e-5);
    }

    #[test]
    fn rmsprop_rejects_overflow() {
        let mut p = [f64::MAX];
        let mut v = [0.0];
        assert!(matches!(
            rmsprop_update(&mut p, &[-1e300], &mut v, 1e300, 0.0, 1e-8),
            Err(Error::NonFiniteUpdate(_))
        ));
    }

    #[test]
    fn sgd_cases() {
        let mut p = [1.0];
        sgd_update(&mut p, &[0.0], 0.1).unwrap();
        assert_eq!(p, [1.0]);
        sgd_update(&mut p, &[2.0], 0.1).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_steps_do_not_commute_with_summed_gradients_on_a_quadratic() {
        // f(p) = p^2, grad = 2p
        let lr = 0.1;
        let mut two = [1.0];
        for _ in 0..2 {
            let g = [2.0 * two[0]];
            sgd_update(&mut two, &g, lr).unwrap();
        }
        let mut once = [1.0];
        sgd_update(&mut once, &[2.0 * 1.0 + 2.0 * 1.0], lr).unwrap();
        assert!((two[0] - once[0]).abs() > 1e-3);
    }

    #[test]
    fn adam_is_rejected_with_reason() {
        let err = "adam".parse::<OptimizerKind>().unwrap_err();
        assert!(err.to_string().contains("momentum"));
    }

    #[test]
    fn config_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.loss_kind = LossKind::Umap;
        cfg.embed_clip = f64::INFINITY;
        cfg.hidden_dims = vec![10, 7];
        cfg.learning_rate = 0.1 + 0.2;
        cfg.normalize = true;
        let back = TrainConfig::from_kv_str(&cfg.to_kv_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.to_kv_string().lines().count(), TrainConfig::KEYS.len());
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(TrainConfig::from_kv_str("bogus = 1").is_err());
        assert!(TrainConfig::from_kv_str("perplexity").is_err());
        let mut cfg = TrainConfig::default();
        cfg.iterations = 100;
        assert!(cfg.validate().is_err());
        cfg.exaggeration_iters = 50;
        assert!(cfg.validate().is_ok());
        cfg.learning_rate = -1.0;
        assert!(cfg.validate().is_err());
    }

    fn small_config(kind: LossKind) -> TrainConfig {
        TrainConfig {
            loss_kind: kind,
            perplexity: 10.0,
            k_neighbors: 10,
            batch_size: 64,
            edge_batch_size: 64,
            iterations: 40,
            exaggeration_iters: 10,
            hidden_dims: vec![16, 16],
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn history_length_matches_iterations() {
        let data = make_blobs(3, 30, 5, 1.0, 1).unwrap();
        for kind in [LossKind::Tsne, LossKind::LargeVis, LossKind::Umap] {
            let (model, hist) = fit(&data, &small_config(kind)).unwrap();
            assert_eq!(hist.len(), 40, "{kind}");
            assert!(model.net.all_finite());
            assert!(hist.records.iter().all(|r| r.loss.is_finite()));
        }
    }

    #[test]
    fn transform_is_pure_and_handles_empty_input() {
        let data = make_blobs(2, 20, 3, 1.0, 2).unwrap();
        let cfg = TrainConfig {
            batch_size: 32,
            ..small_config(LossKind::Tsne)
        };
        let (model, _) = fit(&data, &cfg).unwrap();
        let a = model.transform(data.points()).unwrap();
        let b = model.transform(data.points()).unwrap();
        assert_eq!(a, b);
        let (y, _) = model.net.forward(data.points()).unwrap();
        assert_eq!(a, y);
        let empty = transform(&model.net, Array2::zeros((0, 3)).view()).unwrap();
        assert_eq!(empty.dim(), (0, 2));
        assert!(transform(&model.net, Array2::zeros((0, 4)).view()).is_err());
    }

    #[test]
    fn batch_larger_than_dataset() {
        let data = make_blobs(1, 10, 2, 1.0, 0).unwrap();
        let mut cfg = small_config(LossKind::Tsne);
        cfg.batch_size = 11;
        assert!(matches!(fit(&data, &cfg), Err(Error::BatchTooLarge { .. })));
    }

    #[test]
    fn log_csv_format() {
        let h = TrainHistory {
            records: vec![IterRecord {
                iter: 0,
                loss: 1.5,
                preclip_max_norm: 2e14,
                clipped: true,
                ms: 12.25,
            }],
        };
        assert_eq!(
            h.to_csv(false),
            "iter,loss,preclip_max_norm,clipped,ms\n0,1.5,200000000000000.0,1,12.250\n"
        );
        assert!(h.to_csv(true).ends_with(",0.000\n"));
    }

    #[test]
    fn localize_reindexes() {
        let s = vec![EdgeSample {
            positive: (40, 3),
            negatives: [9, 3, 100, 9, 41],
        }];
        let (nodes, local) = localize(&s);
        assert_eq!(nodes, vec![3, 9, 40, 41, 100]);
        assert_eq!(local[0].positive, (2, 0));
        assert_eq!(local[0].negatives, [1, 0, 4, 1, 3]);
    }
}
