use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use nndr::dataio::{self, Dataset, MinMaxScaler};
use nndr::eval::{self, EvalReport};
use nndr::persist::{load_model, save_model};
use nndr::plot::plot_svg;
use nndr::trainer::{fit_with, EmbeddingModel, TrainConfig, TrainHistory};
use nndr::{Error, Result};

#[derive(Parser)]
#[command(name = "nndr", version, about = "Parametric neighbor-embedding dimension reduction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder and write the model file and training log.
    Fit(FitArgs),
    /// Embed points with a trained model.
    Transform(TransformArgs),
    /// KNN accuracy and trustworthiness of an embedding.
    Eval(EvalArgs),
    /// Render a 2-D embedding CSV as SVG.
    Plot(PlotArgs),
    /// Train and evaluate over a grid of batch sizes or hidden widths.
    Sweep(SweepArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// IDX image file, CSV file or directory of obj<k>__<i>.png images.
    #[arg(long)]
    data: PathBuf,
    /// IDX label file accompanying IDX images.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Zero-based CSV column holding labels (default: a column headed `label`).
    #[arg(long)]
    label_column: Option<usize>,
    /// Use only the first N points.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable), e.g. `--set gamma=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    perplexity: Option<f64>,
    #[arg(long)]
    k_neighbors: Option<usize>,
    /// Comma separated hidden layer widths.
    #[arg(long)]
    hidden_dims: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Disable embedding-gradient clipping (threshold +inf).
    #[arg(long)]
    no_clip: bool,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// Training-log CSV (default: <out>.log.csv).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Also write the embedding of the training data.
    #[arg(long)]
    embedding: Option<PathBuf>,
    /// Write <out>.iter<N> every N iterations.
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct TransformArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Embedding CSV to write (`x,y[,label]`).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Embedding CSV to evaluate (queries when --reference is given).
    #[arg(long)]
    embedding: PathBuf,
    /// Reference embedding CSV; without it evaluation is leave-one-out.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Input-space points in the same order as the embedding, for trustworthiness.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    data_labels: Option<PathBuf>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = eval::DEFAULT_K)]
    k: usize,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    embedding: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParam {
    BatchSize,
    HiddenUnits,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_enum)]
    param: SweepParam,
    /// Comma separated grid values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<usize>,
    /// Comma separated seeds.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
    seeds: Vec<u64>,
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long)]
    test_labels: Option<PathBuf>,
    #[arg(long, default_value_t = eval::DEFAULT_K)]
    k: usize,
    /// Compute trustworthiness as well (quadratic cost).
    #[arg(long)]
    trust: bool,
    /// Results CSV.
    #[arg(long)]
    out: PathBuf,
}

fn load_data(args: &DataArgs) -> Result<Dataset> {
    load_points(&args.data, args.labels.as_deref(), args.label_column, args.limit)
}

fn load_points(data: &Path, labels: Option<&Path>, label_column: Option<usize>, limit: Option<usize>) -> Result<Dataset> {
    let mut ds = if data.is_dir() {
        dataio::load_image_dir(data)?
    } else {
        let head = fs::read(data).map_err(|e| Error::Io {
            path: data.to_path_buf(),
            source: e,
        })?;
        if dataio::looks_like_idx(&head) {
            let images = dataio::load_idx_images(data)?;
            match labels {
                Some(l) => images.with_labels(dataio::load_idx_labels(l)?)?,
                None => images,
            }
        } else {
            match label_column {
                Some(c) => dataio::load_csv(data, Some(c))?,
                None => dataio::load_csv_labeled_by_header(data)?,
            }
        }
    };
    if let Some(n) = limit {
        ds = ds.head(n)?;
    }
    Ok(ds)
}

fn resolve_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k, v)?;
    }
    let flags: [(&str, Option<String>); 9] = [
        ("loss_kind", args.loss.clone()),
        ("iterations", args.iterations.map(|v| v.to_string())),
        ("batch_size", args.batch_size.map(|v| v.to_string())),
        ("learning_rate", args.learning_rate.map(|v| v.to_string())),
        ("optimizer", args.optimizer.clone()),
        ("perplexity", args.perplexity.map(|v| v.to_string())),
        ("k_neighbors", args.k_neighbors.map(|v| v.to_string())),
        ("hidden_dims", args.hidden_dims.clone()),
        ("seed", args.seed.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    if args.no_clip {
        cfg.embed_clip = f64::INFINITY;
    }
    if cfg.exaggeration_iters > cfg.iterations {
        cfg.exaggeration_iters = cfg.iterations;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_config(cfg: &TrainConfig) {
    println!("# resolved configuration");
    print!("{}", cfg.to_kv_string());
}

fn train(ds: &Dataset, cfg: &TrainConfig, out: Option<&Path>, checkpoint_every: Option<usize>) -> Result<(EmbeddingModel, TrainHistory)> {
    let scaler = cfg.normalize.then(|| MinMaxScaler::fit(ds.points()));
    let mut checkpoint_error = None;
    let result = fit_with(ds, cfg, |rec, net| {
        let done = rec.iter + 1;
        if done % 100 == 0 || done == cfg.iterations {
            info!("iter {done}/{} loss {:.6} clipped {}", cfg.iterations, rec.loss, rec.clipped);
        }
        if let (Some(k), Some(out)) = (checkpoint_every, out) {
            if k > 0 && done % k == 0 && done < cfg.iterations && checkpoint_error.is_none() {
                let model = EmbeddingModel {
                    net: net.clone(),
                    config: cfg.clone(),
                    scaler: scaler.clone(),
                };
                let path = PathBuf::from(format!("{}.iter{done}", out.display()));
                checkpoint_error = save_model(&model, path).err();
            }
        }
    });
    if let Some(e) = checkpoint_error {
        return Err(e);
    }
    result
}

fn run_fit(args: &FitArgs) -> Result<()> {
    let cfg = resolve_config(&args.config)?;
    print_config(&cfg);
    let ds = load_data(&args.data)?;
    info!("loaded {} points with {} features", ds.count(), ds.feature_dim());
    let (model, history) = train(&ds, &cfg, Some(&args.out), args.checkpoint_every)?;
    save_model(&model, &args.out)?;
    let log = args
        .log
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.log.csv", args.out.display())));
    history.write_csv(&log, cfg.deterministic)?;
    if let Some(path) = &args.embedding {
        let y = model.transform(ds.points())?;
        dataio::write_embedding_csv(y.view(), ds.labels(), path)?;
    }
    println!("model = {}", args.out.display());
    println!("log = {}", log.display());
    Ok(())
}

fn run_transform(args: &TransformArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    print_config(&model.config);
    let ds = load_data(&args.data)?;
    let y = model.transform(ds.points())?;
    dataio::write_embedding_csv(y.view(), ds.labels(), &args.out)?;
    println!("embedding = {}", args.out.display());
    Ok(())
}

fn evaluate(args: &EvalArgs) -> Result<EvalReport> {
    let query = dataio::load_csv_labeled_by_header(&args.embedding)?;
    let query_labels = query.labels().ok_or(Error::MissingLabels)?;
    let knn_accuracy = match &args.reference {
        Some(r) => {
            let reference = dataio::load_csv_labeled_by_header(r)?;
            let ref_labels = reference.labels().ok_or(Error::MissingLabels)?;
            eval::knn_accuracy(reference.points(), ref_labels, query.points(), query_labels, args.k)?
        }
        None => eval::knn_accuracy_self(query.points(), query_labels, args.k)?,
    };
    let trustworthiness = match &args.data {
        Some(d) => {
            let hi = load_points(d, args.data_labels.as_deref(), None, args.limit)?;
            Some(eval::trustworthiness(hi.points(), query.points(), args.k)?)
        }
        None => None,
    };
    Ok(EvalReport {
        knn_accuracy,
        trustworthiness,
        k_used: args.k,
        n_eval: query.count(),
    })
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    println!("# resolved configuration");
    println!("embedding = {}", args.embedding.display());
    if let Some(r) = &args.reference {
        println!("reference = {}", r.display());
    }
    println!("k = {}", args.k);
    let report = evaluate(args)?;
    print!("{report}");
    if let Some(out) = &args.out {
        fs::write(out, report.to_kv_string()).map_err(|e| Error::Io {
            path: out.clone(),
            source: e,
        })?;
    }
    Ok(())
}

fn run_plot(args: &PlotArgs) -> Result<()> {
    println!("# resolved configuration");
    println!("embedding = {}", args.embedding.display());
    println!("out = {}", args.out.display());
    let e = dataio::load_csv_labeled_by_header(&args.embedding)?;
    plot_svg(e.points(), e.labels(), &args.out)
}

fn run_sweep(args: &SweepArgs) -> Result<()> {
    let base = resolve_config(&args.config)?;
    print_config(&base);
    let ds = load_data(&args.data)?;
    let labels = ds.labels().ok_or(Error::MissingLabels)?;
    let test = match &args.test_data {
        Some(p) => Some(load_points(p, args.test_labels.as_deref(), args.data.label_column, None)?),
        None => None,
    };
    let param_name = match args.param {
        SweepParam::BatchSize => "batch_size",
        SweepParam::HiddenUnits => "hidden_units",
    };
    let mut out = format!("param,value,seed,{},test_knn_accuracy\n", EvalReport::CSV_HEADER);
    for &value in &args.values {
        for &seed in &args.seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            match args.param {
                SweepParam::BatchSize => cfg.batch_size = value,
                SweepParam::HiddenUnits => cfg.hidden_dims = vec![value; cfg.hidden_dims.len().max(1)],
            }
            cfg.validate()?;
            info!("{param_name} = {value}, seed = {seed}");
            let (model, _) = train(&ds, &cfg, None, None)?;
            let y = model.transform(ds.points())?;
            let report = EvalReport {
                knn_accuracy: eval::knn_accuracy_self(y.view(), labels, args.k)?,
                trustworthiness: if args.trust {
                    Some(eval::trustworthiness(ds.points(), y.view(), args.k)?)
                } else {
                    None
                },
                k_used: args.k,
                n_eval: ds.count(),
            };
            let test_acc = match &test {
                Some(t) => {
                    let ty = model.transform(t.points())?;
                    let tl = t.labels().ok_or(Error::MissingLabels)?;
                    eval::knn_accuracy(y.view(), labels, ty.view(), tl, args.k)?.to_string()
                }
                None => "NA".into(),
            };
            let row = format!("{param_name},{value},{seed},{},{test_acc}\n", report.to_csv_row());
            print!("{row}");
            out.push_str(&row);
        }
    }
    fs::write(&args.out, out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = match &cli.command {
        Command::Fit(a) => run_fit(a),
        Command::Transform(a) => run_transform(a),
        Command::Eval(a) => run_eval(a),
        Command::Plot(a) => run_plot(a),
        Command::Sweep(a) => run_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.name());
            ExitCode::from(1)
        }
    }
}
