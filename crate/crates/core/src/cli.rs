//! `gridsage` command line: train, eval, classify, explain, generate.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O or data error,
//! 4 training divergence.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::dataset_io::{
    export_dataset, generate_synthetic, load_dataset, load_model, nearest_centroid_accuracy, read_image, save_model,
    split, write_rgb, Sample, SyntheticConfig,
};
use crate::error::Error;
use crate::explain::{backproject_saliency, build_report, render_overlay, vertex_importance, ImportanceMode};
use crate::graph_builder::build_grid_graph;
use crate::model::{forward, softmax_probs, trace_with_gradients, Architecture, LayerSpec, ModelParams, UpdateRule};
use crate::training::{evaluate, prune_weights, train_with, Metrics, Optimizer, PruneMask, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

const DEFAULT_TOP: usize = 4;

#[derive(Debug, Parser)]
#[command(name = "gridsage", version, about = "Explainable grid-graph GNN image classifier")]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write it with a metrics JSON.
    Train(TrainArgs),
    /// Report accuracy and confusion matrix of a model on a dataset.
    Eval(EvalArgs),
    /// Print the top-N class probabilities for one image.
    Classify(ClassifyArgs),
    /// Classify one image and write saliency overlays.
    Explain(ExplainArgs),
    /// Write a synthetic dataset as `<out>/<class>/*.pgm`.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset root with one subdirectory of PGM/PNG images per class.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    data: Option<PathBuf>,
    /// Use the built-in synthetic speckled-target dataset.
    #[arg(long)]
    synthetic: bool,
    #[command(flatten)]
    synth: SynthArgs,
    /// Fraction of each class held out for testing.
    #[arg(long, default_value_t = 0.23)]
    test_fraction: f64,
    /// Seed for the split, initialization, shuffling and synthetic data.
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 87)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Speckle standard deviation.
    #[arg(long, default_value_t = 0.2)]
    noise: f64,
    #[arg(long, default_value_t = 3)]
    shadow_offset: usize,
}

impl SynthArgs {
    fn config(&self, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            size: self.size,
            classes: self.classes,
            per_class: self.per_class,
            noise: self.noise,
            shadow_offset: self.shadow_offset,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Model output path.
    #[arg(long, default_value = "model.gsm")]
    out: PathBuf,
    /// Metrics JSON output path.
    #[arg(long, default_value = "metrics.json")]
    metrics: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// L1 coefficient on weight matrices.
    #[arg(long, default_value_t = 1e-5)]
    lambda: f64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    optimizer: OptimizerArg,
    /// Samples averaged per optimizer step.
    #[arg(long, default_value_t = 8)]
    accumulation: usize,
    /// Weights with magnitude below this are zeroed after training.
    #[arg(long, default_value_t = 1e-3)]
    prune_threshold: f64,
    /// Masked fine-tuning epochs after pruning.
    #[arg(long, default_value_t = 0)]
    retrain_epochs: usize,
    #[arg(long, value_enum, default_value_t = UpdateRule::Product)]
    update_rule: UpdateRule,
    /// GNN channel widths, one per layer.
    #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
    layers: Vec<usize>,
    /// Pooling window per layer.
    #[arg(long, default_value_t = 2)]
    pool: usize,
    /// Hidden widths of the classifier head; pass "" for none.
    #[arg(long, value_delimiter = ',', default_value = "128")]
    head: Vec<String>,
    /// Channel attention reduction ratio.
    #[arg(long, default_value_t = 4)]
    reduction: usize,
    #[arg(long)]
    no_attention: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    /// Evaluate on every sample instead of the held-out split.
    #[arg(long)]
    all: bool,
    /// Metrics JSON output path.
    #[arg(long, default_value = "eval_metrics.json")]
    metrics: PathBuf,
}

#[derive(Debug, Args)]
struct ClassifyArgs {
    /// Grayscale PGM or PNG image.
    image: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Number of classes to list (default: 4, or every class if fewer).
    #[arg(long)]
    top: Option<usize>,
    /// Directory for the report files.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ImageFormat {
    Ppm,
    Png,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[command(flatten)]
    classify: ClassifyArgs,
    #[arg(long, value_enum, default_value_t = ImportanceMode::Gradcam)]
    mode: ImportanceMode,
    /// Minimum saliency that gets tinted.
    #[arg(long, default_value_t = 0.2)]
    threshold: f64,
    /// Also write one overlay per GNN layer.
    #[arg(long)]
    per_layer: bool,
    #[arg(long, value_enum, default_value_t = ImageFormat::Ppm)]
    format: ImageFormat,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    synth: SynthArgs,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Failure with its exit code.
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Diverged { .. } => EXIT_DIVERGED,
            _ => EXIT_DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return EXIT_OK;
        }
        Err(e) => {
            let rendered = e.to_string();
            eprintln!("{}", rendered.lines().next().unwrap_or("error: invalid arguments"));
            return EXIT_CONFIG;
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return EXIT_CONFIG;
        }
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return EXIT_CONFIG;
        }
    };
    let outcome = pool.install(|| match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Classify(a) => cmd_classify(&a).map(|_| ()),
        Command::Explain(a) => cmd_explain(&a),
        Command::Generate(a) => cmd_generate(&a),
    });
    match outcome {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

/// All samples plus class names from whichever source was selected.
fn load_samples(data: &DataArgs) -> std::result::Result<(Vec<Sample>, Vec<String>), Failure> {
    if !(data.test_fraction > 0.0 && data.test_fraction < 1.0) {
        return Err(Failure::config(format!(
            "--test-fraction must be in (0, 1), got {}",
            data.test_fraction
        )));
    }
    match &data.data {
        Some(root) => {
            let (samples, manifest) = load_dataset(root)?;
            Ok((samples, manifest.class_names))
        }
        None => {
            let cfg = data.synth.config(data.seed);
            cfg.validate().map_err(|e| Failure::config(e.to_string()))?;
            Ok((generate_synthetic(&cfg)?, cfg.class_names()))
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CmdResult {
    fs::write(path, bytes).map_err(|e| Error::io(path, e).into())
}

fn write_json(path: &Path, value: &serde_json::Value) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).expect("json values serialize");
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn metrics_json(m: &Metrics) -> serde_json::Value {
    json!({"accuracy": m.accuracy, "mean_loss": m.mean_loss, "confusion": m.confusion})
}

fn architecture(a: &TrainArgs, height: usize, width: usize, class_names: Vec<String>) -> std::result::Result<Architecture, Failure> {
    let head_hidden = a
        .head
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Failure::config(format!("--head expects comma-separated widths, got {s:?}")))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let arch = Architecture {
        input_height: height,
        input_width: width,
        in_channels: 1,
        layers: a
            .layers
            .iter()
            .map(|&channels| LayerSpec { channels, pool: a.pool })
            .collect(),
        reduction: a.reduction,
        update_rule: a.update_rule,
        attention: !a.no_attention,
        head_hidden,
        class_names,
    };
    arch.validate().map_err(|e| Failure::config(e.to_string()))?;
    Ok(arch)
}

fn cmd_train(a: &TrainArgs) -> CmdResult {
    let cfg = TrainConfig {
        learning_rate: a.lr,
        lambda: a.lambda,
        epochs: a.epochs,
        optimizer: match a.optimizer {
            OptimizerArg::Adam => Optimizer::adam(),
            OptimizerArg::Sgd => Optimizer::Sgd,
        },
        seed: a.data.seed,
        prune_threshold: a.prune_threshold,
        update_rule: a.update_rule,
        accumulation: a.accumulation,
        retrain_epochs: a.retrain_epochs,
    };
    cfg.validate().map_err(|e| Failure::config(e.to_string()))?;
    let (samples, class_names) = load_samples(&a.data)?;
    let first = samples
        .first()
        .ok_or_else(|| Failure::from(Error::InvalidInput("dataset is empty".into())))?;
    let arch = architecture(a, first.image.height(), first.image.width(), class_names)?;
    let (train_set, test_set) = split(&samples, a.data.test_fraction, a.data.seed)?;
    let model = ModelParams::init(arch, cfg.seed)?;

    let mut history = Vec::new();
    let mut log = |epoch: usize, m: &Metrics| {
        eprintln!("epoch={epoch} loss={:.6} acc={:.4}", m.mean_loss, m.accuracy);
        history.push(json!({"epoch": epoch, "loss": m.mean_loss, "accuracy": m.accuracy}));
    };
    let (model, _) = train_with(model, &train_set, &cfg, None, &mut log)?;
    let (mut model, sparsity) = prune_weights(model, cfg.prune_threshold);
    if cfg.retrain_epochs > 0 {
        let mask = PruneMask::from_zeros(&model);
        let retrain_cfg = TrainConfig {
            epochs: cfg.retrain_epochs,
            ..cfg.clone()
        };
        let offset = cfg.epochs;
        let mut log = |epoch: usize, m: &Metrics| {
            let epoch = offset + epoch;
            eprintln!("epoch={epoch} loss={:.6} acc={:.4}", m.mean_loss, m.accuracy);
            history.push(json!({"epoch": epoch, "loss": m.mean_loss, "accuracy": m.accuracy}));
        };
        model = train_with(model, &train_set, &retrain_cfg, Some(&mask), &mut log)?.0;
    }
    let train_metrics = evaluate(&model, &train_set)?;
    let test_metrics = evaluate(&model, &test_set)?;
    let baseline = nearest_centroid_accuracy(&train_set, &test_set)?;
    eprintln!(
        "train_acc={:.4} test_acc={:.4} centroid_acc={:.4} pruned={:.4}",
        train_metrics.accuracy, test_metrics.accuracy, baseline, sparsity.overall
    );

    save_model(&model, &a.out)?;
    write_json(
        &a.metrics,
        &json!({
            "config": cfg,
            "class_names": model.class_names(),
            "train_samples": train_set.len(),
            "test_samples": test_set.len(),
            "parameters": model.num_parameters(),
            "epochs": history,
            "train": metrics_json(&train_metrics),
            "test": metrics_json(&test_metrics),
            "nearest_centroid_accuracy": baseline,
            "sparsity": sparsity,
        }),
    )
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    let model = load_model(&a.model)?;
    let (samples, class_names) = load_samples(&a.data)?;
    if class_names != model.class_names() {
        return Err(Error::InvalidInput(format!(
            "dataset classes [{}] differ from model classes [{}]",
            class_names.join(", "),
            model.class_names().join(", ")
        ))
        .into());
    }
    let set = if a.all {
        samples
    } else {
        split(&samples, a.data.test_fraction, a.data.seed)?.1
    };
    let m = evaluate(&model, &set)?;
    println!("accuracy={}", m.accuracy);
    let names = model.class_names();
    let width = names.iter().map(String::len).max().unwrap_or(0).max(6);
    print!("{:>width$}", "true\\pred");
    for n in names {
        print!(" {n:>width$}");
    }
    println!();
    for (name, row) in names.iter().zip(&m.confusion) {
        print!("{name:>width$}");
        for c in row {
            print!(" {c:>width$}");
        }
        println!();
    }
    write_json(
        &a.metrics,
        &json!({"samples": set.len(), "class_names": names, "metrics": metrics_json(&m)}),
    )
}

struct Classified {
    model: ModelParams,
    image: crate::graph_builder::Image,
    graph: crate::graph_builder::GridGraph,
    probs: Vec<f64>,
    stem: String,
    top: usize,
}

fn classify_image(a: &ClassifyArgs) -> std::result::Result<Classified, Failure> {
    let model = load_model(&a.model)?;
    let top = a.top.unwrap_or(DEFAULT_TOP.min(model.num_classes()));
    if top == 0 || top > model.num_classes() {
        return Err(Failure::config(format!(
            "--top must be between 1 and {}, got {top}",
            model.num_classes()
        )));
    }
    let image = read_image(&a.image)?;
    let graph = build_grid_graph(&image)?;
    let (logits, _) = forward(&model, &graph, false)?;
    let probs = softmax_probs(logits.data())?;
    let stem = a
        .image
        .file_stem()
        .map_or_else(|| "image".to_string(), |s| s.to_string_lossy().into_owned());
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    Ok(Classified {
        model,
        image,
        graph,
        probs,
        stem,
        top,
    })
}

fn emit_report(
    a: &ClassifyArgs,
    c: &Classified,
    mode: ImportanceMode,
    saliency_file: Option<&str>,
) -> CmdResult {
    let report = build_report(&c.probs, c.model.class_names(), c.top, None)?;
    let lines = report.lines();
    for line in &lines {
        println!("{line}");
    }
    write_file(
        &a.out_dir.join(format!("{}.report.txt", c.stem)),
        format!("{}\n", lines.join("\n")).as_bytes(),
    )?;
    write_json(
        &a.out_dir.join(format!("{}.report.json", c.stem)),
        &report.to_json(mode, saliency_file),
    )
}

fn cmd_classify(a: &ClassifyArgs) -> std::result::Result<Classified, Failure> {
    let c = classify_image(a)?;
    emit_report(a, &c, ImportanceMode::default(), None)?;
    Ok(c)
}

fn cmd_explain(a: &ExplainArgs) -> CmdResult {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(Failure::config(format!("--threshold must be in [0, 1], got {}", a.threshold)));
    }
    let c = classify_image(&a.classify)?;
    let target = crate::training::predict_class(&c.probs);
    let trace = match a.mode {
        ImportanceMode::Gradcam => trace_with_gradients(&c.model, &c.graph, target)?.1,
        ImportanceMode::Activation => forward(&c.model, &c.graph, true)?.1.expect("trace was requested"),
    };
    let scores = vertex_importance(&trace, target, a.mode)?;
    let ext = match a.format {
        ImageFormat::Ppm => "ppm",
        ImageFormat::Png => "png",
    };
    let depth = trace.depth();
    let write_overlay = |level: usize, name: String| -> CmdResult {
        let map = backproject_saliency(&scores[level], &trace, level)?;
        let rgb = render_overlay(&c.image, &map, a.threshold)?;
        write_rgb(&a.classify.out_dir.join(name), c.image.width(), c.image.height(), &rgb)?;
        Ok(())
    };
    let composite = format!("{}.overlay.{ext}", c.stem);
    write_overlay(depth, composite.clone())?;
    if a.per_layer {
        for level in 1..=depth {
            write_overlay(level, format!("{}.layer{level}.{ext}", c.stem))?;
        }
    }
    emit_report(&a.classify, &c, a.mode, Some(&composite))
}

fn cmd_generate(a: &GenerateArgs) -> CmdResult {
    let cfg = a.synth.config(a.seed);
    cfg.validate().map_err(|e| Failure::config(e.to_string()))?;
    let samples = generate_synthetic(&cfg)?;
    export_dataset(&a.out, &samples, &cfg.class_names())?;
    eprintln!("wrote {} images to {}", samples.len(), a.out.display());
    Ok(())
}
