//! The `calonet` command line.
//!
//! stdout carries `key=value` lines only; diagnostics go to stderr. Exit
//! code 1 means bad input (flags, config, data files), 2 a failure while
//! running.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::causal::{
    build_causal_matrix, export, BinStrategy, CausalConfig, CausalMatrix, GraphFormat, GraphScope,
};
use crate::dataset::{
    load, synth_causal, to_ts, Dataset, LengthPolicy, MissingPolicy, NormalizationStats, ParseOptions, SynthConfig,
};
use crate::encoder::EncoderConfig;
use crate::error::Error;
use crate::gnn::{Direction, GinConfig};
use crate::model::{evaluate, saliency, train, CaLoNetModel, TrainConfig};

/// Environment variable capping worker threads (default 1).
pub const THREADS_ENV: &str = "CALONET_THREADS";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    /// Per-dimension z-score with training-split statistics.
    #[default]
    Z,
    None,
}

/// Everything a training run depends on. Every field may be omitted from
/// a config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub norm: Norm,
    pub parse: ParseOptions,
    pub encoder: EncoderConfig,
    pub gin: GinConfig,
    pub training: TrainConfig,
}

#[derive(Parser, Debug)]
#[command(name = "calonet", version, about = "Causal-graph and local-pattern classifier for multivariate time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write model.json, report.csv and config.resolved.json.
    Train(TrainArgs),
    /// Export the causal graph of one sample as DOT or JSON.
    Graph(GraphArgs),
    /// Report the accuracy of a saved model on a dataset.
    Eval(EvalArgs),
    /// Write the saliency map of one sample as CSV (D rows, L columns).
    Explain(ExplainArgs),
    /// Generate a synthetic dataset as a .ts file.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Default)]
pub struct CausalFlags {
    /// Bins per series for transfer entropy [default: 8]
    #[arg(long)]
    pub bins: Option<usize>,
    /// Binning strategy [default: equal-frequency]
    #[arg(long, value_enum)]
    pub bin_strategy: Option<BinStrategy>,
    /// Target history length [default: 1]
    #[arg(long)]
    pub k: Option<usize>,
    /// Source history length [default: 1]
    #[arg(long)]
    pub l: Option<usize>,
    /// Edge threshold on the causal score; accepts inf [default: 0]
    #[arg(long, allow_negative_numbers = true)]
    pub threshold: Option<f64>,
    /// One graph per sample or the dataset-mean graph [default: sample]
    #[arg(long, value_enum)]
    pub graph_scope: Option<GraphScope>,
}

impl CausalFlags {
    fn apply(&self, cfg: &mut CausalConfig) {
        if let Some(b) = self.bins {
            cfg.binning.n_bins = b;
        }
        if let Some(s) = self.bin_strategy {
            cfg.binning.strategy = s;
        }
        if let Some(k) = self.k {
            cfg.order.k = k;
        }
        if let Some(l) = self.l {
            cfg.order.l = l;
        }
        if let Some(t) = self.threshold {
            cfg.threshold = t;
        }
        if let Some(s) = self.graph_scope {
            cfg.scope = s;
        }
    }
}

#[derive(Args, Debug, Default)]
pub struct ParseFlags {
    /// Missing values: interpolate or reject [default: interp]
    #[arg(long, value_enum)]
    pub missing: Option<MissingPolicy>,
    /// Unequal lengths: pad to the longest or truncate to the shortest [default: pad]
    #[arg(long, value_enum)]
    pub length_policy: Option<LengthPolicy>,
}

impl ParseFlags {
    fn apply(&self, opts: &mut ParseOptions) {
        if let Some(m) = self.missing {
            opts.missing = m;
        }
        if let Some(p) = self.length_policy {
            opts.length_policy = p;
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training split (.ts or .csv)
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Test split (.ts or .csv)
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// JSON run config; omitted fields take their defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for initialization and shuffling [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// [default: 50]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 16]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam step size [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Input normalization [default: z]
    #[arg(long, value_enum)]
    pub norm: Option<Norm>,
    /// Edges a node aggregates over [default: in]
    #[arg(long, value_enum)]
    pub gnn_direction: Option<Direction>,
    #[command(flatten)]
    pub causal: CausalFlags,
    #[command(flatten)]
    pub parse: ParseFlags,
}

#[derive(Args, Debug)]
pub struct GraphArgs {
    /// Dataset to read the sample from
    #[arg(long, required_unless_present = "from", conflicts_with = "from")]
    pub data: Option<PathBuf>,
    /// Re-export a previously written JSON matrix instead
    #[arg(long)]
    pub from: Option<PathBuf>,
    /// Sample index
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    #[arg(long, value_enum, default_value_t = GraphFormat::Dot)]
    pub format: GraphFormat,
    /// Output file; stdout when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub causal: CausalFlags,
    #[command(flatten)]
    pub parse: ParseFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub parse: ParseFlags,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    /// Output CSV; stdout when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub parse: ParseFlags,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// JSON synth config; the planted four-class layout when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Samples per class for the default layout
    #[arg(long, default_value_t = 10)]
    pub samples_per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output .ts file
    #[arg(long)]
    pub out: PathBuf,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn input(e: impl std::fmt::Display) -> Self {
        Failure {
            code: 1,
            message: e.to_string(),
        }
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        Failure {
            code: 2,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Worker count from `CALONET_THREADS`, at least 1.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a, out, err),
        Command::Graph(a) => cmd_graph(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Explain(a) => cmd_explain(&a, out),
        Command::Synth(a) => cmd_synth(&a, out),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn usage(sub: &str) -> String {
    let mut cmd = Cli::command();
    cmd.find_subcommand_mut(sub)
        .map(|c| c.render_usage().to_string())
        .unwrap_or_default()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::input(Error::io(path, e)))?;
    serde_json::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| Failure::runtime(Error::io(path, e)))
}

fn emit(out: &mut dyn Write, text: &str) -> CliResult<()> {
    out.write_all(text.as_bytes()).map_err(Failure::runtime)
}

/// Merges the config file and flags into one resolved run config.
pub fn resolve_train_config(args: &TrainArgs) -> CliResult<RunConfig> {
    let mut cfg: RunConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if args.train.is_some() {
        cfg.train = args.train.clone();
    }
    if args.test.is_some() {
        cfg.test = args.test.clone();
    }
    if args.out.is_some() {
        cfg.out = args.out.clone();
    }
    if let Some(s) = args.seed {
        cfg.training.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.training.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.training.batch_size = b;
    }
    if let Some(lr) = args.lr {
        cfg.training.lr = lr;
    }
    if let Some(n) = args.norm {
        cfg.norm = n;
    }
    if let Some(d) = args.gnn_direction {
        cfg.gin.direction = d;
    }
    args.causal.apply(&mut cfg.training.causal);
    args.parse.apply(&mut cfg.parse);
    cfg.training.validate().map_err(Failure::input)?;
    cfg.gin.validate().map_err(Failure::input)?;
    Ok(cfg)
}

/// Brings a raw split to a model's classes and length.
fn conform(ds: Dataset, class_names: &[String], length: usize) -> CliResult<Dataset> {
    let ds = if class_names.is_empty() {
        ds
    } else {
        ds.align_labels(class_names).map_err(Failure::input)?
    };
    Ok(if ds.length == length { ds } else { ds.resized(length) })
}

fn cmd_train(args: &TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let mut cfg = resolve_train_config(args)?;
    let missing = |flag: &str| Failure::input(format!("{flag} is required\n\n{}", usage("train")));
    let train_path = cfg.train.clone().ok_or_else(|| missing("--train"))?;
    let test_path = cfg.test.clone().ok_or_else(|| missing("--test"))?;
    let out_dir = cfg.out.clone().ok_or_else(|| missing("--out"))?;

    let train_raw = load(&train_path, &cfg.parse).map_err(Failure::input)?;
    let test_raw = load(&test_path, &cfg.parse).map_err(Failure::input)?;
    let test_raw = conform(test_raw, &train_raw.class_names, train_raw.length)?;
    if test_raw.n_dims != train_raw.n_dims {
        return Err(Failure::input(format!(
            "train has {} dimensions, test has {}",
            train_raw.n_dims, test_raw.n_dims
        )));
    }
    cfg.encoder = cfg.encoder.resolved(train_raw.n_dims);
    cfg.encoder.validate(train_raw.n_dims).map_err(Failure::input)?;

    let (train_set, test_set, stats) = match cfg.norm {
        Norm::Z => {
            let stats = NormalizationStats::fit(&train_raw).map_err(Failure::input)?;
            (stats.apply(&train_raw), stats.apply(&test_raw), Some(stats))
        }
        Norm::None => (train_raw, test_raw, None),
    };

    let mut training = cfg.training.clone();
    training.threads = threads_from_env();
    let _ = writeln!(
        err,
        "training on {} samples ({} dims, length {}, {} classes) for {} epochs",
        train_set.len(),
        train_set.n_dims,
        train_set.length,
        train_set.n_classes,
        training.epochs
    );
    let (mut model, report) =
        train(&train_set, &test_set, &cfg.encoder, &cfg.gin, &training).map_err(Failure::runtime)?;
    model.set_normalization(stats);

    std::fs::create_dir_all(&out_dir).map_err(|e| Failure::runtime(Error::io(&out_dir, e)))?;
    model.save(&out_dir.join("model.json")).map_err(Failure::runtime)?;
    write_file(&out_dir.join("report.csv"), &report.to_csv())?;
    let resolved = serde_json::to_string_pretty(&cfg).map_err(Failure::runtime)? + "\n";
    write_file(&out_dir.join("config.resolved.json"), &resolved)?;

    let last = report.epochs.last().expect("at least one epoch");
    emit(
        out,
        &format!(
            "accuracy={}\ntrain_accuracy={}\ntest_loss={}\nepochs={}\n",
            last.test_acc,
            last.train_acc,
            last.test_loss,
            report.epochs.len()
        ),
    )
}

fn cmd_graph(args: &GraphArgs, out: &mut dyn Write) -> CliResult<()> {
    let matrix = match (&args.data, &args.from) {
        (_, Some(from)) => {
            let text = std::fs::read_to_string(from).map_err(|e| Failure::input(Error::io(from, e)))?;
            CausalMatrix::from_json(&text).map_err(Failure::input)?
        }
        (Some(data), None) => {
            let mut opts = ParseOptions::default();
            args.parse.apply(&mut opts);
            let mut causal = CausalConfig::default();
            args.causal.apply(&mut causal);
            causal.validate().map_err(Failure::input)?;
            let ds = load(data, &opts).map_err(Failure::input)?;
            let sample = ds.samples.get(args.sample).ok_or_else(|| {
                Failure::input(format!("sample {} out of range (dataset has {})", args.sample, ds.len()))
            })?;
            if ds.length < causal.order.min_len() || ds.n_dims < 2 {
                return Err(Failure::input(format!(
                    "graph needs at least 2 dimensions and length {}",
                    causal.order.min_len()
                )));
            }
            build_causal_matrix(sample, causal.threshold, &causal.order, &causal.binning)
                .map_err(Failure::runtime)?
        }
        (None, None) => unreachable!("clap requires --data or --from"),
    };
    let text = export(&matrix, args.format).map_err(Failure::runtime)?;
    match &args.out {
        Some(path) => {
            write_file(path, &text)?;
            let graph = matrix.to_graph();
            emit(out, &format!("nodes={}\nedges={}\n", graph.n, graph.edges.len()))
        }
        None => emit(out, &text),
    }
}

fn load_for_model(model: &CaLoNetModel, path: &Path, flags: &ParseFlags) -> CliResult<Dataset> {
    let mut opts = ParseOptions::default();
    flags.apply(&mut opts);
    let cfg = model.config();
    let raw = load(path, &opts).map_err(Failure::input)?;
    if raw.n_dims != cfg.n_dims {
        return Err(Failure::input(format!(
            "model expects {} dimensions, {} has {}",
            cfg.n_dims,
            path.display(),
            raw.n_dims
        )));
    }
    let ds = conform(raw, &cfg.class_names, cfg.length)?;
    cfg.check_dataset(&ds).map_err(Failure::input)?;
    Ok(model.prepare(&ds))
}

fn load_model(path: &Path) -> CliResult<CaLoNetModel> {
    CaLoNetModel::load(path).map_err(Failure::input)
}

fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let model = load_model(&args.model)?;
    let ds = load_for_model(&model, &args.data, &args.parse)?;
    let ev = evaluate(&model, &ds, threads_from_env()).map_err(Failure::runtime)?;
    emit(
        out,
        &format!("accuracy={}\nloss={}\nsamples={}\n", ev.accuracy, ev.loss, ds.len()),
    )
}

fn cmd_explain(args: &ExplainArgs, out: &mut dyn Write) -> CliResult<()> {
    let model = load_model(&args.model)?;
    let ds = load_for_model(&model, &args.data, &args.parse)?;
    let sample = ds.samples.get(args.sample).ok_or_else(|| {
        Failure::input(format!("sample {} out of range (dataset has {})", args.sample, ds.len()))
    })?;
    let matrix = model.causal_matrix(sample).map_err(Failure::runtime)?;
    let map = saliency(&model, sample, &matrix).map_err(Failure::runtime)?;
    let mut csv = String::new();
    for row in &map {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    match &args.out {
        Some(path) => {
            write_file(path, &csv)?;
            let predicted = model.predict(sample, &matrix).map_err(Failure::runtime)?;
            emit(
                out,
                &format!("predicted={predicted}\nrows={}\ncols={}\n", map.len(), sample.len()),
            )
        }
        None => emit(out, &csv),
    }
}

fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg: SynthConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::planted_four_class(args.samples_per_class),
    };
    cfg.validate().map_err(Failure::input)?;
    let synth = synth_causal(&cfg, args.seed).map_err(Failure::runtime)?;
    write_file(&args.out, &to_ts(&synth.dataset))?;
    emit(
        out,
        &format!(
            "samples={}\ndims={}\nlength={}\nclasses={}\n",
            synth.dataset.len(),
            synth.dataset.n_dims,
            synth.dataset.length,
            synth.dataset.n_classes
        ),
    )
}
