use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use xmodal::exec::Execution;
use xmodal::index::{build_index_with, load_index, query_by_id, query_vectors, save_index, Modality};
use xmodal::ingest::{ingest_manifest, read_embeddings, split_corpus, write_embeddings, SplitSpec};
use xmodal::jsonl::write_jsonl;
use xmodal::losses::LossWeights;
use xmodal::metrics::{full_report, render_table, Direction, ReportOptions};
use xmodal::model::{load_params, save_params};
use xmodal::numerics::pca_project_2d;
use xmodal::optim::OptimConfig;
use xmodal::synth::{generate, SynthConfig};
use xmodal::trainer::{train, TrainConfig};
use xmodal::tuner::{tune, SearchSpace, Strategy, TrainingObjective, TuneOptions};
use xmodal::{EmbeddingSet, Label, Matrix, ModelParams};

#[derive(Debug, Parser)]
#[command(
    name = "xmodal",
    version,
    about = "Cross-modal retrieval toolkit for paired image and report embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse the reports listed in a manifest into a study corpus
    Ingest(IngestArgs),
    /// Split an embedding set into train, validation and test sets
    Split(SplitArgs),
    /// Fine-tune the adapters and classification head
    Train(TrainArgs),
    /// Search the loss weights
    Tune(TuneArgs),
    /// Build a fused retrieval index
    IndexBuild(IndexBuildArgs),
    /// Retrieve the nearest studies for one query
    Query(QueryArgs),
    /// Print retrieval metrics for an embedding set
    Eval(EvalArgs),
    /// Serve an index over HTTP
    Serve(ServeArgs),
    /// Export a two-dimensional PCA projection of the embeddings
    Project2d(ProjectArgs),
    /// Generate a seeded synthetic embedding set
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct IngestArgs {
    /// Line-delimited JSON manifest of {study_id, image_path, report_path}
    #[arg(long)]
    manifest: PathBuf,
    /// Output study corpus (line-delimited JSON)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SplitArgs {
    /// Input embedding set (CMXE)
    #[arg(long)]
    input: PathBuf,
    /// Directory receiving train.cmxe, val.cmxe and test.cmxe
    #[arg(long)]
    out_dir: PathBuf,
    /// Test records held out per class
    #[arg(long, default_value_t = 200)]
    test_per_class: usize,
    /// Fraction of the remaining records used for validation
    #[arg(long, default_value = "0.1")]
    val_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Args)]
struct Hyper {
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    /// Learning rate of the image and text adapters
    #[arg(long, default_value = "1e-5")]
    lr_backbone: f64,
    /// Learning rate of the classification head
    #[arg(long, default_value = "1e-4")]
    lr_head: f64,
    #[arg(long, default_value = "0.01")]
    weight_decay: f64,
    /// Fraction of all steps spent in linear warmup
    #[arg(long, default_value = "0.1")]
    warmup_frac: f64,
    /// Weight of the binary cross-entropy term
    #[arg(long, default_value = "0.69")]
    lambda1: f64,
    /// Weight of the supervised contrastive term
    #[arg(long, default_value = "1.97")]
    lambda2: f64,
    /// Weight of the image-text contrastive term
    #[arg(long, default_value = "0.46")]
    lambda3: f64,
    /// Contrastive temperature
    #[arg(long, default_value = "0.07")]
    tau: f64,
    #[arg(long, default_value = "0.1")]
    dropout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Hyper {
    fn config(&self, log_path: Option<PathBuf>) -> xmodal::Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            weights: LossWeights::new(self.lambda1, self.lambda2, self.lambda3, self.tau)?,
            dropout_p: self.dropout,
            seed: self.seed,
            optim: OptimConfig {
                lr_backbone: self.lr_backbone,
                lr_head: self.lr_head,
                weight_decay: self.weight_decay,
                ..OptimConfig::default()
            },
            warmup_fraction: self.warmup_frac,
            log_path,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training embedding set (CMXE)
    #[arg(long)]
    train: PathBuf,
    /// Validation embedding set (CMXE); required unless --epochs 0
    #[arg(long)]
    val: Option<PathBuf>,
    /// Output model checkpoint (CMXM)
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch log (line-delimited JSON)
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StrategyArg {
    Quasirandom,
    Surrogate,
}

#[derive(Debug, Args)]
struct TuneArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Trial ledger (line-delimited JSON)
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "surrogate")]
    strategy: StrategyArg,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 5)]
    epochs_per_trial: usize,
    /// Retrain with the best weights for --epochs and save the checkpoint here
    #[arg(long)]
    model_out: Option<PathBuf>,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Debug, Args)]
struct IndexBuildArgs {
    /// Embedding set to index (CMXE)
    #[arg(long)]
    embeddings: PathBuf,
    /// Model checkpoint (CMXM); without it the raw embeddings are fused
    #[arg(long)]
    model: Option<PathBuf>,
    /// Output index (CMXI)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModalityArg {
    Image,
    Text,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Image => Modality::Image,
            ModalityArg::Text => Modality::Text,
        }
    }
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[arg(long)]
    index: PathBuf,
    /// Embedding set holding the query study (needed with --id)
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Study id whose embedding is the query
    #[arg(long, conflicts_with = "vector", required_unless_present = "vector")]
    id: Option<String>,
    /// Comma-separated query vector
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    vector: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "image")]
    modality: ModalityArg,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Skip the query study itself
    #[arg(long)]
    exclude_self: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DirectionArg {
    I2t,
    T2i,
    Both,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Query embedding set (CMXE); also indexed unless --index is given
    #[arg(long)]
    embeddings: PathBuf,
    /// Fine-tuned model (CMXM); adds a column next to the pretrained baseline
    #[arg(long)]
    model: Option<PathBuf>,
    /// Prebuilt index for the fine-tuned column
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "both")]
    direction: DirectionArg,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,10")]
    ks: Vec<usize>,
    /// Skip each query's own study
    #[arg(long)]
    exclude_self: bool,
    /// Reports as line-delimited JSON
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    index: PathBuf,
    /// Embedding set enabling study-id queries
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SourceArg {
    Fused,
    Image,
    Text,
}

#[derive(Debug, Args)]
struct ProjectArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "fused")]
    source: SourceArg,
    /// Output points (line-delimited JSON)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Distance of each class mean from the boundary, in standard deviations
    #[arg(long, default_value = "3")]
    margin: f64,
    #[arg(long, default_value = "1")]
    sigma: f64,
    /// Per-modality noise standard deviation
    #[arg(long, default_value = "0.3")]
    noise: f64,
    #[arg(long, default_value = "0.4")]
    normal_frac: f64,
    /// Use one vector for both modalities
    #[arg(long)]
    identical: bool,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<xmodal::Error> for Failure {
    fn from(e: xmodal::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<xmodal_service::ServiceError> for Failure {
    fn from(e: xmodal_service::ServiceError) -> Self {
        Failure::Data(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn load_model(path: Option<&Path>) -> xmodal::Result<Option<ModelParams>> {
    path.map(load_params).transpose()
}

fn print_jsonl<T: Serialize>(items: &[T]) -> xmodal::Result<()> {
    let mut out = std::io::stdout().lock();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        let _ = writeln!(out);
    }
    Ok(())
}

fn run_ingest(a: IngestArgs) -> Outcome {
    let results = ingest_manifest(&a.manifest, Execution::default())?;
    let mut corpus = Vec::new();
    for (id, r) in results {
        match r {
            Ok(rec) => corpus.push(rec),
            Err(e) => log::warn!("skipping study {id}: {e}"),
        }
    }
    if corpus.is_empty() {
        return Err(Failure::Data("no study in the manifest could be parsed".into()));
    }
    write_jsonl(&a.out, &corpus)?;
    eprintln!("ingested {} studies", corpus.len());
    Ok(())
}

fn run_split(a: SplitArgs) -> Outcome {
    let set = read_embeddings(&a.input)?;
    let spec = SplitSpec {
        test_per_class: a.test_per_class,
        val_fraction: a.val_frac,
        seed: a.seed,
    };
    let split = split_corpus(&set, &spec)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| xmodal::Error::io(&a.out_dir, e))?;
    for (name, part) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        write_embeddings(part, &a.out_dir.join(format!("{name}.cmxe")))?;
        eprintln!("{name}: {} records", part.len());
    }
    Ok(())
}

fn run_train(a: TrainArgs) -> Outcome {
    let cfg = a.hyper.config(a.log.clone())?;
    let data = read_embeddings(&a.train)?;
    let val = match &a.val {
        Some(p) => read_embeddings(p)?,
        None if cfg.epochs == 0 => EmbeddingSet::new(data.dim(), Vec::new())?,
        None => return Err(Failure::Usage("--val is required when --epochs is positive".into())),
    };
    let out = train(&data, &val, &cfg)?;
    save_params(&out.params, &a.out)?;
    if let Some(last) = out.logs.last() {
        eprintln!(
            "epoch {}: train loss {:.5}, val accuracy {:.3}",
            last.epoch, last.train.total, last.val.accuracy
        );
    }
    Ok(())
}

fn run_tune(a: TuneArgs) -> Outcome {
    let base = a.hyper.config(None)?;
    let data = read_embeddings(&a.train)?;
    let val = read_embeddings(&a.val)?;
    let objective = TrainingObjective {
        data: &data,
        val: &val,
        base: base.clone(),
        epochs_per_trial: a.epochs_per_trial,
    };
    let space = SearchSpace {
        trials: a.trials,
        ..SearchSpace::default()
    };
    let opts = TuneOptions {
        strategy: match a.strategy {
            StrategyArg::Quasirandom => Strategy::Quasirandom,
            StrategyArg::Surrogate => Strategy::Surrogate,
        },
        seed: a.hyper.seed,
        tau: a.hyper.tau,
        ..TuneOptions::default()
    };
    let outcome = tune(&objective, &space, &opts, Execution::default())?;
    write_jsonl(&a.out, &outcome.trials)?;
    let w = outcome.best.weights;
    println!(
        "best trial {}: lambda1 {:.4} lambda2 {:.4} lambda3 {:.4} objective {:.4}",
        outcome.best.trial,
        w.lambda1,
        w.lambda2,
        w.lambda3,
        outcome.best.objective.unwrap_or(f64::NAN)
    );
    if let Some(path) = &a.model_out {
        let cfg = TrainConfig { weights: w, ..base };
        save_params(&train(&data, &val, &cfg)?.params, path)?;
    }
    Ok(())
}

fn run_index_build(a: IndexBuildArgs) -> Outcome {
    let set = read_embeddings(&a.embeddings)?;
    let params = load_model(a.model.as_deref())?;
    let index = build_index_with(params.as_ref(), &set, Execution::default())?;
    save_index(&index, &a.out)?;
    eprintln!("indexed {} studies of dimension {}", index.len(), index.dim());
    Ok(())
}

#[derive(Serialize)]
struct HitLine<'a> {
    rank: usize,
    study_id: &'a str,
    label: &'static str,
    score: f64,
}

fn run_query(a: QueryArgs) -> Outcome {
    let index = load_index(&a.index)?;
    let params = load_model(a.model.as_deref())?;
    let result = match (&a.id, &a.vector) {
        (Some(id), _) => {
            let path = a
                .embeddings
                .as_ref()
                .ok_or_else(|| Failure::Usage("--id needs --embeddings".into()))?;
            let set = read_embeddings(path)?;
            query_by_id(
                &index,
                &set,
                params.as_ref(),
                id,
                a.modality.into(),
                a.k,
                a.exclude_self,
            )?
        }
        (None, Some(v)) => index.search(v, a.k)?,
        (None, None) => return Err(Failure::Usage("one of --id or --vector is required".into())),
    };
    let lines: Vec<HitLine> = result
        .hits
        .iter()
        .enumerate()
        .map(|(i, h)| HitLine {
            rank: i + 1,
            study_id: &h.study_id,
            label: Label::name(h.label),
            score: h.score,
        })
        .collect();
    print_jsonl(&lines)?;
    Ok(())
}

fn run_eval(a: EvalArgs) -> Outcome {
    let set = read_embeddings(&a.embeddings)?;
    let params = load_model(a.model.as_deref())?;
    let exec = Execution::default();
    let opts = ReportOptions {
        ks: a.ks.clone(),
        exclude_self: a.exclude_self,
    };
    let baseline = build_index_with(None, &set, exec)?;
    let tuned = match (&a.index, &params) {
        (Some(p), _) => Some(load_index(p)?),
        (None, Some(p)) => Some(build_index_with(Some(p), &set, exec)?),
        (None, None) => None,
    };
    let directions = match a.direction {
        DirectionArg::I2t => vec![Direction::I2t],
        DirectionArg::T2i => vec![Direction::T2i],
        DirectionArg::Both => vec![Direction::I2t, Direction::T2i],
    };
    let mut all = Vec::new();
    let mut out = std::io::stdout().lock();
    for direction in directions {
        let base = full_report(&baseline, &set, None, direction, &opts, exec)?;
        let mut columns = vec![("Pretrained".to_string(), base)];
        if let Some(index) = &tuned {
            let report = full_report(index, &set, params.as_ref(), direction, &opts, exec)?;
            columns.push(("Fine-tuned".to_string(), report));
        }
        let named: Vec<(&str, &xmodal::MetricsReport)> = columns.iter().map(|(n, r)| (n.as_str(), r)).collect();
        let _ = writeln!(out, "{}", render_table(&named));
        all.extend(
            columns
                .into_iter()
                .map(|(name, report)| serde_json::json!({"model": name, "report": report})),
        );
    }
    if let Some(path) = &a.out {
        write_jsonl(path, &all)?;
    }
    Ok(())
}

fn run_serve(a: ServeArgs) -> Outcome {
    let state = xmodal_service::AppState::load(&a.index, a.embeddings.as_deref(), a.model.as_deref())?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::Data(format!("cannot start runtime: {e}")))?;
    runtime.block_on(xmodal_service::serve(state, a.bind))?;
    Ok(())
}

#[derive(Serialize)]
struct Point<'a> {
    study_id: &'a str,
    label: &'static str,
    x: f64,
    y: f64,
}

fn run_project2d(a: ProjectArgs) -> Outcome {
    let set = read_embeddings(&a.embeddings)?;
    let params = load_model(a.model.as_deref())?;
    let rows: Matrix = match a.source {
        SourceArg::Image => query_vectors(params.as_ref(), &set, Modality::Image)?,
        SourceArg::Text => query_vectors(params.as_ref(), &set, Modality::Text)?,
        SourceArg::Fused => {
            let index = build_index_with(params.as_ref(), &set, Execution::default())?;
            let data = (0..index.len()).flat_map(|i| index.unit_vector(i).to_vec()).collect();
            Matrix::from_vec(index.len(), index.dim(), data)?
        }
    };
    let projected = pca_project_2d(&rows)?;
    let points: Vec<Point> = set
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| Point {
            study_id: &r.study_id,
            label: Label::name(r.label),
            x: projected[(i, 0)],
            y: projected[(i, 1)],
        })
        .collect();
    write_jsonl(&a.out, &points)?;
    Ok(())
}

fn run_synth(a: SynthArgs) -> Outcome {
    let set = generate(&SynthConfig {
        n: a.n,
        dim: a.dim,
        seed: a.seed,
        margin: a.margin,
        sigma: a.sigma,
        modality_noise: a.noise,
        normal_fraction: a.normal_frac,
        identical: a.identical,
    })?;
    write_embeddings(&set, &a.out)?;
    Ok(())
}

fn init_logging() {
    let level = std::env::var("XMODAL_LOG").unwrap_or_else(|_| "warn".into());
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match cli.command {
        Command::Ingest(a) => run_ingest(a),
        Command::Split(a) => run_split(a),
        Command::Train(a) => run_train(a),
        Command::Tune(a) => run_tune(a),
        Command::IndexBuild(a) => run_index_build(a),
        Command::Query(a) => run_query(a),
        Command::Eval(a) => run_eval(a),
        Command::Serve(a) => run_serve(a),
        Command::Project2d(a) => run_project2d(a),
        Command::Synth(a) => run_synth(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
