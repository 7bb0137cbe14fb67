//! Experiment driver behind the `ftl` binary.
//!
//! Every command reads one JSON [`ExperimentConfig`], rebuilds the prepared
//! train/test data from it (the pipeline is deterministic, so this is cheap
//! and avoids stale intermediate files), and writes its artifacts into the
//! output directory. Reports are `{"meta": ..., "results": ...}` documents;
//! only `meta` carries timestamps and durations.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{self, BaselineError, BaselineHyperparams, BaselineKind};
use crate::dataset_io::{self, BlobSpec, DataError, Dataset, ShareMode, SplitSpec};
use crate::federation::{self, FederationError, RoundConfig, RoundMode, SimulationConfig};
use crate::metrics::{self, MetricsError, MetricsReport};
use crate::neuralnet::{self, ComboNetConfig, NetError, Pooling, TrainParams};
use crate::preprocess::{
    self, PipelineContext, Prepared, PreprocessConfig, PreprocessError, PreprocessReport,
};
use crate::seed;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

pub const TRAIN_CSV: &str = "train.csv";
pub const TEST_CSV: &str = "test.csv";
pub const PREPROCESS_REPORT: &str = "preprocess_report.json";
pub const ROUNDS_LOG: &str = "rounds.jsonl";
pub const FINAL_WEIGHTS: &str = "final_weights.ftlw";
pub const FEDERATED_METRICS: &str = "federated_metrics.json";
pub const BASELINES_REPORT: &str = "baselines.json";
pub const EVALUATION_REPORT: &str = "evaluation.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 for configuration or input validation problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        let validation = match self {
            CliError::Config(_) => true,
            CliError::Data(e) | CliError::Preprocess(PreprocessError::Data(e)) => matches!(
                e,
                DataError::MissingFile(_)
                    | DataError::MissingLabelColumn(_)
                    | DataError::InvalidSplit(_)
                    | DataError::TooManyClients { .. }
            ),
            CliError::Net(e) => matches!(e, NetError::InvalidConfig(_)),
            CliError::Federation(FederationError::InvalidConfig(_)) => true,
            CliError::Baseline(BaselineError::InvalidHyperparameter(_)) => true,
            _ => false,
        };
        if validation {
            2
        } else {
            1
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Preprocess(_) => "preprocess",
            CliError::Net(_) => "model",
            CliError::Federation(_) => "federation",
            CliError::Baseline(_) => "baseline",
            CliError::Metrics(_) => "metrics",
            CliError::Io { .. } => "io",
            CliError::Json(_) => "json",
        }
    }

    /// Single-line JSON for stderr.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Csv {
        /// Relative paths resolve against the config file's directory.
        path: PathBuf,
        label_column: String,
    },
    SyntheticBlobs {
        #[serde(default = "default_blob_samples")]
        n_samples: usize,
        #[serde(default = "default_blob_features")]
        n_features: usize,
        #[serde(default = "default_blob_classes")]
        n_classes: usize,
        #[serde(default = "default_center_box")]
        center_box: f64,
        #[serde(default = "default_cluster_std")]
        cluster_std: f64,
    },
}

fn default_blob_samples() -> usize {
    BlobSpec::default().n_samples
}
fn default_blob_features() -> usize {
    BlobSpec::default().n_features
}
fn default_blob_classes() -> usize {
    BlobSpec::default().n_classes
}
fn default_center_box() -> f64 {
    BlobSpec::default().center_box
}
fn default_cluster_std() -> f64 {
    BlobSpec::default().cluster_std
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub test_fraction: f64,
    pub server_fraction: f64,
    pub n_clients: usize,
    pub client_shares: ShareMode,
}

impl Default for SplitSection {
    fn default() -> Self {
        let s = SplitSpec::default();
        Self {
            test_fraction: s.test_fraction,
            server_fraction: s.server_fraction,
            n_clients: s.n_clients,
            client_shares: s.client_shares,
        }
    }
}

/// Network shape without the data-dependent input width and class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub stem_channels: usize,
    pub residual_blocks: usize,
    pub kernel_size: usize,
    pub dense_hidden: Vec<usize>,
    pub pooling: Pooling,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = ComboNetConfig::new(1, 2);
        Self {
            stem_channels: c.stem_channels,
            residual_blocks: c.residual_blocks,
            kernel_size: c.kernel_size,
            dense_hidden: c.dense_hidden,
            pooling: c.pooling,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for BootstrapSection {
    fn default() -> Self {
        let t = TrainParams::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    pub mode: RoundMode,
    pub learning_rate: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub rounds: usize,
    pub tolerance: f64,
    pub parallel: bool,
}

impl Default for FederationSection {
    fn default() -> Self {
        let r = RoundConfig::default();
        Self {
            mode: r.mode,
            learning_rate: r.learning_rate,
            local_epochs: r.local_epochs,
            batch_size: r.batch_size,
            rounds: 2,
            tolerance: 1e-6,
            parallel: r.parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub kinds: Vec<BaselineKind>,
    #[serde(flatten)]
    pub hyperparams: BaselineHyperparams,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            kinds: BaselineKind::ALL.to_vec(),
            hyperparams: BaselineHyperparams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub bootstrap: BootstrapSection,
    #[serde(default)]
    pub federation: FederationSection,
    #[serde(default)]
    pub baselines: BaselineSection,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    /// Reads a config and anchors relative dataset and output paths at the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let DatasetSource::Csv { path, .. } = &mut cfg.dataset {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        if let Some(out) = &mut cfg.output_dir {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        Ok(cfg)
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            test_fraction: self.split.test_fraction,
            server_fraction: self.split.server_fraction,
            n_clients: self.split.n_clients,
            seed: self.seed,
            client_shares: self.split.client_shares,
        }
    }

    pub fn net_config(&self, input_dim: usize, n_classes: usize) -> ComboNetConfig {
        ComboNetConfig {
            input_dim,
            stem_channels: self.model.stem_channels,
            residual_blocks: self.model.residual_blocks,
            kernel_size: self.model.kernel_size,
            dense_hidden: self.model.dense_hidden.clone(),
            n_classes,
            pooling: self.model.pooling,
            init_seed: self.seed,
        }
    }

    pub fn simulation_config(&self, net: ComboNetConfig) -> SimulationConfig {
        let f = &self.federation;
        SimulationConfig {
            net,
            bootstrap: TrainParams {
                epochs: self.bootstrap.epochs,
                batch_size: self.bootstrap.batch_size,
                learning_rate: self.bootstrap.learning_rate,
                shuffle_seed: seed::derive(self.seed, &[seed::stream::BOOTSTRAP]),
            },
            round: RoundConfig {
                mode: f.mode,
                learning_rate: f.learning_rate,
                local_epochs: f.local_epochs,
                batch_size: f.batch_size,
                seed: self.seed,
                parallel: f.parallel,
            },
            rounds: f.rounds,
            tolerance: f.tolerance,
        }
    }
}

/// Loads and prepares the configured dataset.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let split = cfg.split_spec();
    split.validate()?;
    match &cfg.dataset {
        DatasetSource::Csv { path, label_column } => {
            let table = dataset_io::load_csv(path, label_column)?;
            Ok(preprocess::prepare_table(&table, &cfg.preprocess, &split)?)
        }
        &DatasetSource::SyntheticBlobs {
            n_samples,
            n_features,
            n_classes,
            center_box,
            cluster_std,
        } => {
            let data = dataset_io::gaussian_blobs(&BlobSpec {
                n_samples,
                n_features,
                n_classes,
                center_box,
                cluster_std,
                seed: cfg.seed,
            })?;
            let ctx = PipelineContext::for_dataset(&data);
            Ok(preprocess::prepare_dataset(
                &data,
                &cfg.preprocess,
                &split,
                ctx,
            )?)
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Meta {
    pub command: &'static str,
    pub crate_version: &'static str,
    pub started_unix_ms: u128,
    pub duration_ms: u128,
    pub threads: usize,
}

struct Clock {
    command: &'static str,
    wall: SystemTime,
    start: Instant,
}

impl Clock {
    fn start(command: &'static str) -> Self {
        Self {
            command,
            wall: SystemTime::now(),
            start: Instant::now(),
        }
    }

    fn meta(&self) -> Meta {
        Meta {
            command: self.command,
            crate_version: env!("CARGO_PKG_VERSION"),
            started_unix_ms: self
                .wall
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0),
            duration_ms: self.start.elapsed().as_millis(),
            threads: rayon::current_num_threads(),
        }
    }
}

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    meta: Meta,
    results: &'a T,
}

fn write_report<T: Serialize>(path: &Path, clock: &Clock, results: &T) -> Result<()> {
    let report = Report {
        meta: clock.meta(),
        results,
    };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(format!("cannot write {}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(format!("cannot create {}", dir.display())))
}

fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let file =
        fs::File::create(path).map_err(io_err(format!("cannot create {}", path.display())))?;
    data.write_csv(std::io::BufWriter::new(file))?;
    Ok(())
}

pub fn cmd_preprocess(cfg: &ExperimentConfig, out: &Path) -> Result<PreprocessReport> {
    let clock = Clock::start("preprocess");
    let prepared = prepare(cfg)?;
    ensure_dir(out)?;
    write_dataset(&out.join(TRAIN_CSV), &prepared.train)?;
    write_dataset(&out.join(TEST_CSV), &prepared.test)?;
    write_report(&out.join(PREPROCESS_REPORT), &clock, &prepared.report)?;
    Ok(prepared.report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedResults {
    pub model: ComboNetConfig,
    pub fingerprint: u64,
    pub num_parameters: usize,
    pub server_rows: usize,
    pub client_rows: Vec<usize>,
    pub bootstrap_losses: Vec<f64>,
    pub rounds_completed: usize,
    /// Global model on the test split after the last round.
    pub final_metrics: MetricsReport,
}

pub fn cmd_train_federated(cfg: &ExperimentConfig, out: &Path) -> Result<FederatedResults> {
    let clock = Clock::start("train-federated");
    let prepared = prepare(cfg)?;
    let split = cfg.split_spec();
    let parts = dataset_io::partition_client_server(&prepared.train, &split)?;
    let shares = dataset_io::partition_among_clients(
        &parts.second,
        split.n_clients,
        split.seed,
        split.client_shares,
    )?;
    let net = cfg.net_config(prepared.train.n_features(), prepared.train.n_classes());
    net.validate()?;
    let sim = cfg.simulation_config(net.clone());
    let client_rows = shares.iter().map(Dataset::n_samples).collect();
    let outcome = federation::run_simulation(&sim, &parts.first, shares, &prepared.test)?;

    ensure_dir(out)?;
    let mut lines = String::new();
    for log in &outcome.logs {
        lines.push_str(&serde_json::to_string(log)?);
        lines.push('\n');
    }
    let rounds_path = out.join(ROUNDS_LOG);
    fs::write(&rounds_path, lines)
        .map_err(io_err(format!("cannot write {}", rounds_path.display())))?;
    let weights_path = out.join(FINAL_WEIGHTS);
    fs::write(
        &weights_path,
        neuralnet::serialize_weights(&outcome.final_weights),
    )
    .map_err(io_err(format!("cannot write {}", weights_path.display())))?;

    let last = outcome.logs.last().expect("bootstrap log always present");
    let results = FederatedResults {
        fingerprint: outcome.final_weights.fingerprint,
        num_parameters: outcome.final_weights.num_parameters(),
        model: net,
        server_rows: parts.first.n_samples(),
        client_rows,
        bootstrap_losses: outcome.bootstrap_losses,
        rounds_completed: last.round,
        final_metrics: last.server.clone(),
    };
    write_report(&out.join(FEDERATED_METRICS), &clock, &results)?;
    Ok(results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

impl ComparisonRow {
    fn new(model: &str, r: &MetricsReport) -> Self {
        Self {
            model: model.to_owned(),
            accuracy: r.accuracy,
            macro_precision: r.macro_precision,
            macro_recall: r.macro_recall,
            macro_f1: r.macro_f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResults {
    pub reports: BTreeMap<BaselineKind, MetricsReport>,
    pub comparison: Vec<ComparisonRow>,
}

fn read_federated_results(path: &Path) -> Result<Option<FederatedResults>> {
    if !path.exists() {
        return Ok(None);
    }
    let text =
        fs::read_to_string(path).map_err(io_err(format!("cannot read {}", path.display())))?;
    let mut doc: serde_json::Value = serde_json::from_str(&text)?;
    Ok(Some(serde_json::from_value(doc["results"].take())?))
}

pub fn cmd_train_baselines(cfg: &ExperimentConfig, out: &Path) -> Result<BaselineResults> {
    let clock = Clock::start("train-baselines");
    let prepared = prepare(cfg)?;
    let n_classes = prepared.train.n_classes();
    let mut reports = BTreeMap::new();
    let mut comparison = Vec::new();
    for &kind in &cfg.baselines.kinds {
        if reports.contains_key(&kind) {
            continue;
        }
        let model =
            baselines::fit_baseline(kind, &prepared.train, &cfg.baselines.hyperparams, cfg.seed)?;
        let predicted = baselines::predict_baseline(&model, prepared.test.features())?;
        let report = metrics::evaluate(prepared.test.labels(), &predicted, n_classes)?;
        log::info!("{}: {}", kind.as_str(), report.percent_summary());
        comparison.push(ComparisonRow::new(kind.as_str(), &report));
        reports.insert(kind, report);
    }
    if let Some(fed) = read_federated_results(&out.join(FEDERATED_METRICS))? {
        comparison.push(ComparisonRow::new("ftl", &fed.final_metrics));
    }
    let results = BaselineResults {
        reports,
        comparison,
    };
    ensure_dir(out)?;
    write_report(&out.join(BASELINES_REPORT), &clock, &results)?;
    Ok(results)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Train,
    #[default]
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResults {
    pub split: EvalSplit,
    pub fingerprint: u64,
    pub metrics: MetricsReport,
}

pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    weights: &Path,
    split: EvalSplit,
    out: &Path,
) -> Result<EvaluationResults> {
    let clock = Clock::start("evaluate");
    let prepared = prepare(cfg)?;
    let net = cfg.net_config(prepared.train.n_features(), prepared.train.n_classes());
    let bytes = fs::read(weights).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            CliError::Data(DataError::MissingFile(weights.to_path_buf()))
        }
        _ => CliError::Io {
            context: format!("cannot read {}", weights.display()),
            source: e,
        },
    })?;
    let model = neuralnet::deserialize_weights(&bytes, &net)?;
    let data = match split {
        EvalSplit::Train => &prepared.train,
        EvalSplit::Test => &prepared.test,
    };
    let results = EvaluationResults {
        split,
        fingerprint: model.fingerprint,
        metrics: federation::evaluate_weights(&net, &model, data)?,
    };
    ensure_dir(out)?;
    write_report(&out.join(EVALUATION_REPORT), &clock, &results)?;
    Ok(results)
}

#[derive(Debug, Parser)]
#[command(
    name = "ftl",
    version,
    about = "Federated transfer learning simulator for IIoT intrusion detection"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to the config's output_dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Clean, encode, select, split and scale; write train/test CSVs and a report.
    Preprocess(CommonArgs),
    /// Bootstrap the server model and run federated rounds.
    TrainFederated(CommonArgs),
    /// Fit the classical baselines and write a comparison table.
    TrainBaselines(CommonArgs),
    /// Score a saved weight file on the train or test split.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Weight file; defaults to final_weights.ftlw in the output directory.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = EvalSplit::Test)]
        split: EvalSplit,
    },
}

fn resolve(common: &CommonArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| {
            CliError::Config("no output directory: pass --out or set output_dir".into())
        })?;
    Ok((cfg, out))
}

/// Runs one parsed command, printing a short summary to stdout.
pub fn run(cli: Cli) -> Result<()> {
    let stdout = std::io::stdout();
    let mut so = stdout.lock();
    let say = |so: &mut std::io::StdoutLock<'_>, line: String| {
        let _ = writeln!(so, "{line}");
    };
    match cli.command {
        Command::Preprocess(common) => {
            let (cfg, out) = resolve(&common)?;
            let r = cmd_preprocess(&cfg, &out)?;
            say(
                &mut so,
                format!(
                    "preprocess: {} train / {} test rows, {} features selected",
                    r.train_rows,
                    r.test_rows,
                    r.selected_features.len()
                ),
            );
        }
        Command::TrainFederated(common) => {
            let (cfg, out) = resolve(&common)?;
            let r = cmd_train_federated(&cfg, &out)?;
            say(
                &mut so,
                format!(
                    "train-federated: {} rounds, {}",
                    r.rounds_completed,
                    r.final_metrics.percent_summary()
                ),
            );
        }
        Command::TrainBaselines(common) => {
            let (cfg, out) = resolve(&common)?;
            let r = cmd_train_baselines(&cfg, &out)?;
            for row in &r.comparison {
                say(
                    &mut so,
                    format!(
                        "{:>4}: A={:.4} MAF={:.4}",
                        row.model, row.accuracy, row.macro_f1
                    ),
                );
            }
        }
        Command::Evaluate {
            common,
            weights,
            split,
        } => {
            let (cfg, out) = resolve(&common)?;
            let weights = weights.unwrap_or_else(|| out.join(FINAL_WEIGHTS));
            let r = cmd_evaluate(&cfg, &weights, split, &out)?;
            say(
                &mut so,
                format!("evaluate ({:?}): {}", r.split, r.metrics.percent_summary()),
            );
        }
    }
    Ok(())
}
