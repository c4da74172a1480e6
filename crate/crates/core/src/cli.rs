//! The `genbound` command-line harness: TOML experiment configs, dotted-key
//! overrides, and the five experiment commands writing CSV outputs with
//! manifest sidecars.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bounds::{self, BoundInputs, BoundReport, BoundVariant};
use crate::data::{self, CsvOptions, Dataset, Task};
use crate::error::{Error, Result};
use crate::estimators;
use crate::models::{self, LinearNet, MlpClassifier, Model, ModelKind, TwoLayerReLU};
use crate::numerics::{ParamVector, SeededStream};
use crate::training::{self, Instrumentation, LrSchedule, Scheme, Seeds, TrainConfig, TrainTrace};

#[derive(Debug, Parser)]
#[command(name = "genbound", version, about = "Instrumented SGD and generalization bounds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/test CSVs from the configured generator.
    GenData(CommonArgs),
    /// Train with per-step instrumentation; writes step/epoch CSVs and checkpoints.
    Train(CommonArgs),
    /// Evaluate bound variants on a trace directory written by `train`.
    Bound(CommonArgs),
    /// Per-epoch trajectory terms of the dispersion bound and the sensitivity baseline.
    CompareTrajectory(CommonArgs),
    /// Learning-rate by batch-size grid of trajectory and flatness terms.
    Sweep(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config value, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long, env = "GENBOUND_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    GenData,
    Train,
    Bound,
    CompareTrajectory,
    Sweep,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::GenData => "gen-data",
            ExperimentKind::Train => "train",
            ExperimentKind::Bound => "bound",
            ExperimentKind::CompareTrajectory => "compare-trajectory",
            ExperimentKind::Sweep => "sweep",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    TeacherStudent,
    GaussianClusters,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub source: DataSource,
    pub d0: usize,
    #[serde(default)]
    pub n_train: usize,
    #[serde(default)]
    pub n_test: usize,
    #[serde(default = "default_teacher_width")]
    pub teacher_width: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Within-cluster noise std of the Gaussian-cluster generator.
    #[serde(default = "default_separation")]
    pub cluster_std: f64,
    /// Fraction of training labels replaced (classification only).
    #[serde(default)]
    pub label_noise: f64,
    #[serde(default)]
    pub train_path: Option<PathBuf>,
    #[serde(default)]
    pub test_path: Option<PathBuf>,
    #[serde(default)]
    pub task: Option<Task>,
    #[serde(default)]
    pub has_header: bool,
    #[serde(default)]
    pub normalize: bool,
    /// Generator seed; derived from the master seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_teacher_width() -> usize {
    100
}
fn default_classes() -> usize {
    10
}
fn default_separation() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Hidden width of the two-layer ReLU network.
    #[serde(default = "default_width")]
    pub width: usize,
    /// Hidden layer widths of the MLP classifier.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub sign_seed: Option<u64>,
}

fn default_width() -> usize {
    100
}
fn default_hidden() -> Vec<usize> {
    vec![64]
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            kind: ModelKind::Linear,
            width: default_width(),
            hidden: default_hidden(),
            sign_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub lr: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub scheme: Scheme,
    pub init_std: Option<f64>,
    pub log_interval: usize,
    pub dispersion: bool,
    pub full_loss: bool,
    pub psi_samples: usize,
    pub psi_sigma: f64,
    pub checkpoint_every: Option<usize>,
    pub divergence_threshold: f64,
    pub stop_train_loss: Option<f64>,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            lr: LrSchedule::Constant(0.1),
            epochs: 10,
            batch_size: 10,
            scheme: Scheme::Plain,
            init_std: None,
            log_interval: 1,
            dispersion: true,
            full_loss: true,
            psi_samples: 0,
            psi_sigma: 0.0,
            checkpoint_every: None,
            divergence_threshold: 1e6,
            stop_train_loss: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSet {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSpec {
    /// Per-step auxiliary noise level for the σ-dependent terms.
    pub sigma: f64,
    /// σ values for `compare-trajectory`; defaults to `[sigma]`.
    pub sigmas: Vec<f64>,
    pub probes: usize,
    pub hvp_eps: f64,
    pub gamma_samples: usize,
    pub psi_samples: usize,
    /// Data used for the Hessian trace at `W_T`.
    pub trace_on: EvalSet,
    pub beta: Option<f64>,
    /// Also estimate the perturbed-loss gap between train and test.
    pub flatness_empirical: bool,
}

impl Default for EstimatorSpec {
    fn default() -> Self {
        Self {
            sigma: 1e-3,
            sigmas: Vec::new(),
            probes: estimators::DEFAULT_PROBES,
            hvp_eps: estimators::DEFAULT_HVP_EPS,
            gamma_samples: estimators::DEFAULT_GAMMA_SAMPLES,
            psi_samples: estimators::DEFAULT_PSI_SAMPLES,
            trace_on: EvalSet::Test,
            beta: None,
            flatness_empirical: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundSpec {
    /// Directory written by `train`; defaults to the output directory.
    pub trace_dir: Option<PathBuf>,
    pub variants: Vec<String>,
    /// Also write `bound_epochs.csv` with one row per epoch and variant.
    pub per_epoch: bool,
}

impl Default for BoundSpec {
    fn default() -> Self {
        Self {
            trace_dir: None,
            variants: vec!["log_form".into(), "optimal_closed_form".into()],
            per_epoch: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub lrs: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    #[serde(default = "default_stop")]
    pub stop_train_loss: f64,
    pub max_epochs: usize,
}

fn default_stop() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub kind: Option<ExperimentKind>,
    pub seed: u64,
    pub data: DataSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub estimators: EstimatorSpec,
    #[serde(default)]
    pub bound: BoundSpec,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, sets: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for s in sets {
            apply_override(&mut table, s)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, sets: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, sets)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.d0 == 0 {
            return Err(Error::Config("data.d0 must be >= 1".into()));
        }
        match d.source {
            DataSource::TeacherStudent | DataSource::GaussianClusters => {
                if d.n_train == 0 || d.n_test == 0 {
                    return Err(Error::Config("data.n_train and data.n_test must be >= 1".into()));
                }
            }
            DataSource::Csv => {
                if d.train_path.is_none() || d.test_path.is_none() || d.task.is_none() {
                    return Err(Error::Config(
                        "csv data needs data.train_path, data.test_path and data.task".into(),
                    ));
                }
            }
        }
        if d.source == DataSource::TeacherStudent && d.teacher_width == 0 {
            return Err(Error::Config("data.teacher_width must be >= 1".into()));
        }
        if d.source == DataSource::GaussianClusters && d.classes < 2 {
            return Err(Error::Config("data.classes must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&d.label_noise) {
            return Err(Error::Config("data.label_noise must lie in [0, 1]".into()));
        }
        if self.model.kind == ModelKind::Relu && self.model.width == 0 {
            return Err(Error::Config("model.width must be >= 1".into()));
        }
        let e = &self.estimators;
        if e.probes == 0 || e.gamma_samples == 0 || e.psi_samples == 0 || !(e.hvp_eps > 0.0) {
            return Err(Error::Config("estimator sample counts and hvp_eps must be positive".into()));
        }
        if !(e.sigma > 0.0) || e.sigmas.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("estimator sigmas must be positive".into()));
        }
        for v in &self.bound.variants {
            BoundVariant::parse(v)?;
        }
        if let Some(s) = &self.sweep {
            if s.lrs.is_empty() || s.batch_sizes.is_empty() || s.max_epochs == 0 {
                return Err(Error::Config("sweep grid must be nonempty with max_epochs >= 1".into()));
            }
        }
        self.train_config(self.train.batch_size, self.train.lr.clone())
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }

    fn master(&self) -> SeededStream {
        SeededStream::new(self.seed)
    }

    fn derived_seed(&self, label: &str) -> u64 {
        self.master().substream(label).next_u64()
    }

    pub fn train_config(&self, batch_size: usize, lr: LrSchedule) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr,
            epochs: t.epochs,
            batch_size,
            scheme: t.scheme,
            seeds: Seeds::from_master(self.seed),
            init_std: t.init_std,
            instrumentation: Instrumentation {
                log_interval: t.log_interval,
                dispersion: t.dispersion,
                full_loss: t.full_loss,
                psi_samples: t.psi_samples,
                psi_sigma: t.psi_sigma,
                checkpoint_every: t.checkpoint_every,
                record_updates: false,
            },
            divergence_threshold: t.divergence_threshold,
            stop_train_loss: t.stop_train_loss,
        }
    }

    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.data;
        let seed = d.seed.unwrap_or_else(|| self.derived_seed("data"));
        let (train, test) = match d.source {
            DataSource::TeacherStudent => {
                data::gen_teacher_student_split(d.d0, d.teacher_width, d.n_train, d.n_test, seed)?
            }
            DataSource::GaussianClusters => {
                data::gen_gaussian_clusters(d.d0, d.classes, d.n_train, d.n_test, d.separation, d.cluster_std, seed)?
            }
            DataSource::Csv => {
                let opts = CsvOptions {
                    has_header: d.has_header,
                    normalize: d.normalize,
                };
                let task = d.task.expect("validated");
                (
                    data::load_csv_dataset(d.train_path.as_ref().expect("validated"), task, d.d0, &opts)?,
                    data::load_csv_dataset(d.test_path.as_ref().expect("validated"), task, d.d0, &opts)?,
                )
            }
        };
        let train = if d.label_noise > 0.0 {
            data::inject_label_noise(&train, d.label_noise, self.derived_seed("label-noise"))?
        } else {
            train
        };
        Ok((train, test))
    }

    pub fn model(&self, train: &Dataset) -> Result<Model> {
        let m = &self.model;
        let d0 = self.data.d0;
        match m.kind {
            ModelKind::Linear => Ok(Model::Linear(LinearNet::new(d0)?)),
            ModelKind::Relu => {
                let seed = m.sign_seed.unwrap_or_else(|| self.derived_seed("model"));
                Ok(Model::Relu(TwoLayerReLU::new(d0, m.width, seed)?))
            }
            ModelKind::Mlp => {
                let classes = train.classes.max(self.data.classes);
                let mut dims = vec![d0];
                dims.extend(&m.hidden);
                dims.push(classes);
                Ok(Model::Mlp(MlpClassifier::new(dims)?))
            }
        }
    }

    fn sigmas(&self) -> Vec<f64> {
        if self.estimators.sigmas.is_empty() {
            vec![self.estimators.sigma]
        } else {
            self.estimators.sigmas.clone()
        }
    }
}

/// Applies `a.b.c=value` to a TOML table. The value is parsed as a TOML
/// literal, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not KEY=VALUE")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key '{key}'")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut cur = table;
    for part in &path[..path.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{part}' is not a table")))?;
    }
    cur.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::InvalidArgument(_)
        | Error::Parse { .. }
        | Error::Schema { .. }
        | Error::EmptyDataset(_) => 2,
        Error::Io { .. } | Error::Csv(_) => 3,
        Error::Divergence { .. } => 4,
        Error::InsufficientTrace(_) => 5,
        Error::UnsupportedModel(_) => 6,
        Error::NumericFailure { .. } => 7,
    }
}

struct Output<'a> {
    dir: &'a Path,
    command: ExperimentKind,
    hash: String,
    seed: u64,
}

impl<'a> Output<'a> {
    fn new(dir: &'a Path, command: ExperimentKind, cfg: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir,
            command,
            hash: cfg.hash()?,
            seed: cfg.seed,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes `<name>.manifest` next to an output file.
    fn manifest(&self, name: &str) -> Result<()> {
        let text = format!(
            "file = \"{name}\"\ncommand = \"{}\"\nconfig_sha256 = \"{}\"\nseed = {}\nversion = \"{}\"\n",
            self.command.as_str(),
            self.hash,
            self.seed,
            env!("CARGO_PKG_VERSION")
        );
        let p = self.path(&format!("{name}.manifest"));
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }
}

fn check_kind(cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<()> {
    match cfg.kind {
        Some(k) if k != kind => Err(Error::Config(format!(
            "config is for '{}' but '{}' was requested",
            k.as_str(),
            kind.as_str()
        ))),
        _ => Ok(()),
    }
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    check_kind(cfg, ExperimentKind::GenData)?;
    cfg.validate()?;
    let (train, test) = cfg.datasets()?;
    let o = Output::new(out, ExperimentKind::GenData, cfg)?;
    let mut written = Vec::new();
    for (name, ds) in [("train.csv", &train), ("test.csv", &test)] {
        data::write_csv_dataset(ds, &o.path(name))?;
        o.manifest(name)?;
        written.push(o.path(name));
    }
    Ok(written)
}

const CHECKPOINT_DIR: &str = "checkpoints";
const FINAL_CHECKPOINT: &str = "final.ckpt";

fn checkpoint_name(step: usize) -> String {
    format!("step_{step:08}.ckpt")
}

pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainTrace> {
    check_kind(cfg, ExperimentKind::Train)?;
    cfg.validate()?;
    let (train, test) = cfg.datasets()?;
    let model = cfg.model(&train)?;
    let tc = cfg.train_config(cfg.train.batch_size, cfg.train.lr.clone());
    let o = Output::new(out, ExperimentKind::Train, cfg)?;
    let trace = match training::sgd_train(&model, &train, &test, &tc, &mut []) {
        Ok(t) => t,
        Err(Error::Divergence { step, reason, weights }) => {
            let p = o.path("diverged.ckpt");
            models::write_checkpoint(&p, &model, &weights)?;
            return Err(Error::Divergence { step, reason, weights });
        }
        Err(e) => return Err(e),
    };
    training::write_step_csv(&trace, &o.path("steps.csv"))?;
    o.manifest("steps.csv")?;
    training::write_epoch_csv(&trace, &o.path("epochs.csv"))?;
    o.manifest("epochs.csv")?;
    let ckdir = o.path(CHECKPOINT_DIR);
    fs::create_dir_all(&ckdir).map_err(|e| Error::io(&ckdir, e))?;
    for (step, w) in &trace.checkpoints {
        models::write_checkpoint(&ckdir.join(checkpoint_name(*step)), &model, w)?;
    }
    models::write_checkpoint(&o.path(FINAL_CHECKPOINT), &model, &trace.final_weights)?;
    Ok(trace)
}

/// Rebuilds a trace from a directory written by [`cmd_train`].
pub fn load_trace(dir: &Path, n_train: usize, batch_size: usize) -> Result<(Model, TrainTrace)> {
    let needed = ["steps.csv", "epochs.csv", FINAL_CHECKPOINT];
    let missing: Vec<&str> = needed.iter().copied().filter(|f| !dir.join(f).is_file()).collect();
    if !missing.is_empty() {
        return Err(Error::InsufficientTrace(format!(
            "{} is missing {}",
            dir.display(),
            missing.join(", ")
        )));
    }
    let steps = training::read_step_csv(&dir.join("steps.csv"))?;
    let epochs = training::read_epoch_csv(&dir.join("epochs.csv"))?;
    let (model, w) = models::read_checkpoint(&dir.join(FINAL_CHECKPOINT))?;
    let mut checkpoints = Vec::new();
    let ckdir = dir.join(CHECKPOINT_DIR);
    if ckdir.is_dir() {
        let mut names: Vec<PathBuf> = fs::read_dir(&ckdir)
            .map_err(|e| Error::io(&ckdir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        names.sort();
        for p in names {
            let step = p
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.strip_prefix("step_"))
                .and_then(|s| s.parse::<usize>().ok());
            if let Some(step) = step {
                checkpoints.push((step, models::read_checkpoint(&p)?.1));
            }
        }
    }
    let trace = TrainTrace {
        model_kind: model.kind(),
        dim: model.dim(),
        n_train,
        batch_size,
        steps,
        epochs,
        checkpoints,
        updates: Vec::new(),
        final_weights: w,
        clip_start: None,
    };
    Ok((model, trace))
}

fn needs_curvature(v: BoundVariant) -> bool {
    matches!(
        v,
        BoundVariant::LogForm | BoundVariant::OptimalClosedForm | BoundVariant::NormBased | BoundVariant::Neu | BoundVariant::CorollaryRecover
    )
}

fn trace_estimate(
    cfg: &ExperimentConfig,
    model: &Model,
    w: &ParamVector,
    train: &Dataset,
    test: &Dataset,
    label: &str,
) -> Result<f64> {
    let set = match cfg.estimators.trace_on {
        EvalSet::Train => train,
        EvalSet::Test => test,
    };
    let mut s = cfg.master().substream("estimators").substream(label);
    Ok(estimators::hutchinson_trace(
        model,
        w,
        &set.refs(),
        cfg.estimators.probes,
        cfg.estimators.hvp_eps,
        &mut s,
    )?
    .value)
}

fn bound_inputs(
    cfg: &ExperimentConfig,
    trace: &TrainTrace,
    upto: usize,
    train: &Dataset,
) -> Result<BoundInputs> {
    let mut inputs = BoundInputs::from_trace(trace, cfg.estimators.sigma, upto)?;
    inputs.beta = cfg.estimators.beta;
    if train.task == Task::Regression {
        inputs.input_norm_deviation = Some(train.max_unit_norm_deviation());
    }
    Ok(inputs)
}

pub fn cmd_bound(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<BoundReport>> {
    check_kind(cfg, ExperimentKind::Bound)?;
    cfg.validate()?;
    let variants = cfg
        .bound
        .variants
        .iter()
        .map(|v| BoundVariant::parse(v))
        .collect::<Result<Vec<_>>>()?;
    let (train, test) = cfg.datasets()?;
    let dir = cfg.bound.trace_dir.clone().unwrap_or_else(|| out.to_path_buf());
    let (model, trace) = load_trace(&dir, train.len(), cfg.train.batch_size)?;
    let t_final = trace.steps.len();

    let mut inputs = bound_inputs(cfg, &trace, t_final, &train)?;
    if variants.iter().any(|v| needs_curvature(*v)) {
        inputs.trace_mean = Some(trace_estimate(cfg, &model, &trace.final_weights, &train, &test, "trace")?);
    }
    if cfg.estimators.flatness_empirical {
        let mut s = cfg.master().substream("estimators").substream("gamma");
        inputs.flatness_empirical = Some(bounds::flatness_term_empirical(
            &model,
            &trace.final_weights,
            &train,
            &test,
            inputs.total_var(),
            cfg.estimators.gamma_samples,
            &mut s,
        )?);
    }
    let reports = variants
        .iter()
        .map(|v| bounds::evaluate(*v, &inputs))
        .collect::<Result<Vec<_>>>()?;
    let gap = trace.epochs.last().map(|e| e.loss_gap());

    let o = Output::new(out, ExperimentKind::Bound, cfg)?;
    bounds::write_bound_csv(&reports, gap, &o.path("bounds.csv"))?;
    o.manifest("bounds.csv")?;

    if cfg.bound.per_epoch {
        write_bound_epochs(cfg, &model, &trace, &variants, &train, &test, &o)?;
    }
    Ok(reports)
}

/// Per-epoch bound rows. Variants needing a curvature estimate are evaluated
/// only at epochs with a stored checkpoint.
fn write_bound_epochs(
    cfg: &ExperimentConfig,
    model: &Model,
    trace: &TrainTrace,
    variants: &[BoundVariant],
    train: &Dataset,
    test: &Dataset,
    o: &Output,
) -> Result<()> {
    let path = o.path("bound_epochs.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["epoch", "step", "variant", "trajectory_term", "flatness_term", "total", "gap"])?;
    for e in &trace.epochs {
        let mut inputs = bound_inputs(cfg, trace, e.step, train)?;
        let weights = if e.step == trace.steps.len() {
            Some(&trace.final_weights)
        } else {
            trace.checkpoint(e.step)
        };
        let need = variants.iter().any(|v| needs_curvature(*v));
        if need {
            if let Some(wt) = weights {
                let label = format!("trace-epoch-{}", e.epoch);
                inputs.trace_mean = Some(trace_estimate(cfg, model, wt, train, test, &label)?);
            }
        }
        for v in variants {
            let cube_root = matches!(v, BoundVariant::OptimalClosedForm | BoundVariant::NormBased);
            if cube_root && inputs.trace_mean.is_none() {
                continue;
            }
            let r = bounds::evaluate(*v, &inputs)?;
            w.write_record([
                e.epoch.to_string(),
                e.step.to_string(),
                v.as_str().to_string(),
                r.trajectory_term.to_string(),
                r.flatness_term.to_string(),
                r.total.to_string(),
                e.loss_gap().to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    o.manifest("bound_epochs.csv")
}

/// One row of the trajectory comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub epoch: usize,
    pub step: usize,
    pub ours_log_term: f64,
    pub neu_term: f64,
    pub corollary_term: f64,
}

/// Per-epoch trajectory terms for a trace recorded with Ψ and dispersion.
pub fn comparison_rows(trace: &TrainTrace, sigma: f64) -> Result<Vec<ComparisonRow>> {
    trace
        .epochs
        .iter()
        .map(|e| {
            let inputs = BoundInputs::from_trace(trace, sigma, e.step)?;
            let psi = inputs
                .psi
                .clone()
                .ok_or_else(|| Error::InsufficientTrace("psi column is empty".into()))?;
            Ok(ComparisonRow {
                epoch: e.epoch,
                step: e.step,
                ours_log_term: bounds::trajectory_log_term(&inputs)?,
                neu_term: bounds::neu_trajectory_term(&inputs, &psi, &inputs.dispersion)?,
                corollary_term: bounds::corollary_trajectory_term(&inputs, &psi, &inputs.dispersion)?,
            })
        })
        .collect()
}

pub fn comparison_file_name(sigma: f64) -> String {
    format!("compare_sigma_{sigma:e}.csv")
}

pub fn cmd_compare_trajectory(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<(f64, Vec<ComparisonRow>)>> {
    check_kind(cfg, ExperimentKind::CompareTrajectory)?;
    cfg.validate()?;
    let (train, test) = cfg.datasets()?;
    let model = cfg.model(&train)?;
    let o = Output::new(out, ExperimentKind::CompareTrajectory, cfg)?;
    let results = cfg
        .sigmas()
        .par_iter()
        .map(|&sigma| {
            let mut tc = cfg.train_config(cfg.train.batch_size, cfg.train.lr.clone());
            tc.instrumentation.dispersion = true;
            tc.instrumentation.psi_samples = cfg.estimators.psi_samples;
            tc.instrumentation.psi_sigma = sigma;
            let trace = training::sgd_train(&model, &train, &test, &tc, &mut [])?;
            Ok((sigma, comparison_rows(&trace, sigma)?))
        })
        .collect::<Result<Vec<_>>>()?;
    for (sigma, rows) in &results {
        let name = comparison_file_name(*sigma);
        let path = o.path(&name);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["epoch", "step", "ours_log_term", "neu_term", "corollary_term"])?;
        for r in rows {
            w.write_record([
                r.epoch.to_string(),
                r.step.to_string(),
                r.ours_log_term.to_string(),
                r.neu_term.to_string(),
                r.corollary_term.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        o.manifest(&name)?;
    }
    Ok(results)
}

/// One cell of the learning-rate by batch-size sweep. The trajectory term is
/// `√((R²/n) Σ λ²V)`, the flatness term `T·trace/2`, and `bound` their
/// σ-optimized combination.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs_run: usize,
    pub steps: usize,
    pub trajectory_term: f64,
    pub flatness_term: f64,
    pub bound: f64,
    pub gap: f64,
    pub final_train_loss: f64,
    pub error: Option<String>,
}

fn sweep_cell(cfg: &ExperimentConfig, model: &Model, train: &Dataset, test: &Dataset, lr: f64, b: usize) -> Result<SweepRow> {
    let sweep = cfg.sweep.as_ref().expect("validated");
    let mut tc = cfg.train_config(b, LrSchedule::Constant(lr));
    tc.epochs = sweep.max_epochs;
    tc.stop_train_loss = Some(sweep.stop_train_loss);
    tc.validate()?;
    let trace = training::sgd_train(model, train, test, &tc, &mut [])?;
    let mut inputs = bound_inputs(cfg, &trace, trace.steps.len(), train)?;
    let tr = trace_estimate(cfg, model, &trace.final_weights, train, test, "trace")?;
    inputs.trace_mean = Some(tr);
    let report = bounds::optimal_bound(&inputs)?;
    let last = trace.epochs.last().expect("at least one epoch");
    let sum: f64 = inputs.lr.iter().zip(&inputs.dispersion).map(|(l, v)| l * l * v).sum();
    let r = inputs.r.r;
    Ok(SweepRow {
        lr,
        batch_size: b,
        epochs_run: trace.epochs.len(),
        steps: trace.steps.len(),
        trajectory_term: (r * r / inputs.n as f64 * sum).sqrt(),
        flatness_term: inputs.steps() as f64 * tr / 2.0,
        bound: report.total,
        gap: last.loss_gap(),
        final_train_loss: last.train_loss,
        error: None,
    })
}

pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SweepRow>> {
    check_kind(cfg, ExperimentKind::Sweep)?;
    cfg.validate()?;
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("sweep command needs a [sweep] section".into()))?;
    let (train, test) = cfg.datasets()?;
    let model = cfg.model(&train)?;
    let cells: Vec<(f64, usize)> = sweep
        .lrs
        .iter()
        .flat_map(|&lr| sweep.batch_sizes.iter().map(move |&b| (lr, b)))
        .collect();
    let rows: Vec<SweepRow> = cells
        .par_iter()
        .map(|&(lr, b)| {
            sweep_cell(cfg, &model, &train, &test, lr, b).unwrap_or_else(|e| SweepRow {
                lr,
                batch_size: b,
                epochs_run: 0,
                steps: 0,
                trajectory_term: f64::NAN,
                flatness_term: f64::NAN,
                bound: f64::NAN,
                gap: f64::NAN,
                final_train_loss: f64::NAN,
                error: Some(e.to_string()),
            })
        })
        .collect();

    let o = Output::new(out, ExperimentKind::Sweep, cfg)?;
    let path = o.path("sweep.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "lr",
        "batch_size",
        "epochs_run",
        "steps",
        "trajectory_term",
        "flatness_term",
        "bound",
        "gap",
        "final_train_loss",
        "status",
        "error",
    ])?;
    for r in &rows {
        w.write_record([
            r.lr.to_string(),
            r.batch_size.to_string(),
            r.epochs_run.to_string(),
            r.steps.to_string(),
            r.trajectory_term.to_string(),
            r.flatness_term.to_string(),
            r.bound.to_string(),
            r.gap.to_string(),
            r.final_train_loss.to_string(),
            if r.error.is_some() { "error" } else { "ok" }.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    o.manifest("sweep.csv")?;
    Ok(rows)
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let (kind, args) = match cli.command {
        Command::GenData(a) => (ExperimentKind::GenData, a),
        Command::Train(a) => (ExperimentKind::Train, a),
        Command::Bound(a) => (ExperimentKind::Bound, a),
        Command::CompareTrajectory(a) => (ExperimentKind::CompareTrajectory, a),
        Command::Sweep(a) => (ExperimentKind::Sweep, a),
    };
    let cfg = ExperimentConfig::load(&args.config, &args.sets)?;
    let out = args
        .out
        .ok_or_else(|| Error::Config("no output directory: pass --out or set GENBOUND_OUT".into()))?;
    match kind {
        ExperimentKind::GenData => cmd_gen_data(&cfg, &out).map(|_| ()),
        ExperimentKind::Train => cmd_train(&cfg, &out).map(|_| ()),
        ExperimentKind::Bound => cmd_bound(&cfg, &out).map(|_| ()),
        ExperimentKind::CompareTrajectory => cmd_compare_trajectory(&cfg, &out).map(|_| ()),
        ExperimentKind::Sweep => cmd_sweep(&cfg, &out).map(|_| ()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 3
[data]
source = "teacher_student"
d0 = 4
teacher_width = 5
n_train = 20
n_test = 10
[model]
kind = "linear"
[train]
lr = 0.1
epochs = 2
batch_size = 5
"#;

    #[test]
    fn overrides_win_and_parse_types() {
        let cfg = ExperimentConfig::from_toml_str(BASE, &["train.epochs=7".into(), "model.kind=relu".into()]).unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.model.kind, ModelKind::Relu);
        let cfg = ExperimentConfig::from_toml_str(BASE, &["estimators.sigmas=[1e-6, 1e-3]".into()]).unwrap();
        assert_eq!(cfg.estimators.sigmas, vec![1e-6, 1e-3]);
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(matches!(
            ExperimentConfig::from_toml_str(BASE, &["data.d0=0".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_toml_str(BASE, &["nonsense".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_toml_str(BASE, &["train.bogus=1".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_toml_str(BASE, &["bound.variants=[\"tightest\"]".into()]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::from_toml_str(BASE, &[]).unwrap();
        let b = ExperimentConfig::from_toml_str(BASE, &[]).unwrap();
        let c = ExperimentConfig::from_toml_str(BASE, &["seed=4".into()]).unwrap();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn exit_codes_are_distinct() {
        let codes = [
            exit_code(&Error::Config(String::new())),
            exit_code(&Error::io("x", std::io::Error::other("x"))),
            exit_code(&Error::Divergence {
                step: 1,
                reason: String::new(),
                weights: Box::new(ParamVector::zeros(1)),
            }),
            exit_code(&Error::InsufficientTrace(String::new())),
        ];
        for (i, a) in codes.iter().enumerate() {
            assert_ne!(*a, 0);
            for b in &codes[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn clip_scheme_from_toml() {
        let cfg = ExperimentConfig::from_toml_str(
            BASE,
            &["train.scheme={kind=\"clip\", alpha=0.1, start=\"auto\", g_init=inf}".into()],
        )
        .unwrap();
        assert!(matches!(cfg.train.scheme, Scheme::Clip(c) if c.alpha == 0.1));
    }
}
