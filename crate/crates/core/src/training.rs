//! Mini-batch SGD with pluggable gradient schemes and per-step instrumentation.
//!
//! One step is `W_t = W_{t-1} - λ_t · g̃_t`, where `g̃_t` is the batch gradient
//! `g(W_{t-1}, B_t)` after the scheme transform (none, dynamic clipping, or
//! Gaussian model perturbation).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{BatchTrajectory, Dataset, Example};
use crate::error::{Error, Result};
use crate::estimators;
use crate::models::{Model, ModelKind};
use crate::numerics::{gaussian_vector, ParamVector, SeededStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LrSchedule {
    Constant(f64),
    /// `(first step, rate)` pairs sorted by step; the first entry must start at step 1.
    Piecewise(Vec<(usize, f64)>),
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        match self {
            LrSchedule::Constant(lr) => *lr,
            LrSchedule::Piecewise(parts) => parts
                .iter()
                .take_while(|(start, _)| *start <= step)
                .last()
                .map(|(_, lr)| *lr)
                .unwrap_or(parts[0].1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |lr: f64| lr > 0.0 && lr.is_finite();
        match self {
            LrSchedule::Constant(lr) if ok(*lr) => Ok(()),
            LrSchedule::Piecewise(parts)
                if !parts.is_empty()
                    && parts[0].0 <= 1
                    && parts.windows(2).all(|w| w[0].0 < w[1].0)
                    && parts.iter().all(|(_, lr)| ok(*lr)) =>
            {
                Ok(())
            }
            other => Err(Error::invalid(format!("learning rates must be positive: {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipStart {
    /// Begin after the first epoch whose mean gradient norm exceeds the previous epoch's.
    Auto,
    /// Clip for steps `t > T_c`.
    Step(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub alpha: f64,
    pub start: ClipStart,
    /// Initial running minimum gradient norm; `+∞` records the first norm seen.
    pub g_init: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            start: ClipStart::Auto,
            g_init: f64::INFINITY,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!("clip alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.g_init > 0.0) {
            return Err(Error::invalid("initial minimum gradient norm must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmpConfig {
    pub rho: f64,
    pub sigma: f64,
    pub k: usize,
    pub abs_variant: bool,
}

impl Default for GmpConfig {
    fn default() -> Self {
        Self {
            rho: 0.5,
            sigma: 0.03,
            k: 3,
            abs_variant: false,
        }
    }
}

impl GmpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::invalid(format!("gmp rho must lie in [0, 1], got {}", self.rho)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid("gmp sigma must be finite and >= 0"));
        }
        if self.k == 0 {
            return Err(Error::invalid("gmp needs k >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Plain,
    Clip(ClipConfig),
    Gmp(GmpConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub batching: u64,
    pub noise: u64,
}

impl Seeds {
    /// Fans a master seed out to independent labelled sub-streams.
    pub fn from_master(seed: u64) -> Self {
        let root = SeededStream::new(seed);
        Self {
            init: root.substream("init").next_u64_owned(),
            batching: root.substream("batching").next_u64_owned(),
            noise: root.substream("noise").next_u64_owned(),
        }
    }
}

impl SeededStream {
    fn next_u64_owned(mut self) -> u64 {
        self.next_u64()
    }
}

/// What gets measured while training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instrumentation {
    /// Instrumented steps are `t = 1, 1 + k, 1 + 2k, ...`.
    pub log_interval: usize,
    /// `‖g(W_{t-1}, B_t) - mean train gradient at W_{t-1}‖²`
    pub dispersion: bool,
    /// Mean training loss (and activation-weighted loss for ReLU nets) at `W_{t-1}`.
    pub full_loss: bool,
    /// Local gradient sensitivity with this many noise samples, using `psi_sigma`
    /// as the per-step auxiliary noise level.
    pub psi_samples: usize,
    pub psi_sigma: f64,
    /// Store `W_t` every this many steps (always stores `W_0` and `W_T`).
    pub checkpoint_every: Option<usize>,
    /// Keep each applied update `λ_t g̃_t`.
    pub record_updates: bool,
}

impl Default for Instrumentation {
    fn default() -> Self {
        Self {
            log_interval: 1,
            dispersion: true,
            full_loss: false,
            psi_samples: 0,
            psi_sigma: 0.0,
            checkpoint_every: None,
            record_updates: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub scheme: Scheme,
    pub seeds: Seeds,
    /// Overrides the model's default initial weight scale.
    pub init_std: Option<f64>,
    pub instrumentation: Instrumentation,
    /// Abort when a batch loss exceeds this value.
    pub divergence_threshold: f64,
    /// Stop at the end of the first epoch whose mean training loss falls below this.
    pub stop_train_loss: Option<f64>,
}

impl TrainConfig {
    pub fn new(lr: f64, epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            lr: LrSchedule::Constant(lr),
            epochs,
            batch_size,
            scheme: Scheme::Plain,
            seeds: Seeds::from_master(seed),
            init_std: None,
            instrumentation: Instrumentation::default(),
            divergence_threshold: 1e6,
            stop_train_loss: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lr.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be >= 1"));
        }
        if self.instrumentation.log_interval == 0 {
            return Err(Error::invalid("log interval must be >= 1"));
        }
        match &self.scheme {
            Scheme::Plain => Ok(()),
            Scheme::Clip(c) => c.validate(),
            Scheme::Gmp(g) => g.validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Norm of the raw batch gradient `g(W_{t-1}, B_t)`.
    pub grad_norm: f64,
    pub dispersion: Option<f64>,
    /// ReLU nets: fraction of active (row, example) pairs over the batch.
    pub activation_frac: Option<f64>,
    pub batch_loss: f64,
    pub mean_loss: Option<f64>,
    pub weighted_loss: Option<f64>,
    pub psi: Option<f64>,
    /// Extremes of the per-instance batch losses at `W_{t-1}`.
    pub loss_min: f64,
    pub loss_max: f64,
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Steps completed at the end of the epoch.
    pub step: usize,
    pub train_loss: f64,
    pub train_acc: Option<f64>,
    pub test_loss: f64,
    pub test_acc: Option<f64>,
    /// ReLU nets: activation fraction over the training set at the epoch's final weights.
    pub activation_frac: Option<f64>,
    pub mean_grad_norm: f64,
}

impl EpochRecord {
    pub fn loss_gap(&self) -> f64 {
        self.test_loss - self.train_loss
    }

    pub fn acc_gap(&self) -> Option<f64> {
        Some(self.train_acc? - self.test_acc?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub model_kind: ModelKind,
    pub dim: usize,
    pub n_train: usize,
    pub batch_size: usize,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// `(step, W_step)`
    pub checkpoints: Vec<(usize, ParamVector)>,
    /// `λ_t g̃_t` for each step when recorded.
    pub updates: Vec<ParamVector>,
    pub final_weights: ParamVector,
    /// First step after which clipping was active.
    pub clip_start: Option<usize>,
}

impl TrainTrace {
    pub fn total_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn checkpoint(&self, step: usize) -> Option<&ParamVector> {
        self.checkpoints.iter().find(|(s, _)| *s == step).map(|(_, w)| w)
    }
}

/// Read-only view handed to hooks before the update of step `t` is applied.
pub struct StepView<'a> {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub w_prev: &'a ParamVector,
    pub batch: &'a [usize],
    pub grad: &'a ParamVector,
    pub applied: &'a ParamVector,
}

pub trait TrainHook {
    fn on_step(&mut self, _view: &StepView<'_>) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _record: &EpochRecord, _w: &ParamVector) -> Result<()> {
        Ok(())
    }
}

/// One step of the running-minimum clipping rule. Returns the (possibly
/// rescaled) gradient and the updated minimum norm.
pub fn clip_transform(g: &ParamVector, min_norm: f64, step: usize, start: usize, alpha: f64) -> (ParamVector, f64) {
    if step <= start {
        return (g.clone(), min_norm);
    }
    let norm = g.norm();
    if norm > min_norm {
        (g.scaled(alpha * min_norm / norm), min_norm)
    } else {
        (g.clone(), norm)
    }
}

/// Stateful clipper that also resolves the automatic start step.
#[derive(Debug, Clone)]
pub struct DynamicClipper {
    cfg: ClipConfig,
    min_norm: f64,
    start: Option<usize>,
    prev_epoch_mean: Option<f64>,
}

impl DynamicClipper {
    pub fn new(cfg: ClipConfig) -> Self {
        let start = match cfg.start {
            ClipStart::Step(s) => Some(s),
            ClipStart::Auto => None,
        };
        Self {
            cfg,
            min_norm: cfg.g_init,
            start,
            prev_epoch_mean: None,
        }
    }

    pub fn start(&self) -> Option<usize> {
        self.start
    }

    pub fn min_norm(&self) -> f64 {
        self.min_norm
    }

    /// Returns the gradient to apply and whether it was rescaled.
    pub fn apply(&mut self, step: usize, g: &ParamVector) -> (ParamVector, bool) {
        let Some(start) = self.start else {
            return (g.clone(), false);
        };
        let before = self.min_norm;
        let (out, min_norm) = clip_transform(g, self.min_norm, step, start, self.cfg.alpha);
        self.min_norm = min_norm;
        let clipped = step > start && g.norm() > before;
        (out, clipped)
    }

    /// Feeds the mean gradient norm of a finished epoch ending at `last_step`.
    pub fn end_epoch(&mut self, mean_norm: f64, last_step: usize) {
        if self.start.is_none() {
            if let Some(prev) = self.prev_epoch_mean {
                if mean_norm > prev {
                    self.start = Some(last_step);
                }
            }
        }
        self.prev_epoch_mean = Some(mean_norm);
    }
}

/// GMP gradient with explicitly supplied perturbations `Δ_1..Δ_k`.
pub fn gmp_gradient_with(
    model: &Model,
    w: &ParamVector,
    batch: &[&Example],
    cfg: &GmpConfig,
    perturbations: &[ParamVector],
) -> Result<ParamVector> {
    let (base_loss, base) = model.batch_loss_grad(w, batch)?;
    if cfg.rho == 0.0 {
        return Ok(base);
    }
    if perturbations.is_empty() {
        return Err(Error::invalid("gmp needs at least one perturbation"));
    }
    let k = perturbations.len() as f64;
    let mut acc = ParamVector::zeros(w.dim());
    for delta in perturbations {
        let shifted = w.add(delta)?;
        let (loss, g) = model.batch_loss_grad(&shifted, batch)?;
        if cfg.abs_variant {
            let sign = match (loss - base_loss).partial_cmp(&0.0) {
                Some(std::cmp::Ordering::Greater) => 1.0,
                Some(std::cmp::Ordering::Less) => -1.0,
                _ => 0.0,
            };
            acc.axpy(sign, &g.sub(&base)?)?;
        } else {
            acc.axpy(1.0, &g)?;
        }
    }
    let mut out = base;
    if cfg.abs_variant {
        out.axpy(cfg.rho / k, &acc)?;
    } else {
        out.scale(1.0 - cfg.rho);
        out.axpy(cfg.rho / k, &acc)?;
    }
    Ok(out)
}

/// GMP gradient drawing `k` perturbations `Δ_j ~ N(0, σ²I)` from `stream`.
pub fn gmp_gradient(
    model: &Model,
    w: &ParamVector,
    batch: &[&Example],
    cfg: &GmpConfig,
    stream: &mut SeededStream,
) -> Result<ParamVector> {
    cfg.validate()?;
    let deltas = (0..cfg.k)
        .map(|_| gaussian_vector(stream, w.dim(), cfg.sigma))
        .collect::<Result<Vec<_>>>()?;
    gmp_gradient_with(model, w, batch, cfg, &deltas)
}

fn diverged(step: usize, reason: String, w: &ParamVector) -> Error {
    Error::Divergence {
        step,
        reason,
        weights: Box::new(w.clone()),
    }
}

/// Trains from weights drawn with the configured init seed.
pub fn sgd_train(
    model: &Model,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    hooks: &mut [&mut dyn TrainHook],
) -> Result<TrainTrace> {
    let mut init = SeededStream::new(cfg.seeds.init);
    let w0 = model.init_weights(&mut init, cfg.init_std)?;
    sgd_train_from(model, w0, train, test, cfg, hooks)
}

pub fn sgd_train_from(
    model: &Model,
    w0: ParamVector,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    hooks: &mut [&mut dyn TrainHook],
) -> Result<TrainTrace> {
    cfg.validate()?;
    if w0.dim() != model.dim() {
        return Err(Error::invalid("initial weights do not match model dim"));
    }
    if train.task != model.task() || train.d0 != model.input_dim() {
        return Err(Error::invalid(format!(
            "dataset ({:?}, d0={}) does not fit model {} (input {})",
            train.task,
            train.d0,
            model.kind().as_str(),
            model.input_dim()
        )));
    }
    let traj = BatchTrajectory::new(cfg.seeds.batching, train.len(), cfg.batch_size, cfg.epochs)?;
    let inst = &cfg.instrumentation;
    let noise_root = SeededStream::new(cfg.seeds.noise);
    let train_refs = train.refs();
    let test_refs = test.refs();

    let mut clipper = match cfg.scheme {
        Scheme::Clip(c) => Some(DynamicClipper::new(c)),
        _ => None,
    };
    let mut w = w0;
    let mut trace = TrainTrace {
        model_kind: model.kind(),
        dim: model.dim(),
        n_train: train.len(),
        batch_size: cfg.batch_size,
        steps: Vec::with_capacity(traj.total_steps()),
        epochs: Vec::with_capacity(cfg.epochs),
        checkpoints: vec![(0, w.clone())],
        updates: Vec::new(),
        final_weights: w.clone(),
        clip_start: None,
    };

    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut norm_sum = 0.0;
        let batches = traj.batches(epoch)?;
        for idx in &batches {
            step += 1;
            let lr = cfg.lr.at(step);
            let batch = train.select(idx);

            let (losses, grad) = model.batch_losses_grad(&w, &batch)?;
            let bl = losses.iter().sum::<f64>() / losses.len() as f64;
            if !bl.is_finite() || bl > cfg.divergence_threshold {
                return Err(diverged(step, format!("batch loss {bl}"), &w));
            }
            if !grad.is_finite() {
                return Err(diverged(step, "non-finite gradient".into(), &w));
            }
            let grad_norm = grad.norm();
            norm_sum += grad_norm;

            let logged = (step - 1) % inst.log_interval == 0;
            let dispersion = if logged && inst.dispersion {
                let reference = estimators::reference_mean_gradient(model, &w, &train_refs)?;
                Some(grad.sub(&reference)?.norm_sq())
            } else {
                None
            };
            let (mean_loss, weighted_loss) = if logged && inst.full_loss {
                let weighted = match model.kind() {
                    ModelKind::Relu => Some(model.activation_weighted_loss(&w, &train_refs)?),
                    _ => None,
                };
                (Some(model.mean_loss(&w, &train_refs)?), weighted)
            } else {
                (None, None)
            };
            let psi = if logged && inst.psi_samples > 0 {
                let cum_var = (step - 1) as f64 * inst.psi_sigma * inst.psi_sigma;
                let mut s = noise_root.substream_indexed("psi", step as u64);
                Some(estimators::sensitivity_psi(model, &w, cum_var, inst.psi_samples, &train_refs, &mut s)?.value)
            } else {
                None
            };
            let activation_frac = match model.kind() {
                ModelKind::Relu => Some(model.activation_fraction(&w, &batch)?),
                _ => None,
            };

            let (applied, clipped) = match &cfg.scheme {
                Scheme::Plain => (grad.clone(), false),
                Scheme::Clip(_) => clipper.as_mut().unwrap().apply(step, &grad),
                Scheme::Gmp(g) => {
                    let mut s = noise_root.substream_indexed("gmp", step as u64);
                    let out = gmp_gradient(model, &w, &batch, g, &mut s)?;
                    if !out.is_finite() {
                        return Err(diverged(step, "non-finite GMP gradient".into(), &w));
                    }
                    (out, false)
                }
            };

            for hook in hooks.iter_mut() {
                hook.on_step(&StepView {
                    step,
                    epoch,
                    lr,
                    w_prev: &w,
                    batch: idx,
                    grad: &grad,
                    applied: &applied,
                })?;
            }

            let update = applied.scaled(lr);
            w.axpy(-1.0, &update)?;
            if !w.is_finite() {
                return Err(diverged(step, "non-finite weights".into(), &w));
            }
            if inst.record_updates {
                trace.updates.push(update);
            }
            if inst.checkpoint_every.is_some_and(|k| step % k == 0) {
                trace.checkpoints.push((step, w.clone()));
            }
            trace.steps.push(StepRecord {
                step,
                epoch,
                lr,
                grad_norm,
                dispersion,
                activation_frac,
                batch_loss: bl,
                mean_loss,
                weighted_loss,
                psi,
                loss_min: losses.iter().cloned().fold(f64::INFINITY, f64::min),
                loss_max: losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                clipped,
            });
        }

        let mean_grad_norm = norm_sum / batches.len() as f64;
        if let Some(c) = clipper.as_mut() {
            c.end_epoch(mean_grad_norm, step);
        }
        let record = EpochRecord {
            epoch,
            step,
            train_loss: model.mean_loss(&w, &train_refs)?,
            train_acc: model.accuracy(&w, &train_refs)?,
            test_loss: model.mean_loss(&w, &test_refs)?,
            test_acc: model.accuracy(&w, &test_refs)?,
            activation_frac: match model.kind() {
                ModelKind::Relu => Some(model.activation_fraction(&w, &train_refs)?),
                _ => None,
            },
            mean_grad_norm,
        };
        for hook in hooks.iter_mut() {
            hook.on_epoch(&record, &w)?;
        }
        let stop = cfg.stop_train_loss.is_some_and(|thr| record.train_loss < thr);
        trace.epochs.push(record);
        if stop {
            break;
        }
    }

    if trace.checkpoints.last().map(|(s, _)| *s) != Some(step) {
        trace.checkpoints.push((step, w.clone()));
    }
    trace.clip_start = clipper.and_then(|c| c.start());
    trace.final_weights = w;
    Ok(trace)
}

/// Replays the auxiliary process `W̃_t = W̃_{t-1} - λ_t g̃_t + N_t` next to the
/// recorded `W_t` and returns `max_t ‖W̃_t - (W_t + Σ_{τ≤t} N_τ)‖_∞`.
///
/// `sigmas` holds one noise level per step, or a single value for all steps.
pub fn auxiliary_consistency(trace: &TrainTrace, sigmas: &[f64], stream: &mut SeededStream) -> Result<f64> {
    let t_max = trace.total_steps();
    if trace.updates.len() != t_max {
        return Err(Error::InsufficientTrace(format!(
            "need {t_max} recorded updates, found {}",
            trace.updates.len()
        )));
    }
    if sigmas.is_empty() || (sigmas.len() != 1 && sigmas.len() != t_max) {
        return Err(Error::invalid("noise schedule must have one entry or one per step"));
    }
    let mut w_tilde = trace
        .checkpoint(0)
        .ok_or_else(|| Error::InsufficientTrace("missing checkpoint W_0".into()))?
        .clone();
    let mut delta = ParamVector::zeros(trace.dim);
    let mut worst = 0.0f64;
    for t in 1..=t_max {
        let w_t = trace
            .checkpoint(t)
            .ok_or_else(|| Error::InsufficientTrace(format!("missing checkpoint W_{t}")))?;
        let sigma = if sigmas.len() == 1 { sigmas[0] } else { sigmas[t - 1] };
        let noise = gaussian_vector(stream, trace.dim, sigma)?;
        w_tilde.axpy(-1.0, &trace.updates[t - 1])?;
        w_tilde.axpy(1.0, &noise)?;
        delta.axpy(1.0, &noise)?;
        worst = worst.max(w_tilde.max_abs_diff(&w_t.add(&delta)?)?);
    }
    Ok(worst)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-step CSV.
pub fn write_step_csv(trace: &TrainTrace, path: &Path) -> Result<()> {
    let mut out = String::from(
        "step,epoch,lr,grad_norm,dispersion,activation_frac,batch_loss,mean_loss,weighted_loss,psi,loss_min,loss_max,clipped\n",
    );
    for r in &trace.steps {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.epoch,
            r.lr,
            r.grad_norm,
            opt(r.dispersion),
            opt(r.activation_frac),
            r.batch_loss,
            opt(r.mean_loss),
            opt(r.weighted_loss),
            opt(r.psi),
            r.loss_min,
            r.loss_max,
            u8::from(r.clipped)
        );
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Per-epoch CSV.
pub fn write_epoch_csv(trace: &TrainTrace, path: &Path) -> Result<()> {
    let mut out = String::from(
        "epoch,train_loss,train_acc,test_loss,test_acc,step,activation_frac,mean_grad_norm\n",
    );
    for r in &trace.epochs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch,
            r.train_loss,
            opt(r.train_acc),
            r.test_loss,
            opt(r.test_acc),
            r.step,
            opt(r.activation_frac),
            r.mean_grad_norm
        );
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn parse_opt(s: &str, line: usize) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Parse {
        line,
        detail: format!("bad number {s:?}"),
    })
}

fn parse_req<T: std::str::FromStr>(s: &str, line: usize) -> Result<T> {
    s.parse().map_err(|_| Error::Parse {
        line,
        detail: format!("bad value {s:?}"),
    })
}

/// Reads a CSV written by [`write_step_csv`].
pub fn read_step_csv(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 13 {
            return Err(Error::Schema {
                row: i + 1,
                expected: 13,
                found: f.len(),
            });
        }
        let l = i + 1;
        out.push(StepRecord {
            step: parse_req(f[0], l)?,
            epoch: parse_req(f[1], l)?,
            lr: parse_req(f[2], l)?,
            grad_norm: parse_req(f[3], l)?,
            dispersion: parse_opt(f[4], l)?,
            activation_frac: parse_opt(f[5], l)?,
            batch_loss: parse_req(f[6], l)?,
            mean_loss: parse_opt(f[7], l)?,
            weighted_loss: parse_opt(f[8], l)?,
            psi: parse_opt(f[9], l)?,
            loss_min: parse_req(f[10], l)?,
            loss_max: parse_req(f[11], l)?,
            clipped: f[12] == "1",
        });
    }
    Ok(out)
}

/// Reads a CSV written by [`write_epoch_csv`].
pub fn read_epoch_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::Schema {
                row: i + 1,
                expected: 8,
                found: f.len(),
            });
        }
        let l = i + 1;
        out.push(EpochRecord {
            epoch: parse_req(f[0], l)?,
            train_loss: parse_req(f[1], l)?,
            train_acc: parse_opt(f[2], l)?,
            test_loss: parse_req(f[3], l)?,
            test_acc: parse_opt(f[4], l)?,
            step: parse_req(f[5], l)?,
            activation_frac: parse_opt(f[6], l)?,
            mean_grad_norm: parse_req(f[7], l)?,
        });
    }
    Ok(out)
}
