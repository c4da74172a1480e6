//! Estimators feeding the bounds: gradient dispersion, local gradient
//! sensitivity, Hessian trace (Hutchinson with finite-difference HVPs), the
//! Monte-Carlo flatness quantity and the subgaussian scale.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::Example;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::numerics::{gaussian_vector, mean_and_stderr, rademacher_vector, ParamVector, SeededStream};
use crate::training::{StepRecord, TrainTrace};

pub const DEFAULT_HVP_EPS: f64 = 1e-4;
pub const DEFAULT_PROBES: usize = 256;
pub const DEFAULT_GAMMA_SAMPLES: usize = 200;
pub const DEFAULT_PSI_SAMPLES: usize = 20;

/// Probes whose ±eps segment gets this close to a rectifier kink are redrawn.
const KINK_MARGIN: f64 = 1e-6;
const KINK_RETRIES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DispersionMode {
    SingleRun,
    MultiSeed,
}

impl DispersionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            DispersionMode::SingleRun => "single_run",
            DispersionMode::MultiSeed => "multi_seed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispersionEstimate {
    pub value: f64,
    pub mode: DispersionMode,
    pub step: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityEstimate {
    pub value: f64,
    pub stderr: f64,
    pub samples: usize,
    pub cum_var: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlatnessKind {
    HessianTrace,
    Gamma,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatnessEstimate {
    pub kind: FlatnessKind,
    pub value: f64,
    pub stderr: f64,
    pub samples: usize,
    pub total_var: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubgaussianR {
    pub r: f64,
    pub min_loss: f64,
    pub max_loss: f64,
}

/// Mean per-example gradient over `examples` at `w`.
pub fn reference_mean_gradient(model: &Model, w: &ParamVector, examples: &[&Example]) -> Result<ParamVector> {
    if examples.is_empty() {
        return Err(Error::invalid("reference gradient needs a nonempty dataset"));
    }
    model.batch_grad(w, examples)
}

/// `‖g(w, B) − reference‖²`.
pub fn dispersion(
    model: &Model,
    w: &ParamVector,
    batch: &[&Example],
    reference: &ParamVector,
) -> Result<DispersionEstimate> {
    let g = model.batch_grad(w, batch)?;
    Ok(DispersionEstimate {
        value: g.sub(reference)?.norm_sq(),
        mode: DispersionMode::SingleRun,
        step: None,
    })
}

/// One replicate's state at a common step: `W_{t-1}` and the batch `B_t`.
#[derive(Debug, Clone)]
pub struct SeedSnapshot {
    pub step: usize,
    pub weights: ParamVector,
    pub batch: Vec<usize>,
}

/// Ensemble dispersion: the reference is the mean over replicates of each
/// replicate's full-data gradient, and the value averages each replicate's
/// squared distance to it.
pub fn dispersion_multi_seed(model: &Model, snapshots: &[SeedSnapshot], examples: &[&Example]) -> Result<DispersionEstimate> {
    let first = snapshots
        .first()
        .ok_or_else(|| Error::InsufficientTrace("no replicates supplied".into()))?;
    if snapshots.iter().any(|s| s.step != first.step) {
        return Err(Error::InsufficientTrace("replicates are not aligned on the same step".into()));
    }
    let k = snapshots.len() as f64;
    let mut reference = ParamVector::zeros(model.dim());
    for s in snapshots {
        reference.axpy(1.0 / k, &reference_mean_gradient(model, &s.weights, examples)?)?;
    }
    let mut total = 0.0;
    for s in snapshots {
        let batch: Vec<&Example> = s.batch.iter().map(|&i| examples[i]).collect();
        total += model.batch_grad(&s.weights, &batch)?.sub(&reference)?.norm_sq();
    }
    Ok(DispersionEstimate {
        value: total / k,
        mode: if snapshots.len() == 1 {
            DispersionMode::SingleRun
        } else {
            DispersionMode::MultiSeed
        },
        step: Some(first.step),
    })
}

/// Local gradient sensitivity: mean over `k_psi` draws `ζ ~ N(0, cum_var·I)`
/// of `‖ref(w) − ref(w + ζ)‖²`.
pub fn sensitivity_psi(
    model: &Model,
    w: &ParamVector,
    cum_var: f64,
    k_psi: usize,
    examples: &[&Example],
    stream: &mut SeededStream,
) -> Result<SensitivityEstimate> {
    if !(cum_var >= 0.0 && cum_var.is_finite()) {
        return Err(Error::invalid("cumulative variance must be finite and >= 0"));
    }
    if k_psi == 0 {
        return Err(Error::invalid("psi needs at least one noise sample"));
    }
    if cum_var == 0.0 {
        return Ok(SensitivityEstimate {
            value: 0.0,
            stderr: 0.0,
            samples: k_psi,
            cum_var,
        });
    }
    let base = reference_mean_gradient(model, w, examples)?;
    let std = cum_var.sqrt();
    let mut values = Vec::with_capacity(k_psi);
    for _ in 0..k_psi {
        let zeta = gaussian_vector(stream, w.dim(), std)?;
        let shifted = reference_mean_gradient(model, &w.add(&zeta)?, examples)?;
        values.push(base.sub(&shifted)?.norm_sq());
    }
    let (value, stderr) = mean_and_stderr(&values);
    Ok(SensitivityEstimate {
        value,
        stderr,
        samples: k_psi,
        cum_var,
    })
}

fn probe_is_clean(model: &Model, w: &ParamVector, v: &ParamVector, eps: f64, examples: &[&Example]) -> Result<bool> {
    if matches!(model, Model::Linear(_)) {
        return Ok(true);
    }
    let plus = w.add(&v.scaled(eps))?;
    let minus = w.add(&v.scaled(-eps))?;
    for z in examples {
        if model.kink_margin(&plus, &z.x) < KINK_MARGIN
            || model.kink_margin(&minus, &z.x) < KINK_MARGIN
            || model.activation_pattern(&plus, &z.x) != model.activation_pattern(&minus, &z.x)
        {
            return Ok(false);
        }
    }
    Ok(true)
}

/// `vᵀ Ĥ v` with `Ĥv = (g(w + eps·v) − g(w − eps·v)) / (2 eps)`, `g` the mean gradient.
fn quadratic_form(model: &Model, w: &ParamVector, v: &ParamVector, eps: f64, examples: &[&Example]) -> Result<f64> {
    let gp = model.batch_grad(&w.add(&v.scaled(eps))?, examples)?;
    let gm = model.batch_grad(&w.add(&v.scaled(-eps))?, examples)?;
    let mut hv = gp.sub(&gm)?;
    hv.scale(1.0 / (2.0 * eps));
    if !hv.is_finite() {
        return Err(Error::NumericFailure {
            coord: hv.as_slice().iter().position(|x| !x.is_finite()).unwrap_or(0),
            detail: "non-finite Hessian-vector product".into(),
        });
    }
    v.dot(&hv)
}

/// Hutchinson estimate of the mean Hessian trace over `examples` using the
/// supplied probe vectors.
pub fn hutchinson_trace_with_probes(
    model: &Model,
    w: &ParamVector,
    examples: &[&Example],
    probes: &[ParamVector],
    eps: f64,
) -> Result<FlatnessEstimate> {
    if probes.is_empty() {
        return Err(Error::invalid("need at least one probe"));
    }
    if examples.is_empty() {
        return Err(Error::invalid("trace estimate needs examples"));
    }
    let values = probes
        .iter()
        .map(|v| quadratic_form(model, w, v, eps, examples))
        .collect::<Result<Vec<_>>>()?;
    let (value, stderr) = mean_and_stderr(&values);
    Ok(FlatnessEstimate {
        kind: FlatnessKind::HessianTrace,
        value,
        stderr,
        samples: probes.len(),
        total_var: 0.0,
    })
}

/// Hutchinson estimate with `k_probes` Rademacher probes from `stream`.
pub fn hutchinson_trace(
    model: &Model,
    w: &ParamVector,
    examples: &[&Example],
    k_probes: usize,
    eps: f64,
    stream: &mut SeededStream,
) -> Result<FlatnessEstimate> {
    if k_probes == 0 {
        return Err(Error::invalid("need at least one probe"));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("HVP step must be positive"));
    }
    let mut probes = Vec::with_capacity(k_probes);
    for _ in 0..k_probes {
        let mut v = rademacher_vector(stream, w.dim())?;
        for _ in 0..KINK_RETRIES {
            if probe_is_clean(model, w, &v, eps, examples)? {
                break;
            }
            v = rademacher_vector(stream, w.dim())?;
        }
        probes.push(v);
    }
    hutchinson_trace_with_probes(model, w, examples, &probes, eps)
}

/// Monte-Carlo `γ(w, s) = E[L_s(w + Δ) − L_s(w)]` with `Δ ~ N(0, total_var·I)`.
pub fn gamma_mc(
    model: &Model,
    w: &ParamVector,
    examples: &[&Example],
    total_var: f64,
    k: usize,
    stream: &mut SeededStream,
) -> Result<FlatnessEstimate> {
    let deltas = draw_perturbations(w.dim(), total_var, k, stream)?;
    gamma_with(model, w, examples, total_var, &deltas)
}

pub(crate) fn draw_perturbations(dim: usize, total_var: f64, k: usize, stream: &mut SeededStream) -> Result<Vec<ParamVector>> {
    if k == 0 {
        return Err(Error::invalid("need at least one perturbation sample"));
    }
    if !(total_var >= 0.0 && total_var.is_finite()) {
        return Err(Error::invalid("total variance must be finite and >= 0"));
    }
    let std = total_var.sqrt();
    (0..k).map(|_| gaussian_vector(stream, dim, std)).collect()
}

pub(crate) fn gamma_samples(model: &Model, w: &ParamVector, examples: &[&Example], deltas: &[ParamVector]) -> Result<Vec<f64>> {
    let base = model.mean_loss(w, examples)?;
    deltas
        .iter()
        .map(|d| Ok(model.mean_loss(&w.add(d)?, examples)? - base))
        .collect()
}

fn gamma_with(model: &Model, w: &ParamVector, examples: &[&Example], total_var: f64, deltas: &[ParamVector]) -> Result<FlatnessEstimate> {
    let values = gamma_samples(model, w, examples, deltas)?;
    let (value, stderr) = mean_and_stderr(&values);
    Ok(FlatnessEstimate {
        kind: FlatnessKind::Gamma,
        value,
        stderr,
        samples: deltas.len(),
        total_var,
    })
}

/// `R = (max − min) / 2` over the recorded per-instance losses of the first
/// `upto` steps.
pub fn estimate_r_from_steps(steps: &[StepRecord], upto: usize) -> Result<SubgaussianR> {
    let seen = &steps[..upto.min(steps.len())];
    if seen.is_empty() {
        return Err(Error::InsufficientTrace("no per-instance losses recorded".into()));
    }
    let min_loss = seen.iter().map(|s| s.loss_min).fold(f64::INFINITY, f64::min);
    let max_loss = seen.iter().map(|s| s.loss_max).fold(f64::NEG_INFINITY, f64::max);
    Ok(SubgaussianR {
        r: (max_loss - min_loss) / 2.0,
        min_loss,
        max_loss,
    })
}

pub fn estimate_r(trace: &TrainTrace) -> Result<SubgaussianR> {
    estimate_r_from_steps(&trace.steps, trace.steps.len())
}

/// R from an explicit list of losses.
pub fn r_from_losses(losses: &[f64]) -> Result<SubgaussianR> {
    if losses.is_empty() {
        return Err(Error::InsufficientTrace("no losses".into()));
    }
    let min_loss = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_loss = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(SubgaussianR {
        r: (max_loss - min_loss) / 2.0,
        min_loss,
        max_loss,
    })
}

/// One row of the estimator report CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorRow {
    pub step: usize,
    pub estimator: String,
    pub value: f64,
    pub stderr: f64,
    pub samples: usize,
    pub mode: String,
}

pub fn write_estimator_csv(rows: &[EstimatorRow], path: &Path) -> Result<()> {
    let mut out = String::from("step,estimator,value,stderr,samples,mode\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step, r.estimator, r.value, r.stderr, r.samples, r.mode
        );
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
