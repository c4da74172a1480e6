//! Generalization bounds assembled from training traces and estimator output.
//!
//! All functions are pure over a [`BoundInputs`] snapshot. Per-step arrays have
//! one entry per SGD step `t = 1..=T`; steps that were not instrumented carry
//! the last logged value forward.

use std::path::Path;

use crate::data::{Dataset, Example};
use crate::error::{Error, Result};
use crate::estimators::{draw_perturbations, gamma_samples, SubgaussianR};
use crate::models::{Model, ModelKind};
use crate::numerics::{ParamVector, SeededStream};
use crate::training::TrainTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoundVariant {
    LogForm,
    OptimalClosedForm,
    Neu,
    CorollaryRecover,
    NormBased,
    LinearNet,
    ReluNet,
    SmoothFlatness,
}

impl BoundVariant {
    pub const ALL: [BoundVariant; 8] = [
        BoundVariant::LogForm,
        BoundVariant::OptimalClosedForm,
        BoundVariant::Neu,
        BoundVariant::CorollaryRecover,
        BoundVariant::NormBased,
        BoundVariant::LinearNet,
        BoundVariant::ReluNet,
        BoundVariant::SmoothFlatness,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BoundVariant::LogForm => "log_form",
            BoundVariant::OptimalClosedForm => "optimal_closed_form",
            BoundVariant::Neu => "neu",
            BoundVariant::CorollaryRecover => "corollary_recover",
            BoundVariant::NormBased => "norm_based",
            BoundVariant::LinearNet => "linear_net",
            BoundVariant::ReluNet => "relu_net",
            BoundVariant::SmoothFlatness => "smooth_flatness",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        BoundVariant::ALL
            .iter()
            .copied()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown bound variant '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundInputs {
    pub r: SubgaussianR,
    pub d: usize,
    pub n: usize,
    pub model_kind: Option<ModelKind>,
    pub lr: Vec<f64>,
    pub dispersion: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Per-step `‖g(W_{t-1}, B_t)‖²`.
    pub grad_norm_sq: Vec<f64>,
    /// Per-step mean loss `L̄_t`.
    pub mean_loss: Vec<f64>,
    /// Per-step activation-weighted mean loss (two-layer ReLU only).
    pub weighted_loss: Option<Vec<f64>>,
    pub psi: Option<Vec<f64>>,
    /// Activation fraction at `W_T`.
    pub final_activation: Option<f64>,
    pub trace_mean: Option<f64>,
    /// `|γ(W_T, S) − γ(W_T, S')|` when computed.
    pub flatness_empirical: Option<f64>,
    pub beta: Option<f64>,
    /// Largest `|‖x‖ − 1|` over the data; the linear/ReLU bounds assume unit-norm inputs.
    pub input_norm_deviation: Option<f64>,
    pub notes: Vec<String>,
}

impl BoundInputs {
    /// Inputs with a constant `σ` and `λ`, used for hand-built instances.
    pub fn constant(r: f64, d: usize, n: usize, lr: f64, sigma: f64, dispersion: &[f64]) -> Self {
        let t = dispersion.len();
        BoundInputs {
            r: SubgaussianR {
                r,
                min_loss: 0.0,
                max_loss: 2.0 * r,
            },
            d,
            n,
            model_kind: None,
            lr: vec![lr; t],
            dispersion: dispersion.to_vec(),
            sigma: vec![sigma; t],
            grad_norm_sq: dispersion.to_vec(),
            mean_loss: vec![0.0; t],
            weighted_loss: None,
            psi: None,
            final_activation: None,
            trace_mean: None,
            flatness_empirical: None,
            beta: None,
            input_norm_deviation: None,
            notes: Vec::new(),
        }
    }

    /// Build inputs from the first `upto` steps of a trace with constant `σ`.
    pub fn from_trace(trace: &TrainTrace, sigma: f64, upto: usize) -> Result<Self> {
        let steps = &trace.steps[..upto.min(trace.steps.len())];
        if steps.is_empty() {
            return Err(Error::InsufficientTrace("trace has no step records".into()));
        }
        let r = crate::estimators::estimate_r_from_steps(steps, steps.len())?;
        let mut notes = Vec::new();

        let dispersion = carry_forward(steps.iter().map(|s| s.dispersion))
            .ok_or_else(|| Error::InsufficientTrace("dispersion column is empty".into()))?;
        let mean_loss = match carry_forward(steps.iter().map(|s| s.mean_loss)) {
            Some(v) => v,
            None => {
                notes.push("mean loss taken from batch losses".to_string());
                steps.iter().map(|s| s.batch_loss).collect()
            }
        };
        let weighted_loss = carry_forward(steps.iter().map(|s| s.weighted_loss));
        let psi = carry_forward(steps.iter().map(|s| s.psi));
        let final_step = steps.last().map(|s| s.step).unwrap_or(0);
        let final_activation = trace
            .epochs
            .iter()
            .find(|e| e.step == final_step)
            .and_then(|e| e.activation_frac)
            .or_else(|| steps.iter().rev().find_map(|s| s.activation_frac));

        Ok(BoundInputs {
            r,
            d: trace.dim,
            n: trace.n_train,
            model_kind: Some(trace.model_kind),
            lr: steps.iter().map(|s| s.lr).collect(),
            dispersion,
            sigma: vec![sigma; steps.len()],
            grad_norm_sq: steps.iter().map(|s| s.grad_norm * s.grad_norm).collect(),
            mean_loss,
            weighted_loss,
            psi,
            final_activation,
            trace_mean: None,
            flatness_empirical: None,
            beta: None,
            input_norm_deviation: None,
            notes,
        })
    }

    pub fn steps(&self) -> usize {
        self.lr.len()
    }

    pub fn total_var(&self) -> f64 {
        self.sigma.iter().map(|s| s * s).sum()
    }

    fn check(&self) -> Result<()> {
        let t = self.lr.len();
        let lens = [self.dispersion.len(), self.sigma.len(), self.grad_norm_sq.len(), self.mean_loss.len()];
        if lens.iter().any(|&l| l != t)
            || self.weighted_loss.as_ref().is_some_and(|v| v.len() != t)
            || self.psi.as_ref().is_some_and(|v| v.len() != t)
        {
            return Err(Error::invalid("per-step arrays must share one length"));
        }
        if self.n == 0 {
            return Err(Error::invalid("n must be positive"));
        }
        if self.dispersion.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::invalid("dispersion values must be finite and >= 0"));
        }
        Ok(())
    }

    fn check_sigma(&self) -> Result<()> {
        if self.sigma.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("sigma_t must be positive"));
        }
        Ok(())
    }

    fn constant_sigma(&self) -> Option<f64> {
        let s0 = *self.sigma.first()?;
        self.sigma.iter().all(|&s| s == s0).then_some(s0)
    }

    fn r2_over_n(&self) -> f64 {
        self.r.r * self.r.r / self.n as f64
    }
}

fn carry_forward(values: impl Iterator<Item = Option<f64>>) -> Option<Vec<f64>> {
    let mut last = None;
    let mut out = Vec::new();
    let mut any = false;
    for v in values {
        if let Some(x) = v {
            last = Some(x);
            any = true;
        }
        out.push(last);
    }
    if !any {
        return None;
    }
    // Leading gaps take the first logged value.
    let first = out.iter().flatten().next().copied()?;
    Some(out.into_iter().map(|v| v.unwrap_or(first)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub variant: BoundVariant,
    pub trajectory_term: f64,
    pub flatness_term: f64,
    pub total: f64,
    pub r: f64,
    pub d: usize,
    pub n: usize,
    pub t: usize,
    pub sigma_used: f64,
    pub trace_mean: Option<f64>,
    pub notes: String,
}

impl BoundReport {
    fn new(variant: BoundVariant, inputs: &BoundInputs, trajectory: f64, flatness: f64, sigma: f64, notes: Vec<String>) -> Self {
        let mut all = inputs.notes.clone();
        all.extend(notes);
        BoundReport {
            variant,
            trajectory_term: trajectory,
            flatness_term: flatness,
            total: trajectory + flatness,
            r: inputs.r.r,
            d: inputs.d,
            n: inputs.n,
            t: inputs.steps(),
            sigma_used: sigma,
            trace_mean: inputs.trace_mean,
            notes: all.join("; "),
        }
    }
}

/// `√((R²d/n) Σ_t log(λ_t² V_t / (d σ_t²) + 1))`.
pub fn trajectory_log_term(inputs: &BoundInputs) -> Result<f64> {
    inputs.check()?;
    inputs.check_sigma()?;
    let d = inputs.d as f64;
    if inputs.d == 0 {
        return Err(Error::invalid("d must be positive"));
    }
    let sum: f64 = (0..inputs.steps())
        .map(|t| {
            let (l, v, s) = (inputs.lr[t], inputs.dispersion[t], inputs.sigma[t]);
            (l * l * v / (d * s * s)).ln_1p()
        })
        .sum();
    Ok((inputs.r2_over_n() * d * sum).sqrt())
}

/// `√((R²/n) Σ_t λ_t² V_t / σ_t²)`.
pub fn trajectory_linear_term(inputs: &BoundInputs) -> Result<f64> {
    inputs.check()?;
    inputs.check_sigma()?;
    let sum: f64 = (0..inputs.steps())
        .map(|t| {
            let (l, v, s) = (inputs.lr[t], inputs.dispersion[t], inputs.sigma[t]);
            l * l * v / (s * s)
        })
        .sum();
    Ok((inputs.r2_over_n() * sum).sqrt())
}

fn weighted_sum(lr: &[f64], v: &[f64]) -> f64 {
    lr.iter().zip(v).map(|(l, v)| l * l * v).sum()
}

/// Minimizer of `A/σ + Bσ²`: returns `(σ*, A/σ*, Bσ*²)`.
pub fn optimal_sigma(a: f64, b: f64) -> (f64, f64, f64) {
    if a == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    if b == 0.0 {
        return (f64::INFINITY, 0.0, 0.0);
    }
    let s = libm::cbrt(a / (2.0 * b));
    (s, a / s, b * s * s)
}

fn cube_root_report(
    variant: BoundVariant,
    inputs: &BoundInputs,
    per_step: &[f64],
    curvature: Option<f64>,
    mut notes: Vec<String>,
) -> Result<BoundReport> {
    inputs.check()?;
    if per_step.len() != inputs.steps() {
        return Err(Error::invalid("per-step arrays must share one length"));
    }
    let curvature = curvature.ok_or_else(|| Error::InsufficientTrace("trace_mean is required".into()))?;
    let a = (inputs.r2_over_n() * weighted_sum(&inputs.lr, per_step)).sqrt();
    let b = inputs.steps() as f64 * curvature / 2.0;
    if curvature < 0.0 {
        notes.push("warning: negative curvature estimate; flatness assumption fails and no finite minimizer exists".into());
        let mut report = BoundReport::new(variant, inputs, f64::NAN, f64::NAN, f64::NAN, notes);
        report.total = f64::NAN;
        return Ok(report);
    }
    let (sigma, traj, flat) = optimal_sigma(a, b);
    Ok(BoundReport::new(variant, inputs, traj, flat, sigma, notes))
}

/// Closed-form bound with `σ` optimized out:
/// `(3/2)((R²T/n) Σ_t λ_t² V_t · trace)^{1/3}`.
pub fn optimal_bound(inputs: &BoundInputs) -> Result<BoundReport> {
    cube_root_report(
        BoundVariant::OptimalClosedForm,
        inputs,
        &inputs.dispersion,
        inputs.trace_mean,
        Vec::new(),
    )
}

/// As [`optimal_bound`] with raw squared gradient norms in place of dispersion.
pub fn norm_based_bound(inputs: &BoundInputs) -> Result<BoundReport> {
    if inputs.grad_norm_sq.iter().any(|&g| g < 0.0 || !g.is_finite()) {
        return Err(Error::invalid("squared gradient norms must be finite and >= 0"));
    }
    cube_root_report(
        BoundVariant::NormBased,
        inputs,
        &inputs.grad_norm_sq,
        inputs.trace_mean,
        Vec::new(),
    )
}

fn input_norm_notes(inputs: &BoundInputs) -> Vec<String> {
    match inputs.input_norm_deviation {
        Some(dev) if dev > 1e-9 => vec![format!("inputs are not unit-norm (max deviation {dev:.3e})")],
        _ => Vec::new(),
    }
}

/// `3(Σ_t R²λ_t²T/(4n) · L̄_t)^{1/3}` for linear networks.
pub fn linear_net_bound(inputs: &BoundInputs) -> Result<BoundReport> {
    if inputs.model_kind == Some(ModelKind::Mlp) {
        return Err(Error::UnsupportedModel("linear_net bound needs a regression trace".into()));
    }
    if inputs.mean_loss.iter().any(|&l| l < 0.0 || !l.is_finite()) {
        return Err(Error::invalid("mean losses must be finite and >= 0"));
    }
    let doubled: Vec<f64> = inputs.mean_loss.iter().map(|l| 2.0 * l).collect();
    cube_root_report(
        BoundVariant::LinearNet,
        inputs,
        &doubled,
        Some(1.0),
        input_norm_notes(inputs),
    )
}

/// `3(ā_T Σ_t R²λ_t²T/(4n) · wL_t)^{1/3}` for two-layer ReLU networks, with
/// `wL_t` the activation-weighted mean loss and `ā_T` the final activation fraction.
pub fn relu_net_bound(inputs: &BoundInputs) -> Result<BoundReport> {
    if let Some(kind) = inputs.model_kind {
        if kind != ModelKind::Relu {
            return Err(Error::UnsupportedModel(format!(
                "relu_net bound needs a two-layer ReLU trace, got {}",
                kind.as_str()
            )));
        }
    }
    let weighted = inputs
        .weighted_loss
        .as_ref()
        .ok_or_else(|| Error::InsufficientTrace("activation-weighted losses were not recorded".into()))?;
    let activation = inputs
        .final_activation
        .ok_or_else(|| Error::InsufficientTrace("final activation fraction was not recorded".into()))?;
    let doubled: Vec<f64> = weighted.iter().map(|l| 2.0 * l).collect();
    cube_root_report(
        BoundVariant::ReluNet,
        inputs,
        &doubled,
        Some(activation),
        input_norm_notes(inputs),
    )
}

fn comparison_sum(inputs: &BoundInputs, psi: &[f64], v_tilde: &[f64], wp: f64, wv: f64) -> Result<f64> {
    inputs.check()?;
    inputs.check_sigma()?;
    let t = inputs.steps();
    if psi.len() != t || v_tilde.len() != t {
        return Err(Error::invalid(format!(
            "psi ({}) and v_tilde ({}) must have {t} entries",
            psi.len(),
            v_tilde.len()
        )));
    }
    if psi.iter().chain(v_tilde).any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::invalid("psi and v_tilde must be finite and >= 0"));
    }
    Ok((0..t)
        .map(|i| {
            let (l, s) = (inputs.lr[i], inputs.sigma[i]);
            l * l / (s * s) * (wp * psi[i] + wv * v_tilde[i])
        })
        .sum())
}

/// `2√((2R²/n) Σ_t λ_t²/σ_t² (Ψ_t + Ṽ_t))`.
pub fn neu_trajectory_term(inputs: &BoundInputs, psi: &[f64], v_tilde: &[f64]) -> Result<f64> {
    let sum = comparison_sum(inputs, psi, v_tilde, 1.0, 1.0)?;
    Ok(2.0 * (2.0 * inputs.r2_over_n() * sum).sqrt())
}

/// `√((2R²/n) Σ_t λ_t²/σ_t² (3Ψ_t + 2Ṽ_t))`.
pub fn corollary_trajectory_term(inputs: &BoundInputs, psi: &[f64], v_tilde: &[f64]) -> Result<f64> {
    let sum = comparison_sum(inputs, psi, v_tilde, 3.0, 2.0)?;
    Ok((2.0 * inputs.r2_over_n() * sum).sqrt())
}

/// `|γ(w, train) − γ(w, heldout)|` estimated with the same perturbations on both sides.
pub fn flatness_term_empirical(
    model: &Model,
    w_t: &ParamVector,
    train: &Dataset,
    heldout: &Dataset,
    total_var: f64,
    k: usize,
    stream: &mut SeededStream,
) -> Result<f64> {
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::EmptyDataset("flatness needs nonempty train and held-out sets".into()));
    }
    let deltas = draw_perturbations(w_t.dim(), total_var, k, stream)?;
    let tr: Vec<&Example> = train.refs();
    let ho: Vec<&Example> = heldout.refs();
    let a = gamma_samples(model, w_t, &tr, &deltas)?;
    let b = gamma_samples(model, w_t, &ho, &deltas)?;
    let diff: f64 = a.iter().zip(&b).map(|(x, y)| x - y).sum::<f64>() / k as f64;
    Ok(diff.abs())
}

/// `β d Σσ_t²`.
pub fn smooth_flatness_term(beta: f64, d: usize, total_var: f64) -> Result<f64> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::invalid("beta must be positive"));
    }
    if !(total_var >= 0.0) {
        return Err(Error::invalid("total variance must be >= 0"));
    }
    Ok(beta * d as f64 * total_var)
}

/// Flatness paired with the log-form trajectory term: the empirical γ gap when
/// present, else its second-order proxy `(Σσ²/2)·trace`.
fn log_form_flatness(inputs: &BoundInputs) -> (f64, Vec<String>) {
    if let Some(f) = inputs.flatness_empirical {
        (f, vec!["flatness from perturbed-loss gap".into()])
    } else if let Some(tr) = inputs.trace_mean {
        let mut notes = vec!["flatness from Hessian trace proxy".to_string()];
        if tr < 0.0 {
            notes.push("warning: negative trace estimate reported as-is".into());
        }
        (inputs.total_var() / 2.0 * tr, notes)
    } else {
        (0.0, vec!["flatness term not computed".into()])
    }
}

/// Evaluate one variant into a report.
pub fn evaluate(variant: BoundVariant, inputs: &BoundInputs) -> Result<BoundReport> {
    let sigma = inputs.constant_sigma().unwrap_or(f64::NAN);
    match variant {
        BoundVariant::LogForm => {
            let traj = trajectory_log_term(inputs)?;
            let (flat, notes) = log_form_flatness(inputs);
            Ok(BoundReport::new(variant, inputs, traj, flat, sigma, notes))
        }
        BoundVariant::OptimalClosedForm => optimal_bound(inputs),
        BoundVariant::NormBased => norm_based_bound(inputs),
        BoundVariant::LinearNet => linear_net_bound(inputs),
        BoundVariant::ReluNet => relu_net_bound(inputs),
        BoundVariant::Neu | BoundVariant::CorollaryRecover => {
            let psi = inputs
                .psi
                .as_ref()
                .ok_or_else(|| Error::InsufficientTrace("psi column is empty".into()))?;
            // Single-draw deterministic setting: Ṽ_t coincides with V_t.
            let traj = if variant == BoundVariant::Neu {
                neu_trajectory_term(inputs, psi, &inputs.dispersion)?
            } else {
                corollary_trajectory_term(inputs, psi, &inputs.dispersion)?
            };
            let (flat, notes) = log_form_flatness(inputs);
            Ok(BoundReport::new(variant, inputs, traj, flat, sigma, notes))
        }
        BoundVariant::SmoothFlatness => {
            let beta = inputs
                .beta
                .ok_or_else(|| Error::InsufficientTrace("smooth_flatness needs beta".into()))?;
            let traj = trajectory_log_term(inputs)?;
            let flat = smooth_flatness_term(beta, inputs.d, inputs.total_var())?;
            Ok(BoundReport::new(variant, inputs, traj, flat, sigma, Vec::new()))
        }
    }
}

/// Mean of per-replicate log-form trajectory terms; an approximation of the
/// outer expectation over the auxiliary weights.
pub fn multi_seed_log_term(replicates: &[BoundInputs]) -> Result<f64> {
    if replicates.is_empty() {
        return Err(Error::InsufficientTrace("no replicates".into()));
    }
    let mut sum = 0.0;
    for r in replicates {
        sum += trajectory_log_term(r)?;
    }
    Ok(sum / replicates.len() as f64)
}

pub const BOUND_CSV_HEADER: [&str; 11] = [
    "variant",
    "trajectory_term",
    "flatness_term",
    "total",
    "R",
    "d",
    "n",
    "T",
    "sigma_used",
    "trace_mean",
    "notes",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write reports followed by an `empirical_gap` row when `gap` is given.
pub fn write_bound_csv(reports: &[BoundReport], gap: Option<f64>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(BOUND_CSV_HEADER)?;
    for r in reports {
        w.write_record([
            r.variant.as_str().to_string(),
            r.trajectory_term.to_string(),
            r.flatness_term.to_string(),
            r.total.to_string(),
            r.r.to_string(),
            r.d.to_string(),
            r.n.to_string(),
            r.t.to_string(),
            r.sigma_used.to_string(),
            opt(r.trace_mean),
            r.notes.clone(),
        ])?;
    }
    if let Some(g) = gap {
        let (d, n, t, rr) = reports
            .first()
            .map(|r| (r.d.to_string(), r.n.to_string(), r.t.to_string(), r.r.to_string()))
            .unwrap_or_default();
        w.write_record([
            "empirical_gap".to_string(),
            String::new(),
            String::new(),
            g.to_string(),
            rr,
            d,
            n,
            t,
            String::new(),
            String::new(),
            "test loss minus train loss".to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
