//! The three model families: linear regression, the two-layer ReLU network
//! with fixed output signs, and a fully-connected rectifier MLP classifier.
//!
//! Weight layout (also the checkpoint layout):
//! - `LinearNet`: `w[0..d0]`.
//! - `TwoLayerReLU`: row `r` of the first layer at `w[r*d0 .. (r+1)*d0]`.
//! - `MlpClassifier`: layer by layer, the `out × in` weight matrix row-major,
//!   followed by that layer's `out` biases.
//!
//! Rectifier derivatives use `𝕀{u ≥ 0}`: a unit sitting exactly at zero
//! counts as active.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Example, Label, Task};
use crate::error::{Error, Result};
use crate::numerics::{gaussian_vector, ParamVector, SeededStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Relu,
    Mlp,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Linear => "linear",
            ModelKind::Relu => "relu",
            ModelKind::Mlp => "mlp",
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `f(w, x) = ⟨w, x⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearNet {
    d0: usize,
}

impl LinearNet {
    pub fn new(d0: usize) -> Result<Self> {
        if d0 == 0 {
            return Err(Error::invalid("linear net needs d0 >= 1"));
        }
        Ok(Self { d0 })
    }

    pub fn predict(&self, w: &[f64], x: &[f64]) -> f64 {
        dot(w, x)
    }
}

/// `f(W, x) = m^{-1/2} Σ_r A_r max(W_rᵀx, 0)` with only `W` trained.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerReLU {
    d0: usize,
    width: usize,
    sign_seed: u64,
    signs: Vec<f64>,
}

impl TwoLayerReLU {
    /// Output signs are drawn uniformly from ±1 using `sign_seed`.
    pub fn new(d0: usize, width: usize, sign_seed: u64) -> Result<Self> {
        if d0 == 0 || width == 0 {
            return Err(Error::invalid("relu net needs d0, width >= 1"));
        }
        let mut s = SeededStream::new(sign_seed).substream("output-signs");
        let signs = (0..width).map(|_| s.next_sign()).collect();
        Ok(Self {
            d0,
            width,
            sign_seed,
            signs,
        })
    }

    /// Construct with explicit signs (tests and hand-built instances).
    pub fn with_signs(d0: usize, signs: Vec<f64>) -> Result<Self> {
        if d0 == 0 || signs.is_empty() {
            return Err(Error::invalid("relu net needs d0, width >= 1"));
        }
        if signs.iter().any(|s| s.abs() != 1.0) {
            return Err(Error::invalid("output signs must be ±1"));
        }
        Ok(Self {
            d0,
            width: signs.len(),
            sign_seed: 0,
            signs,
        })
    }

    pub fn d0(&self) -> usize {
        self.d0
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn signs(&self) -> &[f64] {
        &self.signs
    }

    pub fn sign_seed(&self) -> u64 {
        self.sign_seed
    }

    fn row<'a>(&self, w: &'a [f64], r: usize) -> &'a [f64] {
        &w[r * self.d0..(r + 1) * self.d0]
    }

    pub fn predict(&self, w: &[f64], x: &[f64]) -> f64 {
        let s: f64 = (0..self.width)
            .map(|r| self.signs[r] * dot(self.row(w, r), x).max(0.0))
            .sum();
        s / (self.width as f64).sqrt()
    }

    /// Number of rows with `W_rᵀx ≥ 0`.
    pub fn active_rows(&self, w: &[f64], x: &[f64]) -> usize {
        (0..self.width)
            .filter(|&r| dot(self.row(w, r), x) >= 0.0)
            .count()
    }
}

/// Rectifier MLP with softmax cross-entropy output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpClassifier {
    dims: Vec<usize>,
    offsets: Vec<usize>,
    len: usize,
}

struct Forward {
    /// activations per layer, `acts[0] = x`
    acts: Vec<Vec<f64>>,
    /// pre-activations of each non-input layer
    pre: Vec<Vec<f64>>,
}

impl MlpClassifier {
    /// `dims = [input, hidden..., classes]`.
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("invalid MLP layer dims {dims:?}")));
        }
        if *dims.last().unwrap() < 2 {
            return Err(Error::invalid("MLP needs at least 2 classes"));
        }
        let mut offsets = Vec::with_capacity(dims.len());
        let mut len = 0;
        for l in 0..dims.len() - 1 {
            offsets.push(len);
            len += dims[l + 1] * dims[l] + dims[l + 1];
        }
        Ok(Self { dims, offsets, len })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    fn forward(&self, w: &[f64], x: &[f64]) -> Forward {
        let mut acts = Vec::with_capacity(self.dims.len());
        let mut pre = Vec::with_capacity(self.layers());
        acts.push(x.to_vec());
        for l in 0..self.layers() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let weights = &w[self.offsets[l]..self.offsets[l] + fan_in * fan_out];
            let biases = &w[self.offsets[l] + fan_in * fan_out..self.offsets[l] + fan_in * fan_out + fan_out];
            let input = &acts[l];
            let z: Vec<f64> = (0..fan_out)
                .map(|o| dot(&weights[o * fan_in..(o + 1) * fan_in], input) + biases[o])
                .collect();
            let last = l + 1 == self.layers();
            let a = if last {
                z.clone()
            } else {
                z.iter().map(|v| v.max(0.0)).collect()
            };
            pre.push(z);
            acts.push(a);
        }
        Forward { acts, pre }
    }

    /// Softmax class probabilities.
    pub fn probabilities(&self, w: &[f64], x: &[f64]) -> Vec<f64> {
        softmax(self.forward(w, x).acts.last().unwrap())
    }

    pub fn predict_class(&self, w: &[f64], x: &[f64]) -> usize {
        argmax(self.forward(w, x).acts.last().unwrap())
    }

    fn loss_and_grad(&self, w: &[f64], x: &[f64], y: usize, scale: f64, out: Option<&mut [f64]>) -> f64 {
        let fwd = self.forward(w, x);
        let logits = fwd.acts.last().unwrap();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - logits[y];
        let Some(out) = out else {
            return loss;
        };
        let mut delta: Vec<f64> = logits.iter().map(|v| (v - lse).exp()).collect();
        delta[y] -= 1.0;
        for l in (0..self.layers()).rev() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let off = self.offsets[l];
            let input = &fwd.acts[l];
            for o in 0..fan_out {
                let d = scale * delta[o];
                if d != 0.0 {
                    let row = &mut out[off + o * fan_in..off + (o + 1) * fan_in];
                    for (g, a) in row.iter_mut().zip(input) {
                        *g += d * a;
                    }
                }
                out[off + fan_in * fan_out + o] += d;
            }
            if l > 0 {
                let weights = &w[off..off + fan_in * fan_out];
                let mut prev = vec![0.0; fan_in];
                for o in 0..fan_out {
                    if delta[o] != 0.0 {
                        for (p, wv) in prev.iter_mut().zip(&weights[o * fan_in..(o + 1) * fan_in]) {
                            *p += delta[o] * wv;
                        }
                    }
                }
                for (p, z) in prev.iter_mut().zip(&fwd.pre[l - 1]) {
                    if *z < 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
        loss
    }

    /// On/off state of every hidden unit.
    pub fn activation_pattern(&self, w: &[f64], x: &[f64]) -> Vec<bool> {
        let fwd = self.forward(w, x);
        fwd.pre[..self.layers() - 1]
            .iter()
            .flat_map(|z| z.iter().map(|v| *v >= 0.0))
            .collect()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Linear(LinearNet),
    Relu(TwoLayerReLU),
    Mlp(MlpClassifier),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Linear(_) => ModelKind::Linear,
            Model::Relu(_) => ModelKind::Relu,
            Model::Mlp(_) => ModelKind::Mlp,
        }
    }

    pub fn task(&self) -> Task {
        match self {
            Model::Mlp(_) => Task::Classification,
            _ => Task::Regression,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Model::Linear(m) => m.d0,
            Model::Relu(m) => m.d0,
            Model::Mlp(m) => m.dims[0],
        }
    }

    /// Parameter count `d`.
    pub fn dim(&self) -> usize {
        match self {
            Model::Linear(m) => m.d0,
            Model::Relu(m) => m.d0 * m.width,
            Model::Mlp(m) => m.len,
        }
    }

    /// Initial weights: linear nets start at zero, ReLU rows are `N(0, 1)`
    /// and MLP weights use `N(0, 2/fan_in)` with zero biases. `std` overrides
    /// the linear/ReLU scale.
    pub fn init_weights(&self, stream: &mut SeededStream, std: Option<f64>) -> Result<ParamVector> {
        match self {
            Model::Linear(m) => gaussian_vector(stream, m.d0, std.unwrap_or(0.0)),
            Model::Relu(m) => gaussian_vector(stream, m.d0 * m.width, std.unwrap_or(1.0)),
            Model::Mlp(m) => {
                let mut w = vec![0.0; m.len];
                for l in 0..m.layers() {
                    let (fan_in, fan_out) = (m.dims[l], m.dims[l + 1]);
                    let scale = std.unwrap_or((2.0 / fan_in as f64).sqrt());
                    let block = gaussian_vector(stream, fan_in * fan_out, scale)?;
                    w[m.offsets[l]..m.offsets[l] + fan_in * fan_out].copy_from_slice(block.as_slice());
                }
                Ok(ParamVector::from_vec_unchecked(w))
            }
        }
    }

    fn check(&self, w: &[f64], z: &Example) -> Result<()> {
        if w.len() != self.dim() {
            return Err(Error::invalid(format!(
                "weight dim {} does not match model dim {}",
                w.len(),
                self.dim()
            )));
        }
        if z.x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input dim {} does not match model input dim {}",
                z.x.len(),
                self.input_dim()
            )));
        }
        match (self, z.y) {
            (Model::Mlp(m), Label::Class(c)) if c < m.classes() => Ok(()),
            (Model::Mlp(m), Label::Class(c)) => Err(Error::invalid(format!(
                "class {c} out of range for {} classes",
                m.classes()
            ))),
            (Model::Mlp(_), Label::Value(_)) => Err(Error::invalid("classifier needs a class label")),
            (_, Label::Value(_)) => Ok(()),
            (_, Label::Class(_)) => Err(Error::invalid("regression model needs a real label")),
        }
    }

    /// Adds `scale · ∇ℓ(w, z)` into `out` and returns `ℓ(w, z)`. Inputs must
    /// already be validated.
    fn loss_grad_into(&self, w: &[f64], z: &Example, scale: f64, out: Option<&mut [f64]>) -> f64 {
        match (self, z.y) {
            (Model::Linear(m), Label::Value(y)) => {
                let resid = m.predict(w, &z.x) - y;
                if let Some(out) = out {
                    for (g, x) in out.iter_mut().zip(&z.x) {
                        *g += scale * resid * x;
                    }
                }
                0.5 * resid * resid
            }
            (Model::Relu(m), Label::Value(y)) => {
                let resid = m.predict(w, &z.x) - y;
                if let Some(out) = out {
                    let c = scale * resid / (m.width as f64).sqrt();
                    for r in 0..m.width {
                        if dot(m.row(w, r), &z.x) >= 0.0 {
                            let row = &mut out[r * m.d0..(r + 1) * m.d0];
                            for (g, x) in row.iter_mut().zip(&z.x) {
                                *g += c * m.signs[r] * x;
                            }
                        }
                    }
                }
                0.5 * resid * resid
            }
            (Model::Mlp(m), Label::Class(c)) => m.loss_and_grad(w, &z.x, c, scale, out),
            _ => unreachable!("labels validated by check()"),
        }
    }

    pub fn loss(&self, w: &ParamVector, z: &Example) -> Result<f64> {
        self.check(w.as_slice(), z)?;
        Ok(self.loss_grad_into(w.as_slice(), z, 0.0, None))
    }

    pub fn per_example_grad(&self, w: &ParamVector, z: &Example) -> Result<ParamVector> {
        self.check(w.as_slice(), z)?;
        let mut g = vec![0.0; self.dim()];
        self.loss_grad_into(w.as_slice(), z, 1.0, Some(&mut g));
        Ok(ParamVector::from_vec_unchecked(g))
    }

    /// Per-instance losses and the mean gradient over `batch`, summed in index order.
    pub fn batch_losses_grad(&self, w: &ParamVector, batch: &[&Example]) -> Result<(Vec<f64>, ParamVector)> {
        if batch.is_empty() {
            return Err(Error::invalid("batch must be nonempty"));
        }
        let mut g = vec![0.0; self.dim()];
        let mut losses = Vec::with_capacity(batch.len());
        for z in batch {
            self.check(w.as_slice(), z)?;
            losses.push(self.loss_grad_into(w.as_slice(), z, 1.0, Some(&mut g)));
        }
        let inv = 1.0 / batch.len() as f64;
        g.iter_mut().for_each(|v| *v *= inv);
        Ok((losses, ParamVector::from_vec_unchecked(g)))
    }

    /// Mean loss and mean gradient over `batch`.
    pub fn batch_loss_grad(&self, w: &ParamVector, batch: &[&Example]) -> Result<(f64, ParamVector)> {
        let (losses, g) = self.batch_losses_grad(w, batch)?;
        Ok((losses.iter().sum::<f64>() / losses.len() as f64, g))
    }

    pub fn batch_grad(&self, w: &ParamVector, batch: &[&Example]) -> Result<ParamVector> {
        Ok(self.batch_loss_grad(w, batch)?.1)
    }

    /// Per-example losses in order.
    pub fn losses(&self, w: &ParamVector, examples: &[&Example]) -> Result<Vec<f64>> {
        examples.iter().map(|z| self.loss(w, z)).collect()
    }

    pub fn mean_loss(&self, w: &ParamVector, examples: &[&Example]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::invalid("cannot average over an empty example set"));
        }
        Ok(self.losses(w, examples)?.iter().sum::<f64>() / examples.len() as f64)
    }

    /// Classification accuracy; `None` for regression models.
    pub fn accuracy(&self, w: &ParamVector, examples: &[&Example]) -> Result<Option<f64>> {
        let Model::Mlp(m) = self else {
            return Ok(None);
        };
        if examples.is_empty() {
            return Err(Error::invalid("cannot score an empty example set"));
        }
        let mut hits = 0usize;
        for z in examples {
            self.check(w.as_slice(), z)?;
            if Some(m.predict_class(w.as_slice(), &z.x)) == z.y.class() {
                hits += 1;
            }
        }
        Ok(Some(hits as f64 / examples.len() as f64))
    }

    /// Exact Hessian trace of the squared loss for the regression families.
    pub fn analytic_hessian_trace(&self, w: &ParamVector, z: &Example) -> Result<f64> {
        self.check(w.as_slice(), z)?;
        let sq: f64 = z.x.iter().map(|v| v * v).sum();
        match self {
            Model::Linear(_) => Ok(sq),
            Model::Relu(m) => Ok(sq * m.active_rows(w.as_slice(), &z.x) as f64 / m.width as f64),
            Model::Mlp(_) => Err(Error::UnsupportedModel(
                "analytic Hessian trace is only available for linear and two-layer ReLU nets".into(),
            )),
        }
    }

    /// Fraction of (row, example) pairs with `W_rᵀx ≥ 0`.
    pub fn activation_fraction(&self, w: &ParamVector, examples: &[&Example]) -> Result<f64> {
        let Model::Relu(m) = self else {
            return Err(Error::UnsupportedModel(
                "activation fraction is defined for the two-layer ReLU net".into(),
            ));
        };
        if examples.is_empty() {
            return Err(Error::invalid("activation fraction needs examples"));
        }
        let mut active = 0usize;
        for z in examples {
            self.check(w.as_slice(), z)?;
            active += m.active_rows(w.as_slice(), &z.x);
        }
        Ok(active as f64 / (examples.len() * m.width) as f64)
    }

    /// Mean over examples of `(Σ_r 𝕀_r / m) · ℓ(w, z)`.
    pub fn activation_weighted_loss(&self, w: &ParamVector, examples: &[&Example]) -> Result<f64> {
        let Model::Relu(m) = self else {
            return Err(Error::UnsupportedModel(
                "activation-weighted loss is defined for the two-layer ReLU net".into(),
            ));
        };
        if examples.is_empty() {
            return Err(Error::invalid("activation-weighted loss needs examples"));
        }
        let mut total = 0.0;
        for z in examples {
            let loss = self.loss(w, z)?;
            total += m.active_rows(w.as_slice(), &z.x) as f64 / m.width as f64 * loss;
        }
        Ok(total / examples.len() as f64)
    }

    /// On/off state of every rectifier unit; empty for the linear net.
    pub fn activation_pattern(&self, w: &ParamVector, x: &[f64]) -> Vec<bool> {
        match self {
            Model::Linear(_) => Vec::new(),
            Model::Relu(m) => (0..m.width).map(|r| dot(m.row(w.as_slice(), r), x) >= 0.0).collect(),
            Model::Mlp(m) => m.activation_pattern(w.as_slice(), x),
        }
    }

    /// Smallest `|pre-activation|` over all rectifier units for input `x`.
    pub fn kink_margin(&self, w: &ParamVector, x: &[f64]) -> f64 {
        match self {
            Model::Linear(_) => f64::INFINITY,
            Model::Relu(m) => (0..m.width)
                .map(|r| dot(m.row(w.as_slice(), r), x).abs())
                .fold(f64::INFINITY, f64::min),
            Model::Mlp(m) => {
                let fwd = m.forward(w.as_slice(), x);
                fwd.pre[..m.layers() - 1]
                    .iter()
                    .flat_map(|z| z.iter().map(|v| v.abs()))
                    .fold(f64::INFINITY, f64::min)
            }
        }
    }
}

const CHECKPOINT_MAGIC: &str = "genbound-checkpoint v1";

/// Writes a text header (kind, dims, sign seed, length) terminated by a blank
/// line, followed by the weights as little-endian `f64`.
pub fn write_checkpoint(path: &Path, model: &Model, w: &ParamVector) -> Result<()> {
    if w.dim() != model.dim() {
        return Err(Error::invalid("checkpoint weights do not match model dim"));
    }
    let (dims, sign_seed) = match model {
        Model::Linear(m) => (vec![m.d0], 0),
        Model::Relu(m) => (vec![m.d0, m.width], m.sign_seed),
        Model::Mlp(m) => (m.dims.clone(), 0),
    };
    let dims: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
    let mut bytes = format!(
        "{CHECKPOINT_MAGIC}\nkind={}\ndims={}\nsign_seed={sign_seed}\nlen={}\n\n",
        model.kind().as_str(),
        dims.join(","),
        w.dim()
    )
    .into_bytes();
    if let Model::Relu(m) = model {
        if m.signs != TwoLayerReLU::new(m.d0, m.width, m.sign_seed)?.signs {
            return Err(Error::invalid(
                "relu net with hand-set signs cannot be reconstructed from its sign seed",
            ));
        }
    }
    for v in w.as_slice() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(Model, ParamVector)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::Parse {
            line: 0,
            detail: "checkpoint header not terminated".into(),
        })?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| Error::Parse {
        line: 0,
        detail: "checkpoint header is not UTF-8".into(),
    })?;
    let mut lines = header.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(Error::Parse {
            line: 1,
            detail: "bad checkpoint magic".into(),
        });
    }
    let mut kind = "";
    let mut dims = Vec::new();
    let mut sign_seed = 0u64;
    let mut len = 0usize;
    for (i, line) in lines.enumerate() {
        let bad = || Error::Parse {
            line: i + 2,
            detail: format!("bad header line {line:?}"),
        };
        let (key, value) = line.split_once('=').ok_or_else(bad)?;
        match key {
            "kind" => kind = value,
            "dims" => {
                dims = value
                    .split(',')
                    .map(|d| d.parse::<usize>().map_err(|_| bad()))
                    .collect::<Result<Vec<_>>>()?
            }
            "sign_seed" => sign_seed = value.parse().map_err(|_| bad())?,
            "len" => len = value.parse().map_err(|_| bad())?,
            _ => return Err(bad()),
        }
    }
    let model = match (kind, dims.as_slice()) {
        ("linear", [d0]) => Model::Linear(LinearNet::new(*d0)?),
        ("relu", [d0, width]) => Model::Relu(TwoLayerReLU::new(*d0, *width, sign_seed)?),
        ("mlp", _) => Model::Mlp(MlpClassifier::new(dims.clone())?),
        _ => {
            return Err(Error::Parse {
                line: 2,
                detail: format!("unknown model kind {kind:?} with dims {dims:?}"),
            })
        }
    };
    let payload = &bytes[split + 2..];
    if len != model.dim() || payload.len() != len * 8 {
        return Err(Error::Parse {
            line: 0,
            detail: format!(
                "checkpoint payload has {} bytes, expected {}",
                payload.len(),
                model.dim() * 8
            ),
        });
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((model, ParamVector::new(values)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::central_diff_gradient;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn linear_loss_and_grad() {
        let m = Model::Linear(LinearNet::new(2).unwrap());
        let z = Example::regression(vec![1.0, 0.0], 1.0);
        let w = pv(&[0.0, 0.0]);
        assert_eq!(m.loss(&w, &z).unwrap(), 0.5);
        assert_eq!(m.per_example_grad(&w, &z).unwrap().as_slice(), &[-1.0, 0.0]);
    }

    #[test]
    fn relu_single_unit() {
        let m = Model::Relu(TwoLayerReLU::with_signs(2, vec![1.0]).unwrap());
        let z = Example::regression(vec![1.0, 0.0], 1.0);
        assert_eq!(m.loss(&pv(&[1.0, 0.0]), &z).unwrap(), 0.0);
        let g = m.per_example_grad(&pv(&[-1.0, 0.0]), &z).unwrap();
        assert_eq!(g.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn mlp_zero_weights_uniform_softmax() {
        let mlp = MlpClassifier::new(vec![3, 4, 10]).unwrap();
        let m = Model::Mlp(mlp.clone());
        let w = ParamVector::zeros(m.dim());
        let z = Example::classification(vec![0.3, -0.2, 1.0], 7);
        assert!((m.loss(&w, &z).unwrap() - 10f64.ln()).abs() < 1e-12);
        let p = mlp.probabilities(w.as_slice(), &z.x);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dim_mismatch_errors() {
        let m = Model::Linear(LinearNet::new(2).unwrap());
        let z = Example::regression(vec![1.0, 0.0], 1.0);
        assert!(m.loss(&pv(&[0.0, 0.0, 0.0]), &z).is_err());
        let bad = Example::regression(vec![1.0], 1.0);
        assert!(m.per_example_grad(&pv(&[0.0, 0.0]), &bad).is_err());
        assert!(m.batch_grad(&pv(&[0.0, 0.0]), &[]).is_err());
    }

    #[test]
    fn batch_grad_means() {
        let m = Model::Linear(LinearNet::new(2).unwrap());
        let w = pv(&[0.0, 0.0]);
        let a = Example::regression(vec![1.0, 0.0], 1.0);
        let b = Example::regression(vec![1.0, 0.0], -1.0);
        assert_eq!(m.batch_grad(&w, &[&a]).unwrap(), m.per_example_grad(&w, &a).unwrap());
        assert_eq!(m.batch_grad(&w, &[&a, &b]).unwrap().as_slice(), &[0.0, 0.0]);

        let mut s = SeededStream::new(4);
        let mlp = Model::Mlp(MlpClassifier::new(vec![3, 5, 4]).unwrap());
        let w = mlp.init_weights(&mut s, None).unwrap();
        let batch: Vec<Example> = (0..5)
            .map(|i| Example::classification(gaussian_vector(&mut s, 3, 1.0).unwrap().into_vec(), i % 4))
            .collect();
        let refs: Vec<&Example> = batch.iter().collect();
        let g = mlp.batch_grad(&w, &refs).unwrap();
        let mut manual = ParamVector::zeros(mlp.dim());
        for z in &batch {
            manual.axpy(1.0, &mlp.per_example_grad(&w, z).unwrap()).unwrap();
        }
        manual.scale(1.0 / 5.0);
        assert!(g.max_abs_diff(&manual).unwrap() <= 1e-15);
    }

    #[test]
    fn hessian_traces() {
        let lin = Model::Linear(LinearNet::new(2).unwrap());
        let z = Example::regression(vec![0.6, 0.8], 0.3);
        let w = pv(&[0.4, -2.0]);
        let tr = lin.analytic_hessian_trace(&w, &z).unwrap();
        // explicit Hessian is x xᵀ
        let explicit = z.x[0] * z.x[0] + z.x[1] * z.x[1];
        assert!((tr - 1.0).abs() < 1e-15 && (tr - explicit).abs() == 0.0);

        let relu = Model::Relu(TwoLayerReLU::with_signs(2, vec![1.0, -1.0, 1.0, -1.0]).unwrap());
        let z = Example::regression(vec![1.0, 0.0], 0.0);
        let w = pv(&[1.0, 0.0, 2.0, 0.0, -1.0, 0.0, -3.0, 0.0]);
        assert_eq!(relu.analytic_hessian_trace(&w, &z).unwrap(), 0.5);

        let mlp = Model::Mlp(MlpClassifier::new(vec![2, 2]).unwrap());
        let zc = Example::classification(vec![1.0, 0.0], 0);
        assert!(matches!(
            mlp.analytic_hessian_trace(&ParamVector::zeros(6), &zc),
            Err(Error::UnsupportedModel(_))
        ));
    }

    #[test]
    fn activation_fraction_examples() {
        let relu = Model::Relu(TwoLayerReLU::with_signs(2, vec![1.0, -1.0]).unwrap());
        let z = Example::regression(vec![0.6, 0.8], 0.0);
        let all_on = pv(&[0.6, 0.8, 0.6, 0.8]);
        assert_eq!(relu.activation_fraction(&all_on, &[&z]).unwrap(), 1.0);
        let all_off = pv(&[-0.6, -0.8, -0.6, -0.8]);
        assert_eq!(relu.activation_fraction(&all_off, &[&z]).unwrap(), 0.0);
        let half = pv(&[0.6, 0.8, -0.6, -0.8]);
        assert_eq!(relu.activation_fraction(&half, &[&z]).unwrap(), 0.5);
        let lin = Model::Linear(LinearNet::new(2).unwrap());
        assert!(lin.activation_fraction(&pv(&[0.0, 0.0]), &[&z]).is_err());
    }

    #[test]
    fn zero_preactivation_counts_as_active() {
        let relu = Model::Relu(TwoLayerReLU::with_signs(2, vec![1.0]).unwrap());
        let z = Example::regression(vec![1.0, 0.0], 1.0);
        let w = pv(&[0.0, 5.0]);
        assert_eq!(relu.activation_fraction(&w, &[&z]).unwrap(), 1.0);
        let g = relu.per_example_grad(&w, &z).unwrap();
        assert_eq!(g.as_slice(), &[-1.0, 0.0]);
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut s = SeededStream::new(21);
        let model = Model::Mlp(MlpClassifier::new(vec![4, 6, 5, 3]).unwrap());
        let w = model.init_weights(&mut s, None).unwrap();
        let z = Example::classification(gaussian_vector(&mut s, 4, 1.0).unwrap().into_vec(), 2);
        let g = model.per_example_grad(&w, &z).unwrap();
        let fd = central_diff_gradient(|v| model.loss(v, &z).unwrap(), &w, 1e-5).unwrap();
        let rel = g.sub(&fd).unwrap().norm() / g.norm().max(1e-12);
        assert!(rel < 1e-6, "{rel}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = SeededStream::new(2);
        for model in [
            Model::Linear(LinearNet::new(3).unwrap()),
            Model::Relu(TwoLayerReLU::new(3, 4, 99).unwrap()),
            Model::Mlp(MlpClassifier::new(vec![3, 4, 2]).unwrap()),
        ] {
            let w = model.init_weights(&mut s, Some(0.5)).unwrap();
            let p = dir.path().join(format!("{}.ckpt", model.kind().as_str()));
            write_checkpoint(&p, &model, &w).unwrap();
            let (m2, w2) = read_checkpoint(&p).unwrap();
            assert_eq!(m2, model);
            assert_eq!(w2, w);
        }
    }
}
