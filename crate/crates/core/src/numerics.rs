//! Seeded random streams, dense parameter vectors and finite-difference oracles.
//!
//! Every random quantity in the crate (initial weights, batch shuffles, GMP
//! perturbations, Hutchinson probes, Monte-Carlo noise) is drawn from a
//! [`SeededStream`]. A stream is a ChaCha8 keystream keyed by a 64-bit seed; a
//! labelled sub-stream reuses the seed but selects a different ChaCha stream
//! id, so sub-streams with distinct labels never share draws.
//!
//! Gaussian variates use the Box–Muller cosine branch: each normal draw
//! consumes two 53-bit uniforms `u1 ∈ (0, 1]`, `u2 ∈ [0, 1)` and returns
//! `sqrt(-2 ln u1) · cos(2π u2)`. The transcendental functions come from
//! `libm`, so outputs are bit-identical across platforms.

use std::ops::Index;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};

/// Default step for central differences on unit-scale weights.
pub const DEFAULT_FD_EPS: f64 = 1e-4;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut hash: u64, bytes: &[u8]) -> u64 {
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// A deterministic random stream identified by `(seed, label path)`.
#[derive(Debug, Clone)]
pub struct SeededStream {
    seed: u64,
    stream_id: u64,
    counter: u64,
    rng: ChaCha8Rng,
}

impl SeededStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream_id(seed, 0)
    }

    fn with_stream_id(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            counter: 0,
            rng,
        }
    }

    /// Independent sub-stream keyed by `label`. Derivation ignores how many
    /// draws the parent has consumed.
    pub fn substream(&self, label: &str) -> Self {
        let mut h = fnv1a(FNV_OFFSET, &self.stream_id.to_le_bytes());
        h = fnv1a(h, b"/");
        h = fnv1a(h, label.as_bytes());
        Self::with_stream_id(self.seed, h)
    }

    /// Sub-stream keyed by `(label, index)`, e.g. one per epoch or per sample.
    pub fn substream_indexed(&self, label: &str, index: u64) -> Self {
        let mut h = fnv1a(FNV_OFFSET, &self.stream_id.to_le_bytes());
        h = fnv1a(h, b"/");
        h = fnv1a(h, label.as_bytes());
        h = fnv1a(h, b"#");
        h = fnv1a(h, &index.to_le_bytes());
        Self::with_stream_id(self.seed, h)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of draws consumed so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    fn raw_unit(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn next_uniform(&mut self) -> f64 {
        self.counter += 1;
        self.raw_unit()
    }

    /// Raw 64-bit draw.
    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        self.rng.next_u64()
    }

    /// Uniform integer in `[0, bound)` by rejection sampling (no modulo bias).
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "next_below requires a positive bound");
        self.counter += 1;
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.rng.next_u64();
            if v < zone {
                return v % bound;
            }
        }
    }

    /// Standard normal draw (Box–Muller, cosine branch).
    pub fn next_gaussian(&mut self) -> f64 {
        self.counter += 1;
        let u1 = 1.0 - self.raw_unit();
        let u2 = self.raw_unit();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(std::f64::consts::TAU * u2)
    }

    /// Fair ±1 draw.
    pub fn next_sign(&mut self) -> f64 {
        self.counter += 1;
        if self.rng.next_u64() >> 63 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// Flat parameter vector shared by every model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
        }
    }

    /// Wraps `values`, rejecting empty or non-finite input.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("parameter vector must have dim >= 1"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericFailure {
                coord: i,
                detail: format!("non-finite entry {}", values[i]),
            });
        }
        Ok(Self { values })
    }

    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    fn check_dim(&self, other: &ParamVector) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::invalid(format!(
                "dimension mismatch: {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_dim(other)?;
        Ok(Self::from_vec_unchecked(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        ))
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_dim(other)?;
        Ok(Self::from_vec_unchecked(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        ))
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &ParamVector) -> Result<()> {
        self.check_dim(x)?;
        for (a, b) in self.values.iter_mut().zip(&x.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn scaled(&self, alpha: f64) -> ParamVector {
        let mut out = self.clone();
        out.scale(alpha);
        out
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_dim(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> Result<f64> {
        self.check_dim(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

/// Vector of i.i.d. `N(0, std²)` entries. Consumes exactly `dim` draws.
pub fn gaussian_vector(stream: &mut SeededStream, dim: usize, std: f64) -> Result<ParamVector> {
    if dim == 0 {
        return Err(Error::invalid("gaussian_vector requires dim >= 1"));
    }
    if !std.is_finite() || std < 0.0 {
        return Err(Error::invalid(format!(
            "gaussian_vector std must be finite and >= 0, got {std}"
        )));
    }
    let values = (0..dim).map(|_| std * stream.next_gaussian()).collect();
    Ok(ParamVector::from_vec_unchecked(values))
}

/// Vector of independent ±1 entries.
pub fn rademacher_vector(stream: &mut SeededStream, dim: usize) -> Result<ParamVector> {
    if dim == 0 {
        return Err(Error::invalid("rademacher_vector requires dim >= 1"));
    }
    Ok(ParamVector::from_vec_unchecked(
        (0..dim).map(|_| stream.next_sign()).collect(),
    ))
}

/// Central-difference gradient of `f` at `w`.
pub fn central_diff_gradient<F>(f: F, w: &ParamVector, eps: f64) -> Result<ParamVector>
where
    F: Fn(&ParamVector) -> f64,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    let mut probe = w.clone();
    let mut grad = Vec::with_capacity(w.dim());
    for j in 0..w.dim() {
        let orig = probe.values[j];
        probe.values[j] = orig + eps;
        let fp = f(&probe);
        probe.values[j] = orig - eps;
        let fm = f(&probe);
        probe.values[j] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NumericFailure {
                coord: j,
                detail: format!("f(w ± eps·e_j) = ({fp}, {fm})"),
            });
        }
        grad.push((fp - fm) / (2.0 * eps));
    }
    Ok(ParamVector::from_vec_unchecked(grad))
}

/// Mean and standard error of a sample. SE is zero for a single value.
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let k = values.len();
    if k == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    if k == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    (mean, (var / k as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_std_gives_zero_vector() {
        let mut s = SeededStream::new(3);
        let v = gaussian_vector(&mut s, 3, 0.0).unwrap();
        assert_eq!(v.as_slice(), &[0.0, 0.0, 0.0]);
        assert_eq!(s.counter(), 3);
    }

    #[test]
    fn gaussian_is_deterministic() {
        let a = gaussian_vector(&mut SeededStream::new(7), 4, 1.0).unwrap();
        let b = gaussian_vector(&mut SeededStream::new(7), 4, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_moments() {
        let dim = 100_000;
        let v = gaussian_vector(&mut SeededStream::new(7), dim, 2.0).unwrap();
        let mean = v.as_slice().iter().sum::<f64>() / dim as f64;
        let var = v.as_slice().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / dim as f64;
        assert!(mean.abs() <= 4.0 * 2.0 / (dim as f64).sqrt(), "mean {mean}");
        assert!((var - 4.0).abs() <= 0.05 * 4.0, "var {var}");
    }

    #[test]
    fn non_finite_std_rejected() {
        let mut s = SeededStream::new(1);
        assert!(matches!(
            gaussian_vector(&mut s, 2, f64::NAN),
            Err(Error::InvalidArgument(_))
        ));
        assert!(gaussian_vector(&mut s, 2, f64::INFINITY).is_err());
    }

    #[test]
    fn rademacher_frequency_and_values() {
        let mut s = SeededStream::new(11);
        let mut plus = 0;
        for _ in 0..10_000 {
            let v = rademacher_vector(&mut s, 1).unwrap();
            assert_eq!(v[0] * v[0], 1.0);
            if v[0] > 0.0 {
                plus += 1;
            }
        }
        let frac = plus as f64 / 10_000.0;
        assert!((frac - 0.5).abs() < 0.05, "{frac}");
        let a = rademacher_vector(&mut SeededStream::new(5), 16).unwrap();
        let b = rademacher_vector(&mut SeededStream::new(5), 16).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn substreams_differ_by_label() {
        let root = SeededStream::new(42);
        let mut a = root.substream("init");
        let mut b = root.substream("batching");
        let mut a2 = root.substream("init");
        let xa: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        let xa2: Vec<u64> = (0..8).map(|_| a2.next_u64()).collect();
        assert_ne!(xa, xb);
        assert_eq!(xa, xa2);
        let mut e1 = root.substream_indexed("epoch", 1);
        let mut e2 = root.substream_indexed("epoch", 2);
        assert_ne!(e1.next_u64(), e2.next_u64());
    }

    #[test]
    fn central_diff_constant_and_quadratic() {
        let w = ParamVector::new(vec![1.0, 2.0]).unwrap();
        let g = central_diff_gradient(|_| 3.5, &w, 1e-4).unwrap();
        assert_eq!(g.as_slice(), &[0.0, 0.0]);
        let g = central_diff_gradient(|v| 0.5 * v.norm_sq(), &w, 1e-4).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-8 && (g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn central_diff_exact_on_quadratics() {
        let mut s = SeededStream::new(9);
        for eps in [1e-5, 1e-4, 1e-3] {
            let w = gaussian_vector(&mut s, 3, 1.0).unwrap();
            // f(w) = w0^2 - 3 w0 w1 + 0.5 w2^2 + 2 w1 - 1
            let f = |v: &ParamVector| {
                v[0] * v[0] - 3.0 * v[0] * v[1] + 0.5 * v[2] * v[2] + 2.0 * v[1] - 1.0
            };
            let exact = [2.0 * w[0] - 3.0 * w[1], -3.0 * w[0] + 2.0, w[2]];
            let g = central_diff_gradient(f, &w, eps).unwrap();
            for j in 0..3 {
                assert!((g[j] - exact[j]).abs() < 1e-10, "eps {eps} coord {j}");
            }
        }
    }

    #[test]
    fn central_diff_reports_offending_coordinate() {
        let w = ParamVector::new(vec![0.0, 0.0]).unwrap();
        let err = central_diff_gradient(
            |v| if v[1] > 0.0 { f64::NAN } else { 0.0 },
            &w,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NumericFailure { coord: 1, .. }));
    }

    #[test]
    fn dim_mismatch_is_an_error() {
        let a = ParamVector::zeros(2);
        let b = ParamVector::zeros(3);
        assert!(a.add(&b).is_err());
        assert!(a.dot(&b).is_err());
    }

    #[test]
    fn new_rejects_nan() {
        assert!(ParamVector::new(vec![1.0, f64::NAN]).is_err());
    }
}
