//! Dense row-major tensors and the deterministic RNG.
//!
//! Model state lives in `f32`; every kernel accumulates in `f64` internally
//! and rounds once on the way out (see [`crate::kernels`]). Tensors are
//! immutable values — operations return fresh tensors — which keeps
//! determinism trivial to reason about: identical inputs produce identical
//! bit patterns on every platform.

use crate::{CoreError, Result};

/// A dense row-major `f32` tensor.
///
/// Extents may be zero (an empty context segment is a `[0, d]` tensor and
/// several operations are defined on it). All stored values are finite;
/// constructors reject NaN and infinity so downstream code never has to.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, validating that `data.len()` matches the shape
    /// product and that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(CoreError::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(CoreError::Invalid(format!(
                "non-finite value {bad} in tensor data"
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// A rank-2 tensor from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// An all-zero tensor.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    /// A tensor filled elementwise by `f(flat_index)`.
    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f32) -> Result<Self> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row/column extents of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(CoreError::Shape(format!(
                "expected rank-2 tensor, got shape {other:?}"
            ))),
        }
    }

    /// Element of a rank-2 tensor. Panics on out-of-range (debug aid; all
    /// public ops validate shapes before indexing).
    pub fn at(&self, i: usize, j: usize) -> f32 {
        let (_, c) = (self.shape[0], self.shape[1]);
        self.data[i * c + j]
    }

    /// Rows `start..start + len` of a rank-2 tensor as a new tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if start + len > r {
            return Err(CoreError::Shape(format!(
                "row slice {start}..{} out of range for {r} rows",
                start + len
            )));
        }
        Ok(Tensor {
            shape: vec![len, c],
            data: self.data[start * c..(start + len) * c].to_vec(),
        })
    }

    /// Stacks rank-2 tensors with equal column counts on top of each other.
    /// Empty inputs are allowed; the column count is taken from the parts
    /// (or `fallback_cols` when every part is absent).
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let mut cols = None;
        for p in parts {
            let (_, c) = p.dims2()?;
            match cols {
                None => cols = Some(c),
                Some(c0) if c0 != c => {
                    return Err(CoreError::Shape(format!(
                        "concat_rows column mismatch: {c0} vs {c}"
                    )))
                }
                _ => {}
            }
        }
        let c = cols.unwrap_or(0);
        let rows: usize = parts.iter().map(|p| p.shape[0]).sum();
        let mut data = Vec::with_capacity(rows * c);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: vec![rows, c],
            data,
        })
    }

    /// Largest absolute elementwise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(CoreError::Shape(format!(
                "max_abs_diff shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .fold(0.0, f64::max))
    }

    /// True when the four raw bit patterns are identical (stronger than
    /// `==`, which would treat `-0.0 == 0.0`).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

// ---------------------------------------------------------------------------
// Deterministic RNG
// ---------------------------------------------------------------------------

/// SplitMix64 generator.
///
/// Chosen for cross-platform bit-stability: the whole state transition is
/// integer arithmetic with fixed constants, so identical seeds give
/// identical streams on every target. Constants are the standard ones from
/// the reference implementation.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` built from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]` — used where a logarithm must stay finite.
    fn next_f64_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box–Muller (deterministic two-draw form).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64_open();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `[0, n)` via the multiply-shift reduction.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Derives an independent child generator (for per-sample streams).
    pub fn split(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }

    /// Gaussian tensor with the given standard deviation.
    pub fn normal_tensor(&mut self, shape: Vec<usize>, std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| (self.normal() * std) as f32).collect();
        Tensor { shape, data }
    }
}
