//! Mamba2-style state-space kernels.
//!
//! Per head `h` with scalar decay, the discretized recurrence over a sequence
//! of length `T` is
//!
//! ```text
//! state_t = decay_t * state_{t-1} + scale_t * B_t x_tᵀ        (N x P)
//! y_t     = C_tᵀ state_t                                      (P)
//! ```
//!
//! with `decay_t = exp(Δ_t A)`, `A = -exp(a_log) < 0`,
//! `Δ_t = softplus(dt_t + dt_bias)`, and `scale_t = Δ_t` (or the exact
//! zero-order-hold factor `(decay_t - 1) / A`). The same map can be written
//! as multiplication by a lower-triangular semiseparable matrix, which is what
//! [`quadratic_dual`] materializes and [`scan_chunked`] decomposes into blocks.

mod block;
mod scan;

pub(crate) use block::mean_pairwise;
pub use block::{inverse_permutation, ssd_scan, Mamba2Block, Mamba2Config};
pub use scan::{materialize, quadratic_dual, scan, scan_chunked, scan_chunked_with, scan_linear, QUADRATIC_MAX_LEN};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::softplus;
use crate::numerics::{Scalar, ShapedArray};

/// How the continuous input matrix is discretized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discretization {
    /// `B̄ = Δ·B`
    #[default]
    Simplified,
    /// `B̄ = (exp(ΔA) − 1)/A · B`
    ExactZoh,
}

/// Evaluation strategy for the sequence map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanMode {
    Linear,
    Quadratic,
    Chunked(usize),
}

impl Default for ScanMode {
    fn default() -> Self {
        ScanMode::Chunked(64)
    }
}

/// Continuous parameters of a multi-head SSM plus its per-step inputs.
#[derive(Clone, Debug)]
pub struct SsmParams<T> {
    pub nheads: usize,
    pub headdim: usize,
    pub state_dim: usize,
    /// `[H]`; `A = -exp(a_log)`.
    pub a_log: Vec<T>,
    /// `[H]`
    pub dt_bias: Vec<T>,
    /// `[T, H]` raw step before bias and softplus.
    pub dt_raw: ShapedArray<T>,
    /// `[T, N]`
    pub b: ShapedArray<T>,
    /// `[T, N]`
    pub c: ShapedArray<T>,
}

/// Discretized SSM ready for scanning.
#[derive(Clone, Debug)]
pub struct DiscreteSsm<T> {
    pub nheads: usize,
    pub headdim: usize,
    pub state_dim: usize,
    /// `[T * H]` row-major, each in `(0, 1]` for valid parameters.
    pub decay: Vec<T>,
    /// `[T * H]` input scale so that `B̄_t = scale_t · B_t`.
    pub scale: Vec<T>,
    /// `[T, N]`
    pub b: ShapedArray<T>,
    /// `[T, N]`
    pub c: ShapedArray<T>,
}

impl<T: Scalar> DiscreteSsm<T> {
    pub fn len(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, x: &ShapedArray<T>) -> Result<()> {
        let t = self.len();
        let (h, p, n) = (self.nheads, self.headdim, self.state_dim);
        if self.b.shape() != [t, n] || self.c.shape() != [t, n] {
            return Err(Error::dim("ssd(B/C)", self.b.shape(), self.c.shape()));
        }
        if self.decay.len() != t * h || self.scale.len() != t * h {
            return Err(Error::dim("ssd(decay)", &[self.decay.len(), self.scale.len()], &[t * h]));
        }
        if x.len() != t * h * p || x.shape().first() != Some(&t) {
            return Err(Error::dim("ssd(x)", x.shape(), &[t, h, p]));
        }
        if t == 0 {
            return Err(Error::arg("ssd", "sequence length must be >= 1"));
        }
        Ok(())
    }
}

/// Zero-order-hold style discretization of one head at one step.
///
/// Returns `(decay, B̄)` with `decay = exp(Δ·A)`, `A = −exp(a_log)`,
/// `Δ = softplus(dt_raw + dt_bias)` and `B̄ = Δ·B` (simplified) or
/// `(decay − 1)/A · B` (exact).
pub fn discretize_zoh<T: Scalar>(a_log: T, dt_raw: T, dt_bias: T, b: &[T], how: Discretization) -> (T, Vec<T>) {
    let a = -a_log.exp();
    let delta = softplus(dt_raw + dt_bias);
    let decay = (delta * a).exp();
    let s = input_scale(a, delta, decay, how);
    (decay, b.iter().map(|&v| v * s).collect())
}

fn input_scale<T: Scalar>(a: T, delta: T, decay: T, how: Discretization) -> T {
    match how {
        Discretization::Simplified => delta,
        Discretization::ExactZoh => {
            let z = delta * a;
            if z.abs() < T::of(1e-6) {
                delta * (T::one() + z / T::of(2.0))
            } else {
                (decay - T::one()) / a
            }
        }
    }
}

impl<T: Scalar> SsmParams<T> {
    pub fn len(&self) -> usize {
        self.b.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn discretize(&self, how: Discretization) -> Result<DiscreteSsm<T>> {
        let (t, h) = (self.len(), self.nheads);
        if self.dt_raw.shape() != [t, h] || self.a_log.len() != h || self.dt_bias.len() != h {
            return Err(Error::dim("discretize", self.dt_raw.shape(), &[t, h]));
        }
        let mut decay = Vec::with_capacity(t * h);
        let mut scale = Vec::with_capacity(t * h);
        for step in 0..t {
            for head in 0..h {
                let a = -self.a_log[head].exp();
                let delta = softplus(self.dt_raw.data()[step * h + head] + self.dt_bias[head]);
                let d = (delta * a).exp();
                decay.push(d);
                scale.push(input_scale(a, delta, d, how));
            }
        }
        Ok(DiscreteSsm {
            nheads: h,
            headdim: self.headdim,
            state_dim: self.state_dim,
            decay,
            scale,
            b: self.b.clone(),
            c: self.c.clone(),
        })
    }
}
