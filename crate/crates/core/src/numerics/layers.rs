//! Parameterized layers. Layers hold only [`ParamId`]s, so the same layout
//! works against an `f32` training store and its `f64` verification copy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::array::ShapedArray;
use super::kernels::Mode;
use super::scalar::Scalar;
use super::tape::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;

/// Hyperparameters shared by all normalization layers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormConfig {
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub ln_eps: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            ln_eps: 1e-5,
        }
    }
}

/// Pointwise non-linearity used wherever a generic activation is needed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    Relu,
}

impl Activation {
    pub fn apply<T: Scalar>(self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Activation::Silu => tape.silu(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Uniform `±1/sqrt(d_in)` initialization.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (d_in.max(1) as f64).sqrt();
        let w = ps.add(format!("{name}.weight"), ShapedArray::uniform(&[d_in, d_out], -bound, bound, rng));
        let b = bias.then(|| ps.add(format!("{name}.bias"), ShapedArray::uniform(&[d_out], -bound, bound, rng)));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = self.b.map(|b| tape.param(b));
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, dim: usize, eps: f64) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), ShapedArray::ones(&[dim])),
            beta: ps.add(format!("{name}.beta"), ShapedArray::zeros(&[dim])),
            eps,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layernorm(x, g, b, T::of(self.eps))
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, dim: usize, cfg: &NormConfig) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), ShapedArray::ones(&[dim])),
            beta: ps.add(format!("{name}.beta"), ShapedArray::zeros(&[dim])),
            running_mean: ps.add_buffer(format!("{name}.running_mean"), ShapedArray::zeros(&[dim])),
            running_var: ps.add_buffer(format!("{name}.running_var"), ShapedArray::ones(&[dim])),
            eps: cfg.bn_eps,
            momentum: cfg.bn_momentum,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.batchnorm(
            x,
            g,
            b,
            self.running_mean,
            self.running_var,
            mode,
            T::of(self.eps),
            T::of(self.momentum),
        )
    }
}

/// Bias-free square convolution with "same" padding at stride 1.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((k * k * cin).max(1) as f64).sqrt();
        Self {
            kernel: ps.add(format!("{name}.kernel"), ShapedArray::uniform(&[k, k, cin, cout], -bound, bound, rng)),
            k,
            stride: 1,
            pad: (k - 1) / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let k = tape.param(self.kernel);
        tape.conv2d(x, k, self.stride, self.pad)
    }
}
