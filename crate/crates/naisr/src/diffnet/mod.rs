//! Differentiable-network substrate.
//!
//! Sine-activation MLPs evaluated in batch, with forward-mode propagation of
//! the Jacobian with respect to a narrow slice of spatial inputs, reverse
//! accumulation of parameter/input gradients for losses that consume both
//! outputs and Jacobians, and an Adam optimizer. Everything is generic over
//! [`DiffFloat`] so gradient checks can run in 64-bit while training runs in
//! 32-bit.

mod adam;
mod mlp;
mod sincos;

pub use adam::{AdamState, SparseAdamState};
pub use mlp::{
    forward, forward_tangent, loss_backward, mlp_forward, mlp_forward_jac, vjp, PointLoss, Seed,
    Tape, VjpOptions,
};
pub use sincos::{from_f64, DiffFloat};

use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::rng::derive_rng;
use crate::{Error, Result};

/// Contiguous index range into an MLP input vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSlice {
    pub start: usize,
    pub len: usize,
}

impl InputSlice {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Architecture of one sine-activation MLP.
///
/// `layer_widths` lists activation widths from the input to the output; layer
/// `k` maps activation `k` to activation `k+1`. When `skip_layer == Some(k)`,
/// the input of layer `k` is augmented by concatenating `input[skip_slice]`,
/// so that layer's weight matrix is `skip_slice.len` columns wider than
/// `layer_widths[k]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub skip_layer: Option<usize>,
    pub skip_slice: InputSlice,
    pub omega0: f64,
    pub final_linear: bool,
}

/// Default sine frequency scale.
pub const OMEGA0_DEFAULT: f64 = 30.0;

impl MlpSpec {
    pub fn new(
        layer_widths: Vec<usize>,
        skip_layer: Option<usize>,
        skip_slice: InputSlice,
        omega0: f64,
    ) -> Result<Self> {
        let spec = Self {
            layer_widths,
            skip_layer,
            skip_slice,
            omega0,
            final_linear: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Spec without a skip connection.
    pub fn plain(layer_widths: Vec<usize>, omega0: f64) -> Result<Self> {
        Self::new(layer_widths, None, InputSlice::new(0, 0), omega0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 3 {
            return Err(Error::Config(format!(
                "layer_widths needs at least 3 entries, got {}",
                self.layer_widths.len()
            )));
        }
        if let Some(zero) = self.layer_widths.iter().position(|&w| w == 0) {
            return Err(Error::Config(format!("zero width at layer_widths[{zero}]")));
        }
        if !(self.omega0.is_finite() && self.omega0 > 0.0) {
            return Err(Error::Config(format!("omega0 must be positive, got {}", self.omega0)));
        }
        if let Some(k) = self.skip_layer {
            if k == 0 || k >= self.n_layers() - 1 {
                return Err(Error::Config(format!(
                    "skip layer {k} is not strictly interior (1..{})",
                    self.n_layers() - 1
                )));
            }
            if self.skip_slice.len == 0 || self.skip_slice.end() > self.input_width() {
                return Err(Error::Config(format!(
                    "skip slice {}..{} outside input width {}",
                    self.skip_slice.start,
                    self.skip_slice.end(),
                    self.input_width()
                )));
            }
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    /// Input width of layer `k`, including skip concatenation.
    pub fn layer_in(&self, k: usize) -> usize {
        let extra = if self.skip_layer == Some(k) { self.skip_slice.len } else { 0 };
        self.layer_widths[k] + extra
    }

    pub fn layer_out(&self, k: usize) -> usize {
        self.layer_widths[k + 1]
    }

    /// True when layer `k` is followed by the sine activation.
    pub fn is_sine(&self, k: usize) -> bool {
        k + 1 < self.n_layers() || !self.final_linear
    }

    /// Flat parameter count (per layer: row-major weights, then bias).
    pub fn param_count(&self) -> usize {
        (0..self.n_layers())
            .map(|k| self.layer_in(k) * self.layer_out(k) + self.layer_out(k))
            .sum()
    }

    /// Offset of layer `k`'s block in the flat parameter vector.
    pub fn layer_offset(&self, k: usize) -> usize {
        (0..k)
            .map(|j| self.layer_in(j) * self.layer_out(j) + self.layer_out(j))
            .sum()
    }
}

/// SIREN-style initialization: first layer U(-1/fan_in, 1/fan_in), later
/// layers U(-sqrt(6/fan_in)/omega0, sqrt(6/fan_in)/omega0), biases zero.
/// Deterministic given `(spec, seed)`; draws happen in f64 so the f32 and f64
/// instantiations describe the same network.
pub fn mlp_init<F: DiffFloat>(spec: &MlpSpec, seed: u64) -> Result<Vec<F>> {
    spec.validate()?;
    let mut rng = derive_rng(seed, "diffnet.mlp_init", 0);
    let mut params = vec![F::zero(); spec.param_count()];
    for k in 0..spec.n_layers() {
        let fan_in = spec.layer_in(k) as f64;
        let limit = if k == 0 {
            1.0 / fan_in
        } else {
            (6.0 / fan_in).sqrt() / spec.omega0
        };
        let dist = Uniform::new_inclusive(-limit, limit)
            .map_err(|e| Error::Config(format!("init distribution: {e}")))?;
        let offset = spec.layer_offset(k);
        let n_weights = spec.layer_in(k) * spec.layer_out(k);
        for w in &mut params[offset..offset + n_weights] {
            *w = from_f64(dist.sample(&mut rng));
        }
        // biases stay zero
    }
    Ok(params)
}
