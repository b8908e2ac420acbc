//! Adam with bias correction, plus a sparse-row variant for latent tables.

use serde::{Deserialize, Serialize};

use super::{from_f64, DiffFloat};
use crate::{Error, Result};

/// Adam optimizer state over a flat parameter vector.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState<F> {
    m: Vec<F>,
    v: Vec<F>,
    t: u64,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
}

impl<F: DiffFloat> AdamState<F> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![F::zero(); len],
            v: vec![F::zero(); len],
            t: 0,
            beta1: from_f64(0.9),
            beta2: from_f64(0.999),
            eps: from_f64(1e-8),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update of `params`. Errors on non-finite gradients
    /// without touching any state.
    pub fn step(&mut self, params: &mut [F], grads: &[F], lr: F) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "adam state over {} entries got params {}, grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient at index {i}")));
        }
        self.t += 1;
        let one = F::one();
        let bc1 = one - self.beta1.powi(self.t as i32);
        let bc2 = one - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (one - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (one - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Adam over the rows of a latent table; moments and step counts update only
/// for rows touched by a batch, so codes absent from a batch are unchanged.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SparseAdamState<F> {
    m: Vec<F>,
    v: Vec<F>,
    t: Vec<u64>,
    row_len: usize,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
}

impl<F: DiffFloat> SparseAdamState<F> {
    pub fn new(rows: usize, row_len: usize) -> Self {
        Self {
            m: vec![F::zero(); rows * row_len],
            v: vec![F::zero(); rows * row_len],
            t: vec![0; rows],
            row_len,
            beta1: from_f64(0.9),
            beta2: from_f64(0.999),
            eps: from_f64(1e-8),
        }
    }

    /// Updates one row of the table with its own step count.
    pub fn step_row(&mut self, row: usize, params: &mut [F], grads: &[F], lr: F) -> Result<()> {
        if params.len() != self.row_len || grads.len() != self.row_len {
            return Err(Error::Dimension(format!(
                "row length {} expected, got params {}, grads {}",
                self.row_len,
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite latent gradient at row {row}, index {i}"
            )));
        }
        self.t[row] += 1;
        let one = F::one();
        let bc1 = one - self.beta1.powi(self.t[row] as i32);
        let bc2 = one - self.beta2.powi(self.t[row] as i32);
        let off = row * self.row_len;
        for i in 0..self.row_len {
            let g = grads[i];
            let m = &mut self.m[off + i];
            let v = &mut self.v[off + i];
            *m = self.beta1 * *m + (one - self.beta1) * g;
            *v = self.beta2 * *v + (one - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
