//! Cell-integrated look-ahead kernels.
//!
//! A kernel of length `eta` on cells of width `dx` is stored as the vector
//! of cell masses `w[k] = integral of omega over [k dx, (k+1) dx)`, with
//! `N_eta = eta / dx` entries. Offset `k` looks `k` cells downstream.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelShape {
    /// omega(x) = 1/eta
    Constant,
    /// omega(x) = 2 (eta - x) / eta^2
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteKernel {
    eta_m: f64,
    dx_m: f64,
    weights: Vec<f64>,
}

/// Tolerance used when checking the unit-mass constraint.
pub const MASS_TOL: f64 = 1e-12;

pub(crate) fn cell_count(eta_m: f64, dx_m: f64) -> Result<usize> {
    if !(eta_m > 0.0 && dx_m > 0.0) {
        return Err(Error::Config(format!(
            "kernel length {eta_m} m and cell width {dx_m} m must be positive"
        )));
    }
    let r = eta_m / dx_m;
    let n = r.round();
    if n < 1.0 || (n - r).abs() > 1e-9 * r.max(1.0) {
        return Err(Error::Config(format!(
            "kernel length {eta_m} m is not a positive multiple of dx = {dx_m} m"
        )));
    }
    Ok(n as usize)
}

impl DiscreteKernel {
    /// Wrap raw cell masses. No sign or monotonicity checks; see [`Self::validate`].
    pub fn from_weights(weights: Vec<f64>, dx_m: f64) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Config("kernel needs at least one weight".into()));
        }
        if !(dx_m > 0.0) {
            return Err(Error::Config(format!("dx must be positive, got {dx_m}")));
        }
        Ok(Self {
            eta_m: weights.len() as f64 * dx_m,
            dx_m,
            weights,
        })
    }

    /// The local (no look-ahead) kernel `[1.0]`.
    pub fn identity(dx_m: f64) -> Self {
        Self {
            eta_m: dx_m,
            dx_m,
            weights: vec![1.0],
        }
    }

    pub fn closed_form(shape: KernelShape, eta_m: f64, dx_m: f64) -> Result<Self> {
        match shape {
            KernelShape::Constant => kernel_constant(eta_m, dx_m),
            KernelShape::Linear => kernel_linear(eta_m, dx_m),
        }
    }

    pub fn eta_m(&self) -> f64 {
        self.eta_m
    }
    pub fn dx_m(&self) -> f64 {
        self.dx_m
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn len(&self) -> usize {
        self.weights.len()
    }
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Check non-negativity, non-increase and unit mass.
    pub fn validate(&self) -> Result<()> {
        if let Some((k, w)) = self.weights.iter().enumerate().find(|(_, w)| **w < 0.0) {
            return Err(Error::Domain(format!(
                "kernel weight {k} is negative ({w})"
            )));
        }
        if let Some(k) =
            (0..self.len().saturating_sub(1)).find(|&k| self.weights[k + 1] > self.weights[k])
        {
            return Err(Error::Domain(format!(
                "kernel increases between cells {k} and {}",
                k + 1
            )));
        }
        let m = self.mass();
        if (m - 1.0).abs() > MASS_TOL {
            return Err(Error::Domain(format!("kernel mass is {m}, expected 1")));
        }
        Ok(())
    }

    /// `true` when weights never increase with distance.
    pub fn is_non_increasing(&self) -> bool {
        self.weights.windows(2).all(|w| w[1] <= w[0])
    }

    /// L1 distance between two kernels on the same cells.
    pub fn l1_distance(&self, other: &DiscreteKernel) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::Shape(format!(
                "kernels have {} and {} cells",
                self.len(),
                other.len()
            )));
        }
        Ok(self
            .weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| (a - b).abs())
            .sum())
    }
}

pub fn kernel_constant(eta_m: f64, dx_m: f64) -> Result<DiscreteKernel> {
    let n = cell_count(eta_m, dx_m)?;
    Ok(DiscreteKernel {
        eta_m,
        dx_m,
        weights: vec![1.0 / n as f64; n],
    })
}

/// Cell integrals of `2 (eta - x) / eta^2`.
pub fn kernel_linear(eta_m: f64, dx_m: f64) -> Result<DiscreteKernel> {
    let n = cell_count(eta_m, dx_m)?;
    // in units of cells: w_k = ((n-k)^2 - (n-k-1)^2) / n^2 = (2(n-k) - 1) / n^2
    let nn = (n * n) as f64;
    let weights = (0..n).map(|k| (2 * (n - k) - 1) as f64 / nn).collect();
    Ok(DiscreteKernel {
        eta_m,
        dx_m,
        weights,
    })
}

/// Map a raw trainable vector onto unit mass: `w_i = theta_i / sum(theta)`.
pub fn kernel_normalize(theta_omega: &[f64], dx_m: f64) -> Result<DiscreteKernel> {
    let s: f64 = theta_omega.iter().sum();
    if s == 0.0 || !s.is_finite() {
        return Err(Error::DegenerateKernel(s));
    }
    DiscreteKernel::from_weights(theta_omega.iter().map(|t| t / s).collect(), dx_m)
}

/// Total weight of the cells lying entirely inside `[0, cutoff_m]`.
pub fn kernel_mass_fraction(kernel: &DiscreteKernel, cutoff_m: f64) -> f64 {
    let cells = ((cutoff_m / kernel.dx_m) + 1e-9).floor().max(0.0) as usize;
    kernel.weights.iter().take(cells).sum()
}
