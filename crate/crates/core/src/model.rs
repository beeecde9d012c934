//! The two networks of the learner, wrapped with their input encodings and
//! output scalings.
//!
//! * [`DensityModel`]: `(t, x) -> rho`, fed `(t/T, sin(2 pi x/L), cos(2 pi x/L))`
//!   so periodicity on the ring holds exactly, with a softplus output times
//!   a density scale so `rho >= 0`.
//! * [`FdModel`]: `rho -> V`, fed `rho / rho_scale`, output times a speed scale.

use ndarray::Array2;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::RingGrid;
use crate::net::{Activation, MlpNet, MlpSpec, Tape};

/// Anything that yields density and its first derivatives at `(t, x)`.
pub trait DensitySurface {
    /// `(rho, d rho/dt, d rho/dx)`.
    fn density_jet(&self, t: f64, x: f64) -> (f64, f64, f64);
}

/// Anything that yields a speed law and its slope.
pub trait SpeedLaw {
    /// `(V(rho), dV/drho)`.
    fn speed_jet(&self, rho: f64) -> (f64, f64);
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityModel {
    pub net: MlpNet,
    pub ring_length_m: f64,
    pub horizon_s: f64,
    pub density_scale: f64,
}

/// Batch of density evaluations kept for the reverse sweep.
pub(crate) struct DensityBatch {
    pub rho: Vec<f64>,
    /// `d rho / dx`, present when requested.
    pub rho_x: Vec<f64>,
    /// `d rho / dt`, present when requested.
    pub rho_t: Vec<f64>,
    tape: Tape,
    with_t: bool,
    with_x: bool,
}

impl DensityModel {
    pub fn spec(hidden_layers: usize, hidden_width: usize) -> MlpSpec {
        MlpSpec::new(3, hidden_layers, hidden_width, 1).with_output_activation(Activation::Softplus)
    }

    pub fn new(net: MlpNet, grid: &RingGrid, density_scale: f64) -> Result<Self> {
        let s = net.spec();
        if s.input_dim != 3 || s.output_dim != 1 {
            return Err(Error::Shape(format!(
                "density network must map 3 inputs to 1 output, got {} -> {}",
                s.input_dim, s.output_dim
            )));
        }
        if !(density_scale > 0.0) {
            return Err(Error::Config(format!(
                "density scale must be positive, got {density_scale}"
            )));
        }
        Ok(Self {
            net,
            ring_length_m: grid.ring_length_m(),
            horizon_s: grid.horizon_s(),
            density_scale,
        })
    }

    fn kappa(&self) -> f64 {
        2.0 * PI / self.ring_length_m
    }

    pub fn encode(&self, t: f64, x: f64) -> [f64; 3] {
        let a = self.kappa() * x;
        [t / self.horizon_s, a.sin(), a.cos()]
    }

    /// Evaluate at `points`, optionally with time and space derivatives.
    pub(crate) fn eval_batch(
        &self,
        points: &[(f64, f64)],
        with_t: bool,
        with_x: bool,
    ) -> DensityBatch {
        let n = points.len();
        let mut input = Array2::zeros((n, 3));
        let mut tt = if with_t {
            Some(Array2::zeros((n, 3)))
        } else {
            None
        };
        let mut tx = if with_x {
            Some(Array2::zeros((n, 3)))
        } else {
            None
        };
        let k = self.kappa();
        for (r, &(t, x)) in points.iter().enumerate() {
            let (s, c) = (k * x).sin_cos();
            input[[r, 0]] = t / self.horizon_s;
            input[[r, 1]] = s;
            input[[r, 2]] = c;
            if let Some(tt) = tt.as_mut() {
                tt[[r, 0]] = 1.0 / self.horizon_s;
            }
            if let Some(tx) = tx.as_mut() {
                tx[[r, 1]] = k * c;
                tx[[r, 2]] = -k * s;
            }
        }
        let tangents: Vec<Array2<f64>> = tt.into_iter().chain(tx).collect();
        let (jet, tape) = self.net.forward_jet(input, tangents);
        let sc = self.density_scale;
        let rho = jet.value.iter().map(|v| sc * v).collect();
        let mut d = jet.tangents.iter();
        let rho_t = if with_t {
            d.next()
                .expect("t tangent")
                .iter()
                .map(|v| sc * v)
                .collect()
        } else {
            Vec::new()
        };
        let rho_x = if with_x {
            d.next()
                .expect("x tangent")
                .iter()
                .map(|v| sc * v)
                .collect()
        } else {
            Vec::new()
        };
        DensityBatch {
            rho,
            rho_x,
            rho_t,
            tape,
            with_t,
            with_x,
        }
    }

    /// Accumulate parameter gradients from cotangents on `rho`, `rho_t`, `rho_x`.
    pub(crate) fn backward(
        &self,
        batch: &DensityBatch,
        rho_bar: &[f64],
        rho_t_bar: &[f64],
        rho_x_bar: &[f64],
        grad: &mut [f64],
    ) {
        let n = batch.rho.len();
        let sc = self.density_scale;
        let col = |v: &[f64]| Array2::from_shape_fn((n, 1), |(r, _)| sc * v[r]);
        let mut tbar = Vec::new();
        if batch.with_t {
            tbar.push(col(rho_t_bar));
        }
        if batch.with_x {
            tbar.push(col(rho_x_bar));
        }
        self.net.backward_jet(&batch.tape, col(rho_bar), tbar, grad);
    }

    /// Densities on every cell of `grid`.
    pub fn predict_field(&self, grid: &RingGrid) -> Vec<f64> {
        let mut out = Vec::with_capacity(grid.len());
        for i in 0..grid.n_t() {
            let pts: Vec<(f64, f64)> = (0..grid.n_x()).map(|j| (grid.t(i), grid.x(j))).collect();
            out.extend(self.eval_batch(&pts, false, false).rho);
        }
        out
    }
}

impl DensitySurface for DensityModel {
    fn density_jet(&self, t: f64, x: f64) -> (f64, f64, f64) {
        let b = self.eval_batch(&[(t, x)], true, true);
        (b.rho[0], b.rho_t[0], b.rho_x[0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdModel {
    pub net: MlpNet,
    pub rho_scale: f64,
    pub speed_scale: f64,
}

pub(crate) struct SpeedBatch {
    pub v: Vec<f64>,
    pub dv: Vec<f64>,
    tape: Tape,
}

impl FdModel {
    pub fn spec(hidden_layers: usize, hidden_width: usize) -> MlpSpec {
        MlpSpec::new(1, hidden_layers, hidden_width, 1)
    }

    pub fn new(net: MlpNet, rho_scale: f64, speed_scale: f64) -> Result<Self> {
        let s = net.spec();
        if s.input_dim != 1 || s.output_dim != 1 {
            return Err(Error::Shape(format!(
                "FD network must map 1 input to 1 output, got {} -> {}",
                s.input_dim, s.output_dim
            )));
        }
        if !(rho_scale > 0.0 && speed_scale > 0.0) {
            return Err(Error::Config("FD scales must be positive".into()));
        }
        Ok(Self {
            net,
            rho_scale,
            speed_scale,
        })
    }

    pub(crate) fn eval_batch(&self, rho: &[f64]) -> SpeedBatch {
        let n = rho.len();
        let input = Array2::from_shape_fn((n, 1), |(r, _)| rho[r] / self.rho_scale);
        let tangent = Array2::from_elem((n, 1), 1.0 / self.rho_scale);
        let (jet, tape) = self.net.forward_jet(input, vec![tangent]);
        let s = self.speed_scale;
        SpeedBatch {
            v: jet.value.iter().map(|v| s * v).collect(),
            dv: jet.tangents[0].iter().map(|v| s * v).collect(),
            tape,
        }
    }

    /// Accumulates the parameter gradient; returns the cotangent on the input densities.
    pub(crate) fn backward(
        &self,
        batch: &SpeedBatch,
        v_bar: &[f64],
        dv_bar: &[f64],
        grad: &mut [f64],
    ) -> Vec<f64> {
        let n = batch.v.len();
        let s = self.speed_scale;
        let ybar = Array2::from_shape_fn((n, 1), |(r, _)| s * v_bar[r]);
        let tbar = Array2::from_shape_fn((n, 1), |(r, _)| s * dv_bar[r]);
        let abar = self.net.backward_jet(&batch.tape, ybar, vec![tbar], grad);
        abar.iter().map(|a| a / self.rho_scale).collect()
    }

    pub fn speed(&self, rho: &[f64]) -> Vec<f64> {
        self.eval_batch(rho).v
    }
}

impl SpeedLaw for FdModel {
    fn speed_jet(&self, rho: f64) -> (f64, f64) {
        let b = self.eval_batch(&[rho]);
        (b.v[0], b.dv[0])
    }
}

impl SpeedLaw for crate::fd::FdParams {
    fn speed_jet(&self, rho: f64) -> (f64, f64) {
        let r = rho.max(0.0);
        (self.speed_unchecked(r), self.deriv_unchecked(r))
    }
}
