//! The periodic space-time grid and the data living on it.
//!
//! Indexing convention is `(t, x)` everywhere: time index first, cell index
//! second. Cell `j` is sampled at `x_j = j * dx`, row `i` at `t_i = i * dt`.

use std::collections::{BTreeMap, HashSet};

use crate::error::{Error, Result};

/// Discrete domain on a ring road of circumference `ring_length_m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RingGrid {
    ring_length_m: f64,
    dt_s: f64,
    dx_m: f64,
    n_t: usize,
    n_x: usize,
}

impl RingGrid {
    /// Build a grid; `ring_length_m / dx_m` must be an integer.
    pub fn new(ring_length_m: f64, dt_s: f64, dx_m: f64, n_t: usize) -> Result<Self> {
        if !(dt_s > 0.0 && dt_s.is_finite()) {
            return Err(Error::Config(format!("dt_s must be positive, got {dt_s}")));
        }
        if !(dx_m > 0.0 && dx_m.is_finite()) {
            return Err(Error::Config(format!("dx_m must be positive, got {dx_m}")));
        }
        if !(ring_length_m > 0.0 && ring_length_m.is_finite()) {
            return Err(Error::Config(format!(
                "ring_length_m must be positive, got {ring_length_m}"
            )));
        }
        let ratio = ring_length_m / dx_m;
        let n_x = ratio.round();
        if (n_x - ratio).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::Config(format!(
                "ring length {ring_length_m} m is not a whole number of {dx_m} m cells"
            )));
        }
        let n_x = n_x as usize;
        if n_t < 2 || n_x < 2 {
            return Err(Error::Config(format!(
                "grid needs n_t >= 2 and n_x >= 2, got n_t = {n_t}, n_x = {n_x}"
            )));
        }
        Ok(Self {
            ring_length_m,
            dt_s,
            dx_m,
            n_t,
            n_x,
        })
    }

    /// Grid covering `[0, horizon_s]` inclusive.
    pub fn with_horizon(ring_length_m: f64, dt_s: f64, dx_m: f64, horizon_s: f64) -> Result<Self> {
        let steps = horizon_s / dt_s;
        let n = steps.round();
        if (n - steps).abs() > 1e-9 * steps.max(1.0) {
            return Err(Error::Config(format!(
                "horizon {horizon_s} s is not a whole number of {dt_s} s steps"
            )));
        }
        Self::new(ring_length_m, dt_s, dx_m, n as usize + 1)
    }

    pub fn ring_length_m(&self) -> f64 {
        self.ring_length_m
    }
    pub fn dt_s(&self) -> f64 {
        self.dt_s
    }
    pub fn dx_m(&self) -> f64 {
        self.dx_m
    }
    pub fn n_t(&self) -> usize {
        self.n_t
    }
    pub fn n_x(&self) -> usize {
        self.n_x
    }
    pub fn len(&self) -> usize {
        self.n_t * self.n_x
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    /// Time of the last row.
    pub fn horizon_s(&self) -> f64 {
        (self.n_t - 1) as f64 * self.dt_s
    }
    pub fn t(&self, i: usize) -> f64 {
        i as f64 * self.dt_s
    }
    pub fn x(&self, j: usize) -> f64 {
        j as f64 * self.dx_m
    }

    /// Index of the cell containing position `x` (any real, wrapped).
    pub fn cell_of(&self, x: f64) -> usize {
        let j = (x / self.dx_m).floor() as i64;
        wrap_index(j, self.n_x)
    }

    /// Same spatial layout with a different number of rows.
    pub fn with_n_t(&self, n_t: usize) -> Result<Self> {
        Self::new(self.ring_length_m, self.dt_s, self.dx_m, n_t)
    }
}

/// Non-negative `j mod n_x`.
#[inline]
pub fn wrap_index(j: i64, n_x: usize) -> usize {
    j.rem_euclid(n_x as i64) as usize
}

/// A density (veh/m) or speed (m/s) array over a [`RingGrid`], row-major in t.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: RingGrid,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: RingGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape(format!(
                "field has {} values, grid needs {}x{} = {}",
                values.len(),
                grid.n_t(),
                grid.n_x(),
                grid.len()
            )));
        }
        Ok(Self { grid, values })
    }

    /// Like [`Field::new`] but rejects negative entries.
    pub fn density(grid: RingGrid, values: Vec<f64>) -> Result<Self> {
        if let Some(p) = values.iter().position(|v| !(*v >= 0.0)) {
            return Err(Error::Domain(format!(
                "density must be non-negative, got {} at (t={}, x={})",
                values[p],
                p / grid.n_x(),
                p % grid.n_x()
            )));
        }
        Self::new(grid, values)
    }

    pub fn constant(grid: RingGrid, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.len()],
        }
    }

    pub fn from_fn(grid: RingGrid, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for i in 0..grid.n_t() {
            for j in 0..grid.n_x() {
                values.push(f(i, j));
            }
        }
        Self { grid, values }
    }

    pub fn grid(&self) -> &RingGrid {
        &self.grid
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, t: usize, j: usize) -> f64 {
        self.values[t * self.grid.n_x() + j]
    }

    /// Periodic access in space.
    #[inline]
    pub fn get_wrapped(&self, t: usize, j: i64) -> f64 {
        self.get(t, wrap_index(j, self.grid.n_x()))
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let n = self.grid.n_x();
        &self.values[t * n..(t + 1) * n]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.grid.n_t()).map(|t| self.get(t, j)).collect()
    }

    /// Keep every `stride`-th row, starting with row 0.
    pub fn subsample_time(&self, stride: usize) -> Result<Field> {
        if stride == 0 {
            return Err(Error::Config("time stride must be >= 1".into()));
        }
        let n_t = (self.grid.n_t() - 1) / stride + 1;
        let grid = RingGrid::new(
            self.grid.ring_length_m(),
            self.grid.dt_s() * stride as f64,
            self.grid.dx_m(),
            n_t,
        )?;
        let mut values = Vec::with_capacity(grid.len());
        for i in 0..n_t {
            values.extend_from_slice(self.row(i * stride));
        }
        Field::new(grid, values)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            grid: self.grid,
            values: self.values.iter().map(|v| f(*v)).collect(),
        }
    }
}

/// One GPS sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRecord {
    pub vehicle_id: u64,
    pub t: f64,
    pub x: f64,
    pub v: f64,
}

/// Vehicle trajectories with positions already wrapped onto `[0, L)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    records: Vec<TrajectoryRecord>,
}

impl TrajectorySet {
    pub fn new(records: Vec<TrajectoryRecord>, ring_length_m: f64) -> Result<Self> {
        let mut last_t: BTreeMap<u64, f64> = BTreeMap::new();
        for (k, r) in records.iter().enumerate() {
            if !(r.x >= 0.0 && r.x < ring_length_m) {
                return Err(Error::Input(format!(
                    "record {k} (vehicle {}): position {} outside [0, {ring_length_m})",
                    r.vehicle_id, r.x
                )));
            }
            if !(r.t.is_finite() && r.v.is_finite()) {
                return Err(Error::Input(format!(
                    "record {k} (vehicle {}): non-finite time or speed",
                    r.vehicle_id
                )));
            }
            if let Some(prev) = last_t.insert(r.vehicle_id, r.t) {
                if !(r.t > prev) {
                    return Err(Error::Input(format!(
                        "vehicle {}: timestamps not strictly increasing ({} after {})",
                        r.vehicle_id, r.t, prev
                    )));
                }
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[TrajectoryRecord] {
        &self.records
    }
    pub fn len(&self) -> usize {
        self.records.len()
    }
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records grouped by vehicle, ids ascending, each group in time order.
    pub fn by_vehicle(&self) -> BTreeMap<u64, Vec<TrajectoryRecord>> {
        let mut out: BTreeMap<u64, Vec<TrajectoryRecord>> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.vehicle_id).or_default().push(*r);
        }
        out
    }
}

/// The observed data: the full initial profile plus detector time series.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    pub grid: RingGrid,
    pub initial_profile: Vec<f64>,
    pub detector_positions: Vec<usize>,
    /// `detector_series[d][t]` is the density at detector `d` at row `t`.
    pub detector_series: Vec<Vec<f64>>,
}

impl MeasurementSet {
    pub fn n_detectors(&self) -> usize {
        self.detector_positions.len()
    }
}

fn check_positions(positions: &[usize], n_x: usize) -> Result<()> {
    let mut seen = HashSet::new();
    for &p in positions {
        if p >= n_x {
            return Err(Error::Config(format!(
                "detector position {p} outside [0, {n_x})"
            )));
        }
        if !seen.insert(p) {
            return Err(Error::Config(format!("duplicate detector position {p}")));
        }
    }
    Ok(())
}

/// Observe `field` through the initial row and the given detector cells.
pub fn subsample_measurements(
    field: &Field,
    detector_positions: &[usize],
) -> Result<MeasurementSet> {
    let grid = *field.grid();
    check_positions(detector_positions, grid.n_x())?;
    Ok(MeasurementSet {
        grid,
        initial_profile: field.row(0).to_vec(),
        detector_positions: detector_positions.to_vec(),
        detector_series: detector_positions
            .iter()
            .map(|&p| field.column(p))
            .collect(),
    })
}

/// `n` detectors spread evenly around the ring, the first at cell 0.
pub fn evenly_spaced_detectors(n_x: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > n_x {
        return Err(Error::Config(format!(
            "cannot place {n} detectors on {n_x} cells"
        )));
    }
    Ok((0..n).map(|i| i * n_x / n).collect())
}
