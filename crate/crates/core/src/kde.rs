//! Gaussian kernel density estimation of density and speed from trajectories.
//!
//! Each record carries a time weight equal to its share of the vehicle's
//! sampling interval (trapezoid rule), so a vehicle contributes unit mass
//! per unit time regardless of how often it is sampled. Gaussians are cut
//! off at [`TRUNCATION_SIGMAS`] standard deviations.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grid::{wrap_index, Field, RingGrid, TrajectoryRecord, TrajectorySet};

pub const DEFAULT_BANDWIDTH_X_M: f64 = 10.0;
pub const DEFAULT_BANDWIDTH_T_S: f64 = 2.0;
/// Speed cells whose weight sum (veh/m) falls below this use the fallback.
pub const DEFAULT_SPEED_FLOOR: f64 = 1e-6;
pub const TRUNCATION_SIGMAS: f64 = 8.0;
/// Ring images summed when the spatial window covers the whole ring.
pub const RING_IMAGES: i64 = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdeConfig {
    pub bandwidth_x_m: f64,
    pub bandwidth_t_s: f64,
    pub grid: RingGrid,
    pub speed_floor: f64,
    pub exec: Execution,
}

impl KdeConfig {
    pub fn new(grid: RingGrid) -> Self {
        Self {
            bandwidth_x_m: DEFAULT_BANDWIDTH_X_M,
            bandwidth_t_s: DEFAULT_BANDWIDTH_T_S,
            grid,
            speed_floor: DEFAULT_SPEED_FLOOR,
            exec: Execution::default(),
        }
    }

    pub fn with_bandwidths(mut self, x_m: f64, t_s: f64) -> Self {
        self.bandwidth_x_m = x_m;
        self.bandwidth_t_s = t_s;
        self
    }

    pub fn with_exec(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("bandwidth_x_m", self.bandwidth_x_m),
            ("bandwidth_t_s", self.bandwidth_t_s),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.speed_floor >= 0.0) {
            return Err(Error::Config(format!(
                "speed_floor must be non-negative, got {}",
                self.speed_floor
            )));
        }
        Ok(())
    }
}

fn gauss(d: f64, sigma: f64) -> f64 {
    (-0.5 * (d / sigma).powi(2)).exp() / (sigma * (2.0 * PI).sqrt())
}

/// Record with its time weight, sorted by time.
#[derive(Debug, Clone, Copy)]
struct Weighted {
    t: f64,
    x: f64,
    v: f64,
    w: f64,
}

fn weighted_records(traj: &TrajectorySet, fallback_dt: f64) -> Vec<Weighted> {
    let mut out = Vec::with_capacity(traj.len());
    for recs in traj.by_vehicle().values() {
        let n = recs.len();
        for (k, r) in recs.iter().enumerate() {
            let w = if n == 1 {
                fallback_dt
            } else {
                let lo = if k > 0 { recs[k - 1].t } else { r.t };
                let hi = if k + 1 < n { recs[k + 1].t } else { r.t };
                0.5 * (hi - lo)
            };
            out.push(Weighted {
                t: r.t,
                x: r.x,
                v: r.v,
                w,
            });
        }
    }
    out.sort_by(|a, b| a.t.total_cmp(&b.t));
    out
}

/// Periodic spatial Gaussian of one record, as `(cell, weight)` pairs.
fn spatial_profile(x_r: f64, grid: &RingGrid, sigma: f64, out: &mut Vec<(usize, f64)>) {
    out.clear();
    let (dx, n_x, l) = (grid.dx_m(), grid.n_x(), grid.ring_length_m());
    let half = (TRUNCATION_SIGMAS * sigma / dx).ceil() as i64;
    if 2 * half + 1 < n_x as i64 {
        let c = (x_r / dx).round() as i64;
        for k in -half..=half {
            let d = (c + k) as f64 * dx - x_r;
            out.push((wrap_index(c + k, n_x), gauss(d, sigma)));
        }
    } else {
        for j in 0..n_x {
            let base = grid.x(j) - x_r;
            let w: f64 = (-RING_IMAGES..=RING_IMAGES)
                .map(|m| gauss(base + m as f64 * l, sigma))
                .sum();
            out.push((j, w));
        }
    }
}

/// Weighted sums over records for one output row: (Σ w G, Σ w v G).
fn row_sums(i: usize, recs: &[Weighted], cfg: &KdeConfig) -> (Vec<f64>, Vec<f64>) {
    let grid = &cfg.grid;
    let t = grid.t(i);
    let reach = TRUNCATION_SIGMAS * cfg.bandwidth_t_s;
    let start = recs.partition_point(|r| r.t < t - reach);
    let mut dens = vec![0.0; grid.n_x()];
    let mut flux = vec![0.0; grid.n_x()];
    let mut prof = Vec::new();
    for r in recs[start..].iter().take_while(|r| r.t <= t + reach) {
        let gt = r.w * gauss(t - r.t, cfg.bandwidth_t_s);
        spatial_profile(r.x, grid, cfg.bandwidth_x_m, &mut prof);
        for &(j, gx) in &prof {
            let g = gt * gx;
            dens[j] += g;
            flux[j] += g * r.v;
        }
    }
    (dens, flux)
}

fn check(traj: &TrajectorySet, cfg: &KdeConfig) -> Result<()> {
    cfg.validate()?;
    if traj.is_empty() {
        return Err(Error::Input("no records".into()));
    }
    Ok(())
}

/// Density field (veh/m) on the configured grid.
pub fn reconstruct_density(traj: &TrajectorySet, cfg: &KdeConfig) -> Result<Field> {
    check(traj, cfg)?;
    let recs = weighted_records(traj, cfg.grid.dt_s());
    let rows = cfg
        .exec
        .map_range(cfg.grid.n_t(), |i| row_sums(i, &recs, cfg).0);
    Field::density(cfg.grid, rows.concat())
}

/// Nadaraya-Watson speed field plus the cells that used the fallback.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedReconstruction {
    pub field: Field,
    /// `true` where the weight sum was below the floor and the value was
    /// copied from the nearest valid cell of the same row.
    pub fallback: Vec<bool>,
}

impl SpeedReconstruction {
    pub fn n_fallback(&self) -> usize {
        self.fallback.iter().filter(|&&f| f).count()
    }
}

pub fn reconstruct_speed(traj: &TrajectorySet, cfg: &KdeConfig) -> Result<SpeedReconstruction> {
    check(traj, cfg)?;
    let recs = weighted_records(traj, cfg.grid.dt_s());
    let n_x = cfg.grid.n_x();
    let rows = cfg.exec.map_range(cfg.grid.n_t(), |i| {
        let (dens, flux) = row_sums(i, &recs, cfg);
        let valid: Vec<bool> = dens.iter().map(|&d| d > cfg.speed_floor).collect();
        if !valid.iter().any(|&v| v) {
            return Err(Error::Input(format!(
                "no trajectory support at t = {} s; speed undefined",
                cfg.grid.t(i)
            )));
        }
        let mut v = vec![0.0; n_x];
        let mut flag = vec![false; n_x];
        for j in 0..n_x {
            if valid[j] {
                v[j] = flux[j] / dens[j];
            }
        }
        for j in 0..n_x {
            if valid[j] {
                continue;
            }
            flag[j] = true;
            // nearest valid cell by ring distance, downstream first on ties
            let src = (1..=n_x as i64)
                .flat_map(|k| [j as i64 + k, j as i64 - k])
                .map(|c| wrap_index(c, n_x))
                .find(|&c| valid[c])
                .expect("row has a valid cell");
            v[j] = v[src];
        }
        Ok((v, flag))
    });
    let mut values = Vec::with_capacity(cfg.grid.len());
    let mut fallback = Vec::with_capacity(cfg.grid.len());
    for r in rows {
        let (v, f) = r?;
        values.extend(v);
        fallback.extend(f);
    }
    Ok(SpeedReconstruction {
        field: Field::new(cfg.grid, values)?,
        fallback,
    })
}

/// Linear interpolation of one row at a continuous ring position.
fn interp_row(row: &[f64], x: f64, dx: f64) -> f64 {
    let n = row.len();
    let s = x / dx;
    let j = s.floor();
    let a = s - j;
    let j0 = wrap_index(j as i64, n);
    let j1 = wrap_index(j as i64 + 1, n);
    (1.0 - a) * row[j0] + a * row[j1]
}

/// Virtual probe vehicles advected through a speed field.
///
/// Vehicles start at equal headways `L / n_vehicles`, the first at
/// `offset_m`, and follow
/// `dx/dt = v(t, x)` with forward Euler, taking `substeps` steps per grid
/// row and interpolating the speed linearly in space and time. One record
/// per grid row is emitted for each vehicle.
pub fn synth_trajectories(
    speed: &Field,
    n_vehicles: usize,
    substeps: usize,
    offset_m: f64,
) -> Result<TrajectorySet> {
    if n_vehicles == 0 {
        return Err(Error::Config("n_vehicles must be at least 1".into()));
    }
    if substeps == 0 {
        return Err(Error::Config("substeps must be at least 1".into()));
    }
    let grid = speed.grid();
    if speed.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("speed field has non-finite values".into()));
    }
    let (l, dx) = (grid.ring_length_m(), grid.dx_m());
    let h = grid.dt_s() / substeps as f64;
    let headway = l / n_vehicles as f64;
    let mut pos: Vec<f64> = (0..n_vehicles)
        .map(|k| {
            let x = (offset_m + k as f64 * headway).rem_euclid(l);
            if x >= l {
                0.0
            } else {
                x
            }
        })
        .collect();
    let mut records = Vec::with_capacity(n_vehicles * grid.n_t());
    for i in 0..grid.n_t() {
        for (k, &x) in pos.iter().enumerate() {
            records.push(TrajectoryRecord {
                vehicle_id: k as u64,
                t: grid.t(i),
                x,
                v: interp_row(speed.row(i), x, dx),
            });
        }
        if i + 1 == grid.n_t() {
            break;
        }
        let (r0, r1) = (speed.row(i), speed.row(i + 1));
        for x in pos.iter_mut() {
            for s in 0..substeps {
                let a = s as f64 / substeps as f64;
                let v = (1.0 - a) * interp_row(r0, *x, dx) + a * interp_row(r1, *x, dx);
                *x = (*x + h * v).rem_euclid(l);
                if *x >= l {
                    *x = 0.0;
                }
            }
        }
    }
    TrajectorySet::new(records, l)
}
