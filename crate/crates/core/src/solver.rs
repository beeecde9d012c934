//! Forward simulation of (non)local LWR on the ring.
//!
//! First-order conservative upwind finite volumes. Speeds are non-negative,
//! so the interface flux between cells `j` and `j+1` is taken from cell `j`:
//!
//! ```text
//! F_j = rho_j * V(rho_eta_j)
//! rho_j' = rho_j - dt/dx * (F_j - F_{j-1})
//! ```
//!
//! Mass is conserved by telescoping, and the update is a convex combination
//! of non-negative terms whenever `dt * max V <= dx`.

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::fd::FdParams;
use crate::grid::{Field, RingGrid};
use crate::kernel::DiscreteKernel;

pub const DEFAULT_CFL_SAFETY: f64 = 0.9;

#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Output grid. Each output row is `substeps` solver steps after the previous.
    pub grid: RingGrid,
    pub fd: FdParams,
    /// `None` runs the local model.
    pub kernel: Option<DiscreteKernel>,
    pub initial_profile: Vec<f64>,
    pub cfl_safety: f64,
    /// Solver steps per output row; the solver step is `grid.dt_s / substeps`.
    pub substeps: usize,
    pub exec: Execution,
}

impl SolverConfig {
    pub fn new(
        grid: RingGrid,
        fd: FdParams,
        kernel: Option<DiscreteKernel>,
        initial_profile: Vec<f64>,
    ) -> Self {
        Self {
            grid,
            fd,
            kernel,
            initial_profile,
            cfl_safety: DEFAULT_CFL_SAFETY,
            substeps: 1,
            exec: Execution::default(),
        }
    }

    pub fn with_substeps(mut self, substeps: usize) -> Self {
        self.substeps = substeps;
        self
    }

    pub fn with_cfl_safety(mut self, cfl_safety: f64) -> Self {
        self.cfl_safety = cfl_safety;
        self
    }

    pub fn with_exec(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    /// Time step of a single solver update.
    pub fn solver_dt(&self) -> f64 {
        self.grid.dt_s() / self.substeps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.initial_profile.len() != self.grid.n_x() {
            return Err(Error::Shape(format!(
                "initial profile has {} cells, grid has {}",
                self.initial_profile.len(),
                self.grid.n_x()
            )));
        }
        if let Some((j, v)) = self
            .initial_profile
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v >= 0.0))
        {
            return Err(Error::Domain(format!(
                "initial density {v} at cell {j} is negative"
            )));
        }
        if !(self.cfl_safety > 0.0 && self.cfl_safety <= 1.0) {
            return Err(Error::Config(format!(
                "cfl_safety must lie in (0, 1], got {}",
                self.cfl_safety
            )));
        }
        if self.substeps == 0 {
            return Err(Error::Config("substeps must be >= 1".into()));
        }
        if let Some(k) = &self.kernel {
            if (k.dx_m() - self.grid.dx_m()).abs() > 1e-12 * self.grid.dx_m() {
                return Err(Error::Config(format!(
                    "kernel cell width {} m differs from grid dx {} m",
                    k.dx_m(),
                    self.grid.dx_m()
                )));
            }
            if k.len() > self.grid.n_x() {
                return Err(Error::Config(format!(
                    "kernel spans {} cells but the ring has only {}",
                    k.len(),
                    self.grid.n_x()
                )));
            }
        }
        Ok(())
    }
}

/// `out[j] = sum_k rho[(j + k) mod n] * w[k]`.
pub fn nonlocal_density(rho_row: &[f64], kernel: &DiscreteKernel) -> Vec<f64> {
    let mut out = vec![0.0; rho_row.len()];
    nonlocal_density_into(rho_row, kernel.weights(), &mut out, 0);
    out
}

/// Writes the nonlocal density of cells `offset..offset + out.len()`.
fn nonlocal_density_into(rho: &[f64], w: &[f64], out: &mut [f64], offset: usize) {
    let n = rho.len();
    for (jj, o) in out.iter_mut().enumerate() {
        let j = offset + jj;
        let mut s = 0.0;
        for (k, wk) in w.iter().enumerate() {
            let idx = j + k;
            s += rho[if idx >= n { idx % n } else { idx }] * wk;
        }
        *o = s;
    }
}

const CHUNK: usize = 256;

fn velocities(rho: &[f64], config: &SolverConfig) -> Vec<f64> {
    let mut vel = vec![0.0; rho.len()];
    let fd = config.fd;
    match &config.kernel {
        None => {
            config.exec.for_each_chunk_mut(&mut vel, CHUNK, |c, out| {
                for (jj, o) in out.iter_mut().enumerate() {
                    *o = fd.speed_unchecked(rho[c * CHUNK + jj]);
                }
            });
        }
        Some(k) => {
            let w = k.weights();
            config.exec.for_each_chunk_mut(&mut vel, CHUNK, |c, out| {
                nonlocal_density_into(rho, w, out, c * CHUNK);
                for o in out.iter_mut() {
                    *o = fd.speed_unchecked(*o);
                }
            });
        }
    }
    vel
}

fn step_indexed(state: &[f64], config: &SolverConfig, step: usize) -> Result<Vec<f64>> {
    let n = state.len();
    let vel = velocities(state, config);
    let dt = config.solver_dt();
    let dx = config.grid.dx_m();
    let vmax = vel.iter().cloned().fold(0.0f64, f64::max);
    let ratio = dt * vmax / dx;
    if ratio > config.cfl_safety {
        return Err(Error::Cfl {
            step,
            max_speed: vmax,
            ratio,
            safety: config.cfl_safety,
        });
    }
    let lambda = dt / dx;
    let flux: Vec<f64> = state.iter().zip(&vel).map(|(r, v)| r * v).collect();
    let mut next = vec![0.0; n];
    config.exec.for_each_chunk_mut(&mut next, CHUNK, |c, out| {
        for (jj, o) in out.iter_mut().enumerate() {
            let j = c * CHUNK + jj;
            let upstream = flux[if j == 0 { n - 1 } else { j - 1 }];
            *o = state[j] - lambda * (flux[j] - upstream);
        }
    });
    Ok(next)
}

/// One solver update of length `config.solver_dt()`.
pub fn step(state: &[f64], config: &SolverConfig) -> Result<Vec<f64>> {
    if state.len() != config.grid.n_x() {
        return Err(Error::Shape(format!(
            "state has {} cells, grid has {}",
            state.len(),
            config.grid.n_x()
        )));
    }
    step_indexed(state, config, 0)
}

/// Roll the solver over the whole output grid.
pub fn simulate(config: &SolverConfig) -> Result<Field> {
    config.validate()?;
    let grid = config.grid;
    let mut values = Vec::with_capacity(grid.len());
    values.extend_from_slice(&config.initial_profile);
    let mut state = config.initial_profile.clone();
    let mut k = 0;
    for _ in 1..grid.n_t() {
        for _ in 0..config.substeps {
            state = step_indexed(&state, config, k)?;
            k += 1;
        }
        values.extend_from_slice(&state);
    }
    Field::new(grid, values)
}

/// Speed field `V(rho_eta)` implied by a density field.
pub fn speed_field(density: &Field, fd: &FdParams, kernel: Option<&DiscreteKernel>) -> Field {
    let grid = *density.grid();
    let mut values = Vec::with_capacity(grid.len());
    for i in 0..grid.n_t() {
        let row = density.row(i);
        match kernel {
            Some(k) => values.extend(
                nonlocal_density(row, k)
                    .into_iter()
                    .map(|r| fd.speed_unchecked(r.max(0.0))),
            ),
            None => values.extend(row.iter().map(|r| fd.speed_unchecked(r.max(0.0)))),
        }
    }
    Field::new(grid, values).expect("same grid")
}

/// `mean + amplitude * sin(2 pi x / L)` sampled at the cell positions.
pub fn sinusoidal_profile(grid: &RingGrid, mean: f64, amplitude: f64) -> Vec<f64> {
    let l = grid.ring_length_m();
    (0..grid.n_x())
        .map(|j| mean + amplitude * (2.0 * std::f64::consts::PI * grid.x(j) / l).sin())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{kernel_constant, kernel_linear};

    fn grid(n_x: usize, n_t: usize, dt: f64) -> RingGrid {
        RingGrid::new(n_x as f64, dt, 1.0, n_t).unwrap()
    }

    fn greenshields() -> FdParams {
        FdParams::greenshields(30.0, 0.2).unwrap()
    }

    #[test]
    fn nonlocal_density_examples() {
        let k = kernel_constant(2.0, 1.0).unwrap();
        assert_eq!(
            nonlocal_density(&[1.0, 0.0, 0.0, 0.0], &k),
            vec![0.5, 0.0, 0.0, 0.5]
        );
        let k = kernel_linear(7.0, 1.0).unwrap();
        let out = nonlocal_density(&[0.3; 11], &k);
        assert!(out.iter().all(|v| (v - 0.3).abs() < 1e-15));
        let id = DiscreteKernel::identity(1.0);
        let row = [0.1, 0.4, 0.2, 0.0];
        assert_eq!(nonlocal_density(&row, &id), row.to_vec());
    }

    #[test]
    fn uniform_state_is_equilibrium() {
        let g = grid(100, 2, 0.02);
        for kernel in [None, Some(kernel_linear(10.0, 1.0).unwrap())] {
            let cfg = SolverConfig::new(g, greenshields(), kernel, vec![0.07; 100]);
            let mut s = cfg.initial_profile.clone();
            for _ in 0..50 {
                s = step(&s, &cfg).unwrap();
            }
            assert!(s.iter().all(|v| *v == 0.07));
        }
    }

    #[test]
    fn single_row_simulation() {
        let g = grid(50, 2, 0.01).with_n_t(2).unwrap();
        let cfg = SolverConfig::new(g, greenshields(), None, vec![0.05; 50]);
        let f = simulate(&cfg).unwrap();
        assert_eq!(f.row(0), &cfg.initial_profile[..]);
    }

    #[test]
    fn cfl_violation_reported() {
        let g = grid(50, 3, 0.1);
        let cfg = SolverConfig::new(g, greenshields(), None, vec![0.0; 50]);
        match simulate(&cfg) {
            Err(Error::Cfl { max_speed, .. }) => assert_eq!(max_speed, 30.0),
            other => panic!("expected CFL error, got {other:?}"),
        }
    }

    #[test]
    fn mass_is_conserved() {
        let g = grid(200, 1001, 0.02);
        let init = sinusoidal_profile(&g, 0.05, 0.02);
        let m0: f64 = init.iter().sum();
        let cfg = SolverConfig::new(
            g,
            greenshields(),
            Some(kernel_linear(20.0, 1.0).unwrap()),
            init,
        );
        let f = simulate(&cfg).unwrap();
        for i in 0..g.n_t() {
            let m: f64 = f.row(i).iter().sum();
            assert!(((m - m0) / m0).abs() < 1e-10);
            assert!(f.row(i).iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn identity_kernel_matches_local() {
        let g = grid(120, 101, 0.02);
        let init = sinusoidal_profile(&g, 0.05, 0.03);
        let local = simulate(&SolverConfig::new(g, greenshields(), None, init.clone())).unwrap();
        let nl = simulate(&SolverConfig::new(
            g,
            greenshields(),
            Some(DiscreteKernel::identity(1.0)),
            init,
        ))
        .unwrap();
        assert_eq!(local, nl);
    }

    #[test]
    fn execution_modes_bit_identical() {
        let g = grid(700, 51, 0.02);
        let init = sinusoidal_profile(&g, 0.05, 0.02);
        let k = Some(kernel_linear(40.0, 1.0).unwrap());
        let a = simulate(
            &SolverConfig::new(g, greenshields(), k.clone(), init.clone())
                .with_exec(Execution::Sequential),
        )
        .unwrap();
        let b =
            simulate(&SolverConfig::new(g, greenshields(), k, init).with_exec(Execution::Parallel))
                .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kernel_dx_mismatch_rejected() {
        let g = grid(50, 3, 0.01);
        let cfg = SolverConfig::new(
            g,
            greenshields(),
            Some(kernel_linear(4.0, 0.5).unwrap()),
            vec![0.05; 50],
        );
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
