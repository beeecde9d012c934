//! Experiment configuration files (TOML, flat sections, units in key names).
//!
//! ```toml
//! seed = 42
//!
//! [grid]
//! ring_length_m = 800.0
//! dt_s = 1.0
//! dx_m = 1.0
//! horizon_s = 200.0
//!
//! [solver]
//! fd = "greenshields"
//! kernel = "linear"
//! eta_m = 40.0
//! ```
//!
//! Every key except `seed` has a default. The 40 m default for
//! `solver.eta_m` only applies while `solver.kernel` is left at its default;
//! naming a nonlocal kernel means naming its length too.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::fd::{FdParams, FdVariant, DEFAULT_RHO_C, DEFAULT_RHO_M, DEFAULT_V_F};
use crate::grid::RingGrid;
use crate::kde::{KdeConfig, DEFAULT_BANDWIDTH_T_S, DEFAULT_BANDWIDTH_X_M, DEFAULT_SPEED_FLOOR};
use crate::kernel::{DiscreteKernel, KernelShape};
use crate::loss::{DensityGrid, LossWeights, DEFAULT_PENALTY};
use crate::optim::{AdamConfig, LbfgsConfig};
use crate::solver::DEFAULT_CFL_SAFETY;
use crate::train::{KernelMode, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub kde: KdeSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub paths: PathsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub ring_length_m: f64,
    pub dt_s: f64,
    pub dx_m: f64,
    pub horizon_s: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            ring_length_m: 800.0,
            dt_s: 1.0,
            dx_m: 1.0,
            horizon_s: 200.0,
        }
    }
}

/// Kernel choice for simulation or training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelChoice {
    Constant,
    Linear,
    Local,
    Learned,
}

impl std::str::FromStr for KernelChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "linear" => Ok(Self::Linear),
            "local" => Ok(Self::Local),
            "learned" => Ok(Self::Learned),
            _ => Err(Error::Config(format!(
                "unknown kernel `{s}` (expected constant, linear, local or learned)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub fd: FdVariant,
    pub v_f_mps: f64,
    pub rho_m_vpm: f64,
    pub rho_c_vpm: f64,
    pub kernel: KernelChoice,
    pub eta_m: Option<f64>,
    pub cfl_safety: f64,
    /// Solver steps per output time step.
    pub substeps: usize,
    pub initial_mean_vpm: f64,
    pub initial_amplitude_vpm: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            fd: FdVariant::Greenshields,
            v_f_mps: DEFAULT_V_F,
            rho_m_vpm: DEFAULT_RHO_M,
            rho_c_vpm: DEFAULT_RHO_C,
            kernel: KernelChoice::Linear,
            eta_m: Some(40.0),
            cfl_safety: DEFAULT_CFL_SAFETY,
            substeps: 40,
            initial_mean_vpm: 0.05,
            initial_amplitude_vpm: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdeSection {
    pub bandwidth_x_m: f64,
    pub bandwidth_t_s: f64,
    pub speed_floor_vpm: f64,
    pub n_vehicles: usize,
    /// Euler steps per output time step when advecting virtual vehicles.
    pub vehicle_substeps: usize,
}

impl Default for KdeSection {
    fn default() -> Self {
        Self {
            bandwidth_x_m: DEFAULT_BANDWIDTH_X_M,
            bandwidth_t_s: DEFAULT_BANDWIDTH_T_S,
            speed_floor_vpm: DEFAULT_SPEED_FLOOR,
            n_vehicles: 40,
            vehicle_substeps: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub kernel: KernelChoice,
    /// Kernel length used by the learner; defaults to the solver's.
    pub eta_m: Option<f64>,
    pub density_layers: usize,
    pub density_width: usize,
    pub fd_layers: usize,
    pub fd_width: usize,
    pub density_scale_vpm: f64,
    pub speed_scale_mps: f64,
    pub adam_iters: u64,
    pub lbfgs_iters: u64,
    pub lr: f64,
    pub alpha_initial: f64,
    /// One weight shared by every detector.
    pub alpha_detector: f64,
    pub p_omega_1: f64,
    pub p_omega_2: f64,
    pub p_v_1: f64,
    pub p_v_2: f64,
    pub n_collocation: usize,
    pub n_detectors: usize,
    pub n_rho_cells: usize,
    pub checkpoint_every: u64,
    pub execution: Execution,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            kernel: KernelChoice::Learned,
            eta_m: None,
            density_layers: 3,
            density_width: 20,
            fd_layers: 2,
            fd_width: 16,
            density_scale_vpm: DEFAULT_RHO_M,
            speed_scale_mps: DEFAULT_V_F,
            adam_iters: 5000,
            lbfgs_iters: 500,
            lr: AdamConfig::default().lr,
            alpha_initial: 1.0,
            alpha_detector: 1.0,
            p_omega_1: DEFAULT_PENALTY,
            p_omega_2: DEFAULT_PENALTY,
            p_v_1: DEFAULT_PENALTY,
            p_v_2: DEFAULT_PENALTY,
            n_collocation: 512,
            n_detectors: 5,
            n_rho_cells: 100,
            checkpoint_every: 500,
            execution: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Density field used as training truth (defaults to `<out>/truth_rho.csv`).
    pub truth_rho: Option<PathBuf>,
    /// Speed field used for `E_v` (defaults to `<out>/truth_v.csv`).
    pub truth_v: Option<PathBuf>,
    pub trajectories: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

fn multiple_of(value: f64, step: f64) -> bool {
    let r = value / step;
    r >= 1.0 && (r - r.round()).abs() <= 1e-9 * r
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let explicit_kernel_without_eta = table
            .get("solver")
            .and_then(|s| s.as_table())
            .is_some_and(|s| s.contains_key("kernel") && !s.contains_key("eta_m"));
        let mut cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if explicit_kernel_without_eta {
            cfg.solver.eta_m = None;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The effective configuration, with every default spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        let s = &self.solver;
        if s.kernel == KernelChoice::Learned {
            return Err(Error::Config(
                "solver.kernel must be constant, linear or local".into(),
            ));
        }
        if s.kernel != KernelChoice::Local {
            let eta = s.eta_m.ok_or_else(|| {
                Error::Config("solver.eta_m is required for a nonlocal solver kernel".into())
            })?;
            if !multiple_of(eta, self.grid.dx_m) {
                return Err(Error::Config(format!(
                    "solver.eta_m = {eta} is not a positive multiple of grid.dx_m = {}",
                    self.grid.dx_m
                )));
            }
        }
        self.fd()?;
        if s.substeps == 0 {
            return Err(Error::Config("solver.substeps must be at least 1".into()));
        }
        if !(s.cfl_safety > 0.0) {
            return Err(Error::Config("solver.cfl_safety must be positive".into()));
        }
        let t = &self.training;
        if t.kernel != KernelChoice::Local {
            let eta = t.eta_m.or(s.eta_m).ok_or_else(|| {
                Error::Config("training.eta_m is required for a nonlocal training kernel".into())
            })?;
            if !multiple_of(eta, self.grid.dx_m) {
                return Err(Error::Config(format!(
                    "training.eta_m = {eta} is not a positive multiple of grid.dx_m = {}",
                    self.grid.dx_m
                )));
            }
        }
        if t.n_detectors == 0 {
            return Err(Error::Config(
                "training.n_detectors must be at least 1".into(),
            ));
        }
        if t.n_collocation == 0 || t.n_rho_cells == 0 {
            return Err(Error::Config(
                "training.n_collocation and training.n_rho_cells must be positive".into(),
            ));
        }
        self.kde()?.validate()?;
        if self.kde.n_vehicles == 0 || self.kde.vehicle_substeps == 0 {
            return Err(Error::Config(
                "kde.n_vehicles and kde.vehicle_substeps must be positive".into(),
            ));
        }
        self.loss_weights().validate(t.n_detectors)?;
        self.train_config()?.validate()
    }

    pub fn grid(&self) -> Result<RingGrid> {
        let g = &self.grid;
        RingGrid::with_horizon(g.ring_length_m, g.dt_s, g.dx_m, g.horizon_s)
    }

    pub fn fd(&self) -> Result<FdParams> {
        let s = &self.solver;
        FdParams::new(s.fd, s.v_f_mps, s.rho_m_vpm, s.rho_c_vpm)
    }

    pub fn solver_kernel(&self) -> Result<Option<DiscreteKernel>> {
        let eta = self.solver.eta_m.unwrap_or(0.0);
        let dx = self.grid.dx_m;
        Ok(match self.solver.kernel {
            KernelChoice::Local | KernelChoice::Learned => None,
            KernelChoice::Constant => {
                Some(DiscreteKernel::closed_form(KernelShape::Constant, eta, dx)?)
            }
            KernelChoice::Linear => {
                Some(DiscreteKernel::closed_form(KernelShape::Linear, eta, dx)?)
            }
        })
    }

    pub fn training_eta_m(&self) -> Option<f64> {
        self.training.eta_m.or(self.solver.eta_m)
    }

    pub fn kde(&self) -> Result<KdeConfig> {
        let mut k = KdeConfig::new(self.grid()?)
            .with_bandwidths(self.kde.bandwidth_x_m, self.kde.bandwidth_t_s);
        k.speed_floor = self.kde.speed_floor_vpm;
        Ok(k.with_exec(self.training.execution))
    }

    pub fn loss_weights(&self) -> LossWeights {
        let t = &self.training;
        LossWeights {
            alpha_initial: t.alpha_initial,
            alpha_detector: vec![t.alpha_detector; t.n_detectors],
            p_omega_1: t.p_omega_1,
            p_omega_2: t.p_omega_2,
            p_v_1: t.p_v_1,
            p_v_2: t.p_v_2,
        }
    }

    pub fn density_grid(&self) -> Result<DensityGrid> {
        DensityGrid::with_cells(self.solver.rho_m_vpm, self.training.n_rho_cells)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.training;
        let dx = self.grid.dx_m;
        let eta = self.training_eta_m().unwrap_or(dx);
        let cells = (eta / dx).round() as usize;
        let kernel = match t.kernel {
            KernelChoice::Learned => KernelMode::Learned { n_cells: cells },
            KernelChoice::Local => KernelMode::Local,
            KernelChoice::Constant => {
                KernelMode::Fixed(DiscreteKernel::closed_form(KernelShape::Constant, eta, dx)?)
            }
            KernelChoice::Linear => {
                KernelMode::Fixed(DiscreteKernel::closed_form(KernelShape::Linear, eta, dx)?)
            }
        };
        Ok(TrainConfig {
            density_layers: t.density_layers,
            density_width: t.density_width,
            fd_layers: t.fd_layers,
            fd_width: t.fd_width,
            density_scale: t.density_scale_vpm,
            rho_scale: self.solver.rho_m_vpm,
            speed_scale: t.speed_scale_mps,
            adam_iters: t.adam_iters,
            lbfgs_iters: t.lbfgs_iters,
            adam: AdamConfig {
                lr: t.lr,
                ..AdamConfig::default()
            },
            lbfgs: LbfgsConfig::default(),
            kernel,
            seed: self.seed,
            checkpoint_every: t.checkpoint_every,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = ExperimentConfig::from_toml("seed = 7").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.grid().unwrap().n_x(), 800);
        assert_eq!(c.grid().unwrap().n_t(), 201);
        assert_eq!(c.solver_kernel().unwrap().unwrap().len(), 40);
        assert_eq!(
            c.train_config().unwrap().kernel,
            KernelMode::Learned { n_cells: 40 }
        );
    }

    #[test]
    fn seed_is_required() {
        let e = ExperimentConfig::from_toml("[grid]\ndx_m = 1.0\n").unwrap_err();
        assert!(e.to_string().contains("seed"), "{e}");
    }

    #[test]
    fn missing_eta_names_the_field() {
        let mut c = ExperimentConfig::from_toml("seed = 1").unwrap();
        c.solver.eta_m = None;
        let e = c.validate().unwrap_err();
        assert!(e.to_string().contains("solver.eta_m"), "{e}");
        let e =
            ExperimentConfig::from_toml("seed = 1\n[solver]\nkernel = \"linear\"\n").unwrap_err();
        assert!(e.to_string().contains("solver.eta_m"), "{e}");
        let c = ExperimentConfig::from_toml(
            "seed = 1\n[solver]\nkernel = \"local\"\n[training]\neta_m = 20.0\n",
        )
        .unwrap();
        assert_eq!(c.solver.eta_m, None);
    }

    #[test]
    fn eta_must_be_a_multiple_of_dx() {
        let e = ExperimentConfig::from_toml("seed = 1\n[solver]\neta_m = 40.5\n").unwrap_err();
        assert!(e.to_string().contains("eta_m"));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml("seed = 1\n[grid]\ndx = 1.0\n").is_err());
    }

    #[test]
    fn effective_config_round_trips() {
        let c = ExperimentConfig::from_toml(
            "seed = 3\n[training]\nkernel = \"constant\"\neta_m = 20.0\nexecution = \"sequential\"\n",
        )
        .unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn local_training_needs_no_eta() {
        let mut c = ExperimentConfig::from_toml(
            "seed = 1\n[solver]\nkernel = \"local\"\n[training]\nkernel = \"local\"\n",
        )
        .unwrap();
        c.solver.eta_m = None;
        c.validate().unwrap();
        assert_eq!(c.train_config().unwrap().kernel, KernelMode::Local);
    }
}
