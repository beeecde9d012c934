//! End-to-end twin experiments driven by an [`ExperimentConfig`].

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, KernelChoice};
use crate::error::{Error, Result};
use crate::eval::{e_rho, e_v, leading_mass, EvalReport};
use crate::exec::run_jobs;
use crate::grid::{evenly_spaced_detectors, subsample_measurements, Field, TrajectorySet};
use crate::kde::{reconstruct_density, reconstruct_speed, synth_trajectories, SpeedReconstruction};
use crate::kernel::DiscreteKernel;
use crate::loss::{loss_phys_static_split, CollocationSet, PinnProblem};
use crate::solver::{simulate, sinusoidal_profile, speed_field, SolverConfig};
use crate::train::{sub_seed, train, TrainState};

/// Ground-truth density and speed fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub rho: Field,
    pub v: Field,
}

pub fn solver_config(cfg: &ExperimentConfig) -> Result<SolverConfig> {
    let grid = cfg.grid()?;
    let s = &cfg.solver;
    Ok(SolverConfig::new(
        grid,
        cfg.fd()?,
        cfg.solver_kernel()?,
        sinusoidal_profile(&grid, s.initial_mean_vpm, s.initial_amplitude_vpm),
    )
    .with_substeps(s.substeps)
    .with_cfl_safety(s.cfl_safety)
    .with_exec(cfg.training.execution))
}

pub fn simulate_truth(cfg: &ExperimentConfig) -> Result<Truth> {
    let sc = solver_config(cfg)?;
    let rho = simulate(&sc)?;
    let v = speed_field(&rho, &sc.fd, sc.kernel.as_ref());
    Ok(Truth { rho, v })
}

/// Virtual probe vehicles through the speed field; the fleet's phase on the
/// ring comes from the `vehicles` sub-seed.
pub fn synth_vehicles(cfg: &ExperimentConfig, speed: &Field) -> Result<TrajectorySet> {
    let n = cfg.kde.n_vehicles;
    let headway = cfg.grid.ring_length_m / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "vehicles"));
    let offset = rng.random_range(0.0..headway);
    synth_trajectories(speed, n, cfg.kde.vehicle_substeps, offset)
}

pub fn reconstruct(
    cfg: &ExperimentConfig,
    traj: &TrajectorySet,
) -> Result<(Field, SpeedReconstruction)> {
    let k = cfg.kde()?;
    Ok((reconstruct_density(traj, &k)?, reconstruct_speed(traj, &k)?))
}

/// The training problem: detectors and initial profile from `truth_rho`.
pub fn build_problem(cfg: &ExperimentConfig, truth_rho: &Field) -> Result<PinnProblem> {
    let grid = cfg.grid()?;
    if *truth_rho.grid() != grid {
        return Err(Error::Config(
            "truth density is not on the configured grid".into(),
        ));
    }
    let det = evenly_spaced_detectors(grid.n_x(), cfg.training.n_detectors)?;
    let measurements = subsample_measurements(truth_rho, &det)?;
    let colloc = CollocationSet::sample(
        &grid,
        cfg.training.n_collocation,
        sub_seed(cfg.seed, "collocation"),
    )?;
    let problem = PinnProblem {
        grid,
        measurements,
        colloc,
        weights: cfg.loss_weights(),
        density_grid: cfg.density_grid()?,
        exec: cfg.training.execution,
    };
    problem.validate()?;
    Ok(problem)
}

/// Metrics, learned kernel and FD curve of a trained state.
pub fn evaluate(cfg: &ExperimentConfig, state: &TrainState, truth: &Truth) -> Result<EvalReport> {
    let grid = cfg.grid()?;
    let field_est = Field::new(grid, state.density.predict_field(&grid))?;
    let kernel = state.kernel()?;
    let dgrid = cfg.density_grid()?;
    let rhos = dgrid.closed_points();
    let fd_curve = rhos.iter().cloned().zip(state.fd.speed(&rhos)).collect();
    let (kernel_penalty, _) =
        loss_phys_static_split(&state.fd, &state.theta_omega, &cfg.loss_weights(), &dgrid)?;
    Ok(EvalReport {
        e_rho_pct: e_rho(&field_est, &truth.rho)?,
        e_v_pct: e_v(&state.fd, &kernel, &field_est, &truth.v)?,
        mass_fraction_4m: leading_mass(&kernel, 4.0),
        mass_fraction_10m: leading_mass(&kernel, 10.0),
        kernel_penalty,
        kernel,
        fd_curve,
        field_est,
        loss_trace: state.trace.clone(),
    })
}

/// Train from scratch (or from `resume`) and evaluate against `truth`.
pub fn train_and_evaluate(
    cfg: &ExperimentConfig,
    truth: &Truth,
    resume: Option<&Path>,
    checkpoint: Option<&Path>,
) -> Result<(TrainState, EvalReport)> {
    let problem = build_problem(cfg, &truth.rho)?;
    let tcfg = cfg.train_config()?;
    let mut state = TrainState::init(&problem, &tcfg)?;
    if let Some(p) = resume {
        state.load_checkpoint(p)?;
    }
    train(&problem, &tcfg, &mut state, checkpoint)?;
    let report = evaluate(cfg, &state, truth)?;
    Ok((state, report))
}

/// One entry of a sweep; failures are kept as messages.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub label: String,
    pub value: f64,
    pub outcome: std::result::Result<EvalReport, String>,
}

impl SweepRow {
    pub fn e_rho_pct(&self) -> Option<f64> {
        self.outcome.as_ref().ok().map(|r| r.e_rho_pct)
    }
}

fn sweep<F>(
    cfg: &ExperimentConfig,
    truth: &Truth,
    label: &str,
    values: &[f64],
    jobs: usize,
    apply: F,
) -> Result<Vec<SweepRow>>
where
    F: Fn(&mut ExperimentConfig, f64) + Sync + Send,
{
    if values.is_empty() {
        return Err(Error::Config(format!("{label} list is empty")));
    }
    let runs: Vec<(f64, ExperimentConfig)> = values
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            apply(&mut c, v);
            (v, c)
        })
        .collect();
    Ok(run_jobs(runs, jobs, |(v, c)| SweepRow {
        label: label.to_string(),
        value: v,
        outcome: c
            .validate()
            .and_then(|_| train_and_evaluate(&c, truth, None, None))
            .map(|(_, r)| r)
            .map_err(|e| e.to_string()),
    }))
}

/// One learned-kernel training per kernel length.
pub fn eta_sweep(
    cfg: &ExperimentConfig,
    truth: &Truth,
    etas: &[f64],
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    sweep(cfg, truth, "eta_m", etas, jobs, |c, eta| {
        c.training.eta_m = Some(eta);
        if c.training.kernel == KernelChoice::Local {
            c.training.kernel = KernelChoice::Learned;
        }
    })
}

/// Grid search over a common data weight for the initial profile and detectors.
pub fn alpha_sweep(
    cfg: &ExperimentConfig,
    truth: &Truth,
    alphas: &[f64],
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    sweep(cfg, truth, "alpha", alphas, jobs, |c, a| {
        c.training.alpha_initial = a;
        c.training.alpha_detector = a;
    })
}

/// Index of the successful row with the smallest `E_rho`.
pub fn best_row(rows: &[SweepRow]) -> Option<usize> {
    rows.iter()
        .enumerate()
        .filter_map(|(i, r)| r.e_rho_pct().map(|e| (i, e)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
}

/// Sweep results as a delimited table.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::new();
    if let Some(r) = rows.first() {
        s.push_str(&format!(
            "{},e_rho_pct,e_v_pct,mass_fraction_4m,mass_fraction_10m,status\n",
            r.label
        ));
    }
    for r in rows {
        match &r.outcome {
            Ok(rep) => s.push_str(&format!(
                "{},{},{},{},{},ok\n",
                r.value, rep.e_rho_pct, rep.e_v_pct, rep.mass_fraction_4m, rep.mass_fraction_10m
            )),
            Err(e) => s.push_str(&format!(
                "{},,,,,\"failed: {}\"\n",
                r.value,
                e.replace('"', "'")
            )),
        }
    }
    s
}

/// Kernel of a successful sweep row.
pub fn row_kernel(row: &SweepRow) -> Option<&DiscreteKernel> {
    row.outcome.as_ref().ok().map(|r| &r.kernel)
}
