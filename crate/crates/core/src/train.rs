//! Two-phase training of the density network, the FD network and the kernel.
//!
//! The trainable parameters are concatenated as `[theta | theta_v | theta_w]`
//! (the last block only when the kernel is learned). ADAM runs for
//! `adam_iters` iterations, then L-BFGS for up to `lbfgs_iters`.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_text, write_text, LossTraceRow};
use crate::kernel::DiscreteKernel;
use crate::loss::{normalized_weights, LossParts, PinnProblem};
use crate::model::{DensityModel, FdModel};
use crate::net::MlpNet;
use crate::optim::{adam_step, lbfgs_step, AdamConfig, AdamState, LbfgsConfig, LbfgsState};

/// Derive an independent seed for a named component from the run seed.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the seed through splitmix64
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// How the look-ahead kernel enters training.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelMode {
    /// `n_cells` raw weights learned from a uniform start.
    Learned { n_cells: usize },
    /// Frozen weights, e.g. a closed-form kernel.
    Fixed(DiscreteKernel),
    /// The local model, kernel `[1.0]`.
    Local,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub density_layers: usize,
    pub density_width: usize,
    pub fd_layers: usize,
    pub fd_width: usize,
    pub density_scale: f64,
    pub rho_scale: f64,
    pub speed_scale: f64,
    pub adam_iters: u64,
    pub lbfgs_iters: u64,
    pub adam: AdamConfig,
    pub lbfgs: LbfgsConfig,
    pub kernel: KernelMode,
    pub seed: u64,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: u64,
}

impl TrainConfig {
    pub fn new(kernel: KernelMode, seed: u64) -> Self {
        Self {
            density_layers: 3,
            density_width: 20,
            fd_layers: 2,
            fd_width: 16,
            density_scale: 0.2,
            rho_scale: 0.2,
            speed_scale: 30.0,
            adam_iters: 5000,
            lbfgs_iters: 500,
            adam: AdamConfig::default(),
            lbfgs: LbfgsConfig::default(),
            kernel,
            seed,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.density_width == 0 || self.fd_width == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        for (k, v) in [
            ("density_scale", self.density_scale),
            ("rho_scale", self.rho_scale),
            ("speed_scale", self.speed_scale),
            ("lr", self.adam.lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        match &self.kernel {
            KernelMode::Learned { n_cells: 0 } => Err(Error::Config(
                "learned kernel needs at least one cell".into(),
            )),
            KernelMode::Fixed(k) => k.validate(),
            _ => Ok(()),
        }
    }
}

/// Parameter blocks inside the flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Blocks {
    pub theta: Range<usize>,
    pub theta_v: Range<usize>,
    pub theta_omega: Range<usize>,
}

impl Blocks {
    pub fn len(&self) -> usize {
        self.theta_omega.end
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Adam,
    Lbfgs,
    Done,
}

/// Everything needed to continue a run bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub density: DensityModel,
    pub fd: FdModel,
    /// Raw kernel weights; for fixed and local kernels these are the frozen weights.
    pub theta_omega: Vec<f64>,
    pub kernel_dx_m: f64,
    pub blocks: Blocks,
    pub phase: Phase,
    /// Completed iterations over both phases.
    pub iteration: u64,
    pub adam: AdamState,
    pub lbfgs: LbfgsState,
    pub trace: Vec<LossTraceRow>,
}

impl TrainState {
    pub fn init(problem: &PinnProblem, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let init = sub_seed(cfg.seed, "init");
        let dnet = MlpNet::init_glorot(
            DensityModel::spec(cfg.density_layers, cfg.density_width),
            sub_seed(init, "density"),
        )?;
        let fnet = MlpNet::init_glorot(
            FdModel::spec(cfg.fd_layers, cfg.fd_width),
            sub_seed(init, "fd"),
        )?;
        let density = DensityModel::new(dnet, &problem.grid, cfg.density_scale)?;
        let fd = FdModel::new(fnet, cfg.rho_scale, cfg.speed_scale)?;
        let dx = problem.grid.dx_m();
        let (theta_omega, learned) = match &cfg.kernel {
            KernelMode::Learned { n_cells } => (vec![1.0; *n_cells], true),
            KernelMode::Fixed(k) => (k.weights().to_vec(), false),
            KernelMode::Local => (vec![1.0], false),
        };
        if theta_omega.len() > problem.grid.n_x() {
            return Err(Error::Config(format!(
                "kernel of {} cells is longer than the ring ({} cells)",
                theta_omega.len(),
                problem.grid.n_x()
            )));
        }
        let a = density.net.n_params();
        let b = a + fd.net.n_params();
        let c = if learned { b + theta_omega.len() } else { b };
        let blocks = Blocks {
            theta: 0..a,
            theta_v: a..b,
            theta_omega: b..c,
        };
        let n = blocks.len();
        Ok(Self {
            density,
            fd,
            theta_omega,
            kernel_dx_m: dx,
            blocks,
            phase: if cfg.adam_iters > 0 {
                Phase::Adam
            } else if cfg.lbfgs_iters > 0 {
                Phase::Lbfgs
            } else {
                Phase::Done
            },
            iteration: 0,
            adam: AdamState::new(cfg.adam, n),
            lbfgs: LbfgsState::new(cfg.lbfgs),
            trace: Vec::new(),
        })
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.blocks.len());
        p.extend_from_slice(self.density.net.params());
        p.extend_from_slice(self.fd.net.params());
        if !self.blocks.theta_omega.is_empty() {
            p.extend_from_slice(&self.theta_omega);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.blocks.len() {
            return Err(Error::Shape(format!(
                "{} parameters for {} slots",
                p.len(),
                self.blocks.len()
            )));
        }
        self.density.net.set_params(&p[self.blocks.theta.clone()])?;
        self.fd.net.set_params(&p[self.blocks.theta_v.clone()])?;
        if !self.blocks.theta_omega.is_empty() {
            self.theta_omega
                .copy_from_slice(&p[self.blocks.theta_omega.clone()]);
        }
        Ok(())
    }

    /// The current kernel, normalised to unit mass.
    pub fn kernel(&self) -> Result<DiscreteKernel> {
        DiscreteKernel::from_weights(normalized_weights(&self.theta_omega)?, self.kernel_dx_m)
    }

    /// Loss and flat gradient at the current parameters.
    pub fn loss_and_grad(&self, problem: &PinnProblem) -> Result<(LossParts, Vec<f64>)> {
        let (parts, g) =
            problem.loss_total_and_grads(&self.density, &self.fd, &self.theta_omega)?;
        let mut flat = g.theta;
        flat.extend(g.theta_v);
        if !self.blocks.theta_omega.is_empty() {
            flat.extend(g.theta_omega);
        }
        Ok((parts, flat))
    }

    fn record(&mut self, parts: &LossParts) {
        self.trace.push(LossTraceRow {
            iter: self.iteration,
            total: parts.total,
            data: parts.data,
            phy_d: parts.phy_d,
            phy_s: parts.phy_s,
        });
    }

    fn diverged(&self, e: Error) -> Error {
        if e.is_numerical() {
            let last = self
                .trace
                .iter()
                .rev()
                .find(|r| r.total.is_finite())
                .map_or("none".to_string(), |r| r.iter.to_string());
            Error::NonFinite(format!(
                "training diverged at iteration {} (last finite iteration {last}): {e}",
                self.iteration
            ))
        } else {
            e
        }
    }

    /// Run one iteration of the current phase. Returns `false` once done.
    pub fn step(&mut self, problem: &PinnProblem, cfg: &TrainConfig) -> Result<bool> {
        match self.phase {
            Phase::Done => Ok(false),
            Phase::Adam => {
                let (parts, g) = self.loss_and_grad(problem).map_err(|e| self.diverged(e))?;
                let mut p = self.params();
                adam_step(&mut self.adam, &mut p, &g).map_err(|e| self.diverged(e))?;
                self.set_params(&p)?;
                self.record(&parts);
                self.iteration += 1;
                if self.iteration >= cfg.adam_iters {
                    self.phase = if cfg.lbfgs_iters > 0 {
                        Phase::Lbfgs
                    } else {
                        Phase::Done
                    };
                }
                Ok(true)
            }
            Phase::Lbfgs => {
                let mut p = self.params();
                let mut probe = self.clone();
                let mut last_parts = LossParts::default();
                let mut parts_at = Vec::new();
                let r = lbfgs_step(&mut self.lbfgs, &mut p, |x| {
                    probe.set_params(x)?;
                    let (parts, g) = probe.loss_and_grad(problem)?;
                    parts_at.push((parts.total, parts));
                    Ok((parts.total, g))
                });
                let r = r.map_err(|e| self.diverged(e))?;
                self.set_params(&p)?;
                if let Some((_, parts)) = parts_at.iter().rev().find(|(f, _)| *f == r.loss) {
                    last_parts = *parts;
                } else {
                    // no new evaluation was needed; recompute the split once
                    if let Ok((parts, _)) = self.loss_and_grad(problem) {
                        last_parts = parts;
                    }
                }
                self.record(&last_parts);
                self.iteration += 1;
                if r.converged || self.iteration >= cfg.adam_iters + cfg.lbfgs_iters {
                    self.phase = Phase::Done;
                }
                Ok(true)
            }
        }
    }

    /// Serialise the full state (parameters, optimizer state and trace).
    pub fn to_checkpoint(&self) -> String {
        let mut s = String::from(CHECKPOINT_HEADER);
        s.push('\n');
        let vec = |s: &mut String, name: &str, v: &[f64]| {
            let _ = write!(s, "{name} {}", v.len());
            for x in v {
                let _ = write!(s, " {x}");
            }
            s.push('\n');
        };
        let phase = match self.phase {
            Phase::Adam => "adam",
            Phase::Lbfgs => "lbfgs",
            Phase::Done => "done",
        };
        let _ = writeln!(s, "phase {phase}");
        let _ = writeln!(s, "iteration {}", self.iteration);
        vec(&mut s, "params", &self.params());
        vec(&mut s, "theta_omega", &self.theta_omega);
        let _ = writeln!(s, "adam_step {}", self.adam.step);
        vec(&mut s, "adam_m", &self.adam.m);
        vec(&mut s, "adam_v", &self.adam.v);
        let _ = writeln!(s, "lbfgs_iterations {}", self.lbfgs.iterations);
        let _ = writeln!(s, "lbfgs_pairs {}", self.lbfgs.s.len());
        for (a, b) in self.lbfgs.s.iter().zip(&self.lbfgs.y) {
            vec(&mut s, "s", a);
            vec(&mut s, "y", b);
        }
        match &self.lbfgs.current {
            Some((f, g)) => {
                let _ = writeln!(s, "lbfgs_loss {f}");
                vec(&mut s, "lbfgs_grad", g);
            }
            None => s.push_str("lbfgs_loss none\n"),
        }
        let _ = writeln!(s, "trace {}", self.trace.len());
        for r in &self.trace {
            let _ = writeln!(
                s,
                "r {} {} {} {} {}",
                r.iter, r.total, r.data, r.phy_d, r.phy_s
            );
        }
        s
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_checkpoint())
    }

    /// Restore a checkpoint into a state freshly initialised from the same config.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let text = read_text(path)?;
        let err = |line: usize, msg: String| Error::Parse {
            path: path.into(),
            line: line + 1,
            msg,
        };
        if text.lines().next() != Some(CHECKPOINT_HEADER) {
            return Err(err(0, format!("expected header `{CHECKPOINT_HEADER}`")));
        }
        let mut lines = text.lines().enumerate().skip(1);
        let mut next = |want: &str| -> Result<(usize, Vec<&str>)> {
            let (n, l) = lines
                .next()
                .ok_or_else(|| err(0, format!("missing `{want}`")))?;
            let mut it = l.split_whitespace();
            if it.next() != Some(want) {
                return Err(err(n, format!("expected `{want}`")));
            }
            Ok((n, it.collect()))
        };
        fn num<T: std::str::FromStr>(s: &str, n: usize, path: &Path) -> Result<T> {
            s.parse().map_err(|_| Error::Parse {
                path: path.into(),
                line: n + 1,
                msg: format!("bad number `{s}`"),
            })
        }
        let vecf = |(n, toks): (usize, Vec<&str>)| -> Result<Vec<f64>> {
            let len: usize = num(toks.first().copied().unwrap_or(""), n, path)?;
            if toks.len() != len + 1 {
                return Err(Error::Parse {
                    path: path.into(),
                    line: n + 1,
                    msg: format!("expected {len} values, found {}", toks.len() - 1),
                });
            }
            toks[1..].iter().map(|t| num(t, n, path)).collect()
        };
        let scalar = |(n, toks): (usize, Vec<&str>)| -> Result<String> {
            toks.first()
                .map(|s| s.to_string())
                .ok_or_else(|| Error::Parse {
                    path: path.into(),
                    line: n + 1,
                    msg: "missing value".into(),
                })
        };

        let phase = match scalar(next("phase")?)?.as_str() {
            "adam" => Phase::Adam,
            "lbfgs" => Phase::Lbfgs,
            "done" => Phase::Done,
            other => return Err(err(1, format!("unknown phase `{other}`"))),
        };
        let iteration: u64 = num(&scalar(next("iteration")?)?, 2, path)?;
        let params = vecf(next("params")?)?;
        let theta_omega = vecf(next("theta_omega")?)?;
        if params.len() != self.blocks.len() || theta_omega.len() != self.theta_omega.len() {
            return Err(Error::Config(format!(
                "{}: checkpoint does not match the configured networks/kernel",
                path.display()
            )));
        }
        let adam_step_n: u64 = num(&scalar(next("adam_step")?)?, 0, path)?;
        let m = vecf(next("adam_m")?)?;
        let v = vecf(next("adam_v")?)?;
        let lb_iters: u64 = num(&scalar(next("lbfgs_iterations")?)?, 0, path)?;
        let pairs: usize = num(&scalar(next("lbfgs_pairs")?)?, 0, path)?;
        let mut ss = std::collections::VecDeque::new();
        let mut ys = std::collections::VecDeque::new();
        for _ in 0..pairs {
            ss.push_back(vecf(next("s")?)?);
            ys.push_back(vecf(next("y")?)?);
        }
        let (n, toks) = next("lbfgs_loss")?;
        let current = if toks.first() == Some(&"none") {
            None
        } else {
            let f: f64 = num(toks.first().copied().unwrap_or(""), n, path)?;
            Some((f, vecf(next("lbfgs_grad")?)?))
        };
        let n_trace: usize = num(&scalar(next("trace")?)?, 0, path)?;
        let mut trace = Vec::with_capacity(n_trace);
        for _ in 0..n_trace {
            let (n, t) = next("r")?;
            if t.len() != 5 {
                return Err(err(n, "trace rows need 5 fields".into()));
            }
            trace.push(LossTraceRow {
                iter: num(t[0], n, path)?,
                total: num(t[1], n, path)?,
                data: num(t[2], n, path)?,
                phy_d: num(t[3], n, path)?,
                phy_s: num(t[4], n, path)?,
            });
        }

        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::Config(format!(
                "{}: optimizer state size mismatch",
                path.display()
            )));
        }
        self.theta_omega = theta_omega;
        self.set_params(&params)?;
        self.phase = phase;
        self.iteration = iteration;
        self.adam.m = m;
        self.adam.v = v;
        self.adam.step = adam_step_n;
        self.lbfgs.s = ss;
        self.lbfgs.y = ys;
        self.lbfgs.current = current;
        self.lbfgs.iterations = lb_iters;
        self.trace = trace;
        Ok(())
    }
}

pub const CHECKPOINT_HEADER: &str = "nlwr-checkpoint v1";

/// Run to completion, writing checkpoints to `checkpoint` every
/// `cfg.checkpoint_every` iterations and once at the end.
pub fn train(
    problem: &PinnProblem,
    cfg: &TrainConfig,
    state: &mut TrainState,
    checkpoint: Option<&Path>,
) -> Result<()> {
    problem.validate()?;
    while state.step(problem, cfg)? {
        if let Some(path) = checkpoint {
            if cfg.checkpoint_every > 0 && state.iteration.is_multiple_of(cfg.checkpoint_every) {
                state.save_checkpoint(path)?;
            }
        }
    }
    if let Some(path) = checkpoint {
        state.save_checkpoint(path)?;
    }
    Ok(())
}
