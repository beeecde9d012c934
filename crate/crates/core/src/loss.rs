//! The training objective and its exact gradients.
//!
//! ```text
//! L = L_data + L_phy_d + L_phy_s
//! L_data  = a_init * mean_x (rho_hat(0,x) - rho(0,x))^2
//!         + sum_d a_d * mean_t (rho_hat(t,l_d) - rho(t,l_d))^2
//! L_phy_d = mean over collocation points of f^2
//! f       = rho_t + rho_x V(rho_eta) + rho V'(rho_eta) d_x rho_eta
//! L_phy_s = p_w1 sum min(w_k,0)^2 + p_w2 sum max(w_{k+1}-w_k,0)^2
//!         + p_v1 sum min(V(i drho),0)^2 + p_v2 sum max(V'(i drho),0)^2
//! ```
//!
//! `rho_eta` and `d_x rho_eta` are kernel-weighted sums over the cells
//! downstream of the collocation point, wrapped around the ring. The kernel
//! is `w = theta_w / sum(theta_w)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grid::{wrap_index, MeasurementSet, RingGrid};
use crate::kernel::DiscreteKernel;
use crate::model::{DensityModel, DensitySurface, FdModel, SpeedLaw};

pub const DEFAULT_PENALTY: f64 = 1e4;

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub alpha_initial: f64,
    pub alpha_detector: Vec<f64>,
    pub p_omega_1: f64,
    pub p_omega_2: f64,
    pub p_v_1: f64,
    pub p_v_2: f64,
}

impl LossWeights {
    /// Unit data weights and the default penalty on every constraint.
    pub fn uniform(n_detectors: usize) -> Self {
        Self {
            alpha_initial: 1.0,
            alpha_detector: vec![1.0; n_detectors],
            p_omega_1: DEFAULT_PENALTY,
            p_omega_2: DEFAULT_PENALTY,
            p_v_1: DEFAULT_PENALTY,
            p_v_2: DEFAULT_PENALTY,
        }
    }

    pub fn validate(&self, n_detectors: usize) -> Result<()> {
        if self.alpha_detector.len() != n_detectors {
            return Err(Error::Config(format!(
                "{} detector weights for {n_detectors} detectors",
                self.alpha_detector.len()
            )));
        }
        let all = [
            self.alpha_initial,
            self.p_omega_1,
            self.p_omega_2,
            self.p_v_1,
            self.p_v_2,
        ];
        if all
            .iter()
            .chain(&self.alpha_detector)
            .any(|w| !(*w > 0.0 && w.is_finite()))
        {
            return Err(Error::Config("all loss weights must be positive".into()));
        }
        Ok(())
    }
}

/// Fixed set of `(t index, x index)` points where the residual is evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct CollocationSet {
    pub points: Vec<(usize, usize)>,
    pub rng_seed: u64,
}

impl CollocationSet {
    /// `n_p` distinct grid points drawn uniformly with a seeded generator.
    pub fn sample(grid: &RingGrid, n_p: usize, seed: u64) -> Result<Self> {
        if n_p == 0 || n_p > grid.len() {
            return Err(Error::Config(format!(
                "cannot draw {n_p} collocation points from {} grid cells",
                grid.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = rand::seq::index::sample(&mut rng, grid.len(), n_p);
        let points = idx
            .iter()
            .map(|k| (k / grid.n_x(), k % grid.n_x()))
            .collect();
        Ok(Self {
            points,
            rng_seed: seed,
        })
    }

    pub fn from_points(grid: &RingGrid, points: Vec<(usize, usize)>) -> Result<Self> {
        if let Some(p) = points
            .iter()
            .find(|(i, j)| *i >= grid.n_t() || *j >= grid.n_x())
        {
            return Err(Error::Config(format!(
                "collocation point {p:?} outside the grid"
            )));
        }
        Ok(Self {
            points,
            rng_seed: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Densities `i * delta_rho`, `i = 0..N_rho`, where the FD constraints are checked.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityGrid {
    pub delta_rho: f64,
    pub rho_max: f64,
}

impl DensityGrid {
    /// `n` cells over `[0, rho_max]`.
    pub fn with_cells(rho_max: f64, n: usize) -> Result<Self> {
        if n == 0 || !(rho_max > 0.0) {
            return Err(Error::Config(
                "density grid needs rho_max > 0 and >= 1 cell".into(),
            ));
        }
        Ok(Self {
            delta_rho: rho_max / n as f64,
            rho_max,
        })
    }

    pub fn n_rho(&self) -> usize {
        (self.rho_max / self.delta_rho).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rho_max / self.delta_rho;
        if !(self.delta_rho > 0.0) || r < 1.0 || (r - r.round()).abs() > 1e-9 * r {
            return Err(Error::Config(format!(
                "delta_rho {} must divide rho_max {}",
                self.delta_rho, self.rho_max
            )));
        }
        Ok(())
    }

    /// Penalty grid, `0, drho, ..., (N_rho - 1) drho`.
    pub fn points(&self) -> Vec<f64> {
        (0..self.n_rho())
            .map(|i| i as f64 * self.delta_rho)
            .collect()
    }

    /// Curve grid including `rho_max`, `N_rho + 1` points.
    pub fn closed_points(&self) -> Vec<f64> {
        (0..=self.n_rho())
            .map(|i| i as f64 * self.delta_rho)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub data: f64,
    pub phy_d: f64,
    pub phy_s: f64,
    /// Kernel share of `phy_s`.
    pub phy_s_omega: f64,
    /// FD share of `phy_s`.
    pub phy_s_v: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub theta: Vec<f64>,
    pub theta_v: Vec<f64>,
    pub theta_omega: Vec<f64>,
}

#[inline]
fn assemble(rho: f64, rho_t: f64, rho_x: f64, v: f64, dv: f64, d_rho_eta: f64) -> f64 {
    rho_t + rho_x * v + rho * dv * d_rho_eta
}

/// Pointwise residual at grid cell `(i, j)` for any density surface and
/// speed law. `kernel` holds the (normalised) cell weights.
pub fn residual<D: DensitySurface + ?Sized, S: SpeedLaw + ?Sized>(
    density: &D,
    fd: &S,
    kernel: &[f64],
    grid: &RingGrid,
    i: usize,
    j: usize,
) -> f64 {
    let t = grid.t(i);
    let (rho, rho_t, rho_x) = density.density_jet(t, grid.x(j));
    let mut rho_eta = 0.0;
    let mut d_rho_eta = 0.0;
    for (k, w) in kernel.iter().enumerate() {
        let x = grid.x(wrap_index((j + k) as i64, grid.n_x()));
        let (r, _, rx) = density.density_jet(t, x);
        rho_eta += r * w;
        d_rho_eta += rx * w;
    }
    let (v, dv) = fd.speed_jet(rho_eta);
    assemble(rho, rho_t, rho_x, v, dv, d_rho_eta)
}

const DATA_CHUNK: usize = 512;
const COLLOC_CHUNK: usize = 16;

struct Partial {
    loss: f64,
    /// Static part only: the kernel penalties (the rest of `loss` is FD penalties).
    loss_omega: f64,
    g_theta: Vec<f64>,
    g_v: Vec<f64>,
    g_w: Vec<f64>,
}

impl Partial {
    fn zeros(n_theta: usize, n_v: usize, n_w: usize) -> Self {
        Self {
            loss: 0.0,
            loss_omega: 0.0,
            g_theta: vec![0.0; n_theta],
            g_v: vec![0.0; n_v],
            g_w: vec![0.0; n_w],
        }
    }

    /// Sum partials in order.
    fn reduce(parts: Vec<Partial>, n_theta: usize, n_v: usize, n_w: usize) -> Partial {
        let mut acc = Partial::zeros(n_theta, n_v, n_w);
        for p in parts {
            acc.loss += p.loss;
            add(&mut acc.g_theta, &p.g_theta);
            add(&mut acc.g_v, &p.g_v);
            add(&mut acc.g_w, &p.g_w);
        }
        acc
    }
}

fn add(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Measured points, target values and per-point weights of the data loss.
fn data_points(m: &MeasurementSet, w: &LossWeights) -> Vec<((f64, f64), f64, f64)> {
    let g = &m.grid;
    let mut out = Vec::with_capacity(g.n_x() + g.n_t() * m.n_detectors());
    let wi = w.alpha_initial / g.n_x() as f64;
    for (j, r) in m.initial_profile.iter().enumerate() {
        out.push(((0.0, g.x(j)), *r, wi));
    }
    for ((&l, series), a) in m
        .detector_positions
        .iter()
        .zip(&m.detector_series)
        .zip(&w.alpha_detector)
    {
        let wd = a / g.n_t() as f64;
        for (i, r) in series.iter().enumerate() {
            out.push(((g.t(i), g.x(l)), *r, wd));
        }
    }
    out
}

fn data_part(
    density: &DensityModel,
    m: &MeasurementSet,
    w: &LossWeights,
    exec: Execution,
) -> Partial {
    let pts = data_points(m, w);
    let n_theta = density.net.n_params();
    let chunks = pts.len().div_ceil(DATA_CHUNK);
    let parts = exec.map_range(chunks, |c| {
        let slice = &pts[c * DATA_CHUNK..((c + 1) * DATA_CHUNK).min(pts.len())];
        let xs: Vec<(f64, f64)> = slice.iter().map(|p| p.0).collect();
        let batch = density.eval_batch(&xs, false, false);
        let mut p = Partial::zeros(n_theta, 0, 0);
        let mut rbar = Vec::with_capacity(slice.len());
        for (k, (_, target, wt)) in slice.iter().enumerate() {
            let e = batch.rho[k] - target;
            p.loss += wt * e * e;
            rbar.push(2.0 * wt * e);
        }
        density.backward(&batch, &rbar, &[], &[], &mut p.g_theta);
        p
    });
    Partial::reduce(parts, n_theta, 0, 0)
}

fn dyn_part(
    density: &DensityModel,
    fd: &FdModel,
    w: &[f64],
    colloc: &CollocationSet,
    grid: &RingGrid,
    exec: Execution,
) -> Partial {
    let (n_theta, n_v, n_w) = (density.net.n_params(), fd.net.n_params(), w.len());
    let n_p = colloc.len() as f64;
    let n_eta = w.len();
    let chunks = colloc.len().div_ceil(COLLOC_CHUNK);
    let parts = exec.map_range(chunks, |c| {
        let pts = &colloc.points[c * COLLOC_CHUNK..((c + 1) * COLLOC_CHUNK).min(colloc.len())];
        let np = pts.len();
        let here: Vec<(f64, f64)> = pts.iter().map(|&(i, j)| (grid.t(i), grid.x(j))).collect();
        let mut ahead = Vec::with_capacity(np * (n_eta - 1));
        for &(i, j) in pts {
            for k in 1..n_eta {
                ahead.push((grid.t(i), grid.x(wrap_index((j + k) as i64, grid.n_x()))));
            }
        }
        let a = density.eval_batch(&here, true, true);
        let b = density.eval_batch(&ahead, false, true);
        let stride = n_eta - 1;
        let mut rho_eta = vec![0.0; np];
        let mut d_rho_eta = vec![0.0; np];
        for p in 0..np {
            let mut r = a.rho[p] * w[0];
            let mut d = a.rho_x[p] * w[0];
            for k in 1..n_eta {
                r += b.rho[p * stride + k - 1] * w[k];
                d += b.rho_x[p * stride + k - 1] * w[k];
            }
            rho_eta[p] = r;
            d_rho_eta[p] = d;
        }
        let s = fd.eval_batch(&rho_eta);

        let mut out = Partial::zeros(n_theta, n_v, n_w);
        let mut a_rho = vec![0.0; np];
        let mut a_rho_t = vec![0.0; np];
        let mut a_rho_x = vec![0.0; np];
        let mut v_bar = vec![0.0; np];
        let mut dv_bar = vec![0.0; np];
        let mut g_bar = vec![0.0; np];
        for p in 0..np {
            let f = assemble(
                a.rho[p],
                a.rho_t[p],
                a.rho_x[p],
                s.v[p],
                s.dv[p],
                d_rho_eta[p],
            );
            out.loss += f * f;
            let fb = 2.0 * f / n_p;
            a_rho_t[p] = fb;
            a_rho_x[p] = fb * s.v[p];
            a_rho[p] = fb * s.dv[p] * d_rho_eta[p];
            v_bar[p] = fb * a.rho_x[p];
            dv_bar[p] = fb * a.rho[p] * d_rho_eta[p];
            g_bar[p] = fb * a.rho[p] * s.dv[p];
        }
        let eta_bar = fd.backward(&s, &v_bar, &dv_bar, &mut out.g_v);
        let mut b_rho = vec![0.0; b.rho.len()];
        let mut b_rho_x = vec![0.0; b.rho.len()];
        for p in 0..np {
            a_rho[p] += eta_bar[p] * w[0];
            a_rho_x[p] += g_bar[p] * w[0];
            out.g_w[0] += eta_bar[p] * a.rho[p] + g_bar[p] * a.rho_x[p];
            for k in 1..n_eta {
                let q = p * stride + k - 1;
                b_rho[q] = eta_bar[p] * w[k];
                b_rho_x[q] = g_bar[p] * w[k];
                out.g_w[k] += eta_bar[p] * b.rho[q] + g_bar[p] * b.rho_x[q];
            }
        }
        density.backward(&a, &a_rho, &a_rho_t, &a_rho_x, &mut out.g_theta);
        if !ahead.is_empty() {
            density.backward(&b, &b_rho, &[], &b_rho_x, &mut out.g_theta);
        }
        out
    });
    let mut acc = Partial::reduce(parts, n_theta, n_v, n_w);
    acc.loss /= n_p;
    acc
}

fn static_part(fd: &FdModel, w: &[f64], weights: &LossWeights, grid: &DensityGrid) -> Partial {
    let mut out = Partial::zeros(0, fd.net.n_params(), w.len());
    let mut l1 = 0.0;
    for (k, wk) in w.iter().enumerate() {
        let m = wk.min(0.0);
        l1 += m * m;
        out.g_w[k] += weights.p_omega_1 * 2.0 * m;
    }
    let mut l2 = 0.0;
    for k in 0..w.len().saturating_sub(1) {
        let d = (w[k + 1] - w[k]).max(0.0);
        l2 += d * d;
        out.g_w[k + 1] += weights.p_omega_2 * 2.0 * d;
        out.g_w[k] -= weights.p_omega_2 * 2.0 * d;
    }
    let rho = grid.points();
    let s = fd.eval_batch(&rho);
    let (mut l3, mut l4) = (0.0, 0.0);
    let mut v_bar = vec![0.0; rho.len()];
    let mut dv_bar = vec![0.0; rho.len()];
    for k in 0..rho.len() {
        let m = s.v[k].min(0.0);
        let d = s.dv[k].max(0.0);
        l3 += m * m;
        l4 += d * d;
        v_bar[k] = weights.p_v_1 * 2.0 * m;
        dv_bar[k] = weights.p_v_2 * 2.0 * d;
    }
    fd.backward(&s, &v_bar, &dv_bar, &mut out.g_v);
    out.loss_omega = weights.p_omega_1 * l1 + weights.p_omega_2 * l2;
    out.loss = out.loss_omega + weights.p_v_1 * l3 + weights.p_v_2 * l4;
    out
}

/// Normalise `theta_omega`, failing on a zero sum.
pub fn normalized_weights(theta_omega: &[f64]) -> Result<Vec<f64>> {
    let s: f64 = theta_omega.iter().sum();
    if s == 0.0 || !s.is_finite() {
        return Err(Error::DegenerateKernel(s));
    }
    Ok(theta_omega.iter().map(|t| t / s).collect())
}

/// Pull a gradient on `w = theta / sum(theta)` back to `theta`.
fn normalization_vjp(theta: &[f64], w: &[f64], w_bar: &[f64]) -> Vec<f64> {
    let s: f64 = theta.iter().sum();
    let dot: f64 = w.iter().zip(w_bar).map(|(a, b)| a * b).sum();
    w_bar.iter().map(|b| (b - dot) / s).collect()
}

/// Weighted data misfit on the initial profile and detector series.
pub fn loss_data(
    density: &DensityModel,
    measurements: &MeasurementSet,
    weights: &LossWeights,
) -> f64 {
    data_part(density, measurements, weights, Execution::Sequential).loss
}

/// Mean squared residual over the collocation set.
pub fn loss_phys_dyn(
    density: &DensityModel,
    fd: &FdModel,
    kernel: &DiscreteKernel,
    colloc: &CollocationSet,
    grid: &RingGrid,
) -> f64 {
    dyn_part(
        density,
        fd,
        kernel.weights(),
        colloc,
        grid,
        Execution::Sequential,
    )
    .loss
}

/// Weighted constraint penalties on the normalised kernel and the FD network.
pub fn loss_phys_static(
    fd: &FdModel,
    theta_omega: &[f64],
    weights: &LossWeights,
    density_grid: &DensityGrid,
) -> Result<f64> {
    let w = normalized_weights(theta_omega)?;
    Ok(static_part(fd, &w, weights, density_grid).loss)
}

/// The static penalty split into its kernel and FD shares.
pub fn loss_phys_static_split(
    fd: &FdModel,
    theta_omega: &[f64],
    weights: &LossWeights,
    density_grid: &DensityGrid,
) -> Result<(f64, f64)> {
    let w = normalized_weights(theta_omega)?;
    let p = static_part(fd, &w, weights, density_grid);
    Ok((p.loss_omega, p.loss - p.loss_omega))
}

/// Everything the objective needs besides the trainable parameters.
#[derive(Debug, Clone)]
pub struct PinnProblem {
    pub grid: RingGrid,
    pub measurements: MeasurementSet,
    pub colloc: CollocationSet,
    pub weights: LossWeights,
    pub density_grid: DensityGrid,
    pub exec: Execution,
}

impl PinnProblem {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate(self.measurements.n_detectors())?;
        self.density_grid.validate()?;
        if self.measurements.grid != self.grid {
            return Err(Error::Config(
                "measurement grid differs from the training grid".into(),
            ));
        }
        CollocationSet::from_points(&self.grid, self.colloc.points.clone())?;
        Ok(())
    }

    /// Total loss, its components, and gradients for all three parameter blocks.
    pub fn loss_total_and_grads(
        &self,
        density: &DensityModel,
        fd: &FdModel,
        theta_omega: &[f64],
    ) -> Result<(LossParts, Gradients)> {
        if theta_omega.is_empty() || theta_omega.len() > self.grid.n_x() {
            return Err(Error::Shape(format!(
                "kernel has {} cells, must be in 1..={}",
                theta_omega.len(),
                self.grid.n_x()
            )));
        }
        let w = normalized_weights(theta_omega)?;
        let data = data_part(density, &self.measurements, &self.weights, self.exec);
        let dynp = dyn_part(density, fd, &w, &self.colloc, &self.grid, self.exec);
        let stat = static_part(fd, &w, &self.weights, &self.density_grid);

        let mut g_theta = data.g_theta;
        add(&mut g_theta, &dynp.g_theta);
        let mut g_v = dynp.g_v;
        add(&mut g_v, &stat.g_v);
        let mut g_w = dynp.g_w;
        add(&mut g_w, &stat.g_w);
        let g_omega = normalization_vjp(theta_omega, &w, &g_w);

        let parts = LossParts {
            total: data.loss + dynp.loss + stat.loss,
            data: data.loss,
            phy_d: dynp.loss,
            phy_s: stat.loss,
            phy_s_omega: stat.loss_omega,
            phy_s_v: stat.loss - stat.loss_omega,
        };
        if !parts.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss evaluated to {}",
                parts.total
            )));
        }
        Ok((
            parts,
            Gradients {
                theta: g_theta,
                theta_v: g_v,
                theta_omega: g_omega,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{evenly_spaced_detectors, subsample_measurements, Field};
    use crate::kernel::{kernel_linear, kernel_normalize};
    use crate::net::{MlpNet, MlpSpec};
    use std::f64::consts::PI;

    fn grid() -> RingGrid {
        RingGrid::new(16.0, 0.5, 1.0, 9).unwrap()
    }

    fn constant_density(g: &RingGrid, c: f64) -> DensityModel {
        let spec = DensityModel::spec(1, 4);
        let mut p = vec![0.0; spec.n_params()];
        *p.last_mut().unwrap() = ((c / 0.2).exp() - 1.0).ln();
        DensityModel::new(MlpNet::from_params(spec, p).unwrap(), g, 0.2).unwrap()
    }

    /// V(rho) = 30 (1 - 0.5 rho / 0.2): positive and decreasing on [0, 0.2].
    fn decreasing_fd() -> FdModel {
        let net = MlpNet::from_params(MlpSpec::new(1, 0, 1, 1), vec![-0.5, 1.0]).unwrap();
        FdModel::new(net, 0.2, 30.0).unwrap()
    }

    fn random_models(g: &RingGrid, seed: u64) -> (DensityModel, FdModel) {
        let d = MlpNet::init_glorot(DensityModel::spec(2, 8), seed).unwrap();
        let f = MlpNet::init_glorot(FdModel::spec(1, 8), seed + 1000).unwrap();
        (
            DensityModel::new(d, g, 0.2).unwrap(),
            FdModel::new(f, 0.2, 30.0).unwrap(),
        )
    }

    struct Wave {
        a: f64,
        b: f64,
        c: f64,
        l: f64,
    }

    impl DensitySurface for Wave {
        fn density_jet(&self, t: f64, x: f64) -> (f64, f64, f64) {
            let k = 2.0 * PI / self.l;
            let ph = k * (x - self.c * t);
            (
                self.a + self.b * ph.sin(),
                -self.b * k * self.c * ph.cos(),
                self.b * k * ph.cos(),
            )
        }
    }

    struct ConstSpeed(f64);
    impl SpeedLaw for ConstSpeed {
        fn speed_jet(&self, _: f64) -> (f64, f64) {
            (self.0, 0.0)
        }
    }

    #[test]
    fn data_loss_examples() {
        let g = grid();
        let det = evenly_spaced_detectors(g.n_x(), 3).unwrap();
        let model = constant_density(&g, 0.05);
        let exact =
            subsample_measurements(&Field::constant(g, model.density_jet(0.0, 0.0).0), &det)
                .unwrap();
        let w = LossWeights::uniform(3);
        assert!(loss_data(&model, &exact, &w) < 1e-30);

        let delta = 0.01;
        let shifted = subsample_measurements(
            &Field::constant(g, model.density_jet(0.0, 0.0).0 - delta),
            &det,
        )
        .unwrap();
        let l = loss_data(&model, &shifted, &w);
        assert!((l - 4.0 * delta * delta).abs() < 1e-15);

        let mut w2 = w.clone();
        w2.alpha_initial *= 2.0;
        w2.alpha_detector.iter_mut().for_each(|a| *a *= 2.0);
        assert!((loss_data(&model, &shifted, &w2) - 2.0 * l).abs() < 1e-15);
    }

    #[test]
    fn constant_field_has_zero_residual() {
        let g = grid();
        let d = constant_density(&g, 0.07);
        let (_, fd) = random_models(&g, 3);
        let k = kernel_linear(4.0, 1.0).unwrap();
        for i in 0..g.n_t() {
            for j in 0..g.n_x() {
                assert!(residual(&d, &fd, k.weights(), &g, i, j).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn manufactured_transport_solution() {
        let g = RingGrid::new(800.0, 1.0, 1.0, 201).unwrap();
        let wave = Wave {
            a: 0.05,
            b: 0.02,
            c: 12.0,
            l: 800.0,
        };
        let colloc = CollocationSet::sample(&g, 512, 1).unwrap();
        for &(i, j) in &colloc.points {
            let f = residual(&wave, &ConstSpeed(12.0), &[1.0], &g, i, j);
            assert!(f.abs() < 1e-8, "residual {f}");
        }
    }

    #[test]
    fn identity_kernel_gives_local_residual() {
        let g = grid();
        let (d, fd) = random_models(&g, 11);
        for i in 0..g.n_t() {
            for j in 0..g.n_x() {
                let (r, rt, rx) = d.density_jet(g.t(i), g.x(j));
                let (v, dv) = fd.speed_jet(r);
                let local = rt + rx * v + r * dv * rx;
                let f = residual(&d, &fd, &[1.0], &g, i, j);
                assert!((f - local).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn batched_residuals_match_pointwise() {
        let g = grid();
        let (d, fd) = random_models(&g, 5);
        let k = kernel_normalize(&[0.9, 0.6, 0.3, 0.2], 1.0).unwrap();
        let colloc = CollocationSet::sample(&g, 40, 9).unwrap();
        let mean: f64 = colloc
            .points
            .iter()
            .map(|&(i, j)| residual(&d, &fd, k.weights(), &g, i, j).powi(2))
            .sum::<f64>()
            / 40.0;
        let batched = loss_phys_dyn(&d, &fd, &k, &colloc, &g);
        assert!((mean - batched).abs() < 1e-12 * mean.max(1e-30));

        let mut rev = colloc.clone();
        rev.points.reverse();
        let permuted = loss_phys_dyn(&d, &fd, &k, &rev, &g);
        assert!((permuted - batched).abs() < 1e-12 * batched);
    }

    #[test]
    fn static_penalty_examples() {
        let grid = DensityGrid::with_cells(0.2, 100).unwrap();
        let w = LossWeights::uniform(1);
        let fd = decreasing_fd();
        assert_eq!(loss_phys_static(&fd, &[0.6, 0.4], &w, &grid).unwrap(), 0.0);
        let l = loss_phys_static(&fd, &[0.4, 0.6], &w, &grid).unwrap();
        assert!((l - 400.0).abs() < 1e-9);
        let l = loss_phys_static(&fd, &[-0.5, 1.5], &w, &grid).unwrap();
        assert!((l - 42_500.0).abs() < 1e-9);
        assert!(matches!(
            loss_phys_static(&fd, &[1.0, -1.0], &w, &grid),
            Err(Error::DegenerateKernel(_))
        ));
    }

    #[test]
    fn density_grid_layout() {
        let g = DensityGrid::with_cells(0.2, 100).unwrap();
        assert_eq!(g.points().len(), 100);
        assert_eq!(g.closed_points().len(), 101);
        assert!((g.closed_points()[100] - 0.2).abs() < 1e-15);
        assert!(DensityGrid {
            delta_rho: 0.03,
            rho_max: 0.2
        }
        .validate()
        .is_err());
    }

    #[test]
    fn collocation_sampling() {
        let g = RingGrid::new(800.0, 1.0, 1.0, 201).unwrap();
        let a = CollocationSet::sample(&g, 512, 7).unwrap();
        let b = CollocationSet::sample(&g, 512, 7).unwrap();
        assert_eq!(a, b);
        let uniq: std::collections::HashSet<_> = a.points.iter().collect();
        assert_eq!(uniq.len(), 512);
        assert!(a.points.iter().all(|(i, j)| *i < 201 && *j < 800));
        assert!(CollocationSet::sample(&g, 0, 1).is_err());
    }

    fn problem(g: &RingGrid, n_p: usize) -> PinnProblem {
        let truth = Field::from_fn(*g, |i, j| {
            0.05 + 0.02 * ((j as f64) * 0.4 - (i as f64) * 0.3).sin()
        });
        let det = evenly_spaced_detectors(g.n_x(), 2).unwrap();
        PinnProblem {
            grid: *g,
            measurements: subsample_measurements(&truth, &det).unwrap(),
            colloc: CollocationSet::sample(g, n_p, 3).unwrap(),
            weights: LossWeights::uniform(2),
            density_grid: DensityGrid::with_cells(0.2, 20).unwrap(),
            exec: Execution::Sequential,
        }
    }

    #[test]
    fn kernel_scale_invariance() {
        let g = grid();
        let pb = problem(&g, 30);
        let (d, fd) = random_models(&g, 21);
        let theta = [0.5, 0.7, 0.2, 0.4];
        let (a, ga) = pb.loss_total_and_grads(&d, &fd, &theta).unwrap();
        let scaled: Vec<f64> = theta.iter().map(|t| 3.5 * t).collect();
        let (b, gb) = pb.loss_total_and_grads(&d, &fd, &scaled).unwrap();
        assert!((a.total - b.total).abs() < 1e-12 * a.total);
        for (x, y) in ga.theta.iter().zip(&gb.theta) {
            assert!((x - y).abs() < 1e-10 * (1.0 + x.abs()));
        }
        for (x, y) in ga.theta_v.iter().zip(&gb.theta_v) {
            assert!((x - y).abs() < 1e-10 * (1.0 + x.abs()));
        }
        // the kernel gradient is orthogonal to theta itself
        let radial: f64 = ga.theta_omega.iter().zip(&theta).map(|(g, t)| g * t).sum();
        assert!(radial.abs() < 1e-12);
    }

    #[test]
    fn execution_modes_agree() {
        let g = grid();
        let mut pb = problem(&g, 60);
        let (d, fd) = random_models(&g, 2);
        let theta = [0.5, 0.3, 0.15, 0.05];
        let a = pb.loss_total_and_grads(&d, &fd, &theta).unwrap();
        pb.exec = Execution::Parallel;
        let b = pb.loss_total_and_grads(&d, &fd, &theta).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn satisfied_constraints_give_no_static_gradient() {
        let g = grid();
        let pb = problem(&g, 10);
        let w = [0.4, 0.3, 0.2, 0.1];
        let fd = decreasing_fd();
        let s = static_part(&fd, &w, &pb.weights, &pb.density_grid);
        assert_eq!(s.loss, 0.0);
        assert!(s.g_v.iter().chain(&s.g_w).all(|v| *v == 0.0));
    }

    #[test]
    fn total_gradient_matches_finite_differences() {
        let g = grid();
        let pb = problem(&g, 24);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for seed in 0..4u64 {
            let (d, fd) = random_models(&g, 40 + seed);
            let theta = [0.35, 0.45, 0.1 + 0.05 * seed as f64, -0.02];
            let (_, grads) = pb.loss_total_and_grads(&d, &fd, &theta).unwrap();
            // central differences of each component, summed
            let comps = |d: &DensityModel, f: &FdModel, th: &[f64]| -> [f64; 4] {
                let (p, _) = pb.loss_total_and_grads(d, f, th).unwrap();
                [p.data, p.phy_d, p.phy_s_omega, p.phy_s_v]
            };
            let fdiff = |plus: [f64; 4], minus: [f64; 4]| -> f64 {
                (0..4).map(|c| (plus[c] - minus[c]) / (2.0 * h)).sum()
            };
            let check = |a: f64, b: f64, worst: &mut f64| {
                let e = (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
                *worst = worst.max(e);
            };
            for k in 0..d.net.n_params() {
                let mut dp = d.clone();
                let mut dm = d.clone();
                let mut p = d.net.params().to_vec();
                p[k] += h;
                dp.net.set_params(&p).unwrap();
                p[k] -= 2.0 * h;
                dm.net.set_params(&p).unwrap();
                check(
                    grads.theta[k],
                    fdiff(comps(&dp, &fd, &theta), comps(&dm, &fd, &theta)),
                    &mut worst,
                );
            }
            for k in 0..fd.net.n_params() {
                let mut fp = fd.clone();
                let mut fm = fd.clone();
                let mut p = fd.net.params().to_vec();
                p[k] += h;
                fp.net.set_params(&p).unwrap();
                p[k] -= 2.0 * h;
                fm.net.set_params(&p).unwrap();
                check(
                    grads.theta_v[k],
                    fdiff(comps(&d, &fp, &theta), comps(&d, &fm, &theta)),
                    &mut worst,
                );
            }
            for k in 0..theta.len() {
                let mut tp = theta;
                let mut tm = theta;
                tp[k] += h;
                tm[k] -= h;
                check(
                    grads.theta_omega[k],
                    fdiff(comps(&d, &fd, &tp), comps(&d, &fd, &tm)),
                    &mut worst,
                );
            }
        }
        eprintln!("worst relative error {worst:e}");
        assert!(worst < 1e-5);
    }
}
