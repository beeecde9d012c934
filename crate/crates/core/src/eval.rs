//! Error metrics and report export.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Field;
use crate::io::{
    format_summary, write_fd_curve, write_field, write_kernel, write_loss_trace, write_text,
    LossTraceRow,
};
use crate::kernel::{kernel_mass_fraction, DiscreteKernel};
use crate::model::SpeedLaw;
use crate::solver::nonlocal_density;

fn rel_rmse(est: &[f64], truth: &[f64], what: &str) -> Result<f64> {
    let den: f64 = truth.iter().map(|v| v * v).sum();
    if den == 0.0 {
        return Err(Error::UndefinedMetric(format!(
            "{what} truth is identically zero"
        )));
    }
    let num: f64 = est.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(100.0 * (num / den).sqrt())
}

/// Relative RMSE of a density estimate over the full grid, in percent.
pub fn e_rho(estimate: &Field, truth: &Field) -> Result<f64> {
    if estimate.grid() != truth.grid() {
        return Err(Error::Shape(
            "estimate and truth are on different grids".into(),
        ));
    }
    rel_rmse(estimate.values(), truth.values(), "density")
}

/// Relative RMSE of `V(rho_eta)` against a speed field, in percent.
pub fn e_v<S: SpeedLaw + ?Sized>(
    fd: &S,
    kernel: &DiscreteKernel,
    rho: &Field,
    v: &Field,
) -> Result<f64> {
    if rho.grid() != v.grid() {
        return Err(Error::Shape(
            "density and speed are on different grids".into(),
        ));
    }
    let g = rho.grid();
    let mut pred = Vec::with_capacity(g.len());
    for i in 0..g.n_t() {
        pred.extend(
            nonlocal_density(rho.row(i), kernel)
                .into_iter()
                .map(|r| fd.speed_jet(r).0),
        );
    }
    rel_rmse(&pred, v.values(), "speed")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub e_rho_pct: f64,
    pub e_v_pct: f64,
    pub kernel: DiscreteKernel,
    /// `(rho, V_hat(rho))` on `0, drho, ..., rho_max`.
    pub fd_curve: Vec<(f64, f64)>,
    pub mass_fraction_4m: f64,
    pub mass_fraction_10m: f64,
    /// Static penalty of the final parameters, kernel share.
    pub kernel_penalty: f64,
    pub field_est: Field,
    pub loss_trace: Vec<LossTraceRow>,
}

impl EvalReport {
    pub fn summary(&self) -> Vec<(String, String)> {
        let last = self.loss_trace.last();
        let mut out = vec![
            ("e_rho_pct".to_string(), self.e_rho_pct.to_string()),
            ("e_v_pct".into(), self.e_v_pct.to_string()),
            ("mass_fraction_4m".into(), self.mass_fraction_4m.to_string()),
            (
                "mass_fraction_10m".into(),
                self.mass_fraction_10m.to_string(),
            ),
            ("kernel_cells".into(), self.kernel.len().to_string()),
            ("kernel_eta_m".into(), self.kernel.eta_m().to_string()),
            (
                "kernel_non_increasing".into(),
                self.kernel.is_non_increasing().to_string(),
            ),
            ("kernel_penalty".into(), self.kernel_penalty.to_string()),
            ("iterations".into(), self.loss_trace.len().to_string()),
        ];
        if let Some(r) = last {
            out.push(("final_loss_total".into(), r.total.to_string()));
        }
        out
    }
}

/// Write `summary.txt`, `field_est.csv`, `kernel.csv`, `fd_curve.csv` and
/// `loss_trace.csv` into `dir`.
pub fn export_report(report: &EvalReport, dir: &Path) -> Result<()> {
    write_text(&dir.join("summary.txt"), &format_summary(&report.summary()))?;
    write_field(&dir.join("field_est.csv"), &report.field_est)?;
    write_kernel(&dir.join("kernel.csv"), &report.kernel)?;
    write_fd_curve(&dir.join("fd_curve.csv"), &report.fd_curve)?;
    write_loss_trace(&dir.join("loss_trace.csv"), &report.loss_trace)
}

/// Share of kernel mass in the first `cutoff_m` metres.
pub fn leading_mass(kernel: &DiscreteKernel, cutoff_m: f64) -> f64 {
    kernel_mass_fraction(kernel, cutoff_m) / kernel.mass()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd::FdParams;
    use crate::grid::RingGrid;
    use crate::io::{read_fd_curve, read_field, read_kernel, read_summary};
    use crate::kernel::kernel_linear;
    use crate::solver::speed_field;
    use approx::assert_abs_diff_eq;

    fn g() -> RingGrid {
        RingGrid::new(20.0, 1.0, 1.0, 5).unwrap()
    }

    fn wave() -> Field {
        Field::from_fn(g(), |i, j| 0.05 + 0.01 * ((i + 2 * j) as f64).sin())
    }

    #[test]
    fn e_rho_examples() {
        let t = wave();
        assert_eq!(e_rho(&t, &t).unwrap(), 0.0);
        assert_abs_diff_eq!(
            e_rho(&Field::constant(g(), 0.0), &t).unwrap(),
            100.0,
            epsilon = 1e-12
        );
        assert!(matches!(
            e_rho(&t, &Field::constant(g(), 0.0)),
            Err(Error::UndefinedMetric(_))
        ));
        let other = RingGrid::new(20.0, 0.5, 1.0, 5).unwrap();
        assert!(matches!(
            e_rho(&t, &Field::constant(other, 1.0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn e_rho_scale_invariant() {
        let t = wave();
        let e = t.map(|v| v * 1.1 + 0.001);
        let a = e_rho(&e, &t).unwrap();
        let b = e_rho(&e.map(|v| 7.0 * v), &t.map(|v| 7.0 * v)).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn e_v_closed_loop_and_half_speed() {
        let fd = FdParams::greenshields(30.0, 0.2).unwrap();
        let k = kernel_linear(4.0, 1.0).unwrap();
        let rho = wave();
        let v = speed_field(&rho, &fd, Some(&k));
        assert!(e_v(&fd, &k, &rho, &v).unwrap() < 1e-12);

        // constant prediction c/2 against constant speed c
        let half = FdParams::greenshields(15.0, 1e9).unwrap();
        let zero = Field::constant(g(), 0.0);
        let c = Field::constant(g(), 15.0 * 2.0);
        assert_abs_diff_eq!(e_v(&half, &k, &zero, &c).unwrap(), 50.0, epsilon = 1e-9);
        assert!(matches!(
            e_v(&fd, &k, &rho, &zero),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn e_v_identity_kernel_is_local() {
        let fd = FdParams::greenshields(30.0, 0.2).unwrap();
        let rho = wave();
        let v = speed_field(&rho, &fd, None);
        let id = DiscreteKernel::identity(1.0);
        assert!(e_v(&fd, &id, &rho, &v).unwrap() < 1e-12);
    }

    #[test]
    fn export_round_trips() {
        let k = kernel_linear(10.0, 1.0).unwrap();
        let report = EvalReport {
            e_rho_pct: 3.0 / 7.0,
            e_v_pct: 1.25,
            fd_curve: (0..=10)
                .map(|i| (i as f64 * 0.02, 30.0 - i as f64 * 1.5))
                .collect(),
            mass_fraction_4m: leading_mass(&k, 4.0),
            mass_fraction_10m: leading_mass(&k, 10.0),
            kernel: k,
            kernel_penalty: 0.0,
            field_est: wave(),
            loss_trace: vec![LossTraceRow {
                iter: 0,
                total: 1.0,
                data: 0.5,
                phy_d: 0.25,
                phy_s: 0.25,
            }],
        };
        let d = tempfile::tempdir().unwrap();
        export_report(&report, d.path()).unwrap();
        assert_eq!(
            read_field(&d.path().join("field_est.csv"), &g()).unwrap(),
            report.field_est
        );
        assert_eq!(
            read_kernel(&d.path().join("kernel.csv")).unwrap(),
            report.kernel
        );
        let curve = read_fd_curve(&d.path().join("fd_curve.csv")).unwrap();
        assert_eq!(curve.len(), 11);
        assert_eq!(curve, report.fd_curve);
        let s = read_summary(&d.path().join("summary.txt")).unwrap();
        assert_eq!(s["e_rho_pct"].parse::<f64>().unwrap(), report.e_rho_pct);
        assert_eq!(s["e_v_pct"].parse::<f64>().unwrap(), report.e_v_pct);
        assert_eq!(
            s["mass_fraction_4m"].parse::<f64>().unwrap(),
            report.mass_fraction_4m
        );
    }

    #[test]
    fn export_surfaces_io_errors() {
        let d = tempfile::tempdir().unwrap();
        let blocker = d.path().join("file");
        std::fs::write(&blocker, "x").unwrap();
        let k = DiscreteKernel::identity(1.0);
        let report = EvalReport {
            e_rho_pct: 0.0,
            e_v_pct: 0.0,
            fd_curve: vec![],
            mass_fraction_4m: 1.0,
            mass_fraction_10m: 1.0,
            kernel: k,
            kernel_penalty: 0.0,
            field_est: wave(),
            loss_trace: vec![],
        };
        let e = export_report(&report, &blocker.join("sub")).unwrap_err();
        assert!(matches!(e, Error::Io { .. }));
    }
}
