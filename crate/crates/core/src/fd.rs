//! Closed-form fundamental diagrams V(rho).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FdVariant {
    /// `v_f (1 - rho/rho_m)`, clamped at zero above `rho_m`.
    Greenshields,
    /// `v_f exp(-rho/rho_c)`.
    Underwood,
    /// `v_f exp(-(rho/rho_c)^2 / 2)`.
    Drake,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdParams {
    pub variant: FdVariant,
    /// Free speed (m/s).
    pub v_f: f64,
    /// Maximum (jam) density (veh/m), used by Greenshields.
    pub rho_m: f64,
    /// Critical density (veh/m), used by Underwood and Drake.
    pub rho_c: f64,
}

pub const DEFAULT_V_F: f64 = 30.0;
pub const DEFAULT_RHO_M: f64 = 0.2;
pub const DEFAULT_RHO_C: f64 = 0.08;

impl FdParams {
    pub fn new(variant: FdVariant, v_f: f64, rho_m: f64, rho_c: f64) -> Result<Self> {
        if !(v_f > 0.0 && v_f.is_finite()) {
            return Err(Error::Config(format!("v_f must be positive, got {v_f}")));
        }
        let (name, value) = match variant {
            FdVariant::Greenshields => ("rho_m", rho_m),
            FdVariant::Underwood | FdVariant::Drake => ("rho_c", rho_c),
        };
        if !(value > 0.0 && value.is_finite()) {
            return Err(Error::Config(format!(
                "{name} must be positive for {variant:?}, got {value}"
            )));
        }
        Ok(Self {
            variant,
            v_f,
            rho_m,
            rho_c,
        })
    }

    pub fn greenshields(v_f: f64, rho_m: f64) -> Result<Self> {
        Self::new(FdVariant::Greenshields, v_f, rho_m, DEFAULT_RHO_C)
    }
    pub fn underwood(v_f: f64, rho_c: f64) -> Result<Self> {
        Self::new(FdVariant::Underwood, v_f, DEFAULT_RHO_M, rho_c)
    }
    pub fn drake(v_f: f64, rho_c: f64) -> Result<Self> {
        Self::new(FdVariant::Drake, v_f, DEFAULT_RHO_M, rho_c)
    }

    /// Largest speed the diagram can produce (attained at rho = 0).
    pub fn max_speed(&self) -> f64 {
        self.v_f
    }

    pub(crate) fn speed_unchecked(&self, rho: f64) -> f64 {
        match self.variant {
            FdVariant::Greenshields => {
                if rho >= self.rho_m {
                    0.0
                } else {
                    self.v_f * (1.0 - rho / self.rho_m)
                }
            }
            FdVariant::Underwood => self.v_f * (-rho / self.rho_c).exp(),
            FdVariant::Drake => {
                let r = rho / self.rho_c;
                self.v_f * (-0.5 * r * r).exp()
            }
        }
    }

    pub(crate) fn deriv_unchecked(&self, rho: f64) -> f64 {
        match self.variant {
            FdVariant::Greenshields => {
                if rho >= self.rho_m {
                    0.0
                } else {
                    -self.v_f / self.rho_m
                }
            }
            FdVariant::Underwood => -self.v_f / self.rho_c * (-rho / self.rho_c).exp(),
            FdVariant::Drake => {
                let r = rho / self.rho_c;
                -self.v_f * r / self.rho_c * (-0.5 * r * r).exp()
            }
        }
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if rho >= 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "density must be non-negative, got {rho}"
        )))
    }
}

/// Speed V(rho) in m/s.
pub fn fd_eval(params: &FdParams, rho: f64) -> Result<f64> {
    check_rho(rho)?;
    Ok(params.speed_unchecked(rho))
}

/// dV/drho, exact. Zero in Greenshields' clamped region.
pub fn fd_deriv(params: &FdParams, rho: f64) -> Result<f64> {
    check_rho(rho)?;
    Ok(params.deriv_unchecked(rho))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn all() -> [FdParams; 3] {
        [
            FdParams::greenshields(30.0, 0.2).unwrap(),
            FdParams::underwood(30.0, 0.1).unwrap(),
            FdParams::drake(30.0, 0.1).unwrap(),
        ]
    }

    #[test]
    fn eval_examples() {
        let [g, u, d] = all();
        assert_eq!(fd_eval(&g, 0.0).unwrap(), 30.0);
        assert_relative_eq!(fd_eval(&g, 0.1).unwrap(), 15.0, epsilon = 1e-12);
        assert_relative_eq!(
            fd_eval(&u, 0.1).unwrap(),
            30.0 / std::f64::consts::E,
            epsilon = 1e-12
        );
        assert_relative_eq!(fd_eval(&u, 0.1).unwrap(), 11.036, epsilon = 1e-3);
        assert_relative_eq!(
            fd_eval(&d, 0.1).unwrap(),
            30.0 * (-0.5f64).exp(),
            epsilon = 1e-12
        );
        assert_relative_eq!(fd_eval(&d, 0.1).unwrap(), 18.196, epsilon = 1e-3);
    }

    #[test]
    fn deriv_examples() {
        let [g, u, d] = all();
        for rho in [0.01, 0.1, 0.19] {
            assert_relative_eq!(fd_deriv(&g, rho).unwrap(), -150.0, epsilon = 1e-12);
        }
        assert_relative_eq!(fd_deriv(&u, 0.0).unwrap(), -300.0, epsilon = 1e-12);
        assert_eq!(fd_deriv(&d, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn greenshields_clamps() {
        let g = FdParams::greenshields(30.0, 0.2).unwrap();
        assert_eq!(fd_eval(&g, 0.25).unwrap(), 0.0);
        assert_eq!(fd_deriv(&g, 0.25).unwrap(), 0.0);
    }

    #[test]
    fn negative_density_rejected() {
        for p in all() {
            assert!(matches!(fd_eval(&p, -1e-3), Err(Error::Domain(_))));
            assert!(matches!(fd_deriv(&p, -1e-3), Err(Error::Domain(_))));
        }
        assert!(FdParams::greenshields(0.0, 0.2).is_err());
        assert!(FdParams::underwood(30.0, 0.0).is_err());
    }

    #[test]
    fn assumption_holds_on_grid() {
        for p in all() {
            for i in 0..=400 {
                let rho = i as f64 * 0.001;
                assert!(fd_eval(&p, rho).unwrap() >= 0.0);
                assert!(fd_deriv(&p, rho).unwrap() <= 0.0);
            }
        }
    }

    #[test]
    fn derivative_matches_central_difference() {
        let h = 1e-6;
        for p in all() {
            for i in 1..=100 {
                // stay off the Greenshields kink at rho_m
                let rho = 0.0019 * i as f64;
                let fd =
                    (fd_eval(&p, rho + h).unwrap() - fd_eval(&p, rho - h).unwrap()) / (2.0 * h);
                let exact = fd_deriv(&p, rho).unwrap();
                let scale = exact.abs().max(1e-3);
                assert!(
                    (fd - exact).abs() / scale < 1e-8,
                    "{:?} rho={rho}: {fd} vs {exact}",
                    p.variant
                );
            }
        }
    }
}
