//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! The search direction comes from the usual two-loop recursion with the
//! initial inverse Hessian scaled by `s'y / y'y` of the newest pair. The
//! line search brackets and zooms (cubic interpolation, safeguarded by
//! bisection). Only pairs with `s'y > 0` are stored. A failed search
//! clears the history and retries from steepest descent on the next call.

use std::collections::VecDeque;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsConfig {
    pub history: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    /// Function evaluations allowed per line search.
    pub max_evals: usize,
    /// Converged once the gradient 2-norm drops below this.
    pub grad_tol: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            history: 20,
            c1: 1e-4,
            c2: 0.9,
            max_evals: 25,
            grad_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsState {
    pub config: LbfgsConfig,
    pub s: VecDeque<Vec<f64>>,
    pub y: VecDeque<Vec<f64>>,
    /// Loss and gradient at the current iterate, once known.
    pub current: Option<(f64, Vec<f64>)>,
    pub iterations: u64,
}

impl LbfgsState {
    pub fn new(config: LbfgsConfig) -> Self {
        Self {
            config,
            s: VecDeque::new(),
            y: VecDeque::new(),
            current: None,
            iterations: 0,
        }
    }

    /// Drop the cached loss/gradient, e.g. after the parameters moved elsewhere.
    pub fn invalidate(&mut self) {
        self.current = None;
    }

    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let k = self.s.len();
        let mut q = g.to_vec();
        let mut alpha = vec![0.0; k];
        let rho: Vec<f64> = (0..k).map(|i| 1.0 / dot(&self.s[i], &self.y[i])).collect();
        for i in (0..k).rev() {
            alpha[i] = rho[i] * dot(&self.s[i], &q);
            axpy(-alpha[i], &self.y[i], &mut q);
        }
        let gamma = if k > 0 {
            dot(&self.s[k - 1], &self.y[k - 1]) / dot(&self.y[k - 1], &self.y[k - 1])
        } else {
            1.0
        };
        q.iter_mut().for_each(|v| *v *= gamma);
        for i in 0..k {
            let beta = rho[i] * dot(&self.y[i], &q);
            axpy(alpha[i] - beta, &self.s[i], &mut q);
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsStep {
    pub loss: f64,
    pub grad_norm: f64,
    pub converged: bool,
    pub evals: usize,
    /// Why the run stopped, when it did.
    pub diagnostic: Option<String>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Trial {
    alpha: f64,
    f: f64,
    g: Vec<f64>,
    dphi: f64,
}

/// Minimiser of the cubic matching values and slopes at `a` and `b`.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> Option<f64> {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if disc < 0.0 {
        return None;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let x = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    x.is_finite().then_some(x)
}

/// One L-BFGS iteration. Moves `params` only when the line search accepts a step.
pub fn lbfgs_step<F>(
    state: &mut LbfgsState,
    params: &mut [f64],
    mut loss_and_grad: F,
) -> Result<LbfgsStep>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let cfg = state.config;
    let mut evals = 0;
    let (f0, g0) = match state.current.take() {
        Some(c) => c,
        None => {
            evals += 1;
            let (f, g) = loss_and_grad(params)?;
            if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("loss {f} at the starting point")));
            }
            (f, g)
        }
    };
    if g0.len() != params.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries, params {}",
            g0.len(),
            params.len()
        )));
    }
    let gnorm = norm(&g0);
    if gnorm < cfg.grad_tol {
        state.current = Some((f0, g0));
        return Ok(LbfgsStep {
            loss: f0,
            grad_norm: gnorm,
            converged: true,
            evals,
            diagnostic: Some("gradient norm below tolerance".into()),
        });
    }

    let mut d = state.direction(&g0);
    let mut dphi0 = dot(&g0, &d);
    if !(dphi0 < 0.0) {
        state.s.clear();
        state.y.clear();
        d = g0.iter().map(|v| -v).collect();
        dphi0 = -gnorm * gnorm;
    }
    let alpha0 = if state.s.is_empty() {
        (1.0 / gnorm).min(1.0)
    } else {
        1.0
    };

    let x0 = params.to_vec();
    let mut eval_at = |alpha: f64, evals: &mut usize| -> Result<Trial> {
        *evals += 1;
        let x: Vec<f64> = x0.iter().zip(&d).map(|(x, di)| x + alpha * di).collect();
        let (f, g) = match loss_and_grad(&x) {
            Ok(r) => r,
            Err(e) if e.is_numerical() => (f64::INFINITY, vec![f64::NAN; x.len()]),
            Err(e) => return Err(e),
        };
        let ok = f.is_finite() && g.iter().all(|v| v.is_finite());
        let (f, dphi) = if ok {
            (f, dot(&g, &d))
        } else {
            (f64::INFINITY, f64::NAN)
        };
        Ok(Trial { alpha, f, g, dphi })
    };
    let armijo = |t: &Trial| t.f <= f0 + cfg.c1 * t.alpha * dphi0;
    let curvature = |t: &Trial| t.dphi.abs() <= -cfg.c2 * dphi0;

    let mut best: Option<Trial> = None;
    let keep_best = |t: &Trial, best: &mut Option<Trial>| {
        if armijo(t) && best.as_ref().is_none_or(|b| t.f < b.f) {
            *best = Some(Trial {
                alpha: t.alpha,
                f: t.f,
                g: t.g.clone(),
                dphi: t.dphi,
            });
        }
    };

    let mut accepted: Option<Trial> = None;
    let mut prev = Trial {
        alpha: 0.0,
        f: f0,
        g: g0.clone(),
        dphi: dphi0,
    };
    let mut alpha = alpha0;
    // bracketing phase
    let mut bracket: Option<(Trial, Trial)> = None;
    let mut first = true;
    while evals < cfg.max_evals {
        let t = eval_at(alpha, &mut evals)?;
        keep_best(&t, &mut best);
        if !t.f.is_finite() {
            // too far: shrink towards the last good point
            alpha = prev.alpha + 0.5 * (t.alpha - prev.alpha);
            continue;
        }
        if !armijo(&t) || (!first && t.f >= prev.f) {
            bracket = Some((prev, t));
            break;
        }
        if curvature(&t) {
            accepted = Some(t);
            break;
        }
        if t.dphi >= 0.0 {
            bracket = Some((t, prev));
            break;
        }
        first = false;
        alpha = 2.0 * t.alpha;
        prev = t;
    }
    // zoom phase: `lo` satisfies Armijo with the lowest value seen
    if accepted.is_none() {
        if let Some((mut lo, mut hi)) = bracket {
            while evals < cfg.max_evals {
                let (a, b) = (lo.alpha, hi.alpha);
                let width = (b - a).abs();
                if width < 1e-16 * a.abs().max(1e-16) {
                    break;
                }
                let mut trial_alpha = if hi.f.is_finite() && hi.dphi.is_finite() {
                    cubic_min(a, lo.f, lo.dphi, b, hi.f, hi.dphi).unwrap_or(0.5 * (a + b))
                } else {
                    0.5 * (a + b)
                };
                let (lo_b, hi_b) = (a.min(b), a.max(b));
                let margin = 0.1 * width;
                if !(trial_alpha > lo_b + margin && trial_alpha < hi_b - margin) {
                    trial_alpha = 0.5 * (a + b);
                }
                let t = eval_at(trial_alpha, &mut evals)?;
                keep_best(&t, &mut best);
                if !t.f.is_finite() || !armijo(&t) || t.f >= lo.f {
                    hi = t;
                } else {
                    if curvature(&t) {
                        accepted = Some(t);
                        break;
                    }
                    if t.dphi * (hi.alpha - lo.alpha) >= 0.0 {
                        hi = lo;
                    }
                    lo = t;
                }
            }
        }
    }

    let step = match accepted.or(best) {
        Some(t) => t,
        None => {
            state.current = Some((f0, g0));
            let restart = !state.s.is_empty();
            state.s.clear();
            state.y.clear();
            return Ok(LbfgsStep {
                loss: f0,
                grad_norm: gnorm,
                converged: !restart,
                evals,
                diagnostic: Some(if restart {
                    "line search failed; curvature history cleared".into()
                } else {
                    "line search found no point with sufficient decrease".into()
                }),
            });
        }
    };

    for (p, (x, di)) in params.iter_mut().zip(x0.iter().zip(&d)) {
        *p = x + step.alpha * di;
    }
    let s: Vec<f64> = d.iter().map(|di| step.alpha * di).collect();
    let y: Vec<f64> = step.g.iter().zip(&g0).map(|(a, b)| a - b).collect();
    let sy = dot(&s, &y);
    if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
        if state.s.len() == cfg.history {
            state.s.pop_front();
            state.y.pop_front();
        }
        state.s.push_back(s);
        state.y.push_back(y);
    }
    state.iterations += 1;
    let new_norm = norm(&step.g);
    let converged = new_norm < cfg.grad_tol;
    state.current = Some((step.f, step.g));
    Ok(LbfgsStep {
        loss: step.f,
        grad_norm: new_norm,
        converged,
        evals,
        diagnostic: converged.then(|| "gradient norm below tolerance".into()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// SPD matrix `Q diag(l) Q^T` with eigenvalues in `[1, 10]`.
    fn spd(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                a[i][j] = (0..n).map(|k| b[i][k] * b[j][k]).sum::<f64>() * 0.5;
            }
            a[i][i] += 1.0;
        }
        a
    }

    fn quad(a: &[Vec<f64>]) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> + '_ {
        move |x: &[f64]| {
            let g: Vec<f64> = a.iter().map(|row| dot(row, x)).collect();
            Ok((0.5 * dot(x, &g), g))
        }
    }

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![
            -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
            200.0 * (b - a * a),
        ];
        Ok((f, g))
    }

    fn tight() -> LbfgsConfig {
        LbfgsConfig {
            grad_tol: 1e-13,
            ..LbfgsConfig::default()
        }
    }

    #[test]
    fn quadratic_bowl() {
        let a = spd(10, 1);
        let mut x: Vec<f64> = (0..10).map(|i| 1.0 + 0.3 * i as f64).collect();
        let mut st = LbfgsState::new(tight());
        let mut f = quad(&a);
        let mut it = 0;
        while norm(&x) >= 1e-8 && it < 50 {
            let r = lbfgs_step(&mut st, &mut x, &mut f).unwrap();
            it += 1;
            if r.converged {
                break;
            }
        }
        assert!(norm(&x) < 1e-8, "|x| = {} after {it}", norm(&x));
    }

    #[test]
    fn rosenbrock_2d() {
        let mut x = vec![-1.2, 1.0];
        let mut st = LbfgsState::new(tight());
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            let r = lbfgs_step(&mut st, &mut x, rosenbrock).unwrap();
            assert!(r.loss <= last);
            last = r.loss;
            if r.loss < 1e-10 || r.converged {
                break;
            }
        }
        assert!(last < 1e-10, "f = {last}");
    }

    #[test]
    fn stationary_start() {
        let a = spd(4, 2);
        let mut x = vec![0.0; 4];
        let mut st = LbfgsState::new(LbfgsConfig::default());
        let r = lbfgs_step(&mut st, &mut x, quad(&a)).unwrap();
        assert!(r.converged);
        assert_eq!(x, vec![0.0; 4]);
    }

    #[test]
    fn stored_pairs_have_positive_curvature() {
        let mut x = vec![-1.2, 1.0];
        let mut st = LbfgsState::new(LbfgsConfig {
            history: 5,
            ..tight()
        });
        for _ in 0..30 {
            lbfgs_step(&mut st, &mut x, rosenbrock).unwrap();
            assert!(st.s.len() <= 5);
            for (s, y) in st.s.iter().zip(&st.y) {
                assert!(dot(s, y) > 0.0);
            }
        }
    }

    #[test]
    fn non_finite_region_is_avoided() {
        // f = x^2 for x > -1, NaN beyond; start where a unit step overshoots
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            if x[0] < -1.0 {
                Ok((f64::NAN, vec![f64::NAN]))
            } else {
                Ok((x[0] * x[0], vec![2.0 * x[0]]))
            }
        };
        let mut x = vec![0.9];
        let mut st = LbfgsState::new(LbfgsConfig::default());
        for _ in 0..20 {
            let r = lbfgs_step(&mut st, &mut x, f).unwrap();
            assert!(r.loss.is_finite());
            if r.converged {
                break;
            }
        }
        assert!(x[0].abs() < 1e-6);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut x = vec![-1.2, 1.0];
            let mut st = LbfgsState::new(tight());
            for _ in 0..40 {
                lbfgs_step(&mut st, &mut x, rosenbrock).unwrap();
            }
            (x, st)
        };
        assert_eq!(run(), run());
    }
}
