use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, n: usize) -> Self {
        Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected ADAM update of `params` in place.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "ADAM state has {} entries, params {}, grads {}",
            state.m.len(),
            params.len(),
            grads.len()
        )));
    }
    if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient component {k} is {}",
            grads[k]
        )));
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.step += 1;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *p -= lr * mh / (vh.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = AdamState::new(AdamConfig::default(), 4);
        let g = [2.0, -0.5, 1e-3, -40.0];
        let mut p = [0.0; 4];
        adam_step(&mut s, &mut p, &g).unwrap();
        for k in 0..4 {
            let expect = -1e-3 * g[k] / (g[k].abs() + 1e-8);
            assert!((p[k] - expect).abs() < 1e-15);
            assert!((p[k] + 1e-3 * g[k].signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_gradient_from_rest() {
        let mut s = AdamState::new(AdamConfig::default(), 3);
        let mut p = [1.0, 2.0, 3.0];
        adam_step(&mut s, &mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, [1.0, 2.0, 3.0]);

        let mut s = AdamState::new(AdamConfig::default(), 1);
        let mut p = [0.0];
        adam_step(&mut s, &mut p, &[1.0]).unwrap();
        let (m, v) = (s.m[0], s.v[0]);
        adam_step(&mut s, &mut p, &[0.0]).unwrap();
        assert!((s.m[0] - 0.9 * m).abs() < 1e-16);
        assert!((s.v[0] - 0.999 * v).abs() < 1e-16);
    }

    #[test]
    fn non_finite_gradient_names_component() {
        let mut s = AdamState::new(AdamConfig::default(), 3);
        let mut p = [0.0; 3];
        match adam_step(&mut s, &mut p, &[0.0, f64::NAN, 1.0]) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("component 1")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut s = AdamState::new(AdamConfig::default(), 2);
            let mut p = vec![1.0, -1.0];
            for i in 0..100 {
                let g = vec![p[0] * 2.0 + i as f64 * 1e-3, (p[1] - 0.3).sin()];
                adam_step(&mut s, &mut p, &g).unwrap();
            }
            (p, s)
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #[test]
        fn update_is_bounded(gs in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 1..40)) {
            let cfg = AdamConfig::default();
            let mut s = AdamState::new(cfg, 3);
            let mut p = vec![0.0; 3];
            for g in gs {
                let before = p.clone();
                adam_step(&mut s, &mut p, &g).unwrap();
                for k in 0..3 {
                    prop_assert!((p[k] - before[k]).abs() <= 10.0 * cfg.lr);
                }
            }
        }
    }
}
