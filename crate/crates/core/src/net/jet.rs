//! Batched forward propagation of values together with directional
//! derivatives ("jets"), and the reverse sweep through both.
//!
//! For every layer the forward sweep carries the pre-activation `z` and,
//! for each tangent direction `d`, its directional derivative `dz_d`:
//!
//! ```text
//! z     = a W^T + b          a'     = s(z)
//! dz_d  = da_d W^T           da'_d  = s'(z) * dz_d
//! ```
//!
//! The reverse sweep takes cotangents on the outputs and on every output
//! tangent and returns the gradient with respect to the flat parameter
//! vector and the input. The tangent path contributes `s''(z)` terms, which
//! is what makes gradients of input-derivatives (mixed second derivatives)
//! exact.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis, Zip};

use super::{Activation, MlpNet};

pub(crate) struct Tape {
    /// Input to each layer (`acts[0]` is the network input).
    acts: Vec<Array2<f64>>,
    /// `s'(z)` of each layer.
    d1s: Vec<Array2<f64>>,
    /// `s''(z)` of each layer, kept only when tangents are carried.
    d2s: Vec<Array2<f64>>,
    /// `tacts[l][d]`: tangent of the input to layer `l` in direction `d`.
    tacts: Vec<Vec<Array2<f64>>>,
    /// `tzs[l][d]`: tangent of the pre-activation.
    tzs: Vec<Vec<Array2<f64>>>,
}

/// Output values and output tangents of a batch.
pub(crate) struct Jet {
    pub value: Array2<f64>,
    pub tangents: Vec<Array2<f64>>,
}

impl MlpNet {
    fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (off, n_in, n_out) = self.offsets[l];
        let w = ArrayView2::from_shape((n_out, n_in), &self.params[off..off + n_in * n_out])
            .expect("layout");
        let b = ArrayView1::from(&self.params[off + n_in * n_out..off + n_in * n_out + n_out]);
        (w, b)
    }

    fn activation_of(&self, l: usize) -> Activation {
        if l + 1 == self.spec.n_layers() {
            self.spec.output_activation
        } else {
            self.spec.activation
        }
    }

    /// Forward sweep over a batch (`rows x input_dim`) with tangent directions
    /// given per row (`tangents[d]` has the same shape as `input`).
    pub(crate) fn forward_jet(
        &self,
        input: Array2<f64>,
        tangents: Vec<Array2<f64>>,
    ) -> (Jet, Tape) {
        let n_layers = self.spec.n_layers();
        let with_t = !tangents.is_empty();
        let mut acts = Vec::with_capacity(n_layers + 1);
        let mut d1s = Vec::with_capacity(n_layers);
        let mut d2s = Vec::with_capacity(n_layers);
        let mut tacts = Vec::with_capacity(n_layers + 1);
        let mut tzs = Vec::with_capacity(n_layers);
        acts.push(input);
        tacts.push(tangents);
        for l in 0..n_layers {
            let (w, b) = self.layer(l);
            let act = self.activation_of(l);
            let mut a = acts[l].dot(&w.t());
            a += &b;
            let mut d1 = Array2::zeros(a.raw_dim());
            let mut d2 = if with_t {
                Array2::zeros(a.raw_dim())
            } else {
                Array2::zeros((0, 0))
            };
            if with_t {
                Zip::from(&mut a)
                    .and(&mut d1)
                    .and(&mut d2)
                    .for_each(|z, s1, s2| {
                        let (v, p, q) = act.jet(*z);
                        *z = v;
                        *s1 = p;
                        *s2 = q;
                    });
            } else {
                Zip::from(&mut a).and(&mut d1).for_each(|z, s1| {
                    let (v, p, _) = act.jet(*z);
                    *z = v;
                    *s1 = p;
                });
            }
            let tz: Vec<Array2<f64>> = tacts[l].iter().map(|ta| ta.dot(&w.t())).collect();
            let ta: Vec<Array2<f64>> = tz
                .iter()
                .map(|t| {
                    let mut out = t.clone();
                    out *= &d1;
                    out
                })
                .collect();
            d1s.push(d1);
            d2s.push(d2);
            tzs.push(tz);
            acts.push(a);
            tacts.push(ta);
        }
        let value = acts.pop().expect("output");
        let tangents = tacts.pop().expect("output tangents");
        (
            Jet { value, tangents },
            Tape {
                acts,
                d1s,
                d2s,
                tacts,
                tzs,
            },
        )
    }

    /// Reverse sweep. `ybar` is the cotangent on the outputs, `tbar[d]` on
    /// the output tangents (missing directions count as zero). Adds the
    /// parameter gradient into `grad` and returns the input cotangent.
    pub(crate) fn backward_jet(
        &self,
        tape: &Tape,
        ybar: Array2<f64>,
        tbar: Vec<Array2<f64>>,
        grad: &mut [f64],
    ) -> Array2<f64> {
        debug_assert_eq!(grad.len(), self.params.len());
        let mut abar = ybar;
        let mut tabar = tbar;
        for l in (0..self.spec.n_layers()).rev() {
            let (w, _) = self.layer(l);
            let d1 = &tape.d1s[l];
            // zbar = abar * s'(z) + sum_d tabar_d * s''(z) * tz_d
            let mut zbar = abar;
            zbar *= d1;
            for (d, tb) in tabar.iter().enumerate() {
                Zip::from(&mut zbar)
                    .and(tb)
                    .and(&tape.d2s[l])
                    .and(&tape.tzs[l][d])
                    .for_each(|o, &t, &s2, &tz| *o += t * s2 * tz);
            }
            let tzbar: Vec<Array2<f64>> = tabar
                .into_iter()
                .map(|mut tb| {
                    tb *= d1;
                    tb
                })
                .collect();

            let (off, n_in, n_out) = self.offsets[l];
            {
                let mut gw = ndarray::ArrayViewMut2::from_shape(
                    (n_out, n_in),
                    &mut grad[off..off + n_in * n_out],
                )
                .expect("layout");
                ndarray::linalg::general_mat_mul(1.0, &zbar.t(), &tape.acts[l], 1.0, &mut gw);
                for (d, tzb) in tzbar.iter().enumerate() {
                    ndarray::linalg::general_mat_mul(
                        1.0,
                        &tzb.t(),
                        &tape.tacts[l][d],
                        1.0,
                        &mut gw,
                    );
                }
            }
            let gb = zbar.sum_axis(Axis(0));
            for (g, v) in grad[off + n_in * n_out..off + n_in * n_out + n_out]
                .iter_mut()
                .zip(gb.iter())
            {
                *g += v;
            }
            abar = zbar.dot(&w);
            tabar = tzbar.iter().map(|t| t.dot(&w)).collect();
        }
        abar
    }
}
