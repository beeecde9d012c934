//! Small dense networks with exact reverse-mode derivatives.
//!
//! Besides the usual parameter gradient, the engine differentiates with
//! respect to the input and can differentiate input-derivatives with respect
//! to the parameters, which is what a PDE residual built from network
//! derivatives needs.

mod jet;

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) use jet::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    /// `ln(1 + e^z)`, used to keep outputs non-negative.
    Softplus,
}

impl Activation {
    #[inline]
    pub fn eval(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::Softplus => {
                if z > 0.0 {
                    z + (-z).exp().ln_1p()
                } else {
                    z.exp().ln_1p()
                }
            }
        }
    }

    #[inline]
    pub fn d1(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Softplus => sigmoid(z),
        }
    }

    #[inline]
    pub fn d2(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 0.0,
            Activation::Tanh => {
                let t = z.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Softplus => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
        }
    }

    /// `(s(z), s'(z), s''(z))` from a single transcendental evaluation.
    #[inline]
    pub fn jet(self, z: f64) -> (f64, f64, f64) {
        match self {
            Activation::Identity => (z, 1.0, 0.0),
            Activation::Tanh => {
                let t = z.tanh();
                let d = 1.0 - t * t;
                (t, d, -2.0 * t * d)
            }
            Activation::Softplus => {
                let e = (-z.abs()).exp();
                let s = if z >= 0.0 {
                    1.0 / (1.0 + e)
                } else {
                    e / (1.0 + e)
                };
                (z.max(0.0) + e.ln_1p(), s, s * (1.0 - s))
            }
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(Activation::Identity),
            "tanh" => Some(Activation::Tanh),
            "softplus" => Some(Activation::Softplus),
            _ => None,
        }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub output_dim: usize,
    pub activation: Activation,
    pub output_activation: Activation,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_layers: usize,
        hidden_width: usize,
        output_dim: usize,
    ) -> Self {
        Self {
            input_dim,
            hidden_layers,
            hidden_width,
            output_dim,
            activation: Activation::Tanh,
            output_activation: Activation::Identity,
        }
    }

    pub fn with_output_activation(mut self, a: Activation) -> Self {
        self.output_activation = a;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("network dimensions must be >= 1".into()));
        }
        if self.hidden_layers > 0 && self.hidden_width == 0 {
            return Err(Error::Config("hidden width must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of affine layers (hidden layers plus the output layer).
    pub fn n_layers(&self) -> usize {
        self.hidden_layers + 1
    }

    fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim];
        d.extend(std::iter::repeat_n(self.hidden_width, self.hidden_layers));
        d.push(self.output_dim);
        d
    }

    /// `(offset, n_in, n_out)` of every layer in the flat parameter vector.
    /// Each layer stores its weights (row-major, `n_out x n_in`) followed by
    /// its biases.
    pub fn layer_offsets(&self) -> Vec<(usize, usize, usize)> {
        let d = self.dims();
        let mut off = 0;
        d.windows(2)
            .map(|w| {
                let r = (off, w[0], w[1]);
                off += w[0] * w[1] + w[1];
                r
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.dims().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpNet {
    spec: MlpSpec,
    params: Vec<f64>,
    offsets: Vec<(usize, usize, usize)>,
}

impl MlpNet {
    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.n_params() {
            return Err(Error::Shape(format!(
                "network needs {} parameters, got {}",
                spec.n_params(),
                params.len()
            )));
        }
        Ok(Self {
            offsets: spec.layer_offsets(),
            spec,
            params,
        })
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        Self::from_params(spec, vec![0.0; spec.n_params()])
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_glorot(spec: MlpSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; spec.n_params()];
        for (off, n_in, n_out) in spec.layer_offsets() {
            let a = (6.0 / (n_in + n_out) as f64).sqrt();
            for p in &mut params[off..off + n_in * n_out] {
                *p = rng.random_range(-a..a);
            }
        }
        Self::from_params(spec, params)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }
    pub fn params(&self) -> &[f64] {
        &self.params
    }
    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "network needs {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "network takes {} inputs, got {len}",
                self.spec.input_dim
            )));
        }
        Ok(())
    }

    fn row(v: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row")
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input.len())?;
        let (jet, _) = self.forward_jet(Self::row(input), Vec::new());
        Ok(jet.value.into_raw_vec_and_offset().0)
    }

    /// Forward pass over the rows of `inputs`.
    pub fn forward_batch(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(inputs.ncols())?;
        Ok(self.forward_jet(inputs.to_owned(), Vec::new()).0.value)
    }

    /// Vector-Jacobian product `cotangent^T d(output)/d(params)`.
    pub fn grad_params(&self, input: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input.len())?;
        if cotangent.len() != self.spec.output_dim {
            return Err(Error::Shape(format!(
                "cotangent has {} entries, network has {} outputs",
                cotangent.len(),
                self.spec.output_dim
            )));
        }
        let (_, tape) = self.forward_jet(Self::row(input), Vec::new());
        let mut g = vec![0.0; self.n_params()];
        self.backward_jet(&tape, Self::row(cotangent), Vec::new(), &mut g);
        Ok(g)
    }

    fn unit_tangents(&self) -> Vec<Array2<f64>> {
        (0..self.spec.input_dim)
            .map(|i| {
                let mut e = Array2::zeros((1, self.spec.input_dim));
                e[[0, i]] = 1.0;
                e
            })
            .collect()
    }

    /// Jacobian `d(output)/d(input)`, shaped `output_dim x input_dim`.
    pub fn grad_input(&self, input: &[f64]) -> Result<Array2<f64>> {
        self.check_input(input.len())?;
        let (jet, _) = self.forward_jet(Self::row(input), self.unit_tangents());
        let mut j = Array2::zeros((self.spec.output_dim, self.spec.input_dim));
        for (i, t) in jet.tangents.iter().enumerate() {
            for o in 0..self.spec.output_dim {
                j[[o, i]] = t[[0, o]];
            }
        }
        Ok(j)
    }

    /// Gradient with respect to the parameters of
    /// `sum_{o,i} cotangent[o,i] * d(output_o)/d(input_i)`.
    pub fn grad_params_of_input_grad(
        &self,
        input: &[f64],
        cotangent: ArrayView2<f64>,
    ) -> Result<Vec<f64>> {
        self.check_input(input.len())?;
        if cotangent.dim() != (self.spec.output_dim, self.spec.input_dim) {
            return Err(Error::Shape(format!(
                "cotangent is {:?}, Jacobian is {}x{}",
                cotangent.dim(),
                self.spec.output_dim,
                self.spec.input_dim
            )));
        }
        let (_, tape) = self.forward_jet(Self::row(input), self.unit_tangents());
        let tbar = (0..self.spec.input_dim)
            .map(|i| {
                let col: Vec<f64> = cotangent.column(i).to_vec();
                Self::row(&col)
            })
            .collect();
        let mut g = vec![0.0; self.n_params()];
        let ybar = Array2::zeros((1, self.spec.output_dim));
        self.backward_jet(&tape, ybar, tbar, &mut g);
        Ok(g)
    }

    /// Gradient of `cotangent . output` with respect to the input.
    pub fn vjp_input(&self, input: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input.len())?;
        let (_, tape) = self.forward_jet(Self::row(input), Vec::new());
        let mut g = vec![0.0; self.n_params()];
        let abar = self.backward_jet(&tape, Self::row(cotangent), Vec::new(), &mut g);
        Ok(abar.into_raw_vec_and_offset().0)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "{}", self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f =
            std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_to(&mut f).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = std::io::BufReader::new(f).lines();
        Self::read_from(&mut lines, path)
    }

    /// Parse the block written by `Display`, consuming exactly its lines.
    pub fn read_from<B: BufRead>(lines: &mut std::io::Lines<B>, path: &Path) -> Result<Self> {
        let mut n = 0usize;
        let mut next = |what: &str| -> Result<String> {
            n += 1;
            match lines.next() {
                Some(Ok(l)) => Ok(l),
                Some(Err(e)) => Err(Error::io(path, e)),
                None => Err(Error::Parse {
                    path: path.into(),
                    line: n,
                    msg: format!("unexpected end of file, expected {what}"),
                }),
            }
        };
        let bad = |line: usize, msg: String| Error::Parse {
            path: path.into(),
            line,
            msg,
        };
        let header = next("header")?;
        if header.trim() != MLP_HEADER {
            return Err(bad(1, format!("expected '{MLP_HEADER}', found '{header}'")));
        }
        let mut field = |key: &str| -> Result<String> {
            let l = next(key)?;
            let (k, v) = l.split_once(' ').unwrap_or((l.as_str(), ""));
            if k != key {
                return Err(Error::Parse {
                    path: path.into(),
                    line: 0,
                    msg: format!("expected key '{key}', found '{k}'"),
                });
            }
            Ok(v.trim().to_string())
        };
        let num = |s: String, key: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| bad(0, format!("bad value for {key}: '{s}'")))
        };
        let act = |s: String| -> Result<Activation> {
            Activation::parse(&s).ok_or_else(|| bad(0, format!("unknown activation '{s}'")))
        };
        let spec = MlpSpec {
            input_dim: num(field("input_dim")?, "input_dim")?,
            hidden_layers: num(field("hidden_layers")?, "hidden_layers")?,
            hidden_width: num(field("hidden_width")?, "hidden_width")?,
            output_dim: num(field("output_dim")?, "output_dim")?,
            activation: act(field("activation")?)?,
            output_activation: act(field("output_activation")?)?,
        };
        let count = num(field("n_params")?, "n_params")?;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let l = next("parameter")?;
            params.push(
                l.trim()
                    .parse::<f64>()
                    .map_err(|_| bad(0, format!("bad parameter '{l}'")))?,
            );
        }
        Self::from_params(spec, params)
    }
}

pub const MLP_HEADER: &str = "nlwr-mlp v1";

impl fmt::Display for MlpNet {
    /// Versioned text block; `{:e}` keeps every parameter bit-exact.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = &self.spec;
        writeln!(f, "{MLP_HEADER}")?;
        writeln!(f, "input_dim {}", s.input_dim)?;
        writeln!(f, "hidden_layers {}", s.hidden_layers)?;
        writeln!(f, "hidden_width {}", s.hidden_width)?;
        writeln!(f, "output_dim {}", s.output_dim)?;
        writeln!(f, "activation {}", s.activation.name())?;
        writeln!(f, "output_activation {}", s.output_activation.name())?;
        write!(f, "n_params {}", self.params.len())?;
        for p in &self.params {
            write!(f, "\n{p:e}")?;
        }
        Ok(())
    }
}
