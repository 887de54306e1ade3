use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ParamVector;
use crate::error::{Error, Result};

/// Feed-forward network: tanh hidden layers, linear output layer.
///
/// Weights of layer `l` are stored row-major as an `in x out` matrix
/// followed by the `out` biases. Dropout (inverted scaling) follows every
/// hidden activation and is only active when a training pass is given a
/// random source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    offset: usize,
    dropout: f64,
}

/// Activations recorded by [`Mlp::forward_train`].
#[derive(Debug, Clone)]
pub struct MlpTape {
    /// Input to each layer (after dropout for hidden layers).
    inputs: Vec<Array2<f64>>,
    /// tanh output of each hidden layer, before dropout.
    hidden: Vec<Array2<f64>>,
    /// Inverted-dropout multipliers per hidden layer.
    masks: Vec<Option<Array2<f64>>>,
}

impl Mlp {
    /// Allocates the network in `params` with uniform Glorot initialization
    /// and zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], dropout: f64, params: &mut ParamVector, rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().skip(1).any(|&s| s == 0) {
            return Err(Error::Invalid(format!("bad layer sizes {sizes:?}")));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Invalid(format!("dropout {dropout} outside [0, 1)")));
        }
        let offset = params.allocate(Self::param_count(sizes));
        let net = Mlp {
            sizes: sizes.to_vec(),
            offset,
            dropout,
        };
        let mut off = offset;
        for w in sizes.windows(2) {
            let (fi, fo) = (w[0], w[1]);
            let bound = (6.0 / (fi + fo) as f64).sqrt();
            params.init_uniform(off, fi * fo, bound, rng);
            off += fi * fo + fo;
        }
        Ok(net)
    }

    /// A network over an existing parameter layout (used when loading).
    pub fn with_layout(sizes: Vec<usize>, offset: usize, dropout: f64) -> Self {
        Mlp { sizes, offset, dropout }
    }

    pub fn param_count(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn n_params(&self) -> usize {
        Self::param_count(&self.sizes)
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    fn layer_offset(&self, l: usize) -> usize {
        self.offset + Self::param_count(&self.sizes[..=l])
    }

    fn layer<'a>(&self, params: &'a [f64], l: usize) -> (ArrayView2<'a, f64>, ArrayView1<'a, f64>) {
        let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
        let off = self.layer_offset(l);
        let w = ArrayView2::from_shape((fi, fo), &params[off..off + fi * fo]).expect("layout");
        let b = ArrayView1::from(&params[off + fi * fo..off + fi * fo + fo]);
        (w, b)
    }

    fn layer_grad<'a>(&self, grad: &'a mut [f64], l: usize) -> (ArrayViewMut2<'a, f64>, ArrayViewMut1<'a, f64>) {
        let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
        let off = self.layer_offset(l);
        let (w, b) = grad[off..off + fi * fo + fo].split_at_mut(fi * fo);
        (
            ArrayViewMut2::from_shape((fi, fo), w).expect("layout"),
            ArrayViewMut1::from(b),
        )
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Dimension {
                what: "network input",
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    fn affine(&self, params: &[f64], l: usize, a: &ArrayView2<f64>) -> Array2<f64> {
        let (w, b) = self.layer(params, l);
        let mut z = Array2::zeros((a.nrows(), w.ncols()));
        general_mat_mul(1.0, a, &w, 0.0, &mut z);
        z += &b;
        z
    }

    /// Evaluation-mode forward pass (no dropout, nothing recorded).
    pub fn forward(&self, params: &[f64], x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let last = self.n_layers() - 1;
        let mut a = self.affine(params, 0, &x);
        for l in 1..=last {
            a.mapv_inplace(f64::tanh);
            a = self.affine(params, l, &a.view());
        }
        Ok(a)
    }

    /// Forward pass that records a tape for [`Mlp::backward`]. Dropout is
    /// applied only when `rng` is given and the rate is positive.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        params: &[f64],
        x: ArrayView2<f64>,
        mut rng: Option<&mut R>,
    ) -> Result<(Array2<f64>, MlpTape)> {
        self.check_input(&x)?;
        let n_layers = self.n_layers();
        let mut tape = MlpTape {
            inputs: Vec::with_capacity(n_layers),
            hidden: Vec::with_capacity(n_layers - 1),
            masks: Vec::with_capacity(n_layers - 1),
        };
        let mut a = x.to_owned();
        for l in 0..n_layers {
            let z = self.affine(params, l, &a.view());
            tape.inputs.push(a);
            if l + 1 == n_layers {
                return Ok((z, tape));
            }
            let h = z.mapv(f64::tanh);
            let mask = match rng.as_deref_mut() {
                Some(rng) if self.dropout > 0.0 => {
                    let keep = 1.0 - self.dropout;
                    Some(h.mapv(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }))
                }
                _ => None,
            };
            a = match &mask {
                Some(m) => &h * m,
                None => h.clone(),
            };
            tape.hidden.push(h);
            tape.masks.push(mask);
        }
        unreachable!("network has at least one layer")
    }

    /// Accumulates parameter gradients for output cotangent `cot` into
    /// `grad` (full-length parameter gradient buffer) and returns the
    /// cotangent of the input. Calling twice accumulates twice.
    pub fn backward(&self, params: &[f64], tape: &MlpTape, cot: ArrayView2<f64>, grad: &mut [f64]) -> Array2<f64> {
        let n_layers = self.n_layers();
        let mut delta = cot.to_owned();
        for l in (0..n_layers).rev() {
            let a = &tape.inputs[l];
            {
                let (mut gw, mut gb) = self.layer_grad(grad, l);
                general_mat_mul(1.0, &a.t(), &delta, 1.0, &mut gw);
                gb += &delta.sum_axis(Axis(0));
            }
            let (w, _) = self.layer(params, l);
            let mut back = Array2::zeros((delta.nrows(), w.nrows()));
            general_mat_mul(1.0, &delta, &w.t(), 0.0, &mut back);
            if l == 0 {
                return back;
            }
            let h = &tape.hidden[l - 1];
            if let Some(m) = &tape.masks[l - 1] {
                back *= m;
            }
            Zip::from(&mut back).and(h).for_each(|g, &h| *g *= 1.0 - h * h);
            delta = back;
        }
        unreachable!("network has at least one layer")
    }
}
