//! Dense tanh MLP with hand-written backpropagation.
//!
//! Batched row-major layout: inputs are `(batch, in_dim)`; every hidden layer
//! applies `tanh`, the output layer is linear. Parameters flatten layer by
//! layer as `weights (out x in, row-major)` followed by `bias (out)`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{check_len, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            w: Array2::zeros((out_dim, in_dim)),
            b: Array1::zeros(out_dim),
        }
    }

    /// Weights ~ N(0, 1/in_dim), zero bias.
    pub fn random<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (in_dim.max(1) as f64).sqrt();
        let w = Array2::from_shape_fn((out_dim, in_dim), |_| crate::rng::normal(rng) * scale);
        Self {
            w,
            b: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// `x W^T + b` for a batch of rows.
    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Activations of every layer from the most recent forward pass.
pub struct MlpCache {
    /// `acts[0]` is the input; `acts[i + 1]` is the output of layer `i`.
    acts: Vec<Array2<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("cache holds at least the input")
    }
}

impl Mlp {
    /// `dims = [in, hidden..., out]`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let layers = dims
            .windows(2)
            .map(|w| Dense::random(w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Self {
        assert!(!layers.is_empty());
        for pair in layers.windows(2) {
            assert_eq!(pair[0].out_dim(), pair[1].in_dim(), "layer widths do not chain");
        }
        Self { layers }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(Dense::out_dim));
        d
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        check_len("parameter vector", self.num_params(), p.len())?;
        let mut off = 0;
        for l in &mut self.layers {
            for v in l.w.iter_mut().chain(l.b.iter_mut()) {
                *v = p[off];
                off += 1;
            }
        }
        Ok(())
    }

    /// `theta -= lr * grad`.
    pub fn sgd_step(&mut self, grad: &[f64], lr: f64) {
        debug_assert_eq!(grad.len(), self.num_params());
        let mut off = 0;
        for l in &mut self.layers {
            for v in l.w.iter_mut().chain(l.b.iter_mut()) {
                *v -= lr * grad[off];
                off += 1;
            }
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> MlpCache {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_owned());
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = l.apply(acts[i].view());
            if i < last {
                z.mapv_inplace(f64::tanh);
            }
            acts.push(z);
        }
        MlpCache { acts }
    }

    /// Parameter gradient (flattened, summed over the batch) and the gradient
    /// with respect to the input rows, given `d_out = dL/d(output)`.
    pub fn backward(&self, cache: &MlpCache, d_out: ArrayView2<f64>) -> (Vec<f64>, Array2<f64>) {
        let n = self.layers.len();
        let mut per_layer: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(n);
        let mut delta = d_out.to_owned();
        for i in (0..n).rev() {
            if i < n - 1 {
                // output of layer i went through tanh: d/dz = 1 - a^2
                let a = &cache.acts[i + 1];
                delta.zip_mut_with(a, |d, &a| *d *= 1.0 - a * a);
            }
            let dw = delta.t().dot(&cache.acts[i]);
            let db = delta.sum_axis(Axis(0));
            let d_in = delta.dot(&self.layers[i].w);
            per_layer.push((dw, db));
            delta = d_in;
        }
        per_layer.reverse();
        let mut grad = Vec::with_capacity(self.num_params());
        for (dw, db) in per_layer {
            grad.extend(dw.iter());
            grad.extend(db.iter());
        }
        (grad, delta)
    }
}
