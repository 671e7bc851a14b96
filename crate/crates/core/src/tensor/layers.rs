use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::matrix::gemm;
use crate::tensor::ops::normalize_row;
use crate::tensor::{Matrix, Parameters};

/// Affine map `x · W + b` with `W: in_dim × out_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LinearLayer {
    /// Uniform `[-1/√in, 1/√in]` weights, zero bias.
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        LinearLayer {
            weight: Matrix::from_vec(in_dim, out_dim, data).expect("sized"),
            bias: vec![0.0; out_dim],
        }
    }

    /// Square identity map with zero bias.
    pub fn identity(dim: usize) -> Self {
        LinearLayer {
            weight: Matrix::identity(dim),
            bias: vec![0.0; dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::dim(format!(
                "linear expects width {}, got {}",
                self.in_dim(),
                x.cols()
            )));
        }
        Ok(self.apply(x))
    }

    /// Unchecked forward for internal hot paths.
    pub(crate) fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), self.out_dim());
        for r in 0..out.rows() {
            out.row_mut(r).copy_from_slice(&self.bias);
        }
        gemm(1.0, x.view(), self.weight.view(), 1.0, &mut out.view_mut());
        out
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
    pub(crate) fn backward(&self, x: &Matrix, dy: &Matrix, grad: &mut LinearLayer) -> Matrix {
        gemm(
            1.0,
            x.view().t(),
            dy.view(),
            1.0,
            &mut grad.weight.view_mut(),
        );
        for r in 0..dy.rows() {
            for (g, d) in grad.bias.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        let mut dx = Matrix::zeros(x.rows(), self.in_dim());
        gemm(
            1.0,
            dy.view(),
            self.weight.view().t(),
            0.0,
            &mut dx.view_mut(),
        );
        dx
    }
}

impl Parameters for LinearLayer {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.weight.data());
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.weight.data_mut());
        f(&mut self.bias);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub shift: Vec<f64>,
}

/// Saved activations for [`LayerNorm::backward`].
#[derive(Clone, Debug)]
pub(crate) struct LayerNormCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: vec![1.0; dim],
            shift: vec![0.0; dim],
        }
    }

    pub(crate) fn forward(&self, x: &Matrix) -> (Matrix, LayerNormCache) {
        let mut normalized = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let (_, s) = normalize_row(normalized.row_mut(r));
            inv_std.push(s);
            let src = normalized.row(r);
            for (((o, v), g), b) in out
                .row_mut(r)
                .iter_mut()
                .zip(src)
                .zip(&self.gain)
                .zip(&self.shift)
            {
                *o = v * g + b;
            }
        }
        (
            out,
            LayerNormCache {
                normalized,
                inv_std,
            },
        )
    }

    pub(crate) fn backward(
        &self,
        cache: &LayerNormCache,
        dy: &Matrix,
        grad: &mut LayerNorm,
    ) -> Matrix {
        let d = dy.cols();
        let n = d as f64;
        let mut dx = Matrix::zeros(dy.rows(), d);
        let mut dxhat = vec![0.0; d];
        for r in 0..dy.rows() {
            let xhat = cache.normalized.row(r);
            let dyr = dy.row(r);
            for j in 0..d {
                grad.gain[j] += dyr[j] * xhat[j];
                grad.shift[j] += dyr[j];
                dxhat[j] = dyr[j] * self.gain[j];
            }
            let mean_d: f64 = dxhat.iter().sum::<f64>() / n;
            let mean_dx: f64 = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / n;
            let s = cache.inv_std[r];
            for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                *o = s * (dxhat[j] - mean_d - xhat[j] * mean_dx);
            }
        }
        dx
    }
}

impl Parameters for LayerNorm {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(&self.gain);
        f(&self.shift);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(&mut self.gain);
        f(&mut self.shift);
    }
}

pub(crate) fn relu(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

/// Zeroes `dy` wherever the pre-activation was non-positive.
pub(crate) fn relu_backward(pre: &Matrix, dy: &mut Matrix) {
    for (g, &p) in dy.data_mut().iter_mut().zip(pre.data()) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Multi-layer perceptron with ReLU between layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<LinearLayer>,
}

#[derive(Clone, Debug)]
pub(crate) struct MlpCache {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        Mlp {
            layers: dims
                .windows(2)
                .map(|w| LinearLayer::new(w[0], w[1], rng))
                .collect(),
        }
    }

    pub(crate) fn forward(&self, x: &Matrix) -> (Matrix, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&h);
            inputs.push(h);
            h = if i < last { relu(&z) } else { z.clone() };
            pre.push(z);
        }
        (h, MlpCache { inputs, pre })
    }

    pub(crate) fn backward(&self, cache: &MlpCache, dy: &Matrix, grad: &mut Mlp) -> Matrix {
        let mut d = dy.clone();
        let last = self.layers.len() - 1;
        for i in (0..self.layers.len()).rev() {
            if i < last {
                relu_backward(&cache.pre[i], &mut d);
            }
            d = self.layers[i].backward(&cache.inputs[i], &d, &mut grad.layers[i]);
        }
        d
    }
}

impl Parameters for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.layers.iter().for_each(|l| l.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
    }
}
