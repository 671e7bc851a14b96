use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::matrix::gemm;
use crate::tensor::ops::softmax_in_place;
use crate::tensor::{LinearLayer, Matrix, Parameters};

/// Multi-head scaled dot-product attention parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub num_heads: usize,
    pub head_dim: usize,
    pub wq: LinearLayer,
    pub wk: LinearLayer,
    pub wv: LinearLayer,
    pub wo: LinearLayer,
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct AttentionCache {
    xq: Matrix,
    xk: Matrix,
    xv: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    concat: Matrix,
}

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(d: usize, num_heads: usize, rng: &mut R) -> Result<Self> {
        if num_heads == 0 || d % num_heads != 0 {
            return Err(Error::Parameter(format!(
                "width {d} is not divisible by {num_heads} heads"
            )));
        }
        Ok(AttentionParams {
            num_heads,
            head_dim: d / num_heads,
            wq: LinearLayer::new(d, d, rng),
            wk: LinearLayer::new(d, d, rng),
            wv: LinearLayer::new(d, d, rng),
            wo: LinearLayer::new(d, d, rng),
        })
    }

    pub fn width(&self) -> usize {
        self.num_heads * self.head_dim
    }

    fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }

    /// Forward pass with separate key and value inputs.
    ///
    /// `mask` is `q_rows × kv_rows` and is added to the scaled logits of every head.
    pub(crate) fn forward(
        &self,
        xq: &Matrix,
        xk: &Matrix,
        xv: &Matrix,
        mask: Option<&Matrix>,
    ) -> (Matrix, AttentionCache) {
        let q = self.wq.apply(xq);
        let k = self.wk.apply(xk);
        let v = self.wv.apply(xv);
        let (nq, nk) = (xq.rows(), xk.rows());
        let hd = self.head_dim;
        let mut concat = Matrix::zeros(nq, self.width());
        let mut probs = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let mut s = Matrix::zeros(nq, nk);
            gemm(
                self.scale(),
                q.col_block(h * hd, hd),
                k.col_block(h * hd, hd).t(),
                0.0,
                &mut s.view_mut(),
            );
            if let Some(mask) = mask {
                s.add_assign(mask);
            }
            for r in 0..nq {
                softmax_in_place(s.row_mut(r));
            }
            gemm(
                1.0,
                s.view(),
                v.col_block(h * hd, hd),
                0.0,
                &mut concat.col_block_mut(h * hd, hd),
            );
            probs.push(s);
        }
        let out = self.wo.apply(&concat);
        let cache = AttentionCache {
            xq: xq.clone(),
            xk: xk.clone(),
            xv: xv.clone(),
            q,
            k,
            v,
            probs,
            concat,
        };
        (out, cache)
    }

    /// Returns `(∂L/∂xq, ∂L/∂xk, ∂L/∂xv)` and accumulates parameter gradients.
    pub(crate) fn backward(
        &self,
        cache: &AttentionCache,
        dout: &Matrix,
        grad: &mut AttentionParams,
    ) -> (Matrix, Matrix, Matrix) {
        let dconcat = self.wo.backward(&cache.concat, dout, &mut grad.wo);
        let (nq, nk) = (cache.q.rows(), cache.k.rows());
        let hd = self.head_dim;
        let mut dq = Matrix::zeros(nq, self.width());
        let mut dk = Matrix::zeros(nk, self.width());
        let mut dv = Matrix::zeros(nk, self.width());
        let mut dp = Matrix::zeros(nq, nk);
        for h in 0..self.num_heads {
            let p = &cache.probs[h];
            gemm(
                1.0,
                dconcat.col_block(h * hd, hd),
                cache.v.col_block(h * hd, hd).t(),
                0.0,
                &mut dp.view_mut(),
            );
            gemm(
                1.0,
                p.view().t(),
                dconcat.col_block(h * hd, hd),
                0.0,
                &mut dv.col_block_mut(h * hd, hd),
            );
            for r in 0..nq {
                let pr = p.row(r);
                let dr = dp.row_mut(r);
                let inner: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (d, &pv) in dr.iter_mut().zip(pr) {
                    *d = pv * (*d - inner);
                }
            }
            gemm(
                self.scale(),
                dp.view(),
                cache.k.col_block(h * hd, hd),
                0.0,
                &mut dq.col_block_mut(h * hd, hd),
            );
            gemm(
                self.scale(),
                dp.view().t(),
                cache.q.col_block(h * hd, hd),
                0.0,
                &mut dk.col_block_mut(h * hd, hd),
            );
        }
        let dxq = self.wq.backward(&cache.xq, &dq, &mut grad.wq);
        let dxk = self.wk.backward(&cache.xk, &dk, &mut grad.wk);
        let dxv = self.wv.backward(&cache.xv, &dv, &mut grad.wv);
        (dxq, dxk, dxv)
    }
}

impl Parameters for AttentionParams {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.wq.visit(f);
        self.wk.visit(f);
        self.wv.visit(f);
        self.wo.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.wq.visit_mut(f);
        self.wk.visit_mut(f);
        self.wv.visit_mut(f);
        self.wo.visit_mut(f);
    }
}

/// Multi-head attention of `q_tokens` over `kv_tokens` with an optional additive mask.
///
/// Logits are scaled by `1/√head_dim` before the mask is added.
pub fn attention(
    q_tokens: &Matrix,
    kv_tokens: &Matrix,
    params: &AttentionParams,
    mask: Option<&Matrix>,
) -> Result<Matrix> {
    let d = params.width();
    if q_tokens.cols() != d || kv_tokens.cols() != d {
        return Err(Error::dim(format!(
            "attention width {d}, got query {} and key {}",
            q_tokens.cols(),
            kv_tokens.cols()
        )));
    }
    if let Some(mask) = mask {
        if mask.shape() != (q_tokens.rows(), kv_tokens.rows()) {
            return Err(Error::dim(format!(
                "mask {}x{} for {} queries over {} keys",
                mask.rows(),
                mask.cols(),
                q_tokens.rows(),
                kv_tokens.rows()
            )));
        }
    }
    Ok(params.forward(q_tokens, kv_tokens, kv_tokens, mask).0)
}

/// Vector-Jacobian product of [`attention`] for an upstream gradient `dout`.
///
/// Returns `(∂L/∂q_tokens, ∂L/∂kv_tokens, ∂L/∂params)`.
pub fn attention_vjp(
    q_tokens: &Matrix,
    kv_tokens: &Matrix,
    params: &AttentionParams,
    mask: Option<&Matrix>,
    dout: &Matrix,
) -> Result<(Matrix, Matrix, AttentionParams)> {
    let out = attention(q_tokens, kv_tokens, params, mask)?;
    out.check_same(dout, "attention upstream gradient")?;
    let (_, cache) = params.forward(q_tokens, kv_tokens, kv_tokens, mask);
    let mut grad = crate::tensor::zeros_like(params);
    let (dq, mut dk, dv) = params.backward(&cache, dout, &mut grad);
    dk.add_assign(&dv);
    Ok((dq, dk, grad))
}
