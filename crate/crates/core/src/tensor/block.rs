use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::attention::AttentionCache;
use crate::tensor::layers::{relu, relu_backward};
use crate::tensor::{AttentionParams, LayerNorm, LayerNormCache, LinearLayer, Matrix, Parameters};

/// Pre-norm residual self-attention: `xq + Attn(LN(xq), LN(xkv))`.
///
/// With `xq == xkv` this is ordinary self-attention. Passing a longer `xkv`
/// lets a subset of rows (a class token, or object queries behind prepended
/// prompts) attend over the full sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfAttnSublayer {
    pub norm: LayerNorm,
    pub attn: AttentionParams,
}

#[derive(Clone, Debug)]
pub(crate) struct SelfAttnCache {
    ln_q: LayerNormCache,
    ln_kv: LayerNormCache,
    attn: AttentionCache,
}

impl SelfAttnSublayer {
    pub fn new<R: Rng + ?Sized>(d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(SelfAttnSublayer {
            norm: LayerNorm::new(d),
            attn: AttentionParams::new(d, heads, rng)?,
        })
    }

    pub(crate) fn forward(
        &self,
        xq: &Matrix,
        xkv: &Matrix,
        mask: Option<&Matrix>,
    ) -> (Matrix, SelfAttnCache) {
        let (nq, ln_q) = self.norm.forward(xq);
        let (nkv, ln_kv) = self.norm.forward(xkv);
        let (mut out, attn) = self.attn.forward(&nq, &nkv, &nkv, mask);
        out.add_assign(xq);
        (out, SelfAttnCache { ln_q, ln_kv, attn })
    }

    /// Returns `(∂L/∂xq, ∂L/∂xkv)`; the residual path is included in `∂L/∂xq`.
    pub(crate) fn backward(
        &self,
        cache: &SelfAttnCache,
        dout: &Matrix,
        grad: &mut SelfAttnSublayer,
    ) -> (Matrix, Matrix) {
        let (dnq, mut dnk, dnv) = self.attn.backward(&cache.attn, dout, &mut grad.attn);
        dnk.add_assign(&dnv);
        let mut dxq = self.norm.backward(&cache.ln_q, &dnq, &mut grad.norm);
        dxq.add_assign(dout);
        let dxkv = self.norm.backward(&cache.ln_kv, &dnk, &mut grad.norm);
        (dxq, dxkv)
    }
}

impl Parameters for SelfAttnSublayer {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.norm.visit(f);
        self.attn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.norm.visit_mut(f);
        self.attn.visit_mut(f);
    }
}

/// Pre-norm residual cross-attention: `xq + Attn(LN(xq), memory + key_pos, memory)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossAttnSublayer {
    pub norm: LayerNorm,
    pub attn: AttentionParams,
}

#[derive(Clone, Debug)]
pub(crate) struct CrossAttnCache {
    ln_q: LayerNormCache,
    attn: AttentionCache,
}

impl CrossAttnSublayer {
    pub fn new<R: Rng + ?Sized>(d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(CrossAttnSublayer {
            norm: LayerNorm::new(d),
            attn: AttentionParams::new(d, heads, rng)?,
        })
    }

    pub(crate) fn forward(
        &self,
        xq: &Matrix,
        memory_keys: &Matrix,
        memory: &Matrix,
    ) -> (Matrix, CrossAttnCache) {
        let (nq, ln_q) = self.norm.forward(xq);
        let (mut out, attn) = self.attn.forward(&nq, memory_keys, memory, None);
        out.add_assign(xq);
        (out, CrossAttnCache { ln_q, attn })
    }

    /// Returns `(∂L/∂xq, ∂L/∂memory)`; the key path and value path are summed.
    pub(crate) fn backward(
        &self,
        cache: &CrossAttnCache,
        dout: &Matrix,
        grad: &mut CrossAttnSublayer,
    ) -> (Matrix, Matrix) {
        let (dnq, mut dmem, dv) = self.attn.backward(&cache.attn, dout, &mut grad.attn);
        dmem.add_assign(&dv);
        let mut dxq = self.norm.backward(&cache.ln_q, &dnq, &mut grad.norm);
        dxq.add_assign(dout);
        (dxq, dmem)
    }
}

impl Parameters for CrossAttnSublayer {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.norm.visit(f);
        self.attn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.norm.visit_mut(f);
        self.attn.visit_mut(f);
    }
}

/// Pre-norm residual feed-forward: `x + W₂ · relu(W₁ · LN(x))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfnSublayer {
    pub norm: LayerNorm,
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
}

#[derive(Clone, Debug)]
pub(crate) struct FfnCache {
    ln: LayerNormCache,
    normed: Matrix,
    pre: Matrix,
    hidden: Matrix,
}

impl FfnSublayer {
    pub fn new<R: Rng + ?Sized>(d: usize, hidden: usize, rng: &mut R) -> Self {
        FfnSublayer {
            norm: LayerNorm::new(d),
            fc1: LinearLayer::new(d, hidden, rng),
            fc2: LinearLayer::new(hidden, d, rng),
        }
    }

    pub(crate) fn forward(&self, x: &Matrix) -> (Matrix, FfnCache) {
        let (normed, ln) = self.norm.forward(x);
        let pre = self.fc1.apply(&normed);
        let hidden = relu(&pre);
        let mut out = self.fc2.apply(&hidden);
        out.add_assign(x);
        (
            out,
            FfnCache {
                ln,
                normed,
                pre,
                hidden,
            },
        )
    }

    pub(crate) fn backward(
        &self,
        cache: &FfnCache,
        dout: &Matrix,
        grad: &mut FfnSublayer,
    ) -> Matrix {
        let mut dh = self.fc2.backward(&cache.hidden, dout, &mut grad.fc2);
        relu_backward(&cache.pre, &mut dh);
        let dn = self.fc1.backward(&cache.normed, &dh, &mut grad.fc1);
        let mut dx = self.norm.backward(&cache.ln, &dn, &mut grad.norm);
        dx.add_assign(dout);
        dx
    }
}

impl Parameters for FfnSublayer {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.norm.visit(f);
        self.fc1.visit(f);
        self.fc2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.norm.visit_mut(f);
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

/// Pre-norm Transformer encoder block (self-attention followed by FFN).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerBlock {
    pub attn: SelfAttnSublayer,
    pub ffn: FfnSublayer,
}

#[derive(Clone, Debug)]
pub(crate) struct BlockCache {
    attn: SelfAttnCache,
    ffn: FfnCache,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        d: usize,
        heads: usize,
        ffn_mult: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            attn: SelfAttnSublayer::new(d, heads, rng)?,
            ffn: FfnSublayer::new(d, d * ffn_mult, rng),
        })
    }

    /// Runs the block for the rows `xq`, attending over `xkv`.
    pub(crate) fn forward_rows(
        &self,
        xq: &Matrix,
        xkv: &Matrix,
        mask: Option<&Matrix>,
    ) -> (Matrix, BlockCache) {
        let (h, attn) = self.attn.forward(xq, xkv, mask);
        let (out, ffn) = self.ffn.forward(&h);
        (out, BlockCache { attn, ffn })
    }

    pub(crate) fn forward(&self, x: &Matrix, mask: Option<&Matrix>) -> (Matrix, BlockCache) {
        self.forward_rows(x, x, mask)
    }

    /// Returns `(∂L/∂xq, ∂L/∂xkv)`. For plain self-attention the caller sums them.
    pub(crate) fn backward(
        &self,
        cache: &BlockCache,
        dout: &Matrix,
        grad: &mut TransformerBlock,
    ) -> (Matrix, Matrix) {
        let dh = self.ffn.backward(&cache.ffn, dout, &mut grad.ffn);
        self.attn.backward(&cache.attn, &dh, &mut grad.attn)
    }
}

impl Parameters for TransformerBlock {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.attn.visit(f);
        self.ffn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.attn.visit_mut(f);
        self.ffn.visit_mut(f);
    }
}
