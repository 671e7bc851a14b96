//! Dense numerics: matrices, masked softmax, normalization, linear maps and
//! multi-head attention, each with the explicit backward pass used in training.

mod attention;
mod block;
mod layers;
mod matrix;
mod ops;

pub use attention::{attention, attention_vjp, AttentionParams};
pub(crate) use block::{BlockCache, CrossAttnCache, FfnCache, SelfAttnCache};
pub use block::{CrossAttnSublayer, FfnSublayer, SelfAttnSublayer, TransformerBlock};
pub use layers::{LayerNorm, LinearLayer, Mlp};
pub(crate) use layers::{LayerNormCache, MlpCache};
pub use matrix::Matrix;
pub use ops::{
    dot, inverse_sigmoid, l2_normalize, layer_norm, log_sigmoid, sigmoid, softmax_in_place,
    softmax_masked, LN_EPS,
};

/// Uniform access to every trainable scalar of a model.
///
/// Gradients are stored in a value of the same type, so an optimizer walks
/// the parameters and the gradients in lockstep through `visit`/`visit_mut`.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |s| n += s.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |s| out.extend_from_slice(s));
        out
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut(&mut |s| s.iter_mut().for_each(|v| *v = value));
    }

    /// Overwrites every parameter from a flat vector in `visit` order.
    fn load_flat(&mut self, flat: &[f64]) {
        let mut at = 0;
        self.visit_mut(&mut |s| {
            s.copy_from_slice(&flat[at..at + s.len()]);
            at += s.len();
        });
        assert_eq!(at, flat.len(), "flat parameter length");
    }

    /// `self += alpha · other`, elementwise in `visit` order.
    fn add_scaled(&mut self, alpha: f64, other: &Self)
    where
        Self: Sized,
    {
        let flat = other.flatten();
        let mut at = 0;
        self.visit_mut(&mut |s| {
            let n = s.len();
            for (v, o) in s.iter_mut().zip(&flat[at..at + n]) {
                *v += alpha * o;
            }
            at += n;
        });
    }
}

/// A copy of `model` with every parameter set to zero, used as a gradient buffer.
pub fn zeros_like<P: Parameters + Clone>(model: &P) -> P {
    let mut g = model.clone();
    g.fill(0.0);
    g
}
