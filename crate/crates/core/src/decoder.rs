//! Prompt-guided Transformer decoder and the per-class conditional baseline.
//!
//! In prompt mode the `k` projected class prompts are prepended to the `m`
//! object queries as extra keys/values of every self-attention layer and
//! dropped again afterwards, so the query count stays `m` for any `k`.
//! Classification is the scaled inner product between a projection of each
//! object embedding and each prompt, squashed per class with a sigmoid.
//!
//! The conditional mode adds each prompt to a copy of every query and decodes
//! all `k·m` conditioned queries; it exists as a cost baseline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{sincos_position_codes, PatchGrid};
use crate::error::{Error, Result};
use crate::tensor::{
    inverse_sigmoid, sigmoid, CrossAttnCache, CrossAttnSublayer, FfnCache, FfnSublayer, LayerNorm,
    LayerNormCache, LinearLayer, Matrix, Mlp, MlpCache, Parameters, SelfAttnCache,
    SelfAttnSublayer,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Prompt,
    Conditional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Number of object queries.
    pub m: usize,
    pub d: usize,
    /// Width of the incoming CLIP embeddings.
    pub clip_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_mult: usize,
    pub mode: DecodeMode,
    /// Prior probability used to initialise the classification bias.
    pub prior_prob: f64,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            m: 30,
            d: 64,
            clip_dim: 64,
            num_layers: 3,
            num_heads: 4,
            ffn_mult: 4,
            mode: DecodeMode::Prompt,
            prior_prob: 0.01,
            seed: 1,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("decoder needs at least one query".into()));
        }
        if self.d == 0 || self.clip_dim == 0 || self.num_heads == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        if self.d % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "decoder width {} not divisible by {} heads",
                self.d, self.num_heads
            )));
        }
        if !(0.0 < self.prior_prob && self.prior_prob < 1.0) {
            return Err(Error::Config("prior_prob must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Projected class prompts, one row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    pub embeddings: Matrix,
    pub class_ids: Vec<usize>,
    pub modality: Vec<Modality>,
}

impl PromptSet {
    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows() == 0
    }

    /// Reorders prompts; `order[i]` is the old index of new prompt `i`.
    pub fn permuted(&self, order: &[usize]) -> PromptSet {
        PromptSet {
            embeddings: self.embeddings.select_rows(order),
            class_ids: order.iter().map(|&i| self.class_ids[i]).collect(),
            modality: order.iter().map(|&i| self.modality[i]).collect(),
        }
    }
}

/// Maps raw CLIP embeddings (`k × d′`) into the decoder width.
pub fn project_prompts(
    raw: &Matrix,
    class_ids: &[usize],
    modality: &[Modality],
    proj: &LinearLayer,
) -> Result<PromptSet> {
    if class_ids.len() != raw.rows() || modality.len() != raw.rows() {
        return Err(Error::input(format!(
            "{} prompt rows but {} class ids and {} modalities",
            raw.rows(),
            class_ids.len(),
            modality.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    if !class_ids.iter().all(|c| seen.insert(*c)) {
        return Err(Error::input("prompt class ids must be distinct"));
    }
    Ok(PromptSet {
        embeddings: proj.forward(raw)?,
        class_ids: class_ids.to_vec(),
        modality: modality.to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    pub queries: Matrix,
}

/// Boxes and per-class probabilities for `m` queries.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionOutput {
    /// Normalised `(cx, cy, w, h)`.
    pub boxes: Vec<[f64; 4]>,
    /// `m × k` independent per-class probabilities.
    pub probs: Matrix,
    pub object_embeddings: Matrix,
}

/// Output of the conditional baseline: one box and one binary score per
/// (class, query) pair, grouped by class.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalOutput {
    /// `k·m` boxes, class-major: entry `j·m + q` belongs to prompt `j`.
    pub boxes: Vec<[f64; 4]>,
    /// `k × m` binary scores.
    pub scores: Matrix,
    pub object_embeddings: Matrix,
}

/// `probs[i][j] = sigmoid(scale · ⟨proj(o_i), p_j⟩ + bias)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationHead {
    pub proj: LinearLayer,
    pub scale: f64,
    pub bias: f64,
}

impl ClassificationHead {
    pub fn logits(&self, object_embeddings: &Matrix, prompts: &Matrix) -> Result<Matrix> {
        let projected = self.proj.forward(object_embeddings)?;
        if projected.cols() != prompts.cols() {
            return Err(Error::dim(format!(
                "object projection width {} vs prompt width {}",
                projected.cols(),
                prompts.cols()
            )));
        }
        Ok(self.logits_from_projected(&projected, prompts))
    }

    fn logits_from_projected(&self, projected: &Matrix, prompts: &Matrix) -> Matrix {
        let mut logits = projected.matmul_t(prompts).expect("widths checked");
        for v in logits.data_mut() {
            *v = *v * self.scale + self.bias;
        }
        logits
    }

    pub fn probs(&self, object_embeddings: &Matrix, prompts: &Matrix) -> Result<Matrix> {
        Ok(self.logits(object_embeddings, prompts)?.map(sigmoid))
    }

    /// Backward through the head given `∂L/∂logits` and an extra gradient on
    /// the projected object embeddings. Returns `(∂L/∂objects, ∂L/∂prompts)`.
    pub(crate) fn backward(
        &self,
        objects: &Matrix,
        projected: &Matrix,
        prompts: &Matrix,
        dlogits: &Matrix,
        dprojected_extra: Option<&Matrix>,
        grad: &mut ClassificationHead,
    ) -> (Matrix, Matrix) {
        grad.bias += dlogits.data().iter().sum::<f64>();
        let mut scaled = dlogits.clone();
        scaled.scale(self.scale);
        let mut dproj = scaled.matmul(prompts).expect("shapes");
        if let Some(extra) = dprojected_extra {
            dproj.add_assign(extra);
        }
        let dprompts = scaled.transpose().matmul(projected).expect("shapes");
        let dobj = self.proj.backward(objects, &dproj, &mut grad.proj);
        (dobj, dprompts)
    }

    /// Vector-Jacobian product for `∂L/∂logits`: returns
    /// `(∂L/∂object_embeddings, ∂L/∂prompts, ∂L/∂head)`.
    pub fn vjp(
        &self,
        object_embeddings: &Matrix,
        prompts: &Matrix,
        dlogits: &Matrix,
    ) -> Result<(Matrix, Matrix, ClassificationHead)> {
        let logits = self.logits(object_embeddings, prompts)?;
        logits.check_same(dlogits, "classification upstream gradient")?;
        let projected = self.proj.apply(object_embeddings);
        let mut grad = crate::tensor::zeros_like(self);
        let (dobj, dprompts) = self.backward(
            object_embeddings,
            &projected,
            prompts,
            dlogits,
            None,
            &mut grad,
        );
        Ok((dobj, dprompts, grad))
    }
}

impl Parameters for ClassificationHead {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.proj.visit(f);
        f(std::slice::from_ref(&self.bias));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.proj.visit_mut(f);
        f(std::slice::from_mut(&mut self.bias));
    }
}

/// Classification head applied to object embeddings and a prompt set.
pub fn classification_head(
    object_embeddings: &Matrix,
    prompts: &PromptSet,
    head: &ClassificationHead,
) -> Result<Matrix> {
    head.probs(object_embeddings, &prompts.embeddings)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderLayer {
    pub self_attn: SelfAttnSublayer,
    pub cross_attn: CrossAttnSublayer,
    pub ffn: FfnSublayer,
}

impl Parameters for DecoderLayer {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.self_attn.visit(f);
        self.cross_attn.visit(f);
        self.ffn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.self_attn.visit_mut(f);
        self.cross_attn.visit_mut(f);
        self.ffn.visit_mut(f);
    }
}

struct LayerCache {
    self_attn: SelfAttnCache,
    cross_attn: CrossAttnCache,
    ffn: FfnCache,
}

/// Everything the backward pass needs from one prompt-mode forward.
pub(crate) struct DecoderCache {
    raw_prompts: Matrix,
    prompts: Matrix,
    memory_ln: LayerNormCache,
    memory_rows: usize,
    layers: Vec<LayerCache>,
    out_ln: LayerNormCache,
    objects: Matrix,
    box_mlp: MlpCache,
    projected: Matrix,
    pub(crate) logits: Matrix,
    pub(crate) boxes: Vec<[f64; 4]>,
}

impl DecoderCache {
    /// Projected object embeddings used by the embedding loss.
    pub(crate) fn projected(&self) -> &Matrix {
        &self.projected
    }

    pub(crate) fn prompts(&self) -> &Matrix {
        &self.prompts
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptDecoder {
    pub config: DecoderConfig,
    pub queries: Matrix,
    /// Per-query additive box offsets in logit space (`m × 4`).
    pub anchors: Matrix,
    pub prompt_proj: LinearLayer,
    pub memory_norm: LayerNorm,
    pub layers: Vec<DecoderLayer>,
    pub out_norm: LayerNorm,
    pub box_head: Mlp,
    pub cls_head: ClassificationHead,
}

impl PromptDecoder {
    pub fn new(config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d;
        let queries = {
            use rand::Rng;
            Matrix::from_vec(
                config.m,
                d,
                (0..config.m * d)
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect(),
            )?
        };
        let anchors = initial_anchors(config.m);
        let prompt_proj = LinearLayer::new(config.clip_dim, d, &mut rng);
        let layers = (0..config.num_layers)
            .map(|_| {
                Ok(DecoderLayer {
                    self_attn: SelfAttnSublayer::new(d, config.num_heads, &mut rng)?,
                    cross_attn: CrossAttnSublayer::new(d, config.num_heads, &mut rng)?,
                    ffn: FfnSublayer::new(d, d * config.ffn_mult, &mut rng),
                })
            })
            .collect::<Result<_>>()?;
        let mut box_head = Mlp::new(&[d, d, d, 4], &mut rng);
        box_head.layers[2].weight.scale(0.1);
        let cls_head = ClassificationHead {
            proj: LinearLayer::new(d, d, &mut rng),
            scale: 1.0 / (d as f64).sqrt(),
            bias: -((1.0 - config.prior_prob) / config.prior_prob).ln(),
        };
        Ok(PromptDecoder {
            config,
            queries,
            anchors,
            prompt_proj,
            memory_norm: LayerNorm::new(d),
            layers,
            out_norm: LayerNorm::new(d),
            box_head,
            cls_head,
        })
    }

    pub fn query_set(&self) -> QuerySet {
        QuerySet {
            queries: self.queries.clone(),
        }
    }

    /// Projects raw CLIP embeddings with this decoder's prompt projection.
    pub fn prompts(
        &self,
        raw: &Matrix,
        class_ids: &[usize],
        modality: &[Modality],
    ) -> Result<PromptSet> {
        project_prompts(raw, class_ids, modality, &self.prompt_proj)
    }

    fn check_inputs(
        &self,
        queries: &QuerySet,
        prompts: &PromptSet,
        memory: &PatchGrid,
    ) -> Result<()> {
        let d = self.config.d;
        if prompts.is_empty() {
            return Err(Error::input("prompt set is empty"));
        }
        if queries.queries.cols() != d
            || prompts.embeddings.cols() != d
            || memory.tokens.cols() != d
        {
            return Err(Error::dim(format!(
                "decoder width {d}: queries {}, prompts {}, memory {}",
                queries.queries.cols(),
                prompts.embeddings.cols(),
                memory.tokens.cols()
            )));
        }
        if queries.queries.rows() != self.config.m {
            return Err(Error::dim(format!(
                "{} queries for a decoder configured with m = {}",
                queries.queries.rows(),
                self.config.m
            )));
        }
        Ok(())
    }

    fn memory_inputs(&self, memory: &PatchGrid) -> (Matrix, Matrix, LayerNormCache) {
        let (values, cache) = self.memory_norm.forward(&memory.tokens);
        let mut keys = values.clone();
        keys.add_assign(&sincos_position_codes(
            memory.grid_h,
            memory.grid_w,
            self.config.d,
        ));
        (keys, values, cache)
    }

    fn boxes_from(&self, pre: &Matrix, anchor_rows: impl Fn(usize) -> usize) -> Vec<[f64; 4]> {
        (0..pre.rows())
            .map(|i| {
                let a = self.anchors.row(anchor_rows(i));
                let r = pre.row(i);
                [
                    sigmoid(r[0] + a[0]),
                    sigmoid(r[1] + a[1]),
                    sigmoid(r[2] + a[2]),
                    sigmoid(r[3] + a[3]),
                ]
            })
            .collect()
    }

    /// Prompt-based decoding: `m` class-agnostic queries, `m × k` probabilities.
    pub fn decode_prompt(
        &self,
        queries: &QuerySet,
        prompts: &PromptSet,
        memory: &PatchGrid,
    ) -> Result<DetectionOutput> {
        self.check_inputs(queries, prompts, memory)?;
        let (keys, values, _) = self.memory_inputs(memory);
        let p = &prompts.embeddings;
        let k = p.rows();
        let mut q = queries.queries.clone();
        for layer in &self.layers {
            let kv = Matrix::vstack(p, &q)?;
            let (q1, _) = layer.self_attn.forward(&q, &kv, None);
            // only the m query rows survive self-attention
            debug_assert_eq!(q1.rows(), self.config.m);
            let (q2, _) = layer.cross_attn.forward(&q1, &keys, &values);
            q = layer.ffn.forward(&q2).0;
        }
        let (objects, _) = self.out_norm.forward(&q);
        let (pre, _) = self.box_head.forward(&objects);
        let boxes = self.boxes_from(&pre, |i| i);
        let probs = self.cls_head.probs(&objects, p)?;
        debug_assert_eq!(probs.shape(), (self.config.m, k));
        Ok(DetectionOutput {
            boxes,
            probs,
            object_embeddings: objects,
        })
    }

    /// Conditional baseline: every query is duplicated per prompt (`query + prompt`),
    /// giving `k·m` decoded embeddings with one binary score each. Self-attention
    /// runs within each class group.
    pub fn decode_conditional(
        &self,
        queries: &QuerySet,
        prompts: &PromptSet,
        memory: &PatchGrid,
    ) -> Result<ConditionalOutput> {
        self.check_inputs(queries, prompts, memory)?;
        let (keys, values, _) = self.memory_inputs(memory);
        let (m, d) = (self.config.m, self.config.d);
        let k = prompts.len();
        let mut boxes = Vec::with_capacity(k * m);
        let mut scores = Matrix::zeros(k, m);
        let mut objects_all = Matrix::zeros(k * m, d);
        for j in 0..k {
            let prompt = prompts.embeddings.row(j);
            let mut q = queries.queries.clone();
            for r in 0..m {
                for (v, p) in q.row_mut(r).iter_mut().zip(prompt) {
                    *v += p;
                }
            }
            for layer in &self.layers {
                let (q1, _) = layer.self_attn.forward(&q, &q, None);
                let (q2, _) = layer.cross_attn.forward(&q1, &keys, &values);
                q = layer.ffn.forward(&q2).0;
            }
            let (objects, _) = self.out_norm.forward(&q);
            let (pre, _) = self.box_head.forward(&objects);
            boxes.extend(self.boxes_from(&pre, |i| i));
            let single = prompts.embeddings.slice_rows(j, 1);
            let probs = self.cls_head.probs(&objects, &single)?;
            for r in 0..m {
                scores.set(j, r, probs.get(r, 0));
            }
            objects_all.data_mut()[j * m * d..(j + 1) * m * d].copy_from_slice(objects.data());
        }
        Ok(ConditionalOutput {
            boxes,
            scores,
            object_embeddings: objects_all,
        })
    }

    /// Prompt-mode forward keeping every activation for the backward pass.
    pub(crate) fn forward_train(
        &self,
        raw_prompts: &Matrix,
        memory: &PatchGrid,
    ) -> Result<DecoderCache> {
        if raw_prompts.rows() == 0 {
            return Err(Error::input("prompt set is empty"));
        }
        let prompts = self.prompt_proj.forward(raw_prompts)?;
        if memory.tokens.cols() != self.config.d {
            return Err(Error::dim("memory width"));
        }
        let (keys, values, memory_ln) = self.memory_inputs(memory);
        let mut q = self.queries.clone();
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let kv = Matrix::vstack(&prompts, &q)?;
            let (q1, self_attn) = layer.self_attn.forward(&q, &kv, None);
            let (q2, cross_attn) = layer.cross_attn.forward(&q1, &keys, &values);
            let (q3, ffn) = layer.ffn.forward(&q2);
            layers.push(LayerCache {
                self_attn,
                cross_attn,
                ffn,
            });
            q = q3;
        }
        let (objects, out_ln) = self.out_norm.forward(&q);
        let (pre, box_mlp) = self.box_head.forward(&objects);
        let boxes = self.boxes_from(&pre, |i| i);
        let projected = self.cls_head.proj.apply(&objects);
        let logits = self.cls_head.logits_from_projected(&projected, &prompts);
        Ok(DecoderCache {
            raw_prompts: raw_prompts.clone(),
            prompts,
            memory_ln,
            memory_rows: memory.tokens.rows(),
            layers,
            out_ln,
            objects,
            box_mlp,
            projected,
            logits,
            boxes,
        })
    }

    /// Backward from gradients on the sigmoid box outputs (`m × 4`), the class
    /// logits (`m × k`) and the projected object embeddings (`m × d`).
    /// Returns `∂L/∂memory`.
    pub(crate) fn backward(
        &self,
        cache: &DecoderCache,
        dboxes: &Matrix,
        dlogits: &Matrix,
        dprojected: Option<&Matrix>,
        grad: &mut PromptDecoder,
    ) -> Matrix {
        let (m, d) = (self.config.m, self.config.d);
        let k = cache.prompts.rows();
        // sigmoid outputs back to pre-activations; anchors share that gradient
        let mut dpre = Matrix::zeros(m, 4);
        for i in 0..m {
            for c in 0..4 {
                let s = cache.boxes[i][c];
                let g = dboxes.get(i, c) * s * (1.0 - s);
                dpre.set(i, c, g);
                grad.anchors.data_mut()[i * 4 + c] += g;
            }
        }
        let mut dobjects = self
            .box_head
            .backward(&cache.box_mlp, &dpre, &mut grad.box_head);
        let (dobj_cls, mut dprompts) = self.cls_head.backward(
            &cache.objects,
            &cache.projected,
            &cache.prompts,
            dlogits,
            dprojected,
            &mut grad.cls_head,
        );
        dobjects.add_assign(&dobj_cls);
        let mut dq = self
            .out_norm
            .backward(&cache.out_ln, &dobjects, &mut grad.out_norm);
        let mut dkeys_values = Matrix::zeros(cache.memory_rows, d);
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let lc = &cache.layers[i];
            let g = &mut grad.layers[i];
            let dq2 = layer.ffn.backward(&lc.ffn, &dq, &mut g.ffn);
            let (dq1, dmem) = layer
                .cross_attn
                .backward(&lc.cross_attn, &dq2, &mut g.cross_attn);
            dkeys_values.add_assign(&dmem);
            let (mut dq0, dkv) = layer
                .self_attn
                .backward(&lc.self_attn, &dq1, &mut g.self_attn);
            for r in 0..k {
                for (a, b) in dprompts.row_mut(r).iter_mut().zip(dkv.row(r)) {
                    *a += b;
                }
            }
            for r in 0..m {
                for (a, b) in dq0.row_mut(r).iter_mut().zip(dkv.row(k + r)) {
                    *a += b;
                }
            }
            dq = dq0;
        }
        grad.queries.add_assign(&dq);
        self.prompt_proj
            .backward(&cache.raw_prompts, &dprompts, &mut grad.prompt_proj);
        self.memory_norm
            .backward(&cache.memory_ln, &dkeys_values, &mut grad.memory_norm)
    }
}

/// Anchor offsets spread the initial box centres over a grid.
fn initial_anchors(m: usize) -> Matrix {
    let cols = (m as f64).sqrt().ceil() as usize;
    let rows = m.div_ceil(cols);
    let mut a = Matrix::zeros(m, 4);
    for i in 0..m {
        let (r, c) = (i / cols, i % cols);
        let cx = (c as f64 + 0.5) / cols as f64;
        let cy = (r as f64 + 0.5) / rows as f64;
        a.row_mut(i).copy_from_slice(&[
            inverse_sigmoid(cx),
            inverse_sigmoid(cy),
            inverse_sigmoid(0.2),
            inverse_sigmoid(0.2),
        ]);
    }
    a
}

impl Parameters for PromptDecoder {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.queries.data());
        f(self.anchors.data());
        self.prompt_proj.visit(f);
        self.memory_norm.visit(f);
        self.layers.iter().for_each(|l| l.visit(f));
        self.out_norm.visit(f);
        self.box_head.visit(f);
        self.cls_head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.queries.data_mut());
        f(self.anchors.data_mut());
        self.prompt_proj.visit_mut(f);
        self.memory_norm.visit_mut(f);
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
        self.out_norm.visit_mut(f);
        self.box_head.visit_mut(f);
        self.cls_head.visit_mut(f);
    }
}
