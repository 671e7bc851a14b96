//! CLIP-lite: a small dual encoder with compositional text embeddings, a
//! class-token ViT image tower, and RoI-masked attention that scores many
//! regions of one image in a single pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{flatten_patches, sincos_position_codes, ImageSample};
use crate::error::{Error, Result};
use crate::tensor::{
    dot, l2_normalize, softmax_in_place, BlockCache, LayerNorm, LayerNormCache, LinearLayer,
    Matrix, Parameters, TransformerBlock,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipConfig {
    /// Side length images are resized to before encoding.
    pub image_size: usize,
    pub patch_size: usize,
    /// Embedding width d′.
    pub d: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_mult: usize,
    /// Softmax temperature τ for CLIP class probabilities.
    pub temperature: f64,
    /// 1-based layer at which the class token attends under RoI masks.
    pub masked_attention_layer: usize,
    /// Additive logit penalty for patches outside a RoI.
    pub penalty: f64,
    pub seed: u64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig {
            image_size: 64,
            patch_size: 8,
            d: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_mult: 4,
            temperature: 0.01,
            masked_attention_layer: 2,
            penalty: -100.0,
            seed: 7,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "clip image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_layers == 0
            || self.d == 0
            || self.num_heads == 0
            || self.d % self.num_heads != 0
        {
            return Err(Error::Config(
                "clip needs ≥1 layer and a width divisible by its heads".into(),
            ));
        }
        if self.d % 4 != 0 {
            return Err(Error::Config("clip width must be a multiple of 4".into()));
        }
        if !(1..=self.num_layers).contains(&self.masked_attention_layer) {
            return Err(Error::Config(format!(
                "masked_attention_layer {} outside 1..={}",
                self.masked_attention_layer, self.num_layers
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("clip temperature must be positive".into()));
        }
        if !(self.penalty <= 0.0) {
            return Err(Error::Config("mask penalty must be non-positive".into()));
        }
        Ok(())
    }
}

/// Text tower: a class name is embedded as the normalised sum of its
/// tokens' attribute vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextComposer {
    pub tokens: Vec<String>,
    pub vectors: Matrix,
}

impl TextComposer {
    pub fn new<R: Rng + ?Sized>(tokens: Vec<String>, d: usize, rng: &mut R) -> Self {
        let vectors = Matrix::from_vec(
            tokens.len(),
            d,
            (0..tokens.len() * d)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )
        .expect("sized");
        TextComposer { tokens, vectors }
    }

    pub fn token_ids(&self, class_name: &str) -> Result<Vec<usize>> {
        let ids: Vec<usize> = class_name
            .split_whitespace()
            .map(|t| {
                self.tokens
                    .iter()
                    .position(|v| v == t)
                    .ok_or_else(|| Error::Vocabulary(t.to_string()))
            })
            .collect::<Result<_>>()?;
        if ids.is_empty() {
            return Err(Error::Vocabulary(class_name.to_string()));
        }
        Ok(ids)
    }

    /// Un-normalised sum of token vectors.
    pub(crate) fn raw(&self, ids: &[usize]) -> Vec<f64> {
        let mut v = vec![0.0; self.vectors.cols()];
        for &i in ids {
            for (a, b) in v.iter_mut().zip(self.vectors.row(i)) {
                *a += b;
            }
        }
        v
    }
}

impl Parameters for TextComposer {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.vectors.data());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.vectors.data_mut());
    }
}

/// Image tower: patch embedding, a learned class token, Transformer blocks,
/// and a projection of the final class-token state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipImageEncoder {
    pub patch_embed: LinearLayer,
    pub class_token: Vec<f64>,
    pub blocks: Vec<TransformerBlock>,
    pub final_norm: LayerNorm,
    pub proj: LinearLayer,
}

impl Parameters for ClipImageEncoder {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.patch_embed.visit(f);
        f(&self.class_token);
        self.blocks.iter().for_each(|b| b.visit(f));
        self.final_norm.visit(f);
        self.proj.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.patch_embed.visit_mut(f);
        f(&mut self.class_token);
        self.blocks.iter_mut().for_each(|b| b.visit_mut(f));
        self.final_norm.visit_mut(f);
        self.proj.visit_mut(f);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipModel {
    pub config: ClipConfig,
    pub text: TextComposer,
    pub image: ClipImageEncoder,
}

impl Parameters for ClipModel {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.text.visit(f);
        self.image.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.text.visit_mut(f);
        self.image.visit_mut(f);
    }
}

/// Additive attention masks over a patch grid, one row per RoI.
#[derive(Clone, Debug, PartialEq)]
pub struct RoIMaskSet {
    pub masks: Matrix,
    pub penalty: f64,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl RoIMaskSet {
    pub fn len(&self) -> usize {
        self.masks.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.rows() == 0
    }

    /// Patch cells left unmasked for RoI `i`.
    pub fn zero_cells(&self, i: usize) -> Vec<usize> {
        self.masks
            .row(i)
            .iter()
            .enumerate()
            .filter(|(_, v)| **v == 0.0)
            .map(|(c, _)| c)
            .collect()
    }
}

/// Softmax class probabilities of RoI embeddings against class text embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipProbMatrix {
    pub probs: Matrix,
}

/// Rasterises normalised `cxcywh` boxes onto a `grid_h × grid_w` patch grid.
///
/// A cell is kept (`0`) iff its rectangle overlaps the clamped box with
/// positive area; every other cell gets `penalty`. A box that clamps to zero
/// width or height keeps only the cell containing its centre.
pub fn build_roi_masks(
    boxes: &[[f64; 4]],
    grid_h: usize,
    grid_w: usize,
    penalty: f64,
) -> Result<RoIMaskSet> {
    if boxes.is_empty() {
        return Err(Error::input("no RoIs to build masks for"));
    }
    if grid_h == 0 || grid_w == 0 {
        return Err(Error::input("empty patch grid"));
    }
    let mut masks = Matrix::filled(boxes.len(), grid_h * grid_w, penalty);
    for (i, b) in boxes.iter().enumerate() {
        let x1 = (b[0] - 0.5 * b[2]).clamp(0.0, 1.0);
        let x2 = (b[0] + 0.5 * b[2]).clamp(0.0, 1.0);
        let y1 = (b[1] - 0.5 * b[3]).clamp(0.0, 1.0);
        let y2 = (b[1] + 0.5 * b[3]).clamp(0.0, 1.0);
        let row = masks.row_mut(i);
        if x2 <= x1 || y2 <= y1 {
            let c = ((b[0].clamp(0.0, 1.0) * grid_w as f64) as usize).min(grid_w - 1);
            let r = ((b[1].clamp(0.0, 1.0) * grid_h as f64) as usize).min(grid_h - 1);
            row[r * grid_w + c] = 0.0;
            continue;
        }
        for r in 0..grid_h {
            let (cy1, cy2) = (r as f64 / grid_h as f64, (r + 1) as f64 / grid_h as f64);
            let oy = y2.min(cy2) - y1.max(cy1);
            if oy <= 0.0 {
                continue;
            }
            for c in 0..grid_w {
                let (cx1, cx2) = (c as f64 / grid_w as f64, (c + 1) as f64 / grid_w as f64);
                let ox = x2.min(cx2) - x1.max(cx1);
                if ox > 0.0 {
                    row[r * grid_w + c] = 0.0;
                }
            }
        }
    }
    Ok(RoIMaskSet {
        masks,
        penalty,
        grid_h,
        grid_w,
    })
}

/// `row i = softmax(cos(e_i, t_·) / τ)`.
pub fn clip_probs(
    roi_embeddings: &Matrix,
    text_embeddings: &Matrix,
    temperature: f64,
) -> Result<ClipProbMatrix> {
    if !(temperature > 0.0) {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if roi_embeddings.cols() != text_embeddings.cols() {
        return Err(Error::dim(format!(
            "roi width {} vs text width {}",
            roi_embeddings.cols(),
            text_embeddings.cols()
        )));
    }
    let norms = |m: &Matrix| -> Vec<f64> {
        m.row_iter()
            .map(|r| dot(r, r).sqrt().max(f64::MIN_POSITIVE))
            .collect()
    };
    let (rn, tn) = (norms(roi_embeddings), norms(text_embeddings));
    let mut probs = roi_embeddings.matmul_t(text_embeddings)?;
    for i in 0..probs.rows() {
        let row = probs.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v /= rn[i] * tn[j] * temperature;
        }
        softmax_in_place(row);
    }
    Ok(ClipProbMatrix { probs })
}

pub(crate) struct ClipImageCache {
    pub(crate) embedding: Vec<f64>,
    flat: Matrix,
    blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
    normed_cls: Matrix,
    raw_norm: f64,
}

impl ClipModel {
    /// A freshly initialised model over the given text tokens.
    pub fn new(config: ClipConfig, tokens: Vec<String>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d;
        let text = TextComposer::new(tokens, d, &mut rng);
        let in_dim = config.patch_size * config.patch_size * 3;
        let patch_embed = LinearLayer::new(in_dim, d, &mut rng);
        let class_token = (0..d).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let blocks = (0..config.num_layers)
            .map(|_| TransformerBlock::new(d, config.num_heads, config.ffn_mult, &mut rng))
            .collect::<Result<_>>()?;
        let proj = LinearLayer::new(d, d, &mut rng);
        Ok(ClipModel {
            config,
            text,
            image: ClipImageEncoder {
                patch_embed,
                class_token,
                blocks,
                final_norm: LayerNorm::new(d),
                proj,
            },
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.config.image_size / self.config.patch_size;
        (g, g)
    }

    /// Unit-norm text embedding of a class name.
    pub fn encode_text(&self, class_name: &str) -> Result<Vec<f64>> {
        let ids = self.text.token_ids(class_name)?;
        Ok(l2_normalize(&self.text.raw(&ids)))
    }

    /// Text embeddings for several class names, one row each.
    pub fn encode_texts<S: AsRef<str>>(&self, names: &[S]) -> Result<Matrix> {
        let rows = names
            .iter()
            .map(|n| self.encode_text(n.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, self.config.d));
        }
        Matrix::from_rows(&rows)
    }

    fn check_image(&self, image: &ImageSample) -> Result<()> {
        let s = self.config.image_size;
        if image.width() != s || image.height() != s || image.channels() != 3 {
            return Err(Error::dim(format!(
                "clip expects {s}x{s}x3 images, got {}x{}x{}",
                image.width(),
                image.height(),
                image.channels()
            )));
        }
        Ok(())
    }

    /// `[class token; patch tokens + position codes]`.
    fn input_tokens(&self, image: &ImageSample) -> Result<(Matrix, Matrix)> {
        let (flat, gh, gw) = flatten_patches(image, self.config.patch_size)?;
        let mut patches = self.image.patch_embed.forward(&flat)?;
        patches.add_assign(&sincos_position_codes(gh, gw, self.config.d));
        let cls = Matrix::from_vec(1, self.config.d, self.image.class_token.clone())?;
        Ok((Matrix::vstack(&cls, &patches)?, flat))
    }

    /// Final norm, projection and L2 normalisation of class-token rows.
    fn project_rows(&self, cls_rows: &Matrix) -> Matrix {
        let (normed, _) = self.image.final_norm.forward(cls_rows);
        let mut out = self.image.proj.apply(&normed);
        for r in 0..out.rows() {
            let n = l2_normalize(out.row(r));
            out.row_mut(r).copy_from_slice(&n);
        }
        out
    }

    /// Unit-norm image embedding from an unmasked forward pass.
    pub fn encode_image(&self, image: &ImageSample) -> Result<Vec<f64>> {
        self.check_image(image)?;
        let (mut x, _) = self.input_tokens(image)?;
        for block in &self.image.blocks {
            x = block.forward(&x, None).0;
        }
        Ok(self.project_rows(&x.slice_rows(0, 1)).row(0).to_vec())
    }

    /// Full-sequence additive mask with one RoI applied to the class-token row.
    fn class_row_mask(&self, roi_mask: &[f64]) -> Matrix {
        let n = roi_mask.len() + 1;
        let mut mask = Matrix::zeros(n, n);
        mask.row_mut(0)[1..].copy_from_slice(roi_mask);
        mask
    }

    /// Reference path: one complete forward pass per RoI, with the RoI mask
    /// applied to the class-token row at the masked layer.
    pub fn encode_image_roi_single(
        &self,
        image: &ImageSample,
        roi_mask: &[f64],
    ) -> Result<Vec<f64>> {
        self.check_image(image)?;
        let (mut x, _) = self.input_tokens(image)?;
        if roi_mask.len() + 1 != x.rows() {
            return Err(Error::dim("RoI mask does not match the patch grid"));
        }
        let mask = self.class_row_mask(roi_mask);
        for (i, block) in self.image.blocks.iter().enumerate() {
            let m = (i + 1 == self.config.masked_attention_layer).then_some(&mask);
            x = block.forward(&x, m).0;
        }
        Ok(self.project_rows(&x.slice_rows(0, 1)).row(0).to_vec())
    }

    /// Embeds every RoI of one image in a single pass.
    ///
    /// Layers before the masked layer run once on the shared sequence. At the
    /// masked layer the class token is replicated per RoI and attends under that
    /// RoI's mask (its own key position always unmasked). If layers remain,
    /// each RoI continues with its own class token over the shared patch states.
    pub fn encode_image_rois(&self, image: &ImageSample, boxes: &[[f64; 4]]) -> Result<Matrix> {
        let (gh, gw) = self.grid();
        let masks = build_roi_masks(boxes, gh, gw, self.config.penalty)?;
        self.encode_image_masks(image, &masks)
    }

    /// [`Self::encode_image_rois`] with precomputed masks.
    pub fn encode_image_masks(&self, image: &ImageSample, masks: &RoIMaskSet) -> Result<Matrix> {
        self.check_image(image)?;
        if masks.is_empty() {
            return Err(Error::input("no RoIs to encode"));
        }
        let (mut x, _) = self.input_tokens(image)?;
        let n = x.rows();
        if masks.masks.cols() + 1 != n {
            return Err(Error::dim(format!(
                "masks cover {} cells, image has {} patches",
                masks.masks.cols(),
                n - 1
            )));
        }
        let j = self.config.masked_attention_layer;
        for block in &self.image.blocks[..j - 1] {
            x = block.forward(&x, None).0;
        }
        let m = masks.len();
        let mut cls = Matrix::zeros(m, self.config.d);
        for r in 0..m {
            cls.row_mut(r).copy_from_slice(x.row(0));
        }
        let mut mask = Matrix::zeros(m, n);
        for r in 0..m {
            mask.row_mut(r)[1..].copy_from_slice(masks.masks.row(r));
        }
        let block = &self.image.blocks[j - 1];
        let (cls_out, _) = block.forward_rows(&cls, &x, Some(&mask));
        if j == self.config.num_layers {
            return Ok(self.project_rows(&cls_out));
        }
        // later layers see RoI-specific class tokens, so each RoI continues alone
        let patches_out = block.forward_rows(&x.slice_rows(1, n - 1), &x, None).0;
        let mut finals = Matrix::zeros(m, self.config.d);
        for r in 0..m {
            let mut seq = Matrix::vstack(&cls_out.slice_rows(r, 1), &patches_out)?;
            for block in &self.image.blocks[j..] {
                seq = block.forward(&seq, None).0;
            }
            finals.row_mut(r).copy_from_slice(seq.row(0));
        }
        Ok(self.project_rows(&finals))
    }

    /// Crops the box out of the image, resizes it to the model input size and
    /// encodes it as a separate image.
    pub fn naive_crop_embed(&self, image: &ImageSample, b: [f64; 4]) -> Result<Vec<f64>> {
        let (w, h) = (image.width() as f64, image.height() as f64);
        let x0 = ((b[0] - 0.5 * b[2]).clamp(0.0, 1.0) * w).floor() as usize;
        let x1 = ((b[0] + 0.5 * b[2]).clamp(0.0, 1.0) * w).ceil() as usize;
        let y0 = ((b[1] - 0.5 * b[3]).clamp(0.0, 1.0) * h).floor() as usize;
        let y1 = ((b[1] + 0.5 * b[3]).clamp(0.0, 1.0) * h).ceil() as usize;
        let s = self.config.image_size;
        let crop =
            image.crop_resize(x0, y0, x1.min(image.width()), y1.min(image.height()), s, s)?;
        self.encode_image(&crop)
    }

    /// Forward keeping activations; `roi_mask` (over patch cells) restricts the
    /// class token at the masked layer.
    pub(crate) fn image_forward_train(
        &self,
        image: &ImageSample,
        roi_mask: Option<&[f64]>,
    ) -> Result<ClipImageCache> {
        self.check_image(image)?;
        let (mut x, flat) = self.input_tokens(image)?;
        let mask = roi_mask.map(|m| self.class_row_mask(m));
        let mut blocks = Vec::with_capacity(self.image.blocks.len());
        for (i, block) in self.image.blocks.iter().enumerate() {
            let m = mask
                .as_ref()
                .filter(|_| i + 1 == self.config.masked_attention_layer);
            let (y, c) = block.forward(&x, m);
            blocks.push(c);
            x = y;
        }
        let (normed, final_ln) = self.image.final_norm.forward(&x.slice_rows(0, 1));
        let raw = self.image.proj.apply(&normed);
        let raw_norm = dot(raw.row(0), raw.row(0)).sqrt();
        let embedding = l2_normalize(raw.row(0));
        Ok(ClipImageCache {
            flat,
            blocks,
            final_ln,
            normed_cls: normed,
            embedding,
            raw_norm,
        })
    }

    /// Backward from `∂L/∂embedding` (unit-norm output) into `grad`.
    pub(crate) fn image_backward(
        &self,
        cache: &ClipImageCache,
        d_embedding: &[f64],
        grad: &mut ClipModel,
    ) {
        let d = self.config.d;
        let y = &cache.embedding;
        let inner = dot(y, d_embedding);
        let draw: Vec<f64> = d_embedding
            .iter()
            .zip(y)
            .map(|(g, yv)| (g - yv * inner) / cache.raw_norm)
            .collect();
        let draw = Matrix::from_vec(1, d, draw).expect("sized");
        let dnormed = self
            .image
            .proj
            .backward(&cache.normed_cls, &draw, &mut grad.image.proj);
        let dcls =
            self.image
                .final_norm
                .backward(&cache.final_ln, &dnormed, &mut grad.image.final_norm);
        let n = cache.flat.rows() + 1;
        let mut dx = Matrix::zeros(n, d);
        dx.row_mut(0).copy_from_slice(dcls.row(0));
        for (i, block) in self.image.blocks.iter().enumerate().rev() {
            let (mut dq, dkv) = block.backward(&cache.blocks[i], &dx, &mut grad.image.blocks[i]);
            dq.add_assign(&dkv);
            dx = dq;
        }
        for (g, v) in grad.image.class_token.iter_mut().zip(dx.row(0)) {
            *g += v;
        }
        let dpatches = dx.slice_rows(1, n - 1);
        self.image
            .patch_embed
            .backward(&cache.flat, &dpatches, &mut grad.image.patch_embed);
    }
}
