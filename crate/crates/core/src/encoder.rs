//! ViT-lite image encoder producing patch tokens for the detector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BlockCache, LinearLayer, Matrix, Parameters, TransformerBlock};

/// An RGB image with values in `[0, 1]`, stored row-major as `H × W × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub image_id: u64,
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl ImageSample {
    pub fn new(
        image_id: u64,
        width: usize,
        height: usize,
        channels: usize,
        pixels: Vec<f64>,
    ) -> Result<Self> {
        if pixels.len() != width * height * channels {
            return Err(Error::input(format!(
                "{} pixel values for a {width}x{height}x{channels} image",
                pixels.len()
            )));
        }
        Ok(ImageSample {
            image_id,
            width,
            height,
            channels,
            pixels,
        })
    }

    /// A uniform image.
    pub fn filled(image_id: u64, width: usize, height: usize, value: f64) -> Self {
        ImageSample {
            image_id,
            width,
            height,
            channels: 3,
            pixels: vec![value; width * height * 3],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Crops the pixel rectangle `[x0, x1) × [y0, y1)` and resizes it with
    /// nearest-neighbour sampling.
    pub fn crop_resize(
        &self,
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
        out_w: usize,
        out_h: usize,
    ) -> Result<ImageSample> {
        if x1 <= x0 || y1 <= y0 || x1 > self.width || y1 > self.height {
            return Err(Error::input(format!(
                "empty or out-of-bounds crop [{x0},{x1})x[{y0},{y1}) of {}x{}",
                self.width, self.height
            )));
        }
        let (cw, ch) = (x1 - x0, y1 - y0);
        let mut pixels = Vec::with_capacity(out_w * out_h * self.channels);
        for oy in 0..out_h {
            let sy = y0 + (oy * ch) / out_h;
            for ox in 0..out_w {
                let sx = x0 + (ox * cw) / out_w;
                for c in 0..self.channels {
                    pixels.push(self.get(sx, sy, c));
                }
            }
        }
        ImageSample::new(self.image_id, out_w, out_h, self.channels, pixels)
    }
}

/// Patch tokens laid out on a `grid_h × grid_w` grid (row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub tokens: Matrix,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub d: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_mult: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch_size: 8,
            d: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_mult: 4,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.d == 0 || self.num_heads == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.d % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "encoder width {} not divisible by {} heads",
                self.d, self.num_heads
            )));
        }
        if self.d % 4 != 0 {
            return Err(Error::Config(format!(
                "encoder width {} must be a multiple of 4 for 2-D position codes",
                self.d
            )));
        }
        Ok(())
    }
}

/// Flattens each `ps × ps` patch into one row of length `ps·ps·C`.
pub fn flatten_patches(image: &ImageSample, patch_size: usize) -> Result<(Matrix, usize, usize)> {
    if patch_size == 0 || image.width() % patch_size != 0 || image.height() % patch_size != 0 {
        return Err(Error::input(format!(
            "image {}x{} is not divisible into {patch_size}px patches",
            image.width(),
            image.height()
        )));
    }
    let (gh, gw) = (image.height() / patch_size, image.width() / patch_size);
    let c = image.channels();
    let width = patch_size * patch_size * c;
    let mut out = Matrix::zeros(gh * gw, width);
    for py in 0..gh {
        for px in 0..gw {
            let row = out.row_mut(py * gw + px);
            let mut at = 0;
            for y in 0..patch_size {
                for x in 0..patch_size {
                    for ch in 0..c {
                        row[at] = image.get(px * patch_size + x, py * patch_size + y, ch);
                        at += 1;
                    }
                }
            }
        }
    }
    Ok((out, gh, gw))
}

/// Fixed 2-D sine/cosine position codes: the first half of the width encodes
/// the row, the second half the column.
pub fn sincos_position_codes(grid_h: usize, grid_w: usize, d: usize) -> Matrix {
    let quarter = d / 4;
    let mut out = Matrix::zeros(grid_h * grid_w, d);
    for y in 0..grid_h {
        for x in 0..grid_w {
            let row = out.row_mut(y * grid_w + x);
            for i in 0..quarter {
                let freq = 1.0 / 10_000f64.powf(i as f64 / quarter.max(1) as f64);
                row[2 * i] = (y as f64 * freq).sin();
                row[2 * i + 1] = (y as f64 * freq).cos();
                row[d / 2 + 2 * i] = (x as f64 * freq).sin();
                row[d / 2 + 2 * i + 1] = (x as f64 * freq).cos();
            }
        }
    }
    out
}

/// Patch embedding plus a stack of pre-norm Transformer blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoder {
    pub config: EncoderConfig,
    pub patch_embed: LinearLayer,
    pub blocks: Vec<TransformerBlock>,
}

pub(crate) struct EncoderCache {
    flat: Matrix,
    blocks: Vec<BlockCache>,
}

impl ImageEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let in_dim = config.patch_size * config.patch_size * 3;
        let patch_embed = LinearLayer::new(in_dim, config.d, &mut rng);
        let blocks = (0..config.num_layers)
            .map(|_| TransformerBlock::new(config.d, config.num_heads, config.ffn_mult, &mut rng))
            .collect::<Result<_>>()?;
        Ok(ImageEncoder {
            config,
            patch_embed,
            blocks,
        })
    }

    /// Copies patch embedding and block weights from another tower of the
    /// same geometry (for example a pretrained CLIP image encoder).
    pub fn load_tower(
        &mut self,
        patch_embed: &LinearLayer,
        blocks: &[TransformerBlock],
    ) -> Result<()> {
        let same = |a: &Matrix, b: &Matrix| a.rows() == b.rows() && a.cols() == b.cols();
        if !same(&self.patch_embed.weight, &patch_embed.weight) || blocks.len() != self.blocks.len()
        {
            return Err(Error::dim(format!(
                "encoder has {} blocks over a {}x{} patch embedding; source has {} over {}x{}",
                self.blocks.len(),
                self.patch_embed.weight.rows(),
                self.patch_embed.weight.cols(),
                blocks.len(),
                patch_embed.weight.rows(),
                patch_embed.weight.cols()
            )));
        }
        let mut next = self.clone();
        next.patch_embed = patch_embed.clone();
        next.blocks = blocks.to_vec();
        if next.num_params() != self.num_params() {
            return Err(Error::dim(
                "source blocks differ in width or feed-forward size",
            ));
        }
        *self = next;
        Ok(())
    }

    /// Projects each patch and adds its position code.
    pub fn patchify(&self, image: &ImageSample) -> Result<PatchGrid> {
        let (flat, gh, gw) = flatten_patches(image, self.config.patch_size)?;
        let mut tokens = self.patch_embed.forward(&flat)?;
        tokens.add_assign(&sincos_position_codes(gh, gw, self.config.d));
        Ok(PatchGrid {
            tokens,
            grid_h: gh,
            grid_w: gw,
        })
    }

    /// Runs the Transformer blocks; shape is preserved.
    pub fn encode(&self, patches: &PatchGrid) -> Result<PatchGrid> {
        if patches.tokens.cols() != self.config.d {
            return Err(Error::dim(format!(
                "encoder width {}, tokens have {}",
                self.config.d,
                patches.tokens.cols()
            )));
        }
        let mut x = patches.tokens.clone();
        for block in &self.blocks {
            x = block.forward(&x, None).0;
        }
        Ok(PatchGrid {
            tokens: x,
            grid_h: patches.grid_h,
            grid_w: patches.grid_w,
        })
    }

    pub fn forward(&self, image: &ImageSample) -> Result<PatchGrid> {
        self.encode(&self.patchify(image)?)
    }

    pub(crate) fn forward_train(&self, image: &ImageSample) -> Result<(PatchGrid, EncoderCache)> {
        let (flat, gh, gw) = flatten_patches(image, self.config.patch_size)?;
        let mut x = self.patch_embed.forward(&flat)?;
        x.add_assign(&sincos_position_codes(gh, gw, self.config.d));
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(&x, None);
            caches.push(c);
            x = y;
        }
        Ok((
            PatchGrid {
                tokens: x,
                grid_h: gh,
                grid_w: gw,
            },
            EncoderCache {
                flat,
                blocks: caches,
            },
        ))
    }

    pub(crate) fn backward(
        &self,
        cache: &EncoderCache,
        d_tokens: &Matrix,
        grad: &mut ImageEncoder,
    ) {
        let mut d = d_tokens.clone();
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let (mut dq, dkv) = block.backward(&cache.blocks[i], &d, &mut grad.blocks[i]);
            dq.add_assign(&dkv);
            d = dq;
        }
        self.patch_embed
            .backward(&cache.flat, &d, &mut grad.patch_embed);
    }
}

impl Parameters for ImageEncoder {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.patch_embed.visit(f);
        self.blocks.iter().for_each(|b| b.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.patch_embed.visit_mut(f);
        self.blocks.iter_mut().for_each(|b| b.visit_mut(f));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(seed: u64, w: usize, h: usize) -> ImageSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageSample::new(seed, w, h, 3, (0..w * h * 3).map(|_| rng.gen()).collect()).unwrap()
    }

    fn small_config(layers: usize) -> EncoderConfig {
        EncoderConfig {
            patch_size: 8,
            d: 16,
            num_layers: layers,
            num_heads: 2,
            ffn_mult: 2,
            seed: 3,
        }
    }

    #[test]
    fn patch_counts() {
        let enc = ImageEncoder::new(small_config(1)).unwrap();
        let g = enc.patchify(&random_image(0, 16, 16)).unwrap();
        assert_eq!((g.grid_h, g.grid_w, g.len()), (2, 2, 4));
        let g = enc.patchify(&random_image(1, 64, 64)).unwrap();
        assert_eq!(g.len(), 64);
        assert!(enc.patchify(&random_image(2, 20, 16)).is_err());
    }

    #[test]
    fn one_changed_patch_changes_one_row() {
        let enc = ImageEncoder::new(small_config(1)).unwrap();
        let a = random_image(4, 32, 32);
        let mut b = a.clone();
        // patch (1, 2): x in 16..24, y in 8..16
        for y in 8..16 {
            for x in 16..24 {
                for c in 0..3 {
                    let i = (y * 32 + x) * 3 + c;
                    b.pixels_mut()[i] = 1.0 - b.pixels()[i];
                }
            }
        }
        let (fa, _, _) = flatten_patches(&a, 8).unwrap();
        let (fb, _, _) = flatten_patches(&b, 8).unwrap();
        let ta = enc.patch_embed.forward(&fa).unwrap();
        let tb = enc.patch_embed.forward(&fb).unwrap();
        let differing: Vec<usize> = (0..ta.rows()).filter(|&r| ta.row(r) != tb.row(r)).collect();
        assert_eq!(differing, vec![4 + 2]);
    }

    #[test]
    fn zero_layers_is_identity() {
        let enc = ImageEncoder::new(small_config(0)).unwrap();
        let g = enc.patchify(&random_image(5, 16, 16)).unwrap();
        assert_eq!(enc.encode(&g).unwrap(), g);
    }

    #[test]
    fn shape_preserved_and_deterministic() {
        for layers in [1, 3] {
            let enc = ImageEncoder::new(small_config(layers)).unwrap();
            let img = random_image(6, 24, 16);
            let g = enc.patchify(&img).unwrap();
            let out = enc.encode(&g).unwrap();
            assert_eq!(out.tokens.shape(), g.tokens.shape());
            let again = ImageEncoder::new(small_config(layers))
                .unwrap()
                .forward(&img)
                .unwrap();
            assert_eq!(out.tokens.data(), again.tokens.data());
        }
    }

    #[test]
    fn position_codes_make_order_matter() {
        let enc = ImageEncoder::new(small_config(2)).unwrap();
        let img = random_image(7, 16, 16);
        let (flat, gh, gw) = flatten_patches(&img, 8).unwrap();
        let perm = [2usize, 0, 3, 1];
        let permuted = flat.select_rows(&perm);
        let run = |f: &Matrix| {
            let mut t = enc.patch_embed.forward(f).unwrap();
            t.add_assign(&sincos_position_codes(gh, gw, 16));
            enc.encode(&PatchGrid {
                tokens: t,
                grid_h: gh,
                grid_w: gw,
            })
            .unwrap()
            .tokens
        };
        let out = run(&flat);
        let out_p = run(&permuted);
        // undo the permutation on the output; without position codes these would match
        let realigned = out_p.select_rows(&[1, 3, 0, 2]);
        assert!(out.max_abs_diff(&realigned) > 1e-6);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let enc = ImageEncoder::new(small_config(1)).unwrap();
        let g = PatchGrid {
            tokens: Matrix::zeros(4, 8),
            grid_h: 2,
            grid_w: 2,
        };
        assert!(matches!(enc.encode(&g), Err(Error::Dimension(_))));
    }

    #[test]
    fn crop_resize_nearest() {
        let img = random_image(8, 16, 16);
        let c = img.crop_resize(0, 0, 16, 16, 16, 16).unwrap();
        assert_eq!(c, img);
        let c = img.crop_resize(4, 4, 6, 6, 4, 4).unwrap();
        assert_eq!(c.get(0, 0, 1), img.get(4, 4, 1));
        assert_eq!(c.get(3, 3, 2), img.get(5, 5, 2));
        assert!(img.crop_resize(3, 3, 3, 8, 4, 4).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let enc = ImageEncoder::new(small_config(1)).unwrap();
        let img = random_image(5, 16, 16);
        let w: Vec<f64> = (0..4 * 16)
            .map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.5)
            .collect();
        let objective = |e: &ImageEncoder| -> f64 {
            let out = e.forward(&img).unwrap();
            out.tokens.data().iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = enc.forward_train(&img).unwrap();
        let mut grad = crate::tensor::zeros_like(&enc);
        enc.backward(
            &cache,
            &Matrix::from_vec(4, 16, w.clone()).unwrap(),
            &mut grad,
        );
        let analytic = grad.flatten();
        let base = enc.flatten();
        let h = 1e-5;
        for idx in (0..base.len()).step_by(13) {
            let mut e = enc.clone();
            let mut v = base.clone();
            v[idx] += h;
            e.load_flat(&v);
            let up = objective(&e);
            v[idx] -= 2.0 * h;
            e.load_flat(&v);
            let fd = (up - objective(&e)) / (2.0 * h);
            assert!(
                (fd - analytic[idx]).abs() < 1e-6 * (1.0 + fd.abs()),
                "param {idx}"
            );
        }
    }
}
