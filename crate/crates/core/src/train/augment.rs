//! Label-preserving training augmentation: horizontal flips and whole-pixel
//! translations that keep every box on the canvas.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::cxcywh_to_xyxy;
use crate::data::Sample;
use crate::encoder::ImageSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Mirror left/right with probability 1/2.
    pub flip: bool,
    /// Largest translation in pixels along each axis.
    pub max_shift: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip: true,
            max_shift: 8,
        }
    }
}

/// Pixel shift range `[lo, hi]` along one axis that keeps `[min, max]`
/// (normalised) inside `[0, 1]`.
fn shift_range(min: f64, max: f64, size: usize, limit: usize) -> (i64, i64) {
    let s = size as f64;
    let lo = (-(min * s).floor() as i64).max(-(limit as i64));
    let hi = (((1.0 - max) * s).floor() as i64).min(limit as i64);
    if lo > hi {
        (0, 0)
    } else {
        (lo, hi)
    }
}

/// Mirrored and/or translated copy of `image` with `boxes` (normalised
/// `cxcywh`) moved along. Pixels shifted in from outside wrap around from the
/// opposite edge, which only ever holds background because the shift keeps
/// every box on the canvas.
pub fn augment_image(
    image: &ImageSample,
    boxes: &[[f64; 4]],
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> (ImageSample, Vec<[f64; 4]>) {
    let (w, h, ch) = (image.width(), image.height(), image.channels());
    let flip = cfg.flip && rng.gen_bool(0.5);
    let mut boxes = boxes.to_vec();
    if flip {
        boxes.iter_mut().for_each(|b| b[0] = 1.0 - b[0]);
    }
    let (mut x0, mut y0, mut x1, mut y1) = (1.0f64, 1.0f64, 0.0f64, 0.0f64);
    for b in &boxes {
        let xy = cxcywh_to_xyxy(*b);
        x0 = x0.min(xy[0]);
        y0 = y0.min(xy[1]);
        x1 = x1.max(xy[2]);
        y1 = y1.max(xy[3]);
    }
    let (dx, dy) = if boxes.is_empty() {
        let m = cfg.max_shift as i64;
        (rng.gen_range(-m..=m), rng.gen_range(-m..=m))
    } else {
        let (xl, xh) = shift_range(x0, x1, w, cfg.max_shift);
        let (yl, yh) = shift_range(y0, y1, h, cfg.max_shift);
        (rng.gen_range(xl..=xh), rng.gen_range(yl..=yh))
    };
    for b in &mut boxes {
        b[0] += dx as f64 / w as f64;
        b[1] += dy as f64 / h as f64;
    }

    let src = image.pixels();
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        let sy = (y as i64 - dy).rem_euclid(h as i64) as usize;
        for x in 0..w {
            let mut sx = (x as i64 - dx).rem_euclid(w as i64) as usize;
            if flip {
                sx = w - 1 - sx;
            }
            let (o, s) = ((y * w + x) * ch, (sy * w + sx) * ch);
            out[o..o + ch].copy_from_slice(&src[s..s + ch]);
        }
    }
    (
        ImageSample::new(image.image_id, w, h, ch, out).expect("same shape"),
        boxes,
    )
}

/// [`augment_image`] applied to a detection sample.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Sample {
    let (image, boxes) = augment_image(&sample.image, &sample.gt.boxes, cfg, rng);
    let mut gt = sample.gt.clone();
    gt.boxes = boxes;
    Sample {
        image,
        file_name: sample.file_name.clone(),
        gt,
    }
}
