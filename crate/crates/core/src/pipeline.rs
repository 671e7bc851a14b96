//! Open-vocabulary inference: decode with class prompts, prune RoIs by object
//! score, rescore survivors with RoI-masked CLIP attention, and ensemble the
//! two probability sources per base/novel split.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::boxes::cxcywh_to_xyxy;
use crate::clip::{clip_probs, ClipModel};
use crate::decoder::{Modality, PromptDecoder};
use crate::encoder::{ImageEncoder, ImageSample};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Parameters};

/// Ordered class names split into base (seen in training) and novel classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub classes: Vec<String>,
    /// Category id used in COCO files for each class.
    pub category_ids: Vec<u64>,
    pub base_set: Vec<usize>,
    pub novel_set: Vec<usize>,
}

impl Vocabulary {
    /// Builds a vocabulary with category ids `1..=k`.
    pub fn new(classes: Vec<String>, novel: &[bool]) -> Result<Self> {
        let ids = (1..=classes.len() as u64).collect();
        Self::with_ids(classes, ids, novel)
    }

    pub fn with_ids(classes: Vec<String>, category_ids: Vec<u64>, novel: &[bool]) -> Result<Self> {
        if classes.len() != novel.len() || classes.len() != category_ids.len() {
            return Err(Error::input(
                "class names, ids and novel flags differ in length",
            ));
        }
        let mut seen = std::collections::HashSet::new();
        if !classes.iter().all(|c| seen.insert(c.as_str())) {
            return Err(Error::input("duplicate class name in vocabulary"));
        }
        let mut ids = std::collections::HashSet::new();
        if !category_ids.iter().all(|c| ids.insert(*c)) {
            return Err(Error::input("duplicate category id in vocabulary"));
        }
        let base_set = (0..classes.len()).filter(|&i| !novel[i]).collect();
        let novel_set = (0..classes.len()).filter(|&i| novel[i]).collect();
        Ok(Vocabulary {
            classes,
            category_ids,
            base_set,
            novel_set,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn is_novel(&self, class_index: usize) -> bool {
        self.novel_set.binary_search(&class_index).is_ok()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn index_of_category(&self, category_id: u64) -> Option<usize> {
        self.category_ids.iter().position(|&c| c == category_id)
    }

    /// Parses `name,base|novel` lines; blank lines and `#` comments are skipped.
    pub fn parse_flags(text: &str) -> Result<Self> {
        let mut names = Vec::new();
        let mut novel = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, flag) = line.rsplit_once(',').ok_or_else(|| {
                Error::Parse(format!("vocabulary line {}: expected name,flag", n + 1))
            })?;
            novel.push(match flag.trim() {
                "base" => false,
                "novel" => true,
                other => {
                    return Err(Error::Parse(format!(
                        "vocabulary line {}: flag must be base or novel, got {other:?}",
                        n + 1
                    )))
                }
            });
            names.push(name.trim().to_string());
        }
        Self::new(names, &novel)
    }

    pub fn to_flags(&self) -> String {
        self.classes
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{c},{}\n", if self.is_novel(i) { "novel" } else { "base" }))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    /// Detector weight on base classes.
    pub alpha: f64,
    /// Detector weight on novel classes.
    pub beta: f64,
    /// RoI pruning threshold on the object score.
    pub epsilon: f64,
    /// CLIP softmax temperature.
    pub temperature: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self::lvis_style()
    }
}

impl EnsembleConfig {
    pub fn coco_style() -> Self {
        EnsembleConfig {
            alpha: 0.2,
            beta: 0.35,
            epsilon: 0.125,
            temperature: 0.01,
        }
    }

    pub fn lvis_style() -> Self {
        EnsembleConfig {
            alpha: 0.2,
            beta: 0.4,
            epsilon: 0.3,
            temperature: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("epsilon", self.epsilon),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Parameter(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// One scored box in absolute pixel `xyxy` coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: [f64; 4],
    pub class_index: usize,
    pub score: f64,
    pub image_id: u64,
}

/// A detection in the COCO results format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    pub score: f64,
}

impl Detection {
    pub fn to_coco(&self, vocab: &Vocabulary) -> CocoResult {
        let b = self.bbox;
        CocoResult {
            image_id: self.image_id,
            category_id: vocab.category_ids[self.class_index],
            bbox: [b[0], b[1], b[2] - b[0], b[3] - b[1]],
            score: self.score,
        }
    }

    pub fn from_coco(r: &CocoResult, vocab: &Vocabulary) -> Result<Self> {
        let class_index = vocab
            .index_of_category(r.category_id)
            .ok_or_else(|| Error::input(format!("unknown category id {}", r.category_id)))?;
        let b = r.bbox;
        Ok(Detection {
            bbox: [b[0], b[1], b[0] + b[2], b[1] + b[3]],
            class_index,
            score: r.score,
            image_id: r.image_id,
        })
    }
}

/// RoIs surviving the object-score threshold, in original order.
#[derive(Clone, Debug, PartialEq)]
pub struct PrunedRois {
    pub boxes: Vec<[f64; 4]>,
    pub probs: Matrix,
    pub indices: Vec<usize>,
}

/// Keeps row `i` iff `max_j probs[i][j] ≥ epsilon`.
pub fn prune_rois(boxes: &[[f64; 4]], probs: &Matrix, epsilon: f64) -> Result<PrunedRois> {
    if boxes.len() != probs.rows() {
        return Err(Error::dim(format!(
            "{} boxes but {} probability rows",
            boxes.len(),
            probs.rows()
        )));
    }
    let indices: Vec<usize> = (0..probs.rows())
        .filter(|&i| {
            probs
                .row(i)
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
                >= epsilon
        })
        .collect();
    Ok(PrunedRois {
        boxes: indices.iter().map(|&i| boxes[i]).collect(),
        probs: probs.select_rows(&indices),
        indices,
    })
}

/// Convex mix of detector and CLIP probabilities, `alpha` on base columns and
/// `beta` on novel columns (weights on the detector side).
pub fn ensemble_probs(
    p_det: &Matrix,
    p_clip: &Matrix,
    vocab: &Vocabulary,
    cfg: &EnsembleConfig,
) -> Result<Matrix> {
    p_det.check_same(p_clip, "CLIP probabilities")?;
    if p_det.cols() != vocab.len() {
        return Err(Error::dim(format!(
            "{} probability columns for {} classes",
            p_det.cols(),
            vocab.len()
        )));
    }
    cfg.validate()?;
    let weights: Vec<f64> = (0..vocab.len())
        .map(|j| {
            if vocab.is_novel(j) {
                cfg.beta
            } else {
                cfg.alpha
            }
        })
        .collect();
    let mut out = p_det.clone();
    for i in 0..out.rows() {
        let clip = p_clip.row(i);
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = weights[j] * *v + (1.0 - weights[j]) * clip[j];
        }
    }
    Ok(out)
}

/// The trainable detector: image encoder plus prompt decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub encoder: ImageEncoder,
    pub decoder: PromptDecoder,
}

impl Parameters for Detector {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.encoder.visit(f);
        self.decoder.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.encoder.visit_mut(f);
        self.decoder.visit_mut(f);
    }
}

/// Everything inference needs.
#[derive(Clone, Debug, PartialEq)]
pub struct OvdModels {
    pub detector: Detector,
    pub clip: ClipModel,
}

/// Wall time spent in each pipeline stage.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimes {
    pub encode: Duration,
    pub decode: Duration,
    pub clip: Duration,
    pub ensemble: Duration,
}

/// Resizes an image to the CLIP input size when needed.
pub fn clip_view(image: &ImageSample, clip: &ClipModel) -> Result<ImageSample> {
    let s = clip.config.image_size;
    if image.width() == s && image.height() == s {
        Ok(image.clone())
    } else {
        image.crop_resize(0, 0, image.width(), image.height(), s, s)
    }
}

/// Text prompts for every class of the vocabulary.
pub fn text_prompts(clip: &ClipModel, vocab: &Vocabulary) -> Result<Matrix> {
    clip.encode_texts(&vocab.classes)
}

/// Runs the full pipeline on one image with text prompts for all classes.
pub fn detect(
    image: &ImageSample,
    vocab: &Vocabulary,
    models: &OvdModels,
    cfg: &EnsembleConfig,
    score_floor: f64,
    top_n: usize,
) -> Result<Vec<Detection>> {
    let raw = text_prompts(&models.clip, vocab)?;
    let modality = vec![Modality::Text; vocab.len()];
    Ok(detect_with_prompts(
        image,
        &raw,
        &modality,
        vocab,
        models,
        cfg,
        score_floor,
        top_n,
    )?
    .0)
}

/// Pipeline with caller-supplied raw CLIP prompt embeddings (one row per
/// vocabulary class, text or image exemplars), also reporting stage times.
#[allow(clippy::too_many_arguments)]
pub fn detect_with_prompts(
    image: &ImageSample,
    raw_prompts: &Matrix,
    modality: &[Modality],
    vocab: &Vocabulary,
    models: &OvdModels,
    cfg: &EnsembleConfig,
    score_floor: f64,
    top_n: usize,
) -> Result<(Vec<Detection>, StageTimes)> {
    if vocab.is_empty() {
        return Err(Error::input("empty vocabulary"));
    }
    if raw_prompts.rows() != vocab.len() {
        return Err(Error::dim(format!(
            "{} prompts for {} classes",
            raw_prompts.rows(),
            vocab.len()
        )));
    }
    cfg.validate()?;
    let mut times = StageTimes::default();

    let t = Instant::now();
    let memory = models.detector.encoder.forward(image)?;
    times.encode = t.elapsed();

    let t = Instant::now();
    let decoder = &models.detector.decoder;
    let class_ids: Vec<usize> = (0..vocab.len()).collect();
    let prompts = decoder.prompts(raw_prompts, &class_ids, modality)?;
    let out = decoder.decode_prompt(&decoder.query_set(), &prompts, &memory)?;
    let kept = prune_rois(&out.boxes, &out.probs, cfg.epsilon)?;
    times.decode = t.elapsed();
    if kept.indices.is_empty() {
        return Ok((Vec::new(), times));
    }

    let t = Instant::now();
    let clip_image = clip_view(image, &models.clip)?;
    let roi_embeddings = models.clip.encode_image_rois(&clip_image, &kept.boxes)?;
    let p_clip = clip_probs(&roi_embeddings, raw_prompts, cfg.temperature)?.probs;
    times.clip = t.elapsed();

    let t = Instant::now();
    let probs = ensemble_probs(&kept.probs, &p_clip, vocab, cfg)?;
    let (w, h) = (image.width() as f64, image.height() as f64);
    let mut dets = Vec::new();
    for (r, b) in kept.boxes.iter().enumerate() {
        let xy = cxcywh_to_xyxy(*b);
        let bbox = [
            (xy[0] * w).clamp(0.0, w),
            (xy[1] * h).clamp(0.0, h),
            (xy[2] * w).clamp(0.0, w),
            (xy[3] * h).clamp(0.0, h),
        ];
        for (j, &score) in probs.row(r).iter().enumerate() {
            if score >= score_floor {
                dets.push(Detection {
                    bbox,
                    class_index: j,
                    score,
                    image_id: image.image_id,
                });
            }
        }
    }
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    dets.truncate(top_n);
    times.ensemble = t.elapsed();
    Ok((dets, times))
}
