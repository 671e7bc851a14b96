//! Config-driven stages shared by the command line and the end-to-end tests.

use std::fmt::Write as _;

use crate::clip::ClipModel;
use crate::config::RunConfig;
use crate::data::{derive_seed, generate_crops, generate_roi_samples, ClipSample, Sample, Split};
use crate::decoder::PromptDecoder;
use crate::encoder::ImageEncoder;
use crate::error::Result;
use crate::eval::{evaluate, EvalReport};
use crate::pipeline::{detect, Detection, Detector, EnsembleConfig, OvdModels, Vocabulary};
use crate::train::{pretrain_clip, retrieval_accuracy, train_detector, LossRecord, PretrainRecord};

/// Pretraining data: object crops plus RoI-masked scene objects, and an
/// independently drawn held-out set of each.
pub struct PretrainData {
    pub train: Vec<ClipSample>,
    pub heldout_crops: Vec<ClipSample>,
    pub heldout_rois: Vec<ClipSample>,
}

pub fn pretrain_data(cfg: &RunConfig, vocab: &Vocabulary) -> Result<PretrainData> {
    let p = &cfg.pretrain;
    let size = cfg.clip.image_size;
    let held = |n: usize| ((n as f64 * p.holdout_fraction).ceil() as usize).max(1);
    let mut train = generate_crops(
        &cfg.gen,
        vocab,
        p.crops_per_class,
        size,
        derive_seed(cfg.seed, 50, 0),
    )?;
    train.extend(generate_roi_samples(
        &cfg.gen,
        vocab,
        p.roi_scenes,
        size,
        derive_seed(cfg.seed, 51, 0),
    )?);
    Ok(PretrainData {
        train,
        heldout_crops: generate_crops(
            &cfg.gen,
            vocab,
            held(p.crops_per_class),
            size,
            derive_seed(cfg.seed, 52, 0),
        )?,
        heldout_rois: generate_roi_samples(
            &cfg.gen,
            vocab,
            held(p.roi_scenes),
            size,
            derive_seed(cfg.seed, 53, 0),
        )?,
    })
}

pub struct PretrainOutcome {
    pub model: ClipModel,
    pub log: Vec<PretrainRecord>,
    /// Top-1 text retrieval on held-out object crops.
    pub crop_accuracy: f64,
    pub novel_crop_accuracy: f64,
    /// Top-1 retrieval of held-out scene objects through their RoI masks.
    pub roi_accuracy: f64,
}

pub fn run_pretrain(cfg: &RunConfig, vocab: &Vocabulary) -> Result<PretrainOutcome> {
    let data = pretrain_data(cfg, vocab)?;
    let model = ClipModel::new(cfg.clip.clone(), cfg.gen.vocab.tokens())?;
    let (model, log) = pretrain_clip(
        &data.train,
        &vocab.classes,
        model,
        &cfg.pretrain,
        derive_seed(cfg.seed, 54, 0),
    )?;
    let novel: Vec<ClipSample> = data
        .heldout_crops
        .iter()
        .filter(|s| vocab.is_novel(s.class_index))
        .cloned()
        .collect();
    Ok(PretrainOutcome {
        crop_accuracy: retrieval_accuracy(&model, &data.heldout_crops, &vocab.classes)?,
        novel_crop_accuracy: retrieval_accuracy(&model, &novel, &vocab.classes)?,
        roi_accuracy: retrieval_accuracy(&model, &data.heldout_rois, &vocab.classes)?,
        model,
        log,
    })
}

pub fn pretrain_csv(log: &[PretrainRecord]) -> String {
    let mut s = String::from("step,loss,logit_scale\n");
    for r in log {
        let _ = writeln!(s, "{},{},{}", r.step, r.loss, r.logit_scale);
    }
    s
}

/// A freshly initialised detector for this configuration.
pub fn new_detector(cfg: &RunConfig) -> Result<Detector> {
    Ok(Detector {
        encoder: ImageEncoder::new(cfg.encoder.clone())?,
        decoder: PromptDecoder::new(cfg.decoder.clone())?,
    })
}

pub fn run_train(
    cfg: &RunConfig,
    train: &[Sample],
    vocab: &Vocabulary,
    clip: &ClipModel,
    on_epoch: &mut dyn FnMut(usize, &Detector, &[LossRecord]) -> Result<()>,
) -> Result<(Detector, Vec<LossRecord>)> {
    let mut detector = new_detector(cfg)?;
    if cfg.train.init_from_clip {
        detector
            .encoder
            .load_tower(&clip.image.patch_embed, &clip.image.blocks)?;
    }
    train_detector(
        train,
        vocab,
        detector,
        clip,
        &cfg.train,
        derive_seed(cfg.seed, 60, 0),
        on_epoch,
    )
}

/// Detections for every sample under one ensemble setting.
pub fn detect_all(
    samples: &[Sample],
    vocab: &Vocabulary,
    models: &OvdModels,
    ensemble: &EnsembleConfig,
    cfg: &RunConfig,
) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for s in samples {
        out.extend(detect(
            &s.image,
            vocab,
            models,
            ensemble,
            cfg.detect.score_floor,
            cfg.detect.top_n,
        )?);
    }
    Ok(out)
}

pub fn detect_and_evaluate(
    samples: &[Sample],
    split: &Split,
    vocab: &Vocabulary,
    models: &OvdModels,
    ensemble: &EnsembleConfig,
    cfg: &RunConfig,
) -> Result<EvalReport> {
    evaluate(
        &detect_all(samples, vocab, models, ensemble, cfg)?,
        split,
        vocab,
    )
}
