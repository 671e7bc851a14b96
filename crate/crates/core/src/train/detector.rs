use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clip::ClipModel;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::pipeline::{text_prompts, Detector, Vocabulary};
use crate::tensor::{zeros_like, Matrix, Parameters};

use super::augment::{augment, AugmentConfig};
use super::loss::{loss_with_grads, FocalConfig, LossBreakdown, LossInputs, LossWeights};
use super::optim::{Optimizer, OptimizerKind, Schedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub weights: LossWeights,
    pub focal: FocalConfig,
    /// Absent base classes sampled into each batch's prompt set.
    pub negative_prompts: usize,
    pub augment: AugmentConfig,
    /// Start the detector encoder from the pretrained CLIP image tower.
    pub init_from_clip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: Schedule {
                optimizer: OptimizerKind::Adamw,
                learning_rate: 1e-3,
                min_lr_fraction: 0.05,
                warmup_steps: 50,
                clip_norm: 1.0,
                weight_decay: 1e-4,
                epochs: 150,
                batch_size: 8,
                ..Schedule::default()
            },
            weights: LossWeights::default(),
            focal: FocalConfig::default(),
            negative_prompts: 8,
            augment: AugmentConfig::default(),
            init_from_clip: true,
        }
    }
}

/// Mean loss breakdown of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = String::from("step,cls,l1,iou,embed,total\n");
    for r in records {
        let l = &r.loss;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.step, l.cls, l.l1, l.iou, l.embed, l.total
        );
    }
    s
}

/// Prompt classes for a batch: every class present, plus up to `negatives`
/// absent base classes drawn uniformly.
pub fn batch_prompt_classes(
    batch: &[&Sample],
    vocab: &Vocabulary,
    negatives: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let mut present: Vec<usize> = Vec::new();
    for s in batch {
        for &c in &s.gt.class_indices {
            if vocab.is_novel(c) {
                return Err(Error::input(format!(
                    "training batch contains novel class {}",
                    vocab.classes[c]
                )));
            }
            if !present.contains(&c) {
                present.push(c);
            }
        }
    }
    present.sort_unstable();
    let mut absent: Vec<usize> = vocab
        .base_set
        .iter()
        .copied()
        .filter(|c| !present.contains(c))
        .collect();
    absent.shuffle(rng);
    absent.truncate(negatives);
    present.extend(absent);
    if present.is_empty() {
        return Err(Error::input("no prompt classes available"));
    }
    Ok(present)
}

/// Loss and accumulated gradient of one image under a given prompt set.
pub fn image_loss_grad(
    detector: &Detector,
    sample: &Sample,
    raw_prompts: &Matrix,
    prompt_ids: &[usize],
    cfg: &TrainConfig,
    grad: &mut Detector,
    scale: f64,
) -> Result<LossBreakdown> {
    let (memory, enc_cache) = detector.encoder.forward_train(&sample.image)?;
    let cache = detector.decoder.forward_train(raw_prompts, &memory)?;
    let mut lg = loss_with_grads(
        &sample.gt,
        &LossInputs {
            boxes: &cache.boxes,
            logits: &cache.logits,
            projected: cache.projected(),
            prompts: cache.prompts(),
            prompt_ids,
        },
        &cfg.weights,
        &cfg.focal,
    )?;
    for m in [&mut lg.dboxes, &mut lg.dlogits, &mut lg.dprojected] {
        m.scale(scale);
    }
    let dmem = detector.decoder.backward(
        &cache,
        &lg.dboxes,
        &lg.dlogits,
        Some(&lg.dprojected),
        &mut grad.decoder,
    );
    detector
        .encoder
        .backward(&enc_cache, &dmem, &mut grad.encoder);
    Ok(lg.breakdown)
}

/// Trains the detector against a frozen CLIP text tower. `on_epoch` sees the
/// model after every epoch (for checkpoints).
pub fn train_detector(
    samples: &[Sample],
    vocab: &Vocabulary,
    mut detector: Detector,
    clip: &ClipModel,
    cfg: &TrainConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(usize, &Detector, &[LossRecord]) -> Result<()>,
) -> Result<(Detector, Vec<LossRecord>)> {
    cfg.schedule.validate()?;
    cfg.weights.validate()?;
    if samples.is_empty() {
        return Err(Error::input("no training samples"));
    }
    let all_prompts = text_prompts(clip, vocab)?;
    let bs = cfg.schedule.batch_size;
    let steps_per_epoch = samples.len().div_ceil(bs);
    let mut opt = Optimizer::new(
        &detector,
        cfg.schedule.clone(),
        steps_per_epoch * cfg.schedule.epochs,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::new();
    for epoch in 0..cfg.schedule.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let augmented: Vec<Sample> = chunk
                .iter()
                .map(|&i| augment(&samples[i], &cfg.augment, &mut rng))
                .collect();
            let batch: Vec<&Sample> = augmented.iter().collect();
            let ids = batch_prompt_classes(&batch, vocab, cfg.negative_prompts, &mut rng)?;
            let raw = all_prompts.select_rows(&ids);
            let mut grad = zeros_like(&detector);
            let mut mean = LossBreakdown::default();
            let w = 1.0 / batch.len() as f64;
            for s in &batch {
                let l = image_loss_grad(&detector, s, &raw, &ids, cfg, &mut grad, w)?;
                mean.cls += w * l.cls;
                mean.l1 += w * l.l1;
                mean.iou += w * l.iou;
                mean.embed += w * l.embed;
                mean.total += w * l.total;
            }
            if !grad.flatten().iter().all(|v| v.is_finite()) {
                return Err(Error::Parameter(format!(
                    "non-finite gradient at step {}",
                    log.len()
                )));
            }
            opt.step(&mut detector, &grad);
            log.push(LossRecord {
                step: log.len(),
                epoch,
                loss: mean,
            });
        }
        on_epoch(epoch, &detector, &log)?;
    }
    Ok((detector, log))
}
