use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clip::{build_roi_masks, ClipModel};
use crate::data::ClipSample;
use crate::error::{Error, Result};
use crate::tensor::{dot, l2_normalize, softmax_in_place, zeros_like, Matrix, Parameters};

use super::augment::{augment_image, AugmentConfig};
use super::optim::{Optimizer, OptimizerKind, Schedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub schedule: Schedule,
    /// Most classes per contrastive batch (one sample each).
    pub batch_classes: usize,
    /// Initial value of the learnable logit scale.
    pub init_logit_scale: f64,
    pub max_logit_scale: f64,
    pub crops_per_class: usize,
    /// Scenes whose objects become RoI-masked samples.
    pub roi_scenes: usize,
    /// Fraction of samples held out for the retrieval check.
    pub holdout_fraction: f64,
    pub augment: AugmentConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            schedule: Schedule {
                optimizer: OptimizerKind::Adamw,
                learning_rate: 2e-3,
                min_lr_fraction: 0.05,
                warmup_steps: 20,
                clip_norm: 1.0,
                epochs: 28,
                batch_size: 16,
                ..Schedule::default()
            },
            batch_classes: 16,
            init_logit_scale: 10.0,
            max_logit_scale: 100.0,
            crops_per_class: 200,
            roi_scenes: 600,
            holdout_fraction: 0.15,
            augment: AugmentConfig::default(),
        }
    }
}

struct ScaledClip {
    model: ClipModel,
    log_scale: f64,
}

impl Parameters for ScaledClip {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.model.visit(f);
        f(std::slice::from_ref(&self.log_scale));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.model.visit_mut(f);
        f(std::slice::from_mut(&mut self.log_scale));
    }
}

impl Clone for ScaledClip {
    fn clone(&self) -> Self {
        ScaledClip {
            model: self.model.clone(),
            log_scale: self.log_scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub step: usize,
    pub loss: f64,
    pub logit_scale: f64,
}

fn roi_mask(model: &ClipModel, roi: &[f64; 4]) -> Result<Vec<f64>> {
    let (gh, gw) = model.grid();
    Ok(build_roi_masks(&[*roi], gh, gw, model.config.penalty)?
        .masks
        .row(0)
        .to_vec())
}

/// Image embedding of a pretraining sample as used at inference.
pub fn sample_embedding(model: &ClipModel, s: &ClipSample) -> Result<Vec<f64>> {
    match &s.roi {
        None => model.encode_image(&s.image),
        Some(b) => Ok(model.encode_image_rois(&s.image, &[*b])?.row(0).to_vec()),
    }
}

/// Fraction of samples whose embedding is closest to their own class text.
pub fn retrieval_accuracy<S: AsRef<str>>(
    model: &ClipModel,
    samples: &[ClipSample],
    class_names: &[S],
) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let texts = model.encode_texts(class_names)?;
    let mut hits = 0;
    for s in samples {
        let e = sample_embedding(model, s)?;
        let best = (0..texts.rows())
            .max_by(|&a, &b| dot(&e, texts.row(a)).total_cmp(&dot(&e, texts.row(b))))
            .expect("non-empty");
        hits += (best == s.class_index) as usize;
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Symmetric cross-entropy of a scaled similarity matrix with matching
/// diagonal, and its gradient with respect to the logits.
fn contrastive(logits: &Matrix) -> (f64, Matrix) {
    let b = logits.rows();
    let mut rows = logits.clone();
    let mut cols = logits.transpose();
    let mut loss = 0.0;
    for i in 0..b {
        let lse = log_sum_exp(rows.row(i));
        loss -= logits.get(i, i) - lse;
        let lse_c = log_sum_exp(cols.row(i));
        loss -= logits.get(i, i) - lse_c;
        softmax_in_place(rows.row_mut(i));
        softmax_in_place(cols.row_mut(i));
    }
    let mut grad = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            let delta = (i == j) as u8 as f64;
            grad.set(
                i,
                j,
                0.5 * ((rows.get(i, j) - delta) + (cols.get(j, i) - delta)) / b as f64,
            );
        }
    }
    (0.5 * loss / b as f64, grad)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Batches with pairwise-distinct classes, one sample per class.
fn class_distinct_batches(
    samples: &[ClipSample],
    num_classes: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut queues: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, s) in samples.iter().enumerate() {
        queues[s.class_index].push(i);
    }
    queues.iter_mut().for_each(|q| q.shuffle(rng));
    let mut batches = Vec::new();
    loop {
        let mut live: Vec<usize> = (0..num_classes)
            .filter(|&c| !queues[c].is_empty())
            .collect();
        if live.len() < 2 {
            break;
        }
        live.shuffle(rng);
        live.truncate(batch);
        batches.push(
            live.iter()
                .map(|&c| queues[c].pop().expect("non-empty"))
                .collect(),
        );
    }
    batches
}

/// Contrastive image-text pretraining over all classes of the vocabulary.
///
/// Returns the trained model and a per-step loss log.
pub fn pretrain_clip<S: AsRef<str>>(
    samples: &[ClipSample],
    class_names: &[S],
    model: ClipModel,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(ClipModel, Vec<PretrainRecord>)> {
    cfg.schedule.validate()?;
    let k = class_names.len();
    let mut present = vec![false; k];
    for s in samples {
        if s.class_index >= k {
            return Err(Error::input(format!(
                "sample class {} outside {k} classes",
                s.class_index
            )));
        }
        present[s.class_index] = true;
    }
    if present.iter().filter(|p| **p).count() < 2 {
        return Err(Error::input(
            "contrastive pretraining needs at least 2 classes",
        ));
    }
    let token_ids: Vec<Vec<usize>> = class_names
        .iter()
        .map(|n| model.text.token_ids(n.as_ref()))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_epoch = class_distinct_batches(samples, k, cfg.batch_classes, &mut rng.clone()).len();
    let mut state = ScaledClip {
        model,
        log_scale: cfg.init_logit_scale.ln(),
    };
    let mut opt = Optimizer::new(
        &state,
        cfg.schedule.clone(),
        per_epoch * cfg.schedule.epochs,
    );
    let mut log = Vec::new();
    let mut step = 0;
    for _ in 0..cfg.schedule.epochs {
        for batch in class_distinct_batches(samples, k, cfg.batch_classes, &mut rng) {
            let b = batch.len();
            let model = &state.model;
            let scale = state.log_scale.exp();
            let mut caches = Vec::with_capacity(b);
            for &i in &batch {
                let s = &samples[i];
                let (image, moved) = augment_image(&s.image, &[s.bbox], &cfg.augment, &mut rng);
                let mask = s.roi.map(|_| roi_mask(model, &moved[0])).transpose()?;
                caches.push(model.image_forward_train(&image, mask.as_deref())?);
            }
            let raws: Vec<Vec<f64>> = batch
                .iter()
                .map(|&i| model.text.raw(&token_ids[samples[i].class_index]))
                .collect();
            let texts: Vec<Vec<f64>> = raws.iter().map(|r| l2_normalize(r)).collect();
            let mut sims = Matrix::zeros(b, b);
            for i in 0..b {
                for j in 0..b {
                    sims.set(i, j, dot(&caches[i].embedding, &texts[j]));
                }
            }
            let logits = sims.map(|v| v * scale);
            let (loss, dlogits) = contrastive(&logits);

            let mut grad = zeros_like(&state);
            grad.log_scale = dlogits
                .data()
                .iter()
                .zip(logits.data())
                .map(|(g, l)| g * l)
                .sum();
            for i in 0..b {
                let mut de = vec![0.0; texts[i].len()];
                for j in 0..b {
                    let g = dlogits.get(i, j) * scale;
                    de.iter_mut().zip(&texts[j]).for_each(|(d, t)| *d += g * t);
                }
                model.image_backward(&caches[i], &de, &mut grad.model);
            }
            for j in 0..b {
                let t = &texts[j];
                let mut dt = vec![0.0; t.len()];
                for i in 0..b {
                    let g = dlogits.get(i, j) * scale;
                    dt.iter_mut()
                        .zip(&caches[i].embedding)
                        .for_each(|(d, e)| *d += g * e);
                }
                let norm = dot(&raws[j], &raws[j]).sqrt();
                let inner = dot(t, &dt);
                let dr: Vec<f64> = dt
                    .iter()
                    .zip(t)
                    .map(|(d, tv)| (d - tv * inner) / norm)
                    .collect();
                for &tok in &token_ids[samples[batch[j]].class_index] {
                    grad.model
                        .text
                        .vectors
                        .row_mut(tok)
                        .iter_mut()
                        .zip(&dr)
                        .for_each(|(g, d)| *g += d);
                }
            }
            opt.step(&mut state, &grad);
            state.log_scale = state.log_scale.min(cfg.max_logit_scale.ln());
            log.push(PretrainRecord {
                step,
                loss,
                logit_scale: state.log_scale.exp(),
            });
            step += 1;
        }
    }
    Ok((state.model, log))
}
