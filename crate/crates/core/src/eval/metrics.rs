use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::boxes::cxcywh_to_xyxy;
pub use crate::boxes::iou_xyxy;
use crate::data::Split;
use crate::error::{Error, Result};
use crate::pipeline::{Detection, Vocabulary};

/// A ground-truth box in absolute pixel `xyxy` coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub image_id: u64,
    pub class_index: usize,
    pub bbox: [f64; 4],
}

/// Ground-truth boxes of a split in pixel coordinates.
pub fn gt_boxes(split: &Split) -> Result<Vec<GtBox>> {
    let size: HashMap<u64, (f64, f64)> = split
        .images
        .iter()
        .map(|i| (i.id, (i.width as f64, i.height as f64)))
        .collect();
    split
        .annotations
        .iter()
        .map(|a| {
            let (w, h) = *size.get(&a.image_id).ok_or_else(|| {
                Error::input(format!(
                    "annotation {} references unknown image {}",
                    a.id, a.image_id
                ))
            })?;
            let b = cxcywh_to_xyxy(a.bbox);
            Ok(GtBox {
                image_id: a.image_id,
                class_index: a.class_index,
                bbox: [b[0] * w, b[1] * h, b[2] * w, b[3] * h],
            })
        })
        .collect()
}

/// Greedy matching of score-sorted detections (ties keep input order); each
/// detection claims the best-overlapping unmatched ground truth above the
/// threshold. Returns one true-positive flag per sorted detection.
fn match_detections(dets: &[&Detection], gts: &[&GtBox], iou_threshold: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut by_image: HashMap<u64, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image_id).or_default().push(i);
    }
    let mut used = vec![false; gts.len()];
    order
        .iter()
        .map(|&d| {
            let det = dets[d];
            let mut best = None;
            let mut best_iou = iou_threshold;
            for &g in by_image
                .get(&det.image_id)
                .map(|v| v.as_slice())
                .unwrap_or(&[])
            {
                if used[g] {
                    continue;
                }
                let iou = iou_xyxy(det.bbox, gts[g].bbox);
                if iou >= best_iou {
                    best_iou = iou;
                    best = Some(g);
                }
            }
            match best {
                Some(g) => {
                    used[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// 101-point interpolated average precision for one class; `None` when the
/// class has no ground truth.
pub fn average_precision(
    detections: &[Detection],
    ground_truths: &[GtBox],
    iou_threshold: f64,
    class_index: usize,
) -> Option<f64> {
    let gts: Vec<&GtBox> = ground_truths
        .iter()
        .filter(|g| g.class_index == class_index)
        .collect();
    if gts.is_empty() {
        return None;
    }
    let dets: Vec<&Detection> = detections
        .iter()
        .filter(|d| d.class_index == class_index)
        .collect();
    let tp = match_detections(&dets, &gts, iou_threshold);
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / gts.len() as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for t in 0..=100 {
        let r = t as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r - 1e-12);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / 101.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_index: usize,
    pub name: String,
    pub novel: bool,
    pub num_gt: usize,
    pub ap50: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map50_all: f64,
    pub map50_base: f64,
    pub map50_novel: f64,
    pub recall_at_100_all: f64,
    pub recall_at_100_base: f64,
    pub recall_at_100_novel: f64,
    pub per_class: Vec<ClassAp>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class_index,name,split,num_gt,ap50\n");
        for c in &self.per_class {
            let ap = c.ap50.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                c.class_index,
                c.name,
                if c.novel { "novel" } else { "base" },
                c.num_gt,
                ap
            );
        }
        let _ = writeln!(s, ",mAP50_all,all,,{}", self.map50_all);
        let _ = writeln!(s, ",mAP50_base,base,,{}", self.map50_base);
        let _ = writeln!(s, ",mAP50_novel,novel,,{}", self.map50_novel);
        s
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Per-class AP50 and recall@100 over a split, averaged over all, base and
/// novel classes that have ground truth.
pub fn evaluate(detections: &[Detection], split: &Split, vocab: &Vocabulary) -> Result<EvalReport> {
    let images: HashSet<u64> = split.images.iter().map(|i| i.id).collect();
    for d in detections {
        if d.class_index >= vocab.len() {
            return Err(Error::input(format!(
                "detection class {} outside the vocabulary",
                d.class_index
            )));
        }
        if !images.contains(&d.image_id) {
            return Err(Error::input(format!(
                "detection for unknown image {}",
                d.image_id
            )));
        }
    }
    let gts = gt_boxes(split)?;
    let per_class: Vec<ClassAp> = (0..vocab.len())
        .map(|c| ClassAp {
            class_index: c,
            name: vocab.classes[c].clone(),
            novel: vocab.is_novel(c),
            num_gt: gts.iter().filter(|g| g.class_index == c).count(),
            ap50: average_precision(detections, &gts, 0.5, c),
        })
        .collect();
    let map = |keep: &dyn Fn(&ClassAp) -> bool| {
        mean(per_class.iter().filter(|c| keep(c)).filter_map(|c| c.ap50))
    };

    // recall@100: each image keeps its 100 highest-scoring detections
    let mut by_image: HashMap<u64, Vec<&Detection>> = HashMap::new();
    for d in detections {
        by_image.entry(d.image_id).or_default().push(d);
    }
    let mut top: Vec<Detection> = Vec::new();
    let mut ids: Vec<u64> = by_image.keys().copied().collect();
    ids.sort_unstable();
    for id in ids {
        let mut v = by_image.remove(&id).unwrap_or_default();
        v.sort_by(|a, b| b.score.total_cmp(&a.score));
        top.extend(v.into_iter().take(100).cloned());
    }
    let mut found = vec![0usize; vocab.len()];
    for (c, f) in found.iter_mut().enumerate() {
        let g: Vec<&GtBox> = gts.iter().filter(|g| g.class_index == c).collect();
        let d: Vec<&Detection> = top.iter().filter(|d| d.class_index == c).collect();
        *f = match_detections(&d, &g, 0.5).iter().filter(|t| **t).count();
    }
    let recall = |keep: &dyn Fn(usize) -> bool| {
        let (hit, total) = per_class
            .iter()
            .filter(|c| keep(c.class_index))
            .fold((0, 0), |(h, t), c| (h + found[c.class_index], t + c.num_gt));
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    };
    Ok(EvalReport {
        map50_all: map(&|_| true),
        map50_base: map(&|c| !c.novel),
        map50_novel: map(&|c| c.novel),
        recall_at_100_all: recall(&|_| true),
        recall_at_100_base: recall(&|c| !vocab.is_novel(c)),
        recall_at_100_novel: recall(&|c| vocab.is_novel(c)),
        per_class,
    })
}

/// Ground truth of a split expressed as perfect detections.
pub fn ground_truth_as_detections(split: &Split) -> Result<Vec<Detection>> {
    Ok(gt_boxes(split)?
        .into_iter()
        .map(|g| Detection {
            bbox: g.bbox,
            class_index: g.class_index,
            score: 1.0,
            image_id: g.image_id,
        })
        .collect())
}
