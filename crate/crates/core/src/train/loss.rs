use serde::{Deserialize, Serialize};

use crate::boxes::{giou, giou_with_grad};
use crate::decoder::DetectionOutput;
use crate::error::{Error, Result};
use crate::tensor::{log_sigmoid, sigmoid, Matrix};

use super::hungarian::{hungarian, MatchAssignment};

/// Ground-truth boxes (normalised `cxcywh`) and their vocabulary class indices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSet {
    pub boxes: Vec<[f64; 4]>,
    pub class_indices: Vec<usize>,
}

impl GroundTruthSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Same boxes, reordered; `order[i]` is the old index of new entry `i`.
    pub fn permuted(&self, order: &[usize]) -> GroundTruthSet {
        GroundTruthSet {
            boxes: order.iter().map(|&i| self.boxes[i]).collect(),
            class_indices: order.iter().map(|&i| self.class_indices[i]).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub iou: f64,
    pub embed: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 3.0,
            l1: 5.0,
            iou: 2.0,
            embed: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for v in [self.cls, self.l1, self.iou, self.embed] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Parameter(format!(
                    "loss weight {v} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalConfig {
    pub gamma: f64,
    /// Weight on positive targets; negatives get `1 − weight`.
    pub weight: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig {
            gamma: 2.0,
            weight: 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub l1: f64,
    pub iou: f64,
    pub embed: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn weighted(cls: f64, l1: f64, iou: f64, embed: f64, w: &LossWeights) -> Self {
        LossBreakdown {
            cls,
            l1,
            iou,
            embed,
            total: w.cls * cls + w.l1 * l1 + w.iou * iou + w.embed * embed,
        }
    }
}

const P_CLAMP: f64 = 1e-7;

/// Focal loss of a probability against a binary target.
pub fn focal_loss(prob: f64, target: bool, gamma: f64, weight: f64) -> f64 {
    let p = prob.clamp(P_CLAMP, 1.0 - P_CLAMP);
    if target {
        weight * (1.0 - p).powf(gamma) * -p.ln()
    } else {
        (1.0 - weight) * p.powf(gamma) * -(1.0 - p).ln()
    }
}

/// Focal loss evaluated from a logit, with its derivative with respect to the logit.
pub fn focal_loss_logit(logit: f64, target: bool, gamma: f64, weight: f64) -> (f64, f64) {
    let p = sigmoid(logit);
    if target {
        let log_p = log_sigmoid(logit);
        let q = 1.0 - p;
        let qg = q.powf(gamma);
        (weight * qg * -log_p, weight * qg * (gamma * p * log_p - q))
    } else {
        let log_q = log_sigmoid(-logit);
        let pg = p.powf(gamma);
        (
            (1.0 - weight) * pg * -log_q,
            (1.0 - weight) * pg * (p - gamma * (1.0 - p) * log_q),
        )
    }
}

fn column_of(prompt_ids: &[usize], class: usize) -> Result<usize> {
    prompt_ids
        .iter()
        .position(|&c| c == class)
        .ok_or_else(|| Error::Assignment(format!("class {class} is not among the current prompts")))
}

/// `cost[i][q] = λ_cls·(−p[q][c_i]) + λ_l1·‖b_i − b̂_q‖₁ + λ_iou·(1 − giou(b_i, b̂_q))`.
pub fn match_cost_raw(
    gt: &GroundTruthSet,
    boxes: &[[f64; 4]],
    probs: &Matrix,
    prompt_ids: &[usize],
    weights: &LossWeights,
) -> Result<Matrix> {
    if gt.boxes.len() != gt.class_indices.len() {
        return Err(Error::input(
            "ground-truth boxes and classes differ in length",
        ));
    }
    if probs.rows() != boxes.len() || probs.cols() != prompt_ids.len() {
        return Err(Error::dim("probabilities do not match boxes and prompts"));
    }
    let cols: Vec<usize> = gt
        .class_indices
        .iter()
        .map(|&c| column_of(prompt_ids, c))
        .collect::<Result<_>>()?;
    let mut cost = Matrix::zeros(gt.len(), boxes.len());
    for (i, b) in gt.boxes.iter().enumerate() {
        for (q, bq) in boxes.iter().enumerate() {
            let l1: f64 = b.iter().zip(bq).map(|(x, y)| (x - y).abs()).sum();
            let c = weights.cls * -probs.get(q, cols[i])
                + weights.l1 * l1
                + weights.iou * (1.0 - giou(*b, *bq));
            cost.set(i, q, c);
        }
    }
    Ok(cost)
}

/// Matching cost of ground truth against decoded outputs whose probability
/// columns follow `prompt_ids`.
pub fn match_cost(
    gt: &GroundTruthSet,
    out: &DetectionOutput,
    prompt_ids: &[usize],
    weights: &LossWeights,
) -> Result<Matrix> {
    match_cost_raw(gt, &out.boxes, &out.probs, prompt_ids, weights)
}

/// Mean absolute difference over all entries; `0` for an empty match set.
pub fn embedding_loss(objects: &Matrix, prompts: &Matrix) -> Result<f64> {
    objects.check_same(prompts, "matched prompt embeddings")?;
    let n = objects.data().len();
    if n == 0 {
        return Ok(0.0);
    }
    Ok(objects
        .data()
        .iter()
        .zip(prompts.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n as f64)
}

/// Loss values plus gradients on every decoder output that feeds them.
#[derive(Clone, Debug)]
pub struct LossGrads {
    pub breakdown: LossBreakdown,
    pub assignment: MatchAssignment,
    /// `m × 4`, on the sigmoid box outputs.
    pub dboxes: Matrix,
    /// `m × k`.
    pub dlogits: Matrix,
    /// `m × d`, on the projected object embeddings.
    pub dprojected: Matrix,
}

/// Inputs of the set-prediction loss for one image.
pub struct LossInputs<'a> {
    pub boxes: &'a [[f64; 4]],
    pub logits: &'a Matrix,
    /// Object embeddings after the classification head's projection.
    pub projected: &'a Matrix,
    /// Decoder-width prompt embeddings, one row per prompt.
    pub prompts: &'a Matrix,
    pub prompt_ids: &'a [usize],
}

/// Matches, then evaluates the weighted loss and its gradients.
///
/// Classification is focal over all `m × k` entries with matched pairs as
/// positives, normalised by `max(g, 1)`; box terms average over matches;
/// the embedding term pulls projected objects toward their (fixed) prompts.
pub fn loss_with_grads(
    gt: &GroundTruthSet,
    inputs: &LossInputs,
    weights: &LossWeights,
    focal: &FocalConfig,
) -> Result<LossGrads> {
    let (m, k) = inputs.logits.shape();
    if inputs.boxes.len() != m
        || inputs.projected.rows() != m
        || inputs.prompts.rows() != k
        || inputs.prompt_ids.len() != k
    {
        return Err(Error::dim("loss inputs disagree on query or prompt counts"));
    }
    let probs = inputs.logits.map(sigmoid);
    let cost = match_cost_raw(gt, inputs.boxes, &probs, inputs.prompt_ids, weights)?;
    let assignment = hungarian(&cost)?;
    let g = gt.len();
    let norm = g.max(1) as f64;

    // by query, so the result does not depend on ground-truth order
    let mut by_query: Vec<(usize, usize)> = assignment.pairs.iter().map(|&(i, q)| (q, i)).collect();
    by_query.sort_unstable();
    let mut target_col = vec![usize::MAX; m];
    for &(q, i) in &by_query {
        target_col[q] = column_of(inputs.prompt_ids, gt.class_indices[i])?;
    }

    let mut cls = 0.0;
    let mut dlogits = Matrix::zeros(m, k);
    for q in 0..m {
        for j in 0..k {
            let (l, d) = focal_loss_logit(
                inputs.logits.get(q, j),
                target_col[q] == j,
                focal.gamma,
                focal.weight,
            );
            cls += l;
            dlogits.set(q, j, weights.cls * d / norm);
        }
    }
    cls /= norm;

    let mut l1 = 0.0;
    let mut iou = 0.0;
    let mut dboxes = Matrix::zeros(m, 4);
    let d = inputs.projected.cols();
    let mut embed = 0.0;
    let mut dprojected = Matrix::zeros(m, d);
    let embed_n = (by_query.len() * d).max(1) as f64;
    for &(q, i) in &by_query {
        let (b, bq) = (gt.boxes[i], inputs.boxes[q]);
        let (gv, ggrad) = giou_with_grad(b, bq);
        iou += 1.0 - gv;
        for c in 0..4 {
            let diff = bq[c] - b[c];
            l1 += diff.abs();
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            dboxes.set(q, c, (weights.l1 * sign - weights.iou * ggrad[c]) / norm);
        }
        let p = inputs.prompts.row(target_col[q]);
        for (c, (o, t)) in inputs.projected.row(q).iter().zip(p).enumerate() {
            let diff = o - t;
            embed += diff.abs();
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            dprojected.set(q, c, weights.embed * sign / embed_n);
        }
    }
    l1 /= norm;
    iou /= norm;
    embed = if by_query.is_empty() {
        0.0
    } else {
        embed / embed_n
    };

    Ok(LossGrads {
        breakdown: LossBreakdown::weighted(cls, l1, iou, embed, weights),
        assignment,
        dboxes,
        dlogits,
        dprojected,
    })
}

/// Loss breakdown of decoded outputs against ground truth.
pub fn total_loss(
    gt: &GroundTruthSet,
    inputs: &LossInputs,
    weights: &LossWeights,
    focal: &FocalConfig,
) -> Result<LossBreakdown> {
    Ok(loss_with_grads(gt, inputs, weights, focal)?.breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn focal_golden_values() {
        assert!((focal_loss(0.5, true, 0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((focal_loss(0.9, true, 2.0, 1.0) - 0.01 * 0.1053605156578263).abs() < 1e-12);
        assert!(focal_loss(1.0, true, 2.0, 0.25) < 1e-12);
        assert!(focal_loss(0.0, false, 2.0, 0.25) < 1e-12);
        let (l, _) = focal_loss_logit(2.0, false, 2.0, 0.25);
        assert!((l - focal_loss(sigmoid(2.0), false, 2.0, 0.25)).abs() < 1e-12);
    }

    #[test]
    fn focal_logit_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let x = rng.gen_range(-6.0..6.0);
            let t = rng.gen_bool(0.5);
            let (_, d) = focal_loss_logit(x, t, 2.0, 0.25);
            let h = 1e-5;
            let fd = (focal_loss_logit(x + h, t, 2.0, 0.25).0
                - focal_loss_logit(x - h, t, 2.0, 0.25).0)
                / (2.0 * h);
            assert!((fd - d).abs() <= 1e-6 * (1.0 + fd.abs()), "x {x} t {t}");
        }
    }

    #[test]
    fn embedding_loss_values() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(embedding_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.25);
        assert!((embedding_loss(&a, &b).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(
            embedding_loss(&Matrix::zeros(0, 2), &Matrix::zeros(0, 2)).unwrap(),
            0.0
        );
        assert!(embedding_loss(&a, &Matrix::zeros(1, 2)).is_err());
    }

    fn random_case(
        seed: u64,
        g: usize,
        m: usize,
        k: usize,
        d: usize,
    ) -> (
        GroundTruthSet,
        Vec<[f64; 4]>,
        Matrix,
        Matrix,
        Matrix,
        Vec<usize>,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bx = |rng: &mut ChaCha8Rng| {
            [
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.05..0.4),
                rng.gen_range(0.05..0.4),
            ]
        };
        let ids: Vec<usize> = (0..k).map(|j| 10 + j).collect();
        let gt = GroundTruthSet {
            boxes: (0..g).map(|_| bx(&mut rng)).collect(),
            class_indices: (0..g).map(|_| ids[rng.gen_range(0..k)]).collect(),
        };
        let boxes = (0..m).map(|_| bx(&mut rng)).collect();
        let mut mat = |r: usize, c: usize| {
            Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
        };
        let logits = mat(m, k);
        let projected = mat(m, d);
        let prompts = mat(k, d);
        (gt, boxes, logits, projected, prompts, ids)
    }

    #[test]
    fn match_cost_matches_scalar_recomputation() {
        let (gt, boxes, logits, _, _, ids) = random_case(3, 3, 5, 4, 2);
        let probs = logits.map(sigmoid);
        let w = LossWeights::default();
        let cost = match_cost_raw(&gt, &boxes, &probs, &ids, &w).unwrap();
        for i in 0..3 {
            let col = ids.iter().position(|&c| c == gt.class_indices[i]).unwrap();
            for q in 0..5 {
                let b = gt.boxes[i];
                let p = boxes[q];
                let l1 = (b[0] - p[0]).abs()
                    + (b[1] - p[1]).abs()
                    + (b[2] - p[2]).abs()
                    + (b[3] - p[3]).abs();
                let expect = -3.0 * probs.get(q, col) + 5.0 * l1 + 2.0 * (1.0 - giou(b, p));
                assert!((cost.get(i, q) - expect).abs() < 1e-12);
            }
        }
        let bad = GroundTruthSet {
            boxes: vec![[0.5; 4]],
            class_indices: vec![99],
        };
        assert!(matches!(
            match_cost_raw(&bad, &boxes, &probs, &ids, &w),
            Err(Error::Assignment(_))
        ));
    }

    #[test]
    fn exact_prediction_wins_matching() {
        let gt = GroundTruthSet {
            boxes: vec![[0.5, 0.5, 0.2, 0.2]],
            class_indices: vec![0],
        };
        let boxes = [[0.1, 0.1, 0.1, 0.1], [0.5, 0.5, 0.2, 0.2]];
        let probs = Matrix::from_rows(&[[0.5], [0.5]]).unwrap();
        let cost = match_cost_raw(&gt, &boxes, &probs, &[0], &LossWeights::default()).unwrap();
        assert_eq!(hungarian(&cost).unwrap().pairs, vec![(0, 1)]);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let (gt, boxes, logits, projected, prompts, ids) = random_case(5, 2, 4, 3, 3);
        let (w, f) = (LossWeights::default(), FocalConfig::default());
        let eval = |b: &[[f64; 4]], l: &Matrix, p: &Matrix| {
            total_loss(
                &gt,
                &LossInputs {
                    boxes: b,
                    logits: l,
                    projected: p,
                    prompts: &prompts,
                    prompt_ids: &ids,
                },
                &w,
                &f,
            )
            .unwrap()
            .total
        };
        let g = loss_with_grads(
            &gt,
            &LossInputs {
                boxes: &boxes,
                logits: &logits,
                projected: &projected,
                prompts: &prompts,
                prompt_ids: &ids,
            },
            &w,
            &f,
        )
        .unwrap();
        let h = 1e-6;
        for q in 0..4 {
            for c in 0..4 {
                let (mut a, mut b) = (boxes.clone(), boxes.clone());
                a[q][c] += h;
                b[q][c] -= h;
                let fd =
                    (eval(&a, &logits, &projected) - eval(&b, &logits, &projected)) / (2.0 * h);
                assert!(
                    (fd - g.dboxes.get(q, c)).abs() < 1e-5,
                    "box {q} {c}: {fd} vs {}",
                    g.dboxes.get(q, c)
                );
            }
        }
        for idx in 0..12 {
            let (mut a, mut b) = (logits.clone(), logits.clone());
            a.data_mut()[idx] += h;
            b.data_mut()[idx] -= h;
            let fd = (eval(&boxes, &a, &projected) - eval(&boxes, &b, &projected)) / (2.0 * h);
            assert!((fd - g.dlogits.data()[idx]).abs() < 1e-6);
        }
        for idx in 0..12 {
            let (mut a, mut b) = (projected.clone(), projected.clone());
            a.data_mut()[idx] += h;
            b.data_mut()[idx] -= h;
            let fd = (eval(&boxes, &logits, &a) - eval(&boxes, &logits, &b)) / (2.0 * h);
            assert!((fd - g.dprojected.data()[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn loss_invariant_to_ground_truth_order() {
        let (gt, boxes, logits, projected, prompts, ids) = random_case(8, 4, 6, 3, 3);
        let (w, f) = (LossWeights::default(), FocalConfig::default());
        let run = |gt: &GroundTruthSet| {
            total_loss(
                gt,
                &LossInputs {
                    boxes: &boxes,
                    logits: &logits,
                    projected: &projected,
                    prompts: &prompts,
                    prompt_ids: &ids,
                },
                &w,
                &f,
            )
            .unwrap()
        };
        assert_eq!(run(&gt), run(&gt.permuted(&[2, 0, 3, 1])));
    }

    #[test]
    fn empty_ground_truth_is_pure_negative() {
        let (_, boxes, logits, projected, prompts, ids) = random_case(9, 0, 3, 2, 2);
        let (w, f) = (LossWeights::default(), FocalConfig::default());
        let b = total_loss(
            &GroundTruthSet::default(),
            &LossInputs {
                boxes: &boxes,
                logits: &logits,
                projected: &projected,
                prompts: &prompts,
                prompt_ids: &ids,
            },
            &w,
            &f,
        )
        .unwrap();
        assert_eq!((b.l1, b.iou, b.embed), (0.0, 0.0, 0.0));
        let expect: f64 = logits
            .data()
            .iter()
            .map(|&x| focal_loss(sigmoid(x), false, 2.0, 0.25))
            .sum();
        assert!((b.cls - expect).abs() < 1e-9);
        assert!((b.total - 3.0 * b.cls).abs() < 1e-12);
    }
}
