use ovdet::clip::clip_probs;
use ovdet::data::{Annotation, ImageRecord, Split};
use ovdet::eval::evaluate;
use ovdet::pipeline::{ensemble_probs, prune_rois, Detection, EnsembleConfig, Vocabulary};
use ovdet::tensor::{softmax_in_place, Matrix};
use proptest::prelude::*;

fn prob_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(0.0f64..=1.0, rows * cols)
        .prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn ensemble_case() -> impl Strategy<Value = (Matrix, Matrix, Vec<bool>, f64, f64)> {
    (1usize..8, 2usize..7).prop_flat_map(|(m, k)| {
        (
            prob_matrix(m, k),
            prob_matrix(m, k),
            prop::collection::vec(any::<bool>(), k),
            0.0f64..=1.0,
            0.0f64..=1.0,
        )
    })
}

fn vocab(novel: &[bool]) -> Vocabulary {
    Vocabulary::new((0..novel.len()).map(|i| format!("c{i}")).collect(), novel).unwrap()
}

proptest! {
    #[test]
    fn ensemble_is_convex_and_partitioned((p_det, p_clip, novel, alpha, beta) in ensemble_case(), beta2 in 0.0f64..=1.0) {
        let v = vocab(&novel);
        let cfg = EnsembleConfig { alpha, beta, ..EnsembleConfig::default() };
        let out = ensemble_probs(&p_det, &p_clip, &v, &cfg).unwrap();
        let other = ensemble_probs(&p_det, &p_clip, &v, &EnsembleConfig { beta: beta2, ..cfg.clone() }).unwrap();
        for i in 0..out.rows() {
            for j in 0..out.cols() {
                let (a, b) = (p_det.get(i, j), p_clip.get(i, j));
                prop_assert!(out.get(i, j) >= a.min(b) && out.get(i, j) <= a.max(b));
                if !novel[j] {
                    prop_assert_eq!(out.get(i, j), other.get(i, j));
                }
            }
        }
    }

    #[test]
    fn ensemble_endpoints_select_one_source((p_det, p_clip, novel, _a, _b) in ensemble_case()) {
        let v = vocab(&novel);
        let det = ensemble_probs(&p_det, &p_clip, &v, &EnsembleConfig { alpha: 1.0, beta: 1.0, ..EnsembleConfig::default() }).unwrap();
        prop_assert_eq!(det, p_det.clone());
        let clip = ensemble_probs(&p_det, &p_clip, &v, &EnsembleConfig { alpha: 0.0, beta: 0.0, ..EnsembleConfig::default() }).unwrap();
        prop_assert_eq!(clip, p_clip);
    }

    #[test]
    fn pruning_is_monotone_in_epsilon(p in (1usize..12, 1usize..6).prop_flat_map(|(m, k)| prob_matrix(m, k)), e1 in 0.0f64..1.0, e2 in 0.0f64..1.0) {
        let boxes: Vec<[f64; 4]> = (0..p.rows()).map(|i| [0.5, 0.5, 0.1 + i as f64 * 0.01, 0.1]).collect();
        let (lo, hi) = (e1.min(e2), e1.max(e2));
        let loose = prune_rois(&boxes, &p, lo).unwrap();
        let tight = prune_rois(&boxes, &p, hi).unwrap();
        prop_assert!(tight.indices.iter().all(|i| loose.indices.contains(i)));
        prop_assert_eq!(prune_rois(&boxes, &p, 0.0).unwrap().indices.len(), p.rows());
        for (r, &i) in tight.indices.iter().enumerate() {
            prop_assert_eq!(tight.boxes[r], boxes[i]);
            prop_assert_eq!(tight.probs.row(r), p.row(i));
        }
    }

    #[test]
    fn clip_probs_are_distributions_sharpened_by_temperature(
        cos in prop::collection::vec(-1.0f64..1.0, 2..6),
        t1 in 0.01f64..2.0,
        t2 in 0.01f64..2.0,
    ) {
        let k = cos.len();
        let mut texts = Matrix::zeros(k, k + 1);
        for j in 0..k { texts.set(j, j, 1.0); }
        let scale = cos.iter().map(|c| c * c).sum::<f64>().sqrt().max(1.0);
        let mut roi = vec![0.0; k + 1];
        roi[..k].iter_mut().zip(&cos).for_each(|(r, c)| *r = c / scale);
        roi[k] = (1.0 - roi[..k].iter().map(|v| v * v).sum::<f64>()).max(0.0).sqrt();
        let roi = Matrix::from_rows(&[roi]).unwrap();
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let sharp = clip_probs(&roi, &texts, lo).unwrap().probs;
        let soft = clip_probs(&roi, &texts, hi).unwrap().probs;
        prop_assert!((sharp.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let max = |m: &Matrix| m.row(0).iter().cloned().fold(0.0, f64::max);
        let spread = cos.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - cos.iter().cloned().fold(f64::INFINITY, f64::min);
        if spread > 1e-3 && hi - lo > 1e-3 {
            prop_assert!(max(&sharp) > max(&soft));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(v in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let mut x = v.clone();
        softmax_in_place(&mut x);
        prop_assert!((x.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(x.iter().all(|p| *p >= 0.0));
    }
}

fn split_with(boxes: &[(u64, usize, [f64; 4])]) -> Split {
    let mut ids: Vec<u64> = boxes.iter().map(|b| b.0).collect();
    ids.sort_unstable();
    ids.dedup();
    Split {
        images: ids
            .iter()
            .map(|&id| ImageRecord {
                id,
                file_name: format!("{id}.png"),
                width: 100,
                height: 100,
            })
            .collect(),
        annotations: boxes
            .iter()
            .enumerate()
            .map(|(i, &(image_id, class_index, b))| Annotation {
                id: i as u64,
                image_id,
                class_index,
                bbox: b,
            })
            .collect(),
    }
}

fn eval_case() -> impl Strategy<Value = (Split, Vec<Detection>)> {
    let gt = prop::collection::vec(
        (
            0u64..3,
            0usize..3,
            0.2f64..0.8,
            0.2f64..0.8,
            0.05f64..0.3,
            0.05f64..0.3,
        ),
        1..8,
    );
    let det = prop::collection::vec(
        (
            0u64..3,
            0usize..3,
            0.0f64..100.0,
            0.0f64..100.0,
            5.0f64..40.0,
            5.0f64..40.0,
            0.0f64..1.0,
        ),
        0..15,
    );
    (gt, det).prop_map(|(g, d)| {
        let mut boxes: Vec<(u64, usize, [f64; 4])> = g
            .into_iter()
            .map(|(i, c, x, y, w, h)| (i, c, [x, y, w, h]))
            .collect();
        // every image referenced by detections exists
        for id in 0..3 {
            if !boxes.iter().any(|b| b.0 == id) {
                boxes.push((id, 0, [0.5, 0.5, 0.2, 0.2]));
            }
        }
        let dets = d
            .into_iter()
            .map(|(image_id, class_index, x, y, w, h, score)| Detection {
                bbox: [x, y, x + w, y + h],
                class_index,
                score,
                image_id,
            })
            .collect();
        (split_with(&boxes), dets)
    })
}

proptest! {
    #[test]
    fn ap_is_bounded_and_order_free_for_distinct_scores((split, dets) in eval_case()) {
        let v = vocab(&[false, false, true]);
        let r = evaluate(&dets, &split, &v).unwrap();
        for c in &r.per_class {
            if let Some(ap) = c.ap50 { prop_assert!((0.0..=1.0).contains(&ap)); }
        }
        let mut scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        scores.sort_by(f64::total_cmp);
        scores.dedup();
        if scores.len() == dets.len() {
            let mut rev = dets.clone();
            rev.reverse();
            prop_assert_eq!(evaluate(&rev, &split, &v).unwrap(), r);
        }
    }

    #[test]
    fn adding_ground_truth_on_top_never_lowers_ap((split, dets) in eval_case()) {
        let v = vocab(&[false, false, true]);
        let before = evaluate(&dets, &split, &v).unwrap();
        let mut more = ovdet::eval::ground_truth_as_detections(&split).unwrap();
        for d in &mut more { d.score = 2.0; }
        more.extend(dets);
        let after = evaluate(&more, &split, &v).unwrap();
        for (a, b) in after.per_class.iter().zip(&before.per_class) {
            if let (Some(x), Some(y)) = (a.ap50, b.ap50) { prop_assert!(x >= y - 1e-12); }
        }
    }
}
