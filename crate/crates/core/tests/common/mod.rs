#![allow(dead_code)]

use ovdet::boxes::xyxy_to_cxcywh;
use ovdet::data::{Annotation, ImageRecord, Split};
use ovdet::pipeline::{Detection, Vocabulary};

pub fn tokens() -> Vec<String> {
    ovdet::data::VocabSpec::default().tokens()
}

/// Three 100×100 images, class 0 base (3 boxes) and class 1 novel (2 boxes).
///
/// Class 0 ranks TP, FP, TP, FP: AP = (34·1 + 33·2/3) / 101 = 56/101.
/// Class 1 ranks TP, FP, TP: AP = (51·1 + 50·2/3) / 101.
pub fn map_fixture() -> (Split, Vocabulary, Vec<Detection>) {
    let vocab = Vocabulary::new(vec!["a".into(), "b".into()], &[false, true]).unwrap();
    let images = (1..=3)
        .map(|id| ImageRecord {
            id,
            file_name: format!("{id}.png"),
            width: 100,
            height: 100,
        })
        .collect();
    let gt = [
        (1, 0, [10.0, 10.0, 30.0, 30.0]),
        (1, 1, [60.0, 60.0, 90.0, 90.0]),
        (2, 0, [50.0, 10.0, 80.0, 40.0]),
        (3, 0, [10.0, 50.0, 40.0, 80.0]),
        (3, 1, [20.0, 20.0, 40.0, 40.0]),
    ];
    let annotations = gt
        .iter()
        .enumerate()
        .map(|(i, &(image_id, class_index, b))| Annotation {
            id: i as u64 + 1,
            image_id,
            class_index,
            bbox: xyxy_to_cxcywh([b[0] / 100.0, b[1] / 100.0, b[2] / 100.0, b[3] / 100.0]),
        })
        .collect();
    let det = |image_id, class_index, score, bbox| Detection {
        bbox,
        class_index,
        score,
        image_id,
    };
    let dets = vec![
        det(1, 0, 0.9, [10.0, 10.0, 30.0, 30.0]),
        det(2, 0, 0.8, [0.0, 60.0, 20.0, 90.0]),
        det(2, 0, 0.7, [50.0, 10.0, 80.0, 40.0]),
        // IoU 1/3 with the image-3 box
        det(3, 0, 0.6, [25.0, 50.0, 55.0, 80.0]),
        // IoU 400/440
        det(3, 1, 0.95, [20.0, 20.0, 40.0, 42.0]),
        det(2, 1, 0.9, [20.0, 20.0, 40.0, 40.0]),
        det(1, 1, 0.5, [60.0, 60.0, 90.0, 90.0]),
    ];
    (
        Split {
            images,
            annotations,
        },
        vocab,
        dets,
    )
}
