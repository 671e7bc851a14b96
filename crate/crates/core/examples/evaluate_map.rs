//! mAP50 on ground truth fed back as predictions, then on a jittered copy.
use ovdet::data::{generate_dataset, GenConfig};
use ovdet::eval::{evaluate, ground_truth_as_detections};

fn main() -> ovdet::Result<()> {
    let ds = generate_dataset(
        &GenConfig {
            num_train: 1,
            num_val: 30,
            ..GenConfig::default()
        },
        2,
    )?;
    let split = &ds.manifest.val;
    let vocab = &ds.manifest.vocab;
    let perfect = ground_truth_as_detections(split)?;
    println!(
        "oracle mAP50 {:.3}",
        evaluate(&perfect, split, vocab)?.map50_all
    );

    let mut shifted = perfect.clone();
    for (i, d) in shifted.iter_mut().enumerate() {
        let dx = if i % 3 == 0 {
            0.6 * (d.bbox[2] - d.bbox[0])
        } else {
            0.0
        };
        d.bbox[0] += dx;
        d.bbox[2] += dx;
        d.score = 1.0 - i as f64 * 1e-3;
    }
    let r = evaluate(&shifted, split, vocab)?;
    println!(
        "jittered mAP50 {:.3} (base {:.3}, novel {:.3})",
        r.map50_all, r.map50_base, r.map50_novel
    );
    Ok(())
}
