//! Object-score pruning followed by the base/novel probability ensemble.
use ovdet::pipeline::{ensemble_probs, prune_rois, EnsembleConfig, Vocabulary};
use ovdet::tensor::Matrix;

fn main() -> ovdet::Result<()> {
    let vocab = Vocabulary::new(
        vec!["red square".into(), "blue circle".into()],
        &[false, true],
    )?;
    let boxes = [
        [0.2, 0.2, 0.1, 0.1],
        [0.5, 0.5, 0.3, 0.3],
        [0.8, 0.7, 0.2, 0.2],
    ];
    let p_det = Matrix::from_rows(&[[0.05, 0.10], [0.70, 0.20], [0.10, 0.45]])?;
    let p_clip = Matrix::from_rows(&[[0.50, 0.50], [0.90, 0.10], [0.05, 0.95]])?;

    for eps in [0.0, 0.3, 0.5] {
        let kept = prune_rois(&boxes, &p_det, eps)?;
        println!("epsilon {eps}: keeps rows {:?}", kept.indices);
    }
    let cfg = EnsembleConfig::lvis_style();
    let kept = prune_rois(&boxes, &p_det, cfg.epsilon)?;
    let mixed = ensemble_probs(
        &kept.probs,
        &p_clip.select_rows(&kept.indices),
        &vocab,
        &cfg,
    )?;
    for (r, &i) in kept.indices.iter().enumerate() {
        println!(
            "roi {i}: base {:.3} novel {:.3}",
            mixed.get(r, 0),
            mixed.get(r, 1)
        );
    }
    Ok(())
}
