//! Scores every RoI of an image in one masked-attention pass and compares it
//! with the per-RoI reference and with naive crop-and-resize.
use ovdet::clip::{build_roi_masks, clip_probs, ClipConfig, ClipModel};
use ovdet::data::{generate_dataset, GenConfig};
use ovdet::tensor::dot;

fn main() -> ovdet::Result<()> {
    let gen = GenConfig {
        num_train: 1,
        num_val: 1,
        ..GenConfig::default()
    };
    let ds = generate_dataset(&gen, 5)?;
    let sample = &ds.val[0];
    let rois = &sample.gt.boxes;
    let clip = ClipModel::new(ClipConfig::default(), gen.vocab.tokens())?;

    let single = clip.encode_image_rois(&sample.image, rois)?;
    let (gh, gw) = clip.grid();
    let masks = build_roi_masks(rois, gh, gw, clip.config.penalty)?;
    for (i, b) in rois.iter().enumerate() {
        let reference = clip.encode_image_roi_single(&sample.image, masks.masks.row(i))?;
        let gap = single
            .row(i)
            .iter()
            .zip(&reference)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let naive = clip.naive_crop_embed(&sample.image, *b)?;
        println!(
            "roi {i}: {} cells, single-pass gap {gap:.1e}, cos(masked, crop) {:.4}",
            masks.zero_cells(i).len(),
            dot(single.row(i), &naive)
        );
    }
    let texts = clip.encode_texts(&ds.manifest.vocab.classes)?;
    let probs = clip_probs(&single, &texts, clip.config.temperature)?;
    println!(
        "CLIP probabilities {}x{}; row sums {:?}",
        probs.probs.rows(),
        probs.probs.cols(),
        (0..probs.probs.rows())
            .map(|r| probs.probs.row(r).iter().sum::<f64>())
            .collect::<Vec<_>>()
    );
    Ok(())
}
