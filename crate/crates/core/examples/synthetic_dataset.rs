//! Generates the synthetic dataset and writes it as PNGs plus COCO JSON.
use ovdet::data::{generate_dataset, load_manifest, write_dataset, GenConfig};

fn main() -> ovdet::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "synthetic_data".into());
    let cfg = GenConfig {
        num_train: 20,
        num_val: 8,
        ..GenConfig::default()
    };
    let ds = generate_dataset(&cfg, 0)?;
    write_dataset(&ds, dir.as_ref())?;
    let m = load_manifest(dir.as_ref())?;
    println!(
        "{} classes, novel: {:?}",
        m.vocab.len(),
        m.vocab
            .novel_set
            .iter()
            .map(|&c| &m.vocab.classes[c])
            .collect::<Vec<_>>()
    );
    println!(
        "{} train annotations, {} val annotations in {dir}",
        m.train.annotations.len(),
        m.val.annotations.len()
    );
    Ok(())
}
