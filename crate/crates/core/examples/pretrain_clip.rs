//! Short contrastive pretraining of the CLIP stand-in, then held-out
//! retrieval on object crops (including unseen colour/shape combinations)
//! and on RoI-masked scene objects.
use ovdet::config::RunConfig;
use ovdet::run::run_pretrain;

fn main() -> ovdet::Result<()> {
    let epochs = std::env::args().nth(1).unwrap_or_else(|| "3".into());
    let cfg = RunConfig::from_toml_with_overrides(
        "",
        &[
            format!("pretrain.schedule.epochs={epochs}"),
            "pretrain.crops_per_class=40".into(),
            "pretrain.roi_scenes=100".into(),
        ],
    )?;
    let vocab = cfg.gen.vocab.vocabulary()?;
    let out = run_pretrain(&cfg, &vocab)?;
    let first = out.log.first().map_or(f64::NAN, |r| r.loss);
    let last = out.log.last().map_or(f64::NAN, |r| r.loss);
    println!("{} steps, loss {first:.3} -> {last:.3}", out.log.len());
    println!(
        "held-out top-1: crops {:.3} (novel classes {:.3}), RoIs {:.3}",
        out.crop_accuracy, out.novel_crop_accuracy, out.roi_accuracy
    );
    let texts = out.model.encode_texts(&vocab.classes[..3])?;
    for (i, name) in vocab.classes[..3].iter().enumerate() {
        let row: Vec<String> = (0..3)
            .map(|j| format!("{:+.2}", ovdet::tensor::dot(texts.row(i), texts.row(j))))
            .collect();
        println!("{name:>16}: {}", row.join(" "));
    }
    Ok(())
}
