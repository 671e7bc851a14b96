//! A miniature open-vocabulary run: generate scenes, pretrain CLIP on every
//! class, train the detector on base classes only, then evaluate base and
//! novel mAP50 for the detector alone and with the CLIP ensemble.
//!
//! Sizes are far below the defaults so this finishes in about a minute.
//! Pruning is off because an undertrained detector scores nothing above the
//! default threshold. The numbers are only meaningful with the full schedule.
use ovdet::config::RunConfig;
use ovdet::data::generate_dataset;
use ovdet::pipeline::{EnsembleConfig, OvdModels};
use ovdet::run::{detect_and_evaluate, run_pretrain, run_train};

fn main() -> ovdet::Result<()> {
    let cfg = RunConfig::from_toml_with_overrides(
        "",
        &[
            "gen.num_train=120",
            "gen.num_val=30",
            "pretrain.schedule.epochs=3",
            "pretrain.crops_per_class=30",
            "pretrain.roi_scenes=60",
            "train.schedule.epochs=20",
            "ensemble.epsilon=0.0",
        ],
    )?;
    let ds = generate_dataset(&cfg.gen, cfg.seed)?;
    let vocab = &ds.manifest.vocab;
    println!(
        "{} train / {} val images, {} classes",
        ds.train.len(),
        ds.val.len(),
        vocab.len()
    );

    let pre = run_pretrain(&cfg, vocab)?;
    println!("CLIP held-out crop retrieval {:.3}", pre.crop_accuracy);

    let mut report = |epoch: usize, _: &_, log: &[ovdet::train::LossRecord]| {
        if let Some(r) = log.last() {
            if epoch % 5 == 4 {
                println!("epoch {epoch}: loss {:.3}", r.loss.total);
            }
        }
        Ok(())
    };
    let (detector, _) = run_train(&cfg, &ds.train, vocab, &pre.model, &mut report)?;
    let models = OvdModels {
        detector,
        clip: pre.model,
    };

    for (name, ens) in [
        (
            "detector only",
            EnsembleConfig {
                beta: 1.0,
                ..cfg.ensemble.clone()
            },
        ),
        ("with CLIP", cfg.ensemble.clone()),
    ] {
        let r = detect_and_evaluate(&ds.val, &ds.manifest.val, vocab, &models, &ens, &cfg)?;
        println!(
            "{name:>13}: mAP50 base {:.3} novel {:.3}",
            r.map50_base, r.map50_novel
        );
    }
    Ok(())
}
