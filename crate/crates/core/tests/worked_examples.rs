mod common;

use ovdet::clip::{build_roi_masks, clip_probs, ClipConfig, ClipModel};
use ovdet::config::RunConfig;
use ovdet::data::{coco_json, generate_dataset, parse_coco, GenConfig, VocabSpec};
use ovdet::data::{generate_crops, Sample};
use ovdet::encoder::ImageSample;
use ovdet::eval::{bench_decode_scaling, evaluate, BenchConfig};
use ovdet::pipeline::{detect, EnsembleConfig, OvdModels, Vocabulary};
use ovdet::run::new_detector;
use ovdet::tensor::{dot, Matrix};
use ovdet::train::{
    pretrain_clip, retrieval_accuracy, train_detector, PretrainConfig, Schedule, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn clip() -> ClipModel {
    ClipModel::new(
        ClipConfig {
            penalty: -1e9,
            ..ClipConfig::default()
        },
        common::tokens(),
    )
    .unwrap()
}

fn noise_image(seed: u64) -> ImageSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageSample::new(
        seed,
        64,
        64,
        3,
        (0..64 * 64 * 3).map(|_| rng.gen()).collect(),
    )
    .unwrap()
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn text_embeddings_are_unit_deterministic_and_compositional() {
    let c = clip();
    let rt = c.encode_text("red triangle").unwrap();
    assert!((dot(&rt, &rt) - 1.0).abs() < 1e-12);
    assert_eq!(rt, c.encode_text("red triangle").unwrap());
    let rs = c.encode_text("red square").unwrap();
    let bs = c.encode_text("blue square").unwrap();
    assert!(dot(&rt, &rs) < 1.0);
    assert!(dot(&rt, &rs) > dot(&rt, &bs));
}

#[test]
fn image_embeddings_are_unit_and_seeded() {
    let e = clip().encode_image(&noise_image(1)).unwrap();
    assert!((dot(&e, &e) - 1.0).abs() < 1e-12);
    assert_eq!(e, clip().encode_image(&noise_image(1)).unwrap());
}

#[test]
fn full_image_roi_equals_unmasked_encoding() {
    let c = clip();
    let img = noise_image(2);
    let roi = c.encode_image_rois(&img, &[[0.5, 0.5, 1.0, 1.0]]).unwrap();
    assert!(max_gap(roi.row(0), &c.encode_image(&img).unwrap()) < 1e-5);
}

#[test]
fn five_rois_match_separate_masked_passes() {
    let c = clip();
    let img = noise_image(3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let boxes: Vec<[f64; 4]> = (0..5)
        .map(|_| {
            [
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.05..0.4),
                rng.gen_range(0.05..0.4),
            ]
        })
        .collect();
    let batched = c.encode_image_rois(&img, &boxes).unwrap();
    let (gh, gw) = c.grid();
    let masks = build_roi_masks(&boxes, gh, gw, -1e9).unwrap();
    for r in 0..5 {
        let single = c.encode_image_roi_single(&img, masks.masks.row(r)).unwrap();
        assert!(max_gap(batched.row(r), &single) < 1e-6);
    }
}

#[test]
fn naive_crop_differs_from_masked_attention_for_small_box() {
    let c = clip();
    let img = noise_image(4);
    let full = c.naive_crop_embed(&img, [0.5, 0.5, 1.0, 1.0]).unwrap();
    assert!(max_gap(&full, &c.encode_image(&img).unwrap()) < 1e-12);
    let small = [0.2, 0.3, 0.2, 0.15];
    let naive = c.naive_crop_embed(&img, small).unwrap();
    let masked = c.encode_image_rois(&img, &[small]).unwrap();
    assert!(dot(&naive, masked.row(0)) < 0.999);
    assert_eq!(naive, c.naive_crop_embed(&img, small).unwrap());
}

#[test]
fn clip_probability_examples() {
    let texts = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
    for s in [-0.7, 0.0, 0.4] {
        let roi = Matrix::from_rows(&[[s, s]]).unwrap();
        let p = clip_probs(&roi, &texts, 0.01).unwrap().probs;
        assert!((p.get(0, 0) - 0.5).abs() < 1e-12 && (p.get(0, 1) - 0.5).abs() < 1e-12);
    }
    let p = clip_probs(&Matrix::from_rows(&[[1.0, 0.0]]).unwrap(), &texts, 0.01)
        .unwrap()
        .probs;
    assert!(p.get(0, 0) > 1.0 - 1e-10);

    // unit rows with cosines 0.6, 0.2, 0.2 against the axes
    let t3 = Matrix::from_rows(&[
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
    ])
    .unwrap();
    let rest = (1.0f64 - 0.36 - 0.04 - 0.04).sqrt();
    let roi = Matrix::from_rows(&[[0.6, 0.2, 0.2, rest]]).unwrap();
    let p = clip_probs(&roi, &t3, 1.0).unwrap().probs;
    let z = 0.6f64.exp() + 2.0 * 0.2f64.exp();
    assert!((p.get(0, 0) - 0.6f64.exp() / z).abs() < 1e-12);
    assert!((p.get(0, 1) - 0.2f64.exp() / z).abs() < 1e-12);
}

#[test]
fn ensemble_defaults_match_the_two_settings() {
    let lvis = EnsembleConfig::default();
    assert_eq!((lvis.alpha, lvis.beta, lvis.epsilon), (0.2, 0.4, 0.3));
    let coco = EnsembleConfig::coco_style();
    assert_eq!((coco.alpha, coco.beta, coco.epsilon), (0.2, 0.35, 0.125));
}

fn tiny_models() -> (OvdModels, Vocabulary) {
    let cfg = RunConfig::default();
    let vocab = cfg.gen.vocab.vocabulary().unwrap();
    let clip = ClipModel::new(cfg.clip.clone(), cfg.gen.vocab.tokens()).unwrap();
    (
        OvdModels {
            detector: new_detector(&cfg).unwrap(),
            clip,
        },
        vocab,
    )
}

#[test]
fn blank_image_with_high_epsilon_gives_valid_empty_output() {
    let (models, vocab) = tiny_models();
    let img = ImageSample::filled(0, 64, 64, 0.0);
    let cfg = EnsembleConfig {
        epsilon: 0.99,
        ..EnsembleConfig::default()
    };
    assert!(detect(&img, &vocab, &models, &cfg, 0.0, 300)
        .unwrap()
        .is_empty());
}

#[test]
fn zero_epsilon_spellings_agree_and_checkpoints_reproduce_detections() {
    let (models, vocab) = tiny_models();
    let img = noise_image(5);
    let a = EnsembleConfig {
        epsilon: 0.0,
        ..EnsembleConfig::default()
    };
    let b = EnsembleConfig {
        epsilon: -0.0,
        ..EnsembleConfig::default()
    };
    let da = detect(&img, &vocab, &models, &a, 0.0, 300).unwrap();
    assert_eq!(da.len(), 300);
    assert_eq!(da, detect(&img, &vocab, &models, &b, 0.0, 300).unwrap());

    let cfg = RunConfig::default();
    let dir = tempfile::tempdir().unwrap();
    ovdet::checkpoint::save(
        dir.path().join("d.json"),
        "detector",
        &cfg,
        &models.detector,
    )
    .unwrap();
    ovdet::checkpoint::save(dir.path().join("c.json"), "clip", &cfg, &models.clip).unwrap();
    let reloaded = OvdModels {
        detector: ovdet::checkpoint::load(dir.path().join("d.json"), "detector")
            .unwrap()
            .0,
        clip: ovdet::checkpoint::load(dir.path().join("c.json"), "clip")
            .unwrap()
            .0,
    };
    assert_eq!(da, detect(&img, &vocab, &reloaded, &a, 0.0, 300).unwrap());
}

#[test]
fn pretraining_starts_near_log_batch_and_separates_two_classes() {
    let gen = GenConfig::default();
    let vocab = Vocabulary::new(
        vec!["red square".into(), "blue circle".into()],
        &[false, false],
    )
    .unwrap();
    let samples = generate_crops(&gen, &vocab, 48, 64, 1).unwrap();
    let held = generate_crops(&gen, &vocab, 16, 64, 2).unwrap();
    let cfg = PretrainConfig {
        schedule: Schedule {
            epochs: 1,
            ..PretrainConfig::default().schedule
        },
        init_logit_scale: 1.0,
        ..PretrainConfig::default()
    };
    let model = ClipModel::new(ClipConfig::default(), gen.vocab.tokens()).unwrap();
    let (trained, log) = pretrain_clip(&samples, &vocab.classes, model.clone(), &cfg, 3).unwrap();
    assert!(
        (log[0].loss - 2f64.ln()).abs() < 0.1,
        "initial loss {}",
        log[0].loss
    );
    assert_eq!(
        retrieval_accuracy(&trained, &held, &vocab.classes).unwrap(),
        1.0
    );
    let (again, _) = pretrain_clip(&samples, &vocab.classes, model, &cfg, 3).unwrap();
    assert_eq!(again, trained);
}

#[test]
fn detector_loss_falls_during_the_first_epoch() {
    let mut cfg = RunConfig::default();
    cfg.gen.num_train = 96;
    cfg.gen.num_val = 1;
    cfg.train.schedule.batch_size = 2;
    let ds = generate_dataset(&cfg.gen, 0).unwrap();
    let clip = ClipModel::new(cfg.clip.clone(), cfg.gen.vocab.tokens()).unwrap();
    let tc = TrainConfig {
        schedule: Schedule {
            epochs: 1,
            ..cfg.train.schedule.clone()
        },
        ..cfg.train.clone()
    };
    let train: Vec<Sample> = ds.train.clone();
    let (_, log) = train_detector(
        &train,
        &ds.manifest.vocab,
        new_detector(&cfg).unwrap(),
        &clip,
        &tc,
        0,
        &mut |_, _, _| Ok(()),
    )
    .unwrap();
    let smooth = |w: &[ovdet::train::LossRecord]| {
        w.iter().map(|r| r.loss.total).sum::<f64>() / w.len() as f64
    };
    assert!(smooth(&log[log.len() - 20..]) < smooth(&log[..20]));
}

#[test]
fn generated_annotations_are_byte_stable_and_novel_factors_are_seen() {
    let gen = GenConfig {
        num_train: 10,
        num_val: 5,
        ..GenConfig::default()
    };
    let a = generate_dataset(&gen, 9).unwrap();
    let b = generate_dataset(&gen, 9).unwrap();
    let v = &a.manifest.vocab;
    assert_eq!(
        coco_json(&a.manifest.val, v).unwrap(),
        coco_json(&b.manifest.val, v).unwrap()
    );
    for &n in &v.novel_set {
        let mut parts = v.classes[n].split(' ');
        let (color, shape) = (parts.next().unwrap(), parts.next().unwrap());
        let base = |f: &dyn Fn(&str) -> bool| v.base_set.iter().any(|&c| f(&v.classes[c]));
        assert!(base(&|c: &str| c.starts_with(color)));
        assert!(base(&|c: &str| c.ends_with(shape)));
    }
}

#[test]
fn empty_annotation_list_is_a_valid_manifest() {
    let vocab = VocabSpec::default().vocabulary().unwrap();
    let text = r#"{"images": [{"id": 1, "file_name": "a.png", "width": 64, "height": 64}], "annotations": [], "categories": []}"#;
    let (split, _) = parse_coco(text, &vocab, false).unwrap();
    assert_eq!(split.images.len(), 1);
    assert!(split.annotations.is_empty());
    let r = evaluate(&[], &split, &vocab).unwrap();
    assert_eq!(r.map50_all, 0.0);
}

#[test]
fn empty_predictions_score_zero() {
    let (split, vocab, _) = common::map_fixture();
    let r = evaluate(&[], &split, &vocab).unwrap();
    assert_eq!((r.map50_all, r.map50_base, r.map50_novel), (0.0, 0.0, 0.0));
}

#[test]
fn bench_report_echoes_every_vocabulary_size() {
    let cfg = BenchConfig {
        warmup: 0,
        iterations: 1,
        ..BenchConfig::default()
    };
    let r = bench_decode_scaling(&[1, 10], 8, &cfg).unwrap();
    for k in [1, 10] {
        assert_eq!(r.rows.iter().filter(|row| row.k == k).count(), 2);
    }
    assert!(r.to_csv().lines().count() == 5);
    let k1 = r.ratio("conditional_over_prompt_k1").unwrap();
    assert!(k1 > 0.2 && k1 < 5.0, "k = 1 ratio {k1}");
}
