use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ovdet::checkpoint;
use ovdet::clip::ClipModel;
use ovdet::config::RunConfig;
use ovdet::data::{
    generate_dataset, load_coco_annotations, load_manifest, load_png, load_samples, write_dataset,
    DatasetPaths,
};
use ovdet::eval::{bench_clip_stage, bench_decode_scaling, evaluate};
use ovdet::pipeline::{detect, CocoResult, Detection, Detector, OvdModels, Vocabulary};
use ovdet::run::{detect_all, pretrain_csv, run_pretrain, run_train};
use ovdet::train::loss_csv;
use ovdet::{Error, Result};

#[derive(Parser)]
#[command(
    name = "ovdet",
    version,
    about = "Open-vocabulary detection on synthetic scenes"
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dotted config override, e.g. `ensemble.beta=1.0`. Repeatable.
    #[arg(long = "set", value_name = "K=V", global = true)]
    set: Vec<String>,
    /// Output directory; relative config paths resolve against it.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic train/val dataset.
    Gen,
    /// Contrastively pretrain the CLIP stand-in on all classes.
    Pretrain,
    /// Train the detector on base classes against the frozen CLIP.
    Train,
    /// Detect objects; defaults to the validation split.
    Detect {
        /// PNG files to run on instead of the validation split.
        images: Vec<PathBuf>,
    },
    /// Score detections against COCO-style annotations.
    Eval {
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Time decoding modes and the CLIP stage.
    Bench,
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p, &cli.set)?,
        None => RunConfig::from_toml_with_overrides("", &cli.set)?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn vocabulary(cfg: &RunConfig, data: &Path) -> Result<Vocabulary> {
    let path = DatasetPaths::new(data).vocab();
    match fs::read_to_string(&path) {
        Ok(text) => Vocabulary::parse_flags(&text),
        Err(_) => cfg.gen.vocab.vocabulary(),
    }
}

fn load_models(cfg: &RunConfig, out: &Path) -> Result<OvdModels> {
    let (clip, _) =
        checkpoint::load::<ClipModel>(cfg.paths.resolve(out, &cfg.paths.clip_checkpoint), "clip")?;
    let (detector, _) = checkpoint::load::<Detector>(
        cfg.paths.resolve(out, &cfg.paths.detector_checkpoint),
        "detector",
    )?;
    Ok(OvdModels { detector, clip })
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = &cli.out;
    let data = cfg.paths.resolve(out, &cfg.paths.data_dir);
    match &cli.cmd {
        Cmd::Gen => {
            let ds = generate_dataset(&cfg.gen, cfg.seed)?;
            write_dataset(&ds, &data)?;
            write(&out.join("config.toml"), &cfg.to_toml()?)?;
            eprintln!(
                "{} train / {} val images in {}",
                ds.train.len(),
                ds.val.len(),
                data.display()
            );
        }
        Cmd::Pretrain => {
            let vocab = vocabulary(&cfg, &data)?;
            let o = run_pretrain(&cfg, &vocab)?;
            eprintln!(
                "held-out retrieval: crops {:.3} (novel {:.3}), RoIs {:.3}",
                o.crop_accuracy, o.novel_crop_accuracy, o.roi_accuracy
            );
            checkpoint::save(
                cfg.paths.resolve(out, &cfg.paths.clip_checkpoint),
                "clip",
                &cfg,
                &o.model,
            )?;
            write(&out.join("pretrain_log.csv"), &pretrain_csv(&o.log))?;
        }
        Cmd::Train => {
            let manifest = load_manifest(&data)?;
            let train = load_samples(&data, &manifest.train)?;
            let (clip, _) = checkpoint::load::<ClipModel>(
                cfg.paths.resolve(out, &cfg.paths.clip_checkpoint),
                "clip",
            )?;
            let every = cfg.paths.checkpoint_every;
            let dir = cfg.paths.resolve(out, &cfg.paths.checkpoint_dir);
            let mut on_epoch =
                |epoch: usize, d: &Detector, log: &[ovdet::train::LossRecord]| -> Result<()> {
                    if let Some(last) = log.last() {
                        eprintln!("epoch {epoch}: loss {:.4}", last.loss.total);
                    }
                    if every > 0 && (epoch + 1) % every == 0 {
                        checkpoint::save(
                            dir.join(format!("detector_epoch{:03}.json", epoch + 1)),
                            "detector",
                            &cfg,
                            d,
                        )?;
                    }
                    Ok(())
                };
            let (detector, log) = run_train(&cfg, &train, &manifest.vocab, &clip, &mut on_epoch)?;
            checkpoint::save(
                cfg.paths.resolve(out, &cfg.paths.detector_checkpoint),
                "detector",
                &cfg,
                &detector,
            )?;
            write(&out.join("loss.csv"), &loss_csv(&log))?;
        }
        Cmd::Detect { images } => {
            let vocab = vocabulary(&cfg, &data)?;
            let models = load_models(&cfg, out)?;
            let dets: Vec<Detection> = if images.is_empty() {
                let manifest = load_manifest(&data)?;
                detect_all(
                    &load_samples(&data, &manifest.val)?,
                    &manifest.vocab,
                    &models,
                    &cfg.ensemble,
                    &cfg,
                )?
            } else {
                let mut all = Vec::new();
                for (i, p) in images.iter().enumerate() {
                    let image = load_png(p, i as u64)?;
                    all.extend(detect(
                        &image,
                        &vocab,
                        &models,
                        &cfg.ensemble,
                        cfg.detect.score_floor,
                        cfg.detect.top_n,
                    )?);
                }
                all
            };
            let coco: Vec<CocoResult> = dets.iter().map(|d| d.to_coco(&vocab)).collect();
            write(
                &out.join("results.json"),
                &serde_json::to_string_pretty(&coco)?,
            )?;
        }
        Cmd::Eval {
            results,
            annotations,
        } => {
            let paths = DatasetPaths::new(&data);
            let ann = annotations
                .clone()
                .unwrap_or_else(|| paths.annotations("val"));
            let (split, vocab) = load_coco_annotations(&ann, &paths.vocab(), false)?;
            let res = results.clone().unwrap_or_else(|| out.join("results.json"));
            let text = fs::read_to_string(&res).map_err(|e| Error::Io {
                path: res.display().to_string(),
                source: e,
            })?;
            let coco: Vec<CocoResult> = serde_json::from_str(&text)?;
            let dets = coco
                .iter()
                .map(|r| Detection::from_coco(r, &vocab))
                .collect::<Result<Vec<_>>>()?;
            let report = evaluate(&dets, &split, &vocab)?;
            println!(
                "mAP50 all {:.4} base {:.4} novel {:.4}",
                report.map50_all, report.map50_base, report.map50_novel
            );
            write(&out.join("eval.json"), &report.to_json()?)?;
            write(&out.join("eval.csv"), &report.to_csv())?;
        }
        Cmd::Bench => {
            let b = &cfg.bench;
            let mut report = bench_decode_scaling(&b.k_values, b.m, b)?;
            report.merge(bench_clip_stage(&b.roi_counts, &b.keep_fractions, b)?);
            for r in &report.ratios {
                println!("{} = {:.3}", r.name, r.value);
            }
            write(&out.join("bench.json"), &report.to_json()?)?;
            write(&out.join("bench.csv"), &report.to_csv())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) => 2,
                Error::Io { .. } => 3,
                Error::Checkpoint(_) | Error::Version { .. } => 4,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
