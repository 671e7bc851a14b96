use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clip::{clip_probs, ClipConfig, ClipModel};
use crate::decoder::{DecoderConfig, Modality, PromptDecoder};
use crate::encoder::{ImageSample, PatchGrid};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub warmup: usize,
    pub iterations: usize,
    /// Per-case wall-clock cap in seconds; `0` always runs every iteration.
    pub time_budget_s: f64,
    /// Minimum timed iterations even when the budget is exhausted.
    pub min_iterations: usize,
    pub k_values: Vec<usize>,
    pub m: usize,
    pub decoder: DecoderConfig,
    pub clip: ClipConfig,
    pub roi_counts: Vec<usize>,
    pub keep_fractions: Vec<f64>,
    /// Classes scored by the CLIP stage.
    pub clip_classes: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            warmup: 5,
            iterations: 100,
            time_budget_s: 0.0,
            min_iterations: 3,
            k_values: vec![10, 100, 1000],
            m: 100,
            decoder: DecoderConfig {
                m: 100,
                d: 64,
                num_layers: 3,
                ..DecoderConfig::default()
            },
            clip: ClipConfig::default(),
            roi_counts: vec![64, 128],
            keep_fractions: vec![1.0, 0.2],
            clip_classes: 16,
            seed: 0,
        }
    }
}

/// Mean and standard deviation of repeated wall-clock timings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingStat {
    pub mean_s: f64,
    pub std_s: f64,
    pub iterations: usize,
    pub warmup: usize,
}

/// Times `f` after `warmup` untimed calls on a monotonic clock.
pub fn time_it(cfg: &BenchConfig, mut f: impl FnMut() -> Result<()>) -> Result<TimingStat> {
    for _ in 0..cfg.warmup {
        f()?;
    }
    let start = Instant::now();
    let mut samples = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations.max(1) {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64());
        if cfg.time_budget_s > 0.0
            && samples.len() >= cfg.min_iterations.max(1)
            && start.elapsed().as_secs_f64() > cfg.time_budget_s
        {
            break;
        }
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    Ok(TimingStat {
        mean_s: mean,
        std_s: var.sqrt(),
        iterations: samples.len(),
        warmup: cfg.warmup,
    })
}

/// One timed case with its configuration echo.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub bench: String,
    pub stage: String,
    pub mode: String,
    pub k: usize,
    pub m: usize,
    pub rois: usize,
    pub epsilon: Option<f64>,
    pub keep_fraction: Option<f64>,
    pub timing: TimingStat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRatio {
    pub name: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
    pub ratios: Vec<BenchRatio>,
}

impl BenchReport {
    pub fn new(config: BenchConfig) -> Self {
        BenchReport {
            config,
            rows: Vec::new(),
            ratios: Vec::new(),
        }
    }

    pub fn ratio(&self, name: &str) -> Option<f64> {
        self.ratios.iter().find(|r| r.name == name).map(|r| r.value)
    }

    pub fn merge(&mut self, other: BenchReport) {
        self.rows.extend(other.rows);
        self.ratios.extend(other.ratios);
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "bench,stage,mode,k,m,rois,epsilon,keep_fraction,mean_s,std_s,iterations,warmup\n",
        );
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let t = &r.timing;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.bench,
                r.stage,
                r.mode,
                r.k,
                r.m,
                r.rois,
                opt(r.epsilon),
                opt(r.keep_fraction),
                t.mean_s,
                t.std_s,
                t.iterations,
                t.warmup
            );
        }
        s
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .expect("sized")
}

/// Times prompt-mode against conditional decoding on identical memory for each
/// vocabulary size, reporting `t_conditional / t_prompt` per `k`.
pub fn bench_decode_scaling(
    k_values: &[usize],
    m: usize,
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    let dcfg = DecoderConfig {
        m,
        ..cfg.decoder.clone()
    };
    let decoder = PromptDecoder::new(dcfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let memory = PatchGrid {
        tokens: random_matrix(64, dcfg.d, &mut rng),
        grid_h: 8,
        grid_w: 8,
    };
    let queries = decoder.query_set();
    let mut report = BenchReport::new(BenchConfig {
        k_values: k_values.to_vec(),
        m,
        ..cfg.clone()
    });
    for &k in k_values {
        if k == 0 {
            return Err(Error::input("vocabulary size must be positive"));
        }
        let raw = random_matrix(k, dcfg.clip_dim, &mut rng);
        let prompts =
            decoder.prompts(&raw, &(0..k).collect::<Vec<_>>(), &vec![Modality::Text; k])?;
        let prompt = time_it(cfg, || {
            decoder
                .decode_prompt(&queries, &prompts, &memory)
                .map(|_| ())
        })?;
        let conditional = time_it(cfg, || {
            decoder
                .decode_conditional(&queries, &prompts, &memory)
                .map(|_| ())
        })?;
        report.ratios.push(BenchRatio {
            name: format!("conditional_over_prompt_k{k}"),
            value: conditional.mean_s / prompt.mean_s,
        });
        for (mode, timing) in [("prompt", prompt), ("conditional", conditional)] {
            report.rows.push(BenchRow {
                bench: "decode_scaling".into(),
                stage: "decode".into(),
                mode: mode.into(),
                k,
                m,
                rois: 0,
                epsilon: None,
                keep_fraction: None,
                timing,
            });
        }
    }
    Ok(report)
}

/// Random RoIs in normalised `cxcywh`.
pub fn random_rois(n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 4]> {
    (0..n)
        .map(|_| {
            let (w, h) = (rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5));
            [
                rng.gen_range(w / 2.0..1.0 - w / 2.0),
                rng.gen_range(h / 2.0..1.0 - h / 2.0),
                w,
                h,
            ]
        })
        .collect()
}

/// Times the CLIP stage: a single unmasked pass, the naive crop-per-RoI loop,
/// the single-pass masked path, and the masked path after pruning to each
/// kept fraction.
pub fn bench_clip_stage(
    roi_counts: &[usize],
    keep_fractions: &[f64],
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    let clip = ClipModel::new(cfg.clip.clone(), crate::data::VocabSpec::default().tokens())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = cfg.clip.image_size;
    let image = ImageSample::new(0, s, s, 3, (0..s * s * 3).map(|_| rng.gen()).collect())?;
    let names = crate::data::VocabSpec::default().vocabulary()?.classes;
    let texts = clip.encode_texts(&names[..cfg.clip_classes.clamp(1, names.len())])?;
    let tau = cfg.clip.temperature;
    let mut report = BenchReport::new(BenchConfig {
        roi_counts: roi_counts.to_vec(),
        keep_fractions: keep_fractions.to_vec(),
        ..cfg.clone()
    });
    let row =
        |stage: &str, mode: &str, rois: usize, keep: Option<f64>, timing: TimingStat| BenchRow {
            bench: "clip_stage".into(),
            stage: stage.into(),
            mode: mode.into(),
            k: texts.rows(),
            m: rois,
            rois,
            epsilon: None,
            keep_fraction: keep,
            timing,
        };
    let single = time_it(cfg, || clip.encode_image(&image).map(|_| ()))?;
    report
        .rows
        .push(row("clip", "single_image", 1, None, single.clone()));
    for &m in roi_counts {
        let rois = random_rois(m, &mut rng);
        let masked = time_it(cfg, || {
            let e = clip.encode_image_rois(&image, &rois)?;
            clip_probs(&e, &texts, tau).map(|_| ())
        })?;
        let naive = time_it(cfg, || {
            let rows = rois
                .iter()
                .map(|b| clip.naive_crop_embed(&image, *b))
                .collect::<Result<Vec<_>>>()?;
            clip_probs(&Matrix::from_rows(&rows)?, &texts, tau).map(|_| ())
        })?;
        report.ratios.push(BenchRatio {
            name: format!("masked_over_single_m{m}"),
            value: masked.mean_s / single.mean_s,
        });
        report.ratios.push(BenchRatio {
            name: format!("naive_over_masked_m{m}"),
            value: naive.mean_s / masked.mean_s,
        });
        for &f in keep_fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::input(format!("keep fraction {f} outside (0, 1]")));
            }
            let kept = ((m as f64 * f).round() as usize).max(1);
            let t = time_it(cfg, || {
                let e = clip.encode_image_rois(&image, &rois[..kept])?;
                clip_probs(&e, &texts, tau).map(|_| ())
            })?;
            report.ratios.push(BenchRatio {
                name: format!("unpruned_over_kept_m{m}_f{f}"),
                value: masked.mean_s / t.mean_s,
            });
            report
                .rows
                .push(row("clip", "masked_pruned", kept, Some(f), t));
        }
        report.rows.push(row("clip", "masked", m, None, masked));
        report.rows.push(row("clip", "naive", m, None, naive));
    }
    Ok(report)
}
