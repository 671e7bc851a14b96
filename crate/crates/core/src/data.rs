//! Synthetic colour × shape scenes, COCO-format annotations and PNG I/O.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{cxcywh_to_xyxy, iou_xyxy};
use crate::encoder::ImageSample;
use crate::error::{Error, Result};
use crate::pipeline::Vocabulary;
use crate::train::GroundTruthSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Cross,
}

impl Shape {
    pub fn parse(name: &str) -> Option<Shape> {
        match name {
            "square" => Some(Shape::Square),
            "circle" => Some(Shape::Circle),
            "triangle" => Some(Shape::Triangle),
            "cross" => Some(Shape::Cross),
            _ => None,
        }
    }

    /// Outline in local units (`[-1, 1]²`); `None` for the circle.
    fn polygon(self) -> Option<Vec<[f64; 2]>> {
        let a = 1.0 / 3.0;
        match self {
            Shape::Circle => None,
            Shape::Square => Some(vec![[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]]),
            Shape::Triangle => Some(vec![[0.0, -1.0], [1.0, 1.0], [-1.0, 1.0]]),
            Shape::Cross => Some(vec![
                [-a, -1.0],
                [a, -1.0],
                [a, -a],
                [1.0, -a],
                [1.0, a],
                [a, a],
                [a, 1.0],
                [-a, 1.0],
                [-a, a],
                [-1.0, a],
                [-1.0, -a],
                [-a, -a],
            ]),
        }
    }
}

/// Named colours available to the generator.
pub fn color_rgb(name: &str) -> Option<[f64; 3]> {
    match name {
        "red" => Some([0.85, 0.12, 0.1]),
        "green" => Some([0.12, 0.72, 0.15]),
        "blue" => Some([0.12, 0.2, 0.88]),
        "yellow" => Some([0.92, 0.85, 0.1]),
        "magenta" => Some([0.85, 0.15, 0.8]),
        "cyan" => Some([0.1, 0.8, 0.85]),
        _ => None,
    }
}

/// Colours, shapes and the held-out (novel) combinations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabSpec {
    pub colors: Vec<String>,
    pub shapes: Vec<String>,
    pub novel: Vec<String>,
}

impl Default for VocabSpec {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        VocabSpec {
            colors: s(&["red", "green", "blue", "yellow"]),
            shapes: s(&["square", "circle", "triangle", "cross"]),
            novel: s(&[
                "red square",
                "green circle",
                "blue triangle",
                "yellow cross",
            ]),
        }
    }
}

impl VocabSpec {
    /// Every colour-shape class in colour-major order, checked for feasibility.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        if self.colors.len() < 3 || self.shapes.len() < 3 {
            return Err(Error::Config("need at least 3 colours and 3 shapes".into()));
        }
        if self.novel.len() < 2 {
            return Err(Error::Config("need at least 2 novel combinations".into()));
        }
        for c in &self.colors {
            color_rgb(c).ok_or_else(|| Error::Config(format!("unknown colour {c}")))?;
        }
        for s in &self.shapes {
            Shape::parse(s).ok_or_else(|| Error::Config(format!("unknown shape {s}")))?;
        }
        let mut names = Vec::new();
        for c in &self.colors {
            for s in &self.shapes {
                names.push(format!("{c} {s}"));
            }
        }
        let novel: Vec<bool> = names.iter().map(|n| self.novel.contains(n)).collect();
        for n in &self.novel {
            if !names.contains(n) {
                return Err(Error::Config(format!(
                    "novel class {n} is not a colour-shape pair"
                )));
            }
        }
        let vocab = Vocabulary::new(names, &novel)?;
        // every factor of a novel class must be seen in some base class
        for &j in &vocab.novel_set {
            let (c, s) = split_name(&vocab.classes[j])?;
            let seen = |f: &dyn Fn(&str, &str) -> bool| {
                vocab.base_set.iter().any(|&b| {
                    let (bc, bs) = split_name(&vocab.classes[b]).expect("built above");
                    f(bc, bs)
                })
            };
            if !seen(&|bc, _| bc == c) || !seen(&|_, bs| bs == s) {
                return Err(Error::Config(format!(
                    "novel class {} has a factor absent from base classes",
                    vocab.classes[j]
                )));
            }
        }
        Ok(vocab)
    }

    pub fn tokens(&self) -> Vec<String> {
        self.colors.iter().chain(&self.shapes).cloned().collect()
    }
}

fn split_name(name: &str) -> Result<(&str, &str)> {
    name.split_once(' ')
        .ok_or_else(|| Error::input(format!("class name {name:?} is not `colour shape`")))
}

/// One rendered object. `bbox` is the tight normalised `cxcywh` box of the
/// rotated shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class_name: String,
    pub center: [f64; 2],
    /// Half extents before rotation, normalised by the canvas size.
    pub half: [f64; 2],
    pub rotation: f64,
    pub color: [f64; 3],
    pub bbox: [f64; 4],
}

impl SceneObject {
    pub fn new(
        class_name: &str,
        center: [f64; 2],
        half: [f64; 2],
        rotation: f64,
        color: [f64; 3],
    ) -> Result<Self> {
        let (_, s) = split_name(class_name)?;
        let shape = Shape::parse(s).ok_or_else(|| Error::input(format!("unknown shape {s}")))?;
        let mut obj = SceneObject {
            class_name: class_name.to_string(),
            center,
            half,
            rotation,
            color,
            bbox: [0.0; 4],
        };
        obj.bbox = match shape.polygon() {
            None => [center[0], center[1], 2.0 * half[0], 2.0 * half[0]],
            Some(poly) => {
                let pts: Vec<[f64; 2]> = poly.iter().map(|p| obj.to_canvas(*p)).collect();
                let (mut x1, mut y1, mut x2, mut y2) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
                for p in pts {
                    x1 = x1.min(p[0]);
                    y1 = y1.min(p[1]);
                    x2 = x2.max(p[0]);
                    y2 = y2.max(p[1]);
                }
                [0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1]
            }
        };
        Ok(obj)
    }

    fn shape(&self) -> Shape {
        Shape::parse(self.class_name.split_once(' ').map(|s| s.1).unwrap_or(""))
            .expect("validated on construction")
    }

    fn to_canvas(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        let (x, y) = (p[0] * self.half[0], p[1] * self.half[1]);
        [
            self.center[0] + c * x - s * y,
            self.center[1] + s * x + c * y,
        ]
    }

    /// Whether a normalised canvas point lies inside the shape.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let shape = self.shape();
        if shape == Shape::Circle {
            let (dx, dy) = (x - self.center[0], y - self.center[1]);
            return dx * dx + dy * dy <= self.half[0] * self.half[0];
        }
        let poly: Vec<[f64; 2]> = shape
            .polygon()
            .expect("polygon")
            .iter()
            .map(|p| self.to_canvas(*p))
            .collect();
        let mut inside = false;
        let n = poly.len();
        for i in 0..n {
            let (a, b) = (poly[i], poly[(i + n - 1) % n]);
            if (a[1] > y) != (b[1] > y) && x < (b[0] - a[0]) * (y - a[1]) / (b[1] - a[1]) + a[0] {
                inside = !inside;
            }
        }
        inside
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub objects: Vec<SceneObject>,
    pub noise: f64,
    pub seed: u64,
}

/// Samples per pixel side used for anti-aliasing.
const SUPERSAMPLE: usize = 4;

/// Rasterises a scene: a noisy grey background with anti-aliased shapes drawn
/// in order. Pixel values are quantised to 8 bits so PNG round trips are exact.
pub fn render_scene(spec: &SceneSpec) -> ImageSample {
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_1234);
    let base: f64 = rng.gen_range(0.35..0.6);
    let mut px = vec![0.0; w * h * 3];
    for v in px.chunks_mut(3) {
        let n = rng.gen_range(-spec.noise..=spec.noise);
        for c in v.iter_mut() {
            *c = base + n + rng.gen_range(-0.3 * spec.noise..=0.3 * spec.noise);
        }
    }
    let inv = 1.0 / SUPERSAMPLE as f64;
    for obj in &spec.objects {
        let xy = cxcywh_to_xyxy(obj.bbox);
        let x0 = ((xy[0] * w as f64).floor().max(0.0)) as usize;
        let x1 = ((xy[2] * w as f64).ceil() as usize).min(w);
        let y0 = ((xy[1] * h as f64).floor().max(0.0)) as usize;
        let y1 = ((xy[3] * h as f64).ceil() as usize).min(h);
        for py in y0..y1 {
            for pxl in x0..x1 {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let x = (pxl as f64 + (sx as f64 + 0.5) * inv) / w as f64;
                        let y = (py as f64 + (sy as f64 + 0.5) * inv) / h as f64;
                        hits += obj.contains(x, y) as usize;
                    }
                }
                if hits == 0 {
                    continue;
                }
                let a = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                let o = (py * w + pxl) * 3;
                for c in 0..3 {
                    px[o + c] = (1.0 - a) * px[o + c] + a * obj.color[c];
                }
            }
        }
    }
    for v in &mut px {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    ImageSample::new(spec.seed, w, h, 3, px).expect("sized")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub num_train: usize,
    pub num_val: usize,
    pub image_size: usize,
    pub max_objects: usize,
    /// Object extent range as a fraction of the canvas side.
    pub min_size: f64,
    pub max_size: f64,
    /// Largest allowed IoU between two objects of one scene.
    pub max_iou: f64,
    pub max_rotation: f64,
    pub noise: f64,
    pub vocab: VocabSpec,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_train: 500,
            num_val: 100,
            image_size: 64,
            max_objects: 6,
            min_size: 0.25,
            max_size: 0.45,
            max_iou: 0.1,
            max_rotation: 0.3,
            noise: 0.04,
            vocab: VocabSpec::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_objects > 6 {
            return Err(Error::Config("at most 6 objects per scene".into()));
        }
        if !(self.max_iou >= 0.0 && self.max_iou <= 0.3) {
            return Err(Error::Config("max_iou must lie in [0, 0.3]".into()));
        }
        if !(0.0 < self.min_size && self.min_size <= self.max_size && self.max_size < 1.0) {
            return Err(Error::Config(
                "object sizes must satisfy 0 < min ≤ max < 1".into(),
            ));
        }
        if self.image_size == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        self.vocab.vocabulary().map(|_| ())
    }
}

/// Stable per-item seed derivation.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_object(cfg: &GenConfig, class_name: &str, rng: &mut ChaCha8Rng) -> Result<SceneObject> {
    let (color_name, _) = split_name(class_name)?;
    let base = color_rgb(color_name)
        .ok_or_else(|| Error::input(format!("unknown colour {color_name}")))?;
    let color = base.map(|c| (c + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0));
    let size = rng.gen_range(cfg.min_size..=cfg.max_size) * 0.5;
    let aspect: f64 = rng.gen_range(0.85..1.15);
    let half = if class_name.ends_with("circle") {
        [size, size]
    } else {
        [size * aspect, size / aspect]
    };
    let rotation = if cfg.max_rotation > 0.0 {
        rng.gen_range(-cfg.max_rotation..=cfg.max_rotation)
    } else {
        0.0
    };
    let probe = SceneObject::new(class_name, [0.5, 0.5], half, rotation, color)?;
    let (w, h) = (probe.bbox[2], probe.bbox[3]);
    if w > 1.0 || h > 1.0 {
        return Err(Error::input("object does not fit the canvas"));
    }
    // the box offset from the centre does not depend on where the centre is
    let (ox, oy) = (probe.bbox[0] - 0.5, probe.bbox[1] - 0.5);
    let cx = rng.gen_range(w / 2.0..=1.0 - w / 2.0) - ox;
    let cy = rng.gen_range(h / 2.0..=1.0 - h / 2.0) - oy;
    SceneObject::new(class_name, [cx, cy], half, rotation, color)
}

/// Samples a scene whose classes are drawn from `classes`.
pub fn sample_scene(cfg: &GenConfig, classes: &[&str], seed: u64) -> Result<SceneSpec> {
    for attempt in 0..100u64 {
        let scene_seed = if attempt == 0 {
            seed
        } else {
            derive_seed(seed, 0xA77E, attempt)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
        let n = rng.gen_range(0..=cfg.max_objects);
        let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
        let mut ok = true;
        for _ in 0..n {
            let class = classes[rng.gen_range(0..classes.len())];
            let mut placed = false;
            for _ in 0..40 {
                let Ok(obj) = sample_object(cfg, class, &mut rng) else {
                    continue;
                };
                let b = cxcywh_to_xyxy(obj.bbox);
                if objects
                    .iter()
                    .all(|o| iou_xyxy(cxcywh_to_xyxy(o.bbox), b) <= cfg.max_iou)
                {
                    objects.push(obj);
                    placed = true;
                    break;
                }
            }
            if !placed {
                ok = false;
                break;
            }
        }
        if ok {
            return Ok(SceneSpec {
                width: cfg.image_size,
                height: cfg.image_size,
                objects,
                noise: cfg.noise,
                seed: scene_seed,
            });
        }
    }
    Err(Error::input("could not place objects without overlap"))
}

/// A rendered image with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: ImageSample,
    pub file_name: String,
    pub gt: GroundTruthSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub class_index: usize,
    /// Normalised `cxcywh`.
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Annotation>,
}

impl Split {
    pub fn ground_truth(&self, image_id: u64) -> GroundTruthSet {
        let mut gt = GroundTruthSet::default();
        for a in self.annotations.iter().filter(|a| a.image_id == image_id) {
            gt.boxes.push(a.bbox);
            gt.class_indices.push(a.class_index);
        }
        gt
    }

    fn check(&self, vocab: &Vocabulary, base_only: bool) -> Result<()> {
        for a in &self.annotations {
            if a.class_index >= vocab.len() {
                return Err(Error::input(format!(
                    "annotation {} has class {} outside the vocabulary",
                    a.id, a.class_index
                )));
            }
            if base_only && vocab.is_novel(a.class_index) {
                return Err(Error::input(format!(
                    "training annotation {} uses novel class {}",
                    a.id, vocab.classes[a.class_index]
                )));
            }
            let b = cxcywh_to_xyxy(a.bbox);
            if !(a.bbox[2] > 0.0
                && a.bbox[3] > 0.0
                && b[0] >= -1e-9
                && b[1] >= -1e-9
                && b[2] <= 1.0 + 1e-9
                && b[3] <= 1.0 + 1e-9)
            {
                return Err(Error::input(format!(
                    "annotation {} has an invalid box",
                    a.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub vocab: Vocabulary,
    pub train: Split,
    pub val: Split,
}

/// Generated dataset: manifest plus rendered images.
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

fn generate_split(
    cfg: &GenConfig,
    vocab: &Vocabulary,
    classes: &[usize],
    tag: &str,
    stream: u64,
    count: usize,
    seed: u64,
    id_base: u64,
) -> Result<(Split, Vec<Sample>)> {
    let names: Vec<&str> = classes.iter().map(|&i| vocab.classes[i].as_str()).collect();
    let mut split = Split::default();
    let mut samples = Vec::with_capacity(count);
    let mut ann_id = id_base * 10;
    for i in 0..count {
        let id = id_base + i as u64;
        let scene = sample_scene(cfg, &names, derive_seed(seed, stream, i as u64))?;
        let mut image = render_scene(&scene);
        image.image_id = id;
        let file_name = format!("{tag}_{i:06}.png");
        let mut gt = GroundTruthSet::default();
        for obj in &scene.objects {
            let class_index = vocab
                .index_of(&obj.class_name)
                .expect("sampled from vocabulary");
            split.annotations.push(Annotation {
                id: ann_id,
                image_id: id,
                class_index,
                bbox: obj.bbox,
            });
            ann_id += 1;
            gt.boxes.push(obj.bbox);
            gt.class_indices.push(class_index);
        }
        split.images.push(ImageRecord {
            id,
            file_name: file_name.clone(),
            width: cfg.image_size,
            height: cfg.image_size,
        });
        samples.push(Sample {
            image,
            file_name,
            gt,
        });
    }
    Ok((split, samples))
}

/// Renders a train split (base classes only) and a val split (all classes).
pub fn generate_dataset(cfg: &GenConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let vocab = cfg.vocab.vocabulary()?;
    let all: Vec<usize> = (0..vocab.len()).collect();
    let (train_split, train) = generate_split(
        cfg,
        &vocab,
        &vocab.base_set,
        "train",
        1,
        cfg.num_train,
        seed,
        1,
    )?;
    let (val_split, val) =
        generate_split(cfg, &vocab, &all, "val", 2, cfg.num_val, seed, 1_000_000)?;
    train_split.check(&vocab, true)?;
    Ok(Dataset {
        manifest: DatasetManifest {
            vocab,
            train: train_split,
            val: val_split,
        },
        train,
        val,
    })
}

#[derive(Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    area: f64,
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

/// Serialises a split in COCO format (pixel `xywh` boxes).
pub fn coco_json(split: &Split, vocab: &Vocabulary) -> Result<String> {
    let size: std::collections::HashMap<u64, (f64, f64)> = split
        .images
        .iter()
        .map(|i| (i.id, (i.width as f64, i.height as f64)))
        .collect();
    let mut annotations = Vec::with_capacity(split.annotations.len());
    for a in &split.annotations {
        let (w, h) = *size.get(&a.image_id).ok_or_else(|| {
            Error::input(format!(
                "annotation {} references unknown image {}",
                a.id, a.image_id
            ))
        })?;
        let b = cxcywh_to_xyxy(a.bbox);
        let bbox = [b[0] * w, b[1] * h, a.bbox[2] * w, a.bbox[3] * h];
        annotations.push(CocoAnnotation {
            id: a.id,
            image_id: a.image_id,
            category_id: vocab.category_ids[a.class_index],
            bbox,
            area: bbox[2] * bbox[3],
            iscrowd: 0,
        });
    }
    let file = CocoFile {
        images: split
            .images
            .iter()
            .map(|i| CocoImage {
                id: i.id,
                file_name: i.file_name.clone(),
                width: i.width,
                height: i.height,
            })
            .collect(),
        annotations,
        categories: vocab
            .classes
            .iter()
            .zip(&vocab.category_ids)
            .map(|(name, &id)| CocoCategory {
                id,
                name: name.clone(),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

/// Parses COCO JSON, mapping categories to `vocab` by name. Returns the split
/// and the vocabulary with category ids taken from the file.
pub fn parse_coco(text: &str, vocab: &Vocabulary, base_only: bool) -> Result<(Split, Vocabulary)> {
    let file: CocoFile = serde_json::from_str(text).map_err(|e| {
        Error::Parse(format!(
            "COCO JSON at line {} column {}: {e}",
            e.line(),
            e.column()
        ))
    })?;
    let mut ids = vocab.category_ids.clone();
    let mut by_category = std::collections::HashMap::new();
    for c in &file.categories {
        let idx = vocab.index_of(&c.name).ok_or_else(|| {
            Error::input(format!("category {:?} is not in the vocabulary", c.name))
        })?;
        ids[idx] = c.id;
        by_category.insert(c.id, idx);
    }
    let vocab = Vocabulary::with_ids(
        vocab.classes.clone(),
        ids,
        &(0..vocab.len())
            .map(|i| vocab.is_novel(i))
            .collect::<Vec<_>>(),
    )?;
    let size: std::collections::HashMap<u64, (f64, f64)> = file
        .images
        .iter()
        .map(|i| (i.id, (i.width as f64, i.height as f64)))
        .collect();
    let mut split = Split {
        images: file
            .images
            .into_iter()
            .map(|i| ImageRecord {
                id: i.id,
                file_name: i.file_name,
                width: i.width,
                height: i.height,
            })
            .collect(),
        annotations: Vec::with_capacity(file.annotations.len()),
    };
    for a in file.annotations {
        let class_index = *by_category.get(&a.category_id).ok_or_else(|| {
            Error::input(format!(
                "annotation {} has unknown category {}",
                a.id, a.category_id
            ))
        })?;
        let (w, h) = *size.get(&a.image_id).ok_or_else(|| {
            Error::input(format!(
                "annotation {} references unknown image {}",
                a.id, a.image_id
            ))
        })?;
        let b = a.bbox;
        split.annotations.push(Annotation {
            id: a.id,
            image_id: a.image_id,
            class_index,
            bbox: [
                (b[0] + 0.5 * b[2]) / w,
                (b[1] + 0.5 * b[3]) / h,
                b[2] / w,
                b[3] / h,
            ],
        });
    }
    split.check(&vocab, base_only)?;
    Ok((split, vocab))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads one COCO annotation file against a vocabulary flag file.
pub fn load_coco_annotations(
    path: &Path,
    vocab_path: &Path,
    base_only: bool,
) -> Result<(Split, Vocabulary)> {
    let vocab = Vocabulary::parse_flags(&read(vocab_path)?)?;
    parse_coco(&read(path)?, &vocab, base_only)
}

/// Standard file names inside a dataset directory.
pub struct DatasetPaths {
    pub root: PathBuf,
}

impl DatasetPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetPaths { root: root.into() }
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.txt")
    }

    pub fn annotations(&self, split: &str) -> PathBuf {
        self.root.join(format!("{split}.json"))
    }

    pub fn images(&self) -> PathBuf {
        self.root.join("images")
    }
}

pub fn save_png(image: &ImageSample, path: &Path) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::input("PNG export needs 3 channels"));
    }
    let bytes: Vec<u8> = image
        .pixels()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(image.width() as u32, image.height() as u32, bytes)
        .expect("sized");
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_png(path: &Path, image_id: u64) -> Result<ImageSample> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)?.to_rgb8();
    let (w, h) = img.dimensions();
    let pixels = img
        .into_raw()
        .into_iter()
        .map(|b| b as f64 / 255.0)
        .collect();
    ImageSample::new(image_id, w as usize, h as usize, 3, pixels)
}

/// Writes `vocab.txt`, `train.json`, `val.json` and all PNGs under `root`.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    let paths = DatasetPaths::new(root);
    fs::create_dir_all(paths.images()).map_err(|e| Error::io(paths.images(), e))?;
    let m = &dataset.manifest;
    write(&paths.vocab(), &m.vocab.to_flags())?;
    write(&paths.annotations("train"), &coco_json(&m.train, &m.vocab)?)?;
    write(&paths.annotations("val"), &coco_json(&m.val, &m.vocab)?)?;
    for s in dataset.train.iter().chain(&dataset.val) {
        save_png(&s.image, &paths.images().join(&s.file_name))?;
    }
    Ok(())
}

/// Reads the manifest of a dataset directory.
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let paths = DatasetPaths::new(root);
    let vocab = Vocabulary::parse_flags(&read(&paths.vocab())?)?;
    let (train, vocab) = parse_coco(&read(&paths.annotations("train"))?, &vocab, true)?;
    let (val, vocab) = parse_coco(&read(&paths.annotations("val"))?, &vocab, false)?;
    Ok(DatasetManifest { vocab, train, val })
}

/// Loads the images of one split with their ground truth.
pub fn load_samples(root: &Path, split: &Split) -> Result<Vec<Sample>> {
    let dir = DatasetPaths::new(root).images();
    split
        .images
        .iter()
        .map(|r| {
            Ok(Sample {
                image: load_png(&dir.join(&r.file_name), r.id)?,
                file_name: r.file_name.clone(),
                gt: split.ground_truth(r.id),
            })
        })
        .collect()
}

/// A CLIP pretraining example: an object crop, or a whole scene with the
/// object's box used as a RoI mask.
#[derive(Clone, Debug)]
pub struct ClipSample {
    pub image: ImageSample,
    /// Box of the depicted object.
    pub bbox: [f64; 4],
    /// Present when the sample is scored through its RoI mask rather than
    /// as a whole image.
    pub roi: Option<[f64; 4]>,
    pub class_index: usize,
}

/// Object-centred crops for every class: a single shape filling most of a
/// `size × size` canvas.
pub fn generate_crops(
    cfg: &GenConfig,
    vocab: &Vocabulary,
    per_class: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<ClipSample>> {
    let crop_cfg = GenConfig {
        image_size: size,
        min_size: 0.45,
        max_size: 0.7,
        ..cfg.clone()
    };
    let mut out = Vec::with_capacity(per_class * vocab.len());
    for i in 0..per_class {
        for (c, name) in vocab.classes.iter().enumerate() {
            let s = derive_seed(seed, 3 + c as u64, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let obj = sample_object(&crop_cfg, name, &mut rng)?;
            let bbox = obj.bbox;
            let mut image = render_scene(&SceneSpec {
                width: size,
                height: size,
                objects: vec![obj],
                noise: cfg.noise,
                seed: s,
            });
            image.image_id = out.len() as u64;
            out.push(ClipSample {
                bbox,
                image,
                roi: None,
                class_index: c,
            });
        }
    }
    Ok(out)
}

/// Scene objects of every class paired with their boxes as RoIs.
pub fn generate_roi_samples(
    cfg: &GenConfig,
    vocab: &Vocabulary,
    scenes: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<ClipSample>> {
    let scene_cfg = GenConfig {
        image_size: size,
        ..cfg.clone()
    };
    let names: Vec<&str> = vocab.classes.iter().map(|s| s.as_str()).collect();
    let mut out = Vec::new();
    for i in 0..scenes {
        let scene = sample_scene(&scene_cfg, &names, derive_seed(seed, 99, i as u64))?;
        let image = render_scene(&scene);
        for obj in &scene.objects {
            out.push(ClipSample {
                image: image.clone(),
                bbox: obj.bbox,
                roi: Some(obj.bbox),
                class_index: vocab
                    .index_of(&obj.class_name)
                    .expect("sampled from vocabulary"),
            });
        }
    }
    Ok(out)
}
