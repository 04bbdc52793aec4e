//! Synthetic driving-scene analog: flat-shaded geometric objects on textured
//! backgrounds, with COCO-like annotations and raw tensor image files.
//!
//! Rasterization uses integer arithmetic only, and every image draws from
//! its own ChaCha stream selected by image index, so output does not depend
//! on platform or generation order.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{BBox, Target};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::Sample;

pub const IMAGE_MAGIC: &[u8] = b"CFEKIT-I v1\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rect,
    Frame,
    Ellipse,
    Ring,
    TriangleUp,
    TriangleDown,
    Diamond,
    Cross,
    Saltire,
    Stripes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub shape: ShapeKind,
    /// Inclusive range of the longer side, in pixels.
    pub size: (u32, u32),
    /// Height over width.
    #[serde(default = "one")]
    pub aspect: f64,
    /// Relative sampling frequency.
    #[serde(default = "one")]
    pub weight: f64,
    /// Counts toward the small-object mAP.
    #[serde(default)]
    pub small: bool,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: u32,
    pub categories: Vec<CategorySpec>,
    pub objects_per_image: (u32, u32),
    /// 0 gives a flat background; 1 full texture and distractors.
    pub clutter_level: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// Ten categories at 64 px. Lights and signs are the small classes;
    /// trains almost never occur.
    pub fn toy(seed: u64) -> Self {
        let c = |name: &str, shape, lo, hi, aspect, weight, small| CategorySpec {
            name: name.into(),
            shape,
            size: (lo, hi),
            aspect,
            weight,
            small,
        };
        SceneSpec {
            image_size: 64,
            categories: vec![
                c("car", ShapeKind::Rect, 10, 24, 0.7, 0.20, false),
                c("bus", ShapeKind::Frame, 16, 34, 0.75, 0.06, false),
                c("truck", ShapeKind::TriangleUp, 12, 28, 1.0, 0.07, false),
                c("person", ShapeKind::Ellipse, 6, 18, 1.6, 0.12, false),
                c("rider", ShapeKind::Cross, 8, 18, 1.0, 0.05, false),
                c("bike", ShapeKind::Ring, 8, 20, 1.0, 0.06, false),
                c("motor", ShapeKind::TriangleDown, 8, 20, 1.0, 0.05, false),
                c("traffic light", ShapeKind::Stripes, 5, 11, 2.0, 0.17, true),
                c("traffic sign", ShapeKind::Diamond, 5, 11, 1.0, 0.20, true),
                c("train", ShapeKind::Saltire, 20, 36, 1.0, 0.002, false),
            ],
            objects_per_image: (2, 5),
            clutter_level: 0.5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::invalid("scene spec has no categories"));
        }
        if self.image_size < 8 {
            return Err(Error::invalid("image_size must be at least 8"));
        }
        for c in &self.categories {
            if c.size.0 == 0 || c.size.0 > c.size.1 || c.size.1 > self.image_size {
                return Err(Error::invalid(format!("category {:?} has bad size range {:?}", c.name, c.size)));
            }
            if !(c.aspect > 0.0) || !(c.weight >= 0.0) {
                return Err(Error::invalid(format!("category {:?} needs aspect > 0 and weight ≥ 0", c.name)));
            }
        }
        if !self.categories.iter().any(|c| c.size.1 < 32) {
            return Err(Error::invalid("at least one category must stay below 32 px"));
        }
        if self.categories.iter().map(|c| c.weight).sum::<f64>() <= 0.0 {
            return Err(Error::invalid("category weights sum to zero"));
        }
        let (lo, hi) = self.objects_per_image;
        if lo > hi || hi == 0 {
            return Err(Error::invalid(format!("objects_per_image range ({lo}, {hi}) is empty")));
        }
        if !(0.0..=1.0).contains(&self.clutter_level) {
            return Err(Error::invalid("clutter_level must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: SceneSpec = serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "scene spec",
            detail: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
}

impl Annotation {
    pub fn area(&self) -> f64 {
        self.bbox[2] * self.bbox[3]
    }

    pub fn to_box(&self) -> BBox<f64> {
        let [x, y, w, h] = self.bbox;
        BBox {
            x_min: x,
            y_min: y,
            x_max: x + w,
            y_max: y + h,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u32,
    pub name: String,
    #[serde(default)]
    pub small: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
}

fn ann_err(detail: String) -> Error {
    Error::Format {
        what: "annotation file",
        detail,
    }
}

impl AnnotationFile {
    pub fn validate(&self) -> Result<()> {
        let mut sizes = BTreeMap::new();
        for (i, im) in self.images.iter().enumerate() {
            if sizes.insert(im.id, (im.width, im.height)).is_some() {
                return Err(ann_err(format!("images[{i}]: duplicate image id {}", im.id)));
            }
        }
        let cats: HashSet<u32> = self.categories.iter().map(|c| c.id).collect();
        if cats.len() != self.categories.len() {
            return Err(ann_err("duplicate category id".into()));
        }
        let mut ids = HashSet::new();
        for (i, a) in self.annotations.iter().enumerate() {
            let &(w, h) = sizes.get(&a.image_id).ok_or_else(|| {
                ann_err(format!("annotations[{i}]: image_id {} does not exist", a.image_id))
            })?;
            if !cats.contains(&a.category_id) {
                return Err(ann_err(format!(
                    "annotations[{i}]: category_id {} does not exist",
                    a.category_id
                )));
            }
            if !ids.insert(a.id) {
                return Err(ann_err(format!("annotations[{i}]: duplicate annotation id {}", a.id)));
            }
            let [x, y, bw, bh] = a.bbox;
            let inside = x >= 0.0 && y >= 0.0 && bw >= 0.0 && bh >= 0.0
                && x + bw <= w as f64 && y + bh <= h as f64;
            if !inside {
                return Err(ann_err(format!(
                    "annotations[{i}]: bbox {:?} outside {w}×{h} image {}",
                    a.bbox, a.image_id
                )));
            }
        }
        Ok(())
    }

    pub fn category_index(&self, id: u32) -> Option<usize> {
        self.categories.iter().position(|c| c.id == id)
    }

    pub fn annotations_for(&self, image_id: u64) -> impl Iterator<Item = &Annotation> {
        self.annotations.iter().filter(move |a| a.image_id == image_id)
    }

    /// Keeps only the listed images and their annotations.
    pub fn subset(&self, image_ids: &[u64]) -> AnnotationFile {
        let keep: HashSet<u64> = image_ids.iter().copied().collect();
        AnnotationFile {
            images: self.images.iter().filter(|i| keep.contains(&i.id)).cloned().collect(),
            annotations: self
                .annotations
                .iter()
                .filter(|a| keep.contains(&a.image_id))
                .cloned()
                .collect(),
            categories: self.categories.clone(),
        }
    }
}

pub fn save_annotations(path: &Path, file: &AnnotationFile) -> Result<()> {
    let text = serde_json::to_string_pretty(file).expect("annotations serialize");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_annotations(path: &Path) -> Result<AnnotationFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: AnnotationFile = serde_json::from_str(&text).map_err(|e| {
        ann_err(format!("{}: line {} column {}: {e}", path.display(), e.line(), e.column()))
    })?;
    file.validate()?;
    Ok(file)
}

pub fn write_image<W: Write>(w: &mut W, image: &Tensor<f32>) -> std::io::Result<()> {
    let [n, c, h, wd] = image.shape();
    assert_eq!(n, 1, "image files hold one image");
    w.write_all(IMAGE_MAGIC)?;
    for d in [c, h, wd] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in image.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_image<R: Read>(r: &mut R) -> Result<Tensor<f32>> {
    let err = |d: &str| Error::Format {
        what: "image file",
        detail: d.to_string(),
    };
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| err(&e.to_string()))?;
    if !bytes.starts_with(IMAGE_MAGIC) {
        return Err(err("missing CFEKIT-I v1 header"));
    }
    let body = &bytes[IMAGE_MAGIC.len()..];
    if body.len() < 12 {
        return Err(err("truncated dimensions"));
    }
    let dim = |i: usize| u32::from_le_bytes([body[i], body[i + 1], body[i + 2], body[i + 3]]) as usize;
    let (c, h, w) = (dim(0), dim(4), dim(8));
    let values = &body[12..];
    if values.len() != c * h * w * 4 {
        return Err(err(&format!("expected {} values, found {} bytes", c * h * w, values.len())));
    }
    let data = values
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new([1, c, h, w], data)
}

pub fn save_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_image(&mut w, image).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_image(&mut BufReader::new(f))
}

/// Whether pixel `(x, y)` of a `w × h` box belongs to the shape.
fn covers(kind: ShapeKind, x: i64, y: i64, w: i64, h: i64) -> bool {
    // doubled coordinates relative to the box centre
    let (dx, dy) = ((2 * x - (w - 1)).abs(), (2 * y - (h - 1)).abs());
    let t = (w.min(h) / 4).max(1);
    let in_ellipse = |w: i64, h: i64, dx: i64, dy: i64| dx * dx * h * h + dy * dy * w * w <= w * w * h * h;
    match kind {
        ShapeKind::Rect => true,
        ShapeKind::Frame => x < t || y < t || x >= w - t || y >= h - t,
        ShapeKind::Ellipse => in_ellipse(w, h, dx, dy),
        ShapeKind::Ring => {
            in_ellipse(w, h, dx, dy) && !(w > 2 * t && h > 2 * t && in_ellipse(w - 2 * t, h - 2 * t, dx, dy))
        }
        ShapeKind::TriangleUp => dx * h <= (y + 1) * w,
        ShapeKind::TriangleDown => dx * h <= (h - y) * w,
        ShapeKind::Diamond => dx * h + dy * w <= w * h,
        ShapeKind::Cross => 3 * dx <= w || 3 * dy <= h,
        ShapeKind::Saltire => {
            let band = w * h;
            6 * (x * h - y * w).abs() <= band || 6 * ((w - 1 - x) * h - y * w).abs() <= band
        }
        ShapeKind::Stripes => (y * 5 / h) % 2 == 0,
    }
}

/// One image together with its objects' boxes and category indices.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Tensor<f32>,
    /// `(category index, x, y, w, h)` with tight integer boxes.
    pub objects: Vec<(usize, [u32; 4])>,
}

fn byte(rng: &mut ChaCha8Rng, lo: u8, hi: u8) -> u8 {
    rng.gen_range(lo..=hi)
}

/// Renders image `index` of the dataset described by `spec`.
pub fn render_scene(spec: &SceneSpec, index: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let s = spec.image_size as usize;
    // pixel buffer in 0..=255 per channel, HWC
    let mut px = vec![[0u8; 3]; s * s];

    // background: a base gray plus blocky texture and fine noise
    let base = byte(&mut rng, 90, 140) as i32;
    let tex = (spec.clutter_level * 40.0).round() as i32;
    let noise = (spec.clutter_level * 12.0).round() as i32;
    let block = 8;
    let nb = s.div_ceil(block);
    let blocks: Vec<[i32; 3]> = (0..nb * nb)
        .map(|_| [0; 3].map(|_| if tex > 0 { rng.gen_range(-tex..=tex) } else { 0 }))
        .collect();
    for y in 0..s {
        for x in 0..s {
            let b = blocks[(y / block) * nb + x / block];
            for c in 0..3 {
                let n = if noise > 0 { rng.gen_range(-noise..=noise) } else { 0 };
                px[y * s + x][c] = (base + b[c] + n).clamp(0, 255) as u8;
            }
        }
    }

    // unannotated distractors: thin straight strokes
    let strokes = (spec.clutter_level * 4.0).round() as usize;
    for _ in 0..strokes {
        let color = [0; 3].map(|_| byte(&mut rng, 0, 255));
        let len = rng.gen_range(4..=s / 2);
        let horizontal = rng.gen_bool(0.5);
        let (x0, y0) = (rng.gen_range(0..s), rng.gen_range(0..s));
        for i in 0..len {
            let (x, y) = if horizontal { (x0 + i, y0) } else { (x0, y0 + i) };
            if x < s && y < s {
                px[y * s + x] = color;
            }
        }
    }

    let weights: Vec<f64> = spec.categories.iter().map(|c| c.weight).collect();
    let total: f64 = weights.iter().sum();
    let (lo, hi) = spec.objects_per_image;
    let count = rng.gen_range(lo..=hi);
    let mut placed: Vec<(usize, [u32; 4])> = Vec::new();
    let mut occupied: Vec<[i64; 4]> = Vec::new();
    for _ in 0..count {
        let mut r = rng.gen_range(0.0..total);
        let mut cat = weights.len() - 1;
        for (i, &w) in weights.iter().enumerate() {
            if r < w {
                cat = i;
                break;
            }
            r -= w;
        }
        let cs = &spec.categories[cat];
        let long = rng.gen_range(cs.size.0..=cs.size.1) as f64;
        let jitter = rng.gen_range(0.85..1.15);
        let aspect = cs.aspect * jitter;
        let (w, h) = if aspect >= 1.0 {
            ((long / aspect).round(), long)
        } else {
            (long, (long * aspect).round())
        };
        let (w, h) = ((w as i64).clamp(3, s as i64), (h as i64).clamp(3, s as i64));
        // prefer a spot clear of earlier objects; give up on that after a while
        let mut spot = (0, 0);
        for attempt in 0..60 {
            let x = rng.gen_range(0..=(s as i64 - w));
            let y = rng.gen_range(0..=(s as i64 - h));
            spot = (x, y);
            let clear = occupied
                .iter()
                .all(|o| x + w + 1 <= o[0] || o[2] + 1 <= x || y + h + 1 <= o[1] || o[3] + 1 <= y);
            if clear || attempt == 59 {
                break;
            }
        }
        let (x0, y0) = spot;
        let mut color = [0; 3].map(|_| byte(&mut rng, 0, 255));
        // keep a visible contrast against the background
        let far = color.iter().map(|&c| (c as i32 - base).abs()).max().unwrap();
        if far < 80 {
            let ch = rng.gen_range(0..3);
            color[ch] = if base > 127 { 0 } else { 255 };
        }
        let (mut bx0, mut by0, mut bx1, mut by1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
        for y in 0..h {
            for x in 0..w {
                if covers(cs.shape, x, y, w, h) {
                    let (gx, gy) = (x0 + x, y0 + y);
                    px[gy as usize * s + gx as usize] = color;
                    bx0 = bx0.min(gx);
                    by0 = by0.min(gy);
                    bx1 = bx1.max(gx);
                    by1 = by1.max(gy);
                }
            }
        }
        occupied.push([x0, y0, x0 + w, y0 + h]);
        placed.push((
            cat,
            [bx0 as u32, by0 as u32, (bx1 - bx0 + 1) as u32, (by1 - by0 + 1) as u32],
        ));
    }

    let image = Tensor::from_fn([1, 3, s, s], |_, c, y, x| px[y * s + x][c] as f32 / 255.0);
    Scene {
        image,
        objects: placed,
    }
}

/// Images plus annotations, held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    pub annotations: AnnotationFile,
}

pub fn categories_of(spec: &SceneSpec) -> Vec<Category> {
    spec.categories
        .iter()
        .enumerate()
        .map(|(i, c)| Category {
            id: i as u32 + 1,
            name: c.name.clone(),
            small: c.small,
        })
        .collect()
}

pub fn generate_dataset(spec: &SceneSpec, count: usize) -> Result<Dataset> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::invalid("dataset count must be positive"));
    }
    let mut images = Vec::with_capacity(count);
    let mut file = AnnotationFile {
        categories: categories_of(spec),
        ..Default::default()
    };
    for i in 0..count {
        let scene = render_scene(spec, i as u64);
        let id = i as u64 + 1;
        file.images.push(ImageEntry {
            id,
            width: spec.image_size,
            height: spec.image_size,
            file_name: format!("images/{id:06}.bin"),
        });
        for (cat, [x, y, w, h]) in scene.objects {
            file.annotations.push(Annotation {
                id: file.annotations.len() as u64 + 1,
                image_id: id,
                category_id: cat as u32 + 1,
                bbox: [x as f64, y as f64, w as f64, h as f64],
            });
        }
        images.push(scene.image);
    }
    Ok(Dataset {
        images,
        annotations: file,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Training samples; class labels are category positions plus one.
    pub fn samples<T: Scalar>(&self) -> Vec<Sample<T>> {
        self.annotations
            .images
            .iter()
            .zip(&self.images)
            .map(|(entry, img)| Sample {
                image: img.cast(),
                gts: self
                    .annotations
                    .annotations_for(entry.id)
                    .map(|a| Target {
                        bbox: a.to_box().cast(),
                        label: self.annotations.category_index(a.category_id).unwrap() + 1,
                    })
                    .collect(),
            })
            .collect()
    }

    pub fn subset(&self, image_ids: &[u64]) -> Dataset {
        let annotations = self.annotations.subset(image_ids);
        let images = annotations
            .images
            .iter()
            .map(|e| {
                let i = self.annotations.images.iter().position(|x| x.id == e.id).unwrap();
                self.images[i].clone()
            })
            .collect();
        Dataset {
            images,
            annotations,
        }
    }

    /// Writes `annotations.json`, `images/*.bin` and the split lists.
    pub fn save(&self, dir: &Path, splits: &Splits) -> Result<()> {
        fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
        for (entry, img) in self.annotations.images.iter().zip(&self.images) {
            save_image(&dir.join(&entry.file_name), img)?;
        }
        save_annotations(&dir.join("annotations.json"), &self.annotations)?;
        splits.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "data directory not found"),
            ));
        }
        let annotations = load_annotations(&dir.join("annotations.json"))?;
        let images = annotations
            .images
            .iter()
            .map(|e| load_image(&dir.join(&e.file_name)))
            .collect::<Result<_>>()?;
        Ok(Dataset {
            images,
            annotations,
        })
    }
}

/// Train / validation / test image ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

impl Splits {
    /// Seeded 7:1:2 partition.
    pub fn seven_one_two(ids: &[u64], seed: u64) -> Splits {
        let mut ids = ids.to_vec();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = ids.len();
        let n_train = (n * 7 + 5) / 10;
        let n_val = ((n + 5) / 10).min(n - n_train);
        let sorted = |v: &[u64]| {
            let mut v = v.to_vec();
            v.sort_unstable();
            v
        };
        Splits {
            train: sorted(&ids[..n_train]),
            val: sorted(&ids[n_train..n_train + n_val]),
            test: sorted(&ids[n_train + n_val..]),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[u64]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    fn path(dir: &Path, name: &str) -> PathBuf {
        dir.join(format!("{name}.txt"))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for name in SPLIT_NAMES {
            let body: String = self.get(name).unwrap().iter().map(|id| format!("{id}\n")).collect();
            let p = Self::path(dir, name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn load_one(dir: &Path, name: &str) -> Result<Vec<u64>> {
        let p = Self::path(dir, name);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                l.trim().parse().map_err(|_| Error::Format {
                    what: "split file",
                    detail: format!("{}: line {}: {l:?} is not an image id", p.display(), i + 1),
                })
            })
            .collect()
    }
}

/// Counts of `√area` per category over bins delimited by ascending `edges`:
/// bin 0 is `< edges[0]`, bin `i` is `[edges[i-1], edges[i])`, and the last
/// bin is `≥` the final edge.
pub fn size_histogram(file: &AnnotationFile, edges: &[f64]) -> Result<BTreeMap<u32, Vec<usize>>> {
    if edges.is_empty() || edges.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::invalid("histogram edges must be non-empty and ascending"));
    }
    let mut out: BTreeMap<u32, Vec<usize>> = file
        .categories
        .iter()
        .map(|c| (c.id, vec![0; edges.len() + 1]))
        .collect();
    for a in &file.annotations {
        let side = a.area().sqrt();
        let bin = edges.partition_point(|&e| e <= side);
        out.entry(a.category_id).or_insert_with(|| vec![0; edges.len() + 1])[bin] += 1;
    }
    Ok(out)
}
