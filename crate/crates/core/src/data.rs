//! Synthetic co-occurrence scenes, on-disk corpora, pair/group sampling and
//! augmentation.
//!
//! Class ids in pixel masks are `1..=n_classes`, with 0 for background; label
//! index `c` corresponds to mask id `c + 1`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::netpbm::{self, Raster};
use crate::network::LabelVector;
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
    Ring,
}

const SHAPES: [ShapeKind; 4] = [
    ShapeKind::Disc,
    ShapeKind::Square,
    ShapeKind::Triangle,
    ShapeKind::Ring,
];

const PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.20, 0.30, 0.90],
    [0.90, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.55, 0.25, 0.10],
];

pub const MAX_CLASSES: usize = PALETTE.len();

impl ShapeKind {
    /// Whether offset `(dy, dx)` from the center lies inside a shape of radius `r`.
    fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            ShapeKind::Disc => dy * dy + dx * dx <= r * r,
            ShapeKind::Square => dy.abs() <= 0.85 * r && dx.abs() <= 0.85 * r,
            ShapeKind::Triangle => dy >= -r && dy <= r && dx.abs() <= 0.6 * (dy + r),
            ShapeKind::Ring => {
                let d2 = dy * dy + dx * dx;
                d2 <= r * r && d2 >= (0.5 * r).powi(2)
            }
        }
    }
}

/// The shape and base color drawn for class `c` (0-based).
pub fn class_style(c: usize) -> (ShapeKind, [f64; 3]) {
    (SHAPES[c % SHAPES.len()], PALETTE[c % PALETTE.len()])
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    /// Amplitude of per-pixel background and shape noise.
    pub noise: f64,
    pub n_scenes: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            n_classes: 4,
            noise: 0.1,
            n_scenes: 200,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_CLASSES).contains(&self.n_classes) {
            return Err(Error::Parameter(format!(
                "n_classes must be in 2..={MAX_CLASSES}, got {}",
                self.n_classes
            )));
        }
        if self.height < 16
            || self.width < 16
            || !self.height.is_multiple_of(4)
            || !self.width.is_multiple_of(4)
        {
            return Err(Error::Parameter(format!(
                "scene extents must be multiples of 4 and at least 16, got {}x{}",
                self.height, self.width
            )));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::Parameter(format!(
                "noise must be in [0, 0.5], got {}",
                self.noise
            )));
        }
        if self.n_scenes < 2 {
            return Err(Error::Parameter("need at least 2 scenes".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub name: String,
    /// `H×W×3`, values in `[0, 1]`.
    pub image: Tensor,
    /// Row-major class ids, 0 = background.
    pub mask: Vec<u8>,
    pub labels: LabelVector,
    /// False for loaded scenes without a mask file; those are skipped by evaluation.
    pub has_mask: bool,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

/// Label vector derived from mask occupancy.
pub fn labels_from_mask(mask: &[u8], n_classes: usize) -> LabelVector {
    let mut y = vec![false; n_classes];
    for &id in mask {
        if id > 0 && (id as usize) <= n_classes {
            y[id as usize - 1] = true;
        }
    }
    LabelVector(y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub scenes: Vec<Scene>,
    pub n_classes: usize,
    /// For each class, the indices of scenes labelled with it.
    pub class_index: Vec<Vec<usize>>,
}

impl Corpus {
    pub fn new(scenes: Vec<Scene>, n_classes: usize) -> Result<Self> {
        let mut class_index = vec![Vec::new(); n_classes];
        for (i, s) in scenes.iter().enumerate() {
            if s.labels.len() != n_classes {
                return Err(Error::Data(format!(
                    "scene {} has {} labels, corpus has {n_classes} classes",
                    s.name,
                    s.labels.len()
                )));
            }
            for c in s.labels.positives() {
                class_index[c].push(i);
            }
        }
        Ok(Self {
            scenes,
            n_classes,
            class_index,
        })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

fn render_scene(cfg: &DataConfig, name: String, rng: &mut RngStream) -> Scene {
    let (h, w) = (cfg.height, cfg.width);
    let mut image = vec![0.0; h * w * 3];
    let mut mask = vec![0u8; h * w];

    // Gray background with a random low-frequency stripe texture.
    let base = rng.uniform(0.3, 0.55);
    let tint: Vec<f64> = (0..3).map(|_| rng.uniform(-0.04, 0.04)).collect();
    let freq = rng.uniform(0.15, 0.6);
    let angle = rng.uniform(0.0, std::f64::consts::PI);
    let phase = rng.uniform(0.0, std::f64::consts::TAU);
    let (sa, ca) = angle.sin_cos();
    for y in 0..h {
        for x in 0..w {
            let stripe = 0.06 * (freq * (ca * x as f64 + sa * y as f64) + phase).sin();
            for ch in 0..3 {
                image[(y * w + x) * 3 + ch] =
                    base + tint[ch] + stripe + cfg.noise * rng.uniform(-1.0, 1.0);
            }
        }
    }

    let count = 1 + rng.below(3.min(cfg.n_classes));
    let mut classes: Vec<usize> = (0..cfg.n_classes).collect();
    for i in 0..count {
        let j = i + rng.below(cfg.n_classes - i);
        classes.swap(i, j);
    }
    let scale = h.min(w) as f64 / 32.0;
    for &c in &classes[..count] {
        let (kind, color) = class_style(c);
        let r = rng.uniform(7.0, 11.0) * scale;
        let cy = rng.uniform(r * 0.6, h as f64 - r * 0.6);
        let cx = rng.uniform(r * 0.6, w as f64 - r * 0.6);
        let jitter: Vec<f64> = (0..3).map(|_| rng.uniform(-0.06, 0.06)).collect();
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                if kind.contains(dy, dx, r) {
                    mask[y * w + x] = (c + 1) as u8;
                    for ch in 0..3 {
                        image[(y * w + x) * 3 + ch] =
                            color[ch] + jitter[ch] + 0.5 * cfg.noise * rng.uniform(-1.0, 1.0);
                    }
                }
            }
        }
    }
    for v in image.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let labels = labels_from_mask(&mask, cfg.n_classes);
    Scene {
        name,
        image: Tensor::from_vec(&[h, w, 3], image).expect("scene extents are positive"),
        mask,
        labels,
        has_mask: true,
    }
}

/// Generates `cfg.n_scenes` scenes with 1–3 distinct class shapes each.
///
/// Scene `i` of an attempt draws from its own stream, so the corpus does not
/// depend on generation order. Attempts repeat until every class labels at
/// least two scenes.
pub fn gen_corpus(cfg: &DataConfig, rng: &mut RngStream) -> Result<Corpus> {
    cfg.validate()?;
    const MAX_ATTEMPTS: usize = 64;
    for _ in 0..MAX_ATTEMPTS {
        let attempt_seed = rng.next_u64();
        let scenes: Vec<Scene> = (0..cfg.n_scenes)
            .map(|i| {
                let mut scene_rng = RngStream::new(attempt_seed, i as u64);
                render_scene(cfg, format!("scene_{i:05}"), &mut scene_rng)
            })
            .collect();
        let corpus = Corpus::new(scenes, cfg.n_classes)?;
        if corpus.class_index.iter().all(|s| s.len() >= 2) {
            return Ok(corpus);
        }
    }
    Err(Error::Data(format!(
        "could not place every class in two scenes with {} scenes",
        cfg.n_scenes
    )))
}

/// Picks a class uniformly among those with at least `n` scenes, then `n`
/// distinct scenes carrying it. Returns `(scene indices, class)`.
pub fn sample_group(corpus: &Corpus, n: usize, rng: &mut RngStream) -> Result<(Vec<usize>, usize)> {
    if n == 0 {
        return Err(Error::Parameter("group size must be positive".into()));
    }
    let eligible: Vec<usize> = (0..corpus.n_classes)
        .filter(|&c| corpus.class_index[c].len() >= n)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Data(format!("no class is shared by {n} scenes")));
    }
    let class = eligible[rng.below(eligible.len())];
    let mut pool = corpus.class_index[class].clone();
    for i in 0..n {
        let j = i + rng.below(pool.len() - i);
        pool.swap(i, j);
    }
    pool.truncate(n);
    Ok((pool, class))
}

/// Two distinct scenes sharing a class.
pub fn sample_pair(corpus: &Corpus, rng: &mut RngStream) -> Result<(usize, usize, usize)> {
    let (idx, class) = sample_group(corpus, 2, rng)?;
    Ok((idx[0], idx[1], class))
}

pub const AUGMENT_PAD: usize = 4;

/// Horizontal flip (p = 0.5), random crop after zero padding, per-channel
/// color scale in `[0.9, 1.1]`. Labels are recomputed from the moved mask.
pub fn augment(scene: &Scene, rng: &mut RngStream) -> Scene {
    let (h, w) = (scene.height(), scene.width());
    let flip = rng.bernoulli(0.5);
    let oy = rng.below(2 * AUGMENT_PAD + 1) as isize - AUGMENT_PAD as isize;
    let ox = rng.below(2 * AUGMENT_PAD + 1) as isize - AUGMENT_PAD as isize;
    let gains: Vec<f64> = (0..3).map(|_| rng.uniform(0.9, 1.1)).collect();

    let mut image = vec![0.0; h * w * 3];
    let mut mask = vec![0u8; h * w];
    let src = scene.image.data();
    for y in 0..h {
        for x in 0..w {
            let sy = y as isize + oy;
            let sx = x as isize + ox;
            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                continue;
            }
            let sx = if flip {
                w - 1 - sx as usize
            } else {
                sx as usize
            };
            let sp = sy as usize * w + sx;
            mask[y * w + x] = scene.mask[sp];
            for ch in 0..3 {
                image[(y * w + x) * 3 + ch] = (src[sp * 3 + ch] * gains[ch]).clamp(0.0, 1.0);
            }
        }
    }
    let labels = if scene.has_mask {
        labels_from_mask(&mask, scene.labels.len())
    } else {
        scene.labels.clone()
    };
    Scene {
        name: scene.name.clone(),
        image: Tensor::from_vec(&[h, w, 3], image).expect("same extents as input"),
        mask,
        labels,
        has_mask: scene.has_mask,
    }
}

/// Mirror image of a scene (and its mask) across the vertical axis.
pub fn flip_horizontal(scene: &Scene) -> Scene {
    let (h, w) = (scene.height(), scene.width());
    let mut image = vec![0.0; h * w * 3];
    let mut mask = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let s = y * w + (w - 1 - x);
            mask[y * w + x] = scene.mask[s];
            image[(y * w + x) * 3..(y * w + x) * 3 + 3]
                .copy_from_slice(&scene.image.data()[s * 3..s * 3 + 3]);
        }
    }
    Scene {
        name: scene.name.clone(),
        image: Tensor::from_vec(&[h, w, 3], image).expect("same extents as input"),
        mask,
        labels: scene.labels.clone(),
        has_mask: scene.has_mask,
    }
}

pub const LABELS_FILE: &str = "labels.csv";

fn mask_file_name(image_file: &str) -> String {
    let stem = image_file.strip_suffix(".ppm").unwrap_or(image_file);
    format!("{stem}.mask.pgm")
}

fn to_bytes(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `<name>.ppm`, `<name>.mask.pgm` and `labels.csv` into `dir`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let labels_path = dir.join(LABELS_FILE);
    let mut out = csv::Writer::from_path(&labels_path)
        .map_err(|e| Error::io(&labels_path, std::io::Error::other(e)))?;
    let mut header = vec!["filename".to_string()];
    header.extend((0..corpus.n_classes).map(|c| format!("class_{c}")));
    let csv_err = |e: csv::Error| Error::io(&labels_path, std::io::Error::other(e));
    out.write_record(&header).map_err(csv_err)?;
    for s in &corpus.scenes {
        let file = format!("{}.ppm", s.name);
        let raster = Raster::new(
            s.width(),
            s.height(),
            3,
            s.image.data().iter().map(|&v| to_bytes(v)).collect(),
        )?;
        netpbm::write(&dir.join(&file), &raster)?;
        if s.has_mask {
            let m = Raster::new(s.width(), s.height(), 1, s.mask.clone())?;
            netpbm::write(&dir.join(mask_file_name(&file)), &m)?;
        }
        let mut row = vec![file];
        row.extend(
            s.labels
                .0
                .iter()
                .map(|&b| if b { "1" } else { "0" }.to_string()),
        );
        out.write_record(&row).map_err(csv_err)?;
    }
    out.flush().map_err(|e| Error::io(&labels_path, e))
}

/// Reads a directory written by [`write_corpus`] (or laid out the same way).
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let labels_path = dir.join(LABELS_FILE);
    let text = fs::read(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_slice());
    let header = reader
        .headers()
        .map_err(|e| Error::parse(&labels_path, e.to_string()))?
        .clone();
    if header.get(0) != Some("filename") || header.len() < 3 {
        return Err(Error::parse(
            &labels_path,
            "header must be `filename,class_0,class_1,...` with at least two classes",
        ));
    }
    let n_classes = header.len() - 1;
    if n_classes > u8::MAX as usize {
        return Err(Error::parse(&labels_path, "too many classes"));
    }

    let mut rows: HashMap<String, LabelVector> = HashMap::new();
    let mut order = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(&labels_path, e.to_string()))?;
        if rec.len() != n_classes + 1 {
            return Err(Error::parse(
                &labels_path,
                format!(
                    "row {} has {} fields, expected {}",
                    line + 2,
                    rec.len(),
                    n_classes + 1
                ),
            ));
        }
        let labels = rec
            .iter()
            .skip(1)
            .map(|v| match v.trim() {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(Error::parse(
                    &labels_path,
                    format!("row {}: label {other:?} is not 0 or 1", line + 2),
                )),
            })
            .collect::<Result<Vec<bool>>>()?;
        let file = rec[0].trim().to_string();
        if rows.insert(file.clone(), LabelVector(labels)).is_some() {
            return Err(Error::parse(
                &labels_path,
                format!("duplicate row for {file}"),
            ));
        }
        order.push(file);
    }

    let mut images: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".ppm"))
        .collect();
    images.sort();
    for file in &images {
        if !rows.contains_key(file) {
            return Err(Error::parse(
                &labels_path,
                format!("no label row for image {file}"),
            ));
        }
    }

    let mut scenes = Vec::with_capacity(order.len());
    for file in order {
        let path = dir.join(&file);
        let raster = netpbm::read(&path)?;
        if raster.samples != 3 {
            return Err(Error::parse(&path, "expected a P6 color image"));
        }
        let (h, w) = (raster.height, raster.width);
        let image = Tensor::from_vec(
            &[h, w, 3],
            raster.data.iter().map(|&b| b as f64 / 255.0).collect(),
        )?;
        let labels = rows.remove(&file).expect("row recorded above");
        let mask_path = dir.join(mask_file_name(&file));
        let (mask, has_mask) = if mask_path.exists() {
            let m = netpbm::read(&mask_path)?;
            if m.samples != 1 || m.width != w || m.height != h {
                return Err(Error::parse(
                    &mask_path,
                    format!("mask must be a {w}x{h} P5 image"),
                ));
            }
            if let Some(&bad) = m.data.iter().find(|&&v| v as usize > n_classes) {
                return Err(Error::parse(
                    &mask_path,
                    format!("class id {bad} out of range"),
                ));
            }
            if labels_from_mask(&m.data, n_classes) != labels {
                return Err(Error::parse(
                    &mask_path,
                    "mask occupancy disagrees with labels.csv",
                ));
            }
            (m.data, true)
        } else {
            (vec![0; h * w], false)
        };
        let name = file.strip_suffix(".ppm").unwrap_or(&file).to_string();
        scenes.push(Scene {
            name,
            image,
            mask,
            labels,
            has_mask,
        });
    }
    Corpus::new(scenes, n_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> DataConfig {
        DataConfig {
            n_scenes: 24,
            seed: 3,
            ..DataConfig::default()
        }
    }

    fn corpus() -> Corpus {
        gen_corpus(&small_cfg(), &mut RngStream::new(3, 0)).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(corpus(), corpus());
    }

    #[test]
    fn every_class_in_two_scenes_and_labels_match_masks() {
        let c = corpus();
        assert!(c.class_index.iter().all(|s| s.len() >= 2));
        for s in &c.scenes {
            // Oracle: scan every pixel.
            let mut seen = [false; 4];
            for &id in &s.mask {
                if id > 0 {
                    seen[id as usize - 1] = true;
                }
            }
            assert_eq!(s.labels.0, seen.to_vec());
            assert!(s.labels.positives().count() >= 1);
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn forced_pair() {
        let c = corpus();
        let a = c.class_index[1][0];
        let b = c.class_index[1][1];
        let mut scenes = vec![c.scenes[a].clone(), c.scenes[b].clone()];
        // Keep only class 1 in common by construction of the sub-corpus.
        for s in scenes.iter_mut() {
            s.labels = LabelVector(vec![false, true, false, false]);
        }
        let sub = Corpus::new(scenes, 4).unwrap();
        let mut rng = RngStream::new(0, 0);
        for _ in 0..20 {
            let (i, j, class) = sample_pair(&sub, &mut rng).unwrap();
            assert_eq!(class, 1);
            assert_ne!(i, j);
            assert!(i < 2 && j < 2);
        }
    }

    #[test]
    fn pairs_share_their_class() {
        let c = corpus();
        let mut rng = RngStream::new(1, 0);
        for _ in 0..200 {
            let (i, j, class) = sample_pair(&c, &mut rng).unwrap();
            assert_ne!(i, j);
            assert!(c.scenes[i].labels.get(class) && c.scenes[j].labels.get(class));
        }
        for _ in 0..100 {
            let (idx, class) = sample_group(&c, 3, &mut rng).unwrap();
            let mut d = idx.clone();
            d.sort_unstable();
            d.dedup();
            assert_eq!(d.len(), 3);
            assert!(idx.iter().all(|&i| c.scenes[i].labels.get(class)));
        }
    }

    #[test]
    fn class_pick_frequencies_are_uniform() {
        let c = corpus();
        let mut rng = RngStream::new(2, 0);
        let draws = 10_000;
        for n in [2, 3] {
            let mut counts = [0usize; 4];
            for _ in 0..draws {
                counts[sample_group(&c, n, &mut rng).unwrap().1] += 1;
            }
            let eligible = (0..4).filter(|&k| c.class_index[k].len() >= n).count() as f64;
            let p = 1.0 / eligible;
            let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
            for &k in counts.iter().filter(|&&k| k > 0) {
                assert!(
                    (k as f64 - draws as f64 * p).abs() < 3.0 * sigma,
                    "{counts:?}"
                );
            }
        }
    }

    #[test]
    fn insufficient_scenes_is_data_error() {
        let c = corpus();
        let sub = Corpus::new(vec![c.scenes[0].clone()], 4).unwrap();
        assert!(matches!(
            sample_pair(&sub, &mut RngStream::new(0, 0)),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            sample_group(&c, 1000, &mut RngStream::new(0, 0)),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn double_flip_is_identity_and_keeps_labels() {
        for s in &corpus().scenes[..5] {
            let once = flip_horizontal(s);
            assert_eq!(once.labels, s.labels);
            assert_eq!(&flip_horizontal(&once), s);
        }
    }

    #[test]
    fn augment_keeps_labels_consistent() {
        let c = corpus();
        let mut rng = RngStream::new(4, 0);
        for s in &c.scenes {
            let a = augment(s, &mut rng);
            assert_eq!(a.labels, labels_from_mask(&a.mask, 4));
            assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn crop_can_remove_a_corner_shape() {
        let (h, w) = (16, 16);
        let mut mask = vec![0u8; h * w];
        // Class 2 occupies only the top-left 2x2 corner.
        for y in 0..2 {
            for x in 0..2 {
                mask[y * w + x] = 2;
            }
        }
        mask[10 * w + 10] = 1;
        let scene = Scene {
            name: "corner".into(),
            image: Tensor::filled(&[h, w, 3], 0.5).unwrap(),
            labels: labels_from_mask(&mask, 2),
            mask,
            has_mask: true,
        };
        assert_eq!(scene.labels.0, vec![true, true]);
        let mut removed = false;
        for seed in 0..200 {
            let a = augment(&scene, &mut RngStream::new(seed, 0));
            if !a.labels.get(1) {
                removed = true;
                assert!(a.mask.iter().all(|&v| v != 2));
            }
        }
        assert!(removed);
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus();
        write_corpus(&c, dir.path()).unwrap();
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(loaded.len(), c.len());
        for (a, b) in loaded.scenes.iter().zip(&c.scenes) {
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.labels, b.labels);
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
        let again = tempfile::tempdir().unwrap();
        write_corpus(&loaded, again.path()).unwrap();
        for s in &c.scenes {
            for f in [format!("{}.ppm", s.name), format!("{}.mask.pgm", s.name)] {
                assert_eq!(
                    fs::read(dir.path().join(&f)).unwrap(),
                    fs::read(again.path().join(&f)).unwrap()
                );
            }
        }
        assert_eq!(
            fs::read(dir.path().join(LABELS_FILE)).unwrap(),
            fs::read(again.path().join(LABELS_FILE)).unwrap()
        );
    }

    #[test]
    fn loader_errors_name_files() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join(LABELS_FILE),
            "filename,class_0,class_1\na.ppm,1,0\n",
        )
        .unwrap();
        fs::write(dir.path().join("a.ppm"), b"P6\n2 2\n255\n\x00\x01").unwrap();
        match load_corpus(dir.path()).unwrap_err() {
            Error::Parse { path, .. } => assert!(path.ends_with("a.ppm")),
            other => panic!("unexpected {other:?}"),
        }

        fs::write(dir.path().join("a.ppm"), b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        let c = load_corpus(dir.path()).unwrap();
        assert_eq!(c.scenes[0].image.data(), &[1.0, 1.0, 1.0]);
        assert!(!c.scenes[0].has_mask);

        fs::write(dir.path().join("b.ppm"), b"P6\n1 1\n255\n\x00\x00\x00").unwrap();
        match load_corpus(dir.path()).unwrap_err() {
            Error::Parse { path, message } => {
                assert!(path.ends_with(LABELS_FILE));
                assert!(message.contains("b.ppm"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
