//! Training loop, seed-mask evaluation, ablation and sweep runners,
//! checkpoints and run reports.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{augment, gen_corpus, sample_group, Corpus, DataConfig, Scene};
use crate::error::{Error, Result};
use crate::inter_match::{time_group_match, InterMatchConfig};
use crate::intra_match::{IntraMatchConfig, Metric};
use crate::netpbm::{self, Raster};
use crate::network::{
    backward, cam_features, compute_cam, forward_group, Cam, Flags, LabelVector, ModelDims,
    ModelParams, PipelineConfig,
};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Stream ids derived from the run seed.
const STREAM_INIT: u64 = 0;
const STREAM_BATCHES: u64 = 1;
const STREAM_TRAIN_CORPUS: u64 = 100;
const STREAM_EVAL_CORPUS: u64 = 101;

/// CAM thresholds 0.05, 0.10, …, 0.60.
pub fn default_thresholds() -> Vec<f64> {
    (1..=12).map(|i| (5 * i) as f64 / 100.0).collect()
}

/// Flat run configuration as read from JSON. Every field is optional in the
/// file; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub lr_init: f64,
    pub rho: f64,
    pub batch_pairs: usize,
    pub max_iters: usize,
    pub alpha: f64,
    pub k: usize,
    pub group_n: usize,
    pub use_inter: bool,
    pub use_intra: bool,
    pub augment: bool,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub noise: f64,
    pub n_scenes: usize,
    pub n_eval_scenes: usize,
    pub metric: Metric,
}

impl Default for Config {
    fn default() -> Self {
        let d = DataConfig::default();
        Self {
            seed: 0,
            lr_init: 0.1,
            rho: 0.9,
            batch_pairs: 8,
            max_iters: 2000,
            alpha: InterMatchConfig::default().alpha,
            k: IntraMatchConfig::default().k,
            group_n: 2,
            use_inter: true,
            use_intra: true,
            augment: true,
            channels: ModelDims::default().channels,
            height: d.height,
            width: d.width,
            n_classes: d.n_classes,
            noise: d.noise,
            n_scenes: d.n_scenes,
            n_eval_scenes: 50,
            metric: Metric::default(),
        }
    }
}

impl Config {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let cfg: Config =
            serde_json::from_str(text).map_err(|e| Error::parse(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.data_config().validate()?;
        if self.n_eval_scenes < 2 {
            return Err(Error::Parameter("n_eval_scenes must be at least 2".into()));
        }
        Ok(())
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            height: self.height,
            width: self.width,
            n_classes: self.n_classes,
            noise: self.noise,
            n_scenes: self.n_scenes,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr_init: self.lr_init,
            rho: self.rho,
            batch_pairs: self.batch_pairs,
            max_iters: self.max_iters,
            seed: self.seed,
            augment: self.augment,
            dims: ModelDims {
                channels: self.channels,
                classes: self.n_classes,
                ..ModelDims::default()
            },
            pipeline: PipelineConfig {
                inter: InterMatchConfig {
                    alpha: self.alpha,
                    group_n: self.group_n,
                    ..InterMatchConfig::default()
                },
                intra: IntraMatchConfig {
                    k: self.k,
                    metric: self.metric,
                },
                flags: Flags {
                    use_inter: self.use_inter,
                    use_intra: self.use_intra,
                },
            },
        }
    }

    /// Short hex digest of the canonical JSON form.
    pub fn run_id(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Maps `[0, 1]` pixels to roughly zero-mean, unit-scale network inputs.
/// Applied to every image the harness feeds the model, in training and eval.
pub fn standardize(image: &Tensor) -> Tensor {
    image.map(|v| (v - 0.5) / 0.25)
}

/// Synthetic train and eval corpora for a configuration.
pub fn gen_corpora(cfg: &Config) -> Result<(Corpus, Corpus)> {
    let train = gen_corpus(
        &cfg.data_config(),
        &mut RngStream::new(cfg.seed, STREAM_TRAIN_CORPUS),
    )?;
    let eval_cfg = DataConfig {
        n_scenes: cfg.n_eval_scenes,
        ..cfg.data_config()
    };
    let eval = gen_corpus(&eval_cfg, &mut RngStream::new(cfg.seed, STREAM_EVAL_CORPUS))?;
    Ok((train, eval))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub rho: f64,
    /// Groups per SGD step (pairs when `group_n` is 2).
    pub batch_pairs: usize,
    pub max_iters: usize,
    pub seed: u64,
    pub augment: bool,
    pub dims: ModelDims,
    pub pipeline: PipelineConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Config::default().train_config()
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0) || !self.lr_init.is_finite() {
            return Err(Error::Parameter(format!(
                "lr_init must be positive, got {}",
                self.lr_init
            )));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Parameter(format!(
                "rho must be in (0, 1], got {}",
                self.rho
            )));
        }
        if self.batch_pairs == 0 {
            return Err(Error::Parameter("batch_pairs must be positive".into()));
        }
        if self.pipeline.intra.k == 0 {
            return Err(Error::Parameter("k must be positive".into()));
        }
        self.pipeline.inter.validate()
    }
}

/// Polynomial decay `lr_init · (1 − itr/max_iters)^ρ`.
pub fn lr_schedule(itr: usize, cfg: &TrainConfig) -> Result<f64> {
    if itr >= cfg.max_iters {
        return Err(Error::Parameter(format!(
            "iteration {itr} outside 0..{}",
            cfg.max_iters
        )));
    }
    Ok(cfg.lr_init * (1.0 - itr as f64 / cfg.max_iters as f64).powf(cfg.rho))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub miou: Vec<f64>,
    pub best_threshold: f64,
    pub best_miou: f64,
    pub scenes: usize,
}

/// Reproducible record of a run. Wall times live in [`Timings`] so that this
/// stays byte-identical across reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub config: Config,
    pub optimizer: String,
    /// Mean per-group loss at every iteration.
    pub losses: Vec<f64>,
    pub eval: Option<EvalReport>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

const OPTIMIZER: &str = "sgd (no momentum, no weight decay)";

fn with_originals(scenes: &[&Scene], augmented: Vec<Scene>) -> Vec<Scene> {
    let classes = augmented[0].labels.len();
    let shared = (0..classes).any(|c| augmented.iter().all(|s| s.labels.get(c)));
    if shared {
        augmented
    } else {
        // A crop removed the shared class from some member; fall back to the
        // unaugmented scenes so the group still co-occurs.
        scenes.iter().map(|s| (*s).clone()).collect()
    }
}

/// One iteration's worth of groups, drawn before any model work so that the
/// data order depends only on the seed.
fn draw_batch(corpus: &Corpus, cfg: &TrainConfig, rng: &mut RngStream) -> Result<Vec<Vec<Scene>>> {
    let n = cfg.pipeline.inter.group_n;
    (0..cfg.batch_pairs)
        .map(|_| {
            let (idx, _) = sample_group(corpus, n, rng)?;
            let members: Vec<&Scene> = idx.iter().map(|&i| &corpus.scenes[i]).collect();
            if cfg.augment {
                let aug = members.iter().map(|s| augment(s, rng)).collect();
                Ok(with_originals(&members, aug))
            } else {
                Ok(members.into_iter().cloned().collect())
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub report: RunReport,
    pub timings: Timings,
}

/// Plain SGD over batches of class-sharing groups.
///
/// Groups in a batch are processed in parallel; their gradients are summed
/// in batch order, so results do not depend on the thread schedule.
pub fn train(corpus: &Corpus, config: &Config) -> Result<TrainOutcome> {
    config.validate()?;
    let cfg = config.train_config();
    if corpus.n_classes != cfg.dims.classes {
        return Err(Error::Data(format!(
            "corpus has {} classes, config expects {}",
            corpus.n_classes, cfg.dims.classes
        )));
    }
    let started = Instant::now();
    let mut params = ModelParams::init(cfg.dims, &mut RngStream::new(cfg.seed, STREAM_INIT))?;
    let mut batches = RngStream::new(cfg.seed, STREAM_BATCHES);
    let mut losses = Vec::with_capacity(cfg.max_iters);
    let scale = 1.0 / cfg.batch_pairs as f64;

    for itr in 0..cfg.max_iters {
        let lr = lr_schedule(itr, &cfg)?;
        let batch = draw_batch(corpus, &cfg, &mut batches)?;
        let results: Vec<Result<(f64, ModelParams)>> = batch
            .par_iter()
            .map(|group| {
                let images: Vec<Tensor> = group.iter().map(|s| standardize(&s.image)).collect();
                let labels: Vec<LabelVector> = group.iter().map(|s| s.labels.clone()).collect();
                let fwd = forward_group(&images, &labels, &params, &cfg.pipeline)?;
                Ok((fwd.loss, backward(&fwd.cache, &params)?))
            })
            .collect();
        let mut grad = ModelParams::zeros(cfg.dims)?;
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l;
            grad.axpy(scale, &g)?;
        }
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "loss became {loss} at iteration {itr}; last finite loss {:?}",
                losses.last()
            )));
        }
        losses.push(loss);
        params.sgd_step(&grad, lr)?;
        if !params.all_finite() {
            return Err(Error::Numeric(format!(
                "parameters became non-finite after iteration {itr} (loss {loss})"
            )));
        }
    }

    Ok(TrainOutcome {
        params,
        report: RunReport {
            run_id: config.run_id(),
            config: config.clone(),
            optimizer: OPTIMIZER.into(),
            losses,
            eval: None,
        },
        timings: Timings {
            train_seconds: started.elapsed().as_secs_f64(),
            eval_seconds: 0.0,
        },
    })
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn upsample_bilinear(cam: &Cam, height: usize, width: usize) -> Vec<f64> {
    let (sh, sw) = (cam.height, cam.width);
    let coord = |dst: usize, src_len: usize, dst_len: usize| {
        let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5)
            .clamp(0.0, (src_len - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = vec![0.0; height * width];
    for y in 0..height {
        let (y0, y1, fy) = coord(y, sh, height);
        for x in 0..width {
            let (x0, x1, fx) = coord(x, sw, width);
            let v = |yy: usize, xx: usize| cam.values[yy * sw + xx];
            let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
            let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
            out[y * width + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

/// Image-resolution CAMs for every class.
pub fn scene_cams(
    scene: &Scene,
    params: &ModelParams,
    pipeline: &PipelineConfig,
) -> Result<Vec<Vec<f64>>> {
    let f = cam_features(&standardize(&scene.image), params, pipeline)?;
    (0..params.dims.classes)
        .map(|c| {
            Ok(upsample_bilinear(
                &compute_cam(&f, &params.head_weight, c)?,
                scene.height(),
                scene.width(),
            ))
        })
        .collect()
}

/// Seed mask from CAMs: among the image's labelled classes, pixels whose CAM
/// reaches `threshold` take the class with the largest CAM; the rest are
/// background. Ties go to the smaller class id.
pub fn seed_mask(cams: &[Vec<f64>], labels: &LabelVector, threshold: f64) -> Vec<u8> {
    let n = cams.first().map_or(0, Vec::len);
    (0..n)
        .map(|px| {
            let mut best: Option<(usize, f64)> = None;
            for c in labels.positives() {
                let v = cams[c][px];
                if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((c, v));
                }
            }
            best.map_or(0, |(c, _)| (c + 1) as u8)
        })
        .collect()
}

/// Accumulated `(C+1)×(C+1)` confusion counts, rows = truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    /// `classes` counts background.
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, truth: &[u8], pred: &[u8]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::Dimension(format!(
                "{} truth pixels, {} predicted",
                truth.len(),
                pred.len()
            )));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            let (t, p) = (t as usize, p as usize);
            if t >= self.classes || p >= self.classes {
                return Err(Error::Data(format!("class id out of range: {t} / {p}")));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Per-class IoU; `None` for classes absent from the ground truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let tp = self.counts[c * k + c];
                let truth: u64 = self.counts[c * k..(c + 1) * k].iter().sum();
                if truth == 0 {
                    return None;
                }
                let pred: u64 = (0..k).map(|r| self.counts[r * k + c]).sum();
                Some(tp as f64 / (truth + pred - tp) as f64)
            })
            .collect()
    }

    /// Mean IoU over classes present in the ground truth.
    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

/// Seed-mask mIoU at each threshold over the masked scenes of `corpus`.
pub fn eval_seed_miou(
    params: &ModelParams,
    pipeline: &PipelineConfig,
    corpus: &Corpus,
    thresholds: &[f64],
) -> Result<EvalReport> {
    if thresholds.is_empty() {
        return Err(Error::Parameter("no thresholds given".into()));
    }
    let scenes: Vec<&Scene> = corpus.scenes.iter().filter(|s| s.has_mask).collect();
    if scenes.is_empty() {
        return Err(Error::Data(
            "evaluation set has no scenes with masks".into(),
        ));
    }
    let k = params.dims.classes + 1;
    let per_scene: Vec<Result<Vec<Confusion>>> = scenes
        .par_iter()
        .map(|scene| {
            let cams = scene_cams(scene, params, pipeline)?;
            thresholds
                .iter()
                .map(|&t| {
                    let mut conf = Confusion::new(k);
                    conf.add(&scene.mask, &seed_mask(&cams, &scene.labels, t))?;
                    Ok(conf)
                })
                .collect()
        })
        .collect();
    let mut totals = vec![Confusion::new(k); thresholds.len()];
    for r in per_scene {
        for (t, c) in totals.iter_mut().zip(r?) {
            t.merge(&c);
        }
    }
    let miou: Vec<f64> = totals.iter().map(Confusion::miou).collect();
    let mut best = 0;
    for (i, &m) in miou.iter().enumerate() {
        if m > miou[best] {
            best = i;
        }
    }
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        best_threshold: thresholds[best],
        best_miou: miou[best],
        miou,
        scenes: scenes.len(),
    })
}

/// Writes `<scene>.seed.pgm` (class id × 32) and `<scene>.cam_<c>.pgm` for
/// every class. Returns the paths written.
pub fn emit_masks(
    params: &ModelParams,
    pipeline: &PipelineConfig,
    corpus: &Corpus,
    threshold: f64,
    out_dir: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for scene in &corpus.scenes {
        let (h, w) = (scene.height(), scene.width());
        let cams = scene_cams(scene, params, pipeline)?;
        let seed = seed_mask(&cams, &scene.labels, threshold);
        let path = out_dir.join(format!("{}.seed.pgm", scene.name));
        netpbm::write(
            &path,
            &Raster::new(w, h, 1, seed.iter().map(|&c| c * 32).collect())?,
        )?;
        written.push(path);
        for (c, cam) in cams.iter().enumerate() {
            let path = out_dir.join(format!("{}.cam_{c}.pgm", scene.name));
            let bytes = cam
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            netpbm::write(&path, &Raster::new(w, h, 1, bytes)?)?;
            written.push(path);
        }
    }
    Ok(written)
}

const CKPT_MAGIC: &[u8; 4] = b"COMN";
const CKPT_VERSION: u32 = 1;
const META_TENSOR: &str = "meta.config";
const META_LEN: usize = 20;

impl Config {
    /// Every field as an exactly representable `f64`; the seed is split into
    /// 32-bit halves.
    fn to_meta(&self) -> Vec<f64> {
        let b = |v: bool| if v { 1.0 } else { 0.0 };
        vec![
            (self.seed >> 32) as f64,
            (self.seed & 0xffff_ffff) as f64,
            self.lr_init,
            self.rho,
            self.batch_pairs as f64,
            self.max_iters as f64,
            self.alpha,
            self.k as f64,
            self.group_n as f64,
            b(self.use_inter),
            b(self.use_intra),
            b(self.augment),
            self.channels as f64,
            self.height as f64,
            self.width as f64,
            self.n_classes as f64,
            self.noise,
            self.n_scenes as f64,
            self.n_eval_scenes as f64,
            match self.metric {
                Metric::InnerProduct => 0.0,
                Metric::L2 => 1.0,
            },
        ]
    }

    fn from_meta(m: &[f64], path: &Path) -> Result<Self> {
        let bad = || Error::parse(path, "malformed meta.config tensor");
        if m.len() != META_LEN {
            return Err(bad());
        }
        let int = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 && v < 2f64.powi(53) {
                Ok(v as usize)
            } else {
                Err(bad())
            }
        };
        let flag = |v: f64| -> Result<bool> {
            match int(v)? {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(bad()),
            }
        };
        let (hi, lo) = (int(m[0])? as u64, int(m[1])? as u64);
        if hi > u32::MAX as u64 || lo > u32::MAX as u64 {
            return Err(bad());
        }
        Ok(Config {
            seed: hi << 32 | lo,
            lr_init: m[2],
            rho: m[3],
            batch_pairs: int(m[4])?,
            max_iters: int(m[5])?,
            alpha: m[6],
            k: int(m[7])?,
            group_n: int(m[8])?,
            use_inter: flag(m[9])?,
            use_intra: flag(m[10])?,
            augment: flag(m[11])?,
            channels: int(m[12])?,
            height: int(m[13])?,
            width: int(m[14])?,
            n_classes: int(m[15])?,
            noise: m[16],
            n_scenes: int(m[17])?,
            n_eval_scenes: int(m[18])?,
            metric: if flag(m[19])? {
                Metric::L2
            } else {
                Metric::InnerProduct
            },
        })
    }
}

fn push_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Binary checkpoint: magic `COMN`, u32 format version, then a sequence of
/// tensors, each as u32 name length, name, u32 rank, u64 extents and
/// little-endian f64 values. The first tensor, `meta.config`, carries the
/// run configuration.
pub fn encode_checkpoint(params: &ModelParams, config: &Config) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    push_tensor(&mut out, META_TENSOR, &[META_LEN], &config.to_meta());
    for (name, t) in params.tensors() {
        push_tensor(&mut out, name, t.shape(), t.data());
    }
    out
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::parse(self.path, "truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b: [u8; 4] = self.take(4)?.try_into().expect("4 bytes");
        Ok(u32::from_le_bytes(b) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let b: [u8; 8] = self.take(8)?.try_into().expect("8 bytes");
        usize::try_from(u64::from_le_bytes(b))
            .map_err(|_| Error::parse(self.path, "extent overflow"))
    }

    /// Reads one tensor record and checks its name and shape.
    fn tensor(&mut self, name: &str, shape: &[usize], out: &mut [f64]) -> Result<()> {
        let len = self.u32()?;
        if self.take(len)? != name.as_bytes() {
            return Err(Error::parse(self.path, format!("expected tensor {name}")));
        }
        let rank = self.u32()?;
        let got = (0..rank)
            .map(|_| self.u64())
            .collect::<Result<Vec<usize>>>()?;
        if got != shape {
            return Err(Error::parse(
                self.path,
                format!("tensor {name} has shape {got:?}, expected {shape:?}"),
            ));
        }
        for v in out.iter_mut() {
            *v = f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        }
        Ok(())
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(ModelParams, Config)> {
    let mut r = ByteReader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != CKPT_MAGIC {
        return Err(Error::parse(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION as usize {
        return Err(Error::parse(
            path,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let mut meta = vec![0.0; META_LEN];
    r.tensor(META_TENSOR, &[META_LEN], &mut meta)?;
    let config = Config::from_meta(&meta, path)?;
    config.validate()?;
    let mut params = ModelParams::zeros(config.train_config().dims)?;
    for (name, slot) in params.tensors_mut() {
        let shape = slot.shape().to_vec();
        r.tensor(name, &shape, slot.data_mut())?;
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(path, "trailing bytes after checkpoint"));
    }
    Ok((params, config))
}

pub fn write_checkpoint(path: &Path, params: &ModelParams, config: &Config) -> Result<()> {
    fs::write(path, encode_checkpoint(params, config)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelParams, Config)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Trains on `train_set` and evaluates on `eval_set`.
pub fn train_and_eval(
    train_set: &Corpus,
    eval_set: &Corpus,
    config: &Config,
) -> Result<TrainOutcome> {
    let mut out = train(train_set, config)?;
    let started = Instant::now();
    let eval = eval_seed_miou(
        &out.params,
        &config.train_config().pipeline,
        eval_set,
        &default_thresholds(),
    )?;
    out.timings.eval_seconds = started.elapsed().as_secs_f64();
    out.report.eval = Some(eval);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub use_inter: bool,
    pub use_intra: bool,
    pub miou: f64,
    pub best_threshold: f64,
}

pub const ABLATION_VARIANTS: [(&str, bool, bool); 4] = [
    ("baseline", false, false),
    ("inter", true, false),
    ("intra", false, true),
    ("both", true, true),
];

/// Four runs that differ only in the matching flags.
pub fn ablate(
    train_set: &Corpus,
    eval_set: &Corpus,
    base: &Config,
) -> Result<Vec<(AblationRow, TrainOutcome)>> {
    ABLATION_VARIANTS
        .iter()
        .map(|&(name, inter, intra)| {
            let cfg = Config {
                use_inter: inter,
                use_intra: intra,
                ..base.clone()
            };
            let out = train_and_eval(train_set, eval_set, &cfg)?;
            let eval = out.report.eval.as_ref().expect("evaluated");
            Ok((
                AblationRow {
                    variant: name.into(),
                    use_inter: inter,
                    use_intra: intra,
                    miou: eval.best_miou,
                    best_threshold: eval.best_threshold,
                },
                out,
            ))
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Alpha,
    K,
    GroupN,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::K => "k",
            SweepParam::GroupN => "group_n",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepParam::Alpha),
            "k" => Ok(SweepParam::K),
            "group_n" => Ok(SweepParam::GroupN),
            other => Err(Error::Parameter(format!(
                "unknown sweep parameter {other:?} (expected alpha, k or group_n)"
            ))),
        }
    }

    fn apply(self, base: &Config, value: f64) -> Result<Config> {
        let integral = || {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::Parameter(format!(
                    "{} needs a positive integer, got {value}",
                    self.name()
                )))
            }
        };
        let cfg = match self {
            SweepParam::Alpha => Config {
                alpha: value,
                ..base.clone()
            },
            SweepParam::K => Config {
                k: integral()?,
                ..base.clone()
            },
            SweepParam::GroupN => Config {
                group_n: integral()?,
                ..base.clone()
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub miou: f64,
    pub best_threshold: f64,
    /// Median inter-matching time in milliseconds; group-size sweeps only.
    pub group_match_ms: Option<f64>,
}

/// Feature-grid extents produced by the encoder for `cfg`.
pub fn feature_extents(cfg: &Config) -> (usize, usize, usize) {
    (cfg.height / 4, cfg.width / 4, cfg.channels)
}

pub const TIMING_TRIALS: usize = 15;

/// One training run per value. All values are checked before any run starts.
pub fn sweep(
    train_set: &Corpus,
    eval_set: &Corpus,
    base: &Config,
    param: SweepParam,
    values: &[f64],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Parameter("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|&v| param.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    values
        .iter()
        .zip(configs)
        .map(|(&value, cfg)| {
            let out = train_and_eval(train_set, eval_set, &cfg)?;
            let eval = out.report.eval.expect("evaluated");
            let group_match_ms = if param == SweepParam::GroupN {
                let (h, w, c) = feature_extents(&cfg);
                Some(1e3 * time_group_match(h, w, c, cfg.group_n, TIMING_TRIALS)?)
            } else {
                None
            };
            Ok(SweepRow {
                param: param.name().into(),
                value,
                miou: eval.best_miou,
                best_threshold: eval.best_threshold,
                group_match_ms,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub group_n: usize,
    pub median_ms: f64,
}

/// Median inter-matching time for each group size.
pub fn bench_group(
    sizes: &[usize],
    extents: (usize, usize, usize),
    trials: usize,
) -> Result<Vec<BenchRow>> {
    let (h, w, c) = extents;
    sizes
        .iter()
        .map(|&n| {
            Ok(BenchRow {
                group_n: n,
                median_ms: 1e3 * time_group_match(h, w, c, n, trials)?,
            })
        })
        .collect()
}

/// Writes the checkpoint, `<ckpt>.report.json` and `<ckpt>.timings.json`.
pub fn save_run(ckpt: &Path, out: &TrainOutcome) -> Result<()> {
    write_checkpoint(ckpt, &out.params, &out.report.config)?;
    let report = sidecar(ckpt, "report.json");
    fs::write(&report, out.report.to_json()).map_err(|e| Error::io(&report, e))?;
    let timings = sidecar(ckpt, "timings.json");
    let mut f = fs::File::create(&timings).map_err(|e| Error::io(&timings, e))?;
    let text = serde_json::to_string_pretty(&out.timings).expect("timings serialize");
    writeln!(f, "{text}").map_err(|e| Error::io(&timings, e))
}

pub fn sidecar(path: &Path, suffix: &str) -> std::path::PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::labels_from_mask;

    fn tiny_config() -> Config {
        Config {
            n_scenes: 12,
            n_eval_scenes: 4,
            max_iters: 5,
            batch_pairs: 2,
            ..Config::default()
        }
    }

    #[test]
    fn lr_schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg).unwrap(), 0.1);
        let mid = lr_schedule(1000, &cfg).unwrap();
        assert!((mid - 0.1 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((mid - 0.05359).abs() < 1e-5);
        assert!(lr_schedule(1999, &cfg).unwrap() < 1e-3);
        assert!(matches!(lr_schedule(2000, &cfg), Err(Error::Parameter(_))));
        let mut prev = f64::INFINITY;
        for itr in 0..2000 {
            let lr = lr_schedule(itr, &cfg).unwrap();
            assert!(lr < prev);
            prev = lr;
        }
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        let p = Path::new("c.json");
        let cfg = Config::from_json(r#"{"seed": 7, "alpha": 1.8}"#, p).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.alpha, 1.8);
        assert_eq!(cfg.k, 8);
        assert!(matches!(
            Config::from_json(r#"{"sede": 7}"#, p),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            Config::from_json(r#"{"rho": 0}"#, p),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            Config::from_json(r#"{"alpha": 1.0}"#, p),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            Config::from_json(r#"{"n_classes": 1}"#, p),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn run_id_tracks_config() {
        let a = Config::default();
        assert_eq!(a.run_id(), Config::default().run_id());
        assert_eq!(a.run_id().len(), 12);
        let b = Config {
            seed: 1,
            ..a.clone()
        };
        assert_ne!(a.run_id(), b.run_id());
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let cfg = Config {
            max_iters: 0,
            ..tiny_config()
        };
        let (train_set, _) = gen_corpora(&cfg).unwrap();
        let out = train(&train_set, &cfg).unwrap();
        let init = ModelParams::init(
            cfg.train_config().dims,
            &mut RngStream::new(cfg.seed, STREAM_INIT),
        )
        .unwrap();
        assert_eq!(out.params.tensors(), init.tensors());
        assert!(out.report.losses.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_config();
        let (train_set, _) = gen_corpora(&cfg).unwrap();
        let a = train(&train_set, &cfg).unwrap();
        let b = train(&train_set, &cfg).unwrap();
        assert_eq!(
            encode_checkpoint(&a.params, &cfg),
            encode_checkpoint(&b.params, &cfg)
        );
        assert_eq!(a.report.to_json(), b.report.to_json());
    }

    #[test]
    fn two_scene_overfit_reduces_loss() {
        let cfg = Config {
            max_iters: 200,
            batch_pairs: 1,
            augment: false,
            ..tiny_config()
        };
        let (full, _) = gen_corpora(&cfg).unwrap();
        let class = 0;
        let pair: Vec<Scene> = full.class_index[class][..2]
            .iter()
            .map(|&i| full.scenes[i].clone())
            .collect();
        let corpus = Corpus::new(pair, cfg.n_classes).unwrap();
        let out = train(&corpus, &cfg).unwrap();
        let first = out.report.losses[0];
        let last = *out.report.losses.last().unwrap();
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let cfg = tiny_config();
        let params = ModelParams::init(cfg.train_config().dims, &mut RngStream::new(9, 0)).unwrap();
        let bytes = encode_checkpoint(&params, &cfg);
        let p = Path::new("m.ckpt");
        let (back, cfg_back) = decode_checkpoint(&bytes, p).unwrap();
        assert_eq!(back.tensors(), params.tensors());
        assert_eq!(cfg_back, cfg);
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3], p),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            decode_checkpoint(b"nonsense", p),
            Err(Error::Parse { .. })
        ));
        assert_eq!(&bytes[..8], b"COMN\x01\x00\x00\x00");
        let odd = Config {
            seed: u64::MAX - 5,
            metric: Metric::InnerProduct,
            noise: 0.137,
            ..cfg.clone()
        };
        let (_, back) = decode_checkpoint(&encode_checkpoint(&params, &odd), p).unwrap();
        assert_eq!(back, odd);
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            decode_checkpoint(&extra, p),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let truth = vec![0u8, 1, 1, 2, 0, 2];
        let mut c = Confusion::new(3);
        c.add(&truth, &truth).unwrap();
        assert_eq!(c.miou(), 1.0);
    }

    #[test]
    fn all_background_on_half_covered_scene() {
        // 4×4 grid, left half class 1.
        let truth: Vec<u8> = (0..16).map(|i| if i % 4 < 2 { 1 } else { 0 }).collect();
        let pred = vec![0u8; 16];
        let mut c = Confusion::new(5);
        c.add(&truth, &pred).unwrap();
        // Hand count: background TP 8, FP 8, FN 0; class 1 TP 0, FN 8.
        let iou = c.iou();
        assert_eq!(iou[0], Some(8.0 / 16.0));
        assert_eq!(iou[1], Some(0.0));
        assert!(iou[2..].iter().all(Option::is_none));
        assert_eq!(c.miou(), 0.25);
    }

    #[test]
    fn miou_ignores_scene_order() {
        let scenes: Vec<(Vec<u8>, Vec<u8>)> = (0..5u8)
            .map(|s| {
                let t: Vec<u8> = (0..16).map(|i| ((i + s as usize) % 3) as u8).collect();
                let p: Vec<u8> = (0..16).map(|i| ((i * s as usize) % 3) as u8).collect();
                (t, p)
            })
            .collect();
        let total = |order: &[usize]| {
            let mut c = Confusion::new(3);
            for &i in order {
                c.add(&scenes[i].0, &scenes[i].1).unwrap();
            }
            c.miou()
        };
        assert_eq!(total(&[0, 1, 2, 3, 4]), total(&[4, 2, 0, 3, 1]));
    }

    #[test]
    fn seed_mask_rules() {
        let cams = vec![
            vec![0.9, 0.1, 0.5, 0.0],
            vec![0.2, 0.8, 0.5, 0.0],
            vec![1.0; 4],
        ];
        let labels = LabelVector(vec![true, true, false]);
        assert_eq!(seed_mask(&cams, &labels, 0.3), vec![1, 2, 1, 0]);
        assert_eq!(seed_mask(&cams, &labels, 0.95), vec![0, 0, 0, 0]);
    }

    #[test]
    fn bilinear_constant_and_corners() {
        let cam = Cam {
            height: 2,
            width: 2,
            values: vec![0.0, 1.0, 0.0, 1.0],
        };
        let up = upsample_bilinear(&cam, 4, 4);
        assert_eq!(&up[..4], &[0.0, 0.25, 0.75, 1.0]);
        let flat = Cam {
            height: 2,
            width: 3,
            values: vec![0.4; 6],
        };
        assert!(upsample_bilinear(&flat, 8, 12)
            .iter()
            .all(|&v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn emitted_masks_count_and_round_trip() {
        let cfg = tiny_config();
        let (_, eval) = gen_corpora(&cfg).unwrap();
        let one = Corpus::new(vec![eval.scenes[0].clone()], cfg.n_classes).unwrap();
        let params = ModelParams::init(cfg.train_config().dims, &mut RngStream::new(1, 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let pipeline = cfg.train_config().pipeline;
        let files = emit_masks(&params, &pipeline, &one, 0.3, dir.path()).unwrap();
        assert_eq!(files.len(), 5);
        let seed = netpbm::read(&files[0]).unwrap();
        let ids: Vec<u8> = seed.data.iter().map(|v| v / 32).collect();
        let cams = scene_cams(&one.scenes[0], &params, &pipeline).unwrap();
        assert_eq!(ids, seed_mask(&cams, &one.scenes[0].labels, 0.3));
        // The head starts at zero, so every CAM is all zero.
        for f in &files[1..] {
            assert!(netpbm::read(f).unwrap().data.iter().all(|&v| v == 0));
        }
        assert_eq!(labels_from_mask(&ids, cfg.n_classes).len(), cfg.n_classes);
    }

    #[test]
    fn eval_requires_masks() {
        let cfg = tiny_config();
        let (_, eval) = gen_corpora(&cfg).unwrap();
        let mut scenes = eval.scenes.clone();
        for s in scenes.iter_mut() {
            s.has_mask = false;
        }
        let corpus = Corpus::new(scenes, cfg.n_classes).unwrap();
        let params = ModelParams::init(cfg.train_config().dims, &mut RngStream::new(1, 0)).unwrap();
        let r = eval_seed_miou(
            &params,
            &cfg.train_config().pipeline,
            &corpus,
            &default_thresholds(),
        );
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn sweep_grids_are_accepted() {
        let base = Config::default();
        for a in [1.2, 1.5, 1.8, 2.0] {
            assert_eq!(SweepParam::Alpha.apply(&base, a).unwrap().alpha, a);
        }
        for k in [6.0, 8.0, 10.0, 12.0, 16.0, 32.0] {
            assert_eq!(SweepParam::K.apply(&base, k).unwrap().k, k as usize);
        }
        assert!(SweepParam::K.apply(&base, 2.5).is_err());
        assert!(SweepParam::Alpha.apply(&base, 0.9).is_err());
        assert!(SweepParam::parse("beta").is_err());
    }
}
