//! Toy shared-weight encoder, matching stages, pooled multi-label head.
//!
//! The forward pass for a group of images is
//! encode → inter-match reweight → intra-match update → GAP → linear head,
//! with each matching stage switchable. Backward is hand-written; the
//! inter-match mask and the top-k tables are treated as constants.

use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::inter_match::{match_group, scale_columns, CoMask, InterMatchConfig};
use crate::intra_match::{
    backward_update, intra_match, propagate, IntraMatchConfig, PointUpdateParams, UpdateCache,
};
use crate::rng::RngStream;
use crate::tensor::{gap, MatchIndex, Tensor};

/// Layer widths of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub in_channels: usize,
    pub hidden: usize,
    pub channels: usize,
    pub classes: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            in_channels: 3,
            hidden: 16,
            channels: 32,
            classes: 4,
        }
    }
}

/// 3×3, stride 2, zero-padding 1 convolution. Kernel layout `(out, in, ky, kx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv {
    fn init(out_c: usize, in_c: usize, rng: &mut RngStream) -> Result<Self> {
        let s = 1.0 / ((in_c * 9) as f64).sqrt();
        let len = out_c * in_c * 9;
        Ok(Self {
            weight: Tensor::from_vec(
                &[out_c, in_c, 3, 3],
                (0..len).map(|_| rng.uniform(-s, s)).collect(),
            )?,
            bias: Tensor::from_vec(&[out_c], (0..out_c).map(|_| rng.uniform(-s, s)).collect())?,
        })
    }

    fn zeros(out_c: usize, in_c: usize) -> Result<Self> {
        Ok(Self {
            weight: Tensor::zeros(&[out_c, in_c, 3, 3])?,
            bias: Tensor::zeros(&[out_c])?,
        })
    }

    fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    /// `input` is channel-major `in_c × h × w`; returns `out_c × h/2 × w/2`.
    fn forward(&self, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (oc, ic) = (self.out_channels(), self.in_channels());
        let (oh, ow) = (h / 2, w / 2);
        let wt = self.weight.data();
        let mut out = vec![0.0; oc * oh * ow];
        for (o, plane) in out.chunks_mut(oh * ow).enumerate() {
            plane.fill(self.bias.data()[o]);
            for i in 0..ic {
                let src = &input[i * h * w..(i + 1) * h * w];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = wt[((o * ic + i) * 3 + ky) * 3 + kx];
                        // Output columns whose tap 2x + kx − 1 lands inside the row.
                        let x_lo = usize::from(kx == 0);
                        let x_hi = ow.min((w - kx) / 2 + 1);
                        for y in 0..oh {
                            let Some(iy) = (2 * y + ky).checked_sub(1).filter(|&r| r < h) else {
                                continue;
                            };
                            let row = &src[iy * w..(iy + 1) * w];
                            let dst = &mut plane[y * ow..(y + 1) * ow];
                            for x in x_lo..x_hi {
                                dst[x] += wv * row[2 * x + kx - 1];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients into `grad`; returns the input
    /// gradient when `want_input` is set.
    fn backward(
        &self,
        input: &[f64],
        h: usize,
        w: usize,
        d_out: &[f64],
        grad: &mut Conv,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let ic = self.in_channels();
        let (oh, ow) = (h / 2, w / 2);
        let wt = self.weight.data();
        let mut d_in = want_input.then(|| vec![0.0; ic * h * w]);
        for (o, g_plane) in d_out.chunks(oh * ow).enumerate() {
            grad.bias.data_mut()[o] += g_plane.iter().sum::<f64>();
            for i in 0..ic {
                let src = &input[i * h * w..(i + 1) * h * w];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let widx = ((o * ic + i) * 3 + ky) * 3 + kx;
                        let x_lo = usize::from(kx == 0);
                        let x_hi = ow.min((w - kx) / 2 + 1);
                        let mut acc = 0.0;
                        for y in 0..oh {
                            let Some(iy) = (2 * y + ky).checked_sub(1).filter(|&r| r < h) else {
                                continue;
                            };
                            let g_row = &g_plane[y * ow..(y + 1) * ow];
                            let row = &src[iy * w..(iy + 1) * w];
                            for x in x_lo..x_hi {
                                acc += g_row[x] * row[2 * x + kx - 1];
                            }
                            if let Some(d) = d_in.as_mut() {
                                let wv = wt[widx];
                                let d_row = &mut d[(i * h + iy) * w..(i * h + iy + 1) * w];
                                for x in x_lo..x_hi {
                                    d_row[2 * x + kx - 1] += g_row[x] * wv;
                                }
                            }
                        }
                        grad.weight.data_mut()[widx] += acc;
                    }
                }
            }
        }
        d_in
    }
}

/// Trainable state: encoder, point-update MLP, classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub conv1: Conv,
    pub conv2: Conv,
    pub intra: PointUpdateParams,
    /// `classes × channels`.
    pub head_weight: Tensor,
    pub head_bias: Tensor,
    generation: u64,
}

impl ModelParams {
    /// Uniform `±1/√fan_in` encoder and MLP weights; zero head.
    pub fn init(dims: ModelDims, rng: &mut RngStream) -> Result<Self> {
        if dims.classes < 1 || dims.channels < 1 || dims.hidden < 1 || dims.in_channels < 1 {
            return Err(Error::Parameter(format!("invalid model dims {dims:?}")));
        }
        Ok(Self {
            dims,
            conv1: Conv::init(dims.hidden, dims.in_channels, rng)?,
            conv2: Conv::init(dims.channels, dims.hidden, rng)?,
            intra: PointUpdateParams::init(dims.channels, rng)?,
            head_weight: Tensor::zeros(&[dims.classes, dims.channels])?,
            head_bias: Tensor::zeros(&[dims.classes])?,
            generation: 0,
        })
    }

    pub fn zeros(dims: ModelDims) -> Result<Self> {
        Ok(Self {
            dims,
            conv1: Conv::zeros(dims.hidden, dims.in_channels)?,
            conv2: Conv::zeros(dims.channels, dims.hidden)?,
            intra: PointUpdateParams::zeros(dims.channels)?,
            head_weight: Tensor::zeros(&[dims.classes, dims.channels])?,
            head_bias: Tensor::zeros(&[dims.classes])?,
            generation: 0,
        })
    }

    /// Counter bumped by every in-place update; caches record it.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("encoder.conv1.weight", &self.conv1.weight),
            ("encoder.conv1.bias", &self.conv1.bias),
            ("encoder.conv2.weight", &self.conv2.weight),
            ("encoder.conv2.bias", &self.conv2.bias),
            ("intra.mlp.w1", &self.intra.w1),
            ("intra.mlp.b1", &self.intra.b1),
            ("intra.mlp.w2", &self.intra.w2),
            ("intra.mlp.b2", &self.intra.b2),
            ("head.weight", &self.head_weight),
            ("head.bias", &self.head_bias),
        ]
    }

    /// Mutable access in the same order as [`ModelParams::tensors`]. Counts as an update.
    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        self.generation += 1;
        vec![
            ("encoder.conv1.weight", &mut self.conv1.weight),
            ("encoder.conv1.bias", &mut self.conv1.bias),
            ("encoder.conv2.weight", &mut self.conv2.weight),
            ("encoder.conv2.bias", &mut self.conv2.bias),
            ("intra.mlp.w1", &mut self.intra.w1),
            ("intra.mlp.b1", &mut self.intra.b1),
            ("intra.mlp.w2", &mut self.intra.w2),
            ("intra.mlp.b2", &mut self.intra.b2),
            ("head.weight", &mut self.head_weight),
            ("head.bias", &mut self.head_bias),
        ]
    }

    /// `self += s * other`, tensor by tensor.
    pub fn axpy(&mut self, s: f64, other: &ModelParams) -> Result<()> {
        let theirs = other.tensors();
        for ((_, mine), (_, t)) in self.tensors_mut().into_iter().zip(theirs) {
            mine.axpy(s, t)?;
        }
        Ok(())
    }

    /// Plain SGD step.
    pub fn sgd_step(&mut self, grads: &ModelParams, lr: f64) -> Result<()> {
        self.axpy(-lr, grads)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.all_finite())
    }
}

/// Multi-hot class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector(pub Vec<bool>);

impl LabelVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
    }

    pub fn get(&self, c: usize) -> bool {
        self.0[c]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Logits(pub Vec<f64>);

fn softplus(a: f64) -> f64 {
    a.max(0.0) + (-a.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Multi-label logistic loss `−Σ y·log σ(x) + (1−y)·log(1−σ(x))`.
pub fn loss(logits: &Logits, y: &LabelVector) -> Result<f64> {
    if logits.0.len() != y.len() {
        return Err(Error::Dimension(format!(
            "{} logits for {} labels",
            logits.0.len(),
            y.len()
        )));
    }
    Ok(logits
        .0
        .iter()
        .zip(&y.0)
        .map(|(&x, &pos)| if pos { softplus(-x) } else { softplus(x) })
        .sum())
}

/// Per-class activation map in `[0, 1]` on the feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cam {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Cam {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Head row dotted with every feature column, rectified, min-max scaled.
pub fn compute_cam(feature: &FeatureMap, head_weight: &Tensor, class_id: usize) -> Result<Cam> {
    let (classes, c) = head_weight.dims2()?;
    if class_id >= classes {
        return Err(Error::Parameter(format!(
            "class {class_id} out of range for {classes} classes"
        )));
    }
    if c != feature.channels() {
        return Err(Error::Dimension(format!(
            "head has {c} channels, feature map has {}",
            feature.channels()
        )));
    }
    let n = feature.points();
    let row = &head_weight.data()[class_id * c..(class_id + 1) * c];
    let mut values = vec![0.0; n];
    for (ch, &wv) in row.iter().enumerate() {
        let frow = &feature.matrix().data()[ch * n..(ch + 1) * n];
        for (v, &f) in values.iter_mut().zip(frow) {
            *v += wv * f;
        }
    }
    for v in values.iter_mut() {
        *v = v.max(0.0);
    }
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    if hi > 0.0 {
        if hi > lo {
            for v in values.iter_mut() {
                *v = (*v - lo) / (hi - lo);
            }
        } else {
            values.fill(1.0);
        }
    }
    Ok(Cam {
        height: feature.height(),
        width: feature.width(),
        values,
    })
}

/// Which matching stages run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Flags {
    pub use_inter: bool,
    pub use_intra: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub inter: InterMatchConfig,
    pub intra: IntraMatchConfig,
    pub flags: Flags,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            inter: InterMatchConfig::default(),
            intra: IntraMatchConfig::default(),
            flags: Flags {
                use_inter: true,
                use_intra: true,
            },
        }
    }
}

/// The discrete choices made by a forward pass. Supplying them back to
/// [`forward_group_with`] replays the pass with those choices held fixed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Structure {
    pub masks: Option<Vec<CoMask>>,
    pub indices: Option<Vec<MatchIndex>>,
}

#[derive(Debug, Clone)]
struct EncoderCache {
    height: usize,
    width: usize,
    input: Vec<f64>,
    pre1: Vec<f64>,
    act1: Vec<f64>,
    pre2: Vec<f64>,
}

#[derive(Debug, Clone)]
struct ImageCache {
    encoder: EncoderCache,
    scales: Option<Vec<f64>>,
    intra: Option<UpdateCache>,
    pooled: Vec<f64>,
    points: usize,
    d_logits: Vec<f64>,
}

/// Everything [`backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    images: Vec<ImageCache>,
    structure: Structure,
}

impl ForwardCache {
    pub fn structure(&self) -> &Structure {
        &self.structure
    }
}

#[derive(Debug, Clone)]
pub struct GroupForward {
    pub logits: Vec<Logits>,
    /// Loss summed over the images of the group.
    pub loss: f64,
    pub cache: ForwardCache,
}

fn check_image(image: &Tensor, dims: &ModelDims) -> Result<(usize, usize)> {
    let &[h, w, c] = image.shape() else {
        return Err(Error::Dimension(format!(
            "expected an HxWx{} image, got {:?}",
            dims.in_channels,
            image.shape()
        )));
    };
    if c != dims.in_channels {
        return Err(Error::Dimension(format!(
            "image has {c} channels, model expects {}",
            dims.in_channels
        )));
    }
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Dimension(format!(
            "image extents {h}x{w} must be divisible by 4"
        )));
    }
    Ok((h, w))
}

fn encode_cached(image: &Tensor, p: &ModelParams) -> Result<(FeatureMap, EncoderCache)> {
    let (h, w) = check_image(image, &p.dims)?;
    let ic = p.dims.in_channels;
    let mut input = vec![0.0; ic * h * w];
    for (px, chunk) in image.data().chunks(ic).enumerate() {
        for (ch, &v) in chunk.iter().enumerate() {
            input[ch * h * w + px] = v;
        }
    }
    let pre1 = p.conv1.forward(&input, h, w);
    let act1: Vec<f64> = pre1.iter().map(|v| v.max(0.0)).collect();
    let pre2 = p.conv2.forward(&act1, h / 2, w / 2);
    let act2: Vec<f64> = pre2.iter().map(|v| v.max(0.0)).collect();
    let (fh, fw) = (h / 4, w / 4);
    let map = FeatureMap::new(fh, fw, Tensor::from_vec(&[p.dims.channels, fh * fw], act2)?)?;
    Ok((
        map,
        EncoderCache {
            height: h,
            width: w,
            input,
            pre1,
            act1,
            pre2,
        },
    ))
}

/// Two stride-2 conv + rectifier stages: `H×W×3` → `(H/4)×(W/4)×c`.
pub fn encode(image: &Tensor, p: &ModelParams) -> Result<FeatureMap> {
    encode_cached(image, p).map(|(m, _)| m)
}

fn head(pooled: &[f64], p: &ModelParams) -> Logits {
    let c = p.dims.channels;
    Logits(
        (0..p.dims.classes)
            .map(|k| {
                let row = &p.head_weight.data()[k * c..(k + 1) * c];
                p.head_bias.data()[k] + row.iter().zip(pooled).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect(),
    )
}

/// Baseline classifier: encode → GAP → head.
pub fn classify(image: &Tensor, p: &ModelParams) -> Result<Logits> {
    let f = encode(image, p)?;
    Ok(head(gap(f.matrix())?.data(), p))
}

/// Feature map used for CAMs of a single image: the encoder output, passed
/// through the intra-matching update when that stage is enabled.
pub fn cam_features(image: &Tensor, p: &ModelParams, cfg: &PipelineConfig) -> Result<FeatureMap> {
    let f = encode(image, p)?;
    if cfg.flags.use_intra {
        Ok(intra_match(&f, &cfg.intra, &p.intra)?.output)
    } else {
        Ok(f)
    }
}

pub fn forward_group(
    images: &[Tensor],
    labels: &[LabelVector],
    p: &ModelParams,
    cfg: &PipelineConfig,
) -> Result<GroupForward> {
    forward_group_with(images, labels, p, cfg, &Structure::default())
}

/// Pair specialization of [`forward_group`].
pub fn forward_pair(
    pair: [&Tensor; 2],
    labels: [&LabelVector; 2],
    p: &ModelParams,
    cfg: &PipelineConfig,
) -> Result<GroupForward> {
    forward_group(
        &[pair[0].clone(), pair[1].clone()],
        &[labels[0].clone(), labels[1].clone()],
        p,
        cfg,
    )
}

/// Forward pass with optionally pinned masks and match tables.
pub fn forward_group_with(
    images: &[Tensor],
    labels: &[LabelVector],
    p: &ModelParams,
    cfg: &PipelineConfig,
    fixed: &Structure,
) -> Result<GroupForward> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} images with {} label vectors",
            images.len(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|y| y.len() != p.dims.classes) {
        return Err(Error::Dimension(format!(
            "label vector of length {} for {} classes",
            bad.len(),
            p.dims.classes
        )));
    }
    let shared = (0..p.dims.classes).any(|c| labels.iter().all(|y| y.get(c)));
    if !shared {
        return Err(Error::Contract(
            "images in a group must share at least one positive class".into(),
        ));
    }

    let mut maps = Vec::with_capacity(images.len());
    let mut encoders = Vec::with_capacity(images.len());
    for image in images {
        let (m, cache) = encode_cached(image, p)?;
        maps.push(m);
        encoders.push(cache);
    }

    let mut structure = Structure::default();
    let mut scales: Vec<Option<Vec<f64>>> = vec![None; images.len()];
    if cfg.flags.use_inter {
        cfg.inter.validate()?;
        let masks = match &fixed.masks {
            Some(m) if m.len() == images.len() => m.clone(),
            Some(_) => {
                return Err(Error::Contract("pinned masks do not match group".into()));
            }
            None => match_group(&maps, &cfg.inter)?.masks,
        };
        for (i, mask) in masks.iter().enumerate() {
            let s = mask.scales(cfg.inter.alpha);
            let reweighted = scale_columns(maps[i].matrix(), &s);
            maps[i] = FeatureMap::new(maps[i].height(), maps[i].width(), reweighted)?;
            scales[i] = Some(s);
        }
        structure.masks = Some(masks);
    }

    let mut intra_caches: Vec<Option<UpdateCache>> = vec![None; images.len()];
    if cfg.flags.use_intra {
        let mut indices = Vec::with_capacity(images.len());
        for (i, map) in maps.iter_mut().enumerate() {
            let out = match &fixed.indices {
                Some(idx) => {
                    let table = idx.get(i).ok_or_else(|| {
                        Error::Contract("pinned match tables do not match group".into())
                    })?;
                    propagate(map, table.clone(), &p.intra)?
                }
                None => intra_match(map, &cfg.intra, &p.intra)?,
            };
            indices.push(out.index);
            intra_caches[i] = Some(out.cache);
            *map = out.output;
        }
        structure.indices = Some(indices);
    }

    let mut logits = Vec::with_capacity(images.len());
    let mut caches = Vec::with_capacity(images.len());
    let mut total = 0.0;
    for (i, ((map, enc), (s, intra))) in maps
        .iter()
        .zip(encoders)
        .zip(scales.into_iter().zip(intra_caches))
        .enumerate()
    {
        let pooled = gap(map.matrix())?.into_vec();
        let x = head(&pooled, p);
        total += loss(&x, &labels[i])?;
        let d_logits =
            x.0.iter()
                .zip(&labels[i].0)
                .map(|(&v, &y)| sigmoid(v) - if y { 1.0 } else { 0.0 })
                .collect();
        caches.push(ImageCache {
            encoder: enc,
            scales: s,
            intra,
            pooled,
            points: map.points(),
            d_logits,
        });
        logits.push(x);
    }

    Ok(GroupForward {
        logits,
        loss: total,
        cache: ForwardCache {
            generation: p.generation,
            images: caches,
            structure,
        },
    })
}

/// Gradient of the group loss with respect to every parameter tensor.
pub fn backward(cache: &ForwardCache, p: &ModelParams) -> Result<ModelParams> {
    if cache.generation != p.generation {
        return Err(Error::Contract(format!(
            "forward cache is from parameter generation {}, parameters are at {}",
            cache.generation, p.generation
        )));
    }
    let dims = p.dims;
    let c = dims.channels;
    let mut g = ModelParams::zeros(dims)?;
    for img in &cache.images {
        // Head.
        let mut d_pooled = vec![0.0; c];
        for (k, &dl) in img.d_logits.iter().enumerate() {
            g.head_bias.data_mut()[k] += dl;
            let row = &p.head_weight.data()[k * c..(k + 1) * c];
            let grow = &mut g.head_weight.data_mut()[k * c..(k + 1) * c];
            for ch in 0..c {
                grow[ch] += dl * img.pooled[ch];
                d_pooled[ch] += dl * row[ch];
            }
        }
        // GAP.
        let n = img.points;
        let mut d_map = Tensor::zeros(&[c, n])?;
        for (ch, row) in d_map.data_mut().chunks_mut(n).enumerate() {
            row.fill(d_pooled[ch] / n as f64);
        }
        // Intra-matching.
        if let Some(intra) = &img.intra {
            let (d_in, d_mlp) = backward_update(&d_map, Some(intra), &p.intra)?;
            g.intra.w1.axpy(1.0, &d_mlp.w1)?;
            g.intra.b1.axpy(1.0, &d_mlp.b1)?;
            g.intra.w2.axpy(1.0, &d_mlp.w2)?;
            g.intra.b2.axpy(1.0, &d_mlp.b2)?;
            d_map = d_in;
        }
        // Inter-matching reweight with the mask held fixed.
        if let Some(s) = &img.scales {
            d_map = scale_columns(&d_map, s);
        }
        // Encoder.
        let enc = &img.encoder;
        let d_pre2: Vec<f64> = d_map
            .data()
            .iter()
            .zip(&enc.pre2)
            .map(|(&d, &z)| if z > 0.0 { d } else { 0.0 })
            .collect();
        let d_act1 = p
            .conv2
            .backward(
                &enc.act1,
                enc.height / 2,
                enc.width / 2,
                &d_pre2,
                &mut g.conv2,
                true,
            )
            .expect("input gradient requested");
        let d_pre1: Vec<f64> = d_act1
            .iter()
            .zip(&enc.pre1)
            .map(|(&d, &z)| if z > 0.0 { d } else { 0.0 })
            .collect();
        p.conv1.backward(
            &enc.input,
            enc.height,
            enc.width,
            &d_pre1,
            &mut g.conv1,
            false,
        );
    }
    Ok(g)
}
