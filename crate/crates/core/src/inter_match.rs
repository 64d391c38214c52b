//! Unsupervised co-occurrence matching across a group of feature maps.
//!
//! The columns of all maps in a group are L2-normalized and stacked into one
//! pack. A two-way fg/bg split of the columns is scored by the signed sum of
//! squared distances (same-side pairs count positive, cross pairs negative);
//! the relaxed version of that problem is a top eigenvector of the affinity
//! `XᵀX − 𝟙` restricted to sum-zero unit vectors, found here by shifted and
//! projected power iteration. The sign of the result is oriented toward the
//! columns with larger raw activation, split back per image, and used to
//! boost foreground features by `alpha`.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::rng::RngStream;
use crate::tensor::{column_norms, l2_normalize_cols, matmul, matmul_tn, Tensor};

/// Column-normalized features of a group of equally sized maps.
#[derive(Debug, Clone)]
pub struct FeaturePack {
    x: Tensor,
    raw_norms: Vec<f64>,
    group_n: usize,
    height: usize,
    width: usize,
}

impl FeaturePack {
    /// The `c × n_total` normalized matrix.
    pub fn matrix(&self) -> &Tensor {
        &self.x
    }

    /// Column norms before normalization.
    pub fn raw_norms(&self) -> &[f64] {
        &self.raw_norms
    }

    pub fn group_n(&self) -> usize {
        self.group_n
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn n_total(&self) -> usize {
        self.x.shape()[1]
    }

    /// Normalized columns belonging to image `i` of the group.
    pub fn image_columns(&self, i: usize) -> Result<Tensor> {
        if i >= self.group_n {
            return Err(Error::Parameter(format!(
                "image {i} out of range for group of {}",
                self.group_n
            )));
        }
        let (c, n_total) = (self.channels(), self.n_total());
        let n = self.height * self.width;
        let mut out = Vec::with_capacity(c * n);
        for r in 0..c {
            out.extend_from_slice(&self.x.data()[r * n_total + i * n..r * n_total + (i + 1) * n]);
        }
        Tensor::from_vec(&[c, n], out)
    }

    /// Builds a pack directly from a `c × n` matrix, treated as a single
    /// "image" of one row. Used for small synthetic problems.
    pub fn from_columns(x: &Tensor) -> Result<Self> {
        let (_, n) = x.dims2()?;
        Ok(Self {
            x: l2_normalize_cols(x)?,
            raw_norms: column_norms(x)?,
            group_n: 1,
            height: 1,
            width: n,
        })
    }
}

/// Concatenates the maps image-major (spatial row-major within each image)
/// and normalizes every column.
pub fn pack_features(maps: &[FeatureMap]) -> Result<FeaturePack> {
    let Some(first) = maps.first() else {
        return Err(Error::Dimension("empty group".into()));
    };
    if maps.len() < 2 {
        return Err(Error::Dimension(format!(
            "a group needs at least 2 maps, got {}",
            maps.len()
        )));
    }
    if let Some(bad) = maps.iter().position(|m| !m.same_extents(first)) {
        return Err(Error::Dimension(format!(
            "map {bad} has extents {}x{}x{}, expected {}x{}x{}",
            maps[bad].height(),
            maps[bad].width(),
            maps[bad].channels(),
            first.height(),
            first.width(),
            first.channels()
        )));
    }
    let (c, n) = (first.channels(), first.points());
    let n_total = n * maps.len();
    let mut raw = vec![0.0; c * n_total];
    for (i, m) in maps.iter().enumerate() {
        let src = m.matrix().data();
        for r in 0..c {
            raw[r * n_total + i * n..r * n_total + (i + 1) * n]
                .copy_from_slice(&src[r * n..(r + 1) * n]);
        }
    }
    let raw = Tensor::from_vec(&[c, n_total], raw)?;
    Ok(FeaturePack {
        x: l2_normalize_cols(&raw)?,
        raw_norms: column_norms(&raw)?,
        group_n: maps.len(),
        height: first.height(),
        width: first.width(),
    })
}

/// Squared Euclidean distances between all pairs of pack columns.
pub fn squared_distances(x: &FeaturePack) -> Tensor {
    let (c, n) = (x.channels(), x.n_total());
    let data = x.x.data();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            d[i * n + j] = (0..c)
                .map(|r| (data[r * n + i] - data[r * n + j]).powi(2))
                .sum();
        }
    }
    Tensor::from_vec(&[n, n], d).expect("n_total > 0")
}

fn signed_pair_sum(assign: &[bool], d: &Tensor) -> f64 {
    let n = assign.len();
    let (mut fg_fg, mut bg_bg, mut fg_bg, mut bg_fg) = (0.0, 0.0, 0.0, 0.0);
    for (i, &ai) in assign.iter().enumerate() {
        for (j, &aj) in assign.iter().enumerate() {
            let v = d.data()[i * n + j];
            match (ai, aj) {
                (true, true) => fg_fg += v,
                (false, false) => bg_bg += v,
                (true, false) => fg_bg += v,
                (false, true) => bg_fg += v,
            }
        }
    }
    fg_fg + bg_bg - fg_bg - bg_fg
}

/// Pairwise clustering objective of an fg (`true`) / bg (`false`) split.
pub fn sum_objective(assign: &[bool], x: &FeaturePack) -> Result<f64> {
    if assign.len() != x.n_total() {
        return Err(Error::Dimension(format!(
            "assignment has {} labels, pack has {} columns",
            assign.len(),
            x.n_total()
        )));
    }
    Ok(signed_pair_sum(assign, &squared_distances(x)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndicatorMode {
    /// Entries are exactly `±1/√n`.
    Discrete,
    /// Unit-norm, sum-zero real vector.
    Relaxed,
}

/// Signed cluster indicator over the pack columns; positive means foreground.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterIndicator {
    values: Vec<f64>,
    mode: IndicatorMode,
}

impl ClusterIndicator {
    /// `+1/√n` for foreground columns, `-1/√n` for background.
    pub fn discrete(assign: &[bool]) -> Self {
        let v = 1.0 / (assign.len() as f64).sqrt();
        Self {
            values: assign.iter().map(|&fg| if fg { v } else { -v }).collect(),
            mode: IndicatorMode::Discrete,
        }
    }

    pub fn relaxed(values: Vec<f64>) -> Self {
        Self {
            values,
            mode: IndicatorMode::Relaxed,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mode(&self) -> IndicatorMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Sign rounding: strictly positive entries are foreground.
    pub fn to_assignment(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v > 0.0).collect()
    }

    fn negated(&self) -> Self {
        Self {
            values: self.values.iter().map(|v| -v).collect(),
            mode: self.mode,
        }
    }
}

/// The objective in quadratic form, `n_total · mᵀDm`, for a discrete indicator.
pub fn matrix_objective(m: &ClusterIndicator, x: &FeaturePack) -> Result<f64> {
    if m.mode != IndicatorMode::Discrete {
        return Err(Error::Contract(
            "matrix objective is defined for discrete indicators only".into(),
        ));
    }
    let n = x.n_total();
    if m.len() != n {
        return Err(Error::Dimension(format!(
            "indicator has {} entries, pack has {n} columns",
            m.len()
        )));
    }
    let d = squared_distances(x);
    let mv = Tensor::from_vec(&[n, 1], m.values.clone())?;
    let dm = matmul(&d, &mv)?;
    let quad: f64 = m.values.iter().zip(dm.data()).map(|(a, b)| a * b).sum();
    Ok(n as f64 * quad)
}

/// `XᵀX − 𝟙` for a normalized pack; equal to `−½·D`.
#[derive(Debug, Clone)]
pub struct AffinityMatrix {
    d_hat: Tensor,
}

impl AffinityMatrix {
    /// Wraps an arbitrary square matrix; symmetry is checked by the solver.
    pub fn from_matrix(d_hat: Tensor) -> Result<Self> {
        let (r, c) = d_hat.dims2()?;
        if r != c {
            return Err(Error::Dimension(format!(
                "affinity must be square, got {r}x{c}"
            )));
        }
        Ok(Self { d_hat })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.d_hat
    }

    pub fn n(&self) -> usize {
        self.d_hat.shape()[0]
    }

    /// `mᵀ D̂ m`; equals the Rayleigh quotient when `m` is a unit vector.
    pub fn quadratic(&self, m: &[f64]) -> f64 {
        let n = self.n();
        let d = self.d_hat.data();
        (0..n)
            .map(|i| {
                let row: f64 = (0..n).map(|j| d[i * n + j] * m[j]).sum();
                m[i] * row
            })
            .sum()
    }
}

pub fn build_affinity(x: &FeaturePack) -> AffinityMatrix {
    let mut g = matmul_tn(&x.x, &x.x).expect("pack matrix is rank 2");
    let n = x.n_total();
    for i in 0..n {
        for j in 0..n {
            let v = g.at2(i, j) - 1.0;
            g.set2(i, j, v);
        }
        // xᵢᵀxᵢ − 1 is zero for unit columns.
        g.set2(i, i, 0.0);
    }
    AffinityMatrix { d_hat: g }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterMatchConfig {
    /// Foreground boost, must exceed 1.
    pub alpha: f64,
    pub group_n: usize,
    pub power_iters_max: usize,
    pub tol: f64,
}

impl Default for InterMatchConfig {
    fn default() -> Self {
        Self {
            alpha: 1.5,
            group_n: 2,
            power_iters_max: 500,
            tol: 1e-8,
        }
    }
}

impl InterMatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 1.0) || !self.alpha.is_finite() {
            return Err(Error::Parameter(format!(
                "alpha must be a finite value > 1, got {}",
                self.alpha
            )));
        }
        if self.group_n < 2 {
            return Err(Error::Parameter(format!(
                "group_n must be at least 2, got {}",
                self.group_n
            )));
        }
        if self.power_iters_max == 0 || !(self.tol > 0.0) {
            return Err(Error::Parameter(
                "power iteration needs power_iters_max > 0 and tol > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    /// Hit `power_iters_max`; the last iterate is returned.
    MaxIterations,
    /// The operator vanishes on the sum-zero subspace, so every feasible unit
    /// vector is optimal.
    Degenerate,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub indicator: ClusterIndicator,
    /// `m*ᵀ D̂ m*` of the returned iterate.
    pub rayleigh: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    /// Rayleigh quotient after each multiply, starting with the initial vector.
    pub history: Vec<f64>,
}

const SYMMETRY_TOL: f64 = 1e-9;
const START_SEED: u64 = 0x00c0_ffee;

fn project_sum_zero(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    for x in v.iter_mut() {
        *x -= mean;
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

/// Relaxed maximizer of `mᵀD̂m` over unit, sum-zero vectors.
///
/// Power iteration on `D̂ + n·I` (positive semidefinite because `D̂ ⪰ −n·I`
/// for unit columns), projecting onto `Σmᵢ = 0` after each multiply. Stops
/// once successive quotients move less than `cfg.tol`.
pub fn solve_indicator(d: &AffinityMatrix, cfg: &InterMatchConfig) -> Result<Solution> {
    let n = d.n();
    if n < 2 {
        return Err(Error::Dimension(format!(
            "need at least 2 columns, got {n}"
        )));
    }
    let a = d.d_hat.data();
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[i * n + j] - a[j * n + i]).abs() > SYMMETRY_TOL {
                return Err(Error::Contract(format!(
                    "affinity is not symmetric at ({i}, {j})"
                )));
            }
        }
    }

    let row_means: Vec<f64> = (0..n)
        .map(|i| a[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64)
        .collect();

    // Start from the centered row sums so that permuting the columns permutes
    // the iterates; fall back to a fixed random vector when they vanish.
    let mut v = row_means.clone();
    project_sum_zero(&mut v);
    if normalize(&mut v) < 1e-9 {
        let mut start_rng = RngStream::new(START_SEED, n as u64);
        v = (0..n).map(|_| start_rng.uniform(-1.0, 1.0)).collect();
        project_sum_zero(&mut v);
        normalize(&mut v);
    }

    // P·D̂·P, i.e. D̂ double-centered; zero means no preferred direction.
    let grand = row_means.iter().sum::<f64>() / n as f64;
    let centered_max = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| (a[i * n + j] - row_means[i] - row_means[j] + grand).abs())
        .fold(0.0, f64::max);
    if centered_max <= 1e-12 {
        let rayleigh = d.quadratic(&v);
        return Ok(Solution {
            indicator: ClusterIndicator::relaxed(v),
            rayleigh,
            iterations: 0,
            status: SolveStatus::Degenerate,
            history: vec![rayleigh],
        });
    }

    let shift = n as f64;
    let mut q = d.quadratic(&v);
    let mut history = vec![q];
    let mut status = SolveStatus::MaxIterations;
    let mut iterations = 0;
    let mut w = vec![0.0; n];
    for it in 1..=cfg.power_iters_max {
        for i in 0..n {
            let row = &a[i * n..(i + 1) * n];
            w[i] = row.iter().zip(&v).map(|(x, y)| x * y).sum::<f64>() + shift * v[i];
        }
        project_sum_zero(&mut w);
        if normalize(&mut w) == 0.0 {
            break;
        }
        std::mem::swap(&mut v, &mut w);
        let next = d.quadratic(&v);
        history.push(next);
        iterations = it;
        let done = (next - q).abs() < cfg.tol;
        q = next;
        if done {
            status = SolveStatus::Converged;
            break;
        }
    }
    Ok(Solution {
        indicator: ClusterIndicator::relaxed(v),
        rayleigh: q,
        iterations,
        status,
        history,
    })
}

/// Fixes the eigenvector sign: the positive side must carry the larger mean
/// raw activation norm. An exact tie keeps the input sign.
pub fn orient(m: &ClusterIndicator, raw_norms: &[f64]) -> Result<ClusterIndicator> {
    if m.mode != IndicatorMode::Relaxed {
        return Err(Error::Contract("orient expects a relaxed indicator".into()));
    }
    if raw_norms.len() != m.len() {
        return Err(Error::Dimension(format!(
            "{} norms for {} indicator entries",
            raw_norms.len(),
            m.len()
        )));
    }
    let side_mean = |positive: bool| {
        let (sum, count) = m
            .values
            .iter()
            .zip(raw_norms)
            .filter(|(&v, _)| if positive { v > 0.0 } else { v < 0.0 })
            .fold((0.0, 0usize), |(s, c), (_, &r)| (s + r, c + 1));
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    };
    if side_mean(true) < side_mean(false) {
        Ok(m.negated())
    } else {
        Ok(m.clone())
    }
}

/// Per-image slice of an indicator, laid out row-major over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CoMask {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl CoMask {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Dimension(format!(
                "mask of {} values for a {height}x{width} grid",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Per-point multipliers: `alpha` where the mask is positive, else 1.
    pub fn scales(&self, alpha: f64) -> Vec<f64> {
        self.values
            .iter()
            .map(|&v| if v > 0.0 { alpha } else { 1.0 })
            .collect()
    }
}

pub fn split_masks(
    m: &ClusterIndicator,
    height: usize,
    width: usize,
    group_n: usize,
) -> Result<Vec<CoMask>> {
    let n = height * width;
    if m.len() != n * group_n {
        return Err(Error::Dimension(format!(
            "indicator of length {} cannot split into {group_n} masks of {height}x{width}",
            m.len()
        )));
    }
    m.values
        .chunks(n)
        .map(|chunk| CoMask::new(height, width, chunk.to_vec()))
        .collect()
}

/// Inverse of [`split_masks`].
pub fn concat_masks(masks: &[CoMask]) -> Vec<f64> {
    masks
        .iter()
        .flat_map(|m| m.values.iter().copied())
        .collect()
}

/// Multiplies features at positive-mask points by `alpha`; zero or negative
/// mask entries leave the feature unchanged.
pub fn reweight(f: &FeatureMap, mask: &CoMask, alpha: f64) -> Result<FeatureMap> {
    if !(alpha > 1.0) || !alpha.is_finite() {
        return Err(Error::Parameter(format!("alpha must be > 1, got {alpha}")));
    }
    if f.height() != mask.height || f.width() != mask.width {
        return Err(Error::Dimension(format!(
            "mask {}x{} does not match feature grid {}x{}",
            mask.height,
            mask.width,
            f.height(),
            f.width()
        )));
    }
    FeatureMap::new(
        f.height(),
        f.width(),
        scale_columns(f.matrix(), &mask.scales(alpha)),
    )
}

/// Multiplies column `j` of a `c×n` matrix by `scales[j]`.
pub(crate) fn scale_columns(x: &Tensor, scales: &[f64]) -> Tensor {
    let n = scales.len();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        for (v, s) in row.iter_mut().zip(scales) {
            *v *= s;
        }
    }
    out
}

/// Result of running the whole inter-matching step on a group.
#[derive(Debug, Clone)]
pub struct GroupMatch {
    pub masks: Vec<CoMask>,
    pub solution: Solution,
}

/// pack → affinity → solve → orient → split.
pub fn match_group(maps: &[FeatureMap], cfg: &InterMatchConfig) -> Result<GroupMatch> {
    let pack = pack_features(maps)?;
    let affinity = build_affinity(&pack);
    let mut solution = solve_indicator(&affinity, cfg)?;
    solution.indicator = orient(&solution.indicator, pack.raw_norms())?;
    let masks = split_masks(
        &solution.indicator,
        pack.height(),
        pack.width(),
        pack.group_n(),
    )?;
    Ok(GroupMatch { masks, solution })
}

pub const BRUTE_FORCE_MAX: usize = 16;

/// Exhaustive minimizer of [`sum_objective`] over all `2^n` splits.
///
/// Assignments are visited in lexicographic order (bg < fg, first column most
/// significant) and only a strict improvement replaces the incumbent.
pub fn brute_force(x: &FeaturePack) -> Result<(Vec<bool>, f64)> {
    let n = x.n_total();
    if n > BRUTE_FORCE_MAX {
        return Err(Error::Parameter(format!(
            "brute force is limited to {BRUTE_FORCE_MAX} columns, got {n}"
        )));
    }
    let d = squared_distances(x);
    let mut best: Option<(Vec<bool>, f64)> = None;
    let mut assign = vec![false; n];
    for code in 0u32..(1u32 << n) {
        for (i, a) in assign.iter_mut().enumerate() {
            *a = code >> (n - 1 - i) & 1 == 1;
        }
        let value = signed_pair_sum(&assign, &d);
        if best.as_ref().is_none_or(|(_, b)| value < *b) {
            best = Some((assign.clone(), value));
        }
    }
    Ok(best.expect("at least one assignment"))
}

/// Median wall time in seconds of pack → affinity → solve on random
/// non-negative `height×width×channels` maps.
pub fn time_group_match(
    height: usize,
    width: usize,
    channels: usize,
    group_n: usize,
    trials: usize,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::Parameter("trials must be positive".into()));
    }
    if !(2..=5).contains(&group_n) {
        return Err(Error::Parameter(format!(
            "group_n must be in 2..=5, got {group_n}"
        )));
    }
    let cfg = InterMatchConfig {
        group_n,
        ..InterMatchConfig::default()
    };
    let n = height * width;
    let mut times = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut rng = RngStream::new(trial as u64, group_n as u64);
        let maps = (0..group_n)
            .map(|_| {
                let data = (0..channels * n).map(|_| rng.uniform(0.0, 1.0)).collect();
                FeatureMap::new(height, width, Tensor::from_vec(&[channels, n], data)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let started = Instant::now();
        let pack = pack_features(&maps)?;
        let affinity = build_affinity(&pack);
        let solution = solve_indicator(&affinity, &cfg)?;
        times.push(started.elapsed().as_secs_f64());
        std::hint::black_box(solution);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orthonormal_pair() -> FeaturePack {
        FeaturePack::from_columns(&Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap()
    }

    fn random_pack(rng: &mut RngStream, c: usize, n: usize) -> FeaturePack {
        let data = (0..c * n).map(|_| rng.normal()).collect();
        FeaturePack::from_columns(&Tensor::from_vec(&[c, n], data).unwrap()).unwrap()
    }

    fn random_map(rng: &mut RngStream, h: usize, w: usize, c: usize) -> FeatureMap {
        let data = (0..c * h * w).map(|_| rng.uniform(0.0, 1.0)).collect();
        FeatureMap::new(h, w, Tensor::from_vec(&[c, h * w], data).unwrap()).unwrap()
    }

    #[test]
    fn pack_shapes_and_duplicates() {
        let mut rng = RngStream::new(1, 0);
        let a = random_map(&mut rng, 2, 2, 3);
        let pack = pack_features(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(pack.n_total(), 8);
        assert_eq!(
            pack.image_columns(0).unwrap(),
            pack.image_columns(1).unwrap()
        );

        let b = random_map(&mut rng, 2, 3, 3);
        assert!(matches!(
            pack_features(&[a.clone(), b]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(pack_features(&[a]), Err(Error::Dimension(_))));
    }

    #[test]
    fn unpack_recovers_normalized_inputs() {
        let mut rng = RngStream::new(2, 0);
        let maps: Vec<_> = (0..3).map(|_| random_map(&mut rng, 3, 2, 4)).collect();
        let pack = pack_features(&maps).unwrap();
        for (i, m) in maps.iter().enumerate() {
            let want = l2_normalize_cols(m.matrix()).unwrap();
            assert_eq!(pack.image_columns(i).unwrap(), want);
        }
    }

    #[test]
    fn objective_hand_cases() {
        let pair = orthonormal_pair();
        assert_eq!(sum_objective(&[true, false], &pair).unwrap(), -4.0);
        assert_eq!(sum_objective(&[false, true], &pair).unwrap(), -4.0);
        let m = ClusterIndicator::discrete(&[true, false]);
        assert!((matrix_objective(&m, &pair).unwrap() + 4.0).abs() < 1e-12);

        let same = FeaturePack::from_columns(&Tensor::filled(&[3, 5], 0.4).unwrap()).unwrap();
        let assign = [true, false, false, true, true];
        assert_eq!(sum_objective(&assign, &same).unwrap(), 0.0);
        let m = ClusterIndicator::discrete(&assign);
        assert_eq!(matrix_objective(&m, &same).unwrap(), 0.0);
    }

    #[test]
    fn matrix_objective_rejects_relaxed() {
        let m = ClusterIndicator::relaxed(vec![0.5, -0.5]);
        assert!(matches!(
            matrix_objective(&m, &orthonormal_pair()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn label_swap_preserves_objective() {
        let mut rng = RngStream::new(3, 0);
        let pack = random_pack(&mut rng, 4, 9);
        let assign: Vec<bool> = (0..9).map(|_| rng.bernoulli(0.5)).collect();
        let flipped: Vec<bool> = assign.iter().map(|a| !a).collect();
        assert_eq!(
            sum_objective(&assign, &pack).unwrap(),
            sum_objective(&flipped, &pack).unwrap()
        );
    }

    #[test]
    fn two_routes_agree_on_random_pack() {
        let mut rng = RngStream::new(4, 0);
        for _ in 0..50 {
            let pack = random_pack(&mut rng, 3, 8);
            let assign: Vec<bool> = (0..8).map(|_| rng.bernoulli(0.5)).collect();
            let a = sum_objective(&assign, &pack).unwrap();
            let b = matrix_objective(&ClusterIndicator::discrete(&assign), &pack).unwrap();
            assert!((a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0));
        }
    }

    #[test]
    fn affinity_cases() {
        let same = FeaturePack::from_columns(&Tensor::filled(&[2, 4], 1.0).unwrap()).unwrap();
        assert!(build_affinity(&same).matrix().max_abs() < 1e-15);

        let d = build_affinity(&orthonormal_pair());
        assert_eq!(
            d.matrix(),
            &Tensor::from_rows(&[&[0.0, -1.0], &[-1.0, 0.0]])
        );

        let mut rng = RngStream::new(5, 0);
        let pack = random_pack(&mut rng, 5, 12);
        let d_hat = build_affinity(&pack);
        let dist = squared_distances(&pack);
        for (a, b) in d_hat.matrix().data().iter().zip(dist.data()) {
            assert!((a + 0.5 * b).abs() < 1e-12);
            assert!((-2.0 - 1e-12..=1e-12).contains(a));
        }
    }

    #[test]
    fn solver_separates_two_clusters() {
        let mut rng = RngStream::new(6, 0);
        let mut cols = Vec::new();
        for k in 0..8 {
            let base = if k < 4 {
                [1.0, 0.1, 0.0]
            } else {
                [0.0, 0.1, 1.0]
            };
            cols.push(base.map(|b| b + 0.05 * rng.normal()));
        }
        let x = Tensor::from_vec(
            &[3, 8],
            (0..3)
                .flat_map(|r| cols.iter().map(move |c| c[r]))
                .collect(),
        )
        .unwrap();
        let pack = FeaturePack::from_columns(&x).unwrap();
        let sol = solve_indicator(&build_affinity(&pack), &InterMatchConfig::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Converged);
        let signs = sol.indicator.to_assignment();
        let (best, _) = brute_force(&pack).unwrap();
        let complement: Vec<bool> = best.iter().map(|b| !b).collect();
        assert!(signs == best || signs == complement);
        assert!(signs[..4].iter().all(|&s| s == signs[0]));
        assert!(signs[4..].iter().all(|&s| s != signs[0]));
    }

    #[test]
    fn solver_flags_degenerate_input() {
        let same = FeaturePack::from_columns(&Tensor::filled(&[3, 6], 2.0).unwrap()).unwrap();
        let sol = solve_indicator(&build_affinity(&same), &InterMatchConfig::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Degenerate);
        let v = sol.indicator.values();
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(v.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn solver_rejects_asymmetric() {
        let d =
            AffinityMatrix::from_matrix(Tensor::from_rows(&[&[0.0, -1.0], &[-0.5, 0.0]])).unwrap();
        assert!(matches!(
            solve_indicator(&d, &InterMatchConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn solver_output_is_feasible_and_monotone() {
        let mut rng = RngStream::new(7, 0);
        for _ in 0..20 {
            let pack = random_pack(&mut rng, 4, 14);
            let sol =
                solve_indicator(&build_affinity(&pack), &InterMatchConfig::default()).unwrap();
            let v = sol.indicator.values();
            assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
            assert!(v.iter().sum::<f64>().abs() < 1e-6);
            for w in sol.history.windows(2) {
                assert!(w[1] >= w[0] - 1e-12, "quotient decreased: {w:?}");
            }
        }
    }

    #[test]
    fn orient_rules() {
        let m = ClusterIndicator::relaxed(vec![0.5, 0.5, -0.5, -0.5]);
        let norms = [1.0, 1.0, 3.0, 3.0];
        let o = orient(&m, &norms).unwrap();
        assert_eq!(o.values(), &[-0.5, -0.5, 0.5, 0.5]);
        assert_eq!(orient(&o, &norms).unwrap(), o);
        let tie = orient(&m, &[2.0; 4]).unwrap();
        assert_eq!(tie, m);
        assert!(orient(&ClusterIndicator::discrete(&[true, false]), &[1.0, 1.0]).is_err());
    }

    #[test]
    fn split_and_concat() {
        let values: Vec<f64> = (0..8).map(|v| v as f64 - 3.5).collect();
        let m = ClusterIndicator::relaxed(values.clone());
        let masks = split_masks(&m, 2, 2, 2).unwrap();
        assert_eq!(masks.len(), 2);
        assert_eq!(concat_masks(&masks), values);
        for r in 0..2 {
            for c in 0..2 {
                assert_eq!(masks[0].at(r, c), values[r * 2 + c]);
                assert_eq!(masks[1].at(r, c), values[4 + r * 2 + c]);
            }
        }
        assert!(matches!(split_masks(&m, 3, 2, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn reweight_cases() {
        let mut rng = RngStream::new(8, 0);
        let f = random_map(&mut rng, 2, 3, 4);
        let pos = CoMask::new(2, 3, vec![0.1; 6]).unwrap();
        let boosted = reweight(&f, &pos, 1.5).unwrap();
        assert_eq!(boosted.matrix(), &f.matrix().scale(1.5));

        let neg = CoMask::new(2, 3, vec![-0.1; 6]).unwrap();
        assert_eq!(reweight(&f, &neg, 1.5).unwrap(), f);

        let mixed = CoMask::new(2, 3, vec![0.2, -0.1, 0.0, 0.3, -0.4, 1e-9]).unwrap();
        let out = reweight(&f, &mixed, 1.8).unwrap();
        for ch in 0..4 {
            for p in 0..6 {
                let s = if mixed.values()[p] > 0.0 { 1.8 } else { 1.0 };
                assert_eq!(out.matrix().at2(ch, p), f.matrix().at2(ch, p) * s);
            }
        }
        assert!(matches!(reweight(&f, &pos, 1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn brute_force_cases() {
        let (assign, value) = brute_force(&orthonormal_pair()).unwrap();
        assert_eq!(assign, vec![false, true]);
        assert_eq!(value, -4.0);

        let same = FeaturePack::from_columns(&Tensor::filled(&[2, 5], 1.0).unwrap()).unwrap();
        let (assign, value) = brute_force(&same).unwrap();
        assert_eq!(assign, vec![false; 5]);
        assert_eq!(value, 0.0);

        let big = FeaturePack::from_columns(&Tensor::filled(&[2, 17], 1.0).unwrap()).unwrap();
        assert!(matches!(brute_force(&big), Err(Error::Parameter(_))));
    }

    #[test]
    fn timing_parameters() {
        assert!(matches!(
            time_group_match(2, 2, 3, 2, 0),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            time_group_match(2, 2, 3, 6, 1),
            Err(Error::Parameter(_))
        ));
        assert!(time_group_match(2, 2, 3, 3, 2).unwrap() >= 0.0);
    }

    #[test]
    fn group_match_is_permutation_equivariant() {
        let mut rng = RngStream::new(9, 0);
        let a = random_map(&mut rng, 4, 4, 6);
        let b = random_map(&mut rng, 4, 4, 6);
        let cfg = InterMatchConfig::default();
        let ab = match_group(&[a.clone(), b.clone()], &cfg).unwrap();
        let ba = match_group(&[b, a], &cfg).unwrap();
        let sign = |m: &CoMask| m.values().iter().map(|&v| v > 0.0).collect::<Vec<_>>();
        assert_eq!(sign(&ab.masks[0]), sign(&ba.masks[1]));
        assert_eq!(sign(&ab.masks[1]), sign(&ba.masks[0]));
    }
}
