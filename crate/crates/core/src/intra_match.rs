//! Top-k propagation within a single feature map.
//!
//! Every point is matched to the `k` points with the largest inner product
//! (itself excluded through a `-inf` diagonal) and replaced by the elementwise
//! maximum of a shared two-layer MLP applied to those neighbors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::rng::RngStream;
use crate::tensor::{matmul_tn, top_k_rows, MatchIndex, Tensor};

/// Gram matrix of a map's points with the diagonal masked out.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    g: Tensor,
}

impl SimilarityMatrix {
    pub fn matrix(&self) -> &Tensor {
        &self.g
    }

    pub fn n(&self) -> usize {
        self.g.shape()[0]
    }
}

/// How candidate neighbors are ranked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `G = FᵀF`, raw inner products.
    InnerProduct,
    /// `G = −‖fᵢ − fⱼ‖²`, so the top-k are the nearest points in ℓ2.
    #[default]
    L2,
}

/// Inner-product similarity `FᵀF` with the diagonal masked out.
pub fn similarity(f: &FeatureMap) -> SimilarityMatrix {
    similarity_with(f, Metric::InnerProduct)
}

pub fn similarity_with(f: &FeatureMap, metric: Metric) -> SimilarityMatrix {
    let mut g = matmul_tn(f.matrix(), f.matrix()).expect("feature matrix is rank 2");
    let n = f.points();
    if metric == Metric::L2 {
        let sq: Vec<f64> = (0..n).map(|i| g.at2(i, i)).collect();
        for i in 0..n {
            for j in 0..n {
                let v = 2.0 * g.at2(i, j) - sq[i] - sq[j];
                g.set2(i, j, v);
            }
        }
    }
    for i in 0..n {
        g.set2(i, i, f64::NEG_INFINITY);
    }
    SimilarityMatrix { g }
}

pub fn top_k_match(g: &SimilarityMatrix, k: usize) -> Result<MatchIndex> {
    top_k_rows(&g.g, k)
}

/// `out[:, i, j] = f[:, idx[i, j]]` for a `c×n` matrix `f`.
pub fn gather(f: &Tensor, idx: &MatchIndex) -> Result<Tensor> {
    let (c, n) = f.dims2()?;
    let k = idx.k();
    if idx.rows() != n {
        return Err(Error::Dimension(format!(
            "match table has {} rows for {n} points",
            idx.rows()
        )));
    }
    if let Some(&bad) = idx.as_slice().iter().find(|&&j| j >= n) {
        return Err(Error::Contract(format!(
            "match index {bad} out of range for {n} points"
        )));
    }
    let mut out = vec![0.0; c * n * k];
    for ch in 0..c {
        let src = &f.data()[ch * n..(ch + 1) * n];
        let dst = &mut out[ch * n * k..(ch + 1) * n * k];
        for (d, &j) in dst.iter_mut().zip(idx.as_slice()) {
            *d = src[j];
        }
    }
    Tensor::from_vec(&[c, n, k], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntraMatchConfig {
    pub k: usize,
    pub metric: Metric,
}

impl Default for IntraMatchConfig {
    fn default() -> Self {
        Self {
            k: 8,
            metric: Metric::default(),
        }
    }
}

/// Weights of the shared point MLP `c → c → c` with a rectifier in between.
#[derive(Debug, Clone, PartialEq)]
pub struct PointUpdateParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl PointUpdateParams {
    pub fn zeros(c: usize) -> Result<Self> {
        Ok(Self {
            w1: Tensor::zeros(&[c, c])?,
            b1: Tensor::zeros(&[c])?,
            w2: Tensor::zeros(&[c, c])?,
            b2: Tensor::zeros(&[c])?,
        })
    }

    /// Uniform `(-1/√c, 1/√c)` weights and biases.
    pub fn init(c: usize, rng: &mut RngStream) -> Result<Self> {
        let s = 1.0 / (c as f64).sqrt();
        let mut draw = |shape: &[usize], s: f64| -> Result<Tensor> {
            let len = shape.iter().product();
            Tensor::from_vec(shape, (0..len).map(|_| rng.uniform(-s, s)).collect())
        };
        let g = s;
        Ok(Self {
            w1: draw(&[c, c], g)?,
            b1: draw(&[c], s)?,
            w2: draw(&[c, c], g)?,
            b2: draw(&[c], s)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.b1.len()
    }

    fn check(&self, c: usize) -> Result<()> {
        let ok = self.w1.shape() == [c, c]
            && self.w2.shape() == [c, c]
            && self.b1.shape() == [c]
            && self.b2.shape() == [c];
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "point MLP weights do not match {c} channels"
            )))
        }
    }
}

/// Activations kept by the forward pass for [`backward_update`].
#[derive(Debug, Clone)]
pub struct UpdateCache {
    input: Tensor,
    pre: Tensor,
    hidden: Tensor,
    /// For output entry `(ch, i)`, the input column that won the max.
    winners: Vec<usize>,
    n_out: usize,
}

impl UpdateCache {
    /// Winning input column of output point `i` in channel `ch`.
    pub fn winner(&self, ch: usize, i: usize) -> usize {
        self.winners[ch * self.n_out + i]
    }
}

fn dense_columns(w: &Tensor, b: &Tensor, x: &Tensor) -> Tensor {
    let (out_c, in_c) = (w.shape()[0], w.shape()[1]);
    let m = x.shape()[1];
    let mut out = vec![0.0; out_c * m];
    for o in 0..out_c {
        let row = &mut out[o * m..(o + 1) * m];
        row.fill(b.data()[o]);
        for p in 0..in_c {
            let wv = w.data()[o * in_c + p];
            for (r, &xv) in row.iter_mut().zip(&x.data()[p * m..(p + 1) * m]) {
                *r += wv * xv;
            }
        }
    }
    Tensor::from_vec(&[out_c, m], out).expect("positive extents")
}

/// Applies the MLP to every column of `x` and max-pools groups of columns.
///
/// `source(i, s)` names the input column feeding slot `s` of output point `i`.
fn mlp_max(
    x: &Tensor,
    n_out: usize,
    k: usize,
    source: impl Fn(usize, usize) -> usize,
    p: &PointUpdateParams,
) -> Result<(Tensor, UpdateCache)> {
    let (c, _) = x.dims2()?;
    p.check(c)?;
    let pre = dense_columns(&p.w1, &p.b1, x);
    let hidden = pre.map(|v| v.max(0.0));
    let mapped = dense_columns(&p.w2, &p.b2, &hidden);
    let m = mapped.shape()[1];
    let mut out = vec![0.0; c * n_out];
    let mut winners = vec![0; c * n_out];
    for ch in 0..c {
        let row = &mapped.data()[ch * m..(ch + 1) * m];
        for i in 0..n_out {
            let mut best = source(i, 0);
            for s in 1..k {
                let j = source(i, s);
                if row[j] > row[best] {
                    best = j;
                }
            }
            out[ch * n_out + i] = row[best];
            winners[ch * n_out + i] = best;
        }
    }
    let cache = UpdateCache {
        input: x.clone(),
        pre,
        hidden,
        winners,
        n_out,
    };
    Ok((Tensor::from_vec(&[c, n_out], out)?, cache))
}

/// Max over the `K` neighbor slots of `MLP(neighbor)`, for a `c×n×K` tensor.
///
/// Ties go to the lowest slot.
pub fn update_points(
    neigh: &Tensor,
    height: usize,
    width: usize,
    p: &PointUpdateParams,
) -> Result<(FeatureMap, UpdateCache)> {
    let &[c, n, k] = neigh.shape() else {
        return Err(Error::Dimension(format!(
            "expected c×n×K neighbors, got {:?}",
            neigh.shape()
        )));
    };
    let flat = neigh.reshape(&[c, n * k])?;
    let (out, cache) = mlp_max(&flat, n, k, |i, s| i * k + s, p)?;
    Ok((FeatureMap::new(height, width, out)?, cache))
}

#[derive(Debug, Clone)]
pub struct IntraOutput {
    pub output: FeatureMap,
    pub index: MatchIndex,
    pub cache: UpdateCache,
}

/// similarity → top-k → MLP/max update of one map.
pub fn intra_match(
    f: &FeatureMap,
    cfg: &IntraMatchConfig,
    p: &PointUpdateParams,
) -> Result<IntraOutput> {
    let g = similarity_with(f, cfg.metric);
    let index = top_k_match(&g, cfg.k)?;
    propagate(f, index, p)
}

/// The update step with a precomputed match table.
///
/// Equivalent to `update_points(gather(f, index))`, but evaluates the MLP once
/// per point instead of once per slot.
pub fn propagate(f: &FeatureMap, index: MatchIndex, p: &PointUpdateParams) -> Result<IntraOutput> {
    let n = f.points();
    if index.rows() != n || index.as_slice().iter().any(|&j| j >= n) {
        return Err(Error::Contract(format!(
            "match table does not index {n} points"
        )));
    }
    let k = index.k();
    let (out, cache) = mlp_max(f.matrix(), n, k, |i, s| index.row(i)[s], p)?;
    Ok(IntraOutput {
        output: FeatureMap::new(f.height(), f.width(), out)?,
        index,
        cache,
    })
}

/// Reverse pass of the MLP/max update.
///
/// Returns the gradient with respect to the MLP input columns (shape of the
/// cached input) and the parameter gradients. Each output entry sends its
/// gradient to the winning slot only; match indices are constants.
pub fn backward_update(
    grad_out: &Tensor,
    cache: Option<&UpdateCache>,
    p: &PointUpdateParams,
) -> Result<(Tensor, PointUpdateParams)> {
    let cache = cache.ok_or_else(|| {
        Error::Contract("point update backward called without a forward cache".into())
    })?;
    let (c, m) = cache.input.dims2()?;
    if grad_out.shape() != [c, cache.n_out] {
        return Err(Error::Dimension(format!(
            "output gradient {:?} does not match {c}x{}",
            grad_out.shape(),
            cache.n_out
        )));
    }
    p.check(c)?;

    // Scatter through the max.
    let mut d_mapped = vec![0.0; c * m];
    for ch in 0..c {
        for i in 0..cache.n_out {
            let g = grad_out.data()[ch * cache.n_out + i];
            d_mapped[ch * m + cache.winners[ch * cache.n_out + i]] += g;
        }
    }

    let mut grads = PointUpdateParams::zeros(c)?;
    // Second layer.
    let mut d_hidden = vec![0.0; c * m];
    for o in 0..c {
        let drow = &d_mapped[o * m..(o + 1) * m];
        grads.b2.data_mut()[o] = drow.iter().sum();
        for q in 0..c {
            let hrow = &cache.hidden.data()[q * m..(q + 1) * m];
            grads.w2.data_mut()[o * c + q] = drow.iter().zip(hrow).map(|(a, b)| a * b).sum();
            let w = p.w2.data()[o * c + q];
            for (dh, &dv) in d_hidden[q * m..(q + 1) * m].iter_mut().zip(drow) {
                *dh += w * dv;
            }
        }
    }
    // Rectifier.
    for (dh, &z) in d_hidden.iter_mut().zip(cache.pre.data()) {
        if z <= 0.0 {
            *dh = 0.0;
        }
    }
    // First layer.
    let mut d_input = vec![0.0; c * m];
    for o in 0..c {
        let drow = &d_hidden[o * m..(o + 1) * m];
        grads.b1.data_mut()[o] = drow.iter().sum();
        for q in 0..c {
            let xrow = &cache.input.data()[q * m..(q + 1) * m];
            grads.w1.data_mut()[o * c + q] = drow.iter().zip(xrow).map(|(a, b)| a * b).sum();
            let w = p.w1.data()[o * c + q];
            for (dx, &dv) in d_input[q * m..(q + 1) * m].iter_mut().zip(drow) {
                *dx += w * dv;
            }
        }
    }
    Ok((Tensor::from_vec(&[c, m], d_input)?, grads))
}
