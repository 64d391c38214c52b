//! Small dense tensor type and the handful of kernels the matching pipeline needs.
//!
//! Everything is `f64`, row-major, and accumulates in a fixed order so that two
//! runs over the same inputs produce bit-identical results.

use std::fmt;

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

/// Dense row-major tensor of rank 1 to 4.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::Dimension(format!(
            "rank must be in 1..={MAX_RANK}, got {}",
            shape.len()
        )));
    }
    if shape.contains(&0) {
        return Err(Error::Dimension(format!("zero extent in shape {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        })
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self> {
        let mut t = Self::zeros(shape)?;
        t.data.fill(value);
        Ok(t)
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for tests and literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_vec(&[rows.len(), cols], data).expect("non-empty literal matrix")
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Dimension(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    /// Column `j` of a matrix, copied out.
    pub fn column(&self, j: usize) -> Vec<f64> {
        let (rows, cols) = (self.shape[0], self.shape[1]);
        (0..rows).map(|r| self.data[r * cols + j]).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Metadata-only reshape; the element order is untouched.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "axpy shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Standard matrix product with row-major accumulation.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner extents differ: {m}x{k} * {k2}x{n}"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// `aᵀ·b` without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul_tn inner extents differ: ({k}x{m})ᵀ * {k2}x{n}"
        )));
    }
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}

pub fn transpose(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x.data[i * c + j];
        }
    }
    Tensor::from_vec(&[c, r], out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Scales every column of a `c×n` matrix to unit Euclidean norm.
///
/// All-zero columns become the first basis vector so that a dead encoder
/// output still yields a well-defined affinity.
pub fn l2_normalize_cols(x: &Tensor) -> Result<Tensor> {
    let (rows, cols) = x.dims2()?;
    let mut out = x.clone();
    for j in 0..cols {
        let norm = (0..rows)
            .map(|r| x.data[r * cols + j].powi(2))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            for r in 0..rows {
                out.data[r * cols + j] = if r == 0 { 1.0 } else { 0.0 };
            }
        } else {
            for r in 0..rows {
                out.data[r * cols + j] /= norm;
            }
        }
    }
    Ok(out)
}

/// Euclidean norm of each column of a `c×n` matrix.
pub fn column_norms(x: &Tensor) -> Result<Vec<f64>> {
    let (rows, cols) = x.dims2()?;
    Ok((0..cols)
        .map(|j| {
            (0..rows)
                .map(|r| x.data[r * cols + j].powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Global average pooling of a `c×n` feature matrix: the mean of each row.
pub fn gap(x: &Tensor) -> Result<Tensor> {
    let (c, n) = x.dims2()?;
    let means = (0..c)
        .map(|r| x.data[r * n..(r + 1) * n].iter().sum::<f64>() / n as f64)
        .collect();
    Tensor::from_vec(&[c], means)
}

/// Per-row table of the `k` best column indices of a square score matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchIndex {
    rows: usize,
    k: usize,
    idx: Vec<usize>,
}

impl MatchIndex {
    pub fn new(rows: usize, k: usize, idx: Vec<usize>) -> Result<Self> {
        if idx.len() != rows * k {
            return Err(Error::Dimension(format!(
                "match table needs {} entries, got {}",
                rows * k,
                idx.len()
            )));
        }
        Ok(Self { rows, k, idx })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.idx[i * self.k..(i + 1) * self.k]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.idx
    }
}

/// Indices of the `k` largest entries of each row, best first.
///
/// Equal values are ordered by smaller column index. `-inf` entries sort last,
/// so they are only chosen when a row has fewer than `k` finite values.
pub fn top_k_rows(g: &Tensor, k: usize) -> Result<MatchIndex> {
    let (rows, cols) = g.dims2()?;
    if k == 0 || k >= cols {
        return Err(Error::Parameter(format!(
            "top-k needs 0 < k < {cols}, got k={k}"
        )));
    }
    let mut idx = Vec::with_capacity(rows * k);
    let mut order: Vec<usize> = Vec::with_capacity(cols);
    for i in 0..rows {
        let row = &g.data[i * cols..(i + 1) * cols];
        order.clear();
        order.extend(0..cols);
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        idx.extend_from_slice(&order[..k]);
    }
    MatchIndex::new(rows, k, idx)
}
