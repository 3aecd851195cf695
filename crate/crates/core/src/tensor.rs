//! Dense containers plus the pooling, normalization and PCA primitives the
//! rest of the crate builds on.
//!
//! All reductions accumulate in `f64`, whatever the storage dtype.

use std::ops::Range;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Norms below this are treated as having no direction.
pub const EPS_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Row-major dense tensor with a fixed storage dtype.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: TensorData,
}

fn checked_numel(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() {
        return Err(Error::dim("tensor must have at least one dimension"));
    }
    if let Some(i) = dims.iter().position(|&d| d == 0) {
        return Err(Error::dim(format!("dimension {i} is zero in {dims:?}")));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::dim(format!("element count of {dims:?} overflows")))
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        let numel = checked_numel(&dims)?;
        if numel != data.len() {
            return Err(Error::dim(format!(
                "dims {dims:?} need {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_f64(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(dims, TensorData::F64(data))
    }

    pub fn from_f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(dims, TensorData::F32(data))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Values widened to `f64`.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    /// Same dims, stored as `f64`.
    pub fn to_f64(&self) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: TensorData::F64(self.to_f64_vec()),
        }
    }

    pub fn to_array2(&self) -> Result<Array2<f64>> {
        match self.dims[..] {
            [a, b] => Ok(Array2::from_shape_vec((a, b), self.to_f64_vec()).expect("checked dims")),
            _ => Err(Error::dim(format!("expected 2-d tensor, got {:?}", self.dims))),
        }
    }

    pub fn to_array3(&self) -> Result<Array3<f64>> {
        match self.dims[..] {
            [a, b, c] => {
                Ok(Array3::from_shape_vec((a, b, c), self.to_f64_vec()).expect("checked dims"))
            }
            _ => Err(Error::dim(format!("expected 3-d tensor, got {:?}", self.dims))),
        }
    }

    pub fn from_array<D: ndarray::Dimension>(array: &ndarray::Array<f64, D>) -> Self {
        let dims = array.shape().to_vec();
        let data = array.iter().copied().collect();
        Tensor {
            dims,
            data: TensorData::F64(data),
        }
    }

    pub fn from_array_f32<D: ndarray::Dimension>(array: &ndarray::Array<f32, D>) -> Self {
        let dims = array.shape().to_vec();
        let data = array.iter().copied().collect();
        Tensor {
            dims,
            data: TensorData::F32(data),
        }
    }
}

/// Per-frame token features laid out as `[T, h, w, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    values: Array4<f64>,
}

impl TokenGrid {
    pub const DEFAULT_ROWS: usize = 14;
    pub const DEFAULT_COLS: usize = 14;

    pub fn new(values: Array4<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::dim(format!(
                "token grid has an empty axis: {:?}",
                values.shape()
            )));
        }
        Ok(Self { values })
    }

    pub fn from_tensor(tensor: &Tensor) -> Result<Self> {
        match tensor.dims()[..] {
            [t, h, w, c] => Self::new(
                Array4::from_shape_vec((t, h, w, c), tensor.to_f64_vec()).expect("checked dims"),
            ),
            _ => Err(Error::dim(format!(
                "token grid needs dims [T,h,w,C], got {:?}",
                tensor.dims()
            ))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_array(&self.values)
    }

    pub fn values(&self) -> &Array4<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array4<f64> {
        self.values
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[3]
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.frames(), self.rows(), self.cols(), self.channels()]
    }

    pub fn frame(&self, t: usize) -> ArrayView3<'_, f64> {
        self.values.index_axis(Axis(0), t)
    }

    /// Spatially pools every frame to `out_h × out_w`.
    pub fn pooled(&self, out_h: usize, out_w: usize) -> Result<TokenGrid> {
        let mut out = Array4::zeros((self.frames(), out_h, out_w, self.channels()));
        for t in 0..self.frames() {
            let pooled = adaptive_avg_pool2d(self.frame(t), out_h, out_w)?;
            out.index_axis_mut(Axis(0), t).assign(&pooled);
        }
        TokenGrid::new(out)
    }

    /// Keeps only the listed frames, in order.
    pub fn select_frames(&self, indices: &[usize]) -> Result<TokenGrid> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.frames()) {
            return Err(Error::dim(format!(
                "frame index {bad} out of range for {} frames",
                self.frames()
            )));
        }
        TokenGrid::new(self.values.select(Axis(0), indices))
    }
}

/// Half-open window `[floor(i·len/out), ceil((i+1)·len/out))`.
pub fn pool_window(i: usize, len: usize, out: usize) -> Range<usize> {
    let start = (i * len) / out;
    let end = ((i + 1) * len).div_ceil(out);
    start..end
}

fn check_pool_dims(h: usize, w: usize, c: usize, out_h: usize, out_w: usize) -> Result<()> {
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::dim(format!("empty pooling input {h}x{w}x{c}")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim(format!("empty pooling target {out_h}x{out_w}")));
    }
    if out_h > h || out_w > w {
        return Err(Error::dim(format!(
            "pooling target {out_h}x{out_w} exceeds input {h}x{w}"
        )));
    }
    Ok(())
}

/// Adaptive average pooling of an `H×W×C` grid.
///
/// Window sums are taken relative to the window's first cell, so constant
/// windows reproduce their value exactly.
pub fn adaptive_avg_pool2d(input: ArrayView3<f64>, out_h: usize, out_w: usize) -> Result<Array3<f64>> {
    let (h, w, c) = input.dim();
    check_pool_dims(h, w, c, out_h, out_w)?;
    let mut out = Array3::zeros((out_h, out_w, c));
    for i in 0..out_h {
        let rows = pool_window(i, h, out_h);
        for j in 0..out_w {
            let cols = pool_window(j, w, out_w);
            let window = input.slice(s![rows.clone(), cols.clone(), ..]);
            let count = (window.shape()[0] * window.shape()[1]) as f64;
            let anchor = input.slice(s![rows.start, cols.start, ..]);
            let mut cell = out.slice_mut(s![i, j, ..]);
            for px in window.rows() {
                cell += &(&px - &anchor);
            }
            cell /= count;
            cell += &anchor;
        }
    }
    Ok(out)
}

/// Like [`adaptive_avg_pool2d`] but averages only cells where `mask` is set.
///
/// A window with no valid cell yields zeros and a `false` output flag.
pub fn adaptive_avg_pool2d_masked(
    input: ArrayView3<f64>,
    mask: ArrayView2<bool>,
    out_h: usize,
    out_w: usize,
) -> Result<(Array3<f64>, Array2<bool>)> {
    let (h, w, c) = input.dim();
    check_pool_dims(h, w, c, out_h, out_w)?;
    if mask.dim() != (h, w) {
        return Err(Error::dim(format!(
            "mask {:?} does not match grid {h}x{w}",
            mask.dim()
        )));
    }
    let mut out = Array3::zeros((out_h, out_w, c));
    let mut valid = Array2::from_elem((out_h, out_w), false);
    for i in 0..out_h {
        let rows = pool_window(i, h, out_h);
        for j in 0..out_w {
            let cols = pool_window(j, w, out_w);
            let mut count = 0usize;
            let mut anchor = None;
            let mut cell = out.slice_mut(s![i, j, ..]);
            for r in rows.clone() {
                for q in cols.clone() {
                    if mask[[r, q]] {
                        let px = input.slice(s![r, q, ..]);
                        let a = *anchor.get_or_insert(px);
                        cell += &(&px - &a);
                        count += 1;
                    }
                }
            }
            if let Some(a) = anchor {
                cell /= count as f64;
                cell += &a;
                valid[[i, j]] = true;
            }
        }
    }
    Ok((out, valid))
}

/// Source frame for each of `out_t` output frames: `round(i·(T−1)/(out_t−1))`.
pub fn temporal_indices(t: usize, out_t: usize) -> Vec<usize> {
    if out_t == 1 || t == 1 {
        return vec![0; out_t];
    }
    (0..out_t)
        .map(|i| {
            let pos = (i * (t - 1)) as f64 / (out_t - 1) as f64;
            (pos.round() as usize).min(t - 1)
        })
        .collect()
}

pub fn resample_temporal(grid: &TokenGrid, out_t: usize) -> Result<TokenGrid> {
    if out_t == 0 {
        return Err(Error::dim("temporal target must be at least 1 frame"));
    }
    grid.select_frames(&temporal_indices(grid.frames(), out_t))
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Unit vector along `v`, or `None` when `‖v‖ < EPS_NORM`.
pub fn l2_normalize(v: &[f64]) -> Option<Vec<f64>> {
    let n = norm(v);
    if !(n >= EPS_NORM) {
        return None;
    }
    Some(v.iter().map(|x| x / n).collect())
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::dim(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (norm(u), norm(v));
    for n in [nu, nv] {
        if !(n >= EPS_NORM) {
            return Err(Error::DegenerateNorm { norm: n, eps: EPS_NORM });
        }
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Result of [`pca_project`].
#[derive(Debug, Clone)]
pub struct Pca {
    /// `N × k` projections of the centered tokens.
    pub coords: Array2<f64>,
    /// `k × D`, orthonormal rows.
    pub basis: Array2<f64>,
    pub explained_ratio: Vec<f64>,
    /// Components past the rank of the data carry no variance.
    pub zero_variance: Vec<bool>,
    pub mean: Array1<f64>,
}

const PCA_TOL: f64 = 1e-9;
const PCA_MAX_ITERS: usize = 1000;

fn orthogonalize(v: &mut Array1<f64>, basis: &[Array1<f64>]) {
    for b in basis {
        let p = v.dot(b);
        v.scaled_add(-p, b);
    }
}

fn sign_canonical(v: &mut Array1<f64>) {
    let lead = v
        .iter()
        .copied()
        .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
    if lead < 0.0 {
        v.mapv_inplace(|x| -x);
    }
}

/// Unit vector orthogonal to every row of `basis`, from the standard axes.
fn complement_vector(dim: usize, basis: &[Array1<f64>]) -> Array1<f64> {
    let mut best: Option<Array1<f64>> = None;
    let mut best_norm = 0.0;
    for axis in 0..dim {
        let mut e = Array1::zeros(dim);
        e[axis] = 1.0;
        orthogonalize(&mut e, basis);
        orthogonalize(&mut e, basis);
        let n = e.dot(&e).sqrt();
        if n > best_norm {
            best_norm = n;
            best = Some(e);
        }
    }
    let e = best.expect("dim >= 1");
    &e / best_norm
}

/// Principal components of `tokens` (`N × D`) by power iteration with
/// deflation.
pub fn pca_project(tokens: ArrayView2<f64>, k: usize) -> Result<Pca> {
    let (n, d) = tokens.dim();
    if n < 2 {
        return Err(Error::dim(format!("PCA needs at least 2 tokens, got {n}")));
    }
    if k == 0 || k > n.min(d) {
        return Err(Error::dim(format!(
            "PCA rank {k} outside 1..={} for {n}x{d} input",
            n.min(d)
        )));
    }
    let mean = tokens.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &tokens - &mean;
    let cov = centered.t().dot(&centered) / (n - 1) as f64;
    let total: f64 = cov.diag().sum();

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_bca5);
    let mut basis: Vec<Array1<f64>> = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    let mut zero_variance = Vec::with_capacity(k);
    let floor = EPS_NORM * total.max(f64::MIN_POSITIVE);

    for _ in 0..k {
        let mut v: Array1<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        orthogonalize(&mut v, &basis);
        let mut vn = v.dot(&v).sqrt();
        let mut found = None;
        if vn > EPS_NORM {
            v /= vn;
            for _ in 0..PCA_MAX_ITERS {
                let mut w = cov.dot(&v);
                // Deflation by projection keeps later components orthogonal.
                orthogonalize(&mut w, &basis);
                vn = w.dot(&w).sqrt();
                if vn <= floor {
                    break;
                }
                w /= vn;
                let delta = (&w - &v).mapv(|x| x * x).sum().sqrt();
                let flipped = (&w + &v).mapv(|x| x * x).sum().sqrt();
                v = w;
                found = Some(());
                if delta.min(flipped) < PCA_TOL {
                    break;
                }
            }
        }
        let lambda = if found.is_some() { v.dot(&cov.dot(&v)) } else { 0.0 };
        if found.is_none() || lambda <= floor {
            let mut e = complement_vector(d, &basis);
            sign_canonical(&mut e);
            basis.push(e);
            eigenvalues.push(0.0);
            zero_variance.push(true);
        } else {
            orthogonalize(&mut v, &basis);
            let vn = v.dot(&v).sqrt();
            v /= vn;
            sign_canonical(&mut v);
            basis.push(v);
            eigenvalues.push(lambda);
            zero_variance.push(false);
        }
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eigenvalues[b].total_cmp(&eigenvalues[a]));
    let mut basis_mat = Array2::zeros((k, d));
    for (row, &src) in order.iter().enumerate() {
        basis_mat.row_mut(row).assign(&basis[src]);
    }
    let explained_ratio = order
        .iter()
        .map(|&i| if total > 0.0 { eigenvalues[i] / total } else { 0.0 })
        .collect();
    let zero_variance = order.iter().map(|&i| zero_variance[i]).collect();
    let coords = centered.dot(&basis_mat.t());
    Ok(Pca {
        coords,
        basis: basis_mat,
        explained_ratio,
        zero_variance,
        mean,
    })
}
