//! Multi-view correspondence score.
//!
//! Tokens are binned into voxels of side `s` anchored at the scene's
//! elementwise minimum coordinate. Inside a voxel, tokens from the same view
//! are averaged and L2-normalized into one prototype per view; the score is
//! the mean cosine over every cross-view prototype pair, pooled across all
//! voxels (pair-weighted). Scenes without a single cross-view pair score NaN.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::geometry::PooledCoords;
use crate::tensor::{dot, l2_normalize, TokenGrid};

pub const DEFAULT_VOXEL_SIZE: f64 = 0.1;

pub type VoxelKey = [i64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct TokenCloud {
    features: Array2<f64>,
    coords: Array2<f64>,
    view_ids: Vec<usize>,
    valid: Vec<bool>,
}

impl TokenCloud {
    pub fn new(features: Array2<f64>, coords: Array2<f64>, view_ids: Vec<usize>, valid: Vec<bool>) -> Result<Self> {
        let n = features.nrows();
        if coords.dim() != (n, 3) {
            return Err(Error::dim(format!(
                "coords {:?} do not match {n} tokens x 3",
                coords.dim()
            )));
        }
        if view_ids.len() != n || valid.len() != n {
            return Err(Error::dim(format!(
                "{n} tokens but {} view ids and {} validity flags",
                view_ids.len(),
                valid.len()
            )));
        }
        if features.ncols() == 0 {
            return Err(Error::dim("token features have zero channels"));
        }
        for (row, ok) in coords.rows().into_iter().zip(&valid) {
            if *ok && row.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("token coordinate".into()));
            }
        }
        Ok(Self {
            features,
            coords,
            view_ids,
            valid,
        })
    }

    /// All tokens valid.
    pub fn from_parts(features: Array2<f64>, coords: Array2<f64>, view_ids: Vec<usize>) -> Result<Self> {
        let n = features.nrows();
        Self::new(features, coords, view_ids, vec![true; n])
    }

    /// Pairs each feature token with its pooled coordinate; view id = frame.
    pub fn from_grid(features: &TokenGrid, coords: &[PooledCoords]) -> Result<Self> {
        let [t, h, w, c] = features.dims();
        if coords.len() != t {
            return Err(Error::dim(format!(
                "{t} feature frames but {} coordinate frames",
                coords.len()
            )));
        }
        let n = t * h * w;
        let mut feats = Array2::zeros((n, c));
        let mut xyz = Array2::zeros((n, 3));
        let mut views = Vec::with_capacity(n);
        let mut valid = Vec::with_capacity(n);
        for (frame, pc) in coords.iter().enumerate() {
            if pc.valid.dim() != (h, w) {
                return Err(Error::dim(format!(
                    "coordinate grid {:?} does not match feature grid {h}x{w}",
                    pc.valid.dim()
                )));
            }
            for i in 0..h {
                for j in 0..w {
                    let n = (frame * h + i) * w + j;
                    for ch in 0..c {
                        feats[[n, ch]] = features.values()[[frame, i, j, ch]];
                    }
                    for a in 0..3 {
                        xyz[[n, a]] = pc.coords[[i, j, a]];
                    }
                    views.push(frame);
                    valid.push(pc.valid[[i, j]]);
                }
            }
        }
        Self::new(feats, xyz, views, valid)
    }

    pub fn len(&self) -> usize {
        self.view_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.view_ids.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn coords(&self) -> &Array2<f64> {
        &self.coords
    }

    pub fn view_ids(&self) -> &[usize] {
        &self.view_ids
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn feature(&self, n: usize) -> ArrayView1<'_, f64> {
        self.features.row(n)
    }

    pub fn coord(&self, n: usize) -> [f64; 3] {
        [self.coords[[n, 0]], self.coords[[n, 1]], self.coords[[n, 2]]]
    }

    /// Elementwise minimum over valid tokens.
    pub fn min_corner(&self) -> Option<[f64; 3]> {
        let mut it = (0..self.len()).filter(|&n| self.valid[n]);
        let first = self.coord(it.next()?);
        Some(it.fold(first, |mut acc, n| {
            let c = self.coord(n);
            for a in 0..3 {
                acc[a] = acc[a].min(c[a]);
            }
            acc
        }))
    }

    /// Same tokens with view ids mapped through `f`.
    pub fn relabel_views(&self, f: impl Fn(usize) -> usize) -> TokenCloud {
        let mut out = self.clone();
        for v in &mut out.view_ids {
            *v = f(*v);
        }
        out
    }

    pub fn map_coords(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> Result<TokenCloud> {
        let mut coords = self.coords.clone();
        for n in 0..self.len() {
            let c = f(self.coord(n));
            for a in 0..3 {
                coords[[n, a]] = c[a];
            }
        }
        TokenCloud::new(self.features.clone(), coords, self.view_ids.clone(), self.valid.clone())
    }
}

/// `floor((x − origin) / s)` per axis.
pub fn voxel_key(x: [f64; 3], origin: [f64; 3], s: f64) -> VoxelKey {
    [0, 1, 2].map(|a| ((x[a] - origin[a]) / s).floor() as i64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub view: usize,
    /// Unit length.
    pub vector: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct VoxelTable {
    pub voxel_size: f64,
    /// Minimum valid coordinate; zero when no token is valid.
    pub origin: [f64; 3],
    /// Prototypes sorted by view. A voxel whose prototypes were all
    /// degenerate keeps an empty list.
    pub entries: HashMap<VoxelKey, Vec<Prototype>>,
}

fn check_voxel_size(s: f64) -> Result<()> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::invalid(format!("voxel size must be positive, got {s}")));
    }
    Ok(())
}

pub fn voxelize(cloud: &TokenCloud, s: f64) -> Result<VoxelTable> {
    check_voxel_size(s)?;
    let origin = cloud.min_corner().unwrap_or([0.0; 3]);
    let c = cloud.channels();

    let mut sums: HashMap<VoxelKey, HashMap<usize, (Vec<f64>, usize)>> = HashMap::new();
    for n in (0..cloud.len()).filter(|&n| cloud.valid[n]) {
        let key = voxel_key(cloud.coord(n), origin, s);
        let (sum, count) = sums
            .entry(key)
            .or_default()
            .entry(cloud.view_ids[n])
            .or_insert_with(|| (vec![0.0; c], 0));
        for (acc, x) in sum.iter_mut().zip(cloud.feature(n)) {
            *acc += x;
        }
        *count += 1;
    }

    let entries = sums
        .into_iter()
        .map(|(key, views)| {
            let mut protos: Vec<Prototype> = views
                .into_iter()
                .filter_map(|(view, (sum, count))| {
                    let mean: Vec<f64> = sum.iter().map(|x| x / count as f64).collect();
                    l2_normalize(&mean).map(|vector| Prototype { view, vector, count })
                })
                .collect();
            protos.sort_by_key(|p| p.view);
            (key, protos)
        })
        .collect();

    Ok(VoxelTable {
        voxel_size: s,
        origin,
        entries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneScore {
    /// NaN iff `pair_count == 0`.
    pub score: f64,
    pub pair_count: u64,
    pub voxel_count: usize,
    pub multiview_voxel_count: usize,
}

impl SceneScore {
    pub fn is_valid(&self) -> bool {
        self.pair_count > 0
    }
}

/// Sum of pair terms in ascending order, so the total does not depend on
/// how voxels or views happen to be enumerated.
fn pair_weighted(mut terms: Vec<f64>) -> f64 {
    if terms.is_empty() {
        return f64::NAN;
    }
    terms.sort_by(f64::total_cmp);
    let count = terms.len() as f64;
    terms.iter().sum::<f64>() / count
}

pub fn scene_score(table: &VoxelTable) -> SceneScore {
    let mut terms = Vec::new();
    let mut multiview = 0;
    for protos in table.entries.values() {
        if protos.len() < 2 {
            continue;
        }
        multiview += 1;
        for (i, a) in protos.iter().enumerate() {
            for b in &protos[i + 1..] {
                terms.push(dot(&a.vector, &b.vector));
            }
        }
    }
    SceneScore {
        pair_count: terms.len() as u64,
        score: pair_weighted(terms),
        voxel_count: table.entries.len(),
        multiview_voxel_count: multiview,
    }
}

/// `scene_score(voxelize(cloud, s))` computed without hash tables: tokens
/// are sorted by (voxel, view) and prototypes are built from the runs.
pub fn scene_score_bruteforce(cloud: &TokenCloud, s: f64) -> Result<SceneScore> {
    check_voxel_size(s)?;
    let valid: Vec<usize> = (0..cloud.len()).filter(|&n| cloud.valid[n]).collect();
    if valid.is_empty() {
        return Ok(SceneScore {
            score: f64::NAN,
            pair_count: 0,
            voxel_count: 0,
            multiview_voxel_count: 0,
        });
    }
    let mut lo = [f64::INFINITY; 3];
    for &n in &valid {
        for (a, l) in lo.iter_mut().enumerate() {
            if cloud.coords[[n, a]] < *l {
                *l = cloud.coords[[n, a]];
            }
        }
    }
    let keyed: Vec<(VoxelKey, usize, usize)> = valid
        .iter()
        .map(|&n| {
            let mut key = [0i64; 3];
            for a in 0..3 {
                key[a] = ((cloud.coords[[n, a]] - lo[a]) / s).floor() as i64;
            }
            (key, cloud.view_ids[n], n)
        })
        .collect();
    let mut order = keyed;
    order.sort();

    let c = cloud.channels();
    let mut terms = Vec::new();
    let mut voxels = 0;
    let mut multiview = 0;
    let mut start = 0;
    while start < order.len() {
        let key = order[start].0;
        let mut end = start;
        while end < order.len() && order[end].0 == key {
            end += 1;
        }
        voxels += 1;

        let mut protos: Vec<Vec<f64>> = Vec::new();
        let mut run = start;
        while run < end {
            let view = order[run].1;
            let mut sum = vec![0.0; c];
            let mut count = 0usize;
            while run < end && order[run].1 == view {
                let n = order[run].2;
                for ch in 0..c {
                    sum[ch] += cloud.features[[n, ch]];
                }
                count += 1;
                run += 1;
            }
            let mean: Vec<f64> = sum.iter().map(|x| x / count as f64).collect();
            let len = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
            if len >= crate::tensor::EPS_NORM {
                protos.push(mean.iter().map(|x| x / len).collect());
            }
        }

        if protos.len() >= 2 {
            multiview += 1;
            for i in 0..protos.len() {
                for j in i + 1..protos.len() {
                    terms.push(protos[i].iter().zip(&protos[j]).map(|(a, b)| a * b).sum());
                }
            }
        }
        start = end;
    }

    Ok(SceneScore {
        pair_count: terms.len() as u64,
        score: pair_weighted(terms),
        voxel_count: voxels,
        multiview_voxel_count: multiview,
    })
}

/// Voxelizes and scores in one step.
pub fn score_cloud(cloud: &TokenCloud, s: f64) -> Result<SceneScore> {
    Ok(scene_score(&voxelize(cloud, s)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetSummary {
    pub mean: f64,
    /// Sample standard deviation; `None` with fewer than two valid scenes.
    pub std: Option<f64>,
    pub valid_count: usize,
    pub nan_count: usize,
}

/// Mean and sample standard deviation over the non-NaN scene scores. The
/// result does not depend on input order.
pub fn dataset_score(scores: &[SceneScore]) -> DatasetSummary {
    let mut valid: Vec<f64> = scores.iter().map(|s| s.score).filter(|s| !s.is_nan()).collect();
    valid.sort_by(f64::total_cmp);
    let n = valid.len();
    let nan_count = scores.len() - n;
    if n == 0 {
        return DatasetSummary {
            mean: f64::NAN,
            std: None,
            valid_count: 0,
            nan_count,
        };
    }
    let mean = valid.iter().sum::<f64>() / n as f64;
    let std = (n > 1).then(|| {
        let ss: f64 = valid.iter().map(|x| (x - mean).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt()
    });
    DatasetSummary {
        mean,
        std,
        valid_count: n,
        nan_count,
    }
}
