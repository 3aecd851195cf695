//! Synthetic scenes with known ground truth.
//!
//! Token scenes sample points on the walls of a cuboid room and give every
//! token the fixed embedding of its voxel plus optional Gaussian corruption,
//! so a clean scene scores exactly 1. RGB-D rooms ray-cast analytic depth
//! from cameras orbiting inside the same kind of room.

use nalgebra::{Matrix3, Matrix4, Point3, Vector3};
use ndarray::{Array2, Array4};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::correspondence::{voxel_key, TokenCloud, VoxelKey, DEFAULT_VOXEL_SIZE};
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, PooledCoords, PosedFrame, PosedScene};
use crate::tensor::TokenGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureModel {
    /// Unit embedding of the token's voxel plus noise of norm about `σ`.
    #[default]
    VoxelEmbedding,
    /// Independent standard-normal features per token.
    IidNoise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSceneConfig {
    pub n_views: usize,
    pub tokens_per_view: usize,
    pub feature_dim: usize,
    pub voxel_size: f64,
    /// Room spans `[0, extent]` on each axis, meters.
    pub room_extent: [f64; 3],
    pub sigma: f64,
    pub seed: u64,
    pub features: FeatureModel,
}

impl Default for TokenSceneConfig {
    fn default() -> Self {
        Self {
            n_views: 8,
            tokens_per_view: 196,
            feature_dim: 64,
            voxel_size: DEFAULT_VOXEL_SIZE,
            room_extent: [4.0, 5.0, 3.0],
            sigma: 0.0,
            seed: 0,
            features: FeatureModel::VoxelEmbedding,
        }
    }
}

impl TokenSceneConfig {
    fn validate(&self) -> Result<()> {
        if self.n_views == 0 || self.tokens_per_view == 0 || self.feature_dim == 0 {
            return Err(Error::invalid("token scene counts must all be at least 1"));
        }
        if !(self.sigma >= 0.0) || !(self.voxel_size > 0.0) {
            return Err(Error::invalid("sigma must be >= 0 and voxel size > 0"));
        }
        if self.room_extent.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::invalid("room extent must be positive"));
        }
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fixed pseudo-random unit vector for a voxel key.
pub fn voxel_embedding(key: VoxelKey, dim: usize, seed: u64) -> Vec<f64> {
    let h = key
        .iter()
        .fold(splitmix(seed), |acc, &k| splitmix(acc ^ (k as u64)));
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        if let Some(u) = crate::tensor::l2_normalize(&v) {
            return u;
        }
    }
}

/// Uniform point on the walls of the box `[0, extent]`, faces weighted by area.
fn surface_point<R: Rng>(extent: [f64; 3], rng: &mut R) -> [f64; 3] {
    let [ex, ey, ez] = extent;
    let areas = [ey * ez, ex * ez, ex * ey];
    let total = 2.0 * areas.iter().sum::<f64>();
    let mut pick = rng.random_range(0.0..total);
    let mut axis = 0;
    while axis < 2 && pick >= 2.0 * areas[axis] {
        pick -= 2.0 * areas[axis];
        axis += 1;
    }
    let mut p = [0.0; 3];
    for (a, slot) in p.iter_mut().enumerate() {
        *slot = rng.random_range(0.0..extent[a]);
    }
    p[axis] = if pick < areas[axis] { 0.0 } else { extent[axis] };
    p
}

/// `base + σ·η/√C`: the noise has expected norm about `σ` against a unit
/// `base`, whatever the width.
fn with_noise<R: Rng>(base: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    let sigma = sigma / (base.len() as f64).sqrt();
    base.iter()
        .map(|b| {
            let eta: f64 = StandardNormal.sample(rng);
            b + sigma * eta
        })
        .collect()
}

/// Token cloud over `n_views` views sharing a pool of wall points.
pub fn gen_token_scene(cfg: &TokenSceneConfig) -> Result<TokenCloud> {
    cfg.validate()?;
    let mut geo = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed));
    let mut noise = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ 0x006e_6f69_7365));
    let pool_size = 2 * cfg.tokens_per_view;
    let pool: Vec<[f64; 3]> = (0..pool_size).map(|_| surface_point(cfg.room_extent, &mut geo)).collect();

    let n = cfg.n_views * cfg.tokens_per_view;
    let mut coords = Array2::zeros((n, 3));
    let mut views = Vec::with_capacity(n);
    for view in 0..cfg.n_views {
        for (slot, p) in index::sample(&mut geo, pool_size, cfg.tokens_per_view).into_iter().enumerate() {
            let row = view * cfg.tokens_per_view + slot;
            for a in 0..3 {
                coords[[row, a]] = pool[p][a];
            }
            views.push(view);
        }
    }

    let mut origin = [f64::INFINITY; 3];
    for row in coords.rows() {
        for a in 0..3 {
            origin[a] = origin[a].min(row[a]);
        }
    }
    let mut features = Array2::zeros((n, cfg.feature_dim));
    for i in 0..n {
        let f = match cfg.features {
            FeatureModel::VoxelEmbedding => {
                let x = [coords[[i, 0]], coords[[i, 1]], coords[[i, 2]]];
                let phi = voxel_embedding(voxel_key(x, origin, cfg.voxel_size), cfg.feature_dim, cfg.seed);
                with_noise(&phi, cfg.sigma, &mut noise)
            }
            FeatureModel::IidNoise => with_noise(&vec![0.0; cfg.feature_dim], 1.0, &mut noise),
        };
        features.row_mut(i).assign(&ndarray::Array1::from(f));
    }
    TokenCloud::from_parts(features, coords, views)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoomConfig {
    pub scene_id: String,
    /// Room spans `[0, size]` per axis; z is up.
    pub size: [f64; 3],
    pub orbit_radius: f64,
    pub camera_height: f64,
    pub n_views: usize,
    pub height: usize,
    pub width: usize,
    pub intrinsics: Intrinsics,
    pub axis_align: Matrix4<f64>,
}

impl Default for RoomConfig {
    fn default() -> Self {
        Self {
            scene_id: "room_000".into(),
            size: [4.0, 5.0, 3.0],
            orbit_radius: 1.2,
            camera_height: 1.4,
            n_views: 8,
            height: 56,
            width: 56,
            intrinsics: Intrinsics {
                fx: 36.0,
                fy: 36.0,
                cx: 28.0,
                cy: 28.0,
            },
            axis_align: Matrix4::identity(),
        }
    }
}

impl RoomConfig {
    pub fn center(&self) -> Point3<f64> {
        Point3::new(self.size[0] / 2.0, self.size[1] / 2.0, self.size[2] / 2.0)
    }

    pub fn camera_position(&self, view: usize) -> Point3<f64> {
        let theta = std::f64::consts::TAU * view as f64 / self.n_views as f64;
        let c = self.center();
        Point3::new(
            c.x + self.orbit_radius * theta.cos(),
            c.y + self.orbit_radius * theta.sin(),
            self.camera_height,
        )
    }

    fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("room dimensions must be positive"));
        }
        if self.n_views == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid("room needs at least one view and a non-empty image"));
        }
        if !(self.orbit_radius > 0.0) {
            return Err(Error::invalid("degenerate orbit: radius must be positive"));
        }
        self.intrinsics.validate()?;
        for v in 0..self.n_views {
            let p = self.camera_position(v);
            let inside = (0..3).all(|a| p[a] > 0.0 && p[a] < self.size[a]);
            if !inside {
                return Err(Error::invalid(format!("camera {v} at {p:?} is outside the room")));
            }
        }
        Ok(())
    }
}

/// Camera-to-world pose at `eye` looking at `target`, with world z up.
pub fn look_at(eye: Point3<f64>, target: Point3<f64>) -> Result<Matrix4<f64>> {
    let forward = target - eye;
    let up = Vector3::z();
    let right = forward.cross(&up);
    if forward.norm() < 1e-12 || right.norm() < 1e-9 * forward.norm() {
        return Err(Error::invalid("degenerate orbit: view direction is vertical or zero"));
    }
    let forward = forward.normalize();
    let right = right.normalize();
    let down = forward.cross(&right);
    let rot = Matrix3::from_columns(&[right, down, forward]);
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&eye.coords);
    Ok(m)
}

/// Distance along a ray from inside the box `[0, size]` to its first wall,
/// in units of `dir`.
pub fn ray_box_exit(origin: &Point3<f64>, dir: &Vector3<f64>, size: [f64; 3]) -> f64 {
    (0..3)
        .filter(|&a| dir[a] != 0.0)
        .map(|a| {
            let wall = if dir[a] > 0.0 { size[a] } else { 0.0 };
            (wall - origin[a]) / dir[a]
        })
        .fold(f64::INFINITY, f64::min)
}

/// Analytic depth (camera z) for every pixel center.
pub fn render_depth(
    size: [f64; 3],
    cam_to_world: &Matrix4<f64>,
    intrinsics: &Intrinsics,
    height: usize,
    width: usize,
) -> Array2<f32> {
    let rot = cam_to_world.fixed_view::<3, 3>(0, 0).into_owned();
    let eye = Point3::from(cam_to_world.fixed_view::<3, 1>(0, 3).into_owned());
    Array2::from_shape_fn((height, width), |(v, u)| {
        let ray = intrinsics.ray(u as f64 + 0.5, v as f64 + 0.5);
        // Camera-space ray has unit z, so the parameter is the depth.
        ray_box_exit(&eye, &(rot * ray), size) as f32
    })
}

pub fn gen_rgbd_room(cfg: &RoomConfig) -> Result<PosedScene> {
    cfg.validate()?;
    let frames = (0..cfg.n_views)
        .map(|v| {
            let pose = look_at(cfg.camera_position(v), cfg.center())?;
            let depth = render_depth(cfg.size, &pose, &cfg.intrinsics, cfg.height, cfg.width);
            PosedFrame::new(depth, cfg.intrinsics, pose)
        })
        .collect::<Result<Vec<_>>>()?;
    PosedScene::new(cfg.scene_id.clone(), frames, cfg.axis_align)
}

/// Voxel-embedding features for pooled token coordinates, one frame per
/// entry. Voxels are anchored at the minimum over valid tokens, matching
/// [`crate::correspondence::voxelize`].
pub fn voxel_embedding_grid(
    coords: &[PooledCoords],
    voxel_size: f64,
    channels: usize,
    sigma: f64,
    seed: u64,
) -> Result<TokenGrid> {
    let first = coords.first().ok_or_else(|| Error::invalid("no frames to featurize"))?;
    let (h, w) = first.valid.dim();
    let mut origin = [f64::INFINITY; 3];
    for pc in coords {
        for ((i, j), &ok) in pc.valid.indexed_iter() {
            if ok {
                for a in 0..3 {
                    origin[a] = origin[a].min(pc.coords[[i, j, a]]);
                }
            }
        }
    }
    if origin.iter().any(|o| o.is_infinite()) {
        return Err(Error::invalid("no valid tokens to featurize"));
    }
    let mut noise = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x726f_6f6d));
    let mut values = Array4::zeros((coords.len(), h, w, channels));
    for (t, pc) in coords.iter().enumerate() {
        for i in 0..h {
            for j in 0..w {
                let x = [pc.coords[[i, j, 0]], pc.coords[[i, j, 1]], pc.coords[[i, j, 2]]];
                let phi = voxel_embedding(voxel_key(x, origin, voxel_size), channels, seed);
                for (c, v) in with_noise(&phi, sigma, &mut noise).into_iter().enumerate() {
                    values[[t, i, j, c]] = v;
                }
            }
        }
    }
    TokenGrid::new(values)
}
