//! Pinhole camera model, depth unprojection into axis-aligned world
//! coordinates, token-grid pooling of those coordinates, and frame sampling.
//!
//! Pixel `(u, v)` is column `u`, row `v`; its ray passes through the pixel
//! center `(u + 0.5, v + 0.5)`. Cameras follow the x-right, y-down,
//! z-forward convention.

use nalgebra::{Matrix3, Matrix4, Point3, Vector3};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::error::{Error, Result};
use crate::tensor::{adaptive_avg_pool2d, adaptive_avg_pool2d_masked};

/// Rotation blocks further than this from orthonormal fail [`PosedFrame::new`].
pub const RIGID_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || !(self.fx > 0.0) || !(self.fy > 0.0) {
            return Err(Error::invalid(format!("singular intrinsics {self:?}")));
        }
        Ok(())
    }

    /// Ray direction in camera coordinates with unit z.
    pub fn ray(&self, px: f64, py: f64) -> Vector3<f64> {
        Vector3::new((px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.fx, self.fy, self.cx, self.cy]
    }
}

/// Largest deviation of `RᵀR` from identity for the upper-left 3×3 block,
/// also counting a non-trivial bottom row.
pub fn rigid_error(m: &Matrix4<f64>) -> f64 {
    let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
    let gram = r.transpose() * r - Matrix3::identity();
    let ortho = gram.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let det = (r.determinant() - 1.0).abs();
    let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)] - 1.0]
        .iter()
        .fold(0.0f64, |a, x| a.max(x.abs()));
    ortho.max(det).max(bottom)
}

/// Row-major 16-element array into a 4×4 matrix.
pub fn matrix_from_row_major(values: &[f64]) -> Result<Matrix4<f64>> {
    if values.len() != 16 {
        return Err(Error::dim(format!(
            "4x4 transform needs 16 numbers, got {}",
            values.len()
        )));
    }
    Ok(Matrix4::from_row_slice(values))
}

pub fn matrix_to_row_major(m: &Matrix4<f64>) -> [f64; 16] {
    let mut out = [0.0; 16];
    for r in 0..4 {
        for c in 0..4 {
            out[r * 4 + c] = m[(r, c)];
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct PosedFrame {
    /// `H × W`, meters.
    pub depth: Array2<f32>,
    pub intrinsics: Intrinsics,
    pub cam_to_world: Matrix4<f64>,
    pub valid_mask: Array2<bool>,
}

impl PosedFrame {
    /// Frame whose valid mask marks every pixel with positive depth.
    pub fn new(depth: Array2<f32>, intrinsics: Intrinsics, cam_to_world: Matrix4<f64>) -> Result<Self> {
        let valid_mask = depth.mapv(|d| d > 0.0);
        Self::with_mask(depth, intrinsics, cam_to_world, valid_mask)
    }

    pub fn with_mask(
        depth: Array2<f32>,
        intrinsics: Intrinsics,
        cam_to_world: Matrix4<f64>,
        valid_mask: Array2<bool>,
    ) -> Result<Self> {
        let frame = Self::unchecked(depth, intrinsics, cam_to_world, valid_mask)?;
        let err = rigid_error(&frame.cam_to_world);
        if err > RIGID_TOL {
            return Err(Error::invalid(format!(
                "cam_to_world is not rigid (error {err:e})"
            )));
        }
        Ok(frame)
    }

    /// Validates everything except rigidity of the pose.
    pub fn unchecked(
        depth: Array2<f32>,
        intrinsics: Intrinsics,
        cam_to_world: Matrix4<f64>,
        valid_mask: Array2<bool>,
    ) -> Result<Self> {
        if depth.is_empty() {
            return Err(Error::dim("empty depth map"));
        }
        if valid_mask.dim() != depth.dim() {
            return Err(Error::dim(format!(
                "valid mask {:?} does not match depth {:?}",
                valid_mask.dim(),
                depth.dim()
            )));
        }
        if let Some(bad) = depth.iter().find(|d| !(**d >= 0.0) || !d.is_finite()) {
            return Err(Error::invalid(format!("depth value {bad} is negative or non-finite")));
        }
        intrinsics.validate()?;
        Ok(Self {
            depth,
            intrinsics,
            cam_to_world,
            valid_mask,
        })
    }

    pub fn height(&self) -> usize {
        self.depth.nrows()
    }

    pub fn width(&self) -> usize {
        self.depth.ncols()
    }
}

#[derive(Debug, Clone)]
pub struct PosedScene {
    pub scene_id: String,
    pub frames: Vec<PosedFrame>,
    pub axis_align: Matrix4<f64>,
}

impl PosedScene {
    pub fn new(scene_id: impl Into<String>, frames: Vec<PosedFrame>, axis_align: Matrix4<f64>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::invalid("scene has no frames"));
        }
        Ok(Self {
            scene_id: scene_id.into(),
            frames,
            axis_align,
        })
    }
}

/// Dense per-pixel world coordinates of one frame.
#[derive(Debug, Clone)]
pub struct WorldCoords {
    /// `H × W × 3`, meters.
    pub coords: Array3<f64>,
    pub mask: Array2<bool>,
}

/// Unprojects every pixel. Zero-depth pixels map to the transformed camera
/// origin and are masked out, but keep their coordinates.
pub fn unproject_depth(frame: &PosedFrame, axis_align: &Matrix4<f64>) -> Result<WorldCoords> {
    frame.intrinsics.validate()?;
    let (h, w) = frame.depth.dim();
    let to_world = axis_align * frame.cam_to_world;
    let mut coords = Array3::zeros((h, w, 3));
    let mut mask = Array2::from_elem((h, w), false);
    for v in 0..h {
        for u in 0..w {
            let d = f64::from(frame.depth[[v, u]]);
            let ray = frame.intrinsics.ray(u as f64 + 0.5, v as f64 + 0.5);
            let p = to_world.transform_point(&Point3::from(ray * d));
            coords[[v, u, 0]] = p.x;
            coords[[v, u, 1]] = p.y;
            coords[[v, u, 2]] = p.z;
            mask[[v, u]] = d > 0.0 && frame.valid_mask[[v, u]];
        }
    }
    Ok(WorldCoords { coords, mask })
}

/// Projects a world point into the frame: returns `(px, py, depth)` where
/// `(px, py)` are continuous image coordinates (pixel centers at `+0.5`).
pub fn project_point(
    world: &Point3<f64>,
    intrinsics: &Intrinsics,
    cam_to_world: &Matrix4<f64>,
    axis_align: &Matrix4<f64>,
) -> Result<(f64, f64, f64)> {
    let to_world = axis_align * cam_to_world;
    let to_cam = to_world
        .try_inverse()
        .ok_or_else(|| Error::invalid("camera transform is singular"))?;
    let p = to_cam.transform_point(world);
    if p.z.abs() < f64::EPSILON {
        return Err(Error::invalid("point lies in the camera plane"));
    }
    let px = intrinsics.fx * p.x / p.z + intrinsics.cx;
    let py = intrinsics.fy * p.y / p.z + intrinsics.cy;
    Ok((px, py, p.z))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DepthMode {
    /// Every pixel contributes, zero-depth ones included.
    #[default]
    IncludeZero,
    /// Only valid pixels are averaged; empty windows give invalid tokens.
    Masked,
}

#[derive(Debug, Clone)]
pub struct PooledCoords {
    /// `out_h × out_w × 3`.
    pub coords: Array3<f64>,
    pub valid: Array2<bool>,
}

pub fn pool_world_coords(
    coords: ArrayView3<f64>,
    mask: ArrayView2<bool>,
    out_h: usize,
    out_w: usize,
    mode: DepthMode,
) -> Result<PooledCoords> {
    let (h, w, c) = coords.dim();
    if c != 3 {
        return Err(Error::dim(format!("world coordinates need 3 channels, got {c}")));
    }
    if mask.dim() != (h, w) {
        return Err(Error::dim(format!(
            "mask {:?} does not match coordinates {h}x{w}",
            mask.dim()
        )));
    }
    match mode {
        DepthMode::IncludeZero => Ok(PooledCoords {
            coords: adaptive_avg_pool2d(coords, out_h, out_w)?,
            valid: Array2::from_elem((out_h, out_w), true),
        }),
        DepthMode::Masked => {
            let (coords, valid) = adaptive_avg_pool2d_masked(coords, mask, out_h, out_w)?;
            Ok(PooledCoords { coords, valid })
        }
    }
}

/// Unprojects and pools every frame of a scene onto an `out_h × out_w` grid.
pub fn scene_token_coords(
    scene: &PosedScene,
    frame_indices: &[usize],
    out_h: usize,
    out_w: usize,
    mode: DepthMode,
) -> Result<Vec<PooledCoords>> {
    frame_indices
        .iter()
        .map(|&i| {
            let frame = scene
                .frames
                .get(i)
                .ok_or_else(|| Error::dim(format!("frame {i} out of range")))?;
            let world = unproject_depth(frame, &scene.axis_align)?;
            pool_world_coords(world.coords.view(), world.mask.view(), out_h, out_w, mode)
        })
        .collect()
}

/// Picks frames by [`crate::tensor::temporal_indices`] so a list of pooled
/// coordinates matches a feature grid with `out_t` frames.
pub fn resample_coords(coords: &[PooledCoords], out_t: usize) -> Vec<PooledCoords> {
    crate::tensor::temporal_indices(coords.len(), out_t)
        .into_iter()
        .map(|i| coords[i].clone())
        .collect()
}

/// Uniformly spaced frame indices, endpoints included; all frames when
/// `total <= n`.
pub fn sample_frames(total: usize, n: usize) -> Vec<usize> {
    if total <= n {
        return (0..total).collect();
    }
    if n == 1 {
        return vec![0];
    }
    (0..n)
        .map(|i| ((i * (total - 1)) as f64 / (n - 1) as f64).round() as usize)
        .collect()
}

/// Stacks pooled coordinates into `T × N × 3` (row-major tokens per frame).
pub fn stack_token_coords(coords: &[PooledCoords]) -> Array3<f64> {
    let t = coords.len();
    let n = coords.first().map_or(0, |c| c.valid.len());
    let mut out = Array3::zeros((t, n, 3));
    for (i, c) in coords.iter().enumerate() {
        let flat = c
            .coords
            .view()
            .into_shape_with_order((n, 3))
            .expect("contiguous pooled grid");
        out.index_axis_mut(Axis(0), i).assign(&flat);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{Rotation3, Translation3};
    use ndarray::array;

    fn unit_k() -> Intrinsics {
        Intrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap()
    }

    fn world_at(frame: &PosedFrame, align: &Matrix4<f64>, v: usize, u: usize) -> [f64; 3] {
        let w = unproject_depth(frame, align).unwrap();
        [w.coords[[v, u, 0]], w.coords[[v, u, 1]], w.coords[[v, u, 2]]]
    }

    #[test]
    fn unproject_pixel_center() {
        let f = PosedFrame::new(array![[2.0f32]], unit_k(), Matrix4::identity()).unwrap();
        assert_eq!(world_at(&f, &Matrix4::identity(), 0, 0), [1.0, 1.0, 2.0]);
    }

    #[test]
    fn unproject_with_translation() {
        let pose = Translation3::new(1.0, 0.0, 0.0).to_homogeneous();
        let f = PosedFrame::new(array![[2.0f32]], unit_k(), pose).unwrap();
        assert_eq!(world_at(&f, &Matrix4::identity(), 0, 0), [2.0, 1.0, 2.0]);
    }

    #[test]
    fn zero_depth_maps_to_origin_and_is_masked() {
        let pose = Translation3::new(0.5, -1.0, 3.0).to_homogeneous();
        let align = Rotation3::from_euler_angles(0.0, 0.0, 0.3).to_homogeneous();
        let f = PosedFrame::new(array![[0.0f32]], unit_k(), pose).unwrap();
        let w = unproject_depth(&f, &align).unwrap();
        let origin = (align * pose).transform_point(&Point3::origin());
        assert_abs_diff_eq!(w.coords[[0, 0, 0]], origin.x, epsilon = 1e-15);
        assert_abs_diff_eq!(w.coords[[0, 0, 1]], origin.y, epsilon = 1e-15);
        assert_abs_diff_eq!(w.coords[[0, 0, 2]], origin.z, epsilon = 1e-15);
        assert!(!w.mask[[0, 0]]);
    }

    #[test]
    fn singular_intrinsics_rejected() {
        assert!(Intrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
        let mut f = PosedFrame::new(array![[1.0f32]], unit_k(), Matrix4::identity()).unwrap();
        f.intrinsics.fy = 0.0;
        assert!(unproject_depth(&f, &Matrix4::identity()).is_err());
    }

    #[test]
    fn negative_depth_rejected() {
        assert!(PosedFrame::new(array![[-1.0f32]], unit_k(), Matrix4::identity()).is_err());
    }

    #[test]
    fn non_rigid_pose_rejected() {
        let mut pose = Matrix4::identity();
        pose[(0, 0)] = 1.1;
        assert!(PosedFrame::new(array![[1.0f32]], unit_k(), pose).is_err());
    }

    #[test]
    fn pooling_modes() {
        let mut coords = Array3::zeros((1, 2, 3));
        for a in 0..3 {
            coords[[0, 1, a]] = 2.0;
        }
        let mask = array![[false, true]];
        let inc = pool_world_coords(coords.view(), mask.view(), 1, 1, DepthMode::IncludeZero).unwrap();
        assert_eq!(inc.coords.iter().copied().collect::<Vec<_>>(), vec![1.0; 3]);
        assert!(inc.valid[[0, 0]]);
        let m = pool_world_coords(coords.view(), mask.view(), 1, 1, DepthMode::Masked).unwrap();
        assert_eq!(m.coords.iter().copied().collect::<Vec<_>>(), vec![2.0; 3]);
    }

    #[test]
    fn pooling_constant_and_identity() {
        let coords = Array3::from_elem((4, 4, 3), 1.25);
        let mask = Array2::from_elem((4, 4), true);
        for mode in [DepthMode::IncludeZero, DepthMode::Masked] {
            let p = pool_world_coords(coords.view(), mask.view(), 2, 2, mode).unwrap();
            assert!(p.coords.iter().all(|&x| x == 1.25));
        }
        let ramp = Array3::from_shape_fn((3, 2, 3), |(i, j, k)| (i * 6 + j * 3 + k) as f64);
        let m = Array2::from_elem((3, 2), true);
        let p = pool_world_coords(ramp.view(), m.view(), 3, 2, DepthMode::IncludeZero).unwrap();
        assert_eq!(p.coords, ramp);
    }

    #[test]
    fn masked_pooling_never_uses_empty_windows() {
        let coords = Array3::from_elem((4, 4, 3), 1.0);
        let mut mask = Array2::from_elem((4, 4), false);
        mask[[3, 3]] = true;
        let p = pool_world_coords(coords.view(), mask.view(), 2, 2, DepthMode::Masked).unwrap();
        assert_eq!(p.valid, array![[false, false], [false, true]]);
    }

    #[test]
    fn frame_sampling() {
        assert_eq!(sample_frames(10, 32), (0..10).collect::<Vec<_>>());
        assert_eq!(sample_frames(63, 32), (0..32).map(|i| 2 * i).collect::<Vec<_>>());
        assert_eq!(sample_frames(1, 32), vec![0]);
        for total in 1..200 {
            let idx = sample_frames(total, 32);
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
            assert!(idx.iter().all(|&i| i < total));
        }
    }
}
