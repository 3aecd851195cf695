//! On-disk formats: the `VGT1` tensor container, JSON scene manifests, and
//! CSV / PPM reports.
//!
//! Tensor layout, little-endian throughout:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `VGT1` |
//! | 2 | version (`1`) |
//! | 1 | dtype (`0` = f32, `1` = f64) |
//! | 1 | ndim |
//! | 8·ndim | dims, u64 each |
//! | rest | row-major payload |

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::correspondence::{DatasetSummary, SceneScore, TokenCloud};
use crate::error::{Error, Result, TensorParseKind};
use crate::geometry::{matrix_from_row_major, matrix_to_row_major, rigid_error, Intrinsics, PosedFrame, PosedScene};
use crate::metrics::{NosResult, RankEntry};
use crate::tensor::{DType, Tensor, TensorData, TokenGrid};

pub const MAGIC: [u8; 4] = *b"VGT1";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 8;
/// Rotation error above which a loaded pose draws a warning.
pub const POSE_WARN_TOL: f64 = 1e-4;

fn parse_err(offset: usize, kind: TensorParseKind) -> Error {
    Error::TensorParse {
        offset: offset as u64,
        kind,
    }
}

pub fn encode_tensor(tensor: &Tensor) -> Vec<u8> {
    let dims = tensor.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * dims.len() + tensor.numel() * tensor.dtype().size());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match tensor.dtype() {
        DType::F32 => 0,
        DType::F64 => 1,
    });
    out.push(u8::try_from(dims.len()).expect("rank fits in u8"));
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match tensor.data() {
        TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let need = |offset: usize, len: usize| -> Result<&[u8]> {
        bytes.get(offset..offset + len).ok_or_else(|| {
            parse_err(
                offset,
                TensorParseKind::Truncated {
                    expected: len as u64,
                    found: bytes.len().saturating_sub(offset) as u64,
                },
            )
        })
    };
    let magic: [u8; 4] = need(0, 4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(parse_err(0, TensorParseKind::BadMagic(magic)));
    }
    let version = u16::from_le_bytes(need(4, 2)?.try_into().unwrap());
    if version != VERSION {
        return Err(parse_err(4, TensorParseKind::UnsupportedVersion(version)));
    }
    let dtype = match need(6, 1)?[0] {
        0 => DType::F32,
        1 => DType::F64,
        code => return Err(parse_err(6, TensorParseKind::UnknownDtype(code))),
    };
    let ndim = need(7, 1)?[0] as usize;
    if ndim == 0 {
        return Err(parse_err(7, TensorParseKind::ZeroRank));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut numel: usize = 1;
    for index in 0..ndim {
        let offset = HEADER_LEN + 8 * index;
        let d = u64::from_le_bytes(need(offset, 8)?.try_into().unwrap());
        if d == 0 {
            return Err(parse_err(offset, TensorParseKind::EmptyDimension { index }));
        }
        let d = usize::try_from(d).map_err(|_| parse_err(offset, TensorParseKind::Overflow))?;
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| parse_err(offset, TensorParseKind::Overflow))?;
        dims.push(d);
    }
    let start = HEADER_LEN + 8 * ndim;
    let len = numel
        .checked_mul(dtype.size())
        .ok_or_else(|| parse_err(start, TensorParseKind::Overflow))?;
    let payload = need(start, len)?;
    if bytes.len() > start + len {
        return Err(parse_err(
            start + len,
            TensorParseKind::TrailingBytes((bytes.len() - start - len) as u64),
        ));
    }
    let data = match dtype {
        DType::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Tensor::new(dims, data)
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

fn identity16() -> Vec<f64> {
    matrix_to_row_major(&nalgebra::Matrix4::identity()).to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    /// Position in the sequence; records are sorted by it when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    /// `H × W` float32 TensorFile in meters.
    pub depth: String,
    /// Row-major camera-to-world matrix.
    pub pose: Vec<f64>,
    /// `[fx, fy, cx, cy]`.
    pub intrinsics: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rgb: Option<String>,
}

/// Where a feature branch came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BranchMeta {
    #[serde(default)]
    pub backbone: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestep: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRecord {
    pub tensor: String,
    /// `[T, H, W, C]`; must match the tensor header.
    pub grid: [usize; 4],
    #[serde(flatten)]
    pub meta: BranchMeta,
}

/// Pre-flattened tokens for scenes without geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenCloudRecord {
    /// `N × C`.
    pub features: String,
    /// `N × 3`, world meters.
    pub coords: String,
    /// `N` view ids stored as floats.
    pub views: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub scene_id: String,
    #[serde(default = "identity16")]
    pub axis_align: Vec<f64>,
    #[serde(default)]
    pub frames: Vec<FrameRecord>,
    #[serde(default)]
    pub branches: BTreeMap<String, BranchRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_cloud: Option<TokenCloudRecord>,
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub name: String,
    pub grid: TokenGrid,
    pub meta: BranchMeta,
}

#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub scene_id: String,
    /// `None` when the manifest has no frames.
    pub scene: Option<PosedScene>,
    /// Sorted by name.
    pub branches: Vec<Branch>,
    pub token_cloud: Option<TokenCloud>,
    pub warnings: Vec<String>,
}

impl LoadedScene {
    pub fn branch(&self, name: &str) -> Option<&Branch> {
        self.branches.iter().find(|b| b.name == name)
    }
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    base.join(rel)
}

fn require_existing(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file does not exist"),
        ))
    }
}

/// Pretty-printed JSON with a trailing newline.
pub fn manifest_to_json(manifest: &SceneManifest) -> String {
    serde_json::to_string_pretty(manifest).expect("manifest serializes") + "\n"
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<SceneManifest> {
    serde_json::from_str(text).map_err(|e| format_err(path, e.to_string()))
}

/// Reads a manifest and every file it references. Relative paths resolve
/// against the manifest's directory.
pub fn load_scene(manifest_path: &Path) -> Result<LoadedScene> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest = parse_manifest(&text, manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut warnings = Vec::new();

    let axis_align = matrix_from_row_major(&manifest.axis_align)
        .map_err(|e| format_err(manifest_path, format!("axis_align: {e}")))?;

    let mut records: Vec<(usize, &FrameRecord)> = manifest.frames.iter().enumerate().collect();
    records.sort_by_key(|(pos, r)| (r.index.unwrap_or(*pos), *pos));
    let mut frames = Vec::with_capacity(records.len());
    for (pos, rec) in records {
        let what = format!("frame {}", rec.index.unwrap_or(pos));
        let depth_path = require_existing(resolve(base, &rec.depth))?;
        let tensor = read_tensor(&depth_path)?;
        if tensor.dims().len() != 2 {
            return Err(format_err(&depth_path, format!("{what}: depth must be 2-D, got {:?}", tensor.dims())));
        }
        let depth = Array2::from_shape_vec(
            (tensor.dims()[0], tensor.dims()[1]),
            tensor.to_f64_vec().into_iter().map(|d| d as f32).collect(),
        )
        .expect("shape from header");
        if let Some(rgb) = &rec.rgb {
            require_existing(resolve(base, rgb))?;
        }
        let pose = matrix_from_row_major(&rec.pose).map_err(|e| format_err(manifest_path, format!("{what}: {e}")))?;
        let err = rigid_error(&pose);
        if err > POSE_WARN_TOL {
            let msg = format!("{}: {what} pose deviates from rigid by {err:e}", manifest.scene_id);
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let [fx, fy, cx, cy] = rec.intrinsics;
        let intr = Intrinsics::new(fx, fy, cx, cy).map_err(|e| format_err(manifest_path, format!("{what}: {e}")))?;
        let mask = depth.mapv(|d| d > 0.0);
        frames.push(PosedFrame::unchecked(depth, intr, pose, mask)?);
    }
    let frame_count = frames.len();
    let scene = if frames.is_empty() {
        None
    } else {
        Some(PosedScene::new(manifest.scene_id.clone(), frames, axis_align)?)
    };

    let mut branches = Vec::with_capacity(manifest.branches.len());
    for (name, rec) in &manifest.branches {
        let mismatch = |detail: String| Error::BranchMismatch {
            branch: name.clone(),
            detail,
        };
        let tensor = read_tensor(&require_existing(resolve(base, &rec.tensor))?)?;
        if tensor.dims() != rec.grid {
            return Err(mismatch(format!(
                "manifest grid {:?} but tensor header {:?}",
                rec.grid,
                tensor.dims()
            )));
        }
        if scene.is_some() && rec.grid[0] != frame_count {
            return Err(mismatch(format!("{} feature frames for {frame_count} scene frames", rec.grid[0])));
        }
        let grid = TokenGrid::from_tensor(&tensor).map_err(|e| mismatch(e.to_string()))?;
        branches.push(Branch {
            name: name.clone(),
            grid,
            meta: rec.meta.clone(),
        });
    }

    let token_cloud = match &manifest.token_cloud {
        None => None,
        Some(rec) => {
            let features = read_tensor(&require_existing(resolve(base, &rec.features))?)?.to_array2()?;
            let coords = read_tensor(&require_existing(resolve(base, &rec.coords))?)?.to_array2()?;
            let views = read_tensor(&require_existing(resolve(base, &rec.views))?)?.to_f64_vec();
            let view_ids = views
                .iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
                        Ok(v as usize)
                    } else {
                        Err(format_err(manifest_path, format!("view id {v} is not a non-negative integer")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Some(TokenCloud::from_parts(features, coords, view_ids)?)
        }
    };

    Ok(LoadedScene {
        scene_id: manifest.scene_id,
        scene,
        branches,
        token_cloud,
        warnings,
    })
}

/// Writes a scene directory (`manifest.json` plus one TensorFile per array)
/// and returns the manifest path.
pub fn save_scene(
    dir: &Path,
    scene_id: &str,
    scene: Option<&PosedScene>,
    branches: &[Branch],
    token_cloud: Option<&TokenCloud>,
) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = SceneManifest {
        scene_id: scene_id.to_string(),
        axis_align: identity16(),
        frames: Vec::new(),
        branches: BTreeMap::new(),
        token_cloud: None,
    };
    if let Some(scene) = scene {
        manifest.axis_align = matrix_to_row_major(&scene.axis_align).to_vec();
        for (i, frame) in scene.frames.iter().enumerate() {
            let name = format!("depth_{i:04}.vgt");
            write_tensor(&dir.join(&name), &Tensor::from_array_f32(&frame.depth))?;
            manifest.frames.push(FrameRecord {
                index: Some(i),
                depth: name,
                pose: matrix_to_row_major(&frame.cam_to_world).to_vec(),
                intrinsics: frame.intrinsics.as_array(),
                rgb: None,
            });
        }
    }
    for branch in branches {
        let name = format!("feat_{}.vgt", branch.name);
        write_tensor(&dir.join(&name), &branch.grid.to_tensor())?;
        manifest.branches.insert(
            branch.name.clone(),
            BranchRecord {
                tensor: name,
                grid: branch.grid.dims(),
                meta: branch.meta.clone(),
            },
        );
    }
    if let Some(cloud) = token_cloud {
        write_tensor(&dir.join("tokens_features.vgt"), &Tensor::from_array(cloud.features()))?;
        write_tensor(&dir.join("tokens_coords.vgt"), &Tensor::from_array(cloud.coords()))?;
        let views: Vec<f64> = cloud.view_ids().iter().map(|&v| v as f64).collect();
        write_tensor(&dir.join("tokens_views.vgt"), &Tensor::from_f64(vec![views.len()], views)?)?;
        manifest.token_cloud = Some(TokenCloudRecord {
            features: "tokens_features.vgt".into(),
            coords: "tokens_coords.vgt".into(),
            views: "tokens_views.vgt".into(),
        });
    }
    let path = dir.join("manifest.json");
    fs::write(&path, manifest_to_json(&manifest)).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io("<report>", io),
        other => Error::invalid(format!("csv: {other:?}")),
    }
}

pub fn format_score(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else {
        format!("{x:.6}")
    }
}

/// `scene_id,score,pairs,voxels,multiview_voxels`, one row per scene.
pub fn write_scores_csv<W: Write>(out: W, rows: &[(String, SceneScore)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scene_id", "score", "pairs", "voxels", "multiview_voxels"])
        .map_err(csv_err)?;
    for (id, s) in rows {
        w.write_record([
            id.clone(),
            format_score(s.score),
            s.pair_count.to_string(),
            s.voxel_count.to_string(),
            s.multiview_voxel_count.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<report>", e))
}

/// `mean ± std (valid n, NaN m)`; a missing std prints as `NaN`.
pub fn format_summary(summary: &DatasetSummary) -> String {
    let std = summary.std.map_or_else(|| "NaN".to_string(), format_score);
    format!(
        "mean ± std: {} ± {std} (valid {}, NaN {})",
        format_score(summary.mean),
        summary.valid_count,
        summary.nan_count
    )
}

/// `group,method,nos`, two decimals.
pub fn write_nos_csv<W: Write>(out: W, result: &NosResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["group", "method", "nos"]).map_err(csv_err)?;
    for g in &result.groups {
        for (m, v) in g.methods.iter().zip(&g.nos) {
            w.write_record([g.group.as_str(), m.as_str(), &format!("{v:.2}")]).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io("<report>", e))
}

/// `method,avg_rank,metrics_used`; methods without any metric get `NaN`.
pub fn write_rank_csv<W: Write>(out: W, entries: &[RankEntry]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "avg_rank", "metrics_used"]).map_err(csv_err)?;
    for e in entries {
        let avg = e.average.map_or_else(|| "NaN".to_string(), |a| format!("{a:.4}"));
        w.write_record([e.method.clone(), avg, e.available().to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<report>", e))
}

/// Binary PPM (P6). `rgb` holds `height × width × 3` bytes.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != width * height * 3 || width == 0 || height == 0 {
        return Err(Error::dim(format!(
            "PPM needs {}x{}x3 bytes, got {}",
            height,
            width,
            rgb.len()
        )));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    Ok(out)
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    fs::write(path, encode_ppm(width, height, rgb)?).map_err(|e| Error::io(path, e))
}
