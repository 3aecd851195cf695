use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use geoprior_core::correspondence::{dataset_score, score_cloud, SceneScore, TokenCloud};
use geoprior_core::fusion::{finite_diff_check, gate_backward, gate_forward, sigmoid, GateCase};
use geoprior_core::geometry::{sample_frames, scene_token_coords};
use geoprior_core::io::{
    format_summary, load_scene, read_tensor, save_scene, write_nos_csv, write_ppm, write_rank_csv,
    write_scores_csv, write_tensor, Branch, BranchMeta,
};
use geoprior_core::metrics::{avg_rank, nos, pearson, GroupConfig, MetricTable};
use geoprior_core::noising::{noisy_latent, TimestepSchedule};
use geoprior_core::synth::{gen_rgbd_room, gen_token_scene, voxel_embedding_grid, FeatureModel, RoomConfig, TokenSceneConfig};
use geoprior_core::tensor::{pca_project, TokenGrid};
use ndarray::{Array3, Array4};
use rayon::prelude::*;

use crate::{Cli, Command, Common, SynthMode};

pub fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    if !(c.voxel_size > 0.0) || !c.voxel_size.is_finite() {
        bail!("--voxel-size must be positive, got {}", c.voxel_size);
    }
    if c.frames == 0 {
        bail!("--frames must be at least 1");
    }
    match cli.command {
        Command::CorrScore { manifests, branch, jobs } => corr_score(c, manifests, branch.as_deref(), jobs),
        Command::Nos { table, groups } => nos_cmd(c, &table, &groups),
        Command::Rank { table, groups } => rank_cmd(c, &table, groups.as_deref()),
        Command::Correlate { input, x, y } => correlate(&input, x.as_deref(), y.as_deref()),
        Command::FuseCheck {
            configs,
            max_t,
            max_n,
            max_d,
            step,
            tol,
        } => fuse_check(c, configs, (max_t, max_n, max_d), step, tol),
        Command::Noise {
            input,
            timestep,
            total_steps,
        } => noise(c, &input, timestep, total_steps),
        Command::Synth {
            mode,
            sigma,
            scenes,
            views,
            tokens,
            channels,
            iid,
        } => synth(c, mode, sigma, scenes, views, tokens, channels, iid),
        Command::PcaVis {
            manifest,
            branch,
            scale,
        } => pca_vis(c, &manifest, branch.as_deref(), scale),
        Command::Pool { input } => pool(c, &input),
    }
}

fn output_dir(c: &Common) -> Result<PathBuf> {
    let dir = c.output.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_report(c: &Common, name: &str, body: &[u8]) -> Result<()> {
    if c.output.is_some() {
        let path = output_dir(c)?.join(name);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn stdout_bytes(body: &[u8]) -> Result<()> {
    let mut out = io::stdout().lock();
    out.write_all(body)?;
    out.flush()?;
    Ok(())
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "tensor".into())
}

fn cloud_for(c: &Common, path: &Path, branch: Option<&str>) -> Result<(String, TokenCloud)> {
    let loaded = load_scene(path)?;
    let id = loaded.scene_id.clone();
    if branch.is_none() {
        if let Some(cloud) = loaded.token_cloud {
            return Ok((id, cloud));
        }
    }
    let scene = loaded
        .scene
        .as_ref()
        .ok_or_else(|| anyhow!("scene `{id}` has no frames; correspondence unavailable"))?;
    let feats = match branch {
        Some(name) => loaded
            .branch(name)
            .ok_or_else(|| anyhow!("scene `{id}` has no branch `{name}`"))?,
        None => loaded
            .branches
            .first()
            .ok_or_else(|| anyhow!("scene `{id}` has no feature branches; correspondence unavailable"))?,
    };
    let idx = sample_frames(scene.frames.len(), c.frames);
    let (gh, gw) = c.grid;
    let mut grid = feats.grid.select_frames(&idx)?;
    if (grid.rows(), grid.cols()) != (gh, gw) {
        grid = grid.pooled(gh, gw)?;
    }
    let coords = scene_token_coords(scene, &idx, gh, gw, c.depth_mode.into())?;
    Ok((id, TokenCloud::from_grid(&grid, &coords)?))
}

fn corr_score(c: &Common, manifests: Vec<PathBuf>, branch: Option<&str>, jobs: Option<usize>) -> Result<()> {
    let paths = if manifests.is_empty() {
        let mut paths = Vec::new();
        for line in io::stdin().lock().lines() {
            let line = line.context("reading manifest paths from stdin")?;
            let line = line.trim();
            if !line.is_empty() {
                paths.push(PathBuf::from(line));
            }
        }
        paths
    } else {
        manifests
    };
    if paths.is_empty() {
        bail!("no manifests given on the command line or stdin");
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.unwrap_or(0)).build()?;
    let scored: Vec<Result<(String, SceneScore)>> = pool.install(|| {
        paths
            .par_iter()
            .map(|p| {
                let (id, cloud) = cloud_for(c, p, branch).with_context(|| format!("loading {}", p.display()))?;
                let score = score_cloud(&cloud, c.voxel_size)?;
                Ok((id, score))
            })
            .collect()
    });
    let mut rows = scored.into_iter().collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    let summary = dataset_score(&rows.iter().map(|(_, s)| *s).collect::<Vec<_>>());

    let mut csv = Vec::new();
    write_scores_csv(&mut csv, &rows)?;
    stdout_bytes(&csv)?;
    println!("{}", format_summary(&summary));
    write_report(c, "scores.csv", &csv)
}

fn nos_cmd(c: &Common, table: &Path, groups: &Path) -> Result<()> {
    let config = GroupConfig::load(groups)?;
    let table = MetricTable::load_csv(table)?.with_config(&config)?;
    let result = nos(&table)?;
    let mut csv = Vec::new();
    write_nos_csv(&mut csv, &result)?;
    stdout_bytes(&csv)?;
    write_report(c, "nos.csv", &csv)
}

fn rank_cmd(c: &Common, table: &Path, groups: Option<&Path>) -> Result<()> {
    let mut table = MetricTable::load_csv(table)?;
    if let Some(path) = groups {
        table = table.with_config(&GroupConfig::load(path)?)?;
    }
    let entries = avg_rank(&table)?;
    let mut csv = Vec::new();
    write_rank_csv(&mut csv, &entries)?;
    stdout_bytes(&csv)?;
    write_report(c, "ranks.csv", &csv)
}

fn correlate(input: &Path, x: Option<&str>, y: Option<&str>) -> Result<()> {
    let file = fs::File::open(input).with_context(|| format!("opening {}", input.display()))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let records = rdr.records().collect::<std::result::Result<Vec<_>, _>>()?;
    let column = |j: usize| -> Option<Vec<f64>> {
        records.iter().map(|r| r.get(j)?.parse::<f64>().ok()).collect()
    };
    let numeric: Vec<usize> = (0..header.len()).filter(|&j| column(j).is_some()).collect();
    let pick = |name: Option<&str>, fallback: usize| -> Result<usize> {
        match name {
            Some(n) => header
                .iter()
                .position(|h| h == n)
                .ok_or_else(|| anyhow!("no column `{n}` in {}", input.display())),
            None => numeric
                .get(fallback)
                .copied()
                .ok_or_else(|| anyhow!("{} needs two numeric columns", input.display())),
        }
    };
    let (xi, yi) = (pick(x, 0)?, pick(y, 1)?);
    let xs = column(xi).ok_or_else(|| anyhow!("column `{}` is not numeric", header[xi]))?;
    let ys = column(yi).ok_or_else(|| anyhow!("column `{}` is not numeric", header[yi]))?;
    let r = pearson(&xs, &ys)?;
    println!("x,y,n,r");
    println!("{},{},{},{r:.12}", header[xi], header[yi], xs.len());
    Ok(())
}

fn fuse_check(c: &Common, configs: usize, (max_t, max_n, max_d): (usize, usize, usize), step: f64, tol: f64) -> Result<()> {
    if configs == 0 || max_t == 0 || max_n == 0 || max_d == 0 {
        bail!("fuse-check sizes must be positive");
    }
    let mut worst: f64 = 0.0;
    println!("config,T,N,D,coordinates,max_rel_error,worst_group");
    for i in 0..configs {
        let case = GateCase::random(c.seed.wrapping_add(i as u64), max_t, max_n, max_d);
        let report = finite_diff_check(&case, step)?;
        let (t, n, d) = case.dims();
        println!(
            "{i},{t},{n},{d},{},{:.3e},{}",
            report.coordinates, report.max_rel_error, report.worst
        );
        worst = worst.max(report.max_rel_error);
    }

    // With a zero gate weight, dL/db = σ'(b)·Σ upstream·(y − x).
    let mut case = GateCase::random(c.seed, max_t, max_n, max_d);
    case.params.weight.fill(0.0);
    let io = gate_forward(case.gen.clone(), case.sem.clone(), &case.params)?;
    let grads = gate_backward(&io, case.upstream.view(), &case.params)?;
    let g = sigmoid(case.params.bias);
    let expected: f64 = case
        .upstream
        .iter()
        .zip(case.gen.iter().zip(&case.sem))
        .map(|(u, (x, y))| u * (y - x))
        .sum::<f64>()
        * g
        * (1.0 - g);
    let bias_err = (grads.bias - expected).abs();
    println!("bias_identity_error,{bias_err:.3e}");
    println!("max_rel_error,{worst:.3e}");
    if !(worst < tol) || !(bias_err < 1e-10) {
        bail!("gradient check failed: max relative error {worst:e}, bias identity error {bias_err:e}");
    }
    Ok(())
}

fn noise(c: &Common, input: &Path, timestep: u32, total_steps: u32) -> Result<()> {
    let schedule = TimestepSchedule::new(timestep, total_steps)?;
    let z0 = read_tensor(input)?;
    let z = noisy_latent(&z0, schedule, c.seed);
    let path = output_dir(c)?.join(format!("{}_k{timestep}.vgt", file_stem(input)));
    write_tensor(&path, &z)?;
    println!("{}", path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn synth(
    c: &Common,
    mode: SynthMode,
    sigma: f64,
    scenes: usize,
    views: usize,
    tokens: usize,
    channels: usize,
    iid: bool,
) -> Result<()> {
    if scenes == 0 {
        bail!("--scenes must be at least 1");
    }
    let dir = output_dir(c)?;
    for s in 0..scenes {
        let seed = c.seed.wrapping_add(s as u64);
        let path = match mode {
            SynthMode::Tokens => {
                let id = format!("tokens_{s:03}");
                let cloud = gen_token_scene(&TokenSceneConfig {
                    n_views: views,
                    tokens_per_view: tokens,
                    feature_dim: channels,
                    voxel_size: c.voxel_size,
                    sigma,
                    seed,
                    features: if iid { FeatureModel::IidNoise } else { FeatureModel::VoxelEmbedding },
                    ..Default::default()
                })?;
                save_scene(&dir.join(&id), &id, None, &[], Some(&cloud))?
            }
            SynthMode::Room => {
                let id = format!("room_{s:03}");
                let scene = gen_rgbd_room(&RoomConfig {
                    scene_id: id.clone(),
                    n_views: views,
                    ..Default::default()
                })?;
                let all: Vec<usize> = (0..scene.frames.len()).collect();
                let (gh, gw) = c.grid;
                let coords = scene_token_coords(&scene, &all, gh, gw, c.depth_mode.into())?;
                let branch = Branch {
                    name: "synthetic".into(),
                    grid: voxel_embedding_grid(&coords, c.voxel_size, channels, sigma, seed)?,
                    meta: BranchMeta {
                        backbone: "voxel-embedding".into(),
                        ..Default::default()
                    },
                };
                save_scene(&dir.join(&id), &id, Some(&scene), &[branch], None)?
            }
        };
        println!("{}", path.display());
    }
    Ok(())
}

fn pca_vis(c: &Common, manifest: &Path, branch: Option<&str>, scale: usize) -> Result<()> {
    if scale == 0 {
        bail!("--scale must be at least 1");
    }
    let loaded = load_scene(manifest)?;
    let b = match branch {
        Some(name) => loaded.branch(name).ok_or_else(|| anyhow!("no branch `{name}`"))?,
        None => loaded
            .branches
            .first()
            .ok_or_else(|| anyhow!("scene `{}` has no feature branches", loaded.scene_id))?,
    };
    let [t, h, w, ch] = b.grid.dims();
    let tokens = b
        .grid
        .values()
        .to_shape((t * h * w, ch))
        .context("flattening tokens")?
        .to_owned();
    let k = 3.min(ch).min(t * h * w);
    let pca = pca_project(tokens.view(), k)?;

    let mut rgb = Array3::<u8>::zeros((h * scale, t * w * scale, 3));
    for comp in 0..k {
        let col = pca.coords.column(comp);
        let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        for (idx, &v) in col.iter().enumerate() {
            let level = if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u8 } else { 128 };
            let (f, i, j) = (idx / (h * w), (idx / w) % h, idx % w);
            for di in 0..scale {
                for dj in 0..scale {
                    rgb[[i * scale + di, (f * w + j) * scale + dj, comp]] = level;
                }
            }
        }
    }
    let path = output_dir(c)?.join(format!("{}_{}_pca.ppm", loaded.scene_id, b.name));
    let (height, width, _) = rgb.dim();
    write_ppm(&path, width, height, rgb.as_slice().expect("standard layout"))?;
    println!("{}", path.display());
    for (comp, ratio) in pca.explained_ratio.iter().enumerate() {
        println!("component {comp}: explained {ratio:.6}");
    }
    Ok(())
}

fn pool(c: &Common, input: &Path) -> Result<()> {
    let tensor = read_tensor(input)?.to_f64();
    let grid = match tensor.dims() {
        [_, _, _, _] => TokenGrid::from_tensor(&tensor)?,
        &[h, w, ch] => TokenGrid::new(Array4::from_shape_vec((1, h, w, ch), tensor.to_f64_vec())?)?,
        dims => bail!("pool expects a T×H×W×C or H×W×C tensor, got {dims:?}"),
    };
    let (gh, gw) = c.grid;
    let pooled = grid.pooled(gh, gw)?;
    let pooled = pooled.select_frames(&sample_frames(pooled.frames(), c.frames))?;
    let path = output_dir(c)?.join(format!("{}_pooled.vgt", file_stem(input)));
    write_tensor(&path, &pooled.to_tensor())?;
    println!("{}", path.display());
    Ok(())
}
