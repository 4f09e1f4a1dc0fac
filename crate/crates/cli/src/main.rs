use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use reg3d_core::coverage::{adaptive_sample_detailed, DepthFn, SamplerConfig, SelectionReport, DEFAULT_VOXEL_SIZE};
use reg3d_core::figure::{check_layout, coverage_figure};
use reg3d_core::geometry::{warp_depth, RenderConfig, SourceView, DEFAULT_SPLAT_SIDE};
use reg3d_core::io;
use reg3d_core::masking::{
    frame_level_mask, object_level_mask, FrameMask, KeepPolicy, ObjectMaskConfig, ObjectRecord, DEFAULT_MIN_PIXELS,
};
use reg3d_core::recon::{
    frame_recon_loss, fuse_tokens, merge_patches_2x2, object_recon_loss, reconstruction_target, total_loss_with_counts,
    LossConfig, TargetMode,
};
use reg3d_core::scene::{validate_scene, DepthMap, FeatureGrid, Frame, SceneManifest};
use reg3d_core::synthetic::{SyntheticScene, SyntheticSceneSpec, Trajectory};
use reg3d_core::{exec, Error, MaskRng, Result};

#[derive(Parser)]
#[command(name = "reg3d", version, about = "Coverage sampling, geometry masks and reconstruction losses")]
struct Cli {
    /// Worker threads (0 = all cores). Outputs do not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrajectoryArg {
    Sweep,
    Orbit,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Fused,
    Geometry,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic room scene directory
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        frames: usize,
        #[arg(long, default_value_t = 6)]
        objects: usize,
        #[arg(long, default_value_t = 112)]
        width: u32,
        #[arg(long, default_value_t = 84)]
        height: u32,
        /// 3D patch size; the 2D patch size is twice this
        #[arg(long, default_value_t = 14)]
        patch_size_3d: u32,
        #[arg(long, value_enum, default_value = "sweep")]
        trajectory: TrajectoryArg,
        #[arg(long)]
        seed: u64,
    },
    /// Check a scene directory against the manifest invariants
    Validate {
        #[arg(long)]
        scene: PathBuf,
    },
    /// Adaptive frame sampling by greedy max coverage
    Sample {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        candidates: usize,
        #[arg(long)]
        select: usize,
        #[arg(long, default_value_t = DEFAULT_VOXEL_SIZE)]
        voxel_size: f64,
        #[arg(long, default_value_t = DEFAULT_SPLAT_SIDE)]
        splat: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Object-level patch mask; writes the mask and a sidecar .json of object records
    MaskObjects {
        #[arg(long)]
        scene: PathBuf,
        /// Selection report or JSON array of frame ids
        #[arg(long)]
        frames: PathBuf,
        #[arg(long, default_value_t = 3)]
        num_objects: usize,
        /// Defaults to the scene's 2D patch size
        #[arg(long)]
        patch_size: Option<u32>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        background: Vec<u16>,
        #[arg(long, default_value_t = DEFAULT_MIN_PIXELS)]
        min_pixels: u64,
        /// Keep this many random views per object instead of the best-overlap view
        #[arg(long)]
        keep_random: Option<usize>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Frame-level mask over the listed frames
    MaskFrames {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge 3D patches, project and fuse with 2D features under a mask
    Fuse {
        #[arg(long)]
        feat2d: PathBuf,
        #[arg(long)]
        feat3d: PathBuf,
        #[arg(long)]
        projector: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Restrict the feature grids to these frames (feature row = frame id)
        #[arg(long)]
        frames: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the reconstruction target
        #[arg(long)]
        target_out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "fused")]
        target: TargetArg,
    },
    /// Object, frame and total reconstruction losses
    Loss {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Directory of NNNN.rgd ground-truth depth, by frame id
        #[arg(long)]
        gt_depth: PathBuf,
        #[arg(long)]
        pred_depth: PathBuf,
        #[arg(long)]
        frame_mask: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda1: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda2: f64,
        #[arg(long, default_value_t = 0.0)]
        text_loss: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Warp source depth maps into a target view
    WarpDepth {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        target: u32,
        #[arg(long, value_delimiter = ',', required = true)]
        sources: Vec<u32>,
        #[arg(long, default_value_t = DEFAULT_SPLAT_SIDE)]
        splat: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute a selection and render it as an SVG next to the uniform baseline
    CoverageReport {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        selection: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize, Deserialize)]
struct FrameMaskFile {
    frame_ids: Vec<u32>,
    /// Indices into `frame_ids`.
    masked_views: Vec<usize>,
    seed: u64,
}

#[derive(Serialize)]
struct ObjectMaskSidecar<'a> {
    frame_ids: &'a [u32],
    patch_size: u32,
    seed: u64,
    config: &'a ObjectMaskConfig,
    masked_patches: usize,
    objects: &'a [ObjectRecord],
}

fn read_frame_ids(path: &Path) -> Result<Vec<u32>> {
    let v: Value = io::read_json(path)?;
    let list = match &v {
        Value::Array(_) => &v,
        Value::Object(m) => m
            .get("selected_ids")
            .or_else(|| m.get("frame_ids"))
            .ok_or_else(|| Error::format(path, "expected selected_ids or frame_ids"))?,
        _ => return Err(Error::format(path, "expected a list of frame ids")),
    };
    serde_json::from_value(list.clone()).map_err(|e| Error::format(path, e.to_string()))
}

fn load_scene(dir: &Path) -> Result<SceneManifest> {
    io::load_manifest(&dir.join("scene.json"))
}

fn frame_file(dir: &Path, frame: &Frame, r: &Option<String>, what: &str) -> Result<PathBuf> {
    r.as_ref()
        .map(|r| dir.join(r))
        .ok_or_else(|| Error::Input(format!("frame {} has no {what} file", frame.frame_id)))
}

fn load_depth(dir: &Path, frame: &Frame) -> Result<DepthMap> {
    io::read_depth(&frame_file(dir, frame, &frame.depth_ref, "depth")?)
}

fn select_frames(grid: &FeatureGrid, ids: &[u32]) -> Result<FeatureGrid> {
    let per = grid.patches_h * grid.patches_w * grid.dim;
    let mut data = Vec::with_capacity(ids.len() * per);
    for &id in ids {
        let id = id as usize;
        if id >= grid.n_frames {
            return Err(Error::Input(format!("frame {id} not in feature grid of {} frames", grid.n_frames)));
        }
        data.extend_from_slice(&grid.data[id * per..(id + 1) * per]);
    }
    FeatureGrid::new(ids.len(), grid.patches_h, grid.patches_w, grid.dim, data)
}

fn render_cfg(splat: f64) -> Result<RenderConfig> {
    let cfg = RenderConfig::with_splat(splat);
    cfg.validate()?;
    Ok(cfg)
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenSynthetic { out, frames, objects, width, height, patch_size_3d, trajectory, seed } => {
            let trajectory = match trajectory {
                TrajectoryArg::Sweep => Trajectory::Sweep,
                TrajectoryArg::Orbit => Trajectory::Orbit { radius: 1.5, height: 1.5 },
            };
            let spec = SyntheticSceneSpec {
                objects,
                trajectory,
                frames,
                width,
                height,
                patch_size_2d: 2 * patch_size_3d,
                patch_size_3d,
                seed,
                ..Default::default()
            };
            SyntheticScene::generate(&spec)?.write_dir(&out)?;
        }
        Cmd::Validate { scene } => {
            let report = validate_scene(&load_scene(&scene)?, Some(&scene));
            for v in &report.violations {
                match v.frame_id {
                    Some(id) => println!("{:?} frame {id}: {}", v.kind, v.message),
                    None => println!("{:?}: {}", v.kind, v.message),
                }
            }
            if !report.is_valid() {
                return Err(Error::Input(format!("{} violation(s)", report.violations.len())));
            }
        }
        Cmd::Sample { scene, candidates, select, voxel_size, splat, seed, out } => {
            let manifest = load_scene(&scene)?;
            let cfg = SamplerConfig {
                voxel_size,
                render: render_cfg(splat)?,
                seed,
                ..SamplerConfig::new(manifest.frames.len(), candidates, select)
            };
            let depths = DepthFn(|_, f: &Frame| load_depth(&scene, f));
            let outcome = adaptive_sample_detailed(&manifest, &depths, &cfg)?;
            io::write_json(&out, &outcome.report)?;
        }
        Cmd::MaskObjects {
            scene,
            frames,
            num_objects,
            patch_size,
            background,
            min_pixels,
            keep_random,
            seed,
            out,
        } => {
            let manifest = load_scene(&scene)?;
            let ids = read_frame_ids(&frames)?;
            let segs = exec::map_slice(&ids, |&id| {
                let f = manifest.frame(id)?;
                io::read_segmentation(&frame_file(&scene, f, &f.seg_ref, "segmentation")?)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let cfg = ObjectMaskConfig {
                num_objects,
                background_labels: background.into_iter().collect::<BTreeSet<_>>(),
                min_pixels,
                keep: keep_random.map_or(KeepPolicy::BestOverlap, KeepPolicy::RandomViews),
            };
            let patch_size = patch_size.unwrap_or(manifest.patch_size_2d);
            let mut rng = MaskRng::new(seed);
            let (mask, records) = object_level_mask(&segs, patch_size, &cfg, &mut rng)?;
            io::write_mask(&out, &mask)?;
            let sidecar = ObjectMaskSidecar {
                frame_ids: &ids,
                patch_size,
                seed,
                config: &cfg,
                masked_patches: mask.masked_count(),
                objects: &records,
            };
            io::write_json(&out.with_extension("json"), &sidecar)?;
        }
        Cmd::MaskFrames { frames, k, seed, out } => {
            let ids = read_frame_ids(&frames)?;
            let fm = frame_level_mask(ids.len(), k, &mut MaskRng::new(seed))?;
            io::write_json(&out, &FrameMaskFile { frame_ids: ids, masked_views: fm.masked_views, seed })?;
        }
        Cmd::Fuse { feat2d, feat3d, projector, mask, frames, out, target_out, target } => {
            let mut f2d = io::read_features(&feat2d)?;
            let mut f3d = io::read_features(&feat3d)?;
            if let Some(frames) = frames {
                let ids = read_frame_ids(&frames)?;
                f2d = select_frames(&f2d, &ids)?;
                f3d = select_frames(&f3d, &ids)?;
            }
            let w = io::read_projector(&projector)?;
            let mask = io::read_mask(&mask)?;
            let merged = merge_patches_2x2(&f3d, &w)?;
            io::write_features(&out, &fuse_tokens(&f2d, &merged, &mask)?)?;
            if let Some(path) = target_out {
                let mode = match target {
                    TargetArg::Fused => TargetMode::Fused,
                    TargetArg::Geometry => TargetMode::GeometryOnly,
                };
                io::write_features(&path, &reconstruction_target(&f2d, &merged, mode)?)?;
            }
        }
        Cmd::Loss {
            target,
            recon,
            mask,
            gt_depth,
            pred_depth,
            frame_mask,
            alpha,
            beta,
            lambda1,
            lambda2,
            text_loss,
            out,
        } => {
            let cfg = LossConfig { alpha, beta, lambda1, lambda2 };
            cfg.validate()?;
            let targets = io::read_features(&target)?;
            let recon = io::read_features(&recon)?;
            let mask = io::read_mask(&mask)?;
            let l_object = object_recon_loss(&targets, &recon, &mask, alpha)?;

            let fm_file: FrameMaskFile = io::read_json(&frame_mask)?;
            let fm = FrameMask { n_frames: fm_file.frame_ids.len(), masked_views: fm_file.masked_views.clone() };
            let mut gt = vec![None; fm.n_frames];
            let mut pred = vec![None; fm.n_frames];
            for &v in &fm.masked_views {
                let id = *fm_file
                    .frame_ids
                    .get(v)
                    .ok_or_else(|| Error::Input(format!("masked view {v} out of range")))?;
                let name = format!("{id:04}.rgd");
                gt[v] = Some(io::read_depth(&gt_depth.join(&name))?);
                let p = pred_depth.join(&name);
                if !p.exists() {
                    return Err(Error::Input(format!("missing predicted depth for frame {id} ({})", p.display())));
                }
                pred[v] = Some(io::read_depth(&p)?);
            }
            let l_frame = frame_recon_loss(&gt, &pred, &fm, beta)?;
            let report = total_loss_with_counts(
                text_loss,
                l_object,
                l_frame,
                &cfg,
                mask.masked_count() as u64,
                fm.masked_views.len() as u64,
            )?;
            io::write_json(&out, &report)?;
        }
        Cmd::WarpDepth { scene, target, sources, splat, out } => {
            let manifest = load_scene(&scene)?;
            let cfg = render_cfg(splat)?;
            let frames = sources.iter().map(|&id| manifest.frame(id)).collect::<Result<Vec<_>>>()?;
            let depths = exec::map_slice(&frames, |f| load_depth(&scene, f))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let views: Vec<SourceView> = frames
                .iter()
                .zip(&depths)
                .map(|(f, d)| SourceView { depth: d, intrinsics: &f.intrinsics, extrinsics: &f.extrinsics })
                .collect();
            let t = manifest.frame(target)?;
            let result = warp_depth(&views, &t.intrinsics, &t.extrinsics, &cfg)?;
            io::write_depth(&out, &result.depth)?;
        }
        Cmd::CoverageReport { scene, selection, out } => {
            let manifest = load_scene(&scene)?;
            let report: SelectionReport = io::read_json(&selection)?;
            let depths = DepthFn(|_, f: &Frame| load_depth(&scene, f));
            let outcome = adaptive_sample_detailed(&manifest, &depths, &report.config)?;
            if outcome.report != report {
                return Err(Error::Input(format!(
                    "selection does not match the scene: recomputed covered_points {} vs {} in report",
                    outcome.report.covered_points, report.covered_points
                )));
            }
            let fig = coverage_figure(&outcome, &manifest)?;
            check_layout(&fig.layout, fig.width, fig.height).map_err(Error::Input)?;
            fig.write(&out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads;
    match exec::with_threads(threads, || run(cli.cmd)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
