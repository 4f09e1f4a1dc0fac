//! Forward warping of depth maps into a new view.
//!
//! Source pixels are back-projected and splatted into the target through the
//! z-buffer. The winner only tells which surface a pixel sees. A plane or
//! sphere is fitted to the winner's source neighbourhood (one-sided windows
//! keep creases and silhouettes out of the fit) and the pixel's own center
//! ray is intersected with it. A pixel stays uncovered when no surface fits,
//! when the source sees something behind the hit, or when the ray in front of
//! the hit was not observed empty by any source.

use crate::error::{Error, Result};
use crate::exec;
use crate::scene::{CameraExtrinsics, CameraIntrinsics, DepthMap, PointCloud};

use super::projection::{project_point_with, Projection};
use super::render::{render_visibility, NO_WINNER};
use super::surface::{fit, Surface};
use super::RenderConfig;

/// Rays more oblique than this (cosine to a fitted plane normal) miss it.
const MIN_RAY_COSINE: f64 = 0.05;
/// Relative depth tolerance of the source-view consistency check.
const CONSISTENCY_TOLERANCE: f64 = 0.02;
/// Largest fit residual accepted, relative to the source depth.
const FIT_TOLERANCE: f64 = 1e-4;
/// Distance from the target camera where the free-space check starts, in meters.
const FREE_SPACE_START: f64 = 0.25;
/// Free-space sample spacing in target pixels at the hit depth.
const FREE_SPACE_STEP: f64 = 0.5;
const MAX_FREE_SPACE_SAMPLES: usize = 1024;
/// Extra samples packed towards the hit, each halving the gap.
const REFINED_SAMPLES: usize = 12;
/// Samples this close to the fitted surface, relative to depth, need no
/// observation.
const SURFACE_BAND: f64 = 2e-4;
/// Relative margin by which a sample must lie in front of the observed depth.
const EMPTY_MARGIN: f64 = 1e-4;
/// Relative depth agreement required between a hit and its source observation.
const OBSERVED_TOLERANCE: f64 = 1e-3;
/// Largest relative depth spread of a 2x2 neighbourhood interpolated as one surface.
const CONTINUITY_RATIO: f64 = 0.1;

#[derive(Debug, Clone, Copy)]
pub struct SourceView<'a> {
    pub depth: &'a DepthMap,
    pub intrinsics: &'a CameraIntrinsics,
    pub extrinsics: &'a CameraExtrinsics,
}

#[derive(Debug, Clone)]
pub struct WarpResult {
    /// Warped depth; invalid (NaN) wherever `coverage` is false.
    pub depth: DepthMap,
    pub coverage: Vec<bool>,
    /// Pixels the z-buffer covered but the consistency check dropped.
    pub rejected: usize,
}

impl WarpResult {
    pub fn covered(&self) -> usize {
        self.coverage.iter().filter(|&&c| c).count()
    }
}

struct SourceSamples {
    /// Camera-frame point per pixel, `None` where depth is invalid.
    cam: Vec<Option<[f64; 3]>>,
    world: Vec<[f64; 3]>,
    pixels: Vec<u32>,
}

fn camera_points(view: &SourceView<'_>) -> Vec<Option<[f64; 3]>> {
    let k = view.intrinsics;
    let w = view.depth.width as usize;
    view.depth
        .values
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            z.is_finite().then(|| {
                let (u, v) = ((i % w) as f64, (i / w) as f64);
                [(u + 0.5 - k.cx) * z / k.fx, (v + 0.5 - k.cy) * z / k.fy, z]
            })
        })
        .collect()
}

fn sample_source(view: &SourceView<'_>) -> SourceSamples {
    let cam = camera_points(view);
    let mut out = SourceSamples {
        world: Vec::with_capacity(cam.len()),
        pixels: Vec::with_capacity(cam.len()),
        cam: Vec::new(),
    };
    for (i, p) in cam.iter().enumerate() {
        if let Some(p) = p {
            out.world.push(view.extrinsics.to_world(*p));
            out.pixels.push(i as u32);
        }
    }
    out.cam = cam;
    out
}

/// Warps one or more source depth maps into the target camera.
pub fn warp_depth(
    sources: &[SourceView<'_>],
    target_intr: &CameraIntrinsics,
    target_extr: &CameraExtrinsics,
    cfg: &RenderConfig,
) -> Result<WarpResult> {
    cfg.validate()?;
    if sources.is_empty() {
        return Err(Error::Input("warp needs at least one source view".into()));
    }
    for s in sources {
        if s.depth.width != s.intrinsics.width || s.depth.height != s.intrinsics.height {
            return Err(Error::Dimension(format!(
                "source depth {}x{} does not match its camera {}x{}",
                s.depth.width, s.depth.height, s.intrinsics.width, s.intrinsics.height
            )));
        }
    }

    let samples = exec::map_slice(sources, sample_source);
    // global id -> (source, index within that source's samples)
    let mut owner = Vec::new();
    let mut points = Vec::new();
    for (si, s) in samples.iter().enumerate() {
        points.extend_from_slice(&s.world);
        owner.extend((0..s.world.len() as u32).map(|j| (si as u32, j)));
    }
    let cloud = PointCloud::new(points);
    let buf = render_visibility(&cloud, target_intr, target_extr, cfg);

    let w = target_intr.width as usize;
    let ctx = Context {
        sources,
        samples: &samples,
        k: target_intr,
        e: target_extr,
        near: cfg.near_epsilon,
    };
    let mut depth = vec![f64::NAN; buf.winner.len()];
    exec::for_each_chunk_mut(&mut depth, w, |row, out| {
        for (col, slot) in out.iter_mut().enumerate() {
            let idx = row * w + col;
            let id = buf.winner[idx];
            if id == NO_WINNER {
                continue;
            }
            let (si, j) = owner[id as usize];
            *slot = ctx
                .refine(si as usize, j as usize, buf.zbuf[idx], (col as f64 + 0.5, row as f64 + 0.5))
                .unwrap_or(f64::NAN);
        }
    });

    let coverage: Vec<bool> = depth.iter().map(|d| d.is_finite()).collect();
    let rejected = buf.covered_pixels() - coverage.iter().filter(|&&c| c).count();
    Ok(WarpResult {
        depth: DepthMap {
            width: target_intr.width,
            height: target_intr.height,
            values: depth,
        },
        coverage,
        rejected,
    })
}

struct Context<'a> {
    sources: &'a [SourceView<'a>],
    samples: &'a [SourceSamples],
    k: &'a CameraIntrinsics,
    e: &'a CameraExtrinsics,
    near: f64,
}

/// Pixel windows around the winner tried for the surface fit, as
/// `(u_min, u_max, v_min, v_max)` offsets.
const FIT_WINDOWS: [(isize, isize, isize, isize); 6] = [
    (-2, 2, -2, 2),
    (-1, 1, -1, 1),
    (-2, 0, -2, 0),
    (0, 2, -2, 0),
    (-2, 0, 0, 2),
    (0, 2, 0, 2),
];

fn window_points(s: &SourceSamples, view: &SourceView<'_>, pix: usize, win: (isize, isize, isize, isize)) -> Option<Vec<[f64; 3]>> {
    let (w, h) = (view.depth.width as isize, view.depth.height as isize);
    let (u, v) = ((pix as isize) % w, (pix as isize) / w);
    let mut pts = Vec::with_capacity(25);
    for dv in win.2..=win.3 {
        for du in win.0..=win.1 {
            let (x, y) = (u + du, v + dv);
            if x < 0 || y < 0 || x >= w || y >= h {
                return None;
            }
            pts.push(s.cam[(y * w + x) as usize]?);
        }
    }
    Some(pts)
}

/// Depth a source observes at a projected point: the nearest and farthest of
/// the four surrounding pixel centers, and the interpolated depth when those
/// lie on one surface. `None` if any of them is invalid.
fn observed_depth(view: &SourceView<'_>, pr: &Projection) -> Option<(f64, f64, Option<f64>)> {
    let (fu, fv) = (pr.u - 0.5, pr.v - 0.5);
    let (u0, v0) = (fu.floor() as i64, fv.floor() as i64);
    let (a, b) = (fu - u0 as f64, fv - v0 as f64);
    let weights = [(1.0 - a) * (1.0 - b), a * (1.0 - b), (1.0 - a) * b, a * b];
    let (mut lo, mut hi, mut inv) = (f64::INFINITY, 0.0f64, 0.0);
    for (wt, (du, dv)) in weights.into_iter().zip([(0, 0), (1, 0), (0, 1), (1, 1)]) {
        if wt == 0.0 {
            continue;
        }
        let z = view.depth.valid_at(u0 + du, v0 + dv)?;
        lo = lo.min(z);
        hi = hi.max(z);
        inv += wt / z;
    }
    // inverse depth is affine in the image for planes
    let seen = (hi <= lo * (1.0 + CONTINUITY_RATIO)).then(|| 1.0 / inv);
    Some((lo, hi, seen))
}

/// Whether a source-camera point projects inside `win` grown by one pixel.
fn in_window(view: &SourceView<'_>, pix: usize, win: (isize, isize, isize, isize), q: [f64; 3]) -> bool {
    let k = view.intrinsics;
    if !(q[2] > 0.0) {
        return false;
    }
    let w = view.depth.width as usize;
    let (u, v) = ((pix % w) as f64 + 0.5, (pix / w) as f64 + 0.5);
    let (pu, pv) = (k.fx * q[0] / q[2] + k.cx - u, k.fy * q[1] / q[2] + k.cy - v);
    pu >= win.0 as f64 - 1.0 && pu <= win.1 as f64 + 1.0 && pv >= win.2 as f64 - 1.0 && pv <= win.3 as f64 + 1.0
}

impl Context<'_> {
    fn refine(&self, si: usize, j: usize, raw_z: f64, center: (f64, f64)) -> Option<f64> {
        let (k, e, near) = (self.k, self.e, self.near);
        let view = &self.sources[si];
        let s = &self.samples[si];
        let ray = [(center.0 - k.cx) / k.fx, (center.1 - k.cy) / k.fy, 1.0];
        let pix = s.pixels[j] as usize;
        let p_src = s.cam[pix].expect("winner pixel is valid");

        // Fit a local surface in source camera coordinates and intersect the
        // target ray with it; the ray parameter is the target depth.
        let o_src = view.extrinsics.to_camera(e.center());
        let d_src = view.extrinsics.direction_to_camera(e.direction_to_world(ray));
        let mut hit = None;
        for win in FIT_WINDOWS {
            let Some(pts) = window_points(s, view, pix, win) else { continue };
            let Some(f) = fit(&pts, FIT_TOLERANCE * p_src[2]) else { continue };
            let Some(t) = f.intersect_near(o_src, d_src, raw_z, MIN_RAY_COSINE) else { continue };
            if t > near && in_window(view, pix, win, [o_src[0] + t * d_src[0], o_src[1] + t * d_src[1], o_src[2] + t * d_src[2]]) {
                hit = Some((t, f));
                break;
            }
        }
        let (z, surface) = hit?;

        // The source that produced the winner must see the hit itself or
        // something in front of it.
        let world = e.to_world([ray[0] * z, ray[1] * z, z]);
        let pr = project_point_with(world, view.intrinsics, view.extrinsics, near)?;
        let (_, farthest, seen) = observed_depth(view, &pr)?;
        let occluded = seen.unwrap_or(farthest) < pr.z * (1.0 - CONSISTENCY_TOLERANCE);
        let on_surface = seen.is_some_and(|d| (d - pr.z).abs() <= OBSERVED_TOLERANCE * pr.z);
        if !(occluded || on_surface) {
            return None;
        }

        self.free_space_seen(ray, z, view, surface).then_some(z)
    }

    /// Whether every sample of the target ray in front of depth `z` was
    /// observed empty by some source or lies on the fitted surface.
    fn free_space_seen(&self, ray: [f64; 3], z: f64, view: &SourceView<'_>, surface: Surface) -> bool {
        let end = z;
        if end <= FREE_SPACE_START {
            return true;
        }
        let step = FREE_SPACE_STEP * z / self.k.fx;
        let n = (((end - FREE_SPACE_START) / step).ceil() as usize).clamp(1, MAX_FREE_SPACE_SAMPLES);
        let near_end = (1..=REFINED_SAMPLES).map(|m| end - step * 0.5f64.powi(m as i32));
        let ts = (0..n).map(|i| FREE_SPACE_START + (end - FREE_SPACE_START) * i as f64 / n as f64).chain(near_end);
        let o = self.e.center();
        let d = self.e.direction_to_world(ray);
        let band = SURFACE_BAND * z;
        ts.filter(|&t| t >= FREE_SPACE_START).all(|t| {
            let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
            if surface.distance(view.extrinsics.to_camera(p)) <= band {
                return true;
            }
            self.sources.iter().any(|v| self.seen_empty(v, p))
        })
    }

    fn seen_empty(&self, view: &SourceView<'_>, p: [f64; 3]) -> bool {
        let Some(pr) = project_point_with(p, view.intrinsics, view.extrinsics, self.near) else {
            return false;
        };
        let Some((nearest, _, seen)) = observed_depth(view, &pr) else {
            return false;
        };
        pr.z < seen.unwrap_or(nearest) * (1.0 - EMPTY_MARGIN)
    }
}
