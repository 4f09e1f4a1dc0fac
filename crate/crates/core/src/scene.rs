//! Scene-level domain types shared by every other module.
//!
//! Units: meters for geometry, pixels for image coordinates. Pixel `(u, v)`
//! covers the half-open square `[u, u+1) x [v, v+1)`, so its center sits at
//! `(u + 0.5, v + 0.5)`. Extrinsics map world to camera: `p_cam = R p_world + t`,
//! camera looking down `+z` with `x` right and `y` down.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

/// Orthonormality / determinant tolerance for rotations.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.fx > 0.0 && self.fx.is_finite()) || !(self.fy > 0.0 && self.fy.is_finite()) {
            out.push(format!("focal lengths must be positive (fx={}, fy={})", self.fx, self.fy));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            out.push(format!("cx={} outside [0, {})", self.cx, self.width));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            out.push(format!("cy={} outside [0, {})", self.cy, self.height));
        }
        out
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraExtrinsics {
    /// World-to-camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    /// World-to-camera translation in meters.
    pub translation: [f64; 3],
}

impl CameraExtrinsics {
    pub fn identity() -> Self {
        CameraExtrinsics {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Camera placed at `position` looking towards `target`, world up = `+z`.
    ///
    /// Returns `None` when the viewing direction is degenerate or parallel to up.
    pub fn look_at(position: [f64; 3], target: [f64; 3]) -> Option<Self> {
        let forward = normalize(sub(target, position))?;
        let right = normalize(cross(forward, [0.0, 0.0, 1.0]))?;
        let down = cross(forward, right);
        let rotation = [right, down, forward];
        let t = mat_vec(&rotation, position);
        Some(CameraExtrinsics {
            rotation,
            translation: [-t[0], -t[1], -t[2]],
        })
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> [f64; 3] {
        let c = mat_t_vec(&self.rotation, self.translation);
        [-c[0], -c[1], -c[2]]
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    pub fn to_world(&self, p_cam: [f64; 3]) -> [f64; 3] {
        mat_t_vec(&self.rotation, sub(p_cam, self.translation))
    }

    /// Rotates a camera-frame direction into the world frame.
    pub fn direction_to_world(&self, d: [f64; 3]) -> [f64; 3] {
        mat_t_vec(&self.rotation, d)
    }

    pub fn direction_to_camera(&self, d: [f64; 3]) -> [f64; 3] {
        mat_vec(&self.rotation, d)
    }

    pub fn violations(&self) -> Vec<String> {
        let r = &self.rotation;
        let mut out = Vec::new();
        if r.iter().flatten().chain(self.translation.iter()).any(|x| !x.is_finite()) {
            out.push("non-finite pose entry".to_string());
            return out;
        }
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - expected).abs());
            }
        }
        if worst > ROTATION_TOLERANCE {
            out.push(format!("rotation not orthonormal (max |RᵀR - I| = {worst:e})"));
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            out.push(format!("rotation determinant {det} != 1"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub frame_id: u32,
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
    #[serde(default)]
    pub depth_ref: Option<String>,
    #[serde(default)]
    pub seg_ref: Option<String>,
    #[serde(default)]
    pub feat2d_ref: Option<String>,
    #[serde(default)]
    pub feat3d_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub frames: Vec<Frame>,
    pub patch_size_2d: u32,
    pub patch_size_3d: u32,
}

impl SceneManifest {
    /// Position of the frame with `frame_id`, if present.
    pub fn position(&self, frame_id: u32) -> Option<usize> {
        self.frames.iter().position(|f| f.frame_id == frame_id)
    }

    pub fn frame(&self, frame_id: u32) -> Result<&Frame> {
        self.frames
            .iter()
            .find(|f| f.frame_id == frame_id)
            .ok_or_else(|| Error::Input(format!("frame {frame_id} not in manifest")))
    }

    /// `(patches_h, patches_w)` of the fused-token grid for the first frame.
    pub fn patch_grid(&self) -> Result<(usize, usize)> {
        let f = self
            .frames
            .first()
            .ok_or_else(|| Error::Input("manifest has no frames".into()))?;
        patch_grid(f.intrinsics.width, f.intrinsics.height, self.patch_size_2d)
    }
}

/// Exact patch grid dims, or a parameter error when the image is not divisible.
pub fn patch_grid(width: u32, height: u32, patch: u32) -> Result<(usize, usize)> {
    if patch == 0 || width % patch != 0 || height % patch != 0 {
        return Err(Error::Param(format!(
            "image {width}x{height} not divisible by patch size {patch}"
        )));
    }
    Ok(((height / patch) as usize, (width / patch) as usize))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    /// Row-major metric depth; non-finite marks an invalid pixel.
    pub values: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: u32, height: u32, values: Vec<f64>) -> Result<Self> {
        if values.len() != width as usize * height as usize {
            return Err(Error::Input(format!(
                "depth map {width}x{height} given {} values",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| v.is_finite() && **v <= 0.0) {
            return Err(Error::Input(format!("non-positive depth {bad}")));
        }
        Ok(DepthMap {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: u32, height: u32, value: f64) -> Self {
        DepthMap {
            width,
            height,
            values: vec![value; width as usize * height as usize],
        }
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> f64 {
        self.values[v as usize * self.width as usize + u as usize]
    }

    /// Depth at `(u, v)` when the pixel exists and holds a valid value.
    pub fn valid_at(&self, u: i64, v: i64) -> Option<f64> {
        if u < 0 || v < 0 || u >= self.width as i64 || v >= self.height as i64 {
            return None;
        }
        let d = self.get(u as u32, v as u32);
        d.is_finite().then_some(d)
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_finite()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMap {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<u16>,
    pub background_labels: BTreeSet<u16>,
}

impl SegmentationMap {
    pub fn new(width: u32, height: u32, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != width as usize * height as usize {
            return Err(Error::Input(format!(
                "segmentation {width}x{height} given {} labels",
                labels.len()
            )));
        }
        Ok(SegmentationMap {
            width,
            height,
            labels,
            background_labels: BTreeSet::new(),
        })
    }

    pub fn with_background(mut self, labels: impl IntoIterator<Item = u16>) -> Self {
        self.background_labels = labels.into_iter().collect();
        self
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> u16 {
        self.labels[v as usize * self.width as usize + u as usize]
    }
}

/// Merged world-frame points. A point's id is its index, so ids are always
/// unique and contiguous from 0.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn ids(&self) -> std::ops::Range<u32> {
        0..self.points.len() as u32
    }
}

/// Patchified features, `n_frames x patches_h x patches_w x dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub n_frames: usize,
    pub patches_h: usize,
    pub patches_w: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(
        n_frames: usize,
        patches_h: usize,
        patches_w: usize,
        dim: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let expected = n_frames * patches_h * patches_w * dim;
        if data.len() != expected {
            return Err(Error::Input(format!(
                "feature grid {n_frames}x{patches_h}x{patches_w}x{dim} needs {expected} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input("feature grid contains non-finite values".into()));
        }
        Ok(FeatureGrid {
            n_frames,
            patches_h,
            patches_w,
            dim,
            data,
        })
    }

    pub fn zeros(n_frames: usize, patches_h: usize, patches_w: usize, dim: usize) -> Self {
        FeatureGrid {
            n_frames,
            patches_h,
            patches_w,
            dim,
            data: vec![0.0; n_frames * patches_h * patches_w * dim],
        }
    }

    pub fn patch_count(&self) -> usize {
        self.n_frames * self.patches_h * self.patches_w
    }

    pub fn same_shape(&self, other: &FeatureGrid) -> bool {
        self.n_frames == other.n_frames
            && self.patches_h == other.patches_h
            && self.patches_w == other.patches_w
            && self.dim == other.dim
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n_frames, self.patches_h, self.patches_w, self.dim]
    }

    /// Flat patch index in frame-major, row-major order.
    #[inline]
    pub fn patch_index(&self, frame: usize, row: usize, col: usize) -> usize {
        (frame * self.patches_h + row) * self.patches_w + col
    }

    #[inline]
    pub fn patch(&self, index: usize) -> &[f64] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    #[inline]
    pub fn patch_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.data[index * self.dim..(index + 1) * self.dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    EmptyScene,
    DuplicateFrameId,
    Intrinsics,
    Rotation,
    PatchRatio,
    PatchDivisibility,
    Dimension,
    Format,
    Io,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub frame_id: Option<u32>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }

    fn push(&mut self, kind: ViolationKind, frame_id: Option<u32>, message: impl Into<String>) {
        self.violations.push(Violation {
            kind,
            frame_id,
            message: message.into(),
        });
    }
}

/// Checks every manifest invariant. File references are resolved against
/// `base_dir` when given; unreadable files become `Io` entries.
pub fn validate_scene(manifest: &SceneManifest, base_dir: Option<&Path>) -> ValidationReport {
    use ViolationKind::*;
    let mut report = ValidationReport::default();

    if manifest.frames.is_empty() {
        report.push(EmptyScene, None, "manifest has no frames");
    }
    if manifest.patch_size_3d == 0 || manifest.patch_size_2d != 2 * manifest.patch_size_3d {
        report.push(
            PatchRatio,
            None,
            format!(
                "patch ratio: patch_size_2d ({}) must be 2 x patch_size_3d ({})",
                manifest.patch_size_2d, manifest.patch_size_3d
            ),
        );
    }

    let mut seen = HashSet::new();
    for frame in &manifest.frames {
        let id = Some(frame.frame_id);
        if !seen.insert(frame.frame_id) {
            report.push(DuplicateFrameId, id, format!("frame_id {} repeated", frame.frame_id));
        }
        for m in frame.intrinsics.violations() {
            report.push(Intrinsics, id, m);
        }
        for m in frame.extrinsics.violations() {
            report.push(Rotation, id, m);
        }
        let (w, h) = (frame.intrinsics.width, frame.intrinsics.height);
        if manifest.patch_size_2d == 0 || w % manifest.patch_size_2d != 0 || h % manifest.patch_size_2d != 0 {
            report.push(
                PatchDivisibility,
                id,
                format!("image {w}x{h} not divisible by patch_size_2d {}", manifest.patch_size_2d),
            );
        }
        if let Some(base) = base_dir {
            check_frame_files(&mut report, manifest, frame, base);
        }
    }
    report
}

fn check_frame_files(report: &mut ValidationReport, manifest: &SceneManifest, frame: &Frame, base: &Path) {
    let id = Some(frame.frame_id);
    let (w, h) = (frame.intrinsics.width, frame.intrinsics.height);
    let mut record = |res: Result<()>| match res {
        Ok(()) => {}
        Err(Error::Io { path, source }) => {
            report.push(ViolationKind::Io, id, format!("{}: {source}", path.display()))
        }
        Err(Error::Dimension(msg)) => report.push(ViolationKind::Dimension, id, msg),
        Err(e) => report.push(ViolationKind::Format, id, e.to_string()),
    };
    if let Some(r) = &frame.depth_ref {
        record(io::read_depth_header(&base.join(r)).and_then(|(fw, fh)| {
            check_dims("depth", (fw, fh), (w, h))
        }));
    }
    if let Some(r) = &frame.seg_ref {
        record(io::read_segmentation_header(&base.join(r)).and_then(|(fw, fh)| {
            check_dims("segmentation", (fw, fh), (w, h))
        }));
    }
    for (name, r, patch) in [
        ("2d features", &frame.feat2d_ref, manifest.patch_size_2d),
        ("3d features", &frame.feat3d_ref, manifest.patch_size_3d),
    ] {
        let Some(r) = r else { continue };
        record(io::read_features_header(&base.join(r)).and_then(|hdr| {
            if patch == 0 {
                return Ok(());
            }
            let expected = ((h / patch) as usize, (w / patch) as usize);
            if (hdr.patches_h, hdr.patches_w) != expected {
                return Err(Error::Dimension(format!(
                    "{name} grid {}x{} does not match {}x{} expected from image dims",
                    hdr.patches_h, hdr.patches_w, expected.0, expected.1
                )));
            }
            Ok(())
        }));
    }
}

fn check_dims(what: &str, file: (u32, u32), frame: (u32, u32)) -> Result<()> {
    if file != frame {
        return Err(Error::Dimension(format!(
            "{what} file is {}x{} but frame is {}x{}",
            file.0, file.1, frame.0, frame.1
        )));
    }
    Ok(())
}

#[inline]
pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn normalize(a: [f64; 3]) -> Option<[f64; 3]> {
    let n = dot(a, a).sqrt();
    (n > 1e-12 && n.is_finite()).then(|| [a[0] / n, a[1] / n, a[2] / n])
}

#[inline]
fn mat_vec(r: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
    [dot(r[0], p), dot(r[1], p), dot(r[2], p)]
}

#[inline]
fn mat_t_vec(r: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
    [
        r[0][0] * p[0] + r[1][0] * p[1] + r[2][0] * p[2],
        r[0][1] * p[0] + r[1][1] * p[1] + r[2][1] * p[2],
        r[0][2] * p[0] + r[1][2] * p[1] + r[2][2] * p[2],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn frame(id: u32, w: u32, h: u32) -> Frame {
        Frame {
            frame_id: id,
            intrinsics: CameraIntrinsics {
                fx: 100.0,
                fy: 100.0,
                cx: w as f64 / 2.0,
                cy: h as f64 / 2.0,
                width: w,
                height: h,
            },
            extrinsics: CameraExtrinsics::identity(),
            depth_ref: None,
            seg_ref: None,
            feat2d_ref: None,
            feat3d_ref: None,
        }
    }

    fn manifest() -> SceneManifest {
        SceneManifest {
            frames: vec![frame(0, 56, 28), frame(1, 56, 28)],
            patch_size_2d: 28,
            patch_size_3d: 14,
        }
    }

    #[test]
    fn identity_manifest_is_valid() {
        assert!(validate_scene(&manifest(), None).is_valid());
        assert_eq!(manifest().patch_grid().unwrap(), (1, 2));
    }

    #[test]
    fn equal_patch_sizes_violate_ratio() {
        let mut m = manifest();
        m.patch_size_3d = 28;
        let r = validate_scene(&m, None);
        assert!(r.has(ViolationKind::PatchRatio));
        assert!(r.violations[0].message.contains("patch ratio"));
    }

    #[test]
    fn bad_camera_and_duplicate_ids() {
        let mut m = manifest();
        m.frames[1].frame_id = 0;
        m.frames[0].intrinsics.cx = 56.0;
        m.frames[0].extrinsics.rotation[0][0] = 2.0;
        m.frames[1].intrinsics.width = 50;
        let r = validate_scene(&m, None);
        assert!(r.has(ViolationKind::DuplicateFrameId));
        assert!(r.has(ViolationKind::Intrinsics));
        assert!(r.has(ViolationKind::Rotation));
        assert!(r.has(ViolationKind::PatchDivisibility));
    }

    #[test]
    fn reflection_is_rejected() {
        let mut e = CameraExtrinsics::identity();
        e.rotation[2][2] = -1.0;
        assert!(e.violations().iter().any(|m| m.contains("determinant")));
    }

    #[test]
    fn depth_file_dims_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = manifest();
        io::write_depth(&dir.path().join("d0.rgd"), &DepthMap::filled(28, 28, 1.0)).unwrap();
        io::write_depth(&dir.path().join("d1.rgd"), &DepthMap::filled(56, 28, 1.0)).unwrap();
        m.frames[0].depth_ref = Some("d0.rgd".into());
        m.frames[1].depth_ref = Some("d1.rgd".into());
        let r = validate_scene(&m, Some(dir.path()));
        assert_eq!(r.violations.len(), 1, "{r:?}");
        assert_eq!(r.violations[0].kind, ViolationKind::Dimension);
        assert_eq!(r.violations[0].frame_id, Some(0));

        m.frames[0].seg_ref = Some("missing.rgs".into());
        let r = validate_scene(&m, Some(dir.path()));
        assert!(r.has(ViolationKind::Io));
    }

    #[test]
    fn look_at_is_a_rotation() {
        let e = CameraExtrinsics::look_at([1.0, 2.0, 1.5], [3.0, 1.0, 1.0]).unwrap();
        assert!(e.violations().is_empty());
        let c = e.center();
        for (a, b) in c.iter().zip([1.0, 2.0, 1.5]) {
            assert!((a - b).abs() < 1e-12);
        }
        let p = e.to_camera([3.0, 1.0, 1.0]);
        assert!(p[0].abs() < 1e-12 && p[1].abs() < 1e-12 && p[2] > 0.0);
        // world up projects to image up (negative y)
        let up = e.direction_to_camera([0.0, 0.0, 1.0]);
        assert!(up[1] < 0.0);
    }
}
