//! Synthetic rooms with analytic depth and instance segmentation.
//!
//! A scene is an axis-aligned room (z up, floor at `z = 0`) holding
//! non-overlapping boxes and spheres. Depth and labels come from exact
//! ray casts through pixel centers; walls, floor and ceiling carry label 0.

use std::collections::BTreeSet;
use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::io;
use crate::recon::ProjectorWeights;
use crate::scene::{CameraExtrinsics, CameraIntrinsics, DepthMap, FeatureGrid, Frame, SceneManifest, SegmentationMap};

pub const BACKGROUND_LABEL: u16 = 0;
pub const FEAT_DIM_2D: usize = 16;
pub const FEAT_DIM_3D: usize = 8;

/// Closest a camera may get to a wall or an object, in meters.
const CLEARANCE: f64 = 0.25;
const PLACEMENT_TRIES: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Box { min: [f64; 3], max: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
}

impl Primitive {
    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        match *self {
            Primitive::Box { min, max } => (min, max),
            Primitive::Sphere { center: c, radius: r } => ([c[0] - r, c[1] - r, c[2] - r], [c[0] + r, c[1] + r, c[2] + r]),
        }
    }

    /// Nearest hit `t > 0` along `o + t d`, for a ray starting outside.
    fn intersect(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        match *self {
            Primitive::Box { min, max } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for a in 0..3 {
                    if d[a] == 0.0 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut lo, mut hi) = ((min[a] - o[a]) / d[a], (max[a] - o[a]) / d[a]);
                    if lo > hi {
                        std::mem::swap(&mut lo, &mut hi);
                    }
                    t0 = t0.max(lo);
                    t1 = t1.min(hi);
                }
                (t0 <= t1 && t0 > 0.0).then_some(t0)
            }
            Primitive::Sphere { center, radius } => {
                let oc = [o[0] - center[0], o[1] - center[1], o[2] - center[2]];
                let a = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                let hb = oc[0] * d[0] + oc[1] * d[1] + oc[2] * d[2];
                let c = oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] - radius * radius;
                let disc = hb * hb - a * c;
                if disc < 0.0 || hb >= 0.0 {
                    return None;
                }
                // stable root: q = -hb + sqrt(disc) > 0, near root = c / q
                let q = -hb + disc.sqrt();
                let t = c / q;
                (t > 0.0).then_some(t)
            }
        }
    }
}

/// A camera position with the point it looks at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: [f64; 3],
    pub target: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    /// Circle around the room center, looking inward.
    Orbit { radius: f64, height: f64 },
    /// A closed loop near the walls, traversed at varying speed while the
    /// heading swings, the way a handheld scan would.
    Sweep,
    Explicit { poses: Vec<Pose> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub room: [f64; 3],
    pub objects: usize,
    pub trajectory: Trajectory,
    pub frames: usize,
    pub width: u32,
    pub height: u32,
    pub patch_size_2d: u32,
    pub patch_size_3d: u32,
    pub horizontal_fov_deg: f64,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            room: [6.0, 5.0, 3.0],
            objects: 6,
            trajectory: Trajectory::Sweep,
            frames: 32,
            width: 112,
            height: 84,
            patch_size_2d: 28,
            patch_size_3d: 14,
            horizontal_fov_deg: 70.0,
            seed: 0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.room.iter().any(|&r| !(r.is_finite() && r > 2.0 * CLEARANCE)) {
            return Err(Error::Spec(format!("room dims {:?} too small", self.room)));
        }
        if self.frames == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::Spec("frames and image dims must be positive".into()));
        }
        if self.patch_size_3d == 0 || self.patch_size_2d != 2 * self.patch_size_3d {
            return Err(Error::Spec("patch_size_2d must be 2 x patch_size_3d".into()));
        }
        if self.width % self.patch_size_2d != 0 || self.height % self.patch_size_2d != 0 {
            return Err(Error::Spec(format!(
                "image {}x{} not divisible by patch size {}",
                self.width, self.height, self.patch_size_2d
            )));
        }
        if !(self.horizontal_fov_deg > 0.0 && self.horizontal_fov_deg < 180.0) {
            return Err(Error::Spec(format!("field of view {} out of range", self.horizontal_fov_deg)));
        }
        if self.objects >= u16::MAX as usize {
            return Err(Error::Spec(format!("too many objects ({})", self.objects)));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        let fx = 0.5 * self.width as f64 / (0.5 * self.horizontal_fov_deg.to_radians()).tan();
        CameraIntrinsics {
            fx,
            fy: fx,
            cx: 0.5 * self.width as f64,
            cy: 0.5 * self.height as f64,
            width: self.width,
            height: self.height,
        }
    }

    pub fn poses(&self) -> Vec<Pose> {
        let [lx, ly, _] = self.room;
        let center = [0.5 * lx, 0.5 * ly];
        let n = self.frames;
        match &self.trajectory {
            Trajectory::Explicit { poses } => poses.clone(),
            Trajectory::Orbit { radius, height } => (0..n)
                .map(|i| {
                    let a = TAU * i as f64 / n as f64;
                    Pose {
                        position: [center[0] + radius * a.cos(), center[1] + radius * a.sin(), *height],
                        target: [center[0], center[1], 1.0],
                    }
                })
                .collect(),
            Trajectory::Sweep => (0..n)
                .map(|i| {
                    let s = i as f64 / n as f64;
                    // speed varies by a factor of ~4 around the loop
                    let a = TAU * s + 0.75 * (TAU * s).sin();
                    let position = [
                        center[0] + 0.32 * lx * a.cos(),
                        center[1] + 0.32 * ly * a.sin(),
                        1.4 + 0.2 * (3.0 * a).sin(),
                    ];
                    let heading = a + PI + 1.1 * (2.0 * a).sin();
                    let pitch = -0.25 + 0.15 * (5.0 * a).cos();
                    let dir = [heading.cos() * pitch.cos(), heading.sin() * pitch.cos(), pitch.sin()];
                    Pose {
                        position,
                        target: [position[0] + dir[0], position[1] + dir[1], position[2] + dir[2]],
                    }
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub spec: SyntheticSceneSpec,
    /// Object `i` carries label `i + 1`.
    pub primitives: Vec<Primitive>,
    pub manifest: SceneManifest,
}

fn inside_room(p: [f64; 3], room: [f64; 3], margin: f64) -> bool {
    (0..3).all(|a| p[a] > margin && p[a] < room[a] - margin)
}

fn distance_to_box(p: [f64; 3], min: [f64; 3], max: [f64; 3]) -> f64 {
    let mut s = 0.0;
    for a in 0..3 {
        let d = (min[a] - p[a]).max(p[a] - max[a]).max(0.0);
        s += d * d;
    }
    s.sqrt()
}

fn boxes_overlap(a: ([f64; 3], [f64; 3]), b: ([f64; 3], [f64; 3]), gap: f64) -> bool {
    (0..3).all(|k| a.0[k] < b.1[k] + gap && b.0[k] < a.1[k] + gap)
}

fn random_primitive(rng: &mut ChaCha8Rng, room: [f64; 3]) -> Primitive {
    let m = 0.05;
    if rng.gen_bool(0.5) {
        let size = [rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.2f64).min(room[2] - 2.0 * m)];
        let x = rng.gen_range(m..(room[0] - size[0] - m).max(m + 1e-9));
        let y = rng.gen_range(m..(room[1] - size[1] - m).max(m + 1e-9));
        Primitive::Box {
            min: [x, y, 0.0],
            max: [x + size[0], y + size[1], size[2]],
        }
    } else {
        let r: f64 = rng.gen_range(0.15..0.5f64).min(0.5 * room[2] - m);
        let c = [
            rng.gen_range(r + m..(room[0] - r - m).max(r + m + 1e-9)),
            rng.gen_range(r + m..(room[1] - r - m).max(r + m + 1e-9)),
            rng.gen_range(r..(2.0f64).min(room[2] - r - m).max(r + 1e-9)),
        ];
        Primitive::Sphere { center: c, radius: r }
    }
}

impl SyntheticScene {
    /// Places `spec.objects` random primitives clear of each other and of the
    /// camera path.
    pub fn generate(spec: &SyntheticSceneSpec) -> Result<Self> {
        spec.validate()?;
        let poses = spec.poses();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut prims: Vec<Primitive> = Vec::with_capacity(spec.objects);
        for j in 0..spec.objects {
            let placed = (0..PLACEMENT_TRIES).find_map(|_| {
                let p = random_primitive(&mut rng, spec.room);
                let b = p.bounds();
                let clear = prims.iter().all(|q| !boxes_overlap(b, q.bounds(), 0.05))
                    && poses.iter().all(|c| distance_to_box(c.position, b.0, b.1) > CLEARANCE);
                clear.then_some(p)
            });
            match placed {
                Some(p) => prims.push(p),
                None => return Err(Error::Spec(format!("could not place object {} of {}", j + 1, spec.objects))),
            }
        }
        Self::with_primitives(spec, prims)
    }

    pub fn with_primitives(spec: &SyntheticSceneSpec, primitives: Vec<Primitive>) -> Result<Self> {
        spec.validate()?;
        let poses = spec.poses();
        if poses.is_empty() {
            return Err(Error::Spec("trajectory has no poses".into()));
        }
        let intrinsics = spec.intrinsics();
        let mut frames = Vec::with_capacity(poses.len());
        for (i, pose) in poses.iter().enumerate() {
            if !inside_room(pose.position, spec.room, 0.0) {
                return Err(Error::Spec(format!("camera {i} at {:?} is outside the room", pose.position)));
            }
            if let Some(j) = primitives.iter().position(|p| {
                let (lo, hi) = p.bounds();
                distance_to_box(pose.position, lo, hi) == 0.0
            }) {
                return Err(Error::Spec(format!("camera {i} is inside object {}", j + 1)));
            }
            let extrinsics = CameraExtrinsics::look_at(pose.position, pose.target)
                .ok_or_else(|| Error::Spec(format!("camera {i} has a degenerate viewing direction")))?;
            frames.push(Frame {
                frame_id: i as u32,
                intrinsics,
                extrinsics,
                depth_ref: Some(format!("depth/{i:04}.rgd")),
                seg_ref: Some(format!("seg/{i:04}.rgs")),
                feat2d_ref: None,
                feat3d_ref: None,
            });
        }
        let manifest = SceneManifest {
            frames,
            patch_size_2d: spec.patch_size_2d,
            patch_size_3d: spec.patch_size_3d,
        };
        Ok(SyntheticScene {
            spec: spec.clone(),
            primitives,
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.frames.is_empty()
    }

    /// Z-depth and label seen along the ray through pixel center `(u, v)`.
    pub fn cast(&self, frame: usize, u: u32, v: u32) -> (f64, u16) {
        let f = &self.manifest.frames[frame];
        let k = &f.intrinsics;
        // camera-frame direction with unit z, so the ray parameter is z-depth
        let d_cam = [(u as f64 + 0.5 - k.cx) / k.fx, (v as f64 + 0.5 - k.cy) / k.fy, 1.0];
        self.cast_ray(f.extrinsics.center(), f.extrinsics.direction_to_world(d_cam))
    }

    fn cast_ray(&self, o: [f64; 3], d: [f64; 3]) -> (f64, u16) {
        let mut best = f64::INFINITY;
        for a in 0..3 {
            let t = if d[a] > 0.0 {
                (self.spec.room[a] - o[a]) / d[a]
            } else if d[a] < 0.0 {
                -o[a] / d[a]
            } else {
                f64::INFINITY
            };
            best = best.min(t);
        }
        let mut label = BACKGROUND_LABEL;
        for (j, p) in self.primitives.iter().enumerate() {
            if let Some(t) = p.intersect(o, d) {
                if t < best {
                    best = t;
                    label = j as u16 + 1;
                }
            }
        }
        (best, label)
    }

    pub fn render(&self, frame: usize) -> (DepthMap, SegmentationMap) {
        let (w, h) = (self.spec.width, self.spec.height);
        let rows = exec::map_range(h as usize, |v| {
            (0..w).map(|u| self.cast(frame, u, v as u32)).collect::<Vec<_>>()
        });
        let (depth, labels): (Vec<f64>, Vec<u16>) = rows.into_iter().flatten().unzip();
        (
            DepthMap { width: w, height: h, values: depth },
            SegmentationMap {
                width: w,
                height: h,
                labels,
                background_labels: BTreeSet::from([BACKGROUND_LABEL]),
            },
        )
    }

    pub fn depth(&self, frame: usize) -> DepthMap {
        self.render(frame).0
    }

    pub fn render_all(&self) -> (Vec<DepthMap>, Vec<SegmentationMap>) {
        (0..self.len()).map(|i| self.render(i)).unzip()
    }

    /// Seeded stand-ins for encoder outputs: 2D features on the
    /// `patch_size_2d` grid, 3D features on the `patch_size_3d` grid, and a
    /// projector mapping merged 3D blocks to the 2D feature width. Values are
    /// f32-representable so files reproduce them exactly.
    pub fn features(&self) -> (FeatureGrid, FeatureGrid, ProjectorWeights) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| f64::from(rng.gen_range(-1.0f32..1.0))).collect() };
        let s = &self.spec;
        let n = self.len();
        let (h2, w2) = ((s.height / s.patch_size_2d) as usize, (s.width / s.patch_size_2d) as usize);
        let (h3, w3) = ((s.height / s.patch_size_3d) as usize, (s.width / s.patch_size_3d) as usize);
        let f2d = FeatureGrid { n_frames: n, patches_h: h2, patches_w: w2, dim: FEAT_DIM_2D, data: draw(n * h2 * w2 * FEAT_DIM_2D) };
        let f3d = FeatureGrid { n_frames: n, patches_h: h3, patches_w: w3, dim: FEAT_DIM_3D, data: draw(n * h3 * w3 * FEAT_DIM_3D) };
        let rows = 4 * FEAT_DIM_3D;
        let matrix = draw(rows * FEAT_DIM_2D).into_iter().map(|x| f64::from((x * 0.25) as f32)).collect();
        let bias = draw(FEAT_DIM_2D).into_iter().map(|x| f64::from((x * 0.1) as f32)).collect();
        let w = ProjectorWeights::new(rows, FEAT_DIM_2D, matrix, Some(bias)).expect("projector shape");
        (f2d, f3d, w)
    }

    /// Writes `scene.json`, `synthetic.json`, `depth/`, `seg/` and `feat/`
    /// (`2d.rgf`, `3d.rgf`, `projector.rgw`) under `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<SceneManifest> {
        for sub in ["depth", "seg", "feat"] {
            std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        let written = exec::map_range(self.len(), |i| -> Result<()> {
            let (depth, seg) = self.render(i);
            io::write_depth(&dir.join(format!("depth/{i:04}.rgd")), &depth)?;
            io::write_segmentation(&dir.join(format!("seg/{i:04}.rgs")), &seg)
        });
        written.into_iter().collect::<Result<Vec<()>>>()?;

        let (f2d, f3d, w) = self.features();
        io::write_features(&dir.join("feat/2d.rgf"), &f2d)?;
        io::write_features(&dir.join("feat/3d.rgf"), &f3d)?;
        io::write_projector(&dir.join("feat/projector.rgw"), &w)?;

        let mut manifest = self.manifest.clone();
        for f in &mut manifest.frames {
            f.feat2d_ref = Some("feat/2d.rgf".into());
            f.feat3d_ref = Some("feat/3d.rgf".into());
        }
        io::save_manifest(&dir.join("scene.json"), &manifest)?;
        io::write_json(&dir.join("synthetic.json"), self)?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::back_project;

    fn small_spec(seed: u64) -> SyntheticSceneSpec {
        SyntheticSceneSpec {
            frames: 6,
            width: 56,
            height: 28,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn empty_room_depth_is_wall_distance() {
        let spec = SyntheticSceneSpec { objects: 0, ..small_spec(1) };
        let scene = SyntheticScene::generate(&spec).unwrap();
        for i in 0..scene.len() {
            let (depth, seg) = scene.render(i);
            assert!(seg.labels.iter().all(|&l| l == 0));
            let f = &scene.manifest.frames[i];
            let c = f.extrinsics.center();
            for (p, &z) in depth.values.iter().enumerate() {
                let (u, v) = ((p % 56) as f64 + 0.5, (p / 56) as f64 + 0.5);
                let r = f.extrinsics.direction_to_world([(u - f.intrinsics.cx) / f.intrinsics.fx, (v - f.intrinsics.cy) / f.intrinsics.fy, 1.0]);
                // the hit lies on a wall plane and inside the room
                let hit = [c[0] + z * r[0], c[1] + z * r[1], c[2] + z * r[2]];
                let on_wall = (0..3).any(|a| hit[a].abs() < 1e-9 || (hit[a] - spec.room[a]).abs() < 1e-9);
                assert!(on_wall, "{hit:?}");
                assert!((0..3).all(|a| hit[a] > -1e-9 && hit[a] < spec.room[a] + 1e-9));
            }
        }
    }

    #[test]
    fn sphere_on_axis() {
        let room = [6.0, 6.0, 3.0];
        let spec = SyntheticSceneSpec {
            room,
            objects: 0,
            frames: 1,
            width: 56,
            height: 56,
            trajectory: Trajectory::Explicit {
                poses: vec![Pose { position: [0.5, 3.0, 1.5], target: [3.0, 3.0, 1.5] }],
            },
            ..Default::default()
        };
        let sphere = Primitive::Sphere { center: [3.0, 3.0, 1.5], radius: 1.0 };
        let mut scene = SyntheticScene::with_primitives(&spec, vec![sphere]).unwrap();
        // put pixel (20, 30)'s center on the optical axis
        for f in &mut scene.manifest.frames {
            f.intrinsics.cx = 20.5;
            f.intrinsics.cy = 30.5;
        }
        let (z, label) = scene.cast(0, 20, 30);
        assert_eq!(label, 1);
        assert!((z - 1.5).abs() <= 1e-9, "{z}");
    }

    #[test]
    fn labeled_pixels_lie_on_their_surfaces() {
        for seed in 0..5 {
            let scene = SyntheticScene::generate(&small_spec(seed)).unwrap();
            for i in 0..scene.len() {
                let (depth, seg) = scene.render(i);
                let f = &scene.manifest.frames[i];
                let cloud = back_project(&depth, &f.intrinsics, &f.extrinsics).unwrap();
                for (p, &label) in cloud.points.iter().zip(&seg.labels) {
                    if label == 0 {
                        continue;
                    }
                    let err = match scene.primitives[label as usize - 1] {
                        Primitive::Sphere { center, radius } => {
                            let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
                            ((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() - radius).abs()
                        }
                        Primitive::Box { min, max } => {
                            let outside = distance_to_box(*p, min, max);
                            let inside = (0..3).map(|a| (p[a] - min[a]).min(max[a] - p[a])).fold(f64::INFINITY, f64::min);
                            outside.max(inside.max(0.0))
                        }
                    };
                    assert!(err <= 1e-6, "seed {seed} frame {i} label {label}: {err}");
                }
            }
        }
    }

    #[test]
    fn generation_is_seeded() {
        let a = SyntheticScene::generate(&small_spec(7)).unwrap();
        let b = SyntheticScene::generate(&small_spec(7)).unwrap();
        let c = SyntheticScene::generate(&small_spec(8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.primitives, c.primitives);
        assert_eq!(a.render(3), b.render(3));
        assert_eq!(a.primitives.len(), 6);
    }

    #[test]
    fn objects_are_visible_somewhere() {
        let scene = SyntheticScene::generate(&SyntheticSceneSpec { frames: 16, ..small_spec(3) }).unwrap();
        let (_, segs) = scene.render_all();
        let seen: BTreeSet<u16> = segs.iter().flat_map(|s| s.labels.iter().copied()).collect();
        assert!(seen.len() >= 3, "{seen:?}");
    }

    #[test]
    fn camera_outside_room_rejected() {
        let spec = SyntheticSceneSpec {
            trajectory: Trajectory::Explicit {
                poses: vec![Pose { position: [7.0, 1.0, 1.0], target: [3.0, 2.0, 1.0] }],
            },
            frames: 1,
            ..small_spec(0)
        };
        assert!(matches!(SyntheticScene::generate(&spec), Err(Error::Spec(_))));
        let bad_patch = SyntheticSceneSpec { width: 50, ..small_spec(0) };
        assert!(matches!(SyntheticScene::generate(&bad_patch), Err(Error::Spec(_))));
    }

    #[test]
    fn manifest_is_valid() {
        let scene = SyntheticScene::generate(&small_spec(2)).unwrap();
        assert!(crate::scene::validate_scene(&scene.manifest, None).is_valid());
        let (f2d, f3d, w) = scene.features();
        assert_eq!(f2d.shape(), [6, 1, 2, FEAT_DIM_2D]);
        assert_eq!(f3d.shape(), [6, 2, 4, FEAT_DIM_3D]);
        assert_eq!(w.rows(), 4 * FEAT_DIM_3D);
    }
}
