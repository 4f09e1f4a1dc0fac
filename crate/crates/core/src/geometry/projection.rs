use crate::error::{Error, Result};
use crate::scene::{CameraExtrinsics, CameraIntrinsics, DepthMap, PointCloud};

use super::DEFAULT_NEAR_EPSILON;

/// A point projected into an image: continuous pixel coordinates plus camera depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub z: f64,
}

/// Projects a world point, culling anything at or behind [`DEFAULT_NEAR_EPSILON`]
/// or outside the image.
pub fn project_point(p: [f64; 3], intr: &CameraIntrinsics, extr: &CameraExtrinsics) -> Option<Projection> {
    project_point_with(p, intr, extr, DEFAULT_NEAR_EPSILON)
}

#[inline]
pub fn project_point_with(
    p: [f64; 3],
    intr: &CameraIntrinsics,
    extr: &CameraExtrinsics,
    near_epsilon: f64,
) -> Option<Projection> {
    let [x, y, z] = extr.to_camera(p);
    if !(z > near_epsilon) {
        return None;
    }
    let u = intr.fx * x / z + intr.cx;
    let v = intr.fy * y / z + intr.cy;
    let inside = u >= 0.0 && u < intr.width as f64 && v >= 0.0 && v < intr.height as f64;
    inside.then_some(Projection { u, v, z })
}

/// One world point per valid pixel, placed on the ray through the pixel center.
pub fn back_project(depth: &DepthMap, intr: &CameraIntrinsics, extr: &CameraExtrinsics) -> Result<PointCloud> {
    let mut points = Vec::with_capacity(depth.valid_count());
    back_project_into(depth, intr, extr, &mut points)?;
    Ok(PointCloud::new(points))
}

/// Appends the back-projected points of `depth` to `out`, row-major.
pub fn back_project_into(
    depth: &DepthMap,
    intr: &CameraIntrinsics,
    extr: &CameraExtrinsics,
    out: &mut Vec<[f64; 3]>,
) -> Result<()> {
    if depth.width != intr.width || depth.height != intr.height {
        return Err(Error::Dimension(format!(
            "depth map {}x{} does not match camera {}x{}",
            depth.width, depth.height, intr.width, intr.height
        )));
    }
    let r = &extr.rotation;
    let t = extr.translation;
    // Rᵀ t, subtracted after rotating each camera point back.
    let rt = [
        r[0][0] * t[0] + r[1][0] * t[1] + r[2][0] * t[2],
        r[0][1] * t[0] + r[1][1] * t[1] + r[2][1] * t[2],
        r[0][2] * t[0] + r[1][2] * t[1] + r[2][2] * t[2],
    ];
    let w = depth.width as usize;
    for (i, &z) in depth.values.iter().enumerate() {
        if !z.is_finite() {
            continue;
        }
        let (u, v) = ((i % w) as f64, (i / w) as f64);
        let xc = (u + 0.5 - intr.cx) * z / intr.fx;
        let yc = (v + 0.5 - intr.cy) * z / intr.fy;
        out.push([
            r[0][0] * xc + r[1][0] * yc + r[2][0] * z - rt[0],
            r[0][1] * xc + r[1][1] * yc + r[2][1] * z - rt[1],
            r[0][2] * xc + r[1][2] * yc + r[2][2] * z - rt[2],
        ]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::CameraExtrinsics;
    use nalgebra::{Matrix3, Matrix3x4, Rotation3, Vector3, Vector4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr(w: u32, h: u32) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 50.0,
            cy: 50.0,
            width: w,
            height: h,
        }
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> CameraExtrinsics {
        let rot = Rotation3::from_euler_angles(
            rng.gen_range(-3.1..3.1),
            rng.gen_range(-1.5..1.5),
            rng.gen_range(-3.1..3.1),
        );
        let m = rot.matrix();
        CameraExtrinsics {
            rotation: [
                [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
                [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
                [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
            ],
            translation: [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
        }
    }

    /// Homogeneous `K [R|t] X` followed by the perspective divide.
    fn homogeneous_oracle(p: [f64; 3], k: &CameraIntrinsics, e: &CameraExtrinsics) -> (f64, f64, f64) {
        let kmat = Matrix3::new(k.fx, 0.0, k.cx, 0.0, k.fy, k.cy, 0.0, 0.0, 1.0);
        let r = &e.rotation;
        let rt = Matrix3x4::new(
            r[0][0], r[0][1], r[0][2], e.translation[0],
            r[1][0], r[1][1], r[1][2], e.translation[1],
            r[2][0], r[2][1], r[2][2], e.translation[2],
        );
        let x: Vector3<f64> = kmat * rt * Vector4::new(p[0], p[1], p[2], 1.0);
        (x[0] / x[2], x[1] / x[2], x[2])
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let p = project_point([0.0, 0.0, 1.0], &intr(100, 100), &CameraExtrinsics::identity()).unwrap();
        assert_eq!((p.u, p.v, p.z), (50.0, 50.0, 1.0));
    }

    #[test]
    fn behind_camera_and_out_of_frame_are_culled() {
        let e = CameraExtrinsics::identity();
        assert!(project_point([0.0, 0.0, -1.0], &intr(100, 100), &e).is_none());
        assert!(project_point([0.0, 0.0, 0.0], &intr(100, 100), &e).is_none());
        assert!(project_point([1.0, 0.0, 1.0], &intr(100, 100), &e).is_none());
        // u = 100 is outside [0, 100)
        assert!(project_point([0.5, 0.0, 1.0], &intr(100, 100), &e).is_none());
        assert!(project_point([-0.5, 0.0, 1.0], &intr(100, 100), &e).is_some());
    }

    #[test]
    fn matches_homogeneous_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = CameraIntrinsics {
            fx: 320.0,
            fy: 300.0,
            cx: 160.5,
            cy: 120.25,
            width: 320,
            height: 240,
        };
        let mut checked = 0;
        while checked < 2000 {
            let e = random_pose(&mut rng);
            let p = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let (ou, ov, oz) = homogeneous_oracle(p, &k, &e);
            match project_point(p, &k, &e) {
                Some(pr) => {
                    checked += 1;
                    for (a, b) in [(pr.u, ou), (pr.v, ov), (pr.z, oz)] {
                        assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
                    }
                }
                None => {
                    let inside = oz > DEFAULT_NEAR_EPSILON && (0.0..320.0).contains(&ou) && (0.0..240.0).contains(&ov);
                    // only boundary cases may disagree
                    assert!(!inside || ou.abs() < 1e-6 || ov.abs() < 1e-6, "oracle says visible: {ou} {ov} {oz}");
                }
            }
        }
    }

    #[test]
    fn constant_depth_identity_pose() {
        let d = DepthMap::filled(8, 6, 1.0);
        let k = CameraIntrinsics { fx: 10.0, fy: 10.0, cx: 4.0, cy: 3.0, width: 8, height: 6 };
        let cloud = back_project(&d, &k, &CameraExtrinsics::identity()).unwrap();
        assert_eq!(cloud.len(), 48);
        assert!(cloud.points.iter().all(|p| p[2] == 1.0));
        assert_eq!(cloud.points[0], [-0.35, -0.25, 1.0]);
    }

    #[test]
    fn invalid_pixels_are_skipped_and_dims_checked() {
        let mut d = DepthMap::filled(4, 4, 2.0);
        d.values[5] = f64::NAN;
        let k = CameraIntrinsics { fx: 4.0, fy: 4.0, cx: 2.0, cy: 2.0, width: 4, height: 4 };
        assert_eq!(back_project(&d, &k, &CameraExtrinsics::identity()).unwrap().len(), 15);
        let k2 = CameraIntrinsics { width: 5, ..k };
        assert!(matches!(back_project(&d, &k2, &CameraExtrinsics::identity()), Err(Error::Dimension(_))));
    }

    #[test]
    fn round_trip_recovers_pixel_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = CameraIntrinsics { fx: 60.0, fy: 55.0, cx: 31.0, cy: 23.5, width: 64, height: 48 };
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let e = random_pose(&mut rng);
            let vals = (0..64 * 48).map(|_| rng.gen_range(0.2..20.0)).collect();
            let d = DepthMap::new(64, 48, vals).unwrap();
            let cloud = back_project(&d, &k, &e).unwrap();
            for (i, p) in cloud.points.iter().enumerate() {
                let pr = project_point(*p, &k, &e).expect("pixel center reprojects in frame");
                let (u, v) = ((i % 64) as f64 + 0.5, (i / 64) as f64 + 0.5);
                worst = worst.max((pr.u - u).abs()).max((pr.v - v).abs());
                assert!((pr.z - d.values[i]).abs() <= 1e-6);
            }
        }
        assert!(worst <= 1e-6, "worst pixel error {worst}");
    }

    #[test]
    fn back_projection_matches_scalar_algebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = CameraIntrinsics { fx: 40.0, fy: 42.0, cx: 15.0, cy: 11.0, width: 32, height: 24 };
        let e = random_pose(&mut rng);
        let vals = (0..32 * 24).map(|_| rng.gen_range(0.5..5.0)).collect();
        let d = DepthMap::new(32, 24, vals).unwrap();
        let cloud = back_project(&d, &k, &e).unwrap();
        // Oracle: solve R p = p_cam - t with nalgebra's inverse.
        let r = &e.rotation;
        let rm = Matrix3::new(r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2]);
        let inv = rm.try_inverse().unwrap();
        let t = Vector3::new(e.translation[0], e.translation[1], e.translation[2]);
        for (i, p) in cloud.points.iter().enumerate() {
            let (u, v) = ((i % 32) as f64, (i / 32) as f64);
            let z = d.values[i];
            let pc = Vector3::new((u + 0.5 - 15.0) / 40.0 * z, (v + 0.5 - 11.0) / 42.0 * z, z);
            let pw = inv * (pc - t);
            for a in 0..3 {
                assert!((p[a] - pw[a]).abs() < 1e-9);
            }
        }
    }
}
