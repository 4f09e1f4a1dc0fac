use serde::{Deserialize, Serialize};

use crate::exec;
use crate::scene::{CameraExtrinsics, CameraIntrinsics, PointCloud};

use super::projection::project_point_with;
use super::RenderConfig;

/// Marker for pixels no point covers.
pub const NO_WINNER: u32 = u32::MAX;

/// Per-pixel nearest depth and the id of the point that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityBuffer {
    pub width: u32,
    pub height: u32,
    /// `+inf` where no point landed.
    pub zbuf: Vec<f64>,
    /// [`NO_WINNER`] where no point landed.
    pub winner: Vec<u32>,
}

impl VisibilityBuffer {
    pub fn empty(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        VisibilityBuffer {
            width,
            height,
            zbuf: vec![f64::INFINITY; n],
            winner: vec![NO_WINNER; n],
        }
    }

    pub fn winner_at(&self, u: u32, v: u32) -> Option<u32> {
        let w = self.winner[v as usize * self.width as usize + u as usize];
        (w != NO_WINNER).then_some(w)
    }

    pub fn covered_pixels(&self) -> usize {
        self.winner.iter().filter(|&&w| w != NO_WINNER).count()
    }

    /// Depth test with the id tie-break: nearer wins, equal depth -> lower id.
    #[inline]
    fn stamp(&mut self, idx: usize, z: f64, id: u32) {
        let cur = self.zbuf[idx];
        if z < cur || (z == cur && id < self.winner[idx]) {
            self.zbuf[idx] = z;
            self.winner[idx] = id;
        }
    }
}

/// Ids of the points that won at least one pixel, sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisibilitySet {
    pub view_id: u32,
    pub visible: Vec<u32>,
}

impl VisibilitySet {
    pub fn new(view_id: u32, mut visible: Vec<u32>) -> Self {
        visible.sort_unstable();
        visible.dedup();
        VisibilitySet { view_id, visible }
    }

    pub fn len(&self) -> usize {
        self.visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visible.is_empty()
    }

    pub fn contains(&self, id: u32) -> bool {
        self.visible.binary_search(&id).is_ok()
    }
}

/// Pixel indices along one axis whose centers lie within `half` of `center`.
#[inline]
fn covered_span(center: f64, half: f64, extent: u32) -> (i64, i64) {
    // Widen by one pixel on each side, then apply the exact center predicate
    // so the span agrees with |c + 0.5 - center| <= half bit for bit.
    let mut lo = ((center - half - 0.5).floor() as i64 - 1).max(0);
    let mut hi = ((center + half - 0.5).ceil() as i64 + 1).min(extent as i64 - 1);
    while lo <= hi && ((lo as f64 + 0.5) - center).abs() > half {
        lo += 1;
    }
    while hi >= lo && ((hi as f64 + 0.5) - center).abs() > half {
        hi -= 1;
    }
    (lo, hi)
}

/// Splats every in-frustum point as a `d x d` pixel square and keeps, per
/// pixel, the point with the smallest camera depth.
///
/// A pixel is covered when its center lies inside the square. The result does
/// not depend on point order.
pub fn render_visibility(
    cloud: &PointCloud,
    intr: &CameraIntrinsics,
    extr: &CameraExtrinsics,
    cfg: &RenderConfig,
) -> VisibilityBuffer {
    let mut buf = VisibilityBuffer::empty(intr.width, intr.height);
    let half = cfg.splat_side_d / 2.0;
    let w = intr.width as usize;
    for (id, p) in cloud.points.iter().enumerate() {
        let Some(pr) = project_point_with(*p, intr, extr, cfg.near_epsilon) else {
            continue;
        };
        let (u0, u1) = covered_span(pr.u, half, intr.width);
        let (v0, v1) = covered_span(pr.v, half, intr.height);
        for v in v0..=v1 {
            let row = v as usize * w;
            for u in u0..=u1 {
                buf.stamp(row + u as usize, pr.z, id as u32);
            }
        }
    }
    buf
}

/// Renders `cloud` into every camera, one view per task.
pub fn render_views(
    cloud: &PointCloud,
    cameras: &[(CameraIntrinsics, CameraExtrinsics)],
    cfg: &RenderConfig,
) -> Vec<VisibilityBuffer> {
    exec::map_slice(cameras, |(k, e)| render_visibility(cloud, k, e, cfg))
}

pub fn visible_set(buf: &VisibilityBuffer, view_id: u32) -> VisibilitySet {
    let ids = buf.winner.iter().copied().filter(|&w| w != NO_WINNER).collect();
    VisibilitySet::new(view_id, ids)
}
