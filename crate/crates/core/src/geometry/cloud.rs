use std::collections::hash_map::Entry;

use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::scene::PointCloud;

/// Concatenates clouds in input order; ids are renumbered contiguously.
pub fn merge_point_clouds(clouds: &[PointCloud]) -> PointCloud {
    let n = clouds.iter().map(PointCloud::len).sum();
    let mut points = Vec::with_capacity(n);
    for c in clouds {
        points.extend_from_slice(&c.points);
    }
    PointCloud::new(points)
}

/// Replaces the points of every occupied voxel by their centroid.
///
/// Cell index is `floor(coord / voxel_size)` per axis. Output is sorted by
/// cell index, lexicographically over `(x, y, z)`.
pub fn voxel_downsample(cloud: &PointCloud, voxel_size: f64) -> Result<PointCloud> {
    let mut acc = VoxelAccumulator::new(voxel_size)?;
    acc.extend(&cloud.points);
    Ok(acc.finish())
}

/// Streaming form of [`voxel_downsample`].
///
/// Feeding the points of several clouds in order gives exactly (bit for bit)
/// `voxel_downsample(merge_point_clouds(clouds))` without materializing the
/// merged cloud.
#[derive(Debug, Clone)]
pub struct VoxelAccumulator {
    voxel_size: f64,
    index: FxHashMap<[i64; 3], u32>,
    cells: Vec<([i64; 3], [f64; 3], u64)>,
    last: Option<([i64; 3], u32)>,
}

impl VoxelAccumulator {
    pub fn new(voxel_size: f64) -> Result<Self> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::Param(format!("voxel size must be > 0, got {voxel_size}")));
        }
        Ok(VoxelAccumulator {
            voxel_size,
            index: FxHashMap::default(),
            cells: Vec::new(),
            last: None,
        })
    }

    #[inline]
    pub fn cell_of(&self, p: [f64; 3]) -> [i64; 3] {
        [
            (p[0] / self.voxel_size).floor() as i64,
            (p[1] / self.voxel_size).floor() as i64,
            (p[2] / self.voxel_size).floor() as i64,
        ]
    }

    #[inline]
    pub fn push(&mut self, p: [f64; 3]) {
        let key = self.cell_of(p);
        // neighbouring pixels usually land in the same cell
        let slot = match self.last {
            Some((k, s)) if k == key => s,
            _ => {
                let next = self.cells.len() as u32;
                let s = match self.index.entry(key) {
                    Entry::Occupied(e) => *e.get(),
                    Entry::Vacant(e) => {
                        e.insert(next);
                        self.cells.push((key, [0.0; 3], 0));
                        next
                    }
                };
                self.last = Some((key, s));
                s
            }
        };
        let cell = &mut self.cells[slot as usize];
        cell.1[0] += p[0];
        cell.1[1] += p[1];
        cell.1[2] += p[2];
        cell.2 += 1;
    }

    pub fn extend(&mut self, points: &[[f64; 3]]) {
        for &p in points {
            self.push(p);
        }
    }

    pub fn occupied(&self) -> usize {
        self.cells.len()
    }

    pub fn finish(mut self) -> PointCloud {
        self.cells.sort_unstable_by_key(|c| c.0);
        let points = self
            .cells
            .iter()
            .map(|(_, s, n)| {
                let n = *n as f64;
                [s[0] / n, s[1] / n, s[2] / n]
            })
            .collect();
        PointCloud::new(points)
    }
}
