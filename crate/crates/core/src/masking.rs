//! Geometry masks over the fused-token patch grid.
//!
//! A [`PatchMask`] bit is 1 where a patch keeps its 3D geometry features and 0
//! where they are withheld. Object-level masking withholds an object's patches
//! in every view except the one where it overlaps the most patches;
//! frame-level masking withholds whole views.
//!
//! Randomness comes from a single [`MaskRng`]. When both masks are drawn from
//! one generator, object draws come first, then frame draws.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::rng::MaskRng;
use crate::scene::SegmentationMap;

pub const DEFAULT_MIN_PIXELS: u64 = 64;
pub const DEFAULT_NUM_OBJECTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    pub n_frames: usize,
    pub patches_h: usize,
    pub patches_w: usize,
    bits: Vec<bool>,
}

impl PatchMask {
    pub fn all_ones(n_frames: usize, patches_h: usize, patches_w: usize) -> Self {
        PatchMask {
            n_frames,
            patches_h,
            patches_w,
            bits: vec![true; n_frames * patches_h * patches_w],
        }
    }

    pub fn from_bits(n_frames: usize, patches_h: usize, patches_w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != n_frames * patches_h * patches_w {
            return Err(Error::Dimension(format!(
                "mask {n_frames}x{patches_h}x{patches_w} given {} bits",
                bits.len()
            )));
        }
        Ok(PatchMask {
            n_frames,
            patches_h,
            patches_w,
            bits,
        })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn index(&self, frame: usize, row: usize, col: usize) -> usize {
        (frame * self.patches_h + row) * self.patches_w + col
    }

    pub fn get(&self, frame: usize, row: usize, col: usize) -> bool {
        self.bits[self.index(frame, row, col)]
    }

    pub fn clear(&mut self, frame: usize, row: usize, col: usize) {
        let i = self.index(frame, row, col);
        self.bits[i] = false;
    }

    /// Number of masked (zero) patches.
    pub fn masked_count(&self) -> usize {
        self.bits.iter().filter(|b| !**b).count()
    }

    /// `(frame, row, col)` of every zero bit.
    pub fn masked_patches(&self) -> BTreeSet<(usize, usize, usize)> {
        let per_frame = self.patches_h * self.patches_w;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| !**b)
            .map(|(i, _)| (i / per_frame, (i % per_frame) / self.patches_w, i % self.patches_w))
            .collect()
    }

    /// Copy with every patch of the given views masked.
    pub fn with_frames_masked(&self, frames: &FrameMask) -> Result<Self> {
        let mut out = self.clone();
        let per_frame = self.patches_h * self.patches_w;
        for &f in &frames.masked_views {
            if f >= self.n_frames {
                return Err(Error::Dimension(format!("frame {f} outside mask of {} frames", self.n_frames)));
            }
            out.bits[f * per_frame..(f + 1) * per_frame].fill(false);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameMask {
    pub n_frames: usize,
    /// Sorted view indices whose geometry features are withheld.
    pub masked_views: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectView {
    pub frame: usize,
    /// `(row, col)` of every patch containing at least one object pixel.
    pub patches: Vec<(u32, u32)>,
    pub overlap: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub object_id: u16,
    /// Views containing the object, ascending by frame.
    pub views: Vec<ObjectView>,
    pub kept_view: usize,
    /// Further retained views, only used by [`KeepPolicy::RandomViews`].
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub also_kept: Vec<usize>,
}

impl ObjectRecord {
    pub fn is_kept(&self, frame: usize) -> bool {
        self.kept_view == frame || self.also_kept.contains(&frame)
    }

    /// Patches this object masks: its overlap sets outside the kept views.
    pub fn masked_patches(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.views
            .iter()
            .filter(|v| !self.is_kept(v.frame))
            .flat_map(|v| v.patches.iter().map(move |&(r, c)| (v.frame, r as usize, c as usize)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeepPolicy {
    /// Keep only the view with the most overlapping patches (lowest frame on ties).
    BestOverlap,
    /// Keep `m` views drawn at random (at most one fewer than the object's views).
    RandomViews(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectMaskConfig {
    pub num_objects: usize,
    pub background_labels: BTreeSet<u16>,
    pub min_pixels: u64,
    pub keep: KeepPolicy,
}

impl Default for ObjectMaskConfig {
    fn default() -> Self {
        ObjectMaskConfig {
            num_objects: DEFAULT_NUM_OBJECTS,
            background_labels: BTreeSet::from([0]),
            min_pixels: DEFAULT_MIN_PIXELS,
            keep: KeepPolicy::BestOverlap,
        }
    }
}

/// Foreground instance ids with at least `min_pixels` pixels over all frames,
/// largest first (ties by ascending id).
pub fn salient_objects(segs: &[SegmentationMap], background: &BTreeSet<u16>, min_pixels: u64) -> Vec<u16> {
    let per_frame = exec::map_slice(segs, |s| {
        let mut h = vec![0u64; 1 << 16];
        for &l in &s.labels {
            h[l as usize] += 1;
        }
        h
    });
    let mut total = vec![0u64; 1 << 16];
    for h in per_frame {
        for (t, c) in total.iter_mut().zip(h) {
            *t += c;
        }
    }
    let mut ids: Vec<(u64, u16)> = total
        .iter()
        .enumerate()
        .filter(|&(l, &c)| c > 0 && c >= min_pixels && !background.contains(&(l as u16)))
        .map(|(l, &c)| (c, l as u16))
        .collect();
    ids.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    ids.into_iter().map(|(_, l)| l).collect()
}

/// Patches of `seg` containing at least one pixel labeled `object_id`.
pub fn object_patch_overlap(seg: &SegmentationMap, object_id: u16, patch_size: u32) -> Result<BTreeSet<(u32, u32)>> {
    check_divisible(seg, patch_size)?;
    let mut out = BTreeSet::new();
    for v in 0..seg.height {
        for u in 0..seg.width {
            if seg.get(u, v) == object_id {
                out.insert((v / patch_size, u / patch_size));
            }
        }
    }
    Ok(out)
}

fn check_divisible(seg: &SegmentationMap, patch_size: u32) -> Result<()> {
    if patch_size == 0 || seg.width % patch_size != 0 || seg.height % patch_size != 0 {
        return Err(Error::Param(format!(
            "segmentation {}x{} not divisible by patch size {patch_size}",
            seg.width, seg.height
        )));
    }
    Ok(())
}

/// Label -> sorted patch list for one frame.
fn label_patches(seg: &SegmentationMap, patch_size: u32) -> BTreeMap<u16, Vec<(u32, u32)>> {
    let (ph, pw) = (seg.height / patch_size, seg.width / patch_size);
    let mut out: BTreeMap<u16, Vec<(u32, u32)>> = BTreeMap::new();
    let mut seen = Vec::new();
    for r in 0..ph {
        for c in 0..pw {
            seen.clear();
            for v in r * patch_size..(r + 1) * patch_size {
                for u in c * patch_size..(c + 1) * patch_size {
                    let l = seg.get(u, v);
                    if !seen.contains(&l) {
                        seen.push(l);
                    }
                }
            }
            for &l in &seen {
                out.entry(l).or_default().push((r, c));
            }
        }
    }
    out
}

/// Object-level geometry mask.
///
/// Objects are drawn uniformly without replacement from [`salient_objects`].
/// An object seen in fewer than two views is skipped and the next draw takes
/// its place. For each accepted object the kept view(s) follow
/// `cfg.keep`; its overlapping patches in every other view are cleared.
pub fn object_level_mask(
    segs: &[SegmentationMap],
    patch_size: u32,
    cfg: &ObjectMaskConfig,
    rng: &mut MaskRng,
) -> Result<(PatchMask, Vec<ObjectRecord>)> {
    let first = segs.first().ok_or_else(|| Error::Input("no segmentation maps".into()))?;
    for s in segs {
        check_divisible(s, patch_size)?;
        if (s.width, s.height) != (first.width, first.height) {
            return Err(Error::Dimension(format!(
                "segmentation maps differ in size: {}x{} vs {}x{}",
                s.width, s.height, first.width, first.height
            )));
        }
    }
    let (ph, pw) = ((first.height / patch_size) as usize, (first.width / patch_size) as usize);
    let mut mask = PatchMask::all_ones(segs.len(), ph, pw);
    let mut records = Vec::new();

    let salient = salient_objects(segs, &cfg.background_labels, cfg.min_pixels);
    if cfg.num_objects == 0 || salient.is_empty() {
        return Ok((mask, records));
    }
    let overlaps = exec::map_slice(segs, |s| label_patches(s, patch_size));

    // partial Fisher-Yates, drawn one object at a time
    let mut pool: Vec<usize> = (0..salient.len()).collect();
    let mut next = 0;
    while records.len() < cfg.num_objects && next < pool.len() {
        let j = next + rng.below((pool.len() - next) as u64) as usize;
        pool.swap(next, j);
        let object_id = salient[pool[next]];
        next += 1;

        let views: Vec<ObjectView> = overlaps
            .iter()
            .enumerate()
            .filter_map(|(frame, o)| {
                o.get(&object_id).map(|p| ObjectView {
                    frame,
                    patches: p.clone(),
                    overlap: p.len(),
                })
            })
            .collect();
        if views.len() < 2 {
            continue;
        }

        let (kept_view, also_kept) = match cfg.keep {
            KeepPolicy::BestOverlap => {
                let mut best = &views[0];
                for v in &views[1..] {
                    if v.overlap > best.overlap {
                        best = v;
                    }
                }
                (best.frame, Vec::new())
            }
            KeepPolicy::RandomViews(m) => {
                let m = m.clamp(1, views.len() - 1);
                let picks = rng.sample(views.len(), m);
                let mut rest: Vec<usize> = picks[1..].iter().map(|&i| views[i].frame).collect();
                rest.sort_unstable();
                (views[picks[0]].frame, rest)
            }
        };
        let record = ObjectRecord {
            object_id,
            views,
            kept_view,
            also_kept,
        };
        for (f, r, c) in record.masked_patches() {
            mask.clear(f, r, c);
        }
        records.push(record);
    }
    Ok((mask, records))
}

/// Picks `k_masked` of `n_frames` views uniformly without replacement.
pub fn frame_level_mask(n_frames: usize, k_masked: usize, rng: &mut MaskRng) -> Result<FrameMask> {
    if k_masked >= n_frames {
        return Err(Error::Param(format!(
            "frame mask needs k < n, got k={k_masked}, n={n_frames}"
        )));
    }
    let mut masked_views = rng.sample(n_frames, k_masked);
    masked_views.sort_unstable();
    Ok(FrameMask { n_frames, masked_views })
}
