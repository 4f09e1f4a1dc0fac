//! Coverage-driven frame selection.
//!
//! Candidates are sampled uniformly from the sequence, their depth maps are
//! merged into one voxelized cloud, the cloud is z-buffered into every
//! candidate view, and a greedy maximum-coverage pass picks the views whose
//! visible points add the most not-yet-covered points.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::{back_project_into, render_visibility, visible_set, RenderConfig, VisibilitySet, VoxelAccumulator};
use crate::scene::{DepthMap, Frame, PointCloud, SceneManifest};

pub const DEFAULT_VOXEL_SIZE: f64 = 0.05;
/// Largest instance [`exhaustive_max_coverage`] will enumerate.
pub const EXHAUSTIVE_LIMIT: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Frames in the sequence (T).
    pub total_frames: usize,
    /// Uniformly sampled candidates (M).
    pub candidates: usize,
    /// Frames to select (K).
    pub select: usize,
    pub voxel_size: f64,
    pub render: RenderConfig,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(total_frames: usize, candidates: usize, select: usize) -> Self {
        SamplerConfig {
            total_frames,
            candidates,
            select,
            voxel_size: DEFAULT_VOXEL_SIZE,
            render: RenderConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.select == 0 {
            return Err(Error::Param("must select at least one frame".into()));
        }
        if self.select > self.candidates || self.candidates > self.total_frames {
            return Err(Error::Param(format!(
                "need select <= candidates <= total frames, got {} / {} / {}",
                self.select, self.candidates, self.total_frames
            )));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::Param(format!("voxel size must be > 0, got {}", self.voxel_size)));
        }
        self.render.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub candidate_ids: Vec<u32>,
    /// Frame ids in the order the greedy pass picked them.
    pub selected_ids: Vec<u32>,
    pub marginal_gains: Vec<u64>,
    pub total_points: u64,
    pub covered_points: u64,
    pub uniform_baseline_covered: u64,
    pub config: SamplerConfig,
}

/// `floor(i * total / count)` for `i in 0..count`.
pub fn uniform_sample(total: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > total {
        return Err(Error::Param(format!("cannot sample {count} of {total} frames")));
    }
    Ok((0..count).map(|i| (i as u128 * total as u128 / count as u128) as usize).collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GreedySelection {
    /// Indices into the input sets, in pick order.
    pub selected: Vec<usize>,
    pub gains: Vec<u64>,
}

impl GreedySelection {
    pub fn covered(&self) -> u64 {
        self.gains.iter().sum()
    }
}

/// Dense bitset over point ids.
#[derive(Debug, Clone)]
struct Bits(Vec<u64>);

impl Bits {
    fn new(universe: usize) -> Self {
        Bits(vec![0; universe.div_ceil(64)])
    }

    #[inline]
    fn get(&self, i: u32) -> bool {
        self.0[(i >> 6) as usize] >> (i & 63) & 1 == 1
    }

    #[inline]
    fn set(&mut self, i: u32) {
        self.0[(i >> 6) as usize] |= 1 << (i & 63);
    }
}

fn universe(sets: &[VisibilitySet]) -> usize {
    sets.iter()
        .filter_map(|s| s.visible.last())
        .map(|&m| m as usize + 1)
        .max()
        .unwrap_or(0)
}

/// Greedy maximum coverage.
///
/// Each round takes the unselected set with the most uncovered points, lowest
/// index on ties. When every remaining gain is zero the round instead takes
/// the set farthest (in index distance) from everything already selected,
/// again lowest index on ties.
pub fn greedy_max_coverage(sets: &[VisibilitySet], k: usize) -> Result<GreedySelection> {
    if k > sets.len() {
        return Err(Error::Param(format!("cannot select {k} of {} sets", sets.len())));
    }
    let mut covered = Bits::new(universe(sets));
    let mut taken = vec![false; sets.len()];
    let mut out = GreedySelection {
        selected: Vec::with_capacity(k),
        gains: Vec::with_capacity(k),
    };
    for _ in 0..k {
        let gains = exec::map_slice(sets, |s| s.visible.iter().filter(|&&p| !covered.get(p)).count() as u64);
        let mut best: Option<(usize, u64)> = None;
        for (i, &g) in gains.iter().enumerate() {
            if !taken[i] && g > 0 && best.is_none_or(|(_, bg)| g > bg) {
                best = Some((i, g));
            }
        }
        let (pick, gain) = best.unwrap_or_else(|| (farthest_unselected(&taken, &out.selected), 0));
        taken[pick] = true;
        for &p in &sets[pick].visible {
            covered.set(p);
        }
        out.selected.push(pick);
        out.gains.push(gain);
    }
    Ok(out)
}

fn farthest_unselected(taken: &[bool], selected: &[usize]) -> usize {
    let mut best = (0usize, usize::MAX);
    let mut found = false;
    for (i, _) in taken.iter().enumerate().filter(|(_, t)| !**t) {
        let dist = selected.iter().map(|&s| s.abs_diff(i)).min().unwrap_or(usize::MAX);
        if !found || dist > best.1 {
            best = (i, dist);
            found = true;
        }
    }
    best.0
}

/// Size of the union of the chosen sets.
pub fn union_size(sets: &[VisibilitySet], chosen: &[usize]) -> u64 {
    let mut bits = Bits::new(universe(sets));
    let mut n = 0;
    for &c in chosen {
        for &p in &sets[c].visible {
            if !bits.get(p) {
                bits.set(p);
                n += 1;
            }
        }
    }
    n
}

/// Exact maximum coverage by enumerating every `k`-subset.
///
/// Returns the lexicographically smallest optimal subset. Refuses instances
/// with more than [`EXHAUSTIVE_LIMIT`] sets.
pub fn exhaustive_max_coverage(sets: &[VisibilitySet], k: usize) -> Result<(Vec<usize>, u64)> {
    if sets.len() > EXHAUSTIVE_LIMIT {
        return Err(Error::Param(format!(
            "exhaustive search limited to {EXHAUSTIVE_LIMIT} sets, got {}",
            sets.len()
        )));
    }
    if k > sets.len() {
        return Err(Error::Param(format!("cannot select {k} of {} sets", sets.len())));
    }
    let words = universe(sets).div_ceil(64);
    let masks: Vec<Vec<u64>> = sets
        .iter()
        .map(|s| {
            let mut b = Bits(vec![0; words]);
            s.visible.iter().for_each(|&p| b.set(p));
            b.0
        })
        .collect();

    let mut combo: Vec<usize> = (0..k).collect();
    let mut best = (combo.clone(), 0u64);
    let mut first = true;
    let mut scratch = vec![0u64; words];
    loop {
        scratch.iter_mut().for_each(|w| *w = 0);
        for &c in &combo {
            for (s, m) in scratch.iter_mut().zip(&masks[c]) {
                *s |= m;
            }
        }
        let cov: u64 = scratch.iter().map(|w| w.count_ones() as u64).sum();
        if first || cov > best.1 {
            best = (combo.clone(), cov);
            first = false;
        }
        // next combination in lexicographic order
        let n = sets.len();
        let Some(i) = (0..k).rev().find(|&i| combo[i] != i + n - k) else {
            break;
        };
        combo[i] += 1;
        for j in i + 1..k {
            combo[j] = combo[j - 1] + 1;
        }
    }
    Ok(best)
}

/// Supplies the depth map of a manifest frame, by position.
pub trait DepthProvider: Sync {
    fn depth(&self, position: usize, frame: &Frame) -> Result<Cow<'_, DepthMap>>;
}

impl DepthProvider for [DepthMap] {
    fn depth(&self, position: usize, frame: &Frame) -> Result<Cow<'_, DepthMap>> {
        self.get(position)
            .map(Cow::Borrowed)
            .ok_or_else(|| Error::Input(format!("no depth map for frame {}", frame.frame_id)))
    }
}

impl DepthProvider for [Option<DepthMap>] {
    fn depth(&self, position: usize, frame: &Frame) -> Result<Cow<'_, DepthMap>> {
        self.get(position)
            .and_then(Option::as_ref)
            .map(Cow::Borrowed)
            .ok_or_else(|| Error::Input(format!("no depth map for frame {}", frame.frame_id)))
    }
}

/// Adapter for loader closures, e.g. reading depth files on demand.
pub struct DepthFn<F>(pub F);

impl<F> DepthProvider for DepthFn<F>
where
    F: Fn(usize, &Frame) -> Result<DepthMap> + Sync,
{
    fn depth(&self, position: usize, frame: &Frame) -> Result<Cow<'_, DepthMap>> {
        (self.0)(position, frame).map(Cow::Owned)
    }
}

/// Everything the pipeline computes on the way to a [`SelectionReport`].
#[derive(Debug, Clone)]
pub struct SamplingOutcome {
    pub report: SelectionReport,
    /// Manifest positions of the candidates.
    pub candidate_positions: Vec<usize>,
    /// Indices into the candidates of the uniform baseline.
    pub uniform_baseline: Vec<usize>,
    pub greedy: GreedySelection,
    pub cloud: PointCloud,
    /// One set per candidate, `view_id` = candidate index.
    pub visibility: Vec<VisibilitySet>,
}

pub fn adaptive_sample<D: DepthProvider + ?Sized>(
    manifest: &SceneManifest,
    depths: &D,
    cfg: &SamplerConfig,
) -> Result<SelectionReport> {
    adaptive_sample_detailed(manifest, depths, cfg).map(|o| o.report)
}

/// Builds the voxelized union of the candidates' back-projected depth maps,
/// streaming candidates in small batches so the full-resolution merged cloud
/// never sits in memory.
pub fn build_candidate_cloud<D: DepthProvider + ?Sized>(
    manifest: &SceneManifest,
    depths: &D,
    positions: &[usize],
    voxel_size: f64,
) -> Result<PointCloud> {
    let mut acc = VoxelAccumulator::new(voxel_size)?;
    let batch = 2 * exec::current_threads().max(1);
    for chunk in positions.chunks(batch) {
        let clouds = exec::map_slice(chunk, |&pos| -> Result<Vec<[f64; 3]>> {
            let frame = &manifest.frames[pos];
            let depth = depths.depth(pos, frame)?;
            let mut pts = Vec::with_capacity(depth.values.len());
            back_project_into(&depth, &frame.intrinsics, &frame.extrinsics, &mut pts)?;
            Ok(pts)
        });
        for pts in clouds {
            acc.extend(&pts?);
        }
    }
    Ok(acc.finish())
}

pub fn adaptive_sample_detailed<D: DepthProvider + ?Sized>(
    manifest: &SceneManifest,
    depths: &D,
    cfg: &SamplerConfig,
) -> Result<SamplingOutcome> {
    cfg.validate()?;
    if cfg.total_frames != manifest.frames.len() {
        return Err(Error::Param(format!(
            "config expects {} frames, manifest has {}",
            cfg.total_frames,
            manifest.frames.len()
        )));
    }
    let positions = uniform_sample(cfg.total_frames, cfg.candidates)?;
    let cloud = build_candidate_cloud(manifest, depths, &positions, cfg.voxel_size)?;

    let visibility = exec::map_range(positions.len(), |c| {
        let f = &manifest.frames[positions[c]];
        let buf = render_visibility(&cloud, &f.intrinsics, &f.extrinsics, &cfg.render);
        visible_set(&buf, c as u32)
    });

    let greedy = greedy_max_coverage(&visibility, cfg.select)?;
    let uniform_baseline = uniform_sample(cfg.candidates, cfg.select)?;
    let ids = |idx: &[usize]| -> Vec<u32> { idx.iter().map(|&c| manifest.frames[positions[c]].frame_id).collect() };

    let report = SelectionReport {
        candidate_ids: positions.iter().map(|&p| manifest.frames[p].frame_id).collect(),
        selected_ids: ids(&greedy.selected),
        marginal_gains: greedy.gains.clone(),
        total_points: cloud.len() as u64,
        covered_points: union_size(&visibility, &greedy.selected),
        uniform_baseline_covered: union_size(&visibility, &uniform_baseline),
        config: *cfg,
    };
    Ok(SamplingOutcome {
        report,
        candidate_positions: positions,
        uniform_baseline,
        greedy,
        cloud,
        visibility,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(id: u32, pts: &[u32]) -> VisibilitySet {
        VisibilitySet::new(id, pts.to_vec())
    }

    fn random_sets(rng: &mut ChaCha8Rng) -> Vec<VisibilitySet> {
        let n_sets = rng.gen_range(1..=8);
        let n_points = rng.gen_range(1..=50);
        (0..n_sets)
            .map(|i| {
                let density = rng.gen_range(0.05..0.6);
                let pts = (0..n_points).filter(|_| rng.gen_bool(density)).collect();
                VisibilitySet::new(i, pts)
            })
            .collect()
    }

    #[test]
    fn uniform_sample_formula() {
        assert_eq!(uniform_sample(8, 8).unwrap(), (0..8).collect::<Vec<_>>());
        assert_eq!(uniform_sample(10, 2).unwrap(), vec![0, 5]);
        assert_eq!(uniform_sample(128, 32).unwrap(), (0..32).map(|i| 4 * i).collect::<Vec<_>>());
        assert_eq!(uniform_sample(10, 3).unwrap(), vec![0, 3, 6]);
        assert!(uniform_sample(3, 4).is_err());
        assert!(uniform_sample(3, 0).is_err());
        for t in 1..60 {
            for m in 1..=t {
                let s = uniform_sample(t, m).unwrap();
                assert!(s.windows(2).all(|w| w[0] < w[1]));
                assert!(*s.last().unwrap() < t);
            }
        }
    }

    #[test]
    fn dominant_set_goes_first() {
        let sets = vec![set(0, &[1, 2]), set(1, &[0, 1, 2, 3, 4]), set(2, &[3])];
        let g = greedy_max_coverage(&sets, 3).unwrap();
        assert_eq!(g.selected[0], 1);
        assert_eq!(g.gains, vec![5, 0, 0]);
    }

    #[test]
    fn disjoint_sets_by_size() {
        let sets = vec![set(0, &[0, 1]), set(1, &[2, 3, 4, 5, 6]), set(2, &[7, 8, 9])];
        let g = greedy_max_coverage(&sets, 2).unwrap();
        assert_eq!(g.selected, vec![1, 2]);
        assert_eq!(g.gains, vec![5, 3]);
        assert!(greedy_max_coverage(&sets, 4).is_err());
    }

    #[test]
    fn ties_and_zero_gain_fallback() {
        let sets = vec![set(0, &[0, 1]), set(1, &[2, 3]), set(2, &[0]), set(3, &[]), set(4, &[1]), set(5, &[])];
        let g = greedy_max_coverage(&sets, 5).unwrap();
        // 0 and 1 tie on gain 2 -> lowest index; then 1; then all gains zero:
        // farthest from {0, 1} is 5, then from {0, 1, 5} it is 3
        assert_eq!(g.selected, vec![0, 1, 5, 3, 2]);
        assert_eq!(g.gains, vec![2, 2, 0, 0, 0]);

        let empty = vec![set(0, &[]), set(1, &[]), set(2, &[])];
        assert_eq!(greedy_max_coverage(&empty, 3).unwrap().selected, vec![0, 2, 1]);
    }

    #[test]
    fn exhaustive_edge_cases() {
        let same = vec![set(0, &[1, 2, 3]); 4];
        assert_eq!(exhaustive_max_coverage(&same, 2).unwrap(), (vec![0, 1], 3));
        let sets = vec![set(0, &[0, 1]), set(1, &[1, 2]), set(2, &[5])];
        assert_eq!(exhaustive_max_coverage(&sets, 3).unwrap().1, 4);
        assert_eq!(exhaustive_max_coverage(&sets, 0).unwrap(), (vec![], 0));
        let many = vec![set(0, &[1]); 21];
        assert!(exhaustive_max_coverage(&many, 2).is_err());
    }

    #[test]
    fn exhaustive_picks_lexicographically_smallest_optimum() {
        let sets = vec![set(0, &[0]), set(1, &[1, 2]), set(2, &[3, 4]), set(3, &[1, 2])];
        assert_eq!(exhaustive_max_coverage(&sets, 2).unwrap(), (vec![1, 2], 4));
    }

    #[test]
    fn greedy_guarantee_and_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let bound = 1.0 - (-1.0f64).exp();
        for _ in 0..300 {
            let sets = random_sets(&mut rng);
            let k = rng.gen_range(1..=sets.len().min(3));
            let g = greedy_max_coverage(&sets, k).unwrap();
            let (opt_sel, opt) = exhaustive_max_coverage(&sets, k).unwrap();
            assert_eq!(union_size(&sets, &opt_sel), opt);
            assert_eq!(g.covered(), union_size(&sets, &g.selected));
            assert!(g.covered() as f64 >= bound * opt as f64);
            assert!(opt >= g.covered());
            assert!(g.gains.windows(2).all(|w| w[0] >= w[1]));
            if k < sets.len() {
                let g2 = greedy_max_coverage(&sets, k + 1).unwrap();
                assert!(g2.covered() >= g.covered());
                assert_eq!(&g2.selected[..k], &g.selected[..]);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(SamplerConfig::new(128, 32, 8).validate().is_ok());
        assert!(SamplerConfig::new(128, 32, 32).validate().is_ok());
        assert!(SamplerConfig::new(128, 32, 0).validate().is_err());
        assert!(SamplerConfig::new(16, 32, 8).validate().is_err());
        let mut c = SamplerConfig::new(8, 4, 2);
        c.voxel_size = 0.0;
        assert!(c.validate().is_err());
    }
}
