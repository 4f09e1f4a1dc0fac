//! Token fusion and reconstruction losses.
//!
//! All reductions run in a fixed order (frame-major, then row-major over
//! patches or pixels), so results are bit-reproducible regardless of threads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{FrameMask, PatchMask};
use crate::scene::{DepthMap, FeatureGrid};

/// Affine map applied to each concatenated 2x2 block of 3D patch features.
///
/// `matrix` is `rows x cols` row-major with `rows = 4 * input dim`; the output
/// of a block `x` is `xᵀ M + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorWeights {
    rows: usize,
    cols: usize,
    matrix: Vec<f64>,
    bias: Option<Vec<f64>>,
}

impl ProjectorWeights {
    pub fn new(rows: usize, cols: usize, matrix: Vec<f64>, bias: Option<Vec<f64>>) -> Result<Self> {
        if matrix.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "projector {rows}x{cols} given {} values",
                matrix.len()
            )));
        }
        if rows % 4 != 0 {
            return Err(Error::Dimension(format!("projector rows ({rows}) must be 4 x input dim")));
        }
        if let Some(b) = &bias {
            if b.len() != cols {
                return Err(Error::Dimension(format!("bias has {} entries, expected {cols}", b.len())));
            }
        }
        if matrix.iter().chain(bias.iter().flatten()).any(|x| !x.is_finite()) {
            return Err(Error::Input("projector weights must be finite".into()));
        }
        Ok(ProjectorWeights { rows, cols, matrix, bias })
    }

    /// Identity on the concatenated block (`4 * dim` outputs), no bias.
    pub fn identity(dim: usize) -> Self {
        let n = 4 * dim;
        let mut matrix = vec![0.0; n * n];
        for i in 0..n {
            matrix[i * n + i] = 1.0;
        }
        ProjectorWeights { rows: n, cols: n, matrix, bias: None }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            beta: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Param(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_text: f64,
    pub l_object: f64,
    pub l_frame: f64,
    pub l_total: f64,
    pub g_masked_patches: u64,
    pub k_masked_frames: u64,
}

/// What masked tokens are asked to reconstruct.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// The complete multimodal token, 2D plus projected 3D features.
    #[default]
    Fused,
    /// The projected 3D geometry features alone.
    GeometryOnly,
}

/// Concatenates each 2x2 block of patches (top-left, top-right, bottom-left,
/// bottom-right) and applies the projector, halving both grid dims.
pub fn merge_patches_2x2(f3d: &FeatureGrid, w: &ProjectorWeights) -> Result<FeatureGrid> {
    if f3d.patches_h % 2 != 0 || f3d.patches_w % 2 != 0 {
        return Err(Error::Param(format!(
            "3D patch grid {}x{} must have even dims",
            f3d.patches_h, f3d.patches_w
        )));
    }
    if w.rows != 4 * f3d.dim {
        return Err(Error::Dimension(format!(
            "projector expects {} inputs, blocks have {}",
            w.rows,
            4 * f3d.dim
        )));
    }
    let (oh, ow) = (f3d.patches_h / 2, f3d.patches_w / 2);
    let mut out = FeatureGrid::zeros(f3d.n_frames, oh, ow, w.cols);
    let mut block = vec![0.0; w.rows];
    for n in 0..f3d.n_frames {
        for r in 0..oh {
            for c in 0..ow {
                for (q, (dr, dc)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                    let src = f3d.patch(f3d.patch_index(n, 2 * r + dr, 2 * c + dc));
                    block[q * f3d.dim..(q + 1) * f3d.dim].copy_from_slice(src);
                }
                let o = out.patch_index(n, r, c);
                let dst = out.patch_mut(o);
                match &w.bias {
                    Some(b) => dst.copy_from_slice(b),
                    None => dst.fill(0.0),
                }
                for (i, &x) in block.iter().enumerate() {
                    let row = &w.matrix[i * w.cols..(i + 1) * w.cols];
                    for (d, &m) in dst.iter_mut().zip(row) {
                        *d += x * m;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn check_same(a: &FeatureGrid, b: &FeatureGrid, what: &str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Param(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_mask(grid: &FeatureGrid, mask: &PatchMask) -> Result<()> {
    if (grid.n_frames, grid.patches_h, grid.patches_w) != (mask.n_frames, mask.patches_h, mask.patches_w) {
        return Err(Error::Param(format!(
            "mask {}x{}x{} does not match feature grid {:?}",
            mask.n_frames,
            mask.patches_h,
            mask.patches_w,
            grid.shape()
        )));
    }
    Ok(())
}

/// 2D features plus projected 3D features where the mask keeps geometry,
/// 2D features alone where it is masked.
pub fn fuse_tokens(f2d: &FeatureGrid, f3d_merged: &FeatureGrid, mask: &PatchMask) -> Result<FeatureGrid> {
    check_same(f2d, f3d_merged, "2D and merged 3D features differ")?;
    check_mask(f2d, mask)?;
    let mut out = f2d.clone();
    for (i, &keep) in mask.bits().iter().enumerate() {
        if keep {
            for (o, g) in out.patch_mut(i).iter_mut().zip(f3d_merged.patch(i)) {
                *o += g;
            }
        }
    }
    Ok(out)
}

/// Complete multimodal tokens, i.e. the fusion with nothing masked.
pub fn fusion_target(f2d: &FeatureGrid, f3d_merged: &FeatureGrid) -> Result<FeatureGrid> {
    check_same(f2d, f3d_merged, "2D and merged 3D features differ")?;
    let data = f2d.data.iter().zip(&f3d_merged.data).map(|(a, b)| a + b).collect();
    Ok(FeatureGrid { data, ..f2d.clone() })
}

pub fn reconstruction_target(f2d: &FeatureGrid, f3d_merged: &FeatureGrid, mode: TargetMode) -> Result<FeatureGrid> {
    match mode {
        TargetMode::Fused => fusion_target(f2d, f3d_merged),
        TargetMode::GeometryOnly => {
            check_same(f2d, f3d_merged, "2D and merged 3D features differ")?;
            Ok(f3d_merged.clone())
        }
    }
}

fn dot3(a: &[f64], b: &[f64], sa: f64, sb: f64) -> (f64, f64, f64) {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x * sa, y * sb);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    (ab, aa, bb)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Negative cosine similarity, in `[-1, 1]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let (ab, aa, bb) = dot3(a, b, 1.0, 1.0);
    if aa.is_normal() && bb.is_normal() && (aa * bb).is_normal() && ab.is_finite() {
        // sqrt(aa * bb) is exact for a == b, which makes identical vectors score -1
        return Ok((-(ab / (aa * bb).sqrt())).clamp(-1.0, 1.0));
    }
    let (ma, mb) = (max_abs(a), max_abs(b));
    if ma == 0.0 || mb == 0.0 {
        return Err(Error::Degenerate("zero-norm vector".into()));
    }
    let (ab, aa, bb) = dot3(a, b, 1.0 / ma, 1.0 / mb);
    // both scaled norms are >= 1, so the product cannot underflow
    Ok((-(ab / (aa * bb).sqrt())).clamp(-1.0, 1.0))
}

/// `alpha / G` times the summed cosine distance over the `G` masked patches.
pub fn object_recon_loss(targets: &FeatureGrid, recon: &FeatureGrid, mask: &PatchMask, alpha: f64) -> Result<f64> {
    check_same(targets, recon, "target and reconstruction differ")?;
    check_mask(targets, mask)?;
    let mut sum = 0.0;
    let mut g = 0u64;
    for (i, &keep) in mask.bits().iter().enumerate() {
        if keep {
            continue;
        }
        let d = cosine_distance(targets.patch(i), recon.patch(i)).map_err(|_| {
            let per = targets.patches_h * targets.patches_w;
            Error::Degenerate(format!(
                "zero-norm vector at patch (frame {}, row {}, col {})",
                i / per,
                (i % per) / targets.patches_w,
                i % targets.patches_w
            ))
        })?;
        sum += d;
        g += 1;
    }
    if g == 0 {
        return Ok(0.0);
    }
    Ok(alpha * (sum / g as f64))
}

/// Sum of squared depth error over valid pixels of one view.
pub fn depth_sq_error(gt: &DepthMap, pred: &DepthMap) -> Result<f64> {
    if (gt.width, gt.height) != (pred.width, pred.height) {
        return Err(Error::Dimension(format!(
            "depth maps {}x{} and {}x{}",
            gt.width, gt.height, pred.width, pred.height
        )));
    }
    Ok(gt
        .values
        .iter()
        .zip(&pred.values)
        .filter(|(a, b)| a.is_finite() && b.is_finite())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// `beta / K` times the per-view squared depth error, summed over the `K`
/// masked views. `gt[i]` / `pred[i]` belong to view `i`; pixels invalid in
/// either map are skipped.
pub fn frame_recon_loss(gt: &[Option<DepthMap>], pred: &[Option<DepthMap>], fmask: &FrameMask, beta: f64) -> Result<f64> {
    let k = fmask.masked_views.len();
    if k == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for &i in &fmask.masked_views {
        let g = gt
            .get(i)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Input(format!("missing ground-truth depth for masked view {i}")))?;
        let p = pred
            .get(i)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Input(format!("missing predicted depth for masked view {i}")))?;
        sum += depth_sq_error(g, p)?;
    }
    Ok(beta * (sum / k as f64))
}

pub fn total_loss(l_text: f64, l_object: f64, l_frame: f64, cfg: &LossConfig) -> Result<LossReport> {
    total_loss_with_counts(l_text, l_object, l_frame, cfg, 0, 0)
}

pub fn total_loss_with_counts(
    l_text: f64,
    l_object: f64,
    l_frame: f64,
    cfg: &LossConfig,
    g_masked_patches: u64,
    k_masked_frames: u64,
) -> Result<LossReport> {
    cfg.validate()?;
    for (name, v) in [("l_text", l_text), ("l_object", l_object), ("l_frame", l_frame)] {
        if !v.is_finite() {
            return Err(Error::Input(format!("{name} is not finite ({v})")));
        }
    }
    Ok(LossReport {
        l_text,
        l_object,
        l_frame,
        l_total: l_text + cfg.lambda1 * l_object + cfg.lambda2 * l_frame,
        g_masked_patches,
        k_masked_frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, d: usize) -> FeatureGrid {
        let data = (0..n * h * w * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureGrid::new(n, h, w, d, data).unwrap()
    }

    #[test]
    fn identity_projector_concatenates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_grid(&mut rng, 2, 4, 6, 3);
        let out = merge_patches_2x2(&g, &ProjectorWeights::identity(3)).unwrap();
        assert_eq!(out.shape(), [2, 2, 3, 12]);
        let p = out.patch(out.patch_index(1, 1, 2));
        assert_eq!(&p[0..3], g.patch(g.patch_index(1, 2, 4)));
        assert_eq!(&p[3..6], g.patch(g.patch_index(1, 2, 5)));
        assert_eq!(&p[6..9], g.patch(g.patch_index(1, 3, 4)));
        assert_eq!(&p[9..12], g.patch(g.patch_index(1, 3, 5)));
    }

    #[test]
    fn zero_features_give_bias() {
        let w = ProjectorWeights::new(8, 3, vec![0.7; 24], Some(vec![1.0, -2.0, 0.5])).unwrap();
        let out = merge_patches_2x2(&FeatureGrid::zeros(1, 2, 4, 2), &w).unwrap();
        for i in 0..out.patch_count() {
            assert_eq!(out.patch(i), &[1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn merge_rejects_bad_shapes() {
        let w = ProjectorWeights::identity(2);
        assert!(matches!(merge_patches_2x2(&FeatureGrid::zeros(1, 3, 4, 2), &w), Err(Error::Param(_))));
        assert!(matches!(merge_patches_2x2(&FeatureGrid::zeros(1, 2, 4, 3), &w), Err(Error::Dimension(_))));
    }

    #[test]
    fn merge_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let d = rng.gen_range(1..5);
            let dout = rng.gen_range(1..6);
            let (n, h, w) = (rng.gen_range(1..3), 2 * rng.gen_range(1..3), 2 * rng.gen_range(1..3));
            let g = random_grid(&mut rng, n, h, w, d);
            let m: Vec<f64> = (0..4 * d * dout).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..dout).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w = ProjectorWeights::new(4 * d, dout, m.clone(), Some(b.clone())).unwrap();
            let out = merge_patches_2x2(&g, &w).unwrap();
            for n in 0..g.n_frames {
                for r in 0..g.patches_h / 2 {
                    for c in 0..g.patches_w / 2 {
                        for k in 0..dout {
                            let mut acc = b[k];
                            for q in 0..4 {
                                for j in 0..d {
                                    let x = g.data[((n * g.patches_h + 2 * r + q / 2) * g.patches_w + 2 * c + q % 2) * d + j];
                                    acc += x * m[(q * d + j) * dout + k];
                                }
                            }
                            let got = out.patch(out.patch_index(n, r, c))[k];
                            assert!((got - acc).abs() <= 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn fusion_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_grid(&mut rng, 2, 2, 3, 4);
        let b = random_grid(&mut rng, 2, 2, 3, 4);
        let ones = PatchMask::all_ones(2, 2, 3);
        let zeros = PatchMask::from_bits(2, 2, 3, vec![false; 12]).unwrap();
        let t = fusion_target(&a, &b).unwrap();
        assert_eq!(fuse_tokens(&a, &b, &ones).unwrap(), t);
        assert_eq!(fuse_tokens(&a, &b, &zeros).unwrap(), a);
        let z = FeatureGrid::zeros(2, 2, 3, 4);
        assert_eq!(fusion_target(&a, &z).unwrap(), a);
        assert_eq!(reconstruction_target(&a, &b, TargetMode::GeometryOnly).unwrap(), b);
        let c = random_grid(&mut rng, 2, 2, 3, 5);
        assert!(fuse_tokens(&a, &c, &ones).is_err());
        assert!(fuse_tokens(&a, &b, &PatchMask::all_ones(2, 3, 2)).is_err());
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine_distance(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), -1.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 5.0]).unwrap(), 0.0);
        assert_eq!(cosine_distance(&[1.0, 1.0], &[-2.0, -2.0]).unwrap(), 1.0);
        assert!(matches!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Degenerate(_))));
        assert!(cosine_distance(&[1e-200, 0.0], &[1e-200, 0.0]).unwrap() == -1.0);
        assert!(cosine_distance(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn object_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_grid(&mut rng, 1, 2, 2, 3);
        let mut mask = PatchMask::all_ones(1, 2, 2);
        assert_eq!(object_recon_loss(&t, &t, &mask, 0.7).unwrap(), 0.0);
        mask.clear(0, 0, 1);
        mask.clear(0, 1, 1);
        assert_eq!(object_recon_loss(&t, &t, &mask, 0.7).unwrap(), -0.7);
        let mut r = t.clone();
        r.patch_mut(3).fill(0.0);
        let err = object_recon_loss(&t, &r, &mask, 1.0).unwrap_err();
        assert!(err.to_string().contains("row 1, col 1"), "{err}");
        // zero vectors at unmasked patches are fine
        mask = PatchMask::all_ones(1, 2, 2);
        mask.clear(0, 0, 0);
        assert!(object_recon_loss(&t, &r, &mask, 1.0).is_ok());
    }

    #[test]
    fn frame_loss_cases() {
        let gt = DepthMap::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let pred = DepthMap::new(2, 2, vec![1.0, 2.0, 3.0, 5.0]).unwrap();
        let fm = FrameMask { n_frames: 2, masked_views: vec![1] };
        let g = vec![None, Some(gt.clone())];
        assert_eq!(frame_recon_loss(&g, &[None, Some(pred.clone())], &fm, 1.0).unwrap(), 1.0);
        assert_eq!(frame_recon_loss(&g, &g, &fm, 1.0).unwrap(), 0.0);
        assert_eq!(frame_recon_loss(&g, &[None, None], &FrameMask { n_frames: 2, masked_views: vec![] }, 1.0).unwrap(), 0.0);
        assert!(matches!(frame_recon_loss(&g, &[Some(pred.clone()), None], &fm, 1.0), Err(Error::Input(_))));
        let mut holes = pred.clone();
        holes.values[3] = f64::NAN;
        assert_eq!(frame_recon_loss(&g, &[None, Some(holes)], &fm, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_cases() {
        let zero = LossConfig { lambda1: 0.0, lambda2: 0.0, ..Default::default() };
        assert_eq!(total_loss(1.25, 3.0, 7.0, &zero).unwrap().l_total, 1.25);
        let cfg = LossConfig { lambda1: 1.0, lambda2: 2.0, ..Default::default() };
        assert_eq!(total_loss(2.0, -1.0, 0.5, &cfg).unwrap().l_total, 2.0);
        let dbl = LossConfig { lambda1: 2.0, lambda2: 4.0, ..Default::default() };
        let a = total_loss(0.3, -0.8, 0.25, &cfg).unwrap();
        let b = total_loss(0.3, -0.8, 0.25, &dbl).unwrap();
        assert!(((b.l_total - b.l_text) - 2.0 * (a.l_total - a.l_text)).abs() < 1e-15);
        assert!(total_loss(f64::NAN, 0.0, 0.0, &cfg).is_err());
        assert!(total_loss(0.0, 0.0, 0.0, &LossConfig { alpha: -1.0, ..Default::default() }).is_err());
    }

    proptest! {
        #[test]
        fn cosine_is_scale_invariant(
            a in prop::collection::vec(-10.0f64..10.0, 1..16),
            c in 1e-3f64..1e3,
            seed in any::<u64>(),
        ) {
            prop_assume!(a.iter().any(|x| x.abs() > 1e-6));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<f64> = a.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
            let scaled: Vec<f64> = a.iter().map(|x| x * c).collect();
            let d1 = cosine_distance(&a, &b).unwrap();
            let d2 = cosine_distance(&scaled, &b).unwrap();
            prop_assert!((d1 - d2).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&d1));
        }

        #[test]
        fn object_loss_is_bounded(seed in any::<u64>(), alpha in 0.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_grid(&mut rng, 2, 2, 2, 3);
            let r = random_grid(&mut rng, 2, 2, 2, 3);
            let bits = (0..8).map(|_| rng.gen_bool(0.5)).collect();
            let m = PatchMask::from_bits(2, 2, 2, bits).unwrap();
            let l = object_recon_loss(&t, &r, &m, alpha).unwrap();
            prop_assert!(l >= -alpha - 1e-12 && l <= alpha + 1e-12);
        }

        #[test]
        fn frame_loss_nonnegative(vals in prop::collection::vec(0.1f64..10.0, 8), noise in prop::collection::vec(-1.0f64..1.0, 8)) {
            let gt = DepthMap::new(4, 2, vals.clone()).unwrap();
            let pred = DepthMap::new(4, 2, vals.iter().zip(&noise).map(|(a, b)| a + b + 2.0).collect()).unwrap();
            let fm = FrameMask { n_frames: 1, masked_views: vec![0] };
            let l = frame_recon_loss(&[Some(gt.clone())], &[Some(pred)], &fm, 1.0).unwrap();
            prop_assert!(l > 0.0);
            prop_assert_eq!(frame_recon_loss(&[Some(gt.clone())], &[Some(gt)], &fm, 1.0).unwrap(), 0.0);
        }
    }
}
