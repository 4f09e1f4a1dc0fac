//! Geometric machinery for 3D-aware masked reconstruction: adaptive frame
//! sampling by greedy maximum coverage over z-buffered point splats, object-
//! and frame-level geometry masks, token fusion and reconstruction losses.
//!
//! Conventions:
//! - world -> camera is `p_cam = R p_world + t`; camera looks down +z
//! - pixel `(u, v)` covers `[u, u+1) x [v, v+1)`, its center is `(u+0.5, v+0.5)`
//! - depth is camera-frame z in meters; non-finite means invalid
//! - geometry runs in `f64`, files store `f32`

pub mod coverage;
pub mod error;
pub mod exec;
pub mod figure;
pub mod geometry;
pub mod io;
pub mod masking;
pub mod recon;
pub mod rng;
pub mod scene;
pub mod synthetic;

pub use coverage::{
    adaptive_sample, adaptive_sample_detailed, exhaustive_max_coverage, greedy_max_coverage, uniform_sample,
    SamplerConfig, SelectionReport,
};
pub use error::{Error, Result};
pub use geometry::{
    back_project, merge_point_clouds, project_point, render_visibility, visible_set, voxel_downsample, warp_depth,
    RenderConfig, VisibilityBuffer, VisibilitySet,
};
pub use masking::{frame_level_mask, object_level_mask, salient_objects, FrameMask, ObjectRecord, PatchMask};
pub use recon::{
    cosine_distance, frame_recon_loss, fuse_tokens, fusion_target, merge_patches_2x2, object_recon_loss, total_loss,
    LossConfig, LossReport, ProjectorWeights,
};
pub use rng::MaskRng;
pub use scene::{
    validate_scene, CameraExtrinsics, CameraIntrinsics, DepthMap, FeatureGrid, Frame, PointCloud, SceneManifest,
    SegmentationMap,
};
