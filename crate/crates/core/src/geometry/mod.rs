//! Pinhole projection, z-buffer point splatting and point-cloud utilities.

mod cloud;
mod projection;
mod render;
mod surface;
mod warp;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cloud::{merge_point_clouds, voxel_downsample, VoxelAccumulator};
pub use projection::{back_project, back_project_into, project_point, project_point_with, Projection};
pub use render::{render_views, render_visibility, visible_set, VisibilityBuffer, VisibilitySet, NO_WINNER};
pub use warp::{warp_depth, SourceView, WarpResult};

pub const DEFAULT_SPLAT_SIDE: f64 = 2.0;
pub const DEFAULT_NEAR_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    /// Side of the square each projected point covers, in pixels.
    pub splat_side_d: f64,
    /// Points with camera depth at or below this are culled, in meters.
    pub near_epsilon: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            splat_side_d: DEFAULT_SPLAT_SIDE,
            near_epsilon: DEFAULT_NEAR_EPSILON,
        }
    }
}

impl RenderConfig {
    pub fn with_splat(splat_side_d: f64) -> Self {
        RenderConfig {
            splat_side_d,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.splat_side_d > 0.0 && self.splat_side_d.is_finite()) {
            return Err(Error::Param(format!("splat side must be > 0, got {}", self.splat_side_d)));
        }
        if !(self.near_epsilon > 0.0 && self.near_epsilon.is_finite()) {
            return Err(Error::Param(format!("near epsilon must be > 0, got {}", self.near_epsilon)));
        }
        Ok(())
    }
}
