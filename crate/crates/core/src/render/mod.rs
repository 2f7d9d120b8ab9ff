//! Rendering: a z-buffer rasterizer for exemplar meshes and a
//! differentiable emission-absorption volume renderer for voxel fields.
//!
//! Both paths produce a [`RenderedView`]: colour, camera-space unit normals
//! (background (0, 0, 1)), coverage mask and the camera used.

mod raster;
mod volume;

use std::path::Path;

use crate::error::Result;
use crate::geometry::Camera;
use crate::image::Image;

pub use raster::rasterize;
pub use volume::{volume_render, volume_render_backward, RenderSettings, ViewGrad};

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    /// H x W RGB in [0, 1].
    pub color: Image,
    /// H x W camera-space unit normals.
    pub normal: Image,
    /// H x W alpha in [0, 1].
    pub mask: Image,
    pub camera: Camera,
}

impl RenderedView {
    pub fn all_finite(&self) -> bool {
        self.color.all_finite() && self.normal.all_finite() && self.mask.all_finite()
    }

    /// Binary silhouette at alpha 0.5.
    pub fn silhouette(&self) -> Vec<bool> {
        self.mask.data().iter().map(|&a| a > 0.5).collect()
    }

    /// Writes `<stem>_color.png`, `<stem>_normal.png` (n * 0.5 + 0.5) and
    /// `<stem>_mask.png` into `dir`.
    pub fn save_pngs(&self, dir: &Path, stem: &str) -> Result<()> {
        self.color.clamp(0.0, 1.0).save_png(dir.join(format!("{stem}_color.png")))?;
        self.normal.encode_normals().clamp(0.0, 1.0).save_png(dir.join(format!("{stem}_normal.png")))?;
        self.mask.clamp(0.0, 1.0).save_png(dir.join(format!("{stem}_mask.png")))?;
        Ok(())
    }
}

/// Intersection over union of two binary masks; 1.0 when both are empty.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
