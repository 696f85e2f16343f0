//! 3D feature-field backends and their renderers.

pub mod camera;
mod checkpoint;
mod pca;
pub mod surface;
pub mod volume;

pub use camera::{Camera, Ray, Vec3};
pub use checkpoint::{load_field, read_field, save_field, write_field, FIELD_MAGIC, FIELD_VERSION};
pub use pca::{pca_colorize, PcaBasis};
pub use surface::{backprop_surface, knn_adjacency, render_surface, SurfaceField, SurfaceGrads};
pub use volume::{
    backprop_volume, render_rays, render_volume, softplus, RayCotangents, RayOutputs, Sampling, VolumeCache,
    VoxelField, VoxelGrads,
};

use crate::error::Result;

/// Hit-map entry for pixels no point covers.
pub const NO_HIT: u32 = u32::MAX;

/// Per-pixel outputs of a renderer.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    /// `H·W × dim`, row-major pixels.
    pub features: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
    /// Winning point per pixel (surface backend only).
    pub hit_index: Option<Vec<u32>>,
}

impl RenderedView {
    pub fn empty(width: usize, height: usize, dim: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            dim,
            features: vec![0.0; n * dim],
            colors: vec![[0.0; 3]; n],
            depth: vec![0.0; n],
            opacity: vec![0.0; n],
            hit_index: None,
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn feature(&self, pix: usize) -> &[f64] {
        &self.features[pix * self.dim..(pix + 1) * self.dim]
    }

    /// Whether anything was rendered at `pix`.
    pub fn covered(&self, pix: usize) -> bool {
        self.opacity[pix] > 0.0
    }
}

/// A trained field of either backend.
#[derive(Clone, Debug, PartialEq)]
pub enum FieldModel {
    Surface(SurfaceField),
    Volume(VoxelField),
}

/// Rendering knobs shared by both backends.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub point_radius: f64,
    pub samples_per_ray: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            point_radius: 0.75,
            samples_per_ray: 64,
        }
    }
}

impl FieldModel {
    pub fn dim(&self) -> usize {
        match self {
            FieldModel::Surface(f) => f.dim,
            FieldModel::Volume(f) => f.dim,
        }
    }

    pub fn backend_name(&self) -> &'static str {
        match self {
            FieldModel::Surface(_) => "surface",
            FieldModel::Volume(_) => "volume",
        }
    }

    pub fn render(&self, camera: &Camera, opts: &RenderOptions) -> Result<RenderedView> {
        match self {
            FieldModel::Surface(f) => Ok(render_surface(f, camera, opts.point_radius)),
            FieldModel::Volume(f) => render_volume(f, camera, opts.samples_per_ray),
        }
    }

    /// All stored feature vectors, row-major.
    pub fn features(&self) -> &[f64] {
        match self {
            FieldModel::Surface(f) => &f.features,
            FieldModel::Volume(f) => &f.features,
        }
    }

    pub fn as_surface(&self) -> Option<&SurfaceField> {
        match self {
            FieldModel::Surface(f) => Some(f),
            FieldModel::Volume(_) => None,
        }
    }

    /// Mean of `|‖f‖ − 1|` over every stored feature vector.
    pub fn mean_norm_deviation(&self) -> f64 {
        let d = self.dim();
        let feats = self.features();
        let n = feats.len() / d;
        if n == 0 {
            return 0.0;
        }
        feats
            .chunks_exact(d)
            .map(|f| (f.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs())
            .sum::<f64>()
            / n as f64
    }
}
