//! Procedural moving-shape videos with exact control maps.

pub mod annotate;
pub mod io;
pub mod scene;

pub use annotate::{depth_annotate, edge_annotate, soft_edge_annotate, EdgeParams};
pub use scene::{
    depth_plane_for_hue, generate_scene, DepthPlane, RenderOptions, SceneSampler, SceneSpec,
    ShapeKind, ShapeSpec, VideoSample,
};

use serde::{Deserialize, Serialize};

/// Which annotation feeds the control branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ControlKind {
    #[default]
    Depth,
    Edge,
    Softedge,
}

impl ControlKind {
    /// File prefix used on disk, e.g. `depth_000.png`.
    pub fn file_prefix(self) -> &'static str {
        match self {
            ControlKind::Depth => "depth",
            ControlKind::Edge => "edge",
            ControlKind::Softedge => "softedge",
        }
    }

    pub fn select(self, sample: &VideoSample) -> &ndarray::Array4<f32> {
        match self {
            ControlKind::Depth => &sample.depth_maps,
            ControlKind::Edge => &sample.edge_maps,
            ControlKind::Softedge => &sample.soft_edge_maps,
        }
    }
}
