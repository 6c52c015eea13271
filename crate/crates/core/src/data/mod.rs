//! Synthetic objects, scenes and their on-disk format.

mod generate;
mod io;
mod mask;
mod model;
mod render;

pub use generate::{generate_scene, generate_split, random_pose, scene_seed, DatasetSpec};
pub use io::{
    load_dataset, load_models, load_scene, read_manifest, save_models, save_scene, scene_from_bytes, scene_to_bytes,
    write_manifest, SceneMeta,
};
pub use mask::{corrupt_mask, Mask};
pub use model::{make_model, ObjectModel, Shape, ShapeSpec, MIN_MODEL_POINTS, RENDER_SPACING};
pub use render::{render_scene, RenderOptions, Scene};

use crate::geometry::GeometryError;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("unknown shape kind `{0}`")]
    UnknownShape(String),
    #[error("degenerate size: {0}")]
    DegenerateSize(String),
    #[error("object {id} reaches depth {depth} m, behind the camera")]
    ObjectBehindCamera { id: u32, depth: f64 },
    #[error("malformed scene file at byte {offset}: {reason}")]
    MalformedFile { offset: usize, reason: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl DataError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
