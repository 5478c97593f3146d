//! Synthetic labelled scenes and cyclic corrupted target streams.

mod corruption;
mod scene;
mod stream;

pub use corruption::{apply_corruption, corrupt_traced, CorruptionSpec, CorruptionTrace, Domain};
pub use scene::{
    class_color, generate_scene, patch_majority, Scene, SceneConfig, SceneObject, ShapeKind,
};
pub use stream::{
    build_stream, derive_seed, source_scenes, write_manifest, ManifestRow, StreamInstance,
    StreamSpec, TargetInput, TargetStream,
};
