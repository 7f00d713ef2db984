//! Scene manifests, payload formats, checkpoints, and the synthetic scene
//! generator.

pub mod checkpoint;
pub mod dataset;
pub mod formats;
pub mod synth;

pub use checkpoint::{load_checkpoint, save_checkpoint, CameraState, Checkpoint};
pub use dataset::{load_scene, save_scene, FrameData, SceneManifest, TraversalData, TraversalDataset};
