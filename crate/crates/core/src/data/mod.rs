//! Synthetic shape scenes with panoptic ground truth, and their on-disk
//! container.

mod container;
mod generate;

pub use container::{load_dataset, save_dataset, dataset_from_bytes, dataset_to_bytes, DATASET_MAGIC, DATASET_VERSION};
pub use generate::{generate_dataset, generate_scene, SceneConfig, STUFF_NAMES, THING_NAMES};
