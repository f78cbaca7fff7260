//! Tensor files, layer bundles and synthetic data.

pub mod bundle;
pub mod synth;
pub mod tensor_file;

pub use bundle::{load_bundle, read_manifest, save_bundle, LayerConfig, Manifest};
pub use synth::{random_orthogonal, random_rotation_set, synth_calib, synth_gqa, synth_gqa_kv_split, CalibStructure};
pub use tensor_file::{load_tensor, save_tensor};
