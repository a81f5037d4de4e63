//! Dataset layout, synthetic generation, splitting and group sampling.

pub mod groups;
pub mod image;
pub mod manifest;
pub mod store;
pub mod synth;

pub use groups::{make_sample_groups, GroupSpec, ImageBank, Pairing, SampleGroup};
pub use manifest::{load_manifest, scan_manifest, DatasetManifest, ImageEntry, SplitMode, View};
pub use store::{AccessKind, DataStore};
pub use synth::{generate_synthetic, SynthConfig, SynthSummary};
