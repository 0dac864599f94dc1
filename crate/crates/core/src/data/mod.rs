//! Patches, volumes, corpora and their on-disk layout.

pub mod background;
pub mod build;
pub mod image;
pub mod manifest;
pub mod npy;
pub mod synthetic;
pub mod volume;

pub use background::{sample_background_centers, BackgroundCenter, BackgroundPatch};
pub use build::{build_dataset, ProtocolConfig};
pub use image::{ImagePatch, SegMask, Window};
pub use manifest::{BuildReport, Corpus, DatasetManifest, Provenance, TrainingSample};
pub use synthetic::{generate_synthetic_corpus, holdout_backgrounds, SyntheticCorpusConfig};
pub use volume::{extract_voi, sample_nodule_slices, Mask3, Volume};
