//! Samples and datasets, the synthetic renderer, image files and manifests.

pub mod bundle;
pub mod io;
pub mod manifest;
mod sample;
pub mod synth;

pub use bundle::{RawBundle, RawSample};
pub use manifest::{
    load_dataset, load_directory, save_dataset, DirectoryLoad, Manifest, ManifestEntry,
};
pub use sample::{Dataset, Modality, Sample};
pub use synth::{render_dataset, SynthSpec};
