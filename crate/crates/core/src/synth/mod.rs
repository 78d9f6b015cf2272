//! Training corpora: synthetic phantoms, anisotropic degradation, NIfTI
//! input/output, patch sampling and corpus manifests.

pub mod degrade;
pub mod manifest;
pub mod nifti;
pub mod patches;
pub mod phantom;

pub use degrade::{degrade, degrade_axis, DegradationSpec, DegradeMode};
pub use manifest::{CorpusConfig, CorpusManifest, Split, SubjectRecord};
pub use nifti::{ingest_nifti, read_nifti, write_nifti, IngestOptions};
pub use patches::{sample_patches, AugmentFlags, ForegroundRule, PatchConfig, PatchPair, Subject};
pub use phantom::{generate_phantom, ContrastMap, Phantom, PhantomSpec};
