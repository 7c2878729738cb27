//! Dataset model, manifest format, synthetic domains and batch sampling.

pub mod augment;
pub mod dataset;
pub mod generator;
pub mod sampler;
pub mod source;

pub use augment::AugmentConfig;
pub use dataset::{
    load_domain, ClothingState, DomainDataset, DomainMeta, SampleRecord, Split, MANIFEST_FILE,
    META_FILE,
};
pub use generator::{generate_synthetic_domain, GeneratorParams};
pub use sampler::{sample_pk_batches, BatchSpec};
pub use source::{AccessAuditor, ImageSource};
