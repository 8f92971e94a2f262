//! Synthetic benchmarks for concept removal, built from MNIST-format sources.
//!
//! Striped MNIST puts a label-dependent grating behind each digit; the DRO
//! variant stripes only most images so that every (digit, stripes) group
//! exists. Concept sets pair striped and clean digits or letters. Colored
//! MNIST ties a red/green channel to a noisy binary label.
//!
//! Every generator is a pure function of its base data, parameters and seed.
//! [`cache`] stores results on disk keyed by a hash of all three.

pub mod cache;
pub mod dataset;
pub mod error;
pub mod generators;
pub mod idx;
pub mod seed;
pub mod sources;
pub mod spec;
pub mod stripes;

pub use cache::{fingerprint, CacheKey, Dataset, DatasetCache, CACHE_ENV};
pub use dataset::{ConceptDataset, ConceptSource, GroupedDataset, LabeledImageSet, Split, NO_STRIPES, PLANE, SIDE};
pub use error::{DataError, Result};
pub use generators::{
    make_cmnist, make_cmnist_concept, make_concept_emnist, make_concept_mnist, make_dro_striped_mnist,
    make_striped_mnist, split_subset,
};
pub use seed::{derive_seed, splitmix64};
pub use sources::{data_root, load_letters, load_mnist, DATA_ENV};
pub use spec::{generate, materialize, DataSpec, Materialized, GENERATORS};
pub use stripes::{stripe_angle, stripe_pattern, STRIPE_BLEND_BOUND, STRIPE_PERIOD};
