//! Molecule representation, extended-XYZ ingestion, deterministic splits and
//! padded batching.

mod batch;
pub mod elements;
mod extxyz;
mod molecule;
mod split;

pub use batch::{make_batch, Batch};
pub use extxyz::{format_extxyz, load_extxyz, parse_extxyz, write_extxyz};
pub use molecule::{pairwise_distances, DistanceMatrix, Molecule};
pub use split::{split_dataset, Split};
