//! Adversarial encoder/decoder framework for small molecular graphs.
//!
//! The crate trains an encoder, a generator, and three discriminators on
//! QM9-class molecules (heavy atoms C/N/O/F, at most 9 per molecule) without
//! ever computing a reconstruction loss, and evaluates generated corpora by
//! comparing distributions of chemical descriptors with the 1-Wasserstein
//! distance.
//!
//! Most functionality is exposed as a library; see the `examples/` directory
//! for one runnable program per capability and `src/bin/molgen.rs` for the
//! thin command-line wrapper.

extern crate blas_src;

pub mod ad;
pub mod baseline;
pub mod cli;
pub mod dataset;
pub mod generator;
pub mod latent;
pub mod metrics;
pub mod molgraph;
pub mod nets;
pub mod penalties;
pub mod smiles;
pub mod train;

pub use molgraph::{AtomVocabulary, ErrorClass, MolecularGraph, ValidityReport};
