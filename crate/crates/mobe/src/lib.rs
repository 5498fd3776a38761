//! Multi-subject fMRI visual decoding with mixture-of-brain-expert adapters,
//! exercised end to end on a seeded synthetic simulator.
//!
//! The crate is organized around the stages of the decoding pipeline:
//!
//! - [`tensor`] / [`graph`] / [`optim`]: a minimal dense-f64 engine with
//!   reverse-mode autodiff and AdamW, sized for desk-scale experiments.
//! - [`align`]: anatomical alignment simulation — subject grids mapped onto a
//!   shared template, ROI selection, flattening, and voxel-dropout
//!   misalignment for ablations.
//! - [`synth`]: a seeded multi-subject dataset generator with shared stimulus
//!   semantics and per-subject response transforms.
//! - [`model`]: the decoding network — MLP backbone whose linear layers carry
//!   per-subject low-rank adapter branches mixed by a subject-guided global
//!   router, plus classifier, retrieval, and prior heads.
//! - [`loss`]: router cross-entropy, multi-label classification, bidirectional
//!   contrastive retrieval, reconstruction, and semantic relation alignment.
//! - [`train`]: the two-phase schedule — commonality training of the shared
//!   backbone, router training, then alternating bi-level meta steps over
//!   adapters and backbone.
//! - [`metrics`]: mAP, AUC, Hamming distance, and pooled top-1 retrieval
//!   accuracy, with a persisted metrics report.
//! - [`config`]: the on-disk experiment configuration and artifact layout
//!   shared by the CLI and the examples.
//!
//! See the `examples/` directory for one runnable program per capability and
//! the `mobe` binary for the file-based workflow (`gen`, `train`, `eval`,
//! `ablate`, `gradcheck`, `params`).

pub mod align;
pub mod config;
pub mod counters;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId, Param};
pub use tensor::Tensor;
