//! Image retrieval with trainable generalized-mean pooling.
//!
//! A small fully convolutional backbone turns an image into a stack of
//! activation maps, generalized-mean pooling with a learnable exponent
//! collapses them into a compact descriptor, and a siamese contrastive loss
//! fine-tunes both from tuples mined off a 3D visibility graph. Descriptors
//! are post-processed by discriminative whitening and searched exhaustively,
//! optionally with multi-scale extraction and query expansion.
//!
//! Modules follow the pipeline order: [`numerics`] holds the shared tensor
//! types and eigensolver, [`image`] and [`backbone`] produce activations,
//! [`pooling`] and [`loss`] define the trainable objective, [`mining`]
//! selects tuples, [`trainer`] runs the siamese loop, [`whitening`] and
//! [`retrieval`] handle post-processing and search, and [`cli`] wires the
//! file-level commands used by the `gemret` binary.

pub mod backbone;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod image;
pub mod loss;
pub mod mining;
pub mod numerics;
pub mod pooling;
pub mod retrieval;
pub mod synth;
pub mod trainer;
pub mod whitening;

pub use error::{Error, Result};
