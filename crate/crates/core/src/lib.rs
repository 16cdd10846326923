//! Multi-task cross-modal fine-tuning and fused-vector retrieval over paired
//! image/text embeddings.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense row-major matrices and the stable primitives everything
//!   else is built on.
//! - [`losses`]: the symmetric image-text contrastive loss, the supervised
//!   contrastive loss, binary cross-entropy and their weighted composite.
//! - [`model`]: affine adapters over frozen backbone embeddings, average fusion,
//!   dropout and a linear classification head, with exact backward.
//! - [`optim`]: AdamW with two parameter groups and a warmup/cosine schedule.
//! - [`trainer`] / [`tuner`]: the training loop and the loss-weight search.
//! - [`ingest`]: report parsing, labelling, splitting and the `CMXE` file format.
//! - [`index`] / [`metrics`]: the exact fused index and the retrieval evaluation suite.
//!
//! Data-parallel loops go through [`exec::Execution`]; with the `parallel`
//! feature disabled everything runs sequentially and produces identical output.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod exec;
pub mod index;
pub mod ingest;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod synth;
pub mod trainer;
pub mod tuner;

mod binio;
pub mod jsonl;

pub use error::{Error, Result};
pub use exec::Execution;
pub use index::{FusedIndex, SearchHit, SearchResult};
pub use ingest::{EmbeddingRecord, EmbeddingSet, Label, StudyRecord};
pub use losses::{LossBreakdown, LossWeights};
pub use metrics::{Direction, MetricsReport};
pub use model::{ModelGrads, ModelParams};
pub use numerics::Matrix;
