//! Phrase-based hierarchical LSTM image captioning at desk scale.
//!
//! The pipeline: dependency parses are chunked into noun-phrase and word
//! units ([`chunker`]); captions and precomputed image features are turned
//! into a vocabulary and training records ([`corpus`]); a two-level LSTM
//! ([`lstm`], [`model`]) encodes phrases into compositional vectors and
//! sentences over mixed word/phrase units, trained by RMSprop on a
//! perplexity objective with a phrase-selection classifier ([`optim`]);
//! captions are generated by constrained two-stage beam search ([`decode`])
//! and scored with BLEU and held-out perplexity ([`eval`]). [`synth`]
//! provides a deterministic toy world for end-to-end testing and
//! [`gradcheck`] verifies the analytic gradients against central finite
//! differences.

pub mod chunker;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod linalg;
pub mod lstm;
pub mod model;
pub mod optim;
pub mod synth;

pub use error::{Error, Result};
pub use linalg::{Mat, Rng, Vector};
pub use model::{BatchItem, ModelDims, PhiModel, UnitIds};
