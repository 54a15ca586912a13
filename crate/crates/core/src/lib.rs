//! Multimodal time-series valence regression with self-attention and
//! memory-fusion architectures, plus the continuous-annotation evaluation
//! stack (evaluator-weighted gold standard, concordance correlation, and a
//! leave-one-out human benchmark).

pub mod error;
mod modality;
pub mod tensor;

pub use error::{Error, ErrorKind, Result};
pub use modality::{Modality, ModalitySet};
pub mod metrics;
pub mod windowing;
pub mod nn;
pub mod embedder;
pub mod transformer;
pub mod recurrent;
pub mod mfn;
pub mod models;
pub mod dataset;
pub mod trainer;
