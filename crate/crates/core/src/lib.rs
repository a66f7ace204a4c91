//! Reranking engine built around a small decoder-only transformer with
//! layer-wise token compression: past a chosen layer the sequence is pooled to
//! a fraction of its length, cutting attention cost while keeping scoring
//! quality. The crate covers scoring (pointwise and listwise), training on a
//! synthetic relevance task, TREC-format ranking runs, evaluation, and an
//! efficiency bench.

pub mod bench;
pub mod checkpoint;
pub mod compress;
pub mod error;
pub mod eval;
pub mod model;
pub mod rank;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod trec;

pub use error::{Error, Result};
