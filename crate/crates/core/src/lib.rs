//! Knowledge-graph enhanced multi-modal prediction on ICU time series.
//!
//! Each hour of a stay becomes a small graph: one node per vital sign, one
//! node for the clinical notes written in that hour, and the ontology
//! concepts extracted from those notes together with the ontology edges
//! between them. Message passing over that graph yields a step embedding; a
//! recurrent network over the step embeddings feeds a task head for
//! in-hospital mortality, hourly decompensation, or phenotyping.

pub mod data;
pub mod encoder;
pub mod error;
mod hash;
pub mod knowledge;
pub mod model;
pub mod numeric;
pub mod sequence;
pub mod train;

pub use error::{Error, Result};
