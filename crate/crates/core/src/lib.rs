//! Reidentification audit for de-identified clinical notes.
//!
//! Generates a synthetic patient population, masks notes with a rule-based
//! tagger, trains a biencoder that links masked notes back to patient
//! profiles, and reports how reidentification degrades with masking.

pub mod cli;
pub mod corpus;
pub mod deid;
pub mod encoder;
pub mod eval;
pub mod reid;
pub mod scalar;

mod matching;

pub use scalar::Scalar;

/// Biencoder in double precision, used by the command-line tools.
pub type Model = reid::BiencoderModel<f64>;
/// Single-precision biencoder.
pub type ModelF32 = reid::BiencoderModel<f32>;
pub type Features = encoder::SparseFeatures<f64>;
pub type Retrieval = reid::RetrievalResult<f64>;
