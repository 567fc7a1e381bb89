//! Query-conditioned target sound extraction.
//!
//! A mixture's log-mel patches run through a windowed-attention encoder with
//! low-rank adapters; a decoder modulates every encoder level with the
//! positive/negative query condition, aggregates them U-Net style and
//! predicts a magnitude mask that is applied with the mixture phase.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod decoder;
pub mod dsp;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod nn;
pub mod scalar;
pub mod tape;
pub mod toyclap;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type Waveform32 = dsp::Waveform<f32>;
pub type Waveform64 = dsp::Waveform<f64>;
pub type Engine32 = decoder::SeparationEngine<f32>;
pub type Engine64 = decoder::SeparationEngine<f64>;
pub type ToyClap32 = toyclap::ToyClap<f32>;
pub type ToyClap64 = toyclap::ToyClap<f64>;
pub type ParamStore32 = tape::ParamStore<f32>;
pub type ParamStore64 = tape::ParamStore<f64>;
pub type QueryEmbedding32 = embedding::QueryEmbedding<f32>;
pub type ConditionalEmbedding32 = embedding::ConditionalEmbedding<f32>;
