//! Evaluation mixtures, improvement and embedding-similarity metrics, and
//! reports.

mod manifest;
mod mixtures;
mod report;

use ndarray::Array1;

pub use manifest::{zero_shot_split, Manifest, ManifestEntry};
pub use mixtures::{build_eval_mixtures, EvalMixtureSpec, EvalPlan, QueryBundle};
pub use report::{evaluate, evaluate_detailed, EvalContext, EvalMode, EvalRow, MetricsReport, ModeAggregate, NegativeSource, QueryModality, Stat};

use crate::dsp::Waveform;
use crate::embedding::EmbeddingBackend;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::training::{sdr, sisdr};

pub fn sdri<T: Scalar>(est: &Waveform<T>, mixture: &Waveform<T>, reference: &Waveform<T>) -> Result<f64> {
    Ok(sdr(est, reference)? - sdr(mixture, reference)?)
}

pub fn sisdri<T: Scalar>(est: &Waveform<T>, mixture: &Waveform<T>, reference: &Waveform<T>) -> Result<f64> {
    Ok(sisdr(est, reference)? - sisdr(mixture, reference)?)
}

/// Cosine similarity of two embeddings.
pub fn cosine<T: Scalar>(a: &Array1<T>, b: &Array1<T>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::domain("embeddings differ in dimension"));
    }
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64_lossy(), y.to_f64_lossy());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::domain("zero embedding"));
    }
    Ok(ab / (aa.sqrt() * bb.sqrt()))
}

pub fn clapscore_embedding<T: Scalar>(e_est: &Array1<T>, e_pos: &Array1<T>) -> Result<f64> {
    cosine(e_est, e_pos)
}

pub fn delta_clapscore_embedding<T: Scalar>(e_est: &Array1<T>, e_pos: &Array1<T>, e_neg: &Array1<T>) -> Result<f64> {
    Ok(cosine(e_est, e_pos)? - cosine(e_est, e_neg)?)
}

/// Similarity of the estimate's audio embedding to the positive query.
pub fn clapscore<T: Scalar>(est: &Waveform<T>, e_pos: &Array1<T>, backend: &dyn EmbeddingBackend<T>) -> Result<f64> {
    clapscore_embedding(&backend.encode_audio(est)?, e_pos)
}

pub fn delta_clapscore<T: Scalar>(
    est: &Waveform<T>,
    e_pos: &Array1<T>,
    e_neg: &Array1<T>,
    backend: &dyn EmbeddingBackend<T>,
) -> Result<f64> {
    delta_clapscore_embedding(&backend.encode_audio(est)?, e_pos, e_neg)
}
