//! Query embeddings and condition construction.

mod augment;
mod cache;
mod negative;

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment_query_audio, AugmentConfig};
pub use cache::{build_cache, EmbeddingCache};
pub use negative::{generate_negative_embedding, top_k};

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const PROMPT_PREFIX: &str = "The sound of";

/// Text query for a class label.
pub fn prompt_for(label: &str) -> String {
    format!("{PROMPT_PREFIX} {label}")
}

/// Joint text/audio embedding space. Outputs are unit vectors.
pub trait EmbeddingBackend<T: Scalar>: Send + Sync {
    fn dim(&self) -> usize;

    fn encode_text(&self, text: &str) -> Result<Array1<T>>;

    fn encode_audio(&self, w: &Waveform<T>) -> Result<Array1<T>>;

    fn encode_audio_batch(&self, ws: &[Waveform<T>]) -> Result<Vec<Array1<T>>> {
        ws.iter().map(|w| self.encode_audio(w)).collect()
    }

    fn text_query(&self, text: &str) -> Result<QueryEmbedding<T>> {
        QueryEmbedding::unit(self.encode_text(text)?, Modality::Text)
    }

    fn audio_query(&self, w: &Waveform<T>) -> Result<QueryEmbedding<T>> {
        QueryEmbedding::unit(self.encode_audio(w)?, Modality::Audio)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Audio,
    Interpolated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryEmbedding<T: Scalar> {
    pub vector: Array1<T>,
    pub modality: Modality,
}

pub(crate) fn l2_norm<T: Scalar>(v: &Array1<T>) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

pub(crate) fn normalized<T: Scalar>(v: Array1<T>) -> Result<Array1<T>> {
    let n = l2_norm(&v);
    if !(n > T::zero()) || !n.is_finite() {
        return Err(Error::domain("cannot normalise a zero or non-finite embedding"));
    }
    Ok(v.mapv(|x| x / n))
}

impl<T: Scalar> QueryEmbedding<T> {
    pub fn new(vector: Array1<T>, modality: Modality) -> Result<Self> {
        if vector.is_empty() || vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("query embedding must be non-empty and finite"));
        }
        Ok(QueryEmbedding { vector, modality })
    }

    /// Normalises to unit length.
    pub fn unit(vector: Array1<T>, modality: Modality) -> Result<Self> {
        Self::new(normalized(vector)?, modality)
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> T {
        l2_norm(&self.vector)
    }
}

/// `α·e_audio + (1 − α)·e_text`, without renormalisation.
pub fn interpolate<T: Scalar>(e_audio: &QueryEmbedding<T>, e_text: &QueryEmbedding<T>, alpha: f64) -> Result<QueryEmbedding<T>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::domain(format!("interpolation weight {alpha} outside [0, 1]")));
    }
    if e_audio.dim() != e_text.dim() {
        return Err(Error::domain("audio and text embeddings differ in dimension"));
    }
    let a = T::of(alpha);
    let b = T::of(1.0 - alpha);
    let vector = ndarray::Zip::from(&e_audio.vector)
        .and(&e_text.vector)
        .map_collect(|&x, &y| a * x + b * y);
    let modality = if alpha == 0.0 {
        Modality::Text
    } else if alpha == 1.0 {
        Modality::Audio
    } else {
        Modality::Interpolated
    };
    QueryEmbedding::new(vector, modality)
}

/// `[e^P, e^N]` with an absent side replaced by zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalEmbedding<T: Scalar> {
    pub vector: Array1<T>,
    pub has_positive: bool,
    pub has_negative: bool,
}

impl<T: Scalar> ConditionalEmbedding<T> {
    /// Query width `D`.
    pub fn dim(&self) -> usize {
        self.vector.len() / 2
    }

    pub fn positive(&self) -> ndarray::ArrayView1<'_, T> {
        self.vector.slice(ndarray::s![..self.dim()])
    }

    pub fn negative(&self) -> ndarray::ArrayView1<'_, T> {
        self.vector.slice(ndarray::s![self.dim()..])
    }
}

pub fn build_condition<T: Scalar>(
    pos: Option<&QueryEmbedding<T>>,
    neg: Option<&QueryEmbedding<T>>,
) -> Result<ConditionalEmbedding<T>> {
    let d = match (pos, neg) {
        (None, None) => return Err(Error::domain("a condition needs a positive or a negative query")),
        (Some(p), Some(n)) if p.dim() != n.dim() => {
            return Err(Error::domain("positive and negative queries differ in dimension"))
        }
        (Some(p), _) => p.dim(),
        (None, Some(n)) => n.dim(),
    };
    let mut vector = Array1::zeros(2 * d);
    if let Some(p) = pos {
        vector.slice_mut(ndarray::s![..d]).assign(&p.vector);
    }
    if let Some(n) = neg {
        vector.slice_mut(ndarray::s![d..]).assign(&n.vector);
    }
    Ok(ConditionalEmbedding { vector, has_positive: pos.is_some(), has_negative: neg.is_some() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryPolarityMode {
    PositiveOnly,
    NegativeOnly,
    Both,
}

impl QueryPolarityMode {
    pub fn uses_positive(self) -> bool {
        self != QueryPolarityMode::NegativeOnly
    }

    pub fn uses_negative(self) -> bool {
        self != QueryPolarityMode::PositiveOnly
    }
}

/// Positive-only and negative-only with probability 1/4 each, both with 1/2.
pub fn sample_polarity<R: Rng>(rng: &mut R) -> QueryPolarityMode {
    let u: f64 = rng.random();
    if u < 0.25 {
        QueryPolarityMode::PositiveOnly
    } else if u < 0.5 {
        QueryPolarityMode::NegativeOnly
    } else {
        QueryPolarityMode::Both
    }
}

/// Mean of several audio-shot embeddings, renormalised.
pub fn average_shots<T: Scalar>(embeddings: &[QueryEmbedding<T>]) -> Result<QueryEmbedding<T>> {
    let first = embeddings.first().ok_or_else(|| Error::domain("no query shots to average"))?;
    if embeddings.len() == 1 {
        return Ok(first.clone());
    }
    let mut sum = Array1::<T>::zeros(first.dim());
    for e in embeddings {
        if e.dim() != first.dim() {
            return Err(Error::domain("query shots differ in dimension"));
        }
        sum += &e.vector;
    }
    let n = T::of(embeddings.len() as f64);
    QueryEmbedding::unit(sum.mapv(|v| v / n), first.modality)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn q(v: Array1<f64>, m: Modality) -> QueryEmbedding<f64> {
        QueryEmbedding::new(v, m).unwrap()
    }

    #[test]
    fn interpolation_cases() {
        let a = q(array![1.0, 0.0], Modality::Audio);
        let t = q(array![0.0, 1.0], Modality::Text);
        assert_eq!(interpolate(&a, &t, 0.0).unwrap().vector, t.vector);
        assert_eq!(interpolate(&a, &t, 1.0).unwrap().vector, a.vector);
        assert_eq!(interpolate(&a, &t, 0.5).unwrap().vector, array![0.5, 0.5]);
        assert!(interpolate(&a, &t, 1.5).is_err());
        assert!(interpolate(&a, &t, -0.1).is_err());
    }

    #[test]
    fn condition_blocks() {
        let p = q(array![1.0, 2.0], Modality::Text);
        let n = q(array![3.0, 4.0], Modality::Text);
        assert_eq!(build_condition(Some(&p), Some(&n)).unwrap().vector, array![1.0, 2.0, 3.0, 4.0]);
        let po = build_condition(Some(&p), None).unwrap();
        assert_eq!(po.vector, array![1.0, 2.0, 0.0, 0.0]);
        assert!(po.has_positive && !po.has_negative);
        assert_eq!(build_condition(None, Some(&n)).unwrap().vector, array![0.0, 0.0, 3.0, 4.0]);
        assert!(build_condition::<f64>(None, None).is_err());
    }

    #[test]
    fn polarity_is_seeded_and_covers_all_modes() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..1000).map(|_| sample_polarity(&mut rng)).collect::<Vec<_>>()
        };
        let a = draw(3);
        assert_eq!(a, draw(3));
        for m in [QueryPolarityMode::PositiveOnly, QueryPolarityMode::NegativeOnly, QueryPolarityMode::Both] {
            assert!(a.contains(&m));
        }
    }

    #[test]
    fn shot_averaging() {
        let x = q(array![1.0, 0.0], Modality::Audio);
        let y = q(array![0.0, 1.0], Modality::Audio);
        assert_eq!(average_shots(std::slice::from_ref(&x)).unwrap(), x);
        assert_eq!(average_shots(&[x.clone(), x.clone()]).unwrap().vector, x.vector);
        let m = average_shots(&[x, y]).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((m.vector[0] - h).abs() < 1e-15 && (m.vector[1] - h).abs() < 1e-15);
        assert!(average_shots::<f64>(&[]).is_err());
    }
}
