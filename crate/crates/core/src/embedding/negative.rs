use ndarray::Array1;

use super::{build_condition, normalized, EmbeddingBackend, EmbeddingCache, Modality, QueryEmbedding};
use crate::decoder::{separate, Separator};
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Indices of the `k` cache rows most similar to `e` by dot product; ties go
/// to the lexicographically smaller label.
pub fn top_k<T: Scalar>(e: &Array1<T>, cache: &EmbeddingCache<T>, k: usize) -> Result<Vec<usize>> {
    if cache.is_empty() {
        return Err(Error::domain("embedding cache is empty"));
    }
    if k == 0 || k > cache.len() {
        return Err(Error::domain(format!("k = {k} outside 1..={}", cache.len())));
    }
    if e.len() != cache.dim() {
        return Err(Error::domain("embedding and cache differ in dimension"));
    }
    let sims = cache.entries.dot(e);
    let mut order: Vec<usize> = (0..cache.len()).collect();
    order.sort_by(|&a, &b| {
        sims[b]
            .partial_cmp(&sims[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| cache.labels[a].cmp(&cache.labels[b]))
    });
    order.truncate(k);
    Ok(order)
}

/// Negative query for a positive one: separate with the positive placed in
/// the negative slot, embed what was extracted, and sum the closest cached
/// class embeddings.
pub fn generate_negative_embedding<T: Scalar, S: Separator<T> + ?Sized>(
    e_pos: &QueryEmbedding<T>,
    mixture: &Waveform<T>,
    cache: &EmbeddingCache<T>,
    k: usize,
    separator: &S,
    backend: &dyn EmbeddingBackend<T>,
) -> Result<QueryEmbedding<T>> {
    if cache.is_empty() {
        return Err(Error::domain("embedding cache is empty"));
    }
    if k == 0 || k > cache.len() {
        return Err(Error::domain(format!("k = {k} outside 1..={}", cache.len())));
    }
    let c = build_condition(None, Some(e_pos))?;
    let x_neg = separate(separator, mixture, &c)?;
    let e = backend.encode_audio(&x_neg)?;
    select_and_aggregate(&e, cache, k)
}

pub(crate) fn select_and_aggregate<T: Scalar>(e: &Array1<T>, cache: &EmbeddingCache<T>, k: usize) -> Result<QueryEmbedding<T>> {
    let idx = top_k(e, cache, k)?;
    let mut sum = Array1::<T>::zeros(cache.dim());
    for i in idx {
        sum += &cache.entries.row(i);
    }
    QueryEmbedding::new(normalized(sum)?, Modality::Text)
}
