use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Manifest;
use crate::embedding::prompt_for;
use crate::error::{Error, Result};

/// Label prompts and reserved query clips for both sides of a mixture.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryBundle {
    pub pos_text: String,
    pub neg_text: String,
    pub pos_audio: Vec<String>,
    pub neg_audio: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMixtureSpec {
    pub id: String,
    pub target_id: String,
    pub target_label: String,
    pub interferer_ids: Vec<String>,
    pub interferer_label: String,
    pub snr_db: f64,
    pub queries: QueryBundle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPlan {
    pub specs: Vec<EvalMixtureSpec>,
    /// Clips reserved as audio queries, never mixed.
    pub query_clips: Vec<String>,
}

/// Reserves `shots` query clips per class, then pairs every remaining clip
/// with `n_interferers` distinct interferers from other classes, one mixture
/// per interferer.
pub fn build_eval_mixtures(manifest: &Manifest, n_interferers: usize, shots: usize, snr_db: f64, seed: u64) -> Result<EvalPlan> {
    if n_interferers == 0 {
        return Err(Error::domain("at least one interferer per target is required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut query = BTreeSet::new();
    let mut shots_of = std::collections::BTreeMap::new();
    for (label, clips) in manifest.by_label() {
        if clips.len() <= shots {
            return Err(Error::domain(format!(
                "class `{label}` has {} clips, cannot reserve {shots} query shots and keep a target",
                clips.len()
            )));
        }
        let mut ids: Vec<&str> = clips.iter().map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let mut reserved: Vec<String> = ids[..shots].iter().map(|s| s.to_string()).collect();
        reserved.sort();
        query.extend(reserved.iter().cloned());
        shots_of.insert(label.to_string(), reserved);
    }
    let pool: Vec<_> = manifest.entries.iter().filter(|e| !query.contains(&e.id)).collect();
    let mut specs = Vec::with_capacity(pool.len() * n_interferers);
    for target in &pool {
        let candidates: Vec<_> = pool.iter().filter(|e| e.label != target.label).collect();
        if candidates.len() < n_interferers {
            return Err(Error::domain(format!(
                "only {} interferer candidates for `{}`, need {n_interferers}",
                candidates.len(),
                target.id
            )));
        }
        let picks = rand::seq::index::sample(&mut rng, candidates.len(), n_interferers);
        for (j, i) in picks.into_iter().enumerate() {
            let noise = candidates[i];
            specs.push(EvalMixtureSpec {
                id: format!("{}#{j}", target.id),
                target_id: target.id.clone(),
                target_label: target.label.clone(),
                interferer_ids: vec![noise.id.clone()],
                interferer_label: noise.label.clone(),
                snr_db,
                queries: QueryBundle {
                    pos_text: prompt_for(&target.label),
                    neg_text: prompt_for(&noise.label),
                    pos_audio: shots_of[&target.label].clone(),
                    neg_audio: shots_of[&noise.label].clone(),
                },
            });
        }
    }
    Ok(EvalPlan { specs, query_clips: query.into_iter().collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::manifest::tests::synthetic;

    #[test]
    fn counting() {
        let m = synthetic(2, 6);
        let plan = build_eval_mixtures(&m, 1, 1, 0.0, 3).unwrap();
        assert_eq!(plan.specs.len(), 10);
        assert_eq!(plan.query_clips.len(), 2);
    }

    #[test]
    fn scan_for_leaks() {
        let m = synthetic(4, 8);
        let plan = build_eval_mixtures(&m, 2, 3, 0.0, 9).unwrap();
        let q: BTreeSet<_> = plan.query_clips.iter().collect();
        for s in &plan.specs {
            assert!(!s.interferer_ids.contains(&s.target_id));
            assert_ne!(s.interferer_label, s.target_label);
            assert!(!q.contains(&s.target_id));
            assert!(s.interferer_ids.iter().all(|i| !q.contains(i)));
            assert!(s.queries.pos_audio.iter().all(|i| q.contains(i)));
            assert_eq!(s.queries.pos_text, format!("The sound of {}", s.target_label));
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let m = synthetic(3, 7);
        let a = serde_json::to_string(&build_eval_mixtures(&m, 2, 2, 0.0, 5).unwrap()).unwrap();
        let b = serde_json::to_string(&build_eval_mixtures(&m, 2, 2, 0.0, 5).unwrap()).unwrap();
        let c = serde_json::to_string(&build_eval_mixtures(&m, 2, 2, 0.0, 6).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn insufficient_clips() {
        assert!(build_eval_mixtures(&synthetic(2, 2), 1, 2, 0.0, 0).is_err());
        assert!(build_eval_mixtures(&synthetic(2, 3), 5, 1, 0.0, 0).is_err());
    }
}
