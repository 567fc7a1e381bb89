use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{class_by_name, default_classes, synth_event};
use crate::dsp::{read_wav, write_wav};
use crate::error::{Error, Result};
use crate::evaluation::{Manifest, ManifestEntry};
use crate::scalar::Scalar;
use crate::training::Clip;

pub const SPLITS: [&str; 4] = ["train", "val", "test", "query"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub classes: Vec<String>,
    pub per_class: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
    /// Fractions of each class assigned to train, val and test; the rest
    /// become query clips.
    pub fractions: [f64; 3],
}

impl CorpusConfig {
    pub fn toy() -> Self {
        CorpusConfig {
            classes: default_classes().into_iter().map(|c| c.name).collect(),
            per_class: 100,
            duration_s: 1.0,
            sample_rate: 8000,
            seed: 2024,
            fractions: [0.6, 0.1, 0.2],
        }
    }

    fn split_of(&self, i: usize) -> &'static str {
        let n = self.per_class as f64;
        let mut edge = 0.0;
        for (k, f) in self.fractions.iter().enumerate() {
            edge += f * n;
            if (i as f64) < edge.round() {
                return SPLITS[k];
            }
        }
        SPLITS[3]
    }
}

const OPENERS: [&str; 6] = ["a", "a soft", "a loud", "a distant", "a steady", "the sound of"];
const CLOSERS: [&str; 4] = ["", " nearby", " in a quiet room", " outdoors"];

/// Caption from a label with randomised modifiers.
pub fn caption_for<R: rand::Rng>(label: &str, rng: &mut R) -> String {
    let o = OPENERS.choose(rng).expect("non-empty");
    let c = CLOSERS.choose(rng).expect("non-empty");
    format!("{o} {label}{c}")
}

fn slug(label: &str) -> String {
    label.replace(' ', "_")
}

#[derive(Clone, Debug)]
pub struct ToyCorpus<T: Scalar> {
    pub manifest: Manifest,
    pub clips: BTreeMap<String, Clip<T>>,
}

impl<T: Scalar> ToyCorpus<T> {
    /// Clips of one split in manifest order.
    pub fn split(&self, split: &str) -> Vec<Clip<T>> {
        self.manifest.entries.iter().filter(|e| e.split == split).map(|e| self.clips[&e.id].clone()).collect()
    }

    pub fn clips_of(&self, manifest: &Manifest) -> Result<Vec<Clip<T>>> {
        manifest
            .entries
            .iter()
            .map(|e| self.clips.get(&e.id).cloned().ok_or_else(|| Error::domain(format!("clip `{}` missing", e.id))))
            .collect()
    }

    /// Writes every clip as a wav file next to `manifest.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for e in &self.manifest.entries {
            write_wav(&dir.join(&e.path), &self.clips[&e.id].audio)?;
        }
        self.manifest.save(&dir.join("manifest.json"))
    }
}

/// Every clip draws from its own RNG stream, so a clip does not depend on
/// how many others are generated.
pub fn generate_corpus<T: Scalar>(cfg: &CorpusConfig) -> Result<ToyCorpus<T>> {
    if cfg.classes.len() < 2 {
        return Err(Error::domain("a corpus needs at least two classes"));
    }
    let mut entries = Vec::new();
    let mut clips = BTreeMap::new();
    for (ci, name) in cfg.classes.iter().enumerate() {
        let cls = class_by_name(name)?;
        for i in 0..cfg.per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(((ci as u64) << 32) | i as u64);
            let audio = synth_event::<T, _>(&cls, cfg.duration_s, cfg.sample_rate, &mut rng)?;
            let id = format!("{}_{i:04}", slug(name));
            let caption = caption_for(name, &mut rng);
            entries.push(ManifestEntry {
                id: id.clone(),
                label: name.clone(),
                caption: caption.clone(),
                split: cfg.split_of(i).to_string(),
                path: format!("{id}.wav"),
            });
            clips.insert(id.clone(), Clip { id, label: name.clone(), caption, audio });
        }
    }
    Ok(ToyCorpus { manifest: Manifest::new(cfg.sample_rate, entries)?, clips })
}

/// Reads `manifest.json` and the clips it lists from `dir`.
pub fn load_corpus<T: Scalar>(dir: &Path) -> Result<ToyCorpus<T>> {
    let manifest = Manifest::load(&dir.join("manifest.json"))?;
    let mut clips = BTreeMap::new();
    for e in &manifest.entries {
        let audio = read_wav::<T>(&dir.join(&e.path))?;
        clips.insert(e.id.clone(), Clip { id: e.id.clone(), label: e.label.clone(), caption: e.caption.clone(), audio });
    }
    Ok(ToyCorpus { manifest, clips })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small() -> CorpusConfig {
        CorpusConfig { classes: vec!["tone".into(), "hiss".into()], per_class: 10, duration_s: 0.25, ..CorpusConfig::toy() }
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let c = generate_corpus::<f32>(&small()).unwrap();
        let sets: Vec<BTreeSet<&str>> =
            SPLITS.iter().map(|s| c.manifest.entries.iter().filter(|e| e.split == *s).map(|e| e.id.as_str()).collect()).collect();
        for i in 0..4 {
            for j in i + 1..4 {
                assert!(sets[i].is_disjoint(&sets[j]));
            }
        }
        assert_eq!(sets.iter().map(|s| s.len()).collect::<Vec<_>>(), vec![12, 2, 4, 2]);
    }

    #[test]
    fn clips_do_not_depend_on_corpus_size() {
        let a = generate_corpus::<f32>(&small()).unwrap();
        let b = generate_corpus::<f32>(&CorpusConfig { per_class: 3, ..small() }).unwrap();
        assert_eq!(a.clips["hiss_0002"].audio, b.clips["hiss_0002"].audio);
        assert_eq!(a.clips["hiss_0002"].caption, b.clips["hiss_0002"].caption);
    }

    #[test]
    fn disk_round_trip() {
        let c = generate_corpus::<f32>(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.write(dir.path()).unwrap();
        let back = load_corpus::<f32>(dir.path()).unwrap();
        assert_eq!(back.manifest, c.manifest);
        assert_eq!(back.clips["tone_0001"].audio, c.clips["tone_0001"].audio);
    }

    #[test]
    fn single_class_rejected() {
        assert!(generate_corpus::<f32>(&CorpusConfig { classes: vec!["tone".into()], ..small() }).is_err());
    }
}
