use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One clip of a corpus; `path` is relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: String,
    pub caption: String,
    pub split: String,
    pub path: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub sample_rate: u32,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(sample_rate: u32, entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::domain(format!("duplicate clip id `{}`", e.id)));
            }
        }
        Ok(Manifest { sample_rate, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.label.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Entries whose split equals `split`.
    pub fn split(&self, split: &str) -> Manifest {
        self.filter(|e| e.split == split)
    }

    pub fn filter(&self, f: impl Fn(&ManifestEntry) -> bool) -> Manifest {
        Manifest { sample_rate: self.sample_rate, entries: self.entries.iter().filter(|e| f(e)).cloned().collect() }
    }

    pub fn by_label(&self) -> BTreeMap<&str, Vec<&ManifestEntry>> {
        let mut m: BTreeMap<&str, Vec<&ManifestEntry>> = BTreeMap::new();
        for e in &self.entries {
            m.entry(e.label.as_str()).or_default().push(e);
        }
        m
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let m: Manifest = serde_json::from_str(&text)?;
        Manifest::new(m.sample_rate, m.entries)
    }
}

/// Splits a manifest into the clips of seen classes and those of the
/// held-out classes.
pub fn zero_shot_split(manifest: &Manifest, held_out: &BTreeSet<String>) -> Result<(Manifest, Manifest)> {
    if held_out.is_empty() {
        return Err(Error::domain("no classes held out"));
    }
    let labels: BTreeSet<String> = manifest.labels().into_iter().collect();
    if let Some(missing) = held_out.iter().find(|l| !labels.contains(*l)) {
        return Err(Error::domain(format!("held-out class `{missing}` not in manifest")));
    }
    if held_out.len() >= labels.len() {
        return Err(Error::domain("held-out classes cover every class"));
    }
    Ok((manifest.filter(|e| !held_out.contains(&e.label)), manifest.filter(|e| held_out.contains(&e.label))))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn synthetic(classes: usize, per_class: usize) -> Manifest {
        let entries = (0..classes)
            .flat_map(|c| {
                (0..per_class).map(move |i| ManifestEntry {
                    id: format!("c{c}_{i:04}"),
                    label: format!("class{c}"),
                    caption: format!("class{c} sound"),
                    split: "test".into(),
                    path: format!("c{c}_{i:04}.wav"),
                })
            })
            .collect();
        Manifest::new(8000, entries).unwrap()
    }

    #[test]
    fn hold_out_two_of_eight() {
        let m = synthetic(8, 3);
        let held: BTreeSet<String> = ["class2".to_string(), "class5".to_string()].into();
        let (train, unseen) = zero_shot_split(&m, &held).unwrap();
        assert_eq!(train.labels().len(), 6);
        assert_eq!(unseen.labels(), vec!["class2".to_string(), "class5".to_string()]);
        let train_ids: BTreeSet<_> = train.entries.iter().map(|e| &e.id).collect();
        assert!(unseen.entries.iter().all(|e| !train_ids.contains(&e.id)));
        assert_eq!(train.len() + unseen.len(), m.len());
    }

    #[test]
    fn degenerate_hold_outs_fail() {
        let m = synthetic(2, 2);
        assert!(zero_shot_split(&m, &BTreeSet::new()).is_err());
        let all: BTreeSet<String> = m.labels().into_iter().collect();
        assert!(zero_shot_split(&m, &all).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut m = synthetic(1, 2);
        m.entries[1].id = m.entries[0].id.clone();
        assert!(Manifest::new(8000, m.entries).is_err());
    }

    #[test]
    fn json_round_trip() {
        let m = synthetic(2, 2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        assert_eq!(Manifest::load(&p).unwrap(), m);
    }
}
