use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::EngineConfig;
use crate::encoder::EncoderConfig;
use crate::dsp::MelConfig;
use crate::error::{Error, Result};
use crate::toyclap::{CorpusConfig, PretrainConfig, ToyClapConfig};
use crate::training::TrainConfig;

pub const WORKSPACE_ENV: &str = "QUERYSEP_WORKSPACE";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Toy,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_interferers: usize,
    pub shots: usize,
    pub snr_db: f64,
    pub seed: u64,
    pub polarities: String,
    pub modalities: String,
    pub gen_k: usize,
    pub text_audio_alpha: f64,
    pub batch_size: usize,
    /// Classes withheld from separation training for the zero-shot protocol.
    pub held_out: Vec<String>,
}

impl EvalConfig {
    pub fn toy() -> Self {
        EvalConfig {
            n_interferers: 1,
            shots: 5,
            snr_db: 0.0,
            seed: 10,
            polarities: "P,N,PN,PN-gen".into(),
            modalities: "text,audio,text+audio".into(),
            gen_k: 1,
            text_audio_alpha: 0.5,
            batch_size: 8,
            held_out: vec!["warble".into(), "noise band".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub backend: ToyClapConfig,
    pub pretrain: PretrainConfig,
    pub engine: EngineConfig,
    pub training: TrainConfig,
    pub evaluation: EvalConfig,
}

impl RunConfig {
    pub fn toy() -> Self {
        let mut c = RunConfig {
            profile: Profile::Toy,
            seed: 0,
            corpus: CorpusConfig::toy(),
            backend: ToyClapConfig::toy(),
            pretrain: PretrainConfig::toy(),
            engine: EngineConfig::toy(),
            training: TrainConfig::toy(),
            evaluation: EvalConfig::toy(),
        };
        c.reseed(2024);
        c
    }

    pub fn paper() -> Self {
        let mut c = RunConfig {
            profile: Profile::Paper,
            seed: 0,
            corpus: CorpusConfig { sample_rate: 32000, duration_s: 10.0, ..CorpusConfig::toy() },
            backend: ToyClapConfig {
                embed_dim: 512,
                word_dim: 128,
                text_hidden: 512,
                encoder: EncoderConfig::paper(),
                mel: MelConfig::paper(),
                clip_s: 10.0,
            },
            pretrain: PretrainConfig::toy(),
            engine: EngineConfig::paper(),
            training: TrainConfig::paper(),
            evaluation: EvalConfig { n_interferers: 5, shots: 10, ..EvalConfig::toy() },
        };
        c.reseed(2024);
        c
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Toy => Self::toy(),
            Profile::Paper => Self::paper(),
        }
    }

    /// Derives every module seed from one master seed.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.corpus.seed = seed;
        self.pretrain.seed = seed.wrapping_add(1);
        self.training.seed = seed.wrapping_add(2);
        self.evaluation.seed = seed.wrapping_add(3);
    }

    pub fn engine_init_seed(&self) -> u64 {
        self.seed.wrapping_add(4)
    }

    pub fn validate(&self) -> Result<()> {
        self.engine.validate()?;
        self.training.validate()?;
        self.backend.mel.validate()?;
        self.backend.encoder.validate()?;
        if self.engine.embed_dim != self.backend.embed_dim {
            return Err(Error::config(format!(
                "engine conditions on {}-d embeddings but the backend emits {}-d",
                self.engine.embed_dim, self.backend.embed_dim
            )));
        }
        if self.engine.encoder != self.backend.encoder {
            return Err(Error::config("engine and backend audio encoders must share one architecture"));
        }
        if self.engine.sample_rate != self.corpus.sample_rate {
            return Err(Error::config(format!(
                "corpus at {} Hz but the engine runs at {} Hz",
                self.corpus.sample_rate, self.engine.sample_rate
            )));
        }
        if self.evaluation.batch_size == 0 {
            return Err(Error::config("evaluation batch size must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("toml: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("toml: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Applies `dotted.key=value` overrides; values are parsed as TOML and
    /// fall back to plain strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).map_err(|e| Error::config(format!("toml: {e}")))?;
        for o in overrides {
            let (key, raw) = o.split_once('=').ok_or_else(|| Error::config(format!("override `{o}` is not key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let mut node = &mut root;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = node.as_table_mut().ok_or_else(|| Error::config(format!("`{key}` does not name a field")))?;
                if i + 1 == parts.len() {
                    if !table.contains_key(*part) {
                        return Err(Error::config(format!("unknown configuration field `{key}`")));
                    }
                    table.insert(part.to_string(), value.clone());
                    break;
                }
                node = table.get_mut(*part).ok_or_else(|| Error::config(format!("unknown configuration section in `{key}`")))?;
            }
        }
        root.try_into().map_err(|e: toml::de::Error| Error::config(format!("override: {e}")))
    }
}

/// Resolves relative paths against the workspace root: the explicit flag,
/// else the environment variable, else the current directory.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn resolve(flag: Option<&Path>) -> Self {
        let root = flag
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(WORKSPACE_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."));
        Workspace { root }
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_are_consistent() {
        RunConfig::toy().validate().unwrap();
        RunConfig::paper().validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::toy();
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn overrides() {
        let c = RunConfig::toy()
            .with_overrides(&["training.epochs=3".into(), "training.snr_db=[-10.0, 10.0]".into(), "evaluation.modalities=text".into()])
            .unwrap();
        assert_eq!(c.training.epochs, 3);
        assert_eq!(c.training.snr_db, crate::training::SnrSpec::Uniform([-10.0, 10.0]));
        assert_eq!(c.evaluation.modalities, "text");
        assert!(RunConfig::toy().with_overrides(&["training.nope=1".into()]).is_err());
        assert!(RunConfig::toy().with_overrides(&["training.epochs=\"x\"".into()]).is_err());
        let bad = RunConfig::toy().with_overrides(&["engine.embed_dim=32".into()]).unwrap();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn workspace_paths() {
        let w = Workspace::resolve(Some(Path::new("/ws")));
        assert_eq!(w.path(Path::new("a/b")), PathBuf::from("/ws/a/b"));
        assert_eq!(w.path(Path::new("/abs")), PathBuf::from("/abs"));
    }
}
