use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{mel_spectrogram, MelConfig, Waveform};
use crate::embedding::{prompt_for, EmbeddingBackend};
use crate::encoder::{reshape_to_patches, Encoder, EncoderConfig, PatchSequence};
use crate::error::{Error, Result};
use crate::evaluation::cosine;
use crate::nn::{init_linear, linear};
use crate::scalar::Scalar;
use crate::tape::{AdamW, AdamWConfig, Bind, Graph, NodeId, ParamStore};
use crate::training::Clip;

pub const AUDIO_ENCODER_PREFIX: &str = "audio.enc";
pub const UNKNOWN_WORD: &str = "<unk>";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyClapConfig {
    pub embed_dim: usize,
    pub word_dim: usize,
    pub text_hidden: usize,
    pub encoder: EncoderConfig,
    pub mel: MelConfig,
    /// Audio is cropped or zero-padded to this duration before embedding.
    pub clip_s: f64,
}

impl ToyClapConfig {
    pub fn toy() -> Self {
        ToyClapConfig {
            embed_dim: 64,
            word_dim: 32,
            text_hidden: 64,
            encoder: EncoderConfig::toy(),
            mel: MelConfig::toy(),
            clip_s: 1.0,
        }
    }
}

/// Everything besides the tensors needed to rebuild a backend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TowerState {
    pub config: ToyClapConfig,
    pub vocab: Vec<String>,
}

/// Lower-cased alphanumeric words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase).collect()
}

/// Bag-of-words text tower and windowed-attention audio tower sharing one
/// unit-norm embedding space.
#[derive(Clone)]
pub struct ToyClap<T: Scalar> {
    pub state: TowerState,
    pub params: ParamStore<T>,
    encoder: Encoder,
    index: BTreeMap<String, usize>,
    unk: usize,
}

impl<T: Scalar> ToyClap<T> {
    fn parts(state: &TowerState) -> Result<(Encoder, BTreeMap<String, usize>, usize)> {
        let encoder = Encoder::new(state.config.encoder.clone(), AUDIO_ENCODER_PREFIX)?;
        if state.vocab.is_empty() {
            return Err(Error::config("empty text vocabulary"));
        }
        let index: BTreeMap<String, usize> = state.vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        if index.len() != state.vocab.len() {
            return Err(Error::config("vocabulary contains duplicates"));
        }
        let unk = *index.get(UNKNOWN_WORD).ok_or_else(|| Error::config("vocabulary lacks the unknown-word entry"))?;
        Ok((encoder, index, unk))
    }

    fn init_params<R: Rng>(state: &TowerState, encoder: &Encoder, rng: &mut R) -> ParamStore<T> {
        let c = &state.config;
        let mut params = ParamStore::new();
        params.normal("text.emb", state.vocab.len(), c.word_dim, 1.0, true, rng);
        init_linear(&mut params, "text.fc1", c.word_dim, c.text_hidden, true, rng);
        init_linear(&mut params, "text.fc2", c.text_hidden, c.embed_dim, true, rng);
        encoder.init(&mut params, rng);
        let last = *c.encoder.level_dims().last().expect("levels");
        init_linear(&mut params, "audio.proj", last, c.embed_dim, true, rng);
        params
    }

    pub fn new<R: Rng>(config: ToyClapConfig, vocab: Vec<String>, rng: &mut R) -> Result<Self> {
        let state = TowerState { config, vocab };
        let (encoder, index, unk) = Self::parts(&state)?;
        let params = Self::init_params(&state, &encoder, rng);
        Ok(ToyClap { state, params, encoder, index, unk })
    }

    pub fn from_params(state: TowerState, params: ParamStore<T>) -> Result<Self> {
        let (encoder, index, unk) = Self::parts(&state)?;
        let reference: ParamStore<T> = Self::init_params(&state, &encoder, &mut ChaCha8Rng::seed_from_u64(0));
        for (name, v) in reference.iter() {
            match params.get(name) {
                Some(p) if p.dim() == v.dim() => {}
                _ => return Err(Error::config(format!("backend checkpoint lacks a {:?} tensor `{name}`", v.dim()))),
            }
        }
        Ok(ToyClap { state, params, encoder, index, unk })
    }

    /// Vocabulary of a set of captions and the prompts of their labels.
    pub fn vocabulary(clips: &[Clip<T>]) -> Vec<String> {
        let mut words = BTreeSet::from([UNKNOWN_WORD.to_string()]);
        for c in clips {
            words.extend(tokenize(&c.caption));
            words.extend(tokenize(&prompt_for(&c.label)));
        }
        words.into_iter().collect()
    }

    fn bag_of_words(&self, texts: &[&str]) -> Array2<T> {
        let mut m = Array2::zeros((texts.len(), self.state.vocab.len()));
        for (r, t) in texts.iter().enumerate() {
            let mut ids: Vec<usize> = tokenize(t).iter().map(|w| self.index.get(w).copied().unwrap_or(self.unk)).collect();
            if ids.is_empty() {
                ids.push(self.unk);
            }
            for &i in &ids {
                m[[r, i]] += T::of(1.0 / ids.len() as f64);
            }
        }
        m
    }

    pub(crate) fn text_node(&self, g: &mut Graph<T>, p: &Bind<T>, texts: &[&str]) -> NodeId {
        let bow = g.input(self.bag_of_words(texts));
        let emb = p.node(g, "text.emb");
        let x = g.matmul(bow, emb);
        let h = linear(g, p, "text.fc1", x, 1.0);
        let h = g.gelu(h);
        let y = linear(g, p, "text.fc2", h, 1.0);
        g.normalize_rows(y)
    }

    /// Log-mel patches of a waveform fitted to the configured duration.
    pub fn audio_features(&self, w: &Waveform<T>) -> Result<PatchSequence<T>> {
        let n = (self.state.config.clip_s * w.sample_rate() as f64).round() as usize;
        let mel = mel_spectrogram(&w.fit_length(n), &self.state.config.mel)?.log_compressed();
        reshape_to_patches(&mel.values, &self.state.config.encoder)
    }

    pub(crate) fn audio_node(&self, g: &mut Graph<T>, p: &Bind<T>, seqs: &[PatchSequence<T>]) -> Result<NodeId> {
        let feats = self.encoder.forward(g, p, seqs)?;
        let last = *feats.levels.last().expect("levels");
        let grid = *feats.grids.last().expect("levels");
        let per = grid.per_example();
        let mut pool = Array2::zeros((grid.batch, grid.tokens()));
        for b in 0..grid.batch {
            for t in 0..per {
                pool[[b, b * per + t]] = T::of(1.0 / per as f64);
            }
        }
        let pool = g.input(pool);
        let pooled = g.matmul(pool, last);
        let y = linear(g, p, "audio.proj", pooled, 1.0);
        Ok(g.normalize_rows(y))
    }

    fn rows(m: &Array2<T>) -> Vec<Array1<T>> {
        m.rows().into_iter().map(|r| r.to_owned()).collect()
    }
}

impl<T: Scalar> EmbeddingBackend<T> for ToyClap<T> {
    fn dim(&self) -> usize {
        self.state.config.embed_dim
    }

    fn encode_text(&self, text: &str) -> Result<Array1<T>> {
        let mut g = Graph::new();
        let y = self.text_node(&mut g, &Bind::frozen(&self.params), &[text]);
        Ok(Self::rows(g.value(y)).remove(0))
    }

    fn encode_audio(&self, w: &Waveform<T>) -> Result<Array1<T>> {
        Ok(self.encode_audio_batch(std::slice::from_ref(w))?.remove(0))
    }

    fn encode_audio_batch(&self, ws: &[Waveform<T>]) -> Result<Vec<Array1<T>>> {
        let mut out = Vec::with_capacity(ws.len());
        for chunk in ws.chunks(16) {
            let seqs = chunk.iter().map(|w| self.audio_features(w)).collect::<Result<Vec<_>>>()?;
            let mut g = Graph::new();
            let y = self.audio_node(&mut g, &Bind::frozen(&self.params), &seqs)?;
            out.extend(Self::rows(g.value(y)));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub temperature: f64,
    /// Probability of training on the label prompt instead of the caption.
    pub prompt_prob: f64,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn toy() -> Self {
        PretrainConfig { steps: 300, lr: 1e-3, temperature: 0.07, prompt_prob: 0.5, seed: 11 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
}

/// Symmetric contrastive training; every batch holds one clip per class so
/// that the only positive of each row is its own pair.
pub fn contrastive_pretrain<T: Scalar>(
    train: &[Clip<T>],
    model_cfg: ToyClapConfig,
    cfg: &PretrainConfig,
) -> Result<(ToyClap<T>, PretrainReport)> {
    let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, c) in train.iter().enumerate() {
        by_label.entry(c.label.as_str()).or_default().push(i);
    }
    if by_label.len() < 2 {
        return Err(Error::domain("contrastive pretraining needs at least two classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ToyClap::new(model_cfg, ToyClap::vocabulary(train), &mut rng)?;
    let feats = train.iter().map(|c| model.audio_features(&c.audio)).collect::<Result<Vec<_>>>()?;
    let prompts: BTreeMap<&str, String> = by_label.keys().map(|l| (*l, prompt_for(l))).collect();
    let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() });
    let inv_t = T::of(1.0 / cfg.temperature);
    let targets: Vec<usize> = (0..by_label.len()).collect();
    let mut report = PretrainReport::default();
    for step in 0..cfg.steps {
        let picks: Vec<usize> = by_label.values().map(|v| *v.choose(&mut rng).expect("non-empty class")).collect();
        let texts: Vec<&str> = picks
            .iter()
            .map(|&i| if rng.random_bool(cfg.prompt_prob) { prompts[train[i].label.as_str()].as_str() } else { train[i].caption.as_str() })
            .collect();
        let seqs: Vec<_> = picks.iter().map(|&i| feats[i].clone()).collect();
        let mut g = Graph::new();
        let p = Bind::trainable(&model.params);
        let a = model.audio_node(&mut g, &p, &seqs)?;
        let t = model.text_node(&mut g, &p, &texts);
        let at = g.matmul_nt(a, t);
        let at = g.scale(at, inv_t);
        let ta = g.matmul_nt(t, a);
        let ta = g.scale(ta, inv_t);
        let l1 = g.cross_entropy(at, targets.clone());
        let l2 = g.cross_entropy(ta, targets.clone());
        let l = g.add(l1, l2);
        let l = g.scale(l, T::of(0.5));
        let loss = g.scalar(l).to_f64_lossy();
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("contrastive loss {loss} at step {step}")));
        }
        let grads = g.backward(l);
        let lr = cfg.lr * (1.0 - step as f64 / cfg.steps as f64).max(0.05);
        opt.step(&mut model.params, &grads, lr);
        report.losses.push(loss);
        if step % 50 == 0 {
            log::info!("pretrain step {step}: loss {loss:.4}");
        }
    }
    Ok((model, report))
}

/// Label whose prompt is most similar to the clip; ties go to the
/// lexicographically smallest label.
pub fn zero_shot_classify<T: Scalar>(backend: &dyn EmbeddingBackend<T>, w: &Waveform<T>, labels: &[String]) -> Result<String> {
    let e = backend.encode_audio(w)?;
    let prompts = labels.iter().map(|l| backend.encode_text(&prompt_for(l))).collect::<Result<Vec<_>>>()?;
    pick_label(&e, labels, &prompts)
}

fn pick_label<T: Scalar>(e: &Array1<T>, labels: &[String], prompts: &[Array1<T>]) -> Result<String> {
    let mut best: Option<(f64, &String)> = None;
    for (l, p) in labels.iter().zip(prompts) {
        let s = cosine(e, p)?;
        best = match best {
            Some((bs, bl)) if bs > s || (bs == s && bl <= l) => Some((bs, bl)),
            _ => Some((s, l)),
        };
    }
    best.map(|(_, l)| l.clone()).ok_or_else(|| Error::domain("no labels to classify against"))
}

/// Fraction of clips whose zero-shot label matches their own.
pub fn zero_shot_accuracy<T: Scalar>(backend: &dyn EmbeddingBackend<T>, clips: &[Clip<T>], labels: &[String]) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::domain("no clips to classify"));
    }
    let prompts = labels.iter().map(|l| backend.encode_text(&prompt_for(l))).collect::<Result<Vec<_>>>()?;
    let audio: Vec<_> = clips.iter().map(|c| c.audio.clone()).collect();
    let embs = backend.encode_audio_batch(&audio)?;
    let mut correct = 0;
    for (c, e) in clips.iter().zip(&embs) {
        correct += (pick_label(e, labels, &prompts)? == c.label) as usize;
    }
    Ok(correct as f64 / clips.len() as f64)
}

/// Mean cosine of each clip with its own caption minus the mean cosine with
/// captions of clips from other classes.
pub fn pairing_margin<T: Scalar>(backend: &dyn EmbeddingBackend<T>, clips: &[Clip<T>]) -> Result<f64> {
    let audio: Vec<_> = clips.iter().map(|c| c.audio.clone()).collect();
    let a = backend.encode_audio_batch(&audio)?;
    let t = clips.iter().map(|c| backend.encode_text(&c.caption)).collect::<Result<Vec<_>>>()?;
    let (mut paired, mut np) = (0.0, 0usize);
    let (mut unpaired, mut nu) = (0.0, 0usize);
    for i in 0..clips.len() {
        for j in 0..clips.len() {
            if i == j {
                paired += cosine(&a[i], &t[j])?;
                np += 1;
            } else if clips[i].label != clips[j].label {
                unpaired += cosine(&a[i], &t[j])?;
                nu += 1;
            }
        }
    }
    if np == 0 || nu == 0 {
        return Err(Error::domain("need clips of at least two classes"));
    }
    Ok(paired / np as f64 - unpaired / nu as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyclap::{generate_corpus, CorpusConfig};

    #[test]
    fn tokenizer() {
        assert_eq!(tokenize("The sound of noise-band!"), vec!["the", "sound", "of", "noise", "band"]);
    }

    #[test]
    fn outputs_are_unit_norm() {
        let corpus = generate_corpus::<f64>(&CorpusConfig { per_class: 2, ..CorpusConfig::toy() }).unwrap();
        let clips = corpus.split("train");
        let m = ToyClap::<f64>::new(ToyClapConfig::toy(), ToyClap::vocabulary(&clips), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for e in [m.encode_text("a loud hiss").unwrap(), m.encode_text("zzz unknown").unwrap(), m.encode_audio(&clips[0].audio).unwrap()] {
            assert!((e.dot(&e).sqrt() - 1.0).abs() < 1e-6);
            assert_eq!(e.len(), 64);
        }
        let short = clips[0].audio.slice(0, 1000);
        let e = m.encode_audio(&short).unwrap();
        assert!((e.dot(&e).sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn classification_ties_and_single_label() {
        let e = ndarray::array![1.0, 0.0];
        let labels = vec!["b".to_string(), "a".to_string()];
        let prompts = vec![ndarray::array![0.0, 1.0], ndarray::array![0.0, 1.0]];
        assert_eq!(pick_label(&e, &labels, &prompts).unwrap(), "a");
        assert_eq!(pick_label(&e, &labels[..1], &prompts[..1]).unwrap(), "b");
        assert_eq!(pick_label(&(e.clone() * 7.0), &labels, &[ndarray::array![1.0, 0.1], ndarray::array![0.1, 1.0]]).unwrap(), "b");
        assert!(pick_label::<f64>(&e, &[], &[]).is_err());
    }

    #[test]
    fn pretraining_is_deterministic_and_learns() {
        let corpus = generate_corpus::<f32>(&CorpusConfig { per_class: 6, ..CorpusConfig::toy() }).unwrap();
        let train = corpus.split("train");
        let cfg = PretrainConfig { steps: 40, ..PretrainConfig::toy() };
        let (a, ra) = contrastive_pretrain(&train, ToyClapConfig::toy(), &cfg).unwrap();
        let (b, rb) = contrastive_pretrain(&train, ToyClapConfig::toy(), &cfg).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.encode_text("a tone").unwrap(), b.encode_text("a tone").unwrap());
        let head: f64 = ra.losses[..10].iter().sum();
        let tail: f64 = ra.losses[30..].iter().sum();
        assert!(tail < head, "{head} -> {tail}");
        assert!(contrastive_pretrain(&train[..2], ToyClapConfig::toy(), &cfg).is_err());
    }
}
