use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::{Decoder, DecoderConfig, Mask};
use crate::dsp::{
    istft, magphase, mask_magphase, mel_spectrogram, resample, stft, MagPhase, MelConfig, StftConfig, Waveform,
};
use crate::embedding::ConditionalEmbedding;
use crate::encoder::{reshape_to_patches, Encoder, EncoderConfig, PatchSequence};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Bind, Graph, NodeId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub sample_rate: u32,
    /// Training clip length; longer inputs go through segmented inference.
    pub segment_s: f64,
    pub stft: StftConfig,
    pub mel: MelConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Query embedding width `D`; the condition has `2D` entries.
    pub embed_dim: usize,
}

impl EngineConfig {
    pub fn toy() -> Self {
        EngineConfig {
            sample_rate: 8000,
            segment_s: 1.0,
            stft: StftConfig::toy(),
            mel: MelConfig::toy(),
            encoder: EncoderConfig::toy(),
            decoder: DecoderConfig::toy(),
            embed_dim: 64,
        }
    }

    /// Quarter-second segments and narrow layers, for gradient checks.
    pub fn tiny() -> Self {
        EngineConfig {
            segment_s: 0.25,
            encoder: EncoderConfig::tiny(),
            decoder: DecoderConfig::tiny(),
            embed_dim: 8,
            ..Self::toy()
        }
    }

    pub fn paper() -> Self {
        EngineConfig {
            sample_rate: 32_000,
            segment_s: 10.0,
            stft: StftConfig::paper(),
            mel: MelConfig::paper(),
            encoder: EncoderConfig::paper(),
            decoder: DecoderConfig::paper(),
            embed_dim: 512,
        }
    }

    pub fn segment_samples(&self) -> usize {
        (self.segment_s * self.sample_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.mel.validate()?;
        self.encoder.validate()?;
        if self.mel.n_mels != self.encoder.mel_bins {
            return Err(Error::config("mel band count and encoder input width differ"));
        }
        let frames = self.mel.frame_count(self.segment_samples(), self.sample_rate);
        if frames > self.encoder.max_frames {
            return Err(Error::config(format!(
                "a {} s segment yields {frames} mel frames, encoder accepts {}",
                self.segment_s, self.encoder.max_frames
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embedding width must be positive"));
        }
        Ok(())
    }
}

/// Everything the network reads from one mixture.
#[derive(Clone, Debug)]
pub struct MixtureFeatures<T: Scalar> {
    pub patches: PatchSequence<T>,
    pub magphase: MagPhase<T>,
    /// `log(1 + |X|)`, frames × bins.
    pub log_mag: Array2<T>,
}

/// Anything that maps a mixture and a condition to an estimate.
pub trait Separator<T: Scalar>: Send + Sync {
    fn sample_rate(&self) -> u32;

    fn segment_samples(&self) -> usize;

    /// Separates a mixture no longer than one segment.
    fn separate(&self, mixture: &Waveform<T>, condition: &ConditionalEmbedding<T>) -> Result<Waveform<T>>;

    /// Separates several mixtures, each with its own condition.
    fn separate_many(&self, mixtures: &[Waveform<T>], conditions: &[ConditionalEmbedding<T>]) -> Result<Vec<Waveform<T>>> {
        if mixtures.len() != conditions.len() {
            return Err(Error::domain("one condition per mixture is required"));
        }
        mixtures.iter().zip(conditions).map(|(m, c)| separate(self, m, c)).collect()
    }
}

/// Returns the mixture unchanged; the zero-improvement baseline.
pub struct IdentitySeparator {
    pub sample_rate: u32,
    pub segment_samples: usize,
}

impl<T: Scalar> Separator<T> for IdentitySeparator {
    fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    fn segment_samples(&self) -> usize {
        self.segment_samples
    }

    fn separate(&self, mixture: &Waveform<T>, _condition: &ConditionalEmbedding<T>) -> Result<Waveform<T>> {
        Ok(mixture.clone())
    }
}

/// Encoder with LoRA adapters plus decoder, and the partition of their
/// tensors into frozen and trainable.
#[derive(Clone)]
pub struct SeparationEngine<T: Scalar> {
    pub cfg: EngineConfig,
    pub params: ParamStore<T>,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

pub const ENCODER_PREFIX: &str = "enc";
pub const DECODER_PREFIX: &str = "dec";

impl<T: Scalar> SeparationEngine<T> {
    fn modules(cfg: &EngineConfig) -> Result<(Encoder, Decoder)> {
        cfg.validate()?;
        let encoder = Encoder::new(cfg.encoder.clone(), ENCODER_PREFIX)?;
        let decoder = Decoder::new(
            cfg.decoder.clone(),
            cfg.encoder.clone(),
            2 * cfg.embed_dim,
            cfg.stft.bins(),
            DECODER_PREFIX,
        )?;
        Ok((encoder, decoder))
    }

    /// Builds an engine around existing tensors, checking that every tensor
    /// the architecture needs is present with the right shape.
    pub fn from_params(cfg: EngineConfig, params: ParamStore<T>) -> Result<Self> {
        let (encoder, decoder) = Self::modules(&cfg)?;
        let mut reference = ParamStore::<T>::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        encoder.init(&mut reference, &mut rng);
        encoder.add_lora(&mut reference, &mut rng);
        decoder.init(&mut reference, &mut rng);
        for (name, v) in reference.iter() {
            match params.get(name) {
                None => return Err(Error::config(format!("checkpoint lacks tensor `{name}`"))),
                Some(p) if p.dim() != v.dim() => {
                    return Err(Error::config(format!("tensor `{name}` has shape {:?}, expected {:?}", p.dim(), v.dim())))
                }
                _ => {}
            }
        }
        Ok(SeparationEngine { cfg, params, encoder, decoder })
    }

    /// Random initialisation of every tensor.
    pub fn new<R: Rng>(cfg: EngineConfig, rng: &mut R) -> Result<Self> {
        let (encoder, decoder) = Self::modules(&cfg)?;
        let mut params = ParamStore::new();
        encoder.init(&mut params, rng);
        encoder.add_lora(&mut params, rng);
        decoder.init(&mut params, rng);
        let mut e = SeparationEngine { cfg, params, encoder, decoder };
        e.apply_freeze_policy();
        Ok(e)
    }

    /// Takes the encoder weights stored under `src_prefix` (for example the
    /// audio tower of the query backend), adds fresh adapters and a decoder.
    pub fn from_pretrained_encoder<R: Rng>(
        cfg: EngineConfig,
        pretrained: &ParamStore<T>,
        src_prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let mut e = Self::new(cfg, rng)?;
        let base: Vec<String> = e
            .params
            .iter()
            .map(|(n, _)| n.to_string())
            .filter(|n| n.starts_with(ENCODER_PREFIX) && !Encoder::is_lora_tensor(n))
            .collect();
        for name in base {
            let src = format!("{src_prefix}{}", &name[ENCODER_PREFIX.len()..]);
            let v = pretrained
                .get(&src)
                .ok_or_else(|| Error::config(format!("pretrained weights lack `{src}`")))?;
            let id = e.params.require(&name)?;
            if v.dim() != e.params.value(id).dim() {
                return Err(Error::config(format!("pretrained `{src}` has shape {:?}", v.dim())));
            }
            *e.params.value_mut(id) = v.clone();
        }
        e.apply_freeze_policy();
        Ok(e)
    }

    /// Only adapters and decoder tensors train; the encoder base stays frozen.
    pub fn apply_freeze_policy(&mut self) {
        self.params
            .set_trainable_where(|n| Encoder::is_lora_tensor(n) || n.starts_with(DECODER_PREFIX));
    }

    pub fn prepare(&self, mixture: &Waveform<T>) -> Result<MixtureFeatures<T>> {
        if mixture.sample_rate() != self.cfg.sample_rate {
            return Err(Error::domain(format!(
                "mixture at {} Hz, engine expects {} Hz",
                mixture.sample_rate(),
                self.cfg.sample_rate
            )));
        }
        let mel = mel_spectrogram(mixture, &self.cfg.mel)?.log_compressed();
        let patches = reshape_to_patches(&mel.values, &self.cfg.encoder)?;
        let mp = magphase(&stft(mixture, &self.cfg.stft)?);
        let log_mag = mp.magnitude.mapv(|m| m.ln_1p());
        Ok(MixtureFeatures { patches, magphase: mp, log_mag })
    }

    /// Mask node `(batch · frames) × bins` for a batch of equal-length mixtures.
    pub fn forward_masks(
        &self,
        g: &mut Graph<T>,
        p: &Bind<T>,
        feats: &[MixtureFeatures<T>],
        conditions: &Array2<T>,
    ) -> Result<NodeId> {
        let first = feats.first().ok_or_else(|| Error::domain("empty batch"))?;
        if conditions.nrows() != feats.len() {
            return Err(Error::domain("one condition per mixture is required"));
        }
        let frames = first.magphase.dim().0;
        if feats.iter().any(|f| f.magphase.dim() != first.magphase.dim()) {
            return Err(Error::domain("batch mixtures differ in length"));
        }
        let seqs: Vec<PatchSequence<T>> = feats.iter().map(|f| f.patches.clone()).collect();
        let layers = self.encoder.forward(g, p, &seqs)?;
        let cond = g.input(conditions.clone());
        let hd = self.decoder.aggregate(g, p, &layers, cond, &(&first.patches).into(), frames)?;
        let views: Vec<_> = feats.iter().map(|f| f.log_mag.view()).collect();
        let mag = g.input(ndarray::concatenate(Axis(0), &views).expect("equal widths"));
        self.decoder.masknet(g, p, hd, mag, feats.len())
    }

    pub fn masks(&self, feats: &[MixtureFeatures<T>], conditions: &Array2<T>) -> Result<Vec<Mask<T>>> {
        let mut g = Graph::new();
        let m = self.forward_masks(&mut g, &Bind::frozen(&self.params), feats, conditions)?;
        let all = g.value(m);
        let frames = all.nrows() / feats.len();
        (0..feats.len())
            .map(|b| Mask::new(all.slice(ndarray::s![b * frames..(b + 1) * frames, ..]).to_owned()))
            .collect()
    }

    /// Separates a batch of segment-length mixtures at the engine rate.
    pub fn separate_batch(&self, mixtures: &[Waveform<T>], conditions: &[ConditionalEmbedding<T>]) -> Result<Vec<Waveform<T>>> {
        for c in conditions {
            if c.dim() != self.cfg.embed_dim {
                return Err(Error::config(format!(
                    "condition built from {}-d embeddings, engine expects {}",
                    c.dim(),
                    self.cfg.embed_dim
                )));
            }
        }
        let feats = mixtures.iter().map(|m| self.prepare(m)).collect::<Result<Vec<_>>>()?;
        let rows: Vec<_> = conditions.iter().map(|c| c.vector.view()).collect();
        let cond = ndarray::stack(Axis(0), &rows).map_err(|_| Error::domain("conditions differ in length"))?;
        let masks = self.masks(&feats, &cond)?;
        feats
            .iter()
            .zip(masks)
            .map(|(f, m)| istft(&mask_magphase(m.values(), &f.magphase)?.to_complex()))
            .collect()
    }
}

impl<T: Scalar> Separator<T> for SeparationEngine<T> {
    fn sample_rate(&self) -> u32 {
        self.cfg.sample_rate
    }

    fn segment_samples(&self) -> usize {
        self.cfg.segment_samples()
    }

    fn separate(&self, mixture: &Waveform<T>, condition: &ConditionalEmbedding<T>) -> Result<Waveform<T>> {
        let seg = self.cfg.segment_samples();
        if mixture.len() > seg {
            return Err(Error::domain(format!(
                "mixture of {} samples exceeds the {seg}-sample segment; use segmented inference",
                mixture.len()
            )));
        }
        let padded = mixture.fit_length(seg);
        let out = self.separate_batch(std::slice::from_ref(&padded), std::slice::from_ref(condition))?;
        Ok(out[0].fit_length(mixture.len()))
    }

    fn separate_many(&self, mixtures: &[Waveform<T>], conditions: &[ConditionalEmbedding<T>]) -> Result<Vec<Waveform<T>>> {
        let seg = self.cfg.segment_samples();
        if mixtures.len() != conditions.len() {
            return Err(Error::domain("one condition per mixture is required"));
        }
        if mixtures.iter().any(|m| m.sample_rate() != self.cfg.sample_rate || m.len() > seg) {
            return mixtures.iter().zip(conditions).map(|(m, c)| separate(self, m, c)).collect();
        }
        let padded: Vec<_> = mixtures.iter().map(|m| m.fit_length(seg)).collect();
        let out = self.separate_batch(&padded, conditions)?;
        Ok(out.into_iter().zip(mixtures).map(|(y, m)| y.fit_length(m.len())).collect())
    }
}

/// Full pipeline for one mixture, resampling to and from the engine rate.
pub fn separate<T: Scalar, S: Separator<T> + ?Sized>(
    engine: &S,
    mixture: &Waveform<T>,
    condition: &ConditionalEmbedding<T>,
) -> Result<Waveform<T>> {
    if mixture.sample_rate() == engine.sample_rate() {
        return engine.separate(mixture, condition);
    }
    let x = resample(mixture, engine.sample_rate())?;
    let y = engine.separate(&x, condition)?;
    Ok(resample(&y, mixture.sample_rate())?.fit_length(mixture.len()))
}

/// Overlapping segments cross-faded with linear ramps; the weights are
/// renormalised so they sum to one at every sample.
pub fn segmented_inference<T: Scalar, S: Separator<T> + ?Sized>(
    engine: &S,
    long: &Waveform<T>,
    condition: &ConditionalEmbedding<T>,
    segment_s: f64,
    overlap_s: f64,
) -> Result<Waveform<T>> {
    if !(segment_s > 0.0) || !(overlap_s >= 0.0) || overlap_s >= segment_s {
        return Err(Error::domain(format!("overlap {overlap_s} s must be shorter than the {segment_s} s segment")));
    }
    let rate = long.sample_rate() as f64;
    let seg = (segment_s * rate).round() as usize;
    let ov = (overlap_s * rate).round() as usize;
    let n = long.len();
    if n <= seg {
        return separate(engine, long, condition);
    }
    let hop = seg - ov;
    let mut starts = vec![0];
    while starts.last().unwrap() + seg < n {
        let next = starts.last().unwrap() + hop;
        starts.push(if next + seg >= n { n - seg } else { next });
    }
    let mut acc = vec![T::zero(); n];
    let mut norm = vec![T::zero(); n];
    for (i, &s) in starts.iter().enumerate() {
        let y = separate(engine, &long.slice(s, s + seg), condition)?;
        let fade_in = if i > 0 { starts[i - 1] + seg - s } else { 0 };
        let fade_out = if i + 1 < starts.len() { s + seg - starts[i + 1] } else { 0 };
        for (k, &v) in y.samples().iter().enumerate() {
            let mut w = 1.0f64;
            if k < fade_in {
                w = w.min((k as f64 + 0.5) / fade_in as f64);
            }
            if k + fade_out >= seg {
                w = w.min(((seg - k) as f64 - 0.5) / fade_out as f64);
            }
            let w = T::of(w);
            acc[s + k] += w * v;
            norm[s + k] += w;
        }
    }
    let out: Vec<T> = acc.iter().zip(&norm).map(|(&a, &w)| a / w).collect();
    Waveform::new(out, long.sample_rate())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand_chacha::ChaCha8Rng;

    use crate::embedding::{build_condition, Modality, QueryEmbedding};

    fn engine() -> SeparationEngine<f64> {
        SeparationEngine::new(EngineConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn cond(d: usize, seed: u64) -> ConditionalEmbedding<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0));
        let e = QueryEmbedding::unit(v, Modality::Text).unwrap();
        build_condition(Some(&e), None).unwrap()
    }

    fn noise(n: usize, rate: u32, seed: u64) -> Waveform<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..n).map(|_| rng.random_range(-0.5..0.5)).collect(), rate).unwrap()
    }

    #[test]
    fn masks_shape_range_and_determinism() {
        let e = engine();
        let n = e.cfg.segment_samples();
        let feats: Vec<_> = (0..2).map(|s| e.prepare(&noise(n, 8000, s)).unwrap()).collect();
        let c = ndarray::stack(Axis(0), &[cond(8, 1).vector.view(), cond(8, 2).vector.view()]).unwrap();
        let a = e.masks(&feats, &c).unwrap();
        let b = e.masks(&feats, &c).unwrap();
        assert_eq!(a.len(), 2);
        for (m, f) in a.iter().zip(&feats) {
            assert_eq!(m.values().dim(), f.magphase.dim());
            assert!(m.values().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        assert_eq!(a[0].values(), b[0].values());
        assert_ne!(a[0].values(), a[1].values());
    }

    #[test]
    fn separation_contracts() {
        let e = engine();
        let n = e.cfg.segment_samples();
        let x = noise(n - 100, 8000, 4);
        let y = e.separate(&x, &cond(8, 5)).unwrap();
        assert_eq!(y.len(), x.len());
        assert!(e.separate(&noise(n + 1, 8000, 4), &cond(8, 5)).is_err());
        assert!(e.separate(&x, &cond(4, 5)).is_err());
        let up = separate(&e, &noise(n, 16000, 6), &cond(8, 5)).unwrap();
        assert_eq!((up.len(), up.sample_rate()), (n, 16000));
        let many = e.separate_many(&[x.clone(), x.clone()], &[cond(8, 5), cond(8, 5)]).unwrap();
        assert_eq!(many[0], y);
    }

    #[test]
    fn checkpoint_tensors_are_validated() {
        let e = engine();
        let mut p = e.params.clone();
        assert!(SeparationEngine::from_params(e.cfg.clone(), p.clone()).is_ok());
        p.insert("dec.mask.head.w", ndarray::Array2::zeros((1, 1)), true);
        assert!(SeparationEngine::from_params(e.cfg.clone(), p).is_err());
    }

    #[test]
    fn pretrained_encoder_is_copied_and_frozen() {
        let src = engine();
        let mut renamed = ParamStore::new();
        for (n, v) in src.params.iter().filter(|(n, _)| n.starts_with("enc.") && !Encoder::is_lora_tensor(n)) {
            renamed.insert(&format!("tower{}", &n[3..]), v.clone(), true);
        }
        let e = SeparationEngine::from_pretrained_encoder(EngineConfig::tiny(), &renamed, "tower", &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let id = e.params.id("enc.patch.proj.w").unwrap();
        assert_eq!(e.params.value(id), src.params.get("enc.patch.proj.w").unwrap());
        assert!(!e.params.is_trainable(id));
        assert!(e.params.is_trainable(e.params.id("enc.s0.b0.attn.q.lora_b").unwrap()));
        assert!(SeparationEngine::<f64>::from_pretrained_encoder(EngineConfig::tiny(), &ParamStore::new(), "tower", &mut ChaCha8Rng::seed_from_u64(9)).is_err());
    }

    #[test]
    fn segmented_inference_identity_and_constant() {
        let id = IdentitySeparator { sample_rate: 100, segment_samples: 100 };
        let c = cond(4, 0);
        for n in [50, 100, 101, 250, 333] {
            let x = noise(n, 100, n as u64);
            let y = segmented_inference(&id, &x, &c, 1.0, 0.3).unwrap();
            assert_eq!(y.len(), n);
            assert!(y.samples().iter().zip(x.samples()).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        let flat = Waveform::new(vec![0.25; 517], 100).unwrap();
        let y = segmented_inference(&id, &flat, &c, 1.0, 0.5).unwrap();
        assert!(y.samples().iter().all(|v| (v - 0.25).abs() < 1e-12));
        assert!(segmented_inference(&id, &flat, &c, 1.0, 1.0).is_err());
    }
}
