//! On-the-fly mixtures, the separation loss and the training loop.

mod metrics;

use std::collections::HashMap;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use metrics::{loss_value, sdr, sdr_slices, sisdr, sisdr_slices, SeparationLoss, EPS_REL};

use crate::decoder::SeparationEngine;
use crate::dsp::{MaskedIstft, Waveform};
use crate::embedding::{
    augment_query_audio, build_condition, interpolate, sample_polarity, AugmentConfig, ConditionalEmbedding,
    EmbeddingBackend, Modality, QueryEmbedding, QueryPolarityMode,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{AdamW, AdamWConfig, Bind, Graph};

/// Clips quieter than this RMS are treated as silent.
pub const SILENCE_RMS: f64 = 1e-4;

/// A labelled clip with its caption.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip<T: Scalar> {
    pub id: String,
    pub label: String,
    pub caption: String,
    pub audio: Waveform<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SnrSpec {
    Fixed(f64),
    Uniform([f64; 2]),
}

impl SnrSpec {
    pub fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            SnrSpec::Fixed(v) => v,
            SnrSpec::Uniform([lo, hi]) => rng.random_range(lo..=hi),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub snr_db: SnrSpec,
    pub lr_start: f64,
    pub lr_end: f64,
    pub decay_factor: f64,
    pub plateau_epochs: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
    pub val_examples: usize,
    pub augment: AugmentConfig,
}

impl TrainConfig {
    pub fn toy() -> Self {
        TrainConfig {
            lambda: 0.9,
            snr_db: SnrSpec::Fixed(0.0),
            lr_start: 1e-3,
            lr_end: 5e-5,
            decay_factor: 0.3,
            plateau_epochs: 5,
            batch_size: 8,
            epochs: 20,
            steps_per_epoch: 50,
            seed: 7,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-2,
            grad_clip: 5.0,
            val_examples: 32,
            augment: AugmentConfig::toy(),
        }
    }

    /// Base recipe with SNRs drawn uniformly from −10…10 dB.
    pub fn toy_finetune() -> Self {
        TrainConfig { snr_db: SnrSpec::Uniform([-10.0, 10.0]), ..Self::toy() }
    }

    pub fn paper() -> Self {
        TrainConfig {
            lr_start: 1e-4,
            lr_end: 5e-6,
            batch_size: 32,
            epochs: 150,
            steps_per_epoch: 1000,
            grad_clip: 0.0,
            val_examples: 256,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("lambda must lie in [0, 1]"));
        }
        if !(self.lr_end < self.lr_start) || !(self.lr_end > 0.0) {
            return Err(Error::config("learning rates must satisfy 0 < lr_end < lr_start"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::config("decay factor must lie in (0, 1)"));
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::config("batch size and steps per epoch must be positive"));
        }
        if let SnrSpec::Uniform([lo, hi]) = self.snr_db {
            if !(lo <= hi) {
                return Err(Error::config("SNR range must be ordered"));
            }
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: 1e-8, weight_decay: self.weight_decay }
    }
}

/// Scales `noise` (cropped or zero-padded to the target length) so that the
/// target-to-noise energy ratio equals `snr_db`.
pub fn mix_at_snr<T: Scalar>(target: &Waveform<T>, noise: &Waveform<T>, snr_db: f64) -> Result<(Waveform<T>, Waveform<T>)> {
    target.check_compatible(&target.clone())?;
    if target.sample_rate() != noise.sample_rate() {
        return Err(Error::domain("target and noise sample rates differ"));
    }
    let noise = noise.fit_length(target.len());
    let (rt, rn) = (target.rms().to_f64_lossy(), noise.rms().to_f64_lossy());
    if !(rt >= SILENCE_RMS) || !(rn >= SILENCE_RMS) {
        return Err(Error::SkipExample(format!("silent constituent (rms {rt:.2e} / {rn:.2e})")));
    }
    let et = target.energy().to_f64_lossy();
    let en = noise.energy().to_f64_lossy();
    let scale = (et / (en * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled = noise.scaled(T::of(scale));
    Ok((target.add(&scaled)?, scaled))
}

#[derive(Clone, Debug)]
pub struct TrainExample<T: Scalar> {
    pub mixture: Waveform<T>,
    pub target: Waveform<T>,
    pub noise: Waveform<T>,
    pub pos_text: String,
    pub neg_text: String,
    pub pos_audio: Waveform<T>,
    pub neg_audio: Waveform<T>,
    pub polarity: QueryPolarityMode,
    pub alpha_pos: f64,
    pub alpha_neg: f64,
    pub snr_db: f64,
}

/// Clip `a` is the target, clip `b` the interference; their captions and
/// augmented copies are the queries.
pub fn make_training_example<T: Scalar, R: Rng>(
    clip_a: &Clip<T>,
    clip_b: &Clip<T>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainExample<T>> {
    if clip_a.id == clip_b.id {
        return Err(Error::domain("a training mixture needs two distinct clips"));
    }
    let snr_db = cfg.snr_db.draw(rng);
    let polarity = sample_polarity(rng);
    let alpha_pos: f64 = rng.random();
    let alpha_neg: f64 = rng.random();
    let pos_audio = augment_query_audio(&clip_a.audio, &cfg.augment, rng)?;
    let neg_audio = augment_query_audio(&clip_b.audio, &cfg.augment, rng)?;
    let (mixture, noise) = mix_at_snr(&clip_a.audio, &clip_b.audio, snr_db)?;
    Ok(TrainExample {
        mixture,
        target: clip_a.audio.clone(),
        noise,
        pos_text: clip_a.caption.clone(),
        neg_text: clip_b.caption.clone(),
        pos_audio,
        neg_audio,
        polarity,
        alpha_pos,
        alpha_neg,
        snr_db,
    })
}

/// Draws examples from random pairs of clips with different labels,
/// redrawing pairs that contain silence.
pub fn draw_example<T: Scalar, R: Rng>(clips: &[Clip<T>], cfg: &TrainConfig, rng: &mut R) -> Result<TrainExample<T>> {
    if clips.len() < 2 {
        return Err(Error::domain("training needs at least two clips"));
    }
    for _ in 0..1000 {
        let a = rng.random_range(0..clips.len());
        let b = rng.random_range(0..clips.len());
        if clips[a].label == clips[b].label {
            continue;
        }
        match make_training_example(&clips[a], &clips[b], cfg, rng) {
            Err(Error::SkipExample(_)) => continue,
            other => return other,
        }
    }
    Err(Error::domain("could not draw a mixture of two different, non-silent classes"))
}

/// Embeds the queries of training examples through a frozen backend.
pub struct ConditionBuilder<'a, T: Scalar> {
    backend: &'a dyn EmbeddingBackend<T>,
    text: HashMap<String, QueryEmbedding<T>>,
}

impl<'a, T: Scalar> ConditionBuilder<'a, T> {
    pub fn new(backend: &'a dyn EmbeddingBackend<T>) -> Self {
        ConditionBuilder { backend, text: HashMap::new() }
    }

    pub fn text(&mut self, s: &str) -> Result<QueryEmbedding<T>> {
        if let Some(e) = self.text.get(s) {
            return Ok(e.clone());
        }
        let e = self.backend.text_query(s)?;
        self.text.insert(s.to_string(), e.clone());
        Ok(e)
    }

    /// Conditions for a batch, following each example's polarity and
    /// interpolation weights. Audio queries are embedded in one batch.
    pub fn conditions(&mut self, batch: &[TrainExample<T>]) -> Result<Vec<ConditionalEmbedding<T>>> {
        let mut audio = Vec::new();
        let mut slots = Vec::new();
        for (i, ex) in batch.iter().enumerate() {
            if ex.polarity.uses_positive() && ex.alpha_pos > 0.0 {
                slots.push((i, true));
                audio.push(ex.pos_audio.clone());
            }
            if ex.polarity.uses_negative() && ex.alpha_neg > 0.0 {
                slots.push((i, false));
                audio.push(ex.neg_audio.clone());
            }
        }
        let embedded = if audio.is_empty() { Vec::new() } else { self.backend.encode_audio_batch(&audio)? };
        let mut pos_a = vec![None; batch.len()];
        let mut neg_a = vec![None; batch.len()];
        for ((i, positive), e) in slots.into_iter().zip(embedded) {
            let q = QueryEmbedding::unit(e, Modality::Audio)?;
            if positive {
                pos_a[i] = Some(q);
            } else {
                neg_a[i] = Some(q);
            }
        }
        let mut out = Vec::with_capacity(batch.len());
        for (i, ex) in batch.iter().enumerate() {
            let pos = if ex.polarity.uses_positive() {
                Some(self.side(&ex.pos_text, pos_a[i].take(), ex.alpha_pos)?)
            } else {
                None
            };
            let neg = if ex.polarity.uses_negative() {
                Some(self.side(&ex.neg_text, neg_a[i].take(), ex.alpha_neg)?)
            } else {
                None
            };
            out.push(build_condition(pos.as_ref(), neg.as_ref())?);
        }
        Ok(out)
    }

    fn side(&mut self, text: &str, audio: Option<QueryEmbedding<T>>, alpha: f64) -> Result<QueryEmbedding<T>> {
        let t = self.text(text)?;
        match audio {
            Some(a) => interpolate(&a, &t, alpha),
            None => Ok(t),
        }
    }
}

fn stack_conditions<T: Scalar>(c: &[ConditionalEmbedding<T>]) -> Array2<T> {
    let rows: Vec<_> = c.iter().map(|c| c.vector.view()).collect();
    ndarray::stack(Axis(0), &rows).expect("conditions of equal width")
}

fn stack_rows<T: Scalar>(ws: &[&Waveform<T>]) -> Array2<T> {
    let rows: Vec<Array1<T>> = ws.iter().map(|w| Array1::from(w.samples().to_vec())).collect();
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ndarray::stack(Axis(0), &views).expect("equal lengths")
}

/// Loss, SDR and SISDR of a batch, plus gradients when `train` is set.
pub struct BatchOutcome<T: Scalar> {
    pub loss: f64,
    pub sdr: Vec<f64>,
    pub sisdr: Vec<f64>,
    pub estimates: Array2<T>,
    pub grads: Option<crate::tape::Gradients<T>>,
}

pub fn run_batch<T: Scalar>(
    engine: &SeparationEngine<T>,
    batch: &[TrainExample<T>],
    conditions: &[ConditionalEmbedding<T>],
    lambda: f64,
    train: bool,
) -> Result<BatchOutcome<T>> {
    let feats = batch.iter().map(|e| engine.prepare(&e.mixture)).collect::<Result<Vec<_>>>()?;
    let bind = if train { Bind::trainable(&engine.params) } else { Bind::frozen(&engine.params) };
    let mut g = Graph::new();
    let mask = engine.forward_masks(&mut g, &bind, &feats, &stack_conditions(conditions))?;
    let mps: Vec<_> = feats.iter().map(|f| f.magphase.clone()).collect();
    let est = MaskedIstft::new(&mps)?.apply(&mut g, mask)?;
    let targets = stack_rows(&batch.iter().map(|e| &e.target).collect::<Vec<_>>());
    let (l, sdr, sisdr) = SeparationLoss::apply(&mut g, est, targets, lambda)?;
    let loss = g.scalar(l).to_f64_lossy();
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("non-finite loss {loss}")));
    }
    let grads = if train {
        let gr = g.backward(l);
        if !gr.all_finite() {
            return Err(Error::Divergence("non-finite gradient".into()));
        }
        Some(gr)
    } else {
        None
    };
    Ok(BatchOutcome { loss, sdr, sisdr, estimates: g.value(est).clone(), grads })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_sisdri: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub history: Vec<EpochRecord>,
    pub steps: usize,
    pub first_batch_loss: f64,
}

/// Fixed validation mixtures drawn with a seed derived from the config.
pub fn validation_set<T: Scalar>(clips: &[Clip<T>], cfg: &TrainConfig) -> Result<Vec<TrainExample<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a1d);
    (0..cfg.val_examples).map(|_| draw_example(clips, cfg, &mut rng)).collect()
}

/// Mean loss and mean SISDR improvement over a fixed set.
pub fn validate<T: Scalar>(
    engine: &SeparationEngine<T>,
    builder: &mut ConditionBuilder<T>,
    set: &[TrainExample<T>],
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (mut loss, mut gain) = (0.0, 0.0);
    for chunk in set.chunks(cfg.batch_size) {
        let conds = builder.conditions(chunk)?;
        let out = run_batch(engine, chunk, &conds, cfg.lambda, false)?;
        loss += out.loss * chunk.len() as f64;
        for (ex, s) in chunk.iter().zip(&out.sisdr) {
            gain += s - sisdr(&ex.mixture, &ex.target)?;
        }
    }
    let n = set.len() as f64;
    Ok((loss / n, gain / n))
}

/// Trains the adapters and decoder. The learning rate decays by
/// `decay_factor` whenever validation SISDRi has not improved for
/// `plateau_epochs` epochs, never dropping below `lr_end`.
pub fn fit<T: Scalar>(
    engine: &mut SeparationEngine<T>,
    backend: &dyn EmbeddingBackend<T>,
    train: &[Clip<T>],
    val: &[Clip<T>],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<FitReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::domain("empty training set"));
    }
    engine.apply_freeze_policy();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut builder = ConditionBuilder::new(backend);
    let val_set = validation_set(val, cfg)?;
    let mut opt = AdamW::new(cfg.adamw());
    let mut lr = cfg.lr_start;
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    let mut report = FitReport::default();
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let batch = (0..cfg.batch_size).map(|_| draw_example(train, cfg, &mut rng)).collect::<Result<Vec<_>>>()?;
            let conds = builder.conditions(&batch)?;
            let out = run_batch(engine, &batch, &conds, cfg.lambda, true)
                .map_err(|e| match e {
                    Error::Divergence(m) => Error::Divergence(format!("epoch {epoch}, step {}: {m}", report.steps)),
                    other => other,
                })?;
            if report.steps == 0 {
                report.first_batch_loss = out.loss;
            }
            let mut grads = out.grads.expect("training batch");
            let norm = grads.global_norm().to_f64_lossy();
            if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                grads.scale(T::of(cfg.grad_clip / norm));
            }
            opt.step(&mut engine.params, &grads, lr);
            total += out.loss;
            report.steps += 1;
        }
        let (val_loss, val_sisdri) = validate(engine, &mut builder, &val_set, cfg)?;
        let rec = EpochRecord { epoch, lr, train_loss: total / cfg.steps_per_epoch as f64, val_loss, val_sisdri };
        log::info!(
            "epoch {epoch}: lr {lr:.2e} train {:.3} val {:.3} SISDRi {:.2} dB",
            rec.train_loss,
            val_loss,
            val_sisdri
        );
        on_epoch(&rec);
        report.history.push(rec);
        if val_sisdri > best {
            best = val_sisdri;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.plateau_epochs {
                lr = (lr * cfg.decay_factor).max(cfg.lr_end);
                stale = 0;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave(v: Vec<f64>) -> Waveform<f64> {
        Waveform::new(v, 8000).unwrap()
    }

    #[test]
    fn snr_arithmetic() {
        let t = wave(vec![1.0, -1.0, 1.0, -1.0]);
        let n = wave(vec![0.5, 0.5, -0.5, -0.5]);
        let (_, s) = mix_at_snr(&t, &t, 0.0).unwrap();
        assert_eq!(s, t);
        let (m, s) = mix_at_snr(&wave(vec![1.0, 0.0, 0.0, 0.0]), &wave(vec![2.0, 0.0, 0.0, 0.0]), 0.0).unwrap();
        assert!((s.samples()[0] - 1.0).abs() < 1e-15);
        assert_eq!(m.samples()[0], 2.0);
        let (_, s) = mix_at_snr(&t, &n, 10.0).unwrap();
        let ratio = s.samples()[0] / n.samples()[0];
        assert!((ratio - 2.0 * 10f64.powf(-0.5)).abs() < 1e-12);
        assert!(matches!(mix_at_snr(&t, &wave(vec![0.0; 4]), 0.0), Err(Error::SkipExample(_))));
    }

    #[test]
    fn uniform_snr_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = SnrSpec::Uniform([-10.0, 10.0]);
        let mut v: Vec<f64> = (0..10_000).map(|_| spec.draw(&mut rng)).collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let ks = v
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = (x + 10.0) / 20.0;
                (f - i as f64 / 1e4).abs().max((f - (i + 1) as f64 / 1e4).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.02, "KS {ks}");
    }

    #[test]
    fn config_checks() {
        TrainConfig::toy().validate().unwrap();
        TrainConfig::paper().validate().unwrap();
        let bad = TrainConfig { lr_end: 1.0, ..TrainConfig::toy() };
        assert!(bad.validate().is_err());
    }
}
