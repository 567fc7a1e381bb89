//! Synthetic labelled sound events and a small contrastive audio/text model
//! trained on them, used as the query backend.

mod corpus;
mod model;

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use corpus::{caption_for, generate_corpus, load_corpus, CorpusConfig, ToyCorpus, SPLITS};
pub use model::{contrastive_pretrain, AUDIO_ENCODER_PREFIX, UNKNOWN_WORD, pairing_margin, tokenize, zero_shot_accuracy, zero_shot_classify, PretrainConfig, PretrainReport, ToyClap, ToyClapConfig, TowerState};

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Parametric generator; every `(lo, hi)` pair is a uniform range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Recipe {
    Tone { freq: (f64, f64) },
    Harmonic { f0: (f64, f64), harmonics: usize },
    Warble { carrier: (f64, f64), rate: (f64, f64), depth: f64 },
    Chirp { start: (f64, f64), end: (f64, f64) },
    Clicks { freq: (f64, f64), rate: (f64, f64), decay_ms: f64 },
    NoiseBand { center: (f64, f64), width: (f64, f64) },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventClass {
    pub name: String,
    pub recipe: Recipe,
}

pub const TARGET_RMS: f64 = 0.1;

/// Eight classes with disjoint spectral regions below 4 kHz.
pub fn default_classes() -> Vec<EventClass> {
    let c = |name: &str, recipe| EventClass { name: name.to_string(), recipe };
    vec![
        c("rumble", Recipe::NoiseBand { center: (90.0, 120.0), width: (100.0, 150.0) }),
        c("buzz", Recipe::Harmonic { f0: (200.0, 260.0), harmonics: 5 }),
        c("tone", Recipe::Tone { freq: (450.0, 650.0) }),
        c("warble", Recipe::Warble { carrier: (800.0, 1000.0), rate: (4.0, 10.0), depth: 0.8 }),
        c("chirp", Recipe::Chirp { start: (1200.0, 1400.0), end: (1600.0, 1800.0) }),
        c("clicks", Recipe::Clicks { freq: (2000.0, 2300.0), rate: (6.0, 12.0), decay_ms: 6.0 }),
        c("noise band", Recipe::NoiseBand { center: (2650.0, 2950.0), width: (300.0, 300.0) }),
        c("hiss", Recipe::NoiseBand { center: (3500.0, 3700.0), width: (300.0, 400.0) }),
    ]
}

pub fn class_by_name(name: &str) -> Result<EventClass> {
    default_classes()
        .into_iter()
        .find(|c| c.name == name)
        .ok_or_else(|| Error::domain(format!("unknown sound class `{name}`")))
}

fn draw<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// One event of `cls` with randomised parameters, RMS-normalised.
pub fn synth_event<T: Scalar, R: Rng>(cls: &EventClass, duration_s: f64, sample_rate: u32, rng: &mut R) -> Result<Waveform<T>> {
    if !(duration_s > 0.0) {
        return Err(Error::domain("event duration must be positive"));
    }
    let sr = sample_rate as f64;
    let n = (duration_s * sr).round() as usize;
    if n == 0 {
        return Err(Error::domain("event shorter than one sample"));
    }
    let t = |i: usize| i as f64 / sr;
    let mut x = vec![0.0f64; n];
    match &cls.recipe {
        Recipe::Tone { freq } => {
            let f = draw(rng, *freq);
            let ph = rng.random_range(0.0..2.0 * PI);
            for (i, v) in x.iter_mut().enumerate() {
                *v = (2.0 * PI * f * t(i) + ph).sin();
            }
        }
        Recipe::Harmonic { f0, harmonics } => {
            let f = draw(rng, *f0);
            let phases: Vec<f64> = (0..*harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
            for (i, v) in x.iter_mut().enumerate() {
                *v = (1..=*harmonics).map(|k| (2.0 * PI * f * k as f64 * t(i) + phases[k - 1]).sin() / k as f64).sum();
            }
        }
        Recipe::Warble { carrier, rate, depth } => {
            let (fc, fm) = (draw(rng, *carrier), draw(rng, *rate));
            let (pc, pm) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
            for (i, v) in x.iter_mut().enumerate() {
                let env = 1.0 - depth * 0.5 * (1.0 + (2.0 * PI * fm * t(i) + pm).cos());
                *v = env * (2.0 * PI * fc * t(i) + pc).sin();
            }
        }
        Recipe::Chirp { start, end } => {
            let (mut f1, mut f2) = (draw(rng, *start), draw(rng, *end));
            if rng.random_bool(0.5) {
                std::mem::swap(&mut f1, &mut f2);
            }
            let k = (f2 - f1) / duration_s;
            let ph = rng.random_range(0.0..2.0 * PI);
            for (i, v) in x.iter_mut().enumerate() {
                let ti = t(i);
                *v = (2.0 * PI * (f1 * ti + 0.5 * k * ti * ti) + ph).sin();
            }
        }
        Recipe::Clicks { freq, rate, decay_ms } => {
            let (f, r) = (draw(rng, *freq), draw(rng, *rate));
            let period = 1.0 / r;
            let offset = rng.random_range(0.0..period);
            let tau = decay_ms * 1e-3;
            for (i, v) in x.iter_mut().enumerate() {
                let local = (t(i) - offset).rem_euclid(period);
                *v = (-local / tau).exp() * (2.0 * PI * f * local).sin();
            }
        }
        Recipe::NoiseBand { center, width } => {
            let (c, w) = (draw(rng, *center), draw(rng, *width));
            let partials: Vec<(f64, f64)> =
                (0..64).map(|_| (rng.random_range(c - w / 2.0..c + w / 2.0), rng.random_range(0.0..2.0 * PI))).collect();
            for (i, v) in x.iter_mut().enumerate() {
                *v = partials.iter().map(|&(f, p)| (2.0 * PI * f * t(i) + p).sin()).sum();
            }
        }
    }
    let fade = ((0.005 * sr) as usize).min(n / 2);
    for i in 0..fade {
        let g = 0.5 * (1.0 - (PI * (i as f64 + 0.5) / fade as f64).cos());
        x[i] *= g;
        x[n - 1 - i] *= g;
    }
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if !(rms > 0.0) {
        return Err(Error::domain(format!("class `{}` produced silence", cls.name)));
    }
    Waveform::new(x.iter().map(|v| T::of(v * TARGET_RMS / rms)).collect(), sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use realfft::RealFftPlanner;

    fn spectrum(x: &[f64]) -> Vec<f64> {
        let mut planner = RealFftPlanner::<f64>::new();
        let fft = planner.plan_fft_forward(x.len());
        let mut input = x.to_vec();
        let mut out = fft.make_output_vec();
        fft.process(&mut input, &mut out).unwrap();
        out.iter().map(|c| c.norm_sqr()).collect()
    }

    fn centroid(x: &[f64], sr: f64) -> f64 {
        let p = spectrum(x);
        let df = sr / x.len() as f64;
        p.iter().enumerate().map(|(k, v)| k as f64 * df * v).sum::<f64>() / p.iter().sum::<f64>()
    }

    #[test]
    fn tone_peak_and_rms() {
        let cls = EventClass { name: "tone".into(), recipe: Recipe::Tone { freq: (440.0, 440.0) } };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w: Waveform<f64> = synth_event(&cls, 1.0, 8000, &mut rng).unwrap();
        let p = spectrum(w.samples());
        let peak = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
        assert_eq!(peak, 440);
        assert!((w.rms() - TARGET_RMS).abs() < 1e-12);
    }

    #[test]
    fn draws_differ_and_errors() {
        let cls = class_by_name("hiss").unwrap();
        let a: Waveform<f64> = synth_event(&cls, 0.5, 8000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b: Waveform<f64> = synth_event(&cls, 0.5, 8000, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(a.sub(&b).unwrap().energy() > 0.0);
        assert!(class_by_name("violin").is_err());
        assert!(synth_event::<f64, _>(&cls, 0.0, 8000, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn centroid_oracle_separates_classes() {
        let classes = default_classes();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = 25;
        let cents: Vec<Vec<f64>> = classes
            .iter()
            .map(|c| (0..draws).map(|_| centroid(synth_event::<f64, _>(c, 1.0, 8000, &mut rng).unwrap().samples(), 8000.0)).collect())
            .collect();
        let means: Vec<f64> = cents.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
        assert!(means.windows(2).all(|w| w[0] < w[1]), "{means:?}");
        let mut correct = 0;
        for (ci, v) in cents.iter().enumerate() {
            for &c in v {
                let guess = (0..means.len()).min_by(|&a, &b| (means[a] - c).abs().total_cmp(&(means[b] - c).abs())).unwrap();
                correct += (guess == ci) as usize;
            }
        }
        assert!(correct as f64 >= 0.95 * (classes.len() * draws) as f64, "{correct}");
    }
}
