use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{istft, resample_ratio, stft, ResampleQuality, StftConfig, Waveform};
use crate::error::Result;
use crate::scalar::Scalar;

/// Speed perturbation followed by time and frequency masking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Candidate speed factors, drawn uniformly.
    pub speeds: Vec<f64>,
    pub max_time_masks: usize,
    pub max_freq_masks: usize,
    /// Widest mask, in frames and bins respectively.
    pub max_time_width: usize,
    pub max_freq_width: usize,
    pub stft: StftConfig,
}

impl AugmentConfig {
    pub fn toy() -> Self {
        AugmentConfig {
            speeds: vec![0.9, 1.0, 1.1],
            max_time_masks: 2,
            max_freq_masks: 2,
            max_time_width: 10,
            max_freq_width: 12,
            stft: StftConfig::toy(),
        }
    }

    pub fn identity() -> Self {
        AugmentConfig { speeds: vec![1.0], max_time_masks: 0, max_freq_masks: 0, ..Self::toy() }
    }
}

/// Resamples by `1 / speed`, so duration scales by `1 / speed` and pitch by `speed`.
pub fn change_speed<T: Scalar>(w: &Waveform<T>, speed: f64) -> Waveform<T> {
    let num = (speed * 100.0).round() as u64;
    let y = resample_ratio(w.samples(), 100, num.max(1), &ResampleQuality::default());
    Waveform::from_trusted(y, w.sample_rate())
}

pub fn augment_query_audio<T: Scalar, R: Rng>(w: &Waveform<T>, cfg: &AugmentConfig, rng: &mut R) -> Result<Waveform<T>> {
    let speed = if cfg.speeds.is_empty() { 1.0 } else { cfg.speeds[rng.random_range(0..cfg.speeds.len())] };
    let n_time = rng.random_range(0..=cfg.max_time_masks);
    let n_freq = rng.random_range(0..=cfg.max_freq_masks);
    let w = if speed == 1.0 { w.clone() } else { change_speed(w, speed) };
    if n_time + n_freq == 0 || w.is_empty() {
        return Ok(w);
    }
    let mut s = stft(&w, &cfg.stft)?;
    let (frames, bins) = (s.frames(), s.bins());
    let zero = realfft::num_complex::Complex::new(T::zero(), T::zero());
    for _ in 0..n_time {
        let width = rng.random_range(1..=cfg.max_time_width.clamp(1, frames));
        let start = rng.random_range(0..=frames - width);
        s.values.slice_mut(ndarray::s![start..start + width, ..]).fill(zero);
    }
    for _ in 0..n_freq {
        let width = rng.random_range(1..=cfg.max_freq_width.clamp(1, bins));
        let start = rng.random_range(0..=bins - width);
        s.values.slice_mut(ndarray::s![.., start..start + width]).fill(zero);
    }
    istft(&s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Waveform<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.random_range(-0.5..0.5)).collect(), 8000).unwrap()
    }

    #[test]
    fn identity_config_returns_input() {
        let w = noise(8000, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            assert_eq!(augment_query_audio(&w, &AugmentConfig::identity(), &mut rng).unwrap(), w);
        }
    }

    #[test]
    fn speed_changes_duration() {
        let w = noise(8000, 3);
        let fast = change_speed(&w, 1.1);
        assert!((fast.duration_s() - 1.0 / 1.1).abs() <= 80.0 / 8000.0);
        let slow = change_speed(&w, 0.9);
        assert!((slow.duration_s() - 1.0 / 0.9).abs() <= 80.0 / 8000.0);
    }

    #[test]
    fn masked_region_loses_its_energy() {
        let w = noise(8000, 4);
        let cfg = AugmentConfig {
            speeds: vec![1.0],
            max_time_masks: 1,
            max_freq_masks: 0,
            max_time_width: 20,
            ..AugmentConfig::toy()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // search for a draw that produced a wide mask, then check its interior
        for _ in 0..50 {
            let out = augment_query_audio(&w, &cfg, &mut rng).unwrap();
            let before = stft(&w, &StftConfig::toy()).unwrap();
            let after = stft(&out, &StftConfig::toy()).unwrap();
            let energy = |s: &crate::dsp::ComplexSpectrogram<f64>, t: usize| s.values.row(t).iter().map(|c| c.norm_sqr()).sum::<f64>();
            let dead: Vec<usize> = (0..after.frames()).filter(|&t| energy(&after, t) < 1e-12 * energy(&before, t)).collect();
            if dead.len() >= 4 {
                return;
            }
        }
        panic!("no time mask ever silenced a frame");
    }

    #[test]
    fn frequency_mask_interior_is_suppressed() {
        let w = noise(8000, 6);
        let mut s = stft(&w, &StftConfig::toy()).unwrap();
        let zero = realfft::num_complex::Complex::new(0.0, 0.0);
        s.values.slice_mut(ndarray::s![.., 40..60]).fill(zero);
        let out = istft(&s).unwrap();
        let re = stft(&out, &StftConfig::toy()).unwrap();
        let band = |s: &crate::dsp::ComplexSpectrogram<f64>| s.values.slice(ndarray::s![.., 44..56]).iter().map(|c| c.norm_sqr()).sum::<f64>();
        let orig = stft(&w, &StftConfig::toy()).unwrap();
        assert!(band(&re) < 1e-3 * band(&orig));
    }
}
