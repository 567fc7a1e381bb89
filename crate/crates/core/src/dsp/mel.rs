use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::stft::{StftConfig, StftPlan, WindowKind};
use super::{resample, Waveform};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub target_rate: u32,
    pub window_length: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl MelConfig {
    /// 48 kHz, 1024 / 480, 64 bands over 50 Hz – 14 kHz.
    pub fn paper() -> Self {
        MelConfig { target_rate: 48_000, window_length: 1024, hop: 480, n_mels: 64, f_min: 50.0, f_max: 14_000.0 }
    }

    /// 8 kHz input is up-sampled to 12 kHz, hop 120 keeps the frame rate of the
    /// linear toy spectrogram.
    pub fn toy() -> Self {
        MelConfig { target_rate: 12_000, window_length: 256, hop: 120, n_mels: 32, f_min: 0.0, f_max: 6_000.0 }
    }

    pub fn stft_config(&self) -> StftConfig {
        StftConfig {
            window_length: self.window_length,
            hop: self.hop,
            n_fft: self.window_length,
            window: WindowKind::Hann,
            centered: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 {
            return Err(Error::domain("n_mels must be positive"));
        }
        if !(self.f_min >= 0.0 && self.f_max > self.f_min && self.f_max <= self.target_rate as f64 / 2.0) {
            return Err(Error::domain("mel band edges must satisfy 0 ≤ f_min < f_max ≤ rate/2"));
        }
        self.stft_config().validate()
    }

    /// Frames produced for an input of `len` samples at `rate`.
    pub fn frame_count(&self, len: usize, rate: u32) -> usize {
        let resampled = if rate == self.target_rate {
            len
        } else {
            ((len as u64 * self.target_rate as u64).div_ceil(rate as u64)) as usize
        };
        self.stft_config().frame_count(resampled)
    }
}

/// Mel power spectrogram, frames along rows.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram<T: Scalar> {
    pub values: Array2<T>,
    pub config: MelConfig,
    pub log_compressed: bool,
}

impl<T: Scalar> MelSpectrogram<T> {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn mel_bins(&self) -> usize {
        self.values.ncols()
    }

    /// `ln(1 + mel / floor)`: zero maps to zero, loud bins land near 1.
    pub fn log_compressed(&self) -> Self {
        if self.log_compressed {
            return self.clone();
        }
        let floor = T::of(1e-3);
        let k = T::of(0.1);
        MelSpectrogram {
            values: self.values.mapv(|v| (v / floor).ln_1p() * k),
            config: self.config.clone(),
            log_compressed: true,
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-scale filters with unit area in Hz, `n_mels × bins`.
pub fn mel_filterbank(cfg: &MelConfig) -> Array2<f64> {
    let n_fft = cfg.window_length;
    let bins = n_fft / 2 + 1;
    let lo = hz_to_mel(cfg.f_min);
    let hi = hz_to_mel(cfg.f_max);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.target_rate as f64 / n_fft as f64;
    Array2::from_shape_fn((cfg.n_mels, bins), |(m, k)| {
        let f = k as f64 * bin_hz;
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        let w = if f > l && f <= c {
            (f - l) / (c - l)
        } else if f > c && f < r {
            (r - f) / (r - c)
        } else {
            0.0
        };
        w * 2.0 / (r - l)
    })
}

/// Power mel spectrogram; the input is resampled to `cfg.target_rate` first.
pub fn mel_spectrogram<T: Scalar>(w: &Waveform<T>, cfg: &MelConfig) -> Result<MelSpectrogram<T>> {
    cfg.validate()?;
    if w.samples().iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("waveform contains non-finite samples"));
    }
    let w = resample(w, cfg.target_rate)?;
    if w.len() < cfg.window_length {
        return Err(Error::domain(format!(
            "waveform of {} samples is shorter than one {}-sample window",
            w.len(),
            cfg.window_length
        )));
    }
    let plan = StftPlan::<T>::new(&cfg.stft_config())?;
    let spec = plan.forward(w.samples());
    let power = spec.mapv(|c| c.norm_sqr());
    let fb = mel_filterbank(cfg).mapv(T::of);
    Ok(MelSpectrogram { values: power.dot(&fb.t()), config: cfg.clone(), log_compressed: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_input_gives_zero_mel() {
        let w = Waveform::<f64>::zeros(8000, 8000);
        let m = mel_spectrogram(&w, &MelConfig::toy()).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.0));
        assert!(m.log_compressed().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn paper_geometry() {
        let w = Waveform::<f32>::zeros(10 * 32_000, 32_000);
        let m = mel_spectrogram(&w, &MelConfig::paper()).unwrap();
        assert_eq!(m.mel_bins(), 64);
        assert_eq!(m.frames(), 1001);
    }

    #[test]
    fn toy_frames_match_linear_spectrogram() {
        let cfg = MelConfig::toy();
        for len in [8000, 4000, 12_345] {
            assert_eq!(cfg.frame_count(len, 8000), StftConfig::toy().frame_count(len));
        }
    }

    #[test]
    fn white_noise_fills_every_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<f64> = (0..16_000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Waveform::new(samples.clone(), 12_000).unwrap();
        let cfg = MelConfig::toy();
        let m = mel_spectrogram(&w, &cfg).unwrap();
        // oracle: direct filterbank times averaged periodogram
        let fb = mel_filterbank(&cfg);
        let plan = StftPlan::<f64>::new(&cfg.stft_config()).unwrap();
        let power = plan.forward(&samples).mapv(|c| c.norm_sqr());
        let oracle = power.dot(&fb.t());
        for (a, b) in m.values.iter().zip(oracle.iter()) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
        let band_energy = m.values.sum_axis(ndarray::Axis(0));
        assert!(band_energy.iter().all(|&e| e > 0.0));
        assert!(fb.rows().into_iter().all(|r| r.iter().any(|&v| v > 0.0)));
    }

    #[test]
    fn too_short_is_rejected() {
        let w = Waveform::<f64>::zeros(100, 8000);
        assert!(mel_spectrogram(&w, &MelConfig::toy()).is_err());
    }
}
