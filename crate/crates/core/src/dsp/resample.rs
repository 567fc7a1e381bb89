use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Kaiser-windowed sinc interpolation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResampleQuality {
    /// Zero crossings of the sinc kernel on each side.
    pub zero_crossings: usize,
    pub kaiser_beta: f64,
    /// Cutoff as a fraction of the lower Nyquist rate.
    pub rolloff: f64,
}

impl Default for ResampleQuality {
    fn default() -> Self {
        ResampleQuality { zero_crossings: 24, kaiser_beta: 9.0, rolloff: 0.97 }
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

/// Rational resampler: output sample `m` sits at input time `m · down / up`.
struct Polyphase {
    up: u64,
    down: u64,
    /// `taps[phase]` holds weights for input offsets `-half+1 ..= half`.
    taps: Vec<Vec<f64>>,
    half: usize,
}

impl Polyphase {
    fn new(up: u64, down: u64, q: &ResampleQuality) -> Self {
        let cutoff = q.rolloff * (up as f64 / down as f64).min(1.0);
        let half = (q.zero_crossings as f64 / cutoff).ceil() as usize;
        let i0b = bessel_i0(q.kaiser_beta);
        let taps = (0..up)
            .map(|phase| {
                let frac = phase as f64 / up as f64;
                (0..2 * half)
                    .map(|j| {
                        // offset of input sample relative to the output position
                        let tau = j as f64 - (half as f64 - 1.0) - frac;
                        let x = tau / half as f64;
                        if x.abs() > 1.0 {
                            return 0.0;
                        }
                        let win = bessel_i0(q.kaiser_beta * (1.0 - x * x).sqrt()) / i0b;
                        let arg = std::f64::consts::PI * cutoff * tau;
                        let sinc = if tau.abs() < 1e-12 { 1.0 } else { arg.sin() / arg };
                        cutoff * sinc * win
                    })
                    .collect()
            })
            .collect();
        Polyphase { up, down, taps, half }
    }

    fn run<T: Scalar>(&self, x: &[T], out_len: usize) -> Vec<T> {
        let n = x.len() as i64;
        (0..out_len as u64)
            .map(|m| {
                let pos = m * self.down;
                let base = (pos / self.up) as i64;
                let phase = (pos % self.up) as usize;
                let taps = &self.taps[phase];
                let first = base - (self.half as i64 - 1);
                let mut acc = 0.0;
                for (j, &h) in taps.iter().enumerate() {
                    let idx = first + j as i64;
                    if idx >= 0 && idx < n {
                        acc += h * x[idx as usize].to_f64_lossy();
                    }
                }
                T::of(acc)
            })
            .collect()
    }
}

/// Resamples by the exact rational factor `up / down`.
pub fn resample_ratio<T: Scalar>(x: &[T], up: u64, down: u64, q: &ResampleQuality) -> Vec<T> {
    let g = gcd(up, down);
    let (up, down) = (up / g, down / g);
    if up == down {
        return x.to_vec();
    }
    let out_len = ((x.len() as u64 * up).div_ceil(down)) as usize;
    Polyphase::new(up, down, q).run(x, out_len)
}

pub fn resample<T: Scalar>(w: &Waveform<T>, target_rate: u32) -> Result<Waveform<T>> {
    resample_with(w, target_rate, &ResampleQuality::default())
}

pub fn resample_with<T: Scalar>(w: &Waveform<T>, target_rate: u32, q: &ResampleQuality) -> Result<Waveform<T>> {
    if target_rate == 0 {
        return Err(Error::domain("target rate must be positive"));
    }
    if target_rate == w.sample_rate() {
        return Ok(w.clone());
    }
    let out = resample_ratio(w.samples(), target_rate as u64, w.sample_rate() as u64, q);
    Waveform::new(out, target_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, rate: u32, secs: f64) -> Waveform<f64> {
        let n = (rate as f64 * secs) as usize;
        Waveform::new(
            (0..n).map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin()).collect(),
            rate,
        )
        .unwrap()
    }

    #[test]
    fn identity_rate_is_a_copy() {
        let w = sine(440.0, 8000, 0.1);
        assert_eq!(resample(&w, 8000).unwrap(), w);
    }

    #[test]
    fn length_arithmetic() {
        let w = sine(1000.0, 32_000, 1.0);
        assert_eq!(resample(&w, 48_000).unwrap().len(), 48_000);
        let t = sine(300.0, 8000, 1.0);
        assert_eq!(resample(&t, 12_000).unwrap().len(), 12_000);
    }

    #[test]
    fn round_trip_snr_exceeds_40_db() {
        let w = sine(1000.0, 32_000, 1.0);
        let up = resample(&w, 48_000).unwrap();
        let back = resample(&up, 32_000).unwrap();
        assert_eq!(back.len(), w.len());
        let sig: f64 = w.samples().iter().map(|v| v * v).sum();
        let err: f64 = w.samples().iter().zip(back.samples()).map(|(a, b)| (a - b) * (a - b)).sum();
        let snr = 10.0 * (sig / err).log10();
        assert!(snr > 40.0, "snr {snr:.1} dB");
    }

    #[test]
    fn rejects_zero_rate() {
        assert!(resample(&sine(100.0, 8000, 0.01), 0).is_err());
    }

    #[test]
    fn bessel_matches_reference_values() {
        assert!((bessel_i0(0.0) - 1.0).abs() < 1e-15);
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_4).abs() < 1e-12);
        assert!((bessel_i0(5.0) - 27.239_871_823_604_45).abs() < 1e-9);
    }
}
