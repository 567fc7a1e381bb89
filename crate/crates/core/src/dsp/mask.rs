use ndarray::Array2;
use realfft::num_complex::Complex;

use super::stft::{ComplexSpectrogram, StftConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Polar form of a complex spectrogram.
#[derive(Clone, Debug, PartialEq)]
pub struct MagPhase<T: Scalar> {
    pub magnitude: Array2<T>,
    /// Radians in `(-π, π]`; bins with zero magnitude carry phase 0.
    pub phase: Array2<T>,
    pub config: StftConfig,
    pub source_length: usize,
    pub sample_rate: u32,
}

impl<T: Scalar> MagPhase<T> {
    pub fn dim(&self) -> (usize, usize) {
        self.magnitude.dim()
    }

    /// `magnitude · e^{j·phase}`.
    pub fn to_complex(&self) -> ComplexSpectrogram<T> {
        let values = ndarray::Zip::from(&self.magnitude)
            .and(&self.phase)
            .map_collect(|&m, &p| Complex::new(m * p.cos(), m * p.sin()));
        ComplexSpectrogram {
            values,
            config: self.config.clone(),
            source_length: self.source_length,
            sample_rate: self.sample_rate,
        }
    }

    /// Real and imaginary parts as separate matrices.
    pub fn cartesian(&self) -> (Array2<T>, Array2<T>) {
        let re = ndarray::Zip::from(&self.magnitude).and(&self.phase).map_collect(|&m, &p| m * p.cos());
        let im = ndarray::Zip::from(&self.magnitude).and(&self.phase).map_collect(|&m, &p| m * p.sin());
        (re, im)
    }
}

pub fn magphase<T: Scalar>(s: &ComplexSpectrogram<T>) -> MagPhase<T> {
    let magnitude = s.values.mapv(|c| c.norm());
    let pi = T::PI();
    let phase = s.values.mapv(|c| {
        if c.re == T::zero() && c.im == T::zero() {
            T::zero()
        } else {
            let p = c.im.atan2(c.re);
            if p <= -pi {
                pi
            } else {
                p
            }
        }
    });
    MagPhase {
        magnitude,
        phase,
        config: s.config.clone(),
        source_length: s.source_length,
        sample_rate: s.sample_rate,
    }
}

/// Scales the magnitude by `mask` and keeps the phase verbatim.
pub fn mask_magphase<T: Scalar>(mask: &Array2<T>, mp: &MagPhase<T>) -> Result<MagPhase<T>> {
    if mask.dim() != mp.dim() {
        return Err(Error::domain(format!("mask shape {:?} does not match spectrogram {:?}", mask.dim(), mp.dim())));
    }
    if mask.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("mask contains non-finite values"));
    }
    Ok(MagPhase {
        magnitude: mask * &mp.magnitude,
        phase: mp.phase.clone(),
        config: mp.config.clone(),
        source_length: mp.source_length,
        sample_rate: mp.sample_rate,
    })
}

/// `mask ⊙ |X| e^{jΦ}` with the mixture phase reused.
pub fn apply_mask<T: Scalar>(mask: &Array2<T>, mp: &MagPhase<T>) -> Result<ComplexSpectrogram<T>> {
    Ok(mask_magphase(mask, mp)?.to_complex())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{istft, stft, Waveform};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec_from(values: Array2<Complex<f64>>) -> ComplexSpectrogram<f64> {
        ComplexSpectrogram { values, config: StftConfig::toy(), source_length: 0, sample_rate: 8000 }
    }

    #[test]
    fn polar_identity_and_zero_convention() {
        let s = spec_from(Array2::from_shape_vec((1, 3), vec![
            Complex::new(3.0, 4.0),
            Complex::new(0.0, 0.0),
            Complex::new(-2.0, -0.0),
        ]).unwrap());
        let mp = magphase(&s);
        assert_eq!(mp.magnitude[[0, 0]], 5.0);
        assert_eq!(mp.phase[[0, 0]], 4f64.atan2(3.0));
        assert_eq!((mp.magnitude[[0, 1]], mp.phase[[0, 1]]), (0.0, 0.0));
        assert_eq!(mp.phase[[0, 2]], std::f64::consts::PI);
    }

    #[test]
    fn recomposition_is_exact_to_machine_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = spec_from(Array2::from_shape_fn((20, 129), |_| {
            Complex::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))
        }));
        let back = magphase(&s).to_complex();
        let err = s.values.iter().zip(back.values.iter()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-12);
        assert!(magphase(&s).magnitude.iter().all(|&m| m >= 0.0));
    }

    #[test]
    fn mask_cases() {
        let mp = MagPhase {
            magnitude: Array2::from_elem((4, 5), 2.0),
            phase: Array2::from_shape_fn((4, 5), |(i, j)| 0.1 * i as f64 - 0.2 * j as f64),
            config: StftConfig::toy(),
            source_length: 0,
            sample_rate: 8000,
        };
        let half = mask_magphase(&Array2::from_elem((4, 5), 0.5), &mp).unwrap();
        assert!(half.magnitude.iter().all(|&m| m == 1.0));
        assert_eq!(half.phase, mp.phase);
        let zero = apply_mask(&Array2::zeros((4, 5)), &mp).unwrap();
        assert!(zero.values.iter().all(|c| c.norm() == 0.0));
        let one = apply_mask(&Array2::ones((4, 5)), &mp).unwrap();
        assert_eq!(one, mp.to_complex());
        assert!(apply_mask(&Array2::ones((4, 4)), &mp).is_err());
    }

    #[test]
    fn unit_mask_round_trips_waveform() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = Waveform::new((0..4000).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>(), 8000).unwrap();
        let mp = magphase(&stft(&w, &StftConfig::toy()).unwrap());
        let (f, b) = mp.dim();
        let back = istft(&apply_mask(&Array2::ones((f, b)), &mp).unwrap()).unwrap();
        let err = w.samples().iter().zip(back.samples()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6);
        let m = Array2::from_shape_fn((f, b), |_| rng.random_range(0.0..1.0));
        let masked = mask_magphase(&m, &mp).unwrap();
        assert!(masked.magnitude.iter().zip(mp.magnitude.iter()).all(|(o, i)| o <= i));
    }
}
