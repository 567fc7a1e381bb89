use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{cast_slice, Scalar};

/// Mono audio with its sample rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waveform<T: Scalar> {
    samples: Vec<T>,
    sample_rate: u32,
}

impl<T: Scalar> Waveform<T> {
    /// Fails on a zero rate or non-finite samples.
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::domain("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("non-finite sample at index {i}")));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Waveform { samples: vec![T::zero(); len], sample_rate }
    }

    pub(crate) fn from_trusted(samples: Vec<T>, sample_rate: u32) -> Self {
        debug_assert!(samples.iter().all(|v| v.is_finite()));
        Waveform { samples, sample_rate }
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [T] {
        &mut self.samples
    }

    pub fn into_samples(self) -> Vec<T> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> T {
        self.samples.iter().map(|&v| v * v).sum()
    }

    pub fn rms(&self) -> T {
        if self.samples.is_empty() {
            return T::zero();
        }
        (self.energy() / T::of(self.samples.len() as f64)).sqrt()
    }

    pub fn scaled(&self, k: T) -> Self {
        Waveform { samples: self.samples.iter().map(|&v| v * k).collect(), sample_rate: self.sample_rate }
    }

    /// Elementwise sum; lengths and rates must agree.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        let samples = self.samples.iter().zip(&other.samples).map(|(&a, &b)| a + b).collect();
        Ok(Waveform { samples, sample_rate: self.sample_rate })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        let samples = self.samples.iter().zip(&other.samples).map(|(&a, &b)| a - b).collect();
        Ok(Waveform { samples, sample_rate: self.sample_rate })
    }

    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.sample_rate != other.sample_rate {
            return Err(Error::domain(format!(
                "sample rate mismatch: {} vs {}",
                self.sample_rate, other.sample_rate
            )));
        }
        if self.len() != other.len() {
            return Err(Error::domain(format!("length mismatch: {} vs {}", self.len(), other.len())));
        }
        Ok(())
    }

    /// Crops or zero-pads to exactly `len` samples.
    pub fn fit_length(&self, len: usize) -> Self {
        let mut s = self.samples.clone();
        s.resize(len, T::zero());
        Waveform { samples: s, sample_rate: self.sample_rate }
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        let end = end.min(self.len());
        let start = start.min(end);
        Waveform { samples: self.samples[start..end].to_vec(), sample_rate: self.sample_rate }
    }

    pub fn cast<U: Scalar>(&self) -> Waveform<U> {
        Waveform { samples: cast_slice(&self.samples), sample_rate: self.sample_rate }
    }
}
