use std::sync::Arc;

use ndarray::Array2;
use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    /// Periodic Hann taper.
    Hann,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_length: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub window: WindowKind,
    pub centered: bool,
}

impl StftConfig {
    /// 1024-point window, hop 320 (10 s at 32 kHz gives 1001 × 513).
    pub fn paper() -> Self {
        StftConfig { window_length: 1024, hop: 320, n_fft: 1024, window: WindowKind::Hann, centered: true }
    }

    /// Scaled-down geometry used by the desk-scale profile: 8 kHz, 256 / 80.
    pub fn toy() -> Self {
        StftConfig { window_length: 256, hop: 80, n_fft: 256, window: WindowKind::Hann, centered: true }
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        if self.centered {
            1 + len / self.hop
        } else if len < self.n_fft {
            1
        } else {
            1 + (len - self.n_fft).div_ceil(self.hop)
        }
    }

    fn pad(&self) -> usize {
        if self.centered {
            self.n_fft / 2
        } else {
            0
        }
    }

    /// Checks the ordering constraints and that the squared-window overlap-add
    /// envelope never vanishes, which is what exact inversion needs.
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.window_length || self.window_length > self.n_fft {
            return Err(Error::domain(format!(
                "STFT requires 0 < hop ≤ window_length ≤ n_fft, got {}/{}/{}",
                self.hop, self.window_length, self.n_fft
            )));
        }
        if self.n_fft < 2 || self.n_fft % 2 != 0 {
            return Err(Error::domain("n_fft must be even"));
        }
        let w = self.window_vec::<f64>();
        let mut env = vec![0.0; self.hop];
        for (i, v) in w.iter().enumerate() {
            env[i % self.hop] += v * v;
        }
        let max = env.iter().cloned().fold(0.0, f64::max);
        let min = env.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(max > 0.0) || min < 1e-6 * max {
            return Err(Error::domain("window/hop pair violates the overlap-add condition"));
        }
        Ok(())
    }

    /// The analysis (and synthesis) window zero-padded to `n_fft`.
    pub fn window_vec<T: Scalar>(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.n_fft];
        let off = (self.n_fft - self.window_length) / 2;
        let n = self.window_length as f64;
        for i in 0..self.window_length {
            let v = match self.window {
                WindowKind::Hann => 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n).cos(),
            };
            out[off + i] = T::of(v);
        }
        out
    }
}

/// Complex STFT, frames along rows and frequency bins along columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram<T: Scalar> {
    pub values: Array2<Complex<T>>,
    pub config: StftConfig,
    pub source_length: usize,
    pub sample_rate: u32,
}

impl<T: Scalar> ComplexSpectrogram<T> {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn bins(&self) -> usize {
        self.values.ncols()
    }

    pub fn scaled(&self, k: T) -> Self {
        let mut out = self.clone();
        out.values.mapv_inplace(|c| c * k);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.values.fill(Complex::new(T::zero(), T::zero()));
        out
    }
}

/// FFT plans, window and overlap-add envelope for one configuration.
pub(crate) struct StftPlan<T: Scalar> {
    pub cfg: StftConfig,
    pub window: Vec<T>,
    forward: Arc<dyn RealToComplex<T>>,
    inverse: Arc<dyn ComplexToReal<T>>,
}

impl<T: Scalar> StftPlan<T> {
    pub fn new(cfg: &StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = RealFftPlanner::<T>::new();
        Ok(StftPlan {
            cfg: cfg.clone(),
            window: cfg.window_vec(),
            forward: planner.plan_fft_forward(cfg.n_fft),
            inverse: planner.plan_fft_inverse(cfg.n_fft),
        })
    }

    fn padded(&self, x: &[T]) -> Vec<T> {
        let pad = self.cfg.pad();
        let len = x.len();
        let frames = self.cfg.frame_count(len);
        let total = (frames - 1) * self.cfg.hop + self.cfg.n_fft;
        let mut out = vec![T::zero(); total.max(len + 2 * pad)];
        let reflect = len > pad;
        for (i, slot) in out.iter_mut().enumerate() {
            let pos = i as isize - pad as isize;
            *slot = if pos >= 0 && (pos as usize) < len {
                x[pos as usize]
            } else if reflect && pos < 0 {
                x[(-pos) as usize]
            } else if reflect && (pos as usize) < len + pad {
                let r = 2 * (len as isize - 1) - pos;
                if r >= 0 {
                    x[r as usize]
                } else {
                    T::zero()
                }
            } else {
                T::zero()
            };
        }
        out
    }

    pub fn forward(&self, x: &[T]) -> Array2<Complex<T>> {
        let n = self.cfg.n_fft;
        let frames = self.cfg.frame_count(x.len());
        let padded = self.padded(x);
        let mut out = Array2::from_elem((frames, self.cfg.bins()), Complex::new(T::zero(), T::zero()));
        let mut buf = vec![T::zero(); n];
        let mut spec = self.forward.make_output_vec();
        let mut scratch = self.forward.make_scratch_vec();
        for t in 0..frames {
            let start = t * self.cfg.hop;
            for i in 0..n {
                buf[i] = padded[start + i] * self.window[i];
            }
            self.forward
                .process_with_scratch(&mut buf, &mut spec, &mut scratch)
                .expect("fft length");
            for (k, c) in spec.iter().enumerate() {
                out[[t, k]] = *c;
            }
        }
        out
    }

    /// Squared-window overlap-add envelope over the padded time axis.
    fn envelope(&self, frames: usize) -> Vec<T> {
        let n = self.cfg.n_fft;
        let mut env = vec![T::zero(); (frames - 1) * self.cfg.hop + n];
        for t in 0..frames {
            for i in 0..n {
                env[t * self.cfg.hop + i] += self.window[i] * self.window[i];
            }
        }
        env
    }

    /// Least-squares inverse from separate real and imaginary parts.
    pub fn inverse(&self, re: &Array2<T>, im: &Array2<T>, source_length: usize) -> Vec<T> {
        let n = self.cfg.n_fft;
        let frames = re.nrows();
        let bins = self.cfg.bins();
        let env = self.envelope(frames);
        let mut acc = vec![T::zero(); env.len()];
        let mut spec = self.inverse.make_input_vec();
        let mut buf = self.inverse.make_output_vec();
        let mut scratch = self.inverse.make_scratch_vec();
        let norm = T::one() / T::of(n as f64);
        for t in 0..frames {
            for k in 0..bins {
                spec[k] = Complex::new(re[[t, k]], im[[t, k]]);
            }
            // a real inverse ignores the imaginary part of DC and Nyquist
            spec[0].im = T::zero();
            spec[bins - 1].im = T::zero();
            self.inverse
                .process_with_scratch(&mut spec, &mut buf, &mut scratch)
                .expect("ifft length");
            let start = t * self.cfg.hop;
            for i in 0..n {
                acc[start + i] += buf[i] * norm * self.window[i];
            }
        }
        let pad = self.cfg.pad();
        let tiny = T::of(1e-10);
        (0..source_length)
            .map(|i| {
                let p = i + pad;
                if p < env.len() && env[p] > tiny {
                    acc[p] / env[p]
                } else {
                    T::zero()
                }
            })
            .collect()
    }

    /// Adjoint of [`StftPlan::inverse`]: maps a waveform gradient to gradients
    /// with respect to the real and imaginary spectrogram parts.
    pub fn inverse_adjoint(&self, grad: &[T], frames: usize) -> (Array2<T>, Array2<T>) {
        let n = self.cfg.n_fft;
        let bins = self.cfg.bins();
        let env = self.envelope(frames);
        let pad = self.cfg.pad();
        let tiny = T::of(1e-10);
        let mut scaled = vec![T::zero(); env.len()];
        for (i, &g) in grad.iter().enumerate() {
            let p = i + pad;
            if p < env.len() && env[p] > tiny {
                scaled[p] = g / env[p];
            }
        }
        let mut d_re = Array2::zeros((frames, bins));
        let mut d_im = Array2::zeros((frames, bins));
        let mut buf = vec![T::zero(); n];
        let mut spec = self.forward.make_output_vec();
        let mut scratch = self.forward.make_scratch_vec();
        let inv_n = T::one() / T::of(n as f64);
        let two = T::of(2.0);
        for t in 0..frames {
            let start = t * self.cfg.hop;
            for i in 0..n {
                buf[i] = scaled[start + i] * self.window[i];
            }
            self.forward
                .process_with_scratch(&mut buf, &mut spec, &mut scratch)
                .expect("fft length");
            for k in 0..bins {
                let c = if k == 0 || k == bins - 1 { inv_n } else { two * inv_n };
                d_re[[t, k]] = spec[k].re * c;
                d_im[[t, k]] = if k == 0 || k == bins - 1 { T::zero() } else { spec[k].im * c };
            }
        }
        (d_re, d_im)
    }
}

pub fn stft<T: Scalar>(w: &Waveform<T>, cfg: &StftConfig) -> Result<ComplexSpectrogram<T>> {
    if w.is_empty() {
        return Err(Error::domain("cannot transform an empty waveform"));
    }
    if w.samples().iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("waveform contains non-finite samples"));
    }
    let plan = StftPlan::new(cfg)?;
    Ok(ComplexSpectrogram {
        values: plan.forward(w.samples()),
        config: cfg.clone(),
        source_length: w.len(),
        sample_rate: w.sample_rate(),
    })
}

pub fn istft<T: Scalar>(s: &ComplexSpectrogram<T>) -> Result<Waveform<T>> {
    if s.bins() != s.config.bins() {
        return Err(Error::domain(format!(
            "spectrogram has {} bins but n_fft {} implies {}",
            s.bins(),
            s.config.n_fft,
            s.config.bins()
        )));
    }
    if s.frames() != s.config.frame_count(s.source_length) {
        return Err(Error::domain(format!(
            "{} frames inconsistent with source length {}",
            s.frames(),
            s.source_length
        )));
    }
    let plan = StftPlan::new(&s.config)?;
    let re = s.values.mapv(|c| c.re);
    let im = s.values.mapv(|c| c.im);
    Waveform::new(plan.inverse(&re, &im, s.source_length), s.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Waveform<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), 8000).unwrap()
    }

    /// Direct evaluation of one windowed frame's DFT.
    fn naive_dft(frame: &[f64], k: usize) -> Complex<f64> {
        let n = frame.len() as f64;
        frame.iter().enumerate().fold(Complex::new(0.0, 0.0), |acc, (i, &x)| {
            let th = -2.0 * std::f64::consts::PI * k as f64 * i as f64 / n;
            acc + Complex::new(x * th.cos(), x * th.sin())
        })
    }

    #[test]
    fn paper_geometry_frame_count() {
        let cfg = StftConfig::paper();
        assert_eq!(cfg.frame_count(10 * 32_000), 1001);
        assert_eq!(cfg.bins(), 513);
        let toy = StftConfig::toy();
        assert_eq!(toy.bins(), 129);
        assert_eq!(toy.frame_count(8000), 101);
    }

    #[test]
    fn zero_in_zero_out() {
        let w = Waveform::<f64>::zeros(8000, 8000);
        let s = stft(&w, &StftConfig::toy()).unwrap();
        assert!(s.values.iter().all(|c| c.norm() == 0.0));
        let back = istft(&s).unwrap();
        assert_eq!(back.len(), 8000);
        assert!(back.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bin_centred_cosine_concentrates_energy() {
        let cfg = StftConfig::toy();
        let k = 13;
        let f = k as f64 * 8000.0 / cfg.n_fft as f64;
        let x: Vec<f64> =
            (0..4000).map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / 8000.0).cos()).collect();
        let w = Waveform::new(x.clone(), 8000).unwrap();
        let s = stft(&w, &cfg).unwrap();
        let win = cfg.window_vec::<f64>();
        // interior frame, compare against the direct transform
        let t = 20;
        let start = t * cfg.hop - cfg.n_fft / 2;
        let frame: Vec<f64> = (0..cfg.n_fft).map(|i| x[start + i] * win[i]).collect();
        for kk in [k - 1, k, k + 1, 40] {
            assert!((naive_dft(&frame, kk) - s.values[[t, kk]]).norm() < 1e-8);
        }
        let energy: f64 = s.values.row(t).iter().map(|c| c.norm_sqr()).sum();
        let band: f64 = (k - 1..=k + 1).map(|b| s.values[[t, b]].norm_sqr()).sum();
        assert!(s.values[[t, k]].norm_sqr() > 0.6 * energy);
        assert!(band > 0.99 * energy);
    }

    #[test]
    fn round_trip_and_linearity() {
        let cfg = StftConfig::toy();
        let a = noise(8000, 1);
        let b = noise(8000, 2);
        let sa = stft(&a, &cfg).unwrap();
        let back = istft(&sa).unwrap();
        let err = a.samples().iter().zip(back.samples()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "round trip error {err}");

        let mix = a.scaled(0.3).add(&b.scaled(-1.7)).unwrap();
        let sm = stft(&mix, &cfg).unwrap();
        let sb = stft(&b, &cfg).unwrap();
        for ((m, x), y) in sm.values.iter().zip(sa.values.iter()).zip(sb.values.iter()) {
            let lin = *x * 0.3 + *y * -1.7;
            assert!((m - lin).norm() <= 1e-9 * (1.0 + lin.norm()));
        }

        let doubled = istft(&sa.scaled(2.0)).unwrap();
        for (d, x) in doubled.samples().iter().zip(a.samples()) {
            assert!((d - 2.0 * x).abs() < 1e-9);
        }
    }

    #[test]
    fn short_and_odd_lengths_round_trip() {
        let cfg = StftConfig::toy();
        for len in [1, 5, 100, 128, 129, 257, 1001] {
            let w = noise(len, len as u64);
            let back = istft(&stft(&w, &cfg).unwrap()).unwrap();
            let err = w.samples().iter().zip(back.samples()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(err < 1e-9, "len {len}: {err}");
        }
    }

    #[test]
    fn domain_errors() {
        let cfg = StftConfig::toy();
        assert!(stft(&Waveform::<f64>::zeros(0, 8000), &cfg).is_err());
        let bad = StftConfig { hop: 300, ..StftConfig::toy() };
        assert!(stft(&noise(1000, 3), &bad).is_err());
        let mut s = stft(&noise(1000, 3), &cfg).unwrap();
        s.config.n_fft = 512;
        assert!(istft(&s).is_err());
    }

    #[test]
    fn adjoint_matches_inner_product() {
        let cfg = StftConfig::toy();
        let plan = StftPlan::<f64>::new(&cfg).unwrap();
        let len = 900;
        let frames = cfg.frame_count(len);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let re = Array2::from_shape_fn((frames, cfg.bins()), |_| rng.random_range(-1.0..1.0));
        let im = Array2::from_shape_fn((frames, cfg.bins()), |_| rng.random_range(-1.0..1.0));
        let g: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = plan.inverse(&re, &im, len);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let (dr, di) = plan.inverse_adjoint(&g, frames);
        let rhs: f64 = (&dr * &re).sum() + (&di * &im).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}
