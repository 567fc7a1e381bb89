use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Reads PCM (8/16/24/32-bit) or float WAV. Multichannel input is averaged.
pub fn read_wav<T: Scalar>(path: &Path) -> Result<Waveform<T>> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::domain(format!("{} declares zero channels", path.display())));
    }
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().map(|s| s.map(f64::from)).collect::<Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let full = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader.samples::<i32>().map(|s| s.map(|v| v as f64 / full)).collect::<Result<_, _>>()?
        }
    };
    if channels > 1 {
        log::warn!("{}: averaging {} channels to mono", path.display(), channels);
    }
    let mono: Vec<T> = interleaved
        .chunks(channels)
        .map(|c| T::of(c.iter().sum::<f64>() / channels as f64))
        .collect();
    Waveform::new(mono, spec.sample_rate)
}

/// Writes 32-bit float mono WAV.
pub fn write_wav<T: Scalar>(path: &Path, w: &Waveform<T>) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in w.samples() {
        writer.write_sample(s.to_f64_lossy() as f32)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Writes 16-bit PCM mono WAV with clipping to `[-1, 1]`.
pub fn write_wav_pcm16<T: Scalar>(path: &Path, w: &Waveform<T>) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in w.samples() {
        let v = (s.to_f64_lossy().clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_and_stereo_average() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.25f32, -0.5, 0.125], 8000).unwrap();
        write_wav(&p, &w).unwrap();
        assert_eq!(read_wav::<f32>(&p).unwrap(), w);

        let q = dir.path().join("s.wav");
        let spec = hound::WavSpec { channels: 2, sample_rate: 8000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
        let mut wr = hound::WavWriter::create(&q, spec).unwrap();
        for v in [16384i16, 0, -16384, -16384] {
            wr.write_sample(v).unwrap();
        }
        wr.finalize().unwrap();
        let m = read_wav::<f64>(&q).unwrap();
        assert_eq!(m.samples(), &[0.25, -0.5]);
    }

    #[test]
    fn missing_file_is_io_error() {
        let e = read_wav::<f32>(Path::new("/nonexistent/x.wav")).unwrap_err();
        assert_eq!(e.exit_code(), 4);
    }
}
