use std::path::Path;

use image::{Rgb, RgbImage};

use crate::dsp::{stft, StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const STOPS: [(f64, [f64; 3]); 5] = [
    (0.00, [68.0, 1.0, 84.0]),
    (0.25, [59.0, 82.0, 139.0]),
    (0.50, [33.0, 145.0, 140.0]),
    (0.75, [94.0, 201.0, 98.0]),
    (1.00, [253.0, 231.0, 37.0]),
];

fn colour(v: f64) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0);
    let i = STOPS.windows(2).position(|w| v <= w[1].0).unwrap_or(STOPS.len() - 2);
    let ((a, ca), (b, cb)) = (STOPS[i], STOPS[i + 1]);
    let t = (v - a) / (b - a);
    Rgb([0, 1, 2].map(|k| (ca[k] + t * (cb[k] - ca[k])).round() as u8))
}

/// Log-magnitude spectrograms stacked top to bottom, low frequencies at the
/// bottom of each panel, over an 80 dB range shared by all panels.
pub fn spectrogram_image<T: Scalar>(waves: &[Waveform<T>], cfg: &StftConfig) -> Result<RgbImage> {
    if waves.is_empty() {
        return Err(Error::domain("nothing to plot"));
    }
    let specs = waves.iter().map(|w| stft(w, cfg)).collect::<Result<Vec<_>>>()?;
    let db: Vec<Vec<Vec<f64>>> = specs
        .iter()
        .map(|s| {
            s.values
                .rows()
                .into_iter()
                .map(|r| r.iter().map(|c| 10.0 * (c.norm_sqr().to_f64_lossy() + 1e-12).log10()).collect())
                .collect()
        })
        .collect();
    let top = db.iter().flatten().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let frames = specs.iter().map(|s| s.frames()).max().unwrap_or(1);
    let bins = cfg.bins();
    let gap = 4;
    let height = waves.len() * bins + (waves.len() - 1) * gap;
    let mut img = RgbImage::from_pixel(frames as u32, height as u32, Rgb([255, 255, 255]));
    for (p, panel) in db.iter().enumerate() {
        let y0 = p * (bins + gap);
        for (t, frame) in panel.iter().enumerate() {
            for (k, &v) in frame.iter().enumerate() {
                let y = y0 + bins - 1 - k;
                img.put_pixel(t as u32, y as u32, colour((v - top + 80.0) / 80.0));
            }
        }
    }
    Ok(img)
}

pub fn plot_spectrograms<T: Scalar>(waves: &[Waveform<T>], cfg: &StftConfig, out: &Path) -> Result<()> {
    let img = spectrogram_image(waves, cfg)?;
    img.save(out).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panels_and_colours() {
        let cfg = StftConfig::toy();
        let tone: Vec<f32> = (0..2000).map(|i| (i as f32 * 0.3).sin()).collect();
        let w = Waveform::new(tone, 8000).unwrap();
        let img = spectrogram_image(&[w.clone(), w], &cfg).unwrap();
        assert_eq!(img.height() as usize, 2 * cfg.bins() + 4);
        assert_eq!(colour(0.0), Rgb([68, 1, 84]));
        assert_eq!(colour(1.0), Rgb([253, 231, 37]));
        assert!(spectrogram_image::<f32>(&[], &cfg).is_err());
    }
}
