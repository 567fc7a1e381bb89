use ndarray::Array2;

use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::nn::TokenGrid;
use crate::scalar::Scalar;

/// Patch tokens of one spectrogram, ordered time → frequency → chunk.
///
/// The spectrogram is cut into `chunk_count` equal time chunks which are laid
/// side by side along the frequency axis; square `P × P` patches of that image
/// form the token grid. Token `r + rows · c` covers time patch `r` of chunk
/// `c / F_p` at frequency patch `c % F_p`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence<T: Scalar> {
    /// `(rows · cols) × P²`, each patch flattened time-major.
    pub tokens: Array2<T>,
    pub grid: TokenGrid,
    pub frames: usize,
    pub mel_bins: usize,
    pub padded_frames: usize,
    pub padded_bins: usize,
    pub patch: usize,
    pub chunk_count: usize,
}

impl<T: Scalar> PatchSequence<T> {
    pub fn token_count(&self) -> usize {
        self.tokens.nrows()
    }

    /// Row of the absolute time-patch index of each token, for position tables.
    pub fn time_patch_index(&self) -> Vec<usize> {
        let fp = self.padded_bins / self.patch;
        let mut out = Vec::with_capacity(self.grid.per_example());
        for c in 0..self.grid.cols {
            for r in 0..self.grid.rows {
                out.push((c / fp) * self.grid.rows + r);
            }
        }
        out
    }

    pub fn freq_patch_index(&self) -> Vec<usize> {
        let fp = self.padded_bins / self.patch;
        let mut out = Vec::with_capacity(self.grid.per_example());
        for c in 0..self.grid.cols {
            for _ in 0..self.grid.rows {
                out.push(c % fp);
            }
        }
        out
    }
}

fn padded(n: usize, multiple: usize) -> usize {
    n.div_ceil(multiple) * multiple
}

/// Cuts a `frames × mel_bins` matrix into patch tokens, zero-padding the
/// trailing edges to the geometry required by the stage ladder.
pub fn reshape_to_patches<T: Scalar>(mel: &Array2<T>, cfg: &EncoderConfig) -> Result<PatchSequence<T>> {
    let (frames, bins) = mel.dim();
    if frames == 0 || bins == 0 {
        return Err(Error::domain("cannot patch an empty spectrogram"));
    }
    let p = cfg.patch;
    let ladder = 1usize << (cfg.depths.len() - 1);
    let tf = padded(frames, cfg.chunk_count * p * ladder);
    let fb = padded(bins, p * ladder);
    let tc = tf / cfg.chunk_count;
    let rows = tc / p;
    let fp = fb / p;
    let cols = fp * cfg.chunk_count;
    let grid = TokenGrid::new(rows, cols, 1);
    let mut tokens = Array2::zeros((grid.tokens(), p * p));
    for c in 0..cols {
        let (chunk, f) = (c / fp, c % fp);
        for r in 0..rows {
            let tok = grid.index(0, r, c);
            for dt in 0..p {
                let t = chunk * tc + r * p + dt;
                if t >= frames {
                    continue;
                }
                for df in 0..p {
                    let m = f * p + df;
                    if m < bins {
                        tokens[[tok, dt * p + df]] = mel[[t, m]];
                    }
                }
            }
        }
    }
    Ok(PatchSequence {
        tokens,
        grid,
        frames,
        mel_bins: bins,
        padded_frames: tf,
        padded_bins: fb,
        patch: p,
        chunk_count: cfg.chunk_count,
    })
}

/// Inverse of [`reshape_to_patches`] for tokens with `channels · P²` values per
/// token; returns one `padded_frames × (padded_bins · channels)` matrix per
/// channel-interleaved bin, cropped to `frames` rows.
pub fn patches_to_frames<T: Scalar>(
    tokens: &Array2<T>,
    seq: &PatchSequence<T>,
    channels: usize,
    crop_bins: bool,
) -> Array2<T> {
    let p = seq.patch;
    let fp = seq.padded_bins / p;
    let tc = seq.padded_frames / seq.chunk_count;
    let bins = if crop_bins { seq.mel_bins } else { seq.padded_bins };
    let mut out = Array2::zeros((seq.frames, bins * channels));
    for c in 0..seq.grid.cols {
        let (chunk, f) = (c / fp, c % fp);
        for r in 0..seq.grid.rows {
            let tok = seq.grid.index(0, r, c);
            for dt in 0..p {
                let t = chunk * tc + r * p + dt;
                if t >= seq.frames {
                    continue;
                }
                for df in 0..p {
                    let m = f * p + df;
                    if m >= bins {
                        continue;
                    }
                    for ch in 0..channels {
                        out[[t, m * channels + ch]] = tokens[[tok, (dt * p + df) * channels + ch]];
                    }
                }
            }
        }
    }
    out
}

/// Reconstructs the original spectrogram from a patch sequence.
pub fn patches_to_mel<T: Scalar>(seq: &PatchSequence<T>) -> Array2<T> {
    patches_to_frames(&seq.tokens, seq, 1, true)
}

/// Gather index implementing the inverse reshape inside a graph.
///
/// View token features `(tokens × P²·C)` as `(tokens·P² × C)`; gathering these
/// rows yields `(batch·frames·bins × C)`, ordered example, frame, bin.
pub(crate) fn frame_gather_index(seq_grid: TokenGrid, geom: &PatchSequenceGeometry) -> Vec<usize> {
    let p = geom.patch;
    let fp = geom.padded_bins / p;
    let tc = geom.padded_frames / geom.chunk_count;
    let per = seq_grid.per_example();
    let mut idx = Vec::with_capacity(seq_grid.batch * geom.frames * geom.bins);
    for b in 0..seq_grid.batch {
        for t in 0..geom.frames {
            let chunk = t / tc;
            let within = t % tc;
            let (r, dt) = (within / p, within % p);
            for m in 0..geom.bins {
                let (f, df) = (m / p, m % p);
                let c = chunk * fp + f;
                let tok = b * per + r + seq_grid.rows * c;
                idx.push(tok * p * p + dt * p + df);
            }
        }
    }
    idx
}

/// Shape facts needed to map tokens back onto frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSequenceGeometry {
    pub frames: usize,
    pub bins: usize,
    pub padded_frames: usize,
    pub padded_bins: usize,
    pub patch: usize,
    pub chunk_count: usize,
}

impl<T: Scalar> From<&PatchSequence<T>> for PatchSequenceGeometry {
    fn from(s: &PatchSequence<T>) -> Self {
        PatchSequenceGeometry {
            frames: s.frames,
            bins: s.mel_bins,
            padded_frames: s.padded_frames,
            padded_bins: s.padded_bins,
            patch: s.patch,
            chunk_count: s.chunk_count,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(chunks: usize, patch: usize, stages: usize) -> EncoderConfig {
        EncoderConfig { chunk_count: chunks, patch, depths: vec![1; stages], heads: vec![1; stages], ..EncoderConfig::toy() }
    }

    #[test]
    fn counting_and_bijection() {
        let mel = Array2::from_shape_fn((8, 4), |(t, f)| (10 * t + f) as f64);
        let seq = reshape_to_patches(&mel, &cfg(1, 2, 1)).unwrap();
        assert_eq!(seq.tokens.dim(), (8, 4));
        assert_eq!(patches_to_mel(&seq), mel);
        let odd = Array2::from_shape_fn((101, 32), |(t, f)| (t * 37 + f) as f64);
        let seq = reshape_to_patches(&odd, &EncoderConfig::toy()).unwrap();
        assert_eq!((seq.grid.rows, seq.grid.cols), (8, 32));
        assert_eq!(patches_to_mel(&seq), odd);
    }

    #[test]
    fn order_is_time_within_frequency_within_chunk() {
        // 4×4 grid of labels t·10 + f, two chunks of two frames, 1×1 patches
        let mel = Array2::from_shape_fn((4, 4), |(t, f)| (10 * t + f) as f64);
        let seq = reshape_to_patches(&mel, &cfg(2, 1, 1)).unwrap();
        let order: Vec<f64> = seq.tokens.column(0).to_vec();
        let expected = [
            0.0, 10.0, 1.0, 11.0, 2.0, 12.0, 3.0, 13.0, // chunk 0: frames 0-1
            20.0, 30.0, 21.0, 31.0, 22.0, 32.0, 23.0, 33.0, // chunk 1: frames 2-3
        ];
        assert_eq!(order, expected);
    }

    #[test]
    fn gather_index_matches_inverse_reshape() {
        let mel = Array2::from_shape_fn((37, 10), |(t, f)| (t * 11 + f) as f64 + 0.5);
        let seq = reshape_to_patches(&mel, &cfg(2, 2, 2)).unwrap();
        let idx = frame_gather_index(seq.grid, &(&seq).into());
        let flat = seq.tokens.as_slice().unwrap();
        let got: Vec<f64> = idx.iter().map(|&i| flat[i]).collect();
        assert_eq!(got, mel.iter().copied().collect::<Vec<_>>());
    }

    #[test]
    fn empty_is_rejected() {
        assert!(reshape_to_patches(&Array2::<f64>::zeros((0, 4)), &EncoderConfig::toy()).is_err());
    }
}
