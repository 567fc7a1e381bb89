mod mask;
mod masked_istft;
mod mel;
mod resample;
mod stft;
mod waveform;
mod wav;

pub use mask::{apply_mask, magphase, mask_magphase, MagPhase};
pub use masked_istft::MaskedIstft;
pub use mel::{mel_filterbank, mel_spectrogram, MelConfig, MelSpectrogram};
pub use resample::{resample, resample_ratio, resample_with, ResampleQuality};
pub use stft::{istft, stft, ComplexSpectrogram, StftConfig, WindowKind};
pub use waveform::Waveform;
pub use wav::{read_wav, write_wav, write_wav_pcm16};
