//! Audio loading and the conditioning features derived from it.
//!
//! All features share one STFT grid: 15360 Hz audio, 1024-sample Hann
//! window, 256-sample hop. That yields exactly 60 frames per second, the
//! pose frame rate, so music frame `i` and pose frame `i` describe the same
//! instant.

pub(crate) mod beats;
mod cache;
mod features;
mod stft;

use std::path::Path;

pub use beats::detect_music_beats;
pub use cache::{read_feature_cache, write_feature_cache};
pub use features::{
    chroma, extract_energy, extract_features, extract_mel, extract_music_features, mfcc, mfcc_delta,
    onset_strength, tempogram, MusicFeatureClip,
};
pub use stft::{hann_window, mel_band_edges, mel_filterbank, stft_magnitude, Spectrogram};

use crate::error::{io_at, Error, Result};

pub const SAMPLE_RATE: u32 = 15_360;
pub const WINDOW: usize = 1024;
pub const HOP: usize = 256;
pub const FRAME_RATE: f64 = SAMPLE_RATE as f64 / HOP as f64;
pub const N_MELS: usize = 80;
pub const LOG_FLOOR: f64 = 1e-10;

/// Column layout of the 438-wide music feature matrix.
pub mod columns {
    use std::ops::Range;

    pub const MFCC: Range<usize> = 0..20;
    pub const MFCC_DELTA: Range<usize> = 20..40;
    pub const CHROMA: Range<usize> = 40..52;
    pub const TEMPOGRAM: Range<usize> = 52..436;
    pub const ONSET: usize = 436;
    pub const BEAT: usize = 437;
    pub const WIDTH: usize = 438;

    pub const N_MFCC: usize = MFCC.end - MFCC.start;
    pub const N_TEMPO_LAGS: usize = TEMPOGRAM.end - TEMPOGRAM.start;
}

/// Mono audio with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Reads a PCM WAV file (8/16/24/32-bit integer or 32-bit float), averages
/// channels, and linearly resamples to `target_sample_rate`.
pub fn load_audio(path: &Path, target_sample_rate: u32) -> Result<AudioClip> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(source) => Error::Io { path: path.to_path_buf(), source },
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(Error::Format(format!("{}-bit float WAV unsupported", spec.bits_per_sample)));
            }
            reader
                .into_samples::<f32>()
                .map(|s| s.map(|v| v.clamp(-1.0, 1.0)))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        }
        hound::SampleFormat::Int => {
            let bits = spec.bits_per_sample;
            if !matches!(bits, 8 | 16 | 24 | 32) {
                return Err(Error::Format(format!("{bits}-bit integer WAV unsupported")));
            }
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| (v as f64 * scale) as f32))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        }
    };
    if interleaved.is_empty() {
        return Err(Error::EmptyInput(format!("{} has no samples", path.display())));
    }
    let mono: Vec<f32> = interleaved
        .chunks(channels)
        .map(|frame| (frame.iter().map(|v| *v as f64).sum::<f64>() / frame.len() as f64) as f32)
        .collect();
    let samples = resample_linear(&mono, spec.sample_rate, target_sample_rate);
    Ok(AudioClip { samples, sample_rate: target_sample_rate })
}

/// Linear-interpolation resampling; output length `round(len * to / from)`.
pub fn resample_linear(x: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to || x.is_empty() {
        return x.to_vec();
    }
    let out_len = ((x.len() as f64) * to as f64 / from as f64).round() as usize;
    let step = from as f64 / to as f64;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * step;
            let i0 = (pos.floor() as usize).min(x.len() - 1);
            let i1 = (i0 + 1).min(x.len() - 1);
            let frac = pos - i0 as f64;
            (x[i0] as f64 * (1.0 - frac) + x[i1] as f64 * frac) as f32
        })
        .collect()
}

/// Writes mono 16-bit PCM.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(source) => Error::Io { path: path.to_path_buf(), source },
        other => Error::Format(other.to_string()),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for s in &clip.samples {
        let v = (s.clamp(-1.0, 1.0) as f64 * 32767.0).round() as i16;
        w.write_sample(v).map_err(wrap)?;
    }
    w.finalize().map_err(wrap)?;
    std::fs::metadata(path).map_err(io_at(path))?;
    Ok(())
}
