use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{HOP, N_MELS, SAMPLE_RATE, WINDOW};
use crate::error::{Error, Result};

pub const N_BINS: usize = WINDOW / 2 + 1;

/// One-sided STFT magnitudes, `frames × N_BINS`, row-major.
#[derive(Clone, Debug)]
pub struct Spectrogram {
    pub frames: usize,
    pub mag: Vec<f64>,
}

impl Spectrogram {
    pub fn frame(&self, i: usize) -> &[f64] {
        &self.mag[i * N_BINS..(i + 1) * N_BINS]
    }
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos())
        .collect()
}

/// First sample covered by frame `i`. Frame `i` is centered on the middle of
/// hop `i`, so the frame count is `ceil(len / HOP)`; samples outside the clip
/// read as zero.
pub fn frame_start(i: usize) -> isize {
    (i * HOP + HOP / 2) as isize - (WINDOW / 2) as isize
}

pub fn frame_count(samples: usize) -> usize {
    samples.div_ceil(HOP)
}

pub fn stft_magnitude(samples: &[f32]) -> Result<Spectrogram> {
    if samples.len() < WINDOW {
        return Err(Error::Invalid(format!(
            "clip of {} samples is shorter than one {WINDOW}-sample window",
            samples.len()
        )));
    }
    let frames = frame_count(samples.len());
    let window = hann_window(WINDOW);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(WINDOW);
    let mut buf = vec![Complex::new(0.0, 0.0); WINDOW];
    let mut mag = Vec::with_capacity(frames * N_BINS);
    for i in 0..frames {
        let start = frame_start(i);
        for (k, slot) in buf.iter_mut().enumerate() {
            let idx = start + k as isize;
            let v = if idx >= 0 && (idx as usize) < samples.len() { samples[idx as usize] as f64 } else { 0.0 };
            *slot = Complex::new(v * window[k], 0.0);
        }
        fft.process(&mut buf);
        mag.extend(buf[..N_BINS].iter().map(|c| c.norm()));
    }
    Ok(Spectrogram { frames, mag })
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// The `N_MELS + 2` edge frequencies (Hz): band `k` rises from `edges[k]`,
/// peaks at `edges[k + 1]` and falls to zero at `edges[k + 2]`.
pub fn mel_band_edges() -> Vec<f64> {
    let top = hz_to_mel(SAMPLE_RATE as f64 / 2.0);
    (0..N_MELS + 2)
        .map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64))
        .collect()
}

/// Triangular filters, `N_MELS × N_BINS`, peak weight 1.
pub fn mel_filterbank() -> Vec<f64> {
    let edges = mel_band_edges();
    let bin_hz = SAMPLE_RATE as f64 / WINDOW as f64;
    let mut fb = vec![0.0; N_MELS * N_BINS];
    for k in 0..N_MELS {
        let (lo, c, hi) = (edges[k], edges[k + 1], edges[k + 2]);
        for b in 0..N_BINS {
            let f = b as f64 * bin_hz;
            let w = if f >= lo && f <= c {
                (f - lo) / (c - lo)
            } else if f > c && f <= hi {
                (hi - f) / (hi - c)
            } else {
                0.0
            };
            fb[k * N_BINS + b] = w;
        }
    }
    fb
}
