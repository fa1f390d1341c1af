use gtnb_nn::Tensor;

use super::stft::{mel_filterbank, stft_magnitude, Spectrogram, N_BINS};
use super::{columns, detect_music_beats, AudioClip, FRAME_RATE, LOG_FLOOR, N_MELS, SAMPLE_RATE, WINDOW};
use crate::error::{Error, Result};

/// Conditioning features of one clip, all on the same frame grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MusicFeatureClip {
    /// `frames × 80` natural-log mel energies.
    pub mel: Tensor<f32>,
    /// `frames × 438`, see [`columns`].
    pub music: Tensor<f32>,
    /// `frames × 1` spectral L2 norm.
    pub energy: Tensor<f32>,
    pub beat_frames: Vec<usize>,
    pub frame_rate: f64,
}

impl MusicFeatureClip {
    pub fn frames(&self) -> usize {
        self.mel.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.frames();
        if self.mel.cols() != N_MELS || self.music.cols() != columns::WIDTH || self.energy.cols() != 1 {
            return Err(Error::Shape(format!(
                "feature widths {}/{}/{} (expected {N_MELS}/{}/1)",
                self.mel.cols(),
                self.music.cols(),
                self.energy.cols(),
                columns::WIDTH
            )));
        }
        if self.music.rows() != t || self.energy.rows() != t {
            return Err(Error::Shape("feature matrices disagree on frame count".into()));
        }
        if self.beat_frames.windows(2).any(|w| w[1] <= w[0]) || self.beat_frames.iter().any(|b| *b >= t) {
            return Err(Error::Shape("beat frames must be strictly increasing and in range".into()));
        }
        Ok(())
    }

    /// Frames `[start, start + len)`.
    pub fn crop(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames() {
            return Err(Error::Invalid(format!("crop {start}+{len} beyond {} frames", self.frames())));
        }
        let rows = |t: &Tensor<f32>| {
            let c = t.cols();
            Tensor::new(vec![len, c], t.data()[start * c..(start + len) * c].to_vec()).expect("crop shape")
        };
        Ok(Self {
            mel: rows(&self.mel),
            music: rows(&self.music),
            energy: rows(&self.energy),
            beat_frames: self
                .beat_frames
                .iter()
                .filter(|b| **b >= start && **b < start + len)
                .map(|b| b - start)
                .collect(),
            frame_rate: self.frame_rate,
        })
    }
}

fn spectrogram(clip: &AudioClip) -> Result<Spectrogram> {
    if clip.sample_rate != SAMPLE_RATE {
        return Err(Error::Invalid(format!(
            "clip sampled at {} Hz; features expect {SAMPLE_RATE} Hz",
            clip.sample_rate
        )));
    }
    if clip.len() < WINDOW {
        return Err(Error::Invalid(format!("clip of {} samples is shorter than one window", clip.len())));
    }
    stft_magnitude(&clip.samples)
}

fn log_mel_rows(spec: &Spectrogram) -> Vec<Vec<f64>> {
    let fb = mel_filterbank();
    (0..spec.frames)
        .map(|i| {
            let frame = spec.frame(i);
            (0..N_MELS)
                .map(|k| {
                    let e: f64 = fb[k * N_BINS..(k + 1) * N_BINS].iter().zip(frame).map(|(w, m)| w * m).sum();
                    e.max(LOG_FLOOR).ln()
                })
                .collect()
        })
        .collect()
}

fn energy_rows(spec: &Spectrogram) -> Vec<f64> {
    (0..spec.frames).map(|i| spec.frame(i).iter().map(|m| m * m).sum::<f64>().sqrt()).collect()
}

fn to_tensor(rows: &[Vec<f64>], width: usize) -> Tensor<f32> {
    let data = rows.iter().flat_map(|r| r.iter().map(|v| *v as f32)).collect();
    Tensor::new(vec![rows.len(), width], data).expect("feature shape")
}

/// Orthonormal DCT-II of each log-mel row, first 20 coefficients.
pub fn mfcc(log_mel: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = N_MELS as f64;
    let basis: Vec<Vec<f64>> = (0..columns::N_MFCC)
        .map(|k| {
            let s = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            (0..N_MELS)
                .map(|j| s * (std::f64::consts::PI * k as f64 * (2 * j + 1) as f64 / (2.0 * n)).cos())
                .collect()
        })
        .collect();
    log_mel
        .iter()
        .map(|row| basis.iter().map(|b| b.iter().zip(row).map(|(x, y)| x * y).sum()).collect())
        .collect()
}

/// Least-squares slope over a 5-frame window, edges clamped.
pub fn mfcc_delta(coeffs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let t = coeffs.len();
    let at = |i: isize| &coeffs[i.clamp(0, t as isize - 1) as usize];
    (0..t as isize)
        .map(|i| {
            (0..coeffs[0].len())
                .map(|c| (1..=2).map(|n| n as f64 * (at(i + n)[c] - at(i - n)[c])).sum::<f64>() / 10.0)
                .collect()
        })
        .collect()
}

/// Pitch-class profile: STFT power folded onto 12 classes (C = 0), each frame
/// divided by its maximum.
pub fn chroma(spec: &Spectrogram) -> Vec<Vec<f64>> {
    let bin_hz = SAMPLE_RATE as f64 / WINDOW as f64;
    let class: Vec<Option<usize>> = (0..N_BINS)
        .map(|b| {
            let f = b as f64 * bin_hz;
            if f < 32.0 {
                None
            } else {
                let semis = (12.0 * (f / 440.0).log2()).round() as i64;
                Some((semis + 9).rem_euclid(12) as usize)
            }
        })
        .collect();
    (0..spec.frames)
        .map(|i| {
            let mut c = vec![0.0; 12];
            for (m, cls) in spec.frame(i).iter().zip(&class) {
                if let Some(k) = cls {
                    c[*k] += m * m;
                }
            }
            let mx = c.iter().copied().fold(0.0, f64::max);
            if mx > 1e-12 {
                c.iter_mut().for_each(|v| *v /= mx);
            } else {
                c.iter_mut().for_each(|v| *v = 0.0);
            }
            c
        })
        .collect()
}

/// Half-wave-rectified first difference of log-mel, summed over bands.
pub fn onset_strength(log_mel: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; log_mel.len()];
    for t in 1..log_mel.len() {
        out[t] = log_mel[t].iter().zip(&log_mel[t - 1]).map(|(a, b)| (a - b).max(0.0)).sum();
    }
    out
}

/// Windowed autocorrelation of the onset envelope: 384 lags, a 384-frame
/// Hann window centered on each frame, zero padding beyond the clip, and each
/// frame normalized by its lag-0 value.
pub fn tempogram(onset: &[f64]) -> Vec<Vec<f64>> {
    let lags = columns::N_TEMPO_LAGS;
    let win = super::hann_window(lags);
    let half = (lags / 2) as isize;
    let mut seg = vec![0.0; lags];
    (0..onset.len())
        .map(|t| {
            for (n, s) in seg.iter_mut().enumerate() {
                let idx = t as isize - half + n as isize;
                *s = if idx >= 0 && (idx as usize) < onset.len() { onset[idx as usize] * win[n] } else { 0.0 };
            }
            let mut ac: Vec<f64> = (0..lags)
                .map(|lag| seg[..lags - lag].iter().zip(&seg[lag..]).map(|(a, b)| a * b).sum())
                .collect();
            let norm = ac[0];
            if norm > 0.0 {
                ac.iter_mut().for_each(|v| *v /= norm);
            } else {
                ac.iter_mut().for_each(|v| *v = 0.0);
            }
            ac
        })
        .collect()
}

pub fn extract_mel(clip: &AudioClip) -> Result<Tensor<f32>> {
    let spec = spectrogram(clip)?;
    Ok(to_tensor(&log_mel_rows(&spec), N_MELS))
}

pub fn extract_energy(clip: &AudioClip) -> Result<Tensor<f32>> {
    let spec = spectrogram(clip)?;
    let e = energy_rows(&spec);
    Ok(Tensor::new(vec![e.len(), 1], e.iter().map(|v| *v as f32).collect())?)
}

fn music_rows(spec: &Spectrogram, log_mel: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<usize>) {
    let c = mfcc(log_mel);
    let d = mfcc_delta(&c);
    let ch = chroma(spec);
    let onset = onset_strength(log_mel);
    let tg = tempogram(&onset);
    let beats = detect_music_beats(&onset, FRAME_RATE);
    let mut rows = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let mut r = Vec::with_capacity(columns::WIDTH);
        r.extend_from_slice(&c[t]);
        r.extend_from_slice(&d[t]);
        r.extend_from_slice(&ch[t]);
        r.extend_from_slice(&tg[t]);
        r.push(onset[t]);
        r.push(0.0);
        rows.push(r);
    }
    for b in &beats {
        rows[*b][columns::BEAT] = 1.0;
    }
    (rows, beats)
}

pub fn extract_music_features(clip: &AudioClip) -> Result<Tensor<f32>> {
    let spec = spectrogram(clip)?;
    let lm = log_mel_rows(&spec);
    Ok(to_tensor(&music_rows(&spec, &lm).0, columns::WIDTH))
}

/// All conditioning features from a single STFT pass.
pub fn extract_features(clip: &AudioClip) -> Result<MusicFeatureClip> {
    let spec = spectrogram(clip)?;
    let lm = log_mel_rows(&spec);
    let (music, beat_frames) = music_rows(&spec, &lm);
    let e = energy_rows(&spec);
    Ok(MusicFeatureClip {
        mel: to_tensor(&lm, N_MELS),
        music: to_tensor(&music, columns::WIDTH),
        energy: Tensor::new(vec![e.len(), 1], e.iter().map(|v| *v as f32).collect())?,
        beat_frames,
        frame_rate: FRAME_RATE,
    })
}
