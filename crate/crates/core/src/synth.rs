//! Synthetic stand-in corpus: ten genres, each with its own pitch, timbre and
//! click tempo in the audio and its own moving joint group, axis and
//! amplitude in the motion. Motion turns around on every audio beat.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{write_wav, AudioClip, SAMPLE_RATE};
use crate::dataset::{write_manifest, ManifestEntry};
use crate::error::{io_at, Result};
use crate::genre::{GenreLabel, N_GENRES};
use crate::pose::{write_pose_csv, PoseSequence, N_JOINTS, POSE_FPS, POSE_WIDTH};

pub const DEFAULT_CLIPS_PER_GENRE: usize = 8;
pub const CLIP_SECONDS: f64 = 4.0;

/// Approximate rest pose, metres, root-relative (y up, z forward).
pub const REST_POSE: [[f64; 3]; N_JOINTS] = [
    [0.0, 0.0, 0.0],
    [0.06, -0.09, 0.0],
    [-0.06, -0.09, 0.0],
    [0.0, 0.11, -0.02],
    [0.10, -0.47, 0.0],
    [-0.10, -0.47, 0.0],
    [0.0, 0.25, 0.0],
    [0.10, -0.86, -0.03],
    [-0.10, -0.86, -0.03],
    [0.0, 0.30, 0.01],
    [0.11, -0.92, 0.09],
    [-0.11, -0.92, 0.09],
    [0.0, 0.52, -0.01],
    [0.08, 0.43, 0.0],
    [-0.08, 0.43, 0.0],
    [0.0, 0.60, 0.04],
    [0.18, 0.42, -0.01],
    [-0.18, 0.42, -0.01],
    [0.43, 0.41, -0.03],
    [-0.43, 0.41, -0.03],
    [0.68, 0.42, -0.02],
    [-0.68, 0.42, -0.02],
    [0.76, 0.41, -0.02],
    [-0.76, 0.41, -0.02],
];

/// Per-genre motion: `(joints, axis, amplitude in metres)` groups.
fn motion_groups(genre: usize) -> Vec<(&'static [usize], usize, f64)> {
    const LEGS: &[usize] = &[4, 5, 7, 8, 10, 11];
    const ARMS: &[usize] = &[18, 19, 20, 21, 22, 23];
    const R_ARM: &[usize] = &[19, 21, 23];
    const L_ARM: &[usize] = &[18, 20, 22];
    const L_LEG: &[usize] = &[4, 7, 10];
    const R_LEG: &[usize] = &[5, 8, 11];
    const HEAD: &[usize] = &[12, 15];
    const WRISTS: &[usize] = &[20, 21, 22, 23];
    const TORSO: &[usize] = &[9, 12, 13, 14, 15, 16, 17];
    match genre {
        0 => vec![(LEGS, 1, 0.15)],
        1 => vec![(ARMS, 0, 0.20)],
        2 => vec![(R_ARM, 1, 0.30)],
        3 => vec![(HEAD, 2, 0.12)],
        4 => vec![(L_LEG, 2, 0.25)],
        5 => vec![(WRISTS, 2, 0.30)],
        6 => vec![(L_ARM, 1, 0.30)],
        7 => vec![(TORSO, 0, 0.10)],
        8 => vec![(R_LEG, 2, 0.22), (L_ARM, 2, 0.15)],
        _ => vec![(LEGS, 0, 0.08), (WRISTS, 1, 0.18)],
    }
}

/// Beats per minute of a genre's click track.
pub fn genre_bpm(genre: usize) -> f64 {
    80.0 + 8.0 * genre as f64
}

fn genre_pitch(genre: usize) -> f64 {
    110.0 * 2f64.powf(genre as f64 * 0.25)
}

/// One clip's audio. `offset_s` places the first click.
pub fn synth_audio(genre: usize, offset_s: f64, rng: &mut ChaCha8Rng) -> AudioClip {
    let n = (CLIP_SECONDS * SAMPLE_RATE as f64) as usize;
    let sr = SAMPLE_RATE as f64;
    let f0 = genre_pitch(genre) * (1.0 + rng.gen_range(-0.01..0.01));
    let harmonics = 1 + genre % 4;
    let decay = 0.35 + 0.1 * (genre % 3) as f64;
    let amp = rng.gen_range(0.25..0.35);
    let beat = 60.0 / genre_bpm(genre);
    let click_hz = 1500.0 + 150.0 * genre as f64;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let mut v = 0.0;
            for h in 1..=harmonics {
                v += decay.powi(h as i32 - 1) * (2.0 * PI * f0 * h as f64 * t).sin();
            }
            v *= amp / harmonics as f64;
            let since = (t - offset_s).rem_euclid(beat);
            if t >= offset_s && since < 0.03 {
                v += 0.5 * (-since / 0.006).exp() * (2.0 * PI * click_hz * since).sin();
            }
            v += rng.gen_range(-0.003..0.003);
            v.clamp(-1.0, 1.0) as f32
        })
        .collect();
    AudioClip::new(samples, SAMPLE_RATE)
}

/// One clip's motion: each genre group oscillates with a half-period of one
/// beat, turning around on the clicks.
pub fn synth_pose(genre: usize, offset_s: f64, rng: &mut ChaCha8Rng) -> PoseSequence {
    let frames = (CLIP_SECONDS * POSE_FPS) as usize;
    let beat = 60.0 / genre_bpm(genre);
    let groups: Vec<_> = motion_groups(genre).into_iter().map(|(j, a, amp)| (j, a, amp * rng.gen_range(0.9..1.1))).collect();
    let mut rows = Vec::with_capacity(frames);
    for f in 0..frames {
        let t = f as f64 / POSE_FPS;
        let phase = PI * (t - offset_s) / beat;
        let mut row = vec![0.0f32; POSE_WIDTH];
        for (j, p) in REST_POSE.iter().enumerate() {
            for a in 0..3 {
                row[3 * j + a] = p[a] as f32;
            }
        }
        for (joints, axis, amp) in &groups {
            let d = amp * phase.cos();
            for j in *joints {
                row[3 * j + axis] += d as f32;
            }
        }
        for v in row.iter_mut().skip(3) {
            *v += rng.gen_range(-0.001..0.001);
        }
        rows.push(row);
    }
    PoseSequence::from_frames(&rows, POSE_FPS).expect("pose width")
}

/// Writes `clips/<id>.wav`, `clips/<id>.csv` and `manifest.tsv` under `out_dir`.
pub fn make_synthetic_corpus(out_dir: &Path, seed: u64, clips_per_genre: usize) -> Result<Vec<ManifestEntry>> {
    let clips = out_dir.join("clips");
    std::fs::create_dir_all(&clips).map_err(io_at(&clips))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(N_GENRES * clips_per_genre);
    for label in GenreLabel::all() {
        let g = label.id();
        for c in 0..clips_per_genre {
            let id = format!("{}_{c:02}", label.code());
            let offset = rng.gen_range(0.0..60.0 / genre_bpm(g));
            let audio = synth_audio(g, offset, &mut rng);
            let pose = synth_pose(g, offset, &mut rng);
            let wav = clips.join(format!("{id}.wav"));
            let csv = clips.join(format!("{id}.csv"));
            write_wav(&wav, &audio)?;
            write_pose_csv(&csv, &pose)?;
            entries.push(ManifestEntry { clip_id: id, pose_path: Some(csv), wav_path: Some(wav), genre: Some(label) });
        }
    }
    write_manifest(&out_dir.join("manifest.tsv"), &entries)?;
    Ok(entries)
}
