//! Per-clip feature cache.
//!
//! Layout (little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `GTNF` |
//! | 4     | u32 format version (1) |
//! | 8     | u64 frame count `T` |
//! | 8     | f64 frame rate |
//! | 4     | u32 number of column groups (3) |
//! | 12    | u32 widths: mel (80), music (438), energy (1) |
//! | T·519·4 | f32 rows, each `mel ‖ music ‖ energy` |
//!
//! Beat frames are recovered from the music beat column.

use std::io::{Read, Write};
use std::path::Path;

use gtnb_nn::Tensor;

use super::{columns, MusicFeatureClip, N_MELS};
use crate::error::{io_at, Error, Result};

const MAGIC: &[u8; 4] = b"GTNF";
const VERSION: u32 = 1;

pub fn write_feature_cache(path: &Path, clip: &MusicFeatureClip) -> Result<()> {
    clip.validate()?;
    let t = clip.frames();
    let widths = [N_MELS as u32, columns::WIDTH as u32, 1];
    let mut buf = Vec::with_capacity(40 + t * 519 * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(t as u64).to_le_bytes());
    buf.extend_from_slice(&clip.frame_rate.to_le_bytes());
    buf.extend_from_slice(&(widths.len() as u32).to_le_bytes());
    for w in widths {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    for r in 0..t {
        for m in [&clip.mel, &clip.music, &clip.energy] {
            for v in m.row(r) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(io_at(path))?;
    f.write_all(&buf).map_err(io_at(path))
}

fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let s = buf.get(*pos..*pos + n).ok_or_else(|| Error::Format("feature cache truncated".into()))?;
    *pos += n;
    Ok(s)
}

fn u32_at(buf: &[u8], pos: &mut usize) -> Result<u32> {
    Ok(u32::from_le_bytes(take(buf, pos, 4)?.try_into().unwrap()))
}

pub fn read_feature_cache(path: &Path) -> Result<MusicFeatureClip> {
    let mut buf = Vec::new();
    std::fs::File::open(path).map_err(io_at(path))?.read_to_end(&mut buf).map_err(io_at(path))?;
    let mut pos = 0;
    if take(&buf, &mut pos, 4)? != MAGIC {
        return Err(Error::Format(format!("{} is not a feature cache", path.display())));
    }
    let version = u32_at(&buf, &mut pos)?;
    if version != VERSION {
        return Err(Error::Format(format!("feature cache version {version} unsupported")));
    }
    let t = u64::from_le_bytes(take(&buf, &mut pos, 8)?.try_into().unwrap()) as usize;
    let frame_rate = f64::from_le_bytes(take(&buf, &mut pos, 8)?.try_into().unwrap());
    let groups = u32_at(&buf, &mut pos)?;
    let widths: Vec<usize> = (0..groups).map(|_| u32_at(&buf, &mut pos).map(|w| w as usize)).collect::<Result<_>>()?;
    if widths != [N_MELS, columns::WIDTH, 1] {
        return Err(Error::Format(format!("unexpected column widths {widths:?}")));
    }
    let mut mats: Vec<Vec<f32>> = widths.iter().map(|w| Vec::with_capacity(w * t)).collect();
    for _ in 0..t {
        for (m, w) in mats.iter_mut().zip(&widths) {
            for c in take(&buf, &mut pos, w * 4)?.chunks_exact(4) {
                m.push(f32::from_le_bytes(c.try_into().unwrap()));
            }
        }
    }
    let energy = mats.pop().unwrap();
    let music = mats.pop().unwrap();
    let mel = mats.pop().unwrap();
    let beat_frames = (0..t).filter(|r| music[r * columns::WIDTH + columns::BEAT] > 0.5).collect();
    let clip = MusicFeatureClip {
        mel: Tensor::new(vec![t, N_MELS], mel)?,
        music: Tensor::new(vec![t, columns::WIDTH], music)?,
        energy: Tensor::new(vec![t, 1], energy)?,
        beat_frames,
        frame_rate,
    };
    clip.validate()?;
    Ok(clip)
}
