//! Manifests: tab-separated, header row naming the columns. Recognized
//! columns are `clip_id`, `pose_path`, `wav_path` and `genre_code`; only
//! `clip_id` is mandatory. Relative paths resolve against the manifest's
//! directory.

use std::path::{Path, PathBuf};

use crate::audio::{extract_features, load_audio, read_feature_cache, write_feature_cache, MusicFeatureClip, SAMPLE_RATE};
use crate::error::{io_at, Error, Result};
use crate::genre::GenreLabel;
use crate::gtn::GenreExample;
use crate::pose::{read_pose_csv, PoseSequence};

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub pose_path: Option<PathBuf>,
    pub wav_path: Option<PathBuf>,
    pub genre: Option<GenreLabel>,
}

pub const MANIFEST_HEADER: &str = "clip_id\tpose_path\twav_path\tgenre_code";

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(io_at(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::EmptyInput(format!("{} is empty", path.display())))?
        .split('\t')
        .map(str::trim)
        .collect();
    let col = |name: &str| header.iter().position(|h| *h == name);
    let id_col = col("clip_id").ok_or_else(|| Error::Format(format!("{}: no clip_id column", path.display())))?;
    let (pose_col, wav_col, genre_col) = (col("pose_path"), col("wav_path"), col("genre_code"));
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split('\t').map(str::trim).collect();
        if f.len() != header.len() {
            return Err(Error::Format(format!(
                "{}:{}: {} fields, header has {}",
                path.display(),
                n + 2,
                f.len(),
                header.len()
            )));
        }
        let resolve = |c: Option<usize>| c.map(|c| f[c]).filter(|s| !s.is_empty()).map(|s| base.join(s));
        let genre = match genre_col.map(|c| f[c]).filter(|s| !s.is_empty()) {
            Some(code) => Some(GenreLabel::from_code(code)?),
            None => None,
        };
        out.push(ManifestEntry {
            clip_id: f[id_col].to_string(),
            pose_path: resolve(pose_col),
            wav_path: resolve(wav_col),
            genre,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyInput(format!("{} lists no clips", path.display())));
    }
    Ok(out)
}

fn relative(p: &Path, base: &Path) -> String {
    p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned()
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for e in entries {
        let p = e.pose_path.as_deref().map(|p| relative(p, base)).unwrap_or_default();
        let w = e.wav_path.as_deref().map(|p| relative(p, base)).unwrap_or_default();
        let g = e.genre.map(|g| g.code()).unwrap_or("");
        out.push_str(&format!("{}\t{p}\t{w}\t{g}\n", e.clip_id));
    }
    std::fs::write(path, out).map_err(io_at(path))
}

impl ManifestEntry {
    pub fn wav(&self) -> Result<&Path> {
        self.wav_path.as_deref().ok_or_else(|| Error::Invalid(format!("clip {} has no wav_path", self.clip_id)))
    }

    pub fn pose(&self) -> Result<&Path> {
        self.pose_path.as_deref().ok_or_else(|| Error::Invalid(format!("clip {} has no pose_path", self.clip_id)))
    }

    pub fn label(&self) -> Result<GenreLabel> {
        self.genre.ok_or_else(|| Error::Invalid(format!("clip {} has no genre label", self.clip_id)))
    }

    /// Audio features, read from `<cache_dir>/<clip_id>.gtnf` when present
    /// and written there otherwise.
    pub fn features(&self, cache_dir: Option<&Path>) -> Result<MusicFeatureClip> {
        let cached = cache_dir.map(|d| d.join(format!("{}.gtnf", self.clip_id)));
        if let Some(p) = cached.as_deref().filter(|p| p.exists()) {
            return read_feature_cache(p);
        }
        let f = extract_features(&load_audio(self.wav()?, SAMPLE_RATE)?)?;
        if let Some(p) = cached {
            write_feature_cache(&p, &f)?;
        }
        Ok(f)
    }

    pub fn load_pose(&self) -> Result<PoseSequence> {
        read_pose_csv(self.pose()?)
    }
}

pub fn genre_examples(entries: &[ManifestEntry], cache_dir: Option<&Path>) -> Result<Vec<GenreExample>> {
    entries
        .iter()
        .map(|e| {
            Ok(GenreExample { clip_id: e.clip_id.clone(), mel: e.features(cache_dir)?.mel, label: e.label()? })
        })
        .collect()
}

/// Splits off the last `per_genre` clips of each genre (manifest order) as a
/// held-out set. Unlabelled clips stay in the training part.
pub fn holdout_split(entries: &[ManifestEntry], per_genre: usize) -> (Vec<ManifestEntry>, Vec<ManifestEntry>) {
    let mut held = vec![false; entries.len()];
    for g in GenreLabel::all() {
        let idx: Vec<usize> = (0..entries.len()).filter(|i| entries[*i].genre == Some(g)).collect();
        for i in idx.iter().rev().take(per_genre) {
            held[*i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (e, h) in entries.iter().zip(held) {
        if h { test.push(e.clone()) } else { train.push(e.clone()) }
    }
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip_and_subset_columns() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.tsv");
        let e = vec![ManifestEntry {
            clip_id: "a".into(),
            pose_path: Some(dir.path().join("clips/a.csv")),
            wav_path: Some(dir.path().join("clips/a.wav")),
            genre: Some(GenreLabel::from_code("LO").unwrap()),
        }];
        write_manifest(&m, &e).unwrap();
        assert!(std::fs::read_to_string(&m).unwrap().contains("a\tclips/a.csv\tclips/a.wav\tLO"));
        assert_eq!(read_manifest(&m).unwrap(), e);
        std::fs::write(&m, "clip_id\twav_path\tgenre_code\nx\tx.wav\tBR\n").unwrap();
        let r = read_manifest(&m).unwrap();
        assert_eq!(r[0].pose_path, None);
        assert_eq!(r[0].genre.unwrap().code(), "BR");
        std::fs::write(&m, "clip_id\tgenre_code\nx\tZZ\n").unwrap();
        assert!(read_manifest(&m).is_err());
    }
}
