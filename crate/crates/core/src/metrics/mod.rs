//! Motion evaluation: kinetic and geometric features, Fréchet distance,
//! diversity and beat alignment.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::audio::{extract_features, load_audio, SAMPLE_RATE};
use crate::audio::beats::MIN_BEAT_GAP_S;
use crate::config::Config;
use crate::error::{io_at, Error, Result};
use crate::pose::{joint_index, read_pose_csv, PoseSequence, N_JOINTS, POSE_WIDTH};

pub const KINETIC_DIM: usize = POSE_WIDTH;
pub const GEOMETRIC_DIM: usize = 32;
const COV_RIDGE: f64 = 1e-6;

/// Per joint-axis mean over frames of squared velocity, `(units/s)²`.
pub fn kinetic_features(pose: &PoseSequence) -> Result<Vec<f64>> {
    let t = pose.frames();
    if t < 2 {
        return Err(Error::Invalid(format!("kinetic features need ≥ 2 frames, got {t}")));
    }
    let mut acc = vec![0.0; POSE_WIDTH];
    for f in 1..t {
        for ((a, cur), prev) in acc.iter_mut().zip(pose.frame(f)).zip(pose.frame(f - 1)) {
            let v = (*cur as f64 - *prev as f64) * pose.fps;
            *a += v * v;
        }
    }
    Ok(acc.into_iter().map(|a| a / (t - 1) as f64).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredicateKind {
    Above,
    Front,
    Near,
    Far,
    Fast,
    RelFast,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predicate {
    pub name: String,
    pub kind: PredicateKind,
    pub a: usize,
    pub b: Option<usize>,
    pub threshold: f64,
}

const PREDICATE_TABLE: &str = include_str!("predicates.tsv");

fn parse_predicates(text: &str) -> Result<Vec<Predicate>> {
    let mut out = Vec::new();
    let joint = |s: &str| joint_index(s).ok_or_else(|| Error::Format(format!("unknown joint `{s}` in predicate table")));
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()).skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(Error::Format(format!("predicate row needs 5 fields: `{line}`")));
        }
        let kind = match f[1] {
            "above" => PredicateKind::Above,
            "front" => PredicateKind::Front,
            "near" => PredicateKind::Near,
            "far" => PredicateKind::Far,
            "fast" => PredicateKind::Fast,
            "relfast" => PredicateKind::RelFast,
            k => return Err(Error::Format(format!("unknown predicate kind `{k}`"))),
        };
        let b = if f[3] == "-" { None } else { Some(joint(f[3])?) };
        if b.is_none() && kind != PredicateKind::Fast {
            return Err(Error::Format(format!("predicate `{}` needs a second joint", f[0])));
        }
        let threshold = f[4].parse().map_err(|_| Error::Format(format!("bad threshold in `{line}`")))?;
        out.push(Predicate { name: f[0].to_string(), kind, a: joint(f[2])?, b, threshold });
    }
    Ok(out)
}

/// The shipped predicate table.
pub fn predicate_table() -> &'static [Predicate] {
    static TABLE: OnceLock<Vec<Predicate>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let t = parse_predicates(PREDICATE_TABLE).expect("bundled predicate table parses");
        assert_eq!(t.len(), GEOMETRIC_DIM);
        t
    })
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn velocity(pose: &PoseSequence, t: usize, j: usize) -> [f64; 3] {
    if pose.frames() < 2 {
        return [0.0; 3];
    }
    let (cur, prev) = if t == 0 { (1, 0) } else { (t, t - 1) };
    let d = sub(pose.joint(cur, j), pose.joint(prev, j));
    [d[0] * pose.fps, d[1] * pose.fps, d[2] * pose.fps]
}

/// Fraction of frames on which each predicate of [`predicate_table`] holds.
pub fn geometric_features(pose: &PoseSequence) -> Vec<f64> {
    let table = predicate_table();
    let t = pose.frames();
    let mut hits = vec![0usize; table.len()];
    for f in 0..t {
        for (h, p) in hits.iter_mut().zip(table) {
            let a = pose.joint(f, p.a);
            let holds = match (p.kind, p.b) {
                (PredicateKind::Above, Some(b)) => a[1] > pose.joint(f, b)[1] + p.threshold,
                (PredicateKind::Front, Some(b)) => a[2] > pose.joint(f, b)[2] + p.threshold,
                (PredicateKind::Near, Some(b)) => norm(sub(a, pose.joint(f, b))) < p.threshold,
                (PredicateKind::Far, Some(b)) => norm(sub(a, pose.joint(f, b))) > p.threshold,
                (PredicateKind::Fast, _) => norm(velocity(pose, f, p.a)) > p.threshold,
                (PredicateKind::RelFast, Some(b)) => norm(sub(velocity(pose, f, p.a), velocity(pose, f, b))) > p.threshold,
                _ => unreachable!("table validated at parse time"),
            };
            *h += usize::from(holds);
        }
    }
    hits.into_iter().map(|h| if t == 0 { 0.0 } else { h as f64 / t as f64 }).collect()
}

fn moments(set: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = set.len();
    let mut mu = DVector::zeros(dim);
    for v in set {
        mu += DVector::from_column_slice(v);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for v in set {
        let d = DVector::from_column_slice(v) - &mu;
        cov += &d * d.transpose();
    }
    cov /= (n - 1) as f64;
    for i in 0..dim {
        cov[(i, i)] += COV_RIDGE;
    }
    (mu, cov)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

fn trace_sqrt_psd(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum()
}

/// Fréchet distance between Gaussians fitted to two feature sets
/// (unbiased covariance plus a small ridge).
pub fn fid(set_a: &[Vec<f64>], set_b: &[Vec<f64>]) -> Result<f64> {
    if set_a.len() < 2 || set_b.len() < 2 {
        return Err(Error::Invalid("fid needs at least 2 vectors per set".into()));
    }
    let dim = set_a[0].len();
    if set_a.iter().chain(set_b).any(|v| v.len() != dim) {
        return Err(Error::Shape("fid feature vectors differ in dimension".into()));
    }
    let (mu_a, cov_a) = moments(set_a, dim);
    let (mu_b, cov_b) = moments(set_b, dim);
    if mu_a == mu_b && cov_a == cov_b {
        return Ok(0.0);
    }
    // Tr((Σa Σb)^½) = Tr((S Σb S)^½) with S = Σa^½, which stays symmetric.
    let s = sqrt_psd(&cov_a);
    let cross = trace_sqrt_psd(&(&s * &cov_b * &s));
    let mean_term = (&mu_a - &mu_b).norm_squared();
    Ok((mean_term + cov_a.trace() + cov_b.trace() - 2.0 * cross).max(0.0))
}

/// Mean Euclidean distance over all unordered pairs.
pub fn diversity(set: &[Vec<f64>]) -> Result<f64> {
    if set.len() < 2 {
        return Err(Error::Invalid("diversity needs at least 2 vectors".into()));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..set.len() {
        for j in i + 1..set.len() {
            if set[i].len() != set[j].len() {
                return Err(Error::Shape("diversity vectors differ in dimension".into()));
            }
            total += set[i].iter().zip(&set[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Total joint speed per frame (central difference), zero at both ends.
pub fn speed_curve(pose: &PoseSequence) -> Vec<f64> {
    let t = pose.frames();
    let mut s = vec![0.0; t];
    for (f, out) in s.iter_mut().enumerate().take(t.saturating_sub(1)).skip(1) {
        *out = (0..N_JOINTS)
            .map(|j| norm(sub(pose.joint(f + 1, j), pose.joint(f - 1, j))) * 0.5 * pose.fps)
            .sum();
    }
    s
}

/// Strict local minima of the speed curve, kept deepest-first at least
/// 0.25 s apart, returned sorted.
pub fn detect_motion_beats(pose: &PoseSequence) -> Vec<usize> {
    let s = speed_curve(pose);
    let t = s.len();
    if t < 5 {
        return Vec::new();
    }
    let mut cands: Vec<usize> = (2..t - 2).filter(|&i| s[i] < s[i - 1] && s[i] < s[i + 1]).collect();
    cands.sort_by(|a, b| s[*a].total_cmp(&s[*b]).then(a.cmp(b)));
    let gap = (MIN_BEAT_GAP_S * pose.fps).ceil() as usize;
    let mut kept: Vec<usize> = Vec::new();
    for c in cands {
        if kept.iter().all(|k| k.abs_diff(c) >= gap) {
            kept.push(c);
        }
    }
    kept.sort_unstable();
    kept
}

/// Mean over music beats of `exp(-d²/2σ²)`, `d` the distance to the nearest
/// motion beat. No motion beats scores 0.
pub fn beat_align_score(music_beats: &[usize], motion_beats: &[usize], sigma: f64) -> Result<f64> {
    if music_beats.is_empty() {
        return Err(Error::Invalid("beat_align_score needs at least one music beat".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::Invalid("beat_align_score needs σ > 0".into()));
    }
    if motion_beats.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = music_beats
        .iter()
        .map(|b| {
            let d = motion_beats.iter().map(|m| m.abs_diff(*b)).min().unwrap() as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .sum();
    Ok(total / music_beats.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fid_k: f64,
    pub fid_g: f64,
    pub div_k: f64,
    pub div_g: f64,
    pub bas: f64,
    /// Generated clips that entered the metrics.
    pub clip_count: usize,
    /// Generated clips that had audio for BAS.
    pub bas_clip_count: usize,
    pub reference_count: usize,
    /// Unreadable clips across both directories.
    pub skipped: usize,
    pub config_hash: String,
}

pub const REPORT_CSV_HEADER: &str = "config_hash,clip_count,bas_clip_count,reference_count,skipped,fid_k,fid_g,div_k,div_g,bas";

impl EvalReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.config_hash,
            self.clip_count,
            self.bas_clip_count,
            self.reference_count,
            self.skipped,
            self.fid_k,
            self.fid_g,
            self.div_k,
            self.div_g,
            self.bas
        )
    }
}

struct Clip {
    pose: PoseSequence,
    wav: Option<PathBuf>,
}

fn pose_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_at(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    out.sort();
    Ok(out)
}

/// Audio for a generated clip: `<stem>.wav` beside it, the `music` path in
/// its `<stem>.json` sidecar, or `<stem>.wav` in `fallback`.
fn audio_for(csv: &Path, fallback: Option<&Path>) -> Option<PathBuf> {
    let beside = csv.with_extension("wav");
    if beside.exists() {
        return Some(beside);
    }
    if let Ok(text) = std::fs::read_to_string(csv.with_extension("json")) {
        if let Some(m) = serde_json::from_str::<serde_json::Value>(&text).ok().and_then(|v| v["music"].as_str().map(PathBuf::from)) {
            if m.exists() {
                return Some(m);
            }
        }
    }
    let name = csv.file_stem()?;
    fallback.map(|d| d.join(name).with_extension("wav")).filter(|p| p.exists())
}

fn load_dir(dir: &Path, fallback: Option<&Path>, skipped: &mut usize) -> Result<Vec<Clip>> {
    let mut clips = Vec::new();
    for p in pose_files(dir)? {
        match read_pose_csv(&p) {
            Ok(pose) if pose.frames() >= 3 => clips.push(Clip { wav: audio_for(&p, fallback), pose }),
            Ok(_) => {
                log::warn!("skipping {}: fewer than 3 frames", p.display());
                *skipped += 1;
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", p.display());
                *skipped += 1;
            }
        }
    }
    Ok(clips)
}

/// Computes every metric for the pose CSVs in `generated_dir` against those
/// in `reference_dir`.
pub fn evaluate_suite(generated_dir: &Path, reference_dir: &Path, cfg: &Config) -> Result<EvalReport> {
    let mut skipped = 0;
    let gen = load_dir(generated_dir, Some(reference_dir), &mut skipped)?;
    let reference = load_dir(reference_dir, None, &mut skipped)?;
    if gen.len() < 2 || reference.len() < 2 {
        return Err(Error::EmptyInput(format!(
            "need at least 2 readable clips per set, found {} generated and {} reference",
            gen.len(),
            reference.len()
        )));
    }
    let kin = |cs: &[Clip]| cs.iter().map(|c| kinetic_features(&c.pose)).collect::<Result<Vec<_>>>();
    let geo = |cs: &[Clip]| cs.iter().map(|c| geometric_features(&c.pose)).collect::<Vec<_>>();
    let (gk, rk) = (kin(&gen)?, kin(&reference)?);
    let (gg, rg) = (geo(&gen), geo(&reference));
    let mut bas_sum = 0.0;
    let mut bas_n = 0usize;
    for c in &gen {
        let Some(wav) = &c.wav else { continue };
        let beats = match load_audio(wav, SAMPLE_RATE).and_then(|a| extract_features(&a)) {
            Ok(f) => f.beat_frames,
            Err(e) => {
                log::warn!("no BAS for {}: {e}", wav.display());
                continue;
            }
        };
        if beats.is_empty() {
            continue;
        }
        bas_sum += beat_align_score(&beats, &detect_motion_beats(&c.pose), cfg.eval.bas_sigma)?;
        bas_n += 1;
    }
    Ok(EvalReport {
        fid_k: fid(&gk, &rk)?,
        fid_g: fid(&gg, &rg)?,
        div_k: diversity(&gk)?,
        div_g: diversity(&gg)?,
        bas: if bas_n == 0 { 0.0 } else { bas_sum / bas_n as f64 },
        clip_count: gen.len(),
        bas_clip_count: bas_n,
        reference_count: reference.len(),
        skipped,
        config_hash: cfg.hash(),
    })
}

/// Writes the report as JSON and appends one row to `csv_path` (header
/// first if the file is new).
pub fn write_report(report: &EvalReport, json_path: &Path, csv_path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(json_path, text + "\n").map_err(io_at(json_path))?;
    if let Some(p) = csv_path {
        let new = !p.exists();
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(p).map_err(io_at(p))?;
        if new {
            writeln!(f, "{REPORT_CSV_HEADER}").map_err(io_at(p))?;
        }
        writeln!(f, "{}", report.csv_row()).map_err(io_at(p))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_has_32_rows_with_known_joints() {
        let t = predicate_table();
        assert_eq!(t.len(), 32);
        assert_eq!(t[0].name, "l_wrist_above_head");
        assert!(parse_predicates("name\tkind\ta\tb\tthreshold\nx\tabove\tnose\thead\t0\n").is_err());
        assert!(parse_predicates("name\tkind\ta\tb\tthreshold\nx\tabove\thead\t-\t0\n").is_err());
    }

    #[test]
    fn bas_examples() {
        assert_eq!(beat_align_score(&[10, 20], &[10, 20], 3.0).unwrap(), 1.0);
        assert!((beat_align_score(&[10], &[13], 3.0).unwrap() - (-0.5f64).exp()).abs() < 1e-12);
        assert_eq!(beat_align_score(&[10], &[], 3.0).unwrap(), 0.0);
        assert!(beat_align_score(&[], &[1], 3.0).is_err());
    }

    #[test]
    fn diversity_examples() {
        assert_eq!(diversity(&[vec![0.0], vec![0.0]]).unwrap(), 0.0);
        assert_eq!(diversity(&[vec![0.0], vec![2.5]]).unwrap(), 2.5);
        assert!((diversity(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap() - 4.0 / 3.0).abs() < 1e-15);
        assert!(diversity(&[vec![1.0]]).is_err());
    }

    #[test]
    fn fid_dimension_mismatch() {
        assert!(fid(&[vec![0.0], vec![1.0]], &[vec![0.0, 1.0], vec![1.0, 0.0]]).is_err());
        assert!(fid(&[vec![0.0]], &[vec![0.0], vec![1.0]]).is_err());
    }
}
