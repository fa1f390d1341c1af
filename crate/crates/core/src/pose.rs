//! Pose sequences: 24 joints × xyz per frame, root-relative metres, y up,
//! z forward.

use std::fmt::Write as _;
use std::path::Path;

use gtnb_nn::Tensor;

use crate::error::{io_at, Error, Result};

pub const N_JOINTS: usize = 24;
pub const POSE_WIDTH: usize = N_JOINTS * 3;
pub const POSE_FPS: f64 = 60.0;

pub const JOINT_NAMES: [&str; N_JOINTS] = [
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2", "l_ankle", "r_ankle", "spine3",
    "l_foot", "r_foot", "neck", "l_collar", "r_collar", "head", "l_shoulder", "r_shoulder", "l_elbow",
    "r_elbow", "l_wrist", "r_wrist", "l_hand", "r_hand",
];

/// Upper body: spine3, neck, collars, head, shoulders, elbows, wrists, hands.
pub const UPPER_JOINTS: [usize; 13] = [9, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23];
/// Lower body: pelvis (root), hips, spine1, knees, spine2, ankles, feet.
pub const LOWER_JOINTS: [usize; 11] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 10, 11];

pub const UPPER_WIDTH: usize = UPPER_JOINTS.len() * 3;
pub const LOWER_WIDTH: usize = LOWER_JOINTS.len() * 3;

pub fn joint_index(name: &str) -> Option<usize> {
    JOINT_NAMES.iter().position(|n| *n == name)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    /// `frames × 72`.
    pub data: Tensor<f32>,
    pub fps: f64,
}

impl PoseSequence {
    pub fn new(data: Tensor<f32>, fps: f64) -> Result<Self> {
        if data.rank() != 2 || data.cols() != POSE_WIDTH {
            return Err(Error::Shape(format!("pose must be frames × {POSE_WIDTH}, got {:?}", data.shape())));
        }
        if !data.all_finite() {
            return Err(Error::Invalid("pose contains non-finite values".into()));
        }
        Ok(Self { data, fps })
    }

    pub fn from_frames(frames: &[Vec<f32>], fps: f64) -> Result<Self> {
        let t = frames.len();
        let data: Vec<f32> = frames.iter().flatten().copied().collect();
        if data.len() != t * POSE_WIDTH {
            return Err(Error::Shape(format!("pose rows must have {POSE_WIDTH} values")));
        }
        Self::new(Tensor::new(vec![t, POSE_WIDTH], data)?, fps)
    }

    pub fn frames(&self) -> usize {
        self.data.rows()
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        self.data.row(t)
    }

    pub fn joint(&self, t: usize, j: usize) -> [f64; 3] {
        let r = self.frame(t);
        [r[3 * j] as f64, r[3 * j + 1] as f64, r[3 * j + 2] as f64]
    }

    pub fn crop(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames() {
            return Err(Error::Invalid(format!("crop {start}+{len} beyond {} frames", self.frames())));
        }
        let d = self.data.data()[start * POSE_WIDTH..(start + len) * POSE_WIDTH].to_vec();
        Self::new(Tensor::new(vec![len, POSE_WIDTH], d)?, self.fps)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HalfBodySplit {
    /// `frames × 39`.
    pub upper: Tensor<f32>,
    /// `frames × 33`.
    pub lower: Tensor<f32>,
}

fn select(pose: &Tensor<f32>, joints: &[usize]) -> Tensor<f32> {
    let t = pose.rows();
    let mut out = Vec::with_capacity(t * joints.len() * 3);
    for r in 0..t {
        let row = pose.row(r);
        for j in joints {
            out.extend_from_slice(&row[3 * j..3 * j + 3]);
        }
    }
    Tensor::new(vec![t, joints.len() * 3], out).expect("selection shape")
}

pub fn split_body(pose: &Tensor<f32>) -> Result<HalfBodySplit> {
    if pose.rank() != 2 || pose.cols() != POSE_WIDTH {
        return Err(Error::Shape(format!("split_body expects frames × {POSE_WIDTH}, got {:?}", pose.shape())));
    }
    Ok(HalfBodySplit { upper: select(pose, &UPPER_JOINTS), lower: select(pose, &LOWER_JOINTS) })
}

pub fn merge_body(split: &HalfBodySplit) -> Result<Tensor<f32>> {
    let t = split.upper.rows();
    if split.upper.cols() != UPPER_WIDTH || split.lower.cols() != LOWER_WIDTH || split.lower.rows() != t {
        return Err(Error::Shape(format!(
            "halves {:?} and {:?} do not form a pose",
            split.upper.shape(),
            split.lower.shape()
        )));
    }
    let mut out = vec![0.0f32; t * POSE_WIDTH];
    for r in 0..t {
        let dst = &mut out[r * POSE_WIDTH..(r + 1) * POSE_WIDTH];
        for (half, joints) in [(&split.upper, &UPPER_JOINTS[..]), (&split.lower, &LOWER_JOINTS[..])] {
            let src = half.row(r);
            for (k, j) in joints.iter().enumerate() {
                dst[3 * j..3 * j + 3].copy_from_slice(&src[3 * k..3 * k + 3]);
            }
        }
    }
    Ok(Tensor::new(vec![t, POSE_WIDTH], out)?)
}

pub fn pose_csv_header() -> String {
    let mut h = String::new();
    for (j, name) in JOINT_NAMES.iter().enumerate() {
        for axis in ["x", "y", "z"] {
            if j > 0 || axis != "x" {
                h.push(',');
            }
            let _ = write!(h, "{name}_{axis}");
        }
    }
    h
}

/// Reads a pose CSV: one header row, then one row of 72 numbers per frame.
pub fn read_pose_csv(path: &Path) -> Result<PoseSequence> {
    let text = std::fs::read_to_string(path).map_err(io_at(path))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    lines.next().ok_or_else(|| Error::EmptyInput(format!("{} is empty", path.display())))?;
    let mut data = Vec::new();
    let mut frames = 0;
    for (n, line) in lines.enumerate() {
        let before = data.len();
        for field in line.split(',') {
            let v: f32 = field
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("{}:{}: bad number `{field}`", path.display(), n + 2)))?;
            data.push(v);
        }
        if data.len() - before != POSE_WIDTH {
            return Err(Error::Format(format!(
                "{}:{}: expected {POSE_WIDTH} columns, found {}",
                path.display(),
                n + 2,
                data.len() - before
            )));
        }
        frames += 1;
    }
    if frames == 0 {
        return Err(Error::EmptyInput(format!("{} has no frames", path.display())));
    }
    PoseSequence::new(Tensor::new(vec![frames, POSE_WIDTH], data)?, POSE_FPS)
}

pub fn write_pose_csv(path: &Path, pose: &PoseSequence) -> Result<()> {
    let mut out = pose_csv_header();
    out.push('\n');
    for t in 0..pose.frames() {
        for (i, v) in pose.frame(t).iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_at(path))
}
