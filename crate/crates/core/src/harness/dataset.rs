//! Pose sequences and their JSON-lines form.
//!
//! One frame per line:
//!
//! ```text
//! {"seq": "s1", "t": 0.04, "joints": [[x, y, z], ...],
//!  "covs": [[[..], [..], [..]], ...], "truth": [[x, y, z], ...], "ood": true}
//! ```
//!
//! Only `t` and `joints` are required. Lines without `seq` belong to sequence
//! `"0"`. Frames of one sequence appear in time order; sequences keep the
//! order of their first line.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::geometry::{Pose, PoseCovariances};
use crate::predict::{MotionHistory, TIMESTAMP_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Cal,
    Test,
}

/// One recorded or simulated pose stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub id: String,
    /// Observed (possibly noisy) poses.
    pub poses: Vec<Pose>,
    pub covs: Option<Vec<PoseCovariances>>,
    /// Noise-free poses, when known.
    pub truth: Option<Vec<Pose>>,
    /// Per-frame OOD event flags.
    pub ood: Vec<bool>,
}

impl Sequence {
    pub fn new(id: impl Into<String>, poses: Vec<Pose>) -> Self {
        let n = poses.len();
        Self {
            id: id.into(),
            poses,
            covs: None,
            truth: None,
            ood: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn joints(&self) -> usize {
        self.poses.first().map_or(0, Pose::len)
    }

    /// Ground truth if present, otherwise the observations.
    pub fn reference(&self) -> &[Pose] {
        self.truth.as_deref().unwrap_or(&self.poses)
    }

    /// `k_i` observed poses starting at `start`; missing covariances become
    /// isotropic with standard deviation `default_sigma`.
    pub fn history(
        &self,
        start: usize,
        k_i: usize,
        default_sigma: f64,
        frame_rate: f64,
    ) -> Result<MotionHistory> {
        if start + k_i > self.len() {
            return Err(HarnessError::LengthMismatch {
                what: format!(
                    "window {start}..{} exceeds sequence length {}",
                    start + k_i,
                    self.len()
                ),
            });
        }
        let poses = self.poses[start..start + k_i].to_vec();
        let covs = match &self.covs {
            Some(c) => c[start..start + k_i].to_vec(),
            None => vec![PoseCovariances::isotropic(self.joints(), default_sigma); k_i],
        };
        Ok(MotionHistory::new_unchecked_spacing(
            poses, covs, frame_rate,
        )?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionDataset {
    pub sequences: Vec<Sequence>,
    /// Hz; 0 when no sequence has two frames.
    pub frame_rate: f64,
    pub split: Split,
}

impl MotionDataset {
    pub fn empty(split: Split) -> Self {
        Self {
            sequences: Vec::new(),
            frame_rate: 0.0,
            split,
        }
    }

    pub fn frames(&self) -> usize {
        self.sequences.iter().map(Sequence::len).sum()
    }

    /// Errors if any sequence is shorter than `k_i + k_p` frames.
    pub fn check_lengths(&self, k_i: usize, k_p: usize) -> Result<()> {
        match self.sequences.iter().find(|s| s.len() < k_i + k_p) {
            Some(s) => Err(HarnessError::LengthMismatch {
                what: format!(
                    "sequence {} has {} frames, need {}",
                    s.id,
                    s.len(),
                    k_i + k_p
                ),
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seq: Option<String>,
    t: f64,
    joints: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    covs: Option<Vec<[[f64; 3]; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    truth: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    ood: bool,
}

fn to_points(rows: &[[f64; 3]]) -> Vec<Vector3<f64>> {
    rows.iter()
        .map(|r| Vector3::new(r[0], r[1], r[2]))
        .collect()
}

fn from_points(p: &[Vector3<f64>]) -> Vec<[f64; 3]> {
    p.iter().map(|v| [v.x, v.y, v.z]).collect()
}

struct Builder {
    seq: Sequence,
    /// Line that fixed the sequence's frame spacing.
    dt_line: usize,
    dt: Option<f64>,
}

fn schema(line: usize, message: impl Into<String>) -> HarnessError {
    HarnessError::Schema {
        line,
        message: message.into(),
    }
}

impl Builder {
    fn push(&mut self, frame: FrameLine, line: usize) -> Result<()> {
        let joints = frame.joints.len();
        if let Some(prev) = self.seq.poses.last() {
            if joints != prev.len() {
                return Err(schema(
                    line,
                    format!("{joints} joints, earlier frames have {}", prev.len()),
                ));
            }
            let step = frame.t - prev.timestamp;
            if !(step > 0.0) {
                return Err(schema(
                    line,
                    format!("timestamp {} does not increase", frame.t),
                ));
            }
            match self.dt {
                None => {
                    self.dt = Some(step);
                    self.dt_line = line;
                }
                Some(dt) if (step - dt).abs() > TIMESTAMP_TOL => {
                    return Err(HarnessError::NonUniformFrameRate {
                        sequence: self.seq.id.clone(),
                        line,
                    })
                }
                Some(_) => {}
            }
        }
        let has_prev = !self.seq.poses.is_empty();
        if has_prev && frame.covs.is_some() != self.seq.covs.is_some() {
            return Err(schema(
                line,
                "\"covs\" must be present on every frame of a sequence or on none",
            ));
        }
        if has_prev && frame.truth.is_some() != self.seq.truth.is_some() {
            return Err(schema(
                line,
                "\"truth\" must be present on every frame of a sequence or on none",
            ));
        }
        if let Some(covs) = &frame.covs {
            if covs.len() != joints {
                return Err(schema(
                    line,
                    format!("{} covariances for {joints} joints", covs.len()),
                ));
            }
            let mats: Vec<Matrix3<f64>> = covs
                .iter()
                .map(|c| Matrix3::from_fn(|r, k| c[r][k]))
                .collect();
            self.seq
                .covs
                .get_or_insert_with(Vec::new)
                .push(PoseCovariances::new(mats));
        }
        if let Some(truth) = &frame.truth {
            if truth.len() != joints {
                return Err(schema(
                    line,
                    format!("{} truth joints for {joints} joints", truth.len()),
                ));
            }
            self.seq
                .truth
                .get_or_insert_with(Vec::new)
                .push(Pose::new(to_points(truth), frame.t));
        }
        self.seq
            .poses
            .push(Pose::new(to_points(&frame.joints), frame.t));
        self.seq.ood.push(frame.ood);
        Ok(())
    }
}

/// Reads a dataset from JSON lines. Blank lines are skipped.
pub fn ingest_reader<R: Read>(reader: R, split: Split) -> Result<MotionDataset> {
    let mut builders: Vec<Builder> = Vec::new();
    for (idx, text) in BufReader::new(reader).lines().enumerate() {
        let line = idx + 1;
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| HarnessError::Parse {
                line,
                message: e.to_string(),
            })?;
        let frame: FrameLine =
            serde_json::from_value(value).map_err(|e| schema(line, e.to_string()))?;
        if frame.joints.is_empty() {
            return Err(schema(line, "frame has no joints"));
        }
        let finite = frame.t.is_finite()
            && frame.joints.iter().flatten().all(|v| v.is_finite())
            && frame
                .covs
                .iter()
                .flatten()
                .flatten()
                .flatten()
                .all(|v| v.is_finite())
            && frame
                .truth
                .iter()
                .flatten()
                .flatten()
                .all(|v| v.is_finite());
        if !finite {
            return Err(schema(line, "non-finite value"));
        }
        let id = frame.seq.clone().unwrap_or_else(|| "0".to_string());
        let b = match builders.iter_mut().position(|b| b.seq.id == id) {
            Some(i) => &mut builders[i],
            None => {
                builders.push(Builder {
                    seq: Sequence {
                        id,
                        poses: Vec::new(),
                        covs: None,
                        truth: None,
                        ood: Vec::new(),
                    },
                    dt_line: line,
                    dt: None,
                });
                builders.last_mut().expect("just pushed")
            }
        };
        b.push(frame, line)?;
    }

    let mut frame_dt: Option<f64> = None;
    for b in &builders {
        if let Some(dt) = b.dt {
            match frame_dt {
                None => frame_dt = Some(dt),
                Some(d) if (d - dt).abs() > TIMESTAMP_TOL => {
                    return Err(HarnessError::NonUniformFrameRate {
                        sequence: b.seq.id.clone(),
                        line: b.dt_line,
                    })
                }
                Some(_) => {}
            }
        }
    }
    Ok(MotionDataset {
        sequences: builders.into_iter().map(|b| b.seq).collect(),
        frame_rate: frame_dt.map_or(0.0, |dt| 1.0 / dt),
        split,
    })
}

pub fn ingest_jsonl(path: impl AsRef<Path>, split: Split) -> Result<MotionDataset> {
    ingest_reader(File::open(path)?, split)
}

/// Writes every frame of every sequence as one JSON line.
pub fn export_jsonl<W: Write>(dataset: &MotionDataset, mut out: W) -> Result<()> {
    for seq in &dataset.sequences {
        for (i, pose) in seq.poses.iter().enumerate() {
            let line = FrameLine {
                seq: Some(seq.id.clone()),
                t: pose.timestamp,
                joints: from_points(&pose.joints),
                covs: seq.covs.as_ref().map(|c| {
                    c[i].covs
                        .iter()
                        .map(|m| std::array::from_fn(|r| std::array::from_fn(|k| m[(r, k)])))
                        .collect()
                }),
                truth: seq.truth.as_ref().map(|t| from_points(&t[i].joints)),
                ood: seq.ood.get(i).copied().unwrap_or(false),
            };
            serde_json::to_writer(&mut out, &line).map_err(std::io::Error::other)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}
