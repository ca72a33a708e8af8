use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::geometry::Pose;
use crate::predict::MotionPrediction;

/// Horizons at which MPJPE is reported (ms).
pub const MPJPE_HORIZONS_MS: [f64; 4] = [80.0, 160.0, 320.0, 400.0];

/// `(horizon in ms, frame count)` for the MPJPE grid entries that fit in
/// `k_p` frames at `frame_rate`.
pub fn mpjpe_horizon_frames(frame_rate: f64, k_p: usize) -> Vec<(f64, usize)> {
    MPJPE_HORIZONS_MS
        .iter()
        .map(|&ms| (ms, (ms * frame_rate / 1000.0).round() as usize))
        .filter(|&(_, k)| k >= 1 && k <= k_p)
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MpjpeMode {
    /// Raw positions in the world frame.
    #[default]
    Global,
    /// Positions relative to joint 0 of the same pose.
    RootRelative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonValue {
    pub horizon_ms: f64,
    pub value: f64,
}

fn joint_error(pred: &Pose, truth: &Pose, mode: MpjpeMode) -> f64 {
    let (pr, tr) = match mode {
        MpjpeMode::Global => (nalgebra::Vector3::zeros(), nalgebra::Vector3::zeros()),
        MpjpeMode::RootRelative => (pred.joints[0], truth.joints[0]),
    };
    let sum: f64 = pred
        .joints
        .iter()
        .zip(&truth.joints)
        .map(|(p, t)| ((p - pr) - (t - tr)).norm())
        .sum();
    sum / pred.len() as f64
}

/// Mean per-joint position error in mm at each grid horizon. `truths[i]`
/// holds the true poses for the `K_P` slots of `preds[i]`; invalid slots are
/// skipped, and horizons without a single valid slot are omitted.
pub fn mpjpe(
    preds: &[MotionPrediction],
    truths: &[Vec<Pose>],
    frame_rate: f64,
    mode: MpjpeMode,
) -> Result<Vec<HorizonValue>> {
    if preds.len() != truths.len() {
        return Err(HarnessError::LengthMismatch {
            what: format!(
                "{} predictions, {} truth windows",
                preds.len(),
                truths.len()
            ),
        });
    }
    let k_p = preds.first().map_or(0, MotionPrediction::len);
    let mut out = Vec::new();
    for (ms, k) in mpjpe_horizon_frames(frame_rate, k_p) {
        let (mut sum, mut n) = (0.0, 0usize);
        for (p, t) in preds.iter().zip(truths) {
            if p.len() != t.len() {
                return Err(HarnessError::LengthMismatch {
                    what: format!("prediction has {} slots, truth window {}", p.len(), t.len()),
                });
            }
            if !p.valid[k - 1] {
                continue;
            }
            if p.poses[k - 1].len() != t[k - 1].len() {
                return Err(HarnessError::LengthMismatch {
                    what: "joint counts differ".into(),
                });
            }
            sum += joint_error(&p.poses[k - 1], &t[k - 1], mode);
            n += 1;
        }
        if n > 0 {
            out.push(HorizonValue {
                horizon_ms: ms,
                value: 1000.0 * sum / n as f64,
            });
        }
    }
    Ok(out)
}

/// Evaluation results for one method. Quantities that do not apply to an
/// experiment are absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    /// mm.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mpjpe_per_horizon: Vec<HorizonValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
    /// m³.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_volume: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub coverage_per_horizon: Vec<HorizonValue>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub volume_per_horizon: Vec<HorizonValue>,
    #[serde(
        rename = "invalid_H_rate",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    pub invalid_h_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion_valid_rate: Option<f64>,
}

impl MetricReport {
    pub fn new(method: impl Into<String>) -> Self {
        Self {
            method: method.into(),
            ..Self::default()
        }
    }

    /// `(metric, horizon_ms, value)` rows; horizon is `None` for scalars.
    pub fn rows(&self) -> Vec<(&'static str, Option<f64>, f64)> {
        let mut rows = Vec::new();
        for h in &self.mpjpe_per_horizon {
            rows.push(("mpjpe_mm", Some(h.horizon_ms), h.value));
        }
        if let Some(v) = self.coverage {
            rows.push(("coverage", None, v));
        }
        if let Some(v) = self.mean_volume {
            rows.push(("mean_volume_m3", None, v));
        }
        for h in &self.coverage_per_horizon {
            rows.push(("coverage", Some(h.horizon_ms), h.value));
        }
        for h in &self.volume_per_horizon {
            rows.push(("mean_volume_m3", Some(h.horizon_ms), h.value));
        }
        if let Some(v) = self.invalid_h_rate {
            rows.push(("invalid_H_rate", None, v));
        }
        if let Some(v) = self.motion_valid_rate {
            rows.push(("motion_valid_rate", None, v));
        }
        rows
    }
}

/// CSV with header `method,metric,horizon_ms,value`, one row per metric.
pub fn write_csv<W: Write>(reports: &[MetricReport], mut out: W) -> Result<()> {
    writeln!(out, "method,metric,horizon_ms,value")?;
    for r in reports {
        for (metric, h, v) in r.rows() {
            let h = h.map(|h| h.to_string()).unwrap_or_default();
            writeln!(out, "{},{metric},{h},{v}", r.method)?;
        }
    }
    Ok(())
}
