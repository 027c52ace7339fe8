//! Evaluation metrics and the machine-readable run report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jacobian::{folding_stats, jacobian_det};
use crate::volume::{BinaryMask, DisplacementField, LandmarkSet};
use crate::warp::{map_point, warp_mask};

/// Threshold used to binarize transported masks.
pub const WARP_THRESHOLD: f64 = 0.5;

/// Overlap `2|a ∩ b| / (|a| + |b|)`.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.grid().check_same(b.grid(), "dice masks")?;
    let total = a.count() + b.count();
    if total == 0 {
        return Err(Error::EmptyMask("dice of two empty masks".into()));
    }
    Ok(2.0 * a.and(b).count() as f64 / total as f64)
}

/// Tumor volume over organ volume, by voxel counts.
pub fn tsr(tumor: &BinaryMask, organ: &BinaryMask) -> Result<f64> {
    tumor.grid().check_same(organ.grid(), "tsr masks")?;
    if organ.count() == 0 {
        return Err(Error::UndefinedTsr("empty organ".into()));
    }
    if tumor.count() == 0 {
        return Err(Error::UndefinedTsr("empty tumor".into()));
    }
    Ok(tumor.count() as f64 / organ.count() as f64)
}

/// A human-readable note when the tumor is not contained in the organ. The
/// ratio is still defined in that case.
pub fn tsr_warning(tumor: &BinaryMask, organ: &BinaryMask) -> Option<String> {
    let outside = tumor.and_not(organ).count();
    (outside > 0).then(|| format!("{outside} tumor voxels lie outside the organ"))
}

pub fn stsr_from_ratios(tsr_moving: f64, tsr_warped: f64) -> f64 {
    let r = tsr_moving / tsr_warped;
    r.max(1.0 / r).powi(2)
}

/// Squared worst-direction change of the tumor size ratio.
pub fn stsr(tumor_m: &BinaryMask, organ_m: &BinaryMask, tumor_w: &BinaryMask, organ_w: &BinaryMask) -> Result<f64> {
    Ok(stsr_from_ratios(tsr(tumor_m, organ_m)?, tsr(tumor_w, organ_w)?))
}

/// Mean distance in mm between mapped fixed-space landmarks and their
/// moving-space counterparts.
pub fn landmark_distance(lms: &LandmarkSet, field: &DisplacementField, spacing_mm: [f64; 3]) -> Result<f64> {
    if lms.is_empty() {
        return Err(Error::Landmarks("no landmark pairs".into()));
    }
    let mut total = 0.0;
    for pair in lms.pairs() {
        let mapped = map_point(field, pair.fixed)?;
        let d2: f64 = (0..3).map(|a| ((mapped[a] - pair.moving[a]) * spacing_mm[a]).powi(2)).sum();
        total += d2.sqrt();
    }
    Ok(total / lms.len() as f64)
}

/// Per-run evaluation numbers. Tumor and landmark entries are `None` when
/// the corresponding annotations were not supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice_organ: f64,
    pub landmark_distance_mm: Option<f64>,
    pub folding_pct: f64,
    pub jacobian_std: f64,
    pub tsr_moving: Option<f64>,
    pub tsr_warped: Option<f64>,
    pub stsr: Option<f64>,
}

/// Inputs of [`full_report`]. Masks live on the moving grid except
/// `organ_fixed`.
#[derive(Debug, Clone, Copy)]
pub struct ReportInputs<'a> {
    pub field: &'a DisplacementField,
    pub organ_moving: &'a BinaryMask,
    pub organ_fixed: &'a BinaryMask,
    pub tumor_moving: Option<&'a BinaryMask>,
    pub landmarks: Option<&'a LandmarkSet>,
}

pub fn full_report(inputs: ReportInputs<'_>) -> Result<MetricsReport> {
    let ReportInputs { field, organ_moving, organ_fixed, tumor_moving, landmarks } = inputs;
    let organ_w = warp_mask(organ_moving, field, WARP_THRESHOLD)?;
    let dice_organ = dice(&organ_w, organ_fixed)?;
    let (folding_pct, jacobian_std) = folding_stats(&jacobian_det(field));
    let landmark_distance_mm = landmarks.map(|l| landmark_distance(l, field, field.grid().spacing_mm())).transpose()?;
    let (tsr_moving, tsr_warped, stsr) = match tumor_moving {
        Some(t) => {
            let before = tsr(t, organ_moving)?;
            let after = tsr(&warp_mask(t, field, WARP_THRESHOLD)?, &organ_w)?;
            (Some(before), Some(after), Some(stsr_from_ratios(before, after)))
        }
        None => (None, None, None),
    };
    Ok(MetricsReport { dice_organ, landmark_distance_mm, folding_pct, jacobian_std, tsr_moving, tsr_warped, stsr })
}

/// A report as written to disk: the metrics plus the effective
/// configuration and the producing version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    #[serde(flatten)]
    pub metrics: MetricsReport,
    pub config: serde_json::Value,
    pub version: String,
}

impl RunReport {
    pub fn new(metrics: MetricsReport, config: &impl Serialize) -> Result<Self> {
        Ok(Self { metrics, config: serde_json::to_value(config)?, version: env!("CARGO_PKG_VERSION").to_string() })
    }
}
