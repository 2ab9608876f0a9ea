//! Segmentation metrics: global and lesion-wise Dice, NSD at a boundary
//! tolerance, HD95, and per-case evaluation over a task's regions.

pub mod components;
pub mod distance;
pub mod lesion;
pub mod overlap;
pub mod table;

pub use components::{connected_components, dilate_mask, ComponentLabels, Connectivity};
pub use lesion::{
    lesion_wise_metric, lesion_wise_scores, match_lesions, match_lesions_with, LesionMatching,
    LesionMetric, LesionParams,
};
pub use overlap::{boundary_hd95, boundary_nsd, overlap_dice};
pub use table::{MetricRow, MetricTable, MetricValue};

use crate::error::{Error, Result};
use crate::taskspec::{region_mask, TaskSpec};
use crate::volume::{check_geometry, Volume};
use serde::{Deserialize, Serialize};

/// Metrics the evaluator can emit. Lesion-wise Dice and NSD are the pipeline
/// defaults; global variants and HD95 exist for cohorts reported that way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    LwDice,
    LwNsd,
    DiceGlobal,
    NsdGlobal,
    Hd95,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::LwDice => "lw_dice",
            MetricKind::LwNsd => "lw_nsd",
            MetricKind::DiceGlobal => "dice_global",
            MetricKind::NsdGlobal => "nsd_global",
            MetricKind::Hd95 => "hd95",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "lw_dice" => Ok(MetricKind::LwDice),
            "lw_nsd" => Ok(MetricKind::LwNsd),
            "dice_global" => Ok(MetricKind::DiceGlobal),
            "nsd_global" => Ok(MetricKind::NsdGlobal),
            "hd95" => Ok(MetricKind::Hd95),
            other => Err(Error::Config(format!("unknown metric {other}"))),
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            MetricKind::Hd95 => Direction::LowerBetter,
            _ => Direction::HigherBetter,
        }
    }
}

/// Evaluation parameters; defaults follow the lesion-wise protocol
/// (26-connectivity, 3-voxel Chebyshev dilation, tau = 1.0 mm) and are
/// recorded in reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalParams {
    pub metrics: Vec<MetricKind>,
    pub connectivity: Connectivity,
    pub dilation_radius: usize,
    pub tau_mm: f64,
    #[serde(default)]
    pub min_lesion_voxels: Option<usize>,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            metrics: vec![MetricKind::LwDice, MetricKind::LwNsd],
            connectivity: Connectivity::TwentySix,
            dilation_radius: 3,
            tau_mm: 1.0,
            min_lesion_voxels: None,
        }
    }
}

impl EvalParams {
    fn lesion_params(&self) -> LesionParams {
        LesionParams {
            connectivity: self.connectivity,
            dilation_radius: self.dilation_radius,
            tau_mm: self.tau_mm,
            min_lesion_voxels: self.min_lesion_voxels,
        }
    }
}

/// Evaluate one prediction against its reference: one row per
/// (region, metric). Geometry must be consistent and labels valid.
pub fn evaluate_case(
    case_id: &str,
    candidate_id: &str,
    reference: &Volume,
    prediction: &Volume,
    spec: &TaskSpec,
    params: &EvalParams,
) -> Result<Vec<MetricRow>> {
    let geo = check_geometry(&[reference, prediction]);
    if !geo.consistent {
        return Err(Error::Geometry(format!(
            "case {case_id}: {}",
            geo.issues.join("; ")
        )));
    }
    let mut allowed = spec.label_codes();
    allowed.insert(0);
    reference.validate_label_codes(&allowed)?;
    prediction.validate_label_codes(&allowed)?;

    let lparams = params.lesion_params();
    let spacing = reference.spacing();
    let mut rows = Vec::with_capacity(spec.regions().len() * params.metrics.len());
    for region in spec.regions() {
        let rmask = region_mask(reference, &region.name, spec)?;
        let pmask = region_mask(prediction, &region.name, spec)?;

        // lesion-wise metrics share a single matching pass per region
        let want_lw_dice = params.metrics.contains(&MetricKind::LwDice);
        let want_lw_nsd = params.metrics.contains(&MetricKind::LwNsd);
        let mut lw_dice = None;
        let mut lw_nsd = None;
        if want_lw_dice || want_lw_nsd {
            let mut metrics = Vec::new();
            if want_lw_dice {
                metrics.push(LesionMetric::Dice);
            }
            if want_lw_nsd {
                metrics.push(LesionMetric::Nsd);
            }
            let scores = lesion_wise_scores(&rmask, &pmask, &metrics, &lparams)?;
            let mut it = scores.into_iter();
            if want_lw_dice {
                lw_dice = it.next();
            }
            if want_lw_nsd {
                lw_nsd = it.next();
            }
        }

        for metric in &params.metrics {
            let value: MetricValue = match metric {
                MetricKind::LwDice => MetricValue::Real(lw_dice.expect("computed above")),
                MetricKind::LwNsd => MetricValue::Real(lw_nsd.expect("computed above")),
                MetricKind::DiceGlobal => MetricValue::Real(overlap_dice(&rmask, &pmask)?),
                MetricKind::NsdGlobal => {
                    MetricValue::Real(boundary_nsd(&rmask, &pmask, spacing, params.tau_mm)?)
                }
                MetricKind::Hd95 => boundary_hd95(&rmask, &pmask, spacing)?.into(),
            };
            rows.push(MetricRow {
                case_id: case_id.to_string(),
                candidate_id: candidate_id.to_string(),
                region: region.name.clone(),
                metric: metric.name().to_string(),
                value,
            });
        }
    }
    Ok(rows)
}
