//! Summary report: per-candidate, per-region metric aggregates (mean and
//! median), rank scores per stage, the learned policy, and the confusion
//! matrix, collected from the artifacts a run left on disk.

use super::PipelineCtx;
use crate::error::{Error, Result};
use crate::metrics::MetricTable;
use crate::postprocess::PpPolicy;
use crate::ranker::RankReport;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionAggregate {
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub n: usize,
    pub n_undefined: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    /// candidate -> metric -> region -> aggregate.
    pub aggregates: BTreeMap<String, BTreeMap<String, BTreeMap<String, RegionAggregate>>>,
    pub rank: Option<RankReport>,
    pub policy: Option<PpPolicy>,
    /// Confusion matrix rows as CSV text, mirroring confusion.csv.
    pub confusion_csv: Option<String>,
    /// Artifacts that were looked for but not found.
    pub missing: Vec<String>,
}

fn aggregate_table(table: &MetricTable) -> BTreeMap<String, BTreeMap<String, RegionAggregate>> {
    let mut grouped: BTreeMap<(String, String), Vec<Option<f64>>> = BTreeMap::new();
    for row in &table.rows {
        grouped
            .entry((row.metric.clone(), row.region.clone()))
            .or_default()
            .push(row.value.real());
    }
    let mut out: BTreeMap<String, BTreeMap<String, RegionAggregate>> = BTreeMap::new();
    for ((metric, region), values) in grouped {
        let defined: Vec<f64> = values.iter().filter_map(|v| *v).collect();
        let n_undefined = values.len() - defined.len();
        let agg = if defined.is_empty() {
            RegionAggregate {
                mean: None,
                median: None,
                n: values.len(),
                n_undefined,
            }
        } else {
            let mean = defined.iter().sum::<f64>() / defined.len() as f64;
            let mut sorted = defined.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = crate::metrics::distance::percentile_linear(&sorted, 50.0);
            RegionAggregate {
                mean: Some(mean),
                median: Some(median),
                n: values.len(),
                n_undefined,
            }
        };
        out.entry(metric).or_default().insert(region, agg);
    }
    out
}

pub fn build_report(ctx: &PipelineCtx) -> Result<Report> {
    let tables_dir = ctx.out_dir.join("tables");
    if !tables_dir.is_dir() {
        return Err(Error::Config(format!(
            "missing artifact: metric tables directory {} (run `evaluate` first)",
            tables_dir.display()
        )));
    }
    let mut aggregates = BTreeMap::new();
    let mut entries: Vec<_> = std::fs::read_dir(&tables_dir)
        .map_err(|e| Error::io(&tables_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("csv"))
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Config(format!(
            "missing artifact: no metric tables in {}",
            tables_dir.display()
        )));
    }
    for path in entries {
        let table = MetricTable::from_csv(&path)?;
        if let Some(first) = table.rows.first() {
            aggregates.insert(first.candidate_id.clone(), aggregate_table(&table));
        }
    }

    let mut missing = Vec::new();
    let rank = match ctx.load_rank_report() {
        Ok(r) => Some(r),
        Err(_) => {
            missing.push("rank_report.json".to_string());
            None
        }
    };
    let policy_path = ctx.out_dir.join("policy.json");
    let policy = if policy_path.exists() {
        Some(PpPolicy::load(&policy_path)?)
    } else {
        missing.push("policy.json".to_string());
        None
    };
    let cm_path = ctx.out_dir.join("confusion.csv");
    let confusion_csv = if cm_path.exists() {
        Some(std::fs::read_to_string(&cm_path).map_err(|e| Error::io(&cm_path, e))?)
    } else {
        missing.push("confusion.csv".to_string());
        None
    };

    Ok(Report {
        aggregates,
        rank,
        policy,
        confusion_csv,
        missing,
    })
}

pub fn render_text(report: &Report) -> String {
    let mut out = String::new();
    out.push_str("pipeline summary\n================\n\n");

    // one block per metric: candidates x regions
    let mut metrics: Vec<String> = Vec::new();
    let mut regions: Vec<String> = Vec::new();
    for by_metric in report.aggregates.values() {
        for (metric, by_region) in by_metric {
            if !metrics.contains(metric) {
                metrics.push(metric.clone());
            }
            for region in by_region.keys() {
                if !regions.contains(region) {
                    regions.push(region.clone());
                }
            }
        }
    }
    for metric in &metrics {
        out.push_str(&format!("{metric} (mean / median per region)\n"));
        out.push_str(&format!("{:<20}", "candidate"));
        for region in &regions {
            out.push_str(&format!("{region:>16}"));
        }
        out.push('\n');
        for (candidate, by_metric) in &report.aggregates {
            out.push_str(&format!("{candidate:<20}"));
            for region in &regions {
                match by_metric.get(metric).and_then(|m| m.get(region)) {
                    Some(agg) => match (agg.mean, agg.median) {
                        (Some(mean), Some(median)) => {
                            out.push_str(&format!("{:>16}", format!("{mean:.3}/{median:.3}")))
                        }
                        _ => out.push_str(&format!("{:>16}", "undef")),
                    },
                    None => out.push_str(&format!("{:>16}", "-")),
                }
            }
            out.push('\n');
        }
        out.push('\n');
    }

    if let Some(rank) = &report.rank {
        out.push_str("rank scores (F, smaller is better)\n");
        out.push_str(&rank.render_text());
        out.push('\n');
    }
    if let Some(policy) = &report.policy {
        out.push_str("post-processing policy\n");
        out.push_str(&format!(
            "  F before = {:.6}, F after = {:.6}\n",
            policy.provenance.f_before, policy.provenance.f_after
        ));
        for r in &policy.cc_thresholds {
            if r.min_voxels > 0 {
                out.push_str(&format!(
                    "  cluster {} {}: remove components < {} voxels\n",
                    r.cluster, r.label, r.min_voxels
                ));
            }
        }
        for r in &policy.redef_rules {
            out.push_str(&format!(
                "  cluster {} {} -> {} when ratio < {}\n",
                r.cluster, r.from, r.to, r.ratio_threshold
            ));
        }
        out.push('\n');
    }
    if let Some(cm) = &report.confusion_csv {
        out.push_str("label confusion (reference rows, predicted columns)\n");
        out.push_str(cm);
        out.push('\n');
    }
    if !report.missing.is_empty() {
        out.push_str(&format!("missing artifacts: {}\n", report.missing.join(", ")));
    }
    out
}
