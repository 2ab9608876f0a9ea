//! Case-wise rank aggregation: fold per-candidate metric tables into a single
//! scalar score F per candidate (smaller is better).
//!
//! For every (case, region, metric) cell the candidates are ranked 1..n (best
//! first, honoring each metric's direction); ties receive the mean of the
//! tied positions, and undefined sentinel values rank worst, tying among
//! themselves. Ranks are averaged over (region, metric) per case and then
//! over cases.

use crate::error::{Error, Result};
use crate::metrics::{Direction, MetricKind, MetricTable, MetricValue};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankScore {
    pub candidate_id: String,
    pub f: f64,
    pub per_case_mean_rank: BTreeMap<String, f64>,
    pub n_candidates: usize,
    pub n_cases: usize,
    pub n_metric_region_pairs: usize,
}

#[derive(Debug, Clone, Default)]
pub struct RankOptions {
    /// Optional weights per (region, metric); unlisted cells weigh 1.0.
    /// Uniform weighting matches the reference protocol.
    pub weights: BTreeMap<(String, String), f64>,
}

/// Direction lookup for a metric column name. Unknown names default to
/// higher-is-better; callers can pass explicit overrides.
pub fn default_directions() -> BTreeMap<String, Direction> {
    [
        MetricKind::LwDice,
        MetricKind::LwNsd,
        MetricKind::DiceGlobal,
        MetricKind::NsdGlobal,
        MetricKind::Hd95,
    ]
    .into_iter()
    .map(|m| (m.name().to_string(), m.direction()))
    .collect()
}

pub fn compute_rank_scores(
    tables: &BTreeMap<String, MetricTable>,
    directions: &BTreeMap<String, Direction>,
) -> Result<Vec<RankScore>> {
    compute_rank_scores_with(tables, directions, &RankOptions::default())
}

pub fn compute_rank_scores_with(
    tables: &BTreeMap<String, MetricTable>,
    directions: &BTreeMap<String, Direction>,
    options: &RankOptions,
) -> Result<Vec<RankScore>> {
    if tables.len() < 2 {
        return Err(Error::Validation(format!(
            "ranking needs at least 2 candidates, got {}",
            tables.len()
        )));
    }
    let candidates: Vec<&String> = tables.keys().collect();
    let grid = tables[candidates[0]].grid();
    for (id, table) in tables.iter().skip(0) {
        if table.grid() != grid {
            return Err(Error::Validation(format!(
                "candidate {id} does not cover the same (case, region, metric) grid"
            )));
        }
    }
    if grid.is_empty() {
        return Err(Error::Validation("empty metric tables".into()));
    }

    // index rows per candidate for O(1) cell lookup
    let mut index: BTreeMap<&str, BTreeMap<(&str, &str, &str), MetricValue>> = BTreeMap::new();
    for (id, table) in tables {
        let mut cell_map = BTreeMap::new();
        for row in &table.rows {
            let key = (row.case_id.as_str(), row.region.as_str(), row.metric.as_str());
            if cell_map.insert(key, row.value).is_some() {
                return Err(Error::Validation(format!(
                    "candidate {id} has duplicate row for {key:?}"
                )));
            }
        }
        index.insert(id, cell_map);
    }

    let cases: BTreeSet<&str> = grid.iter().map(|(c, _, _)| c.as_str()).collect();
    let pairs: BTreeSet<(&str, &str)> = grid
        .iter()
        .map(|(_, r, m)| (r.as_str(), m.as_str()))
        .collect();

    let n = candidates.len();
    let mut per_case_rank: BTreeMap<&str, Vec<f64>> = BTreeMap::new(); // case -> per-candidate sums
    for case in &cases {
        let mut sums = vec![0.0f64; n];
        let mut weight_total = 0.0f64;
        for (region, metric) in &pairs {
            let key = (*case, *region, *metric);
            if !grid.contains(&(key.0.to_string(), key.1.to_string(), key.2.to_string())) {
                continue;
            }
            let weight = options
                .weights
                .get(&(region.to_string(), metric.to_string()))
                .copied()
                .unwrap_or(1.0);
            let direction = directions
                .get(*metric)
                .copied()
                .unwrap_or(Direction::HigherBetter);
            let values: Vec<MetricValue> = candidates
                .iter()
                .map(|c| index[c.as_str()][&key])
                .collect();
            let ranks = rank_cell(&values, direction);
            for (i, r) in ranks.iter().enumerate() {
                sums[i] += weight * r;
            }
            weight_total += weight;
        }
        let means: Vec<f64> = sums.iter().map(|s| s / weight_total).collect();
        per_case_rank.insert(case, means);
    }

    let mut out = Vec::with_capacity(n);
    for (i, id) in candidates.iter().enumerate() {
        let per_case: BTreeMap<String, f64> = per_case_rank
            .iter()
            .map(|(case, v)| (case.to_string(), v[i]))
            .collect();
        let f = per_case.values().sum::<f64>() / per_case.len() as f64;
        out.push(RankScore {
            candidate_id: (*id).clone(),
            f,
            per_case_mean_rank: per_case,
            n_candidates: n,
            n_cases: cases.len(),
            n_metric_region_pairs: pairs.len(),
        });
    }
    Ok(out)
}

/// Fractional (average) ranks for one cell, best = 1. Undefined values rank
/// worst and tie among themselves.
fn rank_cell(values: &[MetricValue], direction: Direction) -> Vec<f64> {
    let n = values.len();
    // sort candidate indices best-first; undefined go last
    let mut order: Vec<usize> = (0..n).collect();
    let key = |i: usize| -> (u8, f64) {
        match values[i] {
            MetricValue::Real(v) => {
                let v = match direction {
                    Direction::HigherBetter => -v,
                    Direction::LowerBetter => v,
                };
                (0, v)
            }
            MetricValue::Undefined(_) => (1, 0.0),
        }
    };
    order.sort_by(|&a, &b| {
        let (ka, va) = key(a);
        let (kb, vb) = key(b);
        ka.cmp(&kb).then(va.partial_cmp(&vb).unwrap())
    });

    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && key(order[j + 1]) == key(order[i]) {
            j += 1;
        }
        // positions i+1 ..= j+1 tie: average rank
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankReportEntry {
    pub candidate_id: String,
    pub f: f64,
    pub tied: bool,
    /// Variance of the per-case mean ranks; rank scores can sit very close
    /// together with few candidates, so the spread is surfaced for audit.
    pub per_case_rank_variance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankReport {
    pub ordered: Vec<RankReportEntry>,
    /// case -> candidate -> mean rank, for audit.
    pub per_case_matrix: BTreeMap<String, BTreeMap<String, f64>>,
    pub n_candidates: usize,
    pub n_cases: usize,
}

/// Sort candidates ascending by F (ties broken lexicographically and
/// flagged; ties are data, not errors).
pub fn rank_report(scores: &[RankScore]) -> RankReport {
    let mut ordered: Vec<&RankScore> = scores.iter().collect();
    ordered.sort_by(|a, b| {
        a.f.partial_cmp(&b.f)
            .unwrap()
            .then_with(|| a.candidate_id.cmp(&b.candidate_id))
    });
    let entries: Vec<RankReportEntry> = ordered
        .iter()
        .map(|s| {
            let tied = scores
                .iter()
                .any(|o| o.candidate_id != s.candidate_id && o.f == s.f);
            let mean = s.f;
            let var = if s.per_case_mean_rank.is_empty() {
                0.0
            } else {
                s.per_case_mean_rank
                    .values()
                    .map(|r| (r - mean) * (r - mean))
                    .sum::<f64>()
                    / s.per_case_mean_rank.len() as f64
            };
            RankReportEntry {
                candidate_id: s.candidate_id.clone(),
                f: s.f,
                tied,
                per_case_rank_variance: var,
            }
        })
        .collect();

    let mut matrix: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for s in scores {
        for (case, rank) in &s.per_case_mean_rank {
            matrix
                .entry(case.clone())
                .or_default()
                .insert(s.candidate_id.clone(), *rank);
        }
    }
    RankReport {
        ordered: entries,
        per_case_matrix: matrix,
        n_candidates: scores.len(),
        n_cases: scores.first().map(|s| s.n_cases).unwrap_or(0),
    }
}

impl RankReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "rank report: {} candidates over {} cases (F: smaller is better)\n",
            self.n_candidates, self.n_cases
        ));
        for (i, e) in self.ordered.iter().enumerate() {
            out.push_str(&format!(
                "{:>3}. {:<24} F = {:.6}  rank-var = {:.4}{}\n",
                i + 1,
                e.candidate_id,
                e.f,
                e.per_case_rank_variance,
                if e.tied { "  [tied]" } else { "" }
            ));
        }
        out
    }

    pub fn f_of(&self, candidate: &str) -> Option<f64> {
        self.ordered
            .iter()
            .find(|e| e.candidate_id == candidate)
            .map(|e| e.f)
    }
}
