//! Cluster- and label-adaptive post-processing: learn per-(cluster, label)
//! connected-component volume thresholds and per-(cluster, pair) label
//! redefinition ratio thresholds by grid search against the rank objective,
//! then apply them at inference.

use crate::error::{Error, Result};
use crate::metrics::components::label_components;
use crate::metrics::{evaluate_case, Connectivity, EvalParams, MetricTable};
use crate::ranker::{compute_rank_scores, default_directions};
use crate::taskspec::TaskSpec;
use crate::volume::Volume;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CcRule {
    pub cluster: u32,
    pub label: String,
    pub min_voxels: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RedefRule {
    pub cluster: u32,
    pub from: String,
    pub to: String,
    pub ratio_threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Rank-based F over the grid candidates (the pipeline default).
    Rank,
    /// Mean lesion-wise Dice, for ablations.
    MeanLwDice,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyProvenance {
    pub cc_grid: Vec<usize>,
    pub ratio_grid: Vec<f64>,
    pub objective: Objective,
    pub f_before: f64,
    pub f_after: f64,
    pub seed: u64,
    pub config_hash: String,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PpPolicy {
    pub cc_thresholds: Vec<CcRule>,
    pub redef_rules: Vec<RedefRule>,
    pub provenance: PolicyProvenance,
}

impl PpPolicy {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PpPolicy> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn cc_threshold(&self, cluster: u32, label: &str) -> Option<usize> {
        self.cc_thresholds
            .iter()
            .find(|r| r.cluster == cluster && r.label == label)
            .map(|r| r.min_voxels)
    }
}

/// Remove connected components of `label_code` strictly smaller than
/// `min_voxels`; other labels are untouched and 0 is the identity.
pub fn filter_components(
    pred: &Volume,
    label_code: i32,
    min_voxels: usize,
    connectivity: Connectivity,
) -> Volume {
    if min_voxels == 0 {
        return pred.clone();
    }
    let cc = label_components(pred.labels(), pred.dims(), label_code, connectivity);
    let mut out = pred.clone();
    let labels = out.labels_mut();
    for (i, &comp) in cc.labels.iter().enumerate() {
        if comp != 0 && cc.voxel_counts[(comp - 1) as usize] < min_voxels {
            labels[i] = 0;
        }
    }
    out
}

/// Voxel-wise label confusion over a corpus: rows are reference labels
/// (background first), columns predicted, row-normalized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelConfusion {
    /// "BG" plus base label names in declared order.
    pub label_names: Vec<String>,
    pub codes: Vec<i32>,
    pub matrix: Vec<Vec<f64>>,
    pub support: Vec<Vec<u64>>,
    pub zero_support_rows: Vec<String>,
}

pub fn label_confusion(pairs: &[(&Volume, &Volume)], spec: &TaskSpec) -> Result<LabelConfusion> {
    let mut codes = vec![0i32];
    let mut names = vec!["BG".to_string()];
    for (name, code) in spec.base_labels() {
        codes.push(*code);
        names.push(name.clone());
    }
    let index_of: BTreeMap<i32, usize> = codes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let k = codes.len();
    let mut support = vec![vec![0u64; k]; k];
    for (reference, prediction) in pairs {
        if reference.dims() != prediction.dims() {
            return Err(Error::Geometry(format!(
                "confusion pair dims differ: {:?} vs {:?}",
                reference.dims(),
                prediction.dims()
            )));
        }
        for (&r, &p) in reference.labels().iter().zip(prediction.labels().iter()) {
            let ri = *index_of
                .get(&r)
                .ok_or_else(|| Error::Validation(format!("undeclared reference label {r}")))?;
            let pi = *index_of
                .get(&p)
                .ok_or_else(|| Error::Validation(format!("undeclared predicted label {p}")))?;
            support[ri][pi] += 1;
        }
    }
    let mut matrix = vec![vec![0.0f64; k]; k];
    let mut zero_rows = Vec::new();
    for r in 0..k {
        let total: u64 = support[r].iter().sum();
        if total == 0 {
            zero_rows.push(names[r].clone());
            continue;
        }
        for p in 0..k {
            matrix[r][p] = support[r][p] as f64 / total as f64;
        }
    }
    Ok(LabelConfusion {
        label_names: names,
        codes,
        matrix,
        support,
        zero_support_rows: zero_rows,
    })
}

impl LabelConfusion {
    pub fn to_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut wtr = csv::Writer::from_path(path).map_err(Error::Csv)?;
        let mut header = vec!["reference\\predicted".to_string()];
        header.extend(self.label_names.iter().cloned());
        wtr.write_record(&header)?;
        for (r, name) in self.label_names.iter().enumerate() {
            let mut row = vec![name.clone()];
            row.extend(self.matrix[r].iter().map(|v| format!("{v:.6}")));
            wtr.write_record(&row)?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Candidate redefinition pairs from the confusion matrix: reference label
/// `to` systematically predicted as `from` (mass >= `min_offdiag`) yields the
/// rule "convert predicted `from` to `to`". Background is never a source.
/// Pairs are ordered by descending confusion mass.
pub fn select_confusion_pairs(cm: &LabelConfusion, min_offdiag: f64) -> Vec<(String, String)> {
    let mut scored: Vec<(f64, String, String)> = Vec::new();
    let k = cm.label_names.len();
    for r in 0..k {
        for p in 1..k {
            // p starts at 1: predicted background cannot be converted
            if r == p {
                continue;
            }
            let mass = cm.matrix[r][p];
            if mass >= min_offdiag {
                scored.push((mass, cm.label_names[p].clone(), cm.label_names[r].clone()));
            }
        }
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, f, t)| (f, t)).collect()
}

/// One training case for the post-processing optimizers.
#[derive(Debug, Clone)]
pub struct PpCase {
    pub case_id: String,
    pub cluster: u32,
    pub reference: Volume,
    pub prediction: Volume,
}

#[derive(Debug, Clone)]
pub struct PpGrids {
    pub cc_max: usize,
    pub cc_step: usize,
    pub ratio_max_hundredths: u32,
    pub ratio_step_hundredths: u32,
    pub min_offdiag: f64,
}

impl Default for PpGrids {
    fn default() -> Self {
        PpGrids {
            cc_max: 500,
            cc_step: 25,
            ratio_max_hundredths: 25,
            ratio_step_hundredths: 1,
            min_offdiag: 0.10,
        }
    }
}

impl PpGrids {
    pub fn cc_grid(&self) -> Vec<usize> {
        (0..=self.cc_max / self.cc_step.max(1))
            .map(|i| i * self.cc_step)
            .collect()
    }

    pub fn ratio_grid(&self) -> Vec<f64> {
        (0..=self.ratio_max_hundredths / self.ratio_step_hundredths.max(1))
            .map(|i| (i * self.ratio_step_hundredths) as f64 / 100.0)
            .collect()
    }
}

fn rows_for(
    case: &PpCase,
    prediction: &Volume,
    candidate: &str,
    spec: &TaskSpec,
    params: &EvalParams,
    regions: Option<&BTreeSet<String>>,
) -> Result<Vec<crate::metrics::MetricRow>> {
    let rows = evaluate_case(&case.case_id, candidate, &case.reference, prediction, spec, params)?;
    Ok(match regions {
        None => rows,
        Some(keep) => rows.into_iter().filter(|r| keep.contains(&r.region)).collect(),
    })
}

/// Pick the best grid candidate: minimal rank F (or maximal mean lw_dice),
/// ties resolved toward the least intervention (first index).
fn best_candidate(tables: &BTreeMap<String, MetricTable>, order: &[String], objective: Objective) -> Result<usize> {
    match objective {
        Objective::Rank => {
            let scores = compute_rank_scores(tables, &default_directions())?;
            let f: BTreeMap<&str, f64> = scores
                .iter()
                .map(|s| (s.candidate_id.as_str(), s.f))
                .collect();
            let mut best = 0usize;
            for (i, id) in order.iter().enumerate().skip(1) {
                if f[id.as_str()] < f[order[best].as_str()] - 1e-12 {
                    best = i;
                }
            }
            Ok(best)
        }
        Objective::MeanLwDice => {
            let mean_dice = |t: &MetricTable| -> Result<f64> {
                let vals: Vec<f64> = t
                    .rows
                    .iter()
                    .filter(|r| r.metric == "lw_dice")
                    .filter_map(|r| r.value.real())
                    .collect();
                if vals.is_empty() {
                    return Err(Error::Config(
                        "mean_lw_dice objective requires lw_dice in the metric set".into(),
                    ));
                }
                Ok(vals.iter().sum::<f64>() / vals.len() as f64)
            };
            let mut best = 0usize;
            let mut best_v = mean_dice(&tables[&order[0]])?;
            for (i, id) in order.iter().enumerate().skip(1) {
                let v = mean_dice(&tables[id])?;
                if v > best_v + 1e-12 {
                    best_v = v;
                    best = i;
                }
            }
            Ok(best)
        }
    }
}

/// Grid-search the per-(cluster, label) component-size thresholds. Cells are
/// optimized independently in declared label order; within a cell every
/// grid threshold becomes one rank candidate over that cluster's cases.
pub fn optimize_cc(
    cases: &[PpCase],
    spec: &TaskSpec,
    grids: &PpGrids,
    params: &EvalParams,
    objective: Objective,
) -> Result<(Vec<CcRule>, Vec<String>)> {
    let grid = grids.cc_grid();
    let clusters: BTreeSet<u32> = cases.iter().map(|c| c.cluster).collect();
    let mut warnings = Vec::new();
    if cases.is_empty() {
        return Err(Error::Validation("optimize_cc on empty corpus".into()));
    }

    let mut cells: Vec<(u32, String, i32)> = Vec::new();
    for &cluster in &clusters {
        for (label, code) in spec.base_labels() {
            cells.push((cluster, label.clone(), *code));
        }
    }

    let results: Vec<Result<Option<CcRule>>> = cells
        .par_iter()
        .map(|(cluster, label, code)| {
            optimize_cc_cell(cases, spec, &grid, params, objective, *cluster, label, *code)
        })
        .collect();

    let mut rules = Vec::new();
    for (cell, result) in cells.iter().zip(results) {
        match result? {
            Some(rule) => rules.push(rule),
            None => warnings.push(format!(
                "cluster {} label {}: no cases with this label; cell omitted",
                cell.0, cell.1
            )),
        }
    }
    Ok((rules, warnings))
}

#[allow(clippy::too_many_arguments)]
fn optimize_cc_cell(
    cases: &[PpCase],
    spec: &TaskSpec,
    grid: &[usize],
    params: &EvalParams,
    objective: Objective,
    cluster: u32,
    label: &str,
    code: i32,
) -> Result<Option<CcRule>> {
    let cell_cases: Vec<&PpCase> = cases.iter().filter(|c| c.cluster == cluster).collect();
    if cell_cases.is_empty() {
        return Ok(None);
    }
    let affected: BTreeSet<String> = spec
        .regions()
        .iter()
        .filter(|r| r.labels.iter().any(|l| l == label))
        .map(|r| r.name.clone())
        .collect();
    let unaffected: BTreeSet<String> = spec
        .regions()
        .iter()
        .map(|r| r.name.clone())
        .filter(|n| !affected.contains(n))
        .collect();

    // per case: static rows for regions the filter cannot touch, component
    // sizes of the target label, and rows per distinct removal outcome
    struct CaseEval {
        static_rows: Vec<crate::metrics::MetricRow>,
        sizes: Vec<usize>,
        // distinct removal outcome (count of removed components) -> rows
        outcome_rows: BTreeMap<usize, Vec<crate::metrics::MetricRow>>,
    }
    let mut evals: Vec<CaseEval> = Vec::with_capacity(cell_cases.len());
    for case in &cell_cases {
        let static_rows = if unaffected.is_empty() {
            Vec::new()
        } else {
            rows_for(case, &case.prediction, "grid", spec, params, Some(&unaffected))?
        };
        let cc = label_components(
            case.prediction.labels(),
            case.prediction.dims(),
            code,
            params.connectivity,
        );
        evals.push(CaseEval {
            static_rows,
            sizes: cc.voxel_counts.clone(),
            outcome_rows: BTreeMap::new(),
        });
    }

    let candidate_name = |t: usize| format!("t{t:04}");
    let mut tables: BTreeMap<String, MetricTable> = BTreeMap::new();
    let order: Vec<String> = grid.iter().map(|&t| candidate_name(t)).collect();
    for &t in grid {
        let mut table = MetricTable::default();
        for (case, eval) in cell_cases.iter().zip(evals.iter_mut()) {
            let removed = eval.sizes.iter().filter(|&&s| s < t).count();
            if !eval.outcome_rows.contains_key(&removed) {
                let filtered = filter_components(&case.prediction, code, t, params.connectivity);
                let rows = rows_for(case, &filtered, "grid", spec, params, Some(&affected))?;
                eval.outcome_rows.insert(removed, rows);
            }
            for row in &eval.static_rows {
                let mut row = row.clone();
                row.candidate_id = candidate_name(t);
                table.rows.push(row);
            }
            for row in &eval.outcome_rows[&removed] {
                let mut row = row.clone();
                row.candidate_id = candidate_name(t);
                table.rows.push(row);
            }
        }
        tables.insert(candidate_name(t), table);
    }

    let label_present = evals.iter().any(|e| !e.sizes.is_empty());
    if !label_present {
        // nothing to filter: the identity threshold wins by the tie rule
        return Ok(Some(CcRule {
            cluster,
            label: label.to_string(),
            min_voxels: 0,
        }));
    }
    let best = best_candidate(&tables, &order, objective)?;
    Ok(Some(CcRule {
        cluster,
        label: label.to_string(),
        min_voxels: grid[best],
    }))
}

/// Count voxels of a label code.
fn label_volume(labels: &[i32], code: i32) -> usize {
    labels.iter().filter(|&&l| l == code).count()
}

fn wt_volume(volume: &Volume, spec: &TaskSpec) -> Result<usize> {
    let codes = spec.region_codes(spec.wt_region())?;
    Ok(volume.labels().iter().filter(|l| codes.contains(l)).count())
}

fn relabel(volume: &Volume, from: i32, to: i32) -> Volume {
    let mut out = volume.clone();
    for l in out.labels_mut() {
        if *l == from {
            *l = to;
        }
    }
    out
}

/// Grid-search the per-(cluster, pair) ratio thresholds on predictions that
/// already carry PP1. Rules are searched sequentially in pair order within
/// each cluster: each accepted rule updates the working predictions before
/// the next pair is optimized, matching how `apply_policy` replays them.
pub fn optimize_redef(
    cases: &[PpCase],
    pairs: &[(String, String)],
    spec: &TaskSpec,
    grids: &PpGrids,
    params: &EvalParams,
    objective: Objective,
) -> Result<Vec<RedefRule>> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let grid = grids.ratio_grid();
    let clusters: BTreeSet<u32> = cases.iter().map(|c| c.cluster).collect();

    // working copies, updated as rules are accepted
    let mut current: BTreeMap<&str, Volume> = cases
        .iter()
        .map(|c| (c.case_id.as_str(), c.prediction.clone()))
        .collect();
    let mut rules = Vec::new();

    for (from, to) in pairs {
        let from_code = spec.code_of(from)?;
        let to_code = if to == "BG" { 0 } else { spec.code_of(to)? };
        for &cluster in &clusters {
            let cell_cases: Vec<&PpCase> = cases.iter().filter(|c| c.cluster == cluster).collect();
            if cell_cases.is_empty() {
                continue;
            }
            // per case: ratio, baseline rows, converted rows (lazy)
            struct RedefEval {
                ratio: Option<f64>,
                base_rows: Vec<crate::metrics::MetricRow>,
                conv_rows: Option<Vec<crate::metrics::MetricRow>>,
            }
            let prepared: Vec<Result<(RedefEval, Volume)>> = cell_cases
                .par_iter()
                .map(|case| {
                    let pred = current[case.case_id.as_str()].clone();
                    let wt = wt_volume(&pred, spec)?;
                    let ratio = if wt == 0 {
                        None // rule never applies to WT-empty predictions
                    } else {
                        Some(label_volume(pred.labels(), from_code) as f64 / wt as f64)
                    };
                    let base_rows = rows_for(case, &pred, "grid", spec, params, None)?;
                    Ok((
                        RedefEval {
                            ratio,
                            base_rows,
                            conv_rows: None,
                        },
                        pred,
                    ))
                })
                .collect();
            let mut evals = Vec::new();
            let mut preds = Vec::new();
            for p in prepared {
                let (e, v) = p?;
                evals.push(e);
                preds.push(v);
            }

            let candidate_name = |i: usize| format!("t{i:03}");
            let order: Vec<String> = (0..grid.len()).map(candidate_name).collect();
            let mut tables: BTreeMap<String, MetricTable> = BTreeMap::new();
            for (gi, &t) in grid.iter().enumerate() {
                let mut table = MetricTable::default();
                for ((case, eval), pred) in
                    cell_cases.iter().zip(evals.iter_mut()).zip(preds.iter())
                {
                    let converts = matches!(eval.ratio, Some(r) if r < t);
                    let rows = if converts {
                        if eval.conv_rows.is_none() {
                            let converted = relabel(pred, from_code, to_code);
                            eval.conv_rows =
                                Some(rows_for(case, &converted, "grid", spec, params, None)?);
                        }
                        eval.conv_rows.as_ref().unwrap()
                    } else {
                        &eval.base_rows
                    };
                    for row in rows {
                        let mut row = row.clone();
                        row.candidate_id = candidate_name(gi);
                        table.rows.push(row);
                    }
                }
                tables.insert(candidate_name(gi), table);
            }
            let best = best_candidate(&tables, &order, objective)?;
            let t_star = grid[best];
            if t_star > 0.0 {
                rules.push(RedefRule {
                    cluster,
                    from: from.clone(),
                    to: to.clone(),
                    ratio_threshold: t_star,
                });
                for (case, eval) in cell_cases.iter().zip(evals.iter()) {
                    if matches!(eval.ratio, Some(r) if r < t_star) {
                        let pred = current.get_mut(case.case_id.as_str()).unwrap();
                        *pred = relabel(pred, from_code, to_code);
                    }
                }
            }
        }
    }
    Ok(rules)
}

/// Rules actually applied to one case, for the run manifest.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AppliedRules {
    pub cc: Vec<CcRule>,
    pub redef: Vec<RedefRule>,
    pub warnings: Vec<String>,
}

/// Apply a learned policy to one prediction: component filters for every
/// label in declared order, then redefinition rules in stored order. A
/// cluster without learned entries degrades to the identity (flagged).
pub fn apply_policy(
    pred: &Volume,
    cluster: u32,
    policy: &PpPolicy,
    spec: &TaskSpec,
    connectivity: Connectivity,
) -> Result<(Volume, AppliedRules)> {
    let mut applied = AppliedRules::default();
    let mut out = pred.clone();
    let has_cluster = policy
        .cc_thresholds
        .iter()
        .any(|r| r.cluster == cluster)
        || policy.redef_rules.iter().any(|r| r.cluster == cluster);
    if !has_cluster {
        applied
            .warnings
            .push(format!("no learned rules for cluster {cluster}; identity applied"));
        return Ok((out, applied));
    }
    for (label, code) in spec.base_labels() {
        if let Some(min_voxels) = policy.cc_threshold(cluster, label) {
            if min_voxels > 0 {
                out = filter_components(&out, *code, min_voxels, connectivity);
                applied.cc.push(CcRule {
                    cluster,
                    label: label.clone(),
                    min_voxels,
                });
            }
        }
    }
    for rule in &policy.redef_rules {
        if rule.cluster != cluster {
            continue;
        }
        let from_code = spec.code_of(&rule.from)?;
        let to_code = if rule.to == "BG" { 0 } else { spec.code_of(&rule.to)? };
        let wt = wt_volume(&out, spec)?;
        if wt == 0 {
            continue;
        }
        let ratio = label_volume(out.labels(), from_code) as f64 / wt as f64;
        if ratio < rule.ratio_threshold {
            out = relabel(&out, from_code, to_code);
            applied.redef.push(rule.clone());
        }
    }
    Ok((out, applied))
}

/// Pairwise F of the corpus before vs after a policy (2-candidate ranking).
pub fn policy_before_after_f(
    cases: &[PpCase],
    policy: &PpPolicy,
    spec: &TaskSpec,
    params: &EvalParams,
) -> Result<(f64, f64)> {
    let evaluated: Vec<Result<(Vec<crate::metrics::MetricRow>, Vec<crate::metrics::MetricRow>)>> =
        cases
            .par_iter()
            .map(|case| {
                let before = rows_for(case, &case.prediction, "before", spec, params, None)?;
                let (post, _) =
                    apply_policy(&case.prediction, case.cluster, policy, spec, params.connectivity)?;
                let after = rows_for(case, &post, "after", spec, params, None)?;
                Ok((before, after))
            })
            .collect();
    let mut before_table = MetricTable::default();
    let mut after_table = MetricTable::default();
    for r in evaluated {
        let (b, a) = r?;
        before_table.rows.extend(b);
        after_table.rows.extend(a);
    }
    let tables: BTreeMap<String, MetricTable> = [
        ("after".to_string(), after_table),
        ("before".to_string(), before_table),
    ]
    .into();
    let scores = compute_rank_scores(&tables, &default_directions())?;
    let f: BTreeMap<&str, f64> = scores
        .iter()
        .map(|s| (s.candidate_id.as_str(), s.f))
        .collect();
    Ok((f["before"], f["after"]))
}

/// Full policy optimization: PP1 grid search, confusion on PP1-filtered
/// predictions, pair selection, PP2 grid search, and the before/after F
/// audit. If the composed policy ranks worse than the identity on its own
/// training corpus it is discarded (the identity is always attainable).
#[allow(clippy::too_many_arguments)]
pub fn optimize_policy(
    cases: &[PpCase],
    spec: &TaskSpec,
    grids: &PpGrids,
    params: &EvalParams,
    objective: Objective,
    seed: u64,
    config_hash: &str,
) -> Result<(PpPolicy, LabelConfusion, Vec<String>)> {
    let (cc_rules, mut warnings) = optimize_cc(cases, spec, grids, params, objective)?;

    // PP1-filtered working corpus
    let filtered: Vec<PpCase> = cases
        .par_iter()
        .map(|case| {
            let mut pred = case.prediction.clone();
            for (label, code) in spec.base_labels() {
                let t = cc_rules
                    .iter()
                    .find(|r| r.cluster == case.cluster && &r.label == label)
                    .map(|r| r.min_voxels)
                    .unwrap_or(0);
                if t > 0 {
                    pred = filter_components(&pred, *code, t, params.connectivity);
                }
            }
            PpCase {
                case_id: case.case_id.clone(),
                cluster: case.cluster,
                reference: case.reference.clone(),
                prediction: pred,
            }
        })
        .collect();

    let pair_inputs: Vec<(&Volume, &Volume)> = filtered
        .iter()
        .map(|c| (&c.reference, &c.prediction))
        .collect();
    let confusion = label_confusion(&pair_inputs, spec)?;
    for row in &confusion.zero_support_rows {
        warnings.push(format!("confusion row {row} has zero support"));
    }
    let pairs = select_confusion_pairs(&confusion, grids.min_offdiag);
    let redef_rules = optimize_redef(&filtered, &pairs, spec, grids, params, objective)?;

    let mut policy = PpPolicy {
        cc_thresholds: cc_rules,
        redef_rules,
        provenance: PolicyProvenance {
            cc_grid: grids.cc_grid(),
            ratio_grid: grids.ratio_grid(),
            objective,
            f_before: 0.0,
            f_after: 0.0,
            seed,
            config_hash: config_hash.to_string(),
            notes: Vec::new(),
        },
    };

    let (f_before, f_after) = policy_before_after_f(cases, &policy, spec, params)?;
    if f_after > f_before {
        warnings.push(format!(
            "composed policy ranked worse than identity (F {f_after:.4} vs {f_before:.4}); reverting to identity"
        ));
        policy.cc_thresholds.clear();
        policy.redef_rules.clear();
        policy.provenance.notes.push("reverted to identity policy".into());
        let (fb, fa) = policy_before_after_f(cases, &policy, spec, params)?;
        policy.provenance.f_before = fb;
        policy.provenance.f_after = fa;
    } else {
        policy.provenance.f_before = f_before;
        policy.provenance.f_after = f_after;
    }
    Ok((policy, confusion, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskspec::builtin_task;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    const DIMS: [usize; 3] = [32, 32, 32];

    fn empty_labels() -> Vec<i32> {
        vec![0; DIMS[0] * DIMS[1] * DIMS[2]]
    }

    fn idx(x: usize, y: usize, z: usize) -> usize {
        x + DIMS[0] * (y + DIMS[1] * z)
    }

    /// Paint a solid box of `code`, returning painted voxel count.
    fn paint_box(labels: &mut [i32], lo: [usize; 3], hi: [usize; 3], code: i32) -> usize {
        let mut n = 0;
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    labels[idx(x, y, z)] = code;
                    n += 1;
                }
            }
        }
        n
    }

    /// Paint a straight x-line of exactly `len` voxels starting at `start`.
    fn paint_bar(labels: &mut [i32], start: [usize; 3], len: usize, code: i32) {
        assert!(start[0] + len <= DIMS[0]);
        for i in 0..len {
            labels[idx(start[0] + i, start[1], start[2])] = code;
        }
    }

    fn vol(labels: Vec<i32>) -> Volume {
        Volume::from_labels(DIMS, [1.0; 3], labels).unwrap()
    }

    fn eval_params() -> EvalParams {
        EvalParams::default()
    }

    /// Perfect-prediction corpus: ET, NET and ED blobs, prediction == reference.
    fn perfect_corpus(n_cases: usize, cluster: u32) -> Vec<PpCase> {
        (0..n_cases)
            .map(|i| {
                let mut labels = empty_labels();
                paint_box(&mut labels, [2, 2, 2], [10, 10, 10], 1); // ET 512
                paint_box(&mut labels, [14, 2, 2], [22, 10, 10], 2); // NET 512
                paint_box(&mut labels, [2, 14, 2], [10, 22, 10], 4); // ED 512
                let v = vol(labels);
                PpCase {
                    case_id: format!("case{i:02}"),
                    cluster,
                    reference: v.clone(),
                    prediction: v,
                }
            })
            .collect()
    }

    /// Perfect corpus plus small false ET components (5..=20 voxels).
    fn speck_corpus(n_cases: usize, cluster: u32, seed: u64) -> Vec<PpCase> {
        let mut rng = StdRng::seed_from_u64(seed);
        perfect_corpus(n_cases, cluster)
            .into_iter()
            .map(|mut case| {
                let mut labels = case.prediction.labels().to_vec();
                for s in 0..3 {
                    let len = rng.gen_range(5..=20usize);
                    paint_bar(&mut labels, [2, 24, 20 + s * 3], len, 1);
                }
                case.prediction = vol(labels);
                case
            })
            .collect()
    }

    #[test]
    fn filter_zero_threshold_is_identity() {
        let corpus = speck_corpus(1, 0, 1);
        let p = &corpus[0].prediction;
        let out = filter_components(p, 1, 0, Connectivity::TwentySix);
        assert_eq!(out.labels(), p.labels());
    }

    #[test]
    fn filter_strict_size_rule() {
        let mut labels = empty_labels();
        paint_box(&mut labels, [2, 2, 2], [12, 12, 12], 1); // 1000-voxel ET
        paint_bar(&mut labels, [20, 20, 20], 10, 1); // 10-voxel ET
        let v = vol(labels);
        let out = filter_components(&v, 1, 25, Connectivity::TwentySix);
        let kept: usize = out.labels().iter().filter(|&&l| l == 1).count();
        assert_eq!(kept, 1000, "only the large component survives");
        // threshold equal to component size keeps it (strictly smaller rule)
        let out2 = filter_components(&v, 1, 10, Connectivity::TwentySix);
        let kept2: usize = out2.labels().iter().filter(|&&l| l == 1).count();
        assert_eq!(kept2, 1010);
    }

    #[test]
    fn filter_leaves_other_labels_bit_identical() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..10 {
            let labels: Vec<i32> = (0..DIMS[0] * DIMS[1] * DIMS[2])
                .map(|_| rng.gen_range(0..=4))
                .collect();
            let v = vol(labels);
            let out = filter_components(&v, 2, 50, Connectivity::TwentySix);
            for (a, b) in v.labels().iter().zip(out.labels().iter()) {
                if *a != 2 {
                    assert_eq!(a, b, "non-target labels untouched");
                } else {
                    assert!(*b == 2 || *b == 0);
                }
            }
        }
    }

    #[test]
    fn filter_is_idempotent() {
        let corpus = speck_corpus(1, 0, 7);
        let p = &corpus[0].prediction;
        let once = filter_components(p, 1, 25, Connectivity::TwentySix);
        let twice = filter_components(&once, 1, 25, Connectivity::TwentySix);
        assert_eq!(once.labels(), twice.labels());
    }

    #[test]
    fn confusion_identity_and_swap() {
        let spec = builtin_task("PED").unwrap();
        let corpus = perfect_corpus(2, 0);
        let pairs: Vec<(&Volume, &Volume)> = corpus
            .iter()
            .map(|c| (&c.reference, &c.prediction))
            .collect();
        let cm = label_confusion(&pairs, &spec).unwrap();
        for (r, name) in cm.label_names.iter().enumerate() {
            if cm.zero_support_rows.contains(name) {
                continue;
            }
            assert!((cm.matrix[r][r] - 1.0).abs() < 1e-12, "row {name} diagonal");
        }
        // CC never appears: zero support flagged
        assert!(cm.zero_support_rows.contains(&"CC".to_string()));

        // all ET predicted as NET
        let mut case = perfect_corpus(1, 0).remove(0);
        let mut labels = case.prediction.labels().to_vec();
        for l in &mut labels {
            if *l == 1 {
                *l = 2;
            }
        }
        case.prediction = vol(labels);
        let pairs2: Vec<(&Volume, &Volume)> = vec![(&case.reference, &case.prediction)];
        let cm2 = label_confusion(&pairs2, &spec).unwrap();
        let et_row = 1; // BG, ET, NET, CC, ED
        assert!((cm2.matrix[et_row][2] - 1.0).abs() < 1e-12);
        assert_eq!(cm2.matrix[et_row][et_row], 0.0);
    }

    #[test]
    fn confusion_matches_tally_oracle() {
        let spec = builtin_task("PED").unwrap();
        let mut rng = StdRng::seed_from_u64(13);
        let ref_labels: Vec<i32> = (0..DIMS[0] * DIMS[1] * DIMS[2])
            .map(|_| rng.gen_range(0..=4))
            .collect();
        let pred_labels: Vec<i32> = (0..DIMS[0] * DIMS[1] * DIMS[2])
            .map(|_| rng.gen_range(0..=4))
            .collect();
        let rv = vol(ref_labels.clone());
        let pv = vol(pred_labels.clone());
        let cm = label_confusion(&[(&rv, &pv)], &spec).unwrap();
        let mut tally = vec![vec![0u64; 5]; 5];
        for (&r, &p) in ref_labels.iter().zip(pred_labels.iter()) {
            tally[r as usize][p as usize] += 1;
        }
        assert_eq!(cm.support, tally);
        for r in 0..5 {
            let row_sum: f64 = cm.matrix[r].iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pair_selection_rules() {
        let spec = builtin_task("PED").unwrap();
        let corpus = perfect_corpus(1, 0);
        let pairs_in: Vec<(&Volume, &Volume)> = corpus
            .iter()
            .map(|c| (&c.reference, &c.prediction))
            .collect();
        let cm = label_confusion(&pairs_in, &spec).unwrap();
        assert!(select_confusion_pairs(&cm, 0.10).is_empty(), "identity -> no pairs");

        // truth NET painted as ET in prediction => rule (ET -> NET)
        let mut case = perfect_corpus(1, 0).remove(0);
        let mut labels = case.prediction.labels().to_vec();
        let mut moved = 0;
        for l in labels.iter_mut() {
            if *l == 2 && moved < 160 {
                *l = 1;
                moved += 1;
            }
        }
        case.prediction = vol(labels);
        let pairs2: Vec<(&Volume, &Volume)> = vec![(&case.reference, &case.prediction)];
        let cm2 = label_confusion(&pairs2, &spec).unwrap();
        let selected = select_confusion_pairs(&cm2, 0.10);
        assert!(
            selected.contains(&("ET".to_string(), "NET".to_string())),
            "expected (ET -> NET), got {selected:?}"
        );
        // ordering: a second, heavier swap must come first
        let mut labels3 = case.prediction.labels().to_vec();
        for l in labels3.iter_mut() {
            if *l == 4 {
                *l = 2; // all ED painted NET: mass 1.0 on (NET -> ED)
            }
        }
        let pred3 = vol(labels3);
        let pairs3: Vec<(&Volume, &Volume)> = vec![(&case.reference, &pred3)];
        let cm3 = label_confusion(&pairs3, &spec).unwrap();
        let selected3 = select_confusion_pairs(&cm3, 0.10);
        assert_eq!(selected3[0], ("NET".to_string(), "ED".to_string()));
    }

    #[test]
    fn optimize_cc_identity_corpus_keeps_zero() {
        let spec = builtin_task("PED").unwrap();
        let corpus = perfect_corpus(4, 0);
        let (rules, _) =
            optimize_cc(&corpus, &spec, &PpGrids::default(), &eval_params(), Objective::Rank)
                .unwrap();
        for r in &rules {
            assert_eq!(r.min_voxels, 0, "{}: filtering a perfect corpus can only hurt", r.label);
        }
    }

    #[test]
    fn optimize_cc_removes_specks_and_improves_f() {
        let spec = builtin_task("PED").unwrap();
        let corpus = speck_corpus(6, 0, 42);
        let grids = PpGrids::default();
        let params = eval_params();
        let (rules, _) = optimize_cc(&corpus, &spec, &grids, &params, Objective::Rank).unwrap();
        let et_rule = rules.iter().find(|r| r.label == "ET").unwrap();
        assert!(
            et_rule.min_voxels >= 25,
            "specks are at most 20 voxels; got {}",
            et_rule.min_voxels
        );
        // specks gone, big components intact
        for case in &corpus {
            let filtered =
                filter_components(&case.prediction, 1, et_rule.min_voxels, params.connectivity);
            assert_eq!(
                filtered.labels(),
                case.reference.labels(),
                "{}: filtered prediction equals the clean reference",
                case.case_id
            );
        }
        // unaffected labels keep the identity threshold
        for r in rules.iter().filter(|r| r.label != "ET") {
            assert_eq!(r.min_voxels, 0);
        }
    }

    #[test]
    fn optimize_cc_per_cluster_independence() {
        let spec = builtin_task("PED").unwrap();
        let mut corpus = perfect_corpus(4, 0);
        corpus.extend(speck_corpus(4, 1, 9));
        let (rules, _) =
            optimize_cc(&corpus, &spec, &PpGrids::default(), &eval_params(), Objective::Rank)
                .unwrap();
        let c0_et = rules
            .iter()
            .find(|r| r.cluster == 0 && r.label == "ET")
            .unwrap();
        let c1_et = rules
            .iter()
            .find(|r| r.cluster == 1 && r.label == "ET")
            .unwrap();
        assert_eq!(c0_et.min_voxels, 0, "clean cluster keeps identity");
        assert!(c1_et.min_voxels >= 25, "speck cluster filters");
    }

    /// Truth: big ED blob + small NET bars; prediction paints the NET bars
    /// as ET with ET/WT held inside (0.04, 0.05).
    fn redef_corpus(n_cases: usize, cluster: u32) -> Vec<PpCase> {
        (0..n_cases)
            .map(|i| {
                let mut ref_labels = empty_labels();
                let ed = paint_box(&mut ref_labels, [2, 2, 2], [15, 15, 14], 4); // 2028 voxels
                let mut pred_labels = ref_labels.clone();
                // five NET bars of 19 voxels: 95 total; ratio 95/2123 = 0.0447
                let mut speck_total = 0;
                for s in 0..5 {
                    paint_bar(&mut ref_labels, [2, 18 + s * 2, 20], 19, 2);
                    paint_bar(&mut pred_labels, [2, 18 + s * 2, 20], 19, 1);
                    speck_total += 19;
                }
                let ratio = speck_total as f64 / (ed + speck_total) as f64;
                assert!(ratio > 0.04 && ratio < 0.05, "ratio {ratio}");
                PpCase {
                    case_id: format!("redef{i:02}"),
                    cluster,
                    reference: vol(ref_labels),
                    prediction: vol(pred_labels),
                }
            })
            .collect()
    }

    fn mean_lw_dice(corpus: &[PpCase], preds: &[Volume], spec: &TaskSpec, region: &str) -> f64 {
        let params = eval_params();
        let mut sum = 0.0;
        for (case, pred) in corpus.iter().zip(preds.iter()) {
            let rows =
                evaluate_case(&case.case_id, "x", &case.reference, pred, spec, &params).unwrap();
            let v = rows
                .iter()
                .find(|r| r.region == region && r.metric == "lw_dice")
                .unwrap()
                .value
                .real()
                .unwrap();
            sum += v;
        }
        sum / corpus.len() as f64
    }

    #[test]
    fn optimize_redef_selects_window_and_improves_dice() {
        let spec = builtin_task("PED").unwrap();
        let corpus = redef_corpus(5, 0);
        let pairs_in: Vec<(&Volume, &Volume)> = corpus
            .iter()
            .map(|c| (&c.reference, &c.prediction))
            .collect();
        let cm = label_confusion(&pairs_in, &spec).unwrap();
        let pairs = select_confusion_pairs(&cm, 0.10);
        assert!(pairs.contains(&("ET".to_string(), "NET".to_string())));
        let rules = optimize_redef(
            &corpus,
            &pairs,
            &spec,
            &PpGrids::default(),
            &eval_params(),
            Objective::Rank,
        )
        .unwrap();
        let rule = rules
            .iter()
            .find(|r| r.from == "ET" && r.to == "NET")
            .expect("ET->NET rule learned");
        assert!(
            rule.ratio_threshold >= 0.05 && rule.ratio_threshold <= 0.25,
            "t = {}",
            rule.ratio_threshold
        );

        // strict improvement of both ET and NET lesion-wise Dice
        let before: Vec<Volume> = corpus.iter().map(|c| c.prediction.clone()).collect();
        let after: Vec<Volume> = corpus
            .iter()
            .map(|c| relabel(&c.prediction, 1, 2))
            .collect();
        for region in ["ET", "NET"] {
            let b = mean_lw_dice(&corpus, &before, &spec, region);
            let a = mean_lw_dice(&corpus, &after, &spec, region);
            assert!(a > b, "{region}: {a} must beat {b}");
        }
    }

    #[test]
    fn optimize_redef_perfect_corpus_disables_rules() {
        let spec = builtin_task("PED").unwrap();
        let corpus = perfect_corpus(4, 0);
        let pairs = vec![("ET".to_string(), "NET".to_string())];
        let rules = optimize_redef(
            &corpus,
            &pairs,
            &spec,
            &PpGrids::default(),
            &eval_params(),
            Objective::Rank,
        )
        .unwrap();
        assert!(rules.is_empty(), "t = 0 means no rule: {rules:?}");
    }

    #[test]
    fn ratio_exactly_at_threshold_does_not_convert() {
        let spec = builtin_task("PED").unwrap();
        // ET/WT exactly 0.05: 100 ET voxels, 1900 ED => WT 2000
        let mut labels = empty_labels();
        paint_box(&mut labels, [2, 2, 2], [12, 12, 21], 4); // 1900
        paint_box(&mut labels, [20, 20, 20], [25, 25, 24], 1); // 100
        let pred = vol(labels);
        let policy = PpPolicy {
            cc_thresholds: Vec::new(),
            redef_rules: vec![RedefRule {
                cluster: 0,
                from: "ET".into(),
                to: "NET".into(),
                ratio_threshold: 0.05,
            }],
            provenance: PolicyProvenance {
                cc_grid: vec![],
                ratio_grid: vec![],
                objective: Objective::Rank,
                f_before: 0.0,
                f_after: 0.0,
                seed: 0,
                config_hash: String::new(),
                notes: vec![],
            },
        };
        let (out, applied) =
            apply_policy(&pred, 0, &policy, &spec, Connectivity::TwentySix).unwrap();
        assert_eq!(out.labels(), pred.labels(), "strict < means no conversion at equality");
        assert!(applied.redef.is_empty());
    }

    #[test]
    fn apply_policy_identity_and_missing_cluster() {
        let spec = builtin_task("PED").unwrap();
        let corpus = speck_corpus(1, 0, 3);
        let empty = PpPolicy {
            cc_thresholds: Vec::new(),
            redef_rules: Vec::new(),
            provenance: PolicyProvenance {
                cc_grid: vec![],
                ratio_grid: vec![],
                objective: Objective::Rank,
                f_before: 0.0,
                f_after: 0.0,
                seed: 0,
                config_hash: String::new(),
                notes: vec![],
            },
        };
        let (out, applied) =
            apply_policy(&corpus[0].prediction, 7, &empty, &spec, Connectivity::TwentySix).unwrap();
        assert_eq!(out.labels(), corpus[0].prediction.labels());
        assert!(!applied.warnings.is_empty(), "missing cluster flagged");
    }

    #[test]
    fn optimize_policy_full_flow_and_replay() {
        let spec = builtin_task("PED").unwrap();
        let corpus = speck_corpus(5, 0, 21);
        let (policy, _cm, _warnings) = optimize_policy(
            &corpus,
            &spec,
            &PpGrids::default(),
            &eval_params(),
            Objective::Rank,
            42,
            "testhash",
        )
        .unwrap();
        assert!(policy.provenance.f_after <= policy.provenance.f_before);
        assert!(policy.provenance.f_after < policy.provenance.f_before, "specks must help");

        // replay: F recomputed from the saved policy file equals provenance exactly
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("policy.json");
        policy.save(&p).unwrap();
        let reloaded = PpPolicy::load(&p).unwrap();
        let (fb, fa) = policy_before_after_f(&corpus, &reloaded, &spec, &eval_params()).unwrap();
        assert_eq!(fb.to_bits(), policy.provenance.f_before.to_bits());
        assert_eq!(fa.to_bits(), policy.provenance.f_after.to_bits());
    }

    #[test]
    fn policy_conserves_untouched_label_voxels() {
        let spec = builtin_task("PED").unwrap();
        let corpus = speck_corpus(3, 0, 11);
        let (policy, _, _) = optimize_policy(
            &corpus,
            &spec,
            &PpGrids::default(),
            &eval_params(),
            Objective::Rank,
            0,
            "h",
        )
        .unwrap();
        let touched: BTreeSet<&str> = policy
            .cc_thresholds
            .iter()
            .filter(|r| r.min_voxels > 0)
            .map(|r| r.label.as_str())
            .chain(policy.redef_rules.iter().flat_map(|r| {
                [r.from.as_str(), r.to.as_str()]
            }))
            .collect();
        for case in &corpus {
            let (out, _) =
                apply_policy(&case.prediction, 0, &policy, &spec, Connectivity::TwentySix)
                    .unwrap();
            for (label, code) in spec.base_labels() {
                if !touched.contains(label.as_str()) {
                    let n_in = case.prediction.labels().iter().filter(|&&l| l == *code).count();
                    let n_out = out.labels().iter().filter(|&&l| l == *code).count();
                    assert_eq!(n_in, n_out, "label {label} voxel count conserved");
                }
            }
        }
    }
}
