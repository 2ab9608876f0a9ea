//! Stage orchestration: each CLI subcommand maps to one method here. Stages
//! communicate through plain files in the output directory, so a run can be
//! resumed from any stage. Every artifact embeds the seed and config hash.

pub mod config;
pub mod report;
pub mod synth;

pub use config::{FusionMode, PipelineConfig};

use crate::error::{Error, Result};
use crate::fusion::{
    average_folds, decode, ensemble_weights, load_stack, staple_fuse, weighted_fuse,
    EnsembleWeights, ProbStack, StapleParams,
};
use crate::manifest::{save_manifest_csv, CaseManifest, Corpus};
use crate::metrics::{evaluate_case, EvalParams, MetricTable};
use crate::nifti::{load_volume, save_label_volume};
use crate::postprocess::{apply_policy, optimize_policy, AppliedRules, PpCase, PpPolicy};
use crate::ranker::{compute_rank_scores, default_directions, rank_report, RankReport};
use crate::stratify::{
    anova_f_scores, assign_folds, extract_first_order_features, extract_shape_features,
    fit_stratifier, ingest_features_csv, merge_features, write_features_csv, FeatureVector,
    StratifierModel,
};
use crate::taskspec::{region_mask, TaskSpec};
use crate::volume::{Volume, VolumeKind};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub struct PipelineCtx {
    pub config: PipelineConfig,
    pub spec: TaskSpec,
    pub eval: EvalParams,
    pub out_dir: PathBuf,
    pub config_hash: String,
}

/// What a stage produced and what went wrong per case. Case failures do not
/// abort the stage; the CLI maps them to exit code 1.
#[derive(Debug, Default, Serialize)]
pub struct StageOutcome {
    pub artifacts: Vec<PathBuf>,
    pub case_failures: Vec<String>,
    pub warnings: Vec<String>,
}

impl StageOutcome {
    fn artifact(&mut self, p: impl Into<PathBuf>) {
        self.artifacts.push(p.into());
    }
}

impl PipelineCtx {
    /// `base_dir` anchors relative paths found in the config (task file).
    pub fn new(config: PipelineConfig, base_dir: &Path) -> Result<Self> {
        config.validate()?;
        let spec = config.task_spec(base_dir)?;
        let eval = config.eval_params()?;
        let out_dir = if config.run.out.is_absolute() {
            config.run.out.clone()
        } else {
            base_dir.join(&config.run.out)
        };
        std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        let config_hash = config.config_hash();
        Ok(PipelineCtx {
            config,
            spec,
            eval,
            out_dir,
            config_hash,
        })
    }

    fn write_json(&self, name: &str, key: &str, payload: impl Serialize) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        let wrapped = json!({
            "seed": self.config.run.seed,
            "config_hash": self.config_hash,
            key: payload,
        });
        let text = serde_json::to_string_pretty(&wrapped)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    fn load_prediction(&self, path: &Path) -> Result<Volume> {
        if path.extension().and_then(|e| e.to_str()) == Some("json") {
            let stack = load_stack(path)?;
            decode(&stack, &self.spec)
        } else {
            let v = load_volume(path, VolumeKind::Label)?;
            let mut allowed = self.spec.label_codes();
            allowed.insert(0);
            v.validate_label_codes(&allowed)?;
            Ok(v)
        }
    }

    fn load_stack_or_onehot(&self, path: &Path) -> Result<ProbStack> {
        if path.extension().and_then(|e| e.to_str()) == Some("json") {
            load_stack(path)
        } else {
            let v = load_volume(path, VolumeKind::Label)?;
            ProbStack::one_hot(&v, &self.spec)
        }
    }

    /// Radiomic features of one case: shape descriptors of the whole-tumor
    /// mask plus first-order statistics per configured sequence. The same
    /// extractor serves fold splitting (reference masks) and recluster-time
    /// inference (predicted masks).
    fn case_features(
        &self,
        case_id: &str,
        wt_source: &Volume,
        images: &BTreeMap<String, PathBuf>,
    ) -> Result<(FeatureVector, Vec<String>)> {
        let wt = region_mask(wt_source, self.spec.wt_region(), &self.spec)?;
        if wt.is_empty_mask() {
            return Err(Error::Validation(format!(
                "case {case_id}: empty whole-tumor mask"
            )));
        }
        let mut warnings = Vec::new();
        let mut fv = extract_shape_features(&wt, wt_source.spacing())?;
        fv.case_id = case_id.to_string();
        for seq in &self.config.stratify.sequences {
            let img_path = images.get(seq).ok_or_else(|| {
                Error::Validation(format!("case {case_id}: missing image sequence {seq}"))
            })?;
            let image = load_volume(img_path, VolumeKind::Intensity)?;
            let (fo, mut fo_warnings) =
                extract_first_order_features(&image, &wt, self.config.stratify.bin_width)?;
            warnings.append(&mut fo_warnings);
            for (name, value) in fo.names.iter().zip(fo.values.iter()) {
                fv.names.push(format!("{seq}_{name}"));
                fv.values.push(*value);
            }
        }
        Ok((fv, warnings))
    }

    /// Stage (i): extract features, fit the stratifier, assign folds, and
    /// write the fold-annotated manifest.
    pub fn cmd_split(&self, corpus: &mut Corpus) -> Result<StageOutcome> {
        let mut outcome = StageOutcome::default();
        let extracted: Vec<(String, Result<(FeatureVector, Vec<String>)>)> = corpus
            .cases
            .par_iter()
            .map(|case| {
                let run = || -> Result<(FeatureVector, Vec<String>)> {
                    let ref_path = case.reference.as_ref().ok_or_else(|| {
                        Error::Validation(format!("case {}: no reference", case.case_id))
                    })?;
                    let reference = load_volume(ref_path, VolumeKind::Label)?;
                    let mut allowed = self.spec.label_codes();
                    allowed.insert(0);
                    reference.validate_label_codes(&allowed)?;
                    self.case_features(&case.case_id, &reference, &case.images)
                };
                (case.case_id.clone(), run())
            })
            .collect();

        let mut features = Vec::new();
        for (case_id, result) in extracted {
            match result {
                Ok((fv, mut warnings)) => {
                    features.push(fv);
                    outcome.warnings.append(&mut warnings);
                }
                Err(e) => outcome.case_failures.push(format!("{case_id}: {e}")),
            }
        }
        if features.len() < 2 {
            return Err(Error::Validation(format!(
                "only {} cases yielded features; cannot stratify",
                features.len()
            )));
        }

        if let Some(external) = &self.config.stratify.external_features {
            let ext = ingest_features_csv(external)?;
            let (merged, collisions) = merge_features(&features, &ext)?;
            outcome.warnings.extend(collisions);
            features = merged;
        }

        let (mut model, warnings) = fit_stratifier(
            &features,
            (self.config.stratify.k_min, self.config.stratify.k_max),
            self.config.stratify.variance_target,
            self.config.run.seed,
            self.config.kmeans_params(),
        )?;
        outcome.warnings.extend(warnings);
        assign_folds(&mut model, self.config.stratify.n_folds, self.config.run.seed)?;

        let model_path = self.out_dir.join("stratifier.json");
        model.save(&model_path)?;
        outcome.artifact(model_path);

        let features_path = self.out_dir.join("features.csv");
        write_features_csv(&features, &features_path)?;
        outcome.artifact(features_path);

        let anova = anova_f_scores(&features, &model.cluster_of_case, model.k)?;
        let sep_path = self.out_dir.join("feature_separation.csv");
        let mut wtr = csv::Writer::from_path(&sep_path).map_err(Error::Csv)?;
        wtr.write_record(["feature", "anova_f"])?;
        for (name, f) in &anova {
            wtr.write_record([name.as_str(), &format!("{f}")])?;
        }
        wtr.flush().map_err(|e| Error::io(&sep_path, e))?;
        outcome.artifact(sep_path);

        for case in &mut corpus.cases {
            case.fold = model.fold_of_case.get(&case.case_id).copied();
            case.cluster = model.cluster_of_case.get(&case.case_id).copied();
        }
        let manifest_path = self.out_dir.join("manifest_folds.csv");
        save_manifest_csv(corpus, &manifest_path)?;
        outcome.artifact(manifest_path);
        Ok(outcome)
    }

    /// Stage (iii-a): one metric table per candidate over all cases.
    pub fn cmd_evaluate(
        &self,
        corpus: &Corpus,
        candidates: Option<&[String]>,
    ) -> Result<StageOutcome> {
        let mut outcome = StageOutcome::default();
        let all_ids = corpus.candidate_ids();
        let ids: Vec<String> = match candidates {
            Some(list) => {
                for id in list {
                    if !all_ids.contains(id) {
                        return Err(Error::Config(format!(
                            "candidate {id} not present in the manifest"
                        )));
                    }
                }
                list.to_vec()
            }
            None => all_ids.into_iter().collect(),
        };
        if ids.is_empty() {
            return Err(Error::Config("manifest declares no candidates".into()));
        }
        let tables_dir = self.out_dir.join("tables");
        std::fs::create_dir_all(&tables_dir).map_err(|e| Error::io(&tables_dir, e))?;

        for candidate in &ids {
            let rows: Vec<(String, Result<Vec<crate::metrics::MetricRow>>)> = corpus
                .cases
                .par_iter()
                .map(|case| {
                    let run = || -> Result<Vec<crate::metrics::MetricRow>> {
                        let ref_path = case.reference.as_ref().ok_or_else(|| {
                            Error::Validation(format!("case {}: no reference", case.case_id))
                        })?;
                        let pred_path = case.candidates.get(candidate).ok_or_else(|| {
                            Error::Validation(format!(
                                "case {}: no file for candidate {candidate}",
                                case.case_id
                            ))
                        })?;
                        let reference = load_volume(ref_path, VolumeKind::Label)?;
                        let prediction = self.load_prediction(pred_path)?;
                        evaluate_case(
                            &case.case_id,
                            candidate,
                            &reference,
                            &prediction,
                            &self.spec,
                            &self.eval,
                        )
                    };
                    (case.case_id.clone(), run())
                })
                .collect();
            let mut table = MetricTable::default();
            for (case_id, result) in rows {
                match result {
                    Ok(mut r) => table.rows.append(&mut r),
                    Err(e) => outcome
                        .case_failures
                        .push(format!("{candidate}/{case_id}: {e}")),
                }
            }
            let csv_path = tables_dir.join(format!("{candidate}.csv"));
            table.to_csv(&csv_path)?;
            let json_path = tables_dir.join(format!("{candidate}.json"));
            table.to_json(&json_path)?;
            outcome.artifact(csv_path);
            outcome.artifact(json_path);
        }
        Ok(outcome)
    }

    /// Stage (iii-b): aggregate candidate tables into rank scores F.
    pub fn cmd_rank(&self, table_paths: &[PathBuf]) -> Result<StageOutcome> {
        let mut outcome = StageOutcome::default();
        let mut tables = BTreeMap::new();
        for path in table_paths {
            let table = MetricTable::from_csv(path)?;
            let id = table
                .rows
                .first()
                .map(|r| r.candidate_id.clone())
                .ok_or_else(|| Error::Validation(format!("{}: empty table", path.display())))?;
            tables.insert(id, table);
        }
        let scores = compute_rank_scores(&tables, &default_directions())?;
        let report = rank_report(&scores);
        let json_path = self.write_json("rank_report.json", "rank_report", &report)?;
        outcome.artifact(json_path);
        let txt_path = self.out_dir.join("rank_report.txt");
        std::fs::write(&txt_path, report.render_text()).map_err(|e| Error::io(&txt_path, e))?;
        outcome.artifact(txt_path);
        Ok(outcome)
    }

    pub fn load_rank_report(&self) -> Result<RankReport> {
        let path = self.out_dir.join("rank_report.json");
        let text = std::fs::read_to_string(&path).map_err(|e| {
            Error::Config(format!(
                "rank report not found at {} (run the rank stage first): {e}",
                path.display()
            ))
        })?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        Ok(serde_json::from_value(value["rank_report"].clone())?)
    }

    /// Stage (iii-c): fuse candidate predictions per case. Candidate ids of
    /// the form `model#fold` are averaged per model first.
    pub fn cmd_fuse(&self, corpus: &Corpus, mode: FusionMode) -> Result<StageOutcome> {
        let mut outcome = StageOutcome::default();
        let fused_dir = self.out_dir.join("fused");
        std::fs::create_dir_all(&fused_dir).map_err(|e| Error::io(&fused_dir, e))?;

        // group fold candidates by model
        let mut models: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for id in corpus.candidate_ids() {
            let model = id.split('#').next().unwrap_or(&id).to_string();
            models.entry(model).or_default().push(id.clone());
        }
        if models.is_empty() {
            return Err(Error::Config("manifest declares no candidates".into()));
        }

        let weights: Option<EnsembleWeights> = match mode {
            FusionMode::Weighted => {
                if models.len() == 1 {
                    None
                } else {
                    let report = self.load_rank_report()?;
                    let mut f = BTreeMap::new();
                    for model in models.keys() {
                        let value = report.f_of(model).ok_or_else(|| {
                            Error::Config(format!(
                                "no F score for model {model} in rank_report.json; run `rank` over model-level tables first"
                            ))
                        })?;
                        f.insert(model.clone(), value);
                    }
                    Some(ensemble_weights(&f, self.config.fusion.normalize)?)
                }
            }
            FusionMode::Staple => None,
        };
        if let Some(w) = &weights {
            let path = self.write_json("weights.json", "weights", w)?;
            outcome.artifact(path);
        }

        let staple_params = StapleParams {
            max_iterations: self.config.fusion.staple_max_iterations,
            tolerance: self.config.fusion.staple_tolerance,
        };

        let results: Vec<(String, Result<serde_json::Value>)> = corpus
            .cases
            .par_iter()
            .map(|case| {
                let run = || -> Result<serde_json::Value> {
                    let out_path = fused_dir.join(format!("{}.nii.gz", case.case_id));
                    match mode {
                        FusionMode::Weighted => {
                            let mut stacks = BTreeMap::new();
                            for (model, ids) in &models {
                                let mut fold_stacks = Vec::new();
                                for id in ids {
                                    let path = case.candidates.get(id).ok_or_else(|| {
                                        Error::Validation(format!(
                                            "case {}: missing candidate {id}",
                                            case.case_id
                                        ))
                                    })?;
                                    fold_stacks.push(self.load_stack_or_onehot(path)?);
                                }
                                stacks.insert(model.clone(), average_folds(&fold_stacks)?);
                            }
                            let fused = match &weights {
                                Some(w) => weighted_fuse(&stacks, w)?,
                                None => stacks.into_values().next().expect("one model"),
                            };
                            let labels = decode(&fused, &self.spec)?;
                            save_label_volume(&labels, &out_path)?;
                            Ok(json!({"case": case.case_id, "mode": "weighted"}))
                        }
                        FusionMode::Staple => {
                            let mut volumes = Vec::new();
                            for (id, path) in &case.candidates {
                                let v = self.load_prediction(path).map_err(|e| {
                                    Error::Validation(format!(
                                        "case {}: candidate {id}: {e}",
                                        case.case_id
                                    ))
                                })?;
                                volumes.push(v);
                            }
                            let refs: Vec<&Volume> = volumes.iter().collect();
                            let (fused, traces) = staple_fuse(&refs, &self.spec, &staple_params)?;
                            save_label_volume(&fused, &out_path)?;
                            let trace_summary: Vec<serde_json::Value> = traces
                                .iter()
                                .map(|t| {
                                    json!({
                                        "label_code": t.label_code,
                                        "iterations": t.iterations,
                                        "converged": t.converged,
                                        "final_log_likelihood": t.log_likelihood.last(),
                                    })
                                })
                                .collect();
                            Ok(json!({"case": case.case_id, "mode": "staple", "labels": trace_summary}))
                        }
                    }
                };
                (case.case_id.clone(), run())
            })
            .collect();

        let mut log_entries = Vec::new();
        for (case_id, result) in results {
            match result {
                Ok(entry) => log_entries.push(entry),
                Err(e) => outcome.case_failures.push(format!("{case_id}: {e}")),
            }
        }
        let log_path = self.write_json("fuse_log.json", "cases", log_entries)?;
        outcome.artifact(log_path);
        outcome.artifact(fused_dir);
        Ok(outcome)
    }

    /// Cluster id per case from prediction-derived features; empty
    /// predictions fall back to cluster 0 with a warning.
    fn recluster(
        &self,
        cases: &[(String, Volume, BTreeMap<String, PathBuf>)],
        model: &StratifierModel,
    ) -> Result<(BTreeMap<String, u32>, Vec<String>)> {
        let results: Vec<(String, Result<u32>)> = cases
            .par_iter()
            .map(|(case_id, pred, images)| {
                let run = || -> Result<u32> {
                    match self.case_features(case_id, pred, images) {
                        Ok((fv, _)) => model.nearest_cluster(&fv),
                        Err(Error::Validation(msg)) if msg.contains("empty whole-tumor") => {
                            Err(Error::Validation("__empty__".into()))
                        }
                        Err(e) => Err(e),
                    }
                };
                (case_id.clone(), run())
            })
            .collect();
        let mut clusters = BTreeMap::new();
        let mut warnings = Vec::new();
        for (case_id, result) in results {
            match result {
                Ok(c) => {
                    clusters.insert(case_id, c);
                }
                Err(Error::Validation(msg)) if msg == "__empty__" => {
                    warnings.push(format!(
                        "case {case_id}: empty prediction; fallback cluster 0"
                    ));
                    clusters.insert(case_id, 0);
                }
                Err(e) => return Err(e),
            }
        }
        Ok((clusters, warnings))
    }

    /// Stage (iv-a): recluster fused predictions and learn the policy.
    /// `pred_dir` holds one `<case>.nii.gz` per case (the fused outputs by
    /// default).
    pub fn cmd_optimize_pp(&self, corpus: &Corpus, pred_dir: &Path) -> Result<StageOutcome> {
        let mut outcome = StageOutcome::default();
        let model = StratifierModel::load(self.out_dir.join("stratifier.json")).map_err(|e| {
            Error::Config(format!(
                "stratifier model not found in {} (run `split` first): {e}",
                self.out_dir.display()
            ))
        })?;

        let loaded: Vec<(String, Result<(Volume, Volume, BTreeMap<String, PathBuf>)>)> = corpus
            .cases
            .par_iter()
            .map(|case| {
                let run = || -> Result<(Volume, Volume, BTreeMap<String, PathBuf>)> {
                    let ref_path = case.reference.as_ref().ok_or_else(|| {
                        Error::Validation(format!("case {}: no reference", case.case_id))
                    })?;
                    let reference = load_volume(ref_path, VolumeKind::Label)?;
                    let pred_path = pred_dir.join(format!("{}.nii.gz", case.case_id));
                    let prediction = self.load_prediction(&pred_path)?;
                    Ok((reference, prediction, case.images.clone()))
                };
                (case.case_id.clone(), run())
            })
            .collect();

        let mut recluster_inputs = Vec::new();
        let mut volumes: BTreeMap<String, (Volume, Volume)> = BTreeMap::new();
        for (case_id, result) in loaded {
            match result {
                Ok((reference, prediction, images)) => {
                    recluster_inputs.push((case_id.clone(), prediction.clone(), images));
                    volumes.insert(case_id, (reference, prediction));
                }
                Err(e) => outcome.case_failures.push(format!("{case_id}: {e}")),
            }
        }
        if volumes.is_empty() {
            return Err(Error::Validation("no cases available for optimization".into()));
        }
        let (clusters, warnings) = self.recluster(&recluster_inputs, &model)?;
        outcome.warnings.extend(warnings);

        let pp_cases: Vec<PpCase> = volumes
            .into_iter()
            .map(|(case_id, (reference, prediction))| PpCase {
                cluster: clusters[&case_id],
                case_id,
                reference,
                prediction,
            })
            .collect();

        let (policy, confusion, warnings) = optimize_policy(
            &pp_cases,
            &self.spec,
            &self.config.pp_grids(),
            &self.eval,
            self.config.postprocess.objective,
            self.config.run.seed,
            &self.config_hash,
        )?;
        outcome.warnings.extend(warnings);

        let policy_path = self.out_dir.join("policy.json");
        policy.save(&policy_path)?;
        outcome.artifact(policy_path);

        let cm_path = self.out_dir.join("confusion.csv");
        confusion.to_csv(&cm_path)?;
        outcome.artifact(cm_path);

        let thr_path = self.out_dir.join("thresholds.csv");
        let mut wtr = csv::Writer::from_path(&thr_path).map_err(Error::Csv)?;
        wtr.write_record(["kind", "cluster", "label_or_pair", "threshold"])?;
        for r in &policy.cc_thresholds {
            wtr.write_record([
                "cc",
                &r.cluster.to_string(),
                &r.label,
                &r.min_voxels.to_string(),
            ])?;
        }
        for r in &policy.redef_rules {
            wtr.write_record([
                "redef",
                &r.cluster.to_string(),
                &format!("{}->{}", r.from, r.to),
                &format!("{}", r.ratio_threshold),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io(&thr_path, e))?;
        outcome.artifact(thr_path);

        let clusters_path = self.write_json("recluster.json", "cluster_of_case", &clusters)?;
        outcome.artifact(clusters_path);
        Ok(outcome)
    }

    /// Stage (iv-b): fuse (when several candidates exist), recluster, apply
    /// the learned policy, and save final predictions for new cases.
    pub fn cmd_apply(&self, corpus: &Corpus, policy_path: &Path) -> Result<StageOutcome> {
        let mut outcome = StageOutcome::default();
        let policy = PpPolicy::load(policy_path)?;
        let model = StratifierModel::load(self.out_dir.join("stratifier.json")).map_err(|e| {
            Error::Config(format!(
                "stratifier model not found in {} (run `split` first): {e}",
                self.out_dir.display()
            ))
        })?;
        let weights: Option<EnsembleWeights> = {
            let path = self.out_dir.join("weights.json");
            if path.exists() {
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let value: serde_json::Value = serde_json::from_str(&text)?;
                Some(serde_json::from_value(value["weights"].clone())?)
            } else {
                None
            }
        };
        let applied_dir = self.out_dir.join("applied");
        std::fs::create_dir_all(&applied_dir).map_err(|e| Error::io(&applied_dir, e))?;
        let staple_params = StapleParams {
            max_iterations: self.config.fusion.staple_max_iterations,
            tolerance: self.config.fusion.staple_tolerance,
        };

        let fuse_case = |case: &CaseManifest| -> Result<Volume> {
            if case.candidates.is_empty() {
                return Err(Error::Validation(format!(
                    "case {}: no candidate predictions",
                    case.case_id
                )));
            }
            if case.candidates.len() == 1 {
                return self.load_prediction(case.candidates.values().next().unwrap());
            }
            match self.config.fusion.mode {
                FusionMode::Weighted => {
                    let mut models: BTreeMap<String, Vec<&PathBuf>> = BTreeMap::new();
                    for (id, path) in &case.candidates {
                        let model_id = id.split('#').next().unwrap_or(id).to_string();
                        models.entry(model_id).or_default().push(path);
                    }
                    let mut stacks = BTreeMap::new();
                    for (model_id, paths) in &models {
                        let fold_stacks: Vec<ProbStack> = paths
                            .iter()
                            .map(|p| self.load_stack_or_onehot(p))
                            .collect::<Result<_>>()?;
                        stacks.insert(model_id.clone(), average_folds(&fold_stacks)?);
                    }
                    if stacks.len() == 1 {
                        return decode(&stacks.into_values().next().unwrap(), &self.spec);
                    }
                    let w = weights.as_ref().ok_or_else(|| {
                        Error::Config(
                            "weighted fusion needs weights.json; run `fuse` (after `rank`) first"
                                .into(),
                        )
                    })?;
                    decode(&weighted_fuse(&stacks, w)?, &self.spec)
                }
                FusionMode::Staple => {
                    let volumes: Vec<Volume> = case
                        .candidates
                        .values()
                        .map(|p| self.load_prediction(p))
                        .collect::<Result<_>>()?;
                    let refs: Vec<&Volume> = volumes.iter().collect();
                    Ok(staple_fuse(&refs, &self.spec, &staple_params)?.0)
                }
            }
        };

        let results: Vec<(String, Result<(u32, AppliedRules, PathBuf)>)> = corpus
            .cases
            .par_iter()
            .map(|case| {
                let run = || -> Result<(u32, AppliedRules, PathBuf)> {
                    let fused = fuse_case(case)?;
                    let inputs = vec![(case.case_id.clone(), fused.clone(), case.images.clone())];
                    let (clusters, _warn) = self.recluster(&inputs, &model)?;
                    let cluster = clusters[&case.case_id];
                    let (final_volume, applied) =
                        apply_policy(&fused, cluster, &policy, &self.spec, self.eval.connectivity)?;
                    let out_path = applied_dir.join(format!("{}.nii.gz", case.case_id));
                    save_label_volume(&final_volume, &out_path)?;
                    Ok((cluster, applied, out_path))
                };
                (case.case_id.clone(), run())
            })
            .collect();

        let mut manifest_entries = Vec::new();
        for (case_id, result) in results {
            match result {
                Ok((cluster, applied, path)) => manifest_entries.push(json!({
                    "case_id": case_id,
                    "cluster": cluster,
                    "applied": applied,
                    "output": path,
                })),
                Err(e) => outcome.case_failures.push(format!("{case_id}: {e}")),
            }
        }
        let run_manifest = self.write_json("run_manifest.json", "cases", manifest_entries)?;
        outcome.artifact(run_manifest);
        outcome.artifact(applied_dir);
        Ok(outcome)
    }

    /// Final stage: aggregate every artifact into one report.
    pub fn cmd_report(&self) -> Result<StageOutcome> {
        let mut outcome = StageOutcome::default();
        let built = report::build_report(self)?;
        let json_path = self.write_json("report.json", "report", &built)?;
        outcome.artifact(json_path);
        let txt_path = self.out_dir.join("report.txt");
        std::fs::write(&txt_path, report::render_text(&built)).map_err(|e| Error::io(&txt_path, e))?;
        outcome.artifact(txt_path);
        Ok(outcome)
    }
}
