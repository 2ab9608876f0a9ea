//! Radiomic stratification: standardize features, reduce with PCA to a
//! variance target, cluster with silhouette-selected k-means, split clusters
//! into folds, and assign new cases to their nearest cluster at inference.

pub mod features;
pub mod kmeans;
pub mod pca;

pub use features::{
    extract_first_order_features, extract_shape_features, ingest_features_csv, merge_features,
    write_features_csv, FeatureVector, FIRST_ORDER_FEATURE_NAMES, SHAPE_FEATURE_NAMES,
};
pub use kmeans::{kmeans, silhouette, KMeansParams};
pub use pca::{PcaBasis, Standardizer};

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Everything needed to reproduce the stratification exactly: scaling stats,
/// PCA basis, centroids, chosen k, and the fold assignment. Persisted as a
/// single JSON file and reused verbatim at inference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StratifierModel {
    pub feature_names: Vec<String>,
    pub standardizer: Standardizer,
    pub dropped_features: Vec<String>,
    pub pca: PcaBasis,
    pub centroids: Vec<Vec<f64>>,
    pub k: usize,
    pub silhouette: f64,
    /// Silhouette per candidate k, for audit.
    pub k_search: BTreeMap<usize, f64>,
    pub cluster_of_case: BTreeMap<String, u32>,
    pub fold_of_case: BTreeMap<String, u32>,
    pub seed: u64,
    pub variance_target: f64,
    pub kmeans_params: KMeansParams,
}

fn feature_matrix(features: &[FeatureVector]) -> Result<(Vec<String>, Vec<&FeatureVector>)> {
    if features.is_empty() {
        return Err(Error::Validation("no feature vectors".into()));
    }
    let names = features[0].names.clone();
    for f in features {
        if f.names != names {
            return Err(Error::Validation(format!(
                "case {} has a different feature name set",
                f.case_id
            )));
        }
        if f.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "case {} has non-finite feature values",
                f.case_id
            )));
        }
    }
    let mut sorted: Vec<&FeatureVector> = features.iter().collect();
    sorted.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    Ok((names, sorted))
}

/// Fit the stratifier: z-score, PCA to the variance target, then k-means for
/// each k in `k_range` (clamped to [2, n-1]) picking the k with the best mean
/// silhouette (ties to the smaller k). Deterministic given the seed.
pub fn fit_stratifier(
    features: &[FeatureVector],
    k_range: (usize, usize),
    variance_target: f64,
    seed: u64,
    kmeans_params: KMeansParams,
) -> Result<(StratifierModel, Vec<String>)> {
    let (names, sorted) = feature_matrix(features)?;
    let n = sorted.len();
    let rows: Vec<Vec<f64>> = sorted.iter().map(|f| f.values.clone()).collect();

    let (standardizer, dropped_idx) = Standardizer::fit(&rows)?;
    let mut warnings: Vec<String> = Vec::new();
    let dropped_features: Vec<String> = dropped_idx.iter().map(|&j| names[j].clone()).collect();
    for d in &dropped_features {
        warnings.push(format!("feature {d} has zero variance and was dropped"));
    }
    if standardizer.kept.is_empty() {
        return Err(Error::Validation(
            "all features have zero variance".into(),
        ));
    }
    let z: Vec<Vec<f64>> = rows.iter().map(|r| standardizer.apply(r)).collect();
    let pca = PcaBasis::fit(&z, variance_target)?;
    let projected: Vec<Vec<f64>> = z.iter().map(|r| pca.project(r)).collect();

    let (k_lo, k_hi) = k_range;
    let lo = k_lo.max(2);
    let hi = k_hi.min(n.saturating_sub(1));
    if lo > hi {
        return Err(Error::Config(format!(
            "k range {k_lo}..={k_hi} is empty after clamping to [2, {}]",
            n.saturating_sub(1)
        )));
    }

    let mut k_search = BTreeMap::new();
    let mut best: Option<(usize, f64, kmeans::KMeansFit)> = None;
    for k in lo..=hi {
        // per-k rng stream so the search order cannot leak between ks
        let fit = kmeans(&projected, k, &kmeans_params, seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))?;
        let s = silhouette(&projected, &fit.assignment, k);
        k_search.insert(k, s);
        let better = match &best {
            None => true,
            Some((_, bs, _)) => s > *bs,
        };
        if better {
            best = Some((k, s, fit));
        }
    }
    let (k, sil, fit) = best.expect("k range non-empty");

    let cluster_of_case: BTreeMap<String, u32> = sorted
        .iter()
        .zip(fit.assignment.iter())
        .map(|(f, &a)| (f.case_id.clone(), a as u32))
        .collect();

    let model = StratifierModel {
        feature_names: names,
        standardizer,
        dropped_features,
        pca,
        centroids: fit.centroids,
        k,
        silhouette: sil,
        k_search,
        cluster_of_case,
        fold_of_case: BTreeMap::new(),
        seed,
        variance_target,
        kmeans_params,
    };
    Ok((model, warnings))
}

/// Deal each cluster's cases into `n_folds` folds: cases sorted, shuffled by
/// the seed, then distributed round-robin, so per-cluster fold sizes differ
/// by at most one.
pub fn assign_folds(model: &mut StratifierModel, n_folds: u32, seed: u64) -> Result<()> {
    if n_folds == 0 {
        return Err(Error::Config("n_folds must be positive".into()));
    }
    if model.cluster_of_case.is_empty() {
        return Err(Error::Validation("clustering not fitted".into()));
    }
    let mut fold_of_case = BTreeMap::new();
    for cluster in 0..model.k as u32 {
        let mut cases: Vec<&String> = model
            .cluster_of_case
            .iter()
            .filter(|(_, &c)| c == cluster)
            .map(|(id, _)| id)
            .collect();
        cases.sort();
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (cluster as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03));
        cases.shuffle(&mut rng);
        for (i, id) in cases.into_iter().enumerate() {
            fold_of_case.insert(id.clone(), i as u32 % n_folds);
        }
    }
    model.fold_of_case = fold_of_case;
    Ok(())
}

impl StratifierModel {
    /// Standardize + project a feature vector with the stored parameters and
    /// return the nearest centroid (ties to the lowest cluster id).
    pub fn nearest_cluster(&self, features: &FeatureVector) -> Result<u32> {
        let mut row = Vec::with_capacity(self.feature_names.len());
        for name in &self.feature_names {
            match features.get(name) {
                Some(v) => row.push(v),
                None => return Err(Error::MissingFeature(name.clone())),
            }
        }
        let z = self.standardizer.apply(&row);
        let p = self.pca.project(&z);
        let mut best = 0u32;
        let mut best_d = f64::INFINITY;
        for (c, centroid) in self.centroids.iter().enumerate() {
            let d: f64 = centroid
                .iter()
                .zip(p.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best_d = d;
                best = c as u32;
            }
        }
        Ok(best)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<StratifierModel> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One-way ANOVA F statistic per feature against cluster labels; the emitted
/// ranking substitutes for the usual scatter-plot of the two most separating
/// features.
pub fn anova_f_scores(
    features: &[FeatureVector],
    clusters: &BTreeMap<String, u32>,
    k: usize,
) -> Result<Vec<(String, f64)>> {
    let (names, sorted) = feature_matrix(features)?;
    let n = sorted.len();
    if k < 2 || n <= k {
        return Err(Error::Validation(
            "ANOVA needs at least 2 clusters and more cases than clusters".into(),
        ));
    }
    let mut out = Vec::with_capacity(names.len());
    for (j, name) in names.iter().enumerate() {
        let mut group_sum = vec![0.0f64; k];
        let mut group_n = vec![0usize; k];
        let mut grand = 0.0f64;
        for f in &sorted {
            let g = *clusters.get(&f.case_id).ok_or_else(|| {
                Error::Validation(format!("case {} has no cluster", f.case_id))
            })? as usize;
            group_sum[g] += f.values[j];
            group_n[g] += 1;
            grand += f.values[j];
        }
        let grand_mean = grand / n as f64;
        let mut ssb = 0.0;
        for g in 0..k {
            if group_n[g] == 0 {
                continue;
            }
            let gm = group_sum[g] / group_n[g] as f64;
            ssb += group_n[g] as f64 * (gm - grand_mean) * (gm - grand_mean);
        }
        let mut ssw = 0.0;
        for f in &sorted {
            let g = clusters[&f.case_id] as usize;
            let gm = group_sum[g] / group_n[g] as f64;
            ssw += (f.values[j] - gm) * (f.values[j] - gm);
        }
        let df_b = (k - 1) as f64;
        let df_w = (n - k) as f64;
        let f_stat = if ssw > 0.0 {
            (ssb / df_b) / (ssw / df_w)
        } else {
            f64::INFINITY
        };
        out.push((name.clone(), f_stat));
    }
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(out)
}
