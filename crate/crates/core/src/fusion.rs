//! Model fusion: rank-derived ensemble weights, per-voxel probability
//! fusion, argmax decoding, and STAPLE label fusion.

use crate::error::{Error, Result};
use crate::nifti;
use crate::taskspec::TaskSpec;
use crate::volume::{check_geometry, Volume, VolumeKind};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Per-class probability volumes; class 0 is background, followed by one
/// channel per base label in declared order. Channels share one grid.
#[derive(Debug, Clone)]
pub struct ProbStack {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Class codes, background (0) first.
    pub class_codes: Vec<i32>,
    /// One channel per class code, x-fastest.
    pub channels: Vec<Vec<f32>>,
}

impl ProbStack {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        class_codes: Vec<i32>,
        channels: Vec<Vec<f32>>,
    ) -> Result<Self> {
        if class_codes.is_empty() || class_codes[0] != 0 {
            return Err(Error::Validation(
                "probability stack must declare background (code 0) first".into(),
            ));
        }
        if class_codes.len() != channels.len() {
            return Err(Error::Validation(format!(
                "{} class codes but {} channels",
                class_codes.len(),
                channels.len()
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        for (code, ch) in class_codes.iter().zip(channels.iter()) {
            if ch.len() != n {
                return Err(Error::Validation(format!(
                    "channel for class {code} has {} voxels, expected {n}",
                    ch.len()
                )));
            }
        }
        Ok(ProbStack {
            dims,
            spacing,
            class_codes,
            channels,
        })
    }

    pub fn n_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// One-hot expansion of a label volume (enables pure-label candidates in
    /// probability fusion).
    pub fn one_hot(labels: &Volume, spec: &TaskSpec) -> Result<ProbStack> {
        if labels.kind() != VolumeKind::Label {
            return Err(Error::Validation("one_hot requires a label volume".into()));
        }
        let mut codes = vec![0i32];
        codes.extend(spec.base_labels().iter().map(|(_, c)| *c));
        let n = labels.len();
        let mut channels = vec![vec![0.0f32; n]; codes.len()];
        let index_of: BTreeMap<i32, usize> =
            codes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        for (i, &l) in labels.labels().iter().enumerate() {
            let k = index_of.get(&l).ok_or_else(|| {
                Error::Validation(format!("label {l} not declared by task {}", spec.name))
            })?;
            channels[*k][i] = 1.0;
        }
        ProbStack::new(labels.dims(), labels.spacing(), codes, channels)
    }

    /// Renormalize per voxel so classes sum to 1; all-zero voxels become
    /// pure background.
    pub fn renormalize(&mut self) {
        let n = self.n_voxels();
        for i in 0..n {
            let mut sum = 0.0f32;
            for ch in &self.channels {
                sum += ch[i];
            }
            if sum > 1e-12 {
                for ch in &mut self.channels {
                    ch[i] /= sum;
                }
            } else {
                for (k, ch) in self.channels.iter_mut().enumerate() {
                    ch[i] = if k == 0 { 1.0 } else { 0.0 };
                }
            }
        }
    }

    /// Max per-voxel deviation of the class sum from 1.
    pub fn max_sum_deviation(&self) -> f32 {
        let n = self.n_voxels();
        let mut worst = 0.0f32;
        for i in 0..n {
            let sum: f32 = self.channels.iter().map(|ch| ch[i]).sum();
            worst = worst.max((sum - 1.0).abs());
        }
        worst
    }

    fn same_shape(&self, other: &ProbStack) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Geometry(format!(
                "stack dims differ: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        if self.class_codes != other.class_codes {
            return Err(Error::Validation(format!(
                "stack class sets differ: {:?} vs {:?}",
                self.class_codes, other.class_codes
            )));
        }
        Ok(())
    }
}

/// Arithmetic mean of per-fold probability stacks, renormalized per voxel.
pub fn average_folds(stacks: &[ProbStack]) -> Result<ProbStack> {
    let first = stacks
        .first()
        .ok_or_else(|| Error::Validation("average_folds needs at least one stack".into()))?;
    for s in &stacks[1..] {
        first.same_shape(s)?;
    }
    let n = first.n_voxels();
    let k = first.channels.len();
    let mut channels = vec![vec![0.0f32; n]; k];
    for s in stacks {
        for (acc, ch) in channels.iter_mut().zip(s.channels.iter()) {
            for (a, &v) in acc.iter_mut().zip(ch.iter()) {
                *a += v;
            }
        }
    }
    let inv = 1.0 / stacks.len() as f32;
    for acc in &mut channels {
        for a in acc.iter_mut() {
            *a *= inv;
        }
    }
    let mut out = ProbStack::new(first.dims, first.spacing, first.class_codes.clone(), channels)?;
    out.renormalize();
    Ok(out)
}

/// Rank-derived ensemble weights: raw W_i = (sum F - F_i) / sum F, so the
/// raw weights sum to n-1. The normalized form divides by n-1 to sum to 1
/// (matching published weight tables); both are recorded.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleWeights {
    pub raw: BTreeMap<String, f64>,
    pub normalized: BTreeMap<String, f64>,
    pub source_f: BTreeMap<String, f64>,
    pub use_normalized: bool,
}

impl EnsembleWeights {
    pub fn effective(&self) -> &BTreeMap<String, f64> {
        if self.use_normalized {
            &self.normalized
        } else {
            &self.raw
        }
    }
}

pub fn ensemble_weights(f: &BTreeMap<String, f64>, normalize: bool) -> Result<EnsembleWeights> {
    if f.len() < 2 {
        return Err(Error::Validation(
            "ensemble weights need at least 2 candidates".into(),
        ));
    }
    if let Some((id, &bad)) = f.iter().find(|(_, &v)| !(v > 0.0)) {
        return Err(Error::Validation(format!(
            "candidate {id} has non-positive F = {bad}"
        )));
    }
    let total: f64 = f.values().sum();
    let raw: BTreeMap<String, f64> = f
        .iter()
        .map(|(id, &fi)| (id.clone(), (total - fi) / total))
        .collect();
    let raw_sum: f64 = raw.values().sum(); // always n - 1
    let normalized: BTreeMap<String, f64> = raw
        .iter()
        .map(|(id, &w)| (id.clone(), w / raw_sum))
        .collect();
    Ok(EnsembleWeights {
        raw,
        normalized,
        source_f: f.clone(),
        use_normalized: normalize,
    })
}

/// Per-voxel, per-class convex combination of candidate stacks.
pub fn weighted_fuse(
    stacks: &BTreeMap<String, ProbStack>,
    weights: &EnsembleWeights,
) -> Result<ProbStack> {
    if stacks.is_empty() {
        return Err(Error::Validation("no stacks to fuse".into()));
    }
    let w = weights.effective();
    let stack_ids: Vec<&String> = stacks.keys().collect();
    let weight_ids: Vec<&String> = w.keys().collect();
    if stack_ids != weight_ids {
        return Err(Error::Validation(format!(
            "candidate sets differ between stacks ({stack_ids:?}) and weights ({weight_ids:?})"
        )));
    }
    let first = stacks.values().next().unwrap();
    for s in stacks.values() {
        first.same_shape(s)?;
    }
    let n = first.n_voxels();
    let k = first.channels.len();
    let total_w: f64 = w.values().sum();
    let mut channels = vec![vec![0.0f32; n]; k];
    for (id, stack) in stacks {
        let wi = (w[id] / total_w) as f32;
        for (acc, ch) in channels.iter_mut().zip(stack.channels.iter()) {
            for (a, &v) in acc.iter_mut().zip(ch.iter()) {
                *a += wi * v;
            }
        }
    }
    ProbStack::new(first.dims, first.spacing, first.class_codes.clone(), channels)
}

/// Per-voxel argmax decode. Ties go to background when background is among
/// the tied classes, otherwise to the lowest class code.
pub fn decode(stack: &ProbStack, spec: &TaskSpec) -> Result<Volume> {
    let n = stack.n_voxels();
    let mut labels = vec![0i32; n];
    for i in 0..n {
        let mut best_k = 0usize;
        let mut best_p = stack.channels[0][i];
        for (k, ch) in stack.channels.iter().enumerate().skip(1) {
            // strict improvement required: earlier (lower) class codes and
            // background win ties because channel order follows class codes
            if ch[i] > best_p {
                best_p = ch[i];
                best_k = k;
            }
        }
        labels[i] = stack.class_codes[best_k];
    }
    let volume = Volume::from_labels(stack.dims, stack.spacing, labels)?;
    let mut allowed = spec.label_codes();
    allowed.insert(0);
    volume.validate_label_codes(&allowed)?;
    Ok(volume)
}

/// Per-iteration trace of one binary STAPLE run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StapleTrace {
    pub label_code: i32,
    pub iterations: usize,
    pub converged: bool,
    pub log_likelihood: Vec<f64>,
    pub sensitivity: Vec<f64>,
    pub specificity: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StapleParams {
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for StapleParams {
    fn default() -> Self {
        StapleParams {
            max_iterations: 100,
            tolerance: 1e-7,
        }
    }
}

/// STAPLE label fusion, run per base label as a binary EM over rater
/// sensitivities/specificities (init p = q = 0.99999, prior = empirical
/// foreground rate over raters, posterior threshold 0.5). Voxels claimed by
/// several labels go to the highest posterior margin.
pub fn staple_fuse(
    candidates: &[&Volume],
    spec: &TaskSpec,
    params: &StapleParams,
) -> Result<(Volume, Vec<StapleTrace>)> {
    if candidates.len() < 2 {
        return Err(Error::Validation(
            "STAPLE needs at least 2 candidates".into(),
        ));
    }
    let refs: Vec<&Volume> = candidates.to_vec();
    let geo = check_geometry(&refs);
    if !geo.consistent {
        return Err(Error::Geometry(geo.issues.join("; ")));
    }
    let dims = candidates[0].dims();
    let spacing = candidates[0].spacing();
    let n = candidates[0].len();

    let mut labels_out = vec![0i32; n];
    let mut best_margin = vec![f64::NEG_INFINITY; n];
    let mut traces = Vec::new();

    for (_, code) in spec.base_labels() {
        let rater_masks: Vec<Vec<bool>> = candidates
            .iter()
            .map(|v| v.labels().iter().map(|&l| l == *code).collect())
            .collect();
        let any = rater_masks.iter().any(|m| m.iter().any(|&b| b));
        if !any {
            // no rater marked this label anywhere: leave it empty, no EM
            continue;
        }
        let (posterior, trace) = staple_binary(&rater_masks, n, *code, params);
        for i in 0..n {
            if posterior[i] >= 0.5 {
                let margin = posterior[i] - 0.5;
                if margin > best_margin[i] {
                    best_margin[i] = margin;
                    labels_out[i] = *code;
                }
            }
        }
        traces.push(trace);
    }

    let mut volume = Volume::from_labels(dims, spacing, labels_out)?;
    volume.meta = candidates[0].meta.clone();
    Ok((volume, traces))
}

fn staple_binary(
    raters: &[Vec<bool>],
    n: usize,
    code: i32,
    params: &StapleParams,
) -> (Vec<f64>, StapleTrace) {
    let j = raters.len();
    let votes: usize = raters.iter().map(|m| m.iter().filter(|&&b| b).count()).sum();
    // prior: empirical foreground rate across raters
    let gamma = (votes as f64 / (n * j) as f64).clamp(1e-12, 1.0 - 1e-12);
    let mut p = vec![0.99999f64; j];
    let mut q = vec![0.99999f64; j];
    let mut posterior = vec![0.0f64; n];
    let mut lls = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..params.max_iterations {
        iterations += 1;
        // E-step
        let mut ll = 0.0f64;
        for i in 0..n {
            let mut a = gamma;
            let mut b = 1.0 - gamma;
            for (r, rater) in raters.iter().enumerate() {
                if rater[i] {
                    a *= p[r];
                    b *= 1.0 - q[r];
                } else {
                    a *= 1.0 - p[r];
                    b *= q[r];
                }
            }
            posterior[i] = a / (a + b);
            ll += (a + b).ln();
        }
        lls.push(ll);

        // M-step
        let w_sum: f64 = posterior.iter().sum();
        let mut max_delta = 0.0f64;
        for (r, rater) in raters.iter().enumerate() {
            let mut w_pos = 0.0f64;
            let mut w_neg_match = 0.0f64;
            for i in 0..n {
                if rater[i] {
                    w_pos += posterior[i];
                } else {
                    w_neg_match += 1.0 - posterior[i];
                }
            }
            let new_p = if w_sum > 0.0 { w_pos / w_sum } else { p[r] };
            let denom = n as f64 - w_sum;
            let new_q = if denom > 0.0 { w_neg_match / denom } else { q[r] };
            let new_p = new_p.clamp(1e-12, 1.0 - 1e-12);
            let new_q = new_q.clamp(1e-12, 1.0 - 1e-12);
            max_delta = max_delta.max((new_p - p[r]).abs() + (new_q - q[r]).abs());
            p[r] = new_p;
            q[r] = new_q;
        }
        if max_delta < params.tolerance {
            converged = true;
            break;
        }
    }
    // final E-step so the posterior reflects the last parameter update
    for i in 0..n {
        let mut a = gamma;
        let mut b = 1.0 - gamma;
        for (r, rater) in raters.iter().enumerate() {
            if rater[i] {
                a *= p[r];
                b *= 1.0 - q[r];
            } else {
                a *= 1.0 - p[r];
                b *= q[r];
            }
        }
        posterior[i] = a / (a + b);
    }

    (
        posterior,
        StapleTrace {
            label_code: code,
            iterations,
            converged,
            log_likelihood: lls,
            sensitivity: p,
            specificity: q,
        },
    )
}

/// Stack descriptor: one float32 NIfTI per class plus this JSON index.
#[derive(Debug, Serialize, Deserialize)]
struct StackDescriptor {
    classes: Vec<StackClassEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StackClassEntry {
    code: i32,
    path: PathBuf,
}

/// Write a stack as one gzipped float32 NIfTI per class plus a descriptor
/// JSON at `descriptor_path`; per-class files live alongside it.
pub fn save_stack(stack: &ProbStack, descriptor_path: impl AsRef<Path>) -> Result<()> {
    let descriptor_path = descriptor_path.as_ref();
    let dir = descriptor_path.parent().unwrap_or_else(|| Path::new("."));
    let stem = descriptor_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Config("bad stack descriptor path".into()))?;
    let mut entries = Vec::new();
    for (code, channel) in stack.class_codes.iter().zip(stack.channels.iter()) {
        let rel = format!("{stem}_class{code}.nii.gz");
        let v = Volume::from_probabilities(stack.dims, stack.spacing, channel.clone())?;
        nifti::save_volume(&v, dir.join(&rel))?;
        entries.push(StackClassEntry {
            code: *code,
            path: PathBuf::from(rel),
        });
    }
    let text = serde_json::to_string_pretty(&StackDescriptor { classes: entries })?;
    std::fs::write(descriptor_path, text).map_err(|e| Error::io(descriptor_path, e))
}

pub fn load_stack(descriptor_path: impl AsRef<Path>) -> Result<ProbStack> {
    let descriptor_path = descriptor_path.as_ref();
    let dir = descriptor_path.parent().unwrap_or_else(|| Path::new("."));
    let text = std::fs::read_to_string(descriptor_path).map_err(|e| Error::io(descriptor_path, e))?;
    let desc: StackDescriptor = serde_json::from_str(&text)?;
    if desc.classes.is_empty() {
        return Err(Error::Validation(format!(
            "{}: stack descriptor lists no classes",
            descriptor_path.display()
        )));
    }
    let mut codes = Vec::new();
    let mut channels = Vec::new();
    let mut dims = None;
    let mut spacing = [1.0; 3];
    for entry in &desc.classes {
        let path = if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            dir.join(&entry.path)
        };
        let v = nifti::load_volume(&path, VolumeKind::Probability)?;
        match dims {
            None => {
                dims = Some(v.dims());
                spacing = v.spacing();
            }
            Some(d) if d != v.dims() => {
                return Err(Error::Geometry(format!(
                    "stack channel {} has dims {:?}, expected {:?}",
                    path.display(),
                    v.dims(),
                    d
                )));
            }
            _ => {}
        }
        codes.push(entry.code);
        channels.push(v.floats().to_vec());
    }
    ProbStack::new(dims.unwrap(), spacing, codes, channels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskspec::builtin_task;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_stack(rng: &mut StdRng, dims: [usize; 3], codes: &[i32]) -> ProbStack {
        let n = dims[0] * dims[1] * dims[2];
        let mut channels = vec![vec![0.0f32; n]; codes.len()];
        for i in 0..n {
            let raw: Vec<f32> = (0..codes.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
            let sum: f32 = raw.iter().sum();
            for (k, ch) in channels.iter_mut().enumerate() {
                ch[i] = raw[k] / sum;
            }
        }
        ProbStack::new(dims, [1.0; 3], codes.to_vec(), channels).unwrap()
    }

    #[test]
    fn average_single_stack_is_identity() {
        let mut rng = StdRng::seed_from_u64(1);
        let s = random_stack(&mut rng, [4, 4, 4], &[0, 1, 2]);
        let avg = average_folds(std::slice::from_ref(&s)).unwrap();
        for (a, b) in avg.channels.iter().zip(s.channels.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn average_of_two_known_values() {
        let codes = [0, 1];
        let mk = |p1: f32| {
            ProbStack::new(
                [1, 1, 1],
                [1.0; 3],
                codes.to_vec(),
                vec![vec![1.0 - p1], vec![p1]],
            )
            .unwrap()
        };
        let avg = average_folds(&[mk(0.2), mk(0.6)]).unwrap();
        assert!((avg.channels[1][0] - 0.4).abs() < 1e-6);
    }

    #[test]
    fn averaged_sums_stay_normalized() {
        let mut rng = StdRng::seed_from_u64(2);
        let stacks: Vec<ProbStack> = (0..5)
            .map(|_| random_stack(&mut rng, [5, 5, 5], &[0, 1, 2, 3]))
            .collect();
        let avg = average_folds(&stacks).unwrap();
        assert!(avg.max_sum_deviation() < 1e-6);
    }

    #[test]
    fn weight_formula_integers() {
        let f: BTreeMap<String, f64> = [
            ("a".to_string(), 1.0),
            ("b".to_string(), 2.0),
            ("c".to_string(), 3.0),
        ]
        .into();
        let w = ensemble_weights(&f, true).unwrap();
        assert!((w.raw["a"] - 5.0 / 6.0).abs() < 1e-15);
        assert!((w.raw["b"] - 4.0 / 6.0).abs() < 1e-15);
        assert!((w.raw["c"] - 3.0 / 6.0).abs() < 1e-15);
        assert!((w.normalized["a"] - 5.0 / 12.0).abs() < 1e-15);
        assert!((w.normalized["b"] - 4.0 / 12.0).abs() < 1e-15);
        assert!((w.normalized["c"] - 3.0 / 12.0).abs() < 1e-15);
        let raw_sum: f64 = w.raw.values().sum();
        assert!((raw_sum - 2.0).abs() < 1e-15, "raw weights sum to n-1");
        let norm_sum: f64 = w.normalized.values().sum();
        assert!((norm_sum - 1.0).abs() < 1e-15);
    }

    #[test]
    fn equal_f_gives_equal_weights() {
        let f: BTreeMap<String, f64> =
            [("a".into(), 1.0), ("b".into(), 1.0), ("c".into(), 1.0)].into();
        let w = ensemble_weights(&f, true).unwrap();
        for v in w.normalized.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn weight_order_reverses_f_order() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..50 {
            let f: BTreeMap<String, f64> = (0..5)
                .map(|i| (format!("m{i}"), rng.gen_range(1.0..3.0)))
                .collect();
            let w = ensemble_weights(&f, true).unwrap();
            let argmin_f = f
                .iter()
                .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            let argmax_w = w
                .normalized
                .iter()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmin_f, argmax_w);
        }
    }

    #[test]
    fn nonpositive_f_rejected() {
        let f: BTreeMap<String, f64> = [("a".into(), 1.0), ("b".into(), 0.0)].into();
        assert!(ensemble_weights(&f, true).is_err());
    }

    /// Published weight columns: solve for an F triple reproducing each
    /// column and round-trip it through the weight formula.
    #[test]
    fn published_weight_columns_reproducible() {
        let columns = [
            [0.332, 0.331, 0.337], // PED
            [0.323, 0.326, 0.351], // MEN
            [0.336, 0.338, 0.326], // MEN-RT
            [0.295, 0.296, 0.409], // MET
        ];
        for col in columns {
            let sum: f64 = col.iter().sum();
            assert!((sum - 1.0).abs() <= 0.002, "column sums to {sum}");
            // with sum F fixed to 1: w_i = (1 - F_i) / (n - 1) => F_i = 1 - 2 w_i
            let f: BTreeMap<String, f64> = col
                .iter()
                .enumerate()
                .map(|(i, &w)| (format!("m{i}"), 1.0 - 2.0 * w))
                .collect();
            for v in f.values() {
                assert!(*v > 0.0);
            }
            let w = ensemble_weights(&f, true).unwrap();
            for (i, &expect) in col.iter().enumerate() {
                let got = w.normalized[&format!("m{i}")];
                assert!(
                    (got - expect).abs() <= 1e-3,
                    "column {col:?} weight {i}: {got} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn weighted_fuse_identity_and_selection() {
        let mut rng = StdRng::seed_from_u64(5);
        let s = random_stack(&mut rng, [4, 4, 4], &[0, 1]);
        let stacks: BTreeMap<String, ProbStack> =
            [("a".to_string(), s.clone()), ("b".to_string(), s.clone())].into();
        let f: BTreeMap<String, f64> = [("a".into(), 1.3), ("b".into(), 1.7)].into();
        let w = ensemble_weights(&f, true).unwrap();
        let fused = weighted_fuse(&stacks, &w).unwrap();
        for (a, b) in fused.channels.iter().zip(s.channels.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-6, "identical stacks are a fixed point");
            }
        }

        // weights (1, 0) select the first stack
        let t = random_stack(&mut rng, [4, 4, 4], &[0, 1]);
        let stacks2: BTreeMap<String, ProbStack> =
            [("a".to_string(), s.clone()), ("b".to_string(), t)].into();
        let manual = EnsembleWeights {
            raw: [("a".to_string(), 1.0), ("b".to_string(), 0.0)].into(),
            normalized: [("a".to_string(), 1.0), ("b".to_string(), 0.0)].into(),
            source_f: BTreeMap::new(),
            use_normalized: true,
        };
        let fused2 = weighted_fuse(&stacks2, &manual).unwrap();
        for (a, b) in fused2.channels.iter().zip(s.channels.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn weighted_fuse_matches_scalar_oracle() {
        let mut rng = StdRng::seed_from_u64(7);
        let codes = [0, 1, 2];
        let stacks: BTreeMap<String, ProbStack> = (0..3)
            .map(|i| (format!("m{i}"), random_stack(&mut rng, [3, 3, 3], &codes)))
            .collect();
        let f: BTreeMap<String, f64> = [
            ("m0".into(), 0.41),
            ("m1".into(), 0.408),
            ("m2".into(), 0.182),
        ]
        .into();
        let w = ensemble_weights(&f, true).unwrap();
        let fused = weighted_fuse(&stacks, &w).unwrap();
        assert!(fused.max_sum_deviation() < 1e-5);
        for i in [0usize, 13, 26] {
            for k in 0..3 {
                let expect: f64 = stacks
                    .iter()
                    .map(|(id, s)| w.normalized[id] * s.channels[k][i] as f64)
                    .sum();
                assert!((fused.channels[k][i] as f64 - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn decode_one_hot_and_uniform() {
        let spec = builtin_task("MEN").unwrap();
        let mut rng = StdRng::seed_from_u64(11);
        let labels: Vec<i32> = (0..64).map(|_| rng.gen_range(0..=3)).collect();
        let v = Volume::from_labels([4, 4, 4], [1.0; 3], labels.clone()).unwrap();
        let stack = ProbStack::one_hot(&v, &spec).unwrap();
        let back = decode(&stack, &spec).unwrap();
        assert_eq!(back.labels(), &labels[..]);

        // uniform probabilities everywhere -> all background by the tie rule
        let n = 64;
        let uniform = ProbStack::new(
            [4, 4, 4],
            [1.0; 3],
            vec![0, 1, 2, 3],
            vec![vec![0.25f32; n]; 4],
        )
        .unwrap();
        let out = decode(&uniform, &spec).unwrap();
        assert!(out.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn decode_matches_argmax_oracle() {
        let spec = builtin_task("MEN").unwrap();
        let mut rng = StdRng::seed_from_u64(13);
        let s = random_stack(&mut rng, [4, 4, 4], &[0, 1, 2, 3]);
        let out = decode(&s, &spec).unwrap();
        for i in 0..64 {
            let mut best = (0usize, s.channels[0][i]);
            for k in 1..4 {
                if s.channels[k][i] > best.1 {
                    best = (k, s.channels[k][i]);
                }
            }
            assert_eq!(out.labels()[i], s.class_codes[best.0]);
        }
    }

    #[test]
    fn staple_unanimity_fixed_point() {
        let spec = builtin_task("MEN-RT").unwrap();
        let mut labels = vec![0i32; 216];
        for i in 60..100 {
            labels[i] = 1;
        }
        let v = Volume::from_labels([6, 6, 6], [1.0; 3], labels.clone()).unwrap();
        let cands = [&v, &v, &v];
        let (fused, traces) = staple_fuse(&cands, &spec, &StapleParams::default()).unwrap();
        assert_eq!(fused.labels(), &labels[..]);
        assert_eq!(traces.len(), 1);
    }

    #[test]
    fn staple_majority_beats_adversary() {
        let spec = builtin_task("MEN-RT").unwrap();
        let mut labels = vec![0i32; 216];
        for i in 60..100 {
            labels[i] = 1;
        }
        let good = Volume::from_labels([6, 6, 6], [1.0; 3], labels.clone()).unwrap();
        // adversary: exact complement
        let complement: Vec<i32> = labels.iter().map(|&l| 1 - l).collect();
        let bad = Volume::from_labels([6, 6, 6], [1.0; 3], complement).unwrap();
        let cands = [&good, &good, &good, &good, &bad];
        let (fused, _) = staple_fuse(&cands, &spec, &StapleParams::default()).unwrap();
        assert_eq!(fused.labels(), &labels[..], "majority of 4 wins");
    }

    #[test]
    fn staple_log_likelihood_non_decreasing() {
        let spec = builtin_task("MEN-RT").unwrap();
        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..25 {
            let raters: Vec<Volume> = (0..4)
                .map(|_| {
                    let labels: Vec<i32> =
                        (0..216).map(|_| i32::from(rng.gen_bool(0.3))).collect();
                    Volume::from_labels([6, 6, 6], [1.0; 3], labels).unwrap()
                })
                .collect();
            let cands: Vec<&Volume> = raters.iter().collect();
            let (_, traces) = staple_fuse(&cands, &spec, &StapleParams::default()).unwrap();
            for t in &traces {
                for w in t.log_likelihood.windows(2) {
                    assert!(
                        w[1] >= w[0] - 1e-9,
                        "log-likelihood decreased: {} -> {}",
                        w[0],
                        w[1]
                    );
                }
            }
        }
    }

    #[test]
    fn staple_disjoint_single_voxel_pair() {
        // documented tie case: with p = q at init, the first-iteration
        // posterior at the disagreement voxels equals the prior, which is
        // far below 0.5 here, so the fused mask is empty
        let spec = builtin_task("MEN-RT").unwrap();
        let mut a = vec![0i32; 216];
        a[10] = 1;
        let mut b = vec![0i32; 216];
        b[200] = 1;
        let va = Volume::from_labels([6, 6, 6], [1.0; 3], a).unwrap();
        let vb = Volume::from_labels([6, 6, 6], [1.0; 3], b).unwrap();
        // closed-form first E-step with the 2-rater init (p = q = 0.99999):
        // at the two disagreement voxels the class terms cancel to
        //   a + b = p * (1-p)          (posterior exactly at the prior)
        // and at the 214 agreed-background voxels
        //   a + b = gamma * (1-p)^2 + (1-gamma) * p^2
        // so the first log-likelihood is fully determined
        let gamma: f64 = 2.0 / (216.0 * 2.0);
        let p: f64 = 0.99999;
        let expected_ll_1 =
            2.0 * (p * (1.0 - p)).ln() + 214.0 * (gamma * (1.0 - p).powi(2) + (1.0 - gamma) * p * p).ln();
        let masks: Vec<Vec<bool>> = vec![
            va.labels().iter().map(|&l| l == 1).collect(),
            vb.labels().iter().map(|&l| l == 1).collect(),
        ];
        let (_, trace) = super::staple_binary(&masks, 216, 1, &StapleParams::default());
        assert!(
            (trace.log_likelihood[0] - expected_ll_1).abs() < 1e-9,
            "{} vs {}",
            trace.log_likelihood[0],
            expected_ll_1
        );

        // posterior at the prior is far below the 0.5 threshold, so the
        // converged fusion is deterministically empty
        let (fused, _) = staple_fuse(&[&va, &vb], &spec, &StapleParams::default()).unwrap();
        assert!(fused.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn staple_all_empty_label_skips_em() {
        let spec = builtin_task("PED").unwrap();
        let mut labels = vec![0i32; 216];
        labels[5] = 1; // only ET present
        let v = Volume::from_labels([6, 6, 6], [1.0; 3], labels).unwrap();
        let (fused, traces) = staple_fuse(&[&v, &v], &spec, &StapleParams::default()).unwrap();
        assert_eq!(traces.len(), 1, "EM runs only for labels someone marked");
        assert_eq!(fused.labels()[5], 1);
    }

    #[test]
    fn stack_descriptor_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = StdRng::seed_from_u64(23);
        let s = random_stack(&mut rng, [4, 4, 4], &[0, 1, 2]);
        let p = dir.path().join("case1_m1.stack.json");
        save_stack(&s, &p).unwrap();
        let back = load_stack(&p).unwrap();
        assert_eq!(back.class_codes, s.class_codes);
        assert_eq!(back.dims, s.dims);
        for (a, b) in back.channels.iter().zip(s.channels.iter()) {
            assert_eq!(a, b, "float32 channels round-trip bit-exact");
        }
    }

    #[test]
    fn fusing_copies_returns_the_candidate_decode() {
        let spec = builtin_task("MEN").unwrap();
        let mut rng = StdRng::seed_from_u64(29);
        let s = random_stack(&mut rng, [5, 5, 5], &[0, 1, 2, 3]);
        let stacks: BTreeMap<String, ProbStack> = (0..3)
            .map(|i| (format!("m{i}"), s.clone()))
            .collect();
        let f: BTreeMap<String, f64> = (0..3)
            .map(|i| (format!("m{i}"), 1.0 + i as f64 * 0.3))
            .collect();
        let w = ensemble_weights(&f, true).unwrap();
        let fused = weighted_fuse(&stacks, &w).unwrap();
        let a = decode(&fused, &spec).unwrap();
        let b = decode(&s, &spec).unwrap();
        assert_eq!(a.labels(), b.labels());

        // same for STAPLE on labels
        let labels = decode(&s, &spec).unwrap();
        let (fused_staple, _) =
            staple_fuse(&[&labels, &labels, &labels], &spec, &StapleParams::default()).unwrap();
        assert_eq!(fused_staple.labels(), labels.labels());
    }
}
