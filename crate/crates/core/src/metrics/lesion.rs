//! Lesion-wise metric protocol: dilation-based matching of predicted
//! components to reference lesions, per-lesion scoring, and false-positive
//! penalties.

use super::components::{connected_components, dilate_mask, ComponentLabels, Connectivity};
use super::overlap::{boundary_nsd, overlap_dice};
use crate::error::{Error, Result};
use crate::volume::Mask;
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LesionMetric {
    Dice,
    Nsd,
}

/// Assignment of predicted components to reference lesions.
#[derive(Debug, Clone)]
pub struct LesionMatching {
    pub ref_lesions: Vec<u32>,
    /// ref lesion id -> predicted component ids claimed by it
    pub matched_pred: BTreeMap<u32, BTreeSet<u32>>,
    /// predicted components intersecting no dilated reference lesion
    pub unmatched_pred: BTreeSet<u32>,
    pub dilation_radius_voxels: usize,
}

/// Match predicted components to reference lesions: a predicted component is
/// claimed by a lesion iff it intersects that lesion's Chebyshev dilation;
/// components touching several dilations go to the largest intersection
/// (ties to the lower lesion id).
pub fn match_lesions(
    ref_mask: &Mask,
    pred_mask: &Mask,
    connectivity: Connectivity,
    dilation_radius: usize,
) -> Result<LesionMatching> {
    let (matching, _, _) = match_lesions_with(ref_mask, pred_mask, connectivity, dilation_radius)?;
    Ok(matching)
}

/// Like [`match_lesions`] but also returns both component labelings so
/// callers can score lesions without relabeling.
pub fn match_lesions_with(
    ref_mask: &Mask,
    pred_mask: &Mask,
    connectivity: Connectivity,
    dilation_radius: usize,
) -> Result<(LesionMatching, ComponentLabels, ComponentLabels)> {
    if !ref_mask.same_dims(pred_mask) {
        return Err(Error::Geometry(format!(
            "mask dims differ: {:?} vs {:?}",
            ref_mask.dims(),
            pred_mask.dims()
        )));
    }
    let ref_cc = connected_components(ref_mask, connectivity);
    let pred_cc = connected_components(pred_mask, connectivity);

    // intersection voxel counts with (dilated lesion, raw lesion):
    // (pred component, ref lesion) -> (dilated count, raw count)
    let mut tally: BTreeMap<(u32, u32), (usize, usize)> = BTreeMap::new();
    let dims = ref_mask.dims();
    for lesion in 1..=ref_cc.n_components as u32 {
        let dilated = dilate_component(&ref_cc, lesion, dims, ref_mask.spacing(), dilation_radius);
        for (i, &inside) in dilated.data().iter().enumerate() {
            if inside && pred_cc.labels[i] != 0 {
                let e = tally.entry((pred_cc.labels[i], lesion)).or_insert((0, 0));
                e.0 += 1;
                if ref_cc.labels[i] == lesion {
                    e.1 += 1;
                }
            }
        }
    }

    let mut matched_pred: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    let mut claimed: BTreeSet<u32> = BTreeSet::new();
    for pred in 1..=pred_cc.n_components as u32 {
        let mut best: Option<(usize, usize, u32)> = None;
        for (&(p, lesion), &(dilated, raw)) in tally.range((pred, 0)..=(pred, u32::MAX)) {
            debug_assert_eq!(p, pred);
            // largest dilated intersection wins; ties fall back to the
            // largest undilated intersection (keeps perfect predictions
            // exact for adjacent lesions), then to the lower lesion id,
            // which the ascending range order gives us for free
            let better = match best {
                None => true,
                Some((d, r, _)) => dilated > d || (dilated == d && raw > r),
            };
            if better {
                best = Some((dilated, raw, lesion));
            }
        }
        if let Some((_, _, lesion)) = best {
            matched_pred.entry(lesion).or_default().insert(pred);
            claimed.insert(pred);
        }
    }
    let unmatched_pred: BTreeSet<u32> = (1..=pred_cc.n_components as u32)
        .filter(|p| !claimed.contains(p))
        .collect();

    let matching = LesionMatching {
        ref_lesions: (1..=ref_cc.n_components as u32).collect(),
        matched_pred,
        unmatched_pred,
        dilation_radius_voxels: dilation_radius,
    };
    Ok((matching, ref_cc, pred_cc))
}

/// Dilate one component on its bounding box (expanded by the radius); exact
/// and much cheaper than a full-grid dilation when lesions are small.
fn dilate_component(
    cc: &ComponentLabels,
    id: u32,
    dims: [usize; 3],
    spacing: [f64; 3],
    radius: usize,
) -> Mask {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for (i, &l) in cc.labels.iter().enumerate() {
        if l != id {
            continue;
        }
        let c = [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])];
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    let mut full = Mask::empty(dims, spacing);
    if lo[0] == usize::MAX {
        return full;
    }
    for a in 0..3 {
        lo[a] = lo[a].saturating_sub(radius);
        hi[a] = (hi[a] + radius).min(dims[a] - 1);
    }
    let cdims = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
    let mut crop = Mask::empty(cdims, spacing);
    for z in 0..cdims[2] {
        for y in 0..cdims[1] {
            for x in 0..cdims[0] {
                let src = (x + lo[0]) + dims[0] * ((y + lo[1]) + dims[1] * (z + lo[2]));
                if cc.labels[src] == id {
                    crop.set(x, y, z, true);
                }
            }
        }
    }
    let dilated = dilate_mask(&crop, radius);
    for z in 0..cdims[2] {
        for y in 0..cdims[1] {
            for x in 0..cdims[0] {
                if dilated.get(x, y, z) {
                    full.set(x + lo[0], y + lo[1], z + lo[2], true);
                }
            }
        }
    }
    full
}

pub struct LesionParams {
    pub connectivity: Connectivity,
    pub dilation_radius: usize,
    pub tau_mm: f64,
    /// Reference lesions smaller than this many voxels are excluded from
    /// scoring (and predicted components claimed by them are dropped too).
    /// Off by default.
    pub min_lesion_voxels: Option<usize>,
}

impl Default for LesionParams {
    fn default() -> Self {
        LesionParams {
            connectivity: Connectivity::TwentySix,
            dilation_radius: 3,
            tau_mm: 1.0,
            min_lesion_voxels: None,
        }
    }
}

/// Lesion-wise score: mean over per-lesion scores plus one zero per
/// false-positive component. Empty-reference conventions: both empty -> 1.0,
/// reference empty with predictions -> 0.0.
pub fn lesion_wise_metric(
    ref_mask: &Mask,
    pred_mask: &Mask,
    metric: LesionMetric,
    params: &LesionParams,
) -> Result<f64> {
    let scores = lesion_wise_scores(ref_mask, pred_mask, &[metric], params)?;
    Ok(scores[0])
}

/// Compute several lesion-wise metrics from a single matching pass.
pub fn lesion_wise_scores(
    ref_mask: &Mask,
    pred_mask: &Mask,
    metrics: &[LesionMetric],
    params: &LesionParams,
) -> Result<Vec<f64>> {
    let (matching, ref_cc, pred_cc) = match_lesions_with(
        ref_mask,
        pred_mask,
        params.connectivity,
        params.dilation_radius,
    )?;

    let mut kept_lesions: Vec<u32> = matching.ref_lesions.clone();
    let mut dropped: BTreeSet<u32> = BTreeSet::new();
    if let Some(min) = params.min_lesion_voxels {
        kept_lesions.retain(|&l| {
            let keep = ref_cc.voxel_counts[(l - 1) as usize] >= min;
            if !keep {
                dropped.insert(l);
            }
            keep
        });
    }
    let unmatched: Vec<u32> = matching.unmatched_pred.iter().copied().collect();

    let spacing = ref_mask.spacing();
    let dims = ref_mask.dims();
    let n_scored = kept_lesions.len() + unmatched.len();
    if n_scored == 0 {
        // no reference lesions and no false positives
        return Ok(vec![1.0; metrics.len()]);
    }

    let mut sums = vec![0.0f64; metrics.len()];
    for &lesion in &kept_lesions {
        let lesion_mask = ref_cc.component_mask(lesion, spacing);
        let mut union = Mask::empty(dims, spacing);
        if let Some(preds) = matching.matched_pred.get(&lesion) {
            for (i, &pl) in pred_cc.labels.iter().enumerate() {
                if pl != 0 && preds.contains(&pl) {
                    union.data_mut()[i] = true;
                }
            }
        }
        for (mi, metric) in metrics.iter().enumerate() {
            let s = match metric {
                LesionMetric::Dice => overlap_dice(&lesion_mask, &union)?,
                LesionMetric::Nsd => boundary_nsd(&lesion_mask, &union, spacing, params.tau_mm)?,
            };
            sums[mi] += s;
        }
    }
    // every unmatched predicted component is a false positive scoring 0
    Ok(sums.into_iter().map(|s| s / n_scored as f64).collect())
}
