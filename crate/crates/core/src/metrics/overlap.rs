//! Global overlap and surface metrics on binary masks.
//!
//! Surfaces are border voxels (foreground voxels with a 6-neighbor background
//! or volume edge), not extracted meshes; this is simpler, deterministic, and
//! oracle-checkable, but may differ slightly from mesh-based platforms.

use super::distance::{border_voxels, edt_sq_to_seeds, percentile_linear};
use crate::error::{Error, Result};
use crate::volume::Mask;

fn require_same_dims(a: &Mask, b: &Mask) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::Geometry(format!(
            "mask dims differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Dice similarity coefficient 2|A∩B|/(|A|+|B|); both empty -> 1.0.
pub fn overlap_dice(a: &Mask, b: &Mask) -> Result<f64> {
    require_same_dims(a, b)?;
    let mut inter = 0usize;
    let mut na = 0usize;
    let mut nb = 0usize;
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        na += usize::from(x);
        nb += usize::from(y);
        inter += usize::from(x && y);
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Symmetric directed distances between border-voxel sets, in mm.
/// Returns `None` when either mask is empty. The computation is cropped to
/// the joint bounding box, which is exact because all border voxels of both
/// masks lie inside it.
fn surface_distances(a: &Mask, b: &Mask, spacing: [f64; 3]) -> Option<(Vec<f64>, Vec<f64>)> {
    let sa = border_voxels(a);
    let sb = border_voxels(b);
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let dims = a.dims();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for &i in sa.iter().chain(sb.iter()) {
        let c = [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])];
        for axis in 0..3 {
            lo[axis] = lo[axis].min(c[axis]);
            hi[axis] = hi[axis].max(c[axis]);
        }
    }
    let cdims = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
    let crop = |i: usize| -> usize {
        let c = [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])];
        (c[0] - lo[0]) + cdims[0] * ((c[1] - lo[1]) + cdims[1] * (c[2] - lo[2]))
    };
    let sa_c: Vec<usize> = sa.iter().map(|&i| crop(i)).collect();
    let sb_c: Vec<usize> = sb.iter().map(|&i| crop(i)).collect();
    let to_b = edt_sq_to_seeds(&sb_c, cdims, spacing);
    let to_a = edt_sq_to_seeds(&sa_c, cdims, spacing);
    let da: Vec<f64> = sa_c.iter().map(|&i| to_b[i].sqrt()).collect();
    let db: Vec<f64> = sb_c.iter().map(|&i| to_a[i].sqrt()).collect();
    Some((da, db))
}

/// Normalized surface distance at tolerance `tau` mm. Both masks empty -> 1.0,
/// exactly one empty -> 0.0.
pub fn boundary_nsd(a: &Mask, b: &Mask, spacing: [f64; 3], tau: f64) -> Result<f64> {
    require_same_dims(a, b)?;
    if tau <= 0.0 {
        return Err(Error::Validation(format!("tau must be positive, got {tau}")));
    }
    match surface_distances(a, b, spacing) {
        None => {
            let ea = a.is_empty_mask();
            let eb = b.is_empty_mask();
            Ok(if ea && eb { 1.0 } else { 0.0 })
        }
        Some((da, db)) => {
            let hits = da.iter().filter(|&&d| d <= tau).count()
                + db.iter().filter(|&&d| d <= tau).count();
            Ok(hits as f64 / (da.len() + db.len()) as f64)
        }
    }
}

/// 95th percentile (linear interpolation) of the pooled symmetric directed
/// border distances, in mm. Both empty -> `Some(0.0)`; exactly one empty ->
/// `None` (undefined-penalty sentinel).
pub fn boundary_hd95(a: &Mask, b: &Mask, spacing: [f64; 3]) -> Result<Option<f64>> {
    require_same_dims(a, b)?;
    match surface_distances(a, b, spacing) {
        None => {
            let ea = a.is_empty_mask();
            let eb = b.is_empty_mask();
            Ok(if ea && eb { Some(0.0) } else { None })
        }
        Some((mut da, db)) => {
            da.extend(db);
            da.sort_by(|x, y| x.partial_cmp(y).unwrap());
            Ok(Some(percentile_linear(&da, 95.0)))
        }
    }
}

#[cfg(test)]
pub(crate) mod oracles {
    //! All-pairs oracles shared by unit tests and the acceptance suite.
    use super::super::distance::voxel_mm;
    use crate::volume::Mask;

    pub fn border_set(mask: &Mask) -> Vec<usize> {
        // independent border definition: per-voxel 6-neighborhood scan
        let dims = mask.dims();
        let mut out = Vec::new();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    if !mask.get(x, y, z) {
                        continue;
                    }
                    let mut exposed = false;
                    for (dx, dy, dz) in
                        [(1i64, 0i64, 0i64), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                    {
                        let (qx, qy, qz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                        if qx < 0
                            || qy < 0
                            || qz < 0
                            || qx >= dims[0] as i64
                            || qy >= dims[1] as i64
                            || qz >= dims[2] as i64
                        {
                            exposed = true;
                        } else if !mask.get(qx as usize, qy as usize, qz as usize) {
                            exposed = true;
                        }
                    }
                    if exposed {
                        out.push(mask.index(x, y, z));
                    }
                }
            }
        }
        out
    }

    fn directed(sa: &[usize], sb: &[usize], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
        sa.iter()
            .map(|&i| {
                let p = voxel_mm(i, dims, spacing);
                sb.iter()
                    .map(|&j| {
                        let q = voxel_mm(j, dims, spacing);
                        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
                            .sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    pub fn nsd_oracle(a: &Mask, b: &Mask, spacing: [f64; 3], tau: f64) -> f64 {
        let sa = border_set(a);
        let sb = border_set(b);
        if sa.is_empty() || sb.is_empty() {
            return if sa.is_empty() && sb.is_empty() { 1.0 } else { 0.0 };
        }
        let da = directed(&sa, &sb, a.dims(), spacing);
        let db = directed(&sb, &sa, a.dims(), spacing);
        let hits =
            da.iter().filter(|&&d| d <= tau).count() + db.iter().filter(|&&d| d <= tau).count();
        hits as f64 / (da.len() + db.len()) as f64
    }

    pub fn hd95_oracle(a: &Mask, b: &Mask, spacing: [f64; 3]) -> Option<f64> {
        let sa = border_set(a);
        let sb = border_set(b);
        if sa.is_empty() || sb.is_empty() {
            return if sa.is_empty() && sb.is_empty() { Some(0.0) } else { None };
        }
        let mut all = directed(&sa, &sb, a.dims(), spacing);
        all.extend(directed(&sb, &sa, a.dims(), spacing));
        all.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let rank = 0.95 * (all.len() - 1) as f64;
        let lo = rank.floor() as usize;
        let hi = rank.ceil() as usize;
        Some(if lo == hi {
            all[lo]
        } else {
            all[lo] * (1.0 - (rank - lo as f64)) + all[hi] * (rank - lo as f64)
        })
    }

    pub fn dice_oracle(a: &Mask, b: &Mask) -> f64 {
        let mut inter = 0usize;
        let (mut na, mut nb) = (0usize, 0usize);
        for i in 0..a.data().len() {
            if a.data()[i] {
                na += 1;
            }
            if b.data()[i] {
                nb += 1;
            }
            if a.data()[i] && b.data()[i] {
                inter += 1;
            }
        }
        if na + nb == 0 {
            1.0
        } else {
            2.0 * inter as f64 / (na + nb) as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::oracles::*;
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_mask(rng: &mut StdRng, dims: [usize; 3], p: f64, spacing: [f64; 3]) -> Mask {
        let n = dims[0] * dims[1] * dims[2];
        let data = (0..n).map(|_| rng.gen_bool(p)).collect();
        Mask::new(dims, spacing, data)
    }

    fn cube(dims: [usize; 3], lo: [usize; 3], hi: [usize; 3], spacing: [f64; 3]) -> Mask {
        let mut m = Mask::empty(dims, spacing);
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    m.set(x, y, z, true);
                }
            }
        }
        m
    }

    #[test]
    fn dice_identical_disjoint_shifted() {
        let s = [1.0; 3];
        let a = cube([6, 6, 6], [1, 1, 1], [3, 3, 3], s);
        assert_eq!(overlap_dice(&a, &a).unwrap(), 1.0);
        let b = cube([6, 6, 6], [4, 4, 4], [6, 6, 6], s);
        assert_eq!(overlap_dice(&a, &b).unwrap(), 0.0);
        // 2x2x2 cube shifted by one voxel along x: overlap 4, sizes 8 each
        let c = cube([6, 6, 6], [2, 1, 1], [4, 3, 3], s);
        assert_eq!(overlap_dice(&a, &c).unwrap(), 0.5);
        // both empty -> 1.0
        let e = Mask::empty([6, 6, 6], s);
        assert_eq!(overlap_dice(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn dice_dim_mismatch_is_error() {
        let a = Mask::empty([3, 3, 3], [1.0; 3]);
        let b = Mask::empty([3, 3, 4], [1.0; 3]);
        assert!(overlap_dice(&a, &b).is_err());
    }

    #[test]
    fn nsd_identical_is_one_and_empty_conventions() {
        let s = [1.0; 3];
        let a = cube([6, 6, 6], [1, 1, 1], [4, 4, 4], s);
        assert_eq!(boundary_nsd(&a, &a, s, 1.0).unwrap(), 1.0);
        let e = Mask::empty([6, 6, 6], s);
        assert_eq!(boundary_nsd(&e, &e, s, 1.0).unwrap(), 1.0);
        assert_eq!(boundary_nsd(&a, &e, s, 1.0).unwrap(), 0.0);
        assert_eq!(boundary_nsd(&e, &a, s, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn nsd_offset_matches_oracle_and_shrinks_with_spacing() {
        let s1 = [1.0; 3];
        let a = cube([8, 8, 8], [1, 1, 1], [4, 4, 4], s1);
        let b = cube([8, 8, 8], [2, 1, 1], [5, 4, 4], s1);
        let got = boundary_nsd(&a, &b, s1, 1.0).unwrap();
        let expect = nsd_oracle(&a, &b, s1, 1.0);
        assert!((got - expect).abs() < 1e-9);

        let s3 = [3.0; 3];
        let a3 = cube([8, 8, 8], [1, 1, 1], [4, 4, 4], s3);
        let b3 = cube([8, 8, 8], [2, 1, 1], [5, 4, 4], s3);
        let got3 = boundary_nsd(&a3, &b3, s3, 1.0).unwrap();
        let expect3 = nsd_oracle(&a3, &b3, s3, 1.0);
        assert!((got3 - expect3).abs() < 1e-9);
        assert!(
            got3 < got,
            "same voxel offset at 3 mm spacing must score lower: {got3} vs {got}"
        );
    }

    #[test]
    fn hd95_two_points_and_empties() {
        let s = [1.0; 3];
        let mut a = Mask::empty([8, 8, 8], s);
        a.set(1, 1, 1, true);
        let mut b = Mask::empty([8, 8, 8], s);
        b.set(5, 1, 1, true);
        assert_eq!(boundary_hd95(&a, &b, s).unwrap(), Some(4.0));
        assert_eq!(boundary_hd95(&a, &a, s).unwrap(), Some(0.0));
        let e = Mask::empty([8, 8, 8], s);
        assert_eq!(boundary_hd95(&e, &e, s).unwrap(), Some(0.0));
        assert_eq!(boundary_hd95(&a, &e, s).unwrap(), None);
    }

    #[test]
    fn surface_metrics_match_oracles_on_random_pairs() {
        let mut rng = StdRng::seed_from_u64(77);
        for _ in 0..60 {
            let dims = [
                rng.gen_range(4..=12usize),
                rng.gen_range(4..=12usize),
                rng.gen_range(4..=12usize),
            ];
            let spacing = [
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.5..3.0),
            ];
            let a = random_mask(&mut rng, dims, 0.25, spacing);
            let b = random_mask(&mut rng, dims, 0.25, spacing);
            let nsd = boundary_nsd(&a, &b, spacing, 1.0).unwrap();
            assert!((nsd - nsd_oracle(&a, &b, spacing, 1.0)).abs() < 1e-9);
            let hd = boundary_hd95(&a, &b, spacing).unwrap();
            match (hd, hd95_oracle(&a, &b, spacing)) {
                (Some(x), Some(y)) => assert!((x - y).abs() < 1e-9, "{x} vs {y}"),
                (None, None) => {}
                other => panic!("sentinel mismatch: {other:?}"),
            }
            // symmetry
            let nsd_rev = boundary_nsd(&b, &a, spacing, 1.0).unwrap();
            assert!((nsd - nsd_rev).abs() < 1e-12);
        }
    }

    #[test]
    fn hd95_scales_linearly_with_spacing() {
        let mut rng = StdRng::seed_from_u64(5);
        let a = random_mask(&mut rng, [9, 9, 9], 0.2, [1.0; 3]);
        let b = random_mask(&mut rng, [9, 9, 9], 0.2, [1.0; 3]);
        let h1 = boundary_hd95(&a, &b, [1.0; 3]).unwrap().unwrap();
        let h2 = boundary_hd95(&a, &b, [2.0; 3]).unwrap().unwrap();
        assert!((h2 - 2.0 * h1).abs() < 1e-9);
    }
}
