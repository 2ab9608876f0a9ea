//! Exact Euclidean distance machinery for surface metrics.
//!
//! Distances are measured between voxel centers in mm, honoring anisotropic
//! spacing. The transform is the separable lower-envelope algorithm on
//! squared distances, which is exact for point seeds, so surface metrics can
//! be validated against an all-pairs oracle to 1e-9.

use crate::volume::Mask;

/// Border voxels: foreground voxels with a 6-neighbor background voxel or a
/// volume edge. Returned as linear indices in ascending order.
pub fn border_voxels(mask: &Mask) -> Vec<usize> {
    let dims = mask.dims();
    let (nx, ny, nz) = (dims[0], dims[1], dims[2]);
    let data = mask.data();
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                if !data[i] {
                    continue;
                }
                let at_edge = x == 0 || y == 0 || z == 0 || x == nx - 1 || y == ny - 1 || z == nz - 1;
                let exposed = at_edge
                    || !data[i - 1]
                    || !data[i + 1]
                    || !data[i - nx]
                    || !data[i + nx]
                    || !data[i - nx * ny]
                    || !data[i + nx * ny];
                if exposed {
                    out.push(i);
                }
            }
        }
    }
    out
}

const INF: f64 = f64::INFINITY;

/// Squared Euclidean distance from every voxel center to the nearest seed
/// voxel center. `seeds` are linear indices; `spacing` is mm per voxel.
pub fn edt_sq_to_seeds(seeds: &[usize], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let n = dims[0] * dims[1] * dims[2];
    let mut dist = vec![INF; n];
    for &s in seeds {
        dist[s] = 0.0;
    }
    if seeds.is_empty() {
        return dist;
    }
    for axis in 0..3 {
        edt_pass(&mut dist, dims, axis, spacing[axis]);
    }
    dist
}

/// One separable pass: replaces f with the 1D lower envelope
/// min_j (f[j] + ((i-j)*s)^2) along the given axis.
fn edt_pass(dist: &mut [f64], dims: [usize; 3], axis: usize, s: f64) {
    let (nx, ny, _nz) = (dims[0], dims[1], dims[2]);
    let stride = match axis {
        0 => 1,
        1 => nx,
        _ => nx * ny,
    };
    let len = dims[axis];
    let (outer1, outer2) = match axis {
        0 => (dims[1], dims[2]),
        1 => (dims[0], dims[2]),
        _ => (dims[0], dims[1]),
    };
    let mut f = vec![0.0f64; len];
    let mut d = vec![0.0f64; len];
    let mut v = vec![0usize; len];
    let mut zbounds = vec![0.0f64; len + 1];
    for b in 0..outer2 {
        for a in 0..outer1 {
            let base = match axis {
                0 => nx * (a + ny * b),
                1 => a + nx * ny * b,
                _ => a + nx * b,
            };
            for (i, fi) in f.iter_mut().enumerate() {
                *fi = dist[base + i * stride];
            }
            lower_envelope(&f, s, &mut d, &mut v, &mut zbounds);
            for (i, di) in d.iter().enumerate() {
                dist[base + i * stride] = *di;
            }
        }
    }
}

fn lower_envelope(f: &[f64], s: f64, d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let s2 = s * s;
    let mut k = 0usize;
    v[0] = 0;
    z[0] = -INF;
    z[1] = INF;
    for q in 1..n {
        if f[q] == INF {
            continue;
        }
        loop {
            let p = v[k];
            if f[p] == INF {
                // parabola at p is infinitely high: drop it
                if k == 0 {
                    v[0] = q;
                    z[0] = -INF;
                    z[1] = INF;
                    break;
                }
                k -= 1;
                continue;
            }
            // intersection of parabolas rooted at p and q (grid coordinates)
            let sx = ((f[q] - f[p]) / s2 + (q * q - p * p) as f64) / (2.0 * (q - p) as f64);
            if sx <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[0] = -INF;
                    z[1] = INF;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = sx;
                z[k + 1] = INF;
                break;
            }
        }
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        if f[p] == INF {
            d[q] = INF;
        } else {
            let dq = (q as f64 - p as f64) * s;
            d[q] = dq * dq + f[p];
        }
    }
}

/// Percentile with linear interpolation over a sorted slice
/// (rank = p/100 * (n-1)).
pub fn percentile_linear(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let rank = (p / 100.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = rank - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}

#[cfg(test)]
pub(crate) fn voxel_mm(i: usize, dims: [usize; 3], spacing: [f64; 3]) -> [f64; 3] {
    let x = i % dims[0];
    let y = (i / dims[0]) % dims[1];
    let z = i / (dims[0] * dims[1]);
    [
        x as f64 * spacing[0],
        y as f64 * spacing[1],
        z as f64 * spacing[2],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn oracle_dist_sq(i: usize, seeds: &[usize], dims: [usize; 3], spacing: [f64; 3]) -> f64 {
        let p = voxel_mm(i, dims, spacing);
        seeds
            .iter()
            .map(|&s| {
                let q = voxel_mm(s, dims, spacing);
                (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)
            })
            .fold(INF, f64::min)
    }

    #[test]
    fn edt_matches_pairwise_oracle_random_anisotropic() {
        let mut rng = StdRng::seed_from_u64(1234);
        for _ in 0..50 {
            let dims = [
                rng.gen_range(3..=10usize),
                rng.gen_range(3..=10usize),
                rng.gen_range(3..=10usize),
            ];
            let spacing = [
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.5..3.0),
            ];
            let n = dims[0] * dims[1] * dims[2];
            let n_seeds = rng.gen_range(1..=8);
            let seeds: Vec<usize> = (0..n_seeds).map(|_| rng.gen_range(0..n)).collect();
            let edt = edt_sq_to_seeds(&seeds, dims, spacing);
            for i in 0..n {
                let expect = oracle_dist_sq(i, &seeds, dims, spacing);
                assert!(
                    (edt[i].sqrt() - expect.sqrt()).abs() < 1e-9,
                    "voxel {i}: {} vs {}",
                    edt[i].sqrt(),
                    expect.sqrt()
                );
            }
        }
    }

    #[test]
    fn edt_no_seeds_is_infinite() {
        let d = edt_sq_to_seeds(&[], [3, 3, 3], [1.0; 3]);
        assert!(d.iter().all(|&x| x == INF));
    }

    #[test]
    fn border_voxels_of_solid_cube() {
        let mut m = Mask::empty([6, 6, 6], [1.0; 3]);
        for z in 1..5 {
            for y in 1..5 {
                for x in 1..5 {
                    m.set(x, y, z, true);
                }
            }
        }
        // 4^3 cube: interior is 2^3, border is 64 - 8 = 56
        assert_eq!(border_voxels(&m).len(), 56);
        // volume-edge voxels count as border
        let mut full = Mask::empty([3, 3, 3], [1.0; 3]);
        for i in 0..27 {
            full.data_mut()[i] = true;
        }
        assert_eq!(border_voxels(&full).len(), 27 - 1);
    }

    #[test]
    fn percentile_linear_interpolates() {
        let xs: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert!((percentile_linear(&xs, 50.0) - 50.5).abs() < 1e-12);
        assert!((percentile_linear(&xs, 95.0) - 95.05).abs() < 1e-12);
        assert_eq!(percentile_linear(&xs, 0.0), 1.0);
        assert_eq!(percentile_linear(&xs, 100.0), 100.0);
        assert_eq!(percentile_linear(&[4.0], 95.0), 4.0);
    }
}
