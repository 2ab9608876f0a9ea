//! Standardization and PCA by eigendecomposition of the covariance matrix.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues in descending order with matching eigenvector rows. Rotations
/// run until the off-diagonal norm falls below 1e-10 of the Frobenius norm.
pub fn jacobi_eigh(matrix: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = matrix.len();
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    let mut v = vec![vec![0.0f64; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let frob: f64 = a
        .iter()
        .flat_map(|r| r.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    let tol = 1e-10 * frob.max(1e-300);

    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum::<f64>()
            .sqrt();
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() <= tol / (n as f64) {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vp = row[p];
                    let vq = row[q];
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap());
    let eigvals: Vec<f64> = order.iter().map(|&i| a[i][i]).collect();
    let mut eigvecs: Vec<Vec<f64>> = order
        .iter()
        .map(|&col| (0..n).map(|row| v[row][col]).collect())
        .collect();
    // deterministic sign: the largest-magnitude entry is positive
    for vec in &mut eigvecs {
        let mut idx = 0;
        for (i, x) in vec.iter().enumerate() {
            if x.abs() > vec[idx].abs() {
                idx = i;
            }
        }
        if vec[idx] < 0.0 {
            for x in vec.iter_mut() {
                *x = -*x;
            }
        }
    }
    (eigvals, eigvecs)
}

/// Per-feature z-scoring. Zero-variance features are dropped (indices in
/// `kept` refer to the original feature order).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub kept: Vec<usize>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<(Standardizer, Vec<usize>)> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::Validation(
                "standardization needs at least 2 cases".into(),
            ));
        }
        let d = rows[0].len();
        let mut means = vec![0.0f64; d];
        for row in rows {
            for (m, x) in means.iter_mut().zip(row.iter()) {
                *m += x;
            }
        }
        for m in &mut means {
            *m /= n as f64;
        }
        let mut vars = vec![0.0f64; d];
        for row in rows {
            for ((v, x), m) in vars.iter_mut().zip(row.iter()).zip(means.iter()) {
                *v += (x - m) * (x - m);
            }
        }
        let mut kept = Vec::new();
        let mut dropped = Vec::new();
        let mut stds = Vec::new();
        let mut kept_means = Vec::new();
        for j in 0..d {
            let std = (vars[j] / n as f64).sqrt();
            if std > 0.0 {
                kept.push(j);
                stds.push(std);
                kept_means.push(means[j]);
            } else {
                dropped.push(j);
            }
        }
        Ok((
            Standardizer {
                means: kept_means,
                stds,
                kept,
            },
            dropped,
        ))
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        self.kept
            .iter()
            .enumerate()
            .map(|(k, &j)| (row[j] - self.means[k]) / self.stds[k])
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaBasis {
    /// Component rows (n_components x d_kept).
    pub components: Vec<Vec<f64>>,
    /// Explained-variance ratios of the kept components.
    pub explained_ratios: Vec<f64>,
    /// Ratios of the full spectrum, for audit.
    pub all_ratios: Vec<f64>,
    pub n_components: usize,
}

impl PcaBasis {
    /// Fit on standardized rows; keep the smallest component count whose
    /// cumulative explained-variance ratio reaches `variance_target`.
    /// Components below numerical rank (1e-10 relative) are never kept, so a
    /// target of 1.0 keeps exactly the covariance rank.
    pub fn fit(rows: &[Vec<f64>], variance_target: f64) -> Result<PcaBasis> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::Validation("PCA needs at least 2 cases".into()));
        }
        if !(0.0 < variance_target && variance_target <= 1.0) {
            return Err(Error::Config(format!(
                "variance target must be in (0, 1], got {variance_target}"
            )));
        }
        let d = rows[0].len();
        let mut cov = vec![vec![0.0f64; d]; d];
        // rows are standardized (mean 0); sample covariance
        for row in rows {
            for i in 0..d {
                for j in i..d {
                    cov[i][j] += row[i] * row[j];
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                cov[i][j] /= (n - 1) as f64;
                cov[j][i] = cov[i][j];
            }
        }
        let (eigvals, eigvecs) = jacobi_eigh(&cov);
        let rank_tol = 1e-10 * eigvals.first().copied().unwrap_or(0.0).max(0.0);
        let positive: Vec<f64> = eigvals.iter().map(|&l| l.max(0.0)).collect();
        let total: f64 = positive.iter().sum();
        if total <= 0.0 {
            return Err(Error::Validation(
                "covariance has no positive spectrum".into(),
            ));
        }
        let all_ratios: Vec<f64> = positive.iter().map(|l| l / total).collect();
        let rank = positive.iter().filter(|&&l| l > rank_tol).count().max(1);
        let mut n_components = rank;
        let mut cum = 0.0;
        for (i, r) in all_ratios.iter().take(rank).enumerate() {
            cum += r;
            if cum >= variance_target - 1e-12 {
                n_components = i + 1;
                break;
            }
        }
        Ok(PcaBasis {
            components: eigvecs[..n_components].to_vec(),
            explained_ratios: all_ratios[..n_components].to_vec(),
            all_ratios,
            n_components,
        })
    }

    pub fn project(&self, row: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(row.iter()).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Reconstruct from the first `m` components (for the monotone
    /// reconstruction-error property).
    pub fn reconstruct(&self, projected: &[f64], m: usize) -> Vec<f64> {
        let d = self.components[0].len();
        let mut out = vec![0.0f64; d];
        for (c, p) in self.components.iter().take(m).zip(projected.iter()) {
            for (o, x) in out.iter_mut().zip(c.iter()) {
                *o += p * x;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn jacobi_recovers_known_spectrum() {
        // diag(3,1) rotated by 45 degrees
        let a = vec![vec![2.0, 1.0], vec![1.0, 2.0]];
        let (vals, vecs) = jacobi_eigh(&a);
        assert!((vals[0] - 3.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
        let inv = 1.0 / 2.0f64.sqrt();
        assert!((vecs[0][0].abs() - inv).abs() < 1e-10);
        assert!((vecs[0][1].abs() - inv).abs() < 1e-10);
    }

    #[test]
    fn jacobi_orthonormal_and_reconstructs() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..10 {
            let d = rng.gen_range(2..8);
            let mut a = vec![vec![0.0f64; d]; d];
            for i in 0..d {
                for j in i..d {
                    let x = rng.gen_range(-1.0..1.0);
                    a[i][j] = x;
                    a[j][i] = x;
                }
            }
            let (vals, vecs) = jacobi_eigh(&a);
            // columns orthonormal
            for i in 0..d {
                for j in 0..d {
                    let dot: f64 = vecs[i].iter().zip(vecs[j].iter()).map(|(x, y)| x * y).sum();
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - expect).abs() < 1e-8, "dot[{i}][{j}] = {dot}");
                }
            }
            // A v = lambda v
            for (lambda, vec) in vals.iter().zip(vecs.iter()) {
                for r in 0..d {
                    let av: f64 = (0..d).map(|c| a[r][c] * vec[c]).sum();
                    assert!((av - lambda * vec[r]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn standardizer_drops_constant_features() {
        let rows = vec![vec![1.0, 5.0, 2.0], vec![2.0, 5.0, 4.0], vec![3.0, 5.0, 9.0]];
        let (s, dropped) = Standardizer::fit(&rows).unwrap();
        assert_eq!(dropped, vec![1]);
        assert_eq!(s.kept, vec![0, 2]);
        // standardized training features have mean 0, std 1
        let z: Vec<Vec<f64>> = rows.iter().map(|r| s.apply(r)).collect();
        for j in 0..2 {
            let mean: f64 = z.iter().map(|r| r[j]).sum::<f64>() / 3.0;
            let var: f64 = z.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-9);
            assert!((var.sqrt() - 1.0).abs() < 1e-9);
        }
    }

    fn standardized_random(rng: &mut StdRng, n: usize, d: usize) -> Vec<Vec<f64>> {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let (s, _) = Standardizer::fit(&rows).unwrap();
        rows.iter().map(|r| s.apply(r)).collect()
    }

    #[test]
    fn pca_keeps_variance_target_and_full_rank_at_one() {
        let mut rng = StdRng::seed_from_u64(42);
        let z = standardized_random(&mut rng, 40, 6);
        let pca = PcaBasis::fit(&z, 0.9).unwrap();
        let kept: f64 = pca.explained_ratios.iter().sum();
        assert!(kept >= 0.9 - 1e-9);
        let full = PcaBasis::fit(&z, 1.0).unwrap();
        assert_eq!(full.n_components, 6, "full-rank data keeps all components");

        // rank-deficient data: duplicate a column
        let zdup: Vec<Vec<f64>> = z
            .iter()
            .map(|r| {
                let mut v = r.clone();
                let first = v[0];
                v.push(first);
                v
            })
            .collect();
        let full2 = PcaBasis::fit(&zdup, 1.0).unwrap();
        assert_eq!(full2.n_components, 6, "duplicated column adds no rank");
    }

    #[test]
    fn pca_reconstruction_error_decreases_monotonically() {
        let mut rng = StdRng::seed_from_u64(9);
        let z = standardized_random(&mut rng, 30, 5);
        let pca = PcaBasis::fit(&z, 1.0).unwrap();
        let mut prev = f64::INFINITY;
        for m in 1..=pca.n_components {
            let err: f64 = z
                .iter()
                .map(|r| {
                    let p = pca.project(r);
                    let rec = pca.reconstruct(&p, m);
                    r.iter()
                        .zip(rec.iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .sum();
            assert!(err <= prev + 1e-9, "m={m}: {err} > {prev}");
            prev = err;
        }
        assert!(prev < 1e-18, "full reconstruction is exact");
    }
}
