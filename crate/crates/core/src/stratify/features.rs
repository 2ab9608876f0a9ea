//! Radiomic feature extraction: shape descriptors of the whole-tumor mask
//! and first-order intensity statistics, plus a CSV escape hatch for feature
//! sets computed by external toolkits (texture families in particular).

use crate::error::{Error, Result};
use crate::metrics::distance::percentile_linear;
use crate::stratify::pca::jacobi_eigh;
use crate::volume::{Mask, Volume};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub case_id: String,
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.values[i])
    }
}

pub const SHAPE_FEATURE_NAMES: [&str; 14] = [
    "shape_voxel_volume",
    "shape_mesh_volume",
    "shape_surface_area",
    "shape_surface_volume_ratio",
    "shape_sphericity",
    "shape_max_3d_diameter",
    "shape_max_2d_diameter_slice",
    "shape_max_2d_diameter_column",
    "shape_max_2d_diameter_row",
    "shape_major_axis_length",
    "shape_minor_axis_length",
    "shape_least_axis_length",
    "shape_elongation",
    "shape_flatness",
];

pub const FIRST_ORDER_FEATURE_NAMES: [&str; 18] = [
    "energy",
    "total_energy",
    "entropy",
    "minimum",
    "p10",
    "p90",
    "maximum",
    "mean",
    "median",
    "iqr",
    "range",
    "mad",
    "rmad",
    "rms",
    "skewness",
    "kurtosis",
    "variance",
    "uniformity",
];

/// The 14 shape descriptors of the whole-tumor mask, in mm units.
///
/// Estimator choices (fixed here, recorded for reproducibility): the surface
/// is the set of exposed voxel faces, so the mesh volume integrates to
/// exactly the voxel volume; diameters use border-voxel centers; axis
/// lengths come from the eigenvalues of the population covariance of
/// foreground voxel centers (length = 4*sqrt(lambda)).
pub fn extract_shape_features(wt_mask: &Mask, spacing: [f64; 3]) -> Result<FeatureVector> {
    if wt_mask.is_empty_mask() {
        return Err(Error::Validation(
            "shape features require a nonempty tumor mask".into(),
        ));
    }
    let dims = wt_mask.dims();
    let (sx, sy, sz) = (spacing[0], spacing[1], spacing[2]);
    let voxel_vol = sx * sy * sz;
    let count = wt_mask.count();
    let voxel_volume = count as f64 * voxel_vol;

    // surface area + mesh volume via the divergence theorem over exposed
    // voxel faces; the face integral reproduces the voxel volume, which the
    // tests exploit as a cross-check
    let face_areas = [sy * sz, sx * sz, sx * sy];
    let mut surface_area = 0.0;
    let mut mesh_volume = 0.0;
    let data = wt_mask.data();
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if !wt_mask.get(x, y, z) {
                    continue;
                }
                let center = [x as f64 * sx, y as f64 * sy, z as f64 * sz];
                let half = [sx / 2.0, sy / 2.0, sz / 2.0];
                let coords = [x, y, z];
                for axis in 0..3 {
                    for dir in [-1i64, 1i64] {
                        let q = coords[axis] as i64 + dir;
                        let exposed = q < 0 || q >= dims[axis] as i64 || {
                            let mut c = coords;
                            c[axis] = q as usize;
                            !data[c[0] + dims[0] * (c[1] + dims[1] * c[2])]
                        };
                        if exposed {
                            surface_area += face_areas[axis];
                            let plane = center[axis] + dir as f64 * half[axis];
                            mesh_volume += dir as f64 * plane * face_areas[axis] / 3.0;
                        }
                    }
                }
            }
        }
    }

    let border: Vec<[f64; 3]> = crate::metrics::distance::border_voxels(wt_mask)
        .into_iter()
        .map(|i| {
            let x = i % dims[0];
            let y = (i / dims[0]) % dims[1];
            let z = i / (dims[0] * dims[1]);
            [x as f64 * sx, y as f64 * sy, z as f64 * sz]
        })
        .collect();

    let max_3d = max_pairwise(&border, None);
    let max_slice = max_pairwise(&border, Some(2));
    let max_column = max_pairwise(&border, Some(0));
    let max_row = max_pairwise(&border, Some(1));

    // inertia axes from all foreground voxel centers
    let mut centers = Vec::with_capacity(count);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if wt_mask.get(x, y, z) {
                    centers.push([x as f64 * sx, y as f64 * sy, z as f64 * sz]);
                }
            }
        }
    }
    let mean = [
        centers.iter().map(|c| c[0]).sum::<f64>() / count as f64,
        centers.iter().map(|c| c[1]).sum::<f64>() / count as f64,
        centers.iter().map(|c| c[2]).sum::<f64>() / count as f64,
    ];
    let mut cov = vec![vec![0.0f64; 3]; 3];
    for c in &centers {
        for a in 0..3 {
            for b in 0..3 {
                cov[a][b] += (c[a] - mean[a]) * (c[b] - mean[b]);
            }
        }
    }
    for row in &mut cov {
        for v in row.iter_mut() {
            *v /= count as f64;
        }
    }
    let (eigvals, _) = jacobi_eigh(&cov);
    let l1 = eigvals[0].max(0.0);
    let l2 = eigvals[1].max(0.0);
    let l3 = eigvals[2].max(0.0);
    let major = 4.0 * l1.sqrt();
    let minor = 4.0 * l2.sqrt();
    let least = 4.0 * l3.sqrt();
    // a point mass has no axes; treat it as perfectly round
    let (elongation, flatness) = if l1 > 0.0 {
        ((l2 / l1).sqrt(), (l3 / l1).sqrt())
    } else {
        (1.0, 1.0)
    };

    let sphericity = (36.0 * std::f64::consts::PI * mesh_volume * mesh_volume).cbrt() / surface_area;

    let values = vec![
        voxel_volume,
        mesh_volume,
        surface_area,
        surface_area / mesh_volume,
        sphericity,
        max_3d,
        max_slice,
        max_column,
        max_row,
        major,
        minor,
        least,
        elongation,
        flatness,
    ];
    Ok(FeatureVector {
        case_id: String::new(),
        names: SHAPE_FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        values,
    })
}

/// Max pairwise distance between points; `fixed_axis` restricts pairs to a
/// shared coordinate on that axis and measures in-plane distance.
fn max_pairwise(points: &[[f64; 3]], fixed_axis: Option<usize>) -> f64 {
    let mut best = 0.0f64;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            let (p, q) = (&points[i], &points[j]);
            if let Some(axis) = fixed_axis {
                if (p[axis] - q[axis]).abs() > 1e-12 {
                    continue;
                }
            }
            let d2: f64 = (0..3)
                .filter(|a| Some(*a) != fixed_axis)
                .map(|a| (p[a] - q[a]) * (p[a] - q[a]))
                .sum();
            best = best.max(d2);
        }
    }
    best.sqrt()
}

/// First-order intensity statistics over the masked voxels (18 values).
/// Returns warnings for degenerate fallbacks (constant region).
pub fn extract_first_order_features(
    image: &Volume,
    wt_mask: &Mask,
    bin_width: f64,
) -> Result<(FeatureVector, Vec<String>)> {
    if wt_mask.is_empty_mask() {
        return Err(Error::Validation(
            "first-order features require a nonempty mask".into(),
        ));
    }
    if image.dims() != wt_mask.dims() {
        return Err(Error::Geometry(format!(
            "image dims {:?} differ from mask dims {:?}",
            image.dims(),
            wt_mask.dims()
        )));
    }
    if bin_width <= 0.0 {
        return Err(Error::Config(format!("bin_width must be positive, got {bin_width}")));
    }
    let values: Vec<f64> = image
        .floats()
        .iter()
        .zip(wt_mask.data().iter())
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v as f64)
        .collect();
    let n = values.len() as f64;
    let mut warnings = Vec::new();

    let mut sorted = values.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let minimum = sorted[0];
    let maximum = sorted[sorted.len() - 1];
    let p10 = percentile_linear(&sorted, 10.0);
    let p25 = percentile_linear(&sorted, 25.0);
    let median = percentile_linear(&sorted, 50.0);
    let p75 = percentile_linear(&sorted, 75.0);
    let p90 = percentile_linear(&sorted, 90.0);

    let mean = values.iter().sum::<f64>() / n;
    let energy: f64 = values.iter().map(|v| v * v).sum();
    let spacing = image.spacing();
    let total_energy = spacing[0] * spacing[1] * spacing[2] * energy;
    let rms = (energy / n).sqrt();
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    let (skewness, kurtosis) = if m2 > 0.0 {
        (m3 / m2.powf(1.5), m4 / (m2 * m2))
    } else {
        warnings.push(
            "constant intensity region: skewness and kurtosis fall back to 0".to_string(),
        );
        (0.0, 0.0)
    };
    let mad = values.iter().map(|v| (v - mean).abs()).sum::<f64>() / n;
    let robust: Vec<f64> = values
        .iter()
        .copied()
        .filter(|&v| v >= p10 && v <= p90)
        .collect();
    let rmad = if robust.is_empty() {
        0.0
    } else {
        let rmean = robust.iter().sum::<f64>() / robust.len() as f64;
        robust.iter().map(|v| (v - rmean).abs()).sum::<f64>() / robust.len() as f64
    };

    // discretized histogram: bins of fixed width anchored below the minimum
    let low = minimum - minimum.rem_euclid(bin_width);
    let mut histogram: BTreeMap<i64, usize> = BTreeMap::new();
    for &v in &values {
        let bin = ((v - low) / bin_width).floor() as i64;
        *histogram.entry(bin).or_insert(0) += 1;
    }
    let mut entropy = 0.0;
    let mut uniformity = 0.0;
    for &c in histogram.values() {
        let p = c as f64 / n;
        entropy -= p * p.log2();
        uniformity += p * p;
    }

    let values = vec![
        energy,
        total_energy,
        entropy,
        minimum,
        p10,
        p90,
        maximum,
        mean,
        median,
        p75 - p25,
        maximum - minimum,
        mad,
        rmad,
        rms,
        skewness,
        kurtosis,
        m2,
        uniformity,
    ];
    Ok((
        FeatureVector {
            case_id: String::new(),
            names: FIRST_ORDER_FEATURE_NAMES
                .iter()
                .map(|s| s.to_string())
                .collect(),
            values,
        },
        warnings,
    ))
}

/// Read externally computed features: a CSV with a `case_id` column followed
/// by numeric columns. NaN or empty cells are hard errors naming the case
/// and column.
pub fn ingest_features_csv(path: impl AsRef<Path>) -> Result<Vec<FeatureVector>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(Error::Csv)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().next() != Some("case_id") {
        return Err(Error::Format(format!(
            "{}: first column must be case_id",
            path.display()
        )));
    }
    let names: Vec<String> = headers.iter().skip(1).map(|s| s.to_string()).collect();
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record?;
        if record.len() != names.len() + 1 {
            return Err(Error::Format(format!(
                "{}: row has {} columns, header has {}",
                path.display(),
                record.len(),
                names.len() + 1
            )));
        }
        let case_id = record[0].to_string();
        let mut values = Vec::with_capacity(names.len());
        for (name, cell) in names.iter().zip(record.iter().skip(1)) {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::Validation(format!(
                    "{}: case {case_id}, column {name}: bad value {cell:?}",
                    path.display()
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Validation(format!(
                    "{}: case {case_id}, column {name}: non-finite value",
                    path.display()
                )));
            }
            values.push(v);
        }
        out.push(FeatureVector {
            case_id,
            names: names.clone(),
            values,
        });
    }
    Ok(out)
}

/// Write feature vectors as a features.csv (case_id + one column per name).
pub fn write_features_csv(features: &[FeatureVector], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut wtr = csv::Writer::from_path(path).map_err(Error::Csv)?;
    let names = match features.first() {
        Some(f) => f.names.clone(),
        None => Vec::new(),
    };
    let mut header = vec!["case_id".to_string()];
    header.extend(names.iter().cloned());
    wtr.write_record(&header)?;
    for f in features {
        if f.names != names {
            return Err(Error::Validation(format!(
                "case {} has a different feature name set",
                f.case_id
            )));
        }
        let mut row = vec![f.case_id.clone()];
        row.extend(f.values.iter().map(|v| format!("{v}")));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Merge internally computed features with an external set by case id.
/// External values win on name collisions (each collision is flagged).
pub fn merge_features(
    internal: &[FeatureVector],
    external: &[FeatureVector],
) -> Result<(Vec<FeatureVector>, Vec<String>)> {
    let ext_by_case: BTreeMap<&str, &FeatureVector> =
        external.iter().map(|f| (f.case_id.as_str(), f)).collect();
    let mut collisions = Vec::new();
    let mut out = Vec::with_capacity(internal.len());
    for f in internal {
        let ext = ext_by_case.get(f.case_id.as_str()).ok_or_else(|| {
            Error::Validation(format!(
                "external features missing case {}",
                f.case_id
            ))
        })?;
        let mut names = Vec::new();
        let mut values = Vec::new();
        for (n, v) in f.names.iter().zip(f.values.iter()) {
            if let Some(ev) = ext.get(n) {
                if collisions.len() < 32 {
                    collisions.push(format!(
                        "case {}: feature {n} supplied both internally and externally; external wins",
                        f.case_id
                    ));
                }
                names.push(n.clone());
                values.push(ev);
            } else {
                names.push(n.clone());
                values.push(*v);
            }
        }
        for (n, v) in ext.names.iter().zip(ext.values.iter()) {
            if !f.names.contains(n) {
                names.push(n.clone());
                values.push(*v);
            }
        }
        out.push(FeatureVector {
            case_id: f.case_id.clone(),
            names,
            values,
        });
    }
    Ok((out, collisions))
}
