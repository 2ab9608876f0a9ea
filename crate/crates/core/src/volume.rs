//! Volumetric data types shared by every pipeline stage.
//!
//! A [`Volume`] is a 3D scalar grid in x-fastest order with voxel spacing in
//! mm and opaque affine metadata that is round-tripped verbatim on save. A
//! [`Mask`] is the binary view used by the metric and post-processing kernels.

use crate::error::{Error, Result};
use crate::nifti::HeaderMeta;
use std::collections::BTreeSet;

/// Semantic kind of a volume. Integer data is never reinterpreted as
/// probabilities; the loader enforces this.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeKind {
    Label,
    Probability,
    Intensity,
}

/// On-disk element type, preserved across load/save round trips.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    Uint8,
    Int16,
    Int32,
    Float32,
}

impl Dtype {
    pub fn nifti_code(self) -> i16 {
        match self {
            Dtype::Uint8 => 2,
            Dtype::Int16 => 4,
            Dtype::Int32 => 8,
            Dtype::Float32 => 16,
        }
    }

    pub fn bitpix(self) -> i16 {
        match self {
            Dtype::Uint8 => 8,
            Dtype::Int16 => 16,
            Dtype::Int32 => 32,
            Dtype::Float32 => 32,
        }
    }

    pub fn from_nifti_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(Dtype::Uint8),
            4 => Ok(Dtype::Int16),
            8 => Ok(Dtype::Int32),
            16 => Ok(Dtype::Float32),
            other => Err(Error::UnsupportedDatatype(other)),
        }
    }
}

#[derive(Debug, Clone)]
pub enum VolumeData {
    /// Label volumes (uint8/int16/int32 on disk).
    Int(Vec<i32>),
    /// Probability or intensity volumes (float32 on disk).
    Float(Vec<f32>),
}

impl VolumeData {
    pub fn len(&self) -> usize {
        match self {
            VolumeData::Int(v) => v.len(),
            VolumeData::Float(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    /// Opaque header metadata (sform/qform and friends), re-emitted verbatim.
    pub meta: HeaderMeta,
    kind: VolumeKind,
    dtype: Dtype,
    data: VolumeData,
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        meta: HeaderMeta,
        kind: VolumeKind,
        dtype: Dtype,
        data: VolumeData,
    ) -> Result<Self> {
        let n = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| Error::Validation("volume dimensions overflow".into()))?;
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Validation(format!("non-positive dims {dims:?}")));
        }
        if data.len() != n {
            return Err(Error::Validation(format!(
                "data length {} does not match dims {:?} (expected {})",
                data.len(),
                dims,
                n
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Validation(format!(
                "non-positive spacing {spacing:?}"
            )));
        }
        match (kind, &data) {
            (VolumeKind::Label, VolumeData::Float(_)) => {
                return Err(Error::Validation(
                    "label volume backed by float data".into(),
                ));
            }
            (VolumeKind::Probability | VolumeKind::Intensity, VolumeData::Int(_)) => {
                return Err(Error::Validation(
                    "real-valued volume backed by integer data".into(),
                ));
            }
            _ => {}
        }
        Ok(Volume {
            dims,
            spacing,
            meta,
            kind,
            dtype,
            data,
        })
    }

    /// Build a label volume with default metadata; the smallest integer dtype
    /// that fits the values is chosen for the on-disk representation.
    pub fn from_labels(dims: [usize; 3], spacing: [f64; 3], labels: Vec<i32>) -> Result<Self> {
        let max = labels.iter().copied().max().unwrap_or(0);
        let min = labels.iter().copied().min().unwrap_or(0);
        if min < 0 {
            return Err(Error::Validation(format!(
                "negative label value {min} not allowed"
            )));
        }
        let dtype = if max <= u8::MAX as i32 {
            Dtype::Uint8
        } else if max <= i16::MAX as i32 {
            Dtype::Int16
        } else {
            Dtype::Int32
        };
        Volume::new(
            dims,
            spacing,
            HeaderMeta::default(),
            VolumeKind::Label,
            dtype,
            VolumeData::Int(labels),
        )
    }

    /// Build a probability volume with default metadata. Values are validated
    /// to lie in [0,1] within 1e-6 and clamped to the unit interval.
    pub fn from_probabilities(
        dims: [usize; 3],
        spacing: [f64; 3],
        mut probs: Vec<f32>,
    ) -> Result<Self> {
        validate_probability_range(&probs)?;
        for p in &mut probs {
            *p = p.clamp(0.0, 1.0);
        }
        Volume::new(
            dims,
            spacing,
            HeaderMeta::default(),
            VolumeKind::Probability,
            Dtype::Float32,
            VolumeData::Float(probs),
        )
    }

    pub fn from_intensity(dims: [usize; 3], spacing: [f64; 3], values: Vec<f32>) -> Result<Self> {
        Volume::new(
            dims,
            spacing,
            HeaderMeta::default(),
            VolumeKind::Intensity,
            Dtype::Float32,
            VolumeData::Float(values),
        )
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &VolumeData {
        &self.data
    }

    /// Integer labels; panics if called on a real-valued volume (construction
    /// guarantees label volumes are integer-backed).
    pub fn labels(&self) -> &[i32] {
        match &self.data {
            VolumeData::Int(v) => v,
            VolumeData::Float(_) => panic!("labels() called on real-valued volume"),
        }
    }

    pub fn labels_mut(&mut self) -> &mut [i32] {
        match &mut self.data {
            VolumeData::Int(v) => v,
            VolumeData::Float(_) => panic!("labels_mut() called on real-valued volume"),
        }
    }

    pub fn floats(&self) -> &[f32] {
        match &self.data {
            VolumeData::Float(v) => v,
            VolumeData::Int(_) => panic!("floats() called on integer volume"),
        }
    }

    /// Check every voxel against the allowed label codes (plus background 0).
    /// Corrupt inputs must not silently propagate into rank optimization.
    pub fn validate_label_codes(&self, allowed: &BTreeSet<i32>) -> Result<()> {
        let labels = self.labels();
        for (i, &v) in labels.iter().enumerate() {
            if v != 0 && !allowed.contains(&v) {
                return Err(Error::Validation(format!(
                    "label value {v} at linear index {i} is not declared by the task"
                )));
            }
        }
        Ok(())
    }

    /// Linear index for (x, y, z), x fastest.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn same_grid(&self, other: &Volume) -> bool {
        self.dims == other.dims && spacing_close(self.spacing, other.spacing, SPACING_TOL_MM)
    }
}

fn validate_probability_range(values: &[f32]) -> Result<()> {
    for (i, &p) in values.iter().enumerate() {
        if !p.is_finite() || p < -1e-6 || p > 1.0 + 1e-6 {
            return Err(Error::Validation(format!(
                "probability value {p} at linear index {i} outside [0,1]"
            )));
        }
    }
    Ok(())
}

pub(crate) fn check_probability_values(values: &[f32]) -> Result<()> {
    validate_probability_range(values)
}

/// Spacing tolerance used by geometry consistency checks (mm).
pub const SPACING_TOL_MM: f64 = 1e-4;

fn spacing_close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
    a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= tol)
}

/// Binary mask sharing a volume's grid. The data layout matches `Volume`
/// (x fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<bool>,
}

impl Mask {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<bool>) -> Self {
        assert_eq!(data.len(), dims[0] * dims[1] * dims[2]);
        Mask {
            dims,
            spacing,
            data,
        }
    }

    pub fn empty(dims: [usize; 3], spacing: [f64; 3]) -> Self {
        Mask {
            dims,
            spacing,
            data: vec![false; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: bool) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn same_dims(&self, other: &Mask) -> bool {
        self.dims == other.dims
    }

    /// Convert to a 0/1 label volume (e.g. for saving a mask to disk).
    pub fn to_label_volume(&self) -> Volume {
        let labels: Vec<i32> = self.data.iter().map(|&b| i32::from(b)).collect();
        Volume::from_labels(self.dims, self.spacing, labels)
            .expect("mask dims are valid by construction")
    }
}

/// Outcome of a per-case geometry consistency check.
#[derive(Debug, Clone)]
pub struct GeometryReport {
    pub consistent: bool,
    pub issues: Vec<String>,
}

/// Report whether all volumes share dims exactly and spacing within
/// [`SPACING_TOL_MM`]. Report-only: downstream stages require
/// `consistent == true` but this never fails.
pub fn check_geometry(volumes: &[&Volume]) -> GeometryReport {
    let mut issues = Vec::new();
    if volumes.is_empty() {
        return GeometryReport {
            consistent: true,
            issues,
        };
    }
    let first = volumes[0];
    for (i, v) in volumes.iter().enumerate().skip(1) {
        for axis in 0..3 {
            if v.dims()[axis] != first.dims()[axis] {
                issues.push(format!(
                    "volume {} dims differ from volume 0 on axis {} ({} vs {})",
                    i,
                    axis,
                    v.dims()[axis],
                    first.dims()[axis]
                ));
            }
            let ds = (v.spacing()[axis] - first.spacing()[axis]).abs();
            if ds > SPACING_TOL_MM {
                issues.push(format!(
                    "volume {} spacing differs from volume 0 on axis {} ({} vs {}, |delta| {:.6} mm)",
                    i,
                    axis,
                    v.spacing()[axis],
                    first.spacing()[axis],
                    ds
                ));
            }
        }
    }
    GeometryReport {
        consistent: issues.is_empty(),
        issues,
    }
}
