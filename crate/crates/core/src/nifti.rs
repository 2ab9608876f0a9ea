//! Minimal NIfTI-1 reader and writer.
//!
//! Supports the single-file format (`.nii`, `.nii.gz`), little-endian
//! headers, and the datatype subset {uint8, int16, int32, float32}. The
//! affine (sform/qform) and all header fields this crate does not own are
//! carried opaquely and re-emitted verbatim on save; only dims, datatype,
//! pixdim, vox_offset and the scaling slope/intercept are rewritten.
//! NIfTI-2, DICOM, extensions and non-trivial intensity scaling are
//! rejected rather than guessed at.

use crate::error::{Error, Result};
use crate::volume::{check_probability_values, Dtype, Volume, VolumeData, VolumeKind};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

pub const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC_NIP1: &[u8; 4] = b"n+1\0";
const MAGIC_NI1: &[u8; 4] = b"ni1\0";

/// Raw header template: the full 348 bytes of the source header, kept so the
/// affine and every field we do not interpret round-trip bit-exactly.
#[derive(Debug, Clone)]
pub struct HeaderMeta {
    raw: [u8; HEADER_SIZE],
}

impl Default for HeaderMeta {
    fn default() -> Self {
        let mut raw = [0u8; HEADER_SIZE];
        raw[0..4].copy_from_slice(&348i32.to_le_bytes());
        raw[38] = b'r'; // regular
        // dim defaults get rewritten on save
        raw[344..348].copy_from_slice(MAGIC_NIP1);
        HeaderMeta { raw }
    }
}

impl HeaderMeta {
    pub fn raw(&self) -> &[u8; HEADER_SIZE] {
        &self.raw
    }
}

fn read_i16(buf: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([buf[off], buf[off + 1]])
}

fn read_i32(buf: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

fn read_f32(buf: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

fn read_file_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if is_gzip(&raw) {
        let mut out = Vec::new();
        MultiGzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("gzip decode failed for {}: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct ParsedHeader {
    meta: HeaderMeta,
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: Dtype,
    vox_offset: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<ParsedHeader> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Format(format!(
            "{}: file shorter than a NIfTI-1 header ({} bytes)",
            path.display(),
            bytes.len()
        )));
    }
    let sizeof_hdr = read_i32(bytes, 0);
    if sizeof_hdr != 348 {
        if sizeof_hdr.swap_bytes() == 348 {
            return Err(Error::Format(format!(
                "{}: big-endian NIfTI headers are not supported",
                path.display()
            )));
        }
        return Err(Error::Format(format!(
            "{}: bad sizeof_hdr {} (expected 348; NIfTI-2 and Analyze are not supported)",
            path.display(),
            sizeof_hdr
        )));
    }
    let magic = &bytes[344..348];
    if magic == MAGIC_NI1 {
        return Err(Error::Format(format!(
            "{}: two-file NIfTI (.hdr/.img) is not supported",
            path.display()
        )));
    }
    if magic != MAGIC_NIP1 {
        return Err(Error::Format(format!(
            "{}: bad magic {:?} (expected \"n+1\\0\")",
            path.display(),
            magic
        )));
    }
    let ndim = read_i16(bytes, 40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Format(format!(
            "{}: dim[0] = {} out of range",
            path.display(),
            ndim
        )));
    }
    let mut dims = [1usize; 3];
    for axis in 0..3 {
        let d = if (axis as i16) < ndim {
            read_i16(bytes, 40 + 2 * (axis + 1))
        } else {
            1
        };
        if d < 1 {
            return Err(Error::Format(format!(
                "{}: dim[{}] = {} must be >= 1",
                path.display(),
                axis + 1,
                d
            )));
        }
        dims[axis] = d as usize;
    }
    // Higher dimensions must be trivial: this reader handles 3D scalar grids.
    for axis in 3..ndim as usize {
        let d = read_i16(bytes, 40 + 2 * (axis + 1));
        if d > 1 {
            return Err(Error::Format(format!(
                "{}: {}D volumes are not supported (dim[{}] = {})",
                path.display(),
                ndim,
                axis + 1,
                d
            )));
        }
    }
    let dtype = Dtype::from_nifti_code(read_i16(bytes, 70))?;
    let mut spacing = [1.0f64; 3];
    for axis in 0..3 {
        let p = read_f32(bytes, 76 + 4 * (axis + 1)) as f64;
        if !(p > 0.0) || !p.is_finite() {
            return Err(Error::Format(format!(
                "{}: pixdim[{}] = {} must be positive",
                path.display(),
                axis + 1,
                p
            )));
        }
        spacing[axis] = p;
    }
    let vox_offset_f = read_f32(bytes, 108);
    let vox_offset = vox_offset_f.round() as usize;
    if vox_offset_f < HEADER_SIZE as f32 {
        return Err(Error::Format(format!(
            "{}: vox_offset {} overlaps the header",
            path.display(),
            vox_offset_f
        )));
    }
    let slope = read_f32(bytes, 112);
    let inter = read_f32(bytes, 116);
    if !(slope == 0.0 || slope == 1.0) || inter != 0.0 {
        return Err(Error::Validation(format!(
            "{}: intensity scaling (scl_slope {}, scl_inter {}) is not supported",
            path.display(),
            slope,
            inter
        )));
    }
    let mut raw = [0u8; HEADER_SIZE];
    raw.copy_from_slice(&bytes[..HEADER_SIZE]);
    Ok(ParsedHeader {
        meta: HeaderMeta { raw },
        dims,
        spacing,
        dtype,
        vox_offset,
    })
}

/// Load a NIfTI-1 volume, enforcing the expected semantic kind.
///
/// Label volumes must be stored with an integer datatype; probability
/// volumes must be float32 with values in [0,1] (±1e-6, then clamped).
pub fn load_volume(path: impl AsRef<Path>, expected_kind: VolumeKind) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = read_file_bytes(path)?;
    let hdr = parse_header(&bytes, path)?;
    let n = hdr.dims[0] * hdr.dims[1] * hdr.dims[2];
    let elem = hdr.dtype.bitpix() as usize / 8;
    let need = hdr.vox_offset + n * elem;
    if bytes.len() < need {
        return Err(Error::Format(format!(
            "{}: truncated data section ({} bytes, need {})",
            path.display(),
            bytes.len(),
            need
        )));
    }
    let raw = &bytes[hdr.vox_offset..hdr.vox_offset + n * elem];

    let data = match (expected_kind, hdr.dtype) {
        (VolumeKind::Label, Dtype::Uint8) => {
            VolumeData::Int(raw.iter().map(|&b| b as i32).collect())
        }
        (VolumeKind::Label, Dtype::Int16) => VolumeData::Int(
            raw.chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as i32)
                .collect(),
        ),
        (VolumeKind::Label, Dtype::Int32) => VolumeData::Int(
            raw.chunks_exact(4)
                .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        (VolumeKind::Label, Dtype::Float32) => {
            return Err(Error::Validation(format!(
                "{}: label volume stored as float32; labels must use an integer datatype",
                path.display()
            )));
        }
        (VolumeKind::Probability, Dtype::Float32) => {
            let vals: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            check_probability_values(&vals)?;
            VolumeData::Float(vals.into_iter().map(|p| p.clamp(0.0, 1.0)).collect())
        }
        (VolumeKind::Probability, _) => {
            return Err(Error::Validation(format!(
                "{}: expected a probability volume but the file holds integer data",
                path.display()
            )));
        }
        (VolumeKind::Intensity, Dtype::Float32) => VolumeData::Float(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        (VolumeKind::Intensity, Dtype::Uint8) => {
            VolumeData::Float(raw.iter().map(|&b| b as f32).collect())
        }
        (VolumeKind::Intensity, Dtype::Int16) => VolumeData::Float(
            raw.chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
                .collect(),
        ),
        (VolumeKind::Intensity, Dtype::Int32) => VolumeData::Float(
            raw.chunks_exact(4)
                .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f32)
                .collect(),
        ),
    };

    let effective_dtype = match expected_kind {
        VolumeKind::Intensity => Dtype::Float32,
        _ => hdr.dtype,
    };
    Volume::new(
        hdr.dims,
        hdr.spacing,
        hdr.meta,
        expected_kind,
        effective_dtype,
        data,
    )
}

/// Save any volume as NIfTI-1; gzip-compressed when the path ends in `.gz`.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut header = v.meta.raw().to_vec();
    header[0..4].copy_from_slice(&348i32.to_le_bytes());
    header[40..42].copy_from_slice(&3i16.to_le_bytes());
    for axis in 0..3 {
        let d = v.dims()[axis] as i16;
        header[40 + 2 * (axis + 1)..42 + 2 * (axis + 1)].copy_from_slice(&d.to_le_bytes());
    }
    for axis in 3..7 {
        header[40 + 2 * (axis + 1)..42 + 2 * (axis + 1)].copy_from_slice(&1i16.to_le_bytes());
    }
    header[70..72].copy_from_slice(&v.dtype().nifti_code().to_le_bytes());
    header[72..74].copy_from_slice(&v.dtype().bitpix().to_le_bytes());
    for axis in 0..3 {
        let p = v.spacing()[axis] as f32;
        header[76 + 4 * (axis + 1)..80 + 4 * (axis + 1)].copy_from_slice(&p.to_le_bytes());
    }
    header[108..112].copy_from_slice(&(VOX_OFFSET as f32).to_le_bytes());
    header[112..116].copy_from_slice(&1.0f32.to_le_bytes()); // scl_slope
    header[116..120].copy_from_slice(&0.0f32.to_le_bytes()); // scl_inter
    header[344..348].copy_from_slice(MAGIC_NIP1);

    let mut body = Vec::with_capacity(VOX_OFFSET + v.len() * 4);
    body.extend_from_slice(&header);
    body.extend_from_slice(&[0u8; VOX_OFFSET - HEADER_SIZE]); // no extensions
    match v.data() {
        VolumeData::Int(vals) => match v.dtype() {
            Dtype::Uint8 => {
                for &x in vals {
                    body.push(x as u8);
                }
            }
            Dtype::Int16 => {
                for &x in vals {
                    body.extend_from_slice(&(x as i16).to_le_bytes());
                }
            }
            Dtype::Int32 => {
                for &x in vals {
                    body.extend_from_slice(&x.to_le_bytes());
                }
            }
            Dtype::Float32 => {
                return Err(Error::Validation(
                    "integer volume carries float32 dtype".into(),
                ))
            }
        },
        VolumeData::Float(vals) => {
            for &x in vals {
                body.extend_from_slice(&x.to_le_bytes());
            }
        }
    }

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let gz = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("gz"))
        .unwrap_or(false);
    if gz {
        let mut enc = GzEncoder::new(file, Compression::fast());
        enc.write_all(&body).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?;
    } else {
        let mut f = file;
        f.write_all(&body).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Save a label volume; callers must not feed real-valued data here.
pub fn save_label_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    if v.kind() != VolumeKind::Label {
        return Err(Error::Validation(
            "save_label_volume requires a label volume".into(),
        ));
    }
    save_volume(v, path)
}
