//! Single-file NIfTI-1 (`.nii`, `.nii.gz`) reader and writer.
//!
//! Scalar volumes are 3-D. Vector fields use the 5th dimension with size 3
//! (`dim = [5, nx, ny, nz, 1, 3, 1, 1]`), components stored as consecutive
//! planes. Displacement fields are written with intent code 1006
//! (`NIFTI_INTENT_DISPVECT`) and hold displacements, not positions, in mm
//! along the grid axes: voxel `x` maps to `x + u(x) / spacing`.
//!
//! Headers are written the way nibabel writes them for a fresh image:
//! `sform_code = 2` carrying the affine, `qform_code = 0`, `vox_offset = 352`
//! and `scl_slope = 1`, `scl_inter = 0`. Header fields are float32, so the
//! spacing and affine round-trip at float32 precision.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::image::{Grid, Mask, VectorVolume, Volume};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

pub const INTENT_NONE: i16 = 0;
pub const INTENT_DISPLACEMENT: i16 = 1006;
pub const INTENT_VECTOR: i16 = 1007;

#[derive(Debug, thiserror::Error)]
pub enum NiftiError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: not a single-file NIfTI-1 image (magic {magic:?})", path.display())]
    BadMagic { path: PathBuf, magic: Vec<u8> },

    #[error("{}: unsupported datatype code {code}", path.display())]
    UnsupportedDatatype { path: PathBuf, code: i16 },

    #[error("{}: unsupported dimensions: {reason}", path.display())]
    UnsupportedDims { path: PathBuf, reason: String },

    #[error("{}: truncated file: need {expected} bytes, found {found}", path.display())]
    Truncated { path: PathBuf, expected: usize, found: usize },

    #[error("{}: invalid header: {reason}", path.display())]
    InvalidHeader { path: PathBuf, reason: String },

    #[error("{}: invalid data: {reason}", path.display())]
    InvalidData { path: PathBuf, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Datatype {
    Uint8,
    Int16,
    Int32,
    Float32,
    Float64,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::Uint8 => 2,
            Datatype::Int16 => 4,
            Datatype::Int32 => 8,
            Datatype::Float32 => 16,
            Datatype::Float64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Option<Self> {
        Some(match code {
            2 => Datatype::Uint8,
            4 => Datatype::Int16,
            8 => Datatype::Int32,
            16 => Datatype::Float32,
            64 => Datatype::Float64,
            _ => return None,
        })
    }

    pub fn size(self) -> usize {
        match self {
            Datatype::Uint8 => 1,
            Datatype::Int16 => 2,
            Datatype::Int32 | Datatype::Float32 => 4,
            Datatype::Float64 => 8,
        }
    }

    fn range(self) -> Option<(f64, f64)> {
        match self {
            Datatype::Uint8 => Some((0.0, u8::MAX as f64)),
            Datatype::Int16 => Some((i16::MIN as f64, i16::MAX as f64)),
            Datatype::Int32 => Some((i32::MIN as f64, i32::MAX as f64)),
            Datatype::Float32 | Datatype::Float64 => None,
        }
    }
}

impl std::str::FromStr for Datatype {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "uint8" => Datatype::Uint8,
            "int16" => Datatype::Int16,
            "int32" => Datatype::Int32,
            "float32" => Datatype::Float32,
            "float64" => Datatype::Float64,
            _ => return Err(format!("unknown datatype `{s}` (uint8, int16, int32, float32, float64)")),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeFileHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub affine: [[f64; 4]; 4],
    pub datatype: Datatype,
    /// Raw header values; a slope of 0 or NaN means "unscaled".
    pub scl_slope: f64,
    pub scl_inter: f64,
    pub vector: bool,
    pub intent_code: i16,
    pub big_endian: bool,
}

impl VolumeFileHeader {
    fn scaling(&self) -> (f64, f64) {
        if self.scl_slope == 0.0 || !self.scl_slope.is_finite() {
            (1.0, 0.0)
        } else {
            let inter = if self.scl_inter.is_finite() { self.scl_inter } else { 0.0 };
            (self.scl_slope, inter)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    Scalar(Volume),
    Vector(VectorVolume),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NiftiVolume {
    pub header: VolumeFileHeader,
    pub data: VolumeData,
}

struct Fields<'a> {
    bytes: &'a [u8],
    big: bool,
}

impl Fields<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = &self.bytes[off..off + 2];
        if self.big { BigEndian::read_i16(b) } else { LittleEndian::read_i16(b) }
    }

    fn f32(&self, off: usize) -> f64 {
        let b = &self.bytes[off..off + 4];
        (if self.big { BigEndian::read_f32(b) } else { LittleEndian::read_f32(b) }) as f64
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, NiftiError> {
    let io_err = |source| NiftiError::Io { path: path.to_path_buf(), source };
    let raw = fs::read(path).map_err(io_err)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io_err)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<(VolumeFileHeader, usize), NiftiError> {
    let p = || path.to_path_buf();
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::Truncated { path: p(), expected: HEADER_SIZE, found: bytes.len() });
    }
    let big = if LittleEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        false
    } else if BigEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        true
    } else {
        return Err(NiftiError::BadMagic { path: p(), magic: bytes[0..4].to_vec() });
    };
    if &bytes[344..348] != MAGIC {
        return Err(NiftiError::BadMagic { path: p(), magic: bytes[344..348].to_vec() });
    }
    let f = Fields { bytes, big };
    let dim: Vec<i16> = (0..8).map(|k| f.i16(40 + 2 * k)).collect();
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(NiftiError::UnsupportedDims { path: p(), reason: format!("dim[0] = {ndim}") });
    }
    let ndim = ndim as usize;
    let size = |k: usize| if k <= ndim { dim[k] } else { 1 };
    if (1..=ndim).any(|k| dim[k] < 1) {
        return Err(NiftiError::UnsupportedDims { path: p(), reason: format!("non-positive size in {dim:?}") });
    }
    let vector = ndim == 5 && size(4) == 1 && size(5) == 3;
    if !vector && (4..=ndim).any(|k| size(k) != 1) {
        return Err(NiftiError::UnsupportedDims {
            path: p(),
            reason: format!("expected a 3-D volume or a 3-vector field in dim 5, got {:?}", &dim[..=ndim]),
        });
    }
    let dims = [size(1) as usize, size(2) as usize, size(3) as usize];
    let code = f.i16(70);
    let datatype = Datatype::from_code(code).ok_or_else(|| NiftiError::UnsupportedDatatype { path: p(), code })?;

    let pixdim: Vec<f64> = (0..8).map(|k| f.f32(76 + 4 * k)).collect();
    let mut spacing = [1.0; 3];
    for a in 0..3 {
        if a < ndim {
            let s = pixdim[a + 1].abs();
            if !(s.is_finite() && s > 0.0) {
                return Err(NiftiError::InvalidHeader { path: p(), reason: format!("pixdim[{}] = {}", a + 1, pixdim[a + 1]) });
            }
            spacing[a] = s;
        }
    }
    let vox_offset = f.f32(108);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f64) {
        return Err(NiftiError::InvalidHeader { path: p(), reason: format!("vox_offset = {vox_offset}") });
    }
    let qform_code = f.i16(252);
    let sform_code = f.i16(254);
    let affine = if sform_code > 0 {
        let mut m = [[0.0, 0.0, 0.0, 1.0]; 4];
        m[3] = [0.0, 0.0, 0.0, 1.0];
        for (r, row) in m.iter_mut().take(3).enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = f.f32(280 + 16 * r + 4 * c);
            }
        }
        m
    } else if qform_code > 0 {
        let quat = [f.f32(256), f.f32(260), f.f32(264)];
        let offset = [f.f32(268), f.f32(272), f.f32(276)];
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        qform_affine(quat, offset, spacing, qfac)
    } else {
        let mut m = [[0.0; 4]; 4];
        for a in 0..3 {
            m[a][a] = spacing[a];
        }
        m[3][3] = 1.0;
        m
    };
    let header = VolumeFileHeader {
        dims,
        spacing,
        affine,
        datatype,
        scl_slope: f.f32(112),
        scl_inter: f.f32(116),
        vector,
        intent_code: f.i16(68),
        big_endian: big,
    };
    Ok((header, vox_offset as usize))
}

fn qform_affine(quat: [f64; 3], offset: [f64; 3], spacing: [f64; 3], qfac: f64) -> [[f64; 4]; 4] {
    let [b, c, d] = quat;
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let r = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ];
    let scale = [spacing[0], spacing[1], spacing[2] * qfac];
    let mut m = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = r[i][j] * scale[j];
        }
        m[i][3] = offset[i];
    }
    m[3][3] = 1.0;
    m
}

/// Header only; the data section is not validated.
pub fn read_header(path: impl AsRef<Path>) -> Result<VolumeFileHeader, NiftiError> {
    let path = path.as_ref();
    Ok(parse_header(path, &read_bytes(path)?)?.0)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<NiftiVolume, NiftiError> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let (header, offset) = parse_header(path, &bytes)?;
    let invalid = |reason: String| NiftiError::InvalidData { path: path.to_path_buf(), reason };
    let grid = Grid::with_affine(header.dims, header.spacing, header.affine)
        .map_err(|e| NiftiError::InvalidHeader { path: path.to_path_buf(), reason: e.to_string() })?;
    let ncomp = if header.vector { 3 } else { 1 };
    let count = grid.len() * ncomp;
    let size = header.datatype.size();
    let expected = offset + count * size;
    if bytes.len() < expected {
        return Err(NiftiError::Truncated { path: path.to_path_buf(), expected, found: bytes.len() });
    }
    let (slope, inter) = header.scaling();
    let raw = &bytes[offset..expected];
    let values: Vec<f64> = (0..count)
        .map(|k| decode(&raw[k * size..(k + 1) * size], header.datatype, header.big_endian) * slope + inter)
        .collect();
    if let Some(k) = values.iter().position(|v| !v.is_finite()) {
        return Err(invalid(format!("non-finite value at element {k}")));
    }
    let data = if header.vector {
        let n = grid.len();
        let field = (0..n).map(|i| [values[i], values[n + i], values[2 * n + i]]).collect();
        VolumeData::Vector(VectorVolume::new(grid, field).map_err(|e| invalid(e.to_string()))?)
    } else {
        VolumeData::Scalar(Volume::new(grid, values).map_err(|e| invalid(e.to_string()))?)
    };
    Ok(NiftiVolume { header, data })
}

fn decode(b: &[u8], datatype: Datatype, big: bool) -> f64 {
    macro_rules! rd {
        ($f:ident) => {
            if big { BigEndian::$f(b) as f64 } else { LittleEndian::$f(b) as f64 }
        };
    }
    match datatype {
        Datatype::Uint8 => b[0] as f64,
        Datatype::Int16 => rd!(read_i16),
        Datatype::Int32 => rd!(read_i32),
        Datatype::Float32 => rd!(read_f32),
        Datatype::Float64 => rd!(read_f64),
    }
}

pub fn read_scalar(path: impl AsRef<Path>) -> Result<Volume, NiftiError> {
    let path = path.as_ref();
    match read_volume(path)?.data {
        VolumeData::Scalar(v) => Ok(v),
        VolumeData::Vector(_) => Err(NiftiError::UnsupportedDims {
            path: path.to_path_buf(),
            reason: "expected a scalar volume, found a vector field".into(),
        }),
    }
}

pub fn read_vector(path: impl AsRef<Path>) -> Result<VectorVolume, NiftiError> {
    let path = path.as_ref();
    match read_volume(path)?.data {
        VolumeData::Vector(v) => Ok(v),
        VolumeData::Scalar(_) => Err(NiftiError::UnsupportedDims {
            path: path.to_path_buf(),
            reason: "expected a vector field (dim 5 of size 3), found a scalar volume".into(),
        }),
    }
}

/// Nonzero voxels are inside the mask.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask, NiftiError> {
    let v = read_scalar(path)?;
    let data = v.data().iter().map(|&x| x != 0.0).collect();
    Ok(Mask::new(v.grid().clone(), data).expect("mask matches its grid"))
}

fn header_bytes(grid: &Grid, datatype: Datatype, vector: bool, intent_code: i16) -> Vec<u8> {
    let mut h = vec![0u8; DATA_OFFSET];
    LittleEndian::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    let [nx, ny, nz] = grid.dims();
    let dim: [i16; 8] = if vector {
        [5, nx as i16, ny as i16, nz as i16, 1, 3, 1, 1]
    } else {
        [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1]
    };
    for (k, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * k..], *d);
    }
    LittleEndian::write_i16(&mut h[68..], intent_code);
    LittleEndian::write_i16(&mut h[70..], datatype.code());
    LittleEndian::write_i16(&mut h[72..], 8 * datatype.size() as i16);
    let s = grid.spacing();
    let pixdim = [1.0, s[0], s[1], s[2], 1.0, 1.0, 1.0, 1.0];
    for (k, v) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * k..], *v as f32);
    }
    LittleEndian::write_f32(&mut h[108..], DATA_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..], 1.0);
    LittleEndian::write_i16(&mut h[254..], 2);
    let m = grid.affine();
    let quat = affine_quaternion(&m);
    for k in 0..3 {
        LittleEndian::write_f32(&mut h[256 + 4 * k..], quat[k] as f32);
        LittleEndian::write_f32(&mut h[268 + 4 * k..], m[k][3] as f32);
    }
    for r in 0..3 {
        for c in 0..4 {
            LittleEndian::write_f32(&mut h[280 + 16 * r + 4 * c..], m[r][c] as f32);
        }
    }
    h[344..348].copy_from_slice(MAGIC);
    h
}

/// Quaternion (b, c, d) of the rotation part of the affine, with a proper
/// rotation enforced by flipping the third axis as the qfac convention does.
fn affine_quaternion(m: &[[f64; 4]; 4]) -> [f64; 3] {
    let mut r = [[0.0; 3]; 3];
    for j in 0..3 {
        let norm = (0..3).map(|i| m[i][j] * m[i][j]).sum::<f64>().sqrt();
        for i in 0..3 {
            r[i][j] = m[i][j] / norm;
        }
    }
    let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    if det < 0.0 {
        for row in r.iter_mut() {
            row[2] = -row[2];
        }
    }
    let trace = r[0][0] + r[1][1] + r[2][2];
    let (a, b, c, d);
    if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        a = 0.25 * s;
        b = (r[2][1] - r[1][2]) / s;
        c = (r[0][2] - r[2][0]) / s;
        d = (r[1][0] - r[0][1]) / s;
    } else if r[0][0] > r[1][1] && r[0][0] > r[2][2] {
        let s = (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt() * 2.0;
        a = (r[2][1] - r[1][2]) / s;
        b = 0.25 * s;
        c = (r[0][1] + r[1][0]) / s;
        d = (r[0][2] + r[2][0]) / s;
    } else if r[1][1] > r[2][2] {
        let s = (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt() * 2.0;
        a = (r[0][2] - r[2][0]) / s;
        b = (r[0][1] + r[1][0]) / s;
        c = 0.25 * s;
        d = (r[1][2] + r[2][1]) / s;
    } else {
        let s = (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt() * 2.0;
        a = (r[1][0] - r[0][1]) / s;
        b = (r[0][2] + r[2][0]) / s;
        c = (r[1][2] + r[2][1]) / s;
        d = 0.25 * s;
    }
    let sign = if a < 0.0 { -1.0 } else { 1.0 };
    [b * sign, c * sign, d * sign].map(|v| if v == 0.0 { 0.0 } else { v })
}

fn encode(path: &Path, values: impl Iterator<Item = f64>, datatype: Datatype, out: &mut Vec<u8>) -> Result<(), NiftiError> {
    for (k, v) in values.enumerate() {
        let bad = |reason: &str| NiftiError::InvalidData {
            path: path.to_path_buf(),
            reason: format!("element {k} = {v}: {reason}"),
        };
        if !v.is_finite() {
            return Err(bad("not finite"));
        }
        if let Some((lo, hi)) = datatype.range() {
            let r = v.round();
            if r < lo || r > hi {
                return Err(bad("out of range for the datatype"));
            }
        }
        match datatype {
            Datatype::Uint8 => out.push(v.round() as u8),
            Datatype::Int16 => out.extend_from_slice(&(v.round() as i16).to_le_bytes()),
            Datatype::Int32 => out.extend_from_slice(&(v.round() as i32).to_le_bytes()),
            Datatype::Float32 => {
                let f = v as f32;
                if !f.is_finite() {
                    return Err(bad("out of range for float32"));
                }
                out.extend_from_slice(&f.to_le_bytes())
            }
            Datatype::Float64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), NiftiError> {
    let io_err = |source| NiftiError::Io { path: path.to_path_buf(), source };
    let gz = path.extension().is_some_and(|e| e == "gz");
    if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes).map_err(io_err)?;
        fs::write(path, enc.finish().map_err(io_err)?).map_err(io_err)
    } else {
        fs::write(path, bytes).map_err(io_err)
    }
}

/// Writes a scalar volume; integer datatypes round to nearest and reject
/// values outside their range. A `.gz` extension selects gzip compression.
pub fn write_scalar(path: impl AsRef<Path>, vol: &Volume, datatype: Datatype) -> Result<(), NiftiError> {
    let path = path.as_ref();
    let mut bytes = header_bytes(vol.grid(), datatype, false, INTENT_NONE);
    encode(path, vol.data().iter().copied(), datatype, &mut bytes)?;
    write_bytes(path, &bytes)
}

pub fn write_vector(path: impl AsRef<Path>, field: &VectorVolume, datatype: Datatype, intent_code: i16) -> Result<(), NiftiError> {
    let path = path.as_ref();
    let mut bytes = header_bytes(field.grid(), datatype, true, intent_code);
    let planes = (0..3).flat_map(|c| field.data().iter().map(move |v| v[c]));
    encode(path, planes, datatype, &mut bytes)?;
    write_bytes(path, &bytes)
}

/// Scalars keep no intent; vector fields are tagged as generic vectors.
pub fn write_volume(path: impl AsRef<Path>, vol: &VolumeData, datatype: Datatype) -> Result<(), NiftiError> {
    match vol {
        VolumeData::Scalar(v) => write_scalar(path, v, datatype),
        VolumeData::Vector(v) => write_vector(path, v, datatype, INTENT_VECTOR),
    }
}

pub fn write_mask(path: impl AsRef<Path>, mask: &Mask) -> Result<(), NiftiError> {
    write_scalar(path, &mask.to_volume(), Datatype::Uint8)
}
