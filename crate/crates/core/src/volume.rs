//! NIfTI-1 volume I/O, Dice similarity and label merging.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const XYZT_UNITS: usize = 123;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QUATERN_B: usize = 256;
    pub const QOFFSET_X: usize = 268;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

/// Tolerance on affine elements before two grids are considered misaligned.
pub const AFFINE_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("bad magic {0:?}, expected single-file NIfTI-1 \"n+1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("unsupported dimensions {0:?}, expected a 3-D volume")]
    UnsupportedDims([i16; 8]),
    #[error("header size {0} does not match 348")]
    HeaderSizeMismatch(i32),
    #[error("file too short: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch { a: [usize; 3], b: [usize; 3] },
    #[error("invalid volume: {0}")]
    Invalid(String),
    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, VolumeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataType {
    U8,
    I16,
    I32,
    F32,
}

impl DataType {
    pub fn code(self) -> i16 {
        match self {
            DataType::U8 => 2,
            DataType::I16 => 4,
            DataType::I32 => 8,
            DataType::F32 => 16,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(DataType::U8),
            4 => Ok(DataType::I16),
            8 => Ok(DataType::I32),
            16 => Ok(DataType::F32),
            other => Err(VolumeError::UnsupportedDatatype(other)),
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            DataType::U8 => 1,
            DataType::I16 => 2,
            DataType::I32 | DataType::F32 => 4,
        }
    }
}

pub type Affine = [[f64; 4]; 4];

pub const IDENTITY: Affine = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

/// A 3-D voxel grid. Voxels are stored x-fastest; every supported on-disk
/// datatype is exactly representable as `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub datatype: DataType,
    pub affine: Affine,
    pub voxels: Vec<f64>,
}

impl VolumeGrid {
    pub fn zeros(dims: [usize; 3], datatype: DataType) -> Self {
        VolumeGrid {
            dims,
            spacing: [1.0; 3],
            datatype,
            affine: IDENTITY,
            voxels: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_voxels(dims: [usize; 3], datatype: DataType, voxels: Vec<f64>) -> Result<Self> {
        let g = VolumeGrid {
            dims,
            spacing: [1.0; 3],
            datatype,
            affine: IDENTITY,
            voxels,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::Invalid(format!("dims {:?} must be >= 1", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(VolumeError::Invalid(format!("spacing {:?} must be > 0", self.spacing)));
        }
        let expected: usize = self.dims.iter().product();
        if expected != self.voxels.len() {
            return Err(VolumeError::Invalid(format!(
                "{} voxels for dims {:?}",
                self.voxels.len(),
                self.dims
            )));
        }
        Ok(())
    }

    /// Copies geometry (dims, spacing, affine) with new voxel data.
    pub fn with_voxels(&self, datatype: DataType, voxels: Vec<f64>) -> VolumeGrid {
        assert_eq!(voxels.len(), self.voxels.len());
        VolumeGrid {
            dims: self.dims,
            spacing: self.spacing,
            datatype,
            affine: self.affine,
            voxels,
        }
    }

    /// Distinct nonzero labels, rounding voxel values to integers.
    pub fn labels(&self) -> BTreeSet<i64> {
        self.voxels
            .iter()
            .filter(|v| **v != 0.0)
            .map(|v| v.round() as i64)
            .filter(|&l| l != 0)
            .collect()
    }

    pub fn count_nonzero(&self) -> usize {
        self.voxels.iter().filter(|v| **v != 0.0).count()
    }
}

fn read_i16(h: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([h[off], h[off + 1]])
}

fn read_f32(h: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([h[off], h[off + 1], h[off + 2], h[off + 3]])
}

fn put_i16(h: &mut [u8], off: usize, v: i16) {
    h[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(h: &mut [u8], off: usize, v: f32) {
    h[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

/// Affine from the quaternion parameters of a NIfTI-1 header.
pub fn quaternion_affine(b: f64, c: f64, d: f64, offset: [f64; 3], pixdim: [f64; 3], qfac: f64) -> Affine {
    let mut a2 = 1.0 - (b * b + c * c + d * d);
    let (mut b, mut c, mut d) = (b, c, d);
    if a2 < 1e-7 {
        // Degenerate: renormalize (b,c,d) and use a 180 degree rotation.
        let norm = (b * b + c * c + d * d).sqrt();
        b /= norm;
        c /= norm;
        d /= norm;
        a2 = 0.0;
    }
    let a = a2.sqrt();
    let qfac = if qfac < 0.0 { -1.0 } else { 1.0 };
    let r = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ];
    let scale = [pixdim[0], pixdim[1], pixdim[2] * qfac];
    let mut m = IDENTITY;
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = r[i][j] * scale[j];
        }
        m[i][3] = offset[i];
    }
    m
}

/// Decodes a NIfTI-1 single-file byte stream (optionally gzip-wrapped).
pub fn decode_nifti(raw: &[u8]) -> Result<VolumeGrid> {
    let inflated;
    let bytes: &[u8] = if raw.starts_with(&[0x1F, 0x8B]) {
        let mut out = Vec::new();
        MultiGzDecoder::new(raw)
            .read_to_end(&mut out)
            .map_err(|source| VolumeError::Io {
                path: PathBuf::from("<gzip stream>"),
                source,
            })?;
        inflated = out;
        &inflated
    } else {
        raw
    };
    if bytes.len() < HEADER_SIZE {
        return Err(VolumeError::Truncated {
            needed: HEADER_SIZE,
            available: bytes.len(),
        });
    }
    let h = &bytes[..HEADER_SIZE];
    let sizeof_hdr = i32::from_le_bytes([h[0], h[1], h[2], h[3]]);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(VolumeError::HeaderSizeMismatch(sizeof_hdr));
    }
    let magic: [u8; 4] = h[offsets::MAGIC..offsets::MAGIC + 4].try_into().unwrap();
    if &magic != b"n+1\0" {
        return Err(VolumeError::BadMagic(magic));
    }
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = read_i16(h, offsets::DIM + 2 * i);
    }
    if dim[0] != 3 || dim[1..4].iter().any(|&d| d < 1) {
        return Err(VolumeError::UnsupportedDims(dim));
    }
    let datatype = DataType::from_code(read_i16(h, offsets::DATATYPE))?;
    let dims = [dim[1] as usize, dim[2] as usize, dim[3] as usize];
    let mut pixdim = [0f64; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = read_f32(h, offsets::PIXDIM + 4 * i) as f64;
    }
    let mut spacing = [pixdim[1], pixdim[2], pixdim[3]];
    for s in &mut spacing {
        if !(*s > 0.0) {
            log::warn!("non-positive voxel spacing {s}, using 1.0");
            *s = 1.0;
        }
    }
    let sform_code = read_i16(h, offsets::SFORM_CODE);
    let qform_code = read_i16(h, offsets::QFORM_CODE);
    let affine = if sform_code > 0 {
        let mut m = IDENTITY;
        for (row, m_row) in m.iter_mut().take(3).enumerate() {
            for (col, v) in m_row.iter_mut().enumerate() {
                *v = read_f32(h, offsets::SROW_X + 16 * row + 4 * col) as f64;
            }
        }
        m
    } else if qform_code > 0 {
        let q = |i: usize| read_f32(h, offsets::QUATERN_B + 4 * i) as f64;
        let o = |i: usize| read_f32(h, offsets::QOFFSET_X + 4 * i) as f64;
        quaternion_affine(q(0), q(1), q(2), [o(0), o(1), o(2)], spacing, pixdim[0])
    } else {
        let mut m = IDENTITY;
        for i in 0..3 {
            m[i][i] = spacing[i];
        }
        m
    };

    let vox_offset = read_f32(h, offsets::VOX_OFFSET).max(HEADER_SIZE as f32) as usize;
    let count: usize = dims.iter().product();
    let needed = vox_offset + count * datatype.bytes();
    if bytes.len() < needed {
        return Err(VolumeError::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    let data = &bytes[vox_offset..needed];
    let voxels: Vec<f64> = match datatype {
        DataType::U8 => data.iter().map(|&v| v as f64).collect(),
        DataType::I16 => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        DataType::I32 => data
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        DataType::F32 => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
    };
    Ok(VolumeGrid {
        dims,
        spacing,
        datatype,
        affine,
        voxels,
    })
}

/// Encodes an uncompressed NIfTI-1 single file (sform only).
pub fn encode_nifti(g: &VolumeGrid) -> Result<Vec<u8>> {
    g.validate()?;
    if g.dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(VolumeError::Invalid(format!("dims {:?} exceed NIfTI-1 limits", g.dims)));
    }
    let mut h = vec![0u8; VOX_OFFSET];
    h[offsets::SIZEOF_HDR..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    let dim = [3, g.dims[0] as i16, g.dims[1] as i16, g.dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        put_i16(&mut h, offsets::DIM + 2 * i, *d);
    }
    put_i16(&mut h, offsets::DATATYPE, g.datatype.code());
    put_i16(&mut h, offsets::BITPIX, (g.datatype.bytes() * 8) as i16);
    let pixdim = [1.0, g.spacing[0], g.spacing[1], g.spacing[2], 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        put_f32(&mut h, offsets::PIXDIM + 4 * i, *p as f32);
    }
    put_f32(&mut h, offsets::VOX_OFFSET, VOX_OFFSET as f32);
    put_f32(&mut h, offsets::SCL_SLOPE, 1.0);
    h[offsets::XYZT_UNITS] = 2; // millimetres
    put_i16(&mut h, offsets::SFORM_CODE, 2);
    for row in 0..3 {
        for col in 0..4 {
            put_f32(&mut h, offsets::SROW_X + 16 * row + 4 * col, g.affine[row][col] as f32);
        }
    }
    h[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(b"n+1\0");
    h.reserve(g.voxels.len() * g.datatype.bytes());
    for &v in &g.voxels {
        match g.datatype {
            DataType::U8 => h.push(v as u8),
            DataType::I16 => h.extend_from_slice(&(v as i16).to_le_bytes()),
            DataType::I32 => h.extend_from_slice(&(v as i32).to_le_bytes()),
            DataType::F32 => h.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
    Ok(h)
}

pub fn read_nifti(path: &Path) -> Result<VolumeGrid> {
    let raw = std::fs::read(path).map_err(|source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_nifti(&raw)
}

/// Writes `g`; a `.gz` extension selects gzip wrapping (fixed header, no
/// timestamp, so output bytes are deterministic).
pub fn write_nifti(g: &VolumeGrid, path: &Path) -> Result<()> {
    let plain = encode_nifti(g)?;
    let io = |source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    };
    let bytes = if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&plain).map_err(io)?;
        enc.finish().map_err(io)?
    } else {
        plain
    };
    std::fs::write(path, bytes).map_err(io)
}

fn check_shape(a: &VolumeGrid, b: &VolumeGrid) -> Result<()> {
    if a.dims != b.dims || a.voxels.len() != b.voxels.len() {
        return Err(VolumeError::ShapeMismatch { a: a.dims, b: b.dims });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometry {
    Match,
    /// Same dims, affines differ by more than [`AFFINE_TOLERANCE`].
    AffineDiffers(f64),
    ShapeMismatch,
}

pub fn compare_geometry(a: &VolumeGrid, b: &VolumeGrid) -> Geometry {
    if check_shape(a, b).is_err() {
        return Geometry::ShapeMismatch;
    }
    let mut max = 0.0f64;
    for i in 0..4 {
        for j in 0..4 {
            max = max.max((a.affine[i][j] - b.affine[i][j]).abs());
        }
    }
    if max > AFFINE_TOLERANCE {
        Geometry::AffineDiffers(max)
    } else {
        Geometry::Match
    }
}

/// Dice from voxel counts; both-empty is defined as perfect agreement.
pub fn dice_from_counts(a: u64, b: u64, overlap: u64) -> f64 {
    if a + b == 0 {
        1.0
    } else {
        2.0 * overlap as f64 / (a + b) as f64
    }
}

/// Binary Dice; any nonzero voxel is foreground.
pub fn dice(a: &VolumeGrid, b: &VolumeGrid) -> Result<f64> {
    check_shape(a, b)?;
    let (mut na, mut nb, mut both) = (0u64, 0u64, 0u64);
    for (&va, &vb) in a.voxels.iter().zip(&b.voxels) {
        let (fa, fb) = (va != 0.0, vb != 0.0);
        na += fa as u64;
        nb += fb as u64;
        both += (fa && fb) as u64;
    }
    Ok(dice_from_counts(na, nb, both))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentDiceRow {
    pub label: i64,
    pub dice: f64,
    pub voxels_a: u64,
    pub voxels_b: u64,
    pub voxels_overlap: u64,
    pub both_empty: bool,
}

/// Dice per label id; a voxel belongs to a segment iff its value equals the id.
pub fn per_segment_dice(a: &VolumeGrid, b: &VolumeGrid, ids: &[i64]) -> Result<Vec<SegmentDiceRow>> {
    check_shape(a, b)?;
    let slot: HashMap<i64, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut counts = vec![[0u64; 3]; ids.len()];
    let label_of = |v: f64| (v.fract() == 0.0).then_some(v as i64);
    for (&va, &vb) in a.voxels.iter().zip(&b.voxels) {
        let la = label_of(va).and_then(|l| slot.get(&l).copied());
        let lb = label_of(vb).and_then(|l| slot.get(&l).copied());
        if let Some(i) = la {
            counts[i][0] += 1;
        }
        if let Some(i) = lb {
            counts[i][1] += 1;
        }
        if let (Some(i), Some(j)) = (la, lb) {
            if i == j {
                counts[i][2] += 1;
            }
        }
    }
    Ok(ids
        .iter()
        .zip(counts)
        .map(|(&label, [na, nb, overlap])| SegmentDiceRow {
            label,
            dice: dice_from_counts(na, nb, overlap),
            voxels_a: na,
            voxels_b: nb,
            voxels_overlap: overlap,
            both_empty: na + nb == 0,
        })
        .collect())
}

/// Relabels voxels through `mapping`; unmapped labels become background.
pub fn merge_labels(g: &VolumeGrid, mapping: &BTreeMap<i64, i64>) -> VolumeGrid {
    let voxels = g
        .voxels
        .iter()
        .map(|&v| {
            if v.fract() != 0.0 {
                return 0.0;
            }
            mapping.get(&(v as i64)).map_or(0.0, |&m| m as f64)
        })
        .collect();
    g.with_voxels(g.datatype, voxels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(dims: [usize; 3], voxels: &[f64]) -> VolumeGrid {
        VolumeGrid::from_voxels(dims, DataType::U8, voxels.to_vec()).unwrap()
    }

    #[test]
    fn round_trip_small_u8() {
        let dir = tempfile::tempdir().unwrap();
        let g = grid([2, 2, 2], &[0., 1., 2., 3., 4., 5., 6., 255.]);
        for name in ["a.nii", "a.nii.gz"] {
            let p = dir.path().join(name);
            write_nifti(&g, &p).unwrap();
            assert_eq!(read_nifti(&p).unwrap(), g);
        }
        let plain = std::fs::read(dir.path().join("a.nii")).unwrap();
        assert_eq!(&plain[352..], &[0, 1, 2, 3, 4, 5, 6, 255]);
    }

    #[test]
    fn gzip_output_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let g = grid([2, 1, 1], &[1., 0.]);
        let (a, b) = (dir.path().join("a.nii.gz"), dir.path().join("b.nii.gz"));
        write_nifti(&g, &a).unwrap();
        write_nifti(&g, &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn rejects_4d_and_bad_headers() {
        let g = grid([1, 1, 1], &[1.0]);
        let mut bytes = encode_nifti(&g).unwrap();
        bytes[40] = 4;
        assert!(matches!(decode_nifti(&bytes), Err(VolumeError::UnsupportedDims(_))));
        bytes[40] = 3;
        bytes[70] = 64; // float64
        assert!(matches!(decode_nifti(&bytes), Err(VolumeError::UnsupportedDatatype(64))));
        bytes[70] = 2;
        bytes[345] = b'i';
        assert!(matches!(decode_nifti(&bytes), Err(VolumeError::BadMagic(_))));
        bytes[345] = b'+';
        bytes[0..4].copy_from_slice(&540i32.to_le_bytes());
        assert!(matches!(decode_nifti(&bytes), Err(VolumeError::HeaderSizeMismatch(540))));
        bytes[0..4].copy_from_slice(&348i32.to_le_bytes());
        assert!(matches!(decode_nifti(&bytes[..352]), Err(VolumeError::Truncated { .. })));
        assert!(decode_nifti(&bytes).is_ok());
    }

    #[test]
    fn qform_only_header_reconstructs_affine() {
        let g = grid([1, 1, 1], &[1.0]);
        let mut h = encode_nifti(&g).unwrap();
        put_i16(&mut h, offsets::SFORM_CODE, 0);
        put_i16(&mut h, offsets::QFORM_CODE, 1);
        // 180 degrees about z: (b,c,d) = (0,0,1).
        put_f32(&mut h, offsets::QUATERN_B + 8, 1.0);
        put_f32(&mut h, offsets::QOFFSET_X, 5.0);
        put_f32(&mut h, offsets::PIXDIM + 4, 2.0);
        let back = decode_nifti(&h).unwrap();
        assert_eq!(back.affine[0], [-2.0, 0.0, 0.0, 5.0]);
        assert_eq!(back.affine[1], [0.0, -1.0, 0.0, 0.0]);
        assert_eq!(back.affine[2], [0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn dice_examples() {
        let a = grid([3, 1, 1], &[1., 1., 0.]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let b = grid([3, 1, 1], &[0., 0., 1.]);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        let empty = grid([3, 1, 1], &[0.; 3]);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        // |A| = 4, |B| = 6, overlap 3.
        let a = grid([10, 1, 1], &[1., 1., 1., 1., 0., 0., 0., 0., 0., 0.]);
        let b = grid([10, 1, 1], &[0., 1., 1., 1., 1., 1., 1., 0., 0., 0.]);
        assert_eq!(dice(&a, &b).unwrap(), 0.6);
        assert!(matches!(
            dice(&a, &grid([5, 2, 1], &[0.; 10])),
            Err(VolumeError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn per_segment_examples() {
        let a = grid([4, 1, 1], &[1., 1., 2., 0.]);
        let rows = per_segment_dice(&a, &a, &[1]).unwrap();
        assert_eq!(rows[0].dice, 1.0);
        let b = grid([4, 1, 1], &[1., 1., 0., 0.]);
        let rows = per_segment_dice(&a, &b, &[1, 2, 7]).unwrap();
        assert_eq!(rows[1].dice, 0.0);
        assert_eq!((rows[1].voxels_a, rows[1].voxels_b), (1, 0));
        assert!(rows[2].both_empty);
        assert_eq!(rows[2].dice, 1.0);
    }

    #[test]
    fn merge_examples() {
        let g = grid([6, 1, 1], &[1., 2., 3., 4., 5., 0.]);
        let lobes: BTreeMap<i64, i64> = [(1, 1), (2, 1), (3, 2), (4, 2), (5, 2)].into();
        assert_eq!(merge_labels(&g, &lobes).voxels, vec![1., 1., 2., 2., 2., 0.]);
        assert_eq!(merge_labels(&g, &BTreeMap::new()).voxels, vec![0.; 6]);
        let identity: BTreeMap<i64, i64> = (1..=5).map(|l| (l, l)).collect();
        assert_eq!(merge_labels(&g, &identity), g);
    }

    #[test]
    fn geometry_comparison() {
        let a = grid([2, 1, 1], &[0., 1.]);
        let mut b = a.clone();
        assert_eq!(compare_geometry(&a, &b), Geometry::Match);
        b.affine[0][3] = 0.01;
        assert!(matches!(compare_geometry(&a, &b), Geometry::AffineDiffers(_)));
        assert_eq!(compare_geometry(&a, &grid([1, 2, 1], &[0., 1.])), Geometry::ShapeMismatch);
    }
}
