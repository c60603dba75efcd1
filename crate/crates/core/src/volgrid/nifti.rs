//! Minimal single-file NIfTI-1 codec.
//!
//! Reads little-endian `.nii` / `.nii.gz` files holding uint8, int16 or
//! float32 voxels. Writes float32 images and uint8 masks with a 348-byte
//! header, a zeroed 4-byte extension flag and `vox_offset = 352`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

use super::{voxel_count, LabelMask, Volume3};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
pub const MAGIC_SINGLE_FILE: &[u8; 4] = b"n+1\0";

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

/// Refuse to allocate for images larger than this many voxels.
const MAX_VOXELS: usize = 1 << 28;
const VOX_OFFSET_MAX: usize = 1_000_000_000;

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("truncated file: need {expected} data bytes, found {actual}")]
    TruncatedFile { expected: usize, actual: usize },
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
}

fn malformed(msg: impl Into<String>) -> NiftiError {
    NiftiError::MalformedHeader(msg.into())
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn i32_at(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Decoded header fields this codec cares about.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub datatype: i16,
    pub vox_offset: usize,
    pub scl_slope: f32,
    pub scl_inter: f32,
}

impl NiftiHeader {
    pub fn parse(bytes: &[u8]) -> Result<Self, NiftiError> {
        if bytes.len() < HEADER_SIZE {
            return Err(malformed(format!("header needs {HEADER_SIZE} bytes, found {}", bytes.len())));
        }
        let sizeof_hdr = i32_at(bytes, 0);
        if sizeof_hdr != HEADER_SIZE as i32 {
            return Err(malformed(format!("sizeof_hdr is {sizeof_hdr} (big-endian files are not supported)")));
        }
        let magic = &bytes[344..348];
        if magic != MAGIC_SINGLE_FILE {
            return Err(malformed(format!("magic {magic:?} is not single-file n+1")));
        }

        let ndim = i16_at(bytes, 40);
        if !(1..=7).contains(&ndim) {
            return Err(malformed(format!("dim[0] = {ndim}")));
        }
        let mut dims = [1usize; 3];
        for axis in 1..=7usize {
            let d = i16_at(bytes, 40 + 2 * axis);
            if axis as i16 > ndim {
                continue;
            }
            if d <= 0 {
                return Err(malformed(format!("dim[{axis}] = {d}")));
            }
            if axis <= 3 {
                dims[axis - 1] = d as usize;
            } else if d != 1 {
                return Err(malformed(format!("dim[{axis}] = {d}; only 3D images supported")));
            }
        }

        let mut spacing = [1.0f32; 3];
        for (axis, s) in spacing.iter_mut().enumerate().take(ndim.min(3) as usize) {
            let p = f32_at(bytes, 76 + 4 * (axis + 1));
            if !(p.is_finite() && p > 0.0) {
                return Err(malformed(format!("pixdim[{}] = {p}", axis + 1)));
            }
            *s = p;
        }

        let datatype = i16_at(bytes, 70);
        let bitpix = i16_at(bytes, 72);
        let expected_bits = match datatype {
            DT_UINT8 => 8,
            DT_INT16 => 16,
            DT_FLOAT32 => 32,
            other => return Err(NiftiError::UnsupportedDatatype(other)),
        };
        if bitpix != expected_bits {
            return Err(malformed(format!("bitpix {bitpix} inconsistent with datatype {datatype}")));
        }

        let vox_offset = f32_at(bytes, 108);
        if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32 && vox_offset < VOX_OFFSET_MAX as f32) {
            return Err(malformed(format!("vox_offset = {vox_offset}")));
        }

        Ok(Self {
            dims,
            spacing,
            datatype,
            vox_offset: vox_offset as usize,
            scl_slope: f32_at(bytes, 112),
            scl_inter: f32_at(bytes, 116),
        })
    }

    fn bytes_per_voxel(&self) -> usize {
        match self.datatype {
            DT_UINT8 => 1,
            DT_INT16 => 2,
            _ => 4,
        }
    }

    fn scaling(&self) -> Option<(f32, f32)> {
        let (s, i) = (self.scl_slope, self.scl_inter);
        if s == 0.0 || !s.is_finite() || !i.is_finite() || (s == 1.0 && i == 0.0) {
            None
        } else {
            Some((s, i))
        }
    }
}

/// Decodes an in-memory `.nii` or `.nii.gz` image.
pub fn decode_nifti(bytes: &[u8]) -> Result<Volume3, NiftiError> {
    if bytes.starts_with(&GZIP_MAGIC) {
        let mut raw = Vec::new();
        // anything past the largest accepted image is never read
        let cap = (VOX_OFFSET_MAX + 4 * MAX_VOXELS) as u64;
        GzDecoder::new(bytes).take(cap).read_to_end(&mut raw)?;
        return decode_raw(&raw);
    }
    decode_raw(bytes)
}

fn decode_raw(bytes: &[u8]) -> Result<Volume3, NiftiError> {
    let header = NiftiHeader::parse(bytes)?;
    let n = voxel_count(header.dims)
        .filter(|&n| n <= MAX_VOXELS)
        .ok_or_else(|| malformed(format!("image of {:?} voxels is too large", header.dims)))?;
    let width = header.bytes_per_voxel();
    let expected = n * width;
    let actual = bytes.len().saturating_sub(header.vox_offset);
    if actual < expected {
        return Err(NiftiError::TruncatedFile { expected, actual });
    }
    let data = &bytes[header.vox_offset..header.vox_offset + expected];
    let mut values: Vec<f32> = match header.datatype {
        DT_UINT8 => data.iter().map(|&b| f32::from(b)).collect(),
        DT_INT16 => data.chunks_exact(2).map(|c| f32::from(i16::from_le_bytes([c[0], c[1]]))).collect(),
        _ => data.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
    };
    if let Some((slope, inter)) = header.scaling() {
        for v in &mut values {
            *v = *v * slope + inter;
        }
    }
    Volume3::new(header.dims, header.spacing, values).map_err(|e| malformed(e.to_string()))
}

pub fn load_nifti(path: impl AsRef<Path>) -> Result<Volume3, NiftiError> {
    decode_nifti(&fs::read(path)?)
}

fn header_bytes(dims: [usize; 3], spacing: [f32; 3], datatype: i16, bitpix: i16) -> Result<Vec<u8>, NiftiError> {
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());

    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    // regular = 'r' for legacy readers
    h[38] = b'r';
    put_i16(&mut h, 40, 3);
    for (axis, &d) in dims.iter().enumerate() {
        let d = i16::try_from(d).map_err(|_| malformed(format!("dimension {d} does not fit in int16")))?;
        put_i16(&mut h, 42 + 2 * axis, d);
    }
    for axis in 4..=7 {
        put_i16(&mut h, 40 + 2 * axis, 1);
    }
    put_i16(&mut h, 70, datatype);
    put_i16(&mut h, 72, bitpix);
    put_f32(&mut h, 76, 1.0);
    for (axis, &s) in spacing.iter().enumerate() {
        put_f32(&mut h, 80 + 4 * axis, s);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    // xyzt_units: millimetres
    h[123] = 2;
    h[344..348].copy_from_slice(MAGIC_SINGLE_FILE);
    Ok(h)
}

/// Encodes a volume as float32 single-file NIfTI-1 (uncompressed).
pub fn encode_nifti(volume: &Volume3) -> Result<Vec<u8>, NiftiError> {
    let mut out = header_bytes(volume.dims(), volume.spacing(), DT_FLOAT32, 32)?;
    out.reserve(4 * volume.len());
    for v in volume.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_mask(mask: &LabelMask) -> Result<Vec<u8>, NiftiError> {
    let mut out = header_bytes(mask.dims(), [1.0; 3], DT_UINT8, 8)?;
    out.extend_from_slice(mask.values());
    Ok(out)
}

fn write_maybe_gz(path: &Path, bytes: &[u8]) -> Result<(), NiftiError> {
    let gz = path.extension().map(|e| e.eq_ignore_ascii_case("gz")).unwrap_or(false);
    if gz {
        let mut enc = GzEncoder::new(fs::File::create(path)?, Compression::fast());
        enc.write_all(bytes)?;
        enc.finish()?;
    } else {
        fs::write(path, bytes)?;
    }
    Ok(())
}

/// Writes float32 NIfTI-1; a `.gz` extension selects gzip compression.
pub fn save_nifti(volume: &Volume3, path: impl AsRef<Path>) -> Result<(), NiftiError> {
    write_maybe_gz(path.as_ref(), &encode_nifti(volume)?)
}

/// Writes a mask as uint8 NIfTI-1.
pub fn save_mask(mask: &LabelMask, path: impl AsRef<Path>) -> Result<(), NiftiError> {
    write_maybe_gz(path.as_ref(), &encode_mask(mask)?)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<LabelMask, NiftiError> {
    let vol = load_nifti(path)?;
    LabelMask::from_volume(&vol).map_err(|e| malformed(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Assembles a float32 2x2x2 file field by field from the header layout.
    fn hand_built_float32() -> Vec<u8> {
        let mut b = vec![0u8; 352];
        b[0..4].copy_from_slice(&348i32.to_le_bytes());
        let dim: [i16; 8] = [3, 2, 2, 2, 1, 1, 1, 1];
        for (i, d) in dim.iter().enumerate() {
            b[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        b[70..72].copy_from_slice(&16i16.to_le_bytes());
        b[72..74].copy_from_slice(&32i16.to_le_bytes());
        let pixdim: [f32; 8] = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        for (i, p) in pixdim.iter().enumerate() {
            b[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
        }
        b[108..112].copy_from_slice(&352f32.to_le_bytes());
        b[344..348].copy_from_slice(b"n+1\0");
        for v in 0..8 {
            b.extend_from_slice(&(v as f32).to_le_bytes());
        }
        b
    }

    #[test]
    fn decodes_hand_built_file() {
        let vol = decode_nifti(&hand_built_float32()).unwrap();
        assert_eq!(vol.dims(), [2, 2, 2]);
        assert_eq!(vol.spacing(), [1.0; 3]);
        assert_eq!(vol.values(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn two_file_magic_is_malformed() {
        let mut b = hand_built_float32();
        b[344..348].copy_from_slice(b"ni1\0");
        assert!(matches!(decode_nifti(&b), Err(NiftiError::MalformedHeader(_))));
    }

    #[test]
    fn bad_sizeof_hdr_is_malformed() {
        let mut b = hand_built_float32();
        b[0..4].copy_from_slice(&348i32.to_be_bytes());
        assert!(matches!(decode_nifti(&b), Err(NiftiError::MalformedHeader(_))));
    }

    #[test]
    fn truncated_data() {
        let b = hand_built_float32();
        let err = decode_nifti(&b[..b.len() - 1]).unwrap_err();
        assert!(matches!(err, NiftiError::TruncatedFile { expected: 32, actual: 31 }));
    }

    #[test]
    fn unsupported_datatype() {
        let mut b = hand_built_float32();
        b[70..72].copy_from_slice(&64i16.to_le_bytes());
        assert!(matches!(decode_nifti(&b), Err(NiftiError::UnsupportedDatatype(64))));
    }

    #[test]
    fn int16_with_scaling() {
        let mut b = hand_built_float32();
        b.truncate(352);
        b[70..72].copy_from_slice(&DT_INT16.to_le_bytes());
        b[72..74].copy_from_slice(&16i16.to_le_bytes());
        b[112..116].copy_from_slice(&2f32.to_le_bytes());
        b[116..120].copy_from_slice(&1f32.to_le_bytes());
        for v in [-3i16, -2, -1, 0, 1, 2, 3, 4] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        let vol = decode_nifti(&b).unwrap();
        assert_eq!(vol.values(), &[-5.0, -3.0, -1.0, 1.0, 3.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn encoded_layout() {
        let vol = Volume3::new([3, 2, 1], [1.0, 1.0, 1.0], (0..6).map(|v| v as f32).collect()).unwrap();
        let b = encode_nifti(&vol).unwrap();
        assert_eq!(b.len() - VOX_OFFSET, 4 * 6);
        assert_eq!(i32_at(&b, 0), 348);
        assert_eq!(&b[344..348], b"n+1\0");
        assert_eq!(f32_at(&b, 108), 352.0);
        for axis in 1..=3 {
            assert_eq!(f32_at(&b, 76 + 4 * axis), 1.0);
        }
    }

    #[test]
    fn mask_roundtrip_uint8() {
        let mask = LabelMask::new([2, 2, 1], vec![0, 1, 1, 0]).unwrap();
        let b = encode_mask(&mask).unwrap();
        assert_eq!(i16_at(&b, 70), DT_UINT8);
        let back = LabelMask::from_volume(&decode_nifti(&b).unwrap()).unwrap();
        assert_eq!(back, mask);
    }

    #[test]
    fn gzip_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.nii.gz");
        let vol = Volume3::new([2, 3, 4], [0.5, 1.0, 2.0], (0..24).map(|v| v as f32 * 0.1).collect()).unwrap();
        save_nifti(&vol, &path).unwrap();
        let raw = fs::read(&path).unwrap();
        assert_eq!(&raw[..2], &GZIP_MAGIC);
        assert_eq!(load_nifti(&path).unwrap(), vol);
    }

    #[test]
    fn write_to_missing_directory_is_io_failure() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("no/such/dir/v.nii");
        let vol = Volume3::zeros([1, 1, 1]).unwrap();
        assert!(matches!(save_nifti(&vol, path), Err(NiftiError::IoFailure(_))));
    }
}
