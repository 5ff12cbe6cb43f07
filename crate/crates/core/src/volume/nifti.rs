//! Minimal single-file NIfTI-1 (`.nii`) reader and writer.
//!
//! Little-endian only, one frame, datatypes uint8 / int16 / float32 / float64.
//! Files are written with an sform (code 1) holding the volume affine, no
//! qform, `scl_slope = 0` (no scaling) and the payload at byte 352.

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use thiserror::Error;

use super::{Geometry, SparseLabelVolume, Volume3D, VolumeError};

pub const HEADER_SIZE: usize = 348;
pub const DEFAULT_VOX_OFFSET: usize = 352;
pub const MAGIC_SINGLE: [u8; 4] = *b"n+1\0";

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QUATERN_B: usize = 256;
    pub const QOFFSET_X: usize = 268;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("truncated {field}: need {needed} bytes, file has {got}")]
    Truncated {
        field: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("sizeof_hdr: expected 348, found {0} (big-endian files are not supported)")]
    HeaderSize(i32),
    #[error("unsupported magic {0:?}: only single-file \"n+1\\0\" is supported")]
    Magic([u8; 4]),
    #[error("datatype: unsupported code {0}")]
    Datatype(i16),
    #[error("bitpix: {bitpix} does not match datatype {datatype}")]
    Bitpix { datatype: i16, bitpix: i16 },
    #[error("vox_offset: {0} is below 352")]
    VoxOffset(f32),
    #[error("dim[{index}]: invalid value {value}")]
    Dim { index: usize, value: i16 },
    #[error("dim[4]: {0} frames, only single-frame volumes are supported")]
    MultiFrame(i16),
    #[error("pixdim[{index}]: spacing {value} must be positive")]
    Pixdim { index: usize, value: f32 },
    #[error("value {value} at voxel {index} does not fit datatype {dtype:?}")]
    ValueRange { index: usize, value: f64, dtype: DataType },
    #[error("label file must be uint8 without scaling, found {0}")]
    NotLabels(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Supported on-disk voxel types.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataType {
    UInt8,
    Int16,
    Float32,
    Float64,
}

impl DataType {
    pub fn code(self) -> i16 {
        match self {
            DataType::UInt8 => 2,
            DataType::Int16 => 4,
            DataType::Float32 => 16,
            DataType::Float64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Result<Self, NiftiError> {
        match code {
            2 => Ok(DataType::UInt8),
            4 => Ok(DataType::Int16),
            16 => Ok(DataType::Float32),
            64 => Ok(DataType::Float64),
            other => Err(NiftiError::Datatype(other)),
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            DataType::UInt8 => 1,
            DataType::Int16 => 2,
            DataType::Float32 => 4,
            DataType::Float64 => 8,
        }
    }
}

/// The header fields this crate reads and writes.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub datatype: DataType,
    pub dim: [i16; 8],
    pub pixdim: [f32; 8],
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub vox_offset: f32,
    pub magic: [u8; 4],
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
}

impl NiftiHeader {
    pub fn dims(&self) -> [usize; 3] {
        [self.dim[1] as usize, self.dim[2] as usize, self.dim[3] as usize]
    }

    pub fn spacing(&self) -> [f64; 3] {
        [
            f64::from(self.pixdim[1]),
            f64::from(self.pixdim[2]),
            f64::from(self.pixdim[3]),
        ]
    }

    pub fn has_scaling(&self) -> bool {
        self.scl_slope != 0.0 && !(self.scl_slope == 1.0 && self.scl_inter == 0.0)
    }

    /// Voxel-to-world matrix: sform if set, else qform, else `diag(pixdim)`.
    pub fn affine(&self) -> [[f64; 4]; 4] {
        let mut a = [[0.0; 4]; 4];
        a[3][3] = 1.0;
        if self.sform_code > 0 {
            for r in 0..3 {
                for c in 0..4 {
                    a[r][c] = f64::from(self.srow[r][c]);
                }
            }
        } else if self.qform_code > 0 {
            let [b, c, d] = self.quatern.map(f64::from);
            let a2 = 1.0 - (b * b + c * c + d * d);
            let qa = if a2 > 0.0 { a2.sqrt() } else { 0.0 };
            let rot = [
                [
                    qa * qa + b * b - c * c - d * d,
                    2.0 * (b * c - qa * d),
                    2.0 * (b * d + qa * c),
                ],
                [
                    2.0 * (b * c + qa * d),
                    qa * qa + c * c - b * b - d * d,
                    2.0 * (c * d - qa * b),
                ],
                [
                    2.0 * (b * d - qa * c),
                    2.0 * (c * d + qa * b),
                    qa * qa + d * d - b * b - c * c,
                ],
            ];
            let qfac = if self.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
            let scale = [
                f64::from(self.pixdim[1]),
                f64::from(self.pixdim[2]),
                qfac * f64::from(self.pixdim[3]),
            ];
            for r in 0..3 {
                for c in 0..3 {
                    a[r][c] = rot[r][c] * scale[c];
                }
                a[r][3] = f64::from(self.qoffset[r]);
            }
        } else {
            for r in 0..3 {
                a[r][r] = f64::from(self.pixdim[r + 1]);
            }
        }
        a
    }

    fn parse(bytes: &[u8]) -> Result<Self, NiftiError> {
        if bytes.len() < HEADER_SIZE {
            return Err(NiftiError::Truncated {
                field: "header",
                needed: HEADER_SIZE,
                got: bytes.len(),
            });
        }
        let le = LittleEndian::read_i32(&bytes[offsets::SIZEOF_HDR..]);
        if le != HEADER_SIZE as i32 {
            return Err(NiftiError::HeaderSize(le));
        }
        let mut magic = [0u8; 4];
        magic.copy_from_slice(&bytes[offsets::MAGIC..offsets::MAGIC + 4]);
        if magic != MAGIC_SINGLE {
            return Err(NiftiError::Magic(magic));
        }
        let mut dim = [0i16; 8];
        LittleEndian::read_i16_into(&bytes[offsets::DIM..offsets::DIM + 16], &mut dim);
        let datatype_code = LittleEndian::read_i16(&bytes[offsets::DATATYPE..]);
        let datatype = DataType::from_code(datatype_code)?;
        let bitpix = LittleEndian::read_i16(&bytes[offsets::BITPIX..]);
        if bitpix as usize != datatype.bytes() * 8 {
            return Err(NiftiError::Bitpix {
                datatype: datatype_code,
                bitpix,
            });
        }
        let mut pixdim = [0f32; 8];
        LittleEndian::read_f32_into(&bytes[offsets::PIXDIM..offsets::PIXDIM + 32], &mut pixdim);
        let vox_offset = LittleEndian::read_f32(&bytes[offsets::VOX_OFFSET..]);
        if !(vox_offset >= DEFAULT_VOX_OFFSET as f32) {
            return Err(NiftiError::VoxOffset(vox_offset));
        }
        let mut quatern = [0f32; 3];
        LittleEndian::read_f32_into(&bytes[offsets::QUATERN_B..offsets::QUATERN_B + 12], &mut quatern);
        let mut qoffset = [0f32; 3];
        LittleEndian::read_f32_into(&bytes[offsets::QOFFSET_X..offsets::QOFFSET_X + 12], &mut qoffset);
        let mut srow = [[0f32; 4]; 3];
        for (r, row) in srow.iter_mut().enumerate() {
            let at = offsets::SROW_X + 16 * r;
            LittleEndian::read_f32_into(&bytes[at..at + 16], row);
        }
        let header = NiftiHeader {
            datatype,
            dim,
            pixdim,
            scl_slope: LittleEndian::read_f32(&bytes[offsets::SCL_SLOPE..]),
            scl_inter: LittleEndian::read_f32(&bytes[offsets::SCL_INTER..]),
            vox_offset,
            magic,
            qform_code: LittleEndian::read_i16(&bytes[offsets::QFORM_CODE..]),
            sform_code: LittleEndian::read_i16(&bytes[offsets::SFORM_CODE..]),
            quatern,
            qoffset,
            srow,
        };
        header.validate_dims()?;
        Ok(header)
    }

    fn validate_dims(&self) -> Result<(), NiftiError> {
        let ndim = self.dim[0];
        if !(1..=7).contains(&ndim) {
            return Err(NiftiError::Dim { index: 0, value: ndim });
        }
        for index in 1..=3 {
            let value = if index as i16 <= ndim { self.dim[index] } else { 1 };
            if value < 1 {
                return Err(NiftiError::Dim { index, value });
            }
        }
        if ndim >= 4 && self.dim[4] > 1 {
            return Err(NiftiError::MultiFrame(self.dim[4]));
        }
        for index in 5..=(ndim as usize) {
            if self.dim[index] > 1 {
                return Err(NiftiError::Dim {
                    index,
                    value: self.dim[index],
                });
            }
        }
        for index in 1..=3 {
            let value = self.pixdim[index];
            if index as i16 <= ndim && !(value > 0.0) {
                return Err(NiftiError::Pixdim { index, value });
            }
        }
        Ok(())
    }

    fn for_volume(geom: &Geometry, datatype: DataType) -> Self {
        let mut dim = [1i16; 8];
        dim[0] = 3;
        for a in 0..3 {
            dim[a + 1] = geom.dims[a] as i16;
        }
        let mut pixdim = [0f32; 8];
        pixdim[0] = 1.0;
        for a in 0..3 {
            pixdim[a + 1] = geom.spacing[a] as f32;
        }
        let mut srow = [[0f32; 4]; 3];
        for r in 0..3 {
            for c in 0..4 {
                srow[r][c] = geom.affine[r][c] as f32;
            }
        }
        NiftiHeader {
            datatype,
            dim,
            pixdim,
            scl_slope: 0.0,
            scl_inter: 0.0,
            vox_offset: DEFAULT_VOX_OFFSET as f32,
            magic: MAGIC_SINGLE,
            qform_code: 0,
            sform_code: 1,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow,
        }
    }

    fn encode(&self) -> Vec<u8> {
        let mut b = vec![0u8; DEFAULT_VOX_OFFSET];
        LittleEndian::write_i32(&mut b[offsets::SIZEOF_HDR..], HEADER_SIZE as i32);
        LittleEndian::write_i16_into(&self.dim, &mut b[offsets::DIM..offsets::DIM + 16]);
        LittleEndian::write_i16(&mut b[offsets::DATATYPE..], self.datatype.code());
        LittleEndian::write_i16(&mut b[offsets::BITPIX..], (self.datatype.bytes() * 8) as i16);
        LittleEndian::write_f32_into(&self.pixdim, &mut b[offsets::PIXDIM..offsets::PIXDIM + 32]);
        LittleEndian::write_f32(&mut b[offsets::VOX_OFFSET..], self.vox_offset);
        LittleEndian::write_f32(&mut b[offsets::SCL_SLOPE..], self.scl_slope);
        LittleEndian::write_f32(&mut b[offsets::SCL_INTER..], self.scl_inter);
        // NIFTI_UNITS_MM | NIFTI_UNITS_SEC
        b[offsets::XYZT_UNITS] = 2 | 8;
        let descrip = b"t1q";
        b[offsets::DESCRIP..offsets::DESCRIP + descrip.len()].copy_from_slice(descrip);
        LittleEndian::write_i16(&mut b[offsets::QFORM_CODE..], self.qform_code);
        LittleEndian::write_i16(&mut b[offsets::SFORM_CODE..], self.sform_code);
        LittleEndian::write_f32_into(&self.quatern, &mut b[offsets::QUATERN_B..offsets::QUATERN_B + 12]);
        LittleEndian::write_f32_into(&self.qoffset, &mut b[offsets::QOFFSET_X..offsets::QOFFSET_X + 12]);
        for r in 0..3 {
            let at = offsets::SROW_X + 16 * r;
            LittleEndian::write_f32_into(&self.srow[r], &mut b[at..at + 16]);
        }
        b[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(&self.magic);
        b
    }
}

/// A parsed file: header plus decoded (and scaled) intensities.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub header: NiftiHeader,
    pub volume: Volume3D,
}

/// Decodes a `.nii` byte buffer.
pub fn parse_nifti(bytes: &[u8], allow_non_finite: bool) -> Result<Loaded, NiftiError> {
    let header = NiftiHeader::parse(bytes)?;
    let dims = header.dims();
    let n = dims[0] * dims[1] * dims[2];
    let start = header.vox_offset as usize;
    let width = header.datatype.bytes();
    let needed = start + n * width;
    if bytes.len() < needed {
        return Err(NiftiError::Truncated {
            field: "payload",
            needed,
            got: bytes.len(),
        });
    }
    let raw = &bytes[start..needed];
    let mut data: Vec<f64> = match header.datatype {
        DataType::UInt8 => raw.iter().map(|&v| f64::from(v)).collect(),
        DataType::Int16 => raw
            .chunks_exact(2)
            .map(|c| f64::from(LittleEndian::read_i16(c)))
            .collect(),
        DataType::Float32 => raw
            .chunks_exact(4)
            .map(|c| f64::from(LittleEndian::read_f32(c)))
            .collect(),
        DataType::Float64 => raw.chunks_exact(8).map(LittleEndian::read_f64).collect(),
    };
    if header.has_scaling() {
        let slope = f64::from(header.scl_slope);
        let inter = f64::from(header.scl_inter);
        for v in &mut data {
            *v = slope * *v + inter;
        }
    }
    let geom = Geometry::with_affine(dims, header.spacing(), header.affine())?;
    let volume = if allow_non_finite {
        Volume3D::new_allow_non_finite(geom, data)?
    } else {
        Volume3D::new(geom, data)?
    };
    Ok(Loaded { header, volume })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, NiftiError> {
    fs::read(path).map_err(|source| NiftiError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a single-file NIfTI-1 volume.
pub fn read_nifti(path: impl AsRef<Path>, allow_non_finite: bool) -> Result<Loaded, NiftiError> {
    parse_nifti(&read_bytes(path.as_ref())?, allow_non_finite)
}

/// Reads an intensity volume, rejecting non-finite voxels.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D, NiftiError> {
    Ok(read_nifti(path, false)?.volume)
}

/// Reads a uint8 label file (255 = unlabeled).
pub fn read_labels(path: impl AsRef<Path>) -> Result<SparseLabelVolume, NiftiError> {
    let loaded = read_nifti(path, false)?;
    if loaded.header.datatype != DataType::UInt8 {
        return Err(NiftiError::NotLabels(format!("{:?}", loaded.header.datatype)));
    }
    if loaded.header.has_scaling() {
        return Err(NiftiError::NotLabels("scaled data".into()));
    }
    let geom = loaded.volume.geometry().clone();
    let labels = loaded.volume.data().iter().map(|&v| v as u8).collect();
    Ok(SparseLabelVolume::new(geom, labels)?)
}

/// Encodes a volume as a single-file NIfTI-1 buffer.
pub fn encode_nifti(vol: &Volume3D, datatype: DataType, allow_non_finite: bool) -> Result<Vec<u8>, NiftiError> {
    if !allow_non_finite {
        if let Some(idx) = vol.data().iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(idx).into());
        }
    }
    let header = NiftiHeader::for_volume(vol.geometry(), datatype);
    let mut out = header.encode();
    out.reserve(vol.len() * datatype.bytes());
    let range_err = |index: usize, value: f64| NiftiError::ValueRange {
        index,
        value,
        dtype: datatype,
    };
    for (index, &v) in vol.data().iter().enumerate() {
        match datatype {
            DataType::UInt8 => {
                let r = v.round();
                if !(0.0..=255.0).contains(&r) {
                    return Err(range_err(index, v));
                }
                out.push(r as u8);
            }
            DataType::Int16 => {
                let r = v.round();
                if !(f64::from(i16::MIN)..=f64::from(i16::MAX)).contains(&r) {
                    return Err(range_err(index, v));
                }
                out.extend_from_slice(&(r as i16).to_le_bytes());
            }
            DataType::Float32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            DataType::Float64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(out)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), NiftiError> {
    fs::write(path, bytes).map_err(|source| NiftiError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes a float32 single-file NIfTI-1.
pub fn write_nifti(vol: &Volume3D, path: impl AsRef<Path>) -> Result<(), NiftiError> {
    write_nifti_as(vol, path, DataType::Float32, false)
}

pub fn write_nifti_as(
    vol: &Volume3D,
    path: impl AsRef<Path>,
    datatype: DataType,
    allow_non_finite: bool,
) -> Result<(), NiftiError> {
    write_bytes(path.as_ref(), &encode_nifti(vol, datatype, allow_non_finite)?)
}

/// Writes labels as uint8 (255 = unlabeled).
pub fn write_labels(labels: &SparseLabelVolume, path: impl AsRef<Path>) -> Result<(), NiftiError> {
    let vol = Volume3D::new(
        labels.geometry().clone(),
        labels.labels().iter().map(|&l| f64::from(l)).collect(),
    )?;
    write_nifti_as(&vol, path, DataType::UInt8, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header_bytes(datatype: DataType, dims: [i16; 3]) -> Vec<u8> {
        let g = Geometry::unit([dims[0] as usize, dims[1] as usize, dims[2] as usize]);
        NiftiHeader::for_volume(&g, datatype).encode()
    }

    #[test]
    fn one_voxel_file_is_356_bytes() {
        let v = Volume3D::new(Geometry::unit([1, 1, 1]), vec![0.5]).unwrap();
        let bytes = encode_nifti(&v, DataType::Float32, false).unwrap();
        assert_eq!(bytes.len(), 352 + 4);
        assert_eq!(&bytes[352..], &0.5f32.to_le_bytes());
    }

    #[test]
    fn two_file_magic_is_rejected() {
        let mut b = header_bytes(DataType::Float32, [1, 1, 1]);
        b.extend_from_slice(&[0; 4]);
        b[344..348].copy_from_slice(b"ni1\0");
        let err = parse_nifti(&b, false).unwrap_err();
        assert!(matches!(err, NiftiError::Magic(m) if &m == b"ni1\0"));
        assert!(err.to_string().contains("unsupported magic"));
    }

    #[test]
    fn int16_scaling_applied() {
        let mut b = header_bytes(DataType::Int16, [1, 1, 1]);
        LittleEndian::write_f32(&mut b[offsets::SCL_SLOPE..], 2.0);
        LittleEndian::write_f32(&mut b[offsets::SCL_INTER..], 1.0);
        b.extend_from_slice(&5i16.to_le_bytes());
        let loaded = parse_nifti(&b, false).unwrap();
        assert_eq!(loaded.volume.data(), &[11.0]);
    }

    #[test]
    fn truncated_payload_and_header_name_the_field() {
        let mut b = header_bytes(DataType::Float32, [2, 2, 2]);
        b.extend_from_slice(&[0; 12]);
        match parse_nifti(&b, false).unwrap_err() {
            NiftiError::Truncated { field, needed, got } => {
                assert_eq!(field, "payload");
                assert_eq!(needed, 352 + 32);
                assert_eq!(got, 364);
            }
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(
            parse_nifti(&b[..100], false).unwrap_err(),
            NiftiError::Truncated { field: "header", .. }
        ));
    }

    #[test]
    fn unsupported_datatype_and_frames() {
        let mut b = header_bytes(DataType::Float32, [1, 1, 1]);
        LittleEndian::write_i16(&mut b[offsets::DATATYPE..], 8);
        assert!(matches!(parse_nifti(&b, false).unwrap_err(), NiftiError::Datatype(8)));

        let mut b = header_bytes(DataType::Float32, [1, 1, 1]);
        LittleEndian::write_i16(&mut b[offsets::DIM..], 4);
        LittleEndian::write_i16(&mut b[offsets::DIM + 8..], 3);
        assert!(matches!(parse_nifti(&b, false).unwrap_err(), NiftiError::MultiFrame(3)));
    }

    #[test]
    fn non_finite_guarded_on_write_and_read() {
        let g = Geometry::unit([2, 1, 1]);
        let v = Volume3D::new_allow_non_finite(g, vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(
            encode_nifti(&v, DataType::Float32, false),
            Err(NiftiError::Volume(VolumeError::NonFinite(1)))
        ));
        let bytes = encode_nifti(&v, DataType::Float32, true).unwrap();
        assert!(parse_nifti(&bytes, false).is_err());
        assert!(parse_nifti(&bytes, true).unwrap().volume.data()[1].is_nan());
    }

    #[test]
    fn qform_affine_identity_rotation() {
        let mut h = NiftiHeader::for_volume(&Geometry::unit([2, 2, 2]), DataType::Float32);
        h.sform_code = 0;
        h.qform_code = 1;
        h.pixdim[1] = 2.0;
        h.qoffset = [1.0, 2.0, 3.0];
        let a = h.affine();
        assert_eq!(a[0], [2.0, 0.0, 0.0, 1.0]);
        assert_eq!(a[1], [0.0, 1.0, 0.0, 2.0]);
        assert_eq!(a[2], [0.0, 0.0, 1.0, 3.0]);
    }
}
