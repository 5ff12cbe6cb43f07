//! 3D scalar volumes, sparse label volumes and single-file NIfTI-1 I/O.
//!
//! Voxel data is stored x-fastest: the linear index of voxel `(i, j, k)` in a
//! grid of dims `(h, w, l)` is `i + h * (j + w * k)`, which is the NIfTI payload
//! order. Axis 0 (`i`) is the left-right axis used by [`flip_lr`].

pub mod nifti;

use thiserror::Error;

pub use nifti::{
    read_labels, read_nifti, read_volume, write_labels, write_nifti, write_nifti_as, DataType, Loaded, NiftiError,
    NiftiHeader,
};

/// Label value for voxels without a ground-truth annotation.
pub const UNLABELED: u8 = 255;

/// Number of thalamic nuclei in the label set.
pub const NUM_NUCLEI: usize = 13;

/// Nucleus identifiers for labels `1..=13`, in label order.
pub const NUCLEUS_NAMES: [&str; NUM_NUCLEI] = [
    "AN", "CM", "LD", "LP", "MD", "PuA", "PuL", "VA", "VLA", "VLP", "VPL", "VPM", "CL",
];

#[derive(Debug, Error, PartialEq)]
pub enum VolumeError {
    #[error("dims must be positive, got {0:?}")]
    ZeroDim([usize; 3]),
    #[error("data length {got} does not match dims {dims:?} ({expected} voxels)")]
    Length {
        dims: [usize; 3],
        expected: usize,
        got: usize,
    },
    #[error("spacing must be strictly positive, got {0:?}")]
    Spacing([f64; 3]),
    #[error("non-finite intensity at voxel {0}")]
    NonFinite(usize),
    #[error("label value {value} at voxel {index} is neither UNLABELED nor in [0, 13]")]
    LabelRange { index: usize, value: u8 },
    #[error("crop out of bounds on axis {axis}: origin {origin} + size {size} > dim {dim}")]
    CropBounds {
        axis: usize,
        origin: usize,
        size: usize,
        dim: usize,
    },
    #[error("crop size must be positive on axis {0}")]
    CropEmpty(usize),
    #[error("dims mismatch: {0:?} vs {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),
}

/// Grid geometry shared by images and label maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Row-major 4x4 voxel-to-world matrix.
    pub affine: [[f64; 4]; 4],
}

impl Geometry {
    /// Axis-aligned geometry with the affine set to `diag(spacing, 1)`.
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self, VolumeError> {
        let mut affine = [[0.0; 4]; 4];
        for a in 0..3 {
            affine[a][a] = spacing[a];
        }
        affine[3][3] = 1.0;
        Self::with_affine(dims, spacing, affine)
    }

    pub fn with_affine(dims: [usize; 3], spacing: [f64; 3], affine: [[f64; 4]; 4]) -> Result<Self, VolumeError> {
        if dims.contains(&0) {
            return Err(VolumeError::ZeroDim(dims));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(VolumeError::Spacing(spacing));
        }
        Ok(Self { dims, spacing, affine })
    }

    /// Isotropic 1 mm grid.
    pub fn unit(dims: [usize; 3]) -> Self {
        Self::new(dims, [1.0; 3]).expect("positive dims")
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let i = index % self.dims[0];
        let rest = index / self.dims[0];
        (i, rest % self.dims[1], rest / self.dims[1])
    }

    /// World position of a (possibly fractional) voxel coordinate.
    pub fn world(&self, ijk: [f64; 3]) -> [f64; 3] {
        let a = &self.affine;
        let mut out = [0.0; 3];
        for (r, o) in out.iter_mut().enumerate() {
            *o = a[r][0] * ijk[0] + a[r][1] * ijk[1] + a[r][2] * ijk[2] + a[r][3];
        }
        out
    }

    fn check_crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<(), VolumeError> {
        for axis in 0..3 {
            if size[axis] == 0 {
                return Err(VolumeError::CropEmpty(axis));
            }
            if origin[axis] + size[axis] > self.dims[axis] {
                return Err(VolumeError::CropBounds {
                    axis,
                    origin: origin[axis],
                    size: size[axis],
                    dim: self.dims[axis],
                });
            }
        }
        Ok(())
    }

    /// Geometry of a sub-grid starting at `origin`; world positions of the
    /// retained voxels are unchanged.
    fn cropped(&self, origin: [usize; 3], size: [usize; 3]) -> Geometry {
        let mut affine = self.affine;
        let shift = self.world([origin[0] as f64, origin[1] as f64, origin[2] as f64]);
        for r in 0..3 {
            affine[r][3] = shift[r];
        }
        Geometry {
            dims: size,
            spacing: self.spacing,
            affine,
        }
    }
}

fn gather<T: Copy>(geom: &Geometry, data: &[T], origin: [usize; 3], size: [usize; 3]) -> Vec<T> {
    let mut out = Vec::with_capacity(size[0] * size[1] * size[2]);
    for k in 0..size[2] {
        for j in 0..size[1] {
            let start = geom.index(origin[0], origin[1] + j, origin[2] + k);
            out.extend_from_slice(&data[start..start + size[0]]);
        }
    }
    out
}

fn reverse_axis0<T: Copy>(dims: [usize; 3], data: &[T]) -> Vec<T> {
    let mut out = data.to_vec();
    for row in out.chunks_mut(dims[0]) {
        row.reverse();
    }
    out
}

/// Single-channel scalar volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    geom: Geometry,
    data: Vec<f64>,
}

impl Volume3D {
    /// Builds a volume, rejecting non-finite intensities.
    pub fn new(geom: Geometry, data: Vec<f64>) -> Result<Self, VolumeError> {
        let vol = Self::new_allow_non_finite(geom, data)?;
        if let Some(idx) = vol.data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(idx));
        }
        Ok(vol)
    }

    /// Builds a volume without the finiteness check.
    pub fn new_allow_non_finite(geom: Geometry, data: Vec<f64>) -> Result<Self, VolumeError> {
        if data.len() != geom.len() {
            return Err(VolumeError::Length {
                dims: geom.dims,
                expected: geom.len(),
                got: data.len(),
            });
        }
        Ok(Self { geom, data })
    }

    pub fn filled(geom: Geometry, value: f64) -> Self {
        let n = geom.len();
        Self {
            geom,
            data: vec![value; n],
        }
    }

    pub fn from_fn(geom: Geometry, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let data = (0..geom.len())
            .map(|idx| {
                let (i, j, k) = geom.coords(idx);
                f(i, j, k)
            })
            .collect();
        Self { geom, data }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geom.spacing
    }

    pub fn affine(&self) -> &[[f64; 4]; 4] {
        &self.geom.affine
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.geom.index(i, j, k)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same geometry, new voxel values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self, VolumeError> {
        Self::new(self.geom.clone(), data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            geom: self.geom.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Extracts the box `[origin, origin + size)`.
pub fn crop(vol: &Volume3D, origin: [usize; 3], size: [usize; 3]) -> Result<Volume3D, VolumeError> {
    vol.geom.check_crop(origin, size)?;
    Ok(Volume3D {
        geom: vol.geom.cropped(origin, size),
        data: gather(&vol.geom, &vol.data, origin, size),
    })
}

/// Mirrors along the left-right axis (axis 0).
///
/// The affine is left untouched: this is an augmentation of image content,
/// not a change of coordinate frame.
pub fn flip_lr(vol: &Volume3D) -> Volume3D {
    Volume3D {
        geom: vol.geom.clone(),
        data: reverse_axis0(vol.geom.dims, &vol.data),
    }
}

/// Per-voxel labels with an explicit unlabeled state.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseLabelVolume {
    geom: Geometry,
    labels: Vec<u8>,
    class_names: Vec<String>,
}

impl SparseLabelVolume {
    pub fn new(geom: Geometry, labels: Vec<u8>) -> Result<Self, VolumeError> {
        if labels.len() != geom.len() {
            return Err(VolumeError::Length {
                dims: geom.dims,
                expected: geom.len(),
                got: labels.len(),
            });
        }
        if let Some((index, &value)) = labels
            .iter()
            .enumerate()
            .find(|(_, &v)| v != UNLABELED && v as usize > NUM_NUCLEI)
        {
            return Err(VolumeError::LabelRange { index, value });
        }
        Ok(Self {
            geom,
            labels,
            class_names: NUCLEUS_NAMES.iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn unlabeled(geom: Geometry) -> Self {
        let n = geom.len();
        Self {
            geom,
            labels: vec![UNLABELED; n],
            class_names: NUCLEUS_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Nucleus names for labels `1..=13`.
    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != UNLABELED).count()
    }

    /// Labeled voxel count per class `0..=13`.
    pub fn class_counts(&self) -> [usize; NUM_NUCLEI + 1] {
        let mut counts = [0usize; NUM_NUCLEI + 1];
        for &l in &self.labels {
            if l != UNLABELED {
                counts[l as usize] += 1;
            }
        }
        counts
    }
}

pub fn crop_labels(
    labels: &SparseLabelVolume,
    origin: [usize; 3],
    size: [usize; 3],
) -> Result<SparseLabelVolume, VolumeError> {
    labels.geom.check_crop(origin, size)?;
    Ok(SparseLabelVolume {
        geom: labels.geom.cropped(origin, size),
        labels: gather(&labels.geom, &labels.labels, origin, size),
        class_names: labels.class_names.clone(),
    })
}

pub fn flip_lr_labels(labels: &SparseLabelVolume) -> SparseLabelVolume {
    SparseLabelVolume {
        geom: labels.geom.clone(),
        labels: reverse_axis0(labels.geom.dims, &labels.labels),
        class_names: labels.class_names.clone(),
    }
}
