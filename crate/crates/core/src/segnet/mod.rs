//! 3D U-Net segmenter, sparse-label Dice loss, Adam, augmentation, the
//! plateau schedule and cross-validation folds.
//!
//! Volumes are stored x-fastest with dims `(H, W, L)`; tensors are
//! width-fastest `[N, C, D, H, W]`. The flat orders coincide, so a volume maps
//! onto tensor spatial shape `(L, W, H)` without copying voxels around.

pub mod adam;
pub mod augment;
pub mod folds;
pub mod loss;
pub mod predict;
pub mod schedule;
pub mod train;
pub mod unet;

use thiserror::Error;

use crate::autodiff::{AdError, Tensor};
use crate::relaxometry::{ChannelStack, RelaxError};
use crate::volume::{Geometry, SparseLabelVolume, VolumeError, UNLABELED};

pub use adam::{adam_step, AdamState};
pub use augment::{augment, AugmentConfig, AugmentParams};
pub use folds::{make_folds, Fold, FoldPlan};
pub use loss::{dice_loss, dice_loss_with_grad, LabelTargets};
pub use predict::{predict, Prediction};
pub use schedule::{PlateauSchedule, ScheduleEvent};
pub use train::{train, StopReason, Subject, TrainConfig, TrainOutcome, TrainReport};
pub use unet::{build_unet, SegModel, UNetConfig};

#[derive(Debug, Error, PartialEq)]
pub enum SegError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("no labeled voxels")]
    NoLabels,
    #[error("{0} set is empty")]
    EmptySplit(&'static str),
    #[error("fold planning: {0}")]
    Folds(String),
    #[error("unknown subject {0:?}")]
    UnknownSubject(String),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Relax(#[from] RelaxError),
}

/// Tensor shape holding `channels` volumes of the given dims.
pub fn tensor_shape(dims: [usize; 3], channels: usize) -> [usize; 5] {
    [1, channels, dims[2], dims[1], dims[0]]
}

/// Multi-channel image with its sparse labels, in volume layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub dims: [usize; 3],
    pub channels: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

impl Sample {
    pub fn new(dims: [usize; 3], channels: Vec<Vec<f64>>, labels: Vec<u8>) -> Result<Self, SegError> {
        let n: usize = dims.iter().product();
        if n == 0 || channels.is_empty() {
            return Err(SegError::Shape(format!(
                "empty sample: dims {dims:?}, {} channels",
                channels.len()
            )));
        }
        if let Some(c) = channels.iter().position(|c| c.len() != n) {
            return Err(SegError::Shape(format!(
                "channel {c} has {} voxels, expected {n}",
                channels[c].len()
            )));
        }
        if labels.len() != n {
            return Err(SegError::Shape(format!(
                "labels have {} voxels, expected {n}",
                labels.len()
            )));
        }
        Ok(Self { dims, channels, labels })
    }

    pub fn from_stack(stack: &ChannelStack, labels: &SparseLabelVolume) -> Result<Self, SegError> {
        let dims = stack
            .dims()
            .ok_or_else(|| SegError::Shape("empty channel stack".into()))?;
        if dims != labels.dims() {
            return Err(SegError::Shape(format!("stack {dims:?} vs labels {:?}", labels.dims())));
        }
        let channels = stack.channels().iter().map(|v| v.data().to_vec()).collect();
        Self::new(dims, channels, labels.labels().to_vec())
    }

    /// Image-only sample (every voxel unlabeled).
    pub fn from_stack_unlabeled(stack: &ChannelStack) -> Result<Self, SegError> {
        let dims = stack
            .dims()
            .ok_or_else(|| SegError::Shape("empty channel stack".into()))?;
        let channels = stack.channels().iter().map(|v| v.data().to_vec()).collect();
        Self::new(dims, channels, vec![UNLABELED; dims.iter().product()])
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.channels.iter().flatten().copied().collect();
        Tensor::new(tensor_shape(self.dims, self.channels.len()), data).expect("sample tensor")
    }

    pub fn label_volume(&self) -> Result<SparseLabelVolume, SegError> {
        Ok(SparseLabelVolume::new(Geometry::unit(self.dims), self.labels.clone())?)
    }

    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Self, SegError> {
        for a in 0..3 {
            if size[a] == 0 || origin[a] + size[a] > self.dims[a] {
                return Err(SegError::Shape(format!(
                    "crop axis {a}: origin {} + size {} exceeds {}",
                    origin[a], size[a], self.dims[a]
                )));
            }
        }
        let [h, w, _] = self.dims;
        let pick = |src: &[f64]| -> Vec<f64> {
            let mut out = Vec::with_capacity(size.iter().product());
            for k in 0..size[2] {
                for j in 0..size[1] {
                    let row = origin[0] + h * (origin[1] + j + w * (origin[2] + k));
                    out.extend_from_slice(&src[row..row + size[0]]);
                }
            }
            out
        };
        let channels = self.channels.iter().map(|c| pick(c)).collect();
        let mut labels = Vec::with_capacity(size.iter().product());
        for k in 0..size[2] {
            for j in 0..size[1] {
                let row = origin[0] + h * (origin[1] + j + w * (origin[2] + k));
                labels.extend_from_slice(&self.labels[row..row + size[0]]);
            }
        }
        Self::new(size, channels, labels)
    }

    /// Central crop; odd margins put the extra voxel after the crop.
    pub fn center_crop(&self, size: [usize; 3]) -> Result<Self, SegError> {
        let mut origin = [0; 3];
        for a in 0..3 {
            if size[a] > self.dims[a] {
                return Err(SegError::Shape(format!(
                    "crop {} exceeds dim {} on axis {a}",
                    size[a], self.dims[a]
                )));
            }
            origin[a] = (self.dims[a] - size[a]) / 2;
        }
        self.crop(origin, size)
    }
}
