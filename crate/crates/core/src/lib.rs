//! Thalamic-nuclei input selection toolkit.
//!
//! * [`volume`]: volumes, sparse labels, NIfTI-1 I/O
//! * [`relaxometry`]: inversion-recovery model, PD/T1 fitting, multi-TI synthesis, phantoms
//! * [`autodiff`]: reverse-mode engine over dense 5D tensors
//! * [`segnet`]: 3D U-Net, Dice loss on sparse labels, Adam, training protocol
//! * [`saliency`]: Monte-Carlo-dropout channel saliency and the overall importance score
//! * [`stats`]: sparse-label TPR, volume-weighted averages, Wilcoxon and Holm

// `!(x > 0.0)` is used on purpose so NaN fails validation; indexed loops
// mirror the tensor index arithmetic.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod relaxometry;
pub mod rng;
pub mod saliency;
pub mod segnet;
pub mod stats;
pub mod volume;
