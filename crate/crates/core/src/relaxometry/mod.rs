//! Inversion-recovery relaxometry: signal model, PD/T1 fitting, multi-TI
//! synthesis, input-stack assembly and a synthetic phantom generator.

pub mod fit;
pub mod phantom;
pub mod signal;
pub mod synth;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::VolumeError;

pub use fit::{fit_maps, fit_pd_t1, FitOptions, FitStatus, FitTable, QuantMaps, T1Bracket, VoxelFit};
pub use phantom::{make_phantom, Phantom, PhantomSpec, Region, Tissue};
pub use signal::{ir_signal, null_ti, recovery_factor};
pub use synth::{
    build_input_stack, synthesize_series, synthesize_ti, wm_mean_normalize, ChannelKind, ChannelMeta, ChannelSource,
    ChannelStack, InputConfig, SeriesSpec, StackSources,
};

#[derive(Debug, Error, PartialEq)]
pub enum RelaxError {
    #[error("T1 must be positive and finite, got {0}")]
    T1Domain(f64),
    #[error("TI {ti} must lie in (0, TR = {tr})")]
    TiRange { ti: f64, tr: f64 },
    #[error("no null point in (0, TR) for T1 = {t1}, TR = {tr}")]
    NoNull { t1: f64, tr: f64 },
    #[error("acquisition must satisfy 0 < ti2 < ti1 < tr, got ti1 = {ti1}, ti2 = {ti2}, tr = {tr}")]
    Acquisition { ti1: f64, ti2: f64, tr: f64 },
    #[error("invalid T1 bracket [{min}, {max}]")]
    Bracket { min: f64, max: f64 },
    #[error("dims mismatch: {0:?} vs {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),
    #[error("invalid fit status code {0}")]
    StatusCode(f64),
    #[error("degenerate TI range: start {start}, end {end}, step {step}")]
    Range { start: f64, end: f64, step: f64 },
    #[error("empty mask")]
    EmptyMask,
    #[error("mean over mask is zero or non-finite ({0})")]
    ZeroMean(f64),
    #[error("missing source for channel {0}")]
    MissingSource(String),
    #[error("invalid phantom spec: {0}")]
    Phantom(String),
    #[error("unknown input configuration {0:?}")]
    UnknownConfig(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Inversion and repetition times in ms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcqParams {
    /// MPRAGE inversion time.
    pub ti1: f64,
    /// FGATIR inversion time.
    pub ti2: f64,
    pub tr: f64,
}

impl Default for AcqParams {
    fn default() -> Self {
        Self {
            ti1: 1400.0,
            ti2: 400.0,
            tr: 4000.0,
        }
    }
}

impl AcqParams {
    pub fn new(ti1: f64, ti2: f64, tr: f64) -> Result<Self, RelaxError> {
        let acq = Self { ti1, ti2, tr };
        acq.validate()?;
        Ok(acq)
    }

    pub fn validate(&self) -> Result<(), RelaxError> {
        if 0.0 < self.ti2 && self.ti2 < self.ti1 && self.ti1 < self.tr && self.tr.is_finite() {
            Ok(())
        } else {
            Err(RelaxError::Acquisition {
                ti1: self.ti1,
                ti2: self.ti2,
                tr: self.tr,
            })
        }
    }
}
