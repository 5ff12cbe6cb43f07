//! Per-voxel (PD, T1) estimation from an MPRAGE/FGATIR pair.
//!
//! Two acquisitions differing only in TI give `i1 = PD f(ti1, T1)` and
//! `i2 = PD f(ti2, T1)`. PD cancels in the cross-multiplied residual
//!
//! ```text
//! h(T1) = i2 f(ti1, T1) - i1 f(ti2, T1)
//! ```
//!
//! whose root is located by a 1 ms scan over the T1 bracket followed by
//! bisection. The scan grid is shared by all voxels, so the recovery factors
//! on the grid are tabulated once per fit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::signal::recovery_factor;
use super::{AcqParams, RelaxError};
use crate::volume::{Geometry, Volume3D};

/// Scan resolution in ms.
const SCAN_STEP: f64 = 1.0;
/// Bisection stops once the bracket is narrower than this fraction of T1.
const BISECT_REL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct T1Bracket {
    pub min: f64,
    pub max: f64,
}

impl Default for T1Bracket {
    fn default() -> Self {
        Self {
            min: 50.0,
            max: 10_000.0,
        }
    }
}

impl T1Bracket {
    pub fn new(min: f64, max: f64) -> Result<Self, RelaxError> {
        if !(min > 0.0 && max > min && max.is_finite()) {
            return Err(RelaxError::Bracket { min, max });
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, t1: f64) -> bool {
        t1 >= self.min && t1 <= self.max
    }
}

/// Outcome of a voxel fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FitStatus {
    Ok,
    /// No sign change of the residual inside the bracket.
    OutOfBracket,
    /// Zero, non-finite or physically inconsistent input (negative PD).
    Degenerate,
    /// More than one root, or no unique polarity in magnitude mode.
    Ambiguous,
}

impl FitStatus {
    /// Code used in status NIfTI files.
    pub fn code(self) -> u8 {
        match self {
            FitStatus::Ok => 0,
            FitStatus::OutOfBracket => 1,
            FitStatus::Degenerate => 2,
            FitStatus::Ambiguous => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(FitStatus::Ok),
            1 => Some(FitStatus::OutOfBracket),
            2 => Some(FitStatus::Degenerate),
            3 => Some(FitStatus::Ambiguous),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelFit {
    pub pd: f64,
    pub t1: f64,
    pub status: FitStatus,
}

impl VoxelFit {
    fn failed(status: FitStatus) -> Self {
        Self {
            pd: 0.0,
            t1: 0.0,
            status,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FitOptions {
    pub bracket: T1Bracket,
    /// Inputs are magnitude images; restore the FGATIR polarity.
    pub magnitude: bool,
}

/// Recovery factors of both acquisitions tabulated on the scan grid.
#[derive(Debug, Clone)]
pub struct FitTable {
    acq: AcqParams,
    t1: Vec<f64>,
    f1: Vec<f64>,
    f2: Vec<f64>,
}

impl FitTable {
    pub fn new(acq: AcqParams, bracket: T1Bracket) -> Self {
        let steps = ((bracket.max - bracket.min) / SCAN_STEP).floor() as usize;
        let mut t1: Vec<f64> = (0..=steps).map(|k| bracket.min + k as f64 * SCAN_STEP).collect();
        if *t1.last().expect("non-empty grid") < bracket.max {
            t1.push(bracket.max);
        }
        let f1 = t1.iter().map(|&t| recovery_factor(t, acq.ti1, acq.tr)).collect();
        let f2 = t1.iter().map(|&t| recovery_factor(t, acq.ti2, acq.tr)).collect();
        Self { acq, t1, f1, f2 }
    }

    #[inline]
    fn residual(&self, i1: f64, i2: f64, t1: f64) -> f64 {
        i2 * recovery_factor(t1, self.acq.ti1, self.acq.tr) - i1 * recovery_factor(t1, self.acq.ti2, self.acq.tr)
    }

    /// Bracketing grid intervals `(lo, hi)` of the residual's sign changes.
    /// A run of exact zeros touching a bracket end counts as a root there.
    fn sign_changes(&self, i1: f64, i2: f64) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut prev: Option<(usize, bool)> = None;
        let mut zero_run: Option<usize> = None;
        for k in 0..self.t1.len() {
            let h = i2 * self.f1[k] - i1 * self.f2[k];
            if h == 0.0 {
                zero_run.get_or_insert(k);
                continue;
            }
            let negative = h < 0.0;
            match prev {
                Some((pk, was_negative)) if was_negative != negative => out.push((pk, k)),
                None if zero_run.is_some() => out.push((0, 0)),
                _ => {}
            }
            zero_run = None;
            prev = Some((k, negative));
        }
        if let Some(z) = zero_run {
            out.push((z, z));
        }
        out
    }

    fn bisect(&self, i1: f64, i2: f64, lo_k: usize, hi_k: usize) -> f64 {
        let (mut lo, mut hi) = (self.t1[lo_k], self.t1[hi_k]);
        if lo == hi {
            return lo;
        }
        let lo_negative = self.residual(i1, i2, lo) < 0.0;
        for _ in 0..200 {
            if hi - lo <= BISECT_REL_TOL * lo {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let h = self.residual(i1, i2, mid);
            if h == 0.0 {
                return mid;
            }
            if (h < 0.0) == lo_negative {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Fits one voxel from signed intensities.
    pub fn fit_signed(&self, i1: f64, i2: f64) -> VoxelFit {
        if !i1.is_finite() || !i2.is_finite() || (i1 == 0.0 && i2 == 0.0) {
            return VoxelFit::failed(FitStatus::Degenerate);
        }
        let roots = self.sign_changes(i1, i2);
        match roots.len() {
            0 => VoxelFit::failed(FitStatus::OutOfBracket),
            1 => {
                let (lo, hi) = roots[0];
                let t1 = self.bisect(i1, i2, lo, hi);
                let f1 = recovery_factor(t1, self.acq.ti1, self.acq.tr);
                let f2 = recovery_factor(t1, self.acq.ti2, self.acq.tr);
                let pd = if f1.abs() >= f2.abs() { i1 / f1 } else { i2 / f2 };
                if !(pd >= 0.0) || !pd.is_finite() {
                    return VoxelFit::failed(FitStatus::Degenerate);
                }
                VoxelFit {
                    pd,
                    t1,
                    status: FitStatus::Ok,
                }
            }
            _ => VoxelFit::failed(FitStatus::Ambiguous),
        }
    }

    /// Fits one voxel from magnitude intensities by trying both FGATIR signs.
    /// Exactly one sign must give a valid fit; otherwise the voxel is ambiguous.
    pub fn fit_magnitude(&self, i1: f64, i2: f64) -> VoxelFit {
        if !i1.is_finite() || !i2.is_finite() || (i1 == 0.0 && i2 == 0.0) {
            return VoxelFit::failed(FitStatus::Degenerate);
        }
        let plus = self.fit_signed(i1.abs(), i2.abs());
        let minus = self.fit_signed(i1.abs(), -i2.abs());
        match (plus.status, minus.status) {
            (FitStatus::Ok, FitStatus::Ok) => VoxelFit::failed(FitStatus::Ambiguous),
            (FitStatus::Ok, _) => plus,
            (_, FitStatus::Ok) => minus,
            _ => VoxelFit::failed(FitStatus::Ambiguous),
        }
    }

    pub fn fit(&self, i1: f64, i2: f64, magnitude: bool) -> VoxelFit {
        if magnitude {
            self.fit_magnitude(i1, i2)
        } else {
            self.fit_signed(i1, i2)
        }
    }
}

/// Fits a single voxel. Failures are reported through the status.
pub fn fit_pd_t1(i1: f64, i2: f64, acq: &AcqParams, bracket: T1Bracket) -> VoxelFit {
    FitTable::new(*acq, bracket).fit_signed(i1, i2)
}

/// Co-registered PD and T1 maps with per-voxel fit status.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantMaps {
    pub pd: Volume3D,
    pub t1: Volume3D,
    pub status: Vec<FitStatus>,
}

impl QuantMaps {
    pub fn geometry(&self) -> &Geometry {
        self.pd.geometry()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.pd.dims()
    }

    pub fn is_ok(&self, idx: usize) -> bool {
        self.status[idx] == FitStatus::Ok
    }

    pub fn ok_count(&self) -> usize {
        self.status.iter().filter(|&&s| s == FitStatus::Ok).count()
    }

    /// Status codes as a volume (see [`FitStatus::code`]).
    pub fn status_volume(&self) -> Volume3D {
        Volume3D::new(
            self.geometry().clone(),
            self.status.iter().map(|s| f64::from(s.code())).collect(),
        )
        .expect("status codes are finite")
    }

    /// Rebuilds maps from stored volumes.
    pub fn from_volumes(pd: Volume3D, t1: Volume3D, status: &Volume3D) -> Result<Self, RelaxError> {
        if pd.dims() != t1.dims() || pd.dims() != status.dims() {
            return Err(RelaxError::DimMismatch(pd.dims(), t1.dims()));
        }
        let status = status
            .data()
            .iter()
            .map(|&c| {
                FitStatus::from_code(c as u8)
                    .filter(|_| c >= 0.0 && c.fract() == 0.0)
                    .ok_or(RelaxError::StatusCode(c))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { pd, t1, status })
    }
}

/// Voxel-wise fit of a co-registered MPRAGE/FGATIR pair.
///
/// Voxels where `mask` is zero are marked degenerate. Runs on the current
/// rayon pool; each voxel is independent, so the output does not depend on
/// the thread count.
pub fn fit_maps(
    mprage: &Volume3D,
    fgatir: &Volume3D,
    acq: &AcqParams,
    opts: &FitOptions,
    mask: Option<&Volume3D>,
) -> Result<QuantMaps, RelaxError> {
    acq.validate()?;
    if mprage.dims() != fgatir.dims() {
        return Err(RelaxError::DimMismatch(mprage.dims(), fgatir.dims()));
    }
    if let Some(m) = mask {
        if m.dims() != mprage.dims() {
            return Err(RelaxError::DimMismatch(mprage.dims(), m.dims()));
        }
    }
    let table = FitTable::new(*acq, opts.bracket);
    let fits: Vec<VoxelFit> = mprage
        .data()
        .par_iter()
        .zip(fgatir.data().par_iter())
        .enumerate()
        .map(|(idx, (&i1, &i2))| {
            if mask.is_some_and(|m| m.data()[idx] == 0.0) {
                return VoxelFit::failed(FitStatus::Degenerate);
            }
            table.fit(i1, i2, opts.magnitude)
        })
        .collect();
    let geom = mprage.geometry().clone();
    let pd = Volume3D::new(geom.clone(), fits.iter().map(|f| f.pd).collect())?;
    let t1 = Volume3D::new(geom, fits.iter().map(|f| f.t1).collect())?;
    Ok(QuantMaps {
        pd,
        t1,
        status: fits.iter().map(|f| f.status).collect(),
    })
}
