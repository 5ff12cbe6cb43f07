//! Inversion-recovery signal model.
//!
//! `I = PD * (1 - 2 exp(-TI/T1) + exp(-TR/T1))`, signed.

use super::RelaxError;

/// Bracketed recovery factor `1 - 2 exp(-ti/t1) + exp(-tr/t1)`.
#[inline]
pub fn recovery_factor(t1: f64, ti: f64, tr: f64) -> f64 {
    1.0 - 2.0 * (-ti / t1).exp() + (-tr / t1).exp()
}

/// Signed inversion-recovery intensity.
pub fn ir_signal(pd: f64, t1: f64, ti: f64, tr: f64) -> Result<f64, RelaxError> {
    if !(t1 > 0.0) || !t1.is_finite() {
        return Err(RelaxError::T1Domain(t1));
    }
    if !(ti > 0.0 && ti < tr) {
        return Err(RelaxError::TiRange { ti, tr });
    }
    Ok(pd * recovery_factor(t1, ti, tr))
}

/// Inversion time at which tissue with the given T1 gives zero signal.
///
/// Solved by bisection on `(0, tr)`: the recovery factor is strictly
/// increasing in TI, so the root is unique when it exists.
pub fn null_ti(t1: f64, tr: f64) -> Result<f64, RelaxError> {
    if !(t1 > 0.0) || !t1.is_finite() {
        return Err(RelaxError::T1Domain(t1));
    }
    if !(tr > t1) {
        return Err(RelaxError::NoNull { t1, tr });
    }
    let f = |ti: f64| recovery_factor(t1, ti, tr);
    let (mut lo, mut hi) = (0.0_f64, tr);
    let (flo, fhi) = (f(lo), f(hi));
    if !(flo < 0.0 && fhi > 0.0) {
        return Err(RelaxError::NoNull { t1, tr });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return Ok(mid);
        }
        if fm < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Return whichever end has the smaller residual.
    Ok(if f(lo).abs() <= f(hi).abs() { lo } else { hi })
}
