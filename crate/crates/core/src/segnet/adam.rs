use crate::autodiff::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam step. Weight decay enters as an L2 term added to
/// the gradient (`g + wd * theta`), not decoupled.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64, weight_decay: f64) {
    assert_eq!(params.len(), grads.len(), "parameter and gradient counts differ");
    if state.m.len() != params.len() {
        *state = AdamState::new(params);
    }
    state.t += 1;
    let c1 = 1.0 - BETA1.powi(state.t as i32);
    let c2 = 1.0 - BETA2.powi(state.t as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        assert_eq!(p.shape(), g.shape(), "gradient shape for parameter {i}");
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, (theta, &grad)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let g = grad + weight_decay * *theta;
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * g;
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * g * g;
            let mhat = m[k] / c1;
            let vhat = v[k] / c2;
            *theta -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_step(theta: f64, g: f64, state: &mut AdamState, wd: f64) -> f64 {
        let mut p = [Tensor::scalar(theta)];
        adam_step(&mut p, &[Tensor::scalar(g)], state, 1e-3, wd);
        p[0].data()[0]
    }

    #[test]
    fn first_step() {
        // m_hat = 1 and v_hat = 1 after one step with g = 1.
        let mut s = AdamState::default();
        let th = scalar_step(1.0, 1.0, &mut s, 0.0);
        assert!((th - (1.0 - 1e-3 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((th - 0.999).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut s = AdamState::default();
        assert_eq!(scalar_step(0.37, 0.0, &mut s, 0.0), 0.37);
    }

    #[test]
    fn two_steps_by_hand() {
        let mut s = AdamState::default();
        let mut th = 1.0;
        th = scalar_step(th, 1.0, &mut s, 0.0);
        th = scalar_step(th, 1.0, &mut s, 0.0);
        // m2 = 0.1 * 0.9 + 0.1 = 0.19, v2 = 0.001 * 0.999 + 0.001 = 0.001999.
        let (m2, v2) = (0.19f64, 0.001999f64);
        let step2 = 1e-3 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.998001)).sqrt() + 1e-8);
        let expect = 1.0 - 1e-3 / (1.0 + 1e-8) - step2;
        assert!((th - expect).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_adds_to_gradient() {
        let mut a = AdamState::default();
        let mut b = AdamState::default();
        assert_eq!(scalar_step(2.0, 0.0, &mut a, 0.5), scalar_step(2.0, 1.0, &mut b, 0.0));
    }
}
