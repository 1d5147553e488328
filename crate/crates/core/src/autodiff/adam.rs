use super::{Tensor, TensorError};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Moment accumulators for the Adam optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            first: params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update with a shared learning rate.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<(), TensorError> {
    let lrs = vec![lr; params.len()];
    adam_step_grouped(params, grads, state, &lrs)
}

/// Adam update with a learning rate per parameter tensor.
///
/// A non-finite gradient aborts the update before any parameter changes.
pub fn adam_step_grouped(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lrs: &[f64],
) -> Result<(), TensorError> {
    if params.len() != grads.len() || params.len() != state.first.len() || params.len() != lrs.len() {
        return Err(TensorError::shape("adam_step", (params.len(), 1), (grads.len(), 1)));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first[i].shape() {
            return Err(TensorError::shape("adam_step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(TensorError::NonFiniteGradient(i));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        let lr = lrs[i];
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
            *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *x -= lr * mhat / (vhat.sqrt() + EPSILON);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::filled(2, 2, 0.5)];
        let g = vec![Tensor::filled(2, 2, 1.0)];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, 1e-3).unwrap();
        // m_hat = v_hat = 1 at t = 1
        let expected = 0.5 - 1e-3 / (1.0 + 1e-8);
        for &v in p[0].data() {
            assert!((v - expected).abs() < 1e-15);
        }
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::column(&[1.0, -2.0])];
        let g = vec![Tensor::zeros(2, 1)];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, 1e-2).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn quadratic_magnitude_shrinks() {
        // loss = x^2, grad = 2x
        let mut p = vec![Tensor::scalar(1.0)];
        let mut s = AdamState::new(&p);
        let mut prev = 1.0_f64;
        for _ in 0..2 {
            let g = vec![Tensor::scalar(2.0 * p[0].item())];
            adam_step(&mut p, &g, &mut s, 0.1).unwrap();
            assert!(p[0].item().abs() < prev);
            prev = p[0].item().abs();
        }
        // scalar re-derivation of the recurrence
        let (mut x, mut m, mut v) = (1.0_f64, 0.0, 0.0);
        for t in 1..=2 {
            let g = 2.0 * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            x -= 0.1 * (m / (1.0 - 0.9_f64.powi(t))) / ((v / (1.0 - 0.999_f64.powi(t))).sqrt() + 1e-8);
        }
        let x2 = x;
        assert!((x2 - 0.8004).abs() < 1e-3);
        assert!((prev - x2).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut p, &[Tensor::scalar(f64::NAN)], &mut s, 0.1);
        assert!(matches!(err, Err(TensorError::NonFiniteGradient(0))));
        assert_eq!(p[0].item(), 1.0);
        assert_eq!(s.step, 0);
    }
}
