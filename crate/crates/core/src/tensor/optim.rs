//! Heavy-ball SGD with coupled weight decay and the poly learning-rate policy.

use super::Tensor;
use crate::error::{arg_err, dim_err, Result};

pub const POLY_POWER: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub const DEFAULT_MOMENTUM: f64 = 0.9;
    pub const DEFAULT_WEIGHT_DECAY: f64 = 0.0005;

    /// One zeroed momentum buffer per parameter tensor.
    pub fn new<'a>(
        params: impl IntoIterator<Item = &'a Tensor>,
        momentum: f64,
        weight_decay: f64,
    ) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: params.into_iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn with_defaults<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        Self::new(params, Self::DEFAULT_MOMENTUM, Self::DEFAULT_WEIGHT_DECAY)
    }

    pub fn buffers(&self) -> &[Vec<f64>] {
        &self.buffers
    }
}

/// `buf ← momentum·buf + grad + weight_decay·param; param ← param − lr·buf`
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if lr.is_nan() || lr < 0.0 {
        return Err(arg_err!("sgd_step: learning rate must be >= 0, got {lr}"));
    }
    if params.len() != grads.len() || params.len() != state.buffers.len() {
        return Err(dim_err!(
            "sgd_step: {} params, {} grads, {} momentum buffers",
            params.len(),
            grads.len(),
            state.buffers.len()
        ));
    }
    for (i, ((p, g), buf)) in params.iter().zip(grads).zip(&state.buffers).enumerate() {
        if p.numel() != g.len() || p.numel() != buf.len() {
            return Err(dim_err!(
                "sgd_step: parameter {i} has {} values, grad {}, buffer {}",
                p.numel(),
                g.len(),
                buf.len()
            ));
        }
    }
    let (mu, wd) = (state.momentum, state.weight_decay);
    for ((p, g), buf) in params.iter_mut().zip(grads).zip(state.buffers.iter_mut()) {
        for ((w, gi), b) in p.data_mut().iter_mut().zip(g).zip(buf.iter_mut()) {
            *b = mu * *b + gi + wd * *w;
            *w -= lr * *b;
        }
    }
    Ok(())
}

/// `base_lr · (1 − iter/max_iter)^0.9`
pub fn poly_lr(base_lr: f64, iter: usize, max_iter: usize) -> Result<f64> {
    poly_lr_with_power(base_lr, iter, max_iter, POLY_POWER)
}

pub fn poly_lr_with_power(base_lr: f64, iter: usize, max_iter: usize, power: f64) -> Result<f64> {
    if max_iter == 0 {
        return Err(arg_err!("poly_lr: max_iter must be positive"));
    }
    if iter > max_iter {
        return Err(arg_err!("poly_lr: iter {iter} exceeds max_iter {max_iter}"));
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_only_updates_buffers() {
        let mut p = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
        let before = p.clone();
        let mut st = OptimizerState::with_defaults([&p]);
        sgd_step(&mut [&mut p], &[vec![0.5, 0.25]], &mut st, 0.0).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.buffers()[0], vec![0.5 + 0.0005, 0.25 - 0.001]);
    }

    #[test]
    fn vanilla_sgd() {
        let mut p = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut st = OptimizerState::new([&p], 0.0, 0.0);
        sgd_step(&mut [&mut p], &[vec![1.0, -1.0, 0.5]], &mut st, 0.1).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.1, 2.0 + 0.1, 3.0 - 0.1 * 0.5]);
    }

    #[test]
    fn two_momentum_steps_match_unrolled_recurrence() {
        let (w0, g1, g2, lr, mu, wd) = (0.8_f64, 0.3_f64, -0.2_f64, 0.05, 0.9, 0.0005);
        let b1 = g1 + wd * w0;
        let w1 = w0 - lr * b1;
        let b2 = mu * b1 + g2 + wd * w1;
        let w2 = w1 - lr * b2;

        let mut p = Tensor::scalar(w0);
        let mut st = OptimizerState::with_defaults([&p]);
        sgd_step(&mut [&mut p], &[vec![g1]], &mut st, lr).unwrap();
        assert_eq!(p.item(), w1);
        sgd_step(&mut [&mut p], &[vec![g2]], &mut st, lr).unwrap();
        assert_eq!(p.item(), w2);
        assert_eq!(st.buffers()[0][0], b2);
    }

    #[test]
    fn shape_and_lr_errors() {
        let mut p = Tensor::zeros(&[2]);
        let mut st = OptimizerState::with_defaults([&p]);
        assert!(sgd_step(&mut [&mut p], &[vec![0.0; 3]], &mut st, 0.1).is_err());
        assert!(sgd_step(&mut [&mut p], &[vec![0.0; 2]], &mut st, -1.0).is_err());
    }

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(0.04, 0, 1000).unwrap(), 0.04);
        assert_eq!(poly_lr(0.3, 50, 50).unwrap(), 0.0);
        let expected = 0.01 * 0.5f64.powf(0.9);
        assert!((poly_lr(0.01, 500, 1000).unwrap() - expected).abs() < 1e-18);
        assert!(poly_lr(0.01, 1001, 1000).is_err());
        assert!(poly_lr(0.01, 0, 0).is_err());
    }
}
