//! AdamW and the cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Hyperparameters of the decoupled-weight-decay Adam update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.9,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moments of every parameter and the number of steps taken. Each tensor
/// carries its own hyperparameters.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub hyper: Vec<AdamW>,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Element> OptimState<T> {
    pub fn new(hyper: AdamW, params: &[Tensor<T>]) -> Self {
        Self::grouped(vec![hyper; params.len()], params)
    }

    /// One set of hyperparameters per tensor.
    pub fn grouped(hyper: Vec<AdamW>, params: &[Tensor<T>]) -> Self {
        assert_eq!(hyper.len(), params.len(), "one AdamW per tensor");
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        OptimState {
            hyper,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One AdamW step at learning rate `lr`. A missing gradient counts as zero.
pub fn adamw_step<T: Element>(
    params: &mut [Tensor<T>],
    grads: &[Option<&Tensor<T>>],
    state: &mut OptimState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.hyper.len() {
        return Err(Error::shape("adamw_step", params.len(), grads.len()));
    }
    for (p, g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::shape("adamw_step", p.shape(), g.shape()));
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let moments = state.m.iter_mut().zip(state.v.iter_mut()).zip(&state.hyper);
    for ((p, g), ((m, v), h)) in params.iter_mut().zip(grads).zip(moments) {
        let c1 = 1.0 / (1.0 - h.beta1.powi(t));
        let c2 = 1.0 / (1.0 - h.beta2.powi(t));
        let (b1, b2) = (T::of(h.beta1), T::of(h.beta2));
        let (ob1, ob2) = (T::of(1.0 - h.beta1), T::of(1.0 - h.beta2));
        let decay = T::of(1.0 - lr * h.weight_decay);
        let (step, c2, eps) = (T::of(lr * c1), T::of(c2), T::of(h.eps));
        let (m, v, p) = (m.data_mut(), v.data_mut(), p.data_mut());
        for i in 0..p.len() {
            let gi = g.map_or(T::zero(), |g| g.data()[i]);
            m[i] = b1 * m[i] + ob1 * gi;
            v[i] = b2 * v[i] + ob2 * gi * gi;
            p[i] = p[i] * decay - step * m[i] / ((v[i] * c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// `lr_min + (lr_max − lr_min)·(1 + cos(π·step/total))/2`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if step > total {
        return Err(Error::InvalidArgument(format!("step {step} beyond schedule of {total}")));
    }
    if total == 0 {
        return Ok(lr_max);
    }
    let phase = PI * step as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    /// Textbook scalar AdamW.
    fn reference(p0: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64, wd: f64) -> f64 {
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for (k, g) in grads.iter().enumerate() {
            let t = (k + 1) as i32;
            p -= lr * wd * p;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            p -= lr * mh / (vh.sqrt() + eps);
        }
        p
    }

    #[test]
    fn matches_scalar_reference() {
        let grads = [0.3, -1.2, 0.05, 2.0, -0.7];
        for wd in [0.0, 0.1] {
            let hyper = AdamW {
                weight_decay: wd,
                ..AdamW::default()
            };
            let mut params = vec![Tensor::<f64>::vector(&[0.8])];
            let mut state = OptimState::new(hyper, &params);
            for g in grads {
                let gt = Tensor::vector(&[g]);
                adamw_step(&mut params, &[Some(&gt)], &mut state, 1e-2).unwrap();
            }
            let want = reference(0.8, &grads, 1e-2, 0.9, 0.9, 1e-8, wd);
            assert!((params[0].item() - want).abs() < 1e-14);
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = vec![Tensor::<f64>::vector(&[1.0, 1.0])];
        let mut state = OptimState::new(AdamW::default(), &params);
        let g = Tensor::vector(&[3.0, -1e-3]);
        adamw_step(&mut params, &[Some(&g)], &mut state, 1e-3).unwrap();
        assert!((params[0].data()[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((params[0].data()[1] - (1.0 + 1e-3)).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = vec![Tensor::<f32>::full(Shape::new(1, 2, 2, 2), 0.5)];
        let mut state = OptimState::new(AdamW::default(), &params);
        let z = Tensor::zeros(Shape::new(1, 2, 2, 2));
        for _ in 0..3 {
            adamw_step(&mut params, &[Some(&z)], &mut state, 1e-3).unwrap();
        }
        adamw_step(&mut params, &[None], &mut state, 1e-3).unwrap();
        assert!(params[0].data().iter().all(|&v| v == 0.5));
        assert_eq!(state.t, 4);
    }

    #[test]
    fn decoupled_decay_shrinks_geometrically() {
        let hyper = AdamW {
            weight_decay: 0.5,
            ..AdamW::default()
        };
        let mut params = vec![Tensor::<f64>::vector(&[2.0])];
        let mut state = OptimState::new(hyper, &params);
        for _ in 0..4 {
            adamw_step(&mut params, &[None], &mut state, 0.1).unwrap();
        }
        assert!((params[0].item() - 2.0 * 0.95f64.powi(4)).abs() < 1e-15);
    }

    #[test]
    fn rejects_mismatched_gradients() {
        let mut params = vec![Tensor::<f64>::vector(&[1.0, 2.0])];
        let mut state = OptimState::new(AdamW::default(), &params);
        let g = Tensor::vector(&[1.0]);
        assert!(adamw_step(&mut params, &[Some(&g)], &mut state, 1e-3).is_err());
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 3000, 1e-3, 1e-7).unwrap(), 1e-3);
        assert!((cosine_lr(3000, 3000, 1e-3, 1e-7).unwrap() - 1e-7).abs() < 1e-20);
        assert!((cosine_lr(1500, 3000, 1e-3, 1e-7).unwrap() - (1e-3 + 1e-7) / 2.0).abs() < 1e-18);
        assert!(cosine_lr(3001, 3000, 1e-3, 1e-7).is_err());
        let lrs: Vec<f64> = (0..=100).map(|s| cosine_lr(s, 100, 1e-3, 1e-7).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
