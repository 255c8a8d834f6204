//! AdamW with decoupled weight decay.

use super::param::{GradStore, ParamSet};
use super::tensor::Scalar;

#[derive(Debug, Clone)]
pub struct AdamW<E> {
    pub lr: E,
    pub beta1: E,
    pub beta2: E,
    pub eps: E,
    pub weight_decay: E,
    /// Step counter for bias correction; increments once per `step`.
    pub t: u64,
}

impl<E: Scalar> AdamW<E> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr: E::from_f64(lr),
            beta1: E::from_f64(0.9),
            beta2: E::from_f64(0.999),
            eps: E::from_f64(1e-8),
            weight_decay: E::from_f64(weight_decay),
            t: 0,
        }
    }

    /// Update every trainable parameter. A parameter absent from `grads`
    /// is treated as having a zero gradient: its moments decay and the
    /// decoupled weight decay still applies.
    pub fn step(&mut self, params: &mut ParamSet<E>, grads: &GradStore<E>) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = E::one() - self.beta1.powi(t);
        let bc2 = E::one() - self.beta2.powi(t);
        let one = E::one();

        for id in params.ids().collect::<Vec<_>>() {
            let grad = grads.get(id).cloned();
            let p = params.get_mut(id);
            if !p.trainable {
                continue;
            }
            // Decoupled decay: p <- p - lr * wd * p, independent of the
            // gradient path.
            if self.weight_decay > E::zero() {
                let decay = self.lr * self.weight_decay;
                for v in p.value.data.iter_mut() {
                    *v = *v - decay * *v;
                }
            }
            let n = p.value.numel();
            for i in 0..n {
                let g = grad.as_ref().map(|t| t.data[i]).unwrap_or(E::zero());
                p.m.data[i] = self.beta1 * p.m.data[i] + (one - self.beta1) * g;
                p.v.data[i] = self.beta2 * p.v.data[i] + (one - self.beta2) * g * g;
                let mhat = p.m.data[i] / bc1;
                let vhat = p.v.data[i] / bc2;
                p.value.data[i] = p.value.data[i] - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr() {
        // p=1, g=1, lr=0.1, wd=0: bias-corrected mhat=vhat=1, so the step
        // is lr/(1+eps) and p lands at ~0.9.
        let mut ps: ParamSet<f64> = ParamSet::new();
        let id = ps.add("p", Tensor::row_vector(&[1.0]));
        let mut grads = GradStore::new();
        grads.accumulate(id, &Tensor::row_vector(&[1.0]), 1.0);
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut ps, &grads);
        let p = ps.value(id).data[0];
        assert!((p - 0.9).abs() < 1e-6, "got {p}");
    }

    #[test]
    fn zero_grad_still_decays() {
        // Decoupled decay shrinks the weight even with no gradient signal:
        // p <- p - lr*wd*p (the Adam update itself is 0/sqrt(0)+eps = 0).
        let mut ps: ParamSet<f64> = ParamSet::new();
        let id = ps.add("p", Tensor::row_vector(&[2.0]));
        let grads = GradStore::new(); // empty: zero gradient
        let mut opt = AdamW::new(0.1, 0.01);
        opt.step(&mut ps, &grads);
        let p = ps.value(id).data[0];
        let expect = 2.0 - 0.1 * 0.01 * 2.0;
        assert!((p - expect).abs() < 1e-12, "got {p}, expect {expect}");
    }

    #[test]
    fn frozen_params_never_move() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let id = ps.add("frozen.p", Tensor::row_vector(&[1.5]));
        ps.freeze_prefix("frozen.");
        let mut grads = GradStore::new();
        grads.accumulate(id, &Tensor::row_vector(&[5.0]), 1.0);
        let mut opt = AdamW::new(0.1, 0.1);
        opt.step(&mut ps, &grads);
        assert_eq!(ps.value(id).data[0], 1.5);
    }

    #[test]
    fn bias_correction_second_step() {
        // Two identical steps with g=1: after bias correction mhat=1,
        // vhat=1 each step, so each step subtracts lr/(1+eps).
        let mut ps: ParamSet<f64> = ParamSet::new();
        let id = ps.add("p", Tensor::row_vector(&[1.0]));
        let mut grads = GradStore::new();
        grads.accumulate(id, &Tensor::row_vector(&[1.0]), 1.0);
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut ps, &grads);
        opt.step(&mut ps, &grads);
        let p = ps.value(id).data[0];
        assert!((p - 0.8).abs() < 1e-5, "got {p}");
    }
}
