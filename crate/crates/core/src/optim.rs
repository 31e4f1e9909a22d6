//! AdamW with decoupled weight decay and a warmup + cosine schedule.

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.95;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.05;
pub const ADAM_EPS: f64 = 1e-8;

/// Linear warmup over the first 5% of steps, then cosine decay to zero.
#[derive(Clone, Copy, Debug)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(peak: f64, total_steps: usize) -> Self {
        LrSchedule { peak, warmup_steps: (total_steps as f64 * 0.05).ceil() as usize, total_steps }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.peak;
        }
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps.max(1) as f64;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.peak * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub step: usize,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, schedule: LrSchedule, weight_decay: f64) -> Self {
        let m = params.entries().iter().map(|e| Tensor::zeros(e.tensor.shape())).collect();
        let v = params.entries().iter().map(|e| Tensor::zeros(e.tensor.shape())).collect();
        OptimizerState { step: 0, schedule, weight_decay, m, v }
    }

    /// One AdamW step over current gradients at an explicit learning rate.
    pub fn step_with_lr(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - BETA1.powf(t);
        let bc2 = 1.0 - BETA2.powf(t);
        for (i, e) in params.entries_mut().iter_mut().enumerate() {
            if !e.grad.all_finite() {
                return Err(Error::NonFiniteGradient(e.name.clone()));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = e.tensor.data_mut();
            for ((pj, gj), (mj, vj)) in
                p.iter_mut().zip(e.grad.data()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mj = BETA1 * *mj + (1.0 - BETA1) * gj;
                *vj = BETA2 * *vj + (1.0 - BETA2) * gj * gj;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                // decoupled weight decay
                *pj -= lr * self.weight_decay * *pj;
                *pj -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }

    /// One AdamW step using the schedule's rate for the current step.
    pub fn step_scheduled(&mut self, params: &mut ParamSet) -> Result<f64> {
        let lr = self.schedule.lr_at(self.step);
        self.step_with_lr(params, lr)?;
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(x: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::scalar(x));
        p
    }

    #[test]
    fn zero_lr_is_noop() {
        let mut p = single_param(1.5);
        let mut opt = OptimizerState::new(&p, LrSchedule::new(0.0, 10), 0.0);
        p.entries_mut()[0].grad = Tensor::scalar(3.0);
        opt.step_with_lr(&mut p, 0.0).unwrap();
        assert_eq!(p.get("x").item(), 1.5);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut p = single_param(2.0);
        let mut opt = OptimizerState::new(&p, LrSchedule::new(0.1, 10), 0.0);
        opt.step_with_lr(&mut p, 0.1).unwrap();
        assert_eq!(p.get("x").item(), 2.0);
    }

    #[test]
    fn decay_only_closed_form() {
        let mut p = single_param(4.0);
        let mut opt = OptimizerState::new(&p, LrSchedule::new(0.1, 10), 0.1);
        // zero gradient, decay 0.1, lr 0.1 -> scaled by (1 - 0.01) per step
        opt.step_with_lr(&mut p, 0.1).unwrap();
        assert!((p.get("x").item() - 4.0 * 0.99).abs() < 1e-12);
        opt.step_with_lr(&mut p, 0.1).unwrap();
        assert!((p.get("x").item() - 4.0 * 0.99 * 0.99).abs() < 1e-12);
    }

    #[test]
    fn quadratic_convergence() {
        // f(x) = (x - 3)^2 from x = 0, 500 steps at lr 0.1
        let mut p = single_param(0.0);
        let mut opt = OptimizerState::new(&p, LrSchedule::new(0.1, 500), 0.0);
        for _ in 0..500 {
            let x = p.get("x").item();
            p.entries_mut()[0].grad = Tensor::scalar(2.0 * (x - 3.0));
            opt.step_with_lr(&mut p, 0.1).unwrap();
        }
        assert!((p.get("x").item() - 3.0).abs() < 1e-2);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = single_param(0.0);
        let mut opt = OptimizerState::new(&p, LrSchedule::new(0.1, 10), 0.0);
        p.entries_mut()[0].grad = Tensor::scalar(f64::NAN);
        let err = opt.step_with_lr(&mut p, 0.1).unwrap_err();
        assert!(err.to_string().contains('x'));
    }

    #[test]
    fn schedule_warms_up_then_decays_to_zero() {
        let s = LrSchedule::new(1.0, 100);
        assert!(s.lr_at(0) < s.lr_at(s.warmup_steps - 1));
        assert!((s.lr_at(s.warmup_steps) - 1.0).abs() < 1e-9);
        assert!(s.lr_at(99) < 0.01);
    }
}
