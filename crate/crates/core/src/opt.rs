//! Adam optimizer and the learning-rate schedule.

use crate::diff::ParamSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// First/second moment accumulators and step count for one parameter set.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub step: u64,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ParamSet<S>) -> Self {
        AdamState {
            m: params.entries().iter().map(|p| Tensor::zeros(&p.values.shape)).collect(),
            v: params.entries().iter().map(|p| Tensor::zeros(&p.values.shape)).collect(),
            step: 0,
            beta1: S::from_f64(0.9),
            beta2: S::from_f64(0.999),
            eps: S::from_f64(1e-8),
        }
    }
}

/// One Adam update from the gradients stored in each parameter's `grad`
/// accumulator. A non-finite gradient aborts before any parameter is
/// touched; the step count advances only on success.
pub fn adam_step<S: Scalar>(params: &mut ParamSet<S>, state: &mut AdamState<S>, lr: S) -> Result<()> {
    for p in params.entries() {
        if !p.grad.all_finite() {
            return Err(Error::NumericFailure {
                op: "adam_step",
                node: 0,
                detail: format!("non-finite gradient for parameter '{}'", p.name),
            });
        }
    }
    state.step += 1;
    let t = state.step;
    let b1 = state.beta1;
    let b2 = state.beta2;
    let bc1 = S::one() - b1.powi(t as i32);
    let bc2 = S::one() - b2.powi(t as i32);
    for (i, p) in params.entries_mut().iter_mut().enumerate() {
        let m = &mut state.m[i].data;
        let v = &mut state.v[i].data;
        for ((pv, &gv), (mv, vv)) in p
            .values
            .data
            .iter_mut()
            .zip(p.grad.data.iter())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mv = b1 * *mv + (S::one() - b1) * gv;
            *vv = b2 * *vv + (S::one() - b2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Learning rate at `step`: linear ramp 0 -> base over the warmup steps,
/// then cosine decay base -> floor at `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, base: f64, warmup: u64, floor: f64) -> f64 {
    if warmup > 0 && step < warmup {
        return base * step as f64 / warmup as f64;
    }
    if total_steps <= warmup {
        return base;
    }
    let span = (total_steps - warmup) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    floor + (base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Multiplier for the graph-parameter learning rate: zero while frozen,
/// then a linear ramp to one.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct GraphLrSchedule {
    pub freeze_steps: u64,
    pub warmup_steps: u64,
}

impl Default for GraphLrSchedule {
    fn default() -> Self {
        GraphLrSchedule { freeze_steps: 10_000, warmup_steps: 1_000 }
    }
}

impl GraphLrSchedule {
    pub fn multiplier(&self, step: u64) -> f64 {
        if step < self.freeze_steps {
            0.0
        } else if self.warmup_steps == 0 {
            1.0
        } else {
            (((step - self.freeze_steps) as f64 + 1.0) / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::value_and_grad;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = ParamSet::new();
        params.add("x", Tensor::new(vec![1.0f64, -2.0, 3.0], vec![3]));
        let before = params.values(crate::diff::ParamId(0)).clone();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &mut state, 1e-3).unwrap();
        assert_eq!(params.values(crate::diff::ParamId(0)).data, before.data);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_update_magnitude_is_lr() {
        for &g in &[0.01f64, 1.0, 250.0, -3.0] {
            let mut params = ParamSet::new();
            let id = params.add("x", Tensor::scalar(0.0f64));
            params.entries_mut()[0].grad = Tensor::scalar(g);
            let mut state = AdamState::new(&params);
            adam_step(&mut params, &mut state, 1e-2).unwrap();
            let update = params.values(id).item();
            assert!(
                (update.abs() - 1e-2).abs() < 1e-5,
                "grad {g}: |update| = {} should be ~lr",
                update.abs()
            );
            assert_eq!(update.signum(), -g.signum());
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_and_params_untouched() {
        let mut params = ParamSet::new();
        let id = params.add("x", Tensor::scalar(5.0f64));
        params.entries_mut()[0].grad = Tensor::scalar(f64::NAN);
        let mut state = AdamState::new(&params);
        assert!(adam_step(&mut params, &mut state, 1e-3).is_err());
        assert_eq!(params.values(id).item(), 5.0);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut params = ParamSet::new();
        let id = params.add("x", Tensor::scalar(0.0f64));
        let mut state = AdamState::new(&params);
        for _ in 0..5000 {
            let (_, grads) = value_and_grad(&params, |g, v| {
                let c = g.scalar_const(5.0);
                let d = g.sub(v[0], c);
                g.mul(d, d)
            })
            .unwrap();
            params.entries_mut()[0].grad = grads[0].clone();
            adam_step(&mut params, &mut state, 1e-2).unwrap();
        }
        let x = params.values(id).item();
        assert!((x - 5.0).abs() < 1e-2, "converged to {x}");
    }

    #[test]
    fn lr_schedule_pins() {
        assert_eq!(lr_at(0, 10_000, 1e-3, 100, 5e-5), 0.0);
        assert!((lr_at(100, 10_000, 1e-3, 100, 5e-5) - 1e-3).abs() < 1e-15);
        assert!((lr_at(10_000, 10_000, 1e-3, 100, 5e-5) - 5e-5).abs() < 1e-15);
        // halfway through decay: mean of base and floor
        let mid = lr_at(5050, 10_000, 1e-3, 100, 5e-5);
        assert!((mid - (1e-3 + 5e-5) / 2.0).abs() < 1e-6);
    }

    #[test]
    fn graph_schedule_freezes_then_ramps() {
        let s = GraphLrSchedule { freeze_steps: 100, warmup_steps: 50 };
        assert_eq!(s.multiplier(0), 0.0);
        assert_eq!(s.multiplier(99), 0.0);
        assert!(s.multiplier(100) > 0.0);
        assert_eq!(s.multiplier(149), 1.0);
        assert_eq!(s.multiplier(1000), 1.0);
    }
}
