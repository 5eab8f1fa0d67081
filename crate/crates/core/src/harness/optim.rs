//! AdamW with an optional AMSGrad accumulator and per-tensor step clamping.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

use super::config::OptimConfig;

/// Moment buffers, one entry per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    /// Completed update steps.
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub v_max: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(shapes: &[Vec<usize>]) -> Self {
        let z = || {
            shapes
                .iter()
                .map(|s| Tensor::zeros(s.clone()))
                .collect::<Vec<_>>()
        };
        OptimState {
            step: 0,
            m: z(),
            v: z(),
            v_max: z(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StableAdamW {
    pub config: OptimConfig,
}

/// Outcome of one [`StableAdamW::step`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient held a non-finite value; nothing changed.
    Skipped,
}

impl StableAdamW {
    pub fn new(config: OptimConfig) -> Self {
        StableAdamW { config }
    }

    /// Updates `params[i]` with `grads[i]` at learning rate `lrs[i]`.
    pub fn step<T: Scalar>(
        &self,
        state: &mut OptimState<T>,
        params: &mut [&mut Tensor<T>],
        grads: &[Tensor<T>],
        lrs: &[f64],
    ) -> Result<StepOutcome> {
        let n = params.len();
        if grads.len() != n || lrs.len() != n || state.m.len() != n {
            return Err(Error::Shape(format!(
                "optimizer got {n} params, {} grads, {} rates, {} moment slots",
                grads.len(),
                lrs.len(),
                state.m.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params[i].shape() {
                return Err(Error::Shape(format!(
                    "gradient {i} shape {:?} vs {:?}",
                    g.shape(),
                    params[i].shape()
                )));
            }
            if !g.is_finite() {
                log::warn!(
                    "non-finite gradient in tensor {i}; skipping step {}",
                    state.step + 1
                );
                return Ok(StepOutcome::Skipped);
            }
        }
        let c = &self.config;
        let t = (state.step + 1) as i32;
        let (b1, b2): (T, T) = (lit(c.beta1), lit(c.beta2));
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let eps: T = lit(c.eps);
        let eps2 = eps * eps;
        for i in 0..n {
            let g = grads[i].data();
            let m = state.m[i].data_mut();
            for (m, &g) in m.iter_mut().zip(g) {
                *m = b1 * *m + (T::one() - b1) * g;
            }
            let v = state.v[i].data_mut();
            for (v, &g) in v.iter_mut().zip(g) {
                *v = b2 * *v + (T::one() - b2) * g * g;
            }
            if c.amsgrad {
                let (v, vm) = (state.v[i].data(), state.v_max[i].data_mut());
                for (vm, &v) in vm.iter_mut().zip(v) {
                    *vm = vm.max(v);
                }
            }
            let second = if c.amsgrad {
                state.v_max[i].data()
            } else {
                state.v[i].data()
            };
            let mut lr: T = lit(lrs[i]);
            if c.update_clamp {
                let ratio: T = g
                    .iter()
                    .zip(second)
                    .map(|(&g, &v)| g * g / (v / bc2).max(eps2))
                    .sum();
                let rms = (ratio / T::from_usize(g.len()).unwrap()).sqrt();
                lr /= rms.max(T::one());
            }
            let decay = T::one() - lr * lit(c.weight_decay);
            let m = state.m[i].data();
            for ((p, &m), &v) in params[i].data_mut().iter_mut().zip(m).zip(second) {
                let v_hat = v / bc2;
                *p = *p * decay - lr * (m / bc1) / (v_hat.sqrt() + eps);
            }
        }
        state.step += 1;
        Ok(StepOutcome::Applied)
    }
}
