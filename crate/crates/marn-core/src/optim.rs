//! Adam with elementwise gradient value clipping and the stepped
//! learning-rate schedule.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Per-parameter Adam accumulators. Entry `i` tracks the `i`-th tensor of
/// whatever parameter ordering the caller fixes.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Defaults beta1=0.9, beta2=0.999, epsilon=1e-8.
    pub fn new(param_sizes: &[usize], learning_rate: f64) -> Result<Self> {
        if learning_rate <= 0.0 {
            return Err(CoreError::Config("learning rate must be positive".into()));
        }
        Ok(AdamState {
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over aligned (param, grad) pairs. Each gradient component
    /// is clamped to `[clip.0, clip.1]` before entering the moment updates.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[&[f64]],
        clip: (f64, f64),
    ) -> Result<()> {
        let (lo, hi) = clip;
        if lo >= hi {
            return Err(CoreError::Config(alloc::format!(
                "clip interval [{lo}, {hi}] is empty"
            )));
        }
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(CoreError::Contract(alloc::format!(
                "adam expects {} parameter tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(CoreError::Shape {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gc = g[i].clamp(lo, hi);
                assert!(gc >= lo && gc <= hi, "unclipped gradient reached update");
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gc;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gc * gc;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *x -= self.learning_rate * m_hat / (libm::sqrt(v_hat) + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Learning rate at 1-based `epoch` under "decay by `factor` every
/// `decay_every` epochs": epochs 1..=decay_every run at `base`.
pub fn lr_at_epoch(base: f64, factor: f64, decay_every: u32, epoch: u32) -> f64 {
    debug_assert!(epoch >= 1 && decay_every >= 1);
    base * libm::pow(factor, ((epoch - 1) / decay_every) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn out_of_range_gradient_is_treated_as_clip_bound() {
        // One step with grad 12 must match one step with grad 5 under clip [-5, 5].
        let mut a = AdamState::new(&[1], 0.1).unwrap();
        let mut w_big = Tensor::scalar(1.0);
        a.step(&mut [&mut w_big], &[&[12.0]], (-5.0, 5.0)).unwrap();
        let mut b = AdamState::new(&[1], 0.1).unwrap();
        let mut w_clip = Tensor::scalar(1.0);
        b.step(&mut [&mut w_clip], &[&[5.0]], (-5.0, 5.0)).unwrap();
        assert_eq!(w_big.item(), w_clip.item());
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut a = AdamState::new(&[2], 0.1).unwrap();
        let mut w = Tensor::vector(vec![3.0, -4.0]);
        a.step(&mut [&mut w], &[&[0.0, 0.0]], (-5.0, 5.0)).unwrap();
        assert!((w.data()[0] - 3.0).abs() < 1e-12);
        assert!((w.data()[1] + 4.0).abs() < 1e-12);
    }

    #[test]
    fn quadratic_converges_within_500_steps() {
        let mut a = AdamState::new(&[1], 0.1).unwrap();
        let mut w = Tensor::scalar(0.0);
        for _ in 0..500 {
            let g = 2.0 * (w.item() - 3.0);
            a.step(&mut [&mut w], &[&[g]], (-5.0, 5.0)).unwrap();
        }
        assert!((w.item() - 3.0).abs() < 1e-3, "ended at {}", w.item());
    }

    #[test]
    fn step_counter_increments_by_one() {
        let mut a = AdamState::new(&[1], 0.1).unwrap();
        let mut w = Tensor::scalar(0.0);
        for want in 1..=3 {
            a.step(&mut [&mut w], &[&[1.0]], (-5.0, 5.0)).unwrap();
            assert_eq!(a.step_count(), want);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut a = AdamState::new(&[2], 0.1).unwrap();
        let mut w = Tensor::vector(vec![0.0; 3]);
        assert!(a.step(&mut [&mut w], &[&[1.0, 1.0]], (-5.0, 5.0)).is_err());
    }

    #[test]
    fn lr_schedule_quarters_by_epoch_101() {
        let base = 1e-3;
        assert_eq!(lr_at_epoch(base, 0.5, 50, 1), base);
        assert_eq!(lr_at_epoch(base, 0.5, 50, 50), base);
        assert_eq!(lr_at_epoch(base, 0.5, 50, 51), base / 2.0);
        assert_eq!(lr_at_epoch(base, 0.5, 50, 100), base / 2.0);
        assert_eq!(lr_at_epoch(base, 0.5, 50, 101), base / 4.0);
    }
}
