//! Adam optimizer with bias correction and a stepped learning-rate decay.

use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamKind, ParamSet};
use super::scalar::Scalar;

/// Stepped decay: the learning rate is multiplied by `decay_factor` once per
/// completed period after a warm hold. With `start_epoch = S` and
/// `period_epochs = P`, epochs `[0, S+P)` use the base rate and epoch `e >=
/// S+P` uses `base * decay_factor^((e - S) / P)` (integer division).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub start_epoch: usize,
    pub period_epochs: usize,
    pub decay_factor: f64,
}

impl LrSchedule {
    /// Halve the rate every two periods (factor 1/sqrt(2) per period).
    pub fn halving_sqrt(start_epoch: usize, period_epochs: usize) -> Self {
        LrSchedule { start_epoch, period_epochs, decay_factor: std::f64::consts::FRAC_1_SQRT_2 }
    }

    pub fn decay_events(&self, epoch: usize) -> u32 {
        if self.period_epochs == 0 {
            return 0;
        }
        epoch
            .checked_sub(self.start_epoch)
            .map_or(0, |since| (since / self.period_epochs) as u32)
    }

    pub fn lr_at(&self, base_lr: f64, epoch: usize) -> f64 {
        base_lr * self.decay_factor.powi(self.decay_events(epoch) as i32)
    }
}

struct Moments<S> {
    m: Vec<S>,
    v: Vec<S>,
}

/// Adam with the standard defaults (beta1 0.9, beta2 0.999, eps 1e-8) and
/// bias-corrected moment estimates. First and second moments are allocated
/// lazily per parameter and kept in the parameter scalar type.
pub struct Adam<S: Scalar> {
    base_lr: f64,
    schedule: Option<LrSchedule>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    slots: Vec<Option<Moments<S>>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(base_lr: f64) -> Self {
        Adam { base_lr, schedule: None, beta1: 0.9, beta2: 0.999, eps: 1e-8, step_count: 0, slots: Vec::new() }
    }

    pub fn with_schedule(base_lr: f64, schedule: LrSchedule) -> Self {
        let mut a = Self::new(base_lr);
        a.schedule = Some(schedule);
        a
    }

    pub fn base_lr(&self) -> f64 {
        self.base_lr
    }

    pub fn schedule(&self) -> Option<LrSchedule> {
        self.schedule
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Restores the step counter from a checkpoint. Moment estimates are not
    /// persisted; a restored optimizer restarts them from zero.
    pub fn set_step_count(&mut self, steps: u64) {
        self.step_count = steps;
    }

    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        match self.schedule {
            Some(s) => s.lr_at(self.base_lr, epoch),
            None => self.base_lr,
        }
    }

    /// Applies one update to every learnable parameter that has a gradient.
    /// Returns the learning rate used.
    pub fn step(&mut self, params: &mut ParamSet<S>, grads: &Gradients<S>, epoch: usize) -> f64 {
        let lr = self.lr_for_epoch(epoch);
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one_m_b1 = S::from_f64(1.0 - self.beta1);
        let one_m_b2 = S::from_f64(1.0 - self.beta2);
        let inv_bc1 = S::from_f64(1.0 / bc1);
        let inv_bc2 = S::from_f64(1.0 / bc2);
        let lr_s = S::from_f64(lr);
        let eps = S::from_f64(self.eps);

        if self.slots.len() < params.len() {
            self.slots.resize_with(params.len(), || None);
        }
        for id in params.ids() {
            if params.kind(id) != ParamKind::Learnable {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let g = g.to_vec();
            let slot = self.slots[id.index()].get_or_insert_with(|| Moments {
                m: vec![S::ZERO; g.len()],
                v: vec![S::ZERO; g.len()],
            });
            let theta = params.value_mut(id);
            for i in 0..g.len() {
                let gi = g[i];
                slot.m[i] = b1 * slot.m[i] + one_m_b1 * gi;
                slot.v[i] = b2 * slot.v[i] + one_m_b2 * gi * gi;
                let m_hat = slot.m[i] * inv_bc1;
                let v_hat = slot.v[i] * inv_bc2;
                theta[i] -= lr_s * m_hat / (v_hat.sqrt() + eps);
            }
        }
        lr
    }
}
