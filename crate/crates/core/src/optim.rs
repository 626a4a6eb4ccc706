//! Nesterov-accelerated Adam and the plateau / early-stopping callbacks.

use mmseg_tensor::{Gradients, ParamStore, Tensor};

/// Adam with Nesterov momentum and the warming momentum schedule
/// `mu_t = beta1 * (1 - 0.5 * 0.96^(0.004 t))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Nadam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps taken so far.
    pub t: u64,
    /// Running product of the momentum schedule.
    pub m_schedule: f64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

pub const SCHEDULE_DECAY: f64 = 0.004;

impl Nadam {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = || params.ids().map(|id| Tensor::zeros(params.get(id).shape())).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m_schedule: 1.0, m: zeros(), v: zeros() }
    }

    pub fn momentum(&self, t: u64) -> f64 {
        self.beta1 * (1.0 - 0.5 * 0.96f64.powf(t as f64 * SCHEDULE_DECAY))
    }

    /// Apply one update with learning rate `lr`. Parameters without a
    /// gradient in `grads` are left untouched, as are their moments.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &Gradients<f32>, lr: f64) {
        self.t += 1;
        let t = self.t;
        let mu_t = self.momentum(t);
        let mu_next = self.momentum(t + 1);
        let sched_new = self.m_schedule * mu_t;
        let sched_next = sched_new * mu_next;
        self.m_schedule = sched_new;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let v_corr = 1.0 - b2.powf(t as f64);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(g) = grads.param(id) else { continue };
            let k = id.index();
            let p = params.get_mut(id).data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let g_hat = gi / (1.0 - sched_new);
                let m_hat = mi / (1.0 - sched_next);
                let v_hat = vi / v_corr;
                let m_bar = (1.0 - mu_t) * g_hat + mu_next * m_hat;
                p[i] = (p[i] as f64 - lr * m_bar / (v_hat.sqrt() + eps)) as f32;
            }
        }
    }
}

/// Multiply the learning rate by `factor` after `patience` epochs without
/// a strict improvement of the monitored loss.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub best: f64,
    pub wait: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self { lr, factor, patience, best: f64::INFINITY, wait: 0 }
    }

    /// Record an epoch's loss; returns true if the rate was reduced.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.wait = 0;
            return false;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            self.lr *= self.factor;
            self.wait = 0;
            return true;
        }
        false
    }
}

/// Stop after `patience` epochs without a strict improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, wait: 0 }
    }

    /// Record an epoch's loss; returns true when training should stop.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.wait = 0;
            return false;
        }
        self.wait += 1;
        self.wait >= self.patience
    }
}
