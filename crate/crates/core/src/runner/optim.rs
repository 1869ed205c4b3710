//! Adaptive-moment optimizer with decoupled weight decay, and the
//! linear-warmup inverse-root learning-rate schedule.

use crate::diffcore::Tensor;

/// lr(step) = base * sqrt(w) * min(step^-1/2, step * w^-3/2).
///
/// Rises linearly for `warmup_steps` steps, peaks at `base_lr`, then decays
/// with the inverse square root of the step count.
#[derive(Clone, Copy, Debug)]
pub struct NoamSchedule {
    pub base_lr: f64,
    pub warmup_steps: f64,
}

impl NoamSchedule {
    pub fn new(base_lr: f64, warmup_steps: f64) -> Self {
        NoamSchedule {
            base_lr,
            warmup_steps: warmup_steps.max(1.0),
        }
    }

    /// Steps are 1-based.
    pub fn lr_at(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup_steps;
        self.base_lr * w.sqrt() * (s.powf(-0.5)).min(s * w.powf(-1.5))
    }
}

/// Learning-rate policy: warmup/decay for from-scratch training, constant
/// reduced rate for fine-tuning.
#[derive(Clone, Copy, Debug)]
pub enum LrSchedule {
    Noam(NoamSchedule),
    Constant(f64),
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        match self {
            LrSchedule::Noam(s) => s.lr_at(step),
            LrSchedule::Constant(lr) => *lr,
        }
    }
}

/// AdamW over a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(shapes: &[Vec<usize>], weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }

    /// One update with the given learning rate. Weight decay is decoupled:
    /// applied directly to the parameters, not through the moments.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            let gd = g.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gd[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * pd[i]);
            }
        }
    }
}
