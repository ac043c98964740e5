use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ScheduleKind, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::{round_f32, Parameterized};

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction. Moments are kept at `f32` precision like the
/// parameters, so a checkpoint holds the complete optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub first: Vec<(String, Array2<f64>)>,
    pub second: Vec<(String, Array2<f64>)>,
}

impl Adam {
    pub fn new(params: &impl Parameterized) -> Self {
        let mut first = Vec::new();
        params.visit("", &mut |n, p| first.push((n, Array2::zeros(p.raw_dim()))));
        let second = first.clone();
        Self { step: 0, first, second }
    }

    /// One update with learning rate `lr`. `grads` must list every parameter
    /// in visit order.
    pub fn update(&mut self, params: &mut impl Parameterized, grads: &[(String, Array2<f64>)], lr: f64) -> Result<()> {
        if grads.len() != self.first.len() {
            return Err(Error::InvalidInput(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.first.len()
            )));
        }
        self.step += 1;
        let (b1, b2) = ADAM_BETAS;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let mut k = 0;
        let mut failure = None;
        params.visit_mut("", &mut |name, p| {
            let (gname, g) = &grads[k];
            let (m, v) = (&mut self.first[k].1, &mut self.second[k].1);
            k += 1;
            if *gname != name || g.dim() != p.dim() {
                failure.get_or_insert(format!("gradient `{gname}` does not match parameter `{name}`"));
                return;
            }
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = round_f32(b1 * *m + (1.0 - b1) * g);
                *v = round_f32(b2 * *v + (1.0 - b2) * g * g);
                let step = lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                *p = round_f32(*p - step);
            });
        });
        match failure {
            Some(msg) => Err(Error::InvalidInput(msg)),
            None => Ok(()),
        }
    }
}

/// Learning-rate schedule state. Cosine is indexed by optimizer step;
/// step and plateau schedules change the rate between epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrScheduler {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub total_steps: u64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// Current rate for the epoch-driven schedules.
    pub current: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl LrScheduler {
    pub fn new(cfg: &TrainConfig, total_steps: u64) -> Self {
        Self {
            kind: cfg.schedule,
            base_lr: cfg.learning_rate,
            total_steps,
            milestones: cfg.step_milestones.clone(),
            gamma: cfg.step_gamma,
            plateau_factor: cfg.plateau_factor,
            plateau_patience: cfg.plateau_patience,
            current: cfg.learning_rate,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Rate for optimizer step `step` (0-based) within epoch `epoch`.
    pub fn lr(&self, step: u64, epoch: usize) -> f64 {
        match self.kind {
            ScheduleKind::Cosine => cosine_lr(self.base_lr, step, self.total_steps),
            ScheduleKind::Step => {
                let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
                self.base_lr * self.gamma.powi(passed as i32)
            }
            ScheduleKind::Plateau => self.current,
        }
    }

    /// Feeds the epoch's monitored loss to the plateau schedule.
    pub fn end_epoch(&mut self, monitored: f64) {
        if self.kind != ScheduleKind::Plateau {
            return;
        }
        match self.best {
            Some(b) if monitored >= b => {
                self.bad_epochs += 1;
                if self.bad_epochs > self.plateau_patience {
                    self.current *= self.plateau_factor;
                    self.bad_epochs = 0;
                }
            }
            _ => {
                self.best = Some(monitored);
                self.bad_epochs = 0;
            }
        }
    }
}

/// Half-cosine from `base` at step 0 down to 0 at step `total - 1`.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total <= 1 {
        return base;
    }
    let t = (step.min(total - 1)) as f64 / (total - 1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use ndarray::array;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-4, 0, 100), 1e-4);
        assert!(cosine_lr(1e-4, 99, 100) <= 1e-10);
        assert!((cosine_lr(1.0, 50, 101) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut lin = Linear { weight: array![[0.5, -0.25]], bias: None };
        let mut adam = Adam::new(&lin);
        let grads = vec![("weight".to_string(), array![[2.0, -3.0]])];
        adam.update(&mut lin, &grads, 0.125).unwrap();
        // m̂ / √v̂ = sign(g) on the first step
        assert!((lin.weight[[0, 0]] - 0.375).abs() < 1e-6);
        assert!((lin.weight[[0, 1]] + 0.125).abs() < 1e-6);
    }

    #[test]
    fn plateau_reduces_after_patience() {
        let cfg = TrainConfig { schedule: ScheduleKind::Plateau, plateau_patience: 1, learning_rate: 1.0, ..Default::default() };
        let mut s = LrScheduler::new(&cfg, 10);
        for loss in [1.0, 1.0, 1.0] {
            s.end_epoch(loss);
        }
        assert!((s.lr(0, 3) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn step_schedule_milestones() {
        let cfg = TrainConfig { schedule: ScheduleKind::Step, learning_rate: 1.0, ..Default::default() };
        let s = LrScheduler::new(&cfg, 10);
        assert_eq!(s.lr(0, 29), 1.0);
        assert!((s.lr(0, 30) - 0.1).abs() < 1e-12);
        assert!((s.lr(0, 45) - 0.01).abs() < 1e-12);
    }
}
