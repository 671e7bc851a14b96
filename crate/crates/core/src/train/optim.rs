use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Parameters;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Final learning rate as a fraction of the initial one (cosine decay).
    pub min_lr_fraction: f64,
    /// Linear warmup steps.
    pub warmup_steps: usize,
    pub momentum: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables.
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1e-3,
            min_lr_fraction: 0.0,
            warmup_steps: 0,
            momentum: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            clip_norm: 0.0,
            epochs: 10,
            batch_size: 8,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::Config(
                "schedule needs a positive learning rate and batch size".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(
                "momentum and beta2 must lie in [0, 1)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.min_lr_fraction)
            || self.weight_decay < 0.0
            || self.clip_norm < 0.0
        {
            return Err(Error::Config("invalid decay or clipping settings".into()));
        }
        Ok(())
    }

    /// Warmup then cosine decay over `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let base = self.learning_rate;
        if step < self.warmup_steps {
            return base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let floor = base * self.min_lr_fraction;
        floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// First-order optimizer state over a flat parameter vector.
pub struct Optimizer {
    schedule: Schedule,
    total_steps: usize,
    step: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new<P: Parameters>(model: &P, schedule: Schedule, total_steps: usize) -> Self {
        let n = model.num_params();
        let v = match schedule.optimizer {
            OptimizerKind::Adamw => vec![0.0; n],
            OptimizerKind::Sgd => Vec::new(),
        };
        Optimizer {
            schedule,
            total_steps,
            step: 0,
            m: vec![0.0; n],
            v,
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.step, self.total_steps)
    }

    /// Applies one update from `grad` (same structure as `model`).
    pub fn step<P: Parameters>(&mut self, model: &mut P, grad: &P) {
        let mut g = grad.flatten();
        let s = &self.schedule;
        if s.clip_norm > 0.0 {
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > s.clip_norm {
                let f = s.clip_norm / norm;
                g.iter_mut().for_each(|x| *x *= f);
            }
        }
        let lr = self.current_lr();
        self.step += 1;
        let (m, v) = (&mut self.m, &mut self.v);
        let t = self.step as i32;
        let mut at = 0;
        model.visit_mut(&mut |params| {
            for p in params.iter_mut() {
                let gi = g[at];
                match s.optimizer {
                    OptimizerKind::Sgd => {
                        m[at] = s.momentum * m[at] + gi + s.weight_decay * *p;
                        *p -= lr * m[at];
                    }
                    OptimizerKind::Adamw => {
                        m[at] = s.momentum * m[at] + (1.0 - s.momentum) * gi;
                        v[at] = s.beta2 * v[at] + (1.0 - s.beta2) * gi * gi;
                        let mh = m[at] / (1.0 - s.momentum.powi(t));
                        let vh = v[at] / (1.0 - s.beta2.powi(t));
                        *p -= lr * (mh / (vh.sqrt() + 1e-8) + s.weight_decay * *p);
                    }
                }
                at += 1;
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quad(Vec<f64>);

    impl Parameters for Quad {
        fn visit(&self, f: &mut dyn FnMut(&[f64])) {
            f(&self.0);
        }

        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
            f(&mut self.0);
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = Schedule {
            learning_rate: 1.0,
            min_lr_fraction: 0.1,
            warmup_steps: 2,
            ..Schedule::default()
        };
        assert_eq!(s.lr_at(0, 10), 0.5);
        assert_eq!(s.lr_at(2, 10), 1.0);
        assert!((s.lr_at(10, 10) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn both_optimizers_minimise_a_quadratic() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adamw] {
            let mut x = Quad(vec![3.0, -2.0]);
            let sched = Schedule {
                optimizer: kind,
                learning_rate: 0.05,
                ..Schedule::default()
            };
            let mut opt = Optimizer::new(&x, sched, 400);
            for _ in 0..400 {
                let g = Quad(x.0.iter().map(|v| 2.0 * v).collect());
                opt.step(&mut x, &g);
            }
            assert!(x.0.iter().all(|v| v.abs() < 1e-2), "{kind:?}: {:?}", x.0);
        }
    }
}
