use serde::{Deserialize, Serialize};

use crate::nnkit::params::ParamStore;
use crate::nnkit::tensor::Real;

/// Stochastic gradient descent with classical momentum and L2 weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T: Real> {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Gradients are rescaled so their global L2 norm never exceeds this value.
    pub clip_norm: Option<f64>,
    pub velocity: ParamStore<T>,
}

impl<T: Real> Sgd<T> {
    pub fn new(params: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            clip_norm: None,
            velocity: params.zeros_like(),
        }
    }

    pub fn with_clip_norm(mut self, clip: f64) -> Self {
        self.clip_norm = Some(clip);
        self
    }

    /// `v = momentum * v + g + wd * p; p -= lr * v`. Parameters without a gradient entry are
    /// left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>, lr: f64) {
        let scale = match self.clip_norm {
            Some(c) => {
                let n = grads.sq_norm().to_f64().unwrap_or(f64::INFINITY).sqrt();
                if n > c {
                    c / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let (mu, wd, lr, s) = (T::lit(self.momentum), T::lit(self.weight_decay), T::lit(lr), T::lit(scale));
        for (name, p) in params.iter_mut() {
            let Ok(g) = grads.get(name) else { continue };
            if !self.velocity.contains(name) {
                self.velocity.insert(name.clone(), p.map(|_| T::zero()));
            }
            let v = self.velocity.get_mut(name).expect("velocity entry");
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = mu * *vv + s * gv + wd * *pv;
                *pv -= lr * *vv;
            }
        }
    }
}

/// Two-level step schedule: starts at `initial` and drops to `reduced` once the monitored loss
/// fails to improve by at least `min_rel_improvement` (relative to the best value so far) for
/// `patience` consecutive evaluations. The drop happens at most once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub initial: f64,
    pub reduced: f64,
    pub patience: usize,
    pub min_rel_improvement: f64,
    pub best: Option<f64>,
    pub stale: usize,
    pub dropped_at: Option<usize>,
    pub evals: usize,
}

impl PlateauSchedule {
    pub fn new(initial: f64, reduced: f64, patience: usize, min_rel_improvement: f64) -> Self {
        PlateauSchedule {
            initial,
            reduced,
            patience,
            min_rel_improvement,
            best: None,
            stale: 0,
            dropped_at: None,
            evals: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        if self.dropped_at.is_some() {
            self.reduced
        } else {
            self.initial
        }
    }

    /// Drops to the reduced rate now unless it already has.
    pub fn drop_now(&mut self) {
        if self.dropped_at.is_none() {
            self.dropped_at = Some(self.evals);
        }
    }

    /// Feeds one evaluation of the monitored loss; returns true when this call triggered the drop.
    pub fn observe(&mut self, loss: f64) -> bool {
        self.evals += 1;
        match self.best {
            Some(b) if loss > b * (1.0 - self.min_rel_improvement) => {
                self.stale += 1;
                if loss < b {
                    self.best = Some(loss);
                }
            }
            _ => {
                self.best = Some(loss);
                self.stale = 0;
            }
        }
        if self.dropped_at.is_none() && self.stale >= self.patience {
            self.dropped_at = Some(self.evals);
            return true;
        }
        false
    }
}
