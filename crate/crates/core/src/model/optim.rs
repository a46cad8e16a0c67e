use serde::{Deserialize, Serialize};

use super::encoder::Model;
use super::params::ModelParams;
use crate::error::{Error, Result};

/// Constant learning rate, halved once `halve_after` updates past `start`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr0: f64,
    pub halve_after: Option<u64>,
    pub start: u64,
}

impl LrSchedule {
    pub fn constant(lr0: f64) -> Self {
        LrSchedule {
            lr0,
            halve_after: None,
            start: 0,
        }
    }

    pub fn lr(&self, update_counter: u64) -> f64 {
        let t = update_counter.saturating_sub(self.start);
        match self.halve_after {
            Some(h) if t >= h => self.lr0 / 2.0,
            _ => self.lr0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdagradConfig {
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Rescale gradients whose global L2 norm exceeds this value.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for AdagradConfig {
    fn default() -> Self {
        AdagradConfig {
            eps: default_eps(),
            clip_norm: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    /// Adagrad sum of squared gradients, shaped like the parameters.
    pub accum: ModelParams,
    pub update_counter: u64,
    pub schedule: LrSchedule,
    pub optimizer: AdagradConfig,
    pub seed: u64,
}

impl TrainState {
    pub fn new(model: Model, schedule: LrSchedule, seed: u64) -> Self {
        let accum = model.params.zeros_like();
        TrainState {
            model,
            accum,
            update_counter: 0,
            schedule,
            optimizer: AdagradConfig::default(),
            seed,
        }
    }

    /// Starts a fresh optimizer (zero accumulators) with a new schedule
    /// anchored at the current update counter.
    pub fn restart_optimizer(&mut self, lr0: f64, halve_after: Option<u64>) {
        self.accum = self.model.params.zeros_like();
        self.schedule = LrSchedule {
            lr0,
            halve_after,
            start: self.update_counter,
        };
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.update_counter)
    }

    /// One Adagrad update; returns the learning rate used.
    ///
    /// Parameters and accumulators are kept `f32`-representable.
    pub fn optimizer_step(&mut self, grads: &ModelParams) -> Result<f64> {
        if !self.model.params.same_shapes(grads) {
            return Err(Error::Dimension("gradient bundle does not match parameters".into()));
        }
        let lr = self.current_lr();
        let mut factor = 1.0;
        if let Some(c) = self.optimizer.clip_norm {
            let n = grads.global_norm();
            if n > c {
                factor = c / n;
            }
        }
        let eps = self.optimizer.eps;
        let params = self.model.params.tensors_mut();
        for ((p, a), g) in params.iter_mut().zip(self.accum.tensors_mut()).zip(grads.tensors()) {
            for ((pv, av), &gv) in p.data.iter_mut().zip(a.data.iter_mut()).zip(&g.data) {
                let gv = gv * factor;
                if gv == 0.0 {
                    continue;
                }
                *av = (*av + gv * gv) as f32 as f64;
                *pv = (*pv - lr * gv / (av.sqrt() + eps)) as f32 as f64;
            }
        }
        self.update_counter += 1;
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SymbolTable;
    use crate::model::EncoderConfig;

    fn state() -> TrainState {
        let mut cfg = EncoderConfig::new(3);
        cfg.d_model = 4;
        cfg.d_ff = 4;
        cfg.n_layers = 1;
        let m = Model::new(cfg, SymbolTable::build(["ab"]), vec!["x".into()], 3).unwrap();
        TrainState::new(m, LrSchedule { lr0: 0.03, halve_after: Some(2), start: 0 }, 1)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = state();
        let before = s.model.params.clone();
        let g = before.zeros_like();
        s.optimizer_step(&g).unwrap();
        assert_eq!(s.model.params, before);
        assert_eq!(s.update_counter, 1);
    }

    #[test]
    fn lr_halves_exactly_once() {
        let mut s = state();
        let g = s.model.params.zeros_like();
        let lrs: Vec<f64> = (0..4).map(|_| s.optimizer_step(&g).unwrap()).collect();
        assert_eq!(lrs, vec![0.03, 0.03, 0.015, 0.015]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = state();
        let mut g = s.model.params.zeros_like();
        g.get_mut("ctc.b").unwrap().data[0] = 2.0;
        let before = s.model.params.get("ctc.b").unwrap().data[0];
        s.optimizer_step(&g).unwrap();
        let after = s.model.params.get("ctc.b").unwrap().data[0];
        assert!((before - after - 0.03).abs() < 1e-7);
    }
}
