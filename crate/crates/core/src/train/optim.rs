use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LOGIT_SCALE, LOGIT_SCALE_MAX};
use crate::numerics::{ParamSet, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to linear weights (`…/w`) only.
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.2, grad_clip: Some(1.0) }
    }
}

impl OptimConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                errs.push(format!("optim.{name} {b} outside [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            errs.push("optim.eps must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            errs.push("optim.weight_decay must be non-negative".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                errs.push("optim.grad_clip must be positive".into());
            }
        }
        errs
    }
}

/// Per-parameter learning-rate multipliers chosen by longest matching name
/// prefix. A multiplier of zero freezes the parameter: no moments, no decay.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LrMultipliers(pub Vec<(String, f64)>);

impl LrMultipliers {
    pub fn get(&self, name: &str) -> f64 {
        self.0.iter().filter(|(p, _)| name.starts_with(p.as_str())).max_by_key(|(p, _)| p.len()).map_or(1.0, |(_, m)| *m)
    }

    pub fn frozen_prefixes(&self) -> Vec<&str> {
        self.0.iter().filter(|(_, m)| *m == 0.0).map(|(p, _)| p.as_str()).collect()
    }
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: OptimConfig,
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub t: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: OptimConfig) -> Self {
        AdamW { config, m: ParamSet::new(), v: ParamSet::new(), t: 0 }
    }

    /// Applies one update. Parameters absent from `grads` are left alone, as
    /// are parameters whose multiplier is zero.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, lr: f64, mult: &LrMultipliers) -> Result<StepStats> {
        let live: Vec<&str> = grads.names().filter(|n| mult.get(n) != 0.0).collect();
        let mut sq = 0.0f64;
        for name in &live {
            let g = grads.get(name)?;
            if params.get(name)?.shape() != g.shape() {
                return Err(Error::Dimension(format!("gradient shape mismatch for {name}")));
            }
            sq += g.data().iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>();
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm is {grad_norm}")));
        }
        let clip = match self.config.grad_clip {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powf(self.t as f64));
        let bc2 = T::lit(1.0 - c.beta2.powf(self.t as f64));
        let eps = T::lit(c.eps);
        let one = T::one();
        for name in live {
            let g = grads.get(name)?;
            let rate = lr * mult.get(name);
            let decay = if name.ends_with("/w") { T::lit(1.0 - rate * c.weight_decay) } else { one };
            let step = T::lit(rate);
            let clip = T::lit(clip);
            if !self.m.contains(name) {
                self.m.insert(name, Tensor::zeros(g.shape()))?;
                self.v.insert(name, Tensor::zeros(g.shape()))?;
            }
            let m = self.m.get_mut(name).expect("moment present").data_mut();
            let v = self.v.get_mut(name).expect("moment present").data_mut();
            let p = params.get_mut(name).expect("param checked above").data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i] * clip;
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] = p[i] * decay - step * mhat / (vhat.sqrt() + eps);
            }
        }
        if let Some(ls) = params.get_mut(LOGIT_SCALE) {
            let cap = T::lit(LOGIT_SCALE_MAX);
            for x in ls.data_mut() {
                if *x > cap {
                    *x = cap;
                }
            }
        }
        Ok(StepStats { grad_norm, clipped: clip < 1.0 })
    }
}
