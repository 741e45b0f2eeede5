use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::model::Params;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_min: 0.0,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.lr > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(format!("optim: need 0 <= lr_min <= lr and lr > 0 (lr {}, lr_min {})", self.lr, self.lr_min));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err("optim: beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0 && self.weight_decay >= 0.0) {
            return Err("optim: eps must be positive and weight_decay non-negative".into());
        }
        Ok(())
    }
}

/// AdamW moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub cfg: OptimConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl OptimState {
    pub fn new(params: &Params, cfg: OptimConfig) -> Self {
        let zeros = || {
            params
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect()
        };
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// `θ ← θ − lr·m̂/(√v̂ + eps) − lr·wd·θ`.
pub fn adamw_step(params: &mut Params, grads: &BTreeMap<String, Tensor>, st: &mut OptimState, lr: f64) -> Result<()> {
    for (k, g) in grads {
        let p = params
            .tensors
            .get(k)
            .ok_or_else(|| TrainError::Config(format!("gradient for unknown parameter '{k}'")))?;
        if p.shape() != g.shape() || st.m.get(k).map(Tensor::shape) != Some(p.shape()) {
            return Err(TrainError::Config(format!(
                "shape mismatch for '{k}': parameter {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    st.step += 1;
    let c = st.cfg;
    let bc1 = 1.0 - c.beta1.powi(st.step as i32);
    let bc2 = 1.0 - c.beta2.powi(st.step as i32);
    for (k, g) in grads {
        let p = params.tensors.get_mut(k).expect("checked above");
        let m = st.m.get_mut(k).expect("checked above");
        let v = st.v.get_mut(k).expect("checked above");
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((theta, &gi), (mi, vi)) in it {
            *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
            *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *theta = *theta - lr * mhat / (vhat.sqrt() + c.eps) - lr * c.weight_decay * *theta;
        }
    }
    Ok(())
}

/// `lr_min + ½(lr0 − lr_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: u64, total: u64, lr0: f64, lr_min: f64) -> Result<f64> {
    if step > total || total == 0 {
        return Err(TrainError::Config(format!("schedule step {step} outside [0, {total}]")));
    }
    let t = step as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn single(v: f64) -> Params {
        Params {
            tensors: [("w".to_string(), Tensor::from_slice(&[v]))].into(),
        }
    }

    fn grad(v: f64) -> BTreeMap<String, Tensor> {
        [("w".to_string(), Tensor::from_slice(&[v]))].into()
    }

    #[test]
    fn adamw_hand_example() {
        let mut p = single(1.0);
        let mut st = OptimState::new(&p, OptimConfig::default());
        adamw_step(&mut p, &grad(1.0), &mut st, 1e-4).unwrap();
        let expect = 1.0 - 1e-4 * (1.0 / (1.0 + 1e-8)) - 1e-9;
        assert_abs_diff_eq!(p.tensors["w"].data()[0], expect, epsilon = 1e-15);
        assert_abs_diff_eq!(p.tensors["w"].data()[0], 0.9998999990, epsilon = 1e-10);
    }

    #[test]
    fn zero_gradient_without_decay_is_still() {
        let mut p = single(0.37);
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut st = OptimState::new(&p, cfg);
        for _ in 0..5 {
            adamw_step(&mut p, &grad(0.0), &mut st, 1e-3).unwrap();
        }
        assert_eq!(p.tensors["w"].data()[0], 0.37);
    }

    #[test]
    fn trajectories_repeat() {
        let run = || {
            let mut p = single(0.5);
            let mut st = OptimState::new(&p, OptimConfig::default());
            for i in 0..20 {
                adamw_step(&mut p, &grad((i as f64).sin()), &mut st, 1e-2).unwrap();
            }
            (p, st)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adamw_rejects_mismatch() {
        let mut p = single(1.0);
        let mut st = OptimState::new(&p, OptimConfig::default());
        let bad: BTreeMap<String, Tensor> = [("w".to_string(), Tensor::from_slice(&[1.0, 2.0]))].into();
        assert!(adamw_step(&mut p, &bad, &mut st, 1e-4).is_err());
        assert_eq!(st.step, 0);
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 1e-4, 0.0).unwrap(), 1e-4);
        assert_abs_diff_eq!(cosine_lr(100, 100, 1e-4, 1e-6).unwrap(), 1e-6, epsilon = 1e-18);
        assert_abs_diff_eq!(cosine_lr(50, 100, 1e-4, 0.0).unwrap(), 5e-5, epsilon = 1e-18);
        assert!(cosine_lr(101, 100, 1e-4, 0.0).is_err());
    }
}
