//! AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::array::Array;
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Linear warmup from `lr_init` to `lr_max`, then cosine decay to `lr_min`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr_max: f64,
    pub lr_init: f64,
    pub lr_min: f64,
    pub warmup_fraction: f64,
    pub total_steps: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { lr_max: 3e-4, lr_init: 1e-5, lr_min: 0.0, warmup_fraction: 0.01, total_steps: 1000 }
    }
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule { lr_max: lr, lr_init: lr, lr_min: lr, warmup_fraction: 0.0, total_steps: 1 }
    }

    pub fn warmup_steps(&self) -> u64 {
        ((self.warmup_fraction * self.total_steps as f64).round() as u64).max(1)
    }

    /// Learning rate used for the update with zero-based index `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let w = self.warmup_steps();
        if step < w {
            return self.lr_init + (self.lr_max - self.lr_init) * step as f64 / w as f64;
        }
        if self.total_steps <= w {
            return self.lr_max;
        }
        let p = ((step - w) as f64 / (self.total_steps - w) as f64).min(1.0);
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, schedule: LrSchedule::default() }
    }
}

/// First and second moments per parameter plus the number of applied steps.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Array>,
    pub v: Vec<Array>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Array> = store.iter().map(|(_, _, a)| Array::zeros(a.shape())).collect();
        OptimizerState { m: zeros.clone(), v: zeros, step: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    Applied { lr: f64 },
    /// A gradient entry was NaN or infinite; parameters and state are untouched.
    Skipped { param: String },
}

/// One AdamW update. Parameters absent from `grads` are treated as having zero gradient.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[(ParamId, Array)],
    state: &mut OptimizerState,
    cfg: &AdamWConfig,
) -> Result<StepOutcome> {
    if state.m.len() != store.len() || state.v.len() != store.len() {
        return Err(Error::ShapeMismatch { expected: vec![store.len()], found: vec![state.m.len()] });
    }
    let mut full: Vec<Option<&Array>> = vec![None; store.len()];
    for (id, g) in grads {
        let p = store.get(*id);
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch { expected: p.shape().to_vec(), found: g.shape().to_vec() });
        }
        if !g.all_finite() {
            return Ok(StepOutcome::Skipped { param: store.name(*id).to_string() });
        }
        full[id.0] = Some(g);
    }
    for (i, (_, _, p)) in store.iter().enumerate() {
        if state.m[i].shape() != p.shape() {
            return Err(Error::ShapeMismatch { expected: p.shape().to_vec(), found: state.m[i].shape().to_vec() });
        }
    }

    let lr = cfg.schedule.lr_at(state.step);
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (i, g) in full.iter().enumerate() {
        let id = ParamId(i);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let p = store.get_mut(id);
        let pd = p.data_mut();
        for k in 0..pd.len() {
            let gk = g.map_or(0.0, |g| g.data()[k]);
            let mk = cfg.beta1 * m.data()[k] + (1.0 - cfg.beta1) * gk;
            let vk = cfg.beta2 * v.data()[k] + (1.0 - cfg.beta2) * gk * gk;
            m.data_mut()[k] = mk;
            v.data_mut()[k] = vk;
            let update = (mk / bc1) / ((vk / bc2).sqrt() + cfg.eps);
            pd[k] = pd[k] * decay - lr * update;
        }
    }
    Ok(StepOutcome::Applied { lr })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Array::from_vec(vec![v]));
        (s, id)
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let (mut s, id) = one_param(0.7);
        let mut st = OptimizerState::new(&s);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        for _ in 0..3 {
            adamw_step(&mut s, &[(id, Array::from_vec(vec![0.0]))], &mut st, &cfg).unwrap();
        }
        assert_eq!(s.get(id).data(), &[0.7]);
    }

    #[test]
    fn pure_decay_scales_exactly() {
        let (mut s, id) = one_param(1.3);
        let mut st = OptimizerState::new(&s);
        let cfg = AdamWConfig { schedule: LrSchedule::constant(0.1), ..Default::default() };
        let mut expected = 1.3;
        for _ in 0..5 {
            adamw_step(&mut s, &[(id, Array::from_vec(vec![0.0]))], &mut st, &cfg).unwrap();
            expected *= 1.0 - 0.1 * 0.01;
            assert_eq!(s.get(id).data()[0], expected);
        }
    }

    #[test]
    fn matches_reference_recurrence() {
        // hand-rolled reference: constant grad 1, three steps
        let (lr, b1, b2, eps, wd) = (0.05, 0.9f64, 0.999f64, 1e-8, 0.01);
        let (mut p, mut m, mut v) = (0.5f64, 0.0, 0.0);
        for t in 1..=3 {
            m = b1 * m + (1.0 - b1);
            v = b2 * v + (1.0 - b2);
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            p = p - lr * wd * p - lr * mh / (vh.sqrt() + eps);
        }
        let (mut s, id) = one_param(0.5);
        let mut st = OptimizerState::new(&s);
        let cfg = AdamWConfig { schedule: LrSchedule::constant(lr), ..Default::default() };
        for _ in 0..3 {
            adamw_step(&mut s, &[(id, Array::from_vec(vec![1.0]))], &mut st, &cfg).unwrap();
        }
        assert!((s.get(id).data()[0] - p).abs() < 1e-15);
        assert_eq!(st.step, 3);
    }

    #[test]
    fn warmup_endpoints() {
        let sch = LrSchedule { lr_max: 3e-4, lr_init: 1e-5, lr_min: 0.0, warmup_fraction: 0.01, total_steps: 1000 };
        assert_eq!(sch.lr_at(0), 1e-5);
        assert_eq!(sch.warmup_steps(), 10);
        assert_eq!(sch.lr_at(10), 3e-4);
        assert!((sch.lr_at(5) - (1e-5 + 0.5 * (3e-4 - 1e-5))).abs() < 1e-18);
        assert!(sch.lr_at(1000).abs() < 1e-18);
        assert!(sch.lr_at(505) < 3e-4 && sch.lr_at(505) > 0.0);
    }

    #[test]
    fn non_finite_gradient_skips() {
        let (mut s, id) = one_param(1.0);
        let mut st = OptimizerState::new(&s);
        let out = adamw_step(&mut s, &[(id, Array::from_vec(vec![f64::NAN]))], &mut st, &AdamWConfig::default()).unwrap();
        assert!(matches!(out, StepOutcome::Skipped { .. }));
        assert_eq!(st.step, 0);
        assert_eq!(s.get(id).data(), &[1.0]);
    }

    #[test]
    fn shape_mismatch_errors() {
        let (mut s, id) = one_param(1.0);
        let mut st = OptimizerState::new(&s);
        let r = adamw_step(&mut s, &[(id, Array::from_vec(vec![1.0, 2.0]))], &mut st, &AdamWConfig::default());
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
    }
}
