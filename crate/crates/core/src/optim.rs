//! AdamW with decoupled weight decay, parameter selectors and the
//! warmup/linear-decay schedule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Gradients, ParamStore, Tensor};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("invalid selector pattern {pattern:?}: {reason}")]
    Pattern { pattern: String, reason: String },
    #[error("optimizer state has {state} slots but the model has {params} parameters")]
    Mismatch { state: usize, params: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
            clip_norm: None,
        }
    }
}

/// Whether a parameter gets weight decay: biases and layer-norm parameters do not.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.ends_with(".gain") || name.contains(".ln."))
}

/// First and second moments plus a step count per parameter. Parameters
/// that were never updated keep `step == 0` and zero moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub steps: Vec<u64>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            steps: vec![0; params.len()],
        }
    }

    /// Extend the state after parameters were appended or grown; grown
    /// tensors keep their old moments in the leading entries.
    pub fn sync_shapes(&mut self, params: &ParamStore) {
        for (id, _, t) in params.iter() {
            let i = id.index();
            if i >= self.m.len() {
                self.m.push(Tensor::zeros(t.shape()));
                self.v.push(Tensor::zeros(t.shape()));
                self.steps.push(0);
            } else if self.m[i].shape() != t.shape() {
                self.m[i] = regrow(&self.m[i], t.shape());
                self.v[i] = regrow(&self.v[i], t.shape());
            }
        }
    }
}

fn regrow(old: &Tensor, shape: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(shape);
    if old.shape().len() == 2 && shape.len() == 2 {
        let (r, c) = old.dims2();
        let (r2, c2) = (shape[0], shape[1]);
        for i in 0..r.min(r2) {
            out.row_mut(i)[..c.min(c2)].copy_from_slice(&old.row(i)[..c.min(c2)]);
        }
    }
    out
}

/// Apply one AdamW update to every parameter with `trainable[i]`.
///
/// Decay is decoupled: `p <- p - lr * wd * p - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adamw_step(
    params: &mut ParamStore,
    state: &mut AdamState,
    grads: &Gradients,
    lr: f64,
    trainable: &[bool],
    config: &AdamConfig,
) -> Result<(), OptimError> {
    if state.m.len() != params.len() || trainable.len() != params.len() {
        return Err(OptimError::Mismatch {
            state: state.m.len(),
            params: params.len(),
        });
    }
    let clip = match config.clip_norm {
        Some(c) if c > 0.0 => {
            let n = grads.global_norm();
            if n > c {
                c / n
            } else {
                1.0
            }
        }
        _ => 1.0,
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let i = id.index();
        if !trainable[i] {
            continue;
        }
        let wd = if decays(params.name(id)) { config.weight_decay } else { 0.0 };
        state.steps[i] += 1;
        let t = state.steps[i] as i32;
        let bc1 = 1.0 - config.beta1.powi(t);
        let bc2 = 1.0 - config.beta2.powi(t);
        let g = grads.get(id).data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.get_mut(id).data_mut();
        for j in 0..p.len() {
            let gj = g[j] * clip;
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * gj;
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * gj * gj;
            let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + config.eps);
            p[j] = p[j] * (1.0 - lr * wd) - lr * update;
        }
    }
    Ok(())
}

/// Comma-separated glob patterns over parameter names. A pattern prefixed
/// with `!` excludes; a name is selected when it matches some plain pattern
/// and no excluding one.
#[derive(Debug, Clone)]
pub struct ParamSelector {
    source: String,
    include: Vec<glob::Pattern>,
    exclude: Vec<glob::Pattern>,
}

impl PartialEq for ParamSelector {
    fn eq(&self, other: &Self) -> bool {
        self.source == other.source
    }
}

impl ParamSelector {
    pub fn parse(spec: &str) -> Result<Self, OptimError> {
        let mut include = Vec::new();
        let mut exclude = Vec::new();
        for raw in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (neg, pat) = match raw.strip_prefix('!') {
                Some(p) => (true, p),
                None => (false, raw),
            };
            let compiled = glob::Pattern::new(pat).map_err(|e| OptimError::Pattern {
                pattern: raw.to_string(),
                reason: e.to_string(),
            })?;
            if neg {
                exclude.push(compiled);
            } else {
                include.push(compiled);
            }
        }
        Ok(ParamSelector {
            source: spec.to_string(),
            include,
            exclude,
        })
    }

    pub fn none() -> Self {
        ParamSelector {
            source: String::new(),
            include: Vec::new(),
            exclude: Vec::new(),
        }
    }

    pub fn matches(&self, name: &str) -> bool {
        self.include.iter().any(|p| p.matches(name)) && !self.exclude.iter().any(|p| p.matches(name))
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }

    pub fn mask(&self, params: &ParamStore) -> Vec<bool> {
        params.iter().map(|(_, n, _)| self.matches(n)).collect()
    }
}

impl Serialize for ParamSelector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.source)
    }
}

impl<'de> Deserialize<'de> for ParamSelector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ParamSelector::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Learning rate within one stage: linear ramp `0 -> peak` over `warmup`
/// steps, then linear decay to zero at the end of the stage.
pub fn stage_lr(local_step: usize, stage_len: usize, warmup: usize, peak: f64) -> f64 {
    if stage_len == 0 || local_step >= stage_len {
        return 0.0;
    }
    if local_step < warmup {
        return peak * local_step as f64 / warmup as f64;
    }
    let decay_len = stage_len - warmup;
    if decay_len == 0 {
        return 0.0;
    }
    peak * (stage_len - local_step) as f64 / decay_len as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("layer.weight", Tensor::full(&[2, 2], 1.0));
        p.insert("layer.bias", Tensor::full(&[1, 2], 1.0));
        p.insert("enc.ln.gain", Tensor::full(&[1, 2], 1.0));
        p
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let mut p = store();
        let mut st = AdamState::new(&p);
        let g = Gradients::zeros_like(&p);
        let cfg = AdamConfig::default();
        let lr = 1e-3;
        for _ in 0..5 {
            adamw_step(&mut p, &mut st, &g, lr, &[true; 3], &cfg).unwrap();
        }
        let mut expected = 1.0;
        for _ in 0..5 {
            expected *= 1.0 - lr * 0.01;
        }
        assert!(p.by_name("layer.weight").unwrap().data().iter().all(|&v| v == expected));
        assert!(p.by_name("layer.bias").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(p.by_name("enc.ln.gain").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = ParamStore::new();
        p.insert("w.bias", Tensor::row_vector(&[0.0, 0.0]));
        let mut st = AdamState::new(&p);
        let mut g = Gradients::zeros_like(&p);
        g.accumulate(0, &Tensor::row_vector(&[3.0, -0.5]));
        let cfg = AdamConfig {
            eps: 0.0,
            ..AdamConfig::default()
        };
        adamw_step(&mut p, &mut st, &g, 0.1, &[true], &cfg).unwrap();
        let d = p.by_name("w.bias").unwrap().data();
        assert!((d[0] + 0.1).abs() < 1e-15 && (d[1] - 0.1).abs() < 1e-15);
        assert_eq!(st.steps, vec![1]);
    }

    #[test]
    fn frozen_parameters_and_state_untouched() {
        let mut p = store();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let mut g = Gradients::zeros_like(&p);
        g.accumulate(0, &Tensor::full(&[2, 2], 1.0));
        adamw_step(&mut p, &mut st, &g, 0.1, &[false, true, true], &AdamConfig::default()).unwrap();
        assert_eq!(p.by_name("layer.weight"), before.by_name("layer.weight"));
        assert_eq!(st.steps[0], 0);
        assert!(st.m[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clipping_scales_gradient() {
        let mut p = ParamStore::new();
        p.insert("x.bias", Tensor::row_vector(&[0.0]));
        let mut st = AdamState::new(&p);
        let mut g = Gradients::zeros_like(&p);
        g.accumulate(0, &Tensor::row_vector(&[10.0]));
        let cfg = AdamConfig {
            clip_norm: Some(1.0),
            ..AdamConfig::default()
        };
        adamw_step(&mut p, &mut st, &g, 0.1, &[true], &cfg).unwrap();
        assert!((st.m[0].data()[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn selector_patterns() {
        let s = ParamSelector::parse("*, !entity_embeddings.*, !mep.*").unwrap();
        assert!(s.matches("embeddings.word"));
        assert!(s.matches("layers.0.attention.query.weight"));
        assert!(!s.matches("entity_embeddings.projection"));
        assert!(!s.matches("mep.decoder.weight"));
        assert!(!ParamSelector::none().matches("anything"));
        assert!(ParamSelector::parse("[").is_err());
    }

    #[test]
    fn schedule_shape() {
        assert!((stage_lr(1250, 500_000, 2500, 5e-4) - 2.5e-4).abs() < 1e-18);
        assert_eq!(stage_lr(0, 100, 10, 1.0), 0.0);
        assert_eq!(stage_lr(10, 100, 10, 1.0), 1.0);
        assert_eq!(stage_lr(99, 100, 10, 1.0), 1.0 / 90.0);
        assert!((stage_lr(5, 100, 0, 1.0) - 0.95).abs() < 1e-15);
        assert_eq!(stage_lr(100, 100, 10, 1.0), 0.0);
    }

    #[test]
    fn sync_shapes_keeps_old_moments() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::zeros(&[2, 2]));
        let mut st = AdamState::new(&p);
        st.m[0] = Tensor::full(&[2, 2], 3.0);
        p.insert("a", Tensor::zeros(&[3, 2]));
        p.insert("b", Tensor::zeros(&[1, 1]));
        st.sync_shapes(&p);
        assert_eq!(st.m[0].shape(), &[3, 2]);
        assert_eq!(st.m[0].row(1), &[3.0, 3.0]);
        assert_eq!(st.m[0].row(2), &[0.0, 0.0]);
        assert_eq!(st.steps.len(), 2);
    }
}
