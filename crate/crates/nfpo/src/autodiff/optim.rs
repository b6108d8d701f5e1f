use std::collections::BTreeMap;

use super::tensor::Tensor;
use super::Real;
use crate::{Error, Result};

/// Index of a parameter slot inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

struct Slot<T> {
    value: Tensor<T>,
    grad: Tensor<T>,
    m: Tensor<T>,
    v: Tensor<T>,
}

/// Mapping from dotted parameter name to tensor, plus per-parameter
/// adaptive-moment state. Iteration order is lexicographic by name so every
/// whole-store reduction (gradient norm, update sweep) is deterministic.
pub struct ParamStore<T: Real> {
    slots: Vec<Slot<T>>,
    names: Vec<String>,
    by_name: BTreeMap<String, usize>,
    adam_step: u64,
    skipped_updates: u64,
}

/// Adaptive-moment update settings. `grad_clip` is a global L2-norm bound
/// applied across all parameters before the update.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
        }
    }
}

/// What a single optimizer step did.
#[derive(Clone, Copy, Debug)]
pub struct StepOutcome {
    /// False when the update was skipped because of a non-finite gradient.
    pub applied: bool,
    /// Global gradient L2 norm before clipping.
    pub grad_norm: f64,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            slots: Vec::new(),
            names: Vec::new(),
            by_name: BTreeMap::new(),
            adam_step: 0,
            skipped_updates: 0,
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Graph(format!("duplicate parameter name {name:?}")));
        }
        let idx = self.slots.len();
        let shape = value.shape().to_vec();
        self.slots.push(Slot {
            value,
            grad: Tensor::zeros(shape.clone()),
            m: Tensor::zeros(shape.clone()),
            v: Tensor::zeros(shape),
        });
        self.names.push(name.to_string());
        self.by_name.insert(name.to_string(), idx);
        Ok(ParamId(idx))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.slots[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.0].grad
    }

    pub fn moments(&self, id: ParamId) -> (&Tensor<T>, &Tensor<T>) {
        (&self.slots[id.0].m, &self.slots[id.0].v)
    }

    pub fn set_moments(&mut self, id: ParamId, m: Tensor<T>, v: Tensor<T>) -> Result<()> {
        let slot = &mut self.slots[id.0];
        if m.shape() != slot.value.shape() || v.shape() != slot.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_moments",
                lhs: slot.value.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
        slot.m = m;
        slot.v = v;
        Ok(())
    }

    pub fn adam_step_count(&self) -> u64 {
        self.adam_step
    }

    pub fn set_adam_step_count(&mut self, step: u64) {
        self.adam_step = step;
    }

    /// How many updates were skipped because of non-finite gradients.
    pub fn skipped_updates(&self) -> u64 {
        self.skipped_updates
    }

    /// Lexicographic (name, id) iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamId)> {
        self.by_name.iter().map(|(n, &i)| (n.as_str(), ParamId(i)))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for slot in &mut self.slots {
            for g in slot.grad.data_mut() {
                *g = T::ZERO;
            }
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, contrib: &[T]) -> Result<()> {
        let slot = &mut self.slots[id.0];
        if slot.grad.len() != contrib.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                lhs: slot.grad.shape().to_vec(),
                rhs: vec![contrib.len()],
            });
        }
        for (g, &c) in slot.grad.data_mut().iter_mut().zip(contrib) {
            *g += c;
        }
        Ok(())
    }

    /// Global gradient L2 norm, accumulated in f64 in name order.
    pub fn grad_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for (_, id) in self.iter() {
            for &g in self.slots[id.0].grad.data() {
                let g = g.to_f64();
                acc += g * g;
            }
        }
        acc.sqrt()
    }

    /// One adaptive-moment step over every parameter: clip the global
    /// gradient norm, then `m/v` updates with bias correction. A non-finite
    /// gradient skips the whole update and bumps a counter instead of
    /// poisoning the parameters.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> StepOutcome {
        let norm = self.grad_norm();
        if !norm.is_finite() {
            self.skipped_updates += 1;
            return StepOutcome {
                applied: false,
                grad_norm: norm,
            };
        }
        let mut scale = 1.0f64;
        if let Some(clip) = cfg.grad_clip {
            if norm > clip {
                scale = clip / norm;
            }
        }
        self.adam_step += 1;
        let t = self.adam_step as i32;
        let b1 = T::from_f64(cfg.beta1);
        let b2 = T::from_f64(cfg.beta2);
        let one_m_b1 = T::from_f64(1.0 - cfg.beta1);
        let one_m_b2 = T::from_f64(1.0 - cfg.beta2);
        let corr1 = T::from_f64(1.0 / (1.0 - cfg.beta1.powi(t)));
        let corr2 = T::from_f64(1.0 / (1.0 - cfg.beta2.powi(t)));
        let lr = T::from_f64(cfg.lr);
        let eps = T::from_f64(cfg.eps);
        let scale_t = T::from_f64(scale);

        let order: Vec<usize> = self.by_name.values().copied().collect();
        for idx in order {
            let slot = &mut self.slots[idx];
            let n = slot.value.len();
            for i in 0..n {
                let g = slot.grad.data()[i] * scale_t;
                let m = b1 * slot.m.data()[i] + one_m_b1 * g;
                let v = b2 * slot.v.data()[i] + one_m_b2 * g * g;
                slot.m.data_mut()[i] = m;
                slot.v.data_mut()[i] = v;
                let m_hat = m * corr1;
                let v_hat = v * corr2;
                let delta = lr * m_hat / (v_hat.sqrt() + eps);
                slot.value.data_mut()[i] = slot.value.data()[i] - delta;
            }
        }
        StepOutcome {
            applied: true,
            grad_norm: norm,
        }
    }

    /// Overwrite every parameter with `scale`-sized normal draws, keyed by
    /// parameter name. Used by tests and the verification oracles to probe
    /// non-identity configurations.
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        let order: Vec<usize> = self.by_name.values().copied().collect();
        for idx in order {
            let name_hash = {
                let mut h = 0xcbf2_9ce4_8422_2325u64;
                for &b in self.names[idx].as_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01B3);
                }
                h
            };
            let mut rng = crate::rng::Stream::new(seed, "randomize", &[name_hash]);
            let slot = &mut self.slots[idx];
            let draws = rng.normals(slot.value.len());
            for (v, d) in slot.value.data_mut().iter_mut().zip(draws) {
                *v = T::from_f64(d * scale);
            }
        }
    }

    /// Convert every tensor (values only; grads and moments reset) to
    /// another precision. Used to lift trained f32 parameters into the
    /// 64-bit verification mode.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, id) in self.iter() {
            out.insert(name, self.value(id).cast::<U>())
                .expect("names unique by construction");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexicographic_iteration() {
        let mut s = ParamStore::<f64>::new();
        s.insert("b.w", Tensor::scalar(1.0)).unwrap();
        s.insert("a.w", Tensor::scalar(2.0)).unwrap();
        s.insert("a.b", Tensor::scalar(3.0)).unwrap();
        let names: Vec<&str> = s.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["a.b", "a.w", "b.w"]);
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(s.insert("w", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn grad_norm_clip_rescales() {
        // flat gradient of norm 10 with bound 1.0 → rescaled by 0.1
        let mut s = ParamStore::<f64>::new();
        let id = s.insert("w", Tensor::vector(vec![0.0; 100])).unwrap();
        s.accumulate_grad(id, &vec![1.0; 100]).unwrap();
        assert!((s.grad_norm() - 10.0).abs() < 1e-12);
        let out = s.adam_step(&AdamConfig {
            lr: 1e-3,
            grad_clip: Some(1.0),
            ..AdamConfig::default()
        });
        assert!(out.applied);
        assert!((out.grad_norm - 10.0).abs() < 1e-12);
        // After clipping all gradient components are 0.1; the first Adam step
        // moves every coordinate by lr (bias-corrected m/sqrt(v) = sign(g)).
        let w = s.value(id);
        let expected = -1e-3 * 0.1 / (0.1 + 1e-8);
        for &x in w.data() {
            assert!((x - expected).abs() < 1e-9, "{x} vs {expected}");
        }
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut s = ParamStore::<f64>::new();
        let id = s.insert("w", Tensor::vector(vec![1.5, -2.5])).unwrap();
        let before = s.value(id).clone();
        let out = s.adam_step(&AdamConfig::default());
        assert!(out.applied);
        assert_eq!(s.value(id), &before);
    }

    #[test]
    fn nonfinite_gradient_skips_and_counts() {
        let mut s = ParamStore::<f64>::new();
        let id = s.insert("w", Tensor::scalar(1.0)).unwrap();
        s.accumulate_grad(id, &[f64::NAN]).unwrap();
        let out = s.adam_step(&AdamConfig::default());
        assert!(!out.applied);
        assert_eq!(s.skipped_updates(), 1);
        assert_eq!(s.value(id).item(), 1.0);
        assert_eq!(s.adam_step_count(), 0);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut s = ParamStore::<f64>::new();
        let id = s.insert("w", Tensor::vector(vec![0.7, -0.2])).unwrap();
        s.accumulate_grad(id, &[3.0, -5.0]).unwrap();
        let before = s.value(id).clone();
        s.adam_step(&AdamConfig {
            lr: 0.0,
            grad_clip: None,
            ..AdamConfig::default()
        });
        assert_eq!(s.value(id), &before);
    }

    #[test]
    fn two_steps_constant_gradient_hand_trace() {
        // Single parameter, constant gradient 1, lr = 0.1, no clipping.
        // Hand-rolled two-step trace of the moment recursions:
        //   t=1: m=0.1, v=0.001, m̂=1, v̂=1        → θ -= lr·1/(1+ε)
        //   t=2: m=0.19, v=0.001999, m̂=1, v̂=1    → θ -= lr·1/(1+ε)
        let mut s = ParamStore::<f64>::new();
        let id = s.insert("w", Tensor::scalar(0.0)).unwrap();
        let cfg = AdamConfig {
            lr: 0.1,
            grad_clip: None,
            ..AdamConfig::default()
        };
        let mut expected = 0.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=2 {
            s.zero_grads();
            s.accumulate_grad(id, &[1.0]).unwrap();
            s.adam_step(&cfg);

            m = 0.9 * m + 0.1 * 1.0;
            v = 0.999 * v + 0.001 * 1.0;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            expected -= 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
            let got = s.value(id).item();
            assert!((got - expected).abs() < 1e-12, "step {t}: {got} vs {expected}");
        }
        // Monotone decrease under a constant positive gradient.
        assert!(s.value(id).item() < -0.19);
    }
}
