use std::collections::BTreeMap;

use crate::scalar::Scalar;
use crate::tensor::Parameter;

/// `lr_min + ½(lr_max − lr_min)(1 + cos(πt/T))`; steps past the horizon
/// clamp to `lr_min`.
pub fn cosine_annealing(t: u64, horizon: u64, lr_max: f64, lr_min: f64) -> f64 {
    let horizon = horizon.max(1);
    if t > horizon {
        log::warn!("scheduler step {t} past horizon {horizon}; clamping to lr_min");
        return lr_min;
    }
    let phase = std::f64::consts::PI * t as f64 / horizon as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos())
}

#[derive(Debug, Clone, PartialEq)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Adam without weight decay. State is created lazily, and only for
/// trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            state: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> Adam<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn has_state(&self, id: &str) -> bool {
        self.state.contains_key(id)
    }

    /// Applies one update with learning rate `lr` using each parameter's
    /// accumulated gradient (a missing gradient counts as zero).
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Parameter<T>>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        for p in params {
            if !p.trainable {
                continue;
            }
            let n = p.tensor.numel();
            let st = self.state.entry(p.id.clone()).or_insert_with(|| Moments {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            });
            let grad = p.tensor.grad().map(<[T]>::to_vec);
            let data = p.tensor.data_mut();
            for i in 0..n {
                let g = grad.as_ref().map_or(T::zero(), |g| g[i]);
                st.m[i] = b1 * st.m[i] + (T::one() - b1) * g;
                st.v[i] = b2 * st.v[i] + (T::one() - b2) * g * g;
                let m_hat = st.m[i] / c1;
                let v_hat = st.v[i] / c2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
