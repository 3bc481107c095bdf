//! Adaptive-rank low-rank adapter.
//!
//! Each adapted projection carries an SVD-shaped update `P·diag(λ ⊙ mask)·Q`
//! with `P: [d × r]`, `λ: [r]`, `Q: [r × d]`. Every optimizer step the
//! sensitivity of each singular triplet is smoothed as
//! `s ← β·s + (1 − β)·|λ·∂L/∂λ|`, a global budget of active triplets is
//! interpolated cubically from `r_init` to `r_target` (per matrix, on
//! average) between `t_init` and `t_final`, and triplets outside the budget
//! are masked. Masking keeps `λ` so a triplet can come back if its importance
//! recovers. An orthogonality penalty `γ(‖PᵀP − I‖² + ‖QQᵀ − I‖²)` is added to
//! the loss.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_targets, default_targets, Proj};
use crate::encoder::{normal_tensor, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::{Parameter, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaLoraConfig {
    pub r_init: usize,
    pub r_target: usize,
    pub t_init: u64,
    pub t_final: u64,
    /// Orthogonality penalty weight γ.
    pub orth_weight: f64,
    /// Sensitivity smoothing β.
    pub beta: f64,
    #[serde(default = "default_targets")]
    pub targets: BTreeSet<Proj>,
}

impl Default for AdaLoraConfig {
    fn default() -> Self {
        Self {
            r_init: 12,
            r_target: 8,
            t_init: 50,
            t_final: 300,
            orth_weight: 0.1,
            beta: 0.85,
            targets: default_targets(),
        }
    }
}

impl AdaLoraConfig {
    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        check_targets(&self.targets)?;
        if self.r_init == 0 || self.r_init > enc.d_model {
            return Err(Error::Config(format!("AdaLoRA r_init {} outside [1, {}]", self.r_init, enc.d_model)));
        }
        if self.r_target == 0 || self.r_target > self.r_init {
            return Err(Error::Config(format!(
                "AdaLoRA r_target {} must be in [1, r_init={}]",
                self.r_target, self.r_init
            )));
        }
        if self.t_init >= self.t_final {
            return Err(Error::Config(format!(
                "AdaLoRA t_init {} must precede t_final {}",
                self.t_init, self.t_final
            )));
        }
        if !(self.orth_weight >= 0.0) || !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config("AdaLoRA needs γ ≥ 0 and 0 < β < 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvdTriplets<T> {
    pub layer: usize,
    pub target: Proj,
    /// `[d × r]`
    pub p: Parameter<T>,
    /// `[r]`
    pub lambda: Parameter<T>,
    /// `[r × d]`
    pub q: Parameter<T>,
    pub mask: Vec<bool>,
    pub sensitivity: Vec<T>,
}

impl<T: Scalar> SvdTriplets<T> {
    fn mask_tensor(&self) -> Tensor<T> {
        let data = self.mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
        Tensor::new(&[self.mask.len()], data).expect("rank ≥ 1")
    }

    pub fn active(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaLoraState<T> {
    pub config: AdaLoraConfig,
    pub triplets: Vec<SvdTriplets<T>>,
}

impl<T: Scalar> AdaLoraState<T> {
    /// `P` and `Q` start near-orthonormal (entries ~ N(0, 1/d)); `λ = 0`, so
    /// the adapted forward starts equal to the base.
    pub fn init(config: AdaLoraConfig, enc: &EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, r) = (enc.d_model, config.r_init);
        let std = 1.0 / (d as f64).sqrt();
        let mut triplets = Vec::new();
        for layer in 0..enc.layers {
            for &target in &config.targets {
                let id = |n: &str| format!("adalora.layers.{layer}.{target}.{n}");
                triplets.push(SvdTriplets {
                    layer,
                    target,
                    p: Parameter::new(id("p"), normal_tensor(&[d, r], std, &mut rng), true),
                    lambda: Parameter::new(id("lambda"), Tensor::zeros(&[r]), true),
                    q: Parameter::new(id("q"), normal_tensor(&[r, d], std, &mut rng), true),
                    mask: vec![true; r],
                    sensitivity: vec![T::zero(); r],
                });
            }
        }
        Self { config, triplets }
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        self.triplets.iter().flat_map(|t| [&t.p, &t.lambda, &t.q]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.triplets
            .iter_mut()
            .flat_map(|t| [&mut t.p, &mut t.lambda, &mut t.q])
            .collect()
    }

    /// `base + ((x·P) ⊙ (λ ⊙ mask))·Q`.
    pub(crate) fn adapt(&self, g: &mut Graph<T>, layer: usize, proj: Proj, x: Var, base: Var) -> Result<Var> {
        let Some(t) = self.triplets.iter().find(|t| t.layer == layer && t.target == proj) else {
            return Ok(base);
        };
        let (p, lambda, q) = (g.param(&t.p), g.param(&t.lambda), g.param(&t.q));
        let mask = g.constant(t.mask_tensor());
        let gated = g.mul(lambda, mask)?;
        let xp = g.matmul(x, p)?;
        let xp = g.mul(xp, gated)?;
        let delta = g.matmul(xp, q)?;
        g.add(base, delta)
    }

    pub(crate) fn orthogonality_penalty(&self, g: &mut Graph<T>) -> Result<Var> {
        let mut total: Option<Var> = None;
        for t in &self.triplets {
            let (p, q) = (g.param(&t.p), g.param(&t.q));
            let dp = g.gram_deviation(p, false)?;
            let dq = g.gram_deviation(q, true)?;
            let s = g.add(dp, dq)?;
            total = Some(match total {
                Some(acc) => g.add(acc, s)?,
                None => s,
            });
        }
        let total = total.ok_or_else(|| Error::Config("AdaLoRA adapter has no triplets".into()))?;
        Ok(g.scale(total, T::of(self.config.orth_weight)))
    }

    pub fn matrices(&self) -> usize {
        self.triplets.len()
    }

    /// Total number of active triplets allowed at step `t`.
    pub fn budget(&self, t: u64) -> usize {
        let c = &self.config;
        let m = self.matrices();
        let (start, end) = (c.r_init * m, c.r_target * m);
        if t <= c.t_init {
            return start;
        }
        if t >= c.t_final {
            return end;
        }
        let progress = (t - c.t_init) as f64 / (c.t_final - c.t_init) as f64;
        let remaining = (1.0 - progress).powi(3);
        let b = end as f64 + (start - end) as f64 * remaining;
        (b.ceil() as usize).clamp(end, start)
    }

    /// Mean number of active triplets per adapted matrix.
    pub fn active_rank(&self) -> f64 {
        let active: usize = self.triplets.iter().map(SvdTriplets::active).sum();
        active as f64 / self.matrices() as f64
    }

    /// Folds `|λ·∂L/∂λ|` from the current gradient buffers into the smoothed
    /// sensitivities.
    pub fn update_sensitivity(&mut self) {
        let beta = T::of(self.config.beta);
        for t in &mut self.triplets {
            let lambda = t.lambda.tensor.data();
            let grad = t.lambda.tensor.grad();
            for i in 0..lambda.len() {
                let g = grad.map_or(T::zero(), |g| g[i]);
                t.sensitivity[i] = beta * t.sensitivity[i] + (T::one() - beta) * (lambda[i] * g).abs();
            }
        }
    }

    /// Keeps the `budget(t)` most important triplets (ties: earlier matrix,
    /// then lower index) and masks the rest.
    pub fn apply_budget(&mut self, t: u64) {
        let budget = self.budget(t);
        let mut ranked: Vec<(usize, usize, T)> = self
            .triplets
            .iter()
            .enumerate()
            .flat_map(|(m, tr)| tr.sensitivity.iter().enumerate().map(move |(i, &s)| (m, i, s)))
            .collect();
        ranked.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });
        for tr in &mut self.triplets {
            tr.mask.iter_mut().for_each(|m| *m = false);
        }
        for &(m, i, _) in ranked.iter().take(budget) {
            self.triplets[m].mask[i] = true;
        }
    }

    /// One schedule step at optimizer step `t`: sensitivity update followed
    /// by budget masking. Call while gradients are still accumulated.
    pub fn step(&mut self, t: u64) {
        self.update_sensitivity();
        self.apply_budget(t);
    }
}
