use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_targets, default_targets, Proj};
use crate::encoder::{normal_tensor, EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::{Parameter, Tensor};

const A_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    /// Scale numerator; the update is multiplied by `alpha / rank`.
    /// Defaults to `2 · rank` when absent.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "default_targets")]
    pub targets: BTreeSet<Proj>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: None,
            targets: default_targets(),
        }
    }
}

impl LoraConfig {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(2.0 * self.rank as f64)
    }

    pub fn scaling(&self) -> f64 {
        self.alpha() / self.rank as f64
    }

    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        check_targets(&self.targets)?;
        if self.rank == 0 || self.rank > enc.d_model {
            return Err(Error::Config(format!(
                "LoRA rank {} outside [1, {}]",
                self.rank, enc.d_model
            )));
        }
        Ok(())
    }
}

/// Low-rank factors for one projection: `ΔW = (α/r)·B·A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<T> {
    pub layer: usize,
    pub target: Proj,
    /// `[r × d]`
    pub a: Parameter<T>,
    /// `[d × r]`
    pub b: Parameter<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraState<T> {
    pub config: LoraConfig,
    pub pairs: Vec<LoraPair<T>>,
    /// Set once the update has been folded into the base weights.
    pub merged: bool,
}

/// `W + (α/r)·B·A`.
pub fn merge_lora<T: Scalar>(w: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>, alpha: f64, rank: usize) -> Result<Tensor<T>> {
    let delta = ops::matmul(b, a)?;
    if delta.shape() != w.shape() {
        return Err(Error::Dimension(format!(
            "LoRA update {:?} does not match weight {:?}",
            delta.shape(),
            w.shape()
        )));
    }
    let s = T::of(alpha / rank as f64);
    let data = w.data().iter().zip(delta.data()).map(|(&x, &dx)| x + s * dx).collect();
    Tensor::new(w.shape(), data)
}

impl<T: Scalar> LoraState<T> {
    /// A ~ N(0, 0.02²), B = 0, so the adapted forward starts equal to the base.
    pub fn init(config: LoraConfig, enc: &EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, r) = (enc.d_model, config.rank);
        let mut pairs = Vec::new();
        for layer in 0..enc.layers {
            for &target in &config.targets {
                let id = |n: &str| format!("lora.layers.{layer}.{target}.{n}");
                pairs.push(LoraPair {
                    layer,
                    target,
                    a: Parameter::new(id("a"), normal_tensor(&[r, d], A_INIT_STD, &mut rng), true),
                    b: Parameter::new(id("b"), Tensor::zeros(&[d, r]), true),
                });
            }
        }
        Self {
            config,
            pairs,
            merged: false,
        }
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        self.pairs.iter().flat_map(|p| [&p.a, &p.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.pairs.iter_mut().flat_map(|p| [&mut p.a, &mut p.b]).collect()
    }

    fn pair(&self, layer: usize, target: Proj) -> Option<&LoraPair<T>> {
        self.pairs.iter().find(|p| p.layer == layer && p.target == target)
    }

    /// `base + (α/r)·(x·B)·A`.
    pub(crate) fn adapt(&self, g: &mut Graph<T>, layer: usize, proj: Proj, x: Var, base: Var) -> Result<Var> {
        let Some(pair) = self.pair(layer, proj).filter(|_| !self.merged) else {
            return Ok(base);
        };
        let (a, b) = (g.param(&pair.a), g.param(&pair.b));
        let xb = g.matmul(x, b)?;
        let delta = g.matmul(xb, a)?;
        let delta = g.scale(delta, T::of(self.config.scaling()));
        g.add(base, delta)
    }

    /// Folds every update into `encoder`'s projection weights. Merging is
    /// single-shot: a second call fails.
    pub fn merge_into(&mut self, encoder: &mut EncoderWeights<T>) -> Result<()> {
        if self.merged {
            return Err(Error::Config("LoRA adapter already merged".into()));
        }
        let (alpha, rank) = (self.config.alpha(), self.config.rank);
        for p in &self.pairs {
            let w = encoder.layers[p.layer].projection_mut(p.target);
            w.tensor = merge_lora(&w.tensor, &p.a.tensor, &p.b.tensor, alpha, rank)?;
        }
        self.merged = true;
        Ok(())
    }
}
