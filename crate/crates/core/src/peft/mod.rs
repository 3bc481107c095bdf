//! Parameter-efficient adapters attached to a frozen encoder.
//!
//! Four methods are supported:
//!
//! * LoRA: low-rank addends on the Q and V projections.
//! * AdaLoRA: SVD-shaped addends `P·diag(λ)·Q` whose rank shrinks during
//!   training under an importance-driven budget.
//! * (IA)³: learned scaling vectors on the Q-projection output, the
//!   K-projection output and the attention-output linear.
//! * Prompt tuning: learned vectors prepended to the embedded input.
//!
//! Attaching any of them freezes every base parameter.

mod adalora;
mod ia3;
mod lora;
mod prompt;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Parameter;

pub use adalora::{AdaLoraConfig, AdaLoraState};
pub use ia3::{Ia3Config, Ia3State};
pub use lora::{merge_lora, LoraConfig, LoraState};
pub use prompt::{PromptConfig, PromptInit, PromptState};

/// The four attention projections of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Proj {
    Q,
    K,
    V,
    O,
}

impl fmt::Display for Proj {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Proj::Q => "q",
            Proj::K => "k",
            Proj::V => "v",
            Proj::O => "o",
        })
    }
}

pub(crate) fn check_targets(targets: &BTreeSet<Proj>) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::Config("adapter target set is empty".into()));
    }
    if let Some(t) = targets.iter().find(|t| !matches!(t, Proj::Q | Proj::V)) {
        return Err(Error::Config(format!("low-rank targets must be q or v, got {t}")));
    }
    Ok(())
}

pub(crate) fn default_targets() -> BTreeSet<Proj> {
    [Proj::Q, Proj::V].into_iter().collect()
}

/// Method name, including the two non-adapter training modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Full,
    Lora,
    Adalora,
    Ia3,
    Prompt,
    None,
}

impl Method {
    pub fn is_adapter(self) -> bool {
        matches!(self, Method::Lora | Method::Adalora | Method::Ia3 | Method::Prompt)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Full => "full",
            Method::Lora => "lora",
            Method::Adalora => "adalora",
            Method::Ia3 => "ia3",
            Method::Prompt => "prompt",
            Method::None => "none",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Method::Full,
            "lora" => Method::Lora,
            "adalora" => Method::Adalora,
            "ia3" => Method::Ia3,
            "prompt" => Method::Prompt,
            "none" => Method::None,
            other => return Err(Error::Config(format!("unknown method {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum AdapterConfig {
    Lora(LoraConfig),
    Adalora(AdaLoraConfig),
    Ia3(Ia3Config),
    Prompt(PromptConfig),
}

impl AdapterConfig {
    pub fn method(&self) -> Method {
        match self {
            AdapterConfig::Lora(_) => Method::Lora,
            AdapterConfig::Adalora(_) => Method::Adalora,
            AdapterConfig::Ia3(_) => Method::Ia3,
            AdapterConfig::Prompt(_) => Method::Prompt,
        }
    }

    /// Default configuration for an adapter method.
    pub fn default_for(method: Method) -> Option<Self> {
        Some(match method {
            Method::Lora => AdapterConfig::Lora(LoraConfig::default()),
            Method::Adalora => AdapterConfig::Adalora(AdaLoraConfig::default()),
            Method::Ia3 => AdapterConfig::Ia3(Ia3Config::default()),
            Method::Prompt => AdapterConfig::Prompt(PromptConfig::default()),
            Method::Full | Method::None => return None,
        })
    }

    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        match self {
            AdapterConfig::Lora(c) => c.validate(enc),
            AdapterConfig::Adalora(c) => c.validate(enc),
            AdapterConfig::Ia3(_) => Ok(()),
            AdapterConfig::Prompt(c) => c.validate(enc),
        }
    }
}

/// Closed-form trainable-parameter count of an adapter on an encoder.
pub fn count_trainable(config: &AdapterConfig, enc: &EncoderConfig) -> usize {
    let (l, d) = (enc.layers, enc.d_model);
    match config {
        AdapterConfig::Lora(c) => l * c.targets.len() * 2 * d * c.rank,
        AdapterConfig::Adalora(c) => l * c.targets.len() * c.r_init * (2 * d + 1),
        AdapterConfig::Ia3(_) => l * 3 * d,
        AdapterConfig::Prompt(c) => c.virtual_tokens * d,
    }
}

/// Trainable adapter state attached to one encoder.
#[derive(Debug, Clone, PartialEq)]
pub enum Adapter<T> {
    Lora(LoraState<T>),
    Adalora(AdaLoraState<T>),
    Ia3(Ia3State<T>),
    Prompt(PromptState<T>),
}

impl<T: Scalar> Adapter<T> {
    /// Freezes `encoder` and builds a freshly initialized adapter for it.
    pub fn attach(config: &AdapterConfig, encoder: &mut EncoderWeights<T>, seed: u64) -> Result<Self> {
        config.validate(&encoder.config)?;
        encoder.set_trainable(false);
        Ok(match config {
            AdapterConfig::Lora(c) => Adapter::Lora(LoraState::init(c.clone(), &encoder.config, seed)),
            AdapterConfig::Adalora(c) => Adapter::Adalora(AdaLoraState::init(c.clone(), &encoder.config, seed)),
            AdapterConfig::Ia3(c) => Adapter::Ia3(Ia3State::init(c.clone(), &encoder.config)),
            AdapterConfig::Prompt(c) => Adapter::Prompt(PromptState::init(c.clone(), encoder, seed)?),
        })
    }

    pub fn config(&self) -> AdapterConfig {
        match self {
            Adapter::Lora(s) => AdapterConfig::Lora(s.config.clone()),
            Adapter::Adalora(s) => AdapterConfig::Adalora(s.config.clone()),
            Adapter::Ia3(s) => AdapterConfig::Ia3(s.config.clone()),
            Adapter::Prompt(s) => AdapterConfig::Prompt(s.config.clone()),
        }
    }

    pub fn method(&self) -> Method {
        self.config().method()
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        match self {
            Adapter::Lora(s) => s.params(),
            Adapter::Adalora(s) => s.params(),
            Adapter::Ia3(s) => s.params(),
            Adapter::Prompt(s) => vec![&s.prompt],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        match self {
            Adapter::Lora(s) => s.params_mut(),
            Adapter::Adalora(s) => s.params_mut(),
            Adapter::Ia3(s) => s.params_mut(),
            Adapter::Prompt(s) => vec![&mut s.prompt],
        }
    }

    /// Number of scalars held in adapter tensors, by enumeration.
    pub fn num_scalars(&self) -> usize {
        self.params().iter().map(|p| p.tensor.numel()).sum()
    }

    /// Applies the adapter to one attention projection. `input` is the
    /// projection's input and `base` the frozen `input · W` output.
    pub fn adapt_projection(&self, g: &mut Graph<T>, layer: usize, proj: Proj, input: Var, base: Var) -> Result<Var> {
        match self {
            Adapter::Lora(s) => s.adapt(g, layer, proj, input, base),
            Adapter::Adalora(s) => s.adapt(g, layer, proj, input, base),
            Adapter::Ia3(s) => s.adapt(g, layer, proj, base),
            Adapter::Prompt(_) => Ok(base),
        }
    }

    pub fn prompt(&self) -> Option<&Parameter<T>> {
        match self {
            Adapter::Prompt(s) => Some(&s.prompt),
            _ => None,
        }
    }

    /// Extra loss terms contributed by the adapter (AdaLoRA orthogonality).
    pub fn regularizer(&self, g: &mut Graph<T>) -> Result<Option<Var>> {
        match self {
            Adapter::Adalora(s) => s.orthogonality_penalty(g).map(Some),
            _ => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn audit_counts_match_reported_budgets() {
        let enc = EncoderConfig::audit();
        let lora = AdapterConfig::Lora(LoraConfig {
            rank: 8,
            ..LoraConfig::default()
        });
        let adalora = AdapterConfig::Adalora(AdaLoraConfig {
            r_init: 12,
            ..AdaLoraConfig::default()
        });
        let ia3 = AdapterConfig::Ia3(Ia3Config::default());
        let prompt = AdapterConfig::Prompt(PromptConfig {
            virtual_tokens: 10,
            ..PromptConfig::default()
        });
        assert_eq!(count_trainable(&lora, &enc), 294_912);
        assert_eq!(count_trainable(&adalora, &enc), 442_656);
        assert_eq!(count_trainable(&ia3, &enc), 27_648);
        assert_eq!(count_trainable(&prompt, &enc), 7_680);
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Full, Method::Lora, Method::Adalora, Method::Ia3, Method::Prompt, Method::None] {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("bogus".parse::<Method>().is_err());
    }

    #[test]
    fn adapter_config_json_is_tagged() {
        let c = AdapterConfig::Lora(LoraConfig::default());
        let j = serde_json::to_value(&c).unwrap();
        assert_eq!(j["method"], "lora");
        assert_eq!(serde_json::from_value::<AdapterConfig>(j).unwrap(), c);
    }
}
