use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::RESERVED;
use crate::encoder::{normal_tensor, EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Parameter, Tensor};

const NORMAL_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptInit {
    /// Copies of randomly chosen (non-reserved) token embedding rows.
    #[default]
    VocabSample,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub virtual_tokens: usize,
    #[serde(default)]
    pub init: PromptInit,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            virtual_tokens: 10,
            init: PromptInit::default(),
        }
    }
}

impl PromptConfig {
    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        if self.virtual_tokens == 0 || self.virtual_tokens >= enc.max_len {
            return Err(Error::Config(format!(
                "prompt length {} must be in [1, {})",
                self.virtual_tokens, enc.max_len
            )));
        }
        Ok(())
    }
}

/// `m` learned rows prepended to the embedded input of every sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptState<T> {
    pub config: PromptConfig,
    /// `[m × d]`
    pub prompt: Parameter<T>,
    /// Vocabulary rows the prompt was copied from (empty for normal init).
    pub sampled_ids: Vec<u32>,
}

impl<T: Scalar> PromptState<T> {
    pub fn init(config: PromptConfig, encoder: &EncoderWeights<T>, seed: u64) -> Result<Self> {
        config.validate(&encoder.config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, d) = (config.virtual_tokens, encoder.config.d_model);
        let mut sampled_ids = Vec::new();
        let tensor = match config.init {
            PromptInit::Normal => normal_tensor(&[m, d], NORMAL_INIT_STD, &mut rng),
            PromptInit::VocabSample => {
                let table = &encoder.token_embedding.tensor;
                let lo = RESERVED.len().min(table.rows() - 1);
                let mut data = Vec::with_capacity(m * d);
                for _ in 0..m {
                    let id = rng.random_range(lo..table.rows());
                    data.extend_from_slice(table.row(id));
                    sampled_ids.push(id as u32);
                }
                Tensor::new(&[m, d], data)?
            }
        };
        Ok(Self {
            config,
            prompt: Parameter::new("prompt.embeddings".to_string(), tensor, true),
            sampled_ids,
        })
    }
}

impl std::str::FromStr for PromptInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vocab_sample" | "vocab-sample" => Ok(PromptInit::VocabSample),
            "normal" => Ok(PromptInit::Normal),
            other => Err(Error::Config(format!("unknown prompt init {other:?}"))),
        }
    }
}
