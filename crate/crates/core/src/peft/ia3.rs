use serde::{Deserialize, Serialize};

use super::Proj;
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::{Parameter, Tensor};

/// (IA)³ scales the Q-projection output, the K-projection output and the
/// attention-output linear; the feed-forward block is left alone.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ia3Config {}

#[derive(Debug, Clone, PartialEq)]
pub struct Ia3Layer<T> {
    pub q: Parameter<T>,
    pub k: Parameter<T>,
    pub o: Parameter<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ia3State<T> {
    pub config: Ia3Config,
    pub layers: Vec<Ia3Layer<T>>,
}

impl<T: Scalar> Ia3State<T> {
    /// All scaling vectors start at one.
    pub fn init(config: Ia3Config, enc: &EncoderConfig) -> Self {
        let d = enc.d_model;
        let layers = (0..enc.layers)
            .map(|l| {
                let v = |n: &str| Parameter::new(format!("ia3.layers.{l}.{n}"), Tensor::ones(&[d]), true);
                Ia3Layer {
                    q: v("q"),
                    k: v("k"),
                    o: v("o"),
                }
            })
            .collect();
        Self { config, layers }
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        self.layers.iter().flat_map(|l| [&l.q, &l.k, &l.o]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.q, &mut l.k, &mut l.o]).collect()
    }

    pub(crate) fn adapt(&self, g: &mut Graph<T>, layer: usize, proj: Proj, base: Var) -> Result<Var> {
        let l = &self.layers[layer];
        let scale = match proj {
            Proj::Q => &l.q,
            Proj::K => &l.k,
            Proj::O => &l.o,
            Proj::V => return Ok(base),
        };
        let s = g.param(scale);
        g.mul(base, s)
    }
}
