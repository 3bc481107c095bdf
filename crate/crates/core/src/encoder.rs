//! Small pre-norm transformer encoder with a projection + normalization head.
//!
//! Text and code go through the same weights. The pipeline per sequence is
//! token + learned position embedding, optional prompt rows, `L` pre-norm
//! blocks (masked multi-head self-attention and a ReLU feed-forward, both
//! residual), a final layer norm, masked mean pooling over real tokens, a
//! linear projection to `d_emb` and L2 normalization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::IdMatrix;
use crate::error::{Error, Result};
use crate::graph::{Graph, SeqLayout, Var};
use crate::peft::{Adapter, Proj};
use crate::scalar::Scalar;
use crate::tensor::{Parameter, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const NORMALIZE_EPS: f64 = 1e-12;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_emb: usize,
}

impl EncoderConfig {
    /// Default desk-scale architecture.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            d_model: 64,
            heads: 4,
            d_ff: 128,
            vocab_size,
            max_len: 288,
            d_emb: 32,
        }
    }

    /// Dimensions of the 110M-parameter embedding model used for the
    /// trainable-parameter audit.
    pub fn audit() -> Self {
        Self {
            layers: 12,
            d_model: 768,
            heads: 12,
            d_ff: 3072,
            vocab_size: 32103,
            max_len: 512,
            d_emb: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("d_emb", self.d_emb),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.d_emb > self.d_model {
            return Err(Error::Config(format!(
                "d_emb {} exceeds d_model {}",
                self.d_emb, self.d_model
            )));
        }
        Ok(())
    }

    /// Closed-form number of base scalars.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d * d + 2 * d * self.d_ff + 4 * d;
        self.vocab_size * d + self.max_len * d + self.layers * per_layer + 2 * d + d * self.d_emb
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub attn_norm_gain: Parameter<T>,
    pub attn_norm_bias: Parameter<T>,
    pub wq: Parameter<T>,
    pub wk: Parameter<T>,
    pub wv: Parameter<T>,
    pub wo: Parameter<T>,
    pub ffn_norm_gain: Parameter<T>,
    pub ffn_norm_bias: Parameter<T>,
    pub w1: Parameter<T>,
    pub w2: Parameter<T>,
}

impl<T: Scalar> LayerWeights<T> {
    pub fn projection(&self, p: Proj) -> &Parameter<T> {
        match p {
            Proj::Q => &self.wq,
            Proj::K => &self.wk,
            Proj::V => &self.wv,
            Proj::O => &self.wo,
        }
    }

    pub fn projection_mut(&mut self, p: Proj) -> &mut Parameter<T> {
        match p {
            Proj::Q => &mut self.wq,
            Proj::K => &mut self.wk,
            Proj::V => &mut self.wv,
            Proj::O => &mut self.wo,
        }
    }

    fn params(&self) -> [&Parameter<T>; 10] {
        [
            &self.attn_norm_gain,
            &self.attn_norm_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ffn_norm_gain,
            &self.ffn_norm_bias,
            &self.w1,
            &self.w2,
        ]
    }

    fn params_mut(&mut self) -> [&mut Parameter<T>; 10] {
        [
            &mut self.attn_norm_gain,
            &mut self.attn_norm_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ffn_norm_gain,
            &mut self.ffn_norm_bias,
            &mut self.w1,
            &mut self.w2,
        ]
    }
}

/// Base encoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights<T> {
    pub config: EncoderConfig,
    pub token_embedding: Parameter<T>,
    pub position_embedding: Parameter<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm_gain: Parameter<T>,
    pub final_norm_bias: Parameter<T>,
    pub projection: Parameter<T>,
}

pub(crate) fn normal_tensor<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

impl<T: Scalar> EncoderWeights<T> {
    /// Seeded initialization: matrices ~ N(0, 0.02²), layer-norm gains 1 and
    /// biases 0. All parameters start trainable.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f) = (config.d_model, config.d_ff);
        let mut w = |id: String, shape: &[usize]| Parameter::new(id, normal_tensor(shape, INIT_STD, &mut rng), true);
        let token_embedding = w("embed.token".into(), &[config.vocab_size, d]);
        let position_embedding = w("embed.position".into(), &[config.max_len, d]);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |name: &str| format!("layers.{l}.{name}");
            let wq = w(p("attn.q"), &[d, d]);
            let wk = w(p("attn.k"), &[d, d]);
            let wv = w(p("attn.v"), &[d, d]);
            let wo = w(p("attn.o"), &[d, d]);
            let w1 = w(p("ffn.w1"), &[d, f]);
            let w2 = w(p("ffn.w2"), &[f, d]);
            layers.push(LayerWeights {
                attn_norm_gain: Parameter::new(p("attn_norm.gain"), Tensor::ones(&[d]), true),
                attn_norm_bias: Parameter::new(p("attn_norm.bias"), Tensor::zeros(&[d]), true),
                wq,
                wk,
                wv,
                wo,
                ffn_norm_gain: Parameter::new(p("ffn_norm.gain"), Tensor::ones(&[d]), true),
                ffn_norm_bias: Parameter::new(p("ffn_norm.bias"), Tensor::zeros(&[d]), true),
                w1,
                w2,
            });
        }
        let projection = w("head.projection".into(), &[d, config.d_emb]);
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            layers,
            final_norm_gain: Parameter::new("final_norm.gain", Tensor::ones(&[d]), true),
            final_norm_bias: Parameter::new("final_norm.bias", Tensor::zeros(&[d]), true),
            projection,
        })
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for l in &self.layers {
            out.extend(l.params());
        }
        out.extend([&self.final_norm_gain, &self.final_norm_bias, &self.projection]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for l in &mut self.layers {
            out.extend(l.params_mut());
        }
        out.extend([&mut self.final_norm_gain, &mut self.final_norm_bias, &mut self.projection]);
        out
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.params_mut() {
            p.trainable = trainable;
            p.tensor.zero_grad();
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params().iter().map(|p| p.tensor.numel()).sum()
    }

    /// Hex SHA-256 over parameter ids, shapes and values as little-endian
    /// `f32`, so a base restored from a checkpoint keeps its fingerprint.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for p in self.params() {
            h.update(p.id.as_bytes());
            for &e in p.tensor.shape() {
                h.update((e as u64).to_le_bytes());
            }
            for &v in p.tensor.data() {
                h.update((v.as_f64() as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn linear(&self, g: &mut Graph<T>, x: Var, w: &Parameter<T>) -> Result<Var> {
        let wv = g.param(w);
        g.matmul(x, wv)
    }

    fn projection_with_adapter(
        &self,
        g: &mut Graph<T>,
        layer: usize,
        proj: Proj,
        x: Var,
        adapter: Option<&Adapter<T>>,
    ) -> Result<Var> {
        let base = self.linear(g, x, self.layers[layer].projection(proj))?;
        match adapter {
            Some(a) => a.adapt_projection(g, layer, proj, x, base),
            None => Ok(base),
        }
    }

    fn block(
        &self,
        g: &mut Graph<T>,
        x: Var,
        layer: usize,
        layout: &SeqLayout,
        adapter: Option<&Adapter<T>>,
    ) -> Result<Var> {
        let lw = &self.layers[layer];
        let eps = T::of(LAYER_NORM_EPS);
        let (gain, bias) = (g.param(&lw.attn_norm_gain), g.param(&lw.attn_norm_bias));
        let h = g.layer_norm(x, gain, bias, eps)?;
        let q = self.projection_with_adapter(g, layer, Proj::Q, h, adapter)?;
        let k = self.projection_with_adapter(g, layer, Proj::K, h, adapter)?;
        let v = self.projection_with_adapter(g, layer, Proj::V, h, adapter)?;
        let ctx = g.attention(q, k, v, layout, self.config.heads)?;
        let o = self.projection_with_adapter(g, layer, Proj::O, ctx, adapter)?;
        let x = g.add(x, o)?;
        let (gain, bias) = (g.param(&lw.ffn_norm_gain), g.param(&lw.ffn_norm_bias));
        let h = g.layer_norm(x, gain, bias, eps)?;
        let f = self.linear(g, h, &lw.w1)?;
        let f = g.relu(f);
        let f = self.linear(g, f, &lw.w2)?;
        g.add(x, f)
    }

    /// Encodes every row of `ids` into one unit-norm `d_emb` row.
    pub fn forward(&self, g: &mut Graph<T>, ids: &IdMatrix, adapter: Option<&Adapter<T>>) -> Result<Var> {
        let cfg = &self.config;
        let (n, t) = (ids.rows, ids.cols);
        let token_mask = ids.mask();
        if let Some(row) = (0..n).find(|&r| !token_mask[r * t..(r + 1) * t].iter().any(|&m| m)) {
            return Err(Error::Data(format!("sequence {row} contains only padding")));
        }
        if t > cfg.max_len {
            return Err(Error::Data(format!(
                "sequence length {t} exceeds max length {}",
                cfg.max_len
            )));
        }
        let prompt = adapter.and_then(Adapter::prompt);
        let m = prompt.map_or(0, |p| p.tensor.rows());
        if m + t > cfg.max_len {
            return Err(Error::Config(format!(
                "{m} prompt rows plus {t} tokens exceed max length {}",
                cfg.max_len
            )));
        }

        let table = g.param(&self.token_embedding);
        let flat: Vec<usize> = ids.ids.iter().map(|&i| i as usize).collect();
        let x = g.embedding(table, &flat)?;
        let positions = g.param(&self.position_embedding);
        let pos_ids: Vec<usize> = (0..n).flat_map(|_| 0..t).collect();
        let p = g.embedding(positions, &pos_ids)?;
        let mut x = g.add(x, p)?;

        let seq_len = m + t;
        let mut attn_mask = Vec::with_capacity(n * seq_len);
        let mut pool_mask = Vec::with_capacity(n * seq_len);
        for r in 0..n {
            attn_mask.extend(std::iter::repeat_n(true, m));
            pool_mask.extend(std::iter::repeat_n(false, m));
            attn_mask.extend_from_slice(&token_mask[r * t..(r + 1) * t]);
            pool_mask.extend_from_slice(&token_mask[r * t..(r + 1) * t]);
        }
        if let Some(prompt) = prompt {
            let pv = g.param(prompt);
            x = g.prepend_rows(x, pv, n, t)?;
        }
        let attn_layout = SeqLayout::new(n, seq_len, attn_mask)?;
        for layer in 0..cfg.layers {
            x = self.block(g, x, layer, &attn_layout, adapter)?;
        }
        let (gain, bias) = (g.param(&self.final_norm_gain), g.param(&self.final_norm_bias));
        let x = g.layer_norm(x, gain, bias, T::of(LAYER_NORM_EPS))?;
        let pooled = g.masked_mean_pool(x, &SeqLayout::new(n, seq_len, pool_mask)?)?;
        let proj = self.linear(g, pooled, &self.projection)?;
        Ok(g.l2_normalize_rows(proj, T::of(NORMALIZE_EPS)))
    }

    /// Embeds both sides of a batch through the shared tower: `(Hc, Ht)`.
    pub fn encode_batch(
        &self,
        g: &mut Graph<T>,
        batch: &crate::data::Batch,
        adapter: Option<&Adapter<T>>,
    ) -> Result<(Var, Var)> {
        let hc = self.forward(g, &batch.code, adapter)?;
        let ht = self.forward(g, &batch.text, adapter)?;
        Ok((hc, ht))
    }

    /// Embedding of a single id sequence.
    pub fn encode(&self, ids: &[u32], adapter: Option<&Adapter<T>>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, &IdMatrix::from_sequences(&[ids])?, adapter)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Embeds many sequences in chunks of `chunk`; returns an `[n, d_emb]`
    /// tensor whose rows do not depend on the chunking.
    pub fn embed_all<S: AsRef<[u32]>>(
        &self,
        seqs: &[S],
        adapter: Option<&Adapter<T>>,
        chunk: usize,
    ) -> Result<Tensor<T>> {
        if seqs.is_empty() {
            return Err(Error::Data("nothing to embed".into()));
        }
        let mut rows = Vec::with_capacity(seqs.len() * self.config.d_emb);
        for part in seqs.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let out = self.forward(&mut g, &IdMatrix::from_sequences(part)?, adapter)?;
            rows.extend_from_slice(g.value(out).data());
        }
        Tensor::new(&[seqs.len(), self.config.d_emb], rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            d_model: 16,
            heads: 4,
            d_ff: 24,
            vocab_size: 30,
            max_len: 20,
            d_emb: 8,
        }
    }

    #[test]
    fn config_validation() {
        assert!(tiny().validate().is_ok());
        assert!(EncoderConfig { heads: 3, ..tiny() }.validate().is_err());
        assert!(EncoderConfig { d_emb: 17, ..tiny() }.validate().is_err());
        assert!(EncoderConfig { layers: 0, ..tiny() }.validate().is_err());
        assert!(EncoderConfig::audit().validate().is_ok());
    }

    #[test]
    fn init_is_seeded_and_counts_match() {
        let a = EncoderWeights::<f64>::init(tiny(), 5).unwrap();
        let b = EncoderWeights::<f64>::init(tiny(), 5).unwrap();
        let c = EncoderWeights::<f64>::init(tiny(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert!(a.layers.iter().all(|l| l.attn_norm_gain.tensor.data().iter().all(|&g| g == 1.0)));
        assert!(a.final_norm_bias.tensor.data().iter().all(|&b| b == 0.0));
        let declared: usize = a.params().iter().map(|p| p.tensor.shape().iter().product::<usize>()).sum();
        assert_eq!(declared, tiny().param_count());
        assert_eq!(a.num_scalars(), tiny().param_count());
        let mut ids: Vec<_> = a.params().iter().map(|p| p.id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), a.params().len());
    }

    #[test]
    fn output_is_unit_norm_and_pad_invariant() {
        let w = EncoderWeights::<f64>::init(tiny(), 1).unwrap();
        let e = w.encode(&[5, 6, 7, 8], None).unwrap();
        let norm: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        let padded = w.encode(&[5, 6, 7, 8, 0, 0, 0], None).unwrap();
        for (a, b) in e.iter().zip(&padded) {
            assert!((a - b).abs() <= 1e-9);
        }
        let other = w.encode(&[9, 10, 11], None).unwrap();
        let cos: f64 = e.iter().zip(&other).map(|(a, b)| a * b).sum();
        assert!(cos < 1.0);
    }

    #[test]
    fn all_pad_and_overlong_inputs_rejected() {
        let w = EncoderWeights::<f64>::init(tiny(), 1).unwrap();
        assert!(matches!(w.encode(&[0, 0], None), Err(Error::Data(_))));
        assert!(matches!(w.encode(&[4; 21], None), Err(Error::Data(_))));
        assert!(matches!(w.encode(&[30], None), Err(Error::Index(_))));
    }

    #[test]
    fn batch_rows_match_single_encodes() {
        let w = EncoderWeights::<f64>::init(tiny(), 2).unwrap();
        let seqs: Vec<Vec<u32>> = vec![vec![4, 5, 6], vec![7, 8], vec![9, 10, 11, 12, 13]];
        let all = w.embed_all(&seqs, None, 8).unwrap();
        let single = w.embed_all(&seqs, None, 1).unwrap();
        for (i, s) in seqs.iter().enumerate() {
            let e = w.encode(s, None).unwrap();
            for (a, b) in e.iter().zip(all.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(all, single);
    }

    #[test]
    fn f32_instantiation_normalizes() {
        let w = EncoderWeights::<f32>::init(tiny(), 3).unwrap();
        let e = w.encode(&[4, 5, 6], None).unwrap();
        let norm: f32 = e.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }
}
