#![allow(dead_code)]

use codesearch_peft::data::{make_batches, Batch, EncodedPair};
use codesearch_peft::encoder::{EncoderConfig, EncoderWeights};
use codesearch_peft::peft::{AdaLoraConfig, Adapter, AdapterConfig, Ia3Config, LoraConfig, PromptConfig, Proj};
use codesearch_peft::trainer::Model;
use codesearch_peft::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        d_model: 16,
        heads: 4,
        d_ff: 24,
        vocab_size: 40,
        max_len: 24,
        d_emb: 8,
    }
}

pub fn adapter_configs() -> Vec<AdapterConfig> {
    vec![
        AdapterConfig::Lora(LoraConfig {
            rank: 2,
            ..LoraConfig::default()
        }),
        AdapterConfig::Adalora(AdaLoraConfig {
            r_init: 3,
            r_target: 2,
            t_init: 1,
            t_final: 4,
            ..AdaLoraConfig::default()
        }),
        AdapterConfig::Ia3(Ia3Config::default()),
        AdapterConfig::Prompt(PromptConfig {
            virtual_tokens: 3,
            ..PromptConfig::default()
        }),
    ]
}

/// Random pairs over the non-reserved ids of `tiny()`.
pub fn random_pairs(n: usize, seed: u64) -> Vec<EncodedPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = tiny().vocab_size as u32;
    let seq = |rng: &mut ChaCha8Rng| {
        let len = rng.random_range(2..=6);
        (0..len).map(|_| rng.random_range(4..vocab)).collect::<Vec<u32>>()
    };
    (0..n)
        .map(|i| EncodedPair {
            id: format!("p{i:03}"),
            text: seq(&mut rng),
            code: seq(&mut rng),
        })
        .collect()
}

pub fn batch_of(pairs: &[EncodedPair]) -> Batch {
    Batch::from_pairs(&pairs.iter().collect::<Vec<_>>()).unwrap()
}

pub fn first_batch(pairs: &[EncodedPair], size: usize) -> Batch {
    make_batches(pairs, size, 0, 0, true).unwrap().remove(0)
}

/// Moves every adapter tensor away from its identity initialization.
pub fn perturb(adapter: &mut Adapter<f64>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in adapter.params_mut() {
        for v in p.tensor.data_mut() {
            *v += scale * (rng.random::<f64>() - 0.5);
        }
    }
}

pub fn model_with(cfg: &AdapterConfig, enc_seed: u64, adapter_seed: u64) -> Model<f64> {
    let mut enc = EncoderWeights::<f64>::init(tiny(), enc_seed).unwrap();
    let adapter = Adapter::attach(cfg, &mut enc, adapter_seed).unwrap();
    let mut m = Model::new(enc, Some(adapter), 0.08, false);
    m.configure(cfg.method()).unwrap();
    m
}

pub fn loss(model: &Model<f64>, batch: &Batch) -> f64 {
    let mut g = Graph::new();
    let l = model.batch_loss(&mut g, batch).unwrap();
    g.value(l).data()[0]
}

/// Central-difference check of d(loss)/d(θ) for every trainable scalar of the
/// model; returns max |analytic − numeric| / max(1, |analytic|).
pub fn model_grad_error(model: &Model<f64>, batch: &Batch, h: f64) -> f64 {
    let mut g = Graph::new();
    let l = model.batch_loss(&mut g, batch).unwrap();
    let grads = g.backward(l).unwrap();
    let ids: Vec<String> = model.params().iter().filter(|p| p.trainable).map(|p| p.id.clone()).collect();
    assert!(!ids.is_empty());
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    for id in &ids {
        let var = g.param_var(id).expect("trainable parameter reached the loss");
        let analytic = grads.wrt(var).map(<[f64]>::to_vec);
        let n = model.params().into_iter().find(|p| &p.id == id).unwrap().tensor.numel();
        for k in 0..n {
            let a = analytic.as_ref().map_or(0.0, |v| v[k]);
            let base = model.params().into_iter().find(|p| &p.id == id).unwrap().tensor.data()[k];
            let set = |m: &mut Model<f64>, value: f64| {
                let p = m.params_mut().into_iter().find(|p| &p.id == id).unwrap();
                p.tensor.data_mut()[k] = value;
            };
            set(&mut probe, base + h);
            let up = loss(&probe, batch);
            set(&mut probe, base - h);
            let down = loss(&probe, batch);
            set(&mut probe, base);
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    worst
}

pub fn targets_qv() -> std::collections::BTreeSet<Proj> {
    [Proj::Q, Proj::V].into_iter().collect()
}
