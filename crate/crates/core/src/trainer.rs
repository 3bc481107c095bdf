//! Contrastive fine-tuning loop: gradient accumulation, cosine-annealed Adam,
//! per-epoch validation MRR and best-state tracking.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Batch, EncodedPair};
use crate::encoder::EncoderWeights;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::metrics::{mrr_all_pairs, mrr_chunked, CutoffRule, MrrReport, DEFAULT_CHUNK_SIZE, DEFAULT_CUTOFF};
use crate::objective::DEFAULT_TEMPERATURE;
use crate::optim::{cosine_annealing, Adam};
use crate::peft::{Adapter, Method};
use crate::scalar::Scalar;
use crate::tensor::{Parameter, Tensor};

pub const INVERSE_TEMPERATURE_ID: &str = "objective.inverse_temperature";
const EMBED_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    pub lr: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub accumulation: usize,
    pub epochs: usize,
    pub temperature: f64,
    /// Train `1/τ` together with the other parameters.
    pub learn_temperature: bool,
    pub seed: u64,
    /// Stop after this many optimizer steps (the schedule horizon shrinks
    /// accordingly).
    pub max_steps: Option<u64>,
    /// Chunk size of the per-epoch validation MRR.
    pub eval_chunk_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Lora,
            lr: 1e-3,
            lr_min: 0.0,
            batch_size: 32,
            accumulation: 4,
            epochs: 10,
            temperature: DEFAULT_TEMPERATURE,
            learn_temperature: false,
            seed: 0,
            max_steps: None,
            eval_chunk_size: DEFAULT_CHUNK_SIZE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.lr_min < 0.0 || self.lr_min > self.lr {
            return Err(Error::Config(format!("need 0 ≤ lr_min ≤ lr, lr > 0; got lr={} lr_min={}", self.lr, self.lr_min)));
        }
        if self.accumulation == 0 {
            return Err(Error::Config("accumulation must be ≥ 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be ≥ 2 for in-batch negatives".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.eval_chunk_size == 0 {
            return Err(Error::Config("eval chunk size must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder, optional adapter and the (inverse) temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub encoder: EncoderWeights<T>,
    pub adapter: Option<Adapter<T>>,
    /// One-element `1/τ`.
    pub inverse_temperature: Parameter<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(encoder: EncoderWeights<T>, adapter: Option<Adapter<T>>, temperature: f64, learn_temperature: bool) -> Self {
        let inv = Tensor::full(&[1], T::of(1.0 / temperature));
        Self {
            encoder,
            adapter,
            inverse_temperature: Parameter::new(INVERSE_TEMPERATURE_ID, inv, learn_temperature),
        }
    }

    pub fn temperature(&self) -> f64 {
        1.0 / self.inverse_temperature.tensor.data()[0].as_f64()
    }

    /// Sets trainability for `method`: everything for full fine-tuning, only
    /// the adapter for PEFT methods, nothing for `none`.
    pub fn configure(&mut self, method: Method) -> Result<()> {
        match (method, &self.adapter) {
            (Method::Full, None) => self.encoder.set_trainable(true),
            (Method::None, _) => {
                self.encoder.set_trainable(false);
                self.inverse_temperature.trainable = false;
            }
            (m, Some(a)) if m == a.method() => self.encoder.set_trainable(false),
            (m, a) => {
                return Err(Error::Config(format!(
                    "method {m} does not match attached adapter {:?}",
                    a.as_ref().map(Adapter::method)
                )))
            }
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut out = self.encoder.params();
        if let Some(a) = &self.adapter {
            out.extend(a.params());
        }
        out.push(&self.inverse_temperature);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = self.encoder.params_mut();
        if let Some(a) = &mut self.adapter {
            out.extend(a.params_mut());
        }
        out.push(&mut self.inverse_temperature);
        out
    }

    pub fn trainable_params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.params_mut().into_iter().filter(|p| p.trainable).collect()
    }

    pub fn trainable_snapshot(&self) -> Vec<Parameter<T>> {
        self.params().into_iter().filter(|p| p.trainable).cloned().collect()
    }

    /// Restores values of the parameters in `snapshot` (matched by id).
    pub fn restore(&mut self, snapshot: &[Parameter<T>]) {
        for p in self.params_mut() {
            if let Some(s) = snapshot.iter().find(|s| s.id == p.id) {
                p.tensor = s.tensor.clone();
            }
        }
    }

    /// NT-Xent over the batch plus any adapter regularizer.
    pub fn batch_loss(&self, g: &mut Graph<T>, batch: &Batch) -> Result<Var> {
        let (hc, ht) = self.encoder.encode_batch(g, batch, self.adapter.as_ref())?;
        let cos = g.matmul_bt(hc, ht)?;
        let inv = g.param(&self.inverse_temperature);
        let s = g.scale_by(cos, inv)?;
        let loss = g.nt_xent(s)?;
        match self.adapter.as_ref().map(|a| a.regularizer(g)).transpose()?.flatten() {
            Some(r) => g.add(loss, r),
            None => Ok(loss),
        }
    }

    /// `(Hc, Ht)` for a whole split, chunked for memory.
    pub fn embed_pairs(&self, pairs: &[EncodedPair]) -> Result<(Tensor<T>, Tensor<T>)> {
        let codes: Vec<&[u32]> = pairs.iter().map(|p| p.code.as_slice()).collect();
        let texts: Vec<&[u32]> = pairs.iter().map(|p| p.text.as_slice()).collect();
        let a = self.adapter.as_ref();
        Ok((
            self.encoder.embed_all(&codes, a, EMBED_CHUNK)?,
            self.encoder.embed_all(&texts, a, EMBED_CHUNK)?,
        ))
    }

    /// Chunked MRR; a split smaller than `chunk` is scored as one chunk.
    pub fn validation_mrr(&self, pairs: &[EncodedPair], chunk: usize) -> Result<MrrReport> {
        let (hc, ht) = self.embed_pairs(pairs)?;
        mrr_chunked(&hc, &ht, chunk.min(pairs.len()))
    }

    pub fn all_pairs_mrr(&self, pairs: &[EncodedPair]) -> Result<MrrReport> {
        let (hc, ht) = self.embed_pairs(pairs)?;
        mrr_all_pairs(&hc, &ht, DEFAULT_CUTOFF, CutoffRule::Zero)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricRecord {
    Step { step: u64, lr: f64, loss: f64 },
    Epoch { epoch: usize, valid_mrr: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainStatus {
    Completed,
    /// A non-finite loss was met; the model holds the last good parameters.
    Aborted { step: u64, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestState<T> {
    pub epoch: usize,
    pub step: u64,
    pub valid_mrr: f64,
    pub params: Vec<Parameter<T>>,
    /// AdaLoRA rank masks at that point.
    pub adapter: Option<Adapter<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<T> {
    pub status: TrainStatus,
    pub steps: u64,
    /// Mean micro-batch loss per optimizer step.
    pub losses: Vec<f64>,
    pub valid_mrr: Vec<f64>,
    pub best: Option<BestState<T>>,
}

fn log_record(log: &mut Option<&mut dyn Write>, rec: &MetricRecord) -> Result<()> {
    if let Some(w) = log {
        serde_json::to_writer(&mut **w, rec)?;
        writeln!(w).map_err(|e| Error::io("<metrics log>", e))?;
    }
    Ok(())
}

/// Runs `cfg.epochs` epochs over `train`, evaluating on `valid` after each.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    model: &mut Model<T>,
    train: &[EncodedPair],
    valid: &[EncodedPair],
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    model.configure(cfg.method)?;
    let mut outcome = TrainOutcome {
        status: TrainStatus::Completed,
        steps: 0,
        losses: Vec::new(),
        valid_mrr: Vec::new(),
        best: None,
    };
    if cfg.method == Method::None {
        if !valid.is_empty() {
            let mrr = model.validation_mrr(valid, cfg.eval_chunk_size)?.mrr;
            outcome.valid_mrr.push(mrr);
            log_record(&mut log, &MetricRecord::Epoch { epoch: 0, valid_mrr: mrr })?;
        }
        return Ok(outcome);
    }

    let batch_size = cfg.batch_size.min(train.len());
    if batch_size < 2 {
        return Err(Error::Data("training split needs at least two pairs".into()));
    }
    let batches_per_epoch = train.len() / batch_size;
    let steps_per_epoch = batches_per_epoch.div_ceil(cfg.accumulation) as u64;
    let mut horizon = steps_per_epoch * cfg.epochs as u64;
    if let Some(m) = cfg.max_steps {
        horizon = horizon.min(m);
    }
    let mut adam = Adam::new();
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        let batches = make_batches(train, batch_size, cfg.seed, epoch as u64, true)?;
        for group in batches.chunks(cfg.accumulation) {
            if step >= horizon {
                break;
            }
            let last_good = model.trainable_snapshot();
            for p in model.trainable_params_mut() {
                p.tensor.zero_grad();
            }
            let mut total = 0.0;
            for batch in group {
                let mut g = Graph::new();
                let loss = model.batch_loss(&mut g, batch)?;
                let value = g.value(loss).data()[0].as_f64();
                if !value.is_finite() {
                    log::error!("non-finite loss {value} at step {}; restoring last good parameters", step + 1);
                    model.restore(&last_good);
                    outcome.status = TrainStatus::Aborted {
                        step: step + 1,
                        reason: format!("loss became {value}"),
                    };
                    outcome.steps = step;
                    return Ok(outcome);
                }
                total += value;
                let grads = g.backward(loss)?;
                g.accumulate_into(&grads, model.trainable_params_mut())?;
            }
            let lr = cosine_annealing(step, horizon, cfg.lr, cfg.lr_min);
            step += 1;
            if let Some(Adapter::Adalora(a)) = &mut model.adapter {
                a.step(step);
            }
            adam.step(model.trainable_params_mut(), lr);
            let loss = total / group.len() as f64;
            outcome.losses.push(loss);
            log_record(&mut log, &MetricRecord::Step { step, lr, loss })?;
        }
        if !valid.is_empty() {
            let mrr = model.validation_mrr(valid, cfg.eval_chunk_size)?.mrr;
            outcome.valid_mrr.push(mrr);
            log_record(&mut log, &MetricRecord::Epoch { epoch, valid_mrr: mrr })?;
            if outcome.best.as_ref().is_none_or(|b| mrr > b.valid_mrr) {
                outcome.best = Some(BestState {
                    epoch,
                    step,
                    valid_mrr: mrr,
                    params: model.trainable_snapshot(),
                    adapter: model.adapter.clone(),
                });
            }
        }
        if step >= horizon {
            break;
        }
    }
    for p in model.params_mut() {
        p.tensor.zero_grad();
    }
    outcome.steps = step;
    Ok(outcome)
}
