//! Teacher-forced likelihood training with Adam.

mod adam;
mod checkpoint;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use adam::{adam_update, AdamConfig, Moments};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, FORMAT_VERSION, MAGIC,
};

use crate::data::{Catalog, Turn};
use crate::decoder::{decode_batch, Memory};
use crate::encoder::{encode_batch, Dropout};
use crate::model::{all_trainable, decoder_only, Bound, Model, ModelError, PaddedBatch};
use crate::numerics::{NumericsError, Scalar, Tape, Tensor};
use crate::seed::{rng_for, TAG_BATCH, TAG_DROPOUT};
use crate::tokenizer::{serialize_object, tokenize, Vocabulary, PAD};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss at step {step} (examples {examples:?}): {detail}")]
    NonFinite {
        step: u64,
        examples: Vec<usize>,
        detail: String,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("turn {dialogue_id:?}/{turn_index} refers to unknown object {object_id:?}")]
    UnknownObject {
        dialogue_id: String,
        turn_index: usize,
        object_id: String,
    },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    pub freeze_encoder: bool,
    /// Global gradient norm cap; 0 disables clipping.
    pub grad_clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            freeze_encoder: false,
            grad_clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(TrainError::Config("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(TrainError::Config(format!(
                    "{name} must lie in [0, 1), got {b}"
                )));
            }
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 || self.grad_clip_norm < 0.0 {
            return Err(TrainError::Config(
                "adam_epsilon must be positive and grad_clip_norm non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

/// One training example, every sequence wrapped in `[BOS] … [EOS]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub id: usize,
    pub utterance: Vec<usize>,
    pub object: Vec<usize>,
    pub response: Vec<usize>,
}

pub fn prepare_examples(
    turns: &[Turn],
    catalog: &Catalog,
    vocab: &Vocabulary,
) -> Result<Vec<Example>> {
    turns
        .iter()
        .enumerate()
        .map(|(id, t)| {
            let object =
                catalog
                    .get(&t.referred_object_id)
                    .ok_or_else(|| TrainError::UnknownObject {
                        dialogue_id: t.dialogue_id.clone(),
                        turn_index: t.turn_index,
                        object_id: t.referred_object_id.clone(),
                    })?;
            Ok(Example {
                id,
                utterance: tokenize(&t.user_utterance, vocab).wrapped().ids,
                object: tokenize(&serialize_object(object), vocab).wrapped().ids,
                response: tokenize(&t.true_response, vocab).wrapped().ids,
            })
        })
        .collect()
}

/// Padded tensors for a group of examples. The decoder reads the response
/// without its last token and predicts it without its first.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub example_ids: Vec<usize>,
    pub utterance: PaddedBatch,
    pub object: PaddedBatch,
    pub input: PaddedBatch,
    pub targets: Vec<usize>,
}

impl TrainBatch {
    pub fn new(examples: &[&Example]) -> Result<Self> {
        let utt: Vec<&[usize]> = examples.iter().map(|e| e.utterance.as_slice()).collect();
        let obj: Vec<&[usize]> = examples.iter().map(|e| e.object.as_slice()).collect();
        if let Some(e) = examples.iter().find(|e| e.response.len() < 2) {
            return Err(
                ModelError::Contract(format!("example {} has no response tokens", e.id)).into(),
            );
        }
        let inp: Vec<&[usize]> = examples
            .iter()
            .map(|e| &e.response[..e.response.len() - 1])
            .collect();
        let tgt: Vec<&[usize]> = examples.iter().map(|e| &e.response[1..]).collect();
        let input = PaddedBatch::new(&inp, None)?;
        let targets = PaddedBatch::new(&tgt, Some(input.len))?.ids;
        Ok(Self {
            example_ids: examples.iter().map(|e| e.id).collect(),
            utterance: PaddedBatch::new(&utt, None)?,
            object: PaddedBatch::new(&obj, None)?,
            input,
            targets,
        })
    }
}

/// Mean per-token cross entropy of a batch, with gradients for the
/// parameters selected by `trainable`.
pub fn loss_and_gradients<T: Scalar>(
    model: &Model<T>,
    batch: &TrainBatch,
    trainable: &dyn Fn(&str) -> bool,
    dropout: Option<&mut Dropout>,
) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
    let tape = Tape::new();
    let bound = Bound::new(&tape, &model.params, trainable);
    let loss = forward_loss(&bound, model, batch, dropout)?;
    let value = loss.value().data()[0].as_f64();
    let grads = tape.backward(loss).map_err(ModelError::from)?;
    let mut out = BTreeMap::new();
    for (name, var) in bound.trainable_vars() {
        let g = grads
            .get(var)
            .unwrap_or_else(|| Tensor::zeros(&var.shape()));
        out.insert(name, g);
    }
    Ok((value, out))
}

/// Loss without dropout or gradients.
pub fn batch_loss<T: Scalar>(model: &Model<T>, batch: &TrainBatch) -> Result<f64> {
    let tape = Tape::new();
    let bound = Bound::new(&tape, &model.params, &crate::model::none_trainable);
    let loss = forward_loss(&bound, model, batch, None)?;
    let v = loss.value().data()[0].as_f64();
    Ok(v)
}

fn forward_loss<'t, T: Scalar>(
    bound: &Bound<'t, '_, T>,
    model: &Model<T>,
    batch: &TrainBatch,
    mut dropout: Option<&mut Dropout>,
) -> Result<crate::numerics::Var<'t, T>> {
    let u = encode_batch(
        bound,
        &model.encoder,
        &batch.utterance,
        dropout.as_deref_mut(),
    )?;
    let o = encode_batch(bound, &model.encoder, &batch.object, dropout)?;
    let (logits, _) = decode_batch(
        bound,
        &model.decoder,
        &batch.input,
        Memory {
            states: u,
            mask: &batch.utterance.mask,
            len: batch.utterance.len,
        },
        Memory {
            states: o,
            mask: &batch.object.mask,
            len: batch.object.len,
        },
    )?;
    Ok(logits
        .cross_entropy(&batch.targets, PAD)
        .map_err(ModelError::from)?)
}

/// Adam state for every trainable tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Optimizer {
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::cast(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Forward, backward, clip and one Adam update. Returns the batch loss.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    batch: &TrainBatch,
    optimizer: &mut Optimizer,
    cfg: &TrainConfig,
    dropout: Option<&mut Dropout>,
) -> Result<f64> {
    let trainable: &dyn Fn(&str) -> bool = if cfg.freeze_encoder {
        &decoder_only
    } else {
        &all_trainable
    };
    let step = optimizer.step + 1;
    let non_finite = |detail: String| TrainError::NonFinite {
        step,
        examples: batch.example_ids.clone(),
        detail,
    };
    let (loss, mut grads) = match loss_and_gradients(model, batch, trainable, dropout) {
        Ok(r) => r,
        Err(TrainError::Model(ModelError::Numerics(e @ NumericsError::NonFinite { .. }))) => {
            return Err(non_finite(e.to_string()))
        }
        Err(e) => return Err(e),
    };
    if !loss.is_finite() {
        return Err(non_finite(format!("loss = {loss}")));
    }
    let norm = clip_global_norm(&mut grads, cfg.grad_clip_norm);
    if !norm.is_finite() {
        return Err(non_finite(format!("gradient norm = {norm}")));
    }
    optimizer.step = step;
    let adam = cfg.adam();
    for (name, g) in &grads {
        let param = model
            .params
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingParam(name.clone()))?;
        let state = optimizer.moments.entry(name.clone()).or_default();
        adam_update(param.data_mut(), g.data(), state, step, &adam);
    }
    Ok(loss)
}

/// Groups of this many batches are sorted by length before being cut.
pub const BUCKET_BATCHES: usize = 8;

/// Endless, seeded sequence of batches. Each epoch shuffles the examples,
/// sorts windows of `BUCKET_BATCHES` batches by total length, cuts them into
/// batches and shuffles the batch order.
pub struct BatchSchedule {
    lengths: Vec<usize>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    queue: std::collections::VecDeque<Vec<usize>>,
}

impl BatchSchedule {
    pub fn new(examples: &[Example], batch_size: usize, seed: u64) -> Self {
        Self {
            lengths: examples
                .iter()
                .map(|e| e.utterance.len() + e.object.len() + e.response.len())
                .collect(),
            batch_size: batch_size.max(1),
            seed,
            epoch: 0,
            queue: Default::default(),
        }
    }

    fn refill(&mut self) {
        let mut rng = rng_for(self.seed, TAG_BATCH, self.epoch);
        self.epoch += 1;
        let mut order: Vec<usize> = (0..self.lengths.len()).collect();
        order.shuffle(&mut rng);
        let mut batches = Vec::new();
        for window in order.chunks(self.batch_size * BUCKET_BATCHES) {
            let mut window = window.to_vec();
            window.sort_by_key(|&i| self.lengths[i]);
            batches.extend(window.chunks(self.batch_size).map(<[usize]>::to_vec));
        }
        batches.shuffle(&mut rng);
        self.queue.extend(batches);
    }
}

impl Iterator for BatchSchedule {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.lengths.is_empty() {
            return None;
        }
        if self.queue.is_empty() {
            self.refill();
        }
        self.queue.pop_front()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub losses: Vec<f64>,
    pub steps: u64,
}

impl TrainSummary {
    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Runs `cfg.steps` updates, calling `on_step` after each.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    examples: &[Example],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainSummary> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(TrainError::Config("no training examples".into()));
    }
    let started = Instant::now();
    let mut optimizer = Optimizer::default();
    let mut schedule = BatchSchedule::new(examples, cfg.batch_size, cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 1..=cfg.steps {
        let ids = schedule.next().expect("non-empty schedule");
        let refs: Vec<&Example> = ids.iter().map(|&i| &examples[i]).collect();
        let batch = TrainBatch::new(&refs)?;
        let mut dropout = Dropout {
            rate: model.encoder.dropout_rate,
            rng: rng_for(cfg.seed, TAG_DROPOUT, step),
        };
        let loss = train_step(model, &batch, &mut optimizer, cfg, Some(&mut dropout))?;
        losses.push(loss);
        on_step(&StepLog {
            step,
            loss,
            lr: cfg.learning_rate,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
    Ok(TrainSummary {
        losses,
        steps: cfg.steps,
    })
}
