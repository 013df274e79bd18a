//! End-to-end helpers shared by the command line, the Python bindings and
//! the tests.

use crate::config::RunConfig;
use crate::data::{Catalog, Turn};
use crate::model::Model;
use crate::seed::{rng_for, TAG_INIT};
use crate::tokenizer::{build_vocab, serialize_object, Vocabulary};
use crate::training::{prepare_examples, train, Checkpoint, StepLog, TrainSummary};
use crate::Error;

/// Every text the vocabulary should cover: requests, responses and
/// serialized objects.
pub fn vocab_texts(catalog: &Catalog, turns: &[Turn]) -> Vec<String> {
    let mut texts: Vec<String> = turns
        .iter()
        .flat_map(|t| [t.user_utterance.clone(), t.true_response.clone()])
        .collect();
    texts.extend(catalog.iter().map(serialize_object));
    texts
}

/// Fresh model sized for `vocab`, seeded from the run seed.
pub fn init_model(cfg: &RunConfig, vocab: &Vocabulary) -> Result<Model<f32>, Error> {
    let mut rng = rng_for(cfg.seed, TAG_INIT, 0);
    Ok(Model::init(
        cfg.encoder_config(vocab.len()),
        cfg.decoder_config(vocab.len()),
        &mut rng,
    )?)
}

/// Builds the vocabulary, initialises and trains a model.
pub fn train_from_corpus(
    cfg: &RunConfig,
    catalog: &Catalog,
    turns: &[Turn],
    on_step: impl FnMut(&StepLog),
) -> Result<(Checkpoint, TrainSummary), Error> {
    let vocab = build_vocab(&vocab_texts(catalog, turns), cfg.data.vocab_size)?;
    let mut model = init_model(cfg, &vocab)?;
    let examples = prepare_examples(turns, catalog, &vocab)?;
    let train_cfg = cfg.train_config();
    let summary = train(&mut model, &examples, &train_cfg, on_step)?;
    Ok((
        Checkpoint {
            model,
            vocab,
            step: summary.steps,
            seed: cfg.seed,
        },
        summary,
    ))
}
