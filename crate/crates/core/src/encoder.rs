//! Shared transformer encoder for user requests and serialized objects.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::CatalogObject;
use crate::decoder::attend;
use crate::model::{none_trainable, Bound, EncoderConfig, Model, ModelError, PaddedBatch, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::tokenizer::{serialize_object, tokenize, TokenSequence, Vocabulary};

/// Contextual embeddings of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<T: Scalar = f32> {
    /// `[p × D]`, zero rows at padded positions.
    pub embeddings: Tensor<T>,
    pub attention_mask: Vec<bool>,
}

impl<T: Scalar> EncoderOutput<T> {
    pub fn len(&self) -> usize {
        self.attention_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attention_mask.is_empty()
    }

    pub fn true_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m).count()
    }

    /// Copy with `extra` zero rows of padding appended.
    pub fn padded(&self, extra: usize) -> Self {
        let (p, d) = self.embeddings.dims2().expect("encoder output is 2-D");
        let mut data = self.embeddings.data().to_vec();
        data.resize((p + extra) * d, T::zero());
        let mut mask = self.attention_mask.clone();
        mask.resize(p + extra, false);
        Self {
            embeddings: Tensor::new(vec![p + extra, d], data).expect("finite"),
            attention_mask: mask,
        }
    }
}

/// Inverted dropout driven by its own generator.
pub struct Dropout {
    pub rate: f32,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    pub fn apply<'t, T: Scalar>(&mut self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = T::cast(1.0 / (1.0 - self.rate as f64));
        let n = x.value().numel();
        let mask = (0..n)
            .map(|_| {
                if self.rng.random::<f32>() < self.rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        Ok(x.mask_mul(mask)?)
    }
}

fn maybe_drop<'t, T: Scalar>(
    x: Var<'t, T>,
    dropout: &mut Option<&mut Dropout>,
) -> Result<Var<'t, T>> {
    match dropout {
        Some(d) => d.apply(x),
        None => Ok(x),
    }
}

/// Key mask letting every query row of item `b` see the real positions of
/// item `b` in `keys`.
pub(crate) fn key_padding_mask(q_len: usize, keys: &PaddedBatch) -> Result<Vec<bool>> {
    let mut mask = Vec::with_capacity(keys.batch * q_len * keys.len);
    for b in 0..keys.batch {
        let real = &keys.mask[b * keys.len..(b + 1) * keys.len];
        if !real.contains(&true) {
            return Err(ModelError::Contract(format!(
                "batch item {b} has no real positions"
            )));
        }
        for _ in 0..q_len {
            mask.extend_from_slice(real);
        }
    }
    Ok(mask)
}

/// Encodes a padded batch on the tape, returning `[batch·len × D]`.
pub fn encode_batch<'t, T: Scalar>(
    bound: &Bound<'t, '_, T>,
    cfg: &EncoderConfig,
    input: &PaddedBatch,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var<'t, T>> {
    if input.len > cfg.max_positions {
        return Err(ModelError::TooLong {
            len: input.len,
            max: cfg.max_positions,
        });
    }
    if let Some(&bad) = input.ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(ModelError::Contract(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let mask = key_padding_mask(input.len, input)?;
    let tok = bound.get("encoder.tok_emb")?.gather_rows(&input.ids)?;
    let pos = bound
        .get("encoder.pos_emb")?
        .gather_rows(&input.positions())?;
    let mut x = maybe_drop(tok.add(pos)?, &mut dropout)?;
    let eps = T::cast(LAYER_NORM_EPS);
    for l in 0..cfg.num_layers {
        let p = format!("encoder.layers.{l}");
        let a = attend(
            bound,
            &format!("{p}.attn"),
            x,
            x,
            &mask,
            input.batch,
            cfg.num_heads,
        )?;
        let a = maybe_drop(a, &mut dropout)?;
        x = x.add(a)?.layer_norm(
            bound.get(&format!("{p}.ln1.gain"))?,
            bound.get(&format!("{p}.ln1.bias"))?,
            eps,
        )?;
        let h = x
            .linear(
                bound.get(&format!("{p}.ffn.w1"))?,
                bound.get(&format!("{p}.ffn.b1"))?,
            )?
            .gelu()?
            .linear(
                bound.get(&format!("{p}.ffn.w2"))?,
                bound.get(&format!("{p}.ffn.b2"))?,
            )?;
        let h = maybe_drop(h, &mut dropout)?;
        x = x.add(h)?.layer_norm(
            bound.get(&format!("{p}.ln2.gain"))?,
            bound.get(&format!("{p}.ln2.bias"))?,
            eps,
        )?;
    }
    Ok(x.mask_rows(&input.mask)?)
}

/// Inference encoding of one sequence; `[BOS]` and `[EOS]` are added here.
pub fn encode<T: Scalar>(tokens: &TokenSequence, model: &Model<T>) -> Result<EncoderOutput<T>> {
    encode_padded(tokens, model, None)
}

/// As [`encode`], padded to `len` positions (including the two markers).
pub fn encode_padded<T: Scalar>(
    tokens: &TokenSequence,
    model: &Model<T>,
    len: Option<usize>,
) -> Result<EncoderOutput<T>> {
    let wrapped = tokens.wrapped();
    if wrapped.len() > model.encoder.max_positions {
        return Err(ModelError::TooLong {
            len: wrapped.len(),
            max: model.encoder.max_positions,
        });
    }
    let input = PaddedBatch::new(&[&wrapped.ids], len)?;
    let tape = Tape::new();
    let bound = Bound::new(&tape, &model.params, &none_trainable);
    let out = encode_batch(&bound, &model.encoder, &input, None)?;
    let embeddings = out.value().clone();
    Ok(EncoderOutput {
        embeddings,
        attention_mask: input.mask,
    })
}

pub fn encode_object<T: Scalar>(
    object: &CatalogObject,
    vocab: &Vocabulary,
    model: &Model<T>,
) -> Result<EncoderOutput<T>> {
    encode(&tokenize(&serialize_object(object), vocab), model)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::model::DecoderConfig;
    use crate::tokenizer::{build_vocab, BOS, EOS};

    fn cfg(vocab: usize, layers: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: layers,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            max_positions: 16,
            vocab_size: vocab,
            dropout_rate: 0.1,
        }
    }

    fn model(vocab: usize, seed: u64) -> Model<f32> {
        let dec = DecoderConfig {
            num_layers: 1,
            model_dim: 8,
            num_heads: 2,
            vocab_size: vocab,
            max_positions: 16,
        };
        Model::init(cfg(vocab, 2), dec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn seq(ids: &[usize]) -> TokenSequence {
        TokenSequence {
            ids: ids.to_vec(),
            source_text: String::new(),
        }
    }

    #[test]
    fn output_shape_and_mask() {
        let m = model(12, 1);
        let out = encode(&seq(&[5, 6, 7]), &m).unwrap();
        assert_eq!(out.embeddings.shape(), &[5, 8]);
        assert_eq!(out.true_len(), 5);
    }

    #[test]
    fn padding_does_not_change_real_positions() {
        let m = model(12, 2);
        let s = seq(&[4, 9, 11, 5]);
        let a = encode_padded(&s, &m, Some(7)).unwrap();
        let b = encode_padded(&s, &m, Some(13)).unwrap();
        for i in 0..6 {
            for (x, y) in a.embeddings.row(i).iter().zip(b.embeddings.row(i)) {
                assert!((x - y).abs() < 1e-5);
            }
        }
        assert!(a.embeddings.row(6).iter().all(|&v| v == 0.0));
        assert_eq!(b.true_len(), 6);
    }

    #[test]
    fn permutation_changes_output() {
        let m = model(12, 3);
        let a = encode(&seq(&[4, 9, 11]), &m).unwrap();
        let b = encode(&seq(&[11, 9, 4]), &m).unwrap();
        assert!(a.embeddings.max_abs_diff(&b.embeddings) > 1e-6);
    }

    #[test]
    fn too_long_is_rejected() {
        let m = model(12, 4);
        let long: Vec<usize> = vec![5; 15];
        assert!(matches!(
            encode(&seq(&long), &m),
            Err(ModelError::TooLong { len: 17, max: 16 })
        ));
    }

    #[test]
    fn zero_block_reduces_to_normalized_embeddings() {
        let mut m = model(10, 5);
        m.encoder.num_layers = 1;
        m.params = crate::model::Params::from_map(
            m.params
                .iter()
                .filter(|(n, _)| !n.starts_with("encoder.layers.1."))
                .map(|(n, t)| {
                    let keep = n.ends_with("emb") || n.ends_with("gain");
                    let t = if keep {
                        t.clone()
                    } else {
                        Tensor::zeros(t.shape())
                    };
                    (n.clone(), t)
                })
                .collect(),
        );
        let out = encode(&seq(&[7]), &m).unwrap();
        let tok = m.params.get("encoder.tok_emb").unwrap();
        let pos = m.params.get("encoder.pos_emb").unwrap();
        let norm = |x: Vec<f64>| {
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
            x.iter()
                .map(|v| (v - mean) / (var + 1e-5).sqrt())
                .collect::<Vec<_>>()
        };
        for (row, id) in [BOS, 7, EOS].into_iter().enumerate() {
            let e: Vec<f64> = (0..8)
                .map(|j| tok.get2(id, j) as f64 + pos.get2(row, j) as f64)
                .collect();
            let expect = norm(norm(e));
            for (j, want) in expect.iter().enumerate() {
                assert!((out.embeddings.get2(row, j) as f64 - want).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn object_encoding_matches_serialized_text() {
        let obj = CatalogObject::new("o").with("colors", &["red", "blue"]);
        let vocab = build_vocab(&["colors: red, blue."], 64).unwrap();
        let m = model(vocab.len(), 6);
        let a = encode_object(&obj, &vocab, &m).unwrap();
        let toks = tokenize("colors: red, blue.", &vocab);
        assert_eq!(a.len(), toks.len() + 2);
        assert_eq!(a, encode(&toks, &m).unwrap());
        assert_eq!(a, encode_object(&obj, &vocab, &m).unwrap());
        let empty = encode_object(&CatalogObject::new("e"), &vocab, &m).unwrap();
        assert_eq!(empty.len(), 2);
    }
}
