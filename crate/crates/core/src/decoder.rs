//! Decoder with masked self-attention, utterance attention and object
//! attention, each wrapped in a highway connection and layer norm.

use crate::encoder::EncoderOutput;
use crate::model::{
    none_trainable, Bound, DecoderConfig, Model, ModelError, PaddedBatch, Params, Result,
    DECODER_SUBLAYERS,
};
use crate::numerics::{Scalar, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::tokenizer::BOS;

/// Projection weights of one multi-head attention.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T: Scalar = f32> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bq: Tensor<T>,
    pub bk: Tensor<T>,
    pub bv: Tensor<T>,
    pub bo: Tensor<T>,
}

impl<T: Scalar> AttentionWeights<T> {
    /// Reads `{prefix}.wq` … `{prefix}.bo` from a parameter set.
    pub fn from_params(params: &Params<T>, prefix: &str) -> Result<Self> {
        let g = |s: &str| params.get(&format!("{prefix}.{s}")).cloned();
        Ok(Self {
            wq: g("wq")?,
            wk: g("wk")?,
            wv: g("wv")?,
            wo: g("wo")?,
            bq: g("bq")?,
            bk: g("bk")?,
            bv: g("bv")?,
            bo: g("bo")?,
        })
    }
}

/// Projects, attends and recombines heads on the tape.
pub(crate) fn attend_with<'t, T: Scalar>(
    w: [Var<'t, T>; 8],
    queries_from: Var<'t, T>,
    keys_values_from: Var<'t, T>,
    mask: &[bool],
    batch: usize,
    heads: usize,
) -> Result<Var<'t, T>> {
    let [wq, wk, wv, wo, bq, bk, bv, bo] = w;
    let q = queries_from.linear(wq, bq)?;
    let k = keys_values_from.linear(wk, bk)?;
    let v = keys_values_from.linear(wv, bv)?;
    Ok(q.attention(k, v, mask, batch, heads)?.linear(wo, bo)?)
}

pub(crate) fn attend<'t, T: Scalar>(
    bound: &Bound<'t, '_, T>,
    prefix: &str,
    queries_from: Var<'t, T>,
    keys_values_from: Var<'t, T>,
    mask: &[bool],
    batch: usize,
    heads: usize,
) -> Result<Var<'t, T>> {
    let mut w = Vec::with_capacity(8);
    for s in ["wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo"] {
        w.push(bound.get(&format!("{prefix}.{s}"))?);
    }
    let w: [Var<'t, T>; 8] = w.try_into().unwrap_or_else(|_| unreachable!());
    attend_with(w, queries_from, keys_values_from, mask, batch, heads)
}

/// Multi-head attention of `[a × D]` queries over `[b × D']` keys/values.
/// `mask` is row-major `[a × b]`; every query row needs a visible key.
pub fn multi_head_attention<T: Scalar>(
    queries_from: &Tensor<T>,
    keys_values_from: &Tensor<T>,
    mask: &[bool],
    weights: &AttentionWeights<T>,
    num_heads: usize,
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let c = |t: &Tensor<T>| tape.constant(t);
    let w = [
        c(&weights.wq),
        c(&weights.wk),
        c(&weights.wv),
        c(&weights.wo),
        c(&weights.bq),
        c(&weights.bk),
        c(&weights.bv),
        c(&weights.bo),
    ];
    let out = attend_with(w, c(queries_from), c(keys_values_from), mask, 1, num_heads)?;
    let v = out.value().clone();
    Ok(v)
}

/// Row-major `[c × c]`; entry `(i, j)` is allowed iff `j <= i`.
pub fn causal_mask(c: usize) -> Vec<bool> {
    (0..c).flat_map(|i| (0..c).map(move |j| j <= i)).collect()
}

/// Encoder states the decoder attends to, `[batch·len × D]` with a
/// `[batch·len]` padding mask.
#[derive(Clone, Copy)]
pub struct Memory<'t, 'm, T: Scalar> {
    pub states: Var<'t, T>,
    pub mask: &'m [bool],
    pub len: usize,
}

/// Hidden states after each sublayer of the last block.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState<T: Scalar = f32> {
    pub self_attended: Tensor<T>,
    pub utterance_attended: Tensor<T>,
    pub output: Tensor<T>,
}

fn cross_mask(
    batch: usize,
    q_len: usize,
    mem: &Memory<'_, '_, impl Scalar>,
    what: &str,
) -> Result<Vec<bool>> {
    if mem.mask.len() != batch * mem.len {
        return Err(ModelError::Contract(format!(
            "{what} mask has {} entries, expected {}",
            mem.mask.len(),
            batch * mem.len
        )));
    }
    let mut out = Vec::with_capacity(batch * q_len * mem.len);
    for b in 0..batch {
        let real = &mem.mask[b * mem.len..(b + 1) * mem.len];
        if !real.contains(&true) {
            return Err(ModelError::Contract(format!(
                "{what} of batch item {b} is fully padded"
            )));
        }
        for _ in 0..q_len {
            out.extend_from_slice(real);
        }
    }
    Ok(out)
}

/// `LN(x + t ⊙ (H − x))` with gate `t = sigmoid(x·W_t + b_t)`.
pub(crate) fn highway<'t, T: Scalar>(
    bound: &Bound<'t, '_, T>,
    prefix: &str,
    x: Var<'t, T>,
    h: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let gate = x
        .linear(
            bound.get(&format!("{prefix}.gate.w"))?,
            bound.get(&format!("{prefix}.gate.b"))?,
        )?
        .sigmoid()?;
    let y = x.add(gate.mul(h.sub(x)?)?)?;
    Ok(y.layer_norm(
        bound.get(&format!("{prefix}.ln.gain"))?,
        bound.get(&format!("{prefix}.ln.bias"))?,
        T::cast(LAYER_NORM_EPS),
    )?)
}

/// Teacher-forced decoding of a padded candidate batch on the tape. Returns
/// logits `[batch·len × V]` and the last block's sublayer outputs.
pub fn decode_batch<'t, T: Scalar>(
    bound: &Bound<'t, '_, T>,
    cfg: &DecoderConfig,
    candidates: &PaddedBatch,
    utterance: Memory<'t, '_, T>,
    object: Memory<'t, '_, T>,
) -> Result<(Var<'t, T>, [Var<'t, T>; 3])> {
    let (batch, len) = (candidates.batch, candidates.len);
    if len > cfg.max_positions {
        return Err(ModelError::TooLong {
            len,
            max: cfg.max_positions,
        });
    }
    for b in 0..batch {
        if candidates.real_len(b) == 0 {
            return Err(ModelError::Contract(format!("candidate {b} is empty")));
        }
    }
    if let Some(&bad) = candidates.ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(ModelError::Contract(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let causal = causal_mask(len);
    let self_mask: Vec<bool> = (0..batch).flat_map(|_| causal.iter().copied()).collect();
    let utt_mask = cross_mask(batch, len, &utterance, "utterance")?;
    let obj_mask = cross_mask(batch, len, &object, "object")?;

    let tok = bound.get("decoder.tok_emb")?.gather_rows(&candidates.ids)?;
    let pos = bound
        .get("decoder.pos_emb")?
        .gather_rows(&candidates.positions())?;
    let mut y = tok.add(pos)?;
    let mut stages = [y; 3];
    for l in 0..cfg.num_layers {
        for (s, sub) in DECODER_SUBLAYERS.iter().enumerate() {
            let p = format!("decoder.layers.{l}.{sub}");
            let (kv, mask) = match s {
                0 => (y, &self_mask),
                1 => (utterance.states, &utt_mask),
                _ => (object.states, &obj_mask),
            };
            let h = attend(
                bound,
                &format!("{p}.attn"),
                y,
                kv,
                mask,
                batch,
                cfg.num_heads,
            )?;
            y = highway(bound, &p, y, h)?;
            stages[s] = y;
        }
    }
    let logits = y.linear(bound.get("decoder.out.w")?, bound.get("decoder.out.b")?)?;
    Ok((logits, stages))
}

fn check_candidate(ids: &[usize]) -> Result<()> {
    match ids.first() {
        None => Err(ModelError::Contract("empty candidate".into())),
        Some(&BOS) => Ok(()),
        Some(_) => Err(ModelError::Contract(
            "candidate must start with [BOS]".into(),
        )),
    }
}

/// Logits `[c × V]` for a candidate that starts with `[BOS]`.
pub fn decode<T: Scalar>(
    utterance: &EncoderOutput<T>,
    object: &EncoderOutput<T>,
    candidate: &[usize],
    model: &Model<T>,
) -> Result<Tensor<T>> {
    Ok(decode_with_state(utterance, object, candidate, model)?.0)
}

pub fn decode_with_state<T: Scalar>(
    utterance: &EncoderOutput<T>,
    object: &EncoderOutput<T>,
    candidate: &[usize],
    model: &Model<T>,
) -> Result<(Tensor<T>, DecoderState<T>)> {
    check_candidate(candidate)?;
    let tape = Tape::new();
    let bound = Bound::new(&tape, &model.params, &none_trainable);
    let u = tape.constant(&utterance.embeddings);
    let o = tape.constant(&object.embeddings);
    let input = PaddedBatch::new(&[candidate], None)?;
    let (logits, [s, ut, out]) = decode_batch(
        &bound,
        &model.decoder,
        &input,
        Memory {
            states: u,
            mask: &utterance.attention_mask,
            len: utterance.len(),
        },
        Memory {
            states: o,
            mask: &object.attention_mask,
            len: object.len(),
        },
    )?;
    let state = DecoderState {
        self_attended: s.value().clone(),
        utterance_attended: ut.value().clone(),
        output: out.value().clone(),
    };
    let logits = logits.value().clone();
    Ok((logits, state))
}

fn tile<T: Scalar>(t: &Tensor<T>, times: usize) -> Tensor<T> {
    let (r, c) = t.dims2().expect("2-D");
    let data = t.data().repeat(times);
    Tensor::new(vec![r * times, c], data).expect("finite")
}

/// Logits for several candidates against the same request and object,
/// decoded as one right-padded batch. Entry `i` has shape
/// `[candidates[i].len() × V]`.
pub fn decode_candidates<T: Scalar>(
    utterance: &EncoderOutput<T>,
    object: &EncoderOutput<T>,
    candidates: &[&[usize]],
    model: &Model<T>,
) -> Result<Vec<Tensor<T>>> {
    for c in candidates {
        check_candidate(c)?;
    }
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let batch = candidates.len();
    let input = PaddedBatch::new(candidates, None)?;
    let tape = Tape::new();
    let bound = Bound::new(&tape, &model.params, &none_trainable);
    let u = tape.leaf(tile(&utterance.embeddings, batch));
    let o = tape.leaf(tile(&object.embeddings, batch));
    let umask = utterance.attention_mask.repeat(batch);
    let omask = object.attention_mask.repeat(batch);
    let (logits, _) = decode_batch(
        &bound,
        &model.decoder,
        &input,
        Memory {
            states: u,
            mask: &umask,
            len: utterance.len(),
        },
        Memory {
            states: o,
            mask: &omask,
            len: object.len(),
        },
    )?;
    let logits = logits.value();
    let v = model.decoder.vocab_size;
    candidates
        .iter()
        .enumerate()
        .map(|(b, c)| {
            let start = b * input.len * v;
            let data = logits.data()[start..start + c.len() * v].to_vec();
            Ok(Tensor::new(vec![c.len(), v], data)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::encoder::encode;
    use crate::model::EncoderConfig;
    use crate::tokenizer::TokenSequence;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn random_weights(rng: &mut ChaCha8Rng, d: usize, kv: usize) -> AttentionWeights<f64> {
        AttentionWeights {
            wq: random_tensor(rng, &[d, d]),
            wk: random_tensor(rng, &[kv, d]),
            wv: random_tensor(rng, &[kv, d]),
            wo: random_tensor(rng, &[d, d]),
            bq: random_tensor(rng, &[d]),
            bk: random_tensor(rng, &[d]),
            bv: random_tensor(rng, &[d]),
            bo: random_tensor(rng, &[d]),
        }
    }

    fn identity_weights(d: usize) -> AttentionWeights<f64> {
        AttentionWeights {
            wq: Tensor::eye(d),
            wk: Tensor::eye(d),
            wv: Tensor::eye(d),
            wo: Tensor::eye(d),
            bq: Tensor::zeros(&[d]),
            bk: Tensor::zeros(&[d]),
            bv: Tensor::zeros(&[d]),
            bo: Tensor::zeros(&[d]),
        }
    }

    fn affine(x: &[Vec<f64>], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<Vec<f64>> {
        let (r, c) = w.dims2().unwrap();
        x.iter()
            .map(|row| {
                (0..c)
                    .map(|j| b.data()[j] + (0..r).map(|i| row[i] * w.get2(i, j)).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    /// Straight evaluation of softmax(QKᵀ/√d)V per head.
    fn direct_attention(
        xq: &Tensor<f64>,
        xkv: &Tensor<f64>,
        mask: &[bool],
        w: &AttentionWeights<f64>,
        heads: usize,
    ) -> Vec<Vec<f64>> {
        let rows = |t: &Tensor<f64>| {
            (0..t.shape()[0])
                .map(|i| t.row(i).to_vec())
                .collect::<Vec<_>>()
        };
        let q = affine(&rows(xq), &w.wq, &w.bq);
        let k = affine(&rows(xkv), &w.wk, &w.bk);
        let v = affine(&rows(xkv), &w.wv, &w.bv);
        let d = q[0].len();
        let dk = d / heads;
        let mut concat = vec![vec![0.0; d]; q.len()];
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            for i in 0..q.len() {
                let scores: Vec<f64> = (0..k.len())
                    .map(|j| {
                        if mask[i * k.len() + j] {
                            cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>()
                                / (dk as f64).sqrt()
                        } else {
                            f64::NEG_INFINITY
                        }
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in cols.clone() {
                    concat[i][c] = (0..k.len()).map(|j| e[j] / z * v[j][c]).sum();
                }
            }
        }
        affine(&concat, &w.wo, &w.bo)
    }

    #[test]
    fn matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for heads in [1, 2, 4] {
            let w = random_weights(&mut rng, 8, 8);
            let xq = random_tensor(&mut rng, &[2, 8]);
            let xkv = random_tensor(&mut rng, &[3, 8]);
            let mask = vec![true, false, true, true, true, false];
            let got = multi_head_attention(&xq, &xkv, &mask, &w, heads).unwrap();
            let want = direct_attention(&xq, &xkv, &mask, &w, heads);
            for i in 0..2 {
                for j in 0..8 {
                    assert!((got.get2(i, j) - want[i][j]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn singleton_and_duplicate_keys() {
        let w = identity_weights(4);
        let q = Tensor::from_rows(&[vec![0.3, -1.0, 2.0, 0.5]]).unwrap();
        let key = vec![1.0, 2.0, -3.0, 0.25];
        let one = multi_head_attention(
            &q,
            &Tensor::from_rows(std::slice::from_ref(&key)).unwrap(),
            &[true],
            &w,
            1,
        )
        .unwrap();
        assert_eq!(one.row(0), key.as_slice());
        let two = Tensor::from_rows(&[key.clone(), key.clone()]).unwrap();
        let dup = multi_head_attention(&q, &two, &[true, true], &w, 1).unwrap();
        assert!(dup.max_abs_diff(&one) < 1e-12);
        assert!(multi_head_attention(&q, &two, &[false, false], &w, 1).is_err());
    }

    #[test]
    fn causal_mask_counts() {
        assert_eq!(causal_mask(1), vec![true]);
        let m = causal_mask(3);
        assert_eq!(m.iter().filter(|&&b| b).count(), 6);
        for c in 1..7 {
            let m = causal_mask(c);
            for i in 0..c {
                assert_eq!(m[i * c..(i + 1) * c].iter().filter(|&&b| b).count(), i + 1);
            }
        }
    }

    fn toy_model(seed: u64) -> Model<f32> {
        let enc = EncoderConfig {
            num_layers: 1,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            max_positions: 16,
            vocab_size: 20,
            dropout_rate: 0.0,
        };
        let dec = DecoderConfig {
            num_layers: 1,
            model_dim: 8,
            num_heads: 2,
            vocab_size: 20,
            max_positions: 16,
        };
        Model::init(enc, dec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn seq(ids: &[usize]) -> TokenSequence {
        TokenSequence {
            ids: ids.to_vec(),
            source_text: String::new(),
        }
    }

    #[test]
    fn causality_holds_for_every_position() {
        let m = toy_model(3);
        let u = encode(&seq(&[5, 6]), &m).unwrap();
        let o = encode(&seq(&[7, 8, 9]), &m).unwrap();
        let cand = vec![BOS, 10, 11, 12, 13, 14];
        let base = decode(&u, &o, &cand, &m).unwrap();
        assert_eq!(base.shape(), &[6, 20]);
        for k in 1..cand.len() {
            let mut other = cand.clone();
            other[k] = 19;
            let out = decode(&u, &o, &other, &m).unwrap();
            for t in 0..k {
                assert_eq!(out.row(t), base.row(t), "position {t} saw token {k}");
            }
            assert_ne!(out.row(k), base.row(k));
        }
    }

    #[test]
    fn object_padding_is_ignored() {
        let m = toy_model(4);
        let u = encode(&seq(&[5]), &m).unwrap();
        let o = encode(&seq(&[7, 8]), &m).unwrap();
        let cand = [BOS, 9, 10];
        let a = decode(&u, &o, &cand, &m).unwrap();
        let b = decode(&u, &o.padded(5), &cand, &m).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-5);
    }

    #[test]
    fn batched_candidates_match_single_decodes() {
        let m = toy_model(5);
        let u = encode(&seq(&[5]), &m).unwrap();
        let o = encode(&seq(&[7, 8]), &m).unwrap();
        let c1 = vec![BOS, 9, 10, 11];
        let c2 = vec![BOS, 12];
        let batch = decode_candidates(&u, &o, &[&c1, &c2], &m).unwrap();
        assert_eq!(batch[0], decode(&u, &o, &c1, &m).unwrap());
        assert_eq!(batch[1], decode(&u, &o, &c2, &m).unwrap());
    }

    #[test]
    fn contract_errors() {
        let m = toy_model(6);
        let u = encode(&seq(&[5]), &m).unwrap();
        let o = encode(&seq(&[7]), &m).unwrap();
        assert!(decode(&u, &o, &[], &m).is_err());
        assert!(decode(&u, &o, &[9, 10], &m).is_err());
        let mut dead = o.clone();
        dead.attention_mask.iter_mut().for_each(|b| *b = false);
        assert!(decode(&u, &dead, &[BOS, 9], &m).is_err());
    }

    #[test]
    fn closed_gate_passes_input_through() {
        let m = toy_model(7).cast::<f64>();
        let mut params = m.params.clone();
        let b = params.get_mut("decoder.layers.0.self.gate.b").unwrap();
        b.data_mut().iter_mut().for_each(|v| *v = -20.0);
        let tape = Tape::<f64>::new();
        let bound = Bound::new(&tape, &params, &none_trainable);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = tape.leaf(random_tensor(&mut rng, &[4, 8]));
        let h = tape.leaf(random_tensor(&mut rng, &[4, 8]).cast::<f64>());
        let y = highway(&bound, "decoder.layers.0.self", x, h).unwrap();
        let ln = x
            .layer_norm(
                bound.get("decoder.layers.0.self.ln.gain").unwrap(),
                bound.get("decoder.layers.0.self.ln.bias").unwrap(),
                LAYER_NORM_EPS,
            )
            .unwrap();
        assert!(y.value().max_abs_diff(&ln.value()) < 1e-4);
    }
}
