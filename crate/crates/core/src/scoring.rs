//! Candidate scoring: mean token log-likelihood plus attribute grounding.

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::data::{CandidatePool, CatalogObject};
use crate::decoder::decode_candidates;
use crate::encoder::{encode, encode_object, EncoderOutput};
use crate::model::{Model, ModelError};
use crate::numerics::{log_sum_exp, Scalar, Tensor};
use crate::tokenizer::{tokenize, Vocabulary, PAD};

#[derive(Debug, thiserror::Error)]
pub enum ScoringError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = ScoringError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    #[serde(rename = "index")]
    pub candidate_index: usize,
    pub score_ll: f64,
    pub score_gr: f64,
    pub total: f64,
}

impl CandidateScore {
    pub fn new(candidate_index: usize, score_ll: f64, score_gr: f64) -> Self {
        Self {
            candidate_index,
            score_ll,
            score_gr,
            total: score_ll + score_gr,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    /// Candidate indices, best first.
    pub order: Vec<usize>,
    /// 1-based.
    pub rank_of_true: usize,
    /// Indexed by candidate.
    pub scores: Vec<CandidateScore>,
}

/// Which score terms are active. With `likelihood` off the model is never
/// run and every candidate gets a log-likelihood score of 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreOptions {
    pub grounding: bool,
    pub likelihood: bool,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            grounding: true,
            likelihood: true,
        }
    }
}

/// Log-softmax probability of each target `candidate_ids[i + 1]` under
/// `logits` row `i`. `candidate_ids` is the wrapped `[BOS] … [EOS]` sequence
/// and `logits` come from decoding all but its last token. Pad targets are
/// skipped.
pub fn token_log_likelihoods<T: Scalar>(
    logits: &Tensor<T>,
    candidate_ids: &[usize],
) -> Result<Vec<f64>> {
    let (rows, vocab) = logits.dims2().map_err(ModelError::from)?;
    if candidate_ids.len() != rows + 1 {
        return Err(ScoringError::Contract(format!(
            "{rows} logit rows for a candidate of {} tokens",
            candidate_ids.len()
        )));
    }
    let mut out = Vec::with_capacity(rows);
    for (i, &target) in candidate_ids[1..].iter().enumerate() {
        if target == PAD {
            continue;
        }
        if target >= vocab {
            return Err(ScoringError::Contract(format!(
                "target {target} outside vocabulary of {vocab}"
            )));
        }
        let row: Vec<f64> = logits.row(i).iter().map(|v| v.as_f64()).collect();
        out.push(row[target] - log_sum_exp(&row));
    }
    Ok(out)
}

pub fn score_ll(lls: &[f64]) -> Result<f64> {
    if lls.is_empty() {
        return Err(ScoringError::Contract("no token log-likelihoods".into()));
    }
    Ok(lls.iter().sum::<f64>() / lls.len() as f64)
}

/// Case-insensitive whole-word pattern for `value`; inner whitespace
/// matches any run of whitespace. A period between digits is not a
/// boundary, so `10` does not match inside `10.0`.
fn value_pattern(value: &str) -> Result<Regex> {
    let words: Vec<String> = value.split_whitespace().map(regex::escape).collect();
    if words.is_empty() {
        return Err(ScoringError::Contract("empty attribute value".into()));
    }
    let pattern = format!(
        r"(?i)(?:^|[^\w.]|(?:^|\D)\.){}(?:$|[^\w.]|\.(?:\D|$))",
        words.join(r"\s+")
    );
    Ok(Regex::new(&pattern).expect("escaped pattern compiles"))
}

pub fn omega_match(candidate_text: &str, attribute_value: &str) -> Result<bool> {
    Ok(value_pattern(attribute_value)?.is_match(candidate_text))
}

/// Precompiled value patterns of one object, one group per attribute.
pub struct ObjectMatcher {
    attributes: Vec<Vec<Regex>>,
}

impl ObjectMatcher {
    /// Blank values are dropped; an attribute left without values can never
    /// match.
    pub fn new(object: &CatalogObject) -> Self {
        let attributes = object
            .attributes
            .values()
            .map(|values| {
                values
                    .iter()
                    .filter_map(|v| value_pattern(v).ok())
                    .collect()
            })
            .collect();
        Self { attributes }
    }

    /// Fraction of attributes with at least one value present in `text`.
    pub fn score(&self, text: &str) -> f64 {
        if self.attributes.is_empty() {
            return 0.0;
        }
        let hits = self
            .attributes
            .iter()
            .filter(|pats| pats.iter().any(|p| p.is_match(text)))
            .count();
        hits as f64 / self.attributes.len() as f64
    }
}

pub fn score_grounding(candidate_text: &str, object: &CatalogObject) -> f64 {
    ObjectMatcher::new(object).score(candidate_text)
}

/// Wrapped candidate ids, checked against the decoder's position budget.
pub fn candidate_ids<T: Scalar>(
    text: &str,
    vocab: &Vocabulary,
    model: &Model<T>,
) -> Result<Vec<usize>> {
    let ids = tokenize(text, vocab).wrapped().ids;
    if ids.len() - 1 > model.decoder.max_positions {
        return Err(ModelError::TooLong {
            len: ids.len() - 1,
            max: model.decoder.max_positions,
        }
        .into());
    }
    Ok(ids)
}

/// Mean log-likelihood of each candidate, decoded as one batch.
pub fn likelihood_scores<T: Scalar>(
    candidates: &[Vec<usize>],
    utterance: &EncoderOutput<T>,
    object: &EncoderOutput<T>,
    model: &Model<T>,
) -> Result<Vec<f64>> {
    let inputs: Vec<&[usize]> = candidates.iter().map(|c| &c[..c.len() - 1]).collect();
    let logits = decode_candidates(utterance, object, &inputs, model)?;
    logits
        .iter()
        .zip(candidates)
        .map(|(l, ids)| score_ll(&token_log_likelihoods(l, ids)?))
        .collect()
}

pub fn score_candidate<T: Scalar>(
    candidate: &str,
    utterance: &EncoderOutput<T>,
    object_enc: &EncoderOutput<T>,
    object: &CatalogObject,
    vocab: &Vocabulary,
    model: &Model<T>,
    options: ScoreOptions,
) -> Result<CandidateScore> {
    let ll = if options.likelihood {
        let ids = candidate_ids(candidate, vocab, model)?;
        likelihood_scores(&[ids], utterance, object_enc, model)?[0]
    } else {
        0.0
    };
    let gr = if options.grounding {
        score_grounding(candidate, object)
    } else {
        0.0
    };
    Ok(CandidateScore::new(0, ll, gr))
}

/// Orders scores by descending total, ties by ascending index.
pub fn rank_scores(scores: Vec<CandidateScore>, true_index: usize) -> Result<Ranking> {
    if scores.is_empty() {
        return Err(ScoringError::Contract("empty pool".into()));
    }
    if true_index >= scores.len() {
        return Err(ScoringError::Contract(format!(
            "true index {true_index} outside pool of {}",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total.total_cmp(&scores[a].total).then(a.cmp(&b)));
    let rank_of_true = order
        .iter()
        .position(|&i| i == true_index)
        .expect("permutation")
        + 1;
    Ok(Ranking {
        order,
        rank_of_true,
        scores,
    })
}

/// Model, vocabulary and options used to rank pools.
pub struct Scorer<'a, T: Scalar = f32> {
    pub model: &'a Model<T>,
    pub vocab: &'a Vocabulary,
    pub options: ScoreOptions,
}

impl<T: Scalar> Scorer<'_, T> {
    pub fn score_pool(
        &self,
        pool: &CandidatePool,
        utterance: &str,
        object: &CatalogObject,
    ) -> Result<Vec<CandidateScore>> {
        if pool.is_empty() {
            return Err(ScoringError::Contract("empty pool".into()));
        }
        let lls = if self.options.likelihood {
            let u = encode(&tokenize(utterance, self.vocab), self.model)?;
            let o = encode_object(object, self.vocab, self.model)?;
            let ids = pool
                .candidates
                .iter()
                .map(|c| candidate_ids(c, self.vocab, self.model))
                .collect::<Result<Vec<_>>>()?;
            likelihood_scores(&ids, &u, &o, self.model)?
        } else {
            vec![0.0; pool.len()]
        };
        let matcher = self.options.grounding.then(|| ObjectMatcher::new(object));
        Ok(pool
            .candidates
            .iter()
            .zip(lls)
            .enumerate()
            .map(|(i, (c, ll))| {
                CandidateScore::new(i, ll, matcher.as_ref().map_or(0.0, |m| m.score(c)))
            })
            .collect())
    }

    pub fn rank_pool(
        &self,
        pool: &CandidatePool,
        utterance: &str,
        object: &CatalogObject,
    ) -> Result<Ranking> {
        rank_scores(self.score_pool(pool, utterance, object)?, pool.true_index)
    }
}

/// One line of a scores export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub scores: Vec<CandidateScore>,
    pub rank_of_true: usize,
}

pub fn scores_to_jsonl(records: &[ScoreRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("scores serialize"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn certain_and_uniform_logits() {
        let ids = [2, 1, 0, 3];
        let mut data = vec![-1e4f32; 3 * 4];
        data[1] = 0.0;
        data[4] = 0.0;
        data[2 * 4 + 3] = 0.0;
        let certain = Tensor::new(vec![3, 4], data).unwrap();
        assert!(token_log_likelihoods(&certain, &ids)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        let uniform = Tensor::<f32>::zeros(&[3, 4]);
        let lls = token_log_likelihoods(&uniform, &[2, 1, 3, 3]).unwrap();
        assert_eq!(lls.len(), 3);
        for v in lls {
            assert!((v + 4f64.ln()).abs() < 1e-12);
        }
        assert!(token_log_likelihoods(&uniform, &[2, 3]).is_err());
    }

    #[test]
    fn log_likelihoods_match_log_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Tensor::new(
            vec![5, 7],
            (0..35).map(|_| rng.random_range(-4.0..4.0)).collect(),
        )
        .unwrap();
        let ids = [2, 4, 6, 5, 1, 3];
        let got = token_log_likelihoods::<f32>(&logits, &ids).unwrap();
        for (i, g) in got.iter().enumerate() {
            let row: Vec<f64> = logits.row(i).iter().map(|&v| v as f64).collect();
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            let want = (row[ids[i + 1]].exp() / z).ln();
            assert!((g - want).abs() < 1e-5);
        }
    }

    #[test]
    fn mean_log_likelihood() {
        assert_eq!(score_ll(&[-1.0, -2.0, -3.0]).unwrap(), -2.0);
        assert_eq!(score_ll(&[0.0]).unwrap(), 0.0);
        assert!(score_ll(&[]).is_err());
        let xs = [-0.3, -1.7, -2.2];
        let doubled: Vec<f64> = xs.iter().chain(xs.iter()).copied().collect();
        assert!((score_ll(&xs).unwrap() - score_ll(&doubled).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn whole_word_matching() {
        assert!(omega_match("the dress is red", "red").unwrap());
        assert!(!omega_match("a reddish tone", "red").unwrap());
        assert!(omega_match("Available in XL only", "xl").unwrap());
        assert!(omega_match("sizes xl, s and m.", "s").unwrap());
        assert!(!omega_match("it costs 10.0", "10").unwrap());
        assert!(!omega_match("it costs 0.10", "10").unwrap());
        assert!(omega_match("it costs 10.", "10").unwrap());
        assert!(omega_match("sizes s.", "s").unwrap());
        assert!(!omega_match("costs 100 dollars", "10").unwrap());
        assert!(omega_match("made of  faux\tleather", "faux leather").unwrap());
        assert!(!omega_match("faux and leather", "faux leather").unwrap());
        assert!(omega_match("price: $10 today", "$10").unwrap());
        assert!(!omega_match("aXb", "a.b").unwrap());
        assert!(omega_match("x", " ").is_err());
    }

    #[test]
    fn grounding_fraction() {
        let o = CatalogObject::new("o")
            .with("colors", &["red", "blue"])
            .with("price", &["10"]);
        assert_eq!(score_grounding("It comes in red.", &o), 0.5);
        assert_eq!(score_grounding("red or blue for 10", &o), 1.0);
        assert_eq!(score_grounding("anything", &CatalogObject::new("e")), 0.0);
    }

    #[test]
    fn totals_and_ties() {
        let s = CandidateScore::new(0, -2.0, 0.5);
        assert_eq!(s.total, -1.5);
        let mk = |totals: &[f64]| {
            totals
                .iter()
                .enumerate()
                .map(|(i, &t)| CandidateScore::new(i, t, 0.0))
                .collect::<Vec<_>>()
        };
        let r = rank_scores(mk(&[-1.0, -3.0, -2.0]), 0).unwrap();
        assert_eq!(r.order, vec![0, 2, 1]);
        assert_eq!(r.rank_of_true, 1);
        let r = rank_scores(mk(&[0.5; 5]), 3).unwrap();
        assert_eq!(r.order, vec![0, 1, 2, 3, 4]);
        assert_eq!(r.rank_of_true, 4);
        assert!(rank_scores(vec![], 0).is_err());
    }

    proptest! {
        #[test]
        fn rank_of_true_survives_permutation(totals in prop::collection::vec(-50i32..50, 2..30), seed in any::<u64>()) {
            // distinct totals so the tie rule does not interact with the shuffle
            let mut uniq = totals.clone();
            uniq.sort_unstable();
            uniq.dedup();
            let n = uniq.len();
            prop_assume!(n >= 2);
            let true_index = (seed as usize) % n;
            let scores: Vec<_> = uniq.iter().enumerate().map(|(i, &t)| CandidateScore::new(i, t as f64, 0.0)).collect();
            let base = rank_scores(scores.clone(), true_index).unwrap().rank_of_true;
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let shuffled: Vec<_> = perm.iter().enumerate().map(|(i, &p)| CandidateScore::new(i, scores[p].total, 0.0)).collect();
            let new_true = perm.iter().position(|&p| p == true_index).unwrap();
            prop_assert_eq!(rank_scores(shuffled, new_true).unwrap().rank_of_true, base);
        }

        #[test]
        fn grounding_is_monotone(extra in prop::sample::select(vec!["red", "blue", "10", "cotton"])) {
            let o = CatalogObject::new("o")
                .with("colors", &["red", "blue"])
                .with("price", &["10"])
                .with("material", &["cotton"]);
            let text = "we have it";
            let before = score_grounding(text, &o);
            let after = score_grounding(&format!("{text} {extra}"), &o);
            prop_assert!(after >= before);
            prop_assert!((0.0..=1.0).contains(&after));
        }
    }
}
