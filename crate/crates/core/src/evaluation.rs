//! Retrieval metrics over ranked pools.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Catalog, PoolRecord, Turn};
use crate::numerics::Scalar;
use crate::scoring::{rank_scores, ScoreRecord, Scorer, ScoringError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("pool for dialogue {dialogue_id:?} turn {turn_index} has no matching turn")]
    UnknownTurn {
        dialogue_id: String,
        turn_index: usize,
    },
    #[error("dialogue {dialogue_id:?} turn {turn_index}: unknown object {object_id:?}")]
    UnknownObject {
        dialogue_id: String,
        turn_index: usize,
        object_id: String,
    },
    #[error("dialogue {dialogue_id:?} turn {turn_index}: {source}")]
    Scoring {
        dialogue_id: String,
        turn_index: usize,
        #[source]
        source: ScoringError,
    },
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

fn check(ranks: &[usize]) -> Result<()> {
    if ranks.is_empty() {
        return Err(EvalError::Contract("no ranks".into()));
    }
    if ranks.contains(&0) {
        return Err(EvalError::Contract("ranks are 1-based".into()));
    }
    Ok(())
}

pub fn mrr(ranks: &[usize]) -> Result<f64> {
    check(ranks)?;
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check(ranks)?;
    if k == 0 {
        return Err(EvalError::Contract("k must be at least 1".into()));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

pub fn mean_rank(ranks: &[usize]) -> Result<f64> {
    check(ranks)?;
    Ok(ranks.iter().sum::<usize>() as f64 / ranks.len() as f64)
}

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mrr: f64,
    /// `(k, recall@k)` for k in 1, 5, 10.
    pub recall_at: Vec<(usize, f64)>,
    pub mean_rank: f64,
    pub num_examples: usize,
}

#[derive(Serialize, Deserialize)]
struct ReportJson {
    mrr: f64,
    #[serde(rename = "r@1")]
    r1: f64,
    #[serde(rename = "r@5")]
    r5: f64,
    #[serde(rename = "r@10")]
    r10: f64,
    mean_rank: f64,
    n: usize,
}

/// Rounds to six significant digits.
pub fn round6(x: f64) -> f64 {
    format!("{x:.5e}").parse().expect("formatted float parses")
}

impl EvalReport {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        Ok(Self {
            mrr: mrr(ranks)?,
            recall_at: RECALL_KS
                .iter()
                .map(|&k| Ok((k, recall_at_k(ranks, k)?)))
                .collect::<Result<_>>()?,
            mean_rank: mean_rank(ranks)?,
            num_examples: ranks.len(),
        })
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at
            .iter()
            .find(|(kk, _)| *kk == k)
            .map(|(_, r)| *r)
    }

    /// `{"mrr", "r@1", "r@5", "r@10", "mean_rank", "n"}`, six significant
    /// digits, trailing newline.
    pub fn to_json(&self) -> String {
        let r = |k| round6(self.recall(k).unwrap_or(f64::NAN));
        let j = ReportJson {
            mrr: round6(self.mrr),
            r1: r(1),
            r5: r(5),
            r10: r(10),
            mean_rank: round6(self.mean_rank),
            n: self.num_examples,
        };
        let mut s = serde_json::to_string_pretty(&j).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Ranks every pool against its turn and object. Pools are scored in
/// parallel; results keep pool order.
pub fn score_pools<T: Scalar>(
    pools: &[PoolRecord],
    turns: &[Turn],
    catalog: &Catalog,
    scorer: &Scorer<'_, T>,
) -> Result<Vec<ScoreRecord>> {
    let by_key: HashMap<(&str, usize), &Turn> = turns
        .iter()
        .map(|t| ((t.dialogue_id.as_str(), t.turn_index), t))
        .collect();
    let work = || {
        pools
            .par_iter()
            .map(|p| {
                let turn = by_key
                    .get(&(p.dialogue_id.as_str(), p.turn_index))
                    .ok_or_else(|| EvalError::UnknownTurn {
                        dialogue_id: p.dialogue_id.clone(),
                        turn_index: p.turn_index,
                    })?;
                let object = catalog.get(&turn.referred_object_id).ok_or_else(|| {
                    EvalError::UnknownObject {
                        dialogue_id: p.dialogue_id.clone(),
                        turn_index: p.turn_index,
                        object_id: turn.referred_object_id.clone(),
                    }
                })?;
                let wrap = |source| EvalError::Scoring {
                    dialogue_id: p.dialogue_id.clone(),
                    turn_index: p.turn_index,
                    source,
                };
                let pool = p
                    .pool()
                    .map_err(|e| wrap(ScoringError::Contract(e.to_string())))?;
                let scores = scorer
                    .score_pool(&pool, &turn.user_utterance, object)
                    .map_err(wrap)?;
                let ranking = rank_scores(scores, pool.true_index).map_err(wrap)?;
                Ok(ScoreRecord {
                    dialogue_id: p.dialogue_id.clone(),
                    turn_index: p.turn_index,
                    scores: ranking.scores,
                    rank_of_true: ranking.rank_of_true,
                })
            })
            .collect::<Result<Vec<_>>>()
    };
    match worker_threads() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| EvalError::Contract(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    }
}

/// `RETRIEVER_THREADS` as a thread count; unset, unparsable or 0 means the
/// rayon default.
pub fn worker_threads() -> Option<usize> {
    std::env::var("RETRIEVER_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

pub fn evaluate_run<T: Scalar>(
    pools: &[PoolRecord],
    turns: &[Turn],
    catalog: &Catalog,
    scorer: &Scorer<'_, T>,
) -> Result<(EvalReport, Vec<ScoreRecord>)> {
    if pools.is_empty() {
        return Err(EvalError::Contract("no pools to evaluate".into()));
    }
    let records = score_pools(pools, turns, catalog, scorer)?;
    let ranks: Vec<usize> = records.iter().map(|r| r.rank_of_true).collect();
    Ok((EvalReport::from_ranks(&ranks)?, records))
}
