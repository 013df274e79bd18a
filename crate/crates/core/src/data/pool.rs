use std::collections::HashSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{read, CandidatePool, DataError, Turn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::seed::{derive_seed, TAG_POOL};

/// One line of a pools file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolRecord {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub candidates: Vec<String>,
    pub true_index: usize,
}

impl PoolRecord {
    pub fn pool(&self) -> Result<CandidatePool, DataError> {
        CandidatePool::new(self.candidates.clone(), self.true_index)
    }
}

/// Synthetic pool: `pool_size - 1` distinct distractors drawn without
/// replacement from `all_responses` (excluding the true response), with the
/// true response inserted at a uniformly random position.
pub fn build_pool(
    turn: &Turn,
    all_responses: &[String],
    pool_size: usize,
    seed: u64,
) -> Result<CandidatePool, DataError> {
    if pool_size < 2 {
        return Err(DataError::Config(format!(
            "pool size must be at least 2, got {pool_size}"
        )));
    }
    let mut seen = HashSet::new();
    let distinct: Vec<&String> = all_responses
        .iter()
        .filter(|r| **r != turn.true_response && seen.insert(r.as_str()))
        .collect();
    let needed = pool_size - 1;
    if distinct.len() < needed {
        return Err(DataError::Config(format!(
            "pool of {pool_size} for dialogue {:?} turn {} needs {needed} distinct distractors, only {} available",
            turn.dialogue_id,
            turn.turn_index,
            distinct.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates: Vec<String> = sample(&mut rng, distinct.len(), needed)
        .into_iter()
        .map(|i| distinct[i].clone())
        .collect();
    let true_index = rng.random_range(0..pool_size);
    candidates.insert(true_index, turn.true_response.clone());
    CandidatePool::new(candidates, true_index)
}

/// One pool per turn, distractors drawn from the other turns' responses.
/// Turn `i` uses the seed stream `(seed, "pool", i)`.
pub fn build_pools(
    turns: &[Turn],
    pool_size: usize,
    seed: u64,
) -> Result<Vec<PoolRecord>, DataError> {
    let responses: Vec<String> = turns.iter().map(|t| t.true_response.clone()).collect();
    turns
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let pool = build_pool(
                t,
                &responses,
                pool_size,
                derive_seed(seed, TAG_POOL, i as u64),
            )?;
            Ok(PoolRecord {
                dialogue_id: t.dialogue_id.clone(),
                turn_index: t.turn_index,
                candidates: pool.candidates,
                true_index: pool.true_index,
            })
        })
        .collect()
}

pub fn pools_to_jsonl(pools: &[PoolRecord]) -> String {
    let mut out = String::new();
    for p in pools {
        out.push_str(&serde_json::to_string(p).expect("pool serializes"));
        out.push('\n');
    }
    out
}

pub fn load_pools(path: &Path) -> Result<Vec<PoolRecord>, DataError> {
    let origin = path.display().to_string();
    let text = read(path)?;
    let mut pools = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PoolRecord = serde_json::from_str(line).map_err(|e| DataError::Json {
            path: origin.clone(),
            line: n + 1,
            column: e.column(),
            msg: e.to_string(),
        })?;
        rec.pool().map_err(|e| DataError::Invalid {
            path: origin.clone(),
            location: format!("line {}", n + 1),
            msg: e.to_string(),
        })?;
        pools.push(rec);
    }
    Ok(pools)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn turn(resp: &str) -> Turn {
        Turn {
            dialogue_id: "d".into(),
            turn_index: 0,
            user_utterance: "u".into(),
            referred_object_id: "o".into(),
            true_response: resp.into(),
        }
    }

    fn responses(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("response {i}")).collect()
    }

    #[test]
    fn pool_has_truth_exactly_once() {
        let all = responses(20);
        let pool = build_pool(&turn("response 3"), &all, 5, 9).unwrap();
        assert_eq!(pool.len(), 5);
        assert_eq!(
            pool.candidates
                .iter()
                .filter(|c| *c == "response 3")
                .count(),
            1
        );
        assert_eq!(pool.candidates[pool.true_index], "response 3");
        let distinct: HashSet<_> = pool.candidates.iter().collect();
        assert_eq!(distinct.len(), 5);
    }

    #[test]
    fn same_seed_same_pool() {
        let all = responses(30);
        let a = build_pool(&turn("x"), &all, 10, 42).unwrap();
        assert_eq!(a, build_pool(&turn("x"), &all, 10, 42).unwrap());
        assert_ne!(a, build_pool(&turn("x"), &all, 10, 43).unwrap());
    }

    #[test]
    fn duplicates_do_not_count_as_distractors() {
        let mut all = vec!["a".to_string(); 10];
        all.push("truth".into());
        all.push("b".into());
        assert!(matches!(
            build_pool(&turn("truth"), &all, 4, 0),
            Err(DataError::Config(_))
        ));
        assert!(build_pool(&turn("truth"), &all, 3, 0).is_ok());
        assert!(build_pool(&turn("truth"), &all, 1, 0).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let turns: Vec<Turn> = (0..6)
            .map(|i| Turn {
                turn_index: i,
                ..turn(&format!("r{i}"))
            })
            .collect();
        let pools = build_pools(&turns, 4, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pools.jsonl");
        std::fs::write(&path, pools_to_jsonl(&pools)).unwrap();
        assert_eq!(load_pools(&path).unwrap(), pools);
        let line = pools_to_jsonl(&pools[..1]);
        assert!(line.starts_with("{\"dialogue_id\":\"d\",\"turn_index\":0,\"candidates\":["));
    }
}
