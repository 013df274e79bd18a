//! Python module `retriever`: vocabularies, corpora, training, scoring and
//! metrics from `retriever-core`.

use std::path::PathBuf;

use indexmap::IndexMap;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use retriever_core::config::RunConfig;
use retriever_core::data::{
    build_pools, catalog_to_json, dialogues_to_json, generate_synthetic_corpus, load_catalog,
    load_dialogues, Catalog, CatalogObject, DataError, PoolRecord, Turn,
};
use retriever_core::encoder::encode;
use retriever_core::evaluation::{self, evaluate_run, EvalReport};
use retriever_core::pipeline::train_from_corpus;
use retriever_core::scoring::{self, ScoreOptions, Scorer};
use retriever_core::tokenizer::{self, TokenSequence};
use retriever_core::training::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
use retriever_core::Error;

fn to_py(e: impl Into<Error>) -> PyErr {
    let e = e.into();
    let io = matches!(
        &e,
        Error::Data(DataError::Io { .. })
            | Error::Checkpoint(CheckpointError::Io { .. })
            | Error::Tokenizer(tokenizer::TokenizerError::Io { .. })
            | Error::Config(retriever_core::config::ConfigError::Io { .. })
    );
    if io {
        PyOSError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn object_from(id: &str, attributes: IndexMap<String, Vec<String>>) -> PyResult<CatalogObject> {
    let object = CatalogObject {
        object_id: id.to_string(),
        attributes,
    };
    object
        .validate()
        .map_err(|(at, msg)| PyValueError::new_err(format!("{at}: {msg}")))?;
    Ok(object)
}

/// Wordpiece vocabulary.
#[pyclass(name = "Vocabulary", module = "retriever", from_py_object)]
#[derive(Clone)]
pub struct PyVocabulary {
    inner: tokenizer::Vocabulary,
}

#[pymethods]
impl PyVocabulary {
    /// Vocabulary of at most `max_size` pieces learned from `texts`.
    #[staticmethod]
    fn build(texts: Vec<String>, max_size: usize) -> PyResult<Self> {
        Ok(Self {
            inner: tokenizer::build_vocab(&texts, max_size).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: tokenizer::Vocabulary::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn tokens(&self) -> Vec<String> {
        self.inner.tokens().to_vec()
    }

    fn id(&self, token: &str) -> Option<usize> {
        self.inner.id(token)
    }

    fn tokenize(&self, text: &str) -> Vec<usize> {
        tokenizer::tokenize(text, &self.inner).ids
    }

    fn detokenize(&self, ids: Vec<usize>) -> PyResult<String> {
        let seq = TokenSequence {
            ids,
            source_text: String::new(),
        };
        tokenizer::detokenize(&seq, &self.inner).map_err(to_py)
    }
}

/// Catalog plus dialogue turns.
#[pyclass(name = "Corpus", module = "retriever", from_py_object)]
#[derive(Clone)]
pub struct PyCorpus {
    catalog: Catalog,
    turns: Vec<Turn>,
}

#[pymethods]
impl PyCorpus {
    #[staticmethod]
    #[pyo3(signature = (objects=20, turns=64, seed=0))]
    fn synthetic(objects: usize, turns: usize, seed: u64) -> Self {
        let c = generate_synthetic_corpus(objects, turns, seed);
        Self {
            catalog: c.catalog,
            turns: c.turns,
        }
    }

    /// Reads `catalog.json` and `dialogues.json` from `directory`.
    #[staticmethod]
    fn load(directory: PathBuf) -> PyResult<Self> {
        let catalog = load_catalog(&directory.join("catalog.json")).map_err(to_py)?;
        let turns = load_dialogues(&directory.join("dialogues.json"), &catalog).map_err(to_py)?;
        Ok(Self { catalog, turns })
    }

    fn save(&self, directory: PathBuf) -> PyResult<()> {
        let io = |e: std::io::Error| PyOSError::new_err(format!("{}: {e}", directory.display()));
        std::fs::create_dir_all(&directory).map_err(io)?;
        std::fs::write(
            directory.join("catalog.json"),
            catalog_to_json(&self.catalog),
        )
        .map_err(io)?;
        std::fs::write(
            directory.join("dialogues.json"),
            dialogues_to_json(&self.turns),
        )
        .map_err(io)
    }

    fn __len__(&self) -> usize {
        self.turns.len()
    }

    #[getter]
    fn num_objects(&self) -> usize {
        self.catalog.len()
    }

    fn object_ids(&self) -> Vec<String> {
        self.catalog.iter().map(|o| o.object_id.clone()).collect()
    }

    /// Attribute name to values.
    fn object(&self, object_id: &str) -> PyResult<IndexMap<String, Vec<String>>> {
        self.catalog
            .get(object_id)
            .map(|o| o.attributes.clone())
            .ok_or_else(|| PyValueError::new_err(format!("unknown object {object_id:?}")))
    }

    fn turns<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.turns
            .iter()
            .map(|t| {
                let d = PyDict::new(py);
                d.set_item("dialogue_id", &t.dialogue_id)?;
                d.set_item("turn_index", t.turn_index)?;
                d.set_item("user_utterance", &t.user_utterance)?;
                d.set_item("referred_object_id", &t.referred_object_id)?;
                d.set_item("true_response", &t.true_response)?;
                Ok(d)
            })
            .collect()
    }

    /// The first `n` turns and the rest, sharing the catalog.
    fn split(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.turns.len());
        let (a, b) = self.turns.split_at(n);
        (
            Self {
                catalog: self.catalog.clone(),
                turns: a.to_vec(),
            },
            Self {
                catalog: self.catalog.clone(),
                turns: b.to_vec(),
            },
        )
    }

    /// One pool per turn: `{"dialogue_id", "turn_index", "candidates", "true_index"}`.
    #[pyo3(signature = (pool_size=10, seed=0))]
    fn pools<'py>(
        &self,
        py: Python<'py>,
        pool_size: usize,
        seed: u64,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        build_pools(&self.turns, pool_size, seed)
            .map_err(to_py)?
            .into_iter()
            .map(|p| {
                let d = PyDict::new(py);
                d.set_item("dialogue_id", p.dialogue_id)?;
                d.set_item("turn_index", p.turn_index)?;
                d.set_item("candidates", p.candidates)?;
                d.set_item("true_index", p.true_index)?;
                Ok(d)
            })
            .collect()
    }
}

fn report_dict<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("mrr", r.mrr)?;
    for (k, v) in &r.recall_at {
        d.set_item(format!("r@{k}"), v)?;
    }
    d.set_item("mean_rank", r.mean_rank)?;
    d.set_item("n", r.num_examples)?;
    Ok(d)
}

/// Trained encoder-decoder with its vocabulary.
#[pyclass(name = "Model", module = "retriever")]
pub struct PyModel {
    inner: Checkpoint,
    #[pyo3(get)]
    losses: Vec<f64>,
}

impl PyModel {
    fn scorer(&self, grounding: bool) -> Scorer<'_> {
        Scorer {
            model: &self.inner.model,
            vocab: &self.inner.vocab,
            options: ScoreOptions {
                grounding,
                likelihood: true,
            },
        }
    }
}

#[pymethods]
impl PyModel {
    /// Trains on `corpus`. `config` is TOML text in the command-line
    /// configuration format; `seed` and `steps` override it.
    #[staticmethod]
    #[pyo3(signature = (corpus, config=None, seed=None, steps=None))]
    fn train(
        py: Python<'_>,
        corpus: &PyCorpus,
        config: Option<&str>,
        seed: Option<u64>,
        steps: Option<u64>,
    ) -> PyResult<Self> {
        let mut cfg = match config {
            Some(text) => RunConfig::from_toml(text, "<config>").map_err(to_py)?,
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(s) = steps {
            cfg.training.steps = s;
        }
        let (ck, summary) = py
            .detach(|| train_from_corpus(&cfg, &corpus.catalog, &corpus.turns, |_| {}))
            .map_err(to_py)?;
        Ok(Self {
            inner: ck,
            losses: summary.losses,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(&path).map_err(to_py)?,
            losses: Vec::new(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(to_py)
    }

    #[getter]
    fn vocab(&self) -> PyVocabulary {
        PyVocabulary {
            inner: self.inner.vocab.clone(),
        }
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.model.params.num_scalars()
    }

    /// Contextual embeddings of `text`, one row per token including the
    /// boundary markers.
    fn encode(&self, text: &str) -> PyResult<Vec<Vec<f32>>> {
        let out = encode(
            &tokenizer::tokenize(text, &self.inner.vocab),
            &self.inner.model,
        )
        .map_err(to_py)?;
        let (rows, _) = out.embeddings.dims2().map_err(to_py)?;
        Ok((0..rows).map(|i| out.embeddings.row(i).to_vec()).collect())
    }

    /// Per-candidate `{"index", "score_ll", "score_gr", "total"}`.
    #[pyo3(signature = (utterance, object, candidates, grounding=true))]
    fn score<'py>(
        &self,
        py: Python<'py>,
        utterance: &str,
        object: IndexMap<String, Vec<String>>,
        candidates: Vec<String>,
        grounding: bool,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let object = object_from("query", object)?;
        let pool = retriever_core::data::CandidatePool::new(candidates, 0).map_err(to_py)?;
        let scores = self
            .scorer(grounding)
            .score_pool(&pool, utterance, &object)
            .map_err(to_py)?;
        scores
            .iter()
            .map(|s| {
                let d = PyDict::new(py);
                d.set_item("index", s.candidate_index)?;
                d.set_item("score_ll", s.score_ll)?;
                d.set_item("score_gr", s.score_gr)?;
                d.set_item("total", s.total)?;
                Ok(d)
            })
            .collect()
    }

    /// Candidate indices best first, and the 1-based rank of `true_index`.
    #[pyo3(signature = (utterance, object, candidates, true_index, grounding=true))]
    fn rank(
        &self,
        utterance: &str,
        object: IndexMap<String, Vec<String>>,
        candidates: Vec<String>,
        true_index: usize,
        grounding: bool,
    ) -> PyResult<(Vec<usize>, usize)> {
        let object = object_from("query", object)?;
        let pool =
            retriever_core::data::CandidatePool::new(candidates, true_index).map_err(to_py)?;
        let r = self
            .scorer(grounding)
            .rank_pool(&pool, utterance, &object)
            .map_err(to_py)?;
        Ok((r.order, r.rank_of_true))
    }

    /// Builds pools from `corpus` and reports MRR, recall@{1,5,10}, mean rank.
    #[pyo3(signature = (corpus, pool_size=10, seed=0, grounding=true))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        corpus: &PyCorpus,
        pool_size: usize,
        seed: u64,
        grounding: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        let pools: Vec<PoolRecord> = build_pools(&corpus.turns, pool_size, seed).map_err(to_py)?;
        let scorer = self.scorer(grounding);
        let (report, _) = py
            .detach(|| evaluate_run(&pools, &corpus.turns, &corpus.catalog, &scorer))
            .map_err(to_py)?;
        report_dict(py, &report)
    }
}

/// `name: v1, v2.` per attribute in name order.
#[pyfunction]
fn serialize_object(attributes: IndexMap<String, Vec<String>>) -> PyResult<String> {
    Ok(tokenizer::serialize_object(&object_from(
        "object", attributes,
    )?))
}

/// Whole-word, case-insensitive match of `value` in `text`.
#[pyfunction]
fn omega_match(text: &str, value: &str) -> PyResult<bool> {
    scoring::omega_match(text, value).map_err(to_py)
}

/// Fraction of the object's attributes mentioned in `text`.
#[pyfunction]
fn score_grounding(text: &str, attributes: IndexMap<String, Vec<String>>) -> PyResult<f64> {
    Ok(scoring::score_grounding(
        text,
        &object_from("object", attributes)?,
    ))
}

#[pyfunction]
fn mrr(ranks: Vec<usize>) -> PyResult<f64> {
    evaluation::mrr(&ranks).map_err(to_py)
}

#[pyfunction]
fn recall_at_k(ranks: Vec<usize>, k: usize) -> PyResult<f64> {
    evaluation::recall_at_k(&ranks, k).map_err(to_py)
}

#[pyfunction]
fn mean_rank(ranks: Vec<usize>) -> PyResult<f64> {
    evaluation::mean_rank(&ranks).map_err(to_py)
}

#[pymodule]
pub fn retriever(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(serialize_object, m)?)?;
    m.add_function(wrap_pyfunction!(omega_match, m)?)?;
    m.add_function(wrap_pyfunction!(score_grounding, m)?)?;
    m.add_function(wrap_pyfunction!(mrr, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(mean_rank, m)?)?;
    Ok(())
}
