//! Wordpiece vocabulary, greedy longest-match tokenization and the
//! `name: v1, v2.` object serialization fed to the encoder.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::data::CatalogObject;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

pub const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[BOS]", "[EOS]"];
pub const CONTINUATION: &str = "##";
/// Words longer than this (in chars) map straight to `[UNK]`.
pub const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("vocabulary config: {0}")]
    Config(String),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    InvalidId { id: usize, size: usize },
    #[error("vocabulary file {path}: {msg}")]
    Format { path: String, msg: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Token inventory. Ids are dense and the four reserved tokens take 0..4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Token ids of one piece of text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub source_text: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Copy with `[BOS]` prepended and `[EOS]` appended.
    pub fn wrapped(&self) -> TokenSequence {
        let mut ids = Vec::with_capacity(self.ids.len() + 2);
        ids.push(BOS);
        ids.extend_from_slice(&self.ids);
        ids.push(EOS);
        TokenSequence {
            ids,
            source_text: self.source_text.clone(),
        }
    }
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_ascii() && !c.is_alphanumeric() && !c.is_whitespace())
}

/// Lowercases and splits on whitespace, keeping each punctuation character
/// as its own word.
pub fn normalize_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for c in text.to_lowercase().chars() {
        if c.is_whitespace() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else if is_punct(c) {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            words.push(c.to_string());
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

impl Vocabulary {
    /// Builds a vocabulary from a token list whose first four entries are the
    /// reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, TokenizerError> {
        if tokens.len() < RESERVED.len() || tokens[..4] != RESERVED {
            return Err(TokenizerError::Config(format!(
                "the first tokens must be {RESERVED:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(TokenizerError::Config(format!(
                    "token {i} is empty or contains whitespace"
                )));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(TokenizerError::Config(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Result<&str, TokenizerError> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(TokenizerError::InvalidId {
                id,
                size: self.tokens.len(),
            })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_text()).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = std::fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text(&text).map_err(|e| TokenizerError::Format {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }
}

/// Builds a deterministic wordpiece vocabulary.
///
/// Layout: reserved tokens, every character seen (sorted), the `##` form of
/// every character, then whole words and `##` suffixes of at least two
/// characters ranked by corpus count (ties lexicographic) until `max_size`.
pub fn build_vocab<S: AsRef<str>>(
    corpus: &[S],
    max_size: usize,
) -> Result<Vocabulary, TokenizerError> {
    let mut word_counts: HashMap<String, usize> = HashMap::new();
    for text in corpus {
        for w in normalize_words(text.as_ref()) {
            if w.chars().count() <= MAX_WORD_CHARS {
                *word_counts.entry(w).or_default() += 1;
            }
        }
    }
    if word_counts.is_empty() {
        return Err(TokenizerError::Config(
            "corpus contains no words".to_string(),
        ));
    }

    let charset: BTreeSet<char> = word_counts.keys().flat_map(|w| w.chars()).collect();
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(charset.iter().map(|c| c.to_string()));
    tokens.extend(charset.iter().map(|c| format!("{CONTINUATION}{c}")));
    if max_size < tokens.len() {
        return Err(TokenizerError::Config(format!(
            "max_size {max_size} is smaller than the {} reserved and character tokens",
            tokens.len()
        )));
    }

    let mut candidates: HashMap<String, usize> = HashMap::new();
    for (word, &count) in &word_counts {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() < 2 {
            continue;
        }
        *candidates.entry(word.clone()).or_default() += count;
        for start in 1..chars.len() - 1 {
            let suffix: String = chars[start..].iter().collect();
            *candidates
                .entry(format!("{CONTINUATION}{suffix}"))
                .or_default() += count;
        }
    }
    let mut ranked: Vec<(String, usize)> = candidates.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let room = max_size - tokens.len();
    tokens.extend(ranked.into_iter().take(room).map(|(t, _)| t));
    Vocabulary::from_tokens(tokens)
}

fn wordpiece(word: &str, vocab: &Vocabulary, out: &mut Vec<usize>) {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > MAX_WORD_CHARS {
        out.push(UNK);
        return;
    }
    let mark = out.len();
    let mut start = 0;
    let mut piece = String::new();
    while start < chars.len() {
        let mut found = None;
        let mut end = chars.len();
        while end > start {
            piece.clear();
            if start > 0 {
                piece.push_str(CONTINUATION);
            }
            piece.extend(&chars[start..end]);
            if let Some(id) = vocab.id(&piece) {
                found = Some(id);
                break;
            }
            end -= 1;
        }
        match found {
            Some(id) => {
                out.push(id);
                start = end;
            }
            None => {
                out.truncate(mark);
                out.push(UNK);
                return;
            }
        }
    }
}

/// Greedy longest-match wordpiece tokenization. Reserved tokens are never
/// produced except `[UNK]`.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> TokenSequence {
    let mut ids = Vec::new();
    for word in normalize_words(text) {
        wordpiece(&word, vocab, &mut ids);
    }
    TokenSequence {
        ids,
        source_text: text.to_string(),
    }
}

/// Joins pieces with spaces, fusing `##` continuations onto the previous
/// piece. `[PAD]`, `[BOS]` and `[EOS]` are dropped.
pub fn detokenize(seq: &TokenSequence, vocab: &Vocabulary) -> Result<String, TokenizerError> {
    let mut out = String::new();
    for &id in &seq.ids {
        let tok = vocab.token(id)?;
        if matches!(id, PAD | BOS | EOS) {
            continue;
        }
        match tok.strip_prefix(CONTINUATION) {
            Some(rest) if id > EOS && !out.is_empty() => out.push_str(rest),
            _ => {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
    }
    Ok(out)
}

/// `name: v1, v2.` per attribute, attributes in lexicographic name order and
/// separated by a single space. The empty object serializes to `""`.
pub fn serialize_object(object: &CatalogObject) -> String {
    let mut names: Vec<&String> = object.attributes.keys().collect();
    names.sort();
    let mut out = String::new();
    for name in names {
        if !out.is_empty() {
            out.push(' ');
        }
        let _ = write!(out, "{name}: {}.", object.attributes[name].join(", "));
    }
    out
}
