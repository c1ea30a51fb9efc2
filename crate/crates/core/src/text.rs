//! Tokenization, vocabulary and corpus containers.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "<unk>";
pub const BASE_SPECIALS: [&str; 4] = [CLS, SEP, PAD, UNK];

pub const RELEVANT: &str = "<|Relevant|>";
pub const IRRELEVANT: &str = "<|Irrelevant|>";
pub const RESPONSE: &str = "<|Response|>";
pub const REASON: &str = "<|Reason|>";
pub const DECODER_SPECIALS: [&str; 4] = [RELEVANT, IRRELEVANT, RESPONSE, REASON];

/// Split `text` into lowercase word tokens. Any character that is neither
/// alphanumeric nor part of a word is a boundary and is dropped.
pub fn split_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(id_to_token: Vec<String>) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.id_to_token
    }
}

impl Vocabulary {
    /// A vocabulary holding only the base special tokens.
    pub fn with_specials() -> Self {
        Vocabulary::from(BASE_SPECIALS.iter().map(|s| s.to_string()).collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    fn special(&self, token: &str) -> TokenId {
        self.token_to_id[token]
    }

    pub fn cls(&self) -> TokenId {
        self.special(CLS)
    }

    pub fn sep(&self) -> TokenId {
        self.special(SEP)
    }

    pub fn pad(&self) -> TokenId {
        self.special(PAD)
    }

    pub fn unk(&self) -> TokenId {
        self.special(UNK)
    }

    /// Ids of every special token currently registered.
    pub fn special_ids(&self) -> Vec<TokenId> {
        BASE_SPECIALS
            .iter()
            .chain(DECODER_SPECIALS.iter())
            .filter_map(|s| self.id(s))
            .collect()
    }

    /// Append `token` if absent; returns its id either way.
    pub fn add_token(&mut self, token: &str) -> TokenId {
        if let Some(id) = self.id(token) {
            return id;
        }
        let id = self.id_to_token.len() as TokenId;
        self.id_to_token.push(token.to_string());
        self.token_to_id.insert(token.to_string(), id);
        id
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        tokenize(text, self)
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.token_to_id.len() != self.id_to_token.len() {
            return Err(Error::Input("vocabulary contains duplicate tokens".into()));
        }
        for (i, t) in self.id_to_token.iter().enumerate() {
            if self.token_to_id.get(t) != Some(&(i as TokenId)) {
                return Err(Error::Input(format!("vocabulary maps disagree on `{t}`")));
            }
        }
        for s in BASE_SPECIALS {
            if self.id(s).is_none() {
                return Err(Error::Input(format!("vocabulary lacks special token {s}")));
            }
        }
        Ok(())
    }
}

/// Lowercase, split on whitespace/punctuation, map out-of-vocabulary words to `<unk>`.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<TokenId> {
    let unk = vocab.unk();
    split_words(text)
        .iter()
        .map(|w| vocab.id(w).unwrap_or(unk))
        .collect()
}

/// Keep the `max_size - 4` most frequent words (ties lexicographic) after the
/// base special tokens.
pub fn build_vocabulary<'a, I>(texts: I, max_size: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a str>,
{
    if max_size < BASE_SPECIALS.len() + 1 {
        return Err(Error::Config(format!(
            "max vocabulary size {max_size} leaves no room beyond the {} special tokens",
            BASE_SPECIALS.len()
        )));
    }
    let mut freq: HashMap<String, usize> = HashMap::new();
    for text in texts {
        for w in split_words(text) {
            *freq.entry(w).or_default() += 1;
        }
    }
    let mut words: Vec<(String, usize)> = freq
        .into_iter()
        .filter(|(w, _)| !BASE_SPECIALS.contains(&w.as_str()))
        .collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut vocab = Vocabulary::with_specials();
    for (w, _) in words.into_iter().take(max_size - BASE_SPECIALS.len()) {
        vocab.add_token(&w);
    }
    Ok(vocab)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
    #[serde(skip)]
    pub token_ids: Vec<TokenId>,
}

impl Query {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Query {
            id: id.into(),
            text: text.into(),
            token_ids: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    /// Ground-truth relevance to the owning query; synthetic corpora only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_relevance: Option<f64>,
    #[serde(skip)]
    pub token_ids: Vec<TokenId>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Document {
            id: id.into(),
            text: text.into(),
            hidden_relevance: None,
            token_ids: Vec::new(),
        }
    }

    pub fn with_relevance(mut self, rel: f64) -> Self {
        self.hidden_relevance = Some(rel);
        self
    }
}

/// One query and its retrieved list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub query: Query,
    pub documents: Vec<Document>,
}

impl CandidateSet {
    pub fn new(query: Query, documents: Vec<Document>) -> Result<Self> {
        let set = CandidateSet { query, documents };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for d in &self.documents {
            if !seen.insert(d.id.as_str()) {
                return Err(Error::Input(format!(
                    "duplicate document id `{}` in candidate set of query `{}`",
                    d.id, self.query.id
                )));
            }
        }
        Ok(())
    }

    /// Fill in token ids for the query and every document.
    pub fn tokenize_with(&mut self, vocab: &Vocabulary) {
        self.query.token_ids = tokenize(&self.query.text, vocab);
        for d in &mut self.documents {
            d.token_ids = tokenize(&d.text, vocab);
        }
    }

    pub fn document(&self, id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.id == id)
    }
}

/// Every query and document text in the corpus, in file order.
pub fn corpus_texts(corpus: &[CandidateSet]) -> impl Iterator<Item = &str> {
    corpus.iter().flat_map(|c| {
        std::iter::once(c.query.text.as_str()).chain(c.documents.iter().map(|d| d.text.as_str()))
    })
}

pub fn tokenize_corpus(corpus: &mut [CandidateSet], vocab: &Vocabulary) {
    for set in corpus {
        set.tokenize_with(vocab);
    }
}

/// Index of documents by id across the whole corpus.
pub fn document_index(corpus: &[CandidateSet]) -> BTreeMap<&str, &Document> {
    corpus
        .iter()
        .flat_map(|c| c.documents.iter())
        .map(|d| (d.id.as_str(), d))
        .collect()
}

pub fn validate_corpus(corpus: &[CandidateSet]) -> Result<()> {
    let mut qids = HashSet::new();
    for c in corpus {
        c.validate()?;
        if !qids.insert(c.query.id.as_str()) {
            return Err(Error::Input(format!("duplicate query id `{}`", c.query.id)));
        }
    }
    Ok(())
}

pub fn write_corpus_jsonl(path: &Path, corpus: &[CandidateSet]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for set in corpus {
        serde_json::to_writer(&mut w, set)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_corpus_jsonl(path: &Path) -> Result<Vec<CandidateSet>> {
    let corpus: Vec<CandidateSet> = read_jsonl(path)?;
    validate_corpus(&corpus)?;
    Ok(corpus)
}

/// Read one JSON value per nonblank line.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|source| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        out.push(value);
    }
    Ok(out)
}
