//! nDCG, TREC run/qrels files, and baseline rankers (BM25, naive encoder
//! cosine, vanilla decoder).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bert::RraBert;
use crate::error::{Error, Result};
use crate::gpt::RraGpt;
use crate::text::{split_words, Document, TokenId};

/// Anything that assigns a relevance score to a tokenized (query, doc) pair.
pub trait Scorer {
    fn score_pair(&self, query: &[TokenId], doc: &[TokenId]) -> Result<f64>;
}

impl Scorer for RraBert {
    fn score_pair(&self, query: &[TokenId], doc: &[TokenId]) -> Result<f64> {
        self.score(query, doc)
    }
}

impl Scorer for RraGpt {
    fn score_pair(&self, query: &[TokenId], doc: &[TokenId]) -> Result<f64> {
        self.score(query, doc)
    }
}

/// Sort `(id, score)` by score descending, ties by id ascending.
pub fn sort_scored(mut scored: Vec<(String, f64)>) -> Vec<(String, f64)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored
}

/// Score every document (which must carry token ids) and sort.
pub fn rank_documents<S: Scorer + ?Sized>(
    scorer: &S,
    query: &[TokenId],
    docs: &[Document],
) -> Result<Vec<(String, f64)>> {
    let scored = docs
        .iter()
        .map(|d| Ok((d.id.clone(), scorer.score_pair(query, &d.token_ids)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(sort_scored(scored))
}

/// `DCG@k / IDCG@k` with gain `2^rel − 1` and discount `log2(r + 1)`.
/// Zero when every relevance is zero.
pub fn ndcg_at_k(ranked_relevances: &[f64], k: usize) -> f64 {
    ndcg_with_ideal(ranked_relevances, ranked_relevances, k)
}

/// Graded judgments: query id → doc id → relevance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Qrels(pub BTreeMap<String, BTreeMap<String, f64>>);

impl Qrels {
    pub fn insert(&mut self, qid: &str, doc_id: &str, rel: f64) -> Result<()> {
        if !(rel >= 0.0) {
            return Err(Error::Input(format!("relevance {rel} for ({qid}, {doc_id}) is negative")));
        }
        let judged = self.0.entry(qid.to_string()).or_default();
        if judged.contains_key(doc_id) {
            return Err(Error::Input(format!("duplicate judgment for ({qid}, {doc_id})")));
        }
        judged.insert(doc_id.to_string(), rel);
        Ok(())
    }

    pub fn get(&self, qid: &str, doc_id: &str) -> Option<f64> {
        self.0.get(qid)?.get(doc_id).copied()
    }

    pub fn contains_query(&self, qid: &str) -> bool {
        self.0.contains_key(qid)
    }

    pub fn read_trec(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut q = Qrels::default();
        for (i, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.is_empty() {
                continue;
            }
            let bad = || Error::Input(format!("{}:{}: expected `qid 0 docid rel`", path.display(), i + 1));
            if f.len() != 4 {
                return Err(bad());
            }
            let rel: f64 = f[3].parse().map_err(|_| bad())?;
            q.insert(f[0], f[2], rel)
                .map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), i + 1)))?;
        }
        Ok(q)
    }

    pub fn to_trec(&self) -> String {
        let mut out = String::new();
        for (qid, docs) in &self.0 {
            for (doc, rel) in docs {
                writeln!(out, "{qid} 0 {doc} {rel}").expect("string write");
            }
        }
        out
    }

    pub fn write_trec(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_trec()).map_err(|e| Error::io(path, e))
    }
}

/// Ranked lists: query id → `(doc id, score)` in rank order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Run(pub BTreeMap<String, Vec<(String, f64)>>);

impl Run {
    /// Insert a ranked list after checking its invariants.
    pub fn insert(&mut self, qid: &str, ranked: Vec<(String, f64)>) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for w in ranked.windows(2) {
            if w[1].1 > w[0].1 {
                return Err(Error::Input(format!("run for {qid} has increasing scores")));
            }
        }
        for (d, _) in &ranked {
            if !seen.insert(d.as_str()) {
                return Err(Error::Input(format!("run for {qid} repeats document {d}")));
            }
        }
        self.0.insert(qid.to_string(), ranked);
        Ok(())
    }

    pub fn to_trec(&self, tag: &str) -> String {
        let mut out = String::new();
        for (qid, ranked) in &self.0 {
            write_trec_lines(&mut out, qid, ranked, tag);
        }
        out
    }

    pub fn write_trec(&self, path: &Path, tag: &str) -> Result<()> {
        fs::write(path, self.to_trec(tag)).map_err(|e| Error::io(path, e))
    }

    /// Read a run; each query's list is ordered by the rank column.
    pub fn read_trec(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rows: BTreeMap<String, Vec<(usize, String, f64)>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.is_empty() {
                continue;
            }
            let bad = || {
                Error::Input(format!(
                    "{}:{}: expected `qid Q0 docid rank score tag`",
                    path.display(),
                    i + 1
                ))
            };
            if f.len() != 6 {
                return Err(bad());
            }
            let rank: usize = f[3].parse().map_err(|_| bad())?;
            let score: f64 = f[4].parse().map_err(|_| bad())?;
            rows.entry(f[0].to_string()).or_default().push((rank, f[2].to_string(), score));
        }
        let mut run = Run::default();
        for (qid, mut r) in rows {
            r.sort_by_key(|x| x.0);
            run.insert(&qid, r.into_iter().map(|(_, d, s)| (d, s)).collect())?;
        }
        Ok(run)
    }
}

/// Append `qid Q0 docid rank score tag` lines (1-based ranks).
pub fn write_trec_lines(out: &mut String, qid: &str, ranked: &[(String, f64)], tag: &str) {
    for (i, (doc, score)) in ranked.iter().enumerate() {
        writeln!(out, "{qid} Q0 {doc} {} {score} {tag}", i + 1).expect("string write");
    }
}

pub const DEFAULT_KS: [usize; 2] = [5, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// query id → k → nDCG@k.
    pub per_query: BTreeMap<String, BTreeMap<usize, f64>>,
    /// k → macro average.
    pub mean: BTreeMap<usize, f64>,
    pub query_count: usize,
    /// Run queries without judgments.
    pub skipped: Vec<String>,
}

impl EvalResult {
    pub fn ndcg(&self, k: usize) -> f64 {
        self.mean.get(&k).copied().unwrap_or(0.0)
    }
}

/// nDCG@k per query and macro-averaged; unjudged documents have relevance 0.
pub fn evaluate_run(run: &Run, qrels: &Qrels, ks: &[usize]) -> EvalResult {
    let mut per_query = BTreeMap::new();
    let mut skipped = Vec::new();
    for (qid, ranked) in &run.0 {
        let Some(judged) = qrels.0.get(qid) else {
            skipped.push(qid.clone());
            continue;
        };
        let mut rels: Vec<f64> = ranked.iter().map(|(d, _)| judged.get(d).copied().unwrap_or(0.0)).collect();
        // Judged documents missing from the run still count toward the ideal.
        let missing = judged.iter().filter(|(d, _)| !ranked.iter().any(|(r, _)| r == *d));
        let listed = rels.len();
        rels.extend(missing.map(|(_, &r)| r));
        let per_k = ks
            .iter()
            .map(|&k| (k, ndcg_with_ideal(&rels[..listed], &rels, k)))
            .collect();
        per_query.insert(qid.clone(), per_k);
    }
    let query_count = per_query.len();
    let mean = ks
        .iter()
        .map(|&k| {
            let total: f64 = per_query.values().map(|m: &BTreeMap<usize, f64>| m[&k]).sum();
            (k, if query_count == 0 { 0.0 } else { total / query_count as f64 })
        })
        .collect();
    if !skipped.is_empty() {
        log::warn!("{} run queries have no judgments: {:?}", skipped.len(), skipped);
    }
    EvalResult {
        per_query,
        mean,
        query_count,
        skipped,
    }
}

/// nDCG of `ranked` with the ideal ordering drawn from `pool`.
fn ndcg_with_ideal(ranked: &[f64], pool: &[f64], k: usize) -> f64 {
    let gain = |rels: &[f64]| -> f64 {
        rels.iter()
            .take(k)
            .enumerate()
            .map(|(i, &r)| (r.exp2() - 1.0) / ((i + 2) as f64).log2())
            .sum()
    };
    let mut ideal = pool.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg = gain(&ideal);
    if idcg <= 0.0 {
        0.0
    } else {
        gain(ranked) / idcg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

/// Document frequencies and average length over a document pool.
#[derive(Debug, Clone, Default)]
pub struct Bm25Stats {
    pub n_docs: usize,
    pub avgdl: f64,
    pub df: HashMap<String, usize>,
}

impl Bm25Stats {
    pub fn from_texts<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        let mut stats = Bm25Stats::default();
        let mut total_len = 0usize;
        for text in texts {
            let words = split_words(text);
            total_len += words.len();
            stats.n_docs += 1;
            let mut distinct = words;
            distinct.sort_unstable();
            distinct.dedup();
            for w in distinct {
                *stats.df.entry(w).or_default() += 1;
            }
        }
        stats.avgdl = if stats.n_docs == 0 {
            0.0
        } else {
            total_len as f64 / stats.n_docs as f64
        };
        stats
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.n_docs as f64;
        let df = self.df.get(term).copied().unwrap_or(0) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }
}

/// Okapi BM25 of `doc` for `query`; each query-term occurrence contributes.
pub fn bm25_score(query: &str, doc: &str, stats: &Bm25Stats, params: Bm25Params) -> f64 {
    let words = split_words(doc);
    let dl = words.len() as f64;
    let mut tf: HashMap<&str, usize> = HashMap::new();
    for w in &words {
        *tf.entry(w.as_str()).or_default() += 1;
    }
    let norm = if stats.avgdl > 0.0 { dl / stats.avgdl } else { 0.0 };
    split_words(query)
        .iter()
        .map(|t| {
            let f = tf.get(t.as_str()).copied().unwrap_or(0) as f64;
            if f == 0.0 {
                return 0.0;
            }
            stats.idf(t) * f * (params.k1 + 1.0) / (f + params.k1 * (1.0 - params.b + params.b * norm))
        })
        .sum()
}

/// Rank `docs` by BM25 with statistics over `docs` themselves.
pub fn bm25_rank(query: &str, docs: &[Document], params: Bm25Params) -> Vec<(String, f64)> {
    let stats = Bm25Stats::from_texts(docs.iter().map(|d| d.text.as_str()));
    sort_scored(
        docs.iter()
            .map(|d| (d.id.clone(), bm25_score(query, &d.text, &stats, params)))
            .collect(),
    )
}

/// Mean of the last-layer hidden states of `ids` run through the encoder.
pub fn pooled_embedding(model: &RraBert, ids: &[TokenId]) -> Result<Vec<f64>> {
    if ids.is_empty() {
        return Err(Error::Input("cannot embed an empty token sequence".into()));
    }
    let h = model.stack().encoder_forward(&model.store, ids)?;
    let last = h.last();
    Ok(last.mean_axis(ndarray::Axis(0)).expect("nonempty").to_vec())
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Rank by cosine between separately pooled query and document embeddings.
pub fn naive_cosine_rank(model: &RraBert, query: &[TokenId], docs: &[Document]) -> Result<Vec<(String, f64)>> {
    let q = pooled_embedding(model, query)?;
    let scored = docs
        .iter()
        .map(|d| Ok((d.id.clone(), cosine(&q, &pooled_embedding(model, &d.token_ids)?))))
        .collect::<Result<Vec<_>>>()?;
    Ok(sort_scored(scored))
}

/// Rank by `p_rel − p_irrel` over the plain `relevant` / `irrelevant` word
/// logits at the response position.
pub fn vanilla_decoder_rank(model: &RraGpt, query: &[TokenId], docs: &[Document]) -> Result<Vec<(String, f64)>> {
    let scored = docs
        .iter()
        .map(|d| Ok((d.id.clone(), model.label_margin_score(query, &d.token_ids, true)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(sort_scored(scored))
}

/// Integer grade of a synthetic hidden relevance in `[0, 1]`.
pub fn grade_hidden_relevance(rel: f64) -> f64 {
    if rel >= 0.75 {
        3.0
    } else if rel >= 0.5 {
        2.0
    } else if rel >= 0.25 {
        1.0
    } else {
        0.0
    }
}

/// Qrels for a synthetic corpus from its hidden relevance values.
pub fn synthetic_qrels(corpus: &[crate::text::CandidateSet]) -> Result<Qrels> {
    let mut q = Qrels::default();
    for set in corpus {
        for d in &set.documents {
            let rel = d
                .hidden_relevance
                .ok_or_else(|| Error::Input(format!("document {} has no hidden relevance", d.id)))?;
            q.insert(&set.query.id, &d.id, grade_hidden_relevance(rel))?;
        }
    }
    Ok(q)
}
