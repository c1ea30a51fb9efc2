//! Label generation: pre-rank, list-wise labeling with missing detection,
//! graded scores, negative sampling, reasoning, and dataset serialization.
//! Also the sliding-window labeling mode used by the list-wise baseline.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{bm25_rank, Bm25Params};
use crate::seeds;
use crate::synthetic::{query_topic, topical_relevance};
use crate::text::{read_jsonl, split_words, CandidateSet, Document, Query};

mod http;

pub use http::{parse_ranking_reply, HttpLabeler, HttpLabelerConfig, TOKEN_ENV};

pub const NEGATIVES_PER_QUERY: usize = 3;
pub const DEFAULT_WINDOW: usize = 20;
pub const DEFAULT_STEP: usize = 10;
/// Negatives must have topical relevance below this to the query's topic.
pub const NEGATIVE_MAX_RELEVANCE: f64 = 0.05;

/// Given a query and an ordered document list, return an ordered subset of
/// the document ids.
pub trait Labeler {
    fn label(&self, query: &Query, docs: &[&Document]) -> Result<Vec<String>>;
}

impl<F> Labeler for F
where
    F: Fn(&Query, &[&Document]) -> Result<Vec<String>>,
{
    fn label(&self, query: &Query, docs: &[&Document]) -> Result<Vec<String>> {
        self(query, docs)
    }
}

/// Produces a short natural-language justification for a binary label.
pub trait ReasoningGenerator {
    fn reason(&self, query: &Query, doc: &Document, label: u8) -> Result<String>;
}

/// Template reasoner citing the terms a document shares with the query.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockReasoner;

impl ReasoningGenerator for MockReasoner {
    fn reason(&self, query: &Query, doc: &Document, label: u8) -> Result<String> {
        let doc_words: HashSet<String> = split_words(&doc.text).into_iter().collect();
        let mut shared = Vec::new();
        for w in split_words(&query.text) {
            if doc_words.contains(&w) && !shared.contains(&w) {
                shared.push(w);
            }
        }
        let terms = shared.join(", ");
        Ok(match (label, shared.is_empty()) {
            (1, false) => format!("relevant: shares terms [{terms}]"),
            (1, true) => "relevant: related topic".to_string(),
            (_, true) => "irrelevant: no shared terms".to_string(),
            (_, false) => format!("irrelevant: only shares terms [{terms}]"),
        })
    }
}

pub fn generate_reasoning(
    query: &Query,
    doc: &Document,
    label: u8,
    generator: &dyn ReasoningGenerator,
) -> Result<String> {
    let r = generator.reason(query, doc, label)?;
    if r.trim().is_empty() {
        return Err(Error::Input(format!("empty reasoning for document {}", doc.id)));
    }
    Ok(r)
}

/// The candidate list sorted by a pre-ranker, and its head and tail.
#[derive(Debug, Clone, PartialEq)]
pub struct PreRankedSet {
    pub query: Query,
    pub ordered_docs: Vec<Document>,
    pub top10: Vec<String>,
    pub bottom10: Vec<String>,
    /// `top10 ∪ bottom10` in pre-ranked order.
    pub pre: Vec<String>,
}

impl PreRankedSet {
    pub fn pre_docs(&self) -> Vec<&Document> {
        let ids: HashSet<&str> = self.pre.iter().map(String::as_str).collect();
        self.ordered_docs.iter().filter(|d| ids.contains(d.id.as_str())).collect()
    }
}

/// Sort by `ranker` descending (ties by id) and take the first and last ten.
pub fn pre_rank<F>(cands: &CandidateSet, ranker: F) -> Result<PreRankedSet>
where
    F: Fn(&Document) -> f64,
{
    if cands.documents.is_empty() {
        return Err(Error::Input(format!("query {} has no candidates", cands.query.id)));
    }
    let mut scored: Vec<(f64, &Document)> = cands.documents.iter().map(|d| (ranker(d), d)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
    let ordered_docs: Vec<Document> = scored.into_iter().map(|(_, d)| d.clone()).collect();
    Ok(head_and_tail(cands.query.clone(), ordered_docs))
}

/// Pre-rank with BM25 over the candidate pool.
pub fn pre_rank_bm25(cands: &CandidateSet) -> Result<PreRankedSet> {
    if cands.documents.is_empty() {
        return Err(Error::Input(format!("query {} has no candidates", cands.query.id)));
    }
    let ranked = bm25_rank(&cands.query.text, &cands.documents, Bm25Params::default());
    let ordered_docs = ranked
        .iter()
        .map(|(id, _)| cands.document(id).expect("ranked ids come from the set").clone())
        .collect();
    Ok(head_and_tail(cands.query.clone(), ordered_docs))
}

fn head_and_tail(query: Query, ordered_docs: Vec<Document>) -> PreRankedSet {
    let n = ordered_docs.len();
    let top10: Vec<String> = ordered_docs[..n.min(10)].iter().map(|d| d.id.clone()).collect();
    let bottom10: Vec<String> = ordered_docs[n.saturating_sub(10)..].iter().map(|d| d.id.clone()).collect();
    let mut seen = HashSet::new();
    let pre = ordered_docs
        .iter()
        .map(|d| d.id.clone())
        .filter(|id| (top10.contains(id) || bottom10.contains(id)) && seen.insert(id.clone()))
        .collect();
    PreRankedSet {
        query,
        ordered_docs,
        top10,
        bottom10,
        pre,
    }
}

/// Deterministic stand-in for a list-wise LLM: keeps documents whose hidden
/// relevance reaches `threshold`, sorted by relevance. Documents within 0.05
/// of the threshold flip sides with probability `miss_noise`.
pub fn synthetic_oracle_label(
    query: &Query,
    docs: &[&Document],
    threshold: f64,
    miss_noise: f64,
    seed: u64,
) -> Result<Vec<String>> {
    let mut rng = seeds::rng(seeds::keyed_seed(seed, seeds::ORACLE_NOISE, &query.id));
    let mut kept = Vec::new();
    for d in docs {
        let rel = d
            .hidden_relevance
            .ok_or_else(|| Error::Input(format!("document {} has no hidden relevance", d.id)))?;
        let mut keep = rel >= threshold;
        if miss_noise > 0.0 && (rel - threshold).abs() <= 0.05 && rng.gen_bool(miss_noise.min(1.0)) {
            keep = !keep;
        }
        if keep {
            kept.push((rel, d.id.clone()));
        }
    }
    kept.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    Ok(kept.into_iter().map(|(_, id)| id).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleLabeler {
    pub threshold: f64,
    pub miss_noise: f64,
    pub seed: u64,
}

impl Default for OracleLabeler {
    fn default() -> Self {
        OracleLabeler {
            threshold: 0.5,
            miss_noise: 0.0,
            seed: 0,
        }
    }
}

impl Labeler for OracleLabeler {
    fn label(&self, query: &Query, docs: &[&Document]) -> Result<Vec<String>> {
        synthetic_oracle_label(query, docs, self.threshold, self.miss_noise, self.seed)
    }
}

fn check_labeler_output(query: &Query, allowed: &[&str], output: &[String]) -> Result<()> {
    let allowed: HashSet<&str> = allowed.iter().copied().collect();
    let mut seen = HashSet::new();
    for id in output {
        if !allowed.contains(id.as_str()) {
            return Err(Error::LabelerContract {
                query_id: query.id.clone(),
                detail: format!("returned unknown document `{id}`"),
            });
        }
        if !seen.insert(id.as_str()) {
            return Err(Error::LabelerContract {
                query_id: query.id.clone(),
                detail: format!("returned `{id}` twice"),
            });
        }
    }
    Ok(())
}

/// Label `pre` and split it into `(ranked, excluded)`; excluded keeps the
/// pre-ranked order.
pub fn label_with_missing(pre: &PreRankedSet, labeler: &dyn Labeler) -> Result<(Vec<String>, Vec<String>)> {
    let docs = pre.pre_docs();
    let ranked = labeler.label(&pre.query, &docs)?;
    let allowed: Vec<&str> = pre.pre.iter().map(String::as_str).collect();
    check_labeler_output(&pre.query, &allowed, &ranked)?;
    let ranked_set: HashSet<&str> = ranked.iter().map(String::as_str).collect();
    let excluded = pre.pre.iter().filter(|id| !ranked_set.contains(id.as_str())).cloned().collect();
    Ok((ranked, excluded))
}

/// Draw `size` documents from outside the query's candidate set. On synthetic
/// corpora only documents nearly unrelated to the query's topic qualify.
pub fn sample_negatives(corpus: &[CandidateSet], query_index: usize, size: usize, seed: u64) -> Result<Vec<Document>> {
    let set = corpus
        .get(query_index)
        .ok_or_else(|| Error::Input(format!("query index {query_index} out of range")))?;
    let own: HashSet<&str> = set.documents.iter().map(|d| d.id.as_str()).collect();
    let topic = query_topic(&set.query.text);
    let pool: Vec<&Document> = corpus
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != query_index)
        .flat_map(|(_, c)| c.documents.iter())
        .filter(|d| !own.contains(d.id.as_str()))
        .filter(|d| match (topic, d.hidden_relevance) {
            (Some(t), Some(_)) => topical_relevance(&d.text, t) < NEGATIVE_MAX_RELEVANCE,
            _ => true,
        })
        .collect();
    if pool.len() < size {
        return Err(Error::Input(format!(
            "query {} has {} eligible negatives, {size} needed",
            set.query.id,
            pool.len()
        )));
    }
    let mut rng = seeds::rng(seeds::keyed_seed(seed, seeds::NEGATIVES, &set.query.id));
    Ok(pool.choose_multiple(&mut rng, size).map(|d| (*d).clone()).collect())
}

/// Ranked doc at 1-based position `i` (tenths), clamped when the list is long.
fn ranked_score(i: usize, n_ranked: usize) -> f64 {
    let s = (20.0 - i as f64) / 10.0;
    if n_ranked > 18 {
        s.max(0.21)
    } else {
        s
    }
}

/// Graded training targets: `2 − 0.1·i` for ranked position `i` (1-based),
/// `0.2 − 0.01·(j + 1)` for excluded docs with `j` a seeded permutation index,
/// and 0 for negatives.
pub fn assign_graded_scores(
    ranked: &[String],
    excluded: &[String],
    negatives: &[String],
    seed: u64,
) -> Result<BTreeMap<String, f64>> {
    let mut all = HashSet::new();
    for id in ranked.iter().chain(excluded).chain(negatives) {
        if !all.insert(id.as_str()) {
            return Err(Error::Input(format!("document `{id}` appears in more than one label group")));
        }
    }
    if excluded.len() > 19 {
        return Err(Error::Input(format!("{} excluded documents exceed the score band", excluded.len())));
    }
    let mut out = BTreeMap::new();
    for (i, id) in ranked.iter().enumerate() {
        out.insert(id.clone(), ranked_score(i + 1, ranked.len()));
    }
    let mut perm: Vec<usize> = (0..excluded.len()).collect();
    perm.shuffle(&mut seeds::rng(seed));
    for (id, j) in excluded.iter().zip(perm) {
        out.insert(id.clone(), (19 - j) as f64 / 100.0);
    }
    for id in negatives {
        out.insert(id.clone(), 0.0);
    }
    Ok(out)
}

/// Back-to-front sliding-window list-wise reranking over the whole list.
/// Ids a window's labeler call leaves out follow its ranked ids in their
/// prior relative order.
pub fn sliding_window_label(
    query: &Query,
    docs: &[Document],
    labeler: &dyn Labeler,
    window: usize,
    step: usize,
) -> Result<Vec<String>> {
    if !(window > step && step > 0) {
        return Err(Error::Config(format!("need window > step > 0, got {window} and {step}")));
    }
    let mut order: Vec<&Document> = docs.iter().collect();
    if order.is_empty() {
        return Ok(Vec::new());
    }
    let mut end = order.len();
    loop {
        let start = end.saturating_sub(window);
        let slice = &order[start..end];
        let ranked = labeler.label(query, slice)?;
        let ids: Vec<&str> = slice.iter().map(|d| d.id.as_str()).collect();
        check_labeler_output(query, &ids, &ranked)?;
        let by_id: BTreeMap<&str, &Document> = slice.iter().map(|d| (d.id.as_str(), *d)).collect();
        let ranked_set: HashSet<&str> = ranked.iter().map(String::as_str).collect();
        let mut next: Vec<&Document> = ranked.iter().map(|id| by_id[id.as_str()]).collect();
        next.extend(slice.iter().filter(|d| !ranked_set.contains(d.id.as_str())));
        order.splice(start..end, next);
        if start == 0 {
            break;
        }
        end -= step;
    }
    Ok(order.into_iter().map(|d| d.id.clone()).collect())
}

/// One labeled query as stored in the dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingLabel {
    pub query_id: String,
    pub query: String,
    pub ranked: Vec<String>,
    pub excluded: Vec<String>,
    pub negatives: Vec<String>,
    pub graded: BTreeMap<String, f64>,
    pub binary: BTreeMap<String, u8>,
    pub reasoning: BTreeMap<String, String>,
    pub seed: u64,
}

impl RankingLabel {
    /// Every labeled document id: ranked, then excluded, then negatives.
    pub fn doc_ids(&self) -> impl Iterator<Item = &String> {
        self.ranked.iter().chain(&self.excluded).chain(&self.negatives)
    }

    /// Check the type invariants against the query's candidate ids and the
    /// pre-ranked subset that was labeled.
    pub fn validate(&self, candidates: &BTreeSet<&str>, pre: &BTreeSet<&str>) -> Result<()> {
        let fail = |detail: String| Err(Error::Input(format!("label for {}: {detail}", self.query_id)));
        let ranked: BTreeSet<&str> = self.ranked.iter().map(String::as_str).collect();
        let excluded: BTreeSet<&str> = self.excluded.iter().map(String::as_str).collect();
        if ranked.len() != self.ranked.len() || !ranked.is_disjoint(&excluded) {
            return fail("ranked ids repeat or overlap excluded".into());
        }
        if &ranked.union(&excluded).copied().collect::<BTreeSet<_>>() != pre {
            return fail("ranked ∪ excluded differs from the pre-ranked set".into());
        }
        if self.negatives.iter().any(|n| candidates.contains(n.as_str())) {
            return fail("negative drawn from the candidate set".into());
        }
        for id in self.doc_ids() {
            let expect = u8::from(ranked.contains(id.as_str()));
            if self.binary.get(id) != Some(&expect) {
                return fail(format!("binary label of {id} should be {expect}"));
            }
            if !self.graded.contains_key(id) || !self.reasoning.contains_key(id) {
                return fail(format!("{id} lacks a graded score or reasoning"));
            }
        }
        if self.ranked.len() <= 18 {
            let min_ranked = self.ranked.iter().map(|i| self.graded[i]).fold(f64::INFINITY, f64::min);
            let max_excl = self.excluded.iter().map(|i| self.graded[i]).fold(0.0, f64::max);
            let neg_ok = self.negatives.iter().all(|i| self.graded[i] == 0.0);
            let excl_ok = self.excluded.iter().all(|i| self.graded[i] > 0.0);
            if !(min_ranked > max_excl && excl_ok && neg_ok) {
                return fail("graded scores are not strictly banded".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub query_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBuild {
    pub labels: Vec<RankingLabel>,
    pub skipped: Vec<SkipRecord>,
}

/// How the list handed to the labeler is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelMode {
    /// Label `top10 ∪ bottom10` once; unreturned ids become hard negatives.
    #[default]
    PreRankedWindow,
    /// Sliding-window reranking of the full list; nothing is excluded.
    SlidingWindow,
}

/// Run the full pipeline over every query of `corpus`.
pub fn build_dataset(
    corpus: &[CandidateSet],
    pre_ranker: &dyn Fn(&CandidateSet) -> Result<PreRankedSet>,
    labeler: &dyn Labeler,
    reasoner: &dyn ReasoningGenerator,
    seed: u64,
    mode: LabelMode,
) -> Result<DatasetBuild> {
    let mut labels = Vec::new();
    let mut skipped = Vec::new();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by(|&a, &b| corpus[a].query.id.cmp(&corpus[b].query.id));
    for qi in order {
        let set = &corpus[qi];
        let qid = set.query.id.clone();
        let wrap = |e: Error| Error::Pipeline {
            query_id: qid.clone(),
            source: Box::new(e),
        };
        let outcome = match mode {
            LabelMode::PreRankedWindow => pre_ranker(set)
                .map_err(wrap)
                .and_then(|pre| Ok(label_with_missing(&pre, labeler))),
            LabelMode::SlidingWindow => Ok(sliding_window_label(
                &set.query,
                &set.documents,
                labeler,
                DEFAULT_WINDOW,
                DEFAULT_STEP,
            )
            .map(|ids| (ids, Vec::new()))),
        }?;
        let (ranked, excluded) = match outcome {
            Ok(v) => v,
            Err(e @ Error::LabelerContract { .. }) => {
                log::warn!("skipping query {qid}: {e}");
                skipped.push(SkipRecord { query_id: qid, reason: e.to_string() });
                continue;
            }
            Err(e) => return Err(wrap(e)),
        };
        if ranked.is_empty() {
            skipped.push(SkipRecord {
                query_id: qid,
                reason: "labeler returned no relevant documents".into(),
            });
            continue;
        }
        let ranked = if mode == LabelMode::SlidingWindow {
            // Graded scores cover the head of the full ordering only.
            ranked.into_iter().take(DEFAULT_WINDOW).collect()
        } else {
            ranked
        };
        let negatives: Vec<Document> = sample_negatives(corpus, qi, NEGATIVES_PER_QUERY, seed).map_err(wrap)?;
        let negative_ids: Vec<String> = negatives.iter().map(|d| d.id.clone()).collect();
        let perm_seed = seeds::keyed_seed(seed, seeds::EXCLUDED_PERMUTATION, &qid);
        let graded = assign_graded_scores(&ranked, &excluded, &negative_ids, perm_seed).map_err(wrap)?;
        let mut binary = BTreeMap::new();
        let mut reasoning = BTreeMap::new();
        let ranked_set: HashSet<&str> = ranked.iter().map(String::as_str).collect();
        let docs = ranked
            .iter()
            .chain(&excluded)
            .map(|id| set.document(id).expect("labeled ids come from the set"))
            .chain(negatives.iter());
        for d in docs {
            let y = u8::from(ranked_set.contains(d.id.as_str()));
            binary.insert(d.id.clone(), y);
            reasoning.insert(d.id.clone(), generate_reasoning(&set.query, d, y, reasoner).map_err(wrap)?);
        }
        labels.push(RankingLabel {
            query_id: qid,
            query: set.query.text.clone(),
            ranked,
            excluded,
            negatives: negative_ids,
            graded,
            binary,
            reasoning,
            seed,
        });
    }
    Ok(DatasetBuild { labels, skipped })
}

pub fn write_dataset_jsonl(path: &Path, labels: &[RankingLabel]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for l in labels {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset_jsonl(path: &Path) -> Result<Vec<RankingLabel>> {
    read_jsonl(path)
}
