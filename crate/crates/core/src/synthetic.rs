//! Seeded synthetic corpus with known ground-truth relevance.
//!
//! Words belong either to a shared "general" pool or to exactly one topic.
//! Topics sit on a line, and a document's relevance to a query is the mean
//! topical affinity of its words to the query topic, so semantically related
//! documents are relevant even when they share no exact term with the query.
//! The topic of a generated word is encoded in its spelling (the leading
//! syllable), which lets downstream stages recompute topical relevance from
//! text alone without any side metadata.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::seeds;
use crate::text::{split_words, CandidateSet, Document, Query};

const CONSONANTS: [char; 16] = [
    'b', 'd', 'f', 'g', 'h', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z', 'y',
];
const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];
const SYLLABLES: usize = CONSONANTS.len() * VOWELS.len();
const MAX_TOPICS: usize = SYLLABLES;
const WORDS_PER_TOPIC: usize = 30;

/// Affinity between a word topic and the query topic by line distance.
const AFFINITY: [f64; 3] = [1.0, 0.5, 0.15];
const RELEVANCE_NOISE: f64 = 0.03;

fn syllable(i: usize) -> String {
    let i = i % SYLLABLES;
    format!("{}{}", CONSONANTS[i / VOWELS.len()], VOWELS[i % VOWELS.len()])
}

fn syllable_index(s: &str) -> Option<usize> {
    let mut chars = s.chars();
    let c = chars.next()?;
    let v = chars.next()?;
    let ci = CONSONANTS.iter().position(|&x| x == c)?;
    let vi = VOWELS.iter().position(|&x| x == v)?;
    Some(ci * VOWELS.len() + vi)
}

/// Spelling of the `j`-th word of topic `t`.
pub fn topic_word(t: usize, j: usize) -> String {
    format!("{}{}{}", syllable(t), syllable(j), syllable(j / SYLLABLES))
}

/// Spelling of the `j`-th general word.
pub fn general_word(j: usize) -> String {
    format!(
        "{}{}{}",
        VOWELS[j % VOWELS.len()],
        syllable(j / VOWELS.len()),
        syllable(j / (VOWELS.len() * SYLLABLES))
    )
}

/// Topic encoded in a generated word, `None` for general or foreign words.
pub fn word_topic(word: &str) -> Option<usize> {
    if word.len() != 6 || !word.is_ascii() {
        return None;
    }
    for k in 0..3 {
        syllable_index(&word[2 * k..2 * k + 2])?;
    }
    syllable_index(&word[..2])
}

pub fn affinity(distance: usize) -> f64 {
    AFFINITY.get(distance).copied().unwrap_or(0.0)
}

/// Mean topical affinity of the words of `text` to `topic`.
pub fn topical_relevance(text: &str, topic: usize) -> f64 {
    let words = split_words(text);
    if words.is_empty() {
        return 0.0;
    }
    let total: f64 = words
        .iter()
        .map(|w| word_topic(w).map_or(0.0, |t| affinity(t.abs_diff(topic))))
        .sum();
    total / words.len() as f64
}

/// Majority topic of a query's words (smallest topic on ties).
pub fn query_topic(text: &str) -> Option<usize> {
    let mut counts = std::collections::BTreeMap::new();
    for w in split_words(text) {
        if let Some(t) = word_topic(&w) {
            *counts.entry(t).or_insert(0usize) += 1;
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(t, _)| t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TopicLayout {
    pub n_general: usize,
    pub n_topics: usize,
    pub words_per_topic: usize,
}

impl TopicLayout {
    pub fn for_vocab_size(vocab_size: usize) -> Self {
        let vocab_size = vocab_size.max(8);
        let n_general = (vocab_size / 8).max(2);
        let rest = vocab_size - n_general;
        let n_topics = (rest / WORDS_PER_TOPIC).clamp(2, MAX_TOPICS);
        TopicLayout {
            n_general,
            n_topics,
            words_per_topic: rest / n_topics,
        }
    }

    pub fn total_words(&self) -> usize {
        self.n_general + self.n_topics * self.words_per_topic
    }
}

/// Generate `n_queries` candidate sets of `docs_per_query` documents each.
pub fn generate_synthetic_corpus(
    seed: u64,
    n_queries: usize,
    docs_per_query: usize,
    vocab_size: usize,
) -> Vec<CandidateSet> {
    let layout = TopicLayout::for_vocab_size(vocab_size);
    let mut rng = seeds::rng(seeds::sub_seed(seed, seeds::CORPUS));
    let noise = Normal::new(0.0, RELEVANCE_NOISE).expect("valid normal");
    let general: Vec<String> = (0..layout.n_general).map(general_word).collect();
    let topics: Vec<Vec<String>> = (0..layout.n_topics)
        .map(|t| (0..layout.words_per_topic).map(|j| topic_word(t, j)).collect())
        .collect();

    let mut corpus = Vec::with_capacity(n_queries);
    for qi in 0..n_queries {
        let qid = format!("q{qi:04}");
        let t_q = rng.gen_range(0..layout.n_topics);
        let n_terms = rng.gen_range(3..=5).min(layout.words_per_topic);
        let terms: Vec<&String> = topics[t_q].choose_multiple(&mut rng, n_terms).collect();
        let query_text = terms
            .iter()
            .map(|s| s.as_str())
            .collect::<Vec<_>>()
            .join(" ");

        let mut docs = Vec::with_capacity(docs_per_query);
        let mut raw = Vec::with_capacity(docs_per_query);
        for di in 0..docs_per_query {
            let r: f64 = rng.gen();
            let t_d = if r < 0.35 {
                t_q
            } else if r < 0.6 {
                let up = rng.gen_bool(0.5);
                match (up, t_q) {
                    (true, t) if t + 1 < layout.n_topics => t + 1,
                    (false, t) if t > 0 => t - 1,
                    (_, t) if t + 1 < layout.n_topics => t + 1,
                    (_, t) => t.saturating_sub(1),
                }
            } else {
                rng.gen_range(0..layout.n_topics)
            };
            let purity: f64 = rng.gen_range(0.15..1.0);
            let len = rng.gen_range(8..=14);
            let words: Vec<&str> = (0..len)
                .map(|_| {
                    if rng.gen_bool(purity) {
                        topics[t_d].choose(&mut rng).expect("nonempty topic").as_str()
                    } else {
                        general.choose(&mut rng).expect("nonempty general pool").as_str()
                    }
                })
                .collect();
            let text = words.join(" ");
            raw.push(topical_relevance(&text, t_q) + noise.sample(&mut rng));
            docs.push(Document::new(format!("{qid}-d{di:02}"), text));
        }
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (d, r) in docs.iter_mut().zip(&raw) {
            let rel = if hi - lo > 1e-12 { (r - lo) / (hi - lo) } else { 1.0 };
            d.hidden_relevance = Some(rel);
        }
        corpus.push(CandidateSet {
            query: Query::new(qid, query_text),
            documents: docs,
        });
    }
    corpus
}
