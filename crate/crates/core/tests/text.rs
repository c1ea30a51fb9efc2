use std::collections::{BTreeSet, HashMap};

use ndarray::Array2;
use proptest::prelude::*;
use rankdistill::nn::tape::{attention, softmax_rows};
use rankdistill::nn::{ModelConfig, ParamStore, TransformerStack};
use rankdistill::synthetic::{generate_synthetic_corpus, query_topic, topical_relevance};
use rankdistill::text::*;

fn word() -> impl Strategy<Value = String> {
    "[a-z]{1,6}"
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn tokenize_round_trips_in_vocabulary_text(words in prop::collection::vec(word(), 1..20), seps in prop::collection::vec("[ ,.!?;:]{1,3}", 20)) {
        let vocab = build_vocabulary([words.join(" ").as_str()], 100).unwrap();
        vocab.check_invariants().unwrap();
        let mut text = String::new();
        for (w, s) in words.iter().zip(&seps) {
            text.push_str(&w.to_uppercase());
            text.push_str(s);
        }
        let ids = tokenize(&text, &vocab);
        prop_assert_eq!(ids.len(), words.len());
        prop_assert!(!ids.contains(&vocab.unk()));
        let back = vocab.detokenize(&ids);
        prop_assert_eq!(&back, &words.join(" "));
        prop_assert_eq!(tokenize(&back, &vocab), ids);
    }

    #[test]
    fn vocabulary_maps_are_inverse(texts in prop::collection::vec(prop::collection::vec(word(), 0..12), 1..8), max in 5usize..60) {
        let joined: Vec<String> = texts.iter().map(|t| t.join(" ")).collect();
        let vocab = build_vocabulary(joined.iter().map(String::as_str), max).unwrap();
        prop_assert!(vocab.len() <= max);
        for (i, t) in vocab.tokens().iter().enumerate() {
            prop_assert_eq!(vocab.id(t), Some(i as TokenId));
            prop_assert_eq!(vocab.token(i as TokenId), Some(t.as_str()));
        }
        let specials: BTreeSet<TokenId> = vocab.special_ids().into_iter().collect();
        prop_assert_eq!(specials.len(), BASE_SPECIALS.len());
    }

    #[test]
    fn corpus_generation_is_reproducible(seed in any::<u64>(), nq in 1usize..5, nd in 2usize..12, vs in 40usize..400) {
        let a = generate_synthetic_corpus(seed, nq, nd, vs);
        let b = generate_synthetic_corpus(seed, nq, nd, vs);
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        prop_assert_eq!(a.len(), nq);
        let qids: BTreeSet<&str> = a.iter().map(|c| c.query.id.as_str()).collect();
        prop_assert_eq!(qids.len(), nq);
        for set in &a {
            prop_assert_eq!(set.documents.len(), nd);
            set.validate().unwrap();
            let rels: Vec<f64> = set.documents.iter().map(|d| d.hidden_relevance.unwrap()).collect();
            prop_assert!(rels.iter().all(|r| (0.0..=1.0).contains(r)));
            prop_assert!(rels.iter().cloned().fold(f64::INFINITY, f64::min) <= 0.05);
            prop_assert!(rels.iter().cloned().fold(f64::NEG_INFINITY, f64::max) >= 0.95);
        }
    }

    #[test]
    fn softmax_and_attention_rows_sum_to_one(
        n in 1usize..7,
        vals in prop::collection::vec(-8.0f64..8.0, 72),
        causal in any::<bool>(),
    ) {
        let q = Array2::from_shape_fn((n, n), |(i, j)| vals[i * n + j]);
        let k = Array2::from_shape_fn((n, n), |(i, j)| vals[36 + i * n + j]);
        // With identity values the output rows are the attention weights.
        let out = attention(&q, &k, &Array2::eye(n), 1, causal);
        for (i, row) in out.rows().into_iter().enumerate() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-6);
            if causal {
                prop_assert!(row.iter().skip(i + 1).all(|p| *p == 0.0));
            }
        }
        let mut m = q.clone();
        softmax_rows(&mut m);
        prop_assert!(m.rows().into_iter().all(|r| (r.sum() - 1.0).abs() < 1e-6 && r.iter().all(|p| *p >= 0.0)));
    }
}

#[test]
fn vocabulary_size_matches_a_frequency_count() {
    let corpus = generate_synthetic_corpus(11, 120, 20, 3000);
    let tokens: usize = corpus_texts(&corpus).map(|t| split_words(t).len()).sum();
    assert!(tokens >= 10_000);
    let mut freq: HashMap<String, usize> = HashMap::new();
    for t in corpus_texts(&corpus) {
        for w in split_words(t) {
            *freq.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(usize, String)> = freq.into_iter().map(|(w, c)| (c, w)).collect();
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    assert!(ranked.len() > 1000);
    let vocab = build_vocabulary(corpus_texts(&corpus), 1000).unwrap();
    assert_eq!(vocab.len(), 1000);
    let kept: BTreeSet<&str> = vocab.tokens()[BASE_SPECIALS.len()..].iter().map(String::as_str).collect();
    let want: BTreeSet<&str> = ranked[..1000 - BASE_SPECIALS.len()].iter().map(|(_, w)| w.as_str()).collect();
    assert_eq!(kept, want);
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &x in &idx[i..=j] {
            r[x] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

#[test]
fn term_overlap_correlates_with_hidden_relevance() {
    let corpus = generate_synthetic_corpus(1, 100, 50, 200);
    let mut total = 0.0;
    for set in &corpus {
        let q: BTreeSet<String> = split_words(&set.query.text).into_iter().collect();
        let overlap: Vec<f64> = set
            .documents
            .iter()
            .map(|d| split_words(&d.text).iter().filter(|w| q.contains(*w)).count() as f64)
            .collect();
        let rel: Vec<f64> = set.documents.iter().map(|d| d.hidden_relevance.unwrap()).collect();
        total += spearman(&overlap, &rel);
    }
    assert!(total / corpus.len() as f64 > 0.0);
}

#[test]
fn hidden_relevance_follows_topic_affinity() {
    let corpus = generate_synthetic_corpus(2, 20, 30, 300);
    for set in &corpus {
        let t = query_topic(&set.query.text).unwrap();
        let raw: Vec<f64> = set.documents.iter().map(|d| topical_relevance(&d.text, t)).collect();
        let rel: Vec<f64> = set.documents.iter().map(|d| d.hidden_relevance.unwrap()).collect();
        assert!(spearman(&raw, &rel) > 0.8);
    }
}

#[test]
fn forward_passes_are_deterministic() {
    let mut store = ParamStore::new();
    let cfg = ModelConfig::toy(40);
    let mut rng = rankdistill::seeds::rng(3);
    let stack = TransformerStack::init(&mut store, cfg, &mut rng).unwrap();
    let ids: Vec<TokenId> = (0..20).map(|i| (i * 7 % 40) as TokenId).collect();
    for causal in [false, true] {
        let a = stack.hidden_states(&store, &ids, causal).unwrap();
        let b = stack.hidden_states(&store, &ids, causal).unwrap();
        assert_eq!(a.layers, b.layers);
        assert_eq!(a.layers.len(), cfg.n_layers + 1);
    }
}

#[test]
fn corpus_jsonl_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_synthetic_corpus(4, 3, 5, 100);
    let p = dir.path().join("c.jsonl");
    write_corpus_jsonl(&p, &corpus).unwrap();
    let first = std::fs::read(&p).unwrap();
    assert_eq!(read_corpus_jsonl(&p).unwrap(), corpus);
    write_corpus_jsonl(&p, &read_corpus_jsonl(&p).unwrap()).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), first);
}
