#![allow(dead_code)]

pub mod oracles;

use rankdistill::example::{ExampleDoc, QueryExample};
use rankdistill::gpt::extend_vocab_for_prompts;
use rankdistill::text::{build_vocabulary, corpus_texts, tokenize, TokenId, Vocabulary};
use rankdistill::synthetic::generate_synthetic_corpus;

/// Vocabulary of a small synthetic corpus, plus the prompt words.
pub fn toy_vocab() -> Vocabulary {
    let corpus = generate_synthetic_corpus(3, 6, 10, 120);
    let mut v = build_vocabulary(corpus_texts(&corpus), 80).unwrap();
    extend_vocab_for_prompts(&mut v);
    v
}

pub fn ids(vocab: &Vocabulary, text: &str) -> Vec<TokenId> {
    tokenize(text, vocab)
}

/// A query with four labeled documents taken from the vocabulary itself.
pub fn toy_example(vocab: &Vocabulary) -> QueryExample {
    let words: Vec<&str> = vocab.tokens()[4..].iter().map(String::as_str).collect();
    let text = |from: usize, n: usize| -> Vec<TokenId> {
        (0..n).map(|i| vocab.id(words[(from + i * 7) % words.len()]).unwrap()).collect()
    };
    let shares = ids(vocab, "relevant shares terms");
    let none = ids(vocab, "irrelevant no shared terms");
    let docs = vec![
        ExampleDoc { id: "a".into(), token_ids: text(0, 6), graded: 1.9, binary: 1, reasoning_ids: shares.clone() },
        ExampleDoc { id: "b".into(), token_ids: text(3, 5), graded: 1.8, binary: 1, reasoning_ids: shares },
        ExampleDoc { id: "c".into(), token_ids: text(11, 7), graded: 0.17, binary: 0, reasoning_ids: none.clone() },
        ExampleDoc { id: "d".into(), token_ids: text(20, 4), graded: 0.0, binary: 0, reasoning_ids: none },
    ];
    QueryExample { query_id: "q".into(), query_ids: text(0, 3), docs }
}
