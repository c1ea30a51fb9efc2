//! Brute-force reference implementations.

use std::collections::BTreeSet;

use ndarray::Array2;
use rankdistill::text::TokenId;

pub fn brute_ndcg(rels: &[f64], k: usize) -> f64 {
    let mut dcg = 0.0;
    for r in 1..=k.min(rels.len()) {
        dcg += (2f64.powf(rels[r - 1]) - 1.0) / ((r + 1) as f64).ln() * std::f64::consts::LN_2;
    }
    let mut ideal = rels.to_vec();
    // selection sort, descending
    for i in 0..ideal.len() {
        let mut best = i;
        for j in i + 1..ideal.len() {
            if ideal[j] > ideal[best] {
                best = j;
            }
        }
        ideal.swap(i, best);
    }
    let mut idcg = 0.0;
    for r in 1..=k.min(ideal.len()) {
        idcg += (2f64.powf(ideal[r - 1]) - 1.0) / ((r + 1) as f64).ln() * std::f64::consts::LN_2;
    }
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

pub fn brute_ranknet(s: &[f64], y: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] > y[j] {
                total += (1.0 + (-(s[i] - s[j])).exp()).ln();
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Okapi BM25 straight from the textbook formula over whitespace tokens.
pub fn brute_bm25(query: &[String], doc: &[String], pool: &[Vec<String>]) -> f64 {
    let n = pool.len() as f64;
    let avgdl = pool.iter().map(|d| d.len() as f64).sum::<f64>() / n;
    let mut score = 0.0;
    for t in query {
        let f = doc.iter().filter(|w| *w == t).count() as f64;
        let df = pool.iter().filter(|d| d.contains(t)).count() as f64;
        let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
        score += idf * f * 2.2 / (f + 1.2 * (0.25 + 0.75 * doc.len() as f64 / avgdl));
    }
    score
}

/// Position `p` is in a query row's top-k iff fewer than `k` positions beat
/// it under (higher similarity, then smaller position).
pub fn brute_select(q: &[TokenId], d: &[TokenId], emb: &Array2<f64>, k: usize) -> Vec<usize> {
    let sim = |a: TokenId, b: TokenId| -> f64 {
        (0..emb.ncols()).map(|c| emb[[a as usize, c]] * emb[[b as usize, c]]).sum()
    };
    let mut picked = BTreeSet::new();
    for &qt in q {
        for p in 0..d.len() {
            let sp = sim(qt, d[p]);
            let better = (0..d.len())
                .filter(|&o| {
                    let so = sim(qt, d[o]);
                    so > sp || (so == sp && o < p)
                })
                .count();
            if better < k {
                picked.insert(p);
            }
        }
    }
    let mut out = Vec::new();
    for p in picked {
        if !out.iter().any(|&o: &usize| d[o] == d[p]) {
            out.push(p);
        }
    }
    out
}
