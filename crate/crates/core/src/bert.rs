//! Encoder ranker with Token Selection and a Term Control Layer (TCL).
//!
//! The final score is `s = s_base + α · s_tcl`, where `s_base` reads the
//! `[CLS]` hidden state through the classification head and `s_tcl` reads the
//! `[CLS]` row of a multi-head self-attention block run over
//! `[CLS] ⊕ query ⊕ [SEP] ⊕ selected document tokens` through the *same*
//! head. The TCL can be dropped at inference time.

use std::ops::Range;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::example::{LossBreakdown, QueryExample};
use crate::nn::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::nn::transformer::{AttentionParams, LinearParams};
use crate::nn::{Gradients, Mat, ModelConfig, ParamStore, Tape, TransformerStack, Var};
use crate::ranking_loss::ranknet_loss;
use crate::seeds;
use crate::text::{TokenId, Vocabulary};

pub const KIND: &str = "rra_bert";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Dot,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BertConfig {
    /// Document tokens selected per query token.
    pub k: usize,
    pub alpha: f64,
    /// Train with the TCL branch (`s = s_base + α s_tcl`).
    pub use_tcl: bool,
    pub use_tcl_at_inference: bool,
    pub similarity: Similarity,
}

impl Default for BertConfig {
    fn default() -> Self {
        BertConfig {
            k: 3,
            alpha: 0.3,
            use_tcl: true,
            use_tcl_at_inference: false,
            similarity: Similarity::Dot,
        }
    }
}

/// Heads for the TCL block: 8 when the hidden size allows it, otherwise the
/// largest divisor of `d` not exceeding `d / 8`.
pub fn tcl_heads(d: usize) -> usize {
    if d >= 64 && d % 8 == 0 {
        return 8;
    }
    let mut h = (d / 8).clamp(1, 8);
    while d % h != 0 {
        h -= 1;
    }
    log::warn!("hidden size {d} too small for 8 TCL heads; using {h}");
    h
}

/// `[CLS] ⊕ query ⊕ [SEP] ⊕ document`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderInput {
    pub token_ids: Vec<TokenId>,
    pub query_span: Range<usize>,
    pub sep_index: usize,
    pub doc_span: Range<usize>,
    pub truncated: bool,
}

impl EncoderInput {
    /// Document tokens are truncated first; the query is never cut.
    pub fn new(
        vocab: &Vocabulary,
        query: &[TokenId],
        doc: &[TokenId],
        max_len: usize,
    ) -> Result<Self> {
        if query.is_empty() {
            return Err(Error::Input("query has no tokens".into()));
        }
        if query.len() + 2 > max_len {
            return Err(Error::Input(format!(
                "query of {} tokens does not fit max_seq_len {max_len}",
                query.len()
            )));
        }
        let room = max_len - query.len() - 2;
        let doc_len = doc.len().min(room);
        let mut token_ids = Vec::with_capacity(query.len() + doc_len + 2);
        token_ids.push(vocab.cls());
        token_ids.extend_from_slice(query);
        token_ids.push(vocab.sep());
        token_ids.extend_from_slice(&doc[..doc_len]);
        let sep_index = query.len() + 1;
        Ok(EncoderInput {
            token_ids,
            query_span: 1..sep_index,
            sep_index,
            doc_span: sep_index + 1..sep_index + 1 + doc_len,
            truncated: doc_len < doc.len(),
        })
    }

    pub fn query_ids(&self) -> &[TokenId] {
        &self.token_ids[self.query_span.clone()]
    }

    pub fn doc_ids(&self) -> &[TokenId] {
        &self.token_ids[self.doc_span.clone()]
    }
}

/// Document positions (absolute, ascending) chosen by Token Selection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSelection {
    pub selected_doc_positions: Vec<usize>,
    pub k: usize,
}

/// Top-`k` document positions per query token by word-embedding similarity,
/// unioned, with repeated token ids collapsed to their leftmost position.
/// Returned positions are relative to the document (0-based), ascending.
pub fn token_select(
    query_ids: &[TokenId],
    doc_ids: &[TokenId],
    embedding: &Mat,
    k: usize,
    similarity: Similarity,
) -> Vec<usize> {
    if query_ids.is_empty() || doc_ids.is_empty() || k == 0 {
        return Vec::new();
    }
    let row = |id: TokenId| {
        let r = embedding.row(id as usize).to_owned();
        match similarity {
            Similarity::Dot => r,
            Similarity::Cosine => {
                let n = r.dot(&r).sqrt();
                if n > 0.0 {
                    r / n
                } else {
                    r
                }
            }
        }
    };
    let doc_rows: Vec<_> = doc_ids.iter().map(|&t| row(t)).collect();
    let mut chosen = vec![false; doc_ids.len()];
    for &q in query_ids {
        let qv = row(q);
        let sims: Vec<f64> = doc_rows.iter().map(|d| qv.dot(d)).collect();
        let mut order: Vec<usize> = (0..doc_ids.len()).collect();
        order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
        for &p in order.iter().take(k) {
            chosen[p] = true;
        }
    }
    let mut seen = std::collections::HashSet::new();
    (0..doc_ids.len())
        .filter(|&p| chosen[p] && seen.insert(doc_ids[p]))
        .collect()
}

pub struct RraBert {
    pub config: BertConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    stack: TransformerStack,
    clf: LinearParams,
    tcl: AttentionParams,
    tcl_evaluations: AtomicUsize,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    bert: BertConfig,
}

impl RraBert {
    pub fn new(model: ModelConfig, config: BertConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        if model.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "model vocab_size {} differs from vocabulary size {}",
                model.vocab_size,
                vocab.len()
            )));
        }
        if config.k == 0 || !(config.alpha >= 0.0) {
            return Err(Error::Config("k must be ≥ 1 and alpha ≥ 0".into()));
        }
        let mut rng = seeds::rng(seeds::sub_seed(seed, seeds::INIT));
        let mut store = ParamStore::new();
        let stack = TransformerStack::init(&mut store, model, &mut rng)?;
        let d = model.hidden_size;
        let clf = LinearParams::init(&mut store, "clf", d, 1, &mut rng);
        let tcl = AttentionParams::init(&mut store, "tcl.attn", d, tcl_heads(d), &mut rng);
        Ok(RraBert {
            config,
            vocab,
            store,
            stack,
            clf,
            tcl,
            tcl_evaluations: AtomicUsize::new(0),
        })
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.stack.config
    }

    pub fn stack(&self) -> &TransformerStack {
        &self.stack
    }

    pub fn tcl_params(&self) -> &AttentionParams {
        &self.tcl
    }

    pub fn clf_params(&self) -> &LinearParams {
        &self.clf
    }

    /// How many times the TCL block has been evaluated.
    pub fn tcl_evaluations(&self) -> usize {
        self.tcl_evaluations.load(Ordering::Relaxed)
    }

    pub fn input(&self, query: &[TokenId], doc: &[TokenId]) -> Result<EncoderInput> {
        self.stack.check_ids(&self.store, query)?;
        self.stack.check_ids(&self.store, doc)?;
        EncoderInput::new(&self.vocab, query, doc, self.stack.config.max_seq_len)
    }

    pub fn select_tokens(&self, input: &EncoderInput) -> TokenSelection {
        let rel = token_select(
            input.query_ids(),
            input.doc_ids(),
            self.store.get(self.stack.word),
            self.config.k,
            self.config.similarity,
        );
        TokenSelection {
            selected_doc_positions: rel.into_iter().map(|p| p + input.doc_span.start).collect(),
            k: self.config.k,
        }
    }

    /// Row indices of `H_T`: `[CLS]`, query span, `[SEP]`, selected positions.
    pub fn tcl_rows(input: &EncoderInput, sel: &TokenSelection) -> Vec<usize> {
        std::iter::once(0)
            .chain(input.query_span.clone())
            .chain(std::iter::once(input.sep_index))
            .chain(sel.selected_doc_positions.iter().copied())
            .collect()
    }

    fn record_tcl<'a>(&'a self, tape: &mut Tape<'a>, last: Var, rows: &[usize]) -> Var {
        self.tcl_evaluations.fetch_add(1, Ordering::Relaxed);
        let ht = tape.rows(last, rows);
        let out = self.tcl.forward(tape, ht, false);
        tape.rows(out, &[0])
    }

    /// Record the score of one pair; returns `(s, s_base, s_tcl)`.
    pub fn record_score<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        input: &EncoderInput,
        use_tcl: bool,
        alpha: f64,
    ) -> (Var, Var, Option<Var>) {
        let out = self.stack.forward(tape, &input.token_ids, false);
        let last = out.last();
        let cls = tape.rows(last, &[0]);
        let s_base = self.clf.forward(tape, cls);
        if !use_tcl {
            return (s_base, s_base, None);
        }
        let sel = self.select_tokens(input);
        let h_tcl = self.record_tcl(tape, last, &Self::tcl_rows(input, &sel));
        let s_tcl = self.clf.forward(tape, h_tcl);
        let s = tape.lin_comb(&[(s_base, 1.0), (s_tcl, alpha)]);
        (s, s_base, Some(s_tcl))
    }

    /// TCL output at the `[CLS]` row for a given last-layer hidden matrix.
    pub fn tcl_forward(&self, h_last: &Mat, input: &EncoderInput, sel: &TokenSelection) -> Mat {
        let mut tape = Tape::new(&self.store);
        let h = tape.input(h_last.clone());
        let out = self.record_tcl(&mut tape, h, &Self::tcl_rows(input, sel));
        tape.value(out).clone()
    }

    pub fn relevance_score(
        &self,
        query: &[TokenId],
        doc: &[TokenId],
        alpha: f64,
        use_tcl: bool,
    ) -> Result<f64> {
        let input = self.input(query, doc)?;
        let mut tape = Tape::new(&self.store);
        let (s, _, _) = self.record_score(&mut tape, &input, use_tcl, alpha);
        Ok(tape.scalar(s))
    }

    /// Score with the configured inference path.
    pub fn score(&self, query: &[TokenId], doc: &[TokenId]) -> Result<f64> {
        self.relevance_score(query, doc, self.config.alpha, self.config.use_tcl_at_inference)
    }

    /// RankNet over one query's documents with graded labels.
    pub fn loss_and_grads(&self, ex: &QueryExample) -> Result<(LossBreakdown, Gradients)> {
        let inputs = ex
            .docs
            .iter()
            .map(|d| self.input(&ex.query_ids, &d.token_ids))
            .collect::<Result<Vec<_>>>()?;
        let mut tapes = Vec::with_capacity(inputs.len());
        let mut scores = Vec::with_capacity(inputs.len());
        for input in &inputs {
            let mut tape = Tape::new(&self.store);
            let (s, _, _) = self.record_score(&mut tape, input, self.config.use_tcl, self.config.alpha);
            scores.push(tape.scalar(s));
            tapes.push((tape, s));
        }
        let labels: Vec<f64> = ex.docs.iter().map(|d| d.graded).collect();
        let rn = ranknet_loss(&scores, &labels)?;
        let mut grads = Gradients::zeros_like(&self.store);
        for ((tape, s), g) in tapes.iter().zip(&rn.grad) {
            if *g != 0.0 {
                tape.backward(*s, *g, &mut grads);
            }
        }
        Ok((
            LossBreakdown {
                total: rn.loss,
                ranknet: Some(rn.loss),
                clf: None,
                gen: None,
            },
            grads,
        ))
    }

    fn meta(&self) -> serde_json::Value {
        serde_json::to_value(Meta {
            model: self.stack.config,
            bert: self.config,
        })
        .expect("serializable meta")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, KIND, self.meta(), &self.vocab, &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(KIND)?;
        let meta: Meta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| Error::ConfigMismatch(format!("bad rra_bert meta: {e}")))?;
        let mut model = RraBert::new(meta.model, meta.bert, ck.vocab.clone(), 0)?;
        ck.load_into(&mut model.store)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&read_checkpoint(path)?)
    }

    /// Load a checkpoint, requiring it to match `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let model = Self::load(path)?;
        if model.model_config() != expected {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint config {:?} differs from expected {:?}",
                model.model_config(),
                expected
            )));
        }
        Ok(model)
    }
}

impl Clone for RraBert {
    fn clone(&self) -> Self {
        RraBert {
            config: self.config,
            vocab: self.vocab.clone(),
            store: self.store.clone(),
            stack: self.stack.clone(),
            clf: self.clf.clone(),
            tcl: self.tcl.clone(),
            tcl_evaluations: AtomicUsize::new(0),
        }
    }
}
