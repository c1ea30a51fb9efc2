//! Decoder ranker: a causal transformer with four special tokens, a dense
//! ranking layer reading the `<|Response|>` hidden state, and a joint
//! objective `L = L_gen + L_RankNet(MinMax(S)) + L_clf`.
//!
//! Training prompt layout:
//!
//! ```text
//! query {q} document {d} <|Response|> <|Relevant|>|<|Irrelevant|> <|Reason|> {reasoning}
//! ```
//!
//! The inference prompt stops at `<|Response|>`, whose position both feeds the
//! ranking layer and predicts the label token.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::example::{LossBreakdown, QueryExample};
use crate::nn::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::nn::tape::softplus;
use crate::nn::transformer::LinearParams;
use crate::nn::{Gradients, Mat, ModelConfig, ParamStore, Tape, TransformerStack, Var};
use crate::ranking_loss::{min_max_backward, min_max_scale, ranknet_loss};
use crate::seeds;
use crate::text::{tokenize, TokenId, Vocabulary, IRRELEVANT, REASON, RELEVANT, RESPONSE};

pub const KIND: &str = "rra_gpt";

/// Plain words every decoder vocabulary needs: prompt scaffolding, the
/// special-token source words and the reasoning template vocabulary.
pub const PROMPT_WORDS: [&str; 13] = [
    "query",
    "document",
    "relevant",
    "irrelevant",
    "response",
    "reason",
    "shares",
    "terms",
    "no",
    "shared",
    "related",
    "topic",
    "only",
];

pub fn extend_vocab_for_prompts(vocab: &mut Vocabulary) {
    for w in PROMPT_WORDS {
        vocab.add_token(w);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tasks {
    pub gen: bool,
    pub clf: bool,
    pub rank: bool,
}

impl Tasks {
    pub const ALL: Tasks = Tasks {
        gen: true,
        clf: true,
        rank: true,
    };
    pub const GEN_ONLY: Tasks = Tasks {
        gen: true,
        clf: false,
        rank: false,
    };
    pub const RANK_ONLY: Tasks = Tasks {
        gen: false,
        clf: false,
        rank: true,
    };

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.gen {
            parts.push("gen");
        }
        if self.clf {
            parts.push("clf");
        }
        if self.rank {
            parts.push("rank");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RankingInput {
    #[default]
    Response,
    Reason,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GptConfig {
    pub tasks: Tasks,
    pub reasoning: bool,
    pub ranking_layer_input: RankingInput,
    /// Restrict the generation loss to tokens after `<|Response|>`.
    pub mask_prompt: bool,
}

impl Default for GptConfig {
    fn default() -> Self {
        GptConfig {
            tasks: Tasks::ALL,
            reasoning: true,
            ranking_layer_input: RankingInput::Response,
            mask_prompt: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub relevant: TokenId,
    pub irrelevant: TokenId,
    pub response: TokenId,
    pub reason: TokenId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptedExample {
    pub ids: Vec<TokenId>,
    pub response_index: usize,
    pub reason_index: Option<usize>,
    /// `<|Relevant|>` or `<|Irrelevant|>` (training form only).
    pub label_target_id: Option<TokenId>,
    pub y: Option<u8>,
}

/// Two-way softmax over the label logits: `(p_rel, p_irrel)`.
pub fn label_probabilities(z_rel: f64, z_irrel: f64) -> (f64, f64) {
    let p_rel = crate::nn::tape::sigmoid(z_rel - z_irrel);
    (p_rel, 1.0 - p_rel)
}

/// Binary cross-entropy of `y` against the two-way label softmax, and the
/// predicted class (1 iff `p_rel > p_irrel`).
pub fn label_cross_entropy(z_rel: f64, z_irrel: f64, y: u8) -> (f64, u8) {
    let margin = z_rel - z_irrel;
    let loss = if y == 1 {
        softplus(-margin)
    } else {
        softplus(margin)
    };
    (loss, u8::from(margin > 0.0))
}

pub struct RraGpt {
    pub config: GptConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    stack: TransformerStack,
    lm: LinearParams,
    ranking: LinearParams,
    specials: Option<SpecialTokens>,
    generation_steps: AtomicUsize,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    gpt: GptConfig,
    specials: Option<SpecialTokens>,
}

/// Per-document vars recorded for the joint objective.
struct DocTerms {
    score: Option<Var>,
    clf: Option<Var>,
    gen: Option<Var>,
}

impl RraGpt {
    /// A decoder over `vocab` without special tokens (the "vanilla" model).
    pub fn new_base(model: ModelConfig, config: GptConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        if model.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "model vocab_size {} differs from vocabulary size {}",
                model.vocab_size,
                vocab.len()
            )));
        }
        let mut rng = seeds::rng(seeds::sub_seed(seed, seeds::INIT));
        let mut store = ParamStore::new();
        let stack = TransformerStack::init(&mut store, model, &mut rng)?;
        let d = model.hidden_size;
        let lm = LinearParams::init(&mut store, "lm", d, model.vocab_size, &mut rng);
        let ranking = LinearParams::init(&mut store, "rank", d, 1, &mut rng);
        Ok(RraGpt {
            config,
            vocab,
            store,
            stack,
            lm,
            ranking,
            specials: None,
            generation_steps: AtomicUsize::new(0),
        })
    }

    /// Base model plus registered special tokens, ready for training.
    pub fn new(model: ModelConfig, config: GptConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let mut m = Self::new_base(model, config, vocab, seed)?;
        m.register_special_tokens();
        Ok(m)
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.stack.config
    }

    pub fn stack(&self) -> &TransformerStack {
        &self.stack
    }

    pub fn lm_params(&self) -> &LinearParams {
        &self.lm
    }

    pub fn ranking_params(&self) -> &LinearParams {
        &self.ranking
    }

    pub fn specials(&self) -> Option<SpecialTokens> {
        self.specials
    }

    /// Autoregressive decoding steps performed so far.
    pub fn generation_steps(&self) -> usize {
        self.generation_steps.load(Ordering::Relaxed)
    }

    /// Append the four special tokens, initializing each embedding row (and
    /// LM-head column) from its source word. Idempotent.
    pub fn register_special_tokens(&mut self) -> SpecialTokens {
        if let Some(s) = self.specials {
            return s;
        }
        let sources = [
            (RELEVANT, "relevant"),
            (IRRELEVANT, "irrelevant"),
            (RESPONSE, "response"),
            (REASON, "reason"),
        ];
        let d = self.stack.config.hidden_size;
        let mut new_rows = Array2::zeros((sources.len(), d));
        let mut new_cols = Array2::zeros((d, sources.len()));
        let mut new_bias = Array2::zeros((1, sources.len()));
        {
            let emb = self.store.get(self.stack.word);
            let lw = self.store.get(self.lm.w);
            let lb = self.store.get(self.lm.b);
            for (i, (special, word)) in sources.iter().enumerate() {
                let ids = tokenize(word, &self.vocab);
                if ids.contains(&self.vocab.unk()) {
                    log::warn!("source word `{word}` for {special} is out of vocabulary; using <unk>");
                }
                let n = ids.len() as f64;
                for &id in &ids {
                    let id = id as usize;
                    new_rows.row_mut(i).scaled_add(1.0 / n, &emb.row(id));
                    new_cols.column_mut(i).scaled_add(1.0 / n, &lw.column(id));
                    new_bias[[0, i]] += lb[[0, id]] / n;
                }
            }
        }
        self.stack.grow_vocab(&mut self.store, &new_rows);
        let lw = self.store.get(self.lm.w);
        let lw = ndarray::concatenate(Axis(1), &[lw.view(), new_cols.view()]).expect("same rows");
        self.store.set(self.lm.w, lw);
        let lb = self.store.get(self.lm.b);
        let lb = ndarray::concatenate(Axis(1), &[lb.view(), new_bias.view()]).expect("same rows");
        self.store.set(self.lm.b, lb);
        let ids: Vec<TokenId> = sources.iter().map(|(s, _)| self.vocab.add_token(s)).collect();
        let specials = SpecialTokens {
            relevant: ids[0],
            irrelevant: ids[1],
            response: ids[2],
            reason: ids[3],
        };
        self.specials = Some(specials);
        specials
    }

    fn word(&self, w: &str) -> TokenId {
        self.vocab.id(w).unwrap_or_else(|| self.vocab.unk())
    }

    /// Token id closing the inference prompt: `<|Response|>` once registered,
    /// the plain word `response` on a vanilla model.
    fn response_token(&self) -> TokenId {
        self.specials.map_or_else(|| self.word("response"), |s| s.response)
    }

    /// Assemble a prompt. With `label = None` the inference form (ending at
    /// `<|Response|>`) is produced. Document tokens are truncated first.
    pub fn build_prompt(
        &self,
        query: &[TokenId],
        doc: &[TokenId],
        label: Option<u8>,
        reasoning: Option<&[TokenId]>,
    ) -> Result<PromptedExample> {
        if query.is_empty() || doc.is_empty() {
            return Err(Error::Input("prompt needs a nonempty query and document".into()));
        }
        let max = self.stack.config.max_seq_len;
        let reasoning = reasoning.filter(|_| self.config.reasoning);
        let want_reason_token =
            reasoning.is_some() || self.config.ranking_layer_input == RankingInput::Reason;
        let tail = match label {
            None => 1,
            Some(_) => 2 + usize::from(want_reason_token) + reasoning.map_or(0, <[TokenId]>::len),
        };
        let fixed = 2 + query.len() + tail;
        if fixed >= max {
            return Err(Error::Input(format!(
                "prompt scaffolding of {fixed} tokens leaves no room for the document (max {max})"
            )));
        }
        let doc = &doc[..doc.len().min(max - fixed)];
        let mut ids = Vec::with_capacity(fixed + doc.len());
        ids.push(self.word("query"));
        ids.extend_from_slice(query);
        ids.push(self.word("document"));
        ids.extend_from_slice(doc);
        let response_index = ids.len();
        ids.push(self.response_token());
        let mut ex = PromptedExample {
            ids,
            response_index,
            reason_index: None,
            label_target_id: None,
            y: label,
        };
        if let Some(y) = label {
            let sp = self
                .specials
                .ok_or_else(|| Error::Input("training prompts need registered special tokens".into()))?;
            let target = if y == 1 { sp.relevant } else { sp.irrelevant };
            ex.ids.push(target);
            ex.label_target_id = Some(target);
            if want_reason_token {
                ex.reason_index = Some(ex.ids.len());
                ex.ids.push(sp.reason);
                if let Some(r) = reasoning {
                    ex.ids.extend_from_slice(r);
                }
            }
        }
        Ok(ex)
    }

    fn ranking_index(&self, ex: &PromptedExample) -> Result<usize> {
        match self.config.ranking_layer_input {
            RankingInput::Response => Ok(ex.response_index),
            RankingInput::Reason => ex
                .reason_index
                .ok_or_else(|| Error::Input("prompt has no <|Reason|> position".into())),
        }
    }

    fn label_ids(&self, vanilla_words: bool) -> (TokenId, TokenId) {
        match (vanilla_words, self.specials) {
            (false, Some(s)) => (s.relevant, s.irrelevant),
            _ => (self.word("relevant"), self.word("irrelevant")),
        }
    }

    fn record_terms<'a>(&'a self, tape: &mut Tape<'a>, ex: &PromptedExample, tasks: Tasks) -> Result<DocTerms> {
        let out = self.stack.forward(tape, &ex.ids, true);
        let last = out.last();
        let score = if tasks.rank {
            let idx = self.ranking_index(ex)?;
            let h = tape.rows(last, &[idx]);
            Some(self.ranking.forward(tape, h))
        } else {
            None
        };
        let clf = if tasks.clf {
            let y = ex.y.ok_or_else(|| Error::Input("classification needs a label".into()))?;
            let (rel, irrel) = self.label_ids(false);
            let h = tape.rows(last, &[ex.response_index]);
            let z = self.lm.forward(tape, h);
            let zr = tape.pick(z, 0, rel as usize);
            let zi = tape.pick(z, 0, irrel as usize);
            let margin = if y == 1 { tape.sub(zi, zr) } else { tape.sub(zr, zi) };
            Some(tape.softplus(margin))
        } else {
            None
        };
        let gen = if tasks.gen {
            if ex.ids.len() < 2 {
                return Err(Error::Input("generation loss needs at least two tokens".into()));
            }
            let first_target = if self.config.mask_prompt {
                ex.response_index + 1
            } else {
                1
            };
            let targets: Vec<(usize, usize)> = (first_target.max(1)..ex.ids.len())
                .map(|t| (t - 1, ex.ids[t] as usize))
                .collect();
            if targets.is_empty() {
                None
            } else {
                let z = self.lm.forward(tape, last);
                Some(tape.cross_entropy(z, &targets))
            }
        } else {
            None
        };
        Ok(DocTerms { score, clf, gen })
    }

    /// Last-layer hidden states of a causal pass over `ids`.
    pub fn last_hidden(&self, ids: &[TokenId]) -> Result<Mat> {
        Ok(self.stack.decoder_forward(&self.store, ids)?.last().clone())
    }

    /// Logits of the LM head for every position.
    pub fn lm_head(&self, h_last: &Mat) -> Mat {
        self.lm.apply(&self.store, h_last)
    }

    /// Ranking-layer score of one prompt.
    pub fn ranking_layer_score(&self, ex: &PromptedExample) -> Result<f64> {
        let idx = self.ranking_index(ex)?;
        if idx >= ex.ids.len() {
            return Err(Error::Input(format!("ranking index {idx} out of range")));
        }
        let h = self.last_hidden(&ex.ids)?;
        let row = h.slice(s![idx..idx + 1, ..]).to_owned();
        Ok(self.ranking.apply(&self.store, &row)[[0, 0]])
    }

    /// `(L_clf, predicted class)` at the `<|Response|>` position.
    pub fn classification_loss(&self, ex: &PromptedExample) -> Result<(f64, u8)> {
        let y = ex.y.ok_or_else(|| Error::Input("classification needs a label".into()))?;
        let (zr, zi) = self.label_logits(&ex.ids, ex.response_index, false)?;
        Ok(label_cross_entropy(zr, zi, y))
    }

    /// Mean next-token cross-entropy over the sequence.
    pub fn generation_loss(&self, ex: &PromptedExample) -> Result<f64> {
        let mut tape = Tape::new(&self.store);
        let terms = self.record_terms(&mut tape, ex, Tasks::GEN_ONLY)?;
        Ok(terms.gen.map_or(0.0, |v| tape.scalar(v)))
    }

    fn label_logits(&self, ids: &[TokenId], pos: usize, vanilla_words: bool) -> Result<(f64, f64)> {
        let h = self.last_hidden(ids)?;
        let row = h.slice(s![pos..pos + 1, ..]).to_owned();
        let z = self.lm_head(&row);
        let (rel, irrel) = self.label_ids(vanilla_words);
        Ok((z[[0, rel as usize]], z[[0, irrel as usize]]))
    }

    /// `p_rel − p_irrel` at the response position of the inference prompt.
    /// `vanilla_words` reads the plain `relevant` / `irrelevant` logits.
    pub fn label_margin_score(&self, query: &[TokenId], doc: &[TokenId], vanilla_words: bool) -> Result<f64> {
        let ex = self.build_prompt(query, doc, None, None)?;
        let (zr, zi) = self.label_logits(&ex.ids, ex.response_index, vanilla_words)?;
        let (pr, pi) = label_probabilities(zr, zi);
        Ok(pr - pi)
    }

    /// Greedy one-token decode of the label, restricted to the two label tokens.
    pub fn generate_label(&self, query: &[TokenId], doc: &[TokenId]) -> Result<u8> {
        self.generation_steps.fetch_add(1, Ordering::Relaxed);
        let ex = self.build_prompt(query, doc, None, None)?;
        let (zr, zi) = self.label_logits(&ex.ids, ex.response_index, false)?;
        Ok(u8::from(zr > zi))
    }

    /// Relevance score on the deployed inference path: the ranking layer
    /// when it was trained, otherwise `p_rel − p_irrel`.
    pub fn score(&self, query: &[TokenId], doc: &[TokenId]) -> Result<f64> {
        self.stack.check_ids(&self.store, query)?;
        self.stack.check_ids(&self.store, doc)?;
        if !self.config.tasks.rank {
            return self.label_margin_score(query, doc, false);
        }
        match self.config.ranking_layer_input {
            RankingInput::Response => {
                let ex = self.build_prompt(query, doc, None, None)?;
                self.ranking_layer_score(&ex)
            }
            RankingInput::Reason => {
                // <|Reason|> only exists after the label has been generated.
                let y = self.generate_label(query, doc)?;
                let ex = self.build_prompt(query, doc, Some(y), None)?;
                self.ranking_layer_score(&ex)
            }
        }
    }

    /// Joint objective over one query's documents, with gradients.
    pub fn loss_and_grads(&self, ex: &QueryExample) -> Result<(LossBreakdown, Gradients)> {
        self.joint_loss(ex, self.config.tasks)
    }

    /// Joint objective under an explicit task selection. Each term is a mean
    /// over documents except RankNet, which is already a mean over pairs.
    pub fn joint_loss(&self, ex: &QueryExample, mut tasks: Tasks) -> Result<(LossBreakdown, Gradients)> {
        let n = ex.docs.len();
        if n == 0 {
            return Err(Error::Input(format!("query {} has no documents", ex.query_id)));
        }
        if tasks.rank && n < 2 {
            log::warn!("query {} has one document; skipping the RankNet term", ex.query_id);
            tasks.rank = false;
        }
        let mut tapes = Vec::with_capacity(n);
        for d in &ex.docs {
            let prompt =
                self.build_prompt(&ex.query_ids, &d.token_ids, Some(d.binary), Some(&d.reasoning_ids))?;
            let mut tape = Tape::new(&self.store);
            let terms = self.record_terms(&mut tape, &prompt, tasks)?;
            tapes.push((tape, terms));
        }
        let inv_n = 1.0 / n as f64;
        let mut breakdown = LossBreakdown::default();
        let mut rank_seeds = vec![0.0; n];
        if tasks.rank {
            let scores: Vec<f64> = tapes
                .iter()
                .map(|(t, terms)| t.scalar(terms.score.expect("rank term recorded")))
                .collect();
            let labels: Vec<f64> = ex.docs.iter().map(|d| d.graded).collect();
            let rn = ranknet_loss(&min_max_scale(&scores), &labels)?;
            rank_seeds = min_max_backward(&scores, &rn.grad);
            breakdown.ranknet = Some(rn.loss);
        }
        let mean_of = |pick: fn(&DocTerms) -> Option<Var>| -> f64 {
            tapes
                .iter()
                .map(|(t, terms)| pick(terms).map_or(0.0, |v| t.scalar(v)))
                .sum::<f64>()
                * inv_n
        };
        if tasks.clf {
            breakdown.clf = Some(mean_of(|t| t.clf));
        }
        if tasks.gen {
            breakdown.gen = Some(mean_of(|t| t.gen));
        }
        breakdown.total =
            breakdown.gen.unwrap_or(0.0) + breakdown.ranknet.unwrap_or(0.0) + breakdown.clf.unwrap_or(0.0);

        let mut grads = Gradients::zeros_like(&self.store);
        for ((tape, terms), rs) in tapes.iter_mut().zip(rank_seeds) {
            let mut parts = Vec::with_capacity(3);
            if let Some(s) = terms.score {
                parts.push((s, rs));
            }
            if let Some(c) = terms.clf {
                parts.push((c, inv_n));
            }
            if let Some(g) = terms.gen {
                parts.push((g, inv_n));
            }
            if parts.is_empty() {
                continue;
            }
            let root = tape.lin_comb(&parts);
            tape.backward(root, 1.0, &mut grads);
        }
        Ok((breakdown, grads))
    }

    fn meta(&self) -> serde_json::Value {
        serde_json::to_value(Meta {
            model: self.stack.config,
            gpt: self.config,
            specials: self.specials,
        })
        .expect("serializable meta")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, KIND, self.meta(), &self.vocab, &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(KIND)?;
        let meta: Meta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| Error::ConfigMismatch(format!("bad rra_gpt meta: {e}")))?;
        let mut model = RraGpt::new_base(meta.model, meta.gpt, ck.vocab.clone(), 0)?;
        if let Some(sp) = meta.specials {
            let names = [(sp.relevant, RELEVANT), (sp.irrelevant, IRRELEVANT), (sp.response, RESPONSE), (sp.reason, REASON)];
            if names.iter().any(|&(id, name)| model.vocab.id(name) != Some(id)) {
                return Err(Error::ConfigMismatch("special-token ids disagree with the vocabulary".into()));
            }
            model.specials = Some(sp);
        }
        ck.load_into(&mut model.store)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&read_checkpoint(path)?)
    }
}


impl Clone for RraGpt {
    fn clone(&self) -> Self {
        RraGpt {
            config: self.config,
            vocab: self.vocab.clone(),
            store: self.store.clone(),
            stack: self.stack.clone(),
            lm: self.lm.clone(),
            ranking: self.ranking.clone(),
            specials: self.specials,
            generation_steps: AtomicUsize::new(0),
        }
    }
}
