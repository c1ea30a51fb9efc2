//! End-to-end wiring: run configuration, data preparation, training of both
//! rankers, and corpus-level ranking.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bert::{BertConfig, RraBert, Similarity};
use crate::error::{Error, Result};
use crate::evaluation::{bm25_rank, Bm25Params, Run, Scorer};
use crate::example::QueryExample;
use crate::gpt::{extend_vocab_for_prompts, GptConfig, RankingInput, RraGpt, Tasks};
use crate::labelgen::RankingLabel;
use crate::nn::ModelConfig;
use crate::seeds;
use crate::text::{build_vocabulary, corpus_texts, document_index, tokenize, CandidateSet, Vocabulary};
use crate::training::{examples_from_labels, split_dataset, train, TrainConfig, TrainReport, ValidationSet};

/// Flat key-value run configuration (TOML). Unset training keys fall back to
/// the encoder or decoder defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Corpus the dataset's document ids refer to.
    pub corpus: Option<PathBuf>,
    pub max_vocab: usize,
    pub hidden_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub ffn_multiplier: usize,

    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub validate_every: Option<usize>,
    pub patience: Option<usize>,
    pub train_fraction: Option<f64>,
    pub max_steps: Option<usize>,

    pub k: usize,
    pub alpha: f64,
    pub use_tcl: bool,
    pub use_tcl_at_inference: bool,
    pub similarity: Similarity,
    /// Train on labeler-excluded documents as hard negatives.
    pub use_excluded: bool,

    pub gen: bool,
    pub clf: bool,
    pub rank: bool,
    pub reasoning: bool,
    pub ranking_layer_input: RankingInput,
    pub mask_prompt: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::toy(0);
        let b = BertConfig::default();
        let g = GptConfig::default();
        RunConfig {
            corpus: None,
            max_vocab: 2000,
            hidden_size: m.hidden_size,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            max_seq_len: m.max_seq_len,
            ffn_multiplier: m.ffn_multiplier,
            learning_rate: None,
            weight_decay: None,
            validate_every: None,
            patience: None,
            train_fraction: None,
            max_steps: None,
            k: b.k,
            alpha: b.alpha,
            use_tcl: b.use_tcl,
            use_tcl_at_inference: b.use_tcl_at_inference,
            similarity: b.similarity,
            use_excluded: true,
            gen: g.tasks.gen,
            clf: g.tasks.clf,
            rank: g.tasks.rank,
            reasoning: g.reasoning,
            ranking_layer_input: g.ranking_layer_input,
            mask_prompt: g.mask_prompt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankerKind {
    Encoder,
    Decoder,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // Relative corpus paths are relative to the config file.
        if let (Some(c), Some(dir)) = (&cfg.corpus, path.parent()) {
            if c.is_relative() {
                cfg.corpus = Some(dir.join(c));
            }
        }
        Ok(cfg)
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            hidden_size: self.hidden_size,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_seq_len: self.max_seq_len,
            ffn_multiplier: self.ffn_multiplier,
        }
    }

    pub fn bert_config(&self) -> BertConfig {
        BertConfig {
            k: self.k,
            alpha: self.alpha,
            use_tcl: self.use_tcl,
            use_tcl_at_inference: self.use_tcl_at_inference,
            similarity: self.similarity,
        }
    }

    pub fn gpt_config(&self) -> GptConfig {
        GptConfig {
            tasks: Tasks {
                gen: self.gen,
                clf: self.clf,
                rank: self.rank,
            },
            reasoning: self.reasoning,
            ranking_layer_input: self.ranking_layer_input,
            mask_prompt: self.mask_prompt,
        }
    }

    pub fn train_config(&self, kind: RankerKind, seed: u64) -> TrainConfig {
        let d = match kind {
            RankerKind::Encoder => TrainConfig::encoder_default(),
            RankerKind::Decoder => TrainConfig::decoder_default(),
        };
        TrainConfig {
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            validate_every: self.validate_every.unwrap_or(d.validate_every),
            patience: self.patience.unwrap_or(d.patience),
            train_fraction: self.train_fraction.unwrap_or(d.train_fraction),
            max_steps: self.max_steps.unwrap_or(d.max_steps),
            seed,
        }
    }
}

/// Split off a seeded fraction of queries as a test set: `(rest, test)`.
pub fn holdout_split(corpus: &[CandidateSet], test_fraction: f64, seed: u64) -> (Vec<CandidateSet>, Vec<CandidateSet>) {
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    idx.shuffle(&mut seeds::rng(seeds::sub_seed(seed, seeds::HOLDOUT)));
    let n_test = (test_fraction * corpus.len() as f64).round() as usize;
    let mut test: Vec<usize> = idx[..n_test].to_vec();
    let mut rest: Vec<usize> = idx[n_test..].to_vec();
    test.sort_unstable();
    rest.sort_unstable();
    let pick = |v: &[usize]| v.iter().map(|&i| corpus[i].clone()).collect();
    (pick(&rest), pick(&test))
}

/// Tokenized training and validation data for one run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub vocab: Vocabulary,
    pub train: Vec<QueryExample>,
    pub valid: ValidationSet,
    pub train_labels: Vec<RankingLabel>,
    pub valid_labels: Vec<RankingLabel>,
}

/// Build the vocabulary over `corpus`, split `labels` 9:1 and tokenize.
pub fn prepare(
    corpus: &[CandidateSet],
    labels: &[RankingLabel],
    cfg: &RunConfig,
    kind: RankerKind,
    seed: u64,
) -> Result<Prepared> {
    let mut vocab = build_vocabulary(corpus_texts(corpus), cfg.max_vocab)?;
    if kind == RankerKind::Decoder {
        extend_vocab_for_prompts(&mut vocab);
    }
    let tc = cfg.train_config(kind, seed);
    let (train_labels, valid_labels) = split_dataset(labels, tc.train_fraction, seed)?;
    let docs = document_index(corpus);
    let train = examples_from_labels(&train_labels, &docs, &vocab, cfg.use_excluded)?;
    let valid = ValidationSet::from_labels(&valid_labels, &docs, &vocab)?;
    Ok(Prepared {
        vocab,
        train,
        valid,
        train_labels,
        valid_labels,
    })
}

pub fn train_bert(
    corpus: &[CandidateSet],
    labels: &[RankingLabel],
    cfg: &RunConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<(RraBert, TrainReport)> {
    let data = prepare(corpus, labels, cfg, RankerKind::Encoder, seed)?;
    let mc = cfg.model_config(data.vocab.len());
    let mut model = RraBert::new(mc, cfg.bert_config(), data.vocab, seed)?;
    let report = train(&mut model, &data.train, &data.valid, &cfg.train_config(RankerKind::Encoder, seed), out_dir)?;
    Ok((model, report))
}

pub fn train_gpt(
    corpus: &[CandidateSet],
    labels: &[RankingLabel],
    cfg: &RunConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<(RraGpt, TrainReport)> {
    let data = prepare(corpus, labels, cfg, RankerKind::Decoder, seed)?;
    let mc = cfg.model_config(data.vocab.len());
    let mut model = RraGpt::new(mc, cfg.gpt_config(), data.vocab, seed)?;
    let report = train(&mut model, &data.train, &data.valid, &cfg.train_config(RankerKind::Decoder, seed), out_dir)?;
    Ok((model, report))
}

/// Rank every candidate set of `corpus` with a neural scorer.
pub fn rank_corpus<S: Scorer + ?Sized>(scorer: &S, vocab: &Vocabulary, corpus: &[CandidateSet]) -> Result<Run> {
    let mut run = Run::default();
    for set in corpus {
        let q = tokenize(&set.query.text, vocab);
        let mut docs = set.documents.clone();
        for d in &mut docs {
            d.token_ids = tokenize(&d.text, vocab);
        }
        run.insert(&set.query.id, crate::evaluation::rank_documents(scorer, &q, &docs)?)?;
    }
    Ok(run)
}

/// BM25 run over every candidate set, statistics per candidate pool.
pub fn bm25_run(corpus: &[CandidateSet]) -> Result<Run> {
    let mut run = Run::default();
    for set in corpus {
        run.insert(&set.query.id, bm25_rank(&set.query.text, &set.documents, Bm25Params::default()))?;
    }
    Ok(run)
}
