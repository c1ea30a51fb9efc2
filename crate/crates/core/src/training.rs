//! Query-level split, AdamW loop with step-based validation, early stopping
//! and best-checkpoint tracking.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bert::RraBert;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_run, sort_scored, Qrels, Run, Scorer};
use crate::example::{ExampleDoc, LossBreakdown, QueryExample};
use crate::gpt::RraGpt;
use crate::labelgen::RankingLabel;
use crate::nn::{AdamW, Gradients, ParamStore};
use crate::seeds;
use crate::text::{tokenize, Document, Vocabulary};

pub const VALIDATION_K: usize = 5;

/// A model the training loop can optimize.
pub trait Trainable: Scorer {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn loss_and_grads(&self, ex: &QueryExample) -> Result<(LossBreakdown, Gradients)>;
    fn save(&self, path: &Path) -> Result<()>;
}

impl Trainable for RraBert {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn loss_and_grads(&self, ex: &QueryExample) -> Result<(LossBreakdown, Gradients)> {
        RraBert::loss_and_grads(self, ex)
    }
    fn save(&self, path: &Path) -> Result<()> {
        RraBert::save(self, path)
    }
}

impl Trainable for RraGpt {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn loss_and_grads(&self, ex: &QueryExample) -> Result<(LossBreakdown, Gradients)> {
        RraGpt::loss_and_grads(self, ex)
    }
    fn save(&self, path: &Path) -> Result<()> {
        RraGpt::save(self, path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub validate_every: usize,
    pub patience: usize,
    /// Fraction of queries used for training; the rest validate.
    pub train_fraction: f64,
    pub max_steps: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn encoder_default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            weight_decay: 0.01,
            validate_every: 300,
            patience: 5,
            train_fraction: 0.9,
            max_steps: 30_000,
            seed: 0,
        }
    }

    pub fn decoder_default() -> Self {
        TrainConfig {
            validate_every: 1000,
            ..Self::encoder_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("learning_rate must be positive and weight_decay non-negative".into()));
        }
        if self.validate_every == 0 || self.patience == 0 || self.max_steps == 0 {
            return Err(Error::Config("validate_every, patience and max_steps must be ≥ 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub step: usize,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps_to_best: usize,
    pub best_metric: f64,
    pub curve: Vec<ValidationPoint>,
    pub best_checkpoint: Option<PathBuf>,
    pub stopped_early: bool,
    pub steps_run: usize,
}

/// Query-level seeded split into `⌊fraction·n⌋` training and the rest
/// validation queries, each sorted by query id.
pub fn split_dataset(
    labels: &[RankingLabel],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<RankingLabel>, Vec<RankingLabel>)> {
    if labels.len() < 10 {
        return Err(Error::Input(format!("{} labeled queries; at least 10 needed to split", labels.len())));
    }
    let mut idx: Vec<usize> = (0..labels.len()).collect();
    idx.sort_by(|&a, &b| labels[a].query_id.cmp(&labels[b].query_id));
    idx.shuffle(&mut seeds::rng(seeds::sub_seed(seed, seeds::SPLIT)));
    let n_train = (train_fraction * labels.len() as f64).floor() as usize;
    let pick = |ids: &[usize]| {
        let mut v: Vec<RankingLabel> = ids.iter().map(|&i| labels[i].clone()).collect();
        v.sort_by(|a, b| a.query_id.cmp(&b.query_id));
        v
    };
    Ok((pick(&idx[..n_train]), pick(&idx[n_train..])))
}

/// Tokenized training examples. `include_excluded = false` drops the
/// labeler-excluded documents (the "without missing" setting).
pub fn examples_from_labels(
    labels: &[RankingLabel],
    docs: &BTreeMap<&str, &Document>,
    vocab: &Vocabulary,
    include_excluded: bool,
) -> Result<Vec<QueryExample>> {
    labels
        .iter()
        .map(|l| {
            let excluded: &[String] = if include_excluded { &l.excluded } else { &[] };
            let ids = l.ranked.iter().chain(excluded).chain(&l.negatives);
            let docs = ids
                .map(|id| {
                    let d = docs
                        .get(id.as_str())
                        .ok_or_else(|| Error::Input(format!("label references unknown document `{id}`")))?;
                    let missing = || Error::Input(format!("label for {} lacks entries for `{id}`", l.query_id));
                    Ok(ExampleDoc {
                        id: id.clone(),
                        token_ids: tokenize(&d.text, vocab),
                        graded: *l.graded.get(id).ok_or_else(missing)?,
                        binary: *l.binary.get(id).ok_or_else(missing)?,
                        reasoning_ids: tokenize(l.reasoning.get(id).ok_or_else(missing)?, vocab),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(QueryExample {
                query_id: l.query_id.clone(),
                query_ids: tokenize(&l.query, vocab),
                docs,
            })
        })
        .collect()
}

/// Integer gains from labels: top half of the ranked list 3, bottom half 2,
/// excluded documents and negatives 0.
pub fn label_qrels(labels: &[RankingLabel]) -> Result<Qrels> {
    let mut q = Qrels::default();
    for l in labels {
        let half = l.ranked.len().div_ceil(2);
        for (i, id) in l.ranked.iter().enumerate() {
            q.insert(&l.query_id, id, if i < half { 3.0 } else { 2.0 })?;
        }
        for id in l.excluded.iter().chain(&l.negatives) {
            q.insert(&l.query_id, id, 0.0)?;
        }
    }
    Ok(q)
}

/// Validation queries with their judgments.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    pub examples: Vec<QueryExample>,
    pub qrels: Qrels,
}

impl ValidationSet {
    pub fn from_labels(labels: &[RankingLabel], docs: &BTreeMap<&str, &Document>, vocab: &Vocabulary) -> Result<Self> {
        Ok(ValidationSet {
            examples: examples_from_labels(labels, docs, vocab, true)?,
            qrels: label_qrels(labels)?,
        })
    }
}

/// Rank an example's documents with `scorer`.
pub fn rank_example<S: Scorer + ?Sized>(scorer: &S, ex: &QueryExample) -> Result<Vec<(String, f64)>> {
    let scored = ex
        .docs
        .iter()
        .map(|d| Ok((d.id.clone(), scorer.score_pair(&ex.query_ids, &d.token_ids)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(sort_scored(scored))
}

/// Mean nDCG@k of `scorer` over a validation set.
pub fn validation_ndcg<S: Scorer + ?Sized>(scorer: &S, valid: &ValidationSet, k: usize) -> Result<f64> {
    let mut run = Run::default();
    for ex in &valid.examples {
        run.insert(&ex.query_id, rank_example(scorer, ex)?)?;
    }
    Ok(evaluate_run(&run, &valid.qrels, &[k]).ndcg(k))
}

#[derive(Serialize)]
struct MetricsLine {
    step: usize,
    loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    ranknet: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    clf: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gen: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    valid_ndcg5: Option<f64>,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_LOG: &str = "metrics.jsonl";

/// Optimize `model` one query per step, validating every `validate_every`
/// steps. On return the model holds the best validated parameters.
pub fn train<M: Trainable>(
    model: &mut M,
    train_set: &[QueryExample],
    valid: &ValidationSet,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("no training queries".into()));
    }
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join(METRICS_LOG);
            Some((BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?), p))
        }
        None => None,
    };
    let best_path = out_dir.map(|d| d.join(BEST_CHECKPOINT));
    let mut opt = AdamW::new(model.store(), cfg.learning_rate, cfg.weight_decay);
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0u64;
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut curve = Vec::new();
    let mut stale = 0;
    let mut stopped_early = false;
    let mut step = 0;

    while step < cfg.max_steps {
        if order.is_empty() {
            order = (0..train_set.len()).collect();
            order.shuffle(&mut seeds::rng(seeds::keyed_seed(cfg.seed, seeds::ORDER, &epoch.to_string())));
            order.reverse();
            epoch += 1;
        }
        let ex = &train_set[order.pop().expect("refilled above")];
        step += 1;
        let (loss, grads) = model.loss_and_grads(ex)?;
        if !loss.total.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("query {}: loss {:?}", ex.query_id, loss),
            });
        }
        opt.step(model.store_mut(), &grads);
        if let Some(name) = model.store().first_non_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("parameter `{name}` after the update"),
            });
        }

        let validate = step % cfg.validate_every == 0 || (step == cfg.max_steps && curve.is_empty());
        let mut metric = None;
        if validate {
            let m = validation_ndcg(&*model, valid, VALIDATION_K)?;
            metric = Some(m);
            curve.push(ValidationPoint { step, ndcg: m });
            if best.as_ref().map_or(true, |(b, _, _)| m > *b) {
                best = Some((m, step, model.store().clone()));
                stale = 0;
                if let Some(p) = &best_path {
                    model.save(p)?;
                }
            } else {
                stale += 1;
            }
        }
        if let Some((w, p)) = log.as_mut() {
            let line = MetricsLine {
                step,
                loss: loss.total,
                ranknet: loss.ranknet,
                clf: loss.clf,
                gen: loss.gen,
                valid_ndcg5: metric,
            };
            serde_json::to_writer(&mut *w, &line)?;
            w.write_all(b"\n").map_err(|e| Error::io(&*p, e))?;
        }
        if stale >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    if let Some((w, p)) = log.as_mut() {
        w.flush().map_err(|e| Error::io(&*p, e))?;
    }
    let (best_metric, steps_to_best, params) = best.expect("at least one validation ran");
    *model.store_mut() = params;
    Ok(TrainReport {
        steps_to_best,
        best_metric,
        curve,
        best_checkpoint: best_path,
        stopped_early,
        steps_run: step,
    })
}
