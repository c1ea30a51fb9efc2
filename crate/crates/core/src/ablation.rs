//! Train configuration variants on identical data and seeds and tabulate
//! held-out nDCG as mean ± standard deviation.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate_run, Qrels, DEFAULT_KS};
use crate::gpt::{RankingInput, Tasks};
use crate::labelgen::RankingLabel;
use crate::pipeline::{rank_corpus, train_bert, train_gpt, RankerKind, RunConfig};
use crate::text::CandidateSet;

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub kind: RankerKind,
    pub config: RunConfig,
}

impl Variant {
    pub fn new(name: &str, kind: RankerKind, config: RunConfig) -> Self {
        Variant {
            name: name.to_string(),
            kind,
            config,
        }
    }
}

/// Encoder rows: without missing signal, without TS+TCL, with TS+TCL, and
/// trained with TCL but inferred without it.
pub fn encoder_variants(base: &RunConfig) -> Vec<Variant> {
    let with = RunConfig {
        use_tcl: true,
        use_tcl_at_inference: true,
        use_excluded: true,
        ..base.clone()
    };
    vec![
        Variant::new("w/o missing", RankerKind::Encoder, RunConfig { use_excluded: false, ..with.clone() }),
        Variant::new(
            "w/o TS+TCL",
            RankerKind::Encoder,
            RunConfig {
                use_tcl: false,
                use_tcl_at_inference: false,
                ..with.clone()
            },
        ),
        Variant::new("w/ TS+TCL", RankerKind::Encoder, with.clone()),
        Variant::new("infer w/o", RankerKind::Encoder, RunConfig { use_tcl_at_inference: false, ..with }),
    ]
}

/// Decoder grid: {gen, gen+clf, gen+rank, gen+rank+clf} × reasoning ×
/// ranking-layer input (only meaningful with the ranking layer).
pub fn decoder_grid(base: &RunConfig) -> Vec<Variant> {
    let mut out = Vec::new();
    for (clf, rank) in [(false, false), (true, false), (false, true), (true, true)] {
        for reasoning in [true, false] {
            let inputs: &[RankingInput] = if rank {
                &[RankingInput::Response, RankingInput::Reason]
            } else {
                &[RankingInput::Response]
            };
            for &input in inputs {
                let tasks = Tasks { gen: true, clf, rank };
                let mut name = tasks.label();
                if rank {
                    name.push_str(match input {
                        RankingInput::Response => " @response",
                        RankingInput::Reason => " @reason",
                    });
                }
                name.push_str(if reasoning { " +reasoning" } else { " -reasoning" });
                let config = RunConfig {
                    gen: true,
                    clf,
                    rank,
                    reasoning,
                    ranking_layer_input: input,
                    ..base.clone()
                };
                out.push(Variant::new(&name, RankerKind::Decoder, config));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub steps_to_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return MeanStd { mean: 0.0, std: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        MeanStd { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: String,
    pub ndcg5: MeanStd,
    pub ndcg10: MeanStd,
    pub steps_to_best: MeanStd,
    pub seeds: Vec<SeedResult>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn row(&self, variant: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,ndcg5_mean,ndcg5_std,ndcg10_mean,ndcg10_std,steps_to_best_mean,steps_to_best_std,seeds\n");
        for r in &self.rows {
            writeln!(
                out,
                "\"{}\",{:.6},{:.6},{:.6},{:.6},{:.2},{:.2},{}",
                r.variant.replace('"', "\"\""),
                r.ndcg5.mean,
                r.ndcg5.std,
                r.ndcg10.mean,
                r.ndcg10.std,
                r.steps_to_best.mean,
                r.steps_to_best.std,
                r.seeds.len()
            )
            .expect("string write");
        }
        out
    }

    /// Human-readable `mean ± std` table.
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.variant.len()).max().unwrap_or(7).max(7);
        let mut out = format!("{:width$}  {:>15}  {:>15}  {:>17}\n", "variant", "nDCG@5", "nDCG@10", "steps to best");
        for r in &self.rows {
            writeln!(
                out,
                "{:width$}  {:>6.3} ± {:<6.3}  {:>6.3} ± {:<6.3}  {:>7.1} ± {:<7.1}",
                r.variant, r.ndcg5.mean, r.ndcg5.std, r.ndcg10.mean, r.ndcg10.std, r.steps_to_best.mean, r.steps_to_best.std
            )
            .expect("string write");
        }
        out
    }

    /// Write `comparison.csv` and `comparison.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("comparison.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("comparison.json");
        std::fs::write(&json, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&json, e))
    }
}

/// Train every variant once per seed on `labels` and evaluate on `test`.
pub fn ablation_harness(
    corpus: &[CandidateSet],
    labels: &[RankingLabel],
    test: &[CandidateSet],
    qrels: &Qrels,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<ComparisonTable> {
    let mut table = ComparisonTable::default();
    for v in variants {
        let mut results = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let outcome = run_variant(corpus, labels, test, qrels, v, seed);
            let r = outcome.map_err(|e| {
                log::error!("variant `{}` failed with seed {seed}: {e}", v.name);
                e
            })?;
            log::info!("{} seed {seed}: nDCG@5 {:.4}, best at step {}", v.name, r.ndcg5, r.steps_to_best);
            results.push(r);
        }
        let col = |f: fn(&SeedResult) -> f64| MeanStd::of(&results.iter().map(f).collect::<Vec<_>>());
        table.rows.push(ComparisonRow {
            variant: v.name.clone(),
            ndcg5: col(|r| r.ndcg5),
            ndcg10: col(|r| r.ndcg10),
            steps_to_best: col(|r| r.steps_to_best as f64),
            seeds: results,
        });
    }
    Ok(table)
}

fn run_variant(
    corpus: &[CandidateSet],
    labels: &[RankingLabel],
    test: &[CandidateSet],
    qrels: &Qrels,
    v: &Variant,
    seed: u64,
) -> Result<SeedResult> {
    let (run, report) = match v.kind {
        RankerKind::Encoder => {
            let (m, rep) = train_bert(corpus, labels, &v.config, seed, None)?;
            (rank_corpus(&m, &m.vocab, test)?, rep)
        }
        RankerKind::Decoder => {
            let (m, rep) = train_gpt(corpus, labels, &v.config, seed, None)?;
            (rank_corpus(&m, &m.vocab, test)?, rep)
        }
    };
    let eval = evaluate_run(&run, qrels, &DEFAULT_KS);
    Ok(SeedResult {
        seed,
        ndcg5: eval.ndcg(5),
        ndcg10: eval.ndcg(10),
        steps_to_best: report.steps_to_best,
    })
}
