use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rankdistill::ablation::{ablation_harness, decoder_grid, encoder_variants};
use rankdistill::bert::RraBert;
use rankdistill::evaluation::{evaluate_run, synthetic_qrels, Qrels, Run};
use rankdistill::gpt::{self, RraGpt};
use rankdistill::labelgen::{
    build_dataset, pre_rank_bm25, write_dataset_jsonl, HttpLabeler, HttpLabelerConfig, LabelMode, Labeler,
    MockReasoner, OracleLabeler, TOKEN_ENV,
};
use rankdistill::nn::checkpoint::peek_kind;
use rankdistill::pipeline::{bm25_run, holdout_split, rank_corpus, train_bert, train_gpt, RunConfig};
use rankdistill::synthetic::generate_synthetic_corpus;
use rankdistill::text::{read_corpus_jsonl, read_jsonl, write_corpus_jsonl, CandidateSet, Document, Query};
use rankdistill::training::TrainReport;
use rankdistill::{Error, Result};

#[derive(Parser)]
#[command(name = "rankdistill", version, about = "Distill list-wise LLM ranking labels into small rankers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic corpus with hidden relevance.
    SynthCorpus(SynthArgs),
    /// Pre-rank, label and write a training dataset.
    GenLabels(GenLabelsArgs),
    /// Train the encoder ranker.
    TrainBert(TrainArgs),
    /// Train the decoder ranker.
    TrainGpt(TrainArgs),
    /// Rank documents with a trained model (or BM25) and print a TREC run.
    Rank(RankArgs),
    /// Score a TREC run against TREC qrels.
    Evaluate(EvaluateArgs),
    /// Train ablation variants over several seeds and tabulate the results.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    /// Corpus JSONL (the non-held-out part when --test-out is given).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    queries: usize,
    #[arg(long, default_value_t = 50)]
    docs: usize,
    #[arg(long, default_value_t = 200)]
    vocab: usize,
    /// Also hold out a fraction of queries and write them here.
    #[arg(long)]
    test_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    /// TREC qrels from hidden relevance (of the held-out part if any).
    #[arg(long)]
    qrels_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelerKind {
    Oracle,
    Http,
}

#[derive(Args)]
struct GenLabelsArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum)]
    labeler: LabelerKind,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Sliding-window reranking of the full list instead of top/bottom-10.
    #[arg(long)]
    sliding_window: bool,
    /// Oracle relevance threshold.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Probability that the oracle drops a relevant document.
    #[arg(long, default_value_t = 0.0)]
    miss_noise: f64,
    /// Chat-completions URL for the HTTP labeler.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, default_value = "")]
    model: String,
    #[arg(long, default_value_t = 60)]
    timeout_secs: u64,
    #[arg(long, default_value_t = 3)]
    max_retries: u32,
    /// Write skipped queries here as JSONL.
    #[arg(long)]
    skip_report: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Flat TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Corpus the dataset refers to; overrides the config's `corpus` key.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args)]
struct RankArgs {
    /// Checkpoint written by train-bert or train-gpt.
    #[arg(long, required_unless_present = "bm25", conflicts_with = "bm25")]
    model: Option<PathBuf>,
    /// Rank with BM25 instead of a model.
    #[arg(long)]
    bm25: bool,
    #[arg(long, requires = "docs", conflicts_with = "corpus")]
    query: Option<String>,
    /// Document JSONL (`{"id", "text"}` per line) for --query.
    #[arg(long)]
    docs: Option<PathBuf>,
    /// Rank every candidate set of a corpus JSONL.
    #[arg(long, required_unless_present = "query")]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "rankdistill")]
    tag: String,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [5, 10])]
    k: Vec<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Encoder,
    Decoder,
}

#[derive(Args)]
struct AblateArgs {
    /// Corpus the dataset refers to.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Held-out candidate sets to evaluate on.
    #[arg(long)]
    test: PathBuf,
    /// Judgments for the held-out queries; defaults to hidden relevance.
    #[arg(long)]
    qrels: Option<PathBuf>,
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    suite: Suite,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3])]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if e.is_input_error() { 1 } else { 2 })
        }
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Input(format!("{} does not exist or is not a file", path.display())))
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthCorpus(a) => synth_corpus(a),
        Command::GenLabels(a) => gen_labels(a),
        Command::TrainBert(a) => train(a, false),
        Command::TrainGpt(a) => train(a, true),
        Command::Rank(a) => rank(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn synth_corpus(a: SynthArgs) -> Result<()> {
    if a.queries == 0 || a.docs == 0 || a.vocab == 0 {
        return Err(Error::Input("--queries, --docs and --vocab must be positive".into()));
    }
    let corpus = generate_synthetic_corpus(a.seed, a.queries, a.docs, a.vocab);
    let judged = match &a.test_out {
        Some(test_path) => {
            if !(a.test_fraction > 0.0 && a.test_fraction < 1.0) {
                return Err(Error::Input("--test-fraction must lie in (0, 1)".into()));
            }
            let (rest, test) = holdout_split(&corpus, a.test_fraction, a.seed);
            write_corpus_jsonl(&a.out, &rest)?;
            write_corpus_jsonl(test_path, &test)?;
            test
        }
        None => {
            write_corpus_jsonl(&a.out, &corpus)?;
            corpus
        }
    };
    if let Some(q) = &a.qrels_out {
        synthetic_qrels(&judged)?.write_trec(q)?;
    }
    Ok(())
}

fn gen_labels(a: GenLabelsArgs) -> Result<()> {
    require_file(&a.corpus)?;
    let corpus = read_corpus_jsonl(&a.corpus)?;
    let labeler: Box<dyn Labeler> = match a.labeler {
        LabelerKind::Oracle => Box::new(OracleLabeler {
            threshold: a.threshold,
            miss_noise: a.miss_noise,
            seed: a.seed,
        }),
        LabelerKind::Http => {
            let endpoint = a
                .endpoint
                .ok_or_else(|| Error::Input("--labeler http needs --endpoint".into()))?;
            Box::new(HttpLabeler::new(HttpLabelerConfig {
                endpoint,
                model: a.model,
                token_env: TOKEN_ENV.to_string(),
                timeout_secs: a.timeout_secs,
                max_retries: a.max_retries,
            })?)
        }
    };
    let mode = if a.sliding_window {
        LabelMode::SlidingWindow
    } else {
        LabelMode::PreRankedWindow
    };
    let build = build_dataset(&corpus, &|c| pre_rank_bm25(c), labeler.as_ref(), &MockReasoner, a.seed, mode)?;
    write_dataset_jsonl(&a.out, &build.labels)?;
    if let Some(p) = &a.skip_report {
        let mut text = String::new();
        for s in &build.skipped {
            text.push_str(&serde_json::to_string(s)?);
            text.push('\n');
        }
        std::fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    eprintln!("labeled {} queries, skipped {}", build.labels.len(), build.skipped.len());
    Ok(())
}

fn train(a: TrainArgs, decoder: bool) -> Result<()> {
    require_file(&a.dataset)?;
    require_file(&a.config)?;
    let cfg = RunConfig::load(&a.config)?;
    let corpus_path = a
        .corpus
        .or(cfg.corpus.clone())
        .ok_or_else(|| Error::Input("no corpus: pass --corpus or set `corpus` in the config".into()))?;
    require_file(&corpus_path)?;
    let corpus = read_corpus_jsonl(&corpus_path)?;
    let labels = rankdistill::labelgen::read_dataset_jsonl(&a.dataset)?;
    let report: TrainReport = if decoder {
        train_gpt(&corpus, &labels, &cfg, a.seed, Some(&a.out))?.1
    } else {
        train_bert(&corpus, &labels, &cfg, a.seed, Some(&a.out))?.1
    };
    let p = a.out.join("report.json");
    std::fs::write(&p, serde_json::to_vec_pretty(&report)?).map_err(|e| Error::io(&p, e))?;
    eprintln!(
        "best validation nDCG@5 {:.4} at step {} ({} steps run)",
        report.best_metric, report.steps_to_best, report.steps_run
    );
    Ok(())
}

fn rank(a: RankArgs) -> Result<()> {
    let sets: Vec<CandidateSet> = match (&a.query, &a.corpus) {
        (Some(q), _) => {
            let docs_path = a.docs.as_ref().expect("clap requires --docs with --query");
            require_file(docs_path)?;
            let docs: Vec<Document> = read_jsonl(docs_path)?;
            vec![CandidateSet::new(Query::new("q", q.as_str()), docs)?]
        }
        (None, Some(c)) => {
            require_file(c)?;
            read_corpus_jsonl(c)?
        }
        (None, None) => unreachable!("clap requires --query or --corpus"),
    };
    let run: Run = match &a.model {
        None => bm25_run(&sets)?,
        Some(path) => {
            require_file(path)?;
            match peek_kind(path)?.as_str() {
                gpt::KIND => {
                    let m = RraGpt::load(path)?;
                    rank_corpus(&m, &m.vocab, &sets)?
                }
                _ => {
                    let m = RraBert::load(path)?;
                    rank_corpus(&m, &m.vocab, &sets)?
                }
            }
        }
    };
    let mut out = std::io::stdout().lock();
    out.write_all(run.to_trec(&a.tag).as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    require_file(&a.run)?;
    require_file(&a.qrels)?;
    if a.k.contains(&0) {
        return Err(Error::Input("--k values must be ≥ 1".into()));
    }
    let result = evaluate_run(&Run::read_trec(&a.run)?, &Qrels::read_trec(&a.qrels)?, &a.k);
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    for p in [&a.corpus, &a.dataset, &a.test, &a.config] {
        require_file(p)?;
    }
    let cfg = RunConfig::load(&a.config)?;
    let corpus = read_corpus_jsonl(&a.corpus)?;
    let test = read_corpus_jsonl(&a.test)?;
    let labels = rankdistill::labelgen::read_dataset_jsonl(&a.dataset)?;
    let qrels = match &a.qrels {
        Some(p) => {
            require_file(p)?;
            Qrels::read_trec(p)?
        }
        None => synthetic_qrels(&test)?,
    };
    let variants = match a.suite {
        Suite::Encoder => encoder_variants(&cfg),
        Suite::Decoder => decoder_grid(&cfg),
    };
    let table = ablation_harness(&corpus, &labels, &test, &qrels, &variants, &a.seeds)?;
    table.write(&a.out)?;
    print!("{}", table.to_text());
    Ok(())
}
