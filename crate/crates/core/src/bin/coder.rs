//! `coder`: embed, retrieve, train, rerank, evaluate and benchmark from the shell.
//!
//! Exit codes: 0 success, 1 runtime or I/O failure, 2 invalid input.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use coder_core::bench::{run_bench, BenchConfig};
use coder_core::checkpoint::load_encoder;
use coder_core::corpus_io::{
    build_vocab, load_collection, load_qrels, load_queries, read_query_texts, Vocab,
};
use coder_core::embed_store::{
    encode_documents, open_embeddings, write_embeddings, FrozenDocEncoder, NormMode,
};
use coder_core::first_stage::{
    build_candidate_pool, Bm25Index, CandidatePool, DenseRetriever, DEFAULT_B, DEFAULT_K1,
};
use coder_core::metrics::{
    mrr_at_k, ndcg_at_k_with, paired_t_test, recall_at_k, GainMode, MetricReport, RunFile,
};
use coder_core::ranker::{rerank, LossKind};
use coder_core::synthlab::{
    arms_table, count_table, gen_synthetic, loss_type_experiment, multi_positive_experiment,
    negative_count_experiment, negative_type_experiment, Arm, ExperimentConfig, SyntheticSpec,
};
use coder_core::trainer::{train, NegativePolicy, TrainConfig};
use coder_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "coder",
    version,
    about = "Query-encoder fine-tuning and reranking over frozen document embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Embed a collection with the seeded frozen document encoder.
    Embed(EmbedArgs),
    /// First-stage retrieval into a candidate pool and/or a TREC run.
    Retrieve(RetrieveArgs),
    /// Fine-tune a query encoder from a config file.
    Train(TrainArgs),
    /// Rerank a candidate pool with a trained encoder.
    Rerank(RerankArgs),
    /// Score a TREC run against qrels, optionally against a second run.
    Evaluate(EvaluateArgs),
    /// Time encode + score + sort per query over in-memory embeddings.
    BenchRerank(BenchArgs),
    /// Write a synthetic testbed as pipeline files plus a training config.
    Synth(SynthArgs),
    /// Run one of the synthetic ablation experiments and print its table.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct EmbedArgs {
    /// Collection TSV (`docid<TAB>text`).
    #[arg(long)]
    collection: PathBuf,
    /// Existing vocabulary; built from the collection when absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Query TSV whose words join a freshly built vocabulary.
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    min_freq: usize,
    /// Where to write a freshly built vocabulary.
    #[arg(long)]
    vocab_out: Option<PathBuf>,
    #[arg(long)]
    dim: usize,
    /// Seed of the random projection.
    #[arg(long)]
    seed: u64,
    /// Skip L2 normalization of document vectors.
    #[arg(long)]
    no_norm: bool,
    /// Output `CDRE` file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Bm25,
    Dense,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long, value_enum)]
    method: Method,
    #[arg(long)]
    collection: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 1000)]
    k: usize,
    /// Embeddings for dense retrieval.
    #[arg(long, required_if_eq("method", "dense"))]
    embeddings: Option<PathBuf>,
    /// Query encoder checkpoint for dense retrieval.
    #[arg(long, required_if_eq("method", "dense"))]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_K1)]
    k1: f64,
    #[arg(long, default_value_t = DEFAULT_B)]
    b: f64,
    #[arg(long, default_value_t = 32)]
    max_query_len: usize,
    #[arg(long, required_unless_present = "out_run")]
    out_pool: Option<PathBuf>,
    #[arg(long)]
    out_run: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` training config.
    #[arg(long)]
    config: PathBuf,
    /// Seed for initialization, batch order, sampling and dropout.
    #[arg(long)]
    seed: u64,
    /// Override the negative policy (e.g. `random_only`, `mixed:64`).
    #[arg(long)]
    policy: Option<String>,
    /// Resume from a `state.ckpt` written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct RerankArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    collection: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    pool: PathBuf,
    /// Rerank only the top `depth` pool entries.
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long, default_value_t = 32)]
    max_query_len: usize,
    #[arg(long, default_value = "coder")]
    tag: String,
    #[arg(long)]
    out_run: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MetricName {
    Mrr,
    Ndcg,
    Recall,
    All,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Relevance {
    /// Grade 1 counts as relevant.
    Lenient,
    /// Only grades 2 and 3 count.
    Strict,
    /// Report `lenient / strict` pairs.
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum Gain {
    Linear,
    Exp,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, value_enum, default_value_t = MetricName::All)]
    metric: MetricName,
    #[arg(long, value_enum, default_value_t = Relevance::Both)]
    relevance: Relevance,
    #[arg(long, value_enum, default_value_t = Gain::Linear)]
    gain: Gain,
    /// Under strict relevance, also drop nDCG gains of grades below the threshold
    /// (by default nDCG uses raw grades in both modes).
    #[arg(long)]
    ndcg_zero_below_threshold: bool,
    /// Second run: adds a paired t-test per metric over shared queries.
    #[arg(long)]
    compare: Option<PathBuf>,
    /// Also print per-query values.
    #[arg(long)]
    per_query: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 768)]
    dim: usize,
    #[arg(long, default_value_t = 1000)]
    candidates: usize,
    #[arg(long, default_value_t = 1000)]
    queries: usize,
    #[arg(long, default_value_t = 10_000)]
    corpus: usize,
    #[arg(long, default_value_t = 32)]
    query_len: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpecName {
    /// Single positive, hard band, per-query jitter.
    Ablation,
    /// One positive per query with unjudged relevant docs.
    Single,
    /// Three graded positives per query with unjudged relevant docs.
    Multi,
    /// d=8, query text fully determines the latent.
    Saturation,
}

impl SpecName {
    fn spec(self) -> SyntheticSpec {
        match self {
            SpecName::Ablation => SyntheticSpec::ablation(),
            SpecName::Single => SyntheticSpec::multi_positive_pair().0,
            SpecName::Multi => SyntheticSpec::multi_positive_pair().1,
            SpecName::Saturation => SyntheticSpec::saturation(),
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value_t = SpecName::Ablation)]
    spec: SpecName,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pool_noise: f64,
    #[arg(long, default_value_t = 1000)]
    pool_depth: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentKind {
    NegativeType,
    LossType,
    NegativeCount,
    MultiPositive,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(value_enum)]
    kind: ExperimentKind,
    /// First seed; consecutive seeds follow.
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    n_seeds: u64,
    /// Negative counts for `negative-count`.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,9,16,72")]
    n_values: Vec<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Embed(a) => embed(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Train(a) => train_cmd(a),
        Command::Rerank(a) => rerank_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::BenchRerank(a) => bench(a),
        Command::Synth(a) => synth(a),
        Command::Experiment(a) => experiment(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn embed(a: EmbedArgs) -> Result<()> {
    if a.dim == 0 {
        return Err(Error::Config("dim must be positive".into()));
    }
    let docs = load_collection(&a.collection)?;
    let vocab = match &a.vocab {
        Some(p) => Vocab::load(p)?,
        None => {
            let queries = match &a.queries {
                Some(q) => read_query_texts(q)?,
                None => Vec::new(),
            };
            build_vocab(&docs, queries.iter().map(|q| q.1.as_str()), a.min_freq)
        }
    };
    if let Some(p) = &a.vocab_out {
        vocab.save(p)?;
    }
    let norm = if a.no_norm {
        NormMode::None
    } else {
        NormMode::L2
    };
    let enc = FrozenDocEncoder::new(a.seed, vocab.len(), a.dim, norm);
    let m = encode_documents(&enc, &docs, &vocab);
    write_embeddings(&m, &a.out)?;
    println!(
        "embedded {} documents, dim {}, vocab {}",
        m.rows(),
        m.cols(),
        vocab.len()
    );
    Ok(())
}

fn pool_to_run(pool: &CandidatePool, docs: &coder_core::corpus_io::DocStore, tag: &str) -> RunFile {
    let mut run = RunFile::new(tag);
    for (qid, list) in &pool.lists {
        run.insert_ranked(qid, list.iter().map(|&(d, s)| (docs.id(d).to_string(), s)));
    }
    run
}

fn retrieve(a: RetrieveArgs) -> Result<()> {
    if a.k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    let docs = load_collection(&a.collection)?;
    let vocab = Vocab::load(&a.vocab)?;
    let queries = load_queries(&a.queries, &vocab, a.max_query_len)?;
    let (built, tag) = match a.method {
        Method::Bm25 => {
            let index = Bm25Index::build(&docs, &vocab, a.k1, a.b)?;
            (build_candidate_pool(&index, &queries, a.k)?, "bm25")
        }
        Method::Dense => {
            let (emb, ckpt) = (
                a.embeddings.as_ref().unwrap(),
                a.checkpoint.as_ref().unwrap(),
            );
            let store = open_embeddings(emb)?;
            if store.count() != docs.len() {
                return Err(Error::Config(format!(
                    "embedding rows ({}) do not match collection size ({})",
                    store.count(),
                    docs.len()
                )));
            }
            let params = load_encoder(ckpt)?;
            let r = DenseRetriever {
                params: &params,
                store: &store,
                label: ckpt.display().to_string(),
            };
            (build_candidate_pool(&r, &queries, a.k)?, "dense")
        }
    };
    if let Some(p) = &a.out_pool {
        built.pool.write(&docs, p)?;
    }
    if let Some(p) = &a.out_run {
        pool_to_run(&built.pool, &docs, tag).write(p)?;
    }
    println!(
        "retrieved {} queries (skipped {}, rejected {}), k={}",
        built.pool.lists.len(),
        built.skipped.len(),
        queries.rejected.len(),
        a.k
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::load(&a.config)?;
    cfg.seed = a.seed;
    if let Some(p) = &a.policy {
        cfg.policy = p.parse::<NegativePolicy>()?;
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not `key=value`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(r) = a.resume {
        cfg.paths.resume = Some(r);
    }
    if let Some(o) = a.out_dir {
        cfg.paths.out_dir = Some(o);
    }
    let art = train(&cfg)?;
    let o = &art.outcome;
    println!(
        "steps={} initial_mrr10={:.6} best_mrr10={:.6} (step {}) final_mrr10={:.6}{}",
        o.state.step,
        o.initial_mrr,
        o.selection.best_mrr,
        o.selection.best_step,
        o.final_mrr,
        if o.stopped_early {
            " stopped_early"
        } else {
            ""
        }
    );
    println!("best checkpoint: {}", art.best_checkpoint.display());
    println!("log: {}", art.log.display());
    Ok(())
}

fn rerank_cmd(a: RerankArgs) -> Result<()> {
    let docs = load_collection(&a.collection)?;
    let vocab = Vocab::load(&a.vocab)?;
    let queries = load_queries(&a.queries, &vocab, a.max_query_len)?;
    let store = open_embeddings(&a.embeddings)?;
    let params = load_encoder(&a.checkpoint)?;
    let pool = CandidatePool::read(&docs, &a.pool)?;
    let mut run = RunFile::new(a.tag.as_str());
    let mut missing = 0;
    for (qid, toks) in queries.query_ids.iter().zip(&queries.token_id_sequences) {
        let Some(list) = pool.get(qid) else {
            missing += 1;
            continue;
        };
        let depth = a.depth.unwrap_or(list.len()).min(list.len());
        let cands: Vec<usize> = list[..depth].iter().map(|h| h.0).collect();
        let q = params.encode_eval(toks)?;
        let ranked = rerank(&q, &cands, &store)?;
        run.insert_ranked(
            qid,
            ranked.into_iter().map(|(d, s)| (docs.id(d).to_string(), s)),
        );
    }
    run.write(&a.out_run)?;
    println!(
        "reranked {} queries ({} without pool entries)",
        run.queries.len(),
        missing
    );
    Ok(())
}

fn metric_reports(
    a: &EvaluateArgs,
    run: &RunFile,
    qrels: &coder_core::corpus_io::RelevanceJudgments,
    threshold: u8,
) -> Result<Vec<MetricReport>> {
    let gain = match a.gain {
        Gain::Linear => GainMode::Linear,
        Gain::Exp => GainMode::Exponential,
    };
    let mut out = Vec::new();
    if matches!(a.metric, MetricName::Mrr | MetricName::All) {
        out.push(mrr_at_k(run, qrels, a.k, threshold)?);
    }
    if matches!(a.metric, MetricName::Ndcg | MetricName::All) {
        let zero_below = if a.ndcg_zero_below_threshold {
            threshold
        } else {
            0
        };
        out.push(ndcg_at_k_with(run, qrels, a.k, gain, zero_below)?);
    }
    if matches!(a.metric, MetricName::Recall | MetricName::All) {
        out.push(recall_at_k(run, qrels, a.k, threshold)?);
    }
    Ok(out)
}

fn aligned(a: &MetricReport, b: &MetricReport) -> (Vec<f64>, Vec<f64>) {
    a.per_query
        .iter()
        .filter_map(|(q, x)| b.per_query.get(q).map(|y| (*x, *y)))
        .unzip()
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let run = RunFile::read(&a.run)?;
    let qrels = load_qrels(&a.qrels)?;
    let other = a.compare.as_ref().map(RunFile::read).transpose()?;
    let thresholds: &[u8] = match a.relevance {
        Relevance::Lenient => &[1],
        Relevance::Strict => &[2],
        Relevance::Both => &[1, 2],
    };
    let per_mode: Vec<Vec<MetricReport>> = thresholds
        .iter()
        .map(|&t| metric_reports(&a, &run, &qrels, t))
        .collect::<Result<_>>()?;
    let other_mode: Option<Vec<Vec<MetricReport>>> = other
        .as_ref()
        .map(|o| {
            thresholds
                .iter()
                .map(|&t| metric_reports(&a, o, &qrels, t))
                .collect::<Result<_>>()
        })
        .transpose()?;

    let first = &per_mode[0];
    if !first.is_empty() {
        let r = &first[0];
        println!(
            "queries evaluated={} missing_judgments={} no_relevant={}",
            r.evaluated(),
            r.missing_judgments.len(),
            r.no_relevant.len()
        );
    }
    for (i, r) in first.iter().enumerate() {
        let values: Vec<String> = per_mode
            .iter()
            .map(|m| format!("{:.4}", m[i].aggregate))
            .collect();
        let mut line = format!("{}\t{}", r.metric, values.join(" / "));
        if let Some(om) = &other_mode {
            let tests: Vec<String> = per_mode
                .iter()
                .zip(om)
                .map(|(m, o)| {
                    let (x, y) = aligned(&m[i], &o[i]);
                    match paired_t_test(&x, &y) {
                        Ok(t) => format!("{:.4} (t={:.3}, p={:.4})", o[i].aggregate, t.t, t.p),
                        Err(_) => format!("{:.4} (t-test n/a)", o[i].aggregate),
                    }
                })
                .collect();
            line.push_str(&format!("\tvs\t{}", tests.join(" / ")));
        }
        println!("{line}");
        if a.per_query {
            for m in &per_mode {
                print!("{}", m[i].to_tsv());
            }
        }
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let cfg = BenchConfig {
        dim: a.dim,
        n_candidates: a.candidates,
        n_queries: a.queries,
        corpus_size: a.corpus.max(a.candidates),
        query_len: a.query_len,
        threads: a.threads,
        seed: a.seed,
        ..BenchConfig::default()
    };
    let r = run_bench(&cfg)?;
    println!(
        "dim={} candidates={} {}",
        cfg.dim,
        cfg.n_candidates,
        r.summary()
    );
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        seed: a.seed,
        ..a.spec.spec()
    };
    let data = gen_synthetic(&spec)?;
    // desk-scale settings for a freshly initialized encoder
    let mut template = ExperimentConfig::desk(spec.dim).finetune;
    template.base_lr = ExperimentConfig::saturation().finetune.base_lr;
    let cfg = data.export(&a.out_dir, &template, a.pool_noise, a.pool_depth, a.seed)?;
    let conf = a.out_dir.join("train.conf");
    write_text(&conf, &cfg.to_text())?;
    println!(
        "wrote {} docs, {} train / {} val queries to {} (config {})",
        data.docs.len(),
        data.train.len(),
        data.val.len(),
        a.out_dir.display(),
        conf.display()
    );
    Ok(())
}

fn experiment(a: ExperimentArgs) -> Result<()> {
    let seeds: Vec<u64> = (a.seed..a.seed + a.n_seeds).collect();
    match a.kind {
        ExperimentKind::NegativeType | ExperimentKind::LossType => {
            let spec = SyntheticSpec::ablation();
            let cfg = ExperimentConfig::desk(spec.dim);
            let mut results = Vec::new();
            for &s in &seeds {
                results.push(match a.kind {
                    ExperimentKind::LossType => loss_type_experiment(&spec, &cfg, s)?,
                    _ => {
                        let arms = [
                            Arm {
                                policy: NegativePolicy::RetrievedTopN,
                                loss: LossKind::ListNet,
                            },
                            Arm {
                                policy: NegativePolicy::RetrievedTopN,
                                loss: LossKind::MaxMargin,
                            },
                            Arm {
                                policy: NegativePolicy::RandomOnly,
                                loss: LossKind::ListNet,
                            },
                            Arm {
                                policy: NegativePolicy::RetrievedPlusInBatch { n_extra: 0 },
                                loss: LossKind::ListNet,
                            },
                        ];
                        negative_type_experiment(&spec, &cfg, &arms, s)?
                    }
                });
            }
            print!("{}", arms_table(&results));
        }
        ExperimentKind::NegativeCount => {
            let spec = SyntheticSpec::saturation();
            let cells = negative_count_experiment(
                &spec,
                &ExperimentConfig::saturation(),
                &a.n_values,
                &seeds,
            )?;
            print!("{}", count_table(&cells));
        }
        ExperimentKind::MultiPositive => {
            let (single, multi) = SyntheticSpec::multi_positive_pair();
            let cfg = ExperimentConfig::desk(single.dim);
            println!("seed\tgap_single\tgap_multi");
            for &s in &seeds {
                let g = multi_positive_experiment(&single, &multi, &cfg, s)?;
                println!("{}\t{:+.6}\t{:+.6}", g.seed, g.single, g.multi);
            }
        }
    }
    Ok(())
}
