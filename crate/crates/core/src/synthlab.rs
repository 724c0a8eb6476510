//! Deterministic synthetic testbed and the three analysis experiments:
//! negative composition, negative count, and loss type.
//!
//! Geometry: each query owns a latent unit vector built from a few shared
//! "topic" directions, so the query encoder can learn it from the topic tokens
//! alone. Positives sit at the latent plus Gaussian noise (tighter noise for
//! higher grades). Each query also gets a band of hard distractors at a fixed
//! cosine range from its latent; the rest of the corpus is uniform on the sphere.
//! Document texts are chosen so the frozen document encoder approximately
//! reproduces the planted vectors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::corpus_io::{
    tokenize, write_collection, write_qrels, DocStore, QuerySet, RelevanceJudgments, Vocab,
};
use crate::embed_store::{write_embeddings, EmbeddingStore, FrozenDocEncoder, NormMode};
use crate::encoder::{AggMode, EncoderParams};
use crate::error::{Error, Result};
use crate::first_stage::{dense_search, CandidatePool};
use crate::linalg::{dot, norm, Matrix};
use crate::ranker::LossKind;
use crate::trainer::{
    derive_seed, NegativePolicy, QueryTable, TrainConfig, TrainOutcome, Trainer, TrainerState,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub corpus_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    /// Grade of each planted positive, e.g. `[1]` or `[3, 2, 1]`.
    pub grades: Vec<u8>,
    /// Noise scale of a grade-3 positive; lower grades get proportionally more.
    pub noise: f64,
    pub hard_per_query: usize,
    /// Relevant but unjudged documents per training query (incomplete labels).
    pub false_negatives: usize,
    pub hard_band: (f64, f64),
    pub n_topics: usize,
    pub topics_per_query: usize,
    /// Scale of a per-query latent component not predictable from the tokens.
    pub query_jitter: f64,
    /// Adds one query-specific token to every query text.
    pub unique_tokens: bool,
    pub doc_vocab: usize,
    pub words_per_doc: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            corpus_size: 5000,
            n_train: 200,
            n_val: 100,
            grades: vec![3],
            noise: 0.2,
            hard_per_query: 3,
            false_negatives: 0,
            hard_band: (0.6, 0.8),
            n_topics: 40,
            topics_per_query: 3,
            query_jitter: 0.3,
            unique_tokens: true,
            doc_vocab: 512,
            words_per_doc: 12,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Testbed for the negative-type and loss-type comparisons (the default).
    pub fn ablation() -> Self {
        Self::default()
    }

    /// Single- and multi-positive variants sharing everything but the grades.
    /// Train queries carry unjudged relevant documents, so the loss has to
    /// tolerate false negatives among the retrieved candidates.
    pub fn multi_positive_pair() -> (Self, Self) {
        let single = Self {
            unique_tokens: false,
            false_negatives: 6,
            ..Self::default()
        };
        let multi = Self {
            grades: vec![3, 2, 1],
            ..single.clone()
        };
        (single, multi)
    }

    /// Low-dimensional testbed where query text fully determines the latent.
    pub fn saturation() -> Self {
        Self {
            dim: 8,
            hard_per_query: 0,
            n_topics: 16,
            query_jitter: 0.0,
            unique_tokens: false,
            ..Self::default()
        }
    }

    pub fn k(&self) -> usize {
        self.grades.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.dim < 2 {
            return bad("synthetic dim must be at least 2");
        }
        if self.grades.is_empty() || self.grades.iter().any(|g| !(1..=3).contains(g)) {
            return bad("synthetic grades must be non-empty and within 1..=3");
        }
        let structured = (self.n_train + self.n_val) * (self.k() + self.hard_per_query)
            + self.n_train * self.false_negatives;
        if structured > self.corpus_size {
            return bad("corpus too small for the planted positives and hard bands");
        }
        if self.topics_per_query == 0 || self.topics_per_query > self.n_topics {
            return bad("topics_per_query must be in 1..=n_topics");
        }
        let (lo, hi) = self.hard_band;
        if !(-1.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
            return bad("hard band must satisfy -1 <= lo <= hi <= 1");
        }
        if !(self.noise >= 0.0) || !(self.query_jitter >= 0.0) {
            return bad("noise and query_jitter must be non-negative");
        }
        if self.n_train == 0 || self.n_val == 0 {
            return bad("need at least one train and one val query");
        }
        Ok(())
    }

    fn noise_for(&self, grade: u8) -> f64 {
        self.noise * (4 - grade) as f64
    }
}

/// Generated testbed. Train and val queries are disjoint; `qrels` covers both.
#[derive(Debug)]
pub struct SyntheticData {
    pub docs: DocStore,
    pub store: EmbeddingStore,
    pub vocab: Vocab,
    pub train: QuerySet,
    pub val: QuerySet,
    pub qrels: RelevanceJudgments,
    /// Latent vector per query id.
    pub latents: BTreeMap<String, Vec<f64>>,
    /// Seed of the frozen document encoder the texts were fitted to.
    pub doc_encoder_seed: u64,
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, d);
        if norm(&v) > 1e-9 {
            return normalized(v);
        }
    }
}

/// Unit vector at cosine `c` from unit `anchor`, in a random orthogonal direction.
fn at_cosine(rng: &mut ChaCha8Rng, anchor: &[f64], c: f64) -> Vec<f64> {
    let w = loop {
        let mut w = gaussian(rng, anchor.len());
        let p = dot(&w, anchor);
        w.iter_mut().zip(anchor).for_each(|(x, a)| *x -= p * a);
        if norm(&w) > 1e-9 {
            break normalized(w);
        }
    };
    let s = (1.0 - c * c).max(0.0).sqrt();
    anchor.iter().zip(&w).map(|(a, b)| c * a + s * b).collect()
}

/// Greedy word selection so that the normalized sum of frozen columns
/// approximates `target`.
fn fit_text(target: &[f64], columns: &[Vec<f64>], first_word: u32, n_words: usize) -> Vec<u32> {
    let d = target.len();
    let mut sum = vec![0.0; d];
    let mut out = Vec::with_capacity(n_words);
    for _ in 0..n_words {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (j, col) in columns.iter().enumerate() {
            let mut dp = 0.0;
            let mut nn = 0.0;
            for i in 0..d {
                let v = sum[i] + col[i];
                dp += v * target[i];
                nn += v * v;
            }
            let c = dp / nn.sqrt().max(1e-12);
            if c > best.0 {
                best = (c, j);
            }
        }
        for (s, c) in sum.iter_mut().zip(&columns[best.1]) {
            *s += c;
        }
        out.push(first_word + best.1 as u32);
    }
    out
}

pub fn doc_word(i: usize) -> String {
    format!("w{i:04}")
}

pub fn topic_word(i: usize) -> String {
    format!("topic{i:03}")
}

/// Builds the testbed. Identical specs give bit-identical outputs.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let d = spec.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0x5917]));
    let topics: Vec<Vec<f64>> = (0..spec.n_topics).map(|_| unit(&mut rng, d)).collect();
    let n_queries = spec.n_train + spec.n_val;

    let mut qids = Vec::with_capacity(n_queries);
    let mut texts = Vec::with_capacity(n_queries);
    let mut latents = Vec::with_capacity(n_queries);
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(spec.corpus_size);
    let mut owner: Vec<Option<(usize, u8)>> = Vec::with_capacity(spec.corpus_size);
    let all_topics: Vec<usize> = (0..spec.n_topics).collect();
    for q in 0..n_queries {
        let chosen: Vec<usize> = all_topics
            .choose_multiple(&mut rng, spec.topics_per_query)
            .copied()
            .collect();
        let mut latent = vec![0.0; d];
        for &t in &chosen {
            latent.iter_mut().zip(&topics[t]).for_each(|(l, x)| *l += x);
        }
        let mut latent = normalized(latent);
        if spec.query_jitter > 0.0 {
            let sigma = spec.query_jitter / (d as f64).sqrt();
            let z = gaussian(&mut rng, d);
            latent = normalized(latent.iter().zip(&z).map(|(l, e)| l + sigma * e).collect());
        }
        let mut words: Vec<String> = chosen.iter().map(|&t| topic_word(t)).collect();
        if spec.unique_tokens {
            words.push(format!("uq{q:05}"));
        }
        qids.push(format!("Q{q:05}"));
        texts.push(words.join(" "));
        for &g in &spec.grades {
            let sigma = spec.noise_for(g) / (d as f64).sqrt();
            let z = gaussian(&mut rng, d);
            let v: Vec<f64> = latent.iter().zip(&z).map(|(l, e)| l + sigma * e).collect();
            vectors.push(normalized(v));
            owner.push(Some((q, g)));
        }
        if q < spec.n_train {
            let sigma = spec.noise_for(3) / (d as f64).sqrt();
            for _ in 0..spec.false_negatives {
                let z = gaussian(&mut rng, d);
                vectors.push(normalized(
                    latent.iter().zip(&z).map(|(l, e)| l + sigma * e).collect(),
                ));
                owner.push(None);
            }
        }
        for _ in 0..spec.hard_per_query {
            let c = rng.random_range(spec.hard_band.0..=spec.hard_band.1);
            vectors.push(at_cosine(&mut rng, &latent, c));
            owner.push(None);
        }
        latents.push(latent);
    }
    while vectors.len() < spec.corpus_size {
        vectors.push(unit(&mut rng, d));
        owner.push(None);
    }
    let mut order: Vec<usize> = (0..spec.corpus_size).collect();
    order.shuffle(&mut rng);

    // vocab: [doc words][topic words][train-only unique words]
    let mut tokens: Vec<String> = (0..spec.doc_vocab).map(doc_word).collect();
    tokens.extend((0..spec.n_topics).map(topic_word));
    if spec.unique_tokens {
        tokens.extend((0..spec.n_train).map(|q| format!("uq{q:05}")));
    }
    let vocab = Vocab::from_tokens(tokens);
    let first_word = vocab.id(&doc_word(0));
    let doc_encoder_seed = derive_seed(spec.seed, &[0xD0C]);
    let columns: Vec<Vec<f64>> = (0..spec.doc_vocab)
        .map(|j| FrozenDocEncoder::column(doc_encoder_seed, d, first_word + j as u32))
        .collect();

    let doc_texts: Vec<String> = order
        .par_iter()
        .map(|&src| {
            fit_text(&vectors[src], &columns, first_word, spec.words_per_doc)
                .into_iter()
                .map(|id| vocab.token(id).unwrap_or("[UNK]").to_string())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    let mut docs = DocStore::new();
    let mut data = Vec::with_capacity(spec.corpus_size * d);
    let mut qrels = RelevanceJudgments::new();
    for (i, &src) in order.iter().enumerate() {
        let id = format!("D{i:05}");
        docs.push(id.clone(), doc_texts[i].clone())?;
        data.extend(vectors[src].iter().map(|&x| x as f32));
        if let Some((q, g)) = owner[src] {
            qrels.insert(&qids[q], &id, g as i64)?;
        }
    }
    let store = EmbeddingStore::from_matrix(Matrix::from_vec(spec.corpus_size, d, data))?;

    let mut train = QuerySet::default();
    let mut val = QuerySet::default();
    for q in 0..n_queries {
        let toks = tokenize(&texts[q], &vocab, 32);
        let set = if q < spec.n_train {
            &mut train
        } else {
            &mut val
        };
        set.push(qids[q].clone(), texts[q].clone(), toks);
    }
    Ok(SyntheticData {
        docs,
        store,
        vocab,
        train,
        val,
        qrels,
        latents: qids.into_iter().zip(latents).collect(),
        doc_encoder_seed,
    })
}

impl SyntheticData {
    pub fn frozen_encoder(&self) -> FrozenDocEncoder {
        FrozenDocEncoder::new(
            self.doc_encoder_seed,
            self.vocab.len(),
            self.store.dim(),
            NormMode::L2,
        )
    }

    /// Candidate pool from dense search with each latent (plus optional noise).
    pub fn latent_pool(
        &self,
        queries: &QuerySet,
        sigma: f64,
        depth: usize,
        seed: u64,
    ) -> Result<CandidatePool> {
        let d = self.store.dim();
        let lists = queries
            .query_ids
            .par_iter()
            .enumerate()
            .map(|(i, qid)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x9001, i as u64]));
                let q: Vec<f64> = self.latents[qid]
                    .iter()
                    .map(|l| l + sigma / (d as f64).sqrt() * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Ok((qid.clone(), dense_search(&self.store, &q, depth)?))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(CandidatePool {
            provenance: format!("latent;sigma={sigma};n_pool={depth}"),
            lists,
        })
    }

    /// Candidate pool from dense search with an encoder.
    pub fn encoder_pool(
        &self,
        params: &EncoderParams,
        queries: &QuerySet,
        depth: usize,
    ) -> Result<CandidatePool> {
        let lists = queries
            .query_ids
            .par_iter()
            .zip(&queries.token_id_sequences)
            .map(|(qid, toks)| {
                let q = params.encode_eval(toks)?;
                Ok((qid.clone(), dense_search(&self.store, &q, depth)?))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(CandidatePool {
            provenance: format!("dense;n_pool={depth}"),
            lists,
        })
    }

    pub fn table(&self, queries: &QuerySet, pool: &CandidatePool) -> QueryTable {
        QueryTable::build(queries, &self.qrels, &self.docs, pool)
    }

    /// Writes the testbed as ordinary pipeline files and returns a training
    /// config pointing at them. Embeddings are the planted vectors; pools come
    /// from noisy latent search.
    /// Paths in the returned config are relative to `dir`; `template` supplies
    /// every other setting.
    pub fn export(
        &self,
        dir: &Path,
        template: &TrainConfig,
        pool_sigma: f64,
        pool_depth: usize,
        seed: u64,
    ) -> Result<TrainConfig> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = |name: &str| dir.join(name);
        let rel = |name: &str| Some(PathBuf::from(name));
        write_collection(&self.docs, p("collection.tsv"))?;
        self.vocab.save(p("vocab.tsv"))?;
        write_embeddings(&self.store.to_matrix(), p("embeddings.cdre"))?;
        write_qrels(&self.qrels, p("qrels.txt"))?;
        for (name, set, s) in [("train", &self.train, seed), ("val", &self.val, seed ^ 1)] {
            let mut text = String::new();
            for (id, t) in set.query_ids.iter().zip(&set.texts) {
                let _ = writeln!(text, "{id}\t{t}");
            }
            let path = p(&format!("{name}_queries.tsv"));
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            self.latent_pool(set, pool_sigma, pool_depth, s)?
                .write(&self.docs, p(&format!("{name}_pool.tsv")))?;
        }
        let mut cfg = TrainConfig {
            seed,
            dim: self.store.dim(),
            out_dim: self.store.dim(),
            paths: Default::default(),
            ..template.clone()
        };
        let paths = &mut cfg.paths;
        paths.collection = rel("collection.tsv");
        paths.vocab = rel("vocab.tsv");
        paths.embeddings = rel("embeddings.cdre");
        paths.train_queries = rel("train_queries.tsv");
        paths.train_qrels = rel("qrels.txt");
        paths.train_pool = rel("train_pool.tsv");
        paths.val_queries = rel("val_queries.tsv");
        paths.val_qrels = rel("qrels.txt");
        paths.val_pool = rel("val_pool.tsv");
        paths.out_dir = rel("run");
        Ok(cfg)
    }
}

/// Training settings shared by the experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Template for every fine-tuning run; policy, loss and seed are overridden.
    pub finetune: TrainConfig,
    /// Template for base pre-training (random triplets until validation stalls).
    pub base: TrainConfig,
    /// Depth of first-stage pools.
    pub pool_depth: usize,
    /// Noise of the latent first stage used by fresh (non-base) runs.
    pub first_stage_noise: f64,
}

impl ExperimentConfig {
    /// Fresh encoders trained to convergence, for the negative-count sweep.
    pub fn saturation() -> Self {
        let mut cfg = Self::desk(8);
        cfg.finetune.base_lr = 0.1;
        cfg.finetune.epochs = 300;
        cfg
    }

    pub fn desk(dim: usize) -> Self {
        let finetune = TrainConfig {
            batch_size: 32,
            n_candidates: 128,
            base_lr: 3e-3,
            warmup_steps: 20,
            epochs: 60,
            eval_every: 7,
            patience: 0,
            val_depth: 128,
            dim,
            out_dim: dim,
            agg_mode: AggMode::Mean,
            ..TrainConfig::default()
        };
        let base = TrainConfig {
            n_candidates: 2,
            policy: NegativePolicy::RandomOnly,
            loss: crate::trainer::LossConfig {
                kind: LossKind::MaxMargin,
                ..Default::default()
            },
            base_lr: 1e-2,
            epochs: 300,
            patience: 10,
            ..finetune.clone()
        };
        Self {
            finetune,
            base,
            pool_depth: 1000,
            first_stage_noise: 0.5,
        }
    }
}

/// Summary of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub label: String,
    pub initial_mrr: f64,
    pub final_mrr: f64,
    pub best_mrr: f64,
    pub losses: Vec<f64>,
    pub val_curve: Vec<(u64, f64)>,
}

impl RunSummary {
    fn from_outcome(label: impl Into<String>, o: &TrainOutcome) -> Self {
        Self {
            label: label.into(),
            initial_mrr: o.initial_mrr,
            final_mrr: o.final_mrr,
            best_mrr: o.selection.best_mrr,
            losses: o
                .log
                .iter()
                .filter(|r| !r.loss.is_nan())
                .map(|r| r.loss)
                .collect(),
            val_curve: o.val_curve(),
        }
    }
}

/// Trains the base encoder from scratch on random triplets until validation
/// MRR stops improving; returns the best parameters and their MRR.
pub fn pretrain_base(
    data: &SyntheticData,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(EncoderParams, f64)> {
    let train_pool = data.latent_pool(&data.train, cfg.first_stage_noise, cfg.pool_depth, seed)?;
    let train = data.table(&data.train, &train_pool);
    // base validation ranks the whole corpus, not a pool
    let val_all = full_corpus_table(data, &data.val);
    let mut config = cfg.base.clone();
    config.seed = derive_seed(seed, &[0xBA5E]);
    config.val_depth = usize::MAX;
    let params = EncoderParams::init(
        data.vocab.len(),
        config.dim,
        config.out_dim,
        config.agg_mode,
        false,
        config.seed,
    )?;
    let trainer = Trainer {
        store: &data.store,
        train: &train,
        val: &val_all,
        config,
    };
    let out = trainer.fit(TrainerState::new(params), None)?;
    Ok((out.selection.best_params, out.selection.best_mrr))
}

/// Val table whose "pool" is the whole corpus (exhaustive reranking).
fn full_corpus_table(data: &SyntheticData, queries: &QuerySet) -> QueryTable {
    let mut t = data.table(queries, &CandidatePool::default());
    let all: Vec<usize> = (0..data.store.count()).collect();
    for p in &mut t.pool {
        *p = all.clone();
    }
    t
}

/// One fine-tuning arm: negative policy and loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arm {
    pub policy: NegativePolicy,
    pub loss: LossKind,
}

impl Arm {
    pub fn label(&self) -> String {
        format!("{}+{}", self.loss, self.policy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegativeTypeResult {
    pub seed: u64,
    pub base_mrr: f64,
    pub arms: Vec<RunSummary>,
}

impl NegativeTypeResult {
    pub fn arm(&self, label: &str) -> Option<&RunSummary> {
        self.arms.iter().find(|a| a.label == label)
    }
}

/// Fine-tunes the base under each arm on pools retrieved by the base itself.
/// Arms share batch order and negative sampling (same seed), so only the policy
/// and the loss differ.
pub fn negative_type_experiment(
    spec: &SyntheticSpec,
    cfg: &ExperimentConfig,
    arms: &[Arm],
    seed: u64,
) -> Result<NegativeTypeResult> {
    let mut spec = spec.clone();
    spec.seed = seed;
    let data = gen_synthetic(&spec)?;
    let (base, _) = pretrain_base(&data, cfg, seed)?;
    let train_pool = data.encoder_pool(&base, &data.train, cfg.pool_depth)?;
    let val_pool = data.encoder_pool(&base, &data.val, cfg.pool_depth)?;
    let train = data.table(&data.train, &train_pool);
    let val = data.table(&data.val, &val_pool);
    let runs = arms
        .par_iter()
        .map(|arm| {
            let mut config = cfg.finetune.clone();
            config.policy = arm.policy;
            config.loss.kind = arm.loss;
            config.seed = derive_seed(seed, &[0xF17E]);
            let trainer = Trainer {
                store: &data.store,
                train: &train,
                val: &val,
                config,
            };
            let out = trainer.fit(TrainerState::new(base.clone()), None)?;
            Ok(RunSummary::from_outcome(arm.label(), &out))
        })
        .collect::<Result<Vec<_>>>()?;
    let base_mrr = runs.first().map_or(0.0, |r| r.initial_mrr);
    Ok(NegativeTypeResult {
        seed,
        base_mrr,
        arms: runs,
    })
}

/// Loss-type comparison on the retrieved policy: identical batches for both losses.
pub fn loss_type_experiment(
    spec: &SyntheticSpec,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<NegativeTypeResult> {
    let arms = [LossKind::ListNet, LossKind::MaxMargin].map(|loss| Arm {
        policy: NegativePolicy::RetrievedTopN,
        loss,
    });
    negative_type_experiment(spec, cfg, &arms, seed)
}

/// Listnet-minus-maxmargin final MRR gap for a single-positive and a
/// multi-positive spec built from the same seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiPositiveGap {
    pub seed: u64,
    pub single: f64,
    pub multi: f64,
}

pub fn multi_positive_experiment(
    single: &SyntheticSpec,
    multi: &SyntheticSpec,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<MultiPositiveGap> {
    let gap = |spec: &SyntheticSpec| -> Result<f64> {
        let r = loss_type_experiment(spec, cfg, seed)?;
        Ok(r.arms[0].final_mrr - r.arms[1].final_mrr)
    };
    Ok(MultiPositiveGap {
        seed,
        single: gap(single)?,
        multi: gap(multi)?,
    })
}

/// Final and best validation MRR of a fresh encoder for each negative count.
#[derive(Debug, Clone, PartialEq)]
pub struct CountCell {
    pub n_negatives: usize,
    pub seed: u64,
    pub final_mrr: f64,
    pub best_mrr: f64,
}

/// For each (N, seed): fresh encoder trained with the retrieved policy and
/// `N` negatives per query (context `N + k`). Pools come from a noisy-latent
/// first stage. Cells run in parallel.
pub fn negative_count_experiment(
    spec: &SyntheticSpec,
    cfg: &ExperimentConfig,
    n_values: &[usize],
    seeds: &[u64],
) -> Result<Vec<CountCell>> {
    if n_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("N values must be strictly ascending".into()));
    }
    if let Some(&max) = n_values.last() {
        if max + spec.k() > spec.corpus_size {
            return Err(Error::Config("largest N exceeds corpus size".into()));
        }
    }
    let prepared = seeds
        .par_iter()
        .map(|&seed| {
            let mut s = spec.clone();
            s.seed = seed;
            let data = gen_synthetic(&s)?;
            let train_pool =
                data.latent_pool(&data.train, cfg.first_stage_noise, cfg.pool_depth, seed)?;
            let val_pool =
                data.latent_pool(&data.val, cfg.first_stage_noise, cfg.pool_depth, seed ^ 1)?;
            let train = data.table(&data.train, &train_pool);
            let val = data.table(&data.val, &val_pool);
            Ok((seed, data, train, val))
        })
        .collect::<Result<Vec<_>>>()?;
    let cells: Vec<(usize, usize)> = (0..prepared.len())
        .flat_map(|i| n_values.iter().map(move |&n| (i, n)))
        .collect();
    cells
        .par_iter()
        .map(|&(i, n)| {
            let (seed, data, train, val) = &prepared[i];
            let mut config = cfg.finetune.clone();
            config.policy = NegativePolicy::RetrievedTopN;
            config.n_candidates = n + spec.k();
            config.seed = derive_seed(*seed, &[0xC0DE]);
            let params = EncoderParams::init(
                data.vocab.len(),
                config.dim,
                config.out_dim,
                config.agg_mode,
                false,
                config.seed,
            )?;
            let trainer = Trainer {
                store: &data.store,
                train,
                val,
                config,
            };
            let out = trainer.fit(TrainerState::new(params), None)?;
            Ok(CountCell {
                n_negatives: n,
                seed: *seed,
                final_mrr: out.final_mrr,
                best_mrr: out.selection.best_mrr,
            })
        })
        .collect()
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// `N  mean  median` per negative count, over best validation MRR.
pub fn count_table(cells: &[CountCell]) -> String {
    let mut by_n: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for c in cells {
        by_n.entry(c.n_negatives).or_default().push(c.best_mrr);
    }
    let mut s = String::from("n_negatives\tmean_mrr10\tmedian_mrr10\tseeds\n");
    for (n, v) in &by_n {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let _ = writeln!(s, "{n}\t{mean:.6}\t{:.6}\t{}", median(v), v.len());
    }
    s
}

/// `seed  arm  initial  final  best` rows.
pub fn arms_table(results: &[NegativeTypeResult]) -> String {
    let mut s = String::from("seed\tarm\tbase_mrr10\tfinal_mrr10\tbest_mrr10\n");
    for r in results {
        for a in &r.arms {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}",
                r.seed, a.label, r.base_mrr, a.final_mrr, a.best_mrr
            );
        }
    }
    s
}

/// MRR@10 of ranking the whole corpus by each query's latent (the planted optimum).
pub fn oracle_mrr(data: &SyntheticData, queries: &QuerySet) -> Result<f64> {
    let mut total = 0.0;
    for qid in &queries.query_ids {
        let hits = dense_search(&data.store, &data.latents[qid], 10)?;
        let rr = hits
            .iter()
            .position(|(d, _)| {
                data.qrels
                    .grade(qid, data.docs.id(*d))
                    .is_some_and(|g| g >= 1)
            })
            .map_or(0.0, |r| 1.0 / (r + 1) as f64);
        total += rr;
    }
    Ok(total / queries.len() as f64)
}
