//! Fine-tuning loop: per-query ranking contexts, list-wise loss, Adam updates.
//!
//! Each training query contributes its judged positives (always included) plus
//! `N − k` negatives chosen by a [`NegativePolicy`]. The encoder gradient for a
//! query is `encode_backward(Xᵀ · ∂L/∂ŝ)`; gradients are averaged over the
//! batch, clipped by global norm and applied with Adam (optionally rectified)
//! and decoupled weight decay.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::{encoder_from_file, encoder_sections, TensorFile};
use crate::corpus_io::{DocStore, QuerySet, RelevanceJudgments};
use crate::embed_store::EmbeddingStore;
use crate::encoder::{AggMode, EncoderGradients, EncoderParams};
use crate::error::{Error, Result};
use crate::first_stage::CandidatePool;
use crate::linalg::{axpy, Matrix};
use crate::metrics::reciprocal_rank;
use crate::ranker::{
    listnet_loss_with_temperature, maxmargin_loss, rerank, score_candidates, LossKind, TargetLabels,
};

/// Mixes a base seed with purpose tags (splitmix64 finalizer).
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

const PURPOSE_SHUFFLE: u64 = 1;
const PURPOSE_SAMPLE: u64 = 2;
const PURPOSE_DROPOUT: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativePolicy {
    /// Pool candidates in rank order, skipping positives.
    RetrievedTopN,
    /// Uniform over the corpus, excluding positives.
    RandomOnly,
    /// `n_random` uniform negatives, the rest from the pool.
    Mixed { n_random: usize },
    /// Retrieved negatives plus `n_extra` in-batch negatives: other queries'
    /// positives first, uniform fillers after. At least `B − 1` are added.
    RetrievedPlusInBatch { n_extra: usize },
}

impl fmt::Display for NegativePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NegativePolicy::RetrievedTopN => f.write_str("retrieved_topN"),
            NegativePolicy::RandomOnly => f.write_str("random_only"),
            NegativePolicy::Mixed { n_random } => write!(f, "mixed:{n_random}"),
            NegativePolicy::RetrievedPlusInBatch { n_extra } => {
                write!(f, "retrieved_plus_inbatch:{n_extra}")
            }
        }
    }
}

impl FromStr for NegativePolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let count = |a: Option<&str>| -> Result<usize> {
            a.unwrap_or("0")
                .parse()
                .map_err(|_| Error::Config(format!("bad policy count in `{s}`")))
        };
        match name {
            "retrieved_topN" | "retrieved" => Ok(NegativePolicy::RetrievedTopN),
            "random_only" | "random" => Ok(NegativePolicy::RandomOnly),
            "mixed" => Ok(NegativePolicy::Mixed {
                n_random: count(arg)?,
            }),
            "retrieved_plus_inbatch" | "inbatch" => Ok(NegativePolicy::RetrievedPlusInBatch {
                n_extra: count(arg)?,
            }),
            other => Err(Error::Config(format!("unknown negative policy `{other}`"))),
        }
    }
}

/// Queries in dense form: tokens, graded positives, first-stage candidates.
#[derive(Debug, Clone, Default)]
pub struct QueryTable {
    pub qids: Vec<String>,
    pub tokens: Vec<Vec<u32>>,
    /// (doc index, grade ≥ 1), highest grade first.
    pub positives: Vec<Vec<(usize, u8)>>,
    pub pool: Vec<Vec<usize>>,
    /// Queries dropped because they had no positive judgment.
    pub excluded: Vec<String>,
}

impl QueryTable {
    /// Joins queries with judgments and pool lists. Queries without a positive
    /// are excluded; queries missing from the pool get an empty list.
    pub fn build(
        queries: &QuerySet,
        qrels: &RelevanceJudgments,
        docs: &DocStore,
        pool: &CandidatePool,
    ) -> Self {
        let mut t = QueryTable::default();
        for (qid, toks) in queries.query_ids.iter().zip(&queries.token_id_sequences) {
            let mut pos: Vec<(usize, u8)> = qrels
                .positives(qid, 1)
                .into_iter()
                .filter_map(|(d, g)| docs.index_of(d).map(|i| (i, g)))
                .collect();
            if pos.is_empty() {
                log::warn!("query {qid} has no positive judgment; excluded");
                t.excluded.push(qid.clone());
                continue;
            }
            pos.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            t.qids.push(qid.clone());
            t.tokens.push(toks.clone());
            t.positives.push(pos);
            t.pool.push(
                pool.get(qid)
                    .map(|l| l.iter().map(|h| h.0).collect())
                    .unwrap_or_default(),
            );
        }
        t
    }

    pub fn len(&self) -> usize {
        self.qids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.qids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchQuery {
    pub position: usize,
    pub tokens: Vec<u32>,
    pub candidates: Vec<usize>,
    pub labels: TargetLabels,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingBatch {
    pub queries: Vec<BatchQuery>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchNotes {
    /// Queries whose pool was too short and got uniform fillers.
    pub topped_up: Vec<usize>,
}

fn sample_uniform(
    rng: &mut ChaCha8Rng,
    corpus: usize,
    exclude: &HashSet<usize>,
    n: usize,
    out: &mut Vec<usize>,
) -> Result<()> {
    let mut taken: HashSet<usize> = out.iter().copied().collect();
    let available = corpus.saturating_sub(exclude.union(&taken).count());
    if available < n {
        return Err(Error::Invalid(format!(
            "corpus of {corpus} docs cannot supply {n} more negatives"
        )));
    }
    let mut added = 0;
    while added < n {
        let d = rng.random_range(0..corpus);
        if !exclude.contains(&d) && taken.insert(d) {
            out.push(d);
            added += 1;
        }
    }
    Ok(())
}

/// Builds ranking contexts of `n` candidates for the given table positions.
///
/// Positives come first (at most `n − 1` of them, highest grade first), then
/// negatives per `policy`. In-batch mode appends its extra negatives on top.
pub fn assemble_batch(
    table: &QueryTable,
    positions: &[usize],
    corpus_size: usize,
    policy: NegativePolicy,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(TrainingBatch, BatchNotes)> {
    if n < 2 {
        return Err(Error::Config("context size N must be at least 2".into()));
    }
    let mut batch = TrainingBatch::default();
    let mut notes = BatchNotes::default();
    for &p in positions {
        let positives = &table.positives[p];
        let k = positives.len().min(n - 1);
        let mut candidates: Vec<usize> = positives[..k].iter().map(|x| x.0).collect();
        let mut labels: Vec<f64> = positives[..k].iter().map(|x| x.1 as f64).collect();
        // every judged positive is excluded from negatives, even beyond the first k
        let pos_set: HashSet<usize> = positives.iter().map(|x| x.0).collect();
        let n_neg = n - k;
        let n_random = match policy {
            NegativePolicy::RandomOnly => n_neg,
            NegativePolicy::Mixed { n_random } => n_random.min(n_neg),
            _ => 0,
        };
        let n_retrieved = n_neg - n_random;
        let before = candidates.len();
        candidates.extend(
            table.pool[p]
                .iter()
                .filter(|d| !pos_set.contains(d))
                .take(n_retrieved),
        );
        let short = n_retrieved - (candidates.len() - before);
        if short > 0 {
            log::debug!("query {} pool short by {short}; topping up", table.qids[p]);
            notes.topped_up.push(p);
        }
        sample_uniform(
            rng,
            corpus_size,
            &pos_set,
            n_random + short,
            &mut candidates,
        )?;
        if let NegativePolicy::RetrievedPlusInBatch { n_extra } = policy {
            let want = n_extra.max(positions.len().saturating_sub(1));
            let mut extra = 0;
            let mut seen: HashSet<usize> = candidates.iter().copied().collect();
            'others: for &o in positions.iter().filter(|&&o| o != p) {
                for &(d, _) in &table.positives[o] {
                    if extra == want {
                        break 'others;
                    }
                    if !pos_set.contains(&d) && seen.insert(d) {
                        candidates.push(d);
                        extra += 1;
                    }
                }
            }
            sample_uniform(rng, corpus_size, &pos_set, want - extra, &mut candidates)?;
        }
        labels.resize(candidates.len(), f64::NEG_INFINITY);
        batch.queries.push(BatchQuery {
            position: p,
            tokens: table.tokens[p].clone(),
            candidates,
            labels: TargetLabels::new(labels)?,
        });
    }
    Ok((batch, notes))
}

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, constant after.
pub fn lr_schedule(step: u64, base_lr: f64, warmup_steps: u64) -> f64 {
    if warmup_steps == 0 {
        return base_lr;
    }
    base_lr * (step as f64 / warmup_steps as f64).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub rectified: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1.3e-7,
            weight_decay: 9.5e-5,
            rectified: false,
        }
    }
}

/// First and second moments with the encoder's parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub token_embeddings: Matrix<f64>,
    pub projection: Option<Matrix<f64>>,
}

impl Moments {
    pub fn zeros_like(p: &EncoderParams) -> Self {
        Self {
            token_embeddings: Matrix::zeros(p.vocab_size(), p.dim()),
            projection: p
                .projection
                .as_ref()
                .map(|m| Matrix::zeros(m.rows(), m.cols())),
        }
    }

    fn as_params(&self, like: &EncoderParams) -> EncoderParams {
        EncoderParams {
            token_embeddings: self.token_embeddings.clone(),
            projection: self.projection.clone(),
            agg_mode: like.agg_mode,
            dropout_rate: like.dropout_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub params: EncoderParams,
    pub m: Moments,
    pub v: Moments,
    pub step: u64,
}

impl TrainerState {
    pub fn new(params: EncoderParams) -> Self {
        Self {
            m: Moments::zeros_like(&params),
            v: Moments::zeros_like(&params),
            params,
            step: 0,
        }
    }
}

fn adam_update(
    param: &mut [f64],
    m: &mut [f64],
    v: &mut [f64],
    grad: Option<&[f64]>,
    lr: f64,
    cfg: &OptimizerConfig,
    bc1: f64,
    bc2: f64,
    rect: Option<f64>,
) {
    for i in 0..param.len() {
        let g = grad.map_or(0.0, |g| g[i]);
        param[i] -= lr * cfg.weight_decay * param[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        match rect {
            Some(r) => param[i] -= lr * r * m_hat / ((v[i] / bc2).sqrt() + cfg.eps),
            None if cfg.rectified => param[i] -= lr * m_hat,
            None => param[i] -= lr * m_hat / ((v[i] / bc2).sqrt() + cfg.eps),
        }
    }
}

/// One Adam step (bias-corrected; rectified when configured) at learning rate `lr`.
/// Increments `state.step`.
pub fn optimizer_step(
    state: &mut TrainerState,
    grads: &EncoderGradients,
    lr: f64,
    cfg: &OptimizerConfig,
) {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let rect = if cfg.rectified {
        let rho_inf = 2.0 / (1.0 - cfg.beta2) - 1.0;
        let rho_t = rho_inf - 2.0 * t * cfg.beta2.powf(t) / bc2;
        (rho_t > 5.0).then(|| {
            (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                .sqrt()
        })
    } else {
        None
    };
    let dim = state.params.dim();
    let vocab = state.params.vocab_size();
    for row in 0..vocab {
        let g = grads.token_rows.get(&(row as u32)).map(Vec::as_slice);
        adam_update(
            state.params.token_embeddings.row_mut(row),
            state.m.token_embeddings.row_mut(row),
            state.v.token_embeddings.row_mut(row),
            g,
            lr,
            cfg,
            bc1,
            bc2,
            rect,
        );
    }
    debug_assert_eq!(state.params.dim(), dim);
    if let (Some(p), Some(m), Some(v)) = (
        state.params.projection.as_mut(),
        state.m.projection.as_mut(),
        state.v.projection.as_mut(),
    ) {
        adam_update(
            p.as_mut_slice(),
            m.as_mut_slice(),
            v.as_mut_slice(),
            grads.projection.as_ref().map(|g| g.as_slice()),
            lr,
            cfg,
            bc1,
            bc2,
            rect,
        );
    }
}

/// Scales `grads` so its global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut EncoderGradients, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub margin: f64,
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::ListNet,
            margin: 1.0,
            temperature: 1.0,
        }
    }
}

/// Loss and d loss / d scores for one query.
pub fn query_loss(
    scores: &[f64],
    labels: &TargetLabels,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    match cfg.kind {
        LossKind::ListNet => listnet_loss_with_temperature(scores, labels, cfg.temperature),
        LossKind::MaxMargin => maxmargin_loss(scores, labels, cfg.margin),
    }
}

/// Mean loss over the batch and the batch-averaged encoder gradient.
///
/// Dropout masks are seeded by `(dropout_seed, position in batch)`.
pub fn batch_loss_and_grad(
    params: &EncoderParams,
    batch: &TrainingBatch,
    store: &EmbeddingStore,
    loss: &LossConfig,
    train_mode: bool,
    dropout_seed: u64,
) -> Result<(f64, EncoderGradients)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let per_query: Vec<(f64, EncoderGradients)> = batch
        .queries
        .par_iter()
        .enumerate()
        .map(|(i, bq)| {
            let (q, cache) = params.encode(
                &bq.tokens,
                train_mode,
                derive_seed(dropout_seed, &[i as u64]),
            )?;
            let x = store.get_rows(&bq.candidates)?;
            let scores = score_candidates(&q, &x)?;
            let (l, gs) = query_loss(&scores, &bq.labels, loss)?;
            let mut gq = vec![0.0; q.len()];
            for (row, g) in x.iter_rows().zip(&gs) {
                if *g != 0.0 {
                    for (acc, v) in gq.iter_mut().zip(row) {
                        *acc += g * *v as f64;
                    }
                }
            }
            Ok((l, params.encode_backward(&cache, &gq)?))
        })
        .collect::<Result<_>>()?;
    let inv_b = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut grads = EncoderGradients::default();
    for (l, g) in &per_query {
        total += l;
        grads.add_scaled(inv_b, g);
    }
    Ok((total * inv_b, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub max_grad_norm: f64,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub seed: u64,
}

/// Forward, backward, clip and update. The update uses the learning rate of
/// step `state.step + 1`. A non-finite loss aborts without touching the state.
pub fn train_step(
    state: &mut TrainerState,
    batch: &TrainingBatch,
    store: &EmbeddingStore,
    cfg: &StepConfig,
) -> Result<StepOutcome> {
    let dropout_seed = derive_seed(cfg.seed, &[PURPOSE_DROPOUT, state.step]);
    let (loss, mut grads) =
        batch_loss_and_grad(&state.params, batch, store, &cfg.loss, true, dropout_seed)?;
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {loss} at step {}; update skipped",
            state.step
        )));
    }
    let grad_norm = clip_global_norm(&mut grads, cfg.max_grad_norm);
    let lr = lr_schedule(state.step + 1, cfg.base_lr, cfg.warmup_steps);
    optimizer_step(state, &grads, lr, &cfg.optimizer);
    Ok(StepOutcome {
        loss,
        grad_norm,
        lr,
    })
}

/// MRR@10 (grade ≥ 1) of reranking each query's pool with `params`.
pub fn validation_mrr(
    params: &EncoderParams,
    table: &QueryTable,
    store: &EmbeddingStore,
    depth: usize,
) -> Result<f64> {
    if table.is_empty() {
        return Ok(0.0);
    }
    let rr: Vec<f64> = (0..table.len())
        .into_par_iter()
        .map(|i| {
            let q = params.encode_eval(&table.tokens[i])?;
            let cands = &table.pool[i][..table.pool[i].len().min(depth)];
            let ranked: Vec<usize> = rerank(&q, cands, store)?.into_iter().map(|h| h.0).collect();
            let pos = &table.positives[i];
            let grade = |d: &usize| pos.iter().find(|p| p.0 == *d).map_or(0, |p| p.1);
            Ok(reciprocal_rank(&ranked, grade, 10, 1))
        })
        .collect::<Result<_>>()?;
    Ok(rr.iter().sum::<f64>() / rr.len() as f64)
}

/// Everything that controls a training run. Text form is flat `key = value`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub n_candidates: usize,
    pub policy: NegativePolicy,
    pub loss: LossConfig,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub max_grad_norm: f64,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    /// Hard stop after this many total steps (0 = unlimited).
    pub max_steps: u64,
    pub eval_every: u64,
    /// Evaluations without improvement before stopping (0 = never stop early).
    pub patience: usize,
    pub val_depth: usize,
    pub dropout: f64,
    pub dim: usize,
    pub out_dim: usize,
    pub agg_mode: AggMode,
    pub max_query_len: usize,
    pub min_freq: usize,
    pub paths: TrainPaths,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainPaths {
    pub collection: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub train_queries: Option<PathBuf>,
    pub train_qrels: Option<PathBuf>,
    pub train_pool: Option<PathBuf>,
    pub val_queries: Option<PathBuf>,
    pub val_qrels: Option<PathBuf>,
    pub val_pool: Option<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl TrainPaths {
    fn all_mut(&mut self) -> [&mut Option<PathBuf>; 12] {
        [
            &mut self.collection,
            &mut self.vocab,
            &mut self.embeddings,
            &mut self.train_queries,
            &mut self.train_qrels,
            &mut self.train_pool,
            &mut self.val_queries,
            &mut self.val_qrels,
            &mut self.val_pool,
            &mut self.init_checkpoint,
            &mut self.resume,
            &mut self.out_dir,
        ]
    }

    /// Prefixes every relative path with `dir`.
    pub fn rebase(&mut self, dir: &Path) {
        for p in self.all_mut().into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 32,
            n_candidates: 1000,
            policy: NegativePolicy::RetrievedTopN,
            loss: LossConfig::default(),
            base_lr: 1.73e-6,
            warmup_steps: 9000,
            max_grad_norm: 1.0,
            optimizer: OptimizerConfig::default(),
            epochs: 10,
            max_steps: 0,
            eval_every: 100,
            patience: 10,
            val_depth: 1000,
            dropout: 0.0,
            dim: 768,
            out_dim: 768,
            agg_mode: AggMode::Mean,
            max_query_len: 32,
            min_freq: 1,
            paths: TrainPaths::default(),
        }
    }
}

fn parse_val<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{v}` for `{key}`"))),
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let path = || Some(PathBuf::from(v));
        match key {
            "seed" => self.seed = parse_val(key, v)?,
            "batch_size" => self.batch_size = parse_val(key, v)?,
            "n_candidates" => self.n_candidates = parse_val(key, v)?,
            "policy" => self.policy = v.parse()?,
            "loss" => self.loss.kind = v.parse()?,
            "margin" => self.loss.margin = parse_val(key, v)?,
            "temperature" => self.loss.temperature = parse_val(key, v)?,
            "lr" => self.base_lr = parse_val(key, v)?,
            "warmup_steps" => self.warmup_steps = parse_val(key, v)?,
            "max_grad_norm" => self.max_grad_norm = parse_val(key, v)?,
            "beta1" => self.optimizer.beta1 = parse_val(key, v)?,
            "beta2" => self.optimizer.beta2 = parse_val(key, v)?,
            "adam_eps" => self.optimizer.eps = parse_val(key, v)?,
            "weight_decay" => self.optimizer.weight_decay = parse_val(key, v)?,
            "radam" => self.optimizer.rectified = parse_bool(key, v)?,
            "epochs" => self.epochs = parse_val(key, v)?,
            "max_steps" => self.max_steps = parse_val(key, v)?,
            "eval_every" => self.eval_every = parse_val(key, v)?,
            "patience" => self.patience = parse_val(key, v)?,
            "val_depth" => self.val_depth = parse_val(key, v)?,
            "dropout" => self.dropout = parse_val(key, v)?,
            "dim" => self.dim = parse_val(key, v)?,
            "out_dim" => self.out_dim = parse_val(key, v)?,
            "agg_mode" => self.agg_mode = v.parse()?,
            "max_query_len" => self.max_query_len = parse_val(key, v)?,
            "min_freq" => self.min_freq = parse_val(key, v)?,
            "collection" => self.paths.collection = path(),
            "vocab" => self.paths.vocab = path(),
            "embeddings" => self.paths.embeddings = path(),
            "train_queries" => self.paths.train_queries = path(),
            "train_qrels" => self.paths.train_qrels = path(),
            "train_pool" => self.paths.train_pool = path(),
            "val_queries" => self.paths.val_queries = path(),
            "val_qrels" => self.paths.val_qrels = path(),
            "val_pool" => self.paths.val_pool = path(),
            "init_checkpoint" => self.paths.init_checkpoint = path(),
            "resume" => self.paths.resume = path(),
            "out_dir" => self.paths.out_dir = path(),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Reads a config file; relative paths in it resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?;
        if let Some(dir) = path.parent() {
            cfg.paths.rebase(dir);
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let o = &self.optimizer;
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "n_candidates = {}", self.n_candidates);
        let _ = writeln!(s, "policy = {}", self.policy);
        let _ = writeln!(s, "loss = {}", self.loss.kind);
        let _ = writeln!(s, "margin = {}", self.loss.margin);
        let _ = writeln!(s, "temperature = {}", self.loss.temperature);
        let _ = writeln!(s, "lr = {}", self.base_lr);
        let _ = writeln!(s, "warmup_steps = {}", self.warmup_steps);
        let _ = writeln!(s, "max_grad_norm = {}", self.max_grad_norm);
        let _ = writeln!(s, "beta1 = {}", o.beta1);
        let _ = writeln!(s, "beta2 = {}", o.beta2);
        let _ = writeln!(s, "adam_eps = {}", o.eps);
        let _ = writeln!(s, "weight_decay = {}", o.weight_decay);
        let _ = writeln!(s, "radam = {}", o.rectified);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "max_steps = {}", self.max_steps);
        let _ = writeln!(s, "eval_every = {}", self.eval_every);
        let _ = writeln!(s, "patience = {}", self.patience);
        let _ = writeln!(s, "val_depth = {}", self.val_depth);
        let _ = writeln!(s, "dropout = {}", self.dropout);
        let _ = writeln!(s, "dim = {}", self.dim);
        let _ = writeln!(s, "out_dim = {}", self.out_dim);
        let _ = writeln!(s, "agg_mode = {}", self.agg_mode);
        let _ = writeln!(s, "max_query_len = {}", self.max_query_len);
        let _ = writeln!(s, "min_freq = {}", self.min_freq);
        let p = &self.paths;
        for (k, v) in [
            ("collection", &p.collection),
            ("vocab", &p.vocab),
            ("embeddings", &p.embeddings),
            ("train_queries", &p.train_queries),
            ("train_qrels", &p.train_qrels),
            ("train_pool", &p.train_pool),
            ("val_queries", &p.val_queries),
            ("val_qrels", &p.val_qrels),
            ("val_pool", &p.val_pool),
            ("init_checkpoint", &p.init_checkpoint),
            ("resume", &p.resume),
            ("out_dir", &p.out_dir),
        ] {
            if let Some(v) = v {
                let _ = writeln!(s, "{k} = {}", v.display());
            }
        }
        s
    }

    /// Numeric checks only; path checks happen in [`train`].
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.n_candidates < 2 {
            return bad("n_candidates must be at least 2".into());
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!(
                "lr must be finite and non-negative, got {}",
                self.base_lr
            ));
        }
        if !(self.loss.temperature > 0.0) {
            return bad("temperature must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad("optimizer betas must be in [0,1) and eps positive".into());
        }
        if self.dim == 0 || self.out_dim == 0 {
            return bad("dim and out_dim must be positive".into());
        }
        if self.max_query_len == 0 {
            return bad("max_query_len must be positive".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        if let NegativePolicy::Mixed { n_random } = self.policy {
            if n_random >= self.n_candidates {
                return bad("mixed policy needs n_random < n_candidates".into());
            }
        }
        Ok(())
    }

    pub fn step_config(&self) -> StepConfig {
        StepConfig {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps,
            max_grad_norm: self.max_grad_norm,
            optimizer: self.optimizer,
            loss: self.loss,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    /// NaN when no validation ran at this step.
    pub val_mrr10: f64,
    pub lr: f64,
}

pub fn format_log(rows: &[LogRow]) -> String {
    let mut s = String::from("step\tloss\tval_mrr10\tlr\n");
    for r in rows {
        let loss = if r.loss.is_nan() {
            String::new()
        } else {
            format!("{:.8}", r.loss)
        };
        let mrr = if r.val_mrr10.is_nan() {
            String::new()
        } else {
            format!("{:.6}", r.val_mrr10)
        };
        let _ = writeln!(s, "{}\t{loss}\t{mrr}\t{:e}", r.step, r.lr);
    }
    s
}

/// Progress of the model-selection bookkeeping, saved with the trainer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub best_params: EncoderParams,
    pub best_mrr: f64,
    pub best_step: u64,
    pub evals_since_best: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainerState,
    pub selection: Selection,
    pub log: Vec<LogRow>,
    /// Validation MRR@10 before the first update.
    pub initial_mrr: f64,
    /// Validation MRR@10 of the final parameters.
    pub final_mrr: f64,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn val_curve(&self) -> Vec<(u64, f64)> {
        self.log
            .iter()
            .filter(|r| !r.val_mrr10.is_nan())
            .map(|r| (r.step, r.val_mrr10))
            .collect()
    }
}

/// In-memory trainer over dense query tables.
pub struct Trainer<'a> {
    pub store: &'a EmbeddingStore,
    pub train: &'a QueryTable,
    pub val: &'a QueryTable,
    pub config: TrainConfig,
}

impl<'a> Trainer<'a> {
    pub fn steps_per_epoch(&self) -> u64 {
        self.train.len().div_ceil(self.config.batch_size) as u64
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &[PURPOSE_SHUFFLE, epoch]));
        order.shuffle(&mut rng);
        order
    }

    /// Batch that step `step` (0-based) trains on.
    pub fn batch_for_step(&self, step: u64) -> Result<TrainingBatch> {
        let spe = self.steps_per_epoch();
        let order = self.epoch_order(step / spe);
        let b = self.config.batch_size;
        let start = (step % spe) as usize * b;
        let positions = &order[start..(start + b).min(order.len())];
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &[PURPOSE_SAMPLE, step]));
        let (batch, notes) = assemble_batch(
            self.train,
            positions,
            self.store.count(),
            self.config.policy,
            self.config.n_candidates,
            &mut rng,
        )?;
        if !notes.topped_up.is_empty() {
            log::debug!(
                "step {step}: {} queries topped up with random negatives",
                notes.topped_up.len()
            );
        }
        Ok(batch)
    }

    pub fn validate_mrr(&self, params: &EncoderParams) -> Result<f64> {
        validation_mrr(params, self.val, self.store, self.config.val_depth)
    }

    fn total_steps(&self) -> u64 {
        let by_epochs = self.steps_per_epoch() * self.config.epochs as u64;
        if self.config.max_steps > 0 {
            by_epochs.min(self.config.max_steps)
        } else {
            by_epochs
        }
    }

    /// Trains from `state` (fresh or resumed) until the epoch budget, the step
    /// cap or early stopping ends the run.
    pub fn fit(
        &self,
        mut state: TrainerState,
        selection: Option<Selection>,
    ) -> Result<TrainOutcome> {
        self.config.validate()?;
        if self.train.is_empty() {
            return Err(Error::Config(
                "no training query has a positive judgment".into(),
            ));
        }
        let step_cfg = self.config.step_config();
        let mut log_rows = Vec::new();
        let initial_mrr = self.validate_mrr(&state.params)?;
        let mut sel = match selection {
            Some(s) => s,
            None => {
                log_rows.push(LogRow {
                    step: state.step,
                    loss: f64::NAN,
                    val_mrr10: initial_mrr,
                    lr: lr_schedule(state.step, self.config.base_lr, self.config.warmup_steps),
                });
                Selection {
                    best_params: state.params.clone(),
                    best_mrr: initial_mrr,
                    best_step: state.step,
                    evals_since_best: 0,
                }
            }
        };
        let total = self.total_steps();
        // a step cap only interrupts; evaluating there would make split runs
        // diverge from uninterrupted ones
        let budget_end = self.steps_per_epoch() * self.config.epochs as u64;
        let mut stopped_early = false;
        while state.step < total {
            let batch = self.batch_for_step(state.step)?;
            let out = train_step(&mut state, &batch, self.store, &step_cfg)?;
            let mut row = LogRow {
                step: state.step,
                loss: out.loss,
                val_mrr10: f64::NAN,
                lr: out.lr,
            };
            if state.step % self.config.eval_every == 0 || state.step == budget_end {
                let mrr = self.validate_mrr(&state.params)?;
                row.val_mrr10 = mrr;
                if mrr > sel.best_mrr {
                    sel.best_mrr = mrr;
                    sel.best_params = state.params.clone();
                    sel.best_step = state.step;
                    sel.evals_since_best = 0;
                } else {
                    sel.evals_since_best += 1;
                }
            }
            log_rows.push(row);
            if self.config.patience > 0 && sel.evals_since_best >= self.config.patience {
                stopped_early = true;
                break;
            }
        }
        let final_mrr = self.validate_mrr(&state.params)?;
        Ok(TrainOutcome {
            state,
            selection: sel,
            log: log_rows,
            initial_mrr,
            final_mrr,
            stopped_early,
        })
    }
}

/// Serializes trainer state (params, moments, step, selection) to `CDRQ`.
pub fn state_to_file(state: &TrainerState, sel: &Selection, config: &TrainConfig) -> TensorFile {
    let mut f = TensorFile::default();
    let p = &state.params;
    f.metadata.insert("kind".into(), "trainer_state".into());
    f.metadata.insert("agg_mode".into(), p.agg_mode.to_string());
    f.metadata
        .insert("dropout".into(), p.dropout_rate.to_string());
    f.metadata.insert("dim".into(), p.dim().to_string());
    f.metadata.insert("out_dim".into(), p.out_dim().to_string());
    f.metadata.insert("step".into(), state.step.to_string());
    f.metadata
        .insert("best_mrr".into(), format!("{:?}", sel.best_mrr));
    f.metadata
        .insert("best_step".into(), sel.best_step.to_string());
    f.metadata
        .insert("evals_since_best".into(), sel.evals_since_best.to_string());
    for line in config.to_text().lines() {
        if let Some((k, v)) = line.split_once(" = ") {
            f.metadata.insert(format!("config.{k}"), v.to_string());
        }
    }
    encoder_sections(p, "param.", &mut f);
    encoder_sections(&state.m.as_params(p), "m.", &mut f);
    encoder_sections(&state.v.as_params(p), "v.", &mut f);
    encoder_sections(&sel.best_params, "best.", &mut f);
    f
}

pub fn state_from_file(f: &TensorFile) -> Result<(TrainerState, Selection)> {
    let params = encoder_from_file(f, "param.")?;
    let m = encoder_from_file(f, "m.")?;
    let v = encoder_from_file(f, "v.")?;
    let best = encoder_from_file(f, "best.")?;
    let num = |k: &str| -> Result<u64> {
        f.meta(k)?
            .parse()
            .map_err(|_| Error::Format(format!("bad `{k}`")))
    };
    let state = TrainerState {
        params,
        m: Moments {
            token_embeddings: m.token_embeddings,
            projection: m.projection,
        },
        v: Moments {
            token_embeddings: v.token_embeddings,
            projection: v.projection,
        },
        step: num("step")?,
    };
    let sel = Selection {
        best_params: best,
        best_mrr: f
            .meta("best_mrr")?
            .parse()
            .map_err(|_| Error::Format("bad best_mrr".into()))?,
        best_step: num("best_step")?,
        evals_since_best: num("evals_since_best")? as usize,
    };
    Ok((state, sel))
}

/// Files written by [`train`].
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub state: PathBuf,
    pub log: PathBuf,
    pub outcome: TrainOutcome,
}

fn required<'p>(p: &'p Option<PathBuf>, key: &str) -> Result<&'p PathBuf> {
    p.as_ref()
        .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
}

/// File-driven training run.
///
/// Reads the collection, vocab, embeddings, queries, judgments and pools named in
/// `config`, trains, and writes `best.ckpt`, `last.ckpt`, `state.ckpt` and
/// `train_log.tsv` into `out_dir`. With `resume` set, continues from a saved state
/// and appends to the log.
pub fn train(config: &TrainConfig) -> Result<TrainArtifacts> {
    use crate::corpus_io::{
        build_vocab, load_collection, load_qrels, read_query_texts, tokenize_queries, Vocab,
    };

    config.validate()?;
    let p = &config.paths;
    let collection = required(&p.collection, "collection")?;
    let embeddings = required(&p.embeddings, "embeddings")?;
    let train_queries = required(&p.train_queries, "train_queries")?;
    let train_qrels = required(&p.train_qrels, "train_qrels")?;
    let train_pool = required(&p.train_pool, "train_pool")?;
    let val_queries = required(&p.val_queries, "val_queries")?;
    let val_qrels = required(&p.val_qrels, "val_qrels")?;
    let val_pool = required(&p.val_pool, "val_pool")?;
    let out_dir = required(&p.out_dir, "out_dir")?;
    for path in [
        collection,
        embeddings,
        train_queries,
        train_qrels,
        train_pool,
        val_queries,
        val_qrels,
        val_pool,
    ] {
        if !path.exists() {
            return Err(Error::Config(format!("{} does not exist", path.display())));
        }
    }

    let docs = load_collection(collection)?;
    let train_raw = read_query_texts(train_queries)?;
    let val_raw = read_query_texts(val_queries)?;
    let vocab = match &p.vocab {
        Some(v) => Vocab::load(v)?,
        None => build_vocab(
            &docs,
            train_raw.iter().map(|q| q.1.as_str()),
            config.min_freq,
        ),
    };
    let store = crate::embed_store::open_embeddings(embeddings)?;
    if store.count() != docs.len() {
        return Err(Error::Config(format!(
            "embedding rows ({}) do not match collection size ({})",
            store.count(),
            docs.len()
        )));
    }
    let train_q = tokenize_queries(&train_raw, &vocab, config.max_query_len);
    let val_q = tokenize_queries(&val_raw, &vocab, config.max_query_len);
    let train_table = QueryTable::build(
        &train_q,
        &load_qrels(train_qrels)?,
        &docs,
        &CandidatePool::read(&docs, train_pool)?,
    );
    let val_table = QueryTable::build(
        &val_q,
        &load_qrels(val_qrels)?,
        &docs,
        &CandidatePool::read(&docs, val_pool)?,
    );

    let (state, selection, mut prior_log) = if let Some(resume) = &p.resume {
        let (s, sel) = state_from_file(&TensorFile::read(resume)?)?;
        let log_path = out_dir.join("train_log.tsv");
        let prior = fs::read_to_string(&log_path).unwrap_or_default();
        (s, Some(sel), prior)
    } else {
        let mut params = match &p.init_checkpoint {
            Some(c) => crate::checkpoint::load_encoder(c)?,
            None => EncoderParams::init(
                vocab.len(),
                config.dim,
                config.out_dim,
                config.agg_mode,
                false,
                config.seed,
            )?,
        };
        params.dropout_rate = config.dropout;
        (TrainerState::new(params), None, String::new())
    };
    if state.params.vocab_size() < vocab.len() {
        return Err(Error::Config(format!(
            "encoder vocab ({}) smaller than vocab ({})",
            state.params.vocab_size(),
            vocab.len()
        )));
    }
    if state.params.out_dim() != store.dim() {
        return Err(Error::Config(format!(
            "encoder output dim {} does not match embedding dim {}",
            state.params.out_dim(),
            store.dim()
        )));
    }

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    if p.vocab.is_none() {
        vocab.save(out_dir.join("vocab.tsv"))?;
    }
    let trainer = Trainer {
        store: &store,
        train: &train_table,
        val: &val_table,
        config: config.clone(),
    };
    let outcome = trainer.fit(state, selection)?;

    let best = out_dir.join("best.ckpt");
    let last = out_dir.join("last.ckpt");
    let state_path = out_dir.join("state.ckpt");
    let log_path = out_dir.join("train_log.tsv");
    crate::checkpoint::save_encoder(
        &outcome.selection.best_params,
        outcome.selection.best_step,
        &best,
    )?;
    crate::checkpoint::save_encoder(&outcome.state.params, outcome.state.step, &last)?;
    state_to_file(&outcome.state, &outcome.selection, config).write(&state_path)?;
    let new_log = format_log(&outcome.log);
    if prior_log.is_empty() {
        prior_log = new_log;
    } else {
        prior_log.push_str(new_log.split_once('\n').map_or("", |x| x.1));
    }
    fs::write(&log_path, prior_log).map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainArtifacts {
        best_checkpoint: best,
        last_checkpoint: last,
        state: state_path,
        log: log_path,
        outcome,
    })
}

/// Per-position moving averages with the given window.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || xs.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(xs.len() - window + 1);
    let mut sum: f64 = xs[..window].iter().sum();
    out.push(sum / window as f64);
    for i in window..xs.len() {
        sum += xs[i] - xs[i - window];
        out.push(sum / window as f64);
    }
    out
}

/// Adds `alpha * grads` to the parameters directly (plain gradient step).
pub fn apply_gradient(params: &mut EncoderParams, grads: &EncoderGradients, alpha: f64) {
    for (t, row) in &grads.token_rows {
        axpy(alpha, row, params.token_embeddings.row_mut(*t as usize));
    }
    if let (Some(p), Some(g)) = (params.projection.as_mut(), grads.projection.as_ref()) {
        axpy(alpha, g.as_slice(), p.as_mut_slice());
    }
}

/// Counts of positives and candidates, for logs and reports.
pub fn batch_summary(batch: &TrainingBatch) -> BTreeMap<&'static str, usize> {
    let mut m = BTreeMap::new();
    m.insert("queries", batch.len());
    m.insert(
        "positives",
        batch
            .queries
            .iter()
            .map(|q| q.labels.positive_count())
            .sum(),
    );
    m.insert(
        "candidates",
        batch.queries.iter().map(|q| q.candidates.len()).sum(),
    );
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> QueryTable {
        QueryTable {
            qids: vec!["q0".into(), "q1".into()],
            tokens: vec![vec![2, 3], vec![2, 4]],
            positives: vec![vec![(3, 1)], vec![(20, 2), (21, 1)]],
            pool: vec![(1..=12).collect(), vec![20, 5, 6]],
            excluded: vec![],
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn retrieved_skips_positive_in_pool() {
        let (b, notes) = assemble_batch(
            &table(),
            &[0],
            100,
            NegativePolicy::RetrievedTopN,
            8,
            &mut rng(0),
        )
        .unwrap();
        assert_eq!(b.queries[0].candidates, vec![3, 1, 2, 4, 5, 6, 7, 8]);
        assert_eq!(b.queries[0].labels.positive_count(), 1);
        assert!(b.queries[0].labels.0[1..]
            .iter()
            .all(|v| *v == f64::NEG_INFINITY));
        assert!(notes.topped_up.is_empty());
    }

    #[test]
    fn random_only_excludes_positives() {
        let t = table();
        let (b, _) =
            assemble_batch(&t, &[1], 30, NegativePolicy::RandomOnly, 8, &mut rng(1)).unwrap();
        let c = &b.queries[0].candidates;
        assert_eq!(c.len(), 8);
        assert_eq!(&c[..2], &[20, 21]);
        assert!(c[2..].iter().all(|d| *d != 20 && *d != 21));
        let uniq: HashSet<_> = c.iter().collect();
        assert_eq!(uniq.len(), 8);
        let (again, _) =
            assemble_batch(&t, &[1], 30, NegativePolicy::RandomOnly, 8, &mut rng(1)).unwrap();
        assert_eq!(again, b);
    }

    #[test]
    fn short_pool_topped_up() {
        let (b, notes) = assemble_batch(
            &table(),
            &[1],
            50,
            NegativePolicy::RetrievedTopN,
            6,
            &mut rng(2),
        )
        .unwrap();
        let c = &b.queries[0].candidates;
        assert_eq!(&c[..4], &[20, 21, 5, 6]);
        assert_eq!(c.len(), 6);
        assert_eq!(notes.topped_up, vec![1]);
    }

    #[test]
    fn mixed_and_inbatch_sizes() {
        let t = table();
        let (b, _) = assemble_batch(
            &t,
            &[0],
            100,
            NegativePolicy::Mixed { n_random: 3 },
            8,
            &mut rng(3),
        )
        .unwrap();
        assert_eq!(&b.queries[0].candidates[..5], &[3, 1, 2, 4, 5]);
        assert_eq!(b.queries[0].candidates.len(), 8);
        let (b, _) = assemble_batch(
            &t,
            &[0, 1],
            100,
            NegativePolicy::RetrievedPlusInBatch { n_extra: 4 },
            5,
            &mut rng(4),
        )
        .unwrap();
        for q in &b.queries {
            assert_eq!(q.candidates.len(), 9);
        }
        assert_eq!(&b.queries[0].candidates[5..7], &[20, 21]);
    }

    #[test]
    fn schedule_and_clipping() {
        assert_eq!(lr_schedule(0, 1.0, 10), 0.0);
        assert_eq!(lr_schedule(1, 1.0, 10), 0.1);
        assert_eq!(lr_schedule(10, 1.0, 10), 1.0);
        assert_eq!(lr_schedule(50, 1.0, 10), 1.0);
        assert_eq!(lr_schedule(0, 0.5, 0), 0.5);

        let mut g = EncoderGradients::default();
        g.token_rows.insert(3, vec![6.0, 8.0]);
        let before = g.clone();
        let norm = clip_global_norm(&mut g, 1.0);
        assert_eq!(norm, 10.0);
        assert!((g.norm() - 1.0).abs() < 1e-15);
        for (a, b) in g.token_rows[&3].iter().zip(&before.token_rows[&3]) {
            assert!((a - b * 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_first_step_hand_trace() {
        let params = EncoderParams::init(4, 1, 1, AggMode::Mean, false, 0).unwrap();
        let mut state = TrainerState::new(params.clone());
        let mut g = EncoderGradients::default();
        g.token_rows.insert(2, vec![0.3]);
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        optimizer_step(&mut state, &g, 0.01, &cfg);
        // m̂ = g, v̂ = g², update = −lr·g/(|g| + ε)
        let want = params.token_embeddings.row(2)[0] - 0.01 * 0.3 / (0.3 + 1.3e-7);
        assert!((state.params.token_embeddings.row(2)[0] - want).abs() < 1e-15);
        assert_eq!(
            state.params.token_embeddings.row(1),
            params.token_embeddings.row(1)
        );
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let params = EncoderParams::init(5, 3, 2, AggMode::Mean, false, 0).unwrap();
        let mut state = TrainerState::new(params.clone());
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        optimizer_step(&mut state, &EncoderGradients::default(), 0.1, &cfg);
        assert_eq!(state.params, params);
    }

    #[test]
    fn decoupled_weight_decay() {
        let params = EncoderParams::init(2, 1, 1, AggMode::Mean, false, 0).unwrap();
        let mut state = TrainerState::new(params.clone());
        let cfg = OptimizerConfig {
            weight_decay: 0.5,
            ..Default::default()
        };
        optimizer_step(&mut state, &EncoderGradients::default(), 0.1, &cfg);
        let want = params.token_embeddings.row(0)[0] * (1.0 - 0.05);
        assert!((state.params.token_embeddings.row(0)[0] - want).abs() < 1e-15);
    }

    #[test]
    fn radam_warm_phase_uses_momentum() {
        let params = EncoderParams::init(3, 1, 1, AggMode::Mean, false, 0).unwrap();
        let mut state = TrainerState::new(params.clone());
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            rectified: true,
            ..Default::default()
        };
        let mut g = EncoderGradients::default();
        g.token_rows.insert(0, vec![2.0]);
        optimizer_step(&mut state, &g, 0.01, &cfg);
        // rho_1 < 5: un-adapted step lr·m̂ = lr·g
        let want = params.token_embeddings.row(0)[0] - 0.01 * 2.0;
        assert!((state.params.token_embeddings.row(0)[0] - want).abs() < 1e-15);
    }

    #[test]
    fn config_text_round_trip() {
        let mut c = TrainConfig::default();
        c.policy = NegativePolicy::Mixed { n_random: 7 };
        c.loss.kind = LossKind::MaxMargin;
        c.optimizer.rectified = true;
        c.paths.out_dir = Some("/tmp/x".into());
        let back = TrainConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert!(TrainConfig::parse("bogus = 1").is_err());
        assert!(TrainConfig::parse("batch_size = x").is_err());
    }

    #[test]
    fn defaults_follow_reference_settings() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.n_candidates, 1000);
        assert_eq!(c.base_lr, 1.73e-6);
        assert_eq!(c.warmup_steps, 9000);
        assert_eq!(c.optimizer.eps, 1.3e-7);
        assert_eq!(c.optimizer.weight_decay, 9.5e-5);
        assert_eq!(c.max_grad_norm, 1.0);
        assert_eq!(c.max_query_len, 32);
    }

    #[test]
    fn moving_average_basic() {
        assert_eq!(
            moving_average(&[1.0, 2.0, 3.0, 4.0], 2),
            vec![1.5, 2.5, 3.5]
        );
        assert!(moving_average(&[1.0], 2).is_empty());
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        use crate::encoder::Coordinate;
        use rand_distr::StandardNormal;

        let (b, n, d) = (2, 5, 8);
        let mut r = rng(5);
        let rows: Vec<Vec<f32>> = (0..12)
            .map(|_| (0..d).map(|_| r.sample::<f32, _>(StandardNormal)).collect())
            .collect();
        let store = EmbeddingStore::from_matrix(Matrix::from_rows(d, &rows)).unwrap();
        let queries = (0..b)
            .map(|i| {
                let mut y = vec![f64::NEG_INFINITY; n];
                y[i] = 2.0;
                y[n - 1] = 1.0;
                BatchQuery {
                    position: i,
                    tokens: vec![3 + i as u32, 7, 9],
                    candidates: (0..n).map(|j| (j * 2 + i) % 12).collect(),
                    labels: TargetLabels::new(y).unwrap(),
                }
            })
            .collect();
        let batch = TrainingBatch { queries };
        let loss = LossConfig::default();
        let mut params = EncoderParams::init(12, d, d, AggMode::Mean, true, 5).unwrap();
        let (_, grads) = batch_loss_and_grad(&params, &batch, &store, &loss, false, 0).unwrap();

        let mut coords: Vec<Coordinate> = [3u32, 4, 7, 9]
            .iter()
            .flat_map(|&token| (0..d).map(move |col| Coordinate::Token { token, col }))
            .collect();
        coords.extend(
            (0..d).flat_map(|row| (0..d).map(move |col| Coordinate::Projection { row, col })),
        );
        let h = 3e-3;
        for c in coords {
            let orig = *params.coord_mut(c);
            let mut at = |dx: f64| {
                *params.coord_mut(c) = orig + dx;
                batch_loss_and_grad(&params, &batch, &store, &loss, false, 0)
                    .unwrap()
                    .0
            };
            let numeric = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            *params.coord_mut(c) = orig;
            let err = crate::encoder::relative_error(grads.at(c), numeric);
            assert!(
                err < 1e-5,
                "{c:?}: analytic {} numeric {numeric}",
                grads.at(c)
            );
        }
    }
}
