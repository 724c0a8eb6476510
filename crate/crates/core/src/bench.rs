//! Reranking latency benchmark over pre-resident embeddings.
//!
//! Each timed query encodes a token sequence, scores its candidate set and
//! sorts the scores. Data loading is outside the timed region.

use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::embed_store::EmbeddingStore;
use crate::encoder::{AggMode, EncoderParams};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::ranker::rerank;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub dim: usize,
    pub n_candidates: usize,
    pub n_queries: usize,
    pub corpus_size: usize,
    pub vocab_size: usize,
    pub query_len: usize,
    /// Untimed queries run before measurement.
    pub warmup: usize,
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            dim: 768,
            n_candidates: 1000,
            n_queries: 1000,
            corpus_size: 10_000,
            vocab_size: 4096,
            query_len: 32,
            warmup: 20,
            threads: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    /// Per-query wall time in milliseconds, in query order.
    pub latencies_ms: Vec<f64>,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub threads: usize,
}

impl BenchReport {
    pub fn summary(&self) -> String {
        format!(
            "queries={} threads={} mean_ms={:.4} p95_ms={:.4}",
            self.latencies_ms.len(),
            self.threads,
            self.mean_ms,
            self.p95_ms
        )
    }
}

/// Nearest-rank percentile, `q` in (0, 1].
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

struct Fixture {
    params: EncoderParams,
    store: EmbeddingStore,
    queries: Vec<(Vec<u32>, Vec<usize>)>,
}

fn fixture(cfg: &BenchConfig) -> Result<Fixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let data: Vec<f32> = (0..cfg.corpus_size * cfg.dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z as f32
        })
        .collect();
    let store = EmbeddingStore::from_matrix(Matrix::from_vec(cfg.corpus_size, cfg.dim, data))?;
    let params = EncoderParams::init(
        cfg.vocab_size,
        cfg.dim,
        cfg.dim,
        AggMode::Mean,
        false,
        cfg.seed,
    )?;
    let ids: Vec<usize> = (0..cfg.corpus_size).collect();
    let queries = (0..cfg.warmup + cfg.n_queries)
        .map(|_| {
            let tokens = (0..cfg.query_len)
                .map(|_| rng.random_range(3..cfg.vocab_size as u32))
                .collect();
            let cands = ids
                .choose_multiple(&mut rng, cfg.n_candidates)
                .copied()
                .collect();
            (tokens, cands)
        })
        .collect();
    Ok(Fixture {
        params,
        store,
        queries,
    })
}

fn one_query(f: &Fixture, tokens: &[u32], cands: &[usize]) -> Result<f64> {
    let t = Instant::now();
    let q = f.params.encode_eval(tokens)?;
    let ranked = rerank(&q, cands, &f.store)?;
    let ms = t.elapsed().as_secs_f64() * 1e3;
    std::hint::black_box(ranked);
    Ok(ms)
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.dim == 0
        || cfg.n_queries == 0
        || cfg.threads == 0
        || cfg.vocab_size < 4
        || cfg.query_len == 0
    {
        return Err(Error::Config(
            "bench sizes and thread count must be positive".into(),
        ));
    }
    if cfg.n_candidates == 0 || cfg.n_candidates > cfg.corpus_size {
        return Err(Error::Config(
            "n_candidates must be in 1..=corpus_size".into(),
        ));
    }
    let f = fixture(cfg)?;
    for (tokens, cands) in &f.queries[..cfg.warmup] {
        one_query(&f, tokens, cands)?;
    }
    let timed = &f.queries[cfg.warmup..];
    let latencies_ms = if cfg.threads == 1 {
        timed
            .iter()
            .map(|(t, c)| one_query(&f, t, c))
            .collect::<Result<Vec<_>>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| {
            timed
                .par_iter()
                .map(|(t, c)| one_query(&f, t, c))
                .collect::<Result<Vec<_>>>()
        })?
    };
    let mean_ms = latencies_ms.iter().sum::<f64>() / latencies_ms.len() as f64;
    Ok(BenchReport {
        p95_ms: percentile(&latencies_ms, 0.95),
        mean_ms,
        latencies_ms,
        threads: cfg.threads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_nearest_rank() {
        let xs: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&xs, 0.95), 19.0);
        assert_eq!(percentile(&xs, 1.0), 20.0);
        assert_eq!(percentile(&[3.0], 0.5), 3.0);
    }

    #[test]
    fn small_bench_runs() {
        let cfg = BenchConfig {
            dim: 16,
            n_candidates: 10,
            n_queries: 5,
            corpus_size: 50,
            vocab_size: 40,
            warmup: 1,
            ..BenchConfig::default()
        };
        let r = run_bench(&cfg).unwrap();
        assert_eq!(r.latencies_ms.len(), 5);
        assert!(r.p95_ms >= r.latencies_ms.iter().cloned().fold(f64::INFINITY, f64::min));
        assert!(run_bench(&BenchConfig {
            n_candidates: 51,
            ..cfg
        })
        .is_err());
    }
}
