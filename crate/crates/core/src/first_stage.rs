//! First-stage retrieval: Okapi BM25 and exact dense top-k, plus candidate pools.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::corpus_io::{words, DocStore, QuerySet, Vocab, BOS_ID, PAD_ID, UNK_ID};
use crate::embed_store::EmbeddingStore;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::linalg::dot_f32_f64;

pub const DEFAULT_K1: f64 = 0.9;
pub const DEFAULT_B: f64 = 0.4;

/// Descending score, ascending doc index.
#[inline]
pub fn rank_order(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Keeps the best `k` hits under [`rank_order`], sorted.
pub fn top_k(mut hits: Vec<(usize, f64)>, k: usize) -> Vec<(usize, f64)> {
    if k == 0 {
        return Vec::new();
    }
    if hits.len() > k {
        hits.select_nth_unstable_by(k - 1, rank_order);
        hits.truncate(k);
    }
    hits.sort_unstable_by(rank_order);
    hits
}

fn is_special(t: u32) -> bool {
    t == PAD_ID || t == UNK_ID || t == BOS_ID
}

#[derive(Debug, Clone)]
pub struct Bm25Index {
    /// Indexed by token id; each list sorted by doc index.
    postings: Vec<Vec<(u32, u32)>>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    k1: f64,
    b: f64,
}

impl Bm25Index {
    /// Document length counts every word, including out-of-vocabulary ones.
    pub fn build(docs: &DocStore, vocab: &Vocab, k1: f64, b: f64) -> Result<Self> {
        if !(k1 > 0.0) || !(0.0..=1.0).contains(&b) {
            return Err(Error::Invalid(format!(
                "BM25 parameters need k1 > 0 and 0 <= b <= 1 (k1={k1}, b={b})"
            )));
        }
        let mut postings: Vec<Vec<(u32, u32)>> = vec![Vec::new(); vocab.len()];
        let mut doc_lengths = Vec::with_capacity(docs.len());
        for (d, text) in docs.texts().iter().enumerate() {
            let mut tf: BTreeMap<u32, u32> = BTreeMap::new();
            let mut len = 0u32;
            for w in words(text) {
                len += 1;
                let id = vocab.id(&w);
                if !is_special(id) {
                    *tf.entry(id).or_default() += 1;
                }
            }
            for (t, c) in tf {
                postings[t as usize].push((d as u32, c));
            }
            doc_lengths.push(len);
        }
        let avg_doc_length = if doc_lengths.is_empty() {
            0.0
        } else {
            doc_lengths.iter().map(|&l| l as f64).sum::<f64>() / doc_lengths.len() as f64
        };
        Ok(Self {
            postings,
            doc_lengths,
            avg_doc_length,
            k1,
            b,
        })
    }

    pub fn doc_count(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn params(&self) -> (f64, f64) {
        (self.k1, self.b)
    }

    fn postings(&self, t: u32) -> &[(u32, u32)] {
        if is_special(t) {
            return &[];
        }
        self.postings
            .get(t as usize)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn idf(&self, t: u32) -> f64 {
        let df = self.postings(t).len() as f64;
        let n = self.doc_count() as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, idf: f64, tf: u32, doc: usize) -> f64 {
        let tf = tf as f64;
        let len_ratio = if self.avg_doc_length > 0.0 {
            self.doc_lengths[doc] as f64 / self.avg_doc_length
        } else {
            0.0
        };
        idf * tf * (self.k1 + 1.0) / (tf + self.k1 * (1.0 - self.b + self.b * len_ratio))
    }

    /// Repeated query terms contribute once per occurrence.
    pub fn score(&self, query: &[u32], doc: usize) -> f64 {
        let mut s = 0.0;
        for &t in query {
            let plist = self.postings(t);
            if let Ok(pos) = plist.binary_search_by_key(&(doc as u32), |p| p.0) {
                s += self.term_weight(self.idf(t), plist[pos].1, doc);
            }
        }
        s
    }

    /// Top-k documents with positive score.
    pub fn search(&self, query: &[u32], k: usize) -> Vec<(usize, f64)> {
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for &t in query {
            let idf = self.idf(t);
            for &(d, tf) in self.postings(t) {
                *acc.entry(d as usize).or_default() += self.term_weight(idf, tf, d as usize);
            }
        }
        let hits = acc.into_iter().filter(|(_, s)| *s > 0.0).collect();
        top_k(hits, k)
    }
}

/// Exact maximum-inner-product search over every row.
pub fn dense_search(store: &EmbeddingStore, qvec: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
    if qvec.len() != store.dim() {
        return Err(Error::DimMismatch {
            expected: store.dim(),
            got: qvec.len(),
        });
    }
    let hits = store
        .data()
        .chunks_exact(store.dim())
        .enumerate()
        .map(|(i, row)| (i, dot_f32_f64(row, qvec)))
        .collect();
    Ok(top_k(hits, k))
}

/// A first-stage method that maps a tokenized query to ranked doc indices.
pub trait Retriever: Sync {
    fn search(&self, tokens: &[u32], k: usize) -> Result<Vec<(usize, f64)>>;
    fn provenance(&self) -> String;
}

impl Retriever for Bm25Index {
    fn search(&self, tokens: &[u32], k: usize) -> Result<Vec<(usize, f64)>> {
        Ok(Bm25Index::search(self, tokens, k))
    }

    fn provenance(&self) -> String {
        format!("method=bm25;k1={};b={}", self.k1, self.b)
    }
}

/// Dense retrieval with a query encoder against a fixed store.
pub struct DenseRetriever<'a> {
    pub params: &'a EncoderParams,
    pub store: &'a EmbeddingStore,
    pub label: String,
}

impl Retriever for DenseRetriever<'_> {
    fn search(&self, tokens: &[u32], k: usize) -> Result<Vec<(usize, f64)>> {
        let q = self.params.encode_eval(tokens)?;
        dense_search(self.store, &q, k)
    }

    fn provenance(&self) -> String {
        format!("method=dense;encoder={}", self.label)
    }
}

/// Per-query candidate lists from one first-stage method.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidatePool {
    pub provenance: String,
    pub lists: BTreeMap<String, Vec<(usize, f64)>>,
}

impl CandidatePool {
    pub fn get(&self, qid: &str) -> Option<&[(usize, f64)]> {
        self.lists.get(qid).map(Vec::as_slice)
    }

    pub fn to_text(&self, docs: &DocStore) -> String {
        let mut out = format!("#provenance={}\n", self.provenance);
        for (qid, list) in &self.lists {
            for (rank, (d, s)) in list.iter().enumerate() {
                let _ = writeln!(out, "{qid}\t{}\t{}\t{s}", rank + 1, docs.id(*d));
            }
        }
        out
    }

    pub fn write(&self, docs: &DocStore, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text(docs)).map_err(|e| Error::io(path, e))
    }

    pub fn parse(raw: &str, docs: &DocStore, path: &Path) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = raw.lines().enumerate();
        let provenance = match lines.next() {
            Some((_, l)) if l.starts_with("#provenance=") => l["#provenance=".len()..].to_string(),
            _ => return Err(perr(1, "missing `#provenance=` header".into())),
        };
        let mut lists: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(perr(
                    i + 1,
                    format!("expected 4 tab-separated fields, found {}", f.len()),
                ));
            }
            let rank: usize = f[1]
                .parse()
                .map_err(|_| perr(i + 1, format!("bad rank `{}`", f[1])))?;
            let doc = docs
                .index_of(f[2])
                .ok_or_else(|| perr(i + 1, format!("unknown doc id `{}`", f[2])))?;
            let score: f64 = f[3]
                .parse()
                .map_err(|_| perr(i + 1, format!("bad score `{}`", f[3])))?;
            let list = lists.entry(f[0].to_string()).or_default();
            if rank != list.len() + 1 {
                return Err(perr(i + 1, format!("rank {rank} out of sequence")));
            }
            if let Some(&(_, prev)) = list.last() {
                if score > prev {
                    return Err(perr(i + 1, "scores must be non-increasing".into()));
                }
            }
            if list.iter().any(|(d, _)| *d == doc) {
                return Err(perr(i + 1, format!("duplicate doc `{}`", f[2])));
            }
            list.push((doc, score));
        }
        Ok(Self { provenance, lists })
    }

    pub fn read(docs: &DocStore, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&raw, docs, path)
    }
}

/// Outcome of pool construction, including queries that could not be searched.
#[derive(Debug, Clone)]
pub struct PoolBuild {
    pub pool: CandidatePool,
    pub skipped: Vec<String>,
}

/// Top-`n_pool` candidates per query. Queries without any content token are skipped.
pub fn build_candidate_pool<R: Retriever + ?Sized>(
    retriever: &R,
    queries: &QuerySet,
    n_pool: usize,
) -> Result<PoolBuild> {
    let results: Vec<Option<Vec<(usize, f64)>>> = queries
        .token_id_sequences
        .par_iter()
        .map(|toks| {
            if toks.iter().all(|&t| t == BOS_ID || t == PAD_ID) {
                return Ok(None);
            }
            retriever.search(toks, n_pool).map(Some)
        })
        .collect::<Result<_>>()?;
    let mut pool = CandidatePool {
        provenance: format!("{};n_pool={n_pool}", retriever.provenance()),
        lists: BTreeMap::new(),
    };
    let mut skipped = Vec::new();
    for (qid, res) in queries.query_ids.iter().zip(results) {
        match res {
            Some(list) => {
                pool.lists.insert(qid.clone(), list);
            }
            None => {
                log::warn!("query {qid} has an empty token list; skipped");
                skipped.push(qid.clone());
            }
        }
    }
    Ok(PoolBuild { pool, skipped })
}
