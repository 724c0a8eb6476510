//! Fixed document embedding matrix and its on-disk format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CDRE" | version: u32 = 1 | dim: u32 | count: u64 | count*dim f32 LE, row-major
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use memmap2::Mmap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::corpus_io::{words, DocStore, Vocab, BOS_ID, UNK_ID};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const EMBED_MAGIC: &[u8; 4] = b"CDRE";
pub const EMBED_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

pub fn encode_header(magic: &[u8; 4], dim: u32, count: u64) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[..4].copy_from_slice(magic);
    h[4..8].copy_from_slice(&EMBED_VERSION.to_le_bytes());
    h[8..12].copy_from_slice(&dim.to_le_bytes());
    h[12..20].copy_from_slice(&count.to_le_bytes());
    h
}

pub fn check_finite(m: &Matrix<f32>) -> Result<()> {
    if let Some(pos) = m.as_slice().iter().position(|v| !v.is_finite()) {
        let cols = m.cols().max(1);
        return Err(Error::NonFinite(format!(
            "row {}, col {}",
            pos / cols,
            pos % cols
        )));
    }
    Ok(())
}

/// Serializes to the `CDRE` byte layout.
pub fn embeddings_to_bytes(matrix: &Matrix<f32>) -> Result<Vec<u8>> {
    check_finite(matrix)?;
    if matrix.cols() == 0 {
        return Err(Error::Invalid("embedding dim must be positive".into()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + matrix.as_slice().len() * 4);
    out.extend_from_slice(&encode_header(
        EMBED_MAGIC,
        matrix.cols() as u32,
        matrix.rows() as u64,
    ));
    for v in matrix.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn write_embeddings(matrix: &Matrix<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = embeddings_to_bytes(matrix)?;
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Validates a header and returns `(dim, count)`.
fn parse_header(bytes: &[u8]) -> Result<(usize, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "file shorter than the {HEADER_LEN}-byte header"
        )));
    }
    if &bytes[..4] != EMBED_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != EMBED_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    if dim == 0 {
        return Err(Error::Format("dim is zero".into()));
    }
    let expected = (count as u128) * (dim as u128) * 4;
    let found = (bytes.len() - HEADER_LEN) as u128;
    if found < expected {
        return Err(Error::Truncated {
            expected: expected as u64,
            found: found as u64,
        });
    }
    if found > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            found - expected
        )));
    }
    Ok((dim, count as usize))
}

enum Backing {
    Owned(Vec<f32>),
    Mapped(Mmap),
}

/// Read-only matrix of document embeddings, one row per dense doc index.
pub struct EmbeddingStore {
    dim: usize,
    count: usize,
    backing: Backing,
}

impl std::fmt::Debug for EmbeddingStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmbeddingStore")
            .field("dim", &self.dim)
            .field("count", &self.count)
            .field("mapped", &matches!(self.backing, Backing::Mapped(_)))
            .finish()
    }
}

impl EmbeddingStore {
    pub fn from_matrix(matrix: Matrix<f32>) -> Result<Self> {
        check_finite(&matrix)?;
        if matrix.cols() == 0 {
            return Err(Error::Invalid("embedding dim must be positive".into()));
        }
        Ok(Self {
            dim: matrix.cols(),
            count: matrix.rows(),
            backing: Backing::Owned(matrix.into_vec()),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// All rows as one row-major slice.
    pub fn data(&self) -> &[f32] {
        match &self.backing {
            Backing::Owned(v) => v,
            Backing::Mapped(m) => {
                let payload = &m[HEADER_LEN..];
                // SAFETY: the map is page aligned and HEADER_LEN is a multiple of 4, so
                // the payload is f32-aligned; `open_embeddings` only produces `Mapped`
                // on little-endian targets, and every bit pattern is a valid f32.
                unsafe {
                    std::slice::from_raw_parts(payload.as_ptr() as *const f32, payload.len() / 4)
                }
            }
        }
    }

    pub fn row(&self, index: usize) -> Result<&[f32]> {
        if index >= self.count {
            return Err(Error::OutOfRange {
                index,
                count: self.count,
            });
        }
        Ok(&self.data()[index * self.dim..(index + 1) * self.dim])
    }

    /// Gathers rows in the requested order; duplicates are repeated.
    pub fn get_rows(&self, ids: &[usize]) -> Result<Matrix<f32>> {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            data.extend_from_slice(self.row(id)?);
        }
        Ok(Matrix::from_vec(ids.len(), self.dim, data))
    }

    pub fn to_matrix(&self) -> Matrix<f32> {
        Matrix::from_vec(self.count, self.dim, self.data().to_vec())
    }
}

pub fn open_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    // SAFETY: the file is treated as read-only; concurrent truncation by another
    // process is outside this type's contract.
    let map = unsafe { Mmap::map(&file) }.map_err(|e| Error::io(path, e))?;
    let (dim, count) = parse_header(&map)?;
    let store = if cfg!(target_endian = "little") && (map.as_ptr() as usize).is_multiple_of(4) {
        EmbeddingStore {
            dim,
            count,
            backing: Backing::Mapped(map),
        }
    } else {
        let data = map[HEADER_LEN..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        EmbeddingStore {
            dim,
            count,
            backing: Backing::Owned(data),
        }
    };
    if let Some(pos) = store.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "row {}, col {}",
            pos / dim,
            pos % dim
        )));
    }
    Ok(store)
}

/// Reads the header only.
pub fn read_header(path: impl AsRef<Path>) -> Result<(usize, usize)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_header(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    L2,
    None,
}

/// Seeded random projection of bag-of-words counts.
///
/// Column `j` of the projection (the vector for token id `j`) is drawn from its
/// own ChaCha stream, so it depends only on `(seed, dim, j)`.
#[derive(Debug, Clone)]
pub struct FrozenDocEncoder {
    dim: usize,
    vocab_size: usize,
    /// vocab_size × dim; row j is the projection column for token j.
    columns: Matrix<f64>,
    pub norm_mode: NormMode,
}

impl FrozenDocEncoder {
    pub fn new(seed: u64, vocab_size: usize, dim: usize, norm_mode: NormMode) -> Self {
        let mut columns = Matrix::zeros(vocab_size, dim);
        for j in 0..vocab_size {
            columns
                .row_mut(j)
                .copy_from_slice(&Self::column(seed, dim, j as u32));
        }
        Self {
            dim,
            vocab_size,
            columns,
            norm_mode,
        }
    }

    pub fn column(seed: u64, dim: usize, token: u32) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(token as u64);
        let scale = 1.0 / (dim as f64).sqrt();
        (0..dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn embed_text(&self, text: &str, vocab: &Vocab) -> Vec<f32> {
        let mut acc = vec![0.0f64; self.dim];
        for w in words(text) {
            let id = vocab.id(&w);
            if id == UNK_ID || id == BOS_ID || id as usize >= self.vocab_size {
                continue;
            }
            for (a, c) in acc.iter_mut().zip(self.columns.row(id as usize)) {
                *a += c;
            }
        }
        if self.norm_mode == NormMode::L2 {
            let n = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                acc.iter_mut().for_each(|v| *v /= n);
            }
        }
        acc.into_iter().map(|v| v as f32).collect()
    }
}

/// Row i is the frozen embedding of document i.
pub fn encode_documents(enc: &FrozenDocEncoder, docs: &DocStore, vocab: &Vocab) -> Matrix<f32> {
    let mut m = Matrix::zeros(docs.len(), enc.dim());
    for (i, text) in docs.texts().iter().enumerate() {
        m.row_mut(i).copy_from_slice(&enc.embed_text(text, vocab));
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus_io::build_vocab;

    #[test]
    fn zero_matrix_file_size() {
        let bytes = embeddings_to_bytes(&Matrix::zeros(2, 3)).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 24);
        assert_eq!(&bytes[..4], b"CDRE");
    }

    #[test]
    fn write_open_round_trip() {
        let m = Matrix::from_vec(2, 3, vec![0.5, -1.0, 3.25, 1e-30, f32::MAX, -0.0]);
        let f = tempfile::NamedTempFile::new().unwrap();
        write_embeddings(&m, f.path()).unwrap();
        let store = open_embeddings(f.path()).unwrap();
        assert_eq!((store.dim(), store.count()), (3, 2));
        let got = store.get_rows(&[0, 1]).unwrap();
        for (a, b) in got.as_slice().iter().zip(m.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn nan_rejected() {
        let m = Matrix::from_vec(1, 2, vec![1.0, f32::NAN]);
        assert!(matches!(embeddings_to_bytes(&m), Err(Error::NonFinite(_))));
    }

    #[test]
    fn corrupt_headers() {
        let good = embeddings_to_bytes(&Matrix::from_vec(10, 2, vec![1.0; 20])).unwrap();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(parse_header(&bad_magic), Err(Error::Format(_))));
        let truncated = &good[..good.len() - 8];
        assert!(matches!(
            parse_header(truncated),
            Err(Error::Truncated { .. })
        ));
        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(matches!(parse_header(&bad_version), Err(Error::Format(_))));
    }

    #[test]
    fn get_rows_order_and_duplicates() {
        let store =
            EmbeddingStore::from_matrix(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(
            store.get_rows(&[1, 0]).unwrap().as_slice(),
            &[3.0, 4.0, 1.0, 2.0]
        );
        assert_eq!(
            store.get_rows(&[0, 0]).unwrap().as_slice(),
            &[1.0, 2.0, 1.0, 2.0]
        );
        assert!(matches!(
            store.get_rows(&[2]),
            Err(Error::OutOfRange { index: 2, count: 2 })
        ));
    }

    #[test]
    fn frozen_encoder_degenerate_and_deterministic() {
        let mut docs = DocStore::new();
        docs.push("D1", "apple banana").unwrap();
        docs.push("D2", "apple banana").unwrap();
        docs.push("D3", "???").unwrap();
        let vocab = build_vocab(&docs, [], 1);
        let enc = FrozenDocEncoder::new(7, vocab.len(), 8, NormMode::L2);
        let m = encode_documents(&enc, &docs, &vocab);
        assert_eq!(m.row(0), m.row(1));
        assert!(m.row(2).iter().all(|v| *v == 0.0));
        let n: f32 = m.row(0).iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-5);
        let again = encode_documents(
            &FrozenDocEncoder::new(7, vocab.len(), 8, NormMode::L2),
            &docs,
            &vocab,
        );
        assert_eq!(m, again);
    }
}
