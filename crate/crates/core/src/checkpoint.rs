//! `CDRQ` tensor container used for encoder checkpoints and trainer state.
//!
//! ```text
//! "CDRQ" | version: u32 = 1 | meta_len: u32 | meta (UTF-8 `key=value` lines)
//! | n_sections: u32 | sections...
//! section: name_len: u32 | name | rows: u64 | cols: u64 | rows*cols f64 LE
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::encoder::{AggMode, EncoderParams};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const CKPT_MAGIC: &[u8; 4] = b"CDRQ";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorFile {
    pub metadata: BTreeMap<String, String>,
    pub sections: Vec<(String, Matrix<f64>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                expected: (self.pos + n) as u64,
                found: self.bytes.len() as u64,
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Format("invalid UTF-8".into()))
    }
}

impl TensorFile {
    pub fn section(&self, name: &str) -> Option<&Matrix<f64>> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks `{key}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, m) in &self.sections {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)
            .map_err(|_| Error::Format("file shorter than magic".into()))?
            != CKPT_MAGIC
        {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let meta_len = r.u32()? as usize;
        let mut metadata = BTreeMap::new();
        for line in r.utf8(meta_len)?.lines() {
            if let Some((k, v)) = line.split_once('=') {
                metadata.insert(k.to_string(), v.to_string());
            }
        }
        let n = r.u32()?;
        let mut sections = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = r.utf8(name_len)?.to_string();
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let len = rows
                .checked_mul(cols)
                .and_then(|x| x.checked_mul(8))
                .ok_or_else(|| Error::Format("section size overflow".into()))?;
            let data = r
                .take(len)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            sections.push((name, Matrix::from_vec(rows, cols, data)));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last section".into()));
        }
        Ok(Self { metadata, sections })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Encoder tensors plus metadata; `prefix` namespaces section names.
pub fn encoder_sections(params: &EncoderParams, prefix: &str, file: &mut TensorFile) {
    file.sections.push((
        format!("{prefix}token_embeddings"),
        params.token_embeddings.clone(),
    ));
    if let Some(p) = &params.projection {
        file.sections
            .push((format!("{prefix}projection"), p.clone()));
    }
}

pub fn encoder_to_file(params: &EncoderParams, step: u64) -> TensorFile {
    let mut f = TensorFile::default();
    f.metadata.insert("kind".into(), "encoder".into());
    f.metadata
        .insert("agg_mode".into(), params.agg_mode.to_string());
    f.metadata
        .insert("vocab_size".into(), params.vocab_size().to_string());
    f.metadata.insert("dim".into(), params.dim().to_string());
    f.metadata
        .insert("out_dim".into(), params.out_dim().to_string());
    f.metadata
        .insert("dropout".into(), params.dropout_rate.to_string());
    f.metadata.insert("step".into(), step.to_string());
    encoder_sections(params, "", &mut f);
    f
}

pub fn encoder_from_file(f: &TensorFile, prefix: &str) -> Result<EncoderParams> {
    let emb = f
        .section(&format!("{prefix}token_embeddings"))
        .ok_or_else(|| Error::Format("checkpoint lacks token_embeddings".into()))?
        .clone();
    let params = EncoderParams {
        token_embeddings: emb,
        projection: f.section(&format!("{prefix}projection")).cloned(),
        agg_mode: f.meta("agg_mode")?.parse::<AggMode>()?,
        dropout_rate: f
            .meta("dropout")?
            .parse()
            .map_err(|_| Error::Format("bad dropout".into()))?,
    };
    params.validate()?;
    Ok(params)
}

pub fn save_encoder(params: &EncoderParams, step: u64, path: impl AsRef<Path>) -> Result<()> {
    encoder_to_file(params, step).write(path)
}

pub fn load_encoder(path: impl AsRef<Path>) -> Result<EncoderParams> {
    encoder_from_file(&TensorFile::read(path)?, "")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoder_round_trip_bit_exact() {
        let mut p = EncoderParams::init(9, 4, 3, AggMode::First, false, 5).unwrap();
        p.dropout_rate = 0.1;
        let f = tempfile::NamedTempFile::new().unwrap();
        save_encoder(&p, 17, f.path()).unwrap();
        let back = load_encoder(f.path()).unwrap();
        assert_eq!(back, p);
        assert_eq!(
            TensorFile::read(f.path()).unwrap().meta("step").unwrap(),
            "17"
        );
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let p = EncoderParams::init(4, 2, 2, AggMode::Mean, false, 1).unwrap();
        let bytes = encoder_to_file(&p, 0).to_bytes();
        assert!(TensorFile::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"CDRE");
        assert!(TensorFile::from_bytes(&bad).is_err());
    }
}
