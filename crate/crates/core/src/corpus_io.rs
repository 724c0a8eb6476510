//! Collections, queries, relevance judgments and the word-level tokenizer.
//!
//! Text formats:
//! - collection / queries: `<id>\t<text>` per line, UTF-8, LF.
//! - qrels: `<qid> 0 <docid> <grade>` (TREC), grades 0..=3.
//! - vocab: `<token>\t<id>` per line.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
const SPECIALS: [&str; 3] = ["[PAD]", "[UNK]", "[BOS]"];

pub const MAX_GRADE: u8 = 3;

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn split_id_text<'a>(path: &Path, lineno: usize, line: &'a str) -> Result<(&'a str, &'a str)> {
    line.split_once('\t').ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: lineno,
        msg: "expected `<id>\\t<text>`".into(),
    })
}

/// Passage collection with dense integer indices in file order.
#[derive(Debug, Clone, Default)]
pub struct DocStore {
    doc_ids: Vec<String>,
    texts: Vec<String>,
    id_index: HashMap<String, usize>,
}

impl DocStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, id: impl Into<String>, text: impl Into<String>) -> Result<usize> {
        let id = id.into();
        if self.id_index.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        let idx = self.doc_ids.len();
        self.id_index.insert(id.clone(), idx);
        self.doc_ids.push(id);
        self.texts.push(text.into());
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn id(&self, index: usize) -> &str {
        &self.doc_ids[index]
    }

    pub fn text(&self, index: usize) -> &str {
        &self.texts[index]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.id_index.get(id).copied()
    }
}

/// Reads a `<doc_id>\t<text>` collection. Blank lines are skipped.
pub fn load_collection(path: impl AsRef<Path>) -> Result<DocStore> {
    let path = path.as_ref();
    let raw = read_text(path)?;
    let mut store = DocStore::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, text) = split_id_text(path, i + 1, line)?;
        store.push(id, text)?;
    }
    Ok(store)
}

pub fn write_collection(docs: &DocStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (id, text) in docs.doc_ids.iter().zip(&docs.texts) {
        out.push_str(id);
        out.push('\t');
        out.push_str(text);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Lowercased alphanumeric runs; everything else separates words.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_tokens(std::iter::empty::<String>())
    }
}

impl Vocab {
    /// Builds a vocab whose regular tokens get ids 3, 4, ... in iteration order.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut id_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut token_to_id = HashMap::new();
        for tok in tokens {
            let tok = tok.into();
            if token_to_id.contains_key(&tok) || SPECIALS.contains(&tok.as_str()) {
                continue;
            }
            token_to_id.insert(tok.clone(), id_to_token.len() as u32);
            id_to_token.push(tok);
        }
        Self {
            token_to_id,
            id_to_token,
        }
    }

    /// Number of ids including the three specials.
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.len() == SPECIALS.len()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = read_text(path)?;
        let mut entries = Vec::new();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (tok, id) = split_id_text(path, i + 1, line)?;
            let id: u32 = id.trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("bad token id `{id}`"),
            })?;
            entries.push((id, tok.to_string(), i + 1));
        }
        entries.sort_by_key(|e| e.0);
        let mut tokens = Vec::with_capacity(entries.len());
        for (expected, (id, tok, line)) in (SPECIALS.len() as u32..).zip(entries) {
            if id != expected {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("vocab ids must be dense from 3; found {id}, expected {expected}"),
                });
            }
            tokens.push(tok);
        }
        let vocab = Self::from_tokens(tokens.iter().cloned());
        if vocab.len() != tokens.len() + SPECIALS.len() {
            return Err(Error::Format("duplicate token in vocab file".into()));
        }
        Ok(vocab)
    }

    /// Writes regular tokens only; specials are implicit.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for (id, tok) in self.id_to_token.iter().enumerate().skip(SPECIALS.len()) {
            out.push_str(&format!("{tok}\t{id}\n"));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Frequency-ordered vocabulary over documents and raw query texts.
///
/// Ties in frequency go to the lexicographically smaller token.
pub fn build_vocab<'a, I>(docs: &'a DocStore, query_texts: I, min_freq: usize) -> Vocab
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: HashMap<String, usize> = HashMap::new();
    let texts = docs.texts.iter().map(String::as_str).chain(query_texts);
    for text in texts {
        for w in words(text) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_freq.max(1))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocab::from_tokens(ranked.into_iter().map(|(t, _)| t))
}

/// BOS followed by vocab ids of the lowercased words, truncated to `max_len`.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Vec<u32> {
    std::iter::once(BOS_ID)
        .chain(words(text).map(|w| vocab.id(&w)))
        .take(max_len.max(1))
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct QuerySet {
    pub query_ids: Vec<String>,
    pub texts: Vec<String>,
    pub token_id_sequences: Vec<Vec<u32>>,
    /// Queries dropped at load because their text contained no words.
    pub rejected: Vec<String>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.query_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.query_ids.is_empty()
    }

    pub fn push(&mut self, id: impl Into<String>, text: impl Into<String>, tokens: Vec<u32>) {
        self.query_ids.push(id.into());
        self.texts.push(text.into());
        self.token_id_sequences.push(tokens);
    }

    pub fn position(&self, qid: &str) -> Option<usize> {
        self.query_ids.iter().position(|q| q == qid)
    }

    /// Subset in the given positional order.
    pub fn select(&self, positions: &[usize]) -> QuerySet {
        let mut out = QuerySet::default();
        for &p in positions {
            out.push(
                self.query_ids[p].clone(),
                self.texts[p].clone(),
                self.token_id_sequences[p].clone(),
            );
        }
        out
    }
}

/// Raw `(qid, text)` pairs from a query TSV, before tokenization.
pub fn read_query_texts(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let raw = read_text(path)?;
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, text) = split_id_text(path, i + 1, line)?;
        if !seen.insert(id.to_string()) {
            return Err(Error::DuplicateId(id.to_string()));
        }
        out.push((id.to_string(), text.to_string()));
    }
    Ok(out)
}

pub fn tokenize_queries(raw: &[(String, String)], vocab: &Vocab, max_len: usize) -> QuerySet {
    let mut set = QuerySet::default();
    for (id, text) in raw {
        if words(text).next().is_none() {
            log::warn!("query {id} has no words; rejected");
            set.rejected.push(id.clone());
            continue;
        }
        set.push(id.clone(), text.clone(), tokenize(text, vocab, max_len));
    }
    set
}

pub fn load_queries(path: impl AsRef<Path>, vocab: &Vocab, max_len: usize) -> Result<QuerySet> {
    Ok(tokenize_queries(&read_query_texts(path)?, vocab, max_len))
}

/// Graded judgments keyed by `(qid, docid)`.
///
/// An explicit grade 0 and an absent pair are stored distinctly but count the
/// same for every metric.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RelevanceJudgments {
    judgments: BTreeMap<String, BTreeMap<String, u8>>,
}

impl RelevanceJudgments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, qid: &str, docid: &str, grade: i64) -> Result<()> {
        if !(0..=MAX_GRADE as i64).contains(&grade) {
            return Err(Error::GradeRange {
                qid: qid.into(),
                docid: docid.into(),
                grade,
            });
        }
        let per_query = self.judgments.entry(qid.to_string()).or_default();
        if per_query.contains_key(docid) {
            return Err(Error::DuplicateId(format!("{qid}/{docid}")));
        }
        per_query.insert(docid.to_string(), grade as u8);
        Ok(())
    }

    pub fn grade(&self, qid: &str, docid: &str) -> Option<u8> {
        self.judgments.get(qid)?.get(docid).copied()
    }

    pub fn for_query(&self, qid: &str) -> Option<&BTreeMap<String, u8>> {
        self.judgments.get(qid)
    }

    /// Documents with grade ≥ `threshold`, ordered by doc id.
    pub fn positives(&self, qid: &str, threshold: u8) -> Vec<(&str, u8)> {
        self.judgments
            .get(qid)
            .map(|m| {
                m.iter()
                    .filter(|(_, g)| **g >= threshold)
                    .map(|(d, g)| (d.as_str(), *g))
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.judgments.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, u8)> {
        self.judgments
            .iter()
            .flat_map(|(q, m)| m.iter().map(move |(d, g)| (q.as_str(), d.as_str(), *g)))
    }
}

pub fn parse_qrels(raw: &str, path: &Path) -> Result<RelevanceJudgments> {
    let mut qrels = RelevanceJudgments::new();
    for (i, line) in raw.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 4 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let grade: i64 = fields[3].parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("bad grade `{}`", fields[3]),
        })?;
        qrels.insert(fields[0], fields[2], grade)?;
    }
    Ok(qrels)
}

pub fn load_qrels(path: impl AsRef<Path>) -> Result<RelevanceJudgments> {
    let path = path.as_ref();
    parse_qrels(&read_text(path)?, path)
}

/// Lines sorted by (qid, docid), single-space separated.
pub fn format_qrels(qrels: &RelevanceJudgments) -> String {
    let mut out = String::new();
    for (q, d, g) in qrels.iter() {
        out.push_str(&format!("{q} 0 {d} {g}\n"));
    }
    out
}

pub fn write_qrels(qrels: &RelevanceJudgments, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(format_qrels(qrels).as_bytes())
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn collection_in_file_order() {
        let f = tmp_file("D1\thello world\nD2\tfoo\n");
        let docs = load_collection(f.path()).unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs.doc_ids(), ["D1", "D2"]);
        assert_eq!(docs.index_of("D2"), Some(1));
    }

    #[test]
    fn empty_collection() {
        let f = tmp_file("");
        assert_eq!(load_collection(f.path()).unwrap().len(), 0);
    }

    #[test]
    fn collection_errors() {
        let dup = tmp_file("D1\ta\nD1\tb\n");
        assert!(matches!(load_collection(dup.path()), Err(Error::DuplicateId(id)) if id == "D1"));
        let notab = tmp_file("D1\ta\nD2 b\n");
        match load_collection(notab.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn tokenize_examples() {
        let vocab = Vocab::from_tokens(["x", "y", "hello", "world"]);
        assert_eq!(vocab.id("hello"), 5);
        assert_eq!(tokenize("Hello, world", &vocab, 32), vec![2, 5, 6]);
        assert_eq!(tokenize("xyzzy", &vocab, 32), vec![2, 1]);
        assert_eq!(tokenize("?!...", &vocab, 32), vec![BOS_ID]);
        let long = vec!["hello"; 40].join(" ");
        assert_eq!(tokenize(&long, &vocab, 32).len(), 32);
    }

    #[test]
    fn vocab_frequency_and_threshold() {
        let mut docs = DocStore::new();
        docs.push("D1", "a a b").unwrap();
        let v1 = build_vocab(&docs, [], 1);
        assert_eq!((v1.id("a"), v1.id("b")), (3, 4));
        let v2 = build_vocab(&docs, [], 2);
        assert_eq!(v2.id("a"), 3);
        assert_eq!(v2.id("b"), UNK_ID);
        assert_eq!(v2.len(), 4);
    }

    #[test]
    fn vocab_ties_lexicographic() {
        let mut docs = DocStore::new();
        docs.push("D1", "zeta alpha").unwrap();
        let v = build_vocab(&docs, ["mid"], 1);
        assert!(v.id("alpha") < v.id("mid"));
        assert!(v.id("mid") < v.id("zeta"));
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocab::from_tokens(["a", "b", "c"]);
        let f = tempfile::NamedTempFile::new().unwrap();
        v.save(f.path()).unwrap();
        assert_eq!(Vocab::load(f.path()).unwrap(), v);
    }

    #[test]
    fn qrels_parse_and_errors() {
        let f = tmp_file("q1 0 D7 2\nq1 0 D8 0\n");
        let q = load_qrels(f.path()).unwrap();
        assert_eq!(q.grade("q1", "D7"), Some(2));
        assert_eq!(q.grade("q1", "D8"), Some(0));
        assert_eq!(q.grade("q1", "D9"), None);
        assert_eq!(q.positives("q1", 1), vec![("D7", 2)]);

        let bad = tmp_file("q1 0 D7 5\n");
        assert!(matches!(
            load_qrels(bad.path()),
            Err(Error::GradeRange { grade: 5, .. })
        ));
        let rep = tmp_file("q1 0 D7 1\nq1 0 D7 1\n");
        assert!(matches!(load_qrels(rep.path()), Err(Error::DuplicateId(_))));
    }

    #[test]
    fn binary_qrels_accepted() {
        let f = tmp_file("q1 0 D1 1\nq2 0 D5 1\nq2 0 D6 1\n");
        let q = load_qrels(f.path()).unwrap();
        assert_eq!(q.positives("q2", 1).len(), 2);
        assert!(q.positives("q2", 2).is_empty());
    }

    #[test]
    fn qrels_round_trip_normalizes() {
        let raw = "q2   0 D1 1\nq1 0 D9 3\nq1 0 D2 0\n";
        let q = parse_qrels(raw, Path::new("mem")).unwrap();
        let out = format_qrels(&q);
        assert_eq!(out, "q1 0 D2 0\nq1 0 D9 3\nq2 0 D1 1\n");
        assert_eq!(parse_qrels(&out, Path::new("mem")).unwrap(), q);
    }

    #[test]
    fn wordless_queries_rejected() {
        let vocab = Vocab::from_tokens(["a"]);
        let raw = vec![
            ("q1".to_string(), "a".to_string()),
            ("q2".to_string(), " ?? ".to_string()),
        ];
        let qs = tokenize_queries(&raw, &vocab, 32);
        assert_eq!(qs.query_ids, ["q1"]);
        assert_eq!(qs.rejected, ["q2"]);
    }
}
