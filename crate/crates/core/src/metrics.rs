//! Ranking metrics, TREC run files and the paired t-test.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus_io::RelevanceJudgments;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunEntry {
    pub doc_id: String,
    pub rank: usize,
    pub score: f64,
}

/// TREC run: ranked documents per query.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunFile {
    pub tag: String,
    pub queries: BTreeMap<String, Vec<RunEntry>>,
}

impl RunFile {
    pub fn new(tag: impl Into<String>) -> Self {
        Self {
            tag: tag.into(),
            queries: BTreeMap::new(),
        }
    }

    /// Adds a ranking; entries must already be in rank order.
    pub fn insert_ranked<I, S>(&mut self, qid: &str, ranked: I)
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let entries = ranked
            .into_iter()
            .enumerate()
            .map(|(i, (d, s))| RunEntry {
                doc_id: d.into(),
                rank: i + 1,
                score: s,
            })
            .collect();
        self.queries.insert(qid.to_string(), entries);
    }

    pub fn validate(&self) -> Result<()> {
        for (qid, entries) in &self.queries {
            let mut seen = HashSet::new();
            for (i, e) in entries.iter().enumerate() {
                if e.rank != i + 1 {
                    return Err(Error::Invalid(format!(
                        "query {qid}: rank {} where {} expected",
                        e.rank,
                        i + 1
                    )));
                }
                if i > 0 && e.score > entries[i - 1].score {
                    return Err(Error::Invalid(format!(
                        "query {qid}: score increases at rank {}",
                        e.rank
                    )));
                }
                if !seen.insert(e.doc_id.as_str()) {
                    return Err(Error::Invalid(format!(
                        "query {qid}: duplicate doc {}",
                        e.doc_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (qid, entries) in &self.queries {
            for e in entries {
                let _ = writeln!(
                    out,
                    "{qid} Q0 {} {} {:.6} {}",
                    e.doc_id, e.rank, e.score, self.tag
                );
            }
        }
        out
    }

    pub fn parse(raw: &str) -> Result<Self> {
        let mut run = RunFile::default();
        for (i, line) in raw.lines().enumerate() {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Invalid(format!("run line {}: {msg}", i + 1));
            if f.len() != 6 {
                return Err(bad(format!("expected 6 fields, found {}", f.len())));
            }
            let rank = f[3]
                .parse()
                .map_err(|_| bad(format!("bad rank `{}`", f[3])))?;
            let score = f[4]
                .parse()
                .map_err(|_| bad(format!("bad score `{}`", f[4])))?;
            if run.tag.is_empty() {
                run.tag = f[5].to_string();
            }
            run.queries
                .entry(f[0].to_string())
                .or_default()
                .push(RunEntry {
                    doc_id: f[2].to_string(),
                    rank,
                    score,
                });
        }
        run.validate()?;
        Ok(run)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&raw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GainMode {
    Linear,
    Exponential,
}

impl GainMode {
    pub fn gain(self, grade: u8) -> f64 {
        match self {
            GainMode::Linear => grade as f64,
            GainMode::Exponential => 2f64.powi(grade as i32) - 1.0,
        }
    }
}

/// Reciprocal rank of the first doc with grade ≥ `threshold` within the top `k`.
pub fn reciprocal_rank<T, F: Fn(&T) -> u8>(ranked: &[T], grade: F, k: usize, threshold: u8) -> f64 {
    ranked
        .iter()
        .take(k)
        .position(|d| grade(d) >= threshold)
        .map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

/// Fraction of the `relevant_total` documents found in the top `k`.
pub fn recall<T: Eq + std::hash::Hash, F: Fn(&T) -> u8>(
    ranked: &[T],
    grade: F,
    k: usize,
    threshold: u8,
    relevant_total: usize,
) -> f64 {
    if relevant_total == 0 {
        return 0.0;
    }
    let mut seen = HashSet::new();
    let hits = ranked
        .iter()
        .take(k)
        .filter(|d| seen.insert(*d) && grade(d) >= threshold)
        .count();
    hits as f64 / relevant_total as f64
}

/// nDCG@k where `judged` holds every graded value for the query.
pub fn ndcg<T, F: Fn(&T) -> u8>(
    ranked: &[T],
    grade: F,
    judged: &[u8],
    k: usize,
    gain: GainMode,
) -> f64 {
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| gain.gain(grade(d)) * discount(i))
        .sum();
    let mut ideal = judged.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain.gain(g) * discount(i))
        .sum();
    if idcg > 0.0 {
        dcg / idcg
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub metric: String,
    pub k: usize,
    pub rel_threshold: u8,
    pub per_query: BTreeMap<String, f64>,
    pub aggregate: f64,
    /// Run queries absent from the judgments.
    pub missing_judgments: Vec<String>,
    /// Judged queries with no document at or above the threshold.
    pub no_relevant: Vec<String>,
}

impl MetricReport {
    fn finish(mut self) -> Self {
        self.aggregate = if self.per_query.is_empty() {
            0.0
        } else {
            self.per_query.values().sum::<f64>() / self.per_query.len() as f64
        };
        self
    }

    pub fn evaluated(&self) -> usize {
        self.per_query.len()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (q, v) in &self.per_query {
            let _ = writeln!(out, "{}\t{q}\t{v:.6}", self.metric);
        }
        let _ = writeln!(out, "{}\tall\t{:.6}", self.metric, self.aggregate);
        out
    }
}

fn evaluate<M>(
    run: &RunFile,
    qrels: &RelevanceJudgments,
    name: String,
    k: usize,
    threshold: u8,
    metric: M,
) -> Result<MetricReport>
where
    M: Fn(&[&str], &dyn Fn(&&str) -> u8, &BTreeMap<String, u8>) -> f64,
{
    if k == 0 {
        return Err(Error::Invalid("cutoff k must be at least 1".into()));
    }
    let mut report = MetricReport {
        metric: name,
        k,
        rel_threshold: threshold,
        per_query: BTreeMap::new(),
        aggregate: 0.0,
        missing_judgments: Vec::new(),
        no_relevant: Vec::new(),
    };
    for (qid, entries) in &run.queries {
        let Some(judged) = qrels.for_query(qid) else {
            report.missing_judgments.push(qid.clone());
            continue;
        };
        if !judged.values().any(|&g| g >= threshold) {
            report.no_relevant.push(qid.clone());
            continue;
        }
        let ranked: Vec<&str> = entries.iter().map(|e| e.doc_id.as_str()).collect();
        let grade = |d: &&str| judged.get(*d).copied().unwrap_or(0);
        report
            .per_query
            .insert(qid.clone(), metric(&ranked, &grade, judged));
    }
    Ok(report.finish())
}

pub fn mrr_at_k(
    run: &RunFile,
    qrels: &RelevanceJudgments,
    k: usize,
    rel_threshold: u8,
) -> Result<MetricReport> {
    let t = rel_threshold.max(1);
    evaluate(run, qrels, format!("mrr@{k}"), k, t, |ranked, grade, _| {
        reciprocal_rank(ranked, grade, k, t)
    })
}

pub fn recall_at_k(
    run: &RunFile,
    qrels: &RelevanceJudgments,
    k: usize,
    rel_threshold: u8,
) -> Result<MetricReport> {
    let t = rel_threshold.max(1);
    evaluate(
        run,
        qrels,
        format!("recall@{k}"),
        k,
        t,
        |ranked, grade, judged| {
            let total = judged.values().filter(|&&g| g >= t).count();
            recall(ranked, grade, k, t, total)
        },
    )
}

/// nDCG@k over raw grades. With `zero_below > 1`, grades under it contribute no gain.
pub fn ndcg_at_k_with(
    run: &RunFile,
    qrels: &RelevanceJudgments,
    k: usize,
    gain: GainMode,
    zero_below: u8,
) -> Result<MetricReport> {
    let t = zero_below.max(1);
    let clip = move |g: u8| if g >= t { g } else { 0 };
    evaluate(
        run,
        qrels,
        format!("ndcg@{k}"),
        k,
        t,
        |ranked, grade, judged| {
            let judged: Vec<u8> = judged.values().map(|&g| clip(g)).collect();
            ndcg(ranked, |d| clip(grade(d)), &judged, k, gain)
        },
    )
}

pub fn ndcg_at_k(
    run: &RunFile,
    qrels: &RelevanceJudgments,
    k: usize,
    gain: GainMode,
) -> Result<MetricReport> {
    ndcg_at_k_with(run, qrels, k, gain, 1)
}

/// Natural log of the gamma function (Lanczos, g = 7, n = 9), x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Two-sided tail probability P(|T| ≥ |t|) for Student's t with `dof` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, dof: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub dof: usize,
}

/// Paired two-sided t-test on aligned per-query values.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Invalid(
            "paired t-test needs at least 2 pairs".into(),
        ));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let dof = n - 1;
    // relative guard for variance that is zero up to rounding
    let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if var <= (scale * 1e-15).powi(2) {
        return Ok(if mean == 0.0 || scale == 0.0 {
            TTest {
                t: 0.0,
                p: 1.0,
                dof,
            }
        } else {
            TTest {
                t: mean.signum() * f64::INFINITY,
                p: 0.0,
                dof,
            }
        });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    Ok(TTest {
        t,
        p: student_t_two_sided_p(t, dof as f64),
        dof,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qrels(lines: &[(&str, &str, i64)]) -> RelevanceJudgments {
        let mut q = RelevanceJudgments::new();
        for (a, b, g) in lines {
            q.insert(a, b, *g).unwrap();
        }
        q
    }

    fn run(rows: &[(&str, &[&str])]) -> RunFile {
        let mut r = RunFile::new("t");
        for (q, docs) in rows {
            let n = docs.len();
            r.insert_ranked(
                q,
                docs.iter().enumerate().map(|(i, d)| (*d, (n - i) as f64)),
            );
        }
        r
    }

    #[test]
    fn mrr_examples() {
        let qr = qrels(&[("q1", "c", 1), ("q2", "a", 1), ("q3", "b", 1)]);
        let r = run(&[("q1", &["a", "b", "c"])]);
        assert!((mrr_at_k(&r, &qr, 10, 1).unwrap().aggregate - 1.0 / 3.0).abs() < 1e-15);
        let r = run(&[("q1", &["a", "b"])]);
        assert_eq!(mrr_at_k(&r, &qr, 10, 1).unwrap().aggregate, 0.0);
        let r = run(&[("q2", &["a"]), ("q3", &["a", "b"])]);
        assert_eq!(mrr_at_k(&r, &qr, 10, 1).unwrap().aggregate, 0.75);
    }

    #[test]
    fn exclusions_are_counted() {
        let qr = qrels(&[("q1", "a", 1), ("q2", "a", 0)]);
        let r = run(&[("q1", &["a"]), ("q2", &["a"]), ("q9", &["a"])]);
        let rep = mrr_at_k(&r, &qr, 10, 1).unwrap();
        assert_eq!(rep.evaluated(), 1);
        assert_eq!(rep.no_relevant, vec!["q2"]);
        assert_eq!(rep.missing_judgments, vec!["q9"]);
        assert!(mrr_at_k(&r, &qr, 0, 1).is_err());
    }

    #[test]
    fn ndcg_hand_case() {
        let qr = qrels(&[("q", "A", 3), ("q", "B", 2)]);
        let r = run(&[("q", &["B", "A"])]);
        let v = ndcg_at_k(&r, &qr, 10, GainMode::Linear).unwrap().aggregate;
        let want = (2.0 + 3.0 / 3f64.log2()) / (3.0 + 2.0 / 3f64.log2());
        assert!((v - want).abs() < 1e-15);
        assert!((v - 0.9134).abs() < 1e-4);
        let perfect = run(&[("q", &["A", "B"])]);
        assert_eq!(
            ndcg_at_k(&perfect, &qr, 10, GainMode::Exponential)
                .unwrap()
                .aggregate,
            1.0
        );
    }

    #[test]
    fn lenient_vs_strict() {
        let qr = qrels(&[("q", "a", 1), ("q", "b", 2)]);
        let r = run(&[("q", &["a", "x", "b"])]);
        assert_eq!(mrr_at_k(&r, &qr, 10, 1).unwrap().aggregate, 1.0);
        assert!((mrr_at_k(&r, &qr, 10, 2).unwrap().aggregate - 1.0 / 3.0).abs() < 1e-15);
        let n1 = ndcg_at_k(&r, &qr, 10, GainMode::Linear).unwrap().aggregate;
        let zeroed = ndcg_at_k_with(&r, &qr, 10, GainMode::Linear, 2)
            .unwrap()
            .aggregate;
        assert!(zeroed < n1);
    }

    #[test]
    fn recall_examples() {
        let qr = qrels(&[("q", "a", 1), ("q", "b", 1), ("q", "c", 1), ("q", "d", 1)]);
        let r = run(&[("q", &["a", "x"])]);
        assert_eq!(recall_at_k(&r, &qr, 10, 1).unwrap().aggregate, 0.25);
        let r = run(&[("q", &["x", "d", "b", "c", "a"])]);
        assert_eq!(recall_at_k(&r, &qr, 10, 1).unwrap().aggregate, 1.0);
    }

    #[test]
    fn run_file_round_trip_and_validation() {
        let r = run(&[("q1", &["D1", "D2"])]);
        let text = r.to_text();
        assert_eq!(text, "q1 Q0 D1 1 2.000000 t\nq1 Q0 D2 2 1.000000 t\n");
        assert_eq!(RunFile::parse(&text).unwrap(), r);
        assert!(RunFile::parse("q1 Q0 D1 1 2.0 t\nq1 Q0 D2 3 1.0 t\n").is_err());
        assert!(RunFile::parse("q1 Q0 D1 1 1.0 t\nq1 Q0 D2 2 2.0 t\n").is_err());
    }

    #[test]
    fn t_test_degenerate_cases() {
        let a = [0.1, 0.5, 0.3];
        let r = paired_t_test(&a, &a).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));
        let r = paired_t_test(&[2.0; 4], &[1.0; 4]).unwrap();
        assert_eq!(r.p, 0.0);
        assert!(paired_t_test(&[1.0], &[2.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[2.0]).is_err());
    }

    #[test]
    fn t_distribution_table_values() {
        // two-sided critical values: t_{0.975, 4} = 2.776445, t_{0.995, 10} = 3.169273
        assert!((student_t_two_sided_p(2.776_445_105, 4.0) - 0.05).abs() < 1e-8);
        assert!((student_t_two_sided_p(3.169_272_667, 10.0) - 0.01).abs() < 1e-8);
        // Cauchy: P(|T| > 1) = 0.5
        assert!((student_t_two_sided_p(1.0, 1.0) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
        assert!((ln_gamma(10.0) - 362_880f64.ln()).abs() < 1e-12);
    }
}
