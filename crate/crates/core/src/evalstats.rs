//! Rank correlations, weighted human rankings and metric benchmarks.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Parameter(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Parameter("need at least two observations".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Parameter("non-finite observation".into()));
    }
    Ok(())
}

/// Doubled 1-based ranks, ties sharing the average. Doubling keeps them
/// integral.
fn doubled_ranks(x: &[f64]) -> Vec<i64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0i64; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 averaged, times two
        let r2 = (i + j + 2) as i64;
        for &k in &idx[i..=j] {
            out[k] = r2;
        }
        i = j + 1;
    }
    out
}

/// Average ranks (1-based, ties averaged).
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    doubled_ranks(x).into_iter().map(|r| r as f64 / 2.0).collect()
}

/// Spearman's rank correlation: Pearson correlation of average ranks.
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let (rx, ry) = (doubled_ranks(x), doubled_ranks(y));
    let n = x.len() as i128;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0i128, 0i128, 0i128, 0i128, 0i128);
    for (&a, &b) in rx.iter().zip(&ry) {
        let (a, b) = (a as i128, b as i128);
        sx += a;
        sy += b;
        sxx += a * a;
        syy += b * b;
        sxy += a * b;
    }
    let num = n * sxy - sx * sy;
    let dx = n * sxx - sx * sx;
    let dy = n * syy - sy * sy;
    if dx == 0 || dy == 0 {
        return Err(Error::UndefinedCorrelation("constant ranking".into()));
    }
    let den = if dx == dy { dx as f64 } else { (dx as f64 * dy as f64).sqrt() };
    Ok(num as f64 / den)
}

/// Kendall's tau-b.
pub fn krcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len();
    let (mut conc, mut disc, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let a = x[i].partial_cmp(&x[j]).expect("finite");
            let b = y[i].partial_cmp(&y[j]).expect("finite");
            use std::cmp::Ordering::Equal;
            match (a, b) {
                (Equal, Equal) => {
                    tx += 1;
                    ty += 1;
                }
                (Equal, _) => tx += 1,
                (_, Equal) => ty += 1,
                _ if a == b => conc += 1,
                _ => disc += 1,
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let (px, py) = (n0 - tx, n0 - ty);
    if px == 0 || py == 0 {
        return Err(Error::UndefinedCorrelation("constant ranking".into()));
    }
    let den = if px == py { px as f64 } else { (px as f64 * py as f64).sqrt() };
    Ok((conc - disc) as f64 / den)
}

/// One rater's ordering of a sample's images, best first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingRecord {
    pub sample_id: String,
    pub rater_id: String,
    pub ordering: Vec<String>,
}

impl RankingRecord {
    pub fn validate(&self) -> Result<()> {
        if self.sample_id.is_empty() {
            return Err(validation("sample_id", "empty"));
        }
        if self.rater_id.is_empty() {
            return Err(validation("rater_id", "empty"));
        }
        if self.ordering.is_empty() {
            return Err(validation("ordering", "empty"));
        }
        let set: BTreeSet<&String> = self.ordering.iter().collect();
        if set.len() != self.ordering.len() {
            return Err(validation("ordering", "duplicate image id"));
        }
        Ok(())
    }
}

fn validation(field: &str, reason: impl Into<String>) -> Error {
    Error::Validation {
        field: field.into(),
        reason: reason.into(),
    }
}

/// Aggregated ranking of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedRank {
    pub sample_id: String,
    pub raters: usize,
    /// `(image id, mean weight)`, best first; ties broken by id.
    pub scores: Vec<(String, f64)>,
}

impl WeightedRank {
    pub fn score(&self, image: &str) -> Option<f64> {
        self.scores.iter().find(|(id, _)| id == image).map(|(_, s)| *s)
    }

    pub fn ordering(&self) -> Vec<&str> {
        self.scores.iter().map(|(id, _)| id.as_str()).collect()
    }
}

/// Mean weight per image, where rank `r` of `n` earns `n + 1 − r`.
/// Every record must rank the same image set of the same sample.
pub fn weighted_rank(records: &[RankingRecord]) -> Result<WeightedRank> {
    let first = records
        .first()
        .ok_or_else(|| Error::EmptyScope("no rankings to aggregate".into()))?;
    first.validate()?;
    let images: BTreeSet<&String> = first.ordering.iter().collect();
    let n = first.ordering.len();
    let mut sums: BTreeMap<&str, u64> = images.iter().map(|s| (s.as_str(), 0)).collect();
    for r in records {
        r.validate()?;
        if r.sample_id != first.sample_id {
            return Err(validation("sample_id", format!("{} vs {}", r.sample_id, first.sample_id)));
        }
        if r.ordering.iter().collect::<BTreeSet<_>>() != images {
            return Err(validation(
                "ordering",
                format!("rater {} ranked a different image set", r.rater_id),
            ));
        }
        for (k, id) in r.ordering.iter().enumerate() {
            *sums.get_mut(id.as_str()).expect("same set") += (n - k) as u64;
        }
    }
    let m = records.len() as f64;
    let mut scores: Vec<(String, f64)> = sums.into_iter().map(|(id, s)| (id.to_string(), s as f64 / m)).collect();
    scores.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(WeightedRank {
        sample_id: first.sample_id.clone(),
        raters: records.len(),
        scores,
    })
}

/// Records from a JSONL file plus `(line number, reason)` for rejects.
pub fn read_rankings(path: &Path) -> Result<(Vec<RankingRecord>, Vec<(usize, String)>)> {
    let text = std::fs::read_to_string(path)?;
    let mut ok = Vec::new();
    let mut bad = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RankingRecord>(line)
            .map_err(Error::from)
            .and_then(|r| r.validate().map(|_| r))
        {
            Ok(r) => ok.push(r),
            Err(e) => bad.push((i + 1, e.to_string())),
        }
    }
    Ok((ok, bad))
}

/// Groups records by sample and aggregates each. Samples with
/// inconsistent records are returned as rejects.
pub fn aggregate_rankings(records: &[RankingRecord]) -> (BTreeMap<String, WeightedRank>, Vec<(String, String)>) {
    let mut by: BTreeMap<&str, Vec<RankingRecord>> = BTreeMap::new();
    for r in records {
        by.entry(&r.sample_id).or_default().push(r.clone());
    }
    let mut out = BTreeMap::new();
    let mut bad = Vec::new();
    for (s, rs) in by {
        match weighted_rank(&rs) {
            Ok(w) => {
                out.insert(s.to_string(), w);
            }
            Err(e) => bad.push((s.to_string(), e.to_string())),
        }
    }
    (out, bad)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Higher,
    Lower,
}

/// One metric's scores, keyed by image id.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreFile {
    pub name: String,
    pub polarity: Polarity,
    pub scores: BTreeMap<String, f64>,
}

impl ScoreFile {
    /// Parses `id,score` CSV; a `# polarity: higher|lower` comment is
    /// required, other comments are ignored, and a non-numeric first row is
    /// taken as the header.
    pub fn parse(name: &str, text: &str) -> Result<Self> {
        let mut polarity = None;
        let mut scores = BTreeMap::new();
        let mut first = true;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                if let Some(p) = c.trim().strip_prefix("polarity:") {
                    polarity = Some(match p.trim() {
                        "higher" => Polarity::Higher,
                        "lower" => Polarity::Lower,
                        other => return Err(Error::Parameter(format!("{name}: unknown polarity `{other}`"))),
                    });
                }
                continue;
            }
            let (id, v) = line
                .rsplit_once(',')
                .ok_or_else(|| Error::Parameter(format!("{name}:{}: expected `id,score`", i + 1)))?;
            match v.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => {
                    if scores.insert(id.trim().to_string(), v).is_some() {
                        return Err(Error::Parameter(format!("{name}: duplicate id `{id}`")));
                    }
                }
                _ if first => {}
                _ => return Err(Error::Parameter(format!("{name}:{}: bad score `{v}`", i + 1))),
            }
            first = false;
        }
        let polarity = polarity.ok_or_else(|| Error::Parameter(format!("{name}: missing `# polarity:` header")))?;
        Ok(ScoreFile {
            name: name.to_string(),
            polarity,
            scores,
        })
    }

    /// Loads a file, naming the metric after the file stem.
    pub fn load(path: &Path) -> Result<Self> {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "metric".into());
        Self::parse(&name, &std::fs::read_to_string(path)?)
    }

    /// Score of `image` in `sample`, tried as `sample/image` then `image`;
    /// negated for lower-is-better metrics.
    pub fn oriented(&self, sample: &str, image: &str) -> Option<f64> {
        let v = self
            .scores
            .get(&format!("{sample}/{image}"))
            .or_else(|| self.scores.get(image))?;
        Some(match self.polarity {
            Polarity::Higher => *v,
            Polarity::Lower => -*v,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Correlate within each sample, then average.
    #[default]
    PerSample,
    /// One correlation over all images of all samples.
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub metric: String,
    pub srcc: Option<f64>,
    pub krcc: Option<f64>,
    pub samples: usize,
    /// Samples dropped for missing scores or undefined correlation.
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub pooling: Pooling,
    pub rows: Vec<BenchmarkRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
}

impl BenchmarkTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,srcc,krcc,samples,excluded\n");
        for r in &self.rows {
            let f = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", r.metric, f(r.srcc), f(r.krcc), r.samples, r.excluded);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let w = self.rows.iter().map(|r| r.metric.len()).max().unwrap_or(0).max(6);
        let mut out = format!("{:<w$}  {:>7}  {:>7}  {:>7}  {:>8}\n", "metric", "SRCC", "KRCC", "samples", "excluded");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<w$}  {:>7}  {:>7}  {:>7}  {:>8}",
                r.metric,
                fmt_opt(r.srcc),
                fmt_opt(r.krcc),
                r.samples,
                r.excluded
            );
        }
        out
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn bench_one(human: &BTreeMap<String, WeightedRank>, metric: &ScoreFile, pooling: Pooling) -> BenchmarkRow {
    let mut excluded = 0;
    let mut per: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for (sid, w) in human {
        let m: Option<Vec<f64>> = w.scores.iter().map(|(id, _)| metric.oriented(sid, id)).collect();
        match m {
            Some(m) => per.push((w.scores.iter().map(|s| s.1).collect(), m)),
            None => excluded += 1,
        }
    }
    match pooling {
        Pooling::PerSample => {
            let (mut s, mut k) = (Vec::new(), Vec::new());
            for (h, m) in &per {
                match (srcc(h, m), krcc(h, m)) {
                    (Ok(a), Ok(b)) => {
                        s.push(a);
                        k.push(b);
                    }
                    _ => excluded += 1,
                }
            }
            BenchmarkRow {
                metric: metric.name.clone(),
                srcc: mean(&s),
                krcc: mean(&k),
                samples: s.len(),
                excluded,
            }
        }
        Pooling::Pooled => {
            let h: Vec<f64> = per.iter().flat_map(|p| p.0.iter().copied()).collect();
            let m: Vec<f64> = per.iter().flat_map(|p| p.1.iter().copied()).collect();
            let (s, k) = (srcc(&h, &m).ok(), krcc(&h, &m).ok());
            let samples = if s.is_some() { per.len() } else { 0 };
            BenchmarkRow {
                metric: metric.name.clone(),
                srcc: s,
                krcc: k,
                samples,
                excluded: excluded + per.len() - samples,
            }
        }
    }
}

/// Correlates every metric with the human rankings; rows sorted by SRCC,
/// best first, metrics without a defined SRCC last.
pub fn benchmark(human: &BTreeMap<String, WeightedRank>, metrics: &[ScoreFile], pooling: Pooling) -> BenchmarkTable {
    let mut rows: Vec<BenchmarkRow> = metrics.iter().map(|m| bench_one(human, m, pooling)).collect();
    rows.sort_by(|a, b| {
        let key = |r: &BenchmarkRow| r.srcc.unwrap_or(f64::NEG_INFINITY);
        key(b).total_cmp(&key(a)).then_with(|| a.metric.cmp(&b.metric))
    });
    BenchmarkTable { pooling, rows }
}
