//! Ranking-study state: assignments, response log and aggregated results.
//!
//! Samples live at `<root>/<sample_id>/<image_id>.png`. Every accepted
//! response is appended to a JSONL log before it is acknowledged, and the
//! log is replayed on start.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalstats::{weighted_rank, RankingRecord, WeightedRank};
use crate::seed::mix;

/// Image id of the pristine reference inside a sample directory.
pub const REFERENCE_ID: &str = "reference";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub samples_root: PathBuf,
    pub log_path: PathBuf,
    /// Responses after which a sample counts as complete.
    pub target_raters: usize,
    pub exclude_reference: bool,
    /// Seeds the per-presentation shuffles.
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            samples_root: PathBuf::from("samples"),
            log_path: PathBuf::from("responses.jsonl"),
            target_raters: 30,
            exclude_reference: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Assignment {
    Assigned {
        sample_id: String,
        /// Presentation order, freshly shuffled.
        images: Vec<String>,
        answered: usize,
        total: usize,
    },
    Complete {
        answered: usize,
        total: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitAck {
    pub sample_id: String,
    pub responses: usize,
    pub complete: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub complete: bool,
    #[serde(flatten)]
    pub ranking: WeightedRank,
}

#[derive(Clone, Debug)]
struct Sample {
    images: BTreeMap<String, PathBuf>,
    responses: Vec<usize>,
}

fn validation(field: &str, reason: impl Into<String>) -> Error {
    Error::Validation {
        field: field.into(),
        reason: reason.into(),
    }
}

fn scan_samples(root: &Path, exclude_reference: bool) -> Result<BTreeMap<String, Sample>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::Load {
        path: root.to_path_buf(),
        reason: e.to_string(),
    })? {
        let entry = entry?;
        if !entry.file_type()?.is_dir() {
            continue;
        }
        let mut images = BTreeMap::new();
        for f in std::fs::read_dir(entry.path())? {
            let p = f?.path();
            let ext = p.extension().map(|e| e.to_string_lossy().to_lowercase());
            if !matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
                continue;
            }
            let stem = p.file_stem().expect("has extension").to_string_lossy().into_owned();
            if exclude_reference && stem == REFERENCE_ID {
                continue;
            }
            images.insert(stem, p);
        }
        if images.len() >= 2 {
            out.insert(
                entry.file_name().to_string_lossy().into_owned(),
                Sample {
                    images,
                    responses: Vec::new(),
                },
            );
        } else {
            log::warn!("skipping {}: fewer than two images", entry.path().display());
        }
    }
    Ok(out)
}

pub struct Study {
    config: StudyConfig,
    samples: BTreeMap<String, Sample>,
    records: Vec<RankingRecord>,
    answered: HashMap<String, BTreeSet<String>>,
    pending: HashMap<String, String>,
    presentations: u64,
    log: File,
}

impl Study {
    /// Scans the sample tree and replays an existing log.
    pub fn open(config: StudyConfig) -> Result<Self> {
        if config.target_raters == 0 {
            return Err(Error::Config("target_raters must be positive".into()));
        }
        let samples = scan_samples(&config.samples_root, config.exclude_reference)?;
        if samples.is_empty() {
            return Err(Error::Load {
                path: config.samples_root.clone(),
                reason: "no sample directories with at least two images".into(),
            });
        }
        let prior = match std::fs::read_to_string(&config.log_path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(e.into()),
        };
        if let Some(parent) = config.log_path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let log = OpenOptions::new().create(true).append(true).open(&config.log_path)?;
        let mut study = Study {
            config,
            samples,
            records: Vec::new(),
            answered: HashMap::new(),
            pending: HashMap::new(),
            presentations: 0,
            log,
        };
        for (i, line) in prior.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let load_err = |reason: String| Error::Load {
                path: study.config.log_path.clone(),
                reason: format!("line {}: {reason}", i + 1),
            };
            let rec: RankingRecord = serde_json::from_str(line).map_err(|e| load_err(e.to_string()))?;
            study.check(&rec).map_err(|e| load_err(e.to_string()))?;
            study.apply(rec);
        }
        Ok(study)
    }

    pub fn config(&self) -> &StudyConfig {
        &self.config
    }

    pub fn sample_ids(&self) -> Vec<&str> {
        self.samples.keys().map(String::as_str).collect()
    }

    pub fn response_count(&self) -> usize {
        self.records.len()
    }

    /// Responses per sample.
    pub fn coverage(&self) -> BTreeMap<String, usize> {
        self.samples.iter().map(|(k, s)| (k.clone(), s.responses.len())).collect()
    }

    /// File behind a presentable image; the excluded reference has none.
    pub fn image_path(&self, sample_id: &str, image_id: &str) -> Option<&Path> {
        self.samples.get(sample_id)?.images.get(image_id).map(PathBuf::as_path)
    }

    fn check(&self, rec: &RankingRecord) -> Result<()> {
        if rec.rater_id.trim().is_empty() {
            return Err(validation("rater", "empty rater id"));
        }
        let sample = self
            .samples
            .get(&rec.sample_id)
            .ok_or_else(|| Error::NotFound(format!("sample `{}`", rec.sample_id)))?;
        let given: BTreeSet<&String> = rec.ordering.iter().collect();
        if given.len() != rec.ordering.len() || rec.ordering.len() != sample.images.len() {
            return Err(validation(
                "ordering",
                format!("expected a permutation of {} images", sample.images.len()),
            ));
        }
        if let Some(bad) = rec.ordering.iter().find(|id| !sample.images.contains_key(*id)) {
            return Err(validation("ordering", format!("unknown image `{bad}`")));
        }
        if self
            .answered
            .get(&rec.rater_id)
            .is_some_and(|s| s.contains(&rec.sample_id))
        {
            return Err(Error::Conflict(format!(
                "rater `{}` already ranked `{}`",
                rec.rater_id, rec.sample_id
            )));
        }
        Ok(())
    }

    fn apply(&mut self, rec: RankingRecord) {
        let idx = self.records.len();
        self.samples.get_mut(&rec.sample_id).expect("checked").responses.push(idx);
        self.answered
            .entry(rec.rater_id.clone())
            .or_default()
            .insert(rec.sample_id.clone());
        if self.pending.get(&rec.rater_id) == Some(&rec.sample_id) {
            self.pending.remove(&rec.rater_id);
        }
        self.records.push(rec);
    }

    fn answered_by(&self, rater: &str) -> usize {
        self.answered.get(rater).map_or(0, BTreeSet::len)
    }

    /// Next sample for `rater`: an outstanding one if any, otherwise the
    /// least-covered sample they have not ranked that is still short of the
    /// target. Outstanding assignments count toward coverage.
    pub fn next_assignment(&mut self, rater: &str) -> Result<Assignment> {
        if rater.trim().is_empty() {
            return Err(validation("rater", "empty rater id"));
        }
        let total = self.samples.len();
        let answered = self.answered_by(rater);
        let chosen = match self.pending.get(rater) {
            Some(s) => Some(s.clone()),
            None => {
                let mut held: HashMap<&str, usize> = HashMap::new();
                for s in self.pending.values() {
                    *held.entry(s.as_str()).or_default() += 1;
                }
                let done = self.answered.get(rater);
                self.samples
                    .iter()
                    .filter(|(id, _)| !done.is_some_and(|d| d.contains(*id)))
                    .map(|(id, s)| (s.responses.len() + held.get(id.as_str()).copied().unwrap_or(0), s, id))
                    .filter(|(_, s, _)| s.responses.len() < self.config.target_raters)
                    .min_by(|a, b| a.0.cmp(&b.0).then_with(|| a.2.cmp(b.2)))
                    .map(|(_, _, id)| id.clone())
            }
        };
        let Some(sample_id) = chosen else {
            return Ok(Assignment::Complete { answered, total });
        };
        self.pending.insert(rater.to_string(), sample_id.clone());
        let mut images: Vec<String> = self.samples[&sample_id].images.keys().cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.config.seed, self.presentations));
        self.presentations += 1;
        images.shuffle(&mut rng);
        Ok(Assignment::Assigned {
            sample_id,
            images,
            answered,
            total,
        })
    }

    /// Validates, logs durably, then applies one ranking.
    pub fn submit_response(&mut self, rater: &str, sample_id: &str, ordering: Vec<String>) -> Result<SubmitAck> {
        let rec = RankingRecord {
            sample_id: sample_id.to_string(),
            rater_id: rater.to_string(),
            ordering,
        };
        self.check(&rec)?;
        let mut line = serde_json::to_string(&rec)?;
        line.push('\n');
        self.log.write_all(line.as_bytes())?;
        self.log.sync_data()?;
        self.apply(rec);
        let n = self.samples[sample_id].responses.len();
        Ok(SubmitAck {
            sample_id: sample_id.to_string(),
            responses: n,
            complete: n >= self.config.target_raters,
        })
    }

    fn result_for(&self, id: &str, s: &Sample) -> Result<SampleResult> {
        let recs: Vec<RankingRecord> = s.responses.iter().map(|&i| self.records[i].clone()).collect();
        let ranking = weighted_rank(&recs).map_err(|e| match e {
            Error::EmptyScope(_) => Error::EmptyScope(format!("sample `{id}` has no responses")),
            other => other,
        })?;
        Ok(SampleResult {
            complete: s.responses.len() >= self.config.target_raters,
            ranking,
        })
    }

    /// Aggregated ranking of one sample, or of every sample with responses.
    pub fn results(&self, sample_id: Option<&str>) -> Result<Vec<SampleResult>> {
        match sample_id {
            Some(id) => {
                let s = self
                    .samples
                    .get(id)
                    .ok_or_else(|| Error::NotFound(format!("sample `{id}`")))?;
                Ok(vec![self.result_for(id, s)?])
            }
            None => {
                let out: Vec<SampleResult> = self
                    .samples
                    .iter()
                    .filter(|(_, s)| !s.responses.is_empty())
                    .map(|(id, s)| self.result_for(id, s))
                    .collect::<Result<_>>()?;
                if out.is_empty() {
                    return Err(Error::EmptyScope("no responses yet".into()));
                }
                Ok(out)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_samples(root: &Path, samples: usize, images: usize) {
        let px = image::RgbImage::from_pixel(4, 4, image::Rgb([9, 9, 9]));
        for s in 0..samples {
            let d = root.join(format!("s{s:02}"));
            std::fs::create_dir_all(&d).unwrap();
            for i in 0..images {
                px.save(d.join(format!("img{i}.png"))).unwrap();
            }
            px.save(d.join("reference.png")).unwrap();
        }
    }

    fn open(dir: &Path, target: usize) -> Study {
        Study::open(StudyConfig {
            samples_root: dir.join("samples"),
            log_path: dir.join("log/responses.jsonl"),
            target_raters: target,
            exclude_reference: true,
            seed: 7,
        })
        .unwrap()
    }

    fn answer(st: &mut Study, rater: &str) -> Option<SubmitAck> {
        match st.next_assignment(rater).unwrap() {
            Assignment::Assigned { sample_id, images, .. } => Some(st.submit_response(rater, &sample_id, images).unwrap()),
            Assignment::Complete { .. } => None,
        }
    }

    #[test]
    fn reference_is_never_presented() {
        let dir = tempfile::tempdir().unwrap();
        write_samples(&dir.path().join("samples"), 3, 6);
        let mut st = open(dir.path(), 30);
        for r in 0..10 {
            if let Assignment::Assigned { images, .. } = st.next_assignment(&format!("r{r}")).unwrap() {
                assert_eq!(images.len(), 6);
                assert!(!images.iter().any(|i| i == REFERENCE_ID));
            }
        }
        assert!(st.image_path("s00", REFERENCE_ID).is_none());
        assert!(st.image_path("s00", "img3").is_some());
    }

    #[test]
    fn rater_finishes_with_completion_marker() {
        let dir = tempfile::tempdir().unwrap();
        write_samples(&dir.path().join("samples"), 4, 3);
        let mut st = open(dir.path(), 30);
        let mut seen = BTreeSet::new();
        while let Some(a) = answer(&mut st, "solo") {
            assert!(seen.insert(a.sample_id));
        }
        assert_eq!(seen.len(), 4);
        assert_eq!(
            st.next_assignment("solo").unwrap(),
            Assignment::Complete { answered: 4, total: 4 }
        );
    }

    #[test]
    fn pending_assignment_is_repeated() {
        let dir = tempfile::tempdir().unwrap();
        write_samples(&dir.path().join("samples"), 3, 6);
        let mut st = open(dir.path(), 30);
        let Assignment::Assigned { sample_id: a, images: ia, .. } = st.next_assignment("x").unwrap() else { panic!() };
        let Assignment::Assigned { sample_id: b, images: ib, .. } = st.next_assignment("x").unwrap() else { panic!() };
        assert_eq!(a, b);
        assert_eq!(ia.iter().collect::<BTreeSet<_>>(), ib.iter().collect::<BTreeSet<_>>());
        // a second rater is steered elsewhere while `a` is held
        let Assignment::Assigned { sample_id: c, .. } = st.next_assignment("y").unwrap() else { panic!() };
        assert_ne!(a, c);
    }

    #[test]
    fn submission_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_samples(&dir.path().join("samples"), 2, 3);
        let mut st = open(dir.path(), 30);
        let ord = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let field = |e: Error| match e {
            Error::Validation { field, .. } => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(field(st.submit_response("r", "s00", ord(&["img0", "img1"])).unwrap_err()), "ordering");
        assert_eq!(field(st.submit_response("r", "s00", ord(&["img0", "img0", "img1"])).unwrap_err()), "ordering");
        assert_eq!(field(st.submit_response("r", "s00", ord(&["img0", "img1", "reference"])).unwrap_err()), "ordering");
        assert_eq!(field(st.submit_response("", "s00", ord(&["img0", "img1", "img2"])).unwrap_err()), "rater");
        assert!(matches!(st.submit_response("r", "nope", ord(&["a"])), Err(Error::NotFound(_))));
        assert!(matches!(st.results(Some("s00")), Err(Error::EmptyScope(_))));
        assert!(matches!(st.results(None), Err(Error::EmptyScope(_))));
        assert!(matches!(st.results(Some("zz")), Err(Error::NotFound(_))));
        st.submit_response("r", "s00", ord(&["img2", "img0", "img1"])).unwrap();
        assert!(matches!(
            st.submit_response("r", "s00", ord(&["img0", "img1", "img2"])),
            Err(Error::Conflict(_))
        ));
        assert_eq!(st.response_count(), 1);
        let res = st.results(Some("s00")).unwrap();
        assert_eq!(res[0].ranking.ordering(), vec!["img2", "img0", "img1"]);
    }

    #[test]
    fn completion_at_target() {
        let dir = tempfile::tempdir().unwrap();
        write_samples(&dir.path().join("samples"), 1, 2);
        let mut st = open(dir.path(), 3);
        let acks: Vec<SubmitAck> = (0..3).map(|r| answer(&mut st, &format!("r{r}")).unwrap()).collect();
        assert_eq!(acks.iter().map(|a| a.complete).collect::<Vec<_>>(), vec![false, false, true]);
        assert!(matches!(st.next_assignment("late").unwrap(), Assignment::Complete { .. }));
        assert!(st.results(None).unwrap()[0].complete);
    }

    #[test]
    fn log_replay_restores_state() {
        let dir = tempfile::tempdir().unwrap();
        write_samples(&dir.path().join("samples"), 5, 4);
        let mut st = open(dir.path(), 30);
        for r in 0..7 {
            for _ in 0..3 {
                answer(&mut st, &format!("r{r}"));
            }
        }
        let before = serde_json::to_string(&st.results(None).unwrap()).unwrap();
        let cov = st.coverage();
        drop(st);
        let mut st = open(dir.path(), 30);
        assert_eq!(serde_json::to_string(&st.results(None).unwrap()).unwrap(), before);
        assert_eq!(st.coverage(), cov);
        assert_eq!(st.response_count(), 21);
        // duplicates stay rejected after restart
        let Assignment::Assigned { sample_id, .. } = st.next_assignment("r0").unwrap() else { panic!() };
        let first = st.results(None).unwrap();
        let done = first.iter().find(|r| r.ranking.sample_id != sample_id).unwrap();
        let ord = done.ranking.ordering().iter().map(|s| s.to_string()).collect();
        let rater = st.records.iter().find(|r| r.sample_id == done.ranking.sample_id).unwrap().rater_id.clone();
        assert!(matches!(
            st.submit_response(&rater, &done.ranking.sample_id, ord),
            Err(Error::Conflict(_))
        ));
    }

    #[test]
    fn corrupt_log_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        write_samples(&dir.path().join("samples"), 1, 2);
        std::fs::create_dir_all(dir.path().join("log")).unwrap();
        std::fs::write(dir.path().join("log/responses.jsonl"), "{not json}\n").unwrap();
        let r = Study::open(StudyConfig {
            samples_root: dir.path().join("samples"),
            log_path: dir.path().join("log/responses.jsonl"),
            ..Default::default()
        });
        assert!(matches!(r, Err(Error::Load { .. })));
    }
}
