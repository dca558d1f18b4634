//! Zero-shot recognition runs and representation comparison reports.
//!
//! A run encodes every sample of a dataset (full event window) with one
//! representation, asks the backend to pick a class from the dataset's class
//! list and scores the parsed answer. Responses that name no class count as
//! wrong. Backend errors do not stop a run: the sample is recorded as Unknown
//! with the error message attached.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::events_io::{load_events, DatasetIndex, EventsError};
use crate::generator::{Generator, GeneratorError};
use crate::hashing::sha256_hex;
use crate::llm_client::{complete_many, parse_prediction, recognition_prompt, CaptionRequest, LlmBackend, Prediction};
use crate::representation::{
    encode_event_frame, encode_tencode, load_png, RepImage, RepKind, RepresentationError,
};

pub const REPORT_HEADER: &str = "backend,kind,dataset,accuracy_pct,total,unknown,best_flag";

const NMNIST_CLASSES: &str = include_str!("../data/nmnist_classes.txt");
const NCALTECH101_CLASSES: &str = include_str!("../data/ncaltech101_classes.txt");

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("representation {0} needs a generator checkpoint")]
    MissingCheckpoint(String),
    #[error("representation {source_name} has no external frames for {} sample(s): {}", missing.len(), missing.join(", "))]
    MissingExternalFrames { source_name: String, missing: Vec<String> },
    #[error("no records to aggregate")]
    EmptyRecords,
    #[error("invalid evaluation input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Events(#[from] EventsError),
    #[error(transparent)]
    Representation(#[from] RepresentationError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Class list shipped with the crate: `n-mnist` or `n-caltech101`.
pub fn builtin_class_list(name: &str) -> Option<Vec<String>> {
    let text = match name.to_ascii_lowercase().replace('_', "-").as_str() {
        "n-mnist" | "nmnist" => NMNIST_CLASSES,
        "n-caltech101" | "ncaltech101" => NCALTECH101_CLASSES,
        _ => return None,
    };
    Some(crate::events_io::parse_class_list(text))
}

/// How a class label is shown to the model: underscores become spaces.
pub fn display_name(label: &str) -> String {
    label.replace('_', " ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub true_label: String,
    /// Name of the representation source (usually the kind).
    pub kind: String,
    pub backend: String,
    pub dataset: String,
    pub response: String,
    pub predicted: Prediction,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// A dataset split to evaluate.
#[derive(Debug, Clone)]
pub struct EvalDataset {
    pub name: String,
    pub index: DatasetIndex,
    /// Sensor size for formats that do not carry one.
    pub sensor: Option<(u32, u32)>,
}

/// One representation under comparison.
#[derive(Debug, Clone)]
pub struct RepSource {
    /// Label in reports, e.g. `tencode` or `e2vid`.
    pub name: String,
    pub kind: RepKind,
    pub generator: Option<Generator>,
    /// Sample id to frame, for [`RepKind::ExternalFrame`].
    pub frames: Option<HashMap<String, RepImage>>,
}

impl RepSource {
    pub fn new(kind: RepKind) -> Self {
        Self {
            name: kind.as_str().to_string(),
            kind,
            generator: None,
            frames: None,
        }
    }

    pub fn evrep(generator: Generator) -> Self {
        Self {
            generator: Some(generator),
            ..Self::new(RepKind::Evrep)
        }
    }

    pub fn external(name: impl Into<String>, frames: HashMap<String, RepImage>) -> Self {
        Self {
            name: name.into(),
            frames: Some(frames),
            ..Self::new(RepKind::ExternalFrame)
        }
    }

    fn check(&self, dataset: &DatasetIndex) -> Result<()> {
        match self.kind {
            RepKind::Evrep if self.generator.is_none() => Err(EvalError::MissingCheckpoint(self.name.clone())),
            RepKind::ExternalFrame => {
                let frames = self.frames.as_ref();
                let missing: Vec<String> = dataset
                    .samples()
                    .iter()
                    .filter(|s| !frames.is_some_and(|f| f.contains_key(&s.id)))
                    .map(|s| s.id.clone())
                    .collect();
                if missing.is_empty() {
                    Ok(())
                } else {
                    Err(EvalError::MissingExternalFrames {
                        source_name: self.name.clone(),
                        missing,
                    })
                }
            }
            _ => Ok(()),
        }
    }

    /// The image sent to the model for one sample.
    pub fn represent(&self, sample_id: &str, events: &Path, sensor: Option<(u32, u32)>) -> Result<RepImage> {
        if self.kind == RepKind::ExternalFrame {
            return self
                .frames
                .as_ref()
                .and_then(|f| f.get(sample_id))
                .cloned()
                .ok_or_else(|| EvalError::MissingExternalFrames {
                    source_name: self.name.clone(),
                    missing: vec![sample_id.to_string()],
                });
        }
        let stream = load_events(events, sensor)?;
        let (t0, t1) = stream.full_window();
        Ok(match self.kind {
            RepKind::EventFrame => encode_event_frame(&stream, t0, t1)?,
            RepKind::Tencode => encode_tencode(&stream, t0, t1)?.into_rep(),
            RepKind::Evrep => {
                let generator = self
                    .generator
                    .as_ref()
                    .ok_or_else(|| EvalError::MissingCheckpoint(self.name.clone()))?;
                let tencode = encode_tencode(&stream, t0, t1)?;
                RepImage::new(generator.generate(&tencode.pixels)?, RepKind::Evrep)
            }
            RepKind::ExternalFrame => unreachable!(),
        })
    }
}

/// Recognition over every sample of `dataset`, in dataset order.
pub fn run_recognition(dataset: &EvalDataset, source: &RepSource, backend: &dyn LlmBackend) -> Result<Vec<EvalRecord>> {
    let index = &dataset.index;
    source.check(index)?;
    let labels = index.class_list();
    if labels.is_empty() {
        return Err(EvalError::Invalid(format!("dataset {} has an empty class list", dataset.name)));
    }
    let shown: Vec<String> = labels.iter().map(|l| display_name(l)).collect();
    let prompt = recognition_prompt(&shown);
    let requests = index
        .samples()
        .iter()
        .map(|s| {
            let image = source.represent(&s.id, &s.events_path, dataset.sensor)?;
            Ok(CaptionRequest::new(image, prompt.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut responses: Vec<Option<_>> = (0..requests.len()).map(|_| None).collect();
    for (i, r) in complete_many(backend, &requests, backend.max_concurrency()) {
        responses[i] = Some(r);
    }
    Ok(index
        .samples()
        .iter()
        .zip(responses)
        .map(|(s, r)| {
            let (response, error) = match r.expect("every request answered") {
                Ok(resp) => (resp.text, None),
                Err(e) => {
                    log::warn!("{} / {}: {e}", source.name, s.id);
                    (String::new(), Some(e.to_string()))
                }
            };
            let predicted = match parse_prediction(&response, &shown) {
                Prediction::Label(l) => {
                    let i = shown.iter().position(|c| *c == l).expect("parsed from list");
                    Prediction::Label(labels[i].clone())
                }
                Prediction::Unknown => Prediction::Unknown,
            };
            let correct = predicted.label().is_some_and(|p| p.eq_ignore_ascii_case(&s.label));
            EvalRecord {
                sample_id: s.id.clone(),
                true_label: s.label.clone(),
                kind: source.name.clone(),
                backend: backend.id().to_string(),
                dataset: dataset.name.clone(),
                response,
                predicted,
                correct,
                error,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub backend: String,
    pub kind: String,
    pub dataset: String,
    pub correct: usize,
    pub total: usize,
    pub unknown: usize,
    pub accuracy_pct: f64,
    pub best_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetadata {
    /// SHA-256 of the recognition prompt per dataset.
    pub prompt_sha256: HashMap<String, String>,
    pub seed: Option<u64>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub rows: Vec<AccuracyRow>,
    pub metadata: RunMetadata,
}

impl AccuracyReport {
    pub fn row(&self, backend: &str, kind: &str, dataset: &str) -> Option<&AccuracyRow> {
        self.rows
            .iter()
            .find(|r| r.backend == backend && r.kind == kind && r.dataset == dataset)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.2},{},{},{}\n",
                r.backend,
                r.kind,
                r.dataset,
                r.accuracy_pct,
                r.total,
                r.unknown,
                u8::from(r.best_flag)
            ));
        }
        out
    }

    /// Fixed-width table for terminals.
    pub fn summary_table(&self) -> String {
        let mut out = format!(
            "{:<12} {:<16} {:<14} {:>9} {:>6} {:>8}\n",
            "backend", "kind", "dataset", "acc(%)", "total", "unknown"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<12} {:<16} {:<14} {:>8.2}{} {:>6} {:>8}\n",
                r.backend,
                r.kind,
                r.dataset,
                r.accuracy_pct,
                if r.best_flag { "*" } else { " " },
                r.total,
                r.unknown
            ));
        }
        out
    }
}

/// Accuracy per (backend, kind, dataset), rows in order of first appearance.
/// The best row of each (backend, dataset) is flagged; ties go to the
/// earliest row.
pub fn aggregate(records: &[EvalRecord]) -> Result<AccuracyReport> {
    if records.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    let mut rows: Vec<AccuracyRow> = Vec::new();
    let mut at: HashMap<(&str, &str, &str), usize> = HashMap::new();
    for r in records {
        let key = (r.backend.as_str(), r.kind.as_str(), r.dataset.as_str());
        let i = *at.entry(key).or_insert_with(|| {
            rows.push(AccuracyRow {
                backend: r.backend.clone(),
                kind: r.kind.clone(),
                dataset: r.dataset.clone(),
                correct: 0,
                total: 0,
                unknown: 0,
                accuracy_pct: 0.0,
                best_flag: false,
            });
            rows.len() - 1
        });
        let row = &mut rows[i];
        row.total += 1;
        row.correct += usize::from(r.correct);
        row.unknown += usize::from(r.predicted == Prediction::Unknown);
    }
    for row in &mut rows {
        row.accuracy_pct = 100.0 * row.correct as f64 / row.total as f64;
    }
    flag_best(&mut rows);
    Ok(AccuracyReport {
        rows,
        metadata: RunMetadata::default(),
    })
}

fn flag_best(rows: &mut [AccuracyRow]) {
    let mut best: HashMap<(String, String), usize> = HashMap::new();
    for (i, r) in rows.iter().enumerate() {
        let key = (r.backend.clone(), r.dataset.clone());
        match best.get(&key) {
            Some(&j) if rows[j].accuracy_pct >= r.accuracy_pct => {}
            _ => {
                best.insert(key, i);
            }
        }
    }
    for r in rows.iter_mut() {
        r.best_flag = false;
    }
    for (_, i) in best {
        rows[i].best_flag = true;
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Output of [`compare_representations`].
#[derive(Debug, Clone)]
pub struct Comparison {
    pub report: AccuracyReport,
    pub records: Vec<EvalRecord>,
    pub csv_path: PathBuf,
    pub json_path: PathBuf,
    pub records_path: PathBuf,
}

/// Runs every (backend, dataset, source) combination and writes
/// `report.csv`, `report.json` and `records.jsonl` into `out_dir`.
///
/// Rows are ordered backend, then dataset, then source, as declared.
pub fn compare_representations(
    datasets: &[EvalDataset],
    sources: &[RepSource],
    backends: &[&dyn LlmBackend],
    out_dir: &Path,
    seed: Option<u64>,
) -> Result<Comparison> {
    if sources.is_empty() {
        return Err(EvalError::Invalid("no representations to compare".into()));
    }
    if datasets.is_empty() || backends.is_empty() {
        return Err(EvalError::Invalid("need at least one dataset and one backend".into()));
    }
    let mut names: Vec<&str> = sources.iter().map(|s| s.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(EvalError::Invalid("representation names must be unique".into()));
    }
    for d in datasets {
        for s in sources {
            s.check(&d.index)?;
        }
    }
    let started = unix_now();
    let mut records = Vec::new();
    let write = |records: &[EvalRecord]| write_records(&out_dir.join("records.jsonl"), records);
    for backend in backends {
        for d in datasets {
            for s in sources {
                match run_recognition(d, s, *backend) {
                    Ok(r) => records.extend(r),
                    Err(e) => {
                        write(&records)?;
                        return Err(e);
                    }
                }
            }
        }
    }
    let mut report = aggregate(&records)?;
    report.metadata = RunMetadata {
        prompt_sha256: datasets
            .iter()
            .map(|d| {
                let shown: Vec<String> = d.index.class_list().iter().map(|l| display_name(l)).collect();
                (d.name.clone(), sha256_hex(recognition_prompt(&shown).as_bytes()))
            })
            .collect(),
        seed,
        started_unix: started,
        finished_unix: unix_now(),
    };
    let csv_path = out_dir.join("report.csv");
    let json_path = out_dir.join("report.json");
    let records_path = out_dir.join("records.jsonl");
    write(&records)?;
    write_file(&csv_path, report.to_csv().as_bytes())?;
    write_file(
        &json_path,
        serde_json::to_string_pretty(&report).expect("report serializes").as_bytes(),
    )?;
    Ok(Comparison {
        report,
        records,
        csv_path,
        json_path,
        records_path,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    fs::write(path, bytes).map_err(io)
}

pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    write_file(path, text.as_bytes())
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| EvalError::Invalid(format!("record line: {e}"))))
        .collect()
}

/// Frames found in `dir` plus the ids that have none.
#[derive(Debug, Clone, Default)]
pub struct ExternalFrames {
    pub frames: HashMap<String, RepImage>,
    pub missing: Vec<String>,
}

/// Loads `<dir>/<sample id>.png` for every sample in `index`, resized to
/// `size` when given. 8-bit images are divided by 255, 16-bit ones by 65535.
pub fn load_external_frames(dir: &Path, index: &DatasetIndex, size: Option<(u32, u32)>) -> Result<ExternalFrames> {
    let mut out = ExternalFrames::default();
    for s in index.samples() {
        let path = dir.join(format!("{}.png", s.id));
        if path.is_file() {
            out.frames.insert(s.id.clone(), load_png(&path, RepKind::ExternalFrame, size)?);
        } else {
            out.missing.push(s.id.clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(kind: &str, backend: &str, pred: Option<&str>, truth: &str) -> EvalRecord {
        let predicted = pred.map_or(Prediction::Unknown, |p| Prediction::Label(p.into()));
        EvalRecord {
            sample_id: "s".into(),
            true_label: truth.into(),
            kind: kind.into(),
            backend: backend.into(),
            dataset: "d".into(),
            response: String::new(),
            correct: pred.is_some_and(|p| p.eq_ignore_ascii_case(truth)),
            predicted,
            error: None,
        }
    }

    #[test]
    fn builtin_lists() {
        let c = builtin_class_list("N-Caltech101").unwrap();
        assert_eq!(c.len(), 101);
        assert!(c.contains(&"car_side".to_string()));
        assert_eq!(builtin_class_list("n-mnist").unwrap().len(), 10);
        assert!(builtin_class_list("imagenet").is_none());
        assert_eq!(display_name("car_side"), "car side");
    }

    #[test]
    fn aggregate_counts() {
        let mut r: Vec<EvalRecord> = (0..10)
            .map(|i| rec("tencode", "mock", Some(if i < 7 { "a" } else { "b" }), "a"))
            .collect();
        let rep = aggregate(&r).unwrap();
        assert_eq!(rep.rows[0].accuracy_pct, 70.0);

        r = (0..4).map(|_| rec("tencode", "mock", None, "a")).collect();
        let rep = aggregate(&r).unwrap();
        assert_eq!((rep.rows[0].accuracy_pct, rep.rows[0].unknown, rep.rows[0].total), (0.0, 4, 4));
        assert!(matches!(aggregate(&[]), Err(EvalError::EmptyRecords)));
    }

    #[test]
    fn grouped_kinds() {
        let mut r = Vec::new();
        for i in 0..4 {
            r.push(rec("x", "mock", Some(if i < 3 { "a" } else { "b" }), "a"));
            r.push(rec("y", "mock", Some(if i < 1 { "a" } else { "b" }), "a"));
        }
        let rep = aggregate(&r).unwrap();
        assert_eq!(rep.row("mock", "x", "d").unwrap().accuracy_pct, 75.0);
        assert_eq!(rep.row("mock", "y", "d").unwrap().accuracy_pct, 25.0);
        assert!(rep.row("mock", "x", "d").unwrap().best_flag);
        assert!(!rep.row("mock", "y", "d").unwrap().best_flag);
    }

    #[test]
    fn correctness_is_case_insensitive() {
        let r = rec("k", "b", Some("Chair"), "chair");
        assert!(r.correct);
    }

    #[test]
    fn csv_shape() {
        let r = vec![rec("tencode", "mock", Some("a"), "a"), rec("evrep", "mock", None, "a")];
        let csv = aggregate(&r).unwrap().to_csv();
        assert_eq!(
            csv,
            "backend,kind,dataset,accuracy_pct,total,unknown,best_flag\nmock,tencode,d,100.00,1,0,1\nmock,evrep,d,0.00,1,1,0\n"
        );
    }
}
