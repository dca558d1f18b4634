//! Event-stream parsing, dataset indexing, windowing and train/test splits.
//!
//! Two on-disk event formats are supported:
//!
//! - N-MNIST / ATIS binary: 5 bytes per event. Byte 0 is x, byte 1 is y, bit 7 of
//!   byte 2 is the polarity (set = +1) and the remaining 23 bits of bytes 2..=4
//!   hold the timestamp in microseconds, big-endian.
//! - CSV rows `t,x,y,p` with `p` in `{0, 1}` mapped to `{-1, +1}`.
//!
//! Datasets are either one directory per class or described by a JSON-lines
//! manifest (`manifest.jsonl`) with `{id, events_path, label, rgb_path?}` rows.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Default N-MNIST sensor resolution.
pub const NMNIST_SIZE: u32 = 34;

const NMNIST_RECORD: usize = 5;
const NMNIST_MAX_T: u64 = (1 << 23) - 1;

#[derive(Debug, thiserror::Error)]
pub enum EventsError {
    #[error("truncated record at byte offset {}: {len} bytes is not a multiple of 5", len - len % 5)]
    TruncatedRecord { len: usize },
    #[error("event {index} at ({x}, {y}) outside {width}x{height} sensor")]
    CoordinateOutOfRange {
        index: usize,
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    },
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("timestamps decrease at event {index} ({prev} -> {next})")]
    UnsortedTimestamps { index: usize, prev: u64, next: u64 },
    #[error("invalid window [{t0}, {t1})")]
    InvalidWindow { t0: u64, t1: u64 },
    #[error("event {index} cannot be stored in the 5-byte format: {reason}")]
    Unencodable { index: usize, reason: String },
    #[error("class {label:?} has {count} samples, at least 6 are needed for a 5:1 split")]
    ClassTooSmall { label: String, count: usize },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<EventsError>,
    },
}

pub type Result<T, E = EventsError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    pub x: u32,
    pub y: u32,
    /// Microseconds.
    pub t: u64,
    /// +1 or -1.
    pub p: i8,
}

impl Event {
    pub fn new(x: u32, y: u32, t: u64, positive: bool) -> Self {
        Self {
            x,
            y,
            t,
            p: if positive { 1 } else { -1 },
        }
    }

    pub fn is_positive(&self) -> bool {
        self.p > 0
    }
}

/// Time-ordered events from a `width` x `height` sensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventStream {
    events: Vec<Event>,
    width: u32,
    height: u32,
}

impl EventStream {
    /// Validates bounds, polarity and timestamp order.
    pub fn new(events: Vec<Event>, width: u32, height: u32) -> Result<Self> {
        for (index, e) in events.iter().enumerate() {
            if e.x >= width || e.y >= height {
                return Err(EventsError::CoordinateOutOfRange {
                    index,
                    x: e.x,
                    y: e.y,
                    width,
                    height,
                });
            }
            if e.p != 1 && e.p != -1 {
                return Err(EventsError::MalformedRow {
                    line: index + 1,
                    reason: format!("polarity {} is not +1/-1", e.p),
                });
            }
        }
        if let Some(index) = first_unsorted(&events) {
            return Err(EventsError::UnsortedTimestamps {
                index,
                prev: events[index - 1].t,
                next: events[index].t,
            });
        }
        Ok(Self {
            events,
            width,
            height,
        })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            events: Vec::new(),
            width,
            height,
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// `[first t, last t + 1)`, the window holding every event; `[0, 1)` when empty.
    pub fn full_window(&self) -> (u64, u64) {
        match (self.events.first(), self.events.last()) {
            (Some(a), Some(b)) => (a.t, b.t + 1),
            _ => (0, 1),
        }
    }
}

fn first_unsorted(events: &[Event]) -> Option<usize> {
    events
        .windows(2)
        .position(|w| w[1].t < w[0].t)
        .map(|i| i + 1)
}

pub fn parse_nmnist_bin(bytes: &[u8]) -> Result<EventStream> {
    parse_nmnist_bin_sized(bytes, NMNIST_SIZE, NMNIST_SIZE)
}

pub fn parse_nmnist_bin_sized(bytes: &[u8], width: u32, height: u32) -> Result<EventStream> {
    if bytes.len() % NMNIST_RECORD != 0 {
        return Err(EventsError::TruncatedRecord { len: bytes.len() });
    }
    let events = bytes
        .chunks_exact(NMNIST_RECORD)
        .map(|r| {
            let t = (u64::from(r[2] & 0x7f) << 16) | (u64::from(r[3]) << 8) | u64::from(r[4]);
            Event::new(u32::from(r[0]), u32::from(r[1]), t, r[2] & 0x80 != 0)
        })
        .collect();
    EventStream::new(events, width, height)
}

/// Inverse of [`parse_nmnist_bin`].
pub fn encode_nmnist_bin(stream: &EventStream) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(stream.len() * NMNIST_RECORD);
    for (index, e) in stream.events().iter().enumerate() {
        if e.x > 255 || e.y > 255 {
            return Err(EventsError::Unencodable {
                index,
                reason: format!("coordinate ({}, {}) exceeds one byte", e.x, e.y),
            });
        }
        if e.t > NMNIST_MAX_T {
            return Err(EventsError::Unencodable {
                index,
                reason: format!("timestamp {} exceeds 23 bits", e.t),
            });
        }
        let pol = if e.is_positive() { 0x80 } else { 0 };
        out.extend_from_slice(&[
            e.x as u8,
            e.y as u8,
            pol | ((e.t >> 16) as u8 & 0x7f),
            (e.t >> 8) as u8,
            e.t as u8,
        ]);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CsvOptions {
    /// Sort rows by timestamp instead of rejecting out-of-order input.
    pub sort: bool,
}

pub fn parse_csv_events(text: &str, width: u32, height: u32) -> Result<EventStream> {
    parse_csv_events_with(text, width, height, CsvOptions::default())
}

pub fn parse_csv_events_with(
    text: &str,
    width: u32,
    height: u32,
    options: CsvOptions,
) -> Result<EventStream> {
    let mut events = csv_rows(text)?;
    if options.sort {
        events.sort_by_key(|e| e.t);
    }
    EventStream::new(events, width, height)
}

fn csv_rows(text: &str) -> Result<Vec<Event>> {
    let mut events = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let row = raw.trim();
        if row.is_empty() || row.starts_with('#') {
            continue;
        }
        if line == 1 && row.replace(' ', "").eq_ignore_ascii_case("t,x,y,p") {
            continue;
        }
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(EventsError::MalformedRow {
                line,
                reason: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let num = |s: &str, what: &str| -> Result<u64> {
            s.parse::<u64>().map_err(|_| EventsError::MalformedRow {
                line,
                reason: format!("{what} {s:?} is not a non-negative integer"),
            })
        };
        let t = num(fields[0], "timestamp")?;
        let x = num(fields[1], "x")?;
        let y = num(fields[2], "y")?;
        let positive = match fields[3] {
            "1" => true,
            "0" => false,
            other => {
                return Err(EventsError::MalformedRow {
                    line,
                    reason: format!("polarity {other:?} is not 0 or 1"),
                })
            }
        };
        let coord = |v: u64| {
            u32::try_from(v).map_err(|_| EventsError::MalformedRow {
                line,
                reason: format!("coordinate {v} too large"),
            })
        };
        events.push(Event::new(coord(x)?, coord(y)?, t, positive));
    }
    Ok(events)
}

/// Events with `t0 <= t < t1`, order preserved.
pub fn window_events(stream: &EventStream, t0: u64, t1: u64) -> Result<EventStream> {
    if t0 > t1 {
        return Err(EventsError::InvalidWindow { t0, t1 });
    }
    let ev = stream.events();
    let lo = ev.partition_point(|e| e.t < t0);
    let hi = ev.partition_point(|e| e.t < t1);
    Ok(EventStream {
        events: ev[lo..hi].to_vec(),
        width: stream.width,
        height: stream.height,
    })
}

/// On-disk event encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    /// 5-byte N-MNIST records.
    Bin,
    /// `t,x,y,p` text rows.
    Csv,
}

impl EventFormat {
    /// `.csv` / `.txt` are text, anything else binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("csv") | Some("txt") => EventFormat::Csv,
            _ => EventFormat::Bin,
        }
    }
}

impl std::str::FromStr for EventFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bin" => Ok(EventFormat::Bin),
            "csv" => Ok(EventFormat::Csv),
            other => Err(format!("unknown event format {other:?} (expected bin or csv)")),
        }
    }
}

/// Loads an event file, choosing the parser by extension (`.bin` or `.csv`).
///
/// Binary files default to the 34x34 N-MNIST sensor. CSV files without an
/// explicit resolution take the bounding box of their coordinates.
pub fn load_events(path: &Path, sensor: Option<(u32, u32)>) -> Result<EventStream> {
    load_events_as(path, EventFormat::from_path(path), sensor)
}

/// [`load_events`] with the format given explicitly.
pub fn load_events_as(path: &Path, format: EventFormat, sensor: Option<(u32, u32)>) -> Result<EventStream> {
    let wrap = |e: EventsError| EventsError::InFile {
        path: path.to_path_buf(),
        source: Box::new(e),
    };
    match format {
        EventFormat::Csv => {
            let text = fs::read_to_string(path).map_err(|source| EventsError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            let (w, h) = match sensor {
                Some(s) => s,
                None => {
                    let rows = csv_rows(&text).map_err(wrap)?;
                    let w = rows.iter().map(|e| e.x + 1).max().unwrap_or(NMNIST_SIZE);
                    let h = rows.iter().map(|e| e.y + 1).max().unwrap_or(NMNIST_SIZE);
                    (w, h)
                }
            };
            parse_csv_events(&text, w, h).map_err(wrap)
        }
        EventFormat::Bin => {
            let bytes = fs::read(path).map_err(|source| EventsError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            let (w, h) = sensor.unwrap_or((NMNIST_SIZE, NMNIST_SIZE));
            parse_nmnist_bin_sized(&bytes, w, h).map_err(wrap)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub events_path: PathBuf,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rgb_path: Option<PathBuf>,
}

/// Labeled samples plus the ordered class list used in prompts and reports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    samples: Vec<Sample>,
    class_list: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CLASSES_FILE: &str = "classes.txt";

impl DatasetIndex {
    pub fn new(samples: Vec<Sample>, class_list: Vec<String>) -> Result<Self> {
        let classes: HashSet<&str> = class_list.iter().map(String::as_str).collect();
        if classes.len() != class_list.len() {
            return Err(EventsError::InvalidDataset(
                "duplicate names in class list".into(),
            ));
        }
        let mut ids = HashSet::new();
        for s in &samples {
            if !classes.contains(s.label.as_str()) {
                return Err(EventsError::InvalidDataset(format!(
                    "sample {:?} has label {:?} missing from the class list",
                    s.id, s.label
                )));
            }
            if !ids.insert(s.id.as_str()) {
                return Err(EventsError::InvalidDataset(format!(
                    "duplicate sample id {:?}",
                    s.id
                )));
            }
        }
        Ok(Self {
            samples,
            class_list,
        })
    }

    /// Builds an index whose class list is the sorted set of labels.
    pub fn from_samples(samples: Vec<Sample>) -> Result<Self> {
        let classes: BTreeSet<String> = samples.iter().map(|s| s.label.clone()).collect();
        Self::new(samples, classes.into_iter().collect())
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn class_list(&self) -> &[String] {
        &self.class_list
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Same class list, different samples.
    pub fn with_samples(&self, samples: Vec<Sample>) -> Self {
        Self {
            samples,
            class_list: self.class_list.clone(),
        }
    }

    /// Parses manifest JSON lines. Relative paths resolve against `base`.
    pub fn from_manifest(text: &str, base: &Path) -> Result<Self> {
        let mut samples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut s: Sample = serde_json::from_str(line).map_err(|e| EventsError::MalformedRow {
                line: i + 1,
                reason: e.to_string(),
            })?;
            s.events_path = base.join(&s.events_path);
            s.rgb_path = s.rgb_path.map(|p| base.join(p));
            samples.push(s);
        }
        Self::from_samples(samples)
    }

    pub fn to_manifest(&self) -> String {
        self.samples
            .iter()
            .map(|s| serde_json::to_string(s).expect("sample serializes") + "\n")
            .collect()
    }

    /// Opens a dataset directory.
    ///
    /// Uses `manifest.jsonl` when present, otherwise treats every
    /// subdirectory as a class holding `.bin` / `.csv` event files. A
    /// `classes.txt` (one name per line) overrides the class order.
    pub fn open(root: &Path) -> Result<Self> {
        let io = |source| EventsError::Io {
            path: root.to_path_buf(),
            source,
        };
        let manifest = root.join(MANIFEST_FILE);
        let mut index = if manifest.is_file() {
            let text = fs::read_to_string(&manifest).map_err(io)?;
            Self::from_manifest(&text, root)?
        } else {
            let mut samples = Vec::new();
            let mut dirs: Vec<PathBuf> = fs::read_dir(root)
                .map_err(io)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect();
            dirs.sort();
            for dir in dirs {
                let label = dir.file_name().unwrap().to_string_lossy().into_owned();
                let mut files: Vec<PathBuf> = fs::read_dir(&dir)
                    .map_err(io)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| {
                        matches!(
                            p.extension().and_then(|e| e.to_str()),
                            Some("bin") | Some("csv")
                        )
                    })
                    .collect();
                files.sort();
                for f in files {
                    let stem = f.file_stem().unwrap().to_string_lossy().into_owned();
                    samples.push(Sample {
                        id: format!("{label}/{stem}"),
                        events_path: f,
                        label: label.clone(),
                        rgb_path: None,
                    });
                }
            }
            Self::from_samples(samples)?
        };
        let classes = root.join(CLASSES_FILE);
        if classes.is_file() {
            let text = fs::read_to_string(&classes).map_err(io)?;
            index = Self::new(index.samples, parse_class_list(&text))?;
        }
        Ok(index)
    }
}

/// One class name per line; blank lines and `#` comments ignored.
pub fn parse_class_list(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect()
}

/// Per-class 5:1 train/test partition.
///
/// Each class contributes `floor(n / 6)` test samples chosen by a seeded
/// shuffle; the remainder goes to train. Both outputs keep input order.
pub fn split_dataset(index: &DatasetIndex, seed: u64) -> Result<(DatasetIndex, DatasetIndex)> {
    let mut by_class: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, s) in index.samples.iter().enumerate() {
        by_class.entry(s.label.as_str()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_test = vec![false; index.samples.len()];
    for class in &index.class_list {
        let Some(members) = by_class.get(class.as_str()) else {
            continue;
        };
        if members.len() < 6 {
            return Err(EventsError::ClassTooSmall {
                label: class.clone(),
                count: members.len(),
            });
        }
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        for &i in &shuffled[..members.len() / 6] {
            is_test[i] = true;
        }
    }
    let (test, train): (Vec<_>, Vec<_>) = index
        .samples
        .iter()
        .cloned()
        .zip(is_test)
        .partition(|(_, t)| *t);
    Ok((
        index.with_samples(train.into_iter().map(|(s, _)| s).collect()),
        index.with_samples(test.into_iter().map(|(s, _)| s).collect()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, label: &str) -> Sample {
        Sample {
            id: id.into(),
            events_path: PathBuf::from(format!("{id}.bin")),
            label: label.into(),
            rgb_path: None,
        }
    }

    #[test]
    fn nmnist_record_layout() {
        let s = parse_nmnist_bin(&[0x02, 0x03, 0x80, 0x00, 0x64]).unwrap();
        assert_eq!(s.events(), &[Event::new(2, 3, 100, true)]);
        assert_eq!((s.width(), s.height()), (34, 34));

        // polarity bit clear, timestamp spread over all 23 bits
        let s = parse_nmnist_bin(&[0x21, 0x00, 0x7f, 0xff, 0xff]).unwrap();
        assert_eq!(s.events()[0], Event::new(33, 0, (1 << 23) - 1, false));
    }

    #[test]
    fn nmnist_empty_and_truncated() {
        assert!(parse_nmnist_bin(&[]).unwrap().is_empty());
        assert!(matches!(
            parse_nmnist_bin(&[0; 7]),
            Err(EventsError::TruncatedRecord { len: 7 })
        ));
    }

    #[test]
    fn nmnist_out_of_range() {
        let err = parse_nmnist_bin(&[34, 0, 0x80, 0, 1]).unwrap_err();
        assert!(matches!(err, EventsError::CoordinateOutOfRange { x: 34, .. }));
        assert!(parse_nmnist_bin_sized(&[34, 0, 0x80, 0, 1], 40, 40).is_ok());
    }

    #[test]
    fn csv_rows_map_polarity() {
        let s = parse_csv_events("100,2,3,1", 34, 34).unwrap();
        assert_eq!(s.events(), &[Event::new(2, 3, 100, true)]);
        let s = parse_csv_events("t,x,y,p\n100,2,3,0\n", 34, 34).unwrap();
        assert_eq!(s.events()[0].p, -1);
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(
            parse_csv_events("abc", 34, 34),
            Err(EventsError::MalformedRow { line: 1, .. })
        ));
        assert!(matches!(
            parse_csv_events("1,2,3,2", 34, 34),
            Err(EventsError::MalformedRow { .. })
        ));
        let unsorted = "200,1,1,1\n100,1,1,0\n";
        assert!(matches!(
            parse_csv_events(unsorted, 34, 34),
            Err(EventsError::UnsortedTimestamps { index: 1, .. })
        ));
        let sorted = parse_csv_events_with(unsorted, 34, 34, CsvOptions { sort: true }).unwrap();
        assert_eq!(sorted.events()[0].t, 100);
    }

    #[test]
    fn windows() {
        let ev = [50, 100, 150].map(|t| Event::new(0, 0, t, true)).to_vec();
        let s = EventStream::new(ev, 4, 4).unwrap();
        let w = window_events(&s, 100, 150).unwrap();
        assert_eq!(w.events().iter().map(|e| e.t).collect::<Vec<_>>(), vec![100]);
        assert!(window_events(&s, 0, 0).unwrap().is_empty());
        assert_eq!(window_events(&s, 0, u64::MAX).unwrap(), s);
        assert!(matches!(
            window_events(&s, 5, 4),
            Err(EventsError::InvalidWindow { .. })
        ));
    }

    #[test]
    fn split_twelve_is_ten_two() {
        let samples = (0..12).map(|i| sample(&format!("s{i}"), "a")).collect();
        let index = DatasetIndex::from_samples(samples).unwrap();
        let (train, test) = split_dataset(&index, 7).unwrap();
        assert_eq!((train.len(), test.len()), (10, 2));
        let again = split_dataset(&index, 7).unwrap();
        assert_eq!(again, (train, test));
    }

    #[test]
    fn split_rejects_small_class() {
        let mut samples: Vec<_> = (0..6).map(|i| sample(&format!("a{i}"), "a")).collect();
        samples.extend((0..5).map(|i| sample(&format!("b{i}"), "b")));
        let index = DatasetIndex::from_samples(samples).unwrap();
        assert!(matches!(
            split_dataset(&index, 0),
            Err(EventsError::ClassTooSmall { count: 5, .. })
        ));
    }

    #[test]
    fn index_validation() {
        assert!(DatasetIndex::new(vec![sample("a", "x")], vec!["y".into()]).is_err());
        assert!(DatasetIndex::from_samples(vec![sample("a", "x"), sample("a", "x")]).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let text = r#"{"id":"s1","events_path":"a/s1.bin","label":"a","rgb_path":"a/s1.png"}
{"id":"s2","events_path":"b/s2.csv","label":"b"}
"#;
        let index = DatasetIndex::from_manifest(text, Path::new("/data")).unwrap();
        assert_eq!(index.class_list(), &["a".to_string(), "b".to_string()]);
        assert_eq!(index.samples()[0].rgb_path.as_deref(), Some(Path::new("/data/a/s1.png")));
        assert_eq!(index.samples()[1].rgb_path, None);
        let again = DatasetIndex::from_manifest(&index.to_manifest(), Path::new("/elsewhere")).unwrap();
        assert_eq!(again, index);
    }
}
