//! Segments, recordings and datasets, plus their on-disk JSON format.
//!
//! A recording file is one JSON document:
//!
//! ```json
//! {"header": {"id": "rec-0001", "d_a": 256, "d_t": 300},
//!  "segments": [{"id": 0, "start_ms": 0, "end_ms": 2400, "label": 0, "a": [...], "t": [...]}]}
//! ```
//!
//! `label` is `0` (teacher), `1` (student) or absent. A dataset directory holds
//! such files next to a `manifest.json` listing each file with its split tag.

mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub use synth::{synthesize_dataset, GeneratorConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Activity type of a segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Teacher = 0,
    Student = 1,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Teacher, Label::Student];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Teacher => "teacher",
            Label::Student => "student",
        }
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            0 => Ok(Label::Teacher),
            1 => Ok(Label::Student),
            other => Err(format!("label must be 0 (teacher) or 1 (student), got {other}")),
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub id: usize,
    pub start_ms: u64,
    pub end_ms: u64,
    pub acoustic: Vec<f64>,
    pub text: Vec<f64>,
    pub label: Option<Label>,
}

impl Segment {
    pub fn duration_ms(&self) -> u64 {
        self.end_ms - self.start_ms
    }
}

/// One class session: an ordered, validated segment sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    id: String,
    d_a: usize,
    d_t: usize,
    segments: Vec<Segment>,
}

impl Recording {
    pub fn new(id: impl Into<String>, d_a: usize, d_t: usize, segments: Vec<Segment>) -> Result<Self> {
        let id = id.into();
        if segments.is_empty() {
            return Err(Error::Data(format!("recording {id}: no segments")));
        }
        let mut prev_start: Option<u64> = None;
        for (pos, s) in segments.iter().enumerate() {
            if s.id != pos {
                return Err(Error::Data(format!(
                    "recording {id}: segment at position {pos} has id {}",
                    s.id
                )));
            }
            if s.end_ms <= s.start_ms {
                return Err(Error::Data(format!(
                    "recording {id}: segment {pos} has end_ms {} <= start_ms {}",
                    s.end_ms, s.start_ms
                )));
            }
            if prev_start.is_some_and(|p| s.start_ms <= p) {
                return Err(Error::Data(format!(
                    "recording {id}: non-monotone timestamps at segment {pos}"
                )));
            }
            prev_start = Some(s.start_ms);
            if s.acoustic.len() != d_a {
                return Err(Error::Dimension {
                    what: format!("recording {id}: segment {pos} acoustic vector (d_a)"),
                    expected: d_a,
                    found: s.acoustic.len(),
                });
            }
            if s.text.len() != d_t {
                return Err(Error::Dimension {
                    what: format!("recording {id}: segment {pos} text vector (d_t)"),
                    expected: d_t,
                    found: s.text.len(),
                });
            }
            if !s.acoustic.iter().chain(&s.text).all(|x| x.is_finite()) {
                return Err(Error::Data(format!(
                    "recording {id}: segment {pos} has non-finite features"
                )));
            }
        }
        Ok(Recording {
            id,
            d_a,
            d_t,
            segments,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn d_a(&self) -> usize {
        self.d_a
    }

    pub fn d_t(&self) -> usize {
        self.d_t
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// True when every segment carries a label.
    pub fn is_labeled(&self) -> bool {
        self.segments.iter().all(|s| s.label.is_some())
    }

    /// False for recordings usable for inference only (some labels missing).
    pub fn is_inference_only(&self) -> bool {
        !self.is_labeled()
    }

    pub fn labels(&self) -> Option<Vec<Label>> {
        self.segments.iter().map(|s| s.label).collect()
    }

    pub fn durations_ms(&self) -> Vec<u64> {
        self.segments.iter().map(Segment::duration_ms).collect()
    }

    /// `N x d_a` acoustic feature matrix.
    pub fn acoustic_matrix<T: Scalar>(&self) -> Matrix<T> {
        let rows: Vec<&[f64]> = self.segments.iter().map(|s| s.acoustic.as_slice()).collect();
        Matrix::from_f64_rows(&rows).expect("validated widths")
    }

    /// `N x d_t` text feature matrix.
    pub fn text_matrix<T: Scalar>(&self) -> Matrix<T> {
        let rows: Vec<&[f64]> = self.segments.iter().map(|s| s.text.as_slice()).collect();
        Matrix::from_f64_rows(&rows).expect("validated widths")
    }

    /// Copy with labels replaced.
    pub fn with_labels(&self, labels: &[Label]) -> Result<Recording> {
        if labels.len() != self.len() {
            return Err(Error::Dimension {
                what: format!("labels for recording {}", self.id),
                expected: self.len(),
                found: labels.len(),
            });
        }
        let mut out = self.clone();
        for (s, &l) in out.segments.iter_mut().zip(labels) {
            s.label = Some(l);
        }
        Ok(out)
    }

    /// Consecutive windows of at most `max_len` segments, re-indexed from 0.
    pub fn windows(&self, max_len: usize) -> Vec<Recording> {
        if max_len == 0 || self.len() <= max_len {
            return vec![self.clone()];
        }
        self.segments
            .chunks(max_len)
            .enumerate()
            .map(|(w, chunk)| {
                let segments = chunk
                    .iter()
                    .enumerate()
                    .map(|(i, s)| Segment { id: i, ..s.clone() })
                    .collect();
                Recording {
                    id: format!("{}#{w}", self.id),
                    d_a: self.d_a,
                    d_t: self.d_t,
                    segments,
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub d_a: usize,
    pub d_t: usize,
    pub recordings: Vec<Recording>,
}

impl Dataset {
    pub fn new(d_a: usize, d_t: usize, recordings: Vec<Recording>) -> Result<Self> {
        for r in &recordings {
            if r.d_a != d_a || r.d_t != d_t {
                return Err(Error::Data(format!(
                    "recording {} has dims ({}, {}), dataset declares ({d_a}, {d_t})",
                    r.id, r.d_a, r.d_t
                )));
            }
        }
        Ok(Dataset {
            d_a,
            d_t,
            recordings,
        })
    }

    pub fn len(&self) -> usize {
        self.recordings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recordings.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.recordings.iter().all(Recording::is_labeled)
    }
}

/// Disjoint recording-level split, deterministic under `seed`.
/// The train half gets `round(len * train_fraction)` recordings.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let (train_idx, test_idx) = split_indices(dataset.len(), train_fraction, seed)?;
    let pick = |idx: &[usize]| Dataset {
        d_a: dataset.d_a,
        d_t: dataset.d_t,
        recordings: idx.iter().map(|&i| dataset.recordings[i].clone()).collect(),
    };
    Ok((pick(&train_idx), pick(&test_idx)))
}

/// Per-recording split tags matching [`split`] for the same arguments.
pub fn split_tags(n: usize, train_fraction: f64, seed: u64) -> Result<Vec<SplitTag>> {
    let (train, _) = split_indices(n, train_fraction, seed)?;
    let mut tags = vec![SplitTag::Test; n];
    for i in train {
        tags[i] = SplitTag::Train;
    }
    Ok(tags)
}

pub(crate) fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::Data(format!(
            "{n} recordings cannot be split at fraction {train_fraction} into two non-empty halves"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

// ---- file format ----

#[derive(Serialize, Deserialize)]
struct RecordingHeader {
    id: String,
    d_a: usize,
    d_t: usize,
}

#[derive(Serialize, Deserialize)]
struct SegmentRecord {
    id: usize,
    start_ms: u64,
    end_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<Label>,
    a: Vec<f64>,
    t: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RecordingFile {
    header: RecordingHeader,
    segments: Vec<SegmentRecord>,
}

fn parse_error(path: &Path, e: serde_json::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

pub fn recording_from_json(text: &str, path: &Path) -> Result<Recording> {
    let file: RecordingFile = serde_json::from_str(text).map_err(|e| parse_error(path, e))?;
    let segments = file
        .segments
        .into_iter()
        .map(|s| Segment {
            id: s.id,
            start_ms: s.start_ms,
            end_ms: s.end_ms,
            acoustic: s.a,
            text: s.t,
            label: s.label,
        })
        .collect();
    Recording::new(file.header.id, file.header.d_a, file.header.d_t, segments)
}

pub fn recording_to_json(rec: &Recording) -> String {
    let file = RecordingFile {
        header: RecordingHeader {
            id: rec.id.clone(),
            d_a: rec.d_a,
            d_t: rec.d_t,
        },
        segments: rec
            .segments
            .iter()
            .map(|s| SegmentRecord {
                id: s.id,
                start_ms: s.start_ms,
                end_ms: s.end_ms,
                label: s.label,
                a: s.acoustic.clone(),
                t: s.text.clone(),
            })
            .collect(),
    };
    serde_json::to_string(&file).expect("recording serializes")
}

pub fn load_recording(path: impl AsRef<Path>) -> Result<Recording> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    recording_from_json(&text, path)
}

pub fn save_recording(rec: &Recording, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, recording_to_json(rec)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
    All,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub split: SplitTag,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub d_a: usize,
    pub d_t: usize,
    pub files: Vec<ManifestEntry>,
}

/// A dataset loaded from disk together with each recording's split tag.
#[derive(Clone, Debug)]
pub struct StoredDataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub dataset: Dataset,
}

impl StoredDataset {
    /// Recordings tagged `tag`; `All`-tagged recordings belong to every split.
    pub fn subset(&self, tag: SplitTag) -> Dataset {
        let recordings = self
            .manifest
            .files
            .iter()
            .zip(&self.dataset.recordings)
            .filter(|(e, _)| tag == SplitTag::All || e.split == tag || e.split == SplitTag::All)
            .map(|(_, r)| r.clone())
            .collect();
        Dataset {
            d_a: self.dataset.d_a,
            d_t: self.dataset.d_t,
            recordings,
        }
    }
}

/// Writes every recording as `<id>.json` plus the manifest. `tags` aligns with
/// `dataset.recordings`.
pub fn save_dataset(dir: impl AsRef<Path>, dataset: &Dataset, tags: &[SplitTag]) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    if tags.len() != dataset.len() {
        return Err(Error::Dimension {
            what: "split tags".into(),
            expected: dataset.len(),
            found: tags.len(),
        });
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(dataset.len());
    for (rec, &split) in dataset.recordings.iter().zip(tags) {
        let file = format!("{}.json", rec.id);
        save_recording(rec, dir.join(&file))?;
        files.push(ManifestEntry { file, split });
    }
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        d_a: dataset.d_a,
        d_t: dataset.d_t,
        files,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| parse_error(&path, e))?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported dataset format version {}",
            path.display(),
            manifest.format_version
        )));
    }
    Ok(manifest)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<StoredDataset> {
    let dir = dir.as_ref();
    let manifest = load_manifest(dir)?;
    let recordings = manifest
        .files
        .iter()
        .map(|e| load_recording(dir.join(&e.file)))
        .collect::<Result<Vec<_>>>()?;
    let dataset = Dataset::new(manifest.d_a, manifest.d_t, recordings)?;
    Ok(StoredDataset {
        dir: dir.to_path_buf(),
        manifest,
        dataset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(id: usize, start: u64, end: u64, d_a: usize, label: Option<Label>) -> Segment {
        Segment {
            id,
            start_ms: start,
            end_ms: end,
            acoustic: vec![0.5; d_a],
            text: vec![-0.25; 2],
            label,
        }
    }

    fn three_segment_json() -> String {
        let rec = Recording::new(
            "r0",
            3,
            2,
            vec![
                seg(0, 0, 1000, 3, Some(Label::Teacher)),
                seg(1, 1000, 1500, 3, Some(Label::Student)),
                seg(2, 1600, 4000, 3, Some(Label::Teacher)),
            ],
        )
        .unwrap();
        recording_to_json(&rec)
    }

    #[test]
    fn well_formed_file_loads() {
        let rec = recording_from_json(&three_segment_json(), Path::new("r0.json")).unwrap();
        assert_eq!(rec.len(), 3);
        assert!(rec.is_labeled());
        assert_eq!(rec.durations_ms(), vec![1000, 500, 2400]);
    }

    #[test]
    fn short_acoustic_vector_is_dimension_error() {
        let a = vec![0.0; 255];
        let text = format!(
            r#"{{"header":{{"id":"x","d_a":256,"d_t":1}},"segments":[{{"id":0,"start_ms":0,"end_ms":5,"a":{},"t":[0.0]}}]}}"#,
            serde_json::to_string(&a).unwrap()
        );
        let err = recording_from_json(&text, Path::new("x.json")).unwrap_err();
        match err {
            Error::Dimension { expected, found, .. } => assert_eq!((expected, found), (256, 255)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unlabeled_file_is_inference_only() {
        let text = three_segment_json().replace(r#""label":0,"#, "").replace(r#""label":1,"#, "");
        let rec = recording_from_json(&text, Path::new("r0.json")).unwrap();
        assert!(rec.is_inference_only());
        assert!(rec.labels().is_none());
    }

    #[test]
    fn parse_error_reports_position() {
        let err = recording_from_json("{\n  \"header\": [", Path::new("bad.json")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn rejects_non_monotone_and_empty_segments() {
        let bad = Recording::new("r", 1, 2, vec![seg(0, 100, 200, 1, None), seg(1, 50, 300, 1, None)]);
        assert!(matches!(bad, Err(Error::Data(_))));
        let zero = Recording::new("r", 1, 2, vec![seg(0, 100, 100, 1, None)]);
        assert!(zero.is_err());
        assert!(Recording::new("r", 1, 2, vec![]).is_err());
    }

    #[test]
    fn round_trip_is_field_equal() {
        let rec = recording_from_json(&three_segment_json(), Path::new("r0.json")).unwrap();
        let again = recording_from_json(&recording_to_json(&rec), Path::new("r0.json")).unwrap();
        assert_eq!(rec, again);
    }

    #[test]
    fn default_scale_split_sizes() {
        let (train, test) = split_indices(400, 0.875, 11).unwrap();
        assert_eq!((train.len(), test.len()), (350, 50));
        assert_eq!(split_indices(400, 0.875, 11).unwrap(), (train.clone(), test.clone()));
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..400).collect::<Vec<_>>());
        assert!(split_indices(1, 0.5, 0).is_err());
    }

    #[test]
    fn windows_reindex_segments() {
        let rec = recording_from_json(&three_segment_json(), Path::new("r0.json")).unwrap();
        let w = rec.windows(2);
        assert_eq!(w.len(), 2);
        assert_eq!(w[1].segments()[0].id, 0);
        assert_eq!(w[1].segments()[0].start_ms, 1600);
    }
}
