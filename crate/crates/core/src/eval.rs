//! Duration-weighted accuracy and per-class F1, dataset reports, and
//! run-length activity timelines.
//!
//! Each segment weighs `duration / total duration` of its recording. F1 is
//! computed from weighted true-positive, false-positive and false-negative
//! masses; a class with no positive mass in either labels or predictions
//! scores 0.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::cross_type_mass;
use crate::data::{Dataset, Label, Recording};
use crate::error::{Error, Result};
use crate::model::CadModel;
use crate::scalar::Scalar;

pub fn weights_from_durations(durations: &[f64]) -> Result<Vec<f64>> {
    if durations.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
        return Err(Error::Data("segment durations must be positive".into()));
    }
    let total: f64 = durations.iter().sum();
    if total <= 0.0 {
        return Err(Error::Data("zero total duration".into()));
    }
    Ok(durations.iter().map(|d| d / total).collect())
}

pub fn duration_weights(rec: &Recording) -> Result<Vec<f64>> {
    let d: Vec<f64> = rec.durations_ms().into_iter().map(|d| d as f64).collect();
    weights_from_durations(&d)
}

fn check_aligned(pred: &[Label], gold: &[Label], weights: &[f64]) -> Result<()> {
    if pred.len() != gold.len() || pred.len() != weights.len() {
        return Err(Error::Dimension {
            what: format!("predictions/labels/weights lengths {}/{}/{}", pred.len(), gold.len(), weights.len()),
            expected: gold.len(),
            found: if pred.len() != gold.len() { pred.len() } else { weights.len() },
        });
    }
    Ok(())
}

pub fn weighted_accuracy(pred: &[Label], gold: &[Label], weights: &[f64]) -> Result<f64> {
    check_aligned(pred, gold, weights)?;
    Ok(pred
        .iter()
        .zip(gold)
        .zip(weights)
        .filter(|((p, g), _)| p == g)
        .map(|(_, w)| w)
        .sum())
}

pub fn weighted_f1(pred: &[Label], gold: &[Label], weights: &[f64], class: Label) -> Result<f64> {
    check_aligned(pred, gold, weights)?;
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for ((&p, &g), &w) in pred.iter().zip(gold).zip(weights) {
        match (p == class, g == class) {
            (true, true) => tp += w,
            (true, false) => fp += w,
            (false, true) => fn_ += w,
            (false, false) => {}
        }
    }
    Ok(f1_from_masses(tp, fp, fn_))
}

fn f1_from_masses(tp: f64, fp: f64, fn_: f64) -> f64 {
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

fn share(labels: &[Label], weights: &[f64], class: Label) -> f64 {
    labels.iter().zip(weights).filter(|(l, _)| **l == class).map(|(_, w)| w).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Each recording counts equally.
    #[default]
    Macro,
    /// All segments of all recordings weighted by duration over the whole set.
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordingMetrics {
    pub id: String,
    pub n_segments: usize,
    pub accuracy: f64,
    pub f1_teacher: f64,
    pub f1_student: f64,
    pub gold_student_share: f64,
    pub predicted_student_share: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub accuracy: f64,
    pub f1_teacher: f64,
    pub f1_student: f64,
    pub gold_student_share: f64,
    pub predicted_student_share: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub aggregation: Aggregation,
    /// Headline numbers under `aggregation`.
    pub summary: Summary,
    pub macro_average: Summary,
    pub pooled: Summary,
    pub recordings: Vec<RecordingMetrics>,
}

fn summarize(pred: &[Label], gold: &[Label], w: &[f64]) -> Result<Summary> {
    Ok(Summary {
        accuracy: weighted_accuracy(pred, gold, w)?,
        f1_teacher: weighted_f1(pred, gold, w, Label::Teacher)?,
        f1_student: weighted_f1(pred, gold, w, Label::Student)?,
        gold_student_share: share(gold, w, Label::Student),
        predicted_student_share: share(pred, w, Label::Student),
    })
}

/// Metrics of `predicted` against the gold labels of `gold`, aligned by index.
pub fn evaluate_predictions(gold: &[Recording], predicted: &[Vec<Label>], aggregation: Aggregation) -> Result<MetricsReport> {
    if gold.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    if gold.len() != predicted.len() {
        return Err(Error::Dimension {
            what: "prediction sequences".into(),
            expected: gold.len(),
            found: predicted.len(),
        });
    }
    let mut recordings = Vec::with_capacity(gold.len());
    let (mut all_pred, mut all_gold, mut all_dur) = (Vec::new(), Vec::new(), Vec::new());
    for (rec, pred) in gold.iter().zip(predicted) {
        let labels = rec
            .labels()
            .ok_or_else(|| Error::Data(format!("recording {} is not fully labeled", rec.id())))?;
        let w = duration_weights(rec)?;
        let s = summarize(pred, &labels, &w)?;
        recordings.push(RecordingMetrics {
            id: rec.id().to_string(),
            n_segments: rec.len(),
            accuracy: s.accuracy,
            f1_teacher: s.f1_teacher,
            f1_student: s.f1_student,
            gold_student_share: s.gold_student_share,
            predicted_student_share: s.predicted_student_share,
        });
        all_pred.extend_from_slice(pred);
        all_gold.extend(labels);
        all_dur.extend(rec.durations_ms().into_iter().map(|d| d as f64));
    }
    let n = recordings.len() as f64;
    let mean = |f: fn(&RecordingMetrics) -> f64| recordings.iter().map(f).sum::<f64>() / n;
    let macro_average = Summary {
        accuracy: mean(|r| r.accuracy),
        f1_teacher: mean(|r| r.f1_teacher),
        f1_student: mean(|r| r.f1_student),
        gold_student_share: mean(|r| r.gold_student_share),
        predicted_student_share: mean(|r| r.predicted_student_share),
    };
    let pooled = summarize(&all_pred, &all_gold, &weights_from_durations(&all_dur)?)?;
    Ok(MetricsReport {
        aggregation,
        summary: match aggregation {
            Aggregation::Macro => macro_average,
            Aggregation::Pooled => pooled,
        },
        macro_average,
        pooled,
        recordings,
    })
}

/// Runs the model on every recording and scores it.
pub fn evaluate_dataset<T: Scalar>(model: &CadModel<T>, dataset: &Dataset, aggregation: Aggregation) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let predicted = dataset
        .recordings
        .par_iter()
        .map(|r| model.forward_recording(r).map(|(p, _)| p.labels))
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(&dataset.recordings, &predicted, aggregation)
}

/// Share of attention mass falling between segments of different gold labels,
/// pooled over the dataset. `None` when the architecture has no score matrix.
pub fn cross_type_attention_fraction<T: Scalar>(model: &CadModel<T>, dataset: &Dataset) -> Result<Option<f64>> {
    let parts = dataset
        .recordings
        .par_iter()
        .map(|rec| {
            let labels = rec
                .labels()
                .ok_or_else(|| Error::Data(format!("recording {} is not fully labeled", rec.id())))?;
            let (_, att) = model.forward_recording(rec)?;
            att.map(|a| Ok((cross_type_mass(&a.scores, &labels, None)?.as_f64(), a.scores.sum().as_f64())))
                .transpose()
        })
        .collect::<Result<Vec<_>>>()?;
    if parts.iter().any(Option::is_none) {
        return Ok(None);
    }
    let (cross, total) = parts
        .into_iter()
        .flatten()
        .fold((0.0, 0.0), |(c, t), (pc, pt)| (c + pc, t + pt));
    Ok(Some(cross / total))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Run {
    pub start_ms: u64,
    pub end_ms: u64,
    pub label: Label,
    pub activity: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TalkTime {
    pub teacher: u64,
    pub student: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub recording: String,
    pub runs: Vec<Run>,
    /// Summed segment durations per class.
    pub talk_time_ms: TalkTime,
}

/// Merges consecutive same-label segments into runs spanning from the first
/// segment's start to the last segment's end.
pub fn build_timeline(rec: &Recording) -> Result<Timeline> {
    let mut runs: Vec<Run> = Vec::new();
    let mut talk = TalkTime::default();
    for s in rec.segments() {
        let label = s
            .label
            .ok_or_else(|| Error::Data(format!("recording {}: segment {} is unlabeled", rec.id(), s.id)))?;
        match label {
            Label::Teacher => talk.teacher += s.duration_ms(),
            Label::Student => talk.student += s.duration_ms(),
        }
        match runs.last_mut() {
            Some(run) if run.label == label => run.end_ms = s.end_ms,
            _ => runs.push(Run {
                start_ms: s.start_ms,
                end_ms: s.end_ms,
                label,
                activity: label.name().to_string(),
            }),
        }
    }
    Ok(Timeline {
        recording: rec.id().to_string(),
        runs,
        talk_time_ms: talk,
    })
}

pub fn emit_timeline(rec: &Recording, path: impl AsRef<Path>) -> Result<Timeline> {
    let timeline = build_timeline(rec)?;
    let path = path.as_ref();
    fs::write(path, serde_json::to_string_pretty(&timeline)?).map_err(|e| Error::io(path, e))?;
    Ok(timeline)
}
