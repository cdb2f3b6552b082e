//! Synthetic classroom recordings.
//!
//! Acoustic vectors imitate L2-normalized speaker embeddings: each recording
//! has one teacher voice center and `n_student_voices` student centers on the
//! unit sphere, every student center at chord distance `cluster_separation`
//! from the teacher's. Voice centers are redrawn per recording, so acoustic
//! identity is only meaningful relative to other segments of the same class.
//!
//! Text vectors come from label-conditioned means shared across the dataset,
//! except for a `text_ambiguity` fraction drawn around a label-neutral mean.
//! Labels follow a two-state turn-taking chain whose stationary student
//! probability is `student_ratio`; both classes share one log-normal
//! duration law, so the expected student talk-time share is `student_ratio`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Label, Recording, Segment};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_recordings: usize,
    pub mean_segments: usize,
    pub student_ratio: f64,
    pub n_student_voices: usize,
    /// Chord distance between teacher and student voice centers, in `[0, 2]`.
    pub cluster_separation: f64,
    /// Norm of the acoustic perturbation before re-normalization.
    pub acoustic_noise: f64,
    pub text_ambiguity: f64,
    /// Norm of the label-conditioned text mean.
    pub text_signal: f64,
    /// Norm of the text perturbation.
    pub text_noise: f64,
    /// Mean number of consecutive student segments per student turn.
    pub mean_student_run: f64,
    pub duration_median_ms: f64,
    pub duration_sigma: f64,
    pub max_gap_ms: u64,
    pub d_a: usize,
    pub d_t: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_recordings: 400,
            mean_segments: 700,
            student_ratio: 0.22,
            n_student_voices: 4,
            cluster_separation: 1.0,
            acoustic_noise: 0.5,
            text_ambiguity: 0.3,
            text_signal: 1.0,
            text_noise: 1.0,
            mean_student_run: 2.0,
            duration_median_ms: 2500.0,
            duration_sigma: 0.8,
            max_gap_ms: 400,
            d_a: 256,
            d_t: 300,
            train_fraction: 0.875,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_recordings == 0 || self.mean_segments == 0 {
            return fail("n_recordings and mean_segments must be positive".into());
        }
        if !(self.student_ratio > 0.0 && self.student_ratio < 1.0) {
            return fail(format!("student_ratio must lie in (0, 1), got {}", self.student_ratio));
        }
        if !(0.0..=1.0).contains(&self.text_ambiguity) {
            return fail(format!("text_ambiguity must lie in [0, 1], got {}", self.text_ambiguity));
        }
        if !(0.0..=2.0).contains(&self.cluster_separation) {
            return fail(format!(
                "cluster_separation is a chord length on the unit sphere and must lie in [0, 2], got {}",
                self.cluster_separation
            ));
        }
        if self.n_student_voices == 0 {
            return fail("n_student_voices must be positive".into());
        }
        if self.d_a < 2 || self.d_t == 0 {
            return fail("d_a must be at least 2 and d_t positive".into());
        }
        if self.mean_student_run < 1.0 || self.teacher_to_student() > 1.0 {
            return fail(format!(
                "mean_student_run {} cannot reach student_ratio {}",
                self.mean_student_run, self.student_ratio
            ));
        }
        let nonneg = [
            ("acoustic_noise", self.acoustic_noise),
            ("text_signal", self.text_signal),
            ("text_noise", self.text_noise),
            ("duration_sigma", self.duration_sigma),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.duration_median_ms >= 1.0 && self.duration_median_ms.is_finite()) {
            return fail("duration_median_ms must be at least 1".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return fail(format!("train_fraction must lie in (0, 1), got {}", self.train_fraction));
        }
        Ok(())
    }

    fn student_to_teacher(&self) -> f64 {
        1.0 / self.mean_student_run
    }

    fn teacher_to_student(&self) -> f64 {
        self.student_to_teacher() * self.student_ratio / (1.0 - self.student_ratio)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, norm: f64) -> Vec<f64> {
    let std = norm / (dim as f64).sqrt();
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, dim, 1.0);
        if v.iter().any(|&x| x != 0.0) {
            return normalize(v);
        }
    }
}

/// Unit vector at chord distance `chord` from unit vector `center`.
fn at_chord(rng: &mut ChaCha8Rng, center: &[f64], chord: f64) -> Vec<f64> {
    let angle = 2.0 * (chord / 2.0).asin();
    let mut perp = unit(rng, center.len());
    let along: f64 = perp.iter().zip(center).map(|(p, c)| p * c).sum();
    perp.iter_mut().zip(center).for_each(|(p, c)| *p -= along * c);
    let perp = normalize(perp);
    center
        .iter()
        .zip(&perp)
        .map(|(c, p)| angle.cos() * c + angle.sin() * p)
        .collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

struct TextMeans {
    teacher: Vec<f64>,
    student: Vec<f64>,
    neutral: Vec<f64>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates a labeled dataset; bit-identical for equal configs.
pub fn synthesize_dataset(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut global = stream_rng(cfg.seed, u64::MAX);
    let scale = |v: Vec<f64>| v.into_iter().map(|x| x * cfg.text_signal).collect::<Vec<_>>();
    let means = TextMeans {
        teacher: scale(unit(&mut global, cfg.d_t)),
        student: scale(unit(&mut global, cfg.d_t)),
        neutral: scale(unit(&mut global, cfg.d_t)),
    };
    let recordings = (0..cfg.n_recordings)
        .map(|i| synthesize_recording(cfg, &means, i))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(cfg.d_a, cfg.d_t, recordings)
}

fn synthesize_recording(cfg: &GeneratorConfig, means: &TextMeans, index: usize) -> Result<Recording> {
    let mut rng = stream_rng(cfg.seed, index as u64);
    let lo = ((cfg.mean_segments as f64) * 0.75).ceil().max(1.0) as usize;
    let hi = ((cfg.mean_segments as f64) * 1.25).floor().max(lo as f64) as usize;
    let n = rng.random_range(lo..=hi);

    let teacher_voice = unit(&mut rng, cfg.d_a);
    let student_voices: Vec<Vec<f64>> = (0..cfg.n_student_voices)
        .map(|_| at_chord(&mut rng, &teacher_voice, cfg.cluster_separation))
        .collect();

    let durations = LogNormal::new(cfg.duration_median_ms.ln(), cfg.duration_sigma)
        .map_err(|e| Error::Config(format!("duration law: {e}")))?;

    let mut label = if rng.random_bool(cfg.student_ratio) {
        Label::Student
    } else {
        Label::Teacher
    };
    let mut clock: u64 = 0;
    let mut segments = Vec::with_capacity(n);
    for id in 0..n {
        if id > 0 {
            let switch = match label {
                Label::Teacher => cfg.teacher_to_student(),
                Label::Student => cfg.student_to_teacher(),
            };
            if rng.random_bool(switch) {
                label = match label {
                    Label::Teacher => Label::Student,
                    Label::Student => Label::Teacher,
                };
            }
            clock += rng.random_range(0..=cfg.max_gap_ms);
        }
        let duration = (durations.sample(&mut rng).round() as u64).max(50);

        let center = match label {
            Label::Teacher => &teacher_voice,
            Label::Student => &student_voices[rng.random_range(0..student_voices.len())],
        };
        let acoustic = normalize(add(center, &gaussian(&mut rng, cfg.d_a, cfg.acoustic_noise)));

        let text_mean = if rng.random_bool(cfg.text_ambiguity) {
            &means.neutral
        } else {
            match label {
                Label::Teacher => &means.teacher,
                Label::Student => &means.student,
            }
        };
        let text = add(text_mean, &gaussian(&mut rng, cfg.d_t, cfg.text_noise));

        segments.push(Segment {
            id,
            start_ms: clock,
            end_ms: clock + duration,
            acoustic,
            text,
            label: Some(label),
        });
        clock += duration;
    }
    Recording::new(format!("rec-{index:04}"), cfg.d_a, cfg.d_t, segments)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            n_recordings: 3,
            mean_segments: 20,
            d_a: 8,
            d_t: 6,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = synthesize_dataset(&small()).unwrap();
        let b = synthesize_dataset(&small()).unwrap();
        assert_eq!(a, b);
        let c = synthesize_dataset(&GeneratorConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn acoustic_vectors_are_unit_norm_and_finite() {
        let ds = synthesize_dataset(&small()).unwrap();
        for r in &ds.recordings {
            for s in r.segments() {
                let n: f64 = s.acoustic.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-12);
                assert!(s.text.iter().all(|x| x.is_finite()));
                assert!(s.duration_ms() > 0);
            }
        }
    }

    #[test]
    fn chord_distance_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = unit(&mut rng, 10);
        for chord in [0.0, 0.3, 1.0, 1.9] {
            let s = at_chord(&mut rng, &c, chord);
            let d = c.iter().zip(&s).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!((d - chord).abs() < 1e-12, "{chord} vs {d}");
        }
    }

    #[test]
    fn rejects_invalid_configs() {
        for bad in [
            GeneratorConfig { student_ratio: 0.0, ..small() },
            GeneratorConfig { student_ratio: 1.0, ..small() },
            GeneratorConfig { text_ambiguity: 1.5, ..small() },
            GeneratorConfig { cluster_separation: -0.1, ..small() },
            GeneratorConfig { mean_student_run: 0.5, ..small() },
        ] {
            assert!(matches!(synthesize_dataset(&bad), Err(Error::Config(_))));
        }
    }
}
