#![allow(dead_code)]

use cad_core::data::{Label, Recording, Segment};
use cad_core::model::{Architecture, ModelConfig};
use cad_core::tensor::Matrix;
use rand::Rng;

pub fn random_labels<R: Rng>(rng: &mut R, n: usize) -> Vec<Label> {
    (0..n)
        .map(|_| if rng.random_bool(0.3) { Label::Student } else { Label::Teacher })
        .collect()
}

/// Labels containing both classes (for n >= 2).
pub fn mixed_labels<R: Rng>(rng: &mut R, n: usize) -> Vec<Label> {
    let mut labels = random_labels(rng, n);
    if n >= 2 {
        labels[0] = Label::Teacher;
        labels[n - 1] = Label::Student;
    }
    labels
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Matrix<f64> {
    Matrix::uniform(rows, cols, bound, rng)
}

pub fn random_recording<R: Rng>(rng: &mut R, id: &str, n: usize, d_a: usize, d_t: usize, labeled: bool) -> Recording {
    let mut clock = 0u64;
    let segments = (0..n)
        .map(|i| {
            let start = clock + rng.random_range(0..100);
            let end = start + rng.random_range(50..3000);
            clock = end;
            Segment {
                id: i,
                start_ms: start,
                end_ms: end,
                acoustic: (0..d_a).map(|_| rng.random_range(-1.0..1.0)).collect(),
                text: (0..d_t).map(|_| rng.random_range(-1.0..1.0)).collect(),
                label: labeled.then(|| if rng.random_bool(0.3) { Label::Student } else { Label::Teacher }),
            }
        })
        .collect();
    Recording::new(id, d_a, d_t, segments).unwrap()
}

pub fn small_config(architecture: Architecture, seed: u64) -> ModelConfig {
    ModelConfig {
        d_a: 8,
        d_t: 8,
        d_q: 4,
        d_v: 4,
        d_b: 4,
        fcn_hidden: 5,
        architecture,
        seed,
        ..Default::default()
    }
}
