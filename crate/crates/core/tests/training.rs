mod common;

use cad_core::data::{synthesize_dataset, Dataset, GeneratorConfig, Label, Recording, Segment};
use cad_core::gradcheck::grad_check;
use cad_core::model::{forward_nodes, loss_nodes, Architecture, CadModel, ModelConfig, ModelParams};
use cad_core::tape::Tape;
use cad_core::tensor::{Mask, Matrix};
use cad_core::train::{fit, FitError, JsonLinesSink, NullSink, TrainConfig};
use common::{mixed_labels, random_matrix, small_config};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_dataset(seed: u64) -> Dataset {
    synthesize_dataset(&GeneratorConfig {
        n_recordings: 6,
        mean_segments: 16,
        d_a: 8,
        d_t: 8,
        cluster_separation: 1.4,
        seed,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn padded_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let config = ModelConfig {
        beta: 3.0,
        ..small_config(Architecture::FullMultimodal, 8)
    };
    let model = CadModel::<f64>::new(config.clone()).unwrap();
    let params: Vec<_> = model.params().named().into_iter().map(|(n, m)| (n.to_string(), m.clone())).collect();
    let x_a = random_matrix(&mut rng, 7, 8, 1.0);
    let x_t = random_matrix(&mut rng, 7, 8, 1.0);
    let labels = mixed_labels(&mut rng, 5).into_iter().chain([Label::Student; 2]).collect::<Vec<_>>();
    let mask = Mask::prefix(5, 7).unwrap();
    let layout = ModelParams::layout(&config);
    let report = grad_check(
        |tape: &mut Tape<f64>, vars| {
            let mut k = 0;
            let bound = layout.map(|_, _| {
                k += 1;
                vars[k - 1]
            });
            let a = tape.constant(x_a.clone());
            let t = tape.constant(x_t.clone());
            let fwd = forward_nodes(tape, &config, &bound, a, t, Some(&mask))?;
            Ok(loss_nodes(tape, &config, &fwd, &labels, Some(&mask))?.total)
        },
        &params,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn training_reduces_loss() {
    let data = tiny_dataset(4);
    let model = CadModel::<f64>::new(small_config(Architecture::FullMultimodal, 4)).unwrap();
    let config = TrainConfig {
        learning_rate: 0.01,
        batch_size: 2,
        epochs: 8,
        ..Default::default()
    };
    let report = fit(model, &data, &config, &mut NullSink).ok().unwrap();
    let means = &report.epoch_means;
    assert_eq!(means.len(), 8);
    assert!(means.last().unwrap().total < means[0].total, "{means:?}");
    assert_eq!(report.history.len(), 8 * 3);
}

#[test]
fn separable_toy_loss_decreases_every_step() {
    let seg = |id, label, a: f64, t: f64| Segment {
        id,
        start_ms: id as u64 * 1000,
        end_ms: id as u64 * 1000 + 900,
        acoustic: vec![a, -a],
        text: vec![t, 0.5],
        label: Some(label),
    };
    let rec = Recording::new("toy", 2, 2, vec![seg(0, Label::Teacher, 1.0, -1.0), seg(1, Label::Student, -1.0, 1.0)]).unwrap();
    let data = Dataset::new(2, 2, vec![rec]).unwrap();
    let config = ModelConfig {
        d_a: 2,
        d_t: 2,
        d_q: 2,
        d_v: 2,
        d_b: 3,
        fcn_hidden: 4,
        seed: 1,
        ..Default::default()
    };
    let model = CadModel::<f64>::new(config).unwrap();
    let train = TrainConfig {
        learning_rate: 0.001,
        batch_size: 1,
        epochs: 10,
        ..Default::default()
    };
    let report = fit(model, &data, &train, &mut NullSink).ok().unwrap();
    let losses: Vec<f64> = report.history.iter().map(|r| r.total).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn non_finite_parameters_stop_training_with_last_good_model() {
    let data = tiny_dataset(5);
    let mut model = CadModel::<f64>::new(small_config(Architecture::FullMultimodal, 5)).unwrap();
    model.params_mut().head.w2.set(0, 0, f64::NAN);
    let config = TrainConfig {
        batch_size: 2,
        epochs: 2,
        ..Default::default()
    };
    match fit(model.clone(), &data, &config, &mut NullSink) {
        Err(FitError::Diverged { epoch, batch, last_good, .. }) => {
            assert_eq!((epoch, batch), (0, 0));
            assert_eq!(last_good.params().head.w1, model.params().head.w1);
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training on NaN weights succeeded"),
    }
}

#[test]
fn progress_lines_are_json_records() {
    let data = tiny_dataset(6);
    let model = CadModel::<f64>::new(small_config(Architecture::TextOnly, 6)).unwrap();
    let config = TrainConfig {
        batch_size: 4,
        epochs: 2,
        ..Default::default()
    };
    let mut sink = JsonLinesSink::new(Vec::new());
    fit(model, &data, &config, &mut sink).ok().unwrap();
    let text = String::from_utf8(sink.into_inner()).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[3]["epoch"], 1);
    assert!(lines.iter().all(|l| l["total"].as_f64().unwrap() >= l["l_c"].as_f64().unwrap()));
}

#[test]
fn single_precision_models_train() {
    let data = tiny_dataset(7);
    let model = CadModel::<f32>::new(small_config(Architecture::FullMultimodal, 7)).unwrap();
    let config = TrainConfig {
        learning_rate: 0.01,
        batch_size: 2,
        epochs: 3,
        ..Default::default()
    };
    let report = fit(model, &data, &config, &mut NullSink).ok().unwrap();
    assert!(report.epoch_means.iter().all(|m| m.total.is_finite()));
}

#[test]
fn windowed_training_uses_shorter_sequences() {
    let data = tiny_dataset(8);
    let model = CadModel::<f64>::new(small_config(Architecture::AcousticOnly, 8)).unwrap();
    let config = TrainConfig {
        batch_size: 64,
        epochs: 1,
        max_sequence_length: Some(5),
        ..Default::default()
    };
    let n_windows: usize = data.recordings.iter().map(|r| r.len().div_ceil(5)).sum();
    let report = fit(model, &data, &config, &mut NullSink).ok().unwrap();
    assert_eq!(report.history.len(), n_windows.div_ceil(64));
}

#[test]
fn mismatched_dimensions_are_rejected() {
    let data = tiny_dataset(9);
    let config = ModelConfig {
        d_a: 9,
        ..small_config(Architecture::FullMultimodal, 9)
    };
    let model = CadModel::<f64>::new(config).unwrap();
    assert!(matches!(
        fit(model, &data, &TrainConfig::default(), &mut NullSink),
        Err(FitError::Failed(_))
    ));
}

#[test]
fn predictions_cover_every_segment() {
    let data = tiny_dataset(10);
    let model = CadModel::<f64>::new(small_config(Architecture::SelfAttnText, 10)).unwrap();
    let rec = &data.recordings[0];
    let predicted = model.predict_sequence(rec).unwrap();
    assert!(predicted.is_labeled());
    assert_eq!(predicted.len(), rec.len());
    let p = model.forward(&rec.acoustic_matrix(), &rec.text_matrix(), None).unwrap().0;
    assert_eq!(p.probabilities.shape(), (rec.len(), 2));
    let _: &Matrix<f64> = &p.probabilities;
}
