//! Adam optimization over batches of padded recordings.
//!
//! A batch is a set of recordings; each keeps its own attention context.
//! Recordings are padded to the batch maximum and masked, the batch loss is
//! the mean of per-recording losses, and one Adam step follows each batch.
//! Per-recording work runs on the rayon pool; gradients are reduced in batch
//! order so results do not depend on the thread count.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Label, Recording};
use crate::error::{Error, Result};
use crate::model::{CadModel, LossBreakdown, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::{Mask, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Recordings per batch.
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    /// Longer recordings are cut into consecutive windows of this many segments.
    pub max_sequence_length: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 64,
            epochs: 20,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            max_sequence_length: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_epsilon > 0.0 && self.adam_epsilon.is_finite()) {
            return Err(Error::Config("adam_epsilon must be positive".into()));
        }
        if self.max_sequence_length == Some(0) {
            return Err(Error::Config("max_sequence_length must be positive when set".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> Adam {
        Adam {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for Adam {
    fn default() -> Self {
        TrainConfig::default().adam()
    }
}

/// First and second moment estimates per parameter plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Matrix<T>>) -> Self {
        let m: Vec<Matrix<T>> = params.into_iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        AdamState {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn for_model(params: &ModelParams<Matrix<T>>) -> Self {
        Self::new(params.named().into_iter().map(|(_, m)| m))
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update of `params` in place.
///
/// Nothing is modified when any gradient is non-finite; the error names the
/// offending parameter.
pub fn adam_step<T: Scalar>(
    state: &mut AdamState<T>,
    params: &mut [(&str, &mut Matrix<T>)],
    grads: &[&Matrix<T>],
    opt: &Adam,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam_step: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                left: p.shape(),
                right: g.shape(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }

    state.t += 1;
    let (b1, b2) = (T::of(opt.beta1), T::of(opt.beta2));
    let one = T::one();
    let correct1 = one - b1.powi(state.t as i32);
    let correct2 = one - b2.powi(state.t as i32);
    let (lr, eps) = (T::of(opt.learning_rate), T::of(opt.epsilon));

    for (k, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[k].as_mut_slice();
        let v = state.v[k].as_mut_slice();
        for (((theta, &g), m), v) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            if lr != T::zero() {
                let m_hat = *m / correct1;
                let v_hat = *v / correct2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}

/// One recording padded to its batch's length.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedSequence<T> {
    pub x_a: Matrix<T>,
    pub x_t: Matrix<T>,
    /// Padded positions carry `Teacher`; the mask excludes them.
    pub labels: Vec<Label>,
    pub mask: Mask,
    /// Index of the source sequence in the input list.
    pub source: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub items: Vec<PaddedSequence<T>>,
}

impl<T> Batch<T> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

pub fn pad_recording<T: Scalar>(rec: &Recording, len: usize, source: usize) -> Result<PaddedSequence<T>> {
    let labels = rec
        .labels()
        .ok_or_else(|| Error::Data(format!("recording {} has unlabeled segments", rec.id())))?;
    let n = rec.len();
    if len < n {
        return Err(Error::Contract(format!("cannot pad {n} segments to {len}")));
    }
    let mut x_a = Matrix::zeros(len, rec.d_a());
    let mut x_t = Matrix::zeros(len, rec.d_t());
    for (i, s) in rec.segments().iter().enumerate() {
        for (dst, &src) in x_a.row_mut(i).iter_mut().zip(&s.acoustic) {
            *dst = T::of(src);
        }
        for (dst, &src) in x_t.row_mut(i).iter_mut().zip(&s.text) {
            *dst = T::of(src);
        }
    }
    let mut padded_labels = labels;
    padded_labels.resize(len, Label::Teacher);
    Ok(PaddedSequence {
        x_a,
        x_t,
        labels: padded_labels,
        mask: Mask::prefix(n, len)?,
        source,
    })
}

/// Shuffles under `seed`, chunks into batches of `batch_size` and pads each
/// batch to its own longest recording.
pub fn make_batches<T: Scalar>(recordings: &[Recording], batch_size: usize, seed: u64) -> Result<Vec<Batch<T>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..recordings.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
        .chunks(batch_size)
        .map(|chunk| {
            let len = chunk.iter().map(|&i| recordings[i].len()).max().unwrap_or(0);
            let items = chunk
                .iter()
                .map(|&i| pad_recording(&recordings[i], len, i))
                .collect::<Result<Vec<_>>>()?;
            Ok(Batch { items })
        })
        .collect()
}

/// Mean loss and mean gradients over a batch.
pub fn batch_objective<T: Scalar>(
    model: &CadModel<T>,
    batch: &Batch<T>,
) -> Result<(LossBreakdown, ModelParams<Matrix<T>>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let parts = batch
        .items
        .par_iter()
        .map(|item| model.loss_and_gradients(&item.x_a, &item.x_t, &item.labels, Some(&item.mask)))
        .collect::<Result<Vec<_>>>()?;

    let count = parts.len() as f64;
    let mut loss = LossBreakdown::default();
    let mut grads = model.params().zeros_like();
    for (l, g) in &parts {
        loss.total += l.total;
        loss.l_c += l.l_c;
        loss.r_alpha += l.r_alpha;
        for ((_, acc), (_, part)) in grads.named_mut().into_iter().zip(g.named()) {
            acc.add_assign(part)?;
        }
    }
    loss.total /= count;
    loss.l_c /= count;
    loss.r_alpha /= count;
    let inv = T::of(1.0 / count);
    for (_, g) in grads.named_mut() {
        g.as_mut_slice().iter_mut().for_each(|x| *x *= inv);
    }
    Ok((loss, grads))
}

/// One line of training progress.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub total: f64,
    pub l_c: f64,
    pub r_alpha: f64,
}

pub trait ProgressSink {
    fn record(&mut self, record: &BatchRecord) -> Result<()>;
}

/// Discards progress records.
pub struct NullSink;

impl ProgressSink for NullSink {
    fn record(&mut self, _: &BatchRecord) -> Result<()> {
        Ok(())
    }
}

/// Writes one JSON object per line.
pub struct JsonLinesSink<W: Write> {
    out: W,
}

impl<W: Write> JsonLinesSink<W> {
    pub fn new(out: W) -> Self {
        JsonLinesSink { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> ProgressSink for JsonLinesSink<W> {
    fn record(&mut self, record: &BatchRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out
            .write_all(b"\n")
            .map_err(|e| Error::io("<progress sink>", e))
    }
}

#[derive(Clone, Debug)]
pub struct FitReport<T> {
    pub model: CadModel<T>,
    pub history: Vec<BatchRecord>,
    /// Mean batch loss per epoch.
    pub epoch_means: Vec<LossBreakdown>,
}

#[derive(Debug, Error)]
pub enum FitError<T: Scalar> {
    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    Diverged {
        epoch: usize,
        batch: usize,
        reason: String,
        /// Parameters before the failing batch.
        last_good: Box<CadModel<T>>,
        history: Vec<BatchRecord>,
    },
    #[error(transparent)]
    Failed(#[from] Error),
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Sequences actually trained on: the labeled recordings, windowed when
/// `max_sequence_length` is set.
pub fn training_sequences(train: &Dataset, config: &TrainConfig) -> Result<Vec<Recording>> {
    let mut out = Vec::new();
    for rec in &train.recordings {
        if !rec.is_labeled() {
            return Err(Error::Data(format!("training recording {} has unlabeled segments", rec.id())));
        }
        match config.max_sequence_length {
            Some(len) => out.extend(rec.windows(len)),
            None => out.push(rec.clone()),
        }
    }
    if out.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    Ok(out)
}

pub fn fit<T: Scalar>(
    mut model: CadModel<T>,
    train: &Dataset,
    config: &TrainConfig,
    sink: &mut dyn ProgressSink,
) -> Result<FitReport<T>, FitError<T>> {
    config.validate()?;
    if train.d_a != model.config().d_a || train.d_t != model.config().d_t {
        return Err(Error::Data(format!(
            "training data dims (d_a={}, d_t={}) do not match model (d_a={}, d_t={})",
            train.d_a,
            train.d_t,
            model.config().d_a,
            model.config().d_t
        ))
        .into());
    }
    let sequences = training_sequences(train, config)?;
    let opt = config.adam();
    let mut state = AdamState::for_model(model.params());
    let mut history = Vec::new();
    let mut epoch_means = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let batches = make_batches::<T>(&sequences, config.batch_size, epoch_seed(config.seed, epoch))?;
        let mut sum = LossBreakdown::default();
        for (b, batch) in batches.iter().enumerate() {
            let diverged = |reason: String, history: Vec<BatchRecord>, model: &CadModel<T>| FitError::Diverged {
                epoch,
                batch: b,
                reason,
                last_good: Box::new(model.clone()),
                history,
            };
            let (loss, grads) = match batch_objective(&model, batch) {
                Ok(x) => x,
                Err(Error::NonFinite(what)) => return Err(diverged(what, history, &model)),
                Err(e) => return Err(e.into()),
            };
            if !(loss.total.is_finite() && loss.l_c.is_finite() && loss.r_alpha.is_finite()) {
                return Err(diverged(format!("non-finite loss {loss:?}"), history, &model));
            }
            let record = BatchRecord {
                epoch,
                batch: b,
                total: loss.total,
                l_c: loss.l_c,
                r_alpha: loss.r_alpha,
            };
            sink.record(&record)?;
            history.push(record);
            sum.total += loss.total;
            sum.l_c += loss.l_c;
            sum.r_alpha += loss.r_alpha;

            let grad_refs: Vec<&Matrix<T>> = grads.named().into_iter().map(|(_, g)| g).collect();
            let mut params = model.params_mut().named_mut();
            match adam_step(&mut state, &mut params, &grad_refs, &opt) {
                Ok(()) => {}
                Err(Error::NonFinite(what)) => {
                    drop(params);
                    return Err(diverged(what, history, &model));
                }
                Err(e) => return Err(e.into()),
            }
        }
        let n = batches.len() as f64;
        epoch_means.push(LossBreakdown {
            total: sum.total / n,
            l_c: sum.l_c / n,
            r_alpha: sum.r_alpha / n,
        });
    }
    Ok(FitReport {
        model,
        history,
        epoch_means,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_dataset, GeneratorConfig};
    use crate::model::{Architecture, ModelConfig};

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Matrix::<f64>::from_rows(&[[0.3, -1.2]]).unwrap();
        let before = p.clone();
        let mut state = AdamState::new([&p]);
        let g = Matrix::zeros(1, 2);
        adam_step(&mut state, &mut [("p", &mut p)], &[&g], &Adam::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Matrix::<f64>::scalar(1.0);
        let mut state = AdamState::new([&p]);
        let g = Matrix::scalar(0.5);
        adam_step(&mut state, &mut [("p", &mut p)], &[&g], &Adam::default()).unwrap();
        let expected = 1.0 - 0.001 * 0.5 / (0.5 + 1e-8);
        assert!((p.get(0, 0) - expected).abs() < 1e-15);
        assert!((p.get(0, 0) - 0.999).abs() < 1e-10);
    }

    #[test]
    fn parameters_update_independently() {
        let mut a = Matrix::<f64>::scalar(0.0);
        let mut b = Matrix::<f64>::scalar(0.0);
        let mut state = AdamState::new([&a, &b]);
        let (ga, gb) = (Matrix::scalar(2.0), Matrix::scalar(0.0));
        adam_step(&mut state, &mut [("a", &mut a), ("b", &mut b)], &[&ga, &gb], &Adam::default()).unwrap();
        assert!(a.get(0, 0) < 0.0);
        assert_eq!(b.get(0, 0), 0.0);
    }

    #[test]
    fn opposite_gradients_give_opposite_updates() {
        let start = Matrix::<f64>::from_rows(&[[0.0, 0.0, 0.0]]).unwrap();
        let g = Matrix::from_rows(&[[0.3, -7.0, 1e-4]]).unwrap();
        let neg = g.scale(-1.0);
        let (mut p1, mut p2) = (start.clone(), start.clone());
        let (mut s1, mut s2) = (AdamState::new([&p1]), AdamState::new([&p2]));
        for _ in 0..3 {
            adam_step(&mut s1, &mut [("p", &mut p1)], &[&g], &Adam::default()).unwrap();
            adam_step(&mut s2, &mut [("p", &mut p2)], &[&neg], &Adam::default()).unwrap();
        }
        assert_eq!(p1, p2.scale(-1.0));
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = Matrix::<f64>::scalar(1.0);
        let mut state = AdamState::new([&p]);
        let g = Matrix::scalar(f64::NAN);
        let err = adam_step(&mut state, &mut [("head.w1", &mut p)], &[&g], &Adam::default()).unwrap_err();
        assert!(err.to_string().contains("head.w1"));
        assert_eq!(p.get(0, 0), 1.0);
    }

    fn tiny_data(n: usize) -> Dataset {
        synthesize_dataset(&GeneratorConfig {
            n_recordings: n,
            mean_segments: 6,
            d_a: 4,
            d_t: 3,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn batch_sizes_and_order() {
        let ds = tiny_data(5);
        let batches = make_batches::<f64>(&ds.recordings, 2, 3).unwrap();
        assert_eq!(batches.iter().map(Batch::len).collect::<Vec<_>>(), vec![2, 2, 1]);
        let again = make_batches::<f64>(&ds.recordings, 2, 3).unwrap();
        assert_eq!(batches, again);
        for b in &batches {
            let len = b.items.iter().map(|i| i.mask.n_valid()).max().unwrap();
            assert!(b.items.iter().all(|i| i.mask.len() == len));
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let ds = tiny_data(4);
        let model = CadModel::<f64>::new(ModelConfig {
            d_a: 4,
            d_t: 3,
            d_q: 2,
            d_v: 2,
            d_b: 2,
            fcn_hidden: 4,
            architecture: Architecture::FullMultimodal,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            batch_size: 2,
            epochs: 2,
            ..Default::default()
        };
        let report = fit(model.clone(), &ds, &cfg, &mut NullSink).unwrap();
        assert_eq!(report.model, model);
        assert_eq!(report.history.len(), 4);
    }

    #[test]
    fn json_lines_sink_writes_parseable_records() {
        let mut sink = JsonLinesSink::new(Vec::new());
        let rec = BatchRecord {
            epoch: 1,
            batch: 2,
            total: 0.5,
            l_c: 0.4,
            r_alpha: 0.01,
        };
        sink.record(&rec).unwrap();
        let text = String::from_utf8(sink.into_inner()).unwrap();
        let back: BatchRecord = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(back, rec);
    }
}
