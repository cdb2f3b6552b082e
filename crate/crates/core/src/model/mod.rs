//! The full multimodal architecture, the five encoder baselines, the joint
//! loss and sequence prediction.
//!
//! Full path:
//!
//! ```text
//! (X_a, X_t) -> attention -> H_c = [A V ; V] -> BiLSTM -> ReLU FCN -> softmax
//! ```
//!
//! Baselines replace the attention block with a learned projection to `d_q`
//! (optionally followed by self-attention) of acoustic, text, or
//! concatenated features.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_regularizer, cross_type_mass, multimodal_attention, self_attention, AttentionNodes,
    AttentionOutput, AttentionParams,
};
use crate::data::{Label, Recording};
use crate::error::{Error, Result};
use crate::recurrent::{bilstm_forward, LstmParams};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Mask, Matrix};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT_VERSION};

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "full")]
    FullMultimodal,
    #[serde(rename = "acoustic-only")]
    AcousticOnly,
    #[serde(rename = "text-only")]
    TextOnly,
    #[serde(rename = "self-attn-acoustic")]
    SelfAttnAcoustic,
    #[serde(rename = "self-attn-text")]
    SelfAttnText,
    #[serde(rename = "concat")]
    ConcatFeatures,
}

impl Architecture {
    pub const ALL: [Architecture; 6] = [
        Architecture::FullMultimodal,
        Architecture::AcousticOnly,
        Architecture::TextOnly,
        Architecture::SelfAttnAcoustic,
        Architecture::SelfAttnText,
        Architecture::ConcatFeatures,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Architecture::FullMultimodal => "full",
            Architecture::AcousticOnly => "acoustic-only",
            Architecture::TextOnly => "text-only",
            Architecture::SelfAttnAcoustic => "self-attn-acoustic",
            Architecture::SelfAttnText => "self-attn-text",
            Architecture::ConcatFeatures => "concat",
        }
    }

    /// Only the full path has a multimodal score matrix to regularize.
    pub fn is_multimodal(self) -> bool {
        self == Architecture::FullMultimodal
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| {
                let known: Vec<_> = Architecture::ALL.iter().map(|a| a.tag()).collect();
                Error::Config(format!("unknown architecture {s:?}; expected one of {}", known.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_a: usize,
    pub d_t: usize,
    pub d_q: usize,
    pub d_v: usize,
    pub d_b: usize,
    pub fcn_hidden: usize,
    pub n_classes: usize,
    pub beta: f64,
    pub architecture: Architecture,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_a: 256,
            d_t: 300,
            d_q: 64,
            d_v: 64,
            d_b: 100,
            fcn_hidden: 128,
            n_classes: 2,
            beta: 10.0,
            architecture: Architecture::FullMultimodal,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_a", self.d_a),
            ("d_t", self.d_t),
            ("d_q", self.d_q),
            ("d_v", self.d_v),
            ("d_b", self.d_b),
            ("fcn_hidden", self.fcn_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.n_classes != 2 {
            return Err(Error::Config(format!(
                "n_classes must be 2 (teacher, student), got {}",
                self.n_classes
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        Ok(())
    }

    /// Regularization weight actually applied: zero for baselines.
    pub fn effective_beta(&self) -> f64 {
        if self.architecture.is_multimodal() {
            self.beta
        } else {
            0.0
        }
    }

    /// Width of the BiLSTM input.
    pub fn encoder_input(&self) -> usize {
        match self.architecture {
            Architecture::FullMultimodal => 2 * self.d_v,
            _ => self.d_q,
        }
    }

    fn input_proj_rows(&self) -> Option<usize> {
        match self.architecture {
            Architecture::FullMultimodal => None,
            Architecture::AcousticOnly | Architecture::SelfAttnAcoustic => Some(self.d_a),
            Architecture::TextOnly | Architecture::SelfAttnText => Some(self.d_t),
            Architecture::ConcatFeatures => Some(self.d_a + self.d_t),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<P> {
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
}

/// Every trainable tensor of a model. `P` is `Matrix<T>` for storage,
/// [`Var`] once bound to a tape, or a shape tuple for layout checks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P> {
    pub attention: Option<AttentionParams<P>>,
    /// Baselines: `d_in x d_q` projection (also the self-attention projection).
    pub input_proj: Option<P>,
    pub lstm_fwd: LstmParams<P>,
    pub lstm_bwd: LstmParams<P>,
    pub head: HeadParams<P>,
}

impl<P> ModelParams<P> {
    /// Tensors in canonical order with their registry names.
    pub fn named(&self) -> Vec<(&'static str, &P)> {
        let mut out = Vec::with_capacity(13);
        if let Some(a) = &self.attention {
            out.push(("attention.w_a", &a.w_a));
            out.push(("attention.w_t", &a.w_t));
        }
        if let Some(p) = &self.input_proj {
            out.push(("input_proj", p));
        }
        out.extend([
            ("lstm_fwd.w_ih", &self.lstm_fwd.w_ih),
            ("lstm_fwd.w_hh", &self.lstm_fwd.w_hh),
            ("lstm_fwd.bias", &self.lstm_fwd.bias),
            ("lstm_bwd.w_ih", &self.lstm_bwd.w_ih),
            ("lstm_bwd.w_hh", &self.lstm_bwd.w_hh),
            ("lstm_bwd.bias", &self.lstm_bwd.bias),
            ("head.w1", &self.head.w1),
            ("head.b1", &self.head.b1),
            ("head.w2", &self.head.w2),
            ("head.b2", &self.head.b2),
        ]);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut P)> {
        let mut out = Vec::with_capacity(13);
        if let Some(a) = &mut self.attention {
            out.push(("attention.w_a", &mut a.w_a));
            out.push(("attention.w_t", &mut a.w_t));
        }
        if let Some(p) = &mut self.input_proj {
            out.push(("input_proj", p));
        }
        out.extend([
            ("lstm_fwd.w_ih", &mut self.lstm_fwd.w_ih),
            ("lstm_fwd.w_hh", &mut self.lstm_fwd.w_hh),
            ("lstm_fwd.bias", &mut self.lstm_fwd.bias),
            ("lstm_bwd.w_ih", &mut self.lstm_bwd.w_ih),
            ("lstm_bwd.w_hh", &mut self.lstm_bwd.w_hh),
            ("lstm_bwd.bias", &mut self.lstm_bwd.bias),
            ("head.w1", &mut self.head.w1),
            ("head.b1", &mut self.head.b1),
            ("head.w2", &mut self.head.w2),
            ("head.b2", &mut self.head.b2),
        ]);
        out
    }

    /// Applies `f` to every tensor in canonical order, keeping the layout.
    pub fn try_map<Q, E>(&self, mut f: impl FnMut(&'static str, &P) -> Result<Q, E>) -> Result<ModelParams<Q>, E> {
        let lstm = |prefix: [&'static str; 3], p: &LstmParams<P>, f: &mut dyn FnMut(&'static str, &P) -> Result<Q, E>| {
            Ok::<_, E>(LstmParams {
                w_ih: f(prefix[0], &p.w_ih)?,
                w_hh: f(prefix[1], &p.w_hh)?,
                bias: f(prefix[2], &p.bias)?,
            })
        };
        let attention = match &self.attention {
            Some(a) => Some(AttentionParams {
                w_a: f("attention.w_a", &a.w_a)?,
                w_t: f("attention.w_t", &a.w_t)?,
            }),
            None => None,
        };
        let input_proj = match &self.input_proj {
            Some(p) => Some(f("input_proj", p)?),
            None => None,
        };
        let lstm_fwd = lstm(["lstm_fwd.w_ih", "lstm_fwd.w_hh", "lstm_fwd.bias"], &self.lstm_fwd, &mut f)?;
        let lstm_bwd = lstm(["lstm_bwd.w_ih", "lstm_bwd.w_hh", "lstm_bwd.bias"], &self.lstm_bwd, &mut f)?;
        let head = HeadParams {
            w1: f("head.w1", &self.head.w1)?,
            b1: f("head.b1", &self.head.b1)?,
            w2: f("head.w2", &self.head.w2)?,
            b2: f("head.b2", &self.head.b2)?,
        };
        Ok(ModelParams {
            attention,
            input_proj,
            lstm_fwd,
            lstm_bwd,
            head,
        })
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&'static str, &P) -> Q) -> ModelParams<Q> {
        self.try_map(|n, p| Ok::<_, std::convert::Infallible>(f(n, p)))
            .unwrap_or_else(|e| match e {})
    }

    /// Pairs two layouts entry by entry (same architecture required).
    pub fn zip_with<Q, R>(&self, other: &ModelParams<Q>, mut f: impl FnMut(&'static str, &P, &Q) -> R) -> ModelParams<R> {
        let others: Vec<&Q> = other.named().into_iter().map(|(_, q)| q).collect();
        let mut k = 0;
        self.map(|name, p| {
            let r = f(name, p, others[k]);
            k += 1;
            r
        })
    }
}

impl ModelParams<(usize, usize)> {
    /// Tensor shapes implied by a config.
    pub fn layout(config: &ModelConfig) -> Self {
        let h = config.d_b;
        let lstm = |input| LstmParams {
            w_ih: (input, 4 * h),
            w_hh: (h, 4 * h),
            bias: (1, 4 * h),
        };
        ModelParams {
            attention: config.architecture.is_multimodal().then_some(AttentionParams {
                w_a: (config.d_a, config.d_q),
                w_t: (config.d_t, config.d_v),
            }),
            input_proj: config.input_proj_rows().map(|rows| (rows, config.d_q)),
            lstm_fwd: lstm(config.encoder_input()),
            lstm_bwd: lstm(config.encoder_input()),
            head: HeadParams {
                w1: (2 * h, config.fcn_hidden),
                b1: (1, config.fcn_hidden),
                w2: (config.fcn_hidden, config.n_classes),
                b2: (1, config.n_classes),
            },
        }
    }
}

impl<T: Scalar> ModelParams<Matrix<T>> {
    pub fn bind(&self, tape: &mut Tape<T>) -> ModelParams<Var> {
        self.map(|_, m| tape.param(m.clone()))
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_, m| Matrix::zeros(m.rows(), m.cols()))
    }

    pub fn n_scalars(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }
}

/// Class probabilities and argmax labels per segment.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    /// `N x 2`, columns `[teacher, student]`.
    pub probabilities: Matrix<T>,
    pub labels: Vec<Label>,
}

impl<T: Scalar> Prediction<T> {
    pub fn from_probabilities(probabilities: Matrix<T>) -> Self {
        let labels = (0..probabilities.rows())
            .map(|i| argmax_label(probabilities.get(i, 0), probabilities.get(i, 1)))
            .collect();
        Prediction {
            probabilities,
            labels,
        }
    }
}

/// Student only when strictly more likely; ties go to the teacher.
pub fn argmax_label<T: PartialOrd>(teacher: T, student: T) -> Label {
    if student > teacher {
        Label::Student
    } else {
        Label::Teacher
    }
}

/// Tape nodes of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub probs: Var,
    pub attention: Option<AttentionNodes>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: Var,
    pub l_c: Var,
    pub r_alpha: Var,
}

/// Loss values: `total = l_c + effective_beta * r_alpha`, with `r_alpha`
/// already divided by the number of valid segments.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_c: f64,
    pub r_alpha: f64,
}

fn encoder_input<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    params: &ModelParams<Var>,
    x_a: Var,
    x_t: Var,
    mask: Option<&Mask>,
) -> Result<(Var, Option<AttentionNodes>)> {
    let missing = |what: &str| Error::Contract(format!("{} model lacks {what}", config.architecture));
    match config.architecture {
        Architecture::FullMultimodal => {
            let ap = params.attention.as_ref().ok_or_else(|| missing("attention parameters"))?;
            let att = multimodal_attention(tape, x_a, x_t, ap, mask)?;
            let fused = tape.concat_cols(att.fused, att.values)?;
            Ok((fused, Some(att)))
        }
        arch => {
            let proj = params.input_proj.ok_or_else(|| missing("input projection"))?;
            let input = match arch {
                Architecture::AcousticOnly | Architecture::SelfAttnAcoustic => x_a,
                Architecture::TextOnly | Architecture::SelfAttnText => x_t,
                _ => tape.concat_cols(x_a, x_t)?,
            };
            match arch {
                Architecture::SelfAttnAcoustic | Architecture::SelfAttnText => {
                    let att = self_attention(tape, input, proj, mask)?;
                    Ok((att.fused, Some(att)))
                }
                _ => Ok((tape.matmul(input, proj)?, None)),
            }
        }
    }
}

/// Records the forward pass of `config.architecture` on `tape`.
pub fn forward_nodes<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    params: &ModelParams<Var>,
    x_a: Var,
    x_t: Var,
    mask: Option<&Mask>,
) -> Result<ForwardNodes> {
    let (n, d_a) = tape.shape(x_a);
    let (nt, d_t) = tape.shape(x_t);
    if d_a != config.d_a {
        return Err(Error::Dimension {
            what: "acoustic feature width (d_a)".into(),
            expected: config.d_a,
            found: d_a,
        });
    }
    if d_t != config.d_t {
        return Err(Error::Dimension {
            what: "text feature width (d_t)".into(),
            expected: config.d_t,
            found: d_t,
        });
    }
    if nt != n {
        return Err(Error::Dimension {
            what: "text rows vs acoustic rows".into(),
            expected: n,
            found: nt,
        });
    }

    let (encoder_in, attention) = encoder_input(tape, config, params, x_a, x_t, mask)?;
    let encoded = bilstm_forward(tape, &params.lstm_fwd, &params.lstm_bwd, encoder_in, mask)?;

    let head = &params.head;
    let z1 = tape.matmul(encoded, head.w1)?;
    let z1 = tape.add_row(z1, head.b1)?;
    let a1 = tape.relu(z1);
    let z2 = tape.matmul(a1, head.w2)?;
    let logits = tape.add_row(z2, head.b2)?;
    let probs = tape.row_softmax(logits, None)?;
    Ok(ForwardNodes { probs, attention })
}

fn valid_count(n: usize, mask: Option<&Mask>) -> Result<usize> {
    match mask {
        Some(m) if m.len() != n => Err(Error::Dimension {
            what: "mask length".into(),
            expected: n,
            found: m.len(),
        }),
        Some(m) => Ok(m.n_valid()),
        None => Ok(n),
    }
}

/// Records `L_c`, the normalized regularizer and the total on `tape`.
/// `labels` covers every row; entries at padded positions are ignored.
pub fn loss_nodes<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    forward: &ForwardNodes,
    labels: &[Label],
    mask: Option<&Mask>,
) -> Result<LossNodes> {
    let n = tape.shape(forward.probs).0;
    if labels.len() != n {
        return Err(Error::Dimension {
            what: "labels".into(),
            expected: n,
            found: labels.len(),
        });
    }
    let n_valid = valid_count(n, mask)?;
    let inv = T::one() / T::of(n_valid as f64);
    let valid = |i: usize| mask.is_none_or(|m| m.is_valid(i));

    // L_c = -(1/N) sum[y log p + (1 - y) log(1 - p)], p = P(student)
    let mut w_pos = Matrix::zeros(n, 1);
    let mut w_neg = Matrix::zeros(n, 1);
    for (i, &l) in labels.iter().enumerate().filter(|(i, _)| valid(*i)) {
        match l {
            Label::Student => w_pos.set(i, 0, -inv),
            Label::Teacher => w_neg.set(i, 0, -inv),
        }
    }
    let (lo, hi) = (T::of(PROB_CLAMP), T::one() - T::of(PROB_CLAMP));
    let p = tape.slice_cols(forward.probs, 1, 1)?;
    let log_p = tape.log_clamped(p, lo, hi);
    let one_minus_p = tape.affine(p, -T::one(), T::one());
    let log_q = tape.log_clamped(one_minus_p, lo, hi);
    let pos = tape.weighted_sum(log_p, w_pos)?;
    let neg = tape.weighted_sum(log_q, w_neg)?;
    let l_c = tape.add(pos, neg)?;

    let r_alpha = match &forward.attention {
        Some(att) => {
            let raw = attention_regularizer(tape, att.scores, labels, mask)?;
            tape.scale(raw, inv)
        }
        None => tape.constant(Matrix::scalar(T::zero())),
    };
    let weighted = tape.scale(r_alpha, T::of(config.effective_beta()));
    let total = tape.add(l_c, weighted)?;
    Ok(LossNodes { total, l_c, r_alpha })
}

/// Loss from plain values, without a tape.
pub fn loss_values<T: Scalar>(
    config: &ModelConfig,
    prediction: &Prediction<T>,
    attention: Option<&AttentionOutput<T>>,
    labels: &[Label],
    mask: Option<&Mask>,
) -> Result<LossBreakdown> {
    let n = prediction.probabilities.rows();
    if labels.len() != n {
        return Err(Error::Dimension {
            what: "labels".into(),
            expected: n,
            found: labels.len(),
        });
    }
    let n_valid = valid_count(n, mask)? as f64;
    let valid = |i: usize| mask.is_none_or(|m| m.is_valid(i));
    let mut nll = 0.0;
    for (i, &l) in labels.iter().enumerate().filter(|(i, _)| valid(*i)) {
        let p = prediction.probabilities.get(i, 1).as_f64();
        nll -= match l {
            Label::Student => p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln(),
            Label::Teacher => (1.0 - p).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln(),
        };
    }
    let l_c = nll / n_valid;
    let r_alpha = match attention {
        Some(att) => cross_type_mass(&att.scores, labels, mask)?.as_f64() / n_valid,
        None => 0.0,
    };
    Ok(LossBreakdown {
        total: l_c + config.effective_beta() * r_alpha,
        l_c,
        r_alpha,
    })
}

/// Model parameters plus the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct CadModel<T> {
    config: ModelConfig,
    params: ModelParams<Matrix<T>>,
}

impl<T: Scalar> CadModel<T> {
    /// Validates `config` and initializes parameters from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let attention = config
            .architecture
            .is_multimodal()
            .then(|| AttentionParams::init(config.d_a, config.d_t, config.d_q, config.d_v, &mut rng));
        let input_proj = config
            .input_proj_rows()
            .map(|rows| Matrix::uniform(rows, config.d_q, 1.0 / (rows as f64).sqrt(), &mut rng));
        let enc = config.encoder_input();
        let lstm_fwd = LstmParams::init(enc, config.d_b, &mut rng);
        let lstm_bwd = LstmParams::init(enc, config.d_b, &mut rng);
        let b1 = 1.0 / ((2 * config.d_b) as f64).sqrt();
        let b2 = 1.0 / (config.fcn_hidden as f64).sqrt();
        let head = HeadParams {
            w1: Matrix::uniform(2 * config.d_b, config.fcn_hidden, b1, &mut rng),
            b1: Matrix::uniform(1, config.fcn_hidden, b1, &mut rng),
            w2: Matrix::uniform(config.fcn_hidden, config.n_classes, b2, &mut rng),
            b2: Matrix::uniform(1, config.n_classes, b2, &mut rng),
        };
        Ok(CadModel {
            config,
            params: ModelParams {
                attention,
                input_proj,
                lstm_fwd,
                lstm_bwd,
                head,
            },
        })
    }

    /// Assembles a model from existing parameters, checking every shape.
    pub fn from_parts(config: ModelConfig, params: ModelParams<Matrix<T>>) -> Result<Self> {
        config.validate()?;
        let layout = ModelParams::layout(&config);
        let expected = layout.named();
        let got = params.named();
        if expected.len() != got.len() || expected.iter().zip(&got).any(|((a, _), (b, _))| a != b) {
            return Err(Error::Contract(format!(
                "parameter set does not match the {} architecture",
                config.architecture
            )));
        }
        for ((name, &shape), (_, m)) in expected.iter().zip(&got) {
            if m.shape() != shape {
                return Err(Error::Contract(format!(
                    "tensor {name}: expected shape {shape:?}, found {:?}",
                    m.shape()
                )));
            }
        }
        Ok(CadModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    pub fn params(&self) -> &ModelParams<Matrix<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<Matrix<T>> {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> ModelParams<Var> {
        self.params.bind(tape)
    }

    pub fn forward(
        &self,
        x_a: &Matrix<T>,
        x_t: &Matrix<T>,
        mask: Option<&Mask>,
    ) -> Result<(Prediction<T>, Option<AttentionOutput<T>>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let a = tape.constant(x_a.clone());
        let t = tape.constant(x_t.clone());
        let fwd = forward_nodes(&mut tape, &self.config, &bound, a, t, mask)?;
        let pred = Prediction::from_probabilities(tape.value(fwd.probs).clone());
        Ok((pred, fwd.attention.map(|n| n.resolve(&tape))))
    }

    pub fn loss(
        &self,
        prediction: &Prediction<T>,
        attention: Option<&AttentionOutput<T>>,
        labels: &[Label],
        mask: Option<&Mask>,
    ) -> Result<LossBreakdown> {
        loss_values(&self.config, prediction, attention, labels, mask)
    }

    /// Loss and parameter gradients for one (possibly padded) sequence.
    pub fn loss_and_gradients(
        &self,
        x_a: &Matrix<T>,
        x_t: &Matrix<T>,
        labels: &[Label],
        mask: Option<&Mask>,
    ) -> Result<(LossBreakdown, ModelParams<Matrix<T>>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let a = tape.constant(x_a.clone());
        let t = tape.constant(x_t.clone());
        let fwd = forward_nodes(&mut tape, &self.config, &bound, a, t, mask)?;
        let loss = loss_nodes(&mut tape, &self.config, &fwd, labels, mask)?;
        let grads = tape.backward(loss.total)?;
        let scalar = |v: Var| tape.value(v).get(0, 0).as_f64();
        let breakdown = LossBreakdown {
            total: scalar(loss.total),
            l_c: scalar(loss.l_c),
            r_alpha: scalar(loss.r_alpha),
        };
        Ok((breakdown, bound.map(|_, &v| grads.wrt(&tape, v))))
    }

    fn check_recording(&self, rec: &Recording) -> Result<()> {
        let checks = [("d_a", self.config.d_a, rec.d_a()), ("d_t", self.config.d_t, rec.d_t())];
        for (name, expected, found) in checks {
            if expected != found {
                return Err(Error::Dimension {
                    what: format!("recording {} {name} (model was trained with {expected})", rec.id()),
                    expected,
                    found,
                });
            }
        }
        Ok(())
    }

    pub fn forward_recording(&self, rec: &Recording) -> Result<(Prediction<T>, Option<AttentionOutput<T>>)> {
        self.check_recording(rec)?;
        self.forward(&rec.acoustic_matrix(), &rec.text_matrix(), None)
    }

    /// Copy of `rec` with every segment labeled by the model's argmax.
    pub fn predict_sequence(&self, rec: &Recording) -> Result<Recording> {
        let (pred, _) = self.forward_recording(rec)?;
        rec.with_labels(&pred.labels)
    }
}

/// Builds a model of any architecture (the five encoder baselines or the full path).
pub fn build_baseline<T: Scalar>(config: ModelConfig) -> Result<CadModel<T>> {
    CadModel::new(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    pub(crate) fn tiny(arch: Architecture) -> ModelConfig {
        ModelConfig {
            d_a: 5,
            d_t: 4,
            d_q: 3,
            d_v: 3,
            d_b: 2,
            fcn_hidden: 6,
            architecture: arch,
            seed: 9,
            ..Default::default()
        }
    }

    fn inputs(n: usize, seed: u64) -> (Matrix<f64>, Matrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (Matrix::uniform(n, 5, 1.0, &mut rng), Matrix::uniform(n, 4, 1.0, &mut rng))
    }

    #[test]
    fn probabilities_are_row_stochastic_for_all_architectures() {
        let (a, t) = inputs(7, 1);
        for arch in Architecture::ALL {
            let model = CadModel::<f64>::new(tiny(arch)).unwrap();
            let (pred, att) = model.forward(&a, &t, None).unwrap();
            for i in 0..7 {
                let s = pred.probabilities.get(i, 0) + pred.probabilities.get(i, 1);
                assert!((s - 1.0).abs() < 1e-12);
            }
            let has_att = matches!(
                arch,
                Architecture::FullMultimodal | Architecture::SelfAttnAcoustic | Architecture::SelfAttnText
            );
            assert_eq!(att.is_some(), has_att, "{arch}");
        }
    }

    #[test]
    fn structural_layouts() {
        let acoustic = CadModel::<f64>::new(tiny(Architecture::AcousticOnly)).unwrap();
        assert!(acoustic.params().attention.is_none());
        assert_eq!(acoustic.params().input_proj.as_ref().unwrap().shape(), (5, 3));
        let concat = CadModel::<f64>::new(tiny(Architecture::ConcatFeatures)).unwrap();
        assert_eq!(concat.params().input_proj.as_ref().unwrap().shape(), (9, 3));
        assert_eq!(concat.params().lstm_fwd.w_ih.rows(), 3);
        let full = CadModel::<f64>::new(tiny(Architecture::FullMultimodal)).unwrap();
        assert_eq!(full.params().lstm_fwd.w_ih.rows(), 6);
        assert!(full.params().input_proj.is_none());
    }

    #[test]
    fn zero_text_still_well_formed() {
        let (a, _) = inputs(4, 2);
        let model = CadModel::<f64>::new(tiny(Architecture::FullMultimodal)).unwrap();
        let (pred, att) = model.forward(&a, &Matrix::zeros(4, 4), None).unwrap();
        assert!(pred.probabilities.is_finite());
        assert_eq!(att.unwrap().values, Matrix::zeros(4, 3));
    }

    #[test]
    fn forward_is_deterministic() {
        let (a, t) = inputs(5, 3);
        let m1 = CadModel::<f64>::new(tiny(Architecture::FullMultimodal)).unwrap();
        let m2 = CadModel::<f64>::new(tiny(Architecture::FullMultimodal)).unwrap();
        assert_eq!(m1.forward(&a, &t, None).unwrap(), m2.forward(&a, &t, None).unwrap());
    }

    #[test]
    fn forward_rejects_wrong_widths() {
        let model = CadModel::<f64>::new(tiny(Architecture::TextOnly)).unwrap();
        let err = model.forward(&Matrix::zeros(3, 4), &Matrix::zeros(3, 4), None).unwrap_err();
        assert!(matches!(err, Error::Dimension { expected: 5, found: 4, .. }));
    }

    fn pred(probs: &[[f64; 2]]) -> Prediction<f64> {
        Prediction::from_probabilities(Matrix::from_rows(probs).unwrap())
    }

    #[test]
    fn bce_hand_values() {
        let cfg = tiny(Architecture::AcousticOnly);
        let half = loss_values(&cfg, &pred(&[[0.5, 0.5]; 3]), None, &[Label::Teacher, Label::Student, Label::Student], None)
            .unwrap();
        assert!((half.l_c - 2f64.ln()).abs() < 1e-15);

        let two = loss_values(&cfg, &pred(&[[0.1, 0.9], [0.8, 0.2]]), None, &[Label::Student, Label::Teacher], None)
            .unwrap();
        let expected = (-(0.9f64).ln() - (0.8f64).ln()) / 2.0;
        assert!((two.l_c - expected).abs() < 1e-15);
        assert!((two.l_c - 0.16425).abs() < 1e-5);

        let perfect = loss_values(&cfg, &pred(&[[0.0, 1.0], [1.0, 0.0]]), None, &[Label::Student, Label::Teacher], None)
            .unwrap();
        assert!(perfect.l_c <= 1e-11);
    }

    #[test]
    fn tape_loss_matches_value_loss() {
        let (a, t) = inputs(6, 4);
        let labels = [0u8, 1, 1, 0, 0, 1].map(|l| Label::try_from(l).unwrap());
        for arch in Architecture::ALL {
            let model = CadModel::<f64>::new(tiny(arch)).unwrap();
            let (p, att) = model.forward(&a, &t, None).unwrap();
            let direct = model.loss(&p, att.as_ref(), &labels, None).unwrap();
            let (taped, _) = model.loss_and_gradients(&a, &t, &labels, None).unwrap();
            assert!((direct.total - taped.total).abs() < 1e-12, "{arch}");
            assert!((direct.l_c - taped.l_c).abs() < 1e-12);
            assert!((direct.r_alpha - taped.r_alpha).abs() < 1e-12);
            let beta = model.config().effective_beta();
            assert_eq!(taped.total, taped.l_c + beta * taped.r_alpha);
        }
    }

    #[test]
    fn beta_zero_makes_total_equal_lc() {
        let (a, t) = inputs(6, 5);
        let labels = vec![Label::Teacher, Label::Student, Label::Teacher, Label::Student, Label::Student, Label::Teacher];
        let model = CadModel::<f64>::new(ModelConfig {
            beta: 0.0,
            ..tiny(Architecture::FullMultimodal)
        })
        .unwrap();
        let (l, _) = model.loss_and_gradients(&a, &t, &labels, None).unwrap();
        assert_eq!(l.total, l.l_c);
        assert!(l.r_alpha > 0.0);
    }

    #[test]
    fn ties_go_to_teacher() {
        let p = pred(&[[0.7, 0.3], [0.5, 0.5], [0.2, 0.8]]);
        assert_eq!(p.labels, vec![Label::Teacher, Label::Teacher, Label::Student]);
    }

    #[test]
    fn architecture_tags_round_trip() {
        for arch in Architecture::ALL {
            assert_eq!(arch.tag().parse::<Architecture>().unwrap(), arch);
        }
        assert!("bilstm".parse::<Architecture>().is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            ModelConfig { n_classes: 3, ..Default::default() },
            ModelConfig { beta: -1.0, ..Default::default() },
            ModelConfig { d_b: 0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(CadModel::<f64>::new(cfg).is_err());
        }
    }

    #[test]
    fn f32_models_run() {
        let (a, t) = inputs(4, 6);
        let model = CadModel::<f32>::new(tiny(Architecture::FullMultimodal)).unwrap();
        let (p, _) = model.forward(&a.cast(), &t.cast(), None).unwrap();
        for i in 0..4 {
            assert!((p.probabilities.get(i, 0) + p.probabilities.get(i, 1) - 1.0).abs() < 1e-6);
        }
    }
}
