//! The pair classifier shared by the recall and precision stages: a
//! 128→64→1 ReLU MLP with dropout after each hidden layer, trained with Adam
//! on binary cross-entropy.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::math::sigmoid;
use crate::{Error, Result};

pub const HIDDEN1: usize = 128;
pub const HIDDEN2: usize = 64;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const PROB_FLOOR: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 64, max_epochs: 15, learning_rate: 1e-3, dropout_rate: 0.2, seed: 0 }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidParameter("batch size and epochs must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidParameter(format!("dropout rate {}", self.dropout_rate)));
        }
        Ok(())
    }
}

/// Parameter layout in one flat buffer: `w1 (in×128) | b1 | w2 (128×64) | b2 | w3 (64) | b3`.
/// Weight matrices are input-major, so `w1[i * 128 + j]` connects input `i`
/// to hidden unit `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    input_dim: usize,
    dropout_rate: f64,
    params: Vec<f64>,
}

#[derive(Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    len: usize,
}

impl Layout {
    fn new(input_dim: usize) -> Self {
        let w1 = 0;
        let b1 = w1 + input_dim * HIDDEN1;
        let w2 = b1 + HIDDEN1;
        let b2 = w2 + HIDDEN1 * HIDDEN2;
        let w3 = b2 + HIDDEN2;
        let b3 = w3 + HIDDEN2;
        Self { w1, b1, w2, b2, w3, b3, len: b3 + 1 }
    }
}

/// Activations of one forward pass, kept for backpropagation.
struct Trace {
    pre1: [f64; HIDDEN1],
    act1: [f64; HIDDEN1],
    pre2: [f64; HIDDEN2],
    act2: [f64; HIDDEN2],
    logit: f64,
}

impl Trace {
    fn new() -> Self {
        Self {
            pre1: [0.0; HIDDEN1],
            act1: [0.0; HIDDEN1],
            pre2: [0.0; HIDDEN2],
            act2: [0.0; HIDDEN2],
            logit: 0.0,
        }
    }
}

/// Dropout keep-masks, already scaled by `1 / (1 - rate)`.
struct Masks {
    m1: [f64; HIDDEN1],
    m2: [f64; HIDDEN2],
}

fn bce_from_logit(z: f64, y: f64) -> f64 {
    // max(z, 0) - z*y + ln(1 + e^-|z|)
    z.max(0.0) - z * y + libm::log1p(libm::exp(-libm::fabs(z)))
}

impl MlpModel {
    /// Fresh model with He-uniform weights (`±sqrt(6 / fan_in)`) and zero biases.
    pub fn new(input_dim: usize, dropout_rate: f64, seed: u64) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidParameter("input_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::InvalidParameter(format!("dropout rate {dropout_rate}")));
        }
        let lay = Layout::new(input_dim);
        let mut params = vec![0.0; lay.len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |slice: &mut [f64], fan_in: usize| {
            let limit = libm::sqrt(6.0 / fan_in as f64);
            for p in slice {
                *p = (rng.random::<f64>() * 2.0 - 1.0) * limit;
            }
        };
        fill(&mut params[lay.w1..lay.b1], input_dim);
        fill(&mut params[lay.w2..lay.b2], HIDDEN1);
        fill(&mut params[lay.w3..lay.b3], HIDDEN2);
        Ok(Self { input_dim, dropout_rate, params })
    }

    /// Rebuilds a model from a flat parameter buffer (see the type docs for
    /// the layout).
    pub fn from_params(input_dim: usize, dropout_rate: f64, params: Vec<f64>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidParameter("input_dim must be positive".into()));
        }
        let want = Layout::new(input_dim).len;
        if params.len() != want {
            return Err(Error::LengthMismatch(params.len(), want));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidParameter("non-finite model parameter".into()));
        }
        Ok(Self { input_dim, dropout_rate, params })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn forward(&self, x: &[f64], masks: Option<&Masks>, t: &mut Trace) {
        let lay = Layout::new(self.input_dim);
        let p = &self.params;
        t.pre1.copy_from_slice(&p[lay.b1..lay.w2]);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &p[lay.w1 + i * HIDDEN1..lay.w1 + (i + 1) * HIDDEN1];
            for (acc, w) in t.pre1.iter_mut().zip(row) {
                *acc += xi * w;
            }
        }
        for j in 0..HIDDEN1 {
            let a = t.pre1[j].max(0.0);
            t.act1[j] = match masks {
                Some(m) => a * m.m1[j],
                None => a,
            };
        }
        t.pre2.copy_from_slice(&p[lay.b2..lay.w3]);
        for j in 0..HIDDEN1 {
            let a = t.act1[j];
            if a == 0.0 {
                continue;
            }
            let row = &p[lay.w2 + j * HIDDEN2..lay.w2 + (j + 1) * HIDDEN2];
            for (acc, w) in t.pre2.iter_mut().zip(row) {
                *acc += a * w;
            }
        }
        for k in 0..HIDDEN2 {
            let a = t.pre2[k].max(0.0);
            t.act2[k] = match masks {
                Some(m) => a * m.m2[k],
                None => a,
            };
        }
        let w3 = &p[lay.w3..lay.b3];
        let mut z = p[lay.b3];
        for k in 0..HIDDEN2 {
            z += t.act2[k] * w3[k];
        }
        t.logit = z;
    }

    /// Accumulates `scale * dL/dθ` for one example into `grad`.
    fn backward(&self, x: &[f64], y: f64, masks: Option<&Masks>, t: &Trace, scale: f64, grad: &mut [f64]) {
        let lay = Layout::new(self.input_dim);
        let p = &self.params;
        let dz = (sigmoid(t.logit) - y) * scale;

        let mut d2 = [0.0f64; HIDDEN2];
        let w3 = &p[lay.w3..lay.b3];
        {
            let g3 = &mut grad[lay.w3..lay.b3];
            for k in 0..HIDDEN2 {
                g3[k] += dz * t.act2[k];
                let m = masks.map_or(1.0, |m| m.m2[k]);
                d2[k] = if t.pre2[k] > 0.0 { dz * w3[k] * m } else { 0.0 };
            }
        }
        grad[lay.b3] += dz;
        for (g, d) in grad[lay.b2..lay.w3].iter_mut().zip(&d2) {
            *g += d;
        }

        let mut d1 = [0.0f64; HIDDEN1];
        for j in 0..HIDDEN1 {
            let row = &p[lay.w2 + j * HIDDEN2..lay.w2 + (j + 1) * HIDDEN2];
            let a = t.act1[j];
            if a != 0.0 {
                let grow = &mut grad[lay.w2 + j * HIDDEN2..lay.w2 + (j + 1) * HIDDEN2];
                for (g, d) in grow.iter_mut().zip(&d2) {
                    *g += a * d;
                }
            }
            if t.pre1[j] > 0.0 {
                let mut s = 0.0;
                for k in 0..HIDDEN2 {
                    s += row[k] * d2[k];
                }
                d1[j] = s * masks.map_or(1.0, |m| m.m1[j]);
            }
        }
        for (g, d) in grad[lay.b1..lay.w2].iter_mut().zip(&d1) {
            *g += d;
        }
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let grow = &mut grad[lay.w1 + i * HIDDEN1..lay.w1 + (i + 1) * HIDDEN1];
            for (g, d) in grow.iter_mut().zip(&d1) {
                *g += xi * d;
            }
        }
    }

    /// Match probability with dropout disabled, clamped into `(0, 1)`.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut t = Trace::new();
        self.forward(x, None, &mut t);
        sigmoid(t.logit).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
    }

    /// Binary cross-entropy of one example, dropout disabled.
    pub fn loss(&self, x: &[f64], label: u8) -> f64 {
        let mut t = Trace::new();
        self.forward(x, None, &mut t);
        bce_from_logit(t.logit, f64::from(label))
    }

    /// Analytic gradient of `scale * loss(x, label)`, dropout disabled.
    pub fn loss_gradient(&self, x: &[f64], label: u8, scale: f64) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        let mut t = Trace::new();
        self.forward(x, None, &mut t);
        let mut grad = vec![0.0; self.params.len()];
        self.backward(x, f64::from(label), None, &t, scale, &mut grad);
        Ok(grad)
    }

    /// Mean cross-entropy over a labeled set, dropout disabled.
    pub fn mean_loss<F: AsRef<[f64]>>(&self, features: &[F], labels: &[u8]) -> f64 {
        let total: f64 = features.iter().zip(labels).map(|(x, &y)| self.loss(x.as_ref(), y)).sum();
        total / features.len().max(1) as f64
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.input_dim {
            return Err(Error::DimMismatch { expected: self.input_dim, got });
        }
        Ok(())
    }
}

fn validate_training_set<F: AsRef<[f64]>>(features: &[F], labels: &[u8]) -> Result<usize> {
    if features.len() != labels.len() {
        return Err(Error::LengthMismatch(features.len(), labels.len()));
    }
    if features.len() < 2 {
        return Err(Error::Empty("training set needs at least two examples"));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::InvalidParameter("labels must be 0 or 1".into()));
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::SingleClass);
    }
    let dim = features[0].as_ref().len();
    for f in features {
        let got = f.as_ref().len();
        if got != dim {
            return Err(Error::DimMismatch { expected: dim, got });
        }
        if f.as_ref().iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("non-finite feature".into()));
        }
    }
    Ok(dim)
}

/// Trains a freshly initialized model by mini-batch Adam on binary
/// cross-entropy.
pub fn train<F: AsRef<[f64]>>(features: &[F], labels: &[u8], config: &TrainConfig) -> Result<MlpModel> {
    train_inner(features, labels, config, false).map(|(m, _)| m)
}

/// As [`train`], also returning the full-set loss (dropout disabled) after
/// every epoch.
pub fn train_with_history<F: AsRef<[f64]>>(
    features: &[F],
    labels: &[u8],
    config: &TrainConfig,
) -> Result<(MlpModel, Vec<f64>)> {
    train_inner(features, labels, config, true)
}

fn train_inner<F: AsRef<[f64]>>(
    features: &[F],
    labels: &[u8],
    config: &TrainConfig,
    track: bool,
) -> Result<(MlpModel, Vec<f64>)> {
    config.validate()?;
    let dim = validate_training_set(features, labels)?;
    let mut model = MlpModel::new(dim, config.dropout_rate, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let n_params = model.params.len();
    let mut grad = vec![0.0; n_params];
    let mut m1 = vec![0.0; n_params];
    let mut m2 = vec![0.0; n_params];
    let mut step = 0i32;
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut trace = Trace::new();
    let keep = 1.0 - config.dropout_rate;
    let mut masks = Masks { m1: [0.0; HIDDEN1], m2: [0.0; HIDDEN2] };
    let mut history = Vec::new();

    for _ in 0..config.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let x = features[i].as_ref();
                let use_masks = config.dropout_rate > 0.0;
                if use_masks {
                    for m in masks.m1.iter_mut() {
                        *m = if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
                    }
                    for m in masks.m2.iter_mut() {
                        *m = if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
                    }
                }
                let mk = if use_masks { Some(&masks) } else { None };
                model.forward(x, mk, &mut trace);
                model.backward(x, f64::from(labels[i]), mk, &trace, scale, &mut grad);
            }
            step += 1;
            let lr = config.learning_rate;
            let c1 = 1.0 - libm::pow(ADAM_BETA1, f64::from(step));
            let c2 = 1.0 - libm::pow(ADAM_BETA2, f64::from(step));
            for (((p, g), a), b) in model.params.iter_mut().zip(&grad).zip(m1.iter_mut()).zip(m2.iter_mut()) {
                *a = ADAM_BETA1 * *a + (1.0 - ADAM_BETA1) * g;
                *b = ADAM_BETA2 * *b + (1.0 - ADAM_BETA2) * g * g;
                let mhat = *a / c1;
                let vhat = *b / c2;
                *p -= lr * mhat / (libm::sqrt(vhat) + ADAM_EPS);
            }
        }
        if track {
            history.push(model.mean_loss(features, labels));
        }
    }
    Ok((model, history))
}

/// Match probabilities for every row, dropout disabled, in input order.
pub fn predict_batch<F: AsRef<[f64]>>(model: &MlpModel, features: &[F]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(features.len());
    let mut t = Trace::new();
    for f in features {
        let x = f.as_ref();
        model.check_dim(x.len())?;
        model.forward(x, None, &mut t);
        out.push(sigmoid(t.logit).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR));
    }
    Ok(out)
}

/// The F1-maximizing decision threshold and its F1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdResult {
    pub threshold: f64,
    pub f1: f64,
}

/// `2·tp / (2·tp + fp + fn)`, 0 when the denominator is 0.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// Scans every distinct probability as a threshold (`prob >= θ` predicts a
/// match) and returns the one with maximal F1, preferring the larger
/// threshold on ties.
pub fn optimal_threshold(probs: &[f64], labels: &[u8]) -> Result<ThresholdResult> {
    if probs.len() != labels.len() {
        return Err(Error::LengthMismatch(probs.len(), labels.len()));
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 {
        return Err(Error::NoPositives);
    }
    if probs.iter().any(|p| p.is_nan()) {
        return Err(Error::InvalidParameter("NaN probability".into()));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = ThresholdResult { threshold: f64::NAN, f1: -1.0 };
    let mut i = 0;
    while i < order.len() {
        let theta = probs[order[i]];
        while i < order.len() && probs[order[i]] == theta {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let f1 = f1_from_counts(tp, fp, positives - tp);
        if f1 > best.f1 {
            best = ThresholdResult { threshold: theta, f1 };
        }
    }
    Ok(best)
}

/// Largest relative error between the analytic gradient and central finite
/// differences (`h = 1e-5`) over up to 100 randomly chosen parameters.
/// Denominators are floored at `1e-6` so parameters whose gradient is zero
/// up to rounding do not blow up the ratio.
pub fn gradient_check(model: &MlpModel, feature: &[f64], label: u8) -> Result<f64> {
    const H: f64 = 1e-5;
    let analytic = model.loss_gradient(feature, label, 1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let n = model.param_count();
    let picks = rand::seq::index::sample(&mut rng, n, n.min(100)).into_vec();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for idx in picks {
        let orig = probe.params[idx];
        probe.params[idx] = orig + H;
        let up = probe.loss(feature, label);
        probe.params[idx] = orig - H;
        let down = probe.loss(feature, label);
        probe.params[idx] = orig;
        let numeric = (up - down) / (2.0 * H);
        let a = analytic[idx];
        let denom = libm::fabs(a).max(libm::fabs(numeric)).max(1e-6);
        worst = worst.max(libm::fabs(a - numeric) / denom);
    }
    Ok(worst)
}
