//! Embedding-average feedforward classifier.
//!
//! Codes are embedded, mean-pooled into one `d`-vector, concatenated with the
//! four demographic inputs, and passed through two ReLU layers and a sigmoid
//! output unit. Backpropagation and the Adam optimizer are written out by
//! hand; everything runs in `f64` and is deterministic in the seed.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{auc, ScoredSet};
use crate::features::{FeatureVector, Vocabulary, DEMOGRAPHIC_DIM};
use crate::rng;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SMIRISK\0";
const EMBED_INIT: f64 = 0.05;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Hyperparams {
    pub embedding_dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            embedding_dim: 300,
            hidden1: 128,
            hidden2: 64,
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 50,
            patience: 5,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("hyperparameter {m}")));
        if self.embedding_dim == 0 || self.hidden1 == 0 || self.hidden2 == 0 {
            return bad("dimensions must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        Ok(())
    }

    fn same_shape(&self, other: &Hyperparams) -> bool {
        (self.embedding_dim, self.hidden1, self.hidden2) == (other.embedding_dim, other.hidden1, other.hidden2)
    }
}

/// All trainable arrays, row-major. Also used for gradients and optimizer
/// moments, which share the shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub vocab_size: usize,
    pub dim: usize,
    pub h1: usize,
    pub h2: usize,
    /// `vocab_size × dim`
    pub embeddings: Vec<f64>,
    /// `(dim + 4) × h1`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `h1 × h2`
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: f64,
}

impl ModelParams {
    pub fn zeros(vocab_size: usize, dim: usize, h1: usize, h2: usize) -> Self {
        let input = dim + DEMOGRAPHIC_DIM;
        ModelParams {
            vocab_size,
            dim,
            h1,
            h2,
            embeddings: vec![0.0; vocab_size * dim],
            w1: vec![0.0; input * h1],
            b1: vec![0.0; h1],
            w2: vec![0.0; h1 * h2],
            b2: vec![0.0; h2],
            w_out: vec![0.0; h2],
            b_out: 0.0,
        }
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.vocab_size, self.dim, self.h1, self.h2)
    }

    pub fn input_dim(&self) -> usize {
        self.dim + DEMOGRAPHIC_DIM
    }

    pub fn embedding_row(&self, i: usize) -> &[f64] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    /// Every array in a fixed order, the scalar bias last.
    pub fn slices(&self) -> [&[f64]; 7] {
        [
            &self.embeddings,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.w_out,
            std::slice::from_ref(&self.b_out),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 7] {
        [
            &mut self.embeddings,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w_out,
            std::slice::from_mut(&mut self.b_out),
        ]
    }

    pub fn n_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Parameters bound to hyperparameters and a vocabulary fingerprint.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub hp: Hyperparams,
    pub vocab_fingerprint: u64,
    pub params: ModelParams,
}

impl Model {
    pub fn check_vocabulary(&self, v: &Vocabulary) -> Result<()> {
        let found = v.fingerprint();
        if found != self.vocab_fingerprint || v.len() != self.params.vocab_size {
            return Err(Error::FingerprintMismatch {
                expected: self.vocab_fingerprint,
                found,
            });
        }
        Ok(())
    }

    pub fn predict(&self, x: &FeatureVector) -> Result<f64> {
        forward(&self.params, x)
    }

    /// Scores many examples; order of the output follows the input.
    pub fn predict_all(&self, xs: &[FeatureVector]) -> Result<Vec<f64>> {
        xs.par_iter().map(|x| self.predict(x)).collect()
    }
}

fn uniform_row(rng: &mut ChaCha8Rng, row: &mut [f64]) {
    for v in row {
        *v = rng.random_range(-EMBED_INIT..EMBED_INIT);
    }
}

fn he_normal(rng: &mut ChaCha8Rng, w: &mut [f64], fan_in: usize) {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    for v in w {
        *v = normal.sample(rng);
    }
}

/// Embeddings uniform in ±0.05, dense weights He-normal, biases zero.
pub fn init_model(vocab_size: usize, hp: &Hyperparams) -> Result<ModelParams> {
    hp.validate()?;
    if vocab_size == 0 {
        return Err(Error::Config("vocabulary size must be at least 1".into()));
    }
    let mut p = ModelParams::zeros(vocab_size, hp.embedding_dim, hp.hidden1, hp.hidden2);
    let mut r = rng::seeded(rng::derive_seed(hp.seed, "init"));
    uniform_row(&mut r, &mut p.embeddings);
    let input = p.input_dim();
    he_normal(&mut r, &mut p.w1, input);
    he_normal(&mut r, &mut p.w2, p.h1);
    he_normal(&mut r, &mut p.w_out, p.h2);
    Ok(p)
}

pub fn init(vocab: &Vocabulary, hp: &Hyperparams) -> Result<Model> {
    Ok(Model {
        hp: *hp,
        vocab_fingerprint: vocab.fingerprint(),
        params: init_model(vocab.len(), hp)?,
    })
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy with `p` clamped into `[1e-12, 1 − 1e-12]`.
pub fn bce_loss(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Same loss evaluated from the logit, stable for large |z|.
fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
struct Trace {
    input: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
    logit: f64,
}

impl Trace {
    fn new(p: &ModelParams) -> Self {
        Trace {
            input: vec![0.0; p.input_dim()],
            z1: vec![0.0; p.h1],
            a1: vec![0.0; p.h1],
            z2: vec![0.0; p.h2],
            a2: vec![0.0; p.h2],
            logit: 0.0,
        }
    }
}

fn dense(x: &[f64], w: &[f64], b: &[f64], z: &mut [f64]) {
    let n_out = b.len();
    z.copy_from_slice(b);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * n_out..(i + 1) * n_out];
        for (zj, wij) in z.iter_mut().zip(row) {
            *zj += xi * wij;
        }
    }
}

fn relu(z: &[f64], a: &mut [f64]) {
    for (ai, zi) in a.iter_mut().zip(z) {
        *ai = if *zi > 0.0 { *zi } else { 0.0 };
    }
}

/// Indices must already be validated against the vocabulary size.
fn forward_into(p: &ModelParams, x: &FeatureVector, t: &mut Trace) {
    let d = p.dim;
    t.input.fill(0.0);
    if !x.code_indices.is_empty() {
        let pooled = &mut t.input[..d];
        for &c in &x.code_indices {
            for (acc, e) in pooled.iter_mut().zip(p.embedding_row(c as usize)) {
                *acc += e;
            }
        }
        let inv = 1.0 / x.code_indices.len() as f64;
        pooled.iter_mut().for_each(|v| *v *= inv);
    }
    t.input[d..].copy_from_slice(&x.demographics);
    dense(&t.input, &p.w1, &p.b1, &mut t.z1);
    relu(&t.z1, &mut t.a1);
    dense(&t.a1, &p.w2, &p.b2, &mut t.z2);
    relu(&t.z2, &mut t.a2);
    t.logit = p.b_out + t.a2.iter().zip(&p.w_out).map(|(a, w)| a * w).sum::<f64>();
}

fn check_indices(p: &ModelParams, x: &FeatureVector) -> Result<()> {
    match x.code_indices.iter().find(|&&i| i as usize >= p.vocab_size) {
        Some(&index) => Err(Error::IndexOutOfRange {
            index,
            size: p.vocab_size,
        }),
        None => Ok(()),
    }
}

/// Predicted probability for one example.
pub fn forward(p: &ModelParams, x: &FeatureVector) -> Result<f64> {
    check_indices(p, x)?;
    let mut t = Trace::new(p);
    forward_into(p, x, &mut t);
    let out = sigmoid(t.logit);
    if !out.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(out)
}

/// Mean loss over a batch.
pub fn batch_loss(p: &ModelParams, xs: &[&FeatureVector], ys: &[bool]) -> Result<f64> {
    let mut t = Trace::new(p);
    let mut total = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        check_indices(p, x)?;
        forward_into(p, x, &mut t);
        total += bce_with_logit(t.logit, f64::from(u8::from(y)));
    }
    Ok(total / xs.len() as f64)
}

/// Exact gradients of the mean batch loss. Returns `(loss, gradients)`.
pub fn backward(p: &ModelParams, xs: &[&FeatureVector], ys: &[bool]) -> Result<(f64, ModelParams)> {
    assert!(!xs.is_empty(), "backward needs a non-empty batch");
    for x in xs {
        check_indices(p, x)?;
    }
    let mut g = p.zeros_like();
    let loss = accumulate_gradients(p, xs, ys, &mut g, &mut Trace::new(p), &mut Scratch::new(p));
    Ok((loss, g))
}

struct Scratch {
    d1: Vec<f64>,
    d2: Vec<f64>,
    dinput: Vec<f64>,
}

impl Scratch {
    fn new(p: &ModelParams) -> Self {
        Scratch {
            d1: vec![0.0; p.h1],
            d2: vec![0.0; p.h2],
            dinput: vec![0.0; p.input_dim()],
        }
    }
}

fn accumulate_gradients(
    p: &ModelParams,
    xs: &[&FeatureVector],
    ys: &[bool],
    g: &mut ModelParams,
    t: &mut Trace,
    s: &mut Scratch,
) -> f64 {
    let scale = 1.0 / xs.len() as f64;
    let mut loss = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let y = f64::from(u8::from(y));
        forward_into(p, x, t);
        loss += bce_with_logit(t.logit, y);
        let dlogit = (sigmoid(t.logit) - y) * scale;

        g.b_out += dlogit;
        for j in 0..p.h2 {
            g.w_out[j] += dlogit * t.a2[j];
            s.d2[j] = if t.z2[j] > 0.0 { dlogit * p.w_out[j] } else { 0.0 };
        }

        // Layer 2: dW2 = a1 ⊗ d2, d1 = W2 d2 masked by ReLU.
        for i in 0..p.h1 {
            let row = &p.w2[i * p.h2..(i + 1) * p.h2];
            let grow = &mut g.w2[i * p.h2..(i + 1) * p.h2];
            let mut acc = 0.0;
            for j in 0..p.h2 {
                grow[j] += t.a1[i] * s.d2[j];
                acc += row[j] * s.d2[j];
            }
            s.d1[i] = if t.z1[i] > 0.0 { acc } else { 0.0 };
        }
        for j in 0..p.h2 {
            g.b2[j] += s.d2[j];
        }

        // Layer 1.
        for i in 0..p.input_dim() {
            let row = &p.w1[i * p.h1..(i + 1) * p.h1];
            let grow = &mut g.w1[i * p.h1..(i + 1) * p.h1];
            let xi = t.input[i];
            let mut acc = 0.0;
            for j in 0..p.h1 {
                grow[j] += xi * s.d1[j];
                acc += row[j] * s.d1[j];
            }
            s.dinput[i] = acc;
        }
        for j in 0..p.h1 {
            g.b1[j] += s.d1[j];
        }

        // Mean pool: each referenced row receives dpooled / |codes|.
        if !x.code_indices.is_empty() {
            let inv = 1.0 / x.code_indices.len() as f64;
            for &c in &x.code_indices {
                let c = c as usize;
                let grow = &mut g.embeddings[c * p.dim..(c + 1) * p.dim];
                for (gv, dv) in grow.iter_mut().zip(&s.dinput[..p.dim]) {
                    *gv += dv * inv;
                }
            }
        }
    }
    loss * scale
}

/// Adam moments and step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(p: &ModelParams) -> Self {
        OptimizerState {
            m: p.zeros_like(),
            v: p.zeros_like(),
            step: 0,
        }
    }

    pub fn update(&mut self, p: &mut ModelParams, g: &ModelParams, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let ps = p.slices_mut();
        let gs = g.slices();
        let ms = self.m.slices_mut();
        let vs = self.v.slices_mut();
        for (((pa, ga), ma), va) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
            for i in 0..pa.len() {
                let gi = ga[i];
                ma[i] = ADAM_BETA1 * ma[i] + (1.0 - ADAM_BETA1) * gi;
                va[i] = ADAM_BETA2 * va[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let mhat = ma[i] / c1;
                let vhat = va[i] / c2;
                pa[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

fn zero(g: &mut ModelParams) {
    for s in g.slices_mut() {
        s.fill(0.0);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
}

/// Minibatch Adam with early stopping on validation AUC. Returns the
/// parameters of the best epoch.
pub fn train(
    model: &Model,
    train_x: &[FeatureVector],
    train_y: &[bool],
    val_x: &[FeatureVector],
    val_y: &[bool],
    hp: &Hyperparams,
) -> Result<(Model, TrainingLog)> {
    hp.validate()?;
    assert_eq!(train_x.len(), train_y.len());
    assert_eq!(val_x.len(), val_y.len());
    if train_x.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let n_val_pos = val_y.iter().filter(|&&y| y).count();
    if n_val_pos == 0 || n_val_pos == val_y.len() {
        return Err(Error::SingleClass {
            context: "validation split".into(),
            n_pos: n_val_pos,
            n_neg: val_y.len() - n_val_pos,
        });
    }
    for x in train_x.iter().chain(val_x) {
        check_indices(&model.params, x)?;
    }

    let mut params = model.params.clone();
    let mut opt = OptimizerState::new(&params);
    let mut grads = params.zeros_like();
    let mut trace = Trace::new(&params);
    let mut scratch = Scratch::new(&params);
    let mut best = params.clone();
    let mut log = TrainingLog {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_auc: f64::NEG_INFINITY,
    };
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut xs: Vec<&FeatureVector> = Vec::with_capacity(hp.batch_size);
    let mut ys: Vec<bool> = Vec::with_capacity(hp.batch_size);

    for epoch in 1..=hp.max_epochs {
        let mut r = rng::stream(hp.seed, "shuffle", &epoch.to_string());
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(hp.batch_size) {
            xs.clear();
            ys.clear();
            xs.extend(chunk.iter().map(|&i| &train_x[i]));
            ys.extend(chunk.iter().map(|&i| train_y[i]));
            zero(&mut grads);
            let loss = accumulate_gradients(&params, &xs, &ys, &mut grads, &mut trace, &mut scratch);
            loss_sum += loss * chunk.len() as f64;
            opt.update(&mut params, &grads, hp.learning_rate);
        }
        if !params.all_finite() {
            return Err(Error::NonFinite);
        }
        let scores: Vec<f64> = val_x
            .par_iter()
            .map(|x| {
                let mut t = Trace::new(&params);
                forward_into(&params, x, &mut t);
                sigmoid(t.logit)
            })
            .collect();
        let val_auc = auc(&ScoredSet::new(scores, val_y.to_vec())?)?;
        log.epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / train_x.len() as f64,
            val_auc,
        });
        if val_auc > log.best_val_auc {
            log.best_val_auc = val_auc;
            log.best_epoch = epoch;
            best.clone_from(&params);
            since_best = 0;
        } else {
            since_best += 1;
        }
        log::debug!("epoch {epoch}: loss {:.5} val auc {val_auc:.4}", loss_sum / train_x.len() as f64);
        if since_best >= hp.patience {
            break;
        }
    }
    Ok((
        Model {
            hp: *hp,
            vocab_fingerprint: model.vocab_fingerprint,
            params: best,
        },
        log,
    ))
}

/// Re-targets a pretrained model onto a new vocabulary. Embedding rows of
/// shared codes are copied, new codes get fresh rows, and every dense layer
/// is copied verbatim.
pub fn transfer_init(pre: &Model, pre_vocab: &Vocabulary, target: &Vocabulary, hp: &Hyperparams) -> Result<Model> {
    hp.validate()?;
    pre.check_vocabulary(pre_vocab)?;
    if !pre.hp.same_shape(hp) {
        return Err(Error::DimensionMismatch(format!(
            "pretrained (d={}, h1={}, h2={}) vs requested (d={}, h1={}, h2={})",
            pre.hp.embedding_dim, pre.hp.hidden1, pre.hp.hidden2, hp.embedding_dim, hp.hidden1, hp.hidden2
        )));
    }
    if target.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let src = &pre.params;
    let d = src.dim;
    let mut p = ModelParams::zeros(target.len(), d, src.h1, src.h2);
    for (i, code) in target.entries().iter().enumerate() {
        let row = &mut p.embeddings[i * d..(i + 1) * d];
        match pre_vocab.index_of(code) {
            Some(j) => row.copy_from_slice(src.embedding_row(j as usize)),
            None => uniform_row(&mut rng::stream(hp.seed, "embed", code), row),
        }
    }
    p.w1.clone_from(&src.w1);
    p.b1.clone_from(&src.b1);
    p.w2.clone_from(&src.w2);
    p.b2.clone_from(&src.b2);
    p.w_out.clone_from(&src.w_out);
    p.b_out = src.b_out;
    Ok(Model {
        hp: *hp,
        vocab_fingerprint: target.fingerprint(),
        params: p,
    })
}

const HEADER_LEN: usize = 8 + 4 + 8 + 4 * 3;
const HP_LEN: usize = 8 + 4 * 3 + 8;
const DIGEST_LEN: usize = 32;

pub fn encode_model(m: &Model) -> Vec<u8> {
    let p = &m.params;
    let mut buf = Vec::with_capacity(HEADER_LEN + HP_LEN + 8 + p.n_params() * 8 + DIGEST_LEN);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(p.vocab_size as u64).to_le_bytes());
    for dim in [p.dim, p.h1, p.h2] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    buf.extend_from_slice(&m.hp.learning_rate.to_le_bytes());
    for v in [m.hp.batch_size, m.hp.max_epochs, m.hp.patience] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&m.hp.seed.to_le_bytes());
    buf.extend_from_slice(&m.vocab_fingerprint.to_le_bytes());
    for s in p.slices() {
        for v in s {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let bytes = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| Error::ModelCorrupt("file is truncated".into()))?;
        self.pos = end;
        Ok(bytes.try_into().expect("length checked"))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

pub fn decode_model(buf: &[u8]) -> Result<Model> {
    let mut c = Cursor { buf, pos: 0 };
    if &c.take::<8>()? != MAGIC {
        return Err(Error::ModelCorrupt("bad magic bytes".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::ModelVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let vocab_size = c.u64()?;
    let (dim, h1, h2) = (c.u32()? as u64, c.u32()? as u64, c.u32()? as u64);
    let n_params = vocab_size
        .checked_mul(dim)
        .and_then(|e| e.checked_add((dim + DEMOGRAPHIC_DIM as u64).checked_mul(h1)?))
        .and_then(|n| n.checked_add(h1 + h1.checked_mul(h2)? + h2 + h2 + 1));
    let expected = n_params
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add((HEADER_LEN + HP_LEN + 8 + DIGEST_LEN) as u64))
        .ok_or_else(|| Error::ModelCorrupt("header dimensions overflow".into()))?;
    if buf.len() as u64 != expected {
        return Err(Error::ModelCorrupt(format!(
            "expected {expected} bytes for the declared shapes, found {}",
            buf.len()
        )));
    }
    let body = &buf[..buf.len() - DIGEST_LEN];
    if Sha256::digest(body).as_slice() != &buf[buf.len() - DIGEST_LEN..] {
        return Err(Error::ModelCorrupt("checksum mismatch".into()));
    }
    if vocab_size == 0 || dim == 0 || h1 == 0 || h2 == 0 {
        return Err(Error::ModelCorrupt("zero dimension".into()));
    }
    let hp = Hyperparams {
        embedding_dim: dim as usize,
        hidden1: h1 as usize,
        hidden2: h2 as usize,
        learning_rate: c.f64()?,
        batch_size: c.u32()? as usize,
        max_epochs: c.u32()? as usize,
        patience: c.u32()? as usize,
        seed: c.u64()?,
    };
    let vocab_fingerprint = c.u64()?;
    let mut params = ModelParams::zeros(vocab_size as usize, dim as usize, h1 as usize, h2 as usize);
    for s in params.slices_mut() {
        for v in s.iter_mut() {
            *v = c.f64()?;
        }
    }
    if !params.all_finite() {
        return Err(Error::ModelCorrupt("non-finite parameter".into()));
    }
    Ok(Model {
        hp,
        vocab_fingerprint,
        params,
    })
}

pub fn save_model(m: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, encode_model(m)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp(d: usize, h1: usize, h2: usize) -> Hyperparams {
        Hyperparams {
            embedding_dim: d,
            hidden1: h1,
            hidden2: h2,
            seed: 3,
            ..Hyperparams::default()
        }
    }

    fn fv(codes: &[u32], demo: [f64; 4]) -> FeatureVector {
        FeatureVector {
            code_indices: codes.to_vec(),
            demographics: demo,
        }
    }

    #[test]
    fn init_shapes_and_ranges() {
        let p = init_model(1, &hp(2, 1, 1)).unwrap();
        assert_eq!((p.embeddings.len(), p.w1.len(), p.w2.len(), p.w_out.len()), (2, 6, 1, 1));
        assert_eq!((p.b1.clone(), p.b2.clone(), p.b_out), (vec![0.0], vec![0.0], 0.0));
        let big = init_model(50, &hp(8, 4, 4)).unwrap();
        assert!(big.embeddings.iter().all(|v| v.abs() <= 0.05));
        assert_eq!(big, init_model(50, &hp(8, 4, 4)).unwrap());
        assert!(init_model(0, &hp(2, 1, 1)).is_err());
    }

    #[test]
    fn zero_network_is_one_half() {
        let p = ModelParams::zeros(3, 2, 2, 2);
        assert_eq!(forward(&p, &fv(&[0, 2], [0.3, 1.0, 0.0, 0.0])).unwrap(), 0.5);
    }

    #[test]
    fn empty_codes_pool_to_zero() {
        let p = init_model(4, &hp(3, 4, 3)).unwrap();
        let x = fv(&[], [0.4, 0.0, 1.0, 0.0]);
        // A zero-embedding model sees the same input when codes are absent.
        let mut zeroed = p.clone();
        zeroed.embeddings.fill(0.0);
        assert_eq!(forward(&p, &x).unwrap(), forward(&zeroed, &x).unwrap());
        assert!(matches!(forward(&p, &fv(&[4], [0.0; 4])), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn hand_computed_toy_model() {
        // V=2, d=2, h1=h2=1. E = [[1,2],[3,-1]], codes {0,1} → pooled [2, 0.5].
        // input = [2, 0.5, 0.3, 1, 0, 0]; W1 = [1, -2, 2, 1, 0, 0]ᵀ, b1 = 0.5
        // z1 = 2 - 1 + 0.6 + 1 + 0.5 = 3.1; W2 = 2, b2 = -1 → z2 = 5.2
        // w_out = -1, b_out = 4 → logit = -1.2.
        let mut p = ModelParams::zeros(2, 2, 1, 1);
        p.embeddings = vec![1.0, 2.0, 3.0, -1.0];
        p.w1 = vec![1.0, -2.0, 2.0, 1.0, 0.0, 0.0];
        p.b1 = vec![0.5];
        p.w2 = vec![2.0];
        p.b2 = vec![-1.0];
        p.w_out = vec![-1.0];
        p.b_out = 4.0;
        let got = forward(&p, &fv(&[0, 1], [0.3, 1.0, 0.0, 0.0])).unwrap();
        let expected = 1.0 / (1.0 + 1.2f64.exp());
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn bce_values() {
        assert!((bce_loss(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_loss(1.0 - 1e-12, 1.0) - 1e-12).abs() < 1e-15);
        assert!((bce_loss(0.9, 0.0) - 10f64.ln()).abs() < 1e-12);
        assert!(bce_loss(0.0, 1.0).is_finite());
        for z in [-10.0, -2.0, 0.0, 1.5, 10.0] {
            for y in [0.0, 1.0] {
                assert!((bce_with_logit(z, y) - bce_loss(sigmoid(z), y)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn empty_code_set_has_no_embedding_gradient() {
        let p = init_model(5, &hp(3, 4, 3)).unwrap();
        let x = fv(&[], [0.5, 0.0, 0.0, 1.0]);
        let (_, g) = backward(&p, &[&x], &[true]).unwrap();
        assert!(g.embeddings.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permutation_invariance() {
        let p = init_model(6, &hp(4, 3, 2)).unwrap();
        let a = forward(&p, &fv(&[0, 3, 5], [0.2, 1.0, 0.0, 0.0])).unwrap();
        // Feature vectors are sorted sets; a shuffled input is re-sorted by
        // construction, so compare against the same multiset in another order.
        let mut shuffled = fv(&[5, 0, 3], [0.2, 1.0, 0.0, 0.0]);
        shuffled.code_indices.sort_unstable();
        assert_eq!(a.to_bits(), forward(&p, &shuffled).unwrap().to_bits());
    }

    #[test]
    fn patience_zero_runs_one_epoch() {
        let h = Hyperparams {
            patience: 0,
            batch_size: 2,
            ..hp(3, 4, 3)
        };
        let xs = vec![fv(&[0], [0.3, 1.0, 0.0, 0.0]), fv(&[1], [0.3, 0.0, 1.0, 0.0])];
        let ys = vec![true, false];
        let vocab = Vocabulary::from_entries(vec!["a".into(), "b".into()], "t");
        let m = init(&vocab, &h).unwrap();
        let (_, log) = train(&m, &xs, &ys, &xs, &ys, &h).unwrap();
        assert_eq!(log.epochs.len(), 1);
        assert!(train(&m, &xs, &ys, &xs[..1], &ys[..1], &h).is_err());
    }

    #[test]
    fn separable_toy_set_reaches_full_auc() {
        let h = Hyperparams {
            batch_size: 8,
            max_epochs: 200,
            patience: 200,
            learning_rate: 1e-2,
            ..hp(4, 4, 4)
        };
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..40 {
            let y = i % 2 == 0;
            xs.push(fv(&[u32::from(y)], [0.3, 1.0, 0.0, 0.0]));
            ys.push(y);
        }
        let vocab = Vocabulary::from_entries(vec!["a".into(), "b".into()], "t");
        let m = init(&vocab, &h).unwrap();
        let (best, log) = train(&m, &xs, &ys, &xs, &ys, &h).unwrap();
        assert!(log.best_val_auc >= 0.99, "{}", log.best_val_auc);
        let (_, log2) = train(&m, &xs, &ys, &xs, &ys, &h).unwrap();
        assert_eq!(log, log2);
        assert!(best.params.all_finite());
    }

    #[test]
    fn transfer_rules() {
        let h = hp(3, 4, 2);
        let va = Vocabulary::from_entries(vec!["a".into(), "b".into(), "c".into()], "t");
        let m = init(&va, &h).unwrap();
        let same = transfer_init(&m, &va, &va, &h).unwrap();
        assert_eq!(same.params, m.params);

        let vd = Vocabulary::from_entries(vec!["x".into(), "y".into()], "t");
        let fresh = transfer_init(&m, &va, &vd, &h).unwrap();
        assert_eq!(fresh.params.w1, m.params.w1);
        assert_eq!(fresh.params.w_out, m.params.w_out);
        assert_eq!(fresh.params.vocab_size, 2);
        assert!(fresh.params.embeddings.iter().all(|v| v.abs() <= 0.05));

        let vm = Vocabulary::from_entries(vec!["b".into(), "z".into()], "t");
        let mixed = transfer_init(&m, &va, &vm, &h).unwrap();
        assert_eq!(mixed.params.embedding_row(0), m.params.embedding_row(1));

        assert!(matches!(transfer_init(&m, &va, &vm, &hp(3, 5, 2)), Err(Error::DimensionMismatch(_))));
        assert!(matches!(transfer_init(&m, &vd, &vm, &h), Err(Error::FingerprintMismatch { .. })));
    }

    #[test]
    fn save_load_round_trip_and_corruption() {
        let vocab = Vocabulary::from_entries(vec!["a".into(), "b".into(), "c".into()], "t");
        let m = init(&vocab, &hp(4, 3, 2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, m);
        let x = fv(&[0, 2], [0.5, 0.0, 1.0, 0.0]);
        assert_eq!(m.predict(&x).unwrap().to_bits(), back.predict(&x).unwrap().to_bits());
        back.check_vocabulary(&vocab).unwrap();
        let other = Vocabulary::from_entries(vec!["a".into(), "b".into(), "d".into()], "t");
        assert!(matches!(back.check_vocabulary(&other), Err(Error::FingerprintMismatch { .. })));

        let bytes = encode_model(&m);
        assert!(matches!(decode_model(&bytes[..bytes.len() - 5]), Err(Error::ModelCorrupt(_))));
        assert!(matches!(decode_model(&bytes[..10]), Err(Error::ModelCorrupt(_))));
        let mut flipped = bytes.clone();
        flipped[100] ^= 0x40;
        assert!(matches!(decode_model(&flipped), Err(Error::ModelCorrupt(_))));
        let mut versioned = bytes.clone();
        versioned[8] = 9;
        assert!(matches!(decode_model(&versioned), Err(Error::ModelVersion { found: 9, .. })));
    }
}
