//! Desk-scale stateless transducer.
//!
//! The encoder maps each feature frame independently through two tanh
//! layers. The decoder sees only the last two emitted tokens: their
//! embeddings are concatenated and passed through one tanh layer. The joiner
//! adds projected encoder and decoder outputs, applies tanh and projects to
//! vocabulary log-probabilities. Model math is `f32`.

mod checkpoint;
mod data;
mod table;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::LogProbGrid;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use data::{
    load_dataset, save_dataset, synth_dataset, token_accuracy, SynthConfig, SyntheticDataset, Utterance,
};
pub use table::TableModel;
pub use train::{train, TrainConfig, TrainReport};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    /// `epoch` counts from 1; `item` indexes the training set.
    #[error("training diverged at epoch {epoch}, item {item}: loss {loss}")]
    Diverged { epoch: usize, item: usize, loss: f64 },
    #[error(transparent)]
    Loss(#[from] crate::loss::LossError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, ModelError> {
        if data.len() != rows * cols {
            return Err(ModelError::Dimension(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// New matrix made of the given rows, in order (rows may repeat).
    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    /// Rows of several matrices with equal column counts, stacked.
    pub fn vstack<'a>(cols: usize, parts: impl IntoIterator<Item = &'a [f32]>) -> Matrix {
        let data: Vec<f32> = parts.into_iter().flatten().copied().collect();
        Matrix {
            rows: data.len() / cols.max(1),
            cols,
            data,
        }
    }

    fn map_inplace(&mut self, f: impl Fn(f32) -> f32) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }
}

/// Rational minimax approximation of `tanh` (odd degree-13 numerator over
/// even degree-6 denominator), accurate to a few ulp. It has no branches or
/// calls, so loops over it vectorize.
#[inline]
pub fn tanh(x: f32) -> f32 {
    const CLAMP: f32 = 7.905_311;
    const A: [f32; 7] = [
        4.893_524_6e-3,
        6.372_619_3e-4,
        1.485_722_4e-5,
        5.122_297e-8,
        -8.604_671_5e-11,
        2.000_187_9e-13,
        -2.760_768_5e-16,
    ];
    const B: [f32; 4] = [4.893_525_2e-3, 2.268_434_6e-3, 1.185_347_1e-4, 1.198_258_4e-6];
    let x = x.clamp(-CLAMP, CLAMP);
    let x2 = x * x;
    let mut p = A[6];
    for &a in A[..6].iter().rev() {
        p = p * x2 + a;
    }
    let q = ((B[3] * x2 + B[2]) * x2 + B[1]) * x2 + B[0];
    x * p / q
}

/// Affine layer `y = x W + b` with `W` stored input-major (`in x out`).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> Self {
        let s = 1.0 / (in_dim as f32).sqrt();
        Linear {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim).map(|_| rng.random_range(-s..s)).collect(),
            bias: (0..out_dim).map(|_| rng.random_range(-s..s)).collect(),
        }
    }

    fn zeros_like(&self) -> Self {
        Linear {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    /// Each output element is `b[j]` followed by `x[k] * W[k][j]` added in
    /// increasing `k`, whatever the number of rows, so a row's result never
    /// depends on the rows batched with it.
    pub fn forward(&self, x: &Matrix) -> Matrix {
        assert_eq!(x.cols, self.in_dim, "linear input width");
        let (n_in, n_out) = (self.in_dim, self.out_dim);
        let mut out = Matrix::zeros(x.rows, n_out);
        let mut blocks = out.data.chunks_exact_mut(8 * n_out);
        let mut inputs = x.data.chunks_exact(8 * n_in);
        for (o, xs) in (&mut blocks).zip(&mut inputs) {
            affine_block::<8>(xs, &self.weight, &self.bias, o);
        }
        for (o, xs) in blocks
            .into_remainder()
            .chunks_exact_mut(n_out)
            .zip(inputs.remainder().chunks_exact(n_in))
        {
            affine_block::<1>(xs, &self.weight, &self.bias, o);
        }
        out
    }

    /// Adds `x^T dy` to this layer's weight and the column sums of `dy` to its bias.
    fn accumulate(&mut self, x: &Matrix, dy: &Matrix) {
        for i in 0..x.rows {
            let xi = x.row(i);
            let di = dy.row(i);
            for k in 0..self.in_dim {
                let xk = xi[k];
                if xk == 0.0 {
                    continue;
                }
                let w = &mut self.weight[k * self.out_dim..(k + 1) * self.out_dim];
                for j in 0..self.out_dim {
                    w[j] += xk * di[j];
                }
            }
            for j in 0..self.out_dim {
                self.bias[j] += di[j];
            }
        }
    }

    /// `dy W^T`.
    fn backward_input(&self, dy: &Matrix) -> Matrix {
        let mut dx = Matrix::zeros(dy.rows, self.in_dim);
        for i in 0..dy.rows {
            let di = dy.row(i);
            let out = dx.row_mut(i);
            for k in 0..self.in_dim {
                let w = &self.weight[k * self.out_dim..(k + 1) * self.out_dim];
                out[k] = w.iter().zip(di).map(|(a, b)| a * b).sum();
            }
        }
        dx
    }
}

const LANES: usize = 8;

/// `R` rows of `x W + b`, keeping an `R x LANES` tile of outputs in registers
/// while walking the shared dimension.
#[inline(always)]
fn affine_block<const R: usize>(x: &[f32], weight: &[f32], bias: &[f32], out: &mut [f32]) {
    let n_out = bias.len();
    let n_in = x.len() / R;
    let mut j = 0;
    while j + LANES <= n_out {
        let mut acc = [[0f32; LANES]; R];
        for a in acc.iter_mut() {
            a.copy_from_slice(&bias[j..j + LANES]);
        }
        for k in 0..n_in {
            let w: &[f32; LANES] = weight[k * n_out + j..][..LANES].try_into().expect("lane width");
            for (r, a) in acc.iter_mut().enumerate() {
                let xv = x[r * n_in + k];
                for l in 0..LANES {
                    a[l] += xv * w[l];
                }
            }
        }
        for (r, a) in acc.iter().enumerate() {
            out[r * n_out + j..][..LANES].copy_from_slice(a);
        }
        j += LANES;
    }
    for jj in j..n_out {
        let mut acc = [bias[jj]; R];
        for k in 0..n_in {
            let w = weight[k * n_out + jj];
            for (r, a) in acc.iter_mut().enumerate() {
                *a += x[r * n_in + k] * w;
            }
        }
        for (r, a) in acc.iter().enumerate() {
            out[r * n_out + jj] = *a;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Output units, blank (id 0) included.
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub enc_dim: usize,
    pub emb_dim: usize,
    pub joiner_dim: usize,
    pub context_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 8,
            feat_dim: 16,
            enc_dim: 32,
            emb_dim: 16,
            joiner_dim: 32,
            context_size: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size < 2 {
            return Err(ModelError::InvalidArgument(
                "vocab_size must be at least 2 (blank plus one token)".into(),
            ));
        }
        if self.context_size != 2 {
            return Err(ModelError::InvalidArgument("context_size must be 2".into()));
        }
        if [self.feat_dim, self.enc_dim, self.emb_dim, self.joiner_dim].contains(&0) {
            return Err(ModelError::InvalidArgument("all dimensions must be >= 1".into()));
        }
        if (self.vocab_size as u64).pow(2) > u32::MAX as u64 {
            return Err(ModelError::InvalidArgument("vocab_size too large to pack contexts".into()));
        }
        Ok(())
    }
}

/// The last two emitted tokens, blank-padded at the start of an utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Context {
    pub a: u32,
    pub b: u32,
}

impl Context {
    pub const INITIAL: Context = Context { a: 0, b: 0 };

    pub fn new(a: u32, b: u32) -> Self {
        Context { a, b }
    }

    /// Context after emitting `token`.
    pub fn push(self, token: u32) -> Self {
        Context { a: self.b, b: token }
    }

    /// Context after the whole token sequence.
    pub fn of_history(tokens: &[u32]) -> Self {
        tokens.iter().fold(Context::INITIAL, |c, &t| c.push(t))
    }

    pub fn pack(self, vocab: usize) -> u32 {
        self.a * vocab as u32 + self.b
    }

    pub fn unpack(packed: u32, vocab: usize) -> Result<Self, ModelError> {
        let v = vocab as u32;
        if packed as u64 >= (vocab as u64).pow(2) {
            return Err(ModelError::InvalidArgument(format!(
                "packed context {packed} out of range for vocab {vocab}"
            )));
        }
        Ok(Context {
            a: packed / v,
            b: packed % v,
        })
    }
}

/// The three network calls a decoder makes.
///
/// `encode` and `decode` already include the joiner's input projections, so
/// `join` only adds, applies the non-linearity and normalizes.
pub trait TransducerModel {
    fn vocab_size(&self) -> usize;
    /// One row per frame.
    fn encode(&self, features: &Matrix) -> Matrix;
    /// One row per context.
    fn decode(&self, contexts: &[Context]) -> Matrix;
    /// Log-probabilities for each paired row of `enc` and `dec`.
    fn join(&self, enc: &Matrix, dec: &Matrix) -> Matrix;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTransducer {
    pub cfg: ModelConfig,
    pub enc_in: Linear,
    pub enc_out: Linear,
    /// `vocab_size x emb_dim`
    pub embedding: Vec<f32>,
    pub combiner: Linear,
    pub joiner_enc: Linear,
    pub joiner_dec: Linear,
    pub joiner_out: Linear,
    /// Encoder-only vocabulary projection used by the trivial joiner.
    pub simple_am: Linear,
    /// Decoder-only vocabulary projection used by the trivial joiner.
    pub simple_lm: Linear,
}

pub fn init_model(cfg: &ModelConfig) -> Result<ToyTransducer, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ModelConfig {
        vocab_size: v,
        feat_dim,
        enc_dim,
        emb_dim,
        joiner_dim,
        ..
    } = *cfg;
    Ok(ToyTransducer {
        cfg: *cfg,
        enc_in: Linear::init(&mut rng, feat_dim, enc_dim),
        enc_out: Linear::init(&mut rng, enc_dim, enc_dim),
        embedding: (0..v * emb_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        combiner: Linear::init(&mut rng, 2 * emb_dim, emb_dim),
        joiner_enc: Linear::init(&mut rng, enc_dim, joiner_dim),
        joiner_dec: Linear::init(&mut rng, emb_dim, joiner_dim),
        joiner_out: Linear::init(&mut rng, joiner_dim, v),
        simple_am: Linear::init(&mut rng, enc_dim, v),
        simple_lm: Linear::init(&mut rng, emb_dim, v),
    })
}

impl ToyTransducer {
    pub fn vocab(&self) -> usize {
        self.cfg.vocab_size
    }

    /// Named parameter arrays in a fixed order.
    pub fn params(&self) -> Vec<(&'static str, &[f32])> {
        vec![
            ("encoder.in.weight", &self.enc_in.weight),
            ("encoder.in.bias", &self.enc_in.bias),
            ("encoder.out.weight", &self.enc_out.weight),
            ("encoder.out.bias", &self.enc_out.bias),
            ("decoder.embedding", &self.embedding),
            ("decoder.combiner.weight", &self.combiner.weight),
            ("decoder.combiner.bias", &self.combiner.bias),
            ("joiner.enc.weight", &self.joiner_enc.weight),
            ("joiner.enc.bias", &self.joiner_enc.bias),
            ("joiner.dec.weight", &self.joiner_dec.weight),
            ("joiner.dec.bias", &self.joiner_dec.bias),
            ("joiner.out.weight", &self.joiner_out.weight),
            ("joiner.out.bias", &self.joiner_out.bias),
            ("simple.am.weight", &self.simple_am.weight),
            ("simple.am.bias", &self.simple_am.bias),
            ("simple.lm.weight", &self.simple_lm.weight),
            ("simple.lm.bias", &self.simple_lm.bias),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Vec<f32>)> {
        vec![
            ("encoder.in.weight", &mut self.enc_in.weight),
            ("encoder.in.bias", &mut self.enc_in.bias),
            ("encoder.out.weight", &mut self.enc_out.weight),
            ("encoder.out.bias", &mut self.enc_out.bias),
            ("decoder.embedding", &mut self.embedding),
            ("decoder.combiner.weight", &mut self.combiner.weight),
            ("decoder.combiner.bias", &mut self.combiner.bias),
            ("joiner.enc.weight", &mut self.joiner_enc.weight),
            ("joiner.enc.bias", &mut self.joiner_enc.bias),
            ("joiner.dec.weight", &mut self.joiner_dec.weight),
            ("joiner.dec.bias", &mut self.joiner_dec.bias),
            ("joiner.out.weight", &mut self.joiner_out.weight),
            ("joiner.out.bias", &mut self.joiner_out.bias),
            ("simple.am.weight", &mut self.simple_am.weight),
            ("simple.am.bias", &mut self.simple_am.bias),
            ("simple.lm.weight", &mut self.simple_lm.weight),
            ("simple.lm.bias", &mut self.simple_lm.bias),
        ]
    }

    fn zeros_like(&self) -> Self {
        ToyTransducer {
            cfg: self.cfg,
            enc_in: self.enc_in.zeros_like(),
            enc_out: self.enc_out.zeros_like(),
            embedding: vec![0.0; self.embedding.len()],
            combiner: self.combiner.zeros_like(),
            joiner_enc: self.joiner_enc.zeros_like(),
            joiner_dec: self.joiner_dec.zeros_like(),
            joiner_out: self.joiner_out.zeros_like(),
            simple_am: self.simple_am.zeros_like(),
            simple_lm: self.simple_lm.zeros_like(),
        }
    }

    /// `T x enc_dim` encoder output, frame by frame.
    pub fn encoder_forward(&self, features: &Matrix) -> Result<Matrix, ModelError> {
        if features.cols() != self.cfg.feat_dim {
            return Err(ModelError::Dimension(format!(
                "features have {} columns, model expects {}",
                features.cols(),
                self.cfg.feat_dim
            )));
        }
        let mut h = self.enc_in.forward(features);
        h.map_inplace(tanh);
        let mut out = self.enc_out.forward(&h);
        out.map_inplace(tanh);
        Ok(out)
    }

    fn context_embeddings(&self, contexts: &[Context]) -> Matrix {
        let d = self.cfg.emb_dim;
        let mut cat = Matrix::zeros(contexts.len(), 2 * d);
        for (i, c) in contexts.iter().enumerate() {
            let row = cat.row_mut(i);
            row[..d].copy_from_slice(&self.embedding[c.a as usize * d..(c.a as usize + 1) * d]);
            row[d..].copy_from_slice(&self.embedding[c.b as usize * d..(c.b as usize + 1) * d]);
        }
        cat
    }

    /// `|contexts| x emb_dim`; row `i` depends on `contexts[i]` alone.
    pub fn decoder_forward(&self, contexts: &[Context]) -> Result<Matrix, ModelError> {
        let v = self.vocab() as u32;
        if let Some(c) = contexts.iter().find(|c| c.a >= v || c.b >= v) {
            return Err(ModelError::InvalidArgument(format!(
                "context ({}, {}) has a token outside the vocabulary",
                c.a, c.b
            )));
        }
        let mut out = self.combiner.forward(&self.context_embeddings(contexts));
        out.map_inplace(tanh);
        Ok(out)
    }

    /// Vocabulary log-probabilities for one encoder row and one decoder row.
    pub fn joiner_forward(&self, enc_row: &[f32], dec_row: &[f32]) -> Result<Vec<f32>, ModelError> {
        if enc_row.len() != self.cfg.enc_dim || dec_row.len() != self.cfg.emb_dim {
            return Err(ModelError::Dimension(format!(
                "joiner inputs {}/{} do not match {}/{}",
                enc_row.len(),
                dec_row.len(),
                self.cfg.enc_dim,
                self.cfg.emb_dim
            )));
        }
        let e = self.joiner_enc.forward(&Matrix::from_vec(1, enc_row.len(), enc_row.to_vec())?);
        let d = self.joiner_dec.forward(&Matrix::from_vec(1, dec_row.len(), dec_row.to_vec())?);
        Ok(self.join(&e, &d).data)
    }

    /// Joiner log-probs over every `(frame, target prefix)` pair, reduced to
    /// the blank and next-target columns.
    pub fn full_grid(&self, features: &Matrix, targets: &[u32]) -> Result<LogProbGrid, ModelError> {
        let v = self.vocab() as u32;
        if let Some(&bad) = targets.iter().find(|&&k| k == 0 || k >= v) {
            return Err(ModelError::InvalidArgument(format!("target token {bad} is blank or out of range")));
        }
        let enc = self.encode(features);
        let dec = self.decode(&prefix_contexts(targets));
        let (frames, u_count) = (enc.rows(), targets.len());
        let mut blank = Vec::with_capacity(frames * (u_count + 1));
        let mut symbol = Vec::with_capacity(frames * u_count);
        for t in 0..frames {
            let enc_rows = enc.select_rows(&vec![t; u_count + 1]);
            let lp = self.join(&enc_rows, &dec);
            for u in 0..=u_count {
                let row = lp.row(u);
                blank.push(row[0] as f64);
                if u < u_count {
                    symbol.push(row[targets[u] as usize] as f64);
                }
            }
        }
        Ok(LogProbGrid::new(frames, u_count, blank, symbol)?)
    }
}

/// Decoder contexts after each target prefix `0..=U`.
pub fn prefix_contexts(targets: &[u32]) -> Vec<Context> {
    let mut out = Vec::with_capacity(targets.len() + 1);
    let mut ctx = Context::INITIAL;
    out.push(ctx);
    for &t in targets {
        ctx = ctx.push(t);
        out.push(ctx);
    }
    out
}

impl TransducerModel for ToyTransducer {
    fn vocab_size(&self) -> usize {
        self.vocab()
    }

    fn encode(&self, features: &Matrix) -> Matrix {
        let enc = self.encoder_forward(features).expect("feature width matches the model");
        self.joiner_enc.forward(&enc)
    }

    fn decode(&self, contexts: &[Context]) -> Matrix {
        let dec = self.decoder_forward(contexts).expect("contexts within the vocabulary");
        self.joiner_dec.forward(&dec)
    }

    fn join(&self, enc: &Matrix, dec: &Matrix) -> Matrix {
        assert_eq!((enc.rows(), enc.cols()), (dec.rows(), dec.cols()), "joiner operands");
        let mut hidden = enc.clone();
        for (h, d) in hidden.data.iter_mut().zip(&dec.data) {
            *h = tanh(*h + d);
        }
        let mut out = self.joiner_out.forward(&hidden);
        for i in 0..out.rows() {
            crate::logspace::log_softmax_f32(out.row_mut(i));
        }
        out
    }
}
