//! Plain gradient descent on the combined transducer loss with hand-written
//! backpropagation. Each utterance's loss is divided by its frame count so
//! long and short utterances get comparable step sizes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{prefix_contexts, Matrix, ModelError, ToyTransducer, Utterance};
use crate::loss::{combined_loss, trivial_joiner_full, LogProbGrid, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Weight of the decoder-only scores inside the trivial joiner.
    pub lm_scale: f64,
    /// Weight of the trivial-joiner loss term.
    pub lambda_simple: f64,
    pub lr: f32,
    pub epochs: usize,
    /// Utterances per parameter update.
    pub accum: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Constrained,
            lm_scale: 0.25,
            lambda_simple: 0.5,
            lr: 0.3,
            epochs: 10,
            accum: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-frame loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Items skipped per epoch because they have more targets than frames.
    pub skipped: usize,
    pub updates: usize,
}

pub fn train(
    model: &ToyTransducer,
    items: &[Utterance],
    cfg: &TrainConfig,
) -> Result<(ToyTransducer, TrainReport), ModelError> {
    if items.is_empty() {
        return Err(ModelError::InvalidArgument("training set is empty".into()));
    }
    if cfg.accum == 0 || !(cfg.lr >= 0.0) || !(cfg.lambda_simple >= 0.0) || !(cfg.lm_scale >= 0.0) {
        return Err(ModelError::InvalidArgument(
            "accum must be >= 1; lr, lambda_simple and lm_scale must be >= 0".into(),
        ));
    }
    let v = model.vocab() as u32;
    for (i, utt) in items.iter().enumerate() {
        if utt.features.cols() != model.cfg.feat_dim {
            return Err(ModelError::Dimension(format!("item {i} has feature width {}", utt.features.cols())));
        }
        if utt.targets.iter().any(|&k| k == 0 || k >= v) {
            return Err(ModelError::InvalidArgument(format!("item {i} has a target outside 1..{v}")));
        }
    }
    let trainable = |utt: &Utterance| {
        utt.features.rows() > 0 && (cfg.variant == Variant::Regular || utt.targets.len() <= utt.features.rows())
    };
    let skipped = items.iter().filter(|u| !trainable(u)).count();
    if skipped == items.len() {
        return Err(ModelError::InvalidArgument("every item has more targets than frames".into()));
    }

    let mut model = model.clone();
    let mut report = TrainReport {
        skipped,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut grads = model.zeros_like();
        let (mut pending, mut total, mut counted) = (0usize, 0.0, 0usize);
        for &i in &order {
            let utt = &items[i];
            if !trainable(utt) {
                continue;
            }
            let loss = accumulate_gradients(&model, utt, cfg, &mut grads)
                .map_err(|_| ModelError::Diverged {
                    epoch,
                    item: i,
                    loss: f64::NAN,
                })?;
            if !loss.is_finite() {
                return Err(ModelError::Diverged { epoch, item: i, loss });
            }
            total += loss;
            counted += 1;
            pending += 1;
            if pending == cfg.accum {
                apply(&mut model, &mut grads, cfg.lr / pending as f32);
                report.updates += 1;
                pending = 0;
            }
        }
        if pending > 0 {
            apply(&mut model, &mut grads, cfg.lr / pending as f32);
            report.updates += 1;
        }
        report.epoch_losses.push(total / counted as f64);
    }
    Ok((model, report))
}

fn apply(model: &mut ToyTransducer, grads: &mut ToyTransducer, step: f32) {
    for ((_, p), (_, g)) in model.params_mut().into_iter().zip(grads.params_mut()) {
        for (w, d) in p.iter_mut().zip(g.iter_mut()) {
            *w -= step * *d;
            *d = 0.0;
        }
    }
}

fn tanh_inplace(m: &mut Matrix) {
    m.map_inplace(super::tanh);
}

/// `d` scaled elementwise by `1 - y^2`, the tanh derivative at output `y`.
fn tanh_backward(d: &mut Matrix, y: &Matrix) {
    for (g, v) in d.data.iter_mut().zip(&y.data) {
        *g *= 1.0 - v * v;
    }
}

/// Gradient of a log-softmax output given the gradient `g` at the output:
/// `g - softmax * sum(g)`.
fn log_softmax_backward(g: &mut [f64], logp: &[f64]) {
    let s: f64 = g.iter().sum();
    for (gi, lp) in g.iter_mut().zip(logp) {
        *gi -= lp.exp() * s;
    }
}

fn log_softmax_rows(m: &Matrix) -> Vec<f64> {
    let mut out: Vec<f64> = m.data.iter().map(|&x| x as f64).collect();
    for row in out.chunks_mut(m.cols) {
        crate::logspace::log_softmax_f64(row);
    }
    out
}

/// Adds this utterance's parameter gradients to `grads` and returns its
/// per-frame loss.
fn accumulate_gradients(
    model: &ToyTransducer,
    utt: &Utterance,
    cfg: &TrainConfig,
    grads: &mut ToyTransducer,
) -> Result<f64, ModelError> {
    let vocab = model.vocab();
    let targets = &utt.targets;
    let (frames, u_count) = (utt.features.rows(), targets.len());
    let cols = u_count + 1;
    let norm = 1.0 / frames as f64;

    // Forward.
    let mut h1 = model.enc_in.forward(&utt.features);
    tanh_inplace(&mut h1);
    let mut enc = model.enc_out.forward(&h1);
    tanh_inplace(&mut enc);
    let ep = model.joiner_enc.forward(&enc);
    let ecat = model.context_embeddings(&prefix_contexts(targets));
    let mut dec = model.combiner.forward(&ecat);
    tanh_inplace(&mut dec);
    let dp = model.joiner_dec.forward(&dec);

    let jd = model.cfg.joiner_dim;
    let mut hidden = Matrix::zeros(frames * cols, jd);
    for t in 0..frames {
        for u in 0..cols {
            let row = hidden.row_mut(t * cols + u);
            for ((h, a), b) in row.iter_mut().zip(ep.row(t)).zip(dp.row(u)) {
                *h = super::tanh(a + b);
            }
        }
    }
    let mut logp = model.joiner_out.forward(&hidden);
    for r in 0..logp.rows {
        crate::logspace::log_softmax_f32(logp.row_mut(r));
    }
    let mut blank = Vec::with_capacity(frames * cols);
    let mut symbol = Vec::with_capacity(frames * u_count);
    for t in 0..frames {
        for u in 0..cols {
            let row = logp.row(t * cols + u);
            blank.push(row[0] as f64);
            if u < u_count {
                symbol.push(row[targets[u] as usize] as f64);
            }
        }
    }
    let full = LogProbGrid::new(frames, u_count, blank, symbol)?;

    let am_lp = log_softmax_rows(&model.simple_am.forward(&enc));
    let lm_lp = log_softmax_rows(&model.simple_lm.forward(&dec));
    let (trivial, trivial_lp) = trivial_joiner_full(&am_lp, &lm_lp, vocab, targets, cfg.lm_scale)?;
    let loss = combined_loss(&full, &trivial, cfg.variant, cfg.lambda_simple)?;

    // Joiner.
    let mut d_logits = Matrix::zeros(frames * cols, vocab);
    let mut g = vec![0.0f64; vocab];
    for t in 0..frames {
        for u in 0..cols {
            let r = t * cols + u;
            g.iter_mut().for_each(|x| *x = 0.0);
            g[0] = loss.d_full.blank(t, u) * norm;
            if u < u_count {
                g[targets[u] as usize] += loss.d_full.symbol(t, u) * norm;
            }
            let lp: Vec<f64> = logp.row(r).iter().map(|&x| x as f64).collect();
            log_softmax_backward(&mut g, &lp);
            for (d, x) in d_logits.row_mut(r).iter_mut().zip(&g) {
                *d = *x as f32;
            }
        }
    }
    grads.joiner_out.accumulate(&hidden, &d_logits);
    let mut d_hidden = model.joiner_out.backward_input(&d_logits);
    tanh_backward(&mut d_hidden, &hidden);
    let mut d_ep = Matrix::zeros(frames, jd);
    let mut d_dp = Matrix::zeros(cols, jd);
    for t in 0..frames {
        for u in 0..cols {
            let d = d_hidden.row(t * cols + u);
            for (acc, x) in d_ep.row_mut(t).iter_mut().zip(d) {
                *acc += x;
            }
            for (acc, x) in d_dp.row_mut(u).iter_mut().zip(d) {
                *acc += x;
            }
        }
    }
    grads.joiner_enc.accumulate(&enc, &d_ep);
    let mut d_enc = model.joiner_enc.backward_input(&d_ep);
    grads.joiner_dec.accumulate(&dec, &d_dp);
    let mut d_dec = model.joiner_dec.backward_input(&d_dp);

    // Trivial joiner.
    let scale = 1.0 + cfg.lm_scale;
    let mut d_am = vec![0.0f64; frames * vocab];
    let mut d_lm = vec![0.0f64; cols * vocab];
    for t in 0..frames {
        for u in 0..cols {
            g.iter_mut().for_each(|x| *x = 0.0);
            g[0] = loss.d_trivial.blank(t, u) * norm;
            if u < u_count {
                g[targets[u] as usize] += loss.d_trivial.symbol(t, u) * norm;
            }
            log_softmax_backward(&mut g, &trivial_lp[(t * cols + u) * vocab..][..vocab]);
            for k in 0..vocab {
                d_am[t * vocab + k] += g[k];
                d_lm[u * vocab + k] += scale * g[k];
            }
        }
    }
    for (d, lp) in d_am.chunks_mut(vocab).zip(am_lp.chunks(vocab)) {
        log_softmax_backward(d, lp);
    }
    for (d, lp) in d_lm.chunks_mut(vocab).zip(lm_lp.chunks(vocab)) {
        log_softmax_backward(d, lp);
    }
    let d_am = Matrix::from_vec(frames, vocab, d_am.iter().map(|&x| x as f32).collect())?;
    let d_lm = Matrix::from_vec(cols, vocab, d_lm.iter().map(|&x| x as f32).collect())?;
    grads.simple_am.accumulate(&enc, &d_am);
    for (acc, x) in d_enc.data.iter_mut().zip(&model.simple_am.backward_input(&d_am).data) {
        *acc += x;
    }
    grads.simple_lm.accumulate(&dec, &d_lm);
    for (acc, x) in d_dec.data.iter_mut().zip(&model.simple_lm.backward_input(&d_lm).data) {
        *acc += x;
    }

    // Decoder.
    tanh_backward(&mut d_dec, &dec);
    grads.combiner.accumulate(&ecat, &d_dec);
    let d_ecat = model.combiner.backward_input(&d_dec);
    let emb = model.cfg.emb_dim;
    for (u, ctx) in prefix_contexts(targets).iter().enumerate() {
        let row = d_ecat.row(u);
        for (token, part) in [(ctx.a, &row[..emb]), (ctx.b, &row[emb..])] {
            let dst = &mut grads.embedding[token as usize * emb..(token as usize + 1) * emb];
            for (acc, x) in dst.iter_mut().zip(part) {
                *acc += x;
            }
        }
    }

    // Encoder.
    tanh_backward(&mut d_enc, &enc);
    grads.enc_out.accumulate(&h1, &d_enc);
    let mut d_h1 = model.enc_out.backward_input(&d_enc);
    tanh_backward(&mut d_h1, &h1);
    grads.enc_in.accumulate(&utt.features, &d_h1);

    Ok(loss.value * norm)
}
