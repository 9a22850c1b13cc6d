//! Frame-by-frame decoding with a cap on symbols emitted per frame.
//!
//! After `S` emissions on one frame the blank probability is taken to be 1,
//! so the frame advances for free. With `S = 1` every emission consumes a
//! frame, which is what lets [`greedy_search_batch`] advance all streams in
//! lockstep with one joiner call per frame.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logspace::log_add;
use crate::model::{Context, Matrix, TransducerModel};

/// Symbols per frame used when no limit is requested.
pub const DEFAULT_SYMBOL_CAP: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaxSymbols {
    Limit(usize),
    /// No limit, apart from a safety cap that stops runaway emission loops.
    Unlimited { cap: usize },
}

impl MaxSymbols {
    pub const UNLIMITED: MaxSymbols = MaxSymbols::Unlimited { cap: DEFAULT_SYMBOL_CAP };

    fn per_frame(self) -> Result<usize, SearchError> {
        let n = match self {
            MaxSymbols::Limit(n) | MaxSymbols::Unlimited { cap: n } => n,
        };
        if n == 0 {
            return Err(SearchError::InvalidArgument("max symbols per frame must be >= 1".into()));
        }
        Ok(n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeOp {
    /// Keep the best alignment's score.
    Max,
    /// Sum the probabilities of all alignments.
    LogAdd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchParams {
    pub max_symbols: MaxSymbols,
    pub beam_size: usize,
    pub merge_op: MergeOp,
    pub length_norm: bool,
}

impl Default for SearchParams {
    fn default() -> Self {
        SearchParams {
            max_symbols: MaxSymbols::UNLIMITED,
            beam_size: 4,
            merge_op: MergeOp::Max,
            length_norm: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Every token emitted so far.
    pub ys: Vec<u32>,
    pub score: f64,
    /// Symbols emitted on the current frame.
    pub n: usize,
}

/// Smallest index of the largest value.
fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Greedy decoding; also returns how many frames hit the safety cap when the
/// limit is [`MaxSymbols::Unlimited`].
pub fn greedy_search_stats<M: TransducerModel + ?Sized>(
    model: &M,
    features: &Matrix,
    max_symbols: MaxSymbols,
) -> Result<(Vec<u32>, usize), SearchError> {
    let limit = max_symbols.per_frame()?;
    let enc = model.encode(features);
    let mut ctx = Context::INITIAL;
    let mut dec = model.decode(&[ctx]);
    let mut tokens = Vec::new();
    let mut cap_hits = 0;
    for t in 0..enc.rows() {
        let frame = enc.select_rows(&[t]);
        for n in 1..=limit {
            let lp = model.join(&frame, &dec);
            let k = argmax(lp.row(0));
            if k == 0 {
                break;
            }
            tokens.push(k as u32);
            ctx = ctx.push(k as u32);
            dec = model.decode(&[ctx]);
            if n == limit && matches!(max_symbols, MaxSymbols::Unlimited { .. }) {
                cap_hits += 1;
            }
        }
    }
    Ok((tokens, cap_hits))
}

pub fn greedy_search<M: TransducerModel + ?Sized>(
    model: &M,
    features: &Matrix,
    max_symbols: MaxSymbols,
) -> Result<Vec<u32>, SearchError> {
    greedy_search_stats(model, features, max_symbols).map(|(tokens, _)| tokens)
}

/// Greedy decoding with one symbol per frame for a whole batch. Each frame
/// runs the encoder and the joiner once over every stream that still has
/// frames left, and the decoder once over the streams that just emitted.
pub fn greedy_search_batch<M: TransducerModel + ?Sized>(model: &M, batch: &[&Matrix]) -> Vec<Vec<u32>> {
    if batch.is_empty() {
        return Vec::new();
    }
    let cols = batch[0].cols();
    // Longest streams first, so the live streams at frame t are a prefix.
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(batch[i].rows()));
    let max_len = batch[order[0]].rows();

    let mut contexts = vec![Context::INITIAL; batch.len()];
    let mut dec = model.decode(&contexts);
    let mut tokens = vec![Vec::new(); batch.len()];
    let mut live = order.len();
    let mut frame = Vec::with_capacity(batch.len() * cols);
    let mut emitted = Vec::with_capacity(batch.len());
    for t in 0..max_len {
        while live > 0 && batch[order[live - 1]].rows() <= t {
            live -= 1;
        }
        let streams = &order[..live];
        frame.clear();
        for &i in streams {
            frame.extend_from_slice(batch[i].row(t));
        }
        let enc_t = model.encode(&Matrix::from_vec(live, cols, std::mem::take(&mut frame)).expect("row width"));
        let lp = model.join(&enc_t, &dec.select_rows(streams));
        emitted.clear();
        for (r, &i) in streams.iter().enumerate() {
            let k = argmax(lp.row(r));
            if k != 0 {
                tokens[i].push(k as u32);
                contexts[i] = contexts[i].push(k as u32);
                emitted.push(i);
            }
        }
        if !emitted.is_empty() {
            let ctxs: Vec<Context> = emitted.iter().map(|&i| contexts[i]).collect();
            let fresh = model.decode(&ctxs);
            for (r, &i) in emitted.iter().enumerate() {
                dec.row_mut(i).copy_from_slice(fresh.row(r));
            }
        }
        frame = Vec::with_capacity(batch.len() * cols);
    }
    tokens
}

/// Best first: higher score, then shorter, then lexicographically smaller.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.ys.len().cmp(&b.ys.len()))
        .then_with(|| a.ys.cmp(&b.ys))
}

/// Hypotheses keyed by token sequence; duplicates merge on insertion.
struct Pool {
    merge: MergeOp,
    index: HashMap<Vec<u32>, usize>,
    hyps: Vec<Hypothesis>,
}

impl Pool {
    fn new(merge: MergeOp) -> Self {
        Pool {
            merge,
            index: HashMap::new(),
            hyps: Vec::new(),
        }
    }

    fn insert(&mut self, ys: Vec<u32>, score: f64, n: usize) {
        match self.index.get(&ys) {
            Some(&i) => {
                let h = &mut self.hyps[i];
                h.score = match self.merge {
                    MergeOp::Max => h.score.max(score),
                    MergeOp::LogAdd => log_add(h.score, score),
                };
            }
            None => {
                self.index.insert(ys.clone(), self.hyps.len());
                self.hyps.push(Hypothesis { ys, score, n });
            }
        }
    }

    /// Score of the `k`-th best entry, `-inf` if there are fewer.
    fn kth_score(&self, k: usize) -> f64 {
        if self.hyps.len() < k {
            return f64::NEG_INFINITY;
        }
        let mut scores: Vec<f64> = self.hyps.iter().map(|h| h.score).collect();
        scores.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
        scores[k - 1]
    }

    fn top(mut self, k: usize) -> Vec<Hypothesis> {
        self.hyps.sort_by(rank);
        self.hyps.truncate(k);
        self.hyps
    }
}

/// Frame-synchronous beam search over token histories.
///
/// Within a frame, hypotheses are expanded one symbol at a time. Blank moves a
/// hypothesis to the next frame's pool; tokens keep it on this frame until
/// the per-frame cap forces a free blank. An expansion is dropped once it
/// scores below the `beam_size`-th best entry already waiting for the next
/// frame, since further symbols can only lower its score.
pub fn beam_search<M: TransducerModel + ?Sized>(
    model: &M,
    features: &Matrix,
    params: &SearchParams,
) -> Result<Vec<u32>, SearchError> {
    let cap = params.max_symbols.per_frame()?;
    let beam = params.beam_size;
    if beam == 0 {
        return Err(SearchError::InvalidArgument("beam_size must be >= 1".into()));
    }
    let vocab = model.vocab_size();
    let enc = model.encode(features);
    let mut hyps = vec![Hypothesis {
        ys: Vec::new(),
        score: 0.0,
        n: 0,
    }];
    for t in 0..enc.rows() {
        let mut next = Pool::new(params.merge_op);
        let mut cur = std::mem::take(&mut hyps);
        for n in 0..=cap {
            if cur.is_empty() {
                break;
            }
            if n == cap {
                for h in cur.drain(..) {
                    next.insert(h.ys, h.score, 0);
                }
                break;
            }
            let ctxs: Vec<Context> = cur.iter().map(|h| Context::of_history(&h.ys)).collect();
            let lp = model.join(&enc.select_rows(&vec![t; cur.len()]), &model.decode(&ctxs));
            let mut expanded = Pool::new(params.merge_op);
            for (i, h) in cur.iter().enumerate() {
                let row = lp.row(i);
                next.insert(h.ys.clone(), h.score + row[0] as f64, 0);
                for (c, &l) in row.iter().enumerate().take(vocab).skip(1) {
                    let mut ys = h.ys.clone();
                    ys.push(c as u32);
                    expanded.insert(ys, h.score + l as f64, n + 1);
                }
            }
            let floor = next.kth_score(beam);
            cur = expanded.top(beam);
            cur.retain(|h| h.score >= floor);
        }
        hyps = next.top(beam);
    }
    let key = |h: &Hypothesis| {
        if params.length_norm {
            h.score / h.ys.len().max(1) as f64
        } else {
            h.score
        }
    };
    let best = hyps
        .into_iter()
        .min_by(|a, b| {
            key(b)
                .total_cmp(&key(a))
                .then(a.ys.len().cmp(&b.ys.len()))
                .then_with(|| a.ys.cmp(&b.ys))
        })
        .expect("beam is never empty");
    Ok(best.ys)
}

/// Log-probability rows for every context reachable at each frame under
/// one-symbol-per-frame decoding. `rows[t]` maps context to its joiner row.
fn s1_tables<M: TransducerModel + ?Sized>(model: &M, features: &Matrix) -> Vec<Vec<(Context, Vec<f32>)>> {
    let vocab = model.vocab_size() as u32;
    let enc = model.encode(features);
    let mut reachable = vec![Context::INITIAL];
    let mut out = Vec::with_capacity(enc.rows());
    for t in 0..enc.rows() {
        let lp = model.join(&enc.select_rows(&vec![t; reachable.len()]), &model.decode(&reachable));
        out.push(reachable.iter().enumerate().map(|(i, &c)| (c, lp.row(i).to_vec())).collect());
        let mut next: Vec<Context> = reachable.clone();
        for c in &reachable {
            next.extend((1..vocab).map(|k| c.push(k)));
        }
        next.sort();
        next.dedup();
        reachable = next;
    }
    out
}

/// Exact best path of the one-symbol-per-frame search space by dynamic
/// programming over (context, frame). Returns its tokens and score.
pub fn viterbi_oracle_s1<M: TransducerModel + ?Sized>(model: &M, features: &Matrix) -> (Vec<u32>, f64) {
    let tables = s1_tables(model, features);
    // (score, back pointer: previous context and token).
    let mut best: HashMap<Context, (f64, Vec<u32>)> = HashMap::from([(Context::INITIAL, (0.0, Vec::new()))]);
    for rows in &tables {
        let mut next: HashMap<Context, (f64, Vec<u32>)> = HashMap::new();
        for (ctx, row) in rows {
            let Some((score, ys)) = best.get(ctx) else {
                continue;
            };
            for (k, &lp) in row.iter().enumerate() {
                let (dst, s) = if k == 0 {
                    (*ctx, score + lp as f64)
                } else {
                    (ctx.push(k as u32), score + lp as f64)
                };
                let better = next.get(&dst).is_none_or(|(old, old_ys)| {
                    let cand_len = ys.len() + usize::from(k != 0);
                    s > *old || (s == *old && (cand_len, ys.as_slice(), k) < (old_ys.len(), old_ys.as_slice(), 0))
                });
                if better {
                    let mut new_ys = ys.clone();
                    if k != 0 {
                        new_ys.push(k as u32);
                    }
                    next.insert(dst, (s, new_ys));
                }
            }
        }
        best = next;
    }
    best.into_values()
        .min_by(|a, b| b.0.total_cmp(&a.0).then(a.1.len().cmp(&b.1.len())).then_with(|| a.1.cmp(&b.1)))
        .map(|(s, ys)| (ys, s))
        .expect("at least the initial context")
}

/// Total log-probability of all alignments in the one-symbol-per-frame
/// search space.
pub fn s1_total_logprob<M: TransducerModel + ?Sized>(model: &M, features: &Matrix) -> f64 {
    let tables = s1_tables(model, features);
    let mut alpha: HashMap<Context, f64> = HashMap::from([(Context::INITIAL, 0.0)]);
    for rows in &tables {
        let mut next: HashMap<Context, f64> = HashMap::new();
        for (ctx, row) in rows {
            let Some(&a) = alpha.get(ctx) else {
                continue;
            };
            for (k, &lp) in row.iter().enumerate() {
                let dst = if k == 0 { *ctx } else { ctx.push(k as u32) };
                let e = next.entry(dst).or_insert(f64::NEG_INFINITY);
                *e = log_add(*e, a + lp as f64);
            }
        }
        alpha = next;
    }
    crate::logspace::log_sum_exp(alpha.into_values())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TableModel;

    fn rigged(vocab: usize, frames: usize, pick: impl Fn(usize, Context) -> usize) -> TableModel {
        TableModel::from_fn(vocab, frames, |t, c| {
            let k = pick(t, c);
            (0..vocab).map(|j| if j == k { 3.0 } else { 0.0 }).collect()
        })
        .unwrap()
    }

    #[test]
    fn all_blank_model_emits_nothing() {
        let m = rigged(4, 5, |_, _| 0);
        for s in [MaxSymbols::Limit(1), MaxSymbols::Limit(3), MaxSymbols::UNLIMITED] {
            assert!(greedy_search(&m, &m.features(), s).unwrap().is_empty());
        }
        let (ys, score) = viterbi_oracle_s1(&m, &m.features());
        assert!(ys.is_empty());
        let blank: f64 = (0..5).map(|t| m.row(t, Context::INITIAL)[0] as f64).sum();
        assert!((score - blank).abs() < 1e-9);
    }

    #[test]
    fn hand_trace_with_one_symbol_per_frame() {
        // Frame 0 prefers 2, frame 1 prefers 1 after (0,2), frame 2 prefers blank.
        let m = rigged(3, 3, |t, c| match (t, c.b) {
            (0, _) => 2,
            (1, 2) => 1,
            _ => 0,
        });
        assert_eq!(greedy_search(&m, &m.features(), MaxSymbols::Limit(1)).unwrap(), vec![2, 1]);
        // With two symbols per frame, frame 0 emits 2 then sees context (0,2).
        let m2 = rigged(3, 3, |t, c| match (t, c.b) {
            (0, 0) => 2,
            (0, 2) => 1,
            _ => 0,
        });
        assert_eq!(greedy_search(&m2, &m2.features(), MaxSymbols::Limit(2)).unwrap(), vec![2, 1]);
        assert_eq!(greedy_search(&m2, &m2.features(), MaxSymbols::Limit(1)).unwrap(), vec![2]);
    }

    #[test]
    fn ties_favor_blank_then_smaller_ids() {
        let m = TableModel::from_fn(3, 2, |_, _| vec![0.0, 0.0, 0.0]).unwrap();
        assert!(greedy_search(&m, &m.features(), MaxSymbols::Limit(1)).unwrap().is_empty());
        let m = TableModel::from_fn(3, 2, |_, _| vec![-1.0, 0.0, 0.0]).unwrap();
        assert_eq!(greedy_search(&m, &m.features(), MaxSymbols::Limit(1)).unwrap(), vec![1, 1]);
    }

    #[test]
    fn output_length_is_bounded() {
        let m = rigged(3, 4, |_, _| 1);
        assert_eq!(greedy_search(&m, &m.features(), MaxSymbols::Limit(1)).unwrap().len(), 4);
        assert_eq!(greedy_search(&m, &m.features(), MaxSymbols::Limit(3)).unwrap().len(), 12);
        let (ys, hits) = greedy_search_stats(&m, &m.features(), MaxSymbols::UNLIMITED).unwrap();
        assert_eq!((ys.len(), hits), (4 * DEFAULT_SYMBOL_CAP, 4));
        assert!(greedy_search(&m, &m.features(), MaxSymbols::Limit(0)).is_err());
    }

    #[test]
    fn single_frame_oracle_is_row_argmax() {
        for seed in 0..10 {
            let m = TableModel::random(seed, 4, 1, 2.0, 0.0).unwrap();
            let row = m.row(0, Context::INITIAL);
            let k = argmax(row);
            let (ys, score) = viterbi_oracle_s1(&m, &m.features());
            assert_eq!(ys, if k == 0 { vec![] } else { vec![k as u32] });
            assert_eq!(score, row[k] as f64);
        }
    }

    #[test]
    fn batch_matches_single() {
        for seed in 0..5 {
            let m = TableModel::random(seed, 4, 10, 2.0, 0.5).unwrap();
            let feats: Vec<Matrix> = (3..=10)
                .map(|len| m.features().select_rows(&(0..len).collect::<Vec<_>>()))
                .collect();
            let refs: Vec<&Matrix> = feats.iter().collect();
            let batched = greedy_search_batch(&m, &refs);
            for (f, out) in feats.iter().zip(&batched) {
                assert_eq!(out, &greedy_search(&m, f, MaxSymbols::Limit(1)).unwrap());
                assert!(out.len() <= f.rows());
            }
            assert_eq!(greedy_search_batch(&m, &refs[..1])[0], batched[0]);
        }
        let m = TableModel::random(0, 4, 3, 1.0, 0.0).unwrap();
        assert!(greedy_search_batch(&m, &[]).is_empty());
    }

    #[test]
    fn width_one_beam_is_greedy() {
        let params = SearchParams {
            max_symbols: MaxSymbols::Limit(1),
            beam_size: 1,
            merge_op: MergeOp::Max,
            length_norm: false,
        };
        for seed in 0..30 {
            let m = TableModel::random(seed, 4, 8, 2.0, 0.5).unwrap();
            assert_eq!(
                beam_search(&m, &m.features(), &params).unwrap(),
                greedy_search(&m, &m.features(), MaxSymbols::Limit(1)).unwrap()
            );
        }
    }

    #[test]
    fn merged_scores_dominate_max() {
        let mut max_pool = Pool::new(MergeOp::Max);
        let mut add_pool = Pool::new(MergeOp::LogAdd);
        for s in [-1.0, -2.0, -1.5] {
            max_pool.insert(vec![1], s, 0);
            add_pool.insert(vec![1], s, 0);
        }
        assert_eq!(max_pool.hyps.len(), 1);
        assert_eq!(max_pool.hyps[0].score, -1.0);
        assert!(add_pool.hyps[0].score >= max_pool.hyps[0].score);
    }

    #[test]
    fn beam_with_wide_beam_matches_s1_viterbi() {
        let params = SearchParams {
            max_symbols: MaxSymbols::Limit(1),
            beam_size: 256,
            merge_op: MergeOp::Max,
            length_norm: false,
        };
        for seed in 0..10 {
            let m = TableModel::random(seed, 3, 5, 2.0, 0.0).unwrap();
            let (ys, _) = viterbi_oracle_s1(&m, &m.features());
            assert_eq!(beam_search(&m, &m.features(), &params).unwrap(), ys);
        }
    }

    #[test]
    fn s1_total_dominates_best_path() {
        for seed in 0..10 {
            let m = TableModel::random(seed, 4, 6, 2.0, 0.0).unwrap();
            let (_, best) = viterbi_oracle_s1(&m, &m.features());
            let total = s1_total_logprob(&m, &m.features());
            assert!(total >= best && total.abs() <= 1e-5);
        }
        // All frames blank-only: total is the sum of blank scores.
        let m = TableModel::from_fn(2, 3, |_, _| vec![0.0, f32::NEG_INFINITY]).unwrap();
        assert!(s1_total_logprob(&m, &m.features()).abs() < 1e-9);
    }
}
