//! FSA-based parallel beam search with one symbol per frame.
//!
//! A search state is a decoder context, a state of the stream's decoding
//! graph and a frame. Blank keeps context and graph state; a graph arc
//! `s -> r` with label `c` and weight `q` moves context `(a, b)` to `(b, c)`
//! and graph state to `r`, scoring `q + log P(c)`. Every stream emits exactly
//! one arc per frame, so all streams advance together and each frame needs one
//! decoder call and one joiner call for the whole batch, over the distinct
//! contexts still alive.
//!
//! Each frame is first expanded without pruning. Pruning then applies the
//! beam and max-states limits in one pass and the max-contexts limit in a
//! second. Surviving states become lattice nodes; every arc into a survivor is
//! kept, so the lattice holds all alignments that reach it, not just the best.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rustc_hash::FxHashMap;

use crate::fsa::{
    best_path, build_ragged, remove_blanks_unique, sample_nbest, sequence_total_logprob, Arc, Fsa, FsaError,
    Label, RaggedShape, StateId, BLANK,
};
use crate::model::{Context, Matrix, TransducerModel};
use crate::search::MergeOp;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FsaSearchError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("decoding graph {index}: {reason}")]
    Graph { index: usize, reason: String },
    #[error("internal consistency: {0}")]
    Internal(String),
    #[error(transparent)]
    Fsa(#[from] FsaError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FsaSearchParams {
    /// Log-probability width below the stream's best state.
    pub beam: f64,
    pub max_states: usize,
    pub max_contexts: usize,
}

impl Default for FsaSearchParams {
    fn default() -> Self {
        FsaSearchParams {
            beam: 20.0,
            max_states: 64,
            max_contexts: 8,
        }
    }
}

impl FsaSearchParams {
    /// No pruning at all.
    pub const UNPRUNED: FsaSearchParams = FsaSearchParams {
        beam: f64::INFINITY,
        max_states: usize::MAX,
        max_contexts: usize::MAX,
    };

    fn validate(&self) -> Result<(), FsaSearchError> {
        if !(self.beam >= 0.0) || self.max_states == 0 || self.max_contexts == 0 {
            return Err(FsaSearchError::InvalidArgument(
                "beam must be >= 0; max_states and max_contexts must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamState {
    pub context: Context,
    pub graph_state: StateId,
    /// Best log-probability reaching this state on the current frame.
    pub score: f64,
    pub lattice_node: StateId,
}

/// Next-frame state awaiting pruning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub context: Context,
    pub graph_state: StateId,
    pub score: f64,
}

#[derive(Debug, Clone, Copy)]
struct PendingArc {
    src_node: StateId,
    candidate: u32,
    label: Label,
    score: f64,
}

#[derive(Debug, Clone)]
pub struct DecodeStream<'g> {
    pub graph: &'g Fsa,
    pub active: Vec<StreamState>,
    /// Frames consumed so far.
    pub t: usize,
    pub num_frames: Option<usize>,
    pub params: FsaSearchParams,
    pub done: bool,
    candidates: Vec<Candidate>,
    pending: Vec<PendingArc>,
    lattice_nodes: usize,
    lattice_arcs: Vec<Arc>,
    /// Distinct contexts of `active`, sorted by packed value.
    contexts: Vec<Context>,
}

impl DecodeStream<'_> {
    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn lattice_arcs(&self) -> &[Arc] {
        &self.lattice_arcs
    }

    fn distinct_contexts(&mut self) -> &[Context] {
        self.contexts.clear();
        self.contexts.extend(self.active.iter().map(|s| s.context));
        self.contexts.sort_unstable();
        self.contexts.dedup();
        &self.contexts
    }

    /// The lattice built so far. Active states become final with the graph's
    /// final score; states on non-final graph states do not.
    fn lattice(&self) -> Result<Fsa, FsaSearchError> {
        let finals = self
            .active
            .iter()
            .filter_map(|s| self.graph.final_score(s.graph_state).map(|f| (s.lattice_node, f)))
            .collect();
        let raw = Fsa::new(self.lattice_nodes as StateId, self.lattice_arcs.clone(), finals)?;
        Ok(crate::fsa::connect(&raw))
    }
}

/// One stream per graph, each holding the initial state: context `(0, 0)`,
/// graph state 0, score 0.
pub fn init_streams<'g>(graphs: &[&'g Fsa], params: FsaSearchParams) -> Result<Vec<DecodeStream<'g>>, FsaSearchError> {
    params.validate()?;
    graphs
        .iter()
        .enumerate()
        .map(|(index, &graph)| {
            if graph.num_states() == 0 {
                return Err(FsaSearchError::Graph {
                    index,
                    reason: "graph has no states".into(),
                });
            }
            if !graph.is_epsilon_free() {
                return Err(FsaSearchError::Graph {
                    index,
                    reason: "graph has blank-labeled arcs; decoding graphs must be epsilon-free".into(),
                });
            }
            Ok(DecodeStream {
                graph,
                active: vec![StreamState {
                    context: Context::INITIAL,
                    graph_state: graph.start(),
                    score: 0.0,
                    lattice_node: 0,
                }],
                t: 0,
                num_frames: None,
                params,
                done: false,
                candidates: Vec::new(),
                pending: Vec::new(),
                lattice_nodes: 1,
                lattice_arcs: Vec::new(),
                contexts: Vec::new(),
            })
        })
        .collect()
}

/// Distinct active contexts of each unfinished stream, sorted within the
/// stream. Finished streams own no rows.
pub fn get_contexts(streams: &mut [DecodeStream<'_>]) -> (RaggedShape, Vec<Context>) {
    let mut counts = Vec::with_capacity(streams.len());
    let mut all = Vec::new();
    for s in streams.iter_mut() {
        if s.done {
            counts.push(0);
            continue;
        }
        let ctxs = s.distinct_contexts();
        counts.push(ctxs.len());
        all.extend_from_slice(ctxs);
    }
    (build_ragged(&counts), all)
}

/// Expands every active state by one frame without pruning.
///
/// `log_probs` has one row per element of `shape`, in [`get_contexts`] order.
pub fn expand_arcs(
    streams: &mut [DecodeStream<'_>],
    shape: &RaggedShape,
    log_probs: &Matrix,
) -> Result<(), FsaSearchError> {
    if shape.num_rows() != streams.len() || shape.num_elements() != log_probs.rows() {
        return Err(FsaSearchError::Internal(format!(
            "{} log-prob rows for {} contexts over {} rows of {} streams",
            log_probs.rows(),
            shape.num_elements(),
            shape.num_rows(),
            streams.len()
        )));
    }
    let mut index: FxHashMap<(Context, StateId), u32> = FxHashMap::default();
    for (i, stream) in streams.iter_mut().enumerate() {
        if stream.done {
            continue;
        }
        let range = shape.row(i);
        if range.len() != stream.contexts.len() {
            return Err(FsaSearchError::Internal(format!(
                "stream {i} has {} contexts but {} rows",
                stream.contexts.len(),
                range.len()
            )));
        }
        index.clear();
        stream.candidates.clear();
        stream.pending.clear();
        let graph = stream.graph;
        let DecodeStream {
            active,
            contexts,
            candidates,
            pending,
            ..
        } = stream;
        let mut add = |ctx: Context, state: StateId, src_node: StateId, label: Label, arc_score: f64, total: f64| {
            let slot = *index.entry((ctx, state)).or_insert_with(|| {
                candidates.push(Candidate {
                    context: ctx,
                    graph_state: state,
                    score: f64::NEG_INFINITY,
                });
                (candidates.len() - 1) as u32
            });
            let c = &mut candidates[slot as usize];
            if total > c.score {
                c.score = total;
            }
            pending.push(PendingArc {
                src_node,
                candidate: slot,
                label,
                score: arc_score,
            });
        };
        for st in active.iter() {
            let row_idx = range.start + contexts.binary_search(&st.context).expect("context listed");
            let lp = log_probs.row(row_idx);
            let blank = lp[0] as f64;
            add(st.context, st.graph_state, st.lattice_node, BLANK, blank, st.score + blank);
            for arc in graph.arcs_from(st.graph_state) {
                let Some(&token_lp) = lp.get(arc.label as usize) else {
                    return Err(FsaSearchError::InvalidArgument(format!(
                        "graph label {} outside the model vocabulary {}",
                        arc.label,
                        lp.len()
                    )));
                };
                let w = arc.score + token_lp as f64;
                add(st.context.push(arc.label), arc.dst, st.lattice_node, arc.label, w, st.score + w);
            }
        }
    }
    Ok(())
}

/// Applies the beam and max-states limits, then the max-contexts limit, and
/// makes the survivors the active states of the next frame.
pub fn prune_streams(streams: &mut [DecodeStream<'_>]) {
    for stream in streams.iter_mut() {
        if stream.done {
            continue;
        }
        let p = stream.params;
        let cands = &stream.candidates;
        let best = cands.iter().map(|c| c.score).fold(f64::NEG_INFINITY, f64::max);
        let mut order: Vec<u32> = (0..cands.len() as u32)
            .filter(|&i| cands[i as usize].score >= best - p.beam)
            .collect();
        // Scores descending; (context, state) pairs are unique, so the order is total.
        let rank = |&a: &u32, &b: &u32| {
            let (x, y) = (&cands[a as usize], &cands[b as usize]);
            y.score
                .total_cmp(&x.score)
                .then(x.context.cmp(&y.context))
                .then(x.graph_state.cmp(&y.graph_state))
        };
        if order.len() > p.max_states && p.max_states > 0 {
            order.select_nth_unstable_by(p.max_states - 1, rank);
        }
        order.truncate(p.max_states);
        order.sort_unstable_by(rank);
        // Contexts first seen earlier in score order rank higher.
        let mut kept_contexts: Vec<Context> = Vec::new();
        order.retain(|&i| {
            let ctx = cands[i as usize].context;
            if kept_contexts.contains(&ctx) {
                return true;
            }
            if kept_contexts.len() < p.max_contexts {
                kept_contexts.push(ctx);
                return true;
            }
            false
        });

        let mut node_of = vec![StateId::MAX; cands.len()];
        stream.active.clear();
        for &i in &order {
            let c = cands[i as usize];
            let node = stream.lattice_nodes as StateId;
            stream.lattice_nodes += 1;
            node_of[i as usize] = node;
            stream.active.push(StreamState {
                context: c.context,
                graph_state: c.graph_state,
                score: c.score,
                lattice_node: node,
            });
        }
        for arc in &stream.pending {
            let dst = node_of[arc.candidate as usize];
            if dst != StateId::MAX {
                stream.lattice_arcs.push(Arc::new(arc.src_node, dst, arc.label, arc.score));
            }
        }
        stream.candidates.clear();
        stream.pending.clear();
        stream.t += 1;
        if stream.num_frames == Some(stream.t) {
            stream.done = true;
        }
    }
}

/// Decodes a batch against per-utterance graphs and returns one lattice per
/// utterance.
///
/// Each frame encodes the current frame of every unfinished stream, runs the
/// decoder once per distinct context in the batch, pairs each context with its
/// stream's encoder row, runs the joiner once, then expands and prunes.
pub fn fsa_beam_search<M: TransducerModel + ?Sized>(
    model: &M,
    batch: &[&Matrix],
    graphs: &[&Fsa],
    params: FsaSearchParams,
) -> Result<Vec<Fsa>, FsaSearchError> {
    if batch.len() != graphs.len() {
        return Err(FsaSearchError::InvalidArgument(format!(
            "{} utterances but {} graphs",
            batch.len(),
            graphs.len()
        )));
    }
    let vocab = model.vocab_size() as Label;
    for (index, g) in graphs.iter().enumerate() {
        if g.max_label().is_some_and(|l| l >= vocab) {
            return Err(FsaSearchError::Graph {
                index,
                reason: format!("labels exceed the model vocabulary {vocab}"),
            });
        }
    }
    let mut streams = init_streams(graphs, params)?;
    for (s, f) in streams.iter_mut().zip(batch) {
        s.num_frames = Some(f.rows());
        s.done = f.rows() == 0;
    }
    let cols = batch.first().map_or(0, |f| f.cols());
    let mut frame_rows: Vec<f32> = Vec::new();
    let mut live: Vec<usize> = Vec::new();
    loop {
        live.clear();
        live.extend((0..streams.len()).filter(|&i| !streams[i].done));
        if live.is_empty() {
            break;
        }
        frame_rows.clear();
        for &i in &live {
            frame_rows.extend_from_slice(batch[i].row(streams[i].t));
        }
        let enc = model.encode(&Matrix::from_vec(live.len(), cols, std::mem::take(&mut frame_rows)).map_err(
            |e| FsaSearchError::InvalidArgument(e.to_string()),
        )?);
        let mut enc_row_of = vec![usize::MAX; streams.len()];
        for (r, &i) in live.iter().enumerate() {
            enc_row_of[i] = r;
        }
        let (shape, contexts) = get_contexts(&mut streams);
        // Streams often share contexts, so the decoder runs once per distinct
        // context in the batch; decoder rows do not depend on their batch.
        let mut distinct = contexts.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let picks: Vec<usize> = contexts
            .iter()
            .map(|c| distinct.binary_search(c).expect("context listed"))
            .collect();
        let dec = model.decode(&distinct).select_rows(&picks);
        let selected: Vec<usize> = shape.row_ids().iter().map(|&i| enc_row_of[i]).collect();
        let log_probs = model.join(&enc.select_rows(&selected), &dec);
        expand_arcs(&mut streams, &shape, &log_probs)?;
        prune_streams(&mut streams);
    }
    streams.iter().map(DecodeStream::lattice).collect()
}

/// Token sequence chosen from a lattice.
///
/// `Max` takes the best path. `LogAdd` samples `nbest` paths, removes blanks
/// and duplicates, and returns the candidate with the highest total
/// probability over all its alignments (ties: lexicographically smallest).
pub fn lattice_to_best_seq(lattice: &Fsa, method: MergeOp, nbest: usize, seed: u64) -> Result<Vec<Label>, FsaSearchError> {
    if lattice.num_states() == 0 || lattice.finals().is_empty() {
        return Ok(Vec::new());
    }
    match method {
        MergeOp::Max => Ok(best_path(lattice)?.tokens()),
        MergeOp::LogAdd => {
            let paths = sample_nbest(lattice, nbest, seed)?;
            let candidates = remove_blanks_unique(paths.iter().map(|p| p.labels.as_slice()));
            let mut best: Option<(f64, Vec<Label>)> = None;
            for seq in candidates {
                let score = sequence_total_logprob(lattice, &seq)?;
                let better = match &best {
                    None => true,
                    Some((s, b)) => score > *s || (score == *s && seq < *b),
                };
                if better {
                    best = Some((score, seq));
                }
            }
            Ok(best.map(|(_, seq)| seq).unwrap_or_default())
        }
    }
}
