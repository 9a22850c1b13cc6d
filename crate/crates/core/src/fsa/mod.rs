//! Weighted finite-state acceptors.
//!
//! One [`Fsa`] type serves both as a decoding graph and as the lattice produced
//! by the FSA-based beam search. Scores are natural-log probabilities that add
//! along a path. Label 0 is the blank: it may appear in lattices, never in
//! decoding graphs.

mod algo;
mod arpa;
mod ragged;
mod text;

use std::collections::BTreeMap;

use thiserror::Error;

pub use algo::{
    best_path, connect, intersect, linear_acceptor, remove_blanks_unique, remove_epsilon,
    sample_nbest, sequence_total_logprob, topo_order, total_logprob, Path,
};
pub use arpa::{ngram_backoff_fsa, ngram_graph_from_arpa, Arpa};
pub use ragged::{build_ragged, RaggedShape};
pub use text::{parse_fsa_text, serialize_fsa_text, serialize_fsa_text_with_header};

/// State index within an [`Fsa`].
pub type StateId = u32;
/// Token index. 0 is the blank.
pub type Label = u32;

pub const BLANK: Label = 0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FsaError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid fsa: {0}")]
    Structure(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("symbols missing from the token map: {}", .0.join(", "))]
    Vocabulary(Vec<String>),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("fsa contains a cycle; an acyclic input is required")]
    Cyclic,
    #[error("no path from the start state reaches a final state")]
    EmptyLattice,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arc {
    pub src: StateId,
    pub dst: StateId,
    pub label: Label,
    pub score: f64,
}

impl Arc {
    pub fn new(src: StateId, dst: StateId, label: Label, score: f64) -> Self {
        Arc {
            src,
            dst,
            label,
            score,
        }
    }
}

/// A weighted acceptor with start state 0.
///
/// Arcs are kept grouped by source state; `state_splits` indexes the group of
/// each state the same way a ragged row-splits array does.
#[derive(Debug, Clone, PartialEq)]
pub struct Fsa {
    num_states: u32,
    arcs: Vec<Arc>,
    state_splits: Vec<usize>,
    finals: BTreeMap<StateId, f64>,
}

impl Fsa {
    /// Build an FSA, stably sorting `arcs` by source state.
    pub fn new(
        num_states: u32,
        mut arcs: Vec<Arc>,
        finals: BTreeMap<StateId, f64>,
    ) -> Result<Self, FsaError> {
        if num_states == 0 {
            return Err(FsaError::Structure("an fsa needs at least the start state".into()));
        }
        for (i, arc) in arcs.iter().enumerate() {
            if arc.src >= num_states || arc.dst >= num_states {
                return Err(FsaError::Structure(format!(
                    "arc {i} ({} -> {}) references a state >= {num_states}",
                    arc.src, arc.dst
                )));
            }
            if !arc.score.is_finite() {
                return Err(FsaError::Structure(format!("arc {i} has non-finite score")));
            }
        }
        for (&state, &score) in &finals {
            if state >= num_states {
                return Err(FsaError::Structure(format!("final state {state} out of range")));
            }
            if !score.is_finite() {
                return Err(FsaError::Structure(format!(
                    "final state {state} has non-finite score"
                )));
            }
        }
        arcs.sort_by_key(|a| a.src);
        let counts = {
            let mut counts = vec![0usize; num_states as usize];
            for arc in &arcs {
                counts[arc.src as usize] += 1;
            }
            counts
        };
        let state_splits = build_ragged(&counts).row_splits().to_vec();
        Ok(Fsa {
            num_states,
            arcs,
            state_splits,
            finals,
        })
    }

    /// A single non-final start state with no arcs.
    pub fn empty() -> Self {
        Fsa::new(1, Vec::new(), BTreeMap::new()).expect("valid empty fsa")
    }

    pub fn num_states(&self) -> usize {
        self.num_states as usize
    }

    pub fn start(&self) -> StateId {
        0
    }

    pub fn arcs(&self) -> &[Arc] {
        &self.arcs
    }

    pub fn num_arcs(&self) -> usize {
        self.arcs.len()
    }

    /// Index range into [`Fsa::arcs`] of the arcs leaving `state`.
    pub fn arc_range(&self, state: StateId) -> std::ops::Range<usize> {
        let s = state as usize;
        self.state_splits[s]..self.state_splits[s + 1]
    }

    pub fn arcs_from(&self, state: StateId) -> &[Arc] {
        &self.arcs[self.arc_range(state)]
    }

    pub fn finals(&self) -> &BTreeMap<StateId, f64> {
        &self.finals
    }

    pub fn final_score(&self, state: StateId) -> Option<f64> {
        self.finals.get(&state).copied()
    }

    pub fn is_final(&self, state: StateId) -> bool {
        self.finals.contains_key(&state)
    }

    /// True if no arc carries the blank label.
    pub fn is_epsilon_free(&self) -> bool {
        self.arcs.iter().all(|a| a.label != BLANK)
    }

    pub fn max_label(&self) -> Option<Label> {
        self.arcs.iter().map(|a| a.label).max()
    }
}

/// One-state graph accepting every token sequence over `1..vocab_size`.
pub fn trivial_graph(vocab_size: usize) -> Result<Fsa, FsaError> {
    if vocab_size == 0 {
        return Err(FsaError::InvalidArgument("vocab_size must be at least 1".into()));
    }
    let arcs = (1..vocab_size as Label).map(|l| Arc::new(0, 0, l, 0.0)).collect();
    Fsa::new(1, arcs, BTreeMap::from([(0, 0.0)]))
}
