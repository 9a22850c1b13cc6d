//! Real-time-factor measurement for the decoders.
//!
//! Audio time uses a 10 ms frame shift, so an utterance of `T` frames counts
//! as `T * 0.01` seconds. Wall time is the median over repeats.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::fsa::{trivial_graph, Fsa};
use crate::fsa_search::{fsa_beam_search, lattice_to_best_seq, FsaSearchError, FsaSearchParams};
use crate::model::{Matrix, TransducerModel};
use crate::search::{beam_search, greedy_search, greedy_search_batch, MaxSymbols, MergeOp, SearchError, SearchParams};

pub const FRAME_SHIFT_SECONDS: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Greedy search, one symbol per frame.
    Greedy,
    /// Hypothesis-list beam search.
    Beam,
    /// FSA-based beam search on the trivial graph.
    FsaBeam,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Greedy => "greedy",
            Method::Beam => "beam",
            Method::FsaBeam => "fsa-beam",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "greedy" => Ok(Method::Greedy),
            "beam" => Ok(Method::Beam),
            "fsa-beam" => Ok(Method::FsaBeam),
            other => Err(format!("unknown method {other:?} (expected greedy, beam or fsa-beam)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    pub batched: bool,
    pub batch_size: usize,
    pub repeats: usize,
    pub wall_seconds: f64,
    pub audio_seconds: f64,
    pub rtf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

pub fn audio_seconds(batch: &[&Matrix]) -> f64 {
    batch.iter().map(|f| f.rows()).sum::<usize>() as f64 * FRAME_SHIFT_SECONDS
}

/// Median wall time of `repeats` runs of `f` (at least one run).
pub fn median_seconds<T>(repeats: usize, mut f: impl FnMut() -> T) -> f64 {
    let mut times: Vec<f64> = (0..repeats.max(1))
        .map(|_| {
            let start = Instant::now();
            std::hint::black_box(f());
            start.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let n = times.len();
    if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeSettings {
    pub beam: SearchParams,
    pub fsa: FsaSearchParams,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        DecodeSettings {
            beam: SearchParams::default(),
            fsa: FsaSearchParams::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    FsaSearch(#[from] FsaSearchError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Decodes `utts` one at a time (`batched = false`) or in chunks of
/// `batch_size`. Beam search has no batched form and always runs per
/// utterance.
pub fn decode_all<M: TransducerModel + ?Sized>(
    model: &M,
    utts: &[&Matrix],
    method: Method,
    batched: bool,
    batch_size: usize,
    settings: &DecodeSettings,
    graph: Option<&Fsa>,
) -> Result<Vec<Vec<u32>>, BenchError> {
    if batch_size == 0 {
        return Err(BenchError::InvalidArgument("batch size must be >= 1".into()));
    }
    let trivial;
    let graph = match graph {
        Some(g) => g,
        None => {
            trivial = trivial_graph(model.vocab_size()).map_err(FsaSearchError::from)?;
            &trivial
        }
    };
    let chunk = if batched { batch_size } else { 1 };
    let mut out = Vec::with_capacity(utts.len());
    match method {
        Method::Greedy if batched => {
            for part in utts.chunks(chunk) {
                out.extend(greedy_search_batch(model, part));
            }
        }
        Method::Greedy => {
            for f in utts {
                out.push(greedy_search(model, f, MaxSymbols::Limit(1))?);
            }
        }
        Method::Beam => {
            for f in utts {
                out.push(beam_search(model, f, &settings.beam)?);
            }
        }
        Method::FsaBeam => {
            for part in utts.chunks(chunk) {
                let graphs = vec![graph; part.len()];
                for lat in fsa_beam_search(model, part, &graphs, settings.fsa)? {
                    out.push(lattice_to_best_seq(&lat, MergeOp::Max, 0, 0)?);
                }
            }
        }
    }
    Ok(out)
}

/// Times each method unbatched and (except beam search) batched.
pub fn run_bench<M: TransducerModel + ?Sized>(
    model: &M,
    utts: &[&Matrix],
    methods: &[Method],
    batch_size: usize,
    repeats: usize,
    settings: &DecodeSettings,
) -> Result<BenchReport, BenchError> {
    if utts.len() < batch_size {
        return Err(BenchError::InvalidArgument(format!(
            "{} utterances for batch size {batch_size}",
            utts.len()
        )));
    }
    let audio = audio_seconds(utts);
    let mut rows = Vec::new();
    for &method in methods {
        let modes: &[bool] = if method == Method::Beam { &[false] } else { &[false, true] };
        for &batched in modes {
            decode_all(model, utts, method, batched, batch_size, settings, None)?;
            let wall = median_seconds(repeats, || decode_all(model, utts, method, batched, batch_size, settings, None));
            rows.push(BenchRow {
                method,
                batched,
                batch_size: if batched { batch_size } else { 1 },
                repeats: repeats.max(1),
                wall_seconds: wall,
                audio_seconds: audio,
                rtf: wall / audio,
            });
        }
    }
    Ok(BenchReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TableModel;

    #[test]
    fn rtf_is_recomputable() {
        let m = TableModel::random(0, 3, 20, 1.0, 0.0).unwrap();
        let f = m.features();
        let utts = vec![&f; 4];
        let report = run_bench(&m, &utts, &[Method::Greedy, Method::Beam, Method::FsaBeam], 2, 3, &DecodeSettings::default())
            .unwrap();
        assert_eq!(report.rows.len(), 5);
        for row in &report.rows {
            assert!((row.audio_seconds - 0.8).abs() < 1e-12);
            assert!(row.rtf > 0.0);
            assert!((row.rtf - row.wall_seconds / row.audio_seconds).abs() < 1e-15);
        }
        assert!(run_bench(&m, &utts, &[Method::Greedy], 5, 1, &DecodeSettings::default()).is_err());
    }

    #[test]
    fn median_of_repeats() {
        let mut n = 0;
        median_seconds(4, || n += 1);
        assert_eq!(n, 4);
        assert_eq!("fsa-beam".parse::<Method>().unwrap(), Method::FsaBeam);
        assert!("viterbi".parse::<Method>().is_err());
    }
}
