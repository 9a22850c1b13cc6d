//! Token-level n-gram decoding graphs from ARPA language models.
//!
//! States are n-gram histories. Backoff transitions are first built as
//! epsilon (label 0) arcs; the decoding graph then replaces them with the arcs
//! reachable through the backoff chain. Only labels not already available at a
//! more specific history are taken from a shorter one, which keeps the graph
//! equivalent to the backoff chain rule rather than summing both routes.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use super::{Arc, Fsa, FsaError, Label, StateId, BLANK};

const BOS: &str = "<s>";
const EOS: &str = "</s>";
const UNK: &str = "<unk>";

/// Parsed ARPA model; probabilities and backoffs converted to natural log.
#[derive(Debug, Clone, Default)]
pub struct Arpa {
    pub order: usize,
    /// n-gram -> (log prob, backoff log weight).
    pub entries: HashMap<Vec<String>, (f64, f64)>,
}

impl Arpa {
    pub fn parse(text: &str) -> Result<Arpa, FsaError> {
        let mut entries = HashMap::new();
        let mut declared = BTreeMap::new();
        let mut section: Option<usize> = None;
        let mut seen_data = false;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            let err = |message: String| FsaError::Parse {
                line: line_no,
                message,
            };
            if line.is_empty() {
                continue;
            }
            if line == "\\data\\" {
                seen_data = true;
                section = None;
                continue;
            }
            if line == "\\end\\" {
                break;
            }
            if let Some(rest) = line.strip_prefix('\\') {
                let n = rest
                    .strip_suffix("-grams:")
                    .and_then(|n| n.parse::<usize>().ok())
                    .ok_or_else(|| err(format!("unknown section {line:?}")))?;
                if n > 3 {
                    return Err(FsaError::Unsupported(format!(
                        "n-gram order {n} (at most 3 is supported)"
                    )));
                }
                section = Some(n);
                continue;
            }
            match section {
                None => {
                    if let Some(spec) = line.strip_prefix("ngram ") {
                        let (n, count) = spec
                            .split_once('=')
                            .ok_or_else(|| err(format!("bad count line {line:?}")))?;
                        let n: usize = n.trim().parse().map_err(|_| err("bad order".into()))?;
                        let count: usize =
                            count.trim().parse().map_err(|_| err("bad count".into()))?;
                        if n > 3 {
                            return Err(FsaError::Unsupported(format!(
                                "n-gram order {n} (at most 3 is supported)"
                            )));
                        }
                        declared.insert(n, count);
                    } else if seen_data {
                        return Err(err(format!("unexpected line {line:?}")));
                    }
                }
                Some(n) => {
                    let fields: Vec<&str> = line.split_whitespace().collect();
                    if fields.len() != n + 1 && fields.len() != n + 2 {
                        return Err(err(format!(
                            "expected {} or {} fields for a {n}-gram",
                            n + 1,
                            n + 2
                        )));
                    }
                    let log10 = |s: &str| {
                        s.parse::<f64>()
                            .map_err(|_| err(format!("invalid number {s:?}")))
                    };
                    let prob = log10(fields[0])? * std::f64::consts::LN_10;
                    let backoff = match fields.get(n + 1) {
                        Some(b) => log10(b)? * std::f64::consts::LN_10,
                        None => 0.0,
                    };
                    let words = fields[1..=n].iter().map(|w| w.to_string()).collect();
                    entries.insert(words, (prob, backoff));
                }
            }
        }
        if !seen_data {
            return Err(FsaError::Parse {
                line: 1,
                message: "missing \\data\\ header".into(),
            });
        }
        let order = entries.keys().map(Vec::len).max().unwrap_or(0);
        if order == 0 {
            return Err(FsaError::Structure("ARPA file has no n-grams".into()));
        }
        Ok(Arpa { order, entries })
    }
}

/// History graph with explicit arcs and a backoff link per state.
struct Backoff {
    /// `histories[0]` is the start history.
    histories: Vec<Vec<String>>,
    arcs: Vec<Vec<(StateId, Label, f64)>>,
    finals: Vec<Option<f64>>,
    /// (backoff state, backoff log weight)
    backoff: Vec<Option<(StateId, f64)>>,
}

fn build_backoff(arpa: &Arpa, token_map: &HashMap<String, Label>) -> Result<Backoff, FsaError> {
    let mut missing = BTreeSet::new();
    for gram in arpa.entries.keys() {
        for w in gram {
            if w != BOS && w != EOS && w != UNK && !token_map.contains_key(w) {
                missing.insert(w.clone());
            }
        }
    }
    if !missing.is_empty() {
        return Err(FsaError::Vocabulary(missing.into_iter().collect()));
    }
    if let Some((sym, _)) = token_map.iter().find(|(_, &id)| id == BLANK) {
        return Err(FsaError::InvalidArgument(format!(
            "token {sym:?} maps to the reserved blank id 0"
        )));
    }

    let n = arpa.order;
    let mut state_keys: BTreeSet<Vec<String>> = BTreeSet::new();
    state_keys.insert(Vec::new());
    for gram in arpa.entries.keys() {
        if gram.len() < n && gram.last().map(String::as_str) != Some(EOS) {
            state_keys.insert(gram.clone());
        }
    }
    let start_key: Vec<String> = if state_keys.contains(&vec![BOS.to_string()]) {
        vec![BOS.to_string()]
    } else {
        Vec::new()
    };
    let mut histories = vec![start_key.clone()];
    histories.extend(state_keys.into_iter().filter(|k| *k != start_key));
    let ids: HashMap<&[String], StateId> = histories
        .iter()
        .enumerate()
        .map(|(i, h)| (h.as_slice(), i as StateId))
        .collect();
    let longest_state_suffix = |words: &[String]| -> StateId {
        let tail = &words[words.len().saturating_sub(n - 1)..];
        (0..=tail.len())
            .find_map(|skip| ids.get(&tail[skip..]).copied())
            .expect("empty history is always a state")
    };

    let num = histories.len();
    let mut arcs = vec![Vec::new(); num];
    let mut finals = vec![None; num];
    let mut grams: Vec<(&Vec<String>, &(f64, f64))> = arpa.entries.iter().collect();
    grams.sort_by(|a, b| a.0.cmp(b.0));
    for (gram, &(prob, _)) in grams {
        let (word, history) = gram.split_last().expect("non-empty n-gram");
        let Some(&src) = ids.get(history) else {
            continue;
        };
        if word == BOS {
            continue;
        }
        if word == EOS {
            finals[src as usize] = Some(prob);
            continue;
        }
        let Some(&label) = token_map.get(word) else {
            // <unk> without a token id.
            continue;
        };
        arcs[src as usize].push((longest_state_suffix(gram), label, prob));
    }
    let backoff = histories
        .iter()
        .map(|h| {
            if h.is_empty() {
                return None;
            }
            let weight = arpa.entries.get(h).map_or(0.0, |e| e.1);
            Some((longest_state_suffix(&h[1..]), weight))
        })
        .collect();
    Ok(Backoff {
        histories,
        arcs,
        finals,
        backoff,
    })
}

/// The n-gram acceptor with backoff transitions as label-0 arcs.
pub fn ngram_backoff_fsa(arpa: &Arpa, token_map: &HashMap<String, Label>) -> Result<Fsa, FsaError> {
    let model = build_backoff(arpa, token_map)?;
    let mut arcs = Vec::new();
    let mut finals = BTreeMap::new();
    for s in 0..model.histories.len() {
        for &(dst, label, w) in &model.arcs[s] {
            arcs.push(Arc::new(s as StateId, dst, label, w));
        }
        if let Some((dst, w)) = model.backoff[s] {
            arcs.push(Arc::new(s as StateId, dst, BLANK, w));
        }
        if let Some(f) = model.finals[s] {
            finals.insert(s as StateId, f);
        }
    }
    Fsa::new(model.histories.len() as StateId, arcs, finals)
}

/// Epsilon-free token-level decoding graph for an ARPA model of order <= 3.
pub fn ngram_graph_from_arpa(arpa_text: &str, token_map: &HashMap<String, Label>) -> Result<Fsa, FsaError> {
    let arpa = Arpa::parse(arpa_text)?;
    let model = build_backoff(&arpa, token_map)?;
    let mut arcs = Vec::new();
    let mut finals = BTreeMap::new();
    for s in 0..model.histories.len() {
        let mut seen: HashSet<Label> = HashSet::new();
        let mut final_score = None;
        let mut state = s as StateId;
        let mut weight = 0.0;
        loop {
            for &(dst, label, w) in &model.arcs[state as usize] {
                if seen.insert(label) {
                    arcs.push(Arc::new(s as StateId, dst, label, weight + w));
                }
            }
            if final_score.is_none() {
                final_score = model.finals[state as usize].map(|f| weight + f);
            }
            match model.backoff[state as usize] {
                Some((next, w)) => {
                    weight += w;
                    state = next;
                }
                None => break,
            }
        }
        if let Some(f) = final_score {
            finals.insert(s as StateId, f);
        }
    }
    if finals.is_empty() {
        return Err(FsaError::Structure(format!("the model never predicts {EOS}")));
    }
    Ok(super::connect(&Fsa::new(
        model.histories.len() as StateId,
        arcs,
        finals,
    )?))
}
