//! Plain-text FSA format.
//!
//! One item per line: `src dst label score` for an arc, `state final_score`
//! for a final state. Lines starting with `#` are comments. State ids that
//! leave gaps are renumbered densely, preserving their order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use super::{Arc, Fsa, FsaError, Label};

enum Line {
    Arc(u64, u64, Label, f64),
    Final(u64, f64),
}

pub fn parse_fsa_text(text: &str) -> Result<Fsa, FsaError> {
    let mut items = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| FsaError::Parse {
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let state = |s: &str| {
            s.parse::<u64>()
                .map_err(|_| err(format!("invalid state id {s:?}")))
        };
        let score = |s: &str| {
            let v = s
                .parse::<f64>()
                .map_err(|_| err(format!("invalid score {s:?}")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(err(format!("non-finite score {s:?}")))
            }
        };
        match fields.as_slice() {
            [src, dst, label, sc] => {
                let label = label
                    .parse::<Label>()
                    .map_err(|_| err(format!("invalid label {label:?}")))?;
                items.push(Line::Arc(state(src)?, state(dst)?, label, score(sc)?));
            }
            [st, sc] => items.push(Line::Final(state(st)?, score(sc)?)),
            _ => {
                return Err(err(format!(
                    "expected 2 or 4 fields, found {}",
                    fields.len()
                )))
            }
        }
    }

    let mut ids = BTreeSet::new();
    for item in &items {
        match *item {
            Line::Arc(s, d, ..) => {
                ids.insert(s);
                ids.insert(d);
            }
            Line::Final(s, _) => {
                ids.insert(s);
            }
        }
    }
    let dense: BTreeMap<u64, u32> = ids.iter().enumerate().map(|(i, &s)| (s, i as u32)).collect();
    if dense.len() > u32::MAX as usize {
        return Err(FsaError::Structure("too many states".into()));
    }

    let mut arcs = Vec::new();
    let mut finals = BTreeMap::new();
    for item in items {
        match item {
            Line::Arc(s, d, label, score) => arcs.push(Arc::new(dense[&s], dense[&d], label, score)),
            Line::Final(s, score) => {
                if finals.insert(dense[&s], score).is_some() {
                    return Err(FsaError::Structure(format!("state {s} declared final twice")));
                }
            }
        }
    }
    if finals.is_empty() {
        return Err(FsaError::Structure("no final state".into()));
    }
    Fsa::new(dense.len() as u32, arcs, finals)
}

pub fn serialize_fsa_text(fsa: &Fsa) -> String {
    serialize_fsa_text_with_header(fsa, &[])
}

/// Serialize with a leading `# key=value ...` comment line (omitted when
/// `header` is empty).
pub fn serialize_fsa_text_with_header(fsa: &Fsa, header: &[(&str, String)]) -> String {
    let mut out = String::new();
    if !header.is_empty() {
        let fields: Vec<String> = header.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(out, "# {}", fields.join(" "));
    }
    // `{}` on f64 prints the shortest representation that parses back exactly.
    for arc in fsa.arcs() {
        let _ = writeln!(out, "{} {} {} {}", arc.src, arc.dst, arc.label, arc.score);
    }
    for (state, score) in fsa.finals() {
        let _ = writeln!(out, "{state} {score}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minimal_acceptor() {
        let fsa = parse_fsa_text("0 0 1 0.0\n0 -1.0").unwrap();
        assert_eq!(fsa.num_states(), 1);
        assert_eq!(fsa.arcs(), &[Arc::new(0, 0, 1, 0.0)]);
        assert_eq!(fsa.final_score(0), Some(-1.0));
        assert_eq!(serialize_fsa_text(&fsa), "0 0 1 0\n0 -1\n");
    }

    #[test]
    fn empty_input_has_no_final() {
        assert!(matches!(parse_fsa_text(""), Err(FsaError::Structure(_))));
        assert!(matches!(parse_fsa_text("# only a comment\n"), Err(FsaError::Structure(_))));
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let err = parse_fsa_text("0 1 1 0.5\n1 2 x 0.0\n2 0\n").unwrap_err();
        assert_eq!(
            err,
            FsaError::Parse {
                line: 2,
                message: "invalid label \"x\"".into()
            }
        );
        assert!(matches!(
            parse_fsa_text("0 1 1\n"),
            Err(FsaError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_fsa_text("0 1 1 nan\n1 0\n"),
            Err(FsaError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn gaps_are_renumbered_in_order() {
        let fsa = parse_fsa_text("10 30 2 -0.5\n30 20 1 -0.25\n20 0\n").unwrap();
        assert_eq!(fsa.num_states(), 3);
        assert_eq!(fsa.arcs()[0], Arc::new(0, 2, 2, -0.5));
        assert_eq!(fsa.arcs()[1], Arc::new(2, 1, 1, -0.25));
        assert!(fsa.is_final(1));
    }

    #[test]
    fn header_is_a_comment() {
        let fsa = parse_fsa_text("0 1 3 -0.125\n1 0\n").unwrap();
        let text = serialize_fsa_text_with_header(&fsa, &[("stream", "4".into()), ("frames", "7".into())]);
        assert!(text.starts_with("# stream=4 frames=7\n"));
        assert_eq!(parse_fsa_text(&text).unwrap(), fsa);
    }

    /// Random FSAs in which every state is referenced by an arc or a final line.
    fn arb_fsa() -> impl Strategy<Value = Fsa> {
        (1u32..6).prop_flat_map(|n| {
            let arc = (0..n, 0..n, 0u32..5, -20.0f64..5.0);
            (
                Just(n),
                prop::collection::vec(arc, 0..12),
                prop::collection::btree_map(0..n, -5.0f64..1.0, 1..=n as usize),
            )
                .prop_map(|(n, arcs, mut finals)| {
                    let arcs: Vec<Arc> =
                        arcs.into_iter().map(|(s, d, l, w)| Arc::new(s, d, l, w)).collect();
                    // Make every state appear so that parsing needs no renumbering.
                    for s in 0..n {
                        let referenced = arcs.iter().any(|a| a.src == s || a.dst == s);
                        if !referenced {
                            finals.entry(s).or_insert(0.0);
                        }
                    }
                    Fsa::new(n, arcs, finals).unwrap()
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn serialize_parse_round_trip(fsa in arb_fsa()) {
            let text = serialize_fsa_text(&fsa);
            let back = parse_fsa_text(&text).unwrap();
            prop_assert_eq!(&back, &fsa);
            prop_assert_eq!(serialize_fsa_text(&back), text);
        }
    }
}
