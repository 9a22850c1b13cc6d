//! Path algorithms over acyclic FSAs (tropical and log semirings), sampling,
//! intersection and epsilon removal.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Arc, Fsa, FsaError, Label, StateId, BLANK};
use crate::logspace::log_add;

/// A complete path from the start state to a final state.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    /// Indices into [`Fsa::arcs`].
    pub arcs: Vec<usize>,
    /// Arc labels, blanks included.
    pub labels: Vec<Label>,
    /// Sum of arc scores plus the final score.
    pub score: f64,
}

impl Path {
    fn from_arcs(fsa: &Fsa, arcs: Vec<usize>) -> Path {
        let labels = arcs.iter().map(|&i| fsa.arcs()[i].label).collect();
        let last = arcs.last().map_or(fsa.start(), |&i| fsa.arcs()[i].dst);
        let score = arcs.iter().map(|&i| fsa.arcs()[i].score).sum::<f64>()
            + fsa.final_score(last).expect("path ends in a final state");
        Path {
            arcs,
            labels,
            score,
        }
    }

    /// Labels with blanks removed.
    pub fn tokens(&self) -> Vec<Label> {
        self.labels.iter().copied().filter(|&l| l != BLANK).collect()
    }
}

/// Kahn topological order of all states; fails on cycles (self-loops included).
pub fn topo_order(fsa: &Fsa) -> Result<Vec<StateId>, FsaError> {
    let n = fsa.num_states();
    let mut indegree = vec![0usize; n];
    for arc in fsa.arcs() {
        indegree[arc.dst as usize] += 1;
    }
    let mut queue: VecDeque<StateId> = (0..n as StateId).filter(|&s| indegree[s as usize] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(s) = queue.pop_front() {
        order.push(s);
        for arc in fsa.arcs_from(s) {
            let d = arc.dst as usize;
            indegree[d] -= 1;
            if indegree[d] == 0 {
                queue.push_back(arc.dst);
            }
        }
    }
    if order.len() == n {
        Ok(order)
    } else {
        Err(FsaError::Cyclic)
    }
}

/// Log-sum of all completions from each state to a final state.
fn backward_log_scores(fsa: &Fsa) -> Result<Vec<f64>, FsaError> {
    let order = topo_order(fsa)?;
    let mut beta = vec![f64::NEG_INFINITY; fsa.num_states()];
    for &s in order.iter().rev() {
        let mut acc = fsa.final_score(s).unwrap_or(f64::NEG_INFINITY);
        for arc in fsa.arcs_from(s) {
            acc = log_add(acc, arc.score + beta[arc.dst as usize]);
        }
        beta[s as usize] = acc;
    }
    Ok(beta)
}

/// Highest-scoring complete path (max, +).
///
/// Among equal scores the lexicographically smallest arc-index sequence wins;
/// stopping at a final state counts as smaller than continuing.
pub fn best_path(fsa: &Fsa) -> Result<Path, FsaError> {
    let order = topo_order(fsa)?;
    let n = fsa.num_states();
    let mut best = vec![f64::NEG_INFINITY; n];
    let mut choice: Vec<Option<usize>> = vec![None; n];
    for &s in order.iter().rev() {
        let mut value = fsa.final_score(s).unwrap_or(f64::NEG_INFINITY);
        let mut pick = None;
        for idx in fsa.arc_range(s) {
            let arc = &fsa.arcs()[idx];
            let cand = arc.score + best[arc.dst as usize];
            if cand > value {
                value = cand;
                pick = Some(idx);
            }
        }
        best[s as usize] = value;
        choice[s as usize] = pick;
    }
    if best[fsa.start() as usize] == f64::NEG_INFINITY {
        return Err(FsaError::EmptyLattice);
    }
    let mut arcs = Vec::new();
    let mut s = fsa.start();
    while let Some(idx) = choice[s as usize] {
        arcs.push(idx);
        s = fsa.arcs()[idx].dst;
    }
    Ok(Path::from_arcs(fsa, arcs))
}

/// Log-sum-exp over all complete paths; `-inf` if there are none.
pub fn total_logprob(fsa: &Fsa) -> Result<f64, FsaError> {
    let order = topo_order(fsa)?;
    let mut alpha = vec![f64::NEG_INFINITY; fsa.num_states()];
    alpha[fsa.start() as usize] = 0.0;
    let mut total = f64::NEG_INFINITY;
    for &s in &order {
        let a = alpha[s as usize];
        if a == f64::NEG_INFINITY {
            continue;
        }
        if let Some(f) = fsa.final_score(s) {
            total = log_add(total, a + f);
        }
        for arc in fsa.arcs_from(s) {
            let d = arc.dst as usize;
            alpha[d] = log_add(alpha[d], a + arc.score);
        }
    }
    Ok(total)
}

/// Draws `n` complete paths (with repetition), each with probability
/// `exp(score - total_logprob)`.
///
/// Each walk starts at the start state and picks between stopping and every
/// outgoing arc in proportion to `exp(weight + suffix log-sum)`, using exact
/// backward scores. Returns an empty list when the FSA has no complete path.
pub fn sample_nbest(fsa: &Fsa, n: usize, seed: u64) -> Result<Vec<Path>, FsaError> {
    let beta = backward_log_scores(fsa)?;
    if beta[fsa.start() as usize] == f64::NEG_INFINITY {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut paths = Vec::with_capacity(n);
    for _ in 0..n {
        let mut arcs = Vec::new();
        let mut s = fsa.start();
        loop {
            let norm = beta[s as usize];
            let r: f64 = rng.random();
            let mut cumulative = fsa
                .final_score(s)
                .map_or(0.0, |f| (f - norm).exp());
            if r < cumulative {
                break;
            }
            // Falls back to the last arc with nonzero mass when rounding leaves
            // r above the accumulated total.
            let mut picked = None;
            for idx in fsa.arc_range(s) {
                let arc = &fsa.arcs()[idx];
                let p = (arc.score + beta[arc.dst as usize] - norm).exp();
                if p > 0.0 {
                    picked = Some(idx);
                    cumulative += p;
                    if r < cumulative {
                        break;
                    }
                }
            }
            match picked {
                Some(idx) => {
                    arcs.push(idx);
                    s = fsa.arcs()[idx].dst;
                }
                None => break,
            }
        }
        paths.push(Path::from_arcs(fsa, arcs));
    }
    Ok(paths)
}

/// Blank-free label sequences, deduplicated in order of first appearance.
pub fn remove_blanks_unique<'a, I>(sequences: I) -> Vec<Vec<Label>>
where
    I: IntoIterator<Item = &'a [Label]>,
{
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for seq in sequences {
        let tokens: Vec<Label> = seq.iter().copied().filter(|&l| l != BLANK).collect();
        if seen.insert(tokens.clone()) {
            out.push(tokens);
        }
    }
    out
}

/// Linear acceptor of `seq` with zero weights; with `blank_loops` every state
/// also carries a blank self-loop so the acceptor matches any blank padding.
pub fn linear_acceptor(seq: &[Label], blank_loops: bool) -> Fsa {
    let n = seq.len() as StateId + 1;
    let mut arcs = Vec::with_capacity(seq.len() * 2 + 1);
    for s in 0..n {
        if blank_loops {
            arcs.push(Arc::new(s, s, BLANK, 0.0));
        }
        if let Some(&label) = seq.get(s as usize) {
            arcs.push(Arc::new(s, s + 1, label, 0.0));
        }
    }
    Fsa::new(n, arcs, BTreeMap::from([(n - 1, 0.0)])).expect("valid linear acceptor")
}

/// Product of two acceptors on identical labels (blank is an ordinary label
/// here); scores add. Only states reachable from the joint start are built.
pub fn intersect(a: &Fsa, b: &Fsa) -> Fsa {
    let mut index: HashMap<(StateId, StateId), StateId> = HashMap::new();
    let mut queue = VecDeque::new();
    index.insert((a.start(), b.start()), 0);
    queue.push_back((a.start(), b.start()));
    let mut arcs = Vec::new();
    let mut finals = BTreeMap::new();
    while let Some((sa, sb)) = queue.pop_front() {
        let src = index[&(sa, sb)];
        if let (Some(fa), Some(fb)) = (a.final_score(sa), b.final_score(sb)) {
            finals.insert(src, fa + fb);
        }
        for arc_a in a.arcs_from(sa) {
            for arc_b in b.arcs_from(sb).iter().filter(|x| x.label == arc_a.label) {
                let key = (arc_a.dst, arc_b.dst);
                let next = index.len() as StateId;
                let dst = *index.entry(key).or_insert_with(|| {
                    queue.push_back(key);
                    next
                });
                arcs.push(Arc::new(src, dst, arc_a.label, arc_a.score + arc_b.score));
            }
        }
    }
    Fsa::new(index.len() as StateId, arcs, finals).expect("valid product")
}

/// Total probability of all paths whose blank-free labels equal `seq`.
pub fn sequence_total_logprob(lattice: &Fsa, seq: &[Label]) -> Result<f64, FsaError> {
    if seq.contains(&BLANK) {
        return Err(FsaError::InvalidArgument("sequence must be blank-free".into()));
    }
    total_logprob(&intersect(lattice, &linear_acceptor(seq, true)))
}

/// Keeps only states that lie on some complete path, renumbered in their
/// original order. An FSA without complete paths becomes [`Fsa::empty`].
pub fn connect(fsa: &Fsa) -> Fsa {
    let n = fsa.num_states();
    let mut accessible = vec![false; n];
    let mut stack = vec![fsa.start()];
    accessible[fsa.start() as usize] = true;
    while let Some(s) = stack.pop() {
        for arc in fsa.arcs_from(s) {
            if !accessible[arc.dst as usize] {
                accessible[arc.dst as usize] = true;
                stack.push(arc.dst);
            }
        }
    }
    let mut reverse: Vec<Vec<StateId>> = vec![Vec::new(); n];
    for arc in fsa.arcs() {
        reverse[arc.dst as usize].push(arc.src);
    }
    let mut coaccessible = vec![false; n];
    let mut stack: Vec<StateId> = fsa.finals().keys().copied().collect();
    for &s in &stack {
        coaccessible[s as usize] = true;
    }
    while let Some(s) = stack.pop() {
        for &p in &reverse[s as usize] {
            if !coaccessible[p as usize] {
                coaccessible[p as usize] = true;
                stack.push(p);
            }
        }
    }
    let keep: Vec<bool> = (0..n).map(|s| accessible[s] && coaccessible[s]).collect();
    if !keep[fsa.start() as usize] {
        return Fsa::empty();
    }
    let mut remap = vec![StateId::MAX; n];
    let mut next = 0;
    for s in 0..n {
        if keep[s] {
            remap[s] = next;
            next += 1;
        }
    }
    let arcs = fsa
        .arcs()
        .iter()
        .filter(|a| keep[a.src as usize] && keep[a.dst as usize])
        .map(|a| Arc::new(remap[a.src as usize], remap[a.dst as usize], a.label, a.score))
        .collect();
    let finals = fsa
        .finals()
        .iter()
        .filter(|(s, _)| keep[**s as usize])
        .map(|(s, f)| (remap[*s as usize], *f))
        .collect();
    Fsa::new(next, arcs, finals).expect("valid connected fsa")
}

/// Log-semiring epsilon removal, with label 0 as epsilon.
///
/// Every state receives the non-epsilon arcs and final scores of its epsilon
/// closure, weighted by the log-sum of the epsilon paths leading there.
/// Parallel arcs with equal (destination, label) are log-added. The epsilon
/// subgraph must be acyclic. The result is trimmed with [`connect`].
pub fn remove_epsilon(fsa: &Fsa) -> Result<Fsa, FsaError> {
    let closures = epsilon_closures(fsa)?;
    let mut arcs = Vec::new();
    let mut finals = BTreeMap::new();
    for s in 0..fsa.num_states() as StateId {
        let mut merged: Vec<((StateId, Label), f64)> = Vec::new();
        let mut slot: HashMap<(StateId, Label), usize> = HashMap::new();
        let mut final_score = f64::NEG_INFINITY;
        for &(reached, weight) in &closures[s as usize] {
            if let Some(f) = fsa.final_score(reached) {
                final_score = log_add(final_score, weight + f);
            }
            for arc in fsa.arcs_from(reached).iter().filter(|a| a.label != BLANK) {
                let key = (arc.dst, arc.label);
                let w = weight + arc.score;
                match slot.get(&key) {
                    Some(&i) => merged[i].1 = log_add(merged[i].1, w),
                    None => {
                        slot.insert(key, merged.len());
                        merged.push((key, w));
                    }
                }
            }
        }
        arcs.extend(
            merged
                .into_iter()
                .map(|((dst, label), w)| Arc::new(s, dst, label, w)),
        );
        if final_score > f64::NEG_INFINITY {
            finals.insert(s, final_score);
        }
    }
    Ok(connect(&Fsa::new(fsa.num_states() as StateId, arcs, finals)?))
}

/// For each state, the states reachable through epsilon arcs (itself
/// included, weight 0) with the log-sum of epsilon path weights.
fn epsilon_closures(fsa: &Fsa) -> Result<Vec<Vec<(StateId, f64)>>, FsaError> {
    let eps_only = Fsa::new(
        fsa.num_states() as StateId,
        fsa.arcs().iter().copied().filter(|a| a.label == BLANK).collect(),
        BTreeMap::new(),
    )?;
    let order = topo_order(&eps_only)?;
    let mut closures: Vec<Vec<(StateId, f64)>> = vec![Vec::new(); fsa.num_states()];
    for &s in order.iter().rev() {
        let mut acc: BTreeMap<StateId, f64> = BTreeMap::from([(s, 0.0)]);
        for arc in eps_only.arcs_from(s) {
            for &(reached, w) in &closures[arc.dst as usize] {
                let entry = acc.entry(reached).or_insert(f64::NEG_INFINITY);
                *entry = log_add(*entry, arc.score + w);
            }
        }
        closures[s as usize] = acc.into_iter().collect();
    }
    Ok(closures)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fsa::parse_fsa_text;
    use crate::logspace::log_sum_exp;
    use rand::Rng;

    /// All complete paths of an acyclic FSA as (arc indices, score).
    fn enumerate_paths(fsa: &Fsa) -> Vec<(Vec<usize>, f64)> {
        fn walk(fsa: &Fsa, s: StateId, prefix: &mut Vec<usize>, acc: f64, out: &mut Vec<(Vec<usize>, f64)>) {
            if let Some(f) = fsa.final_score(s) {
                out.push((prefix.clone(), acc + f));
            }
            for idx in fsa.arc_range(s) {
                let arc = fsa.arcs()[idx];
                prefix.push(idx);
                walk(fsa, arc.dst, prefix, acc + arc.score, out);
                prefix.pop();
            }
        }
        let mut out = Vec::new();
        walk(fsa, fsa.start(), &mut Vec::new(), 0.0, &mut out);
        out
    }

    fn random_dag(rng: &mut ChaCha8Rng, n: u32, labels: u32, density: f64) -> Fsa {
        let mut arcs = Vec::new();
        for s in 0..n {
            for d in s + 1..n {
                if rng.random::<f64>() < density {
                    let label = rng.random_range(0..labels);
                    arcs.push(Arc::new(s, d, label, rng.random_range(-3.0..0.0)));
                }
            }
        }
        let mut finals = BTreeMap::from([(n - 1, rng.random_range(-1.0..0.0))]);
        if n > 2 && rng.random::<bool>() {
            finals.insert(n / 2, rng.random_range(-2.0..0.0));
        }
        Fsa::new(n, arcs, finals).unwrap()
    }

    #[test]
    fn best_of_two_parallel_arcs() {
        let fsa = parse_fsa_text("0 1 1 -1.0\n0 1 2 -2.0\n1 0\n").unwrap();
        let path = best_path(&fsa).unwrap();
        assert_eq!(path.labels, vec![1]);
        assert_eq!(path.score, -1.0);
    }

    #[test]
    fn single_chain() {
        let fsa = parse_fsa_text("0 1 0 -0.5\n1 2 3 -0.25\n2 3 3 -1\n3 -0.125\n").unwrap();
        let path = best_path(&fsa).unwrap();
        assert_eq!(path.labels, vec![0, 3, 3]);
        assert_eq!(path.score, -1.875);
        assert!((total_logprob(&fsa).unwrap() + 1.875).abs() < 1e-15);
        let samples = sample_nbest(&fsa, 5, 7).unwrap();
        assert_eq!(samples.len(), 5);
        assert!(samples.iter().all(|p| *p == path));
    }

    #[test]
    fn ties_take_smallest_arc_index() {
        let fsa = parse_fsa_text("0 1 2 -1\n0 1 1 -1\n1 0\n").unwrap();
        assert_eq!(best_path(&fsa).unwrap().arcs, vec![0]);
    }

    #[test]
    fn two_halves_sum_to_one() {
        let fsa = parse_fsa_text(&format!("0 1 1 {h}\n0 1 2 {h}\n1 0\n", h = 0.5f64.ln())).unwrap();
        assert!(total_logprob(&fsa).unwrap().abs() < 1e-15);
    }

    #[test]
    fn empty_lattice_errors() {
        let fsa = Fsa::new(2, vec![Arc::new(0, 1, 1, 0.0)], BTreeMap::new()).unwrap();
        assert_eq!(best_path(&fsa), Err(FsaError::EmptyLattice));
        assert_eq!(total_logprob(&fsa).unwrap(), f64::NEG_INFINITY);
        assert!(sample_nbest(&fsa, 3, 0).unwrap().is_empty());
    }

    #[test]
    fn cycles_are_rejected() {
        let fsa = parse_fsa_text("0 0 1 -1\n0 0\n").unwrap();
        assert_eq!(total_logprob(&fsa), Err(FsaError::Cyclic));
        assert_eq!(best_path(&fsa).unwrap_err(), FsaError::Cyclic);
    }

    #[test]
    fn best_and_total_match_enumeration_on_random_dags() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let fsa = random_dag(&mut rng, 20, 4, 0.15);
            let paths = enumerate_paths(&fsa);
            let total = total_logprob(&fsa).unwrap();
            if paths.is_empty() {
                assert_eq!(total, f64::NEG_INFINITY);
                continue;
            }
            let brute = log_sum_exp(paths.iter().map(|p| p.1));
            assert!((total - brute).abs() <= 1e-9, "{total} vs {brute}");
            let best = best_path(&fsa).unwrap();
            let (argmax, max) = paths
                .iter()
                .fold((None, f64::NEG_INFINITY), |acc, p| if p.1 > acc.1 { (Some(&p.0), p.1) } else { acc });
            assert_eq!(Some(&best.arcs), argmax);
            assert!((best.score - max).abs() < 1e-12);
            assert!(total >= best.score);
        }
    }

    #[test]
    fn equal_paths_sample_evenly() {
        let h = 0.5f64.ln();
        let fsa = parse_fsa_text(&format!("0 1 1 {h}\n0 1 2 {h}\n1 0\n")).unwrap();
        let samples = sample_nbest(&fsa, 10_000, 3).unwrap();
        let ones = samples.iter().filter(|p| p.labels == [1]).count() as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&ones), "{ones}");
    }

    #[test]
    fn sampled_frequencies_follow_path_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fsa = loop {
            let fsa = random_dag(&mut rng, 7, 3, 0.45);
            let n = enumerate_paths(&fsa).len();
            if (4..=30).contains(&n) {
                break fsa;
            }
        };
        let total = total_logprob(&fsa).unwrap();
        let n = 20_000;
        let samples = sample_nbest(&fsa, n, 99).unwrap();
        let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
        for p in &samples {
            *counts.entry(p.arcs.clone()).or_default() += 1;
        }
        for (arcs, score) in enumerate_paths(&fsa) {
            let p = (score - total).exp();
            let expected = p * n as f64;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            let got = counts.get(&arcs).copied().unwrap_or(0) as f64;
            assert!((got - expected).abs() <= 3.0 * sigma + 1e-9, "{got} vs {expected} ± {sigma}");
        }
        assert_eq!(samples, sample_nbest(&fsa, n, 99).unwrap());
    }

    #[test]
    fn blank_removal_and_dedup() {
        let seqs: Vec<Vec<Label>> = vec![vec![0, 3, 0, 3], vec![3, 0, 0, 3]];
        assert_eq!(remove_blanks_unique(seqs.iter().map(|s| s.as_slice())), vec![vec![3, 3]]);
        let seqs: Vec<Vec<Label>> = vec![vec![0, 0]];
        assert_eq!(remove_blanks_unique(seqs.iter().map(|s| s.as_slice())), vec![Vec::<Label>::new()]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seqs: Vec<Vec<Label>> = (0..100)
            .map(|_| (0..rng.random_range(0..5)).map(|_| rng.random_range(0..3)).collect())
            .collect();
        let unique = remove_blanks_unique(seqs.iter().map(|s| s.as_slice()));
        assert!(unique.len() <= seqs.len());
        assert!(unique.iter().all(|s| !s.contains(&BLANK)));
    }

    #[test]
    fn sequence_scores() {
        let fsa = parse_fsa_text("0 1 0 -0.5\n1 2 3 -0.25\n2 0\n").unwrap();
        assert!((sequence_total_logprob(&fsa, &[3]).unwrap() + 0.75).abs() < 1e-15);
        assert_eq!(sequence_total_logprob(&fsa, &[9]).unwrap(), f64::NEG_INFINITY);
        assert!(sequence_total_logprob(&fsa, &[0]).is_err());
    }

    #[test]
    fn sequence_totals_partition_the_lattice() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..30 {
            let fsa = random_dag(&mut rng, 8, 3, 0.4);
            let paths = enumerate_paths(&fsa);
            if paths.is_empty() {
                continue;
            }
            let labels: Vec<Vec<Label>> = paths
                .iter()
                .map(|(arcs, _)| arcs.iter().map(|&i| fsa.arcs()[i].label).collect())
                .collect();
            let unique = remove_blanks_unique(labels.iter().map(|s| s.as_slice()));
            let sum: f64 = unique
                .iter()
                .map(|s| sequence_total_logprob(&fsa, s).unwrap().exp())
                .sum();
            let total = total_logprob(&fsa).unwrap().exp();
            assert!((sum - total).abs() <= 1e-8, "{sum} vs {total}");
        }
    }

    #[test]
    fn connect_trims_dead_states() {
        let fsa = parse_fsa_text("0 1 1 0\n0 2 2 0\n2 3 1 0\n1 0\n3 0\n4 0\n").unwrap();
        // State 4 is final but unreachable.
        let trimmed = connect(&fsa);
        assert_eq!(trimmed.num_states(), 4);
        let dead = Fsa::new(3, vec![Arc::new(0, 1, 1, 0.0)], BTreeMap::from([(2, 0.0)])).unwrap();
        assert_eq!(connect(&dead), Fsa::empty());
    }

    /// Per-sequence totals computed by path enumeration, epsilons dropped.
    fn sequence_totals(fsa: &Fsa) -> BTreeMap<Vec<Label>, f64> {
        let mut out: BTreeMap<Vec<Label>, f64> = BTreeMap::new();
        for (arcs, score) in enumerate_paths(fsa) {
            let seq: Vec<Label> = arcs.iter().map(|&i| fsa.arcs()[i].label).filter(|&l| l != BLANK).collect();
            let e = out.entry(seq).or_insert(f64::NEG_INFINITY);
            *e = log_add(*e, score);
        }
        out
    }

    #[test]
    fn epsilon_removal_preserves_sequence_totals() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let n = rng.random_range(2..=6);
            let fsa = random_dag(&mut rng, n, 3, 0.5);
            let before = sequence_totals(&fsa);
            let removed = remove_epsilon(&fsa).unwrap();
            assert!(removed.is_epsilon_free());
            let after = sequence_totals(&removed);
            assert_eq!(before.keys().collect::<Vec<_>>(), after.keys().collect::<Vec<_>>());
            for (seq, w) in &before {
                assert!((w - after[seq]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn epsilon_cycles_are_rejected() {
        let fsa = parse_fsa_text("0 1 0 -1\n1 0 0 -1\n1 0\n").unwrap();
        assert_eq!(remove_epsilon(&fsa), Err(FsaError::Cyclic));
    }
}
